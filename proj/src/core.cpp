#include "expool/core.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

namespace expool {

std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidInput: return "InvalidInput";
        case ErrorCode::UnknownDegradation: return "UnknownDegradation";
        case ErrorCode::InvalidMetric: return "InvalidMetric";
        case ErrorCode::MetricSetMismatch: return "MetricSetMismatch";
        case ErrorCode::CandidateSetMismatch: return "CandidateSetMismatch";
        case ErrorCode::NotEnoughCandidates: return "NotEnoughCandidates";
        case ErrorCode::InvalidTieIntensity: return "InvalidTieIntensity";
        case ErrorCode::DimensionError: return "DimensionError";
        case ErrorCode::DegenerateData: return "DegenerateData";
        case ErrorCode::NumericalInstability: return "NumericalInstability";
        case ErrorCode::DegenerateEmbedding: return "DegenerateEmbedding";
        case ErrorCode::OracleUnavailable: return "OracleUnavailable";
        case ErrorCode::ConfigError: return "ConfigError";
        case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
        case ErrorCode::ParseError: return "ParseError";
        case ErrorCode::InsufficientOverlap: return "InsufficientOverlap";
        case ErrorCode::ProfileNotStabilizable: return "ProfileNotStabilizable";
        case ErrorCode::ImageNotFound: return "ImageNotFound";
        case ErrorCode::UnknownTool: return "UnknownTool";
        case ErrorCode::SpecError: return "SpecError";
        case ErrorCode::TooLarge: return "TooLarge";
        case ErrorCode::ReplayMismatch: return "ReplayMismatch";
    }
    return "Unknown";
}

std::string_view to_string(Preference p) {
    return p == Preference::Fidelity ? "fidelity" : "perception";
}

Preference parse_preference(std::string_view text) {
    std::string lower(text);
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (lower == "fidelity") return Preference::Fidelity;
    if (lower == "perception") return Preference::Perception;
    throw Error(ErrorCode::InvalidInput, "unknown preference '" + std::string(text) + "'");
}

template <typename Tag>
Token<Tag>::Token(std::string value) : value_(std::move(value)) {
    auto not_space = [](unsigned char c) { return !std::isspace(c); };
    value_.erase(value_.begin(), std::find_if(value_.begin(), value_.end(), not_space));
    value_.erase(std::find_if(value_.rbegin(), value_.rend(), not_space).base(), value_.end());
    if (value_.empty()) throw Error(ErrorCode::InvalidInput, "empty token");
    if constexpr (Tag::lowercase) {
        std::transform(value_.begin(), value_.end(), value_.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        // '+' and "->" are key separators.
        if (value_.find('+') != std::string::npos || value_.find("->") != std::string::npos)
            throw Error(ErrorCode::InvalidInput, "degradation id contains a separator: " + value_);
    }
}

template class Token<detail::DegradationTag>;
template class Token<detail::ToolTag>;

DegradationSet::DegradationSet(std::initializer_list<DegradationType> members)
    : DegradationSet(std::vector<DegradationType>(members)) {}

DegradationSet::DegradationSet(const std::vector<DegradationType>& members) : members_(members) {
    std::sort(members_.begin(), members_.end());
    if (std::adjacent_find(members_.begin(), members_.end()) != members_.end())
        throw Error(ErrorCode::InvalidInput, "duplicate degradation in set");
}

bool DegradationSet::contains(const DegradationType& d) const {
    return std::binary_search(members_.begin(), members_.end(), d);
}

std::string canonical_key(const DegradationSet& degradations) {
    if (degradations.empty()) throw Error(ErrorCode::InvalidInput, "empty degradation set");
    std::string key;
    for (const auto& d : degradations.members()) {
        if (!key.empty()) key += '+';
        key += d.str();
    }
    return key;
}

DegradationSet parse_canonical_key(std::string_view key) {
    std::vector<DegradationType> members;
    std::size_t start = 0;
    while (start <= key.size()) {
        auto end = key.find('+', start);
        if (end == std::string_view::npos) end = key.size();
        members.emplace_back(std::string(key.substr(start, end - start)));
        start = end + 1;
    }
    return DegradationSet(members);
}

void ToolRegistry::add(const DegradationType& degradation, const ToolId& tool) {
    auto& list = tools_[degradation];
    if (std::find(list.begin(), list.end(), tool) != list.end())
        throw Error(ErrorCode::InvalidInput,
                    "tool " + tool.str() + " registered twice for " + degradation.str());
    list.push_back(tool);
}

const std::vector<ToolId>& ToolRegistry::tools(const DegradationType& degradation) const {
    auto it = tools_.find(degradation);
    if (it == tools_.end() || it->second.empty())
        throw Error(ErrorCode::UnknownDegradation, "no tools registered for " + degradation.str());
    return it->second;
}

bool ToolRegistry::contains(const DegradationType& degradation) const {
    auto it = tools_.find(degradation);
    return it != tools_.end() && !it->second.empty();
}

std::string order_key(const RemovalOrder& order) {
    std::string key;
    for (const auto& d : order) {
        if (!key.empty()) key += " -> ";
        key += d.str();
    }
    return key;
}

RemovalOrder parse_order_key(std::string_view key) {
    RemovalOrder order;
    constexpr std::string_view sep = " -> ";
    std::size_t start = 0;
    while (true) {
        auto end = key.find(sep, start);
        if (end == std::string_view::npos) {
            order.emplace_back(std::string(key.substr(start)));
            break;
        }
        order.emplace_back(std::string(key.substr(start, end - start)));
        start = end + sep.size();
    }
    return order;
}

std::string PlanCandidate::key() const {
    return is_tool() ? tool().str() : order_key(order());
}

std::size_t candidate_count(const DegradationSet& degradations, const ToolRegistry& registry) {
    if (degradations.empty()) throw Error(ErrorCode::InvalidInput, "empty degradation set");
    if (degradations.size() > kMaxDegradations)
        throw Error(ErrorCode::TooLarge, "at most 4 degradations are supported");
    for (const auto& d : degradations.members()) (void)registry.tools(d);
    if (degradations.size() == 1) return registry.tools(degradations.members().front()).size();
    std::size_t n = 1;
    for (std::size_t i = 2; i <= degradations.size(); ++i) n *= i;
    return n;
}

std::vector<PlanCandidate> enumerate_candidates(const DegradationSet& degradations,
                                                const ToolRegistry& registry) {
    candidate_count(degradations, registry);  // validates
    std::vector<PlanCandidate> out;
    if (degradations.size() == 1) {
        for (const auto& tool : registry.tools(degradations.members().front()))
            out.emplace_back(tool);
        return out;
    }
    RemovalOrder order = degradations.members();  // sorted, so permutations come out lexicographic
    do {
        out.emplace_back(order);
    } while (std::next_permutation(order.begin(), order.end()));
    return out;
}

void validate_metric_vector(const MetricSet& metrics, const MetricVector& values) {
    if (values.size() != metrics.size())
        throw Error(ErrorCode::MetricSetMismatch, "metric vector size differs from metric set");
    for (const auto& m : metrics) {
        auto it = values.find(m.name);
        if (it == values.end())
            throw Error(ErrorCode::MetricSetMismatch, "missing metric " + m.name);
        if (!std::isfinite(it->second))
            throw Error(ErrorCode::InvalidMetric, "non-finite value for " + m.name);
    }
}

Ranking::Ranking(std::vector<std::string> best_first) : order_(std::move(best_first)) {
    std::vector<std::string> sorted = order_;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw Error(ErrorCode::InvalidInput, "duplicate candidate in ranking");
}

Ranking Ranking::from_map(const std::map<std::string, int>& ranks) {
    std::vector<std::string> order(ranks.size());
    std::vector<bool> seen(ranks.size(), false);
    for (const auto& [key, rank] : ranks) {
        if (rank < 1 || static_cast<std::size_t>(rank) > ranks.size() || seen[rank - 1])
            throw Error(ErrorCode::InvalidInput, "ranks must be a permutation of 1..k");
        seen[rank - 1] = true;
        order[rank - 1] = key;
    }
    return Ranking(std::move(order));
}

std::map<std::string, int> Ranking::to_map() const {
    std::map<std::string, int> out;
    for (std::size_t i = 0; i < order_.size(); ++i) out[order_[i]] = static_cast<int>(i + 1);
    return out;
}

std::optional<int> Ranking::rank_of(std::string_view key) const {
    for (std::size_t i = 0; i < order_.size(); ++i)
        if (order_[i] == key) return static_cast<int>(i + 1);
    return std::nullopt;
}

const std::string& Ranking::top() const {
    if (order_.empty()) throw Error(ErrorCode::InvalidInput, "empty ranking");
    return order_.front();
}

std::string_view to_string(EventKind kind) {
    switch (kind) {
        case EventKind::Perceive: return "perceive";
        case EventKind::Plan: return "plan";
        case EventKind::Execute: return "execute";
        case EventKind::Reflect: return "reflect";
        case EventKind::OrderRollback: return "order_rollback";
        case EventKind::ToolRollback: return "tool_rollback";
        case EventKind::Terminate: return "terminate";
    }
    return "unknown";
}

EventKind parse_event_kind(std::string_view text) {
    for (auto kind : {EventKind::Perceive, EventKind::Plan, EventKind::Execute, EventKind::Reflect,
                      EventKind::OrderRollback, EventKind::ToolRollback, EventKind::Terminate})
        if (to_string(kind) == text) return kind;
    throw Error(ErrorCode::ParseError, "unknown event kind '" + std::string(text) + "'");
}

const HistoryEvent& History::append(EventKind kind, std::string detail) {
    int step = events_.empty() ? 0 : events_.back().step + 1;
    events_.push_back({step, kind, std::move(detail)});
    return events_.back();
}

void History::append(HistoryEvent event) {
    if (!events_.empty() && event.step <= events_.back().step)
        throw Error(ErrorCode::InvalidInput, "history steps must be strictly increasing");
    events_.push_back(std::move(event));
}

}  // namespace expool
