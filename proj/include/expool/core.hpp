#pragma once

#include "expool/error.hpp"

#include <compare>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace expool {

// Targeted visual-quality criterion; selects the active metric set.
enum class Preference { Fidelity, Perception };

std::string_view to_string(Preference p);
Preference parse_preference(std::string_view text);

inline constexpr std::size_t kMaxDegradations = 4;

namespace detail {
struct DegradationTag {
    static constexpr bool lowercase = true;
};
struct ToolTag {
    static constexpr bool lowercase = false;
};
}  // namespace detail

// Non-empty string token. Degradation ids are case-normalized, tool ids are kept verbatim.
template <typename Tag>
class Token {
public:
    Token() = default;
    explicit Token(std::string value);
    Token(const char* value) : Token(std::string(value)) {}

    const std::string& str() const noexcept { return value_; }

    auto operator<=>(const Token&) const = default;
    bool operator==(const Token&) const = default;

private:
    std::string value_;
};

using DegradationType = Token<detail::DegradationTag>;
using ToolId = Token<detail::ToolTag>;
using ImageRef = std::string;

class DegradationSet {
public:
    DegradationSet() = default;
    DegradationSet(std::initializer_list<DegradationType> members);
    explicit DegradationSet(const std::vector<DegradationType>& members);

    // Members sorted lexicographically.
    const std::vector<DegradationType>& members() const noexcept { return members_; }
    std::size_t size() const noexcept { return members_.size(); }
    bool empty() const noexcept { return members_.empty(); }
    bool contains(const DegradationType& d) const;

    bool operator==(const DegradationSet&) const = default;

private:
    std::vector<DegradationType> members_;
};

// "dark+motion blur": members sorted and joined by '+'.
std::string canonical_key(const DegradationSet& degradations);
DegradationSet parse_canonical_key(std::string_view key);

// Candidate set T(d) per degradation, in registry order.
class ToolRegistry {
public:
    void add(const DegradationType& degradation, const ToolId& tool);
    const std::vector<ToolId>& tools(const DegradationType& degradation) const;
    bool contains(const DegradationType& degradation) const;
    const std::map<DegradationType, std::vector<ToolId>>& entries() const noexcept { return tools_; }

private:
    std::map<DegradationType, std::vector<ToolId>> tools_;
};

using RemovalOrder = std::vector<DegradationType>;

// "motion blur -> dark"
std::string order_key(const RemovalOrder& order);
RemovalOrder parse_order_key(std::string_view key);

class PlanCandidate {
public:
    explicit PlanCandidate(ToolId tool) : value_(std::move(tool)) {}
    explicit PlanCandidate(RemovalOrder order) : value_(std::move(order)) {}

    bool is_tool() const noexcept { return std::holds_alternative<ToolId>(value_); }
    const ToolId& tool() const { return std::get<ToolId>(value_); }
    const RemovalOrder& order() const { return std::get<RemovalOrder>(value_); }
    std::string key() const;

private:
    std::variant<ToolId, RemovalOrder> value_;
};

// Tools for |D| = 1, all |D|! removal orders (lexicographic) otherwise.
std::vector<PlanCandidate> enumerate_candidates(const DegradationSet& degradations,
                                                const ToolRegistry& registry);

// Number of candidates an exhaustive record holds for this set.
std::size_t candidate_count(const DegradationSet& degradations, const ToolRegistry& registry);

enum class MetricDirection { HigherBetter, LowerBetter };

struct MetricSpec {
    std::string name;
    MetricDirection direction = MetricDirection::HigherBetter;

    bool operator==(const MetricSpec&) const = default;
};

using MetricSet = std::vector<MetricSpec>;
using MetricVector = std::map<std::string, double>;

// Throws MetricSetMismatch unless the vector covers exactly the metric set with finite values.
void validate_metric_vector(const MetricSet& metrics, const MetricVector& values);

// Rank 1 is best. Ranks are always a gap-free permutation of 1..k.
class Ranking {
public:
    Ranking() = default;
    explicit Ranking(std::vector<std::string> best_first);

    static Ranking from_map(const std::map<std::string, int>& ranks);

    const std::vector<std::string>& ordered() const noexcept { return order_; }
    std::map<std::string, int> to_map() const;
    std::optional<int> rank_of(std::string_view key) const;
    std::size_t size() const noexcept { return order_.size(); }
    bool empty() const noexcept { return order_.empty(); }
    const std::string& top() const;

    bool operator==(const Ranking&) const = default;

private:
    std::vector<std::string> order_;
};

enum class EventKind { Perceive, Plan, Execute, Reflect, OrderRollback, ToolRollback, Terminate };

std::string_view to_string(EventKind kind);
EventKind parse_event_kind(std::string_view text);

struct HistoryEvent {
    int step = 0;
    EventKind kind = EventKind::Plan;
    std::string detail;

    bool operator==(const HistoryEvent&) const = default;
};

// Append-only log with strictly increasing step indices.
class History {
public:
    const HistoryEvent& append(EventKind kind, std::string detail);
    void append(HistoryEvent event);
    const std::vector<HistoryEvent>& events() const noexcept { return events_; }

    bool operator==(const History&) const = default;

private:
    std::vector<HistoryEvent> events_;
};

}  // namespace expool
