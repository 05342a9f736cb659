#include "expool/oracles.hpp"

#include "expool/prompts.hpp"

#include <httplib.h>

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>
#include <thread>

namespace expool {

namespace {

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

bool all_digits(const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

double elapsed_ms(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

std::string prompts::render(std::string_view tmpl, const std::map<std::string, std::string>& values) {
    std::string out;
    out.reserve(tmpl.size());
    std::size_t pos = 0;
    while (pos < tmpl.size()) {
        auto open = tmpl.find('{', pos);
        if (open == std::string_view::npos) break;
        auto close = tmpl.find('}', open);
        if (close == std::string_view::npos) break;
        out.append(tmpl.substr(pos, open - pos));
        std::string name(tmpl.substr(open + 1, close - open - 1));
        auto it = values.find(name);
        if (it != values.end()) {
            out += it->second;
        } else {
            out.append(tmpl.substr(open, close - open + 1));
        }
        pos = close + 1;
    }
    out.append(tmpl.substr(pos));
    return out;
}

std::string_view to_string(Capability c) {
    switch (c) {
        case Capability::DistillInsight: return "distill_insight";
        case Capability::Describe: return "describe";
        case Capability::DebateTurn: return "debate_turn";
        case Capability::RefineChoice: return "refine_choice";
        case Capability::ProposePlan: return "propose_plan";
        case Capability::Embed: return "embed";
    }
    return "unknown";
}

Capability parse_capability(std::string_view text) {
    for (auto c : {Capability::DistillInsight, Capability::Describe, Capability::DebateTurn,
                   Capability::RefineChoice, Capability::ProposePlan, Capability::Embed})
        if (to_string(c) == text) return c;
    throw Error(ErrorCode::ParseError, "unknown capability '" + std::string(text) + "'");
}

// ---- transcript --------------------------------------------------------------------------

void Transcript::append(TranscriptEntry entry) {
    std::lock_guard lock(mutex_);
    entries_.push_back(std::move(entry));
}

std::vector<TranscriptEntry> Transcript::entries() const {
    std::lock_guard lock(mutex_);
    return entries_;
}

std::size_t Transcript::size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
}

Json Transcript::to_json() const {
    Json calls = Json::array();
    for (const auto& e : entries()) {
        calls.push_back({{"capability", to_string(e.capability)},
                         {"request", e.request},
                         {"reply", e.reply},
                         {"latency_ms", e.latency_ms}});
    }
    return Json{{"schema", 1}, {"calls", calls}};
}

Transcript Transcript::from_json(const Json& doc) {
    if (!doc.contains("schema") || doc["schema"] != 1)
        throw Error(ErrorCode::UnsupportedVersion, "transcript schema must be 1");
    Transcript t;
    for (const auto& c : doc.at("calls")) {
        TranscriptEntry e;
        e.capability = parse_capability(c.at("capability").get<std::string>());
        e.request = c.at("request");
        e.reply = c.at("reply").get<std::string>();
        e.latency_ms = c.value("latency_ms", 0.0);
        t.entries_.push_back(std::move(e));
    }
    return t;
}

void Transcript::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::InvalidInput, "cannot write " + path.string());
    out << to_json().dump(1) << '\n';
}

Transcript Transcript::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::InvalidInput, "cannot read " + path.string());
    try {
        return from_json(Json::parse(in));
    } catch (const Json::exception& e) {
        throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
    }
}

// ---- typed helpers -----------------------------------------------------------------------

std::string LanguageOracle::distill_insight(const std::string& prompt, const Json& extra) {
    Json req = extra;
    req["prompt"] = prompt;
    return call(Capability::DistillInsight, req);
}

std::string LanguageOracle::describe(const ImageRef& image, const std::string& degradation_key) {
    Json req{{"prompt", prompts::render(prompts::kDescribe,
                                        {{"image", image}, {"degradation_type", degradation_key}})},
             {"image", image},
             {"degradation_type", degradation_key}};
    return trim(call(Capability::Describe, req));
}

std::string LanguageOracle::debate_turn(const std::string& role, const std::string& context,
                                        const Json& extra) {
    Json req = extra;
    req["prompt"] = prompts::render(prompts::kDebateRole, {{"role", role}, {"context", context}});
    req["role"] = role;
    return call(Capability::DebateTurn, req);
}

std::string LanguageOracle::refine_choice(const std::vector<std::string>& candidate_texts,
                                          const ImageRef& image, const std::string& degradation_key) {
    std::string listing;
    for (std::size_t i = 0; i < candidate_texts.size(); ++i)
        listing += std::to_string(i + 1) + ". " + candidate_texts[i] + "\n";
    Json req{{"prompt", prompts::render(prompts::kRefine, {{"image", image},
                                                           {"degradation_type", degradation_key},
                                                           {"candidates", listing}})},
             {"image", image},
             {"degradation_type", degradation_key},
             {"candidates", candidate_texts}};
    return call(Capability::RefineChoice, req);
}

std::string LanguageOracle::propose_plan(const std::string& prompt, const Json& extra) {
    Json req = extra;
    req["prompt"] = prompt;
    return call(Capability::ProposePlan, req);
}

// ---- recording and replay ----------------------------------------------------------------

std::string RecordingLanguageOracle::call(Capability capability, const Json& request) {
    auto start = std::chrono::steady_clock::now();
    std::string reply = inner_.call(capability, request);
    transcript_.append({capability, request, reply, elapsed_ms(start)});
    return reply;
}

Eigen::VectorXd RecordingEncoderOracle::embed(const ImageRef& image) {
    auto start = std::chrono::steady_clock::now();
    Eigen::VectorXd v = inner_.embed(image);
    Json arr = Json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
    transcript_.append({Capability::Embed, Json{{"image", image}}, arr.dump(), elapsed_ms(start)});
    return v;
}

TranscriptReplay::TranscriptReplay(const Transcript& transcript) {
    for (auto& e : transcript.entries()) {
        if (e.capability == Capability::Embed) encoder_.push_back(e);
        else language_.push_back(e);
    }
}

std::string TranscriptReplay::next(Capability capability, const Json& request) {
    std::lock_guard lock(mutex_);
    auto& list = capability == Capability::Embed ? encoder_ : language_;
    auto& pos = capability == Capability::Embed ? encoder_pos_ : language_pos_;
    if (pos >= list.size())
        throw Error(ErrorCode::ReplayMismatch, "transcript exhausted at " + std::string(to_string(capability)));
    const auto& e = list[pos];
    if (e.capability != capability || e.request.dump() != request.dump())
        throw Error(ErrorCode::ReplayMismatch, "call " + std::to_string(pos) + " differs from transcript (" +
                                                   std::string(to_string(capability)) + ")");
    ++pos;
    return e.reply;
}

bool TranscriptReplay::exhausted() const {
    return language_pos_ == language_.size() && encoder_pos_ == encoder_.size();
}

std::string ReplayLanguageOracle::call(Capability capability, const Json& request) {
    return replay_.next(capability, request);
}

Eigen::VectorXd ReplayEncoderOracle::embed(const ImageRef& image) {
    auto arr = Json::parse(replay_.next(Capability::Embed, Json{{"image", image}}));
    Eigen::VectorXd v(static_cast<Eigen::Index>(arr.size()));
    for (std::size_t i = 0; i < arr.size(); ++i) v(static_cast<Eigen::Index>(i)) = arr[i].get<double>();
    return v;
}

std::string UnavailableLanguageOracle::call(Capability capability, const Json&) {
    throw Error(ErrorCode::OracleUnavailable, std::string(to_string(capability)) + ": no backend");
}

// ---- remote ------------------------------------------------------------------------------

HttpResponse HttpTransport::post(const std::string& url, const std::string& body,
                                 const std::vector<std::pair<std::string, std::string>>& headers,
                                 std::chrono::milliseconds timeout) {
    count_request();
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw Error(ErrorCode::ConfigError, "endpoint needs a scheme: " + url);
    auto path_start = url.find('/', scheme_end + 3);
    std::string base = path_start == std::string::npos ? url : url.substr(0, path_start);
    std::string path = path_start == std::string::npos ? "/" : url.substr(path_start);
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
    if (url.rfind("https", 0) == 0) throw Error(ErrorCode::ConfigError, "built without TLS support");
#endif
    httplib::Client client(base);
    auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
    client.set_connection_timeout(secs);
    client.set_read_timeout(secs);
    client.set_write_timeout(secs);
    httplib::Headers h;
    for (auto& [k, v] : headers) h.emplace(k, v);
    auto res = client.Post(path, h, body, "application/json");
    if (!res) throw TransportFailure("transport error: " + httplib::to_string(res.error()));
    return {res->status, res->body};
}

Json chat_request_body(const std::string& model, const std::string& prompt) {
    return Json{{"model", model},
                {"temperature", 0},
                {"messages", Json::array({Json{{"role", "user"}, {"content", prompt}}})}};
}

std::string chat_reply_text(const std::string& body) {
    try {
        auto doc = Json::parse(body);
        return doc.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const Json::exception& e) {
        throw Error(ErrorCode::ParseError, std::string("malformed chat reply: ") + e.what());
    }
}

RemoteLanguageOracle::RemoteLanguageOracle(RemoteConfig config, std::shared_ptr<ChatTransport> transport)
    : config_(std::move(config)), transport_(std::move(transport)) {
    if (config_.endpoint.empty()) throw Error(ErrorCode::ConfigError, "remote oracle needs an endpoint");
    if (config_.model.empty()) throw Error(ErrorCode::ConfigError, "remote oracle needs a model name");
    if (!transport_) transport_ = std::make_shared<HttpTransport>();
    const char* key = std::getenv(config_.api_key_env.c_str());
    if (!key || !*key) throw Error(ErrorCode::ConfigError, "credential variable " + config_.api_key_env + " is unset");
    api_key_ = key;
}

std::string RemoteLanguageOracle::call(Capability capability, const Json& request) {
    std::string model = config_.model;
    if (auto it = config_.model_override.find(capability); it != config_.model_override.end())
        model = it->second;
    std::string prompt = request.at("prompt").get<std::string>();
    const std::string body = chat_request_body(model, prompt).dump();
    std::string url = config_.endpoint;
    if (!url.empty() && url.back() == '/') url.pop_back();
    url += "/chat/completions";
    std::vector<std::pair<std::string, std::string>> headers{{"Authorization", "Bearer " + api_key_}};

    auto delay = config_.backoff;
    std::string last_error;
    for (int attempt = 1; attempt <= config_.attempts; ++attempt) {
        last_attempts_ = attempt;
        try {
            auto res = transport_->post(url, body, headers, config_.timeout);
            if (res.status == 401 || res.status == 403)
                throw Error(ErrorCode::ConfigError, "authentication rejected (HTTP " + std::to_string(res.status) + ")");
            if (res.status >= 200 && res.status < 300) return chat_reply_text(res.body);
            last_error = "HTTP " + std::to_string(res.status);
            if (res.status < 500 && res.status != 429 && res.status != 408)
                throw Error(ErrorCode::OracleUnavailable, "request rejected: " + last_error);
        } catch (const TransportFailure& e) {
            last_error = e.what();
        }
        if (attempt < config_.attempts && delay.count() > 0) {
            std::this_thread::sleep_for(delay);
            delay *= 2;
        }
    }
    throw Error(ErrorCode::OracleUnavailable, std::string(to_string(capability)) + " failed after " +
                                                  std::to_string(config_.attempts) + " attempts: " + last_error);
}

// ---- parsing -----------------------------------------------------------------------------

std::string_view to_string(MetaOpKind kind) {
    switch (kind) {
        case MetaOpKind::Add: return "add";
        case MetaOpKind::Merge: return "merge";
        case MetaOpKind::Replace: return "replace";
        case MetaOpKind::Update: return "update";
        case MetaOpKind::Delete: return "delete";
    }
    return "add";
}

PlanParse parse_plan_lines(std::string_view reply) {
    PlanParse out;
    // Prefer quoted list items; otherwise treat each non-empty line as one item.
    std::vector<std::string> items;
    static const std::regex quoted("\"([^\"]*)\"|'([^']*)'");
    std::string text(reply);
    for (std::sregex_iterator it(text.begin(), text.end(), quoted), end; it != end; ++it)
        items.push_back((*it)[1].matched ? (*it)[1].str() : (*it)[2].str());
    if (items.empty()) {
        std::istringstream in(text);
        std::string line;
        while (std::getline(in, line)) {
            line = trim(line);
            if (!line.empty() && line != "[" && line != "]" && line != "[]") items.push_back(line);
        }
    }
    for (const auto& raw : items) {
        std::vector<std::string> parts;
        std::stringstream ss(raw);
        std::string part;
        while (std::getline(ss, part, '|')) parts.push_back(trim(part));
        if (parts.size() < 2 || parts.size() > 3) {
            out.diagnostics.push_back("skipped '" + raw + "': expected 2 or 3 fields");
            continue;
        }
        if (!all_digits(parts[0])) {
            out.diagnostics.push_back("skipped '" + raw + "': new pattern must be a number");
            continue;
        }
        MetaOperation op;
        op.source = std::stoi(parts[0]);
        std::string action = lower(parts[1]);
        if (action == "add") op.kind = MetaOpKind::Add;
        else if (action == "merge") op.kind = MetaOpKind::Merge;
        else if (action == "replace") op.kind = MetaOpKind::Replace;
        else if (action == "update") op.kind = MetaOpKind::Update;
        else if (action == "delete") op.kind = MetaOpKind::Delete;
        else {
            out.diagnostics.push_back("skipped '" + raw + "': unknown action '" + parts[1] + "'");
            continue;
        }
        if (parts.size() == 3 && !parts[2].empty()) {
            if (!all_digits(parts[2])) {
                out.diagnostics.push_back("skipped '" + raw + "': existing pattern must be a number");
                continue;
            }
            if (op.kind != MetaOpKind::Add) op.target = std::stoi(parts[2]);
        }
        if (op.kind != MetaOpKind::Add && !op.target) {
            out.diagnostics.push_back("skipped '" + raw + "': " + action + " needs an existing pattern");
            continue;
        }
        out.operations.push_back(op);
    }
    return out;
}

std::string_view to_string(DebateActionKind kind) {
    switch (kind) {
        case DebateActionKind::GenerateGroups: return "generate_groups";
        case DebateActionKind::ValidateCurrentGroup: return "validate_current_group";
        case DebateActionKind::ValidateOtherGroup: return "validate_other_group";
        case DebateActionKind::Finish: return "finish";
        case DebateActionKind::Invalid: return "invalid";
    }
    return "invalid";
}

DebateReply parse_debate_reply(std::string_view reply) {
    DebateReply out;
    std::string text(reply);
    auto thought = text.find("Thought:");
    auto action = text.find("Action:");
    if (thought != std::string::npos) {
        auto end = action != std::string::npos && action > thought ? action : text.size();
        out.thought = trim(text.substr(thought + 8, end - thought - 8));
    }
    std::string act = action == std::string::npos ? text : text.substr(action + 7);
    out.raw_action = trim(act);
    for (auto kind : {DebateActionKind::GenerateGroups, DebateActionKind::ValidateCurrentGroup,
                      DebateActionKind::ValidateOtherGroup, DebateActionKind::Finish}) {
        auto name = std::string(to_string(kind));
        auto at = act.find(name);
        if (at == std::string::npos) continue;
        out.action = kind;
        auto open = act.find('(', at + name.size());
        auto close = act.rfind(')');
        if (open == std::string::npos || close == std::string::npos || close < open) return out;
        std::string arg = trim(act.substr(open + 1, close - open - 1));
        if (auto eq = arg.find('='); eq != std::string::npos) arg = trim(arg.substr(eq + 1));
        if (arg.empty() || arg == "no parameter") return out;
        try {
            auto parsed = Json::parse(arg);
            if (kind == DebateActionKind::GenerateGroups) {
                out.groups = parsed.get<std::vector<std::vector<int>>>();
            } else if (kind != DebateActionKind::Finish) {
                out.trajectory_ids = parsed.get<std::vector<int>>();
            }
        } catch (const Json::exception&) {
            out.action = DebateActionKind::Invalid;
        }
        return out;
    }
    return out;
}

std::optional<std::size_t> parse_refine_reply(std::string_view reply, std::size_t candidate_count) {
    static const std::regex choice("[Cc]hoice\\s*[:=]?\\s*(\\d+)");
    static const std::regex number("(\\d+)");
    std::string text(reply);
    std::smatch m;
    if (!std::regex_search(text, m, choice) && !std::regex_search(text, m, number)) return std::nullopt;
    long value = std::stol(m[1].str());
    if (value < 1 || static_cast<std::size_t>(value) > candidate_count) return std::nullopt;
    return static_cast<std::size_t>(value - 1);
}

}  // namespace expool
