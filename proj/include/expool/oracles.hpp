#pragma once

#include "expool/core.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace expool {

using Json = nlohmann::ordered_json;

enum class Capability { DistillInsight, Describe, DebateTurn, RefineChoice, ProposePlan, Embed };

std::string_view to_string(Capability c);
Capability parse_capability(std::string_view text);

// ---- transcripts -------------------------------------------------------------------------

struct TranscriptEntry {
    Capability capability = Capability::DistillInsight;
    Json request;
    std::string reply;
    double latency_ms = 0.0;
};

// Append-only call log. Appends are serialized so concurrent callers can share one.
class Transcript {
public:
    Transcript() = default;
    Transcript(const Transcript& other) : entries_(other.entries()) {}
    Transcript(Transcript&& other) noexcept : entries_(std::move(other.entries_)) {}
    Transcript& operator=(const Transcript& other) {
        if (this != &other) {
            auto copy = other.entries();
            std::lock_guard lock(mutex_);
            entries_ = std::move(copy);
        }
        return *this;
    }

    void append(TranscriptEntry entry);
    std::vector<TranscriptEntry> entries() const;
    std::size_t size() const;

    Json to_json() const;
    static Transcript from_json(const Json& doc);
    void save(const std::filesystem::path& path) const;
    static Transcript load(const std::filesystem::path& path);

private:
    mutable std::mutex mutex_;
    std::vector<TranscriptEntry> entries_;
};

// ---- capability interfaces ---------------------------------------------------------------

// Every language capability funnels into call(); the typed helpers build the request and
// parse the reply, so recording and replay see one uniform seam.
class LanguageOracle {
public:
    virtual ~LanguageOracle() = default;

    // request always carries a rendered "prompt"; other fields are structured context that
    // non-remote backends may use instead of the prompt text.
    virtual std::string call(Capability capability, const Json& request) = 0;

    std::string distill_insight(const std::string& prompt, const Json& extra = Json::object());
    std::string describe(const ImageRef& image, const std::string& degradation_key);
    std::string debate_turn(const std::string& role, const std::string& context, const Json& extra);
    // Returns the raw reply; see parse_refine_reply.
    std::string refine_choice(const std::vector<std::string>& candidate_texts, const ImageRef& image,
                              const std::string& degradation_key);
    std::string propose_plan(const std::string& prompt, const Json& extra);
};

class EncoderOracle {
public:
    virtual ~EncoderOracle() = default;
    virtual Eigen::VectorXd embed(const ImageRef& image) = 0;
    virtual Eigen::Index dimension() const = 0;
};

// Decorators that log into a transcript.
class RecordingLanguageOracle : public LanguageOracle {
public:
    RecordingLanguageOracle(LanguageOracle& inner, Transcript& transcript)
        : inner_(inner), transcript_(transcript) {}
    std::string call(Capability capability, const Json& request) override;

private:
    LanguageOracle& inner_;
    Transcript& transcript_;
};

class RecordingEncoderOracle : public EncoderOracle {
public:
    RecordingEncoderOracle(EncoderOracle& inner, Transcript& transcript)
        : inner_(inner), transcript_(transcript) {}
    Eigen::VectorXd embed(const ImageRef& image) override;
    Eigen::Index dimension() const override { return inner_.dimension(); }

private:
    EncoderOracle& inner_;
    Transcript& transcript_;
};

// Serves replies from a transcript in order. Language and encoder calls keep separate
// cursors; a request that differs from the recorded one throws ReplayMismatch.
class TranscriptReplay {
public:
    explicit TranscriptReplay(const Transcript& transcript);

    std::string next(Capability capability, const Json& request);
    bool exhausted() const;

private:
    std::mutex mutex_;
    std::vector<TranscriptEntry> language_;
    std::vector<TranscriptEntry> encoder_;
    std::size_t language_pos_ = 0;
    std::size_t encoder_pos_ = 0;
};

class ReplayLanguageOracle : public LanguageOracle {
public:
    explicit ReplayLanguageOracle(TranscriptReplay& replay) : replay_(replay) {}
    std::string call(Capability capability, const Json& request) override;

private:
    TranscriptReplay& replay_;
};

class ReplayEncoderOracle : public EncoderOracle {
public:
    ReplayEncoderOracle(TranscriptReplay& replay, Eigen::Index dimension)
        : replay_(replay), dimension_(dimension) {}
    Eigen::VectorXd embed(const ImageRef& image) override;
    Eigen::Index dimension() const override { return dimension_; }

private:
    TranscriptReplay& replay_;
    Eigen::Index dimension_;
};

// Always throws OracleUnavailable; used to exercise fallbacks.
class UnavailableLanguageOracle : public LanguageOracle {
public:
    std::string call(Capability capability, const Json& request) override;
};

// ---- remote adapter ----------------------------------------------------------------------

struct HttpResponse {
    int status = 0;
    std::string body;
};

// Transport seam. Throws TransportFailure for connection-level problems.
class ChatTransport {
public:
    virtual ~ChatTransport() = default;
    virtual HttpResponse post(const std::string& url, const std::string& body,
                              const std::vector<std::pair<std::string, std::string>>& headers,
                              std::chrono::milliseconds timeout) = 0;

    // Process-wide count of requests issued through any transport.
    static std::size_t total_requests() { return requests_.load(); }

protected:
    static void count_request() { ++requests_; }

private:
    static inline std::atomic<std::size_t> requests_{0};
};

struct TransportFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class HttpTransport : public ChatTransport {
public:
    HttpResponse post(const std::string& url, const std::string& body,
                      const std::vector<std::pair<std::string, std::string>>& headers,
                      std::chrono::milliseconds timeout) override;
};

struct RemoteConfig {
    std::string endpoint;  // base URL, e.g. https://host/v1
    std::string model;
    std::string api_key_env = "EXPOOL_API_KEY";
    std::chrono::milliseconds timeout{60000};
    int attempts = 3;
    std::chrono::milliseconds backoff{500};  // doubled after each failure
    std::map<Capability, std::string> model_override;
};

class RemoteLanguageOracle : public LanguageOracle {
public:
    RemoteLanguageOracle(RemoteConfig config, std::shared_ptr<ChatTransport> transport);
    std::string call(Capability capability, const Json& request) override;

    // Attempts used by the last call.
    int last_attempts() const { return last_attempts_; }

private:
    RemoteConfig config_;
    std::shared_ptr<ChatTransport> transport_;
    std::string api_key_;
    int last_attempts_ = 0;
};

Json chat_request_body(const std::string& model, const std::string& prompt);
std::string chat_reply_text(const std::string& body);

// ---- reply parsing -----------------------------------------------------------------------

enum class MetaOpKind { Add, Merge, Replace, Update, Delete };

std::string_view to_string(MetaOpKind kind);

struct MetaOperation {
    MetaOpKind kind = MetaOpKind::Add;
    int source = 0;             // 1-based index into the new patterns
    std::optional<int> target;  // exp_id of an existing pattern

    bool operator==(const MetaOperation&) const = default;
};

struct PlanParse {
    std::vector<MetaOperation> operations;
    std::vector<std::string> diagnostics;  // one per rejected line
};

PlanParse parse_plan_lines(std::string_view reply);

enum class DebateActionKind { GenerateGroups, ValidateCurrentGroup, ValidateOtherGroup, Finish, Invalid };

std::string_view to_string(DebateActionKind kind);

struct DebateReply {
    std::string thought;
    DebateActionKind action = DebateActionKind::Invalid;
    std::vector<std::vector<int>> groups;  // generate_groups argument, if any
    std::vector<int> trajectory_ids;       // validate_* argument
    std::string raw_action;
};

DebateReply parse_debate_reply(std::string_view reply);

// 0-based index of the chosen candidate, or nullopt when the reply names none in range.
std::optional<std::size_t> parse_refine_reply(std::string_view reply, std::size_t candidate_count);

}  // namespace expool
