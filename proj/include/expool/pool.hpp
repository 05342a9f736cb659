#pragma once

#include "expool/oracles.hpp"
#include "expool/ranking.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace expool {

inline constexpr int kPoolSchema = 1;

enum class Gate { SufficientAlone, NeedsFine };

std::string_view to_string(Gate gate);
Gate parse_gate(std::string_view text);

struct InsightEntry {
    Preference preference = Preference::Fidelity;
    std::string text;
    int round = 0;

    bool operator==(const InsightEntry&) const = default;
};

struct CoarseEntry {
    std::string key;  // canonical degradation key
    Preference preference = Preference::Fidelity;
    Ranking ranking;
    Gate gate = Gate::NeedsFine;
    int round = 0;

    bool operator==(const CoarseEntry&) const = default;
};

struct PatternProfile {
    int exp_id = 0;
    std::string key;
    Preference preference = Preference::Fidelity;
    std::vector<ImageRef> support;
    std::string text;
    Ranking ranking;
    std::vector<int> related_trajectory_ids;
    Eigen::VectorXd centroid;  // unit norm

    bool operator==(const PatternProfile& other) const;
};

// One exhaustively evaluated image. Failed candidates keep their key with no metrics.
struct AtomicExperienceRecord {
    int id = 0;
    ImageRef image;
    std::string key;
    Preference preference = Preference::Fidelity;
    std::vector<std::string> candidates;
    std::vector<std::optional<MetricVector>> metrics;
    std::map<DegradationType, ToolId> anchors;  // tools chained under each order candidate
    RecordOutcomes outcomes;
    WinRateSummary summary;
    int round = 0;

    bool operator==(const AtomicExperienceRecord& other) const;
};

// Evolution bookkeeping for one (key, preference) block.
struct PartitionState {
    PairwiseStats stats;
    std::vector<int> pending;        // records awaiting the next batch
    std::vector<int> profile_queue;  // NeedsFine records awaiting a mini-batch
    int rounds = 0;
    int next_exp_id = 0;

    bool operator==(const PartitionState&) const = default;
};

using PartitionKey = std::pair<std::string, Preference>;

// Not internally synchronized: concurrent readers may share a const pool, writers need
// exclusive access.
class ExperiencePool {
public:
    std::optional<InsightEntry> insight(Preference preference) const;
    void set_insight(InsightEntry entry);

    std::optional<CoarseEntry> coarse_lookup(const std::string& key, Preference preference) const;
    void put_coarse(CoarseEntry entry);
    std::vector<CoarseEntry> coarse_entries() const;

    const std::vector<PatternProfile>& profiles(const std::string& key, Preference preference) const;
    void set_profiles(const std::string& key, Preference preference, std::vector<PatternProfile> profiles);
    std::size_t profile_count() const;

    int add_record(AtomicExperienceRecord record);  // assigns and returns the id
    const AtomicExperienceRecord& record(int id) const;
    const std::vector<AtomicExperienceRecord>& records() const noexcept { return records_; }

    PartitionState& partition(const std::string& key, Preference preference);
    const PartitionState* find_partition(const std::string& key, Preference preference) const;
    std::vector<PartitionKey> partitions() const;

    bool operator==(const ExperiencePool& other) const;

    // Writes into a sibling temporary directory and swaps it in, so readers never see a
    // half-written pool.
    void save(const std::filesystem::path& directory) const;
    static ExperiencePool load(const std::filesystem::path& directory);

private:
    std::map<Preference, InsightEntry> insight_;
    std::map<PartitionKey, CoarseEntry> coarse_;
    std::map<PartitionKey, std::vector<PatternProfile>> profiles_;
    std::vector<AtomicExperienceRecord> records_;
    std::map<PartitionKey, PartitionState> state_;
};

Json to_json(const CoarseEntry& entry);
CoarseEntry coarse_entry_from_json(const Json& j);
Json to_json(const PatternProfile& profile);
PatternProfile pattern_profile_from_json(const Json& j);
Json to_json(const AtomicExperienceRecord& record);
AtomicExperienceRecord record_from_json(const Json& j);

// ---- retrieval ---------------------------------------------------------------------------

// Throws DegenerateEmbedding on a zero vector, DimensionError on mismatched sizes.
double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

// Unit-normalized mean.
Eigen::VectorXd centroid_of(const std::vector<Eigen::VectorXd>& embeddings);

struct ScoredProfile {
    const PatternProfile* profile = nullptr;
    double similarity = 0.0;
};

// Linear scan; descending similarity, ties by exp_id.
std::vector<ScoredProfile> recall_topk(const std::vector<PatternProfile>& profiles, const Eigen::VectorXd& query,
                                       std::size_t k);

struct RefineResult {
    const PatternProfile* profile = nullptr;
    bool fell_back = false;
    std::string warning;
};

// Asks the oracle to pick among `candidates` (similarity order); an unusable reply or an
// oracle failure falls back to the first candidate.
RefineResult refine(const std::vector<ScoredProfile>& candidates, const ImageRef& image, const std::string& key,
                    LanguageOracle& oracle);

// ---- guidance ----------------------------------------------------------------------------

enum class GuidanceLevel { None, Insight, Coarse, Fine };

std::string_view to_string(GuidanceLevel level);
GuidanceLevel parse_guidance_level(std::string_view text);

struct Guidance {
    GuidanceLevel level = GuidanceLevel::None;
    // Orders for |D| > 1, tools for |D| = 1. Empty at level None.
    Ranking ranking;
    // Ranked tools per degradation; the front is the planned assignment.
    std::map<DegradationType, std::vector<ToolId>> tools;
    std::optional<PatternProfile> profile;
    std::string insight;
    std::vector<std::string> warnings;
    int retrievals = 0;  // encoder queries issued

    std::map<DegradationType, ToolId> assignment() const;
};

struct GuidanceOptions {
    GuidanceLevel max_level = GuidanceLevel::Fine;
    std::size_t top_k = 3;
};

// The oracles may be null; a missing encoder disables the fine level.
Guidance get_guidance(const ExperiencePool& pool, const ImageRef& image, const DegradationSet& degradations,
                      Preference preference, const ToolRegistry& registry, const GuidanceOptions& options,
                      LanguageOracle* language, EncoderOracle* encoder);

// Degradation chain named in an insight text ("a -> b -> c"), longest one found.
std::vector<DegradationType> insight_order_chain(const std::string& text);

}  // namespace expool
