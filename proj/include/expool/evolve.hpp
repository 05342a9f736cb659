#pragma once

#include "expool/btd.hpp"
#include "expool/environment.hpp"
#include "expool/oracles.hpp"
#include "expool/pool.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace expool {

struct EvolveConfig {
    int batch_size = 25;
    double alpha = 0.975;
    int mini_batch = 12;
    std::size_t top_k = 3;
    double rho_threshold = 0.8;
    std::size_t rho_top = 3;  // candidates per ranking entering the consistency check
    int debate_rounds = 4;    // each round gives every role one turn
    double semantic_threshold = 0.5;
    FitConfig fit{1e-8, 500, 10.0, 0.5};

    void validate() const;
};

// ---- rank statistics ---------------------------------------------------------------------

// Closed-form Spearman over the candidates both rankings contain, re-ranked within that
// common set. Throws InsufficientOverlap below two common candidates.
double spearman_rho(const Ranking& a, const Ranking& b);

// Restricts both rankings to the union of their top-`top` entries before taking rho.
double top_rho(const Ranking& a, const Ranking& b, std::size_t top);

struct DualConsistency {
    double rho_threshold = 0.8;
    std::size_t top = 3;
    double semantic_threshold = 0.5;

    bool ranking_consistent(const Ranking& a, const Ranking& b) const;  // C_r
    bool semantic_consistent(const std::string& a, const std::string& b) const;  // C_s
};

// Token Jaccard similarity of two descriptions.
double text_similarity(const std::string& a, const std::string& b);

// Mean rank position over the cached rankings (a missing candidate counts one past the
// last place), ties by mean win rate, then key.
Ranking stabilize(const std::vector<const AtomicExperienceRecord*>& cached);

// ---- acquisition -------------------------------------------------------------------------

// Evaluates every candidate of D exhaustively. Orders chain the anchored tool per
// degradation. Does not touch the pool.
AtomicExperienceRecord acquire_record(const ImageRef& image, const DegradationSet& degradations, Preference preference,
                                      Environment& env, const std::map<DegradationType, ToolId>& anchors);

// Rank-1 tool per degradation from single-degradation coarse entries, else registry order.
std::map<DegradationType, ToolId> coarse_anchors(const ExperiencePool& pool, const DegradationSet& degradations,
                                                 Preference preference, const ToolRegistry& registry);

// ---- evolution steps ---------------------------------------------------------------------

struct EvolutionBatch {
    std::string key;
    Preference preference = Preference::Fidelity;
    std::vector<int> records;
    int round = 0;
};

struct CoarseUpdate {
    PairwiseStats stats;
    BtdFit fit;
    CoarseEntry entry;
};

CoarseUpdate evolve_coarse(const PairwiseStats& prior, const std::vector<const AtomicExperienceRecord*>& batch,
                           const EvolveConfig& config, int round);

// Combined relation text over every fitted block of one preference.
std::string insight_prompt(Preference preference, const std::vector<std::pair<std::string, BtdFit>>& fits);

struct PartitionResult {
    std::vector<std::vector<int>> groups;  // record ids
    std::vector<std::string> descriptions; // per group
    bool fallback = false;                  // debate gave no usable grouping
    int debate_turns = 0;
    std::vector<std::string> log;
};

// Describe + debate + C_r split over one mini-batch of records.
PartitionResult partition_patterns(const std::vector<const AtomicExperienceRecord*>& records, LanguageOracle& oracle,
                                   const DualConsistency& constraints, int debate_rounds,
                                   std::map<int, std::string>& descriptions);

struct IterateResult {
    std::vector<PatternProfile> profiles;
    std::vector<std::string> operations;  // applied, human-readable
    std::vector<std::string> warnings;
};

// One plan pass against the existing profiles, then a consistency sweep that splits any
// profile whose trajectories violate C_r.
IterateResult iterate_profiles(std::vector<PatternProfile> fresh, std::vector<PatternProfile> old,
                               const ExperiencePool& pool, LanguageOracle& oracle, EncoderOracle& encoder,
                               const DualConsistency& constraints, int& next_exp_id);

// Builds a profile from a group of records (ranking via stabilize, centroid via encoder).
PatternProfile make_profile(const std::vector<int>& record_ids, const std::string& text, const ExperiencePool& pool,
                            EncoderOracle& encoder);

// ---- driver ------------------------------------------------------------------------------

struct RoundReport {
    std::string key;
    Preference preference = Preference::Fidelity;
    int round = 0;
    int records = 0;
    std::vector<std::string> ranking;
    std::vector<double> theta;
    double nu = 0.0;
    bool converged = false;
    Gate gate = Gate::NeedsFine;
    bool insight_updated = false;
    int mini_batches = 0;
    std::vector<std::string> operations;
    std::vector<std::string> warnings;

    Json to_json() const;
};

// Owns no state beyond an embedding cache; everything durable lives in the pool.
class Evolver {
public:
    Evolver(ExperiencePool& pool, Environment& env, LanguageOracle& language, EncoderOracle& encoder,
            EvolveConfig config = {});

    // Acquires, stores and queues one record; returns its id.
    int acquire(const ImageRef& image, const DegradationSet& degradations, Preference preference);

    // A batch of exactly B records once that many are pending.
    std::optional<EvolutionBatch> maybe_trigger(const std::string& key, Preference preference);

    RoundReport evolve(const EvolutionBatch& batch);

    // Triggers and evolves every ready batch (at most `max_batches` when positive).
    std::vector<RoundReport> evolve_ready(int max_batches = 0);

    const EvolveConfig& config() const noexcept { return config_; }

private:
    class CachedEncoder;
    void refresh_insight(Preference preference, RoundReport& report);
    void process_profile_queue(const std::string& key, Preference preference, RoundReport& report);

    ExperiencePool& pool_;
    Environment& env_;
    LanguageOracle& language_;
    EncoderOracle& encoder_;
    EvolveConfig config_;
    std::map<int, std::string> descriptions_;
};

}  // namespace expool
