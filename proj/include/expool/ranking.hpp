#pragma once

#include "expool/core.hpp"

#include <Eigen/Core>

#include <string>
#include <vector>

namespace expool {

enum class Vote { Win, Loss, Tie };

// 1 iff score_i is strictly better than score_j under the metric's direction.
int metric_indicator(const MetricSpec& spec, double score_i, double score_j);

// r_{i>j} kept as the exact fraction favor_count / metric_count.
struct PairwiseOutcome {
    int favor_count = 0;    // metrics where i is strictly better
    int against_count = 0;  // metrics where j is strictly better
    int metric_count = 0;
    Vote vote = Vote::Tie;

    double rate() const { return static_cast<double>(favor_count) / metric_count; }
};

// Win iff r_{i>j} > 1/2, Loss iff r_{j>i} > 1/2, Tie otherwise; all comparisons in integers.
Vote vote_from_counts(int favor_count, int against_count, int metric_count);

PairwiseOutcome pairwise_win_rate(const MetricSet& metrics, const MetricVector& v_i,
                                  const MetricVector& v_j);

// All-pairs comparison of one record's candidates. Failed candidates stay in `keys`
// (so key sets line up across records) but take part in no comparison.
struct RecordOutcomes {
    std::vector<std::string> keys;
    std::vector<bool> valid;
    Eigen::MatrixXi favor;  // favor(i, j): metrics where i beats j
    int metric_count = 0;

    std::size_t size() const { return keys.size(); }
    PairwiseOutcome outcome(Eigen::Index i, Eigen::Index j) const;
};

RecordOutcomes compare_all(const MetricSet& metrics, const std::vector<std::string>& keys,
                           const std::vector<std::optional<MetricVector>>& vectors);

struct WinRateSummary {
    std::vector<std::string> keys;  // valid candidates only
    std::vector<double> win_rate;   // R_i, aligned with keys
    Ranking ranking;
};

// R_i = mean of r_{i>j} over the other valid candidates; ranking by descending R_i,
// ties by ascending key.
WinRateSummary summarize(const RecordOutcomes& outcomes);

// Accumulated win/loss/tie counts for one (degradation key, preference) block.
// wins(i, j) = losses(j, i); ties symmetric; diagonals zero.
class PairwiseStats {
public:
    PairwiseStats() = default;
    explicit PairwiseStats(std::vector<std::string> keys);

    const std::vector<std::string>& keys() const noexcept { return keys_; }
    Eigen::Index size() const noexcept { return static_cast<Eigen::Index>(keys_.size()); }
    const Eigen::MatrixXi& wins() const noexcept { return wins_; }
    const Eigen::MatrixXi& losses() const noexcept { return losses_; }
    const Eigen::MatrixXi& ties() const noexcept { return ties_; }
    int rounds() const noexcept { return rounds_; }

    int comparisons(Eigen::Index i, Eigen::Index j) const {
        return wins_(i, j) + losses_(i, j) + ties_(i, j);
    }
    Eigen::Index index_of(const std::string& key) const;

    // One unit per unordered valid pair; rounds + 1.
    void add(const RecordOutcomes& record);
    void merge(const PairwiseStats& other);

    static PairwiseStats from_counts(std::vector<std::string> keys, Eigen::MatrixXi wins,
                                     Eigen::MatrixXi ties, int rounds);

    bool operator==(const PairwiseStats& other) const;

private:
    std::vector<std::string> keys_;
    Eigen::MatrixXi wins_;
    Eigen::MatrixXi losses_;
    Eigen::MatrixXi ties_;
    int rounds_ = 0;
};

PairwiseStats accumulate(PairwiseStats stats, const RecordOutcomes& record);
PairwiseStats merge(PairwiseStats a, const PairwiseStats& b);

}  // namespace expool
