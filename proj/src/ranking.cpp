#include "expool/ranking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace expool {

int metric_indicator(const MetricSpec& spec, double score_i, double score_j) {
    if (!std::isfinite(score_i) || !std::isfinite(score_j))
        throw Error(ErrorCode::InvalidMetric, "non-finite score for " + spec.name);
    if (spec.direction == MetricDirection::HigherBetter) return score_i > score_j ? 1 : 0;
    return score_i < score_j ? 1 : 0;
}

Vote vote_from_counts(int favor_count, int against_count, int metric_count) {
    if (2 * favor_count > metric_count) return Vote::Win;
    if (2 * against_count > metric_count) return Vote::Loss;
    return Vote::Tie;
}

PairwiseOutcome pairwise_win_rate(const MetricSet& metrics, const MetricVector& v_i,
                                  const MetricVector& v_j) {
    if (metrics.empty()) throw Error(ErrorCode::MetricSetMismatch, "empty metric set");
    validate_metric_vector(metrics, v_i);
    validate_metric_vector(metrics, v_j);
    PairwiseOutcome out;
    out.metric_count = static_cast<int>(metrics.size());
    for (const auto& m : metrics) {
        double a = v_i.at(m.name);
        double b = v_j.at(m.name);
        out.favor_count += metric_indicator(m, a, b);
        out.against_count += metric_indicator(m, b, a);
    }
    out.vote = vote_from_counts(out.favor_count, out.against_count, out.metric_count);
    return out;
}

PairwiseOutcome RecordOutcomes::outcome(Eigen::Index i, Eigen::Index j) const {
    PairwiseOutcome out;
    out.favor_count = favor(i, j);
    out.against_count = favor(j, i);
    out.metric_count = metric_count;
    out.vote = vote_from_counts(out.favor_count, out.against_count, metric_count);
    return out;
}

RecordOutcomes compare_all(const MetricSet& metrics, const std::vector<std::string>& keys,
                           const std::vector<std::optional<MetricVector>>& vectors) {
    if (keys.size() != vectors.size())
        throw Error(ErrorCode::DimensionError, "one metric vector per candidate required");
    RecordOutcomes rec;
    rec.keys = keys;
    rec.metric_count = static_cast<int>(metrics.size());
    const auto k = static_cast<Eigen::Index>(keys.size());
    rec.favor = Eigen::MatrixXi::Zero(k, k);
    rec.valid.resize(keys.size());
    for (Eigen::Index i = 0; i < k; ++i) rec.valid[i] = vectors[i].has_value();
    for (Eigen::Index i = 0; i < k; ++i) {
        if (!rec.valid[i]) continue;
        for (Eigen::Index j = i + 1; j < k; ++j) {
            if (!rec.valid[j]) continue;
            auto o = pairwise_win_rate(metrics, *vectors[i], *vectors[j]);
            rec.favor(i, j) = o.favor_count;
            rec.favor(j, i) = o.against_count;
        }
    }
    return rec;
}

WinRateSummary summarize(const RecordOutcomes& outcomes) {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(outcomes.size()); ++i)
        if (outcomes.valid[i]) idx.push_back(i);
    if (idx.size() < 2) throw Error(ErrorCode::NotEnoughCandidates, "need at least 2 candidates");

    // Every R_i shares the denominator |M|(k-1), so ranking on the integer numerator is exact.
    std::vector<long> favor_sum(idx.size(), 0);
    for (std::size_t a = 0; a < idx.size(); ++a)
        for (std::size_t b = 0; b < idx.size(); ++b)
            if (a != b) favor_sum[a] += outcomes.favor(idx[a], idx[b]);

    WinRateSummary s;
    const double denom = static_cast<double>(outcomes.metric_count) * (idx.size() - 1);
    for (std::size_t a = 0; a < idx.size(); ++a) {
        s.keys.push_back(outcomes.keys[idx[a]]);
        s.win_rate.push_back(favor_sum[a] / denom);
    }
    std::vector<std::size_t> perm(idx.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::sort(perm.begin(), perm.end(), [&](std::size_t x, std::size_t y) {
        if (favor_sum[x] != favor_sum[y]) return favor_sum[x] > favor_sum[y];
        return s.keys[x] < s.keys[y];
    });
    std::vector<std::string> order;
    for (auto p : perm) order.push_back(s.keys[p]);
    s.ranking = Ranking(std::move(order));
    return s;
}

PairwiseStats::PairwiseStats(std::vector<std::string> keys) : keys_(std::move(keys)) {
    const auto k = size();
    wins_ = Eigen::MatrixXi::Zero(k, k);
    losses_ = Eigen::MatrixXi::Zero(k, k);
    ties_ = Eigen::MatrixXi::Zero(k, k);
}

Eigen::Index PairwiseStats::index_of(const std::string& key) const {
    auto it = std::find(keys_.begin(), keys_.end(), key);
    if (it == keys_.end()) throw Error(ErrorCode::CandidateSetMismatch, "unknown candidate " + key);
    return it - keys_.begin();
}

void PairwiseStats::add(const RecordOutcomes& record) {
    if (record.keys != keys_)
        throw Error(ErrorCode::CandidateSetMismatch, "record candidates differ from stats keys");
    const auto k = size();
    for (Eigen::Index i = 0; i < k; ++i) {
        if (!record.valid[i]) continue;
        for (Eigen::Index j = i + 1; j < k; ++j) {
            if (!record.valid[j]) continue;
            switch (record.outcome(i, j).vote) {
                case Vote::Win:
                    ++wins_(i, j);
                    ++losses_(j, i);
                    break;
                case Vote::Loss:
                    ++wins_(j, i);
                    ++losses_(i, j);
                    break;
                case Vote::Tie:
                    ++ties_(i, j);
                    ++ties_(j, i);
                    break;
            }
        }
    }
    ++rounds_;
}

void PairwiseStats::merge(const PairwiseStats& other) {
    if (other.keys_ != keys_)
        throw Error(ErrorCode::CandidateSetMismatch, "cannot merge stats over different candidates");
    wins_ += other.wins_;
    losses_ += other.losses_;
    ties_ += other.ties_;
    rounds_ += other.rounds_;
}

PairwiseStats PairwiseStats::from_counts(std::vector<std::string> keys, Eigen::MatrixXi wins,
                                         Eigen::MatrixXi ties, int rounds) {
    PairwiseStats s(std::move(keys));
    if (wins.rows() != s.size() || wins.cols() != s.size() || ties.rows() != s.size() ||
        ties.cols() != s.size())
        throw Error(ErrorCode::DimensionError, "count matrices must be k x k");
    if ((wins.array() < 0).any() || (ties.array() < 0).any())
        throw Error(ErrorCode::InvalidInput, "counts must be non-negative");
    if (wins.diagonal().any() || ties.diagonal().any() || ties != ties.transpose())
        throw Error(ErrorCode::InvalidInput, "diagonals must be zero and ties symmetric");
    s.wins_ = std::move(wins);
    s.losses_ = s.wins_.transpose();
    s.ties_ = std::move(ties);
    s.rounds_ = rounds;
    return s;
}

bool PairwiseStats::operator==(const PairwiseStats& other) const {
    return keys_ == other.keys_ && wins_ == other.wins_ && losses_ == other.losses_ &&
           ties_ == other.ties_ && rounds_ == other.rounds_;
}

PairwiseStats accumulate(PairwiseStats stats, const RecordOutcomes& record) {
    stats.add(record);
    return stats;
}

PairwiseStats merge(PairwiseStats a, const PairwiseStats& b) {
    a.merge(b);
    return a;
}

}  // namespace expool
