#pragma once

#include "expool/ranking.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

namespace expool {

template <typename Scalar>
struct BtdProbabilities {
    Scalar win;   // P(i > j)
    Scalar loss;  // P(j > i)
    Scalar tie;   // P(i = j)
};

// Bradley-Terry-Davidson three-way probabilities. Evaluated in the symmetric form
// e^{h} / (e^{h} + e^{-h} + 2 nu) with h = (theta_i - theta_j) / 2, scaled by the larger
// exponential so that large ability gaps do not overflow.
template <typename Scalar>
BtdProbabilities<Scalar> btd_probabilities(Scalar theta_i, Scalar theta_j, Scalar nu) {
    using std::abs;
    using std::exp;
    if (!(nu >= Scalar(0))) throw Error(ErrorCode::InvalidTieIntensity, "tie intensity must be >= 0");
    const Scalar h = (theta_i - theta_j) / Scalar(2);
    const Scalar m = abs(h);
    const Scalar big = Scalar(1);
    const Scalar small = exp(Scalar(-2) * m);
    const Scalar mid = Scalar(2) * nu * exp(-m);
    const Scalar denom = big + small + mid;
    if (h >= Scalar(0)) return {big / denom, small / denom, mid / denom};
    return {small / denom, big / denom, mid / denom};
}

template <typename Scalar>
Scalar prob_win(Scalar theta_i, Scalar theta_j, Scalar nu) {
    return btd_probabilities(theta_i, theta_j, nu).win;
}

template <typename Scalar>
Scalar prob_tie(Scalar theta_i, Scalar theta_j, Scalar nu) {
    return btd_probabilities(theta_i, theta_j, nu).tie;
}

// log P(i>j), log P(j>i), log P(i=j) via log-sum-exp; tie term is -inf when nu = 0.
template <typename Scalar>
BtdProbabilities<Scalar> btd_log_probabilities(Scalar theta_i, Scalar theta_j, Scalar nu) {
    using std::abs;
    using std::exp;
    using std::log;
    if (!(nu >= Scalar(0))) throw Error(ErrorCode::InvalidTieIntensity, "tie intensity must be >= 0");
    const Scalar h = (theta_i - theta_j) / Scalar(2);
    const Scalar m = abs(h);
    // log(e^h + e^-h + 2 nu) = m + log(1 + e^{-2m} + 2 nu e^{-m})
    const Scalar log_denom = m + log(Scalar(1) + exp(Scalar(-2) * m) + Scalar(2) * nu * exp(-m));
    const Scalar log_tie = nu > Scalar(0) ? log(Scalar(2) * nu) - log_denom
                                          : -std::numeric_limits<Scalar>::infinity();
    return {h - log_denom, -h - log_denom, log_tie};
}

// Sum over unordered pairs of w ln P(i>j) + l ln P(j>i) + t ln P(i=j). Zero counts
// contribute nothing, so nu = 0 is fine when no ties were observed.
template <typename Scalar, typename Derived>
Scalar log_likelihood(const PairwiseStats& stats, const Eigen::MatrixBase<Derived>& theta, Scalar nu) {
    if (theta.size() != stats.size())
        throw Error(ErrorCode::DimensionError, "theta size differs from candidate count");
    if (!(nu >= Scalar(0))) throw Error(ErrorCode::InvalidTieIntensity, "tie intensity must be >= 0");
    Scalar total(0);
    const auto k = stats.size();
    for (Eigen::Index i = 0; i < k; ++i) {
        for (Eigen::Index j = i + 1; j < k; ++j) {
            const int w = stats.wins()(i, j);
            const int l = stats.wins()(j, i);
            const int t = stats.ties()(i, j);
            if (w + l + t == 0) continue;
            auto lp = btd_log_probabilities<Scalar>(theta(i), theta(j), nu);
            if (w) total += Scalar(w) * lp.win;
            if (l) total += Scalar(l) * lp.loss;
            if (t) total += Scalar(t) * lp.tie;
        }
    }
    return total;
}

// Analytic gradient of the log-likelihood with respect to (theta, gamma = ln nu).
// Returns k + 1 entries; the last is d/dgamma.
Eigen::VectorXd log_likelihood_gradient(const PairwiseStats& stats, const Eigen::VectorXd& theta,
                                        double gamma);

struct FitConfig {
    double tolerance = 1e-8;     // on log-likelihood improvement
    int max_iterations = 500;
    double theta_bound = 10.0;   // separation clamp on |theta|
    // Added to w_ij and w_ji of every compared pair. Zero gives the plain MLE.
    double pseudo_count = 0.0;
};

struct BtdFit {
    std::vector<std::string> keys;
    Eigen::VectorXd theta;       // centred: sum is zero
    double nu = 0.0;
    Eigen::MatrixXd covariance;  // of theta, k x k
    double log_likelihood = 0.0;
    bool converged = false;
    int iterations = 0;
    bool separated = false;      // some |theta| hit the clamp
    bool nu_pinned = false;      // no ties observed, plain Bradley-Terry

    Eigen::Index index_of(const std::string& key) const;
};

BtdFit fit(const PairwiseStats& stats, const FitConfig& config = {});

// Descending theta, ties by ascending key.
Ranking priority(const BtdFit& fit);

struct WaldDecision {
    std::string i;
    std::string j;
    double d_hat = 0.0;
    double se = 0.0;
    double z_alpha = 0.0;
    bool significant = false;
};

// Standard normal quantile; alpha = 0.975 gives about 1.96.
double normal_quantile(double alpha);

WaldDecision wald_separation(const BtdFit& fit, const std::string& i, const std::string& j,
                             double alpha);

// True when the rank-1 vs rank-2 gap is not significant.
bool needs_fine_grained(const BtdFit& fit, double alpha);

// Every P(i > j) and P(i = j), one line each, pairs in key order.
std::string deduce_relations(const BtdFit& fit);

}  // namespace expool
