#include "expool/btd.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <queue>

namespace expool {

namespace {

// Counts as reals so a pseudo-count can be folded in.
struct Counts {
    Eigen::MatrixXd wins;  // wins(i, j): i beat j
    Eigen::MatrixXd ties;  // symmetric
    bool any_ties = false;
};

Counts to_counts(const PairwiseStats& stats, double pseudo_count) {
    Counts c;
    c.wins = stats.wins().cast<double>();
    c.ties = stats.ties().cast<double>();
    c.any_ties = stats.ties().sum() > 0;
    if (pseudo_count > 0) {
        for (Eigen::Index i = 0; i < stats.size(); ++i)
            for (Eigen::Index j = 0; j < stats.size(); ++j)
                if (i != j && stats.comparisons(i, j) > 0) c.wins(i, j) += pseudo_count;
    }
    return c;
}

struct LocalTerms {
    double value = 0.0;
    Eigen::VectorXd gradient;  // (theta, gamma?)
    Eigen::MatrixXd hessian;
};

// Log-likelihood, gradient and Hessian in (theta, gamma). gamma is present only when
// the tie intensity is free.
LocalTerms evaluate(const Counts& c, const Eigen::VectorXd& theta, double gamma, bool with_gamma,
                    bool need_hessian) {
    const Eigen::Index k = theta.size();
    const Eigen::Index dim = k + (with_gamma ? 1 : 0);
    const double nu = with_gamma ? std::exp(gamma) : 0.0;
    LocalTerms out;
    out.gradient = Eigen::VectorXd::Zero(dim);
    if (need_hessian) out.hessian = Eigen::MatrixXd::Zero(dim, dim);

    for (Eigen::Index i = 0; i < k; ++i) {
        for (Eigen::Index j = i + 1; j < k; ++j) {
            const double w = c.wins(i, j);
            const double l = c.wins(j, i);
            const double t = c.ties(i, j);
            const double n = w + l + t;
            if (n == 0) continue;
            const auto lp = btd_log_probabilities(theta(i), theta(j), nu);
            if (w > 0) out.value += w * lp.win;
            if (l > 0) out.value += l * lp.loss;
            if (t > 0) out.value += t * lp.tie;

            const auto p = btd_probabilities(theta(i), theta(j), nu);
            // Outcome feature vectors over local coordinates (i, j, gamma):
            // win (1, 0, 0), loss (0, 1, 0), tie (1/2, 1/2, 1).
            Eigen::Vector3d mu(p.win + 0.5 * p.tie, p.loss + 0.5 * p.tie, p.tie);
            Eigen::Vector3d obs(w + 0.5 * t, l + 0.5 * t, t);
            Eigen::Vector3d g = obs - n * mu;

            Eigen::Index idx[3] = {i, j, k};
            const int local_dim = with_gamma ? 3 : 2;
            for (int a = 0; a < local_dim; ++a) out.gradient(idx[a]) += g(a);

            if (need_hessian) {
                const Eigen::Vector3d va(1, 0, 0), vb(0, 1, 0), vc(0.5, 0.5, 1);
                Eigen::Matrix3d second = p.win * va * va.transpose() + p.loss * vb * vb.transpose() +
                                         p.tie * vc * vc.transpose() - mu * mu.transpose();
                for (int a = 0; a < local_dim; ++a)
                    for (int b = 0; b < local_dim; ++b)
                        out.hessian(idx[a], idx[b]) -= n * second(a, b);
            }
        }
    }
    return out;
}

// Orthonormal basis of {x : sum x = 0} (Helmert contrasts), k x (k - 1).
Eigen::MatrixXd centering_basis(Eigen::Index k) {
    Eigen::MatrixXd z = Eigen::MatrixXd::Zero(k, k - 1);
    for (Eigen::Index m = 1; m < k; ++m) {
        const double norm = std::sqrt(static_cast<double>(m * (m + 1)));
        for (Eigen::Index r = 0; r < m; ++r) z(r, m - 1) = 1.0 / norm;
        z(m, m - 1) = -static_cast<double>(m) / norm;
    }
    return z;
}

void require_connected(const PairwiseStats& stats) {
    const auto k = stats.size();
    std::vector<bool> seen(k, false);
    std::queue<Eigen::Index> frontier;
    frontier.push(0);
    seen[0] = true;
    while (!frontier.empty()) {
        auto u = frontier.front();
        frontier.pop();
        for (Eigen::Index v = 0; v < k; ++v) {
            if (!seen[v] && stats.comparisons(u, v) > 0) {
                seen[v] = true;
                frontier.push(v);
            }
        }
    }
    for (Eigen::Index v = 0; v < k; ++v)
        if (!seen[v])
            throw Error(ErrorCode::DegenerateData,
                        "comparison graph is disconnected at " + stats.keys()[v]);
}

// Inverse of a symmetric positive semidefinite information matrix. Directions with
// (numerically) zero information get a huge but finite variance.
Eigen::MatrixXd invert_information(const Eigen::MatrixXd& info) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(info);
    Eigen::VectorXd values = eig.eigenvalues();
    const double scale = std::max(values.cwiseAbs().maxCoeff(), 1.0);
    const double floor = 1e-12 * scale;
    for (Eigen::Index i = 0; i < values.size(); ++i) values(i) = 1.0 / std::max(values(i), floor);
    return eig.eigenvectors() * values.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

Eigen::VectorXd log_likelihood_gradient(const PairwiseStats& stats, const Eigen::VectorXd& theta,
                                        double gamma) {
    if (theta.size() != stats.size())
        throw Error(ErrorCode::DimensionError, "theta size differs from candidate count");
    return evaluate(to_counts(stats, 0.0), theta, gamma, true, false).gradient;
}

Eigen::Index BtdFit::index_of(const std::string& key) const {
    auto it = std::find(keys.begin(), keys.end(), key);
    if (it == keys.end()) throw Error(ErrorCode::InvalidInput, "unknown candidate " + key);
    return it - keys.begin();
}

BtdFit fit(const PairwiseStats& stats, const FitConfig& config) {
    const Eigen::Index k = stats.size();
    if (k < 2) throw Error(ErrorCode::NotEnoughCandidates, "need at least 2 candidates to fit");
    require_connected(stats);

    const Counts counts = to_counts(stats, config.pseudo_count);
    const bool with_gamma = counts.any_ties;
    const Eigen::MatrixXd z = centering_basis(k);
    const Eigen::Index dim = (k - 1) + (with_gamma ? 1 : 0);

    // x = (phi, gamma) with theta = Z phi.
    Eigen::VectorXd x = Eigen::VectorXd::Zero(dim);
    auto unpack = [&](const Eigen::VectorXd& v, Eigen::VectorXd& theta, double& gamma) {
        theta = z * v.head(k - 1);
        gamma = with_gamma ? v(k - 1) : 0.0;
    };
    auto clamp = [&](Eigen::VectorXd& v) {
        Eigen::VectorXd theta = z * v.head(k - 1);
        theta = theta.cwiseMax(-config.theta_bound).cwiseMin(config.theta_bound);
        v.head(k - 1) = z.transpose() * theta;
        if (with_gamma) v(k - 1) = std::clamp(v(k - 1), -30.0, 10.0);
    };
    auto reduced = [&](const Eigen::VectorXd& v, bool need_hessian) {
        Eigen::VectorXd theta;
        double gamma;
        unpack(v, theta, gamma);
        LocalTerms full = evaluate(counts, theta, gamma, with_gamma, need_hessian);
        // Chain rule through J = blockdiag(Z, 1).
        LocalTerms red;
        red.value = full.value;
        red.gradient.resize(dim);
        red.gradient.head(k - 1) = z.transpose() * full.gradient.head(k);
        if (with_gamma) red.gradient(k - 1) = full.gradient(k);
        if (need_hessian) {
            Eigen::MatrixXd j = Eigen::MatrixXd::Zero(full.gradient.size(), dim);
            j.topLeftCorner(k, k - 1) = z;
            if (with_gamma) j(k, k - 1) = 1.0;
            red.hessian = j.transpose() * full.hessian * j;
        }
        return red;
    };

    BtdFit out;
    out.keys = stats.keys();
    out.nu_pinned = !with_gamma;

    LocalTerms cur = reduced(x, true);
    int iter = 0;
    bool converged = false;
    while (iter < config.max_iterations) {
        ++iter;
        Eigen::VectorXd step;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(-cur.hessian);
        bool newton_ok = ldlt.info() == Eigen::Success && ldlt.isPositive() &&
                         (ldlt.vectorD().array() > 1e-14).all();
        if (newton_ok) {
            step = ldlt.solve(cur.gradient);
            newton_ok = step.allFinite() && step.dot(cur.gradient) > 0;
        }
        if (!newton_ok) step = cur.gradient;
        const double max_step = 5.0;
        if (step.norm() > max_step) step *= max_step / step.norm();

        // Backtracking (Armijo) line search on the clamped trial point.
        double t = 1.0;
        Eigen::VectorXd trial;
        LocalTerms next;
        bool improved = false;
        for (int bt = 0; bt < 60; ++bt) {
            trial = x + t * step;
            clamp(trial);
            next = reduced(trial, false);
            if (std::isfinite(next.value) &&
                next.value >= cur.value + 1e-4 * t * step.dot(cur.gradient)) {
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if (!improved) {
            converged = std::isfinite(cur.value);  // no ascent direction left
            break;
        }
        const double delta = next.value - cur.value;
        x = trial;
        cur = reduced(x, true);
        if (delta < config.tolerance) {
            converged = true;
            break;
        }
    }

    Eigen::VectorXd theta;
    double gamma;
    unpack(x, theta, gamma);
    out.theta = theta;
    out.nu = with_gamma ? std::exp(gamma) : 0.0;
    out.log_likelihood = cur.value;
    out.iterations = iter;
    out.converged = converged && std::isfinite(cur.value);
    out.separated = (theta.cwiseAbs().array() >= config.theta_bound - 1e-6).any();

    const Eigen::MatrixXd inverse = invert_information(-cur.hessian);
    const Eigen::MatrixXd phi_cov = inverse.topLeftCorner(k - 1, k - 1);
    out.covariance = z * phi_cov * z.transpose();
    out.covariance = 0.5 * (out.covariance + out.covariance.transpose());
    return out;
}

Ranking priority(const BtdFit& fit) {
    std::vector<std::size_t> idx(fit.keys.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (fit.theta(a) != fit.theta(b)) return fit.theta(a) > fit.theta(b);
        return fit.keys[a] < fit.keys[b];
    });
    std::vector<std::string> order;
    for (auto i : idx) order.push_back(fit.keys[i]);
    return Ranking(std::move(order));
}

double normal_quantile(double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0))
        throw Error(ErrorCode::InvalidInput, "quantile level must be in (0, 1)");
    return boost::math::quantile(boost::math::normal_distribution<double>(), alpha);
}

WaldDecision wald_separation(const BtdFit& fit, const std::string& i, const std::string& j,
                             double alpha) {
    const Ranking order = priority(fit);
    if (*order.rank_of(i) >= *order.rank_of(j))
        throw Error(ErrorCode::InvalidInput, i + " is not ranked above " + j);
    const auto a = fit.index_of(i);
    const auto b = fit.index_of(j);
    const double var = fit.covariance(a, a) + fit.covariance(b, b) - 2.0 * fit.covariance(a, b);
    const double scale = std::max({std::abs(fit.covariance(a, a)), std::abs(fit.covariance(b, b)), 1.0});
    if (!std::isfinite(var) || var < -1e-9 * scale)
        throw Error(ErrorCode::NumericalInstability, "negative variance for ability gap");
    WaldDecision d;
    d.i = i;
    d.j = j;
    d.d_hat = fit.theta(a) - fit.theta(b);
    d.se = std::sqrt(std::max(var, 0.0));
    d.z_alpha = normal_quantile(alpha);
    d.significant = d.d_hat - d.z_alpha * d.se >= 0.0;
    return d;
}

bool needs_fine_grained(const BtdFit& fit, double alpha) {
    if (fit.keys.size() < 2) throw Error(ErrorCode::NotEnoughCandidates, "need at least 2 candidates");
    const Ranking order = priority(fit);
    return !wald_separation(fit, order.ordered()[0], order.ordered()[1], alpha).significant;
}

std::string deduce_relations(const BtdFit& fit) {
    std::vector<std::size_t> idx(fit.keys.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return fit.keys[a] < fit.keys[b]; });
    std::string out;
    char buf[32];
    for (std::size_t a = 0; a < idx.size(); ++a) {
        for (std::size_t b = a + 1; b < idx.size(); ++b) {
            const auto& ki = fit.keys[idx[a]];
            const auto& kj = fit.keys[idx[b]];
            auto p = btd_probabilities(fit.theta(idx[a]), fit.theta(idx[b]), fit.nu);
            std::snprintf(buf, sizeof buf, "%.4f", p.win);
            out += "P([" + ki + "] beats [" + kj + "]) = " + buf + "\n";
            std::snprintf(buf, sizeof buf, "%.4f", p.tie);
            out += "P([" + ki + "] ties [" + kj + "]) = " + buf + "\n";
        }
    }
    return out;
}

}  // namespace expool
