#include <doctest.h>

#include "expool/btd.hpp"

#include <random>

using namespace expool;

namespace {

// Direct evaluation of the three-way model, kept separate from the library form.
std::array<double, 3> direct(double ti, double tj, double nu) {
    double a = std::exp(ti), b = std::exp(tj), c = 2 * nu * std::exp((ti + tj) / 2);
    double d = a + b + c;
    return {a / d, b / d, c / d};
}

double naive_ll(const PairwiseStats& s, const Eigen::VectorXd& theta, double nu) {
    double total = 0;
    for (Eigen::Index i = 0; i < s.size(); ++i)
        for (Eigen::Index j = i + 1; j < s.size(); ++j) {
            auto p = direct(theta(i), theta(j), nu);
            total += s.wins()(i, j) * std::log(p[0]);
            total += s.wins()(j, i) * std::log(p[1]);
            if (s.ties()(i, j)) total += s.ties()(i, j) * std::log(p[2]);
        }
    return total;
}

PairwiseStats sample_stats(const std::vector<double>& theta, double nu, int per_pair,
                           std::mt19937_64& rng) {
    const auto k = static_cast<Eigen::Index>(theta.size());
    Eigen::MatrixXi wins = Eigen::MatrixXi::Zero(k, k), ties = Eigen::MatrixXi::Zero(k, k);
    std::uniform_real_distribution<double> u(0, 1);
    for (Eigen::Index i = 0; i < k; ++i)
        for (Eigen::Index j = i + 1; j < k; ++j) {
            auto p = direct(theta[i], theta[j], nu);
            for (int n = 0; n < per_pair; ++n) {
                double x = u(rng);
                if (x < p[0]) ++wins(i, j);
                else if (x < p[0] + p[1]) ++wins(j, i);
                else { ++ties(i, j); ++ties(j, i); }
            }
        }
    std::vector<std::string> keys;
    for (Eigen::Index i = 0; i < k; ++i) keys.push_back("c" + std::to_string(i));
    return PairwiseStats::from_counts(keys, wins, ties, per_pair);
}

PairwiseStats random_stats(int k, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> cnt(0, 9);
    Eigen::MatrixXi wins = Eigen::MatrixXi::Zero(k, k), ties = Eigen::MatrixXi::Zero(k, k);
    for (int i = 0; i < k; ++i)
        for (int j = i + 1; j < k; ++j) {
            wins(i, j) = cnt(rng);
            wins(j, i) = cnt(rng);
            ties(i, j) = ties(j, i) = cnt(rng);
        }
    std::vector<std::string> keys;
    for (int i = 0; i < k; ++i) keys.push_back("c" + std::to_string(i));
    return PairwiseStats::from_counts(keys, wins, ties, 9);
}

}  // namespace

TEST_CASE("plug-in probabilities") {
    auto p = btd_probabilities(0.0, 0.0, 1.0);
    CHECK(p.win == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(p.tie == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(prob_win(1.3, 1.3, 0.2) == prob_win(1.3, 1.3, 0.2));
    CHECK_THROWS_AS(prob_win(0.0, 0.0, -0.1), Error);

    // Frozen from an independent script evaluation of the raw formula.
    auto q = btd_probabilities(2.0, 0.0, 0.5);
    CHECK(std::abs(q.win - 0.6652409557748219) < 1e-14);
    CHECK(std::abs(q.loss - 0.09003057317038046) < 1e-14);
    CHECK(std::abs(q.tie - 0.24472847105479764) < 1e-14);
}

TEST_CASE("three-way probabilities sum to one") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> t(-10, 10), n(0, 5);
    double worst = 0;
    for (int s = 0; s < 10000; ++s) {
        auto p = btd_probabilities(t(rng), t(rng), n(rng));
        worst = std::max(worst, std::abs(p.win + p.loss + p.tie - 1.0));
    }
    CHECK(worst < 1e-12);
}

TEST_CASE("log-likelihood matches naive summation and is translation invariant") {
    PairwiseStats empty({"a", "b"});
    CHECK(log_likelihood(empty, Eigen::VectorXd::Zero(2), 1.0) == 0.0);

    Eigen::MatrixXi w = Eigen::MatrixXi::Zero(2, 2);
    w(0, 1) = 1;
    auto one = PairwiseStats::from_counts({"a", "b"}, w, Eigen::MatrixXi::Zero(2, 2), 1);
    CHECK(log_likelihood(one, Eigen::VectorXd::Zero(2), 1.0) == doctest::Approx(std::log(0.25)));
    CHECK_THROWS_AS(log_likelihood(one, Eigen::VectorXd::Zero(3), 1.0), Error);

    std::mt19937_64 rng(2);
    std::normal_distribution<double> g;
    for (int trial = 0; trial < 100; ++trial) {
        auto s = random_stats(5, rng);
        Eigen::VectorXd theta(5);
        for (int i = 0; i < 5; ++i) theta(i) = g(rng);
        double nu = std::exp(g(rng));
        double ll = log_likelihood(s, theta, nu);
        CHECK(ll == doctest::Approx(naive_ll(s, theta, nu)).epsilon(1e-12));
        Eigen::VectorXd shifted = theta.array() + 3.7;
        CHECK(log_likelihood(s, shifted, nu) == doctest::Approx(ll).epsilon(1e-12));
    }
}

TEST_CASE("analytic gradient matches central differences") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g;
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
        auto s = random_stats(4, rng);
        Eigen::VectorXd theta(4);
        for (int i = 0; i < 4; ++i) theta(i) = g(rng);
        double gamma = g(rng);
        auto grad = log_likelihood_gradient(s, theta, gamma);
        auto f = [&](const Eigen::VectorXd& th, double ga) {
            return log_likelihood(s, th, std::exp(ga));
        };
        const double h = 1e-5;
        for (int a = 0; a < 5; ++a) {
            double fd;
            if (a < 4) {
                Eigen::VectorXd p = theta, m = theta;
                p(a) += h;
                m(a) -= h;
                fd = (f(p, gamma) - f(m, gamma)) / (2 * h);
            } else {
                fd = (f(theta, gamma + h) - f(theta, gamma - h)) / (2 * h);
            }
            double rel = std::abs(fd - grad(a)) / std::max(1.0, std::abs(fd));
            worst = std::max(worst, rel);
        }
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("fit recovers sampled abilities") {
    std::mt19937_64 rng(20240601);
    auto s = sample_stats({1.0, 0.0, -1.0}, 0.5, 500, rng);
    auto f = fit(s);
    CHECK(f.converged);
    CHECK(std::abs(f.theta.sum()) < 1e-9);
    CHECK(priority(f).ordered() == std::vector<std::string>{"c0", "c1", "c2"});
    double err = (f.theta - Eigen::Vector3d(1, 0, -1)).cwiseAbs().maxCoeff();
    CHECK(err < 0.15);
    CHECK(f.nu == doctest::Approx(0.5).epsilon(0.2));
    // covariance is symmetric PSD and annihilates the all-ones direction
    CHECK((f.covariance - f.covariance.transpose()).norm() < 1e-10);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(f.covariance);
    CHECK(es.eigenvalues().minCoeff() > -1e-10);
    CHECK((f.covariance * Eigen::VectorXd::Ones(3)).norm() < 1e-8);

    // deterministic
    auto again = fit(s);
    CHECK(again.theta == f.theta);
    CHECK(again.nu == f.nu);
}

TEST_CASE("symmetric data fits to equal abilities") {
    Eigen::MatrixXi w(3, 3), t(3, 3);
    w << 0, 4, 2, 4, 0, 7, 2, 7, 0;
    t << 0, 3, 1, 3, 0, 5, 1, 5, 0;
    auto s = PairwiseStats::from_counts({"x", "y", "z"}, w, t, 10);
    auto f = fit(s);
    CHECK(f.converged);
    CHECK(f.theta.cwiseAbs().maxCoeff() < 1e-6);
    CHECK(priority(f).ordered() == std::vector<std::string>{"x", "y", "z"});
    CHECK(needs_fine_grained(f, 0.975));
}

TEST_CASE("complete separation is clamped and flagged") {
    Eigen::MatrixXi w = Eigen::MatrixXi::Zero(2, 2);
    w(0, 1) = 25;
    auto s = PairwiseStats::from_counts({"a", "b"}, w, Eigen::MatrixXi::Zero(2, 2), 25);
    auto f = fit(s);
    CHECK(f.separated);
    CHECK(f.nu_pinned);
    CHECK(f.nu == 0.0);
    CHECK(f.theta.cwiseAbs().maxCoeff() <= 10.0 + 1e-12);
    CHECK(priority(f).top() == "a");

    FitConfig smoothed;
    smoothed.pseudo_count = 0.5;
    auto g = fit(s, smoothed);
    CHECK_FALSE(g.separated);
    CHECK_FALSE(needs_fine_grained(g, 0.975));
}

TEST_CASE("disconnected comparison graph is degenerate") {
    Eigen::MatrixXi w = Eigen::MatrixXi::Zero(4, 4);
    w(0, 1) = 3;
    w(1, 0) = 2;
    w(2, 3) = 3;
    w(3, 2) = 1;
    auto s = PairwiseStats::from_counts({"a", "b", "c", "d"}, w, Eigen::MatrixXi::Zero(4, 4), 5);
    CHECK_THROWS_AS(fit(s), Error);
    CHECK_THROWS_AS(fit(PairwiseStats({"a"})), Error);
}

TEST_CASE("wald separation") {
    BtdFit f;
    f.keys = {"a", "b"};
    f.theta = Eigen::Vector2d(0.5, -0.5);
    f.covariance = Eigen::Matrix2d::Zero();
    auto d = wald_separation(f, "a", "b", 0.975);
    CHECK(d.significant);
    CHECK(d.z_alpha == doctest::Approx(1.959963984540054));

    f.theta = Eigen::Vector2d(0, 0);
    f.covariance << 0.1, -0.1, -0.1, 0.1;
    CHECK_FALSE(wald_separation(f, "a", "b", 0.975).significant);

    f.theta = Eigen::Vector2d(0.5, -0.5);
    f.covariance << -0.1, 0.1, 0.1, -0.1;
    CHECK_THROWS_AS(wald_separation(f, "a", "b", 0.975), Error);
    f.covariance.setZero();
    CHECK_THROWS_AS(wald_separation(f, "b", "a", 0.975), Error);
}

TEST_CASE("dominant candidate passes the gate") {
    Eigen::MatrixXi w(3, 3), t = Eigen::MatrixXi::Zero(3, 3);
    w << 0, 24, 25, 1, 0, 13, 0, 12, 0;
    auto s = PairwiseStats::from_counts({"a", "b", "c"}, w, t, 25);
    CHECK_FALSE(needs_fine_grained(fit(s), 0.975));
}

TEST_CASE("priority agrees with summarize on two symmetric candidates") {
    MetricSet ms{{"m", MetricDirection::HigherBetter}};
    auto rec = compare_all(ms, {"p", "q"}, {MetricVector{{"m", 1}}, MetricVector{{"m", 1}}});
    PairwiseStats s({"p", "q"});
    for (int r = 0; r < 5; ++r) s.add(rec);
    CHECK(priority(fit(s)) == summarize(rec).ranking);
}

TEST_CASE("deduced relations text") {
    BtdFit f;
    f.keys = {"b", "a"};
    f.theta = Eigen::Vector2d(0, 0);
    f.nu = 1.0;
    auto text = deduce_relations(f);
    CHECK(text.find("0.2500") != std::string::npos);
    CHECK(text.find("0.5000") != std::string::npos);
    CHECK(std::count(text.begin(), text.end(), '\n') == 2);

    f.keys = {"a", "b", "c", "d"};
    f.theta = Eigen::Vector4d(0.3, 0.1, -0.1, -0.3);
    text = deduce_relations(f);
    CHECK(std::count(text.begin(), text.end(), '\n') == 12);
}
