#include "expool/experiments.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <thread>

namespace expool {

PairedTest paired_t_test(std::string a_label, const std::vector<double>& a, std::string b_label,
                         const std::vector<double>& b) {
    if (a.size() != b.size()) throw Error(ErrorCode::DimensionError, "paired samples differ in length");
    if (a.size() < 2) throw Error(ErrorCode::NotEnoughCandidates, "paired test needs at least two pairs");
    PairedTest out{std::move(a_label), std::move(b_label), static_cast<int>(a.size())};
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    const double n = static_cast<double>(d.size());
    out.mean_diff = std::accumulate(d.begin(), d.end(), 0.0) / n;
    double ss = 0;
    for (double x : d) ss += (x - out.mean_diff) * (x - out.mean_diff);
    const double sd = std::sqrt(ss / (n - 1));
    if (sd == 0) {
        out.t = out.mean_diff > 0 ? INFINITY : (out.mean_diff < 0 ? -INFINITY : 0.0);
        out.p = out.mean_diff > 0 ? 0.0 : (out.mean_diff < 0 ? 1.0 : 0.5);
        return out;
    }
    out.t = out.mean_diff / (sd / std::sqrt(n));
    boost::math::students_t dist(n - 1);
    out.p = boost::math::cdf(boost::math::complement(dist, out.t));
    return out;
}

std::vector<double> unified_quality_index(const std::vector<MetricVector>& means, const MetricSet& metrics) {
    std::vector<double> uqi(means.size(), 0.0);
    if (means.empty() || metrics.empty()) return uqi;
    for (auto& m : metrics) {
        const double sign = m.direction == MetricDirection::HigherBetter ? 1.0 : -1.0;
        std::vector<double> v;
        for (auto& c : means) v.push_back(sign * c.at(m.name));
        auto [lo, hi] = std::minmax_element(v.begin(), v.end());
        const double span = *hi - *lo;
        for (std::size_t i = 0; i < v.size(); ++i) uqi[i] += span > 0 ? (v[i] - *lo) / span : 0.5;
    }
    for (auto& u : uqi) u /= static_cast<double>(metrics.size());
    return uqi;
}

namespace {

struct TraceStat {
    int invocations = 0;
    int o_rollbacks = 0;
    int t_rollbacks = 0;
    bool success = false;
    MetricVector final_metrics;
};

TraceStat stat_of(const WorkflowTrace& t, Environment& env, Preference preference) {
    return {t.invocations, t.o_rollbacks, t.t_rollbacks, t.status == TraceStatus::Success,
            env.score(t.final_image, preference)};
}

ConditionSummary aggregate(const std::string& label, const std::vector<TraceStat>& stats) {
    ConditionSummary c;
    c.label = label;
    c.traces = static_cast<int>(stats.size());
    if (stats.empty()) return c;
    for (auto& s : stats) {
        c.invocations += s.invocations;
        c.o_rollbacks += s.o_rollbacks;
        c.t_rollbacks += s.t_rollbacks;
        c.success_rate += s.success;
        for (auto& [k, v] : s.final_metrics) c.metric_means[k] += v;
    }
    const double n = static_cast<double>(stats.size());
    c.invocations /= n;
    c.o_rollbacks /= n;
    c.t_rollbacks /= n;
    c.total_rollbacks = c.o_rollbacks + c.t_rollbacks;
    c.success_rate /= n;
    for (auto& [k, v] : c.metric_means) v /= n;
    return c;
}

void fill_uqi(std::vector<ConditionSummary>& conditions, const MetricSet& metrics) {
    std::vector<MetricVector> means;
    for (auto& c : conditions) means.push_back(c.metric_means);
    auto u = unified_quality_index(means, metrics);
    for (std::size_t i = 0; i < conditions.size(); ++i) conditions[i].uqi = u[i];
}

double mean_of(const std::vector<TraceStat>& s, int TraceStat::*field) {
    double total = 0;
    for (auto& x : s) total += x.*field;
    return s.empty() ? 0.0 : total / static_cast<double>(s.size());
}

// Runs job(i) for i in [0, n) on up to `jobs` threads; results keep index order.
template <typename R, typename F>
std::vector<R> parallel_map(int n, int jobs, F job) {
    std::vector<R> out(static_cast<std::size_t>(n));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
    std::atomic<int> next{0};
    auto worker = [&] {
        for (int i = next++; i < n; i = next++) {
            try {
                out[static_cast<std::size_t>(i)] = job(i);
            } catch (...) {
                errors[static_cast<std::size_t>(i)] = std::current_exception();
            }
        }
    };
    const int threads = std::max(1, std::min(jobs, n));
    std::vector<std::thread> pool;
    for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

const char* fmt(double x) {
    static thread_local char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f", x);
    return buf;
}

}  // namespace

std::vector<ConditionSummary> summarize_conditions(
    const std::vector<std::pair<std::string, std::vector<WorkflowTrace>>>& runs, Environment& env, Preference preference) {
    std::vector<ConditionSummary> out;
    for (auto& [label, traces] : runs) {
        std::vector<TraceStat> stats;
        for (auto& t : traces) stats.push_back(stat_of(t, env, preference));
        out.push_back(aggregate(label, stats));
    }
    fill_uqi(out, env.metrics(preference));
    return out;
}

std::string ExperimentReport::csv() const {
    std::ostringstream os;
    os << "condition,traces,invocations,o_rb,t_rb,total_rb,success_rate,uqi\n";
    for (auto& c : conditions) {
        os << c.label << ',' << c.traces << ',' << fmt(c.invocations) << ',' << fmt(c.o_rollbacks) << ','
           << fmt(c.t_rollbacks) << ',' << fmt(c.total_rollbacks) << ',' << fmt(c.success_rate) << ',' << fmt(c.uqi)
           << '\n';
    }
    return os.str();
}

std::string ExperimentReport::summary() const {
    std::ostringstream os;
    os << "experiment: " << name << '\n';
    for (auto& c : conditions)
        os << "  " << c.label << ": invocations " << fmt(c.invocations) << ", total rollbacks "
           << fmt(c.total_rollbacks) << ", UQI " << fmt(c.uqi) << '\n';
    for (auto& t : tests)
        os << "  paired t-test " << t.a << " > " << t.b << ": mean diff " << fmt(t.mean_diff) << ", t " << fmt(t.t)
           << ", p " << t.p << " (n=" << t.n << ")\n";
    for (auto& n : notes) os << "  note: " << n << '\n';
    return os.str();
}

Json ExperimentReport::to_json() const {
    Json conds = Json::array();
    for (auto& c : conditions)
        conds.push_back({{"condition", c.label},
                         {"traces", c.traces},
                         {"invocations", c.invocations},
                         {"o_rb", c.o_rollbacks},
                         {"t_rb", c.t_rollbacks},
                         {"total_rb", c.total_rollbacks},
                         {"success_rate", c.success_rate},
                         {"uqi", c.uqi},
                         {"metric_means", c.metric_means}});
    Json tests_json = Json::array();
    for (auto& t : tests)
        tests_json.push_back({{"a", t.a}, {"b", t.b}, {"n", t.n}, {"mean_diff", t.mean_diff}, {"t", t.t}, {"p", t.p}});
    return Json{{"experiment", name},
                {"conditions", conds},
                {"per_seed_invocations", per_seed_invocations},
                {"per_seed_total_rollbacks", per_seed_total_rollbacks},
                {"tests", tests_json},
                {"notes", notes}};
}

void train_pool(Evolver& evolver, SimWorld& world, const std::vector<DegradationSet>& sets, int per_set,
                Preference preference) {
    for (auto& D : sets) {
        for (auto& img : world.generate_images(static_cast<std::size_t>(per_set), D)) evolver.acquire(img, D, preference);
        evolver.evolve_ready();
    }
}

namespace {

struct SeedOutcome {
    std::vector<std::vector<TraceStat>> per_condition;
    std::vector<std::string> notes;
};

}  // namespace

ExperimentReport granularity_ablation(const GranularityConfig& config) {
    const std::vector<GuidanceLevel> levels{GuidanceLevel::None, GuidanceLevel::Insight, GuidanceLevel::Coarse,
                                            GuidanceLevel::Fine};
    const DegradationSet pair{"dark", "motion blur"};
    auto outcomes = parallel_map<SeedOutcome>(config.seeds, config.jobs, [&](int s) {
        SeedOutcome out;
        SimWorld world(preset_world(WorldPreset::GroupA, config.base_seed + static_cast<std::uint64_t>(s)));
        SimLanguageOracle language(world);
        SimEncoder encoder(world);
        ExperiencePool pool;
        Evolver evolver(pool, world, language, encoder, config.evolve);
        train_pool(evolver, world, {DegradationSet{"dark"}, DegradationSet{"motion blur"}}, config.train_per_set,
                   config.preference);
        train_pool(evolver, world, {pair}, config.train_per_set, config.preference);
        if (auto e = pool.coarse_lookup(canonical_key(pair), config.preference); e && e->gate == Gate::SufficientAlone)
            out.notes.push_back("seed " + std::to_string(config.base_seed + s) + ": pair gate sufficient, fine level unused");
        auto tests = world.generate_images(static_cast<std::size_t>(config.test_images), pair);
        for (auto level : levels) {
            WorkflowConfig wf = config.workflow;
            wf.preference = config.preference;
            wf.guidance.max_level = level;
            std::vector<TraceStat> stats;
            for (auto& img : tests) stats.push_back(stat_of(run_workflow(img, world, pool, &language, &encoder, wf), world, config.preference));
            out.per_condition.push_back(std::move(stats));
        }
        return out;
    });

    ExperimentReport report;
    report.name = "granularity";
    SimWorld metrics_world(preset_world(WorldPreset::GroupA, config.base_seed));
    for (std::size_t c = 0; c < levels.size(); ++c) {
        std::vector<TraceStat> all;
        std::vector<double> inv, rb;
        for (auto& o : outcomes) {
            all.insert(all.end(), o.per_condition[c].begin(), o.per_condition[c].end());
            inv.push_back(mean_of(o.per_condition[c], &TraceStat::invocations));
            rb.push_back(mean_of(o.per_condition[c], &TraceStat::o_rollbacks) +
                         mean_of(o.per_condition[c], &TraceStat::t_rollbacks));
        }
        report.conditions.push_back(aggregate(std::string(to_string(levels[c])), all));
        report.per_seed_invocations.push_back(inv);
        report.per_seed_total_rollbacks.push_back(rb);
    }
    fill_uqi(report.conditions, metrics_world.metrics(config.preference));
    for (auto& o : outcomes)
        for (auto& n : o.notes) report.notes.push_back(n);
    if (config.seeds >= 2) {
        report.tests.push_back(paired_t_test("none", report.per_seed_invocations[0], "coarse", report.per_seed_invocations[2]));
        report.tests.push_back(paired_t_test("coarse", report.per_seed_invocations[2], "fine", report.per_seed_invocations[3]));
        report.tests.push_back(paired_t_test("none", report.per_seed_invocations[0], "insight", report.per_seed_invocations[1]));
    }
    return report;
}

ExperimentReport evolution_times(const EvolutionTimesConfig& config) {
    const std::vector<DegradationSet> singles{DegradationSet{"dark"}, DegradationSet{"motion blur"}, DegradationSet{"rain"}};
    const std::vector<DegradationSet> pairs{DegradationSet{"dark", "motion blur"}, DegradationSet{"dark", "rain"},
                                            DegradationSet{"motion blur", "rain"}};
    const int conditions = config.max_times + 1;
    auto outcomes = parallel_map<SeedOutcome>(config.seeds, config.jobs, [&](int s) {
        SeedOutcome out;
        const auto seed = config.base_seed + static_cast<std::uint64_t>(s);
        for (int times = 0; times < conditions; ++times) {
            SimWorld world(preset_world(WorldPreset::GroupB, seed));
            std::vector<ImageRef> tests;
            for (auto& D : pairs)
                for (auto& img : world.generate_images(static_cast<std::size_t>(config.test_images_per_set), D))
                    tests.push_back(img);
            SimLanguageOracle language(world);
            SimEncoder encoder(world);
            ExperiencePool pool;
            Evolver evolver(pool, world, language, encoder, config.evolve);
            for (int round = 0; round < times; ++round) {
                train_pool(evolver, world, singles, config.evolve.batch_size, config.preference);
                train_pool(evolver, world, pairs, config.evolve.batch_size, config.preference);
            }
            WorkflowConfig wf = config.workflow;
            wf.preference = config.preference;
            std::vector<TraceStat> stats;
            for (auto& img : tests)
                stats.push_back(stat_of(run_workflow(img, world, pool, &language, &encoder, wf), world, config.preference));
            out.per_condition.push_back(std::move(stats));
        }
        return out;
    });

    ExperimentReport report;
    report.name = "evolution-times";
    SimWorld metrics_world(preset_world(WorldPreset::GroupB, config.base_seed));
    for (int c = 0; c < conditions; ++c) {
        std::vector<TraceStat> all;
        std::vector<double> inv, rb;
        for (auto& o : outcomes) {
            auto& v = o.per_condition[static_cast<std::size_t>(c)];
            all.insert(all.end(), v.begin(), v.end());
            inv.push_back(mean_of(v, &TraceStat::invocations));
            rb.push_back(mean_of(v, &TraceStat::o_rollbacks) + mean_of(v, &TraceStat::t_rollbacks));
        }
        report.conditions.push_back(aggregate("times=" + std::to_string(c), all));
        report.per_seed_invocations.push_back(inv);
        report.per_seed_total_rollbacks.push_back(rb);
    }
    fill_uqi(report.conditions, metrics_world.metrics(config.preference));
    return report;
}

GateExperiment gate_experiment(WorldPreset preset, int seeds, std::uint64_t base_seed, const EvolveConfig& config,
                               Preference preference) {
    GateExperiment out;
    for (int s = 0; s < seeds; ++s) {
        SimWorld world(preset_world(preset, base_seed + static_cast<std::uint64_t>(s)));
        if (world.spec().degradations.size() != 1) throw Error(ErrorCode::InvalidInput, "gate experiment needs a single-degradation world");
        const DegradationSet D{world.spec().degradations.front().type};
        SimLanguageOracle language(world);
        SimEncoder encoder(world);
        ExperiencePool pool;
        Evolver evolver(pool, world, language, encoder, config);
        for (auto& img : world.generate_images(static_cast<std::size_t>(config.batch_size), D)) evolver.acquire(img, D, preference);
        auto reports = evolver.evolve_ready(1);
        if (reports.empty()) continue;
        ++out.rounds;
        (reports.front().gate == Gate::SufficientAlone ? out.sufficient : out.needs_fine) += 1;
    }
    return out;
}

}  // namespace expool
