#pragma once

#include "expool/evolve.hpp"
#include "expool/simenv.hpp"
#include "expool/workflow.hpp"

#include <string>
#include <vector>

namespace expool {

// One-sided paired t-test of H1: mean(a - b) > 0.
struct PairedTest {
    std::string a;
    std::string b;
    int n = 0;
    double mean_diff = 0.0;
    double t = 0.0;
    double p = 1.0;
};

PairedTest paired_t_test(std::string a_label, const std::vector<double>& a, std::string b_label,
                         const std::vector<double>& b);

// Per condition: flip lower-is-better metrics, min-max normalize across conditions, average
// over metrics. A metric that does not vary contributes 0.5.
std::vector<double> unified_quality_index(const std::vector<MetricVector>& condition_means, const MetricSet& metrics);

struct ConditionSummary {
    std::string label;
    int traces = 0;
    double invocations = 0.0;
    double o_rollbacks = 0.0;
    double t_rollbacks = 0.0;
    double total_rollbacks = 0.0;
    double success_rate = 0.0;
    MetricVector metric_means;  // over final images
    double uqi = 0.0;
};

// Aggregates traces per label; scores each final image under `preference`. UQI is filled in
// across the returned conditions.
std::vector<ConditionSummary> summarize_conditions(const std::vector<std::pair<std::string, std::vector<WorkflowTrace>>>& runs,
                                                   Environment& env, Preference preference);

struct ExperimentReport {
    std::string name;
    std::vector<ConditionSummary> conditions;
    // Per-seed mean invocations, [condition][seed].
    std::vector<std::vector<double>> per_seed_invocations;
    std::vector<std::vector<double>> per_seed_total_rollbacks;
    std::vector<PairedTest> tests;
    std::vector<std::string> notes;

    std::string csv() const;
    std::string summary() const;
    Json to_json() const;
};

// Trains singles before pairs: acquire `per_set` records per set, evolve, move on.
void train_pool(Evolver& evolver, SimWorld& world, const std::vector<DegradationSet>& sets, int per_set,
                Preference preference);

struct GranularityConfig {
    int seeds = 10;
    std::uint64_t base_seed = 1;
    int train_per_set = 50;
    int test_images = 20;
    Preference preference = Preference::Fidelity;
    EvolveConfig evolve;
    WorkflowConfig workflow;
    int jobs = 1;
};

// GroupA-like world; conditions none / insight / coarse / fine on shared test images.
ExperimentReport granularity_ablation(const GranularityConfig& config);

struct EvolutionTimesConfig {
    int seeds = 5;
    std::uint64_t base_seed = 1;
    int max_times = 2;
    int test_images_per_set = 20;
    Preference preference = Preference::Fidelity;
    EvolveConfig evolve;
    WorkflowConfig workflow;
    int jobs = 1;
};

// GroupB-like world; Times = number of evolution rounds (B records per degradation set each).
ExperimentReport evolution_times(const EvolutionTimesConfig& config);

struct GateExperiment {
    int rounds = 0;
    int sufficient = 0;
    int needs_fine = 0;
};

// One evolution round of B records per seed on a single-degradation preset world.
GateExperiment gate_experiment(WorldPreset preset, int seeds, std::uint64_t base_seed, const EvolveConfig& config,
                               Preference preference = Preference::Fidelity);

}  // namespace expool
