#pragma once

#include "expool/environment.hpp"
#include "expool/oracles.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

namespace expool {

// ---- world description -------------------------------------------------------------------

struct PatternSpec {
    std::string name;
    double weight = 1.0;
    std::string description;
};

struct DegradationSpec {
    DegradationType type;
    std::vector<PatternSpec> patterns;
};

struct ToolSpec {
    ToolId id;
    DegradationType degradation;
    std::vector<double> effectiveness;  // one per pattern of `degradation`
    double fidelity_delta = 0.0;
    double perception_delta = 0.0;
    double failure_rate = 0.0;
};

// Multiplies the effectiveness of any tool treating `second` once `first` has already been
// treated. Optional conditions restrict the rule to one latent pattern or to the tool that
// treated `first`; the latter breaks the premise that order effects are tool-independent.
struct OrderRule {
    DegradationType first;
    DegradationType second;
    double factor = 1.0;
    std::optional<std::pair<DegradationType, int>> when_pattern;
    std::optional<ToolId> when_tool;
};

struct MetricModel {
    MetricSpec spec;
    Preference family = Preference::Fidelity;
    double base = 0.0;
    double scale = 1.0;
    double sigma = 0.0;
};

struct WorldSpec {
    std::vector<DegradationSpec> degradations;
    std::vector<ToolSpec> tools;  // registry order is catalog order
    std::vector<OrderRule> order_rules;
    std::vector<MetricModel> metrics;
    double residual_penalty = 1.0;
    double resolve_threshold = 0.1;
    double severity_min = 0.6;
    double severity_max = 1.0;
    int embedding_dim = 16;
    double cluster_separation = 1.0;  // norm of each pattern centre
    double cluster_spread = 0.08;     // per-coordinate noise
    double perception_error = 0.0;
    double debate_confusion = 0.0;
    double refine_error = 0.0;
    std::uint64_t seed = 0;

    void validate() const;  // throws SpecError
};

Json to_json(const WorldSpec& spec);
WorldSpec world_spec_from_json(const Json& doc);

// Default metric suites: fidelity {psnr, ssim, lpips, dists}, perception {maniqa, musiq,
// brisque, clipiqa, niqe, nima}.
std::vector<MetricModel> default_metrics(double relative_sigma);

enum class WorldPreset { GroupA, GroupB, GroupC, Dominant, Symmetric, Counterexample };

WorldPreset parse_world_preset(std::string_view name);
std::string_view to_string(WorldPreset preset);
WorldSpec preset_world(WorldPreset preset, std::uint64_t seed);

// Random world whose order effects never depend on the tool and whose tool quality is
// aligned with effectiveness, so the best tool per degradation is order-independent.
WorldSpec random_premise_world(std::uint64_t seed);

// ---- world state -------------------------------------------------------------------------

struct ImageState {
    ImageRef id;
    std::map<DegradationType, int> pattern;      // latent pattern per present degradation
    std::map<DegradationType, double> residual;  // severity left
    std::vector<std::pair<DegradationType, ToolId>> treatments;
    double fidelity_quality = 0.0;
    double perception_quality = 0.0;
    ImageRef parent;  // empty for originals
    ImageRef root;

    DegradationSet degradations() const;
};

std::uint64_t stable_hash(std::string_view text, std::uint64_t seed = 0);

class SimWorld : public Environment {
public:
    explicit SimWorld(WorldSpec spec);
    SimWorld(SimWorld&& other) noexcept;

    const WorldSpec& spec() const noexcept { return spec_; }

    // Deterministic under the seed and the sequence of generate calls.
    std::vector<ImageRef> generate_images(std::size_t n, const DegradationSet& degradations);
    // Re-inserts a stored original (manifest loading).
    void add_image(const ImageState& state);

    ImageState state(const ImageRef& image) const;  // throws ImageNotFound
    bool has_image(const ImageRef& image) const;
    std::vector<ImageRef> originals() const;

    // Latent label "dark#0|motion blur#1" over the present degradations.
    std::string latent_label(const ImageRef& image) const;
    std::string describe(const ImageRef& image) const;
    Eigen::VectorXd embedding(const ImageRef& image) const;
    double utility(const ImageRef& image, Preference preference) const;

    const ToolSpec& tool(const ToolId& id, const DegradationType& degradation) const;

    // Environment
    const ToolRegistry& registry() const override { return registry_; }
    const MetricSet& metrics(Preference preference) const override;
    DegradationSet perceive(const ImageRef& image, int attempt) override;
    std::optional<ImageRef> apply_tool(const ImageRef& image, const ToolId& tool,
                                       const DegradationType& degradation) override;
    DegradationSet reflect(const ImageRef& image, const DegradationSet& perceived) override;
    MetricVector score(const ImageRef& image, Preference preference) override;

    // Noise-free evaluation of a state without registering it.
    ImageState simulate(const ImageState& from, const ToolId& tool, const DegradationType& degradation) const;

    Json manifest() const;
    static SimWorld from_manifest(const Json& doc);
    void save(const std::filesystem::path& path) const;
    static SimWorld load(const std::filesystem::path& path);

private:
    double order_factor(const ImageState& s, const DegradationType& d) const;
    ImageState make_original(std::size_t index, const DegradationSet& degradations) const;

    WorldSpec spec_;
    ToolRegistry registry_;
    MetricSet fidelity_;
    MetricSet perception_;
    std::map<std::pair<std::string, int>, Eigen::VectorXd> centers_;
    mutable std::shared_mutex mutex_;
    std::map<ImageRef, ImageState> states_;
    std::vector<ImageRef> originals_;
    std::size_t generated_ = 0;
};

// ---- ground-truth oracle -----------------------------------------------------------------

struct JointCandidate {
    std::map<DegradationType, ToolId> tools;
    RemovalOrder order;
    double utility = 0.0;
    std::string key() const;
};

struct OptimumTable {
    std::vector<JointCandidate> candidates;  // best first, ties by key
    const JointCandidate& best() const { return candidates.front(); }
};

// Exhaustive search over every tool assignment and every order, noise-free.
OptimumTable brute_force_optimum(const SimWorld& world, const ImageRef& image, Preference preference);

// Best tool per degradation when applied alone, then the best order with those tools fixed.
JointCandidate anchored_optimum(const SimWorld& world, const ImageRef& image, Preference preference);

// ---- mocks -------------------------------------------------------------------------------

class SimEncoder : public EncoderOracle {
public:
    explicit SimEncoder(const SimWorld& world) : world_(world) {}
    Eigen::VectorXd embed(const ImageRef& image) override { return world_.embedding(image); }
    Eigen::Index dimension() const override { return world_.spec().embedding_dim; }

private:
    const SimWorld& world_;
};

// Answers every language capability from the world's ground truth, with the configured
// confusion rates. Capabilities listed in `unavailable` throw OracleUnavailable.
class SimLanguageOracle : public LanguageOracle {
public:
    explicit SimLanguageOracle(const SimWorld& world) : world_(world) {}
    std::string call(Capability capability, const Json& request) override;

    std::set<Capability> unavailable;
    std::size_t calls() const { return calls_; }

private:
    std::string debate(const Json& request) const;
    std::string refine(const Json& request) const;
    std::string plan(const Json& request) const;
    std::string insight(const Json& request) const;

    const SimWorld& world_;
    std::atomic<std::size_t> calls_{0};
};

}  // namespace expool
