#include "expool/simenv.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <random>
#include <regex>

namespace expool {

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

double uniform01(std::uint64_t h) {
    return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);
}

const char* family_name(Preference p) { return p == Preference::Fidelity ? "fidelity" : "perception"; }

Json pattern_map_json(const std::map<DegradationType, int>& m) {
    Json j = Json::object();
    for (auto& [d, p] : m) j[d.str()] = p;
    return j;
}

Json residual_map_json(const std::map<DegradationType, double>& m) {
    Json j = Json::object();
    for (auto& [d, r] : m) j[d.str()] = r;
    return j;
}

}  // namespace

std::uint64_t stable_hash(std::string_view text, std::uint64_t seed) {
    std::uint64_t h = kFnvOffset ^ (seed * 0x9E3779B97F4A7C15ull);
    for (unsigned char c : text) {
        h ^= c;
        h *= kFnvPrime;
    }
    // splitmix finaliser
    h ^= h >> 30;
    h *= 0xBF58476D1CE4E5B9ull;
    h ^= h >> 27;
    h *= 0x94D049BB133111EBull;
    h ^= h >> 31;
    return h;
}

// ---- spec --------------------------------------------------------------------------------

void WorldSpec::validate() const {
    auto fail = [](const std::string& msg) { throw Error(ErrorCode::SpecError, msg); };
    if (degradations.empty()) fail("world needs at least one degradation type");
    std::set<DegradationType> types;
    for (auto& d : degradations) {
        if (!types.insert(d.type).second) fail("duplicate degradation " + d.type.str());
        if (d.patterns.empty()) fail(d.type.str() + " needs at least one pattern");
        for (auto& p : d.patterns)
            if (!(p.weight > 0)) fail("pattern weights must be positive");
    }
    for (auto& t : tools) {
        auto it = std::find_if(degradations.begin(), degradations.end(),
                               [&](const DegradationSpec& d) { return d.type == t.degradation; });
        if (it == degradations.end()) fail("tool " + t.id.str() + " targets unknown degradation");
        if (t.effectiveness.size() != it->patterns.size())
            fail("tool " + t.id.str() + " needs one effectiveness per pattern");
        for (double e : t.effectiveness)
            if (!(e >= 0 && e <= 1)) fail("effectiveness must lie in [0, 1]");
        if (!(t.failure_rate >= 0 && t.failure_rate <= 1)) fail("failure rate must lie in [0, 1]");
    }
    for (auto& d : degradations)
        if (std::none_of(tools.begin(), tools.end(), [&](const ToolSpec& t) { return t.degradation == d.type; }))
            fail(d.type.str() + " has no tools");
    for (auto& r : order_rules) {
        if (!(r.factor > 0)) fail("order factors must be positive");
        if (!types.count(r.first) || !types.count(r.second)) fail("order rule names unknown degradation");
    }
    if (metrics.empty()) fail("world needs metrics");
    if (!(resolve_threshold > 0)) fail("resolve threshold must be positive");
    if (!(severity_min >= 0 && severity_min <= severity_max && severity_max <= 1)) fail("severity range must lie in [0, 1]");
    if (embedding_dim < 2) fail("embedding dimension must be at least 2");
    for (double rate : {perception_error, debate_confusion, refine_error})
        if (!(rate >= 0 && rate <= 1)) fail("error rates must lie in [0, 1]");
}

Json to_json(const WorldSpec& spec) {
    Json degs = Json::array();
    for (auto& d : spec.degradations) {
        Json pats = Json::array();
        for (auto& p : d.patterns)
            pats.push_back({{"name", p.name}, {"weight", p.weight}, {"description", p.description}});
        degs.push_back({{"type", d.type.str()}, {"patterns", pats}});
    }
    Json tools = Json::array();
    for (auto& t : spec.tools)
        tools.push_back({{"id", t.id.str()},
                         {"degradation", t.degradation.str()},
                         {"effectiveness", t.effectiveness},
                         {"fidelity_delta", t.fidelity_delta},
                         {"perception_delta", t.perception_delta},
                         {"failure_rate", t.failure_rate}});
    Json rules = Json::array();
    for (auto& r : spec.order_rules) {
        Json j{{"first", r.first.str()}, {"second", r.second.str()}, {"factor", r.factor}};
        if (r.when_pattern) j["when_pattern"] = {{"degradation", r.when_pattern->first.str()}, {"pattern", r.when_pattern->second}};
        if (r.when_tool) j["when_tool"] = r.when_tool->str();
        rules.push_back(j);
    }
    Json metrics = Json::array();
    for (auto& m : spec.metrics)
        metrics.push_back({{"name", m.spec.name},
                           {"direction", m.spec.direction == MetricDirection::HigherBetter ? "higher" : "lower"},
                           {"family", family_name(m.family)},
                           {"base", m.base},
                           {"scale", m.scale},
                           {"sigma", m.sigma}});
    return Json{{"degradations", degs},
                {"tools", tools},
                {"order_rules", rules},
                {"metrics", metrics},
                {"residual_penalty", spec.residual_penalty},
                {"resolve_threshold", spec.resolve_threshold},
                {"severity_min", spec.severity_min},
                {"severity_max", spec.severity_max},
                {"embedding_dim", spec.embedding_dim},
                {"cluster_separation", spec.cluster_separation},
                {"cluster_spread", spec.cluster_spread},
                {"perception_error", spec.perception_error},
                {"debate_confusion", spec.debate_confusion},
                {"refine_error", spec.refine_error},
                {"seed", spec.seed}};
}

WorldSpec world_spec_from_json(const Json& doc) {
    try {
        WorldSpec s;
        for (auto& d : doc.at("degradations")) {
            DegradationSpec ds;
            ds.type = DegradationType(d.at("type").get<std::string>());
            for (auto& p : d.at("patterns"))
                ds.patterns.push_back({p.at("name").get<std::string>(), p.value("weight", 1.0),
                                       p.value("description", std::string())});
            s.degradations.push_back(std::move(ds));
        }
        for (auto& t : doc.at("tools")) {
            ToolSpec ts;
            ts.id = ToolId(t.at("id").get<std::string>());
            ts.degradation = DegradationType(t.at("degradation").get<std::string>());
            ts.effectiveness = t.at("effectiveness").get<std::vector<double>>();
            ts.fidelity_delta = t.value("fidelity_delta", 0.0);
            ts.perception_delta = t.value("perception_delta", 0.0);
            ts.failure_rate = t.value("failure_rate", 0.0);
            s.tools.push_back(std::move(ts));
        }
        for (auto& r : doc.value("order_rules", Json::array())) {
            OrderRule rule;
            rule.first = DegradationType(r.at("first").get<std::string>());
            rule.second = DegradationType(r.at("second").get<std::string>());
            rule.factor = r.at("factor").get<double>();
            if (r.contains("when_pattern"))
                rule.when_pattern = std::make_pair(
                    DegradationType(r["when_pattern"].at("degradation").get<std::string>()),
                    r["when_pattern"].at("pattern").get<int>());
            if (r.contains("when_tool")) rule.when_tool = ToolId(r["when_tool"].get<std::string>());
            s.order_rules.push_back(std::move(rule));
        }
        for (auto& m : doc.at("metrics")) {
            MetricModel mm;
            mm.spec.name = m.at("name").get<std::string>();
            auto dir = m.at("direction").get<std::string>();
            if (dir != "higher" && dir != "lower") throw Error(ErrorCode::SpecError, "metric direction must be higher or lower");
            mm.spec.direction = dir == "higher" ? MetricDirection::HigherBetter : MetricDirection::LowerBetter;
            mm.family = parse_preference(m.at("family").get<std::string>());
            mm.base = m.value("base", 0.0);
            mm.scale = m.value("scale", 1.0);
            mm.sigma = m.value("sigma", 0.0);
            s.metrics.push_back(std::move(mm));
        }
        s.residual_penalty = doc.value("residual_penalty", s.residual_penalty);
        s.resolve_threshold = doc.value("resolve_threshold", s.resolve_threshold);
        s.severity_min = doc.value("severity_min", s.severity_min);
        s.severity_max = doc.value("severity_max", s.severity_max);
        s.embedding_dim = doc.value("embedding_dim", s.embedding_dim);
        s.cluster_separation = doc.value("cluster_separation", s.cluster_separation);
        s.cluster_spread = doc.value("cluster_spread", s.cluster_spread);
        s.perception_error = doc.value("perception_error", s.perception_error);
        s.debate_confusion = doc.value("debate_confusion", s.debate_confusion);
        s.refine_error = doc.value("refine_error", s.refine_error);
        s.seed = doc.value("seed", std::uint64_t{0});
        s.validate();
        return s;
    } catch (const Json::exception& e) {
        throw Error(ErrorCode::SpecError, std::string("malformed world spec: ") + e.what());
    }
}

std::vector<MetricModel> default_metrics(double relative_sigma) {
    struct Row {
        const char* name;
        MetricDirection dir;
        Preference family;
        double base, scale;
    };
    const auto H = MetricDirection::HigherBetter;
    const auto L = MetricDirection::LowerBetter;
    const auto F = Preference::Fidelity;
    const auto P = Preference::Perception;
    const Row rows[] = {
        {"psnr", H, F, 24.0, 8.0},     {"ssim", H, F, 0.75, 0.15},   {"lpips", L, F, 0.30, 0.15},
        {"dists", L, F, 0.20, 0.10},   {"maniqa", H, P, 0.45, 0.15}, {"musiq", H, P, 55.0, 12.0},
        {"brisque", L, P, 30.0, 12.0}, {"clipiqa", H, P, 0.50, 0.15}, {"niqe", L, P, 5.0, 1.5},
        {"nima", H, P, 5.0, 0.8},
    };
    std::vector<MetricModel> out;
    for (auto& r : rows) out.push_back({{r.name, r.dir}, r.family, r.base, r.scale, relative_sigma * r.scale});
    return out;
}

// ---- presets -----------------------------------------------------------------------------

std::string_view to_string(WorldPreset preset) {
    switch (preset) {
        case WorldPreset::GroupA: return "groupa";
        case WorldPreset::GroupB: return "groupb";
        case WorldPreset::GroupC: return "groupc";
        case WorldPreset::Dominant: return "dominant";
        case WorldPreset::Symmetric: return "symmetric";
        case WorldPreset::Counterexample: return "counterexample";
    }
    return "groupa";
}

WorldPreset parse_world_preset(std::string_view name) {
    for (auto p : {WorldPreset::GroupA, WorldPreset::GroupB, WorldPreset::GroupC, WorldPreset::Dominant,
                   WorldPreset::Symmetric, WorldPreset::Counterexample})
        if (to_string(p) == name) return p;
    throw Error(ErrorCode::SpecError, "unknown world preset '" + std::string(name) + "'");
}

namespace {

ToolSpec tool(const char* id, const char* degradation, std::vector<double> eff, double delta) {
    return ToolSpec{ToolId(id), DegradationType(degradation), std::move(eff), delta, delta, 0.0};
}

}  // namespace

WorldSpec preset_world(WorldPreset preset, std::uint64_t seed) {
    WorldSpec s;
    s.seed = seed;
    s.metrics = default_metrics(0.03);
    switch (preset) {
        case WorldPreset::GroupA:
            s.degradations = {
                {"dark", {{"underexposed", 0.5, "dark: globally underexposed with flat, murky shadows"},
                          {"backlit", 0.5, "dark: backlit scene, bright sky over a crushed foreground"}}},
                {"motion blur", {{"linear", 0.5, "motion blur: long straight streaks from camera translation"},
                                 {"shake", 0.5, "motion blur: curved double edges from handheld rotation"}}},
            };
            s.tools = {
                tool("gamma", "dark", {0.55, 0.55}, 0.01),
                tool("constant_shift", "dark", {0.60, 0.50}, 0.01),
                tool("clahe", "dark", {0.97, 0.97}, 0.04),
                tool("fourierdiff", "dark", {0.80, 0.80}, 0.02),
                tool("maxim", "motion blur", {0.50, 0.50}, 0.01),
                tool("nafnet", "motion blur", {0.60, 0.55}, 0.01),
                tool("mprnet", "motion blur", {0.97, 0.72}, 0.04),
                tool("restormer", "motion blur", {0.72, 0.97}, 0.04),
            };
            // Underexposed frames want deblurring first; backlit frames want brightening first.
            s.order_rules = {
                {"dark", "motion blur", 0.5, std::make_pair(DegradationType("dark"), 0), std::nullopt},
                {"motion blur", "dark", 0.5, std::make_pair(DegradationType("dark"), 1), std::nullopt},
            };
            break;
        case WorldPreset::GroupB:
            s.degradations = {
                {"dark", {{"typical", 1.0, "dark: low light across the frame"}}},
                {"motion blur", {{"typical", 1.0, "motion blur: directional smearing"}}},
                {"rain", {{"typical", 1.0, "rain: bright slanted streaks"}}},
            };
            s.tools = {
                tool("gamma", "dark", {0.50}, 0.0),
                tool("constant_shift", "dark", {0.60}, 0.0),
                tool("clahe", "dark", {0.93}, 0.0),
                tool("diffplugin", "dark", {0.97}, 0.06),
                tool("maxim", "motion blur", {0.50}, 0.0),
                tool("nafnet", "motion blur", {0.60}, 0.0),
                tool("mprnet", "motion blur", {0.93}, 0.0),
                tool("xrestormer", "motion blur", {0.97}, 0.06),
                tool("mprnet_derain", "rain", {0.50}, 0.0),
                tool("maxim_derain", "rain", {0.60}, 0.0),
                tool("restormer_derain", "rain", {0.93}, 0.0),
                tool("xrestormer_derain", "rain", {0.97}, 0.06),
            };
            // rain -> motion blur -> dark is best everywhere.
            s.order_rules = {
                {"dark", "motion blur", 0.5, std::nullopt, std::nullopt},
                {"motion blur", "rain", 0.5, std::nullopt, std::nullopt},
                {"dark", "rain", 0.5, std::nullopt, std::nullopt},
            };
            break;
        case WorldPreset::GroupC:
            s.degradations = {
                {"dark", {{"underexposed", 0.5, "dark: globally underexposed with flat, murky shadows"},
                          {"night", 0.5, "dark: night scene lit by point sources"}}},
                {"haze", {{"uniform", 0.5, "haze: even milky veil"}, {"dense", 0.5, "haze: thick depth-dependent fog"}}},
                {"noise", {{"gaussian", 1.0, "noise: fine grain over flat regions"}}},
            };
            s.tools = {
                tool("gamma", "dark", {0.55, 0.6}, 0.01),
                tool("clahe", "dark", {0.97, 0.75}, 0.04),
                tool("fourierdiff", "dark", {0.78, 0.97}, 0.04),
                tool("ridcp", "haze", {0.6, 0.55}, 0.01),
                tool("dehazeformer", "haze", {0.97, 0.8}, 0.04),
                tool("maxim_dehaze", "haze", {0.8, 0.97}, 0.04),
                tool("swinir", "noise", {0.6}, 0.01),
                tool("restormer", "noise", {0.97}, 0.04),
            };
            s.order_rules = {
                {"dark", "noise", 0.3, std::nullopt, std::nullopt},
                {"dark", "haze", 0.4, std::make_pair(DegradationType("haze"), 1), std::nullopt},
                {"haze", "dark", 0.4, std::make_pair(DegradationType("haze"), 0), std::nullopt},
                {"noise", "haze", 0.8, std::nullopt, std::nullopt},
            };
            break;
        case WorldPreset::Dominant:
            s.degradations = {{"motion blur", {{"typical", 1.0, "motion blur: directional smearing"}}}};
            s.tools = {
                tool("maxim", "motion blur", {0.65}, 0.02),
                tool("nafnet", "motion blur", {0.60}, 0.02),
                tool("mprnet", "motion blur", {0.55}, 0.02),
                tool("xrestormer", "motion blur", {0.95}, 0.02),
            };
            break;
        case WorldPreset::Symmetric:
            s.degradations = {{"motion blur", {{"typical", 1.0, "motion blur: directional smearing"}}}};
            s.tools = {
                tool("maxim", "motion blur", {0.80}, 0.02),
                tool("nafnet", "motion blur", {0.80}, 0.02),
                tool("mprnet", "motion blur", {0.80}, 0.02),
                tool("xrestormer", "motion blur", {0.80}, 0.02),
            };
            break;
        case WorldPreset::Counterexample:
            s.degradations = {
                {"dark", {{"typical", 1.0, "dark: low light across the frame"}}},
                {"motion blur", {{"typical", 1.0, "motion blur: directional smearing"}}},
            };
            s.tools = {
                tool("zero_dce", "dark", {0.95}, 0.03),
                tool("sharpnet", "motion blur", {0.95}, 0.10),
                tool("gentle_deblur", "motion blur", {0.85}, 0.05),
            };
            // sharpnet leaves ringing that later brightening amplifies
            s.order_rules = {
                {"motion blur", "dark", 0.3, std::nullopt, ToolId("sharpnet")},
                {"dark", "motion blur", 0.8, std::nullopt, std::nullopt},
            };
            break;
    }
    s.validate();
    return s;
}

WorldSpec random_premise_world(std::uint64_t seed) {
    std::mt19937_64 rng(stable_hash("premise-world", seed));
    std::uniform_real_distribution<double> u(0, 1);
    const std::vector<std::string> pool{"dark", "haze", "jpeg", "motion blur", "noise", "rain"};
    std::vector<std::string> names = pool;
    std::shuffle(names.begin(), names.end(), rng);
    const int type_count = 2 + static_cast<int>(rng() % 2);
    names.resize(type_count);
    std::sort(names.begin(), names.end());

    WorldSpec s;
    s.seed = seed;
    s.metrics = default_metrics(0.0);
    for (auto& n : names) {
        DegradationSpec d{DegradationType(n), {}};
        const int patterns = 1 + static_cast<int>(rng() % 2);
        for (int p = 0; p < patterns; ++p)
            d.patterns.push_back({"p" + std::to_string(p), 0.3 + u(rng), n + ": variant " + std::to_string(p)});
        const int tools = 2 + static_cast<int>(rng() % 3);
        // One quality ordering shared by every pattern and by the quality delta.
        std::vector<std::vector<double>> eff_by_pattern(patterns);
        for (auto& col : eff_by_pattern) {
            for (int t = 0; t < tools; ++t) col.push_back(0.3 + 0.69 * u(rng));
            std::sort(col.begin(), col.end());
        }
        std::vector<double> deltas;
        for (int t = 0; t < tools; ++t) deltas.push_back(0.1 * u(rng));
        std::sort(deltas.begin(), deltas.end());
        std::vector<int> catalog(tools);
        std::iota(catalog.begin(), catalog.end(), 0);
        std::shuffle(catalog.begin(), catalog.end(), rng);
        for (int t : catalog) {
            ToolSpec ts;
            ts.id = ToolId(n + "_tool" + std::to_string(t));
            ts.degradation = d.type;
            for (int p = 0; p < patterns; ++p) ts.effectiveness.push_back(eff_by_pattern[p][t]);
            ts.fidelity_delta = ts.perception_delta = deltas[t];
            s.tools.push_back(ts);
        }
        s.degradations.push_back(std::move(d));
    }
    for (auto& a : s.degradations)
        for (auto& b : s.degradations) {
            if (a.type == b.type || u(rng) < 0.3) continue;
            OrderRule r;
            r.first = a.type;
            r.second = b.type;
            r.factor = 0.3 + 0.7 * u(rng);
            if (u(rng) < 0.5) {
                auto& cond = u(rng) < 0.5 ? a : b;
                r.when_pattern = std::make_pair(cond.type, static_cast<int>(rng() % cond.patterns.size()));
            }
            s.order_rules.push_back(r);
        }
    s.validate();
    return s;
}

// ---- state -------------------------------------------------------------------------------

DegradationSet ImageState::degradations() const {
    std::vector<DegradationType> ds;
    for (auto& [d, _] : pattern) ds.push_back(d);
    return DegradationSet(ds);
}

SimWorld::SimWorld(WorldSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    for (auto& t : spec_.tools) registry_.add(t.degradation, t.id);
    for (auto& m : spec_.metrics) (m.family == Preference::Fidelity ? fidelity_ : perception_).push_back(m.spec);
    for (auto& d : spec_.degradations)
        for (std::size_t p = 0; p < d.patterns.size(); ++p) {
            std::mt19937_64 rng(stable_hash("centre|" + d.type.str() + "#" + std::to_string(p), spec_.seed));
            std::normal_distribution<double> g;
            Eigen::VectorXd c(spec_.embedding_dim);
            for (Eigen::Index i = 0; i < c.size(); ++i) c(i) = g(rng);
            centers_[{d.type.str(), static_cast<int>(p)}] = c.normalized() * spec_.cluster_separation;
        }
}

SimWorld::SimWorld(SimWorld&& other) noexcept
    : spec_(std::move(other.spec_)),
      registry_(std::move(other.registry_)),
      fidelity_(std::move(other.fidelity_)),
      perception_(std::move(other.perception_)),
      centers_(std::move(other.centers_)),
      states_(std::move(other.states_)),
      originals_(std::move(other.originals_)),
      generated_(other.generated_) {}

const MetricSet& SimWorld::metrics(Preference preference) const {
    return preference == Preference::Fidelity ? fidelity_ : perception_;
}

ImageState SimWorld::make_original(std::size_t index, const DegradationSet& degradations) const {
    ImageState s;
    char buf[32];
    std::snprintf(buf, sizeof buf, "img%05zu", index);
    s.id = buf;
    s.root = s.id;
    std::mt19937_64 rng(stable_hash("image|" + s.id + "|" + (degradations.empty() ? std::string("clean") : canonical_key(degradations)), spec_.seed));
    std::uniform_real_distribution<double> u(0, 1);
    for (auto& d : degradations.members()) {
        auto it = std::find_if(spec_.degradations.begin(), spec_.degradations.end(),
                               [&](const DegradationSpec& ds) { return ds.type == d; });
        if (it == spec_.degradations.end()) throw Error(ErrorCode::UnknownDegradation, d.str());
        double total = 0;
        for (auto& p : it->patterns) total += p.weight;
        double x = u(rng) * total;
        int chosen = static_cast<int>(it->patterns.size()) - 1;
        for (std::size_t p = 0; p < it->patterns.size(); ++p) {
            if (x < it->patterns[p].weight) {
                chosen = static_cast<int>(p);
                break;
            }
            x -= it->patterns[p].weight;
        }
        s.pattern[d] = chosen;
        s.residual[d] = spec_.severity_min + (spec_.severity_max - spec_.severity_min) * u(rng);
    }
    return s;
}

std::vector<ImageRef> SimWorld::generate_images(std::size_t n, const DegradationSet& degradations) {
    if (degradations.size() > kMaxDegradations) throw Error(ErrorCode::TooLarge, "at most 4 degradations per image");
    std::unique_lock lock(mutex_);
    std::vector<ImageRef> out;
    for (std::size_t i = 0; i < n; ++i) {
        auto s = make_original(generated_++, degradations);
        out.push_back(s.id);
        originals_.push_back(s.id);
        states_[s.id] = std::move(s);
    }
    return out;
}

void SimWorld::add_image(const ImageState& state) {
    std::unique_lock lock(mutex_);
    auto s = state;
    s.root = s.id;
    s.parent.clear();
    if (!states_.count(s.id)) originals_.push_back(s.id);
    states_[s.id] = std::move(s);
}

ImageState SimWorld::state(const ImageRef& image) const {
    {
        std::shared_lock lock(mutex_);
        auto it = states_.find(image);
        if (it != states_.end()) return it->second;
    }
    // Derived ids spell out their treatment chain, so states dropped by a reload can be rebuilt.
    const auto step = image.rfind('>');
    const auto colon = image.rfind(':');
    if (step == std::string::npos || colon == std::string::npos || colon < step)
        throw Error(ErrorCode::ImageNotFound, "unknown image " + image);
    try {
        return simulate(state(image.substr(0, step)), ToolId(image.substr(colon + 1)),
                        DegradationType(image.substr(step + 1, colon - step - 1)));
    } catch (const Error&) {
        throw Error(ErrorCode::ImageNotFound, "unknown image " + image);
    }
}

bool SimWorld::has_image(const ImageRef& image) const {
    std::shared_lock lock(mutex_);
    return states_.count(image) > 0;
}

std::vector<ImageRef> SimWorld::originals() const {
    std::shared_lock lock(mutex_);
    return originals_;
}

std::string SimWorld::latent_label(const ImageRef& image) const {
    auto s = state(state(image).root);
    std::string out;
    for (auto& [d, p] : s.pattern) {
        if (!out.empty()) out += "|";
        out += d.str() + "#" + std::to_string(p);
    }
    return out.empty() ? "clean" : out;
}

std::string SimWorld::describe(const ImageRef& image) const {
    auto s = state(state(image).root);
    std::string out;
    for (auto& [d, p] : s.pattern) {
        auto it = std::find_if(spec_.degradations.begin(), spec_.degradations.end(),
                               [&](const DegradationSpec& ds) { return ds.type == d; });
        if (!out.empty()) out += "; ";
        out += it->patterns[p].description;
    }
    return out.empty() ? "no visible degradation" : out;
}

Eigen::VectorXd SimWorld::embedding(const ImageRef& image) const {
    auto s = state(state(image).root);
    Eigen::VectorXd v = Eigen::VectorXd::Zero(spec_.embedding_dim);
    for (auto& [d, p] : s.pattern) v += centers_.at({d.str(), p});
    std::mt19937_64 rng(stable_hash("embed|" + s.id, spec_.seed));
    std::normal_distribution<double> g(0.0, spec_.cluster_spread);
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) += g(rng);
    double n = v.norm();
    if (n == 0) v(0) = 1, n = 1;
    return v / n;
}

double SimWorld::utility(const ImageRef& image, Preference preference) const {
    auto s = state(image);
    double residual = 0;
    for (auto& [d, r] : s.residual) residual += r;
    double q = preference == Preference::Fidelity ? s.fidelity_quality : s.perception_quality;
    return q - spec_.residual_penalty * residual;
}

const ToolSpec& SimWorld::tool(const ToolId& id, const DegradationType& degradation) const {
    for (auto& t : spec_.tools)
        if (t.id == id && t.degradation == degradation) return t;
    throw Error(ErrorCode::UnknownTool, id.str() + " is not registered for " + degradation.str());
}

double SimWorld::order_factor(const ImageState& s, const DegradationType& d) const {
    double f = 1.0;
    for (auto& r : spec_.order_rules) {
        if (r.second != d) continue;
        auto prior = std::find_if(s.treatments.begin(), s.treatments.end(),
                                  [&](const auto& t) { return t.first == r.first; });
        if (prior == s.treatments.end()) continue;
        if (r.when_pattern) {
            auto it = s.pattern.find(r.when_pattern->first);
            if (it == s.pattern.end() || it->second != r.when_pattern->second) continue;
        }
        if (r.when_tool && prior->second != *r.when_tool) continue;
        f *= r.factor;
    }
    return f;
}

ImageState SimWorld::simulate(const ImageState& from, const ToolId& tool_id, const DegradationType& degradation) const {
    const auto& t = tool(tool_id, degradation);
    ImageState s = from;
    s.parent = from.id;
    s.id = from.id + ">" + degradation.str() + ":" + tool_id.str();
    if (auto it = s.residual.find(degradation); it != s.residual.end()) {
        double e = std::clamp(t.effectiveness[s.pattern.at(degradation)] * order_factor(from, degradation), 0.0, 1.0);
        it->second *= 1.0 - e;
    }
    s.fidelity_quality += t.fidelity_delta;
    s.perception_quality += t.perception_delta;
    s.treatments.emplace_back(degradation, tool_id);
    return s;
}

DegradationSet SimWorld::perceive(const ImageRef& image, int attempt) {
    auto s = state(image);
    auto truth = s.degradations();
    if (truth.empty() || spec_.perception_error <= 0) return truth;
    std::mt19937_64 rng(stable_hash("perceive|" + image + "|" + std::to_string(attempt), spec_.seed));
    std::uniform_real_distribution<double> u(0, 1);
    if (u(rng) >= spec_.perception_error) return truth;
    std::vector<DegradationType> members = truth.members();
    std::vector<DegradationType> absent;
    for (auto& d : spec_.degradations)
        if (!truth.contains(d.type)) absent.push_back(d.type);
    std::size_t victim = rng() % members.size();
    if ((members.size() > 1 && u(rng) < 0.5) || absent.empty()) {
        if (members.size() > 1) members.erase(members.begin() + static_cast<long>(victim));
        else return truth;  // nothing else to confuse a lone degradation with
    } else {
        members[victim] = absent[rng() % absent.size()];
    }
    return DegradationSet(members);
}

std::optional<ImageRef> SimWorld::apply_tool(const ImageRef& image, const ToolId& tool_id,
                                             const DegradationType& degradation) {
    auto from = state(image);
    const auto& t = tool(tool_id, degradation);
    if (t.failure_rate > 0 &&
        uniform01(stable_hash("fail|" + image + "|" + degradation.str() + ":" + tool_id.str(), spec_.seed)) < t.failure_rate)
        return std::nullopt;
    auto next = simulate(from, tool_id, degradation);
    std::unique_lock lock(mutex_);
    auto id = next.id;
    states_.try_emplace(id, std::move(next));
    return id;
}

DegradationSet SimWorld::reflect(const ImageRef& image, const DegradationSet& perceived) {
    auto s = state(image);
    std::vector<DegradationType> left;
    for (auto& [d, r] : s.residual)
        if (r >= spec_.resolve_threshold) left.push_back(d);
    (void)perceived;  // perceived-but-absent degradations have nothing left to resolve
    return DegradationSet(left);
}

MetricVector SimWorld::score(const ImageRef& image, Preference preference) {
    MetricVector out;
    double u = utility(image, preference);
    for (auto& m : spec_.metrics) {
        if (m.family != preference) continue;
        double sign = m.spec.direction == MetricDirection::HigherBetter ? 1.0 : -1.0;
        double value = m.base + sign * m.scale * u;
        if (m.sigma > 0) {
            std::mt19937_64 rng(stable_hash("score|" + image + "|" + m.spec.name, spec_.seed));
            std::normal_distribution<double> g(0.0, m.sigma);
            value += g(rng);
        }
        out[m.spec.name] = value;
    }
    return out;
}

Json SimWorld::manifest() const {
    std::shared_lock lock(mutex_);
    Json images = Json::array();
    for (auto& id : originals_) {
        auto& s = states_.at(id);
        images.push_back({{"id", id}, {"patterns", pattern_map_json(s.pattern)}, {"residual", residual_map_json(s.residual)}});
    }
    return Json{{"schema", 1}, {"spec", to_json(spec_)}, {"generated", generated_}, {"images", images}};
}

SimWorld SimWorld::from_manifest(const Json& doc) {
    if (!doc.contains("schema") || doc["schema"] != 1)
        throw Error(ErrorCode::UnsupportedVersion, "world manifest schema must be 1");
    SimWorld w(world_spec_from_json(doc.at("spec")));
    try {
        for (auto& img : doc.at("images")) {
            ImageState s;
            s.id = img.at("id").get<std::string>();
            for (auto& [d, p] : img.at("patterns").items()) s.pattern[DegradationType(d)] = p.get<int>();
            for (auto& [d, r] : img.at("residual").items()) s.residual[DegradationType(d)] = r.get<double>();
            w.add_image(s);
        }
        w.generated_ = doc.value("generated", w.originals_.size());
    } catch (const Json::exception& e) {
        throw Error(ErrorCode::ParseError, std::string("malformed world manifest: ") + e.what());
    }
    return w;
}

void SimWorld::save(const std::filesystem::path& path) const {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw Error(ErrorCode::InvalidInput, "cannot write " + path.string());
        out << manifest().dump(1) << '\n';
    }
    std::filesystem::rename(tmp, path);
}

SimWorld SimWorld::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::InvalidInput, "cannot read " + path.string());
    Json doc;
    try {
        doc = Json::parse(in);
    } catch (const Json::exception& e) {
        throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
    }
    return from_manifest(doc);
}

// ---- ground truth ------------------------------------------------------------------------

std::string JointCandidate::key() const {
    std::string out = order_key(order) + " |";
    for (auto& [d, t] : tools) out += " " + d.str() + "=" + t.str();
    return out;
}

namespace {

double run_chain(const SimWorld& world, ImageState s, const RemovalOrder& order,
                 const std::map<DegradationType, ToolId>& tools, Preference preference) {
    for (auto& d : order) s = world.simulate(s, tools.at(d), d);
    double residual = 0;
    for (auto& [d, r] : s.residual) residual += r;
    double q = preference == Preference::Fidelity ? s.fidelity_quality : s.perception_quality;
    return q - world.spec().residual_penalty * residual;
}

std::vector<RemovalOrder> all_orders(const DegradationSet& D) {
    std::vector<RemovalOrder> out;
    RemovalOrder order = D.members();
    do out.push_back(order);
    while (std::next_permutation(order.begin(), order.end()));
    return out;
}

void sort_candidates(std::vector<JointCandidate>& c) {
    std::stable_sort(c.begin(), c.end(), [](const JointCandidate& a, const JointCandidate& b) {
        if (a.utility != b.utility) return a.utility > b.utility;
        return a.key() < b.key();
    });
}

}  // namespace

OptimumTable brute_force_optimum(const SimWorld& world, const ImageRef& image, Preference preference) {
    auto s0 = world.state(image);
    auto D = s0.degradations();
    if (D.size() > kMaxDegradations) throw Error(ErrorCode::TooLarge, "brute force capped at 4 degradations");
    OptimumTable table;
    if (D.empty()) {
        table.candidates.push_back({{}, {}, run_chain(world, s0, {}, {}, preference)});
        return table;
    }
    const auto& members = D.members();
    std::vector<std::size_t> idx(members.size(), 0);
    for (;;) {
        std::map<DegradationType, ToolId> tools;
        for (std::size_t i = 0; i < members.size(); ++i) tools[members[i]] = world.registry().tools(members[i])[idx[i]];
        for (auto& order : all_orders(D))
            table.candidates.push_back({tools, order, run_chain(world, s0, order, tools, preference)});
        std::size_t pos = 0;
        while (pos < members.size() && ++idx[pos] == world.registry().tools(members[pos]).size()) idx[pos++] = 0;
        if (pos == members.size()) break;
    }
    sort_candidates(table.candidates);
    return table;
}

JointCandidate anchored_optimum(const SimWorld& world, const ImageRef& image, Preference preference) {
    auto s0 = world.state(image);
    auto D = s0.degradations();
    if (D.size() > kMaxDegradations) throw Error(ErrorCode::TooLarge, "brute force capped at 4 degradations");
    std::map<DegradationType, ToolId> tools;
    for (auto& d : D.members()) {
        double best = -INFINITY;
        for (auto& t : world.registry().tools(d)) {
            double u = run_chain(world, s0, {d}, {{d, t}}, preference);
            if (u > best) {
                best = u;
                tools[d] = t;
            }
        }
    }
    std::vector<JointCandidate> c;
    for (auto& order : all_orders(D)) c.push_back({tools, order, run_chain(world, s0, order, tools, preference)});
    sort_candidates(c);
    return c.front();
}

// ---- mock language oracle ----------------------------------------------------------------

namespace {

std::set<std::string> tokens(const std::string& text) {
    std::set<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isalnum(static_cast<unsigned char>(ch))) {
            cur += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        } else if (!cur.empty()) {
            out.insert(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) out.insert(cur);
    return out;
}

double jaccard(const std::string& a, const std::string& b) {
    auto ta = tokens(a), tb = tokens(b);
    if (ta.empty() && tb.empty()) return 1.0;
    std::size_t inter = 0;
    for (auto& t : ta) inter += tb.count(t);
    return static_cast<double>(inter) / static_cast<double>(ta.size() + tb.size() - inter);
}

}  // namespace

std::string SimLanguageOracle::call(Capability capability, const Json& request) {
    ++calls_;
    if (unavailable.count(capability))
        throw Error(ErrorCode::OracleUnavailable, std::string(to_string(capability)) + " disabled in mock");
    switch (capability) {
        case Capability::Describe: return world_.describe(request.at("image").get<std::string>());
        case Capability::DebateTurn: return debate(request);
        case Capability::RefineChoice: return refine(request);
        case Capability::ProposePlan: return plan(request);
        case Capability::DistillInsight: return insight(request);
        case Capability::Embed: break;
    }
    throw Error(ErrorCode::InvalidInput, "embedding is not a language capability");
}

std::string SimLanguageOracle::debate(const Json& request) const {
    if (request.value("turn", 0) > 0) return "Thought: The groups hold together.\nAction: finish()";
    std::vector<std::string> labels;
    std::vector<std::pair<int, std::string>> assigned;
    for (auto& t : request.at("trajectories")) {
        auto label = world_.latent_label(t.at("image").get<std::string>());
        if (std::find(labels.begin(), labels.end(), label) == labels.end()) labels.push_back(label);
        assigned.emplace_back(t.at("id").get<int>(), label);
    }
    std::vector<std::vector<int>> groups(labels.size());
    for (auto& [id, label] : assigned) {
        auto pos = static_cast<std::size_t>(std::find(labels.begin(), labels.end(), label) - labels.begin());
        double x = uniform01(stable_hash("debate|" + std::to_string(id), world_.spec().seed));
        if (labels.size() > 1 && x < world_.spec().debate_confusion) pos = (pos + 1) % labels.size();
        groups[pos].push_back(id);
    }
    groups.erase(std::remove_if(groups.begin(), groups.end(), [](auto& g) { return g.empty(); }), groups.end());
    return "Thought: Grouping trajectories by the pattern their descriptions share.\nAction: generate_groups(" +
           Json(groups).dump() + ")";
}

std::string SimLanguageOracle::refine(const Json& request) const {
    auto image = request.at("image").get<std::string>();
    auto truth = world_.describe(image);
    auto candidates = request.at("candidates").get<std::vector<std::string>>();
    std::size_t best = 0;
    double best_score = -1;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        double s = candidates[i] == truth ? 2.0 : jaccard(candidates[i], truth);
        if (s > best_score) best_score = s, best = i;
    }
    double x = uniform01(stable_hash("refine|" + image, world_.spec().seed));
    if (candidates.size() > 1 && x < world_.spec().refine_error) best = (best + 1) % candidates.size();
    return "Choice: " + std::to_string(best + 1);
}

std::string SimLanguageOracle::plan(const Json& request) const {
    std::set<int> used;
    Json lines = Json::array();
    for (auto& n : request.at("new")) {
        int index = n.at("index").get<int>();
        auto text = n.at("text").get<std::string>();
        std::optional<int> target;
        for (auto& o : request.at("old")) {
            int id = o.at("exp_id").get<int>();
            if (!used.count(id) && o.at("text").get<std::string>() == text) {
                target = id;
                break;
            }
        }
        if (target) {
            used.insert(*target);
            lines.push_back(std::to_string(index) + " | merge | " + std::to_string(*target));
        } else {
            lines.push_back(std::to_string(index) + " | add");
        }
    }
    return lines.dump();
}

std::string SimLanguageOracle::insight(const Json& request) const {
    static const std::regex line(R"(P\(\[([^\]]+)\] beats \[([^\]]+)\]\) = ([0-9.]+))");
    auto prompt = request.at("prompt").get<std::string>();
    std::map<std::string, double> strength;
    std::map<std::pair<std::string, std::string>, double> before;  // evidence that first precedes second
    std::set<std::string> types;
    for (std::sregex_iterator it(prompt.begin(), prompt.end(), line), end; it != end; ++it) {
        auto a = (*it)[1].str(), b = (*it)[2].str();
        double p = std::stod((*it)[3].str());
        strength[a] += p;
        strength[b] += 0.0;
        if (a.find(" -> ") == std::string::npos) continue;
        auto oa = parse_order_key(a), ob = parse_order_key(b);
        for (std::size_t x = 0; x < oa.size(); ++x) {
            types.insert(oa[x].str());
            for (std::size_t y = x + 1; y < oa.size(); ++y) {
                auto fx = std::find(ob.begin(), ob.end(), oa[x]);
                auto fy = std::find(ob.begin(), ob.end(), oa[y]);
                if (fx != ob.end() && fy != ob.end() && fy < fx) before[{oa[x].str(), oa[y].str()}] += p;
            }
        }
    }
    std::vector<std::string> order(types.begin(), types.end());
    std::map<std::string, int> copeland;
    for (auto& a : order)
        for (auto& b : order) {
            if (a == b) continue;
            double ab = before.count({a, b}) ? before[{a, b}] : 0.0;
            double ba = before.count({b, a}) ? before[{b, a}] : 0.0;
            copeland[a] += (ab > ba) - (ab < ba);
        }
    std::stable_sort(order.begin(), order.end(), [&](auto& a, auto& b) { return copeland[a] > copeland[b]; });
    std::string top;
    double top_strength = -1;
    for (auto& [k, v] : strength)
        if (v > top_strength) top_strength = v, top = k;

    std::string text = "Here is the reference information from past trials: ";
    if (order.size() >= 2) {
        text += "A reasonable overall elimination order is: ";
        for (std::size_t i = 0; i < order.size(); ++i) text += (i ? " -> " : "") + order[i];
        text += ".";
    } else {
        text += "No ordering constraint stands out.";
    }
    if (!top.empty()) text += " Strongest candidate observed: " + top + ".";
    return text;
}

}  // namespace expool
