#include <doctest.h>

#include "expool/evolve.hpp"
#include "expool/pool.hpp"
#include "expool/simenv.hpp"

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace expool;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("expool_test_pool_" + name);
    fs::remove_all(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = slurp(e.path());
    return files;
}

class MapEncoder : public EncoderOracle {
public:
    std::map<ImageRef, Eigen::VectorXd> vectors;
    int calls = 0;
    Eigen::VectorXd embed(const ImageRef& image) override {
        ++calls;
        return vectors.at(image);
    }
    Eigen::Index dimension() const override { return 3; }
};

class CannedLanguage : public LanguageOracle {
public:
    std::string reply;
    int calls = 0;
    std::string call(Capability, const Json&) override {
        ++calls;
        return reply;
    }
};

Eigen::VectorXd unit(int i, int n = 3) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(n);
    v(i) = 1.0;
    return v;
}

PatternProfile profile(int id, Eigen::VectorXd centroid, std::vector<std::string> ranking, std::string text = "") {
    PatternProfile p;
    p.exp_id = id;
    p.key = "dark+motion blur";
    p.support = {"img" + std::to_string(id)};
    p.text = text.empty() ? "pattern " + std::to_string(id) : text;
    p.ranking = Ranking(std::move(ranking));
    p.centroid = centroid.normalized();
    return p;
}

ToolRegistry two_degradation_registry() {
    ToolRegistry reg;
    for (auto t : {"gamma", "clahe"}) reg.add(DegradationType("dark"), ToolId(t));
    for (auto t : {"maxim", "xrestormer"}) reg.add(DegradationType("motion blur"), ToolId(t));
    return reg;
}

// The two sample pool entries in their published layout.
const char* kSampleCoarse = R"({
  "schema": 1,
  "entries": [
    {"degradation_type": "dark+motion blur", "preference": "Fidelity",
     "ranking": {"motion blur -> dark": 1, "dark -> motion blur": 2}},
    {"degradation_type": "motion blur", "preference": "Perception",
     "ranking": {"xrestormer": 1, "mprnet": 2, "restormer": 3, "nafnet": 4, "maxim": 5, "diffplugin": 6}}
  ]
})";

void write_minimal_pool(const fs::path& dir, const std::string& coarse) {
    fs::create_directories(dir);
    std::ofstream(dir / "insight.json") << R"({"schema": 1, "entries": []})";
    std::ofstream(dir / "coarse.json") << coarse;
    std::ofstream(dir / "trajectories.json") << R"({"schema": 1, "records": []})";
    std::ofstream(dir / "state.json") << R"({"schema": 1, "partitions": []})";
}

ExperiencePool trained_pool(SimWorld& world) {
    SimLanguageOracle language(world);
    SimEncoder encoder(world);
    ExperiencePool pool;
    EvolveConfig cfg;
    Evolver evolver(pool, world, language, encoder, cfg);
    for (auto D : {DegradationSet{"dark"}, DegradationSet{"motion blur"}, DegradationSet{"dark", "motion blur"}}) {
        for (auto& img : world.generate_images(50, D)) evolver.acquire(img, D, Preference::Fidelity);
        evolver.evolve_ready();
    }
    for (auto& img : world.generate_images(5, DegradationSet{"dark"})) evolver.acquire(img, DegradationSet{"dark"}, Preference::Fidelity);
    return pool;
}

}  // namespace

TEST_CASE("sample entries ingest verbatim and answer exact lookups") {
    auto dir = scratch("sample");
    write_minimal_pool(dir, kSampleCoarse);
    auto pool = ExperiencePool::load(dir);
    auto dm = pool.coarse_lookup("dark+motion blur", Preference::Fidelity);
    REQUIRE(dm);
    CHECK(dm->ranking.to_map() == std::map<std::string, int>{{"motion blur -> dark", 1}, {"dark -> motion blur", 2}});
    auto mb = pool.coarse_lookup("motion blur", Preference::Perception);
    REQUIRE(mb);
    CHECK(mb->ranking.size() == 6);
    CHECK(mb->ranking.top() == "xrestormer");
    CHECK_FALSE(pool.coarse_lookup("motion blur", Preference::Fidelity));
    CHECK_FALSE(ExperiencePool{}.coarse_lookup("dark", Preference::Fidelity));
    fs::remove_all(dir);
}

TEST_CASE("cosine similarity matches the direct formula and its invariances") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0, 1);
    for (int trial = 0; trial < 200; ++trial) {
        Eigen::VectorXd a(8), b(8);
        for (int i = 0; i < 8; ++i) a(i) = n(rng), b(i) = n(rng);
        double dot = 0, na = 0, nb = 0;
        for (int i = 0; i < 8; ++i) dot += a(i) * b(i), na += a(i) * a(i), nb += b(i) * b(i);
        CHECK(cosine_similarity(a, b) == doctest::Approx(dot / std::sqrt(na * nb)).epsilon(1e-12));
        CHECK(cosine_similarity(a, b) == doctest::Approx(cosine_similarity(b, a)).epsilon(1e-14));
        CHECK(cosine_similarity(3.5 * a, b) == doctest::Approx(cosine_similarity(a, b)).epsilon(1e-12));
    }
    CHECK(cosine_similarity(unit(0), unit(0)) == doctest::Approx(1.0));
    CHECK(cosine_similarity(unit(0), unit(1)) == doctest::Approx(0.0));
    CHECK_THROWS_AS(cosine_similarity(Eigen::VectorXd::Zero(3), unit(0)), Error);
    try {
        cosine_similarity(unit(0, 3), unit(0, 4));
        FAIL("expected a dimension error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::DimensionError);
    }
}

TEST_CASE("recall_topk equals the brute-force top-k") {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> n(0, 1);
    std::vector<PatternProfile> profiles;
    for (int i = 0; i < 12; ++i) {
        Eigen::VectorXd c(6);
        for (int d = 0; d < 6; ++d) c(d) = n(rng);
        profiles.push_back(profile(i, c, {"dark -> motion blur", "motion blur -> dark"}));
    }
    for (int q = 0; q < 50; ++q) {
        Eigen::VectorXd query(6);
        for (int d = 0; d < 6; ++d) query(d) = n(rng);
        std::vector<std::pair<double, int>> brute;
        for (auto& p : profiles) brute.push_back({-query.dot(p.centroid) / query.norm(), p.exp_id});
        std::sort(brute.begin(), brute.end());
        auto top = recall_topk(profiles, query, 3);
        REQUIRE(top.size() == 3);
        for (int i = 0; i < 3; ++i) CHECK(top[static_cast<std::size_t>(i)].profile->exp_id == brute[static_cast<std::size_t>(i)].second);
        CHECK(top[0].similarity >= top[1].similarity);
        CHECK(top[1].similarity >= top[2].similarity);
    }
    std::vector<PatternProfile> one{profile(7, unit(0), {"a"})};
    auto only = recall_topk(one, -unit(0), 3);
    REQUIRE(only.size() == 1);
    CHECK(only[0].profile->exp_id == 7);
}

TEST_CASE("refine keeps a single candidate and falls back on unusable replies") {
    std::vector<PatternProfile> ps{profile(0, unit(0), {"x"}, "backlit"), profile(1, unit(1), {"y"}, "underexposed")};
    std::vector<ScoredProfile> two{{&ps[0], 0.9}, {&ps[1], 0.8}};
    std::vector<ScoredProfile> single{{&ps[1], 0.4}};

    CannedLanguage language;
    language.reply = "Candidate 2";
    auto one = refine(single, "img", "dark+motion blur", language);
    CHECK(one.profile == &ps[1]);
    CHECK_FALSE(one.fell_back);

    auto picked = refine(two, "img", "dark+motion blur", language);
    CHECK(picked.profile == &ps[1]);
    CHECK_FALSE(picked.fell_back);

    language.reply = "I cannot decide between these.";
    auto fallback = refine(two, "img", "dark+motion blur", language);
    CHECK(fallback.profile == &ps[0]);
    CHECK(fallback.fell_back);
    CHECK_FALSE(fallback.warning.empty());

    UnavailableLanguageOracle down;
    auto offline = refine(two, "img", "dark+motion blur", down);
    CHECK(offline.profile == &ps[0]);
    CHECK(offline.fell_back);
}

TEST_CASE("guidance levels and tool assignment") {
    const auto reg = two_degradation_registry();
    const DegradationSet D{"dark", "motion blur"};
    MapEncoder encoder;
    encoder.vectors["backlit"] = unit(0);
    encoder.vectors["underexposed"] = unit(1);

    SUBCASE("empty pool gives registry order and no ranking") {
        ExperiencePool pool;
        auto g = get_guidance(pool, "backlit", D, Preference::Fidelity, reg, {}, nullptr, &encoder);
        CHECK(g.level == GuidanceLevel::None);
        CHECK(g.ranking.empty());
        CHECK(g.assignment().at(DegradationType("dark")) == ToolId("gamma"));
        CHECK(g.assignment().at(DegradationType("motion blur")) == ToolId("maxim"));
        CHECK(encoder.calls == 0);
    }

    ExperiencePool pool;
    pool.put_coarse({"dark", Preference::Fidelity, Ranking({"clahe", "gamma"}), Gate::SufficientAlone, 1});
    pool.put_coarse({"motion blur", Preference::Fidelity, Ranking({"xrestormer", "maxim"}), Gate::SufficientAlone, 1});

    SUBCASE("sufficient gate answers from the coarse entry without retrieval") {
        pool.put_coarse({"dark+motion blur", Preference::Fidelity,
                         Ranking({"motion blur -> dark", "dark -> motion blur"}), Gate::SufficientAlone, 1});
        auto g = get_guidance(pool, "backlit", D, Preference::Fidelity, reg, {}, nullptr, &encoder);
        CHECK(g.level == GuidanceLevel::Coarse);
        CHECK(g.ranking.top() == "motion blur -> dark");
        CHECK(g.assignment().at(DegradationType("dark")) == ToolId("clahe"));
        CHECK(g.assignment().at(DegradationType("motion blur")) == ToolId("xrestormer"));
        CHECK(encoder.calls == 0);
        CHECK(g.retrievals == 0);
    }

    SUBCASE("needs-fine gate retrieves a per-pattern order") {
        pool.put_coarse({"dark+motion blur", Preference::Fidelity,
                         Ranking({"motion blur -> dark", "dark -> motion blur"}), Gate::NeedsFine, 1});
        // Profiles need backing records.
        for (int i = 0; i < 2; ++i) {
            AtomicExperienceRecord r;
            r.image = "img" + std::to_string(i);
            r.key = "dark+motion blur";
            pool.add_record(r);
        }
        auto a = profile(0, unit(0), {"dark -> motion blur", "motion blur -> dark"});
        auto b = profile(1, unit(1), {"motion blur -> dark", "dark -> motion blur"});
        a.related_trajectory_ids = {0};
        b.related_trajectory_ids = {1};
        pool.set_profiles("dark+motion blur", Preference::Fidelity, {a, b});
        auto g0 = get_guidance(pool, "backlit", D, Preference::Fidelity, reg, {}, nullptr, &encoder);
        auto g1 = get_guidance(pool, "underexposed", D, Preference::Fidelity, reg, {}, nullptr, &encoder);
        CHECK(g0.level == GuidanceLevel::Fine);
        CHECK(g1.level == GuidanceLevel::Fine);
        REQUIRE(g0.profile);
        CHECK(g0.ranking.top() == "dark -> motion blur");
        CHECK(g1.ranking.top() == "motion blur -> dark");
        CHECK(g0.assignment().at(DegradationType("dark")) == ToolId("clahe"));
        CHECK(encoder.calls == 2);

        GuidanceOptions coarse_only;
        coarse_only.max_level = GuidanceLevel::Coarse;
        auto gc = get_guidance(pool, "backlit", D, Preference::Fidelity, reg, coarse_only, nullptr, &encoder);
        CHECK(gc.level == GuidanceLevel::Coarse);
        CHECK(encoder.calls == 2);

        auto blind = get_guidance(pool, "backlit", D, Preference::Fidelity, reg, {}, nullptr, nullptr);
        CHECK(blind.level == GuidanceLevel::Coarse);
    }

    SUBCASE("insight orders a set with no coarse entry") {
        pool.set_insight({Preference::Fidelity, "A reasonable overall elimination order is: motion blur -> dark.", 1});
        auto g = get_guidance(pool, "backlit", D, Preference::Fidelity, reg, {}, nullptr, &encoder);
        CHECK(g.level == GuidanceLevel::Insight);
        CHECK(g.ranking.top() == "motion blur -> dark");
        CHECK(g.assignment().at(DegradationType("dark")) == ToolId("clahe"));
        GuidanceOptions none;
        none.max_level = GuidanceLevel::None;
        auto gn = get_guidance(pool, "backlit", D, Preference::Fidelity, reg, none, nullptr, &encoder);
        CHECK(gn.level == GuidanceLevel::None);
        CHECK(gn.assignment().at(DegradationType("dark")) == ToolId("gamma"));
    }
}

TEST_CASE("insight chains parse with either arrow") {
    auto chain = insight_order_chain("Order: rain -> motion blur -> dark. Then done.");
    REQUIRE(chain.size() == 3);
    CHECK(chain[0] == DegradationType("rain"));
    CHECK(chain[2] == DegradationType("dark"));
    auto uni = insight_order_chain("haze \xE2\x86\x92 noise");
    REQUIRE(uni.size() == 2);
    CHECK(uni[0] == DegradationType("haze"));
}

TEST_CASE("save and load round-trip a generated pool exactly") {
    SimWorld world(preset_world(WorldPreset::GroupA, 4));
    auto pool = trained_pool(world);
    REQUIRE(pool.profile_count() > 0);
    REQUIRE(pool.insight(Preference::Fidelity));

    auto dir = scratch("roundtrip");
    pool.save(dir);
    for (auto* name : {"insight.json", "coarse.json", "trajectories.json", "state.json"}) {
        auto doc = Json::parse(slurp(dir / name));
        CHECK(doc.at("schema") == 1);
    }
    auto loaded = ExperiencePool::load(dir);
    CHECK(loaded == pool);
    auto first = snapshot(dir);
    loaded.save(dir);
    CHECK(snapshot(dir) == first);
    CHECK_FALSE(fs::exists(dir.string() + ".staging"));

    const auto text = first.at("coarse.json") + first.at("trajectories.json");
    for (auto* field : {"\"degradation_type\"", "\"preference\"", "\"ranking\""}) CHECK(text.find(field) != std::string::npos);
    bool saw_profile_fields = false;
    for (auto& [name, body] : first)
        if (name.rfind("profiles", 0) == 0)
            saw_profile_fields = body.find("\"exp_id\"") != std::string::npos &&
                                 body.find("\"degradation_pattern\"") != std::string::npos &&
                                 body.find("\"related_trajectory_ids\"") != std::string::npos;
    CHECK(saw_profile_fields);

    ExperiencePool empty;
    auto edir = scratch("empty");
    empty.save(edir);
    CHECK(ExperiencePool::load(edir) == empty);
    fs::remove_all(dir);
    fs::remove_all(edir);
}

TEST_CASE("load reports schema and syntax problems") {
    auto dir = scratch("bad");
    write_minimal_pool(dir, R"({"schema": 2, "entries": []})");
    try {
        ExperiencePool::load(dir);
        FAIL("expected UnsupportedVersion");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::UnsupportedVersion);
    }
    write_minimal_pool(dir, "{\"schema\": 1, \"entries\": [");
    try {
        ExperiencePool::load(dir);
        FAIL("expected ParseError");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ParseError);
        CHECK(std::string(e.what()).find("coarse.json") != std::string::npos);
        CHECK(std::string(e.what()).find("byte") != std::string::npos);
    }
    fs::remove_all(dir);
}
