#include <doctest.h>

#include "expool/evolve.hpp"
#include "expool/simenv.hpp"
#include "expool/workflow.hpp"

#include <sstream>

using namespace expool;

namespace {

// Scripted world: a degradation is removed only by a tool in `good`, and, when
// `required_order` is set, only if it is treated in that relative order.
class ScriptedEnv : public Environment {
public:
    ScriptedEnv(std::map<std::string, std::vector<std::string>> tools, std::map<ImageRef, DegradationSet> originals)
        : originals_(std::move(originals)) {
        for (auto& [d, list] : tools)
            for (auto& t : list) registry_.add(DegradationType(d), ToolId(t));
    }

    std::set<std::pair<std::string, std::string>> good;
    std::set<std::string> failing;
    std::vector<std::string> required_order;
    std::map<int, DegradationSet> perception_by_attempt;  // overrides for specific attempts

    const ToolRegistry& registry() const override { return registry_; }
    const MetricSet& metrics(Preference) const override { return metrics_; }

    DegradationSet perceive(const ImageRef& image, int attempt) override {
        auto it = perception_by_attempt.find(attempt);
        if (it != perception_by_attempt.end()) return it->second;
        return originals_.at(root(image));
    }

    std::optional<ImageRef> apply_tool(const ImageRef& image, const ToolId& tool, const DegradationType& d) override {
        if (failing.count(tool.str())) return std::nullopt;
        return image + ">" + d.str() + ":" + tool.str();
    }

    DegradationSet reflect(const ImageRef& image, const DegradationSet&) override {
        std::vector<DegradationType> left;
        auto resolved = resolved_set(image);
        for (auto& d : originals_.at(root(image)).members())
            if (!resolved.count(d.str())) left.push_back(d);
        return DegradationSet(left);
    }

    MetricVector score(const ImageRef& image, Preference) override {
        return {{"q", static_cast<double>(resolved_set(image).size())}};
    }

private:
    static ImageRef root(const ImageRef& image) { return image.substr(0, image.find('>')); }

    std::set<std::string> resolved_set(const ImageRef& image) const {
        std::vector<std::pair<std::string, std::string>> chain;
        std::stringstream ss(image);
        std::string part;
        std::getline(ss, part, '>');
        while (std::getline(ss, part, '>')) {
            auto colon = part.find(':');
            chain.push_back({part.substr(0, colon), part.substr(colon + 1)});
        }
        std::set<std::string> out;
        for (std::size_t i = 0; i < chain.size(); ++i) {
            if (!good.count(chain[i])) continue;
            bool order_ok = true;
            if (!required_order.empty())
                for (std::size_t j = 0; j < i; ++j) {
                    auto pi = std::find(required_order.begin(), required_order.end(), chain[i].first);
                    auto pj = std::find(required_order.begin(), required_order.end(), chain[j].first);
                    if (pj > pi) order_ok = false;
                }
            if (order_ok) out.insert(chain[i].first);
        }
        return out;
    }

    ToolRegistry registry_;
    MetricSet metrics_{{"q", MetricDirection::HigherBetter}};
    std::map<ImageRef, DegradationSet> originals_;
};

int count(const WorkflowTrace& t, EventKind kind) {
    int n = 0;
    for (auto& e : t.history.events()) n += e.kind == kind;
    return n;
}

ExperiencePool evolved_pool(SimWorld& world) {
    SimLanguageOracle language(world);
    SimEncoder encoder(world);
    ExperiencePool pool;
    Evolver evolver(pool, world, language, encoder, EvolveConfig{});
    for (auto D : {DegradationSet{"dark"}, DegradationSet{"motion blur"}, DegradationSet{"dark", "motion blur"}}) {
        for (auto& img : world.generate_images(50, D)) evolver.acquire(img, D, Preference::Fidelity);
        evolver.evolve_ready();
    }
    return pool;
}

}  // namespace

TEST_CASE("a clean image terminates without invocations") {
    ScriptedEnv env({{"dark", {"t1"}}}, {{"clean", DegradationSet{}}});
    ExperiencePool pool;
    auto t = run_workflow("clean", env, pool, nullptr, nullptr, WorkflowConfig{});
    CHECK(t.status == TraceStatus::Success);
    CHECK(t.invocations == 0);
    CHECK(t.total_rollbacks() == 0);
    CHECK(t.final_image == "clean");
}

TEST_CASE("single degradation goes straight to tool rollbacks") {
    ScriptedEnv env({{"dark", {"t1", "t2", "t3", "t4"}}}, {{"img", DegradationSet{"dark"}}});
    env.good = {{"dark", "t3"}};
    ExperiencePool pool;
    auto t = run_workflow("img", env, pool, nullptr, nullptr, WorkflowConfig{});
    CHECK(t.status == TraceStatus::Success);
    CHECK(t.o_rollbacks == 0);
    CHECK(t.t_rollbacks == 2);
    CHECK(t.invocations == 3);
    CHECK(t.final_image == "img>dark:t3");
    REQUIRE(t.rollbacks.size() == 2);
    CHECK(t.rollbacks[0].revised == "tool dark: t1 => t2");
    CHECK(t.rollbacks[1].revised == "tool dark: t2 => t3");
    CHECK_FALSE(rollback_order_violation(t));
    // Reflection happens once per pass, after the pass.
    CHECK(count(t, EventKind::Reflect) == 3);
}

TEST_CASE("orders are revised before tools") {
    ScriptedEnv env({{"a", {"a1", "a2"}}, {"b", {"b1", "b2"}}}, {{"img", DegradationSet{"a", "b"}}});
    env.good = {{"a", "a2"}, {"b", "b1"}};
    env.required_order = {"b", "a"};
    ExperiencePool pool;
    auto t = run_workflow("img", env, pool, nullptr, nullptr, WorkflowConfig{});
    CHECK(t.status == TraceStatus::Success);
    CHECK(t.o_rollbacks == 1);
    CHECK(t.t_rollbacks == 1);
    CHECK(t.invocations == 6);
    REQUIRE(t.rollbacks.size() == 2);
    CHECK(t.rollbacks[0].kind == EventKind::OrderRollback);
    CHECK(t.rollbacks[0].revised == "order: a -> b => b -> a");
    CHECK(t.rollbacks[1].kind == EventKind::ToolRollback);
    CHECK(t.rollbacks[1].revised == "tool a: a1 => a2");
    CHECK(t.final_image == "img>b:b1>a:a2");
    CHECK_FALSE(rollback_order_violation(t));
}

TEST_CASE("a coarse order entry is tried first") {
    ScriptedEnv env({{"a", {"a1"}}, {"b", {"b1"}}}, {{"img", DegradationSet{"a", "b"}}});
    env.good = {{"a", "a1"}, {"b", "b1"}};
    env.required_order = {"b", "a"};
    ExperiencePool pool;
    pool.put_coarse({"a+b", Preference::Fidelity, Ranking({"b -> a", "a -> b"}), Gate::SufficientAlone, 1});
    auto t = run_workflow("img", env, pool, nullptr, nullptr, WorkflowConfig{});
    CHECK(t.level == GuidanceLevel::Coarse);
    CHECK(t.invocations == 2);
    CHECK(t.total_rollbacks() == 0);
}

TEST_CASE("budgets end the run with the best pass") {
    ScriptedEnv env({{"a", {"a1", "a2", "a3", "a4"}}, {"b", {"b1"}}}, {{"img", DegradationSet{"a", "b"}}});
    env.good = {{"b", "b1"}};
    ExperiencePool pool;
    WorkflowConfig cfg;
    cfg.max_rollbacks = 3;
    auto t = run_workflow("img", env, pool, nullptr, nullptr, cfg);
    CHECK(t.status == TraceStatus::Exhausted);
    CHECK(t.reason == "rollback budget");
    CHECK(t.total_rollbacks() == 3);
    CHECK(env.score(t.final_image, Preference::Fidelity).at("q") == 1.0);

    cfg.max_rollbacks = 8;
    cfg.max_invocations = 5;
    auto u = run_workflow("img", env, pool, nullptr, nullptr, cfg);
    CHECK(u.status == TraceStatus::Exhausted);
    CHECK(u.reason == "invocation budget");
    CHECK(u.invocations == 4);

    cfg.max_invocations = 40;
    auto w = run_workflow("img", env, pool, nullptr, nullptr, cfg);
    CHECK(w.status == TraceStatus::Exhausted);
    CHECK(w.reason == "no alternatives");
    CHECK_FALSE(rollback_order_violation(w));
}

TEST_CASE("failed tools count as invocations and leave the degradation unresolved") {
    ScriptedEnv env({{"a", {"a1", "a2"}}}, {{"img", DegradationSet{"a"}}});
    env.good = {{"a", "a1"}, {"a", "a2"}};
    env.failing = {"a1"};
    ExperiencePool pool;
    auto t = run_workflow("img", env, pool, nullptr, nullptr, WorkflowConfig{});
    CHECK(t.status == TraceStatus::Success);
    CHECK(t.invocations == 2);
    CHECK(t.t_rollbacks == 1);
    CHECK_FALSE(t.executions.front().output);
}

TEST_CASE("re-perception after a rollback replaces the plan") {
    ScriptedEnv env({{"a", {"a1"}}, {"b", {"b1"}}}, {{"img", DegradationSet{"a", "b"}}});
    env.good = {{"a", "a1"}, {"b", "b1"}};
    env.perception_by_attempt[0] = DegradationSet{"a"};
    ExperiencePool pool;
    auto t = run_workflow("img", env, pool, nullptr, nullptr, WorkflowConfig{});
    CHECK(t.status == TraceStatus::Success);
    CHECK(t.o_rollbacks == 1);
    CHECK(t.rollbacks.front().revised == "perception: a => a+b");
    CHECK(t.perceived == DegradationSet{"a", "b"});
    CHECK_FALSE(rollback_order_violation(t));
}

TEST_CASE("the order checker flags a premature tool rollback") {
    WorkflowTrace t;
    t.history.append(EventKind::Perceive, "attempt=0 degradations=a+b");
    t.history.append(EventKind::Plan, "order=a -> b; tools=a:a1, b:b1");
    t.history.append(EventKind::Reflect, "unresolved=a");
    t.history.append(EventKind::ToolRollback, "tool a: a1 => a2");
    auto v = rollback_order_violation(t);
    REQUIRE(v);
    CHECK(v->find("1 of 2") != std::string::npos);
}

TEST_CASE("simulated runs are deterministic and serialize losslessly") {
    SimWorld world(preset_world(WorldPreset::GroupA, 13));
    auto pool = evolved_pool(world);
    SimLanguageOracle language(world);
    SimEncoder encoder(world);
    for (auto& img : world.generate_images(10, DegradationSet{"dark", "motion blur"})) {
        auto a = run_workflow(img, world, pool, &language, &encoder, WorkflowConfig{});
        auto b = run_workflow(img, world, pool, &language, &encoder, WorkflowConfig{});
        CHECK(a == b);
        CHECK(WorkflowTrace::from_json(Json::parse(a.to_json().dump())) == a);
        if (a.status == TraceStatus::Success) {
            CHECK(a.invocations >= 2);
            CHECK(a.reflections.back().unresolved.empty());
        }
        CHECK(a.invocations == static_cast<int>(a.executions.size()));
    }
    CHECK_THROWS_AS(WorkflowTrace::from_json(Json{{"schema", 9}}), Error);
}

TEST_CASE("experience helps and inverted experience hurts") {
    SimWorld world(preset_world(WorldPreset::GroupA, 21));
    auto pool = evolved_pool(world);
    ExperiencePool inverted;
    for (auto e : pool.coarse_entries()) {
        auto order = e.ranking.ordered();
        std::reverse(order.begin(), order.end());
        e.ranking = Ranking(order);
        e.gate = Gate::SufficientAlone;
        inverted.put_coarse(e);
    }
    ExperiencePool empty;
    SimLanguageOracle language(world);
    SimEncoder encoder(world);
    auto tests = world.generate_images(30, DegradationSet{"dark", "motion blur"});
    auto mean_rb = [&](const ExperiencePool& p) {
        double total = 0;
        for (auto& img : tests) total += run_workflow(img, world, p, &language, &encoder, WorkflowConfig{}).total_rollbacks();
        return total / static_cast<double>(tests.size());
    };
    const double evolved = mean_rb(pool), none = mean_rb(empty), adversarial = mean_rb(inverted);
    CHECK(evolved < none);
    CHECK(adversarial > none);
}
