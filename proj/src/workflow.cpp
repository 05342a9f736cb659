#include "expool/workflow.hpp"

#include <algorithm>

namespace expool {

namespace {

std::string set_text(const DegradationSet& D) { return D.empty() ? std::string("clean") : canonical_key(D); }

DegradationSet set_from_text(const std::string& s) { return s == "clean" ? DegradationSet{} : parse_canonical_key(s); }

std::size_t factorial(std::size_t n) { return n <= 1 ? 1 : n * factorial(n - 1); }

std::string tools_text(const RemovalOrder& order, const std::map<DegradationType, ToolId>& tools) {
    std::string out;
    for (auto& d : order) out += (out.empty() ? "" : ", ") + d.str() + ":" + tools.at(d).str();
    return out;
}

struct Pass {
    std::string order;
    ImageRef output;
    MetricVector score;
    DegradationSet unresolved;
};

// Index of the best pass under the preference's metric suite (win-rate summary, earlier
// pass on ties).
std::size_t best_pass(const std::vector<Pass>& passes, const MetricSet& metrics) {
    if (passes.size() == 1) return 0;
    std::vector<std::string> keys;
    std::vector<std::optional<MetricVector>> vectors;
    char buf[16];
    for (std::size_t i = 0; i < passes.size(); ++i) {
        std::snprintf(buf, sizeof buf, "pass%04zu", i);
        keys.emplace_back(buf);
        vectors.emplace_back(passes[i].score);
    }
    auto summary = summarize(compare_all(metrics, keys, vectors));
    return static_cast<std::size_t>(std::stoul(summary.ranking.top().substr(4)));
}

}  // namespace

void WorkflowConfig::validate() const {
    if (max_rollbacks < 1) throw Error(ErrorCode::ConfigError, "rollback budget must be >= 1");
    if (max_invocations < 1) throw Error(ErrorCode::ConfigError, "invocation budget must be >= 1");
}

std::string_view to_string(TraceStatus status) { return status == TraceStatus::Success ? "success" : "exhausted"; }

WorkflowTrace run_workflow(const ImageRef& image, Environment& env, const ExperiencePool& pool,
                           LanguageOracle* language, EncoderOracle* encoder, const WorkflowConfig& config) {
    config.validate();
    WorkflowTrace t;
    t.image = image;
    int attempt = 0;
    auto perceive = [&] {
        auto D = env.perceive(image, attempt);
        t.history.append(EventKind::Perceive, "attempt=" + std::to_string(attempt) + " degradations=" + set_text(D));
        ++attempt;
        return D;
    };

    DegradationSet D = perceive();
    t.perceived = D;
    if (D.empty()) {
        t.final_image = image;
        t.history.append(EventKind::Terminate, "success: nothing to restore");
        return t;
    }

    Guidance guidance;
    std::vector<std::string> orders;
    std::size_t order_idx = 0;
    bool order_fixed = false;
    std::map<DegradationType, std::size_t> tool_idx;
    std::vector<Pass> passes;       // under the current degradation set
    std::vector<Pass> all_passes;   // whole run
    const auto& metrics = env.metrics(config.preference);

    auto setup = [&](const DegradationSet& set) {
        D = set;
        t.perceived = set;
        guidance = get_guidance(pool, image, set, config.preference, env.registry(), config.guidance, language, encoder);
        t.level = guidance.level;
        for (auto& w : guidance.warnings) t.warnings.push_back(w);
        orders.clear();
        if (set.size() > 1) {
            for (auto& k : guidance.ranking.ordered()) {
                RemovalOrder o;
                try {
                    o = parse_order_key(k);
                } catch (const Error&) {
                    continue;
                }
                RemovalOrder sorted = o;
                std::sort(sorted.begin(), sorted.end());
                if (sorted == set.members() && std::find(orders.begin(), orders.end(), k) == orders.end())
                    orders.push_back(order_key(o));
            }
            RemovalOrder o = set.members();
            do {
                auto k = order_key(o);
                if (std::find(orders.begin(), orders.end(), k) == orders.end()) orders.push_back(k);
            } while (std::next_permutation(o.begin(), o.end()));
        } else {
            orders.push_back(set.members().front().str());
        }
        order_idx = 0;
        order_fixed = false;
        tool_idx.clear();
        for (auto& d : set.members()) tool_idx[d] = 0;
        passes.clear();
    };
    setup(D);

    auto exhaust = [&](const std::string& reason) {
        t.status = TraceStatus::Exhausted;
        t.reason = reason;
        t.final_image = all_passes.empty() ? image : all_passes[best_pass(all_passes, metrics)].output;
        t.history.append(EventKind::Terminate, "exhausted: " + reason);
    };

    int pass_no = 0;
    for (;;) {
        const RemovalOrder order = D.size() > 1 ? parse_order_key(orders[order_idx]) : D.members();
        std::map<DegradationType, ToolId> tools;
        for (auto& d : D.members()) tools[d] = guidance.tools.at(d).at(tool_idx.at(d));
        if (t.invocations + static_cast<int>(D.size()) > config.max_invocations) {
            exhaust("invocation budget");
            return t;
        }
        t.history.append(EventKind::Plan, "order=" + order_key(order) + "; tools=" + tools_text(order, tools));

        ImageRef current = image;
        for (auto& d : order) {
            auto out = env.apply_tool(current, tools.at(d), d);
            ++t.invocations;
            const auto& ev = t.history.append(EventKind::Execute, d.str() + ":" + tools.at(d).str() + " -> " +
                                                                      (out ? *out : std::string("failed")));
            t.executions.push_back({ev.step, pass_no, d, tools.at(d), out});
            if (!out) break;
            current = *out;
        }
        auto unresolved = env.reflect(current, D);
        const auto& rev = t.history.append(EventKind::Reflect, "unresolved=" + set_text(unresolved));
        t.reflections.push_back({rev.step, pass_no, unresolved});
        Pass pass{order_key(order), current, env.score(current, config.preference), unresolved};
        passes.push_back(pass);
        all_passes.push_back(pass);
        ++pass_no;

        if (unresolved.empty()) {
            t.final_image = current;
            t.history.append(EventKind::Terminate, "success");
            return t;
        }
        if (t.total_rollbacks() >= config.max_rollbacks) {
            exhaust("rollback budget");
            return t;
        }

        auto again = perceive();
        if (!again.empty() && !(again == D)) {
            std::string revised = "perception: " + set_text(D) + " => " + set_text(again);
            const auto& ev = t.history.append(EventKind::OrderRollback, revised);
            t.rollbacks.push_back({ev.step, EventKind::OrderRollback, revised});
            ++t.o_rollbacks;
            setup(again);
            continue;
        }
        if (!order_fixed && order_idx + 1 < orders.size()) {
            std::string revised = "order: " + orders[order_idx] + " => " + orders[order_idx + 1];
            ++order_idx;
            const auto& ev = t.history.append(EventKind::OrderRollback, revised);
            t.rollbacks.push_back({ev.step, EventKind::OrderRollback, revised});
            ++t.o_rollbacks;
            continue;
        }
        if (!order_fixed) {
            // Every order ran with the same tools; keep the one that scored best.
            const auto& best = passes[best_pass(passes, metrics)];
            if (D.size() > 1)
                order_idx = static_cast<std::size_t>(std::find(orders.begin(), orders.end(), best.order) - orders.begin());
            unresolved = best.unresolved;
            order_fixed = true;
        }
        const RemovalOrder fixed = D.size() > 1 ? parse_order_key(orders[order_idx]) : D.members();
        std::optional<DegradationType> target;
        for (auto& d : fixed)
            if (unresolved.contains(d) && tool_idx[d] + 1 < guidance.tools.at(d).size()) {
                target = d;
                break;
            }
        if (!target)
            for (auto& d : fixed)
                if (tool_idx[d] + 1 < guidance.tools.at(d).size()) {
                    target = d;
                    break;
                }
        if (!target) {
            exhaust("no alternatives");
            return t;
        }
        const auto& list = guidance.tools.at(*target);
        std::string revised = "tool " + target->str() + ": " + list[tool_idx[*target]].str() + " => " +
                              list[tool_idx[*target] + 1].str();
        ++tool_idx[*target];
        const auto& ev = t.history.append(EventKind::ToolRollback, revised);
        t.rollbacks.push_back({ev.step, EventKind::ToolRollback, revised});
        ++t.t_rollbacks;
    }
}

std::optional<std::string> rollback_order_violation(const WorkflowTrace& trace) {
    DegradationSet current;
    std::set<std::string> tried;
    bool first = true;
    for (auto& ev : trace.history.events()) {
        if (ev.kind == EventKind::Perceive) {
            auto pos = ev.detail.find("degradations=");
            auto D = set_from_text(ev.detail.substr(pos + 13));
            if ((first || !(D == current)) && !D.empty()) {
                current = D;
                tried.clear();
            }
            first = false;
        } else if (ev.kind == EventKind::Plan) {
            auto end = ev.detail.find(';');
            tried.insert(ev.detail.substr(6, end - 6));
        } else if (ev.kind == EventKind::ToolRollback) {
            if (tried.size() < factorial(current.size()))
                return "step " + std::to_string(ev.step) + ": tool rollback after " + std::to_string(tried.size()) +
                       " of " + std::to_string(factorial(current.size())) + " orders";
        }
    }
    return std::nullopt;
}

// ---- serialization -----------------------------------------------------------------------

Json WorkflowTrace::to_json() const {
    Json execs = Json::array();
    for (auto& e : executions)
        execs.push_back({{"step", e.step}, {"pass", e.pass}, {"degradation", e.degradation.str()}, {"tool", e.tool.str()},
                         {"output", e.output ? Json(*e.output) : Json(nullptr)}});
    Json refl = Json::array();
    for (auto& r : reflections)
        refl.push_back({{"step", r.step}, {"pass", r.pass}, {"unresolved", set_text(r.unresolved)}});
    Json rb = Json::array();
    for (auto& r : rollbacks)
        rb.push_back({{"step", r.step}, {"kind", expool::to_string(r.kind)}, {"revised", r.revised}});
    Json hist = Json::array();
    for (auto& e : history.events())
        hist.push_back({{"step", e.step}, {"kind", expool::to_string(e.kind)}, {"detail", e.detail}});
    return Json{{"schema", 1},
                {"image", image},
                {"perceived", set_text(perceived)},
                {"level", expool::to_string(level)},
                {"executions", execs},
                {"reflections", refl},
                {"rollbacks", rb},
                {"o_rollbacks", o_rollbacks},
                {"t_rollbacks", t_rollbacks},
                {"invocations", invocations},
                {"status", expool::to_string(status)},
                {"final_image", final_image},
                {"reason", reason},
                {"warnings", warnings},
                {"history", hist}};
}

WorkflowTrace WorkflowTrace::from_json(const Json& doc) {
    if (doc.value("schema", 0) != 1) throw Error(ErrorCode::UnsupportedVersion, "trace schema must be 1");
    try {
        WorkflowTrace t;
        t.image = doc.at("image").get<std::string>();
        t.perceived = set_from_text(doc.at("perceived").get<std::string>());
        t.level = parse_guidance_level(doc.at("level").get<std::string>());
        for (auto& e : doc.at("executions")) {
            ExecutionStep s;
            s.step = e.at("step").get<int>();
            s.pass = e.at("pass").get<int>();
            s.degradation = DegradationType(e.at("degradation").get<std::string>());
            s.tool = ToolId(e.at("tool").get<std::string>());
            if (!e.at("output").is_null()) s.output = e["output"].get<std::string>();
            t.executions.push_back(s);
        }
        for (auto& r : doc.at("reflections"))
            t.reflections.push_back({r.at("step").get<int>(), r.at("pass").get<int>(),
                                     set_from_text(r.at("unresolved").get<std::string>())});
        for (auto& r : doc.at("rollbacks"))
            t.rollbacks.push_back({r.at("step").get<int>(), parse_event_kind(r.at("kind").get<std::string>()),
                                   r.at("revised").get<std::string>()});
        t.o_rollbacks = doc.at("o_rollbacks").get<int>();
        t.t_rollbacks = doc.at("t_rollbacks").get<int>();
        t.invocations = doc.at("invocations").get<int>();
        t.status = doc.at("status").get<std::string>() == "success" ? TraceStatus::Success : TraceStatus::Exhausted;
        t.final_image = doc.at("final_image").get<std::string>();
        t.reason = doc.at("reason").get<std::string>();
        t.warnings = doc.at("warnings").get<std::vector<std::string>>();
        for (auto& e : doc.at("history"))
            t.history.append(HistoryEvent{e.at("step").get<int>(), parse_event_kind(e.at("kind").get<std::string>()),
                                          e.at("detail").get<std::string>()});
        return t;
    } catch (const Json::exception& e) {
        throw Error(ErrorCode::ParseError, std::string("malformed trace: ") + e.what());
    }
}

}  // namespace expool
