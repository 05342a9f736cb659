#include "expool/evolve.hpp"

#include "expool/prompts.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace expool {

void EvolveConfig::validate() const {
    if (batch_size < 1) throw Error(ErrorCode::ConfigError, "batch size must be >= 1");
    if (mini_batch < 1) throw Error(ErrorCode::ConfigError, "mini-batch size must be >= 1");
    if (top_k < 1) throw Error(ErrorCode::ConfigError, "top-k must be >= 1");
    if (!(alpha > 0.5 && alpha < 1)) throw Error(ErrorCode::ConfigError, "alpha must lie in (0.5, 1)");
    if (!(rho_threshold >= -1 && rho_threshold <= 1)) throw Error(ErrorCode::ConfigError, "rho threshold must lie in [-1, 1]");
    if (debate_rounds < 1) throw Error(ErrorCode::ConfigError, "debate needs at least one round");
}

// ---- rank statistics ---------------------------------------------------------------------

double spearman_rho(const Ranking& a, const Ranking& b) {
    std::vector<std::string> common;
    for (auto& k : a.ordered())
        if (b.rank_of(k)) common.push_back(k);
    const auto n = static_cast<double>(common.size());
    if (common.size() < 2) throw Error(ErrorCode::InsufficientOverlap, "rankings share fewer than two candidates");
    // Positions within the common set.
    std::map<std::string, int> pb;
    int pos = 0;
    for (auto& k : b.ordered())
        if (std::find(common.begin(), common.end(), k) != common.end()) pb[k] = ++pos;
    double d2 = 0;
    for (std::size_t i = 0; i < common.size(); ++i) {
        double d = static_cast<double>(static_cast<int>(i) + 1 - pb[common[i]]);
        d2 += d * d;
    }
    return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

double top_rho(const Ranking& a, const Ranking& b, std::size_t top) {
    std::set<std::string> keep;
    for (std::size_t i = 0; i < std::min(top, a.size()); ++i) keep.insert(a.ordered()[i]);
    for (std::size_t i = 0; i < std::min(top, b.size()); ++i) keep.insert(b.ordered()[i]);
    auto restrict = [&](const Ranking& r) {
        std::vector<std::string> out;
        for (auto& k : r.ordered())
            if (keep.count(k)) out.push_back(k);
        return Ranking(out);
    };
    return spearman_rho(restrict(a), restrict(b));
}

bool DualConsistency::ranking_consistent(const Ranking& a, const Ranking& b) const {
    try {
        return top_rho(a, b, top) >= rho_threshold;
    } catch (const Error& e) {
        if (e.code() != ErrorCode::InsufficientOverlap) throw;
        return false;
    }
}

namespace {

std::set<std::string> word_set(const std::string& text) {
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

}  // namespace

double text_similarity(const std::string& a, const std::string& b) {
    auto ta = word_set(a), tb = word_set(b);
    if (ta.empty() && tb.empty()) return 1.0;
    std::size_t inter = 0;
    for (auto& t : ta) inter += tb.count(t);
    return static_cast<double>(inter) / static_cast<double>(ta.size() + tb.size() - inter);
}

bool DualConsistency::semantic_consistent(const std::string& a, const std::string& b) const {
    return text_similarity(a, b) >= semantic_threshold;
}

Ranking stabilize(const std::vector<const AtomicExperienceRecord*>& cached) {
    if (cached.empty()) throw Error(ErrorCode::ProfileNotStabilizable, "no cached rankings");
    std::vector<std::string> keys;
    for (auto* r : cached)
        for (auto& k : r->summary.ranking.ordered())
            if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    if (keys.empty()) throw Error(ErrorCode::ProfileNotStabilizable, "cached rankings are empty");
    std::map<std::string, double> mean_rank, mean_rate;
    for (auto& k : keys) {
        double rank = 0, rate = 0;
        for (auto* r : cached) {
            auto pos = r->summary.ranking.rank_of(k);
            rank += pos ? *pos : static_cast<double>(r->summary.ranking.size() + 1);
            auto it = std::find(r->summary.keys.begin(), r->summary.keys.end(), k);
            if (it != r->summary.keys.end()) rate += r->summary.win_rate[static_cast<std::size_t>(it - r->summary.keys.begin())];
        }
        mean_rank[k] = rank / static_cast<double>(cached.size());
        mean_rate[k] = rate / static_cast<double>(cached.size());
    }
    std::sort(keys.begin(), keys.end(), [&](const std::string& a, const std::string& b) {
        if (mean_rank[a] != mean_rank[b]) return mean_rank[a] < mean_rank[b];
        if (mean_rate[a] != mean_rate[b]) return mean_rate[a] > mean_rate[b];
        return a < b;
    });
    return Ranking(keys);
}

// ---- acquisition -------------------------------------------------------------------------

std::map<DegradationType, ToolId> coarse_anchors(const ExperiencePool& pool, const DegradationSet& D,
                                                 Preference preference, const ToolRegistry& registry) {
    std::map<DegradationType, ToolId> out;
    for (auto& d : D.members()) {
        const auto& tools = registry.tools(d);
        out[d] = tools.front();
        if (auto entry = pool.coarse_lookup(d.str(), preference)) {
            for (auto& k : entry->ranking.ordered())
                if (std::find(tools.begin(), tools.end(), ToolId(k)) != tools.end()) {
                    out[d] = ToolId(k);
                    break;
                }
        }
    }
    return out;
}

AtomicExperienceRecord acquire_record(const ImageRef& image, const DegradationSet& D, Preference preference,
                                      Environment& env, const std::map<DegradationType, ToolId>& anchors) {
    if (D.empty()) throw Error(ErrorCode::InvalidInput, "cannot acquire a record for a clean image");
    AtomicExperienceRecord rec;
    rec.image = image;
    rec.key = canonical_key(D);
    rec.preference = preference;
    const auto candidates = enumerate_candidates(D, env.registry());
    for (auto& c : candidates) {
        rec.candidates.push_back(c.key());
        std::optional<ImageRef> out;
        if (c.is_tool()) {
            out = env.apply_tool(image, c.tool(), D.members().front());
        } else {
            out = image;
            for (auto& d : c.order()) {
                auto it = anchors.find(d);
                if (it == anchors.end()) throw Error(ErrorCode::InvalidInput, "no anchored tool for " + d.str());
                out = env.apply_tool(*out, it->second, d);
                if (!out) break;
            }
        }
        rec.metrics.push_back(out ? std::optional<MetricVector>(env.score(*out, preference)) : std::nullopt);
    }
    if (D.size() > 1) rec.anchors = anchors;
    rec.outcomes = compare_all(env.metrics(preference), rec.candidates, rec.metrics);
    try {
        rec.summary = summarize(rec.outcomes);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::NotEnoughCandidates) throw;
        std::vector<std::string> alive;
        for (std::size_t i = 0; i < rec.candidates.size(); ++i)
            if (rec.metrics[i]) alive.push_back(rec.candidates[i]);
        rec.summary = {alive, std::vector<double>(alive.size(), 0.0), Ranking(alive)};
    }
    return rec;
}

// ---- evolution steps ---------------------------------------------------------------------

CoarseUpdate evolve_coarse(const PairwiseStats& prior, const std::vector<const AtomicExperienceRecord*>& batch,
                           const EvolveConfig& config, int round) {
    if (batch.empty()) throw Error(ErrorCode::InvalidInput, "empty evolution batch");
    CoarseUpdate u;
    u.stats = prior.size() == 0 ? PairwiseStats(batch.front()->candidates) : prior;
    for (auto* r : batch) {
        if (r->candidates != u.stats.keys())
            throw Error(ErrorCode::CandidateSetMismatch, "record " + std::to_string(r->id) + " has a different candidate set");
        u.stats.add(r->outcomes);
    }
    u.fit = fit(u.stats, config.fit);
    u.entry.key = batch.front()->key;
    u.entry.preference = batch.front()->preference;
    u.entry.ranking = priority(u.fit);
    u.entry.gate = needs_fine_grained(u.fit, config.alpha) ? Gate::NeedsFine : Gate::SufficientAlone;
    u.entry.round = round;
    return u;
}

std::string insight_prompt(Preference preference, const std::vector<std::pair<std::string, BtdFit>>& fits) {
    std::string combined;
    for (auto& [key, f] : fits) {
        if (!combined.empty()) combined += "\n";
        combined += "Degradation: " + key + "\n" + deduce_relations(f);
    }
    return prompts::render(prompts::kInsight, {{"preference", std::string(to_string(preference))},
                                               {"combined_text", combined}});
}

namespace {

std::string top_text(const Ranking& r, std::size_t n) {
    std::string out;
    for (std::size_t i = 0; i < std::min(n, r.size()); ++i) out += (i ? " > " : "") + r.ordered()[i];
    return out;
}

// Greedy grouping: each record joins the first group it is consistent with.
std::vector<std::vector<int>> greedy_groups(const std::vector<int>& ids, const std::map<int, const AtomicExperienceRecord*>& recs,
                                            const std::map<int, std::string>& text, const DualConsistency& c,
                                            bool use_text) {
    std::vector<std::vector<int>> groups;
    for (int id : ids) {
        bool placed = false;
        for (auto& g : groups) {
            bool ok = !use_text || c.semantic_consistent(text.at(g.front()), text.at(id));
            for (std::size_t i = 0; ok && i < g.size(); ++i)
                ok = c.ranking_consistent(recs.at(g[i])->summary.ranking, recs.at(id)->summary.ranking);
            if (ok) {
                g.push_back(id);
                placed = true;
                break;
            }
        }
        if (!placed) groups.push_back({id});
    }
    return groups;
}

std::vector<std::vector<int>> semantic_groups(const std::vector<int>& ids, const std::map<int, std::string>& text,
                                              const DualConsistency& c) {
    std::vector<std::vector<int>> groups;
    for (int id : ids) {
        auto it = std::find_if(groups.begin(), groups.end(),
                               [&](auto& g) { return c.semantic_consistent(text.at(g.front()), text.at(id)); });
        if (it == groups.end()) groups.push_back({id});
        else it->push_back(id);
    }
    return groups;
}

std::string groups_text(const std::vector<std::vector<int>>& groups) {
    std::string out;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        out += "Degradation Pattern " + std::to_string(g + 1) + ":";
        for (int id : groups[g]) out += " Traj" + std::to_string(id);
        out += "\n";
    }
    return out;
}

}  // namespace

PartitionResult partition_patterns(const std::vector<const AtomicExperienceRecord*>& records, LanguageOracle& oracle,
                                   const DualConsistency& constraints, int debate_rounds,
                                   std::map<int, std::string>& descriptions) {
    PartitionResult out;
    if (records.empty()) return out;
    std::map<int, const AtomicExperienceRecord*> recs;
    std::vector<int> ids;
    for (auto* r : records) {
        recs[r->id] = r;
        ids.push_back(r->id);
        if (!descriptions.count(r->id)) {
            try {
                descriptions[r->id] = oracle.describe(r->image, r->key);
            } catch (const Error& e) {
                if (e.code() != ErrorCode::OracleUnavailable) throw;
                out.log.push_back("describe unavailable for record " + std::to_string(r->id));
                descriptions[r->id] = "";
            }
        }
    }

    Json trajectories = Json::array();
    std::string listing;
    for (int id : ids) {
        const auto* r = recs[id];
        trajectories.push_back({{"id", id}, {"image", r->image}, {"description", descriptions[id]},
                                {"top", top_text(r->summary.ranking, constraints.top)}});
        listing += "Traj" + std::to_string(id) + ": " + descriptions[id] + " | ranking: " +
                   top_text(r->summary.ranking, constraints.top) + "\n";
    }

    static const char* roles[] = {"proposer", "intra-group validator", "inter-group validator"};
    std::optional<std::vector<std::vector<int>>> groups;
    std::string history;
    bool finished = false;
    auto sanitize = [&](const std::vector<std::vector<int>>& proposed) {
        std::set<int> seen;
        std::vector<std::vector<int>> clean;
        for (auto& g : proposed) {
            std::vector<int> kept;
            for (int id : g)
                if (recs.count(id) && seen.insert(id).second) kept.push_back(id);
            if (!kept.empty()) clean.push_back(kept);
        }
        std::vector<int> leftover;
        for (int id : ids)
            if (!seen.count(id)) leftover.push_back(id);
        for (auto& g : greedy_groups(leftover, recs, descriptions, constraints, true)) clean.push_back(g);
        return clean;
    };

    try {
        for (int round = 0; round < debate_rounds && !finished; ++round) {
            for (int role = 0; role < 3 && !finished; ++role) {
                const int turn = round * 3 + role;
                std::string context = "Trajectories:\n" + listing;
                if (groups) {
                    context += "Current groups:\n" + groups_text(*groups);
                    if (role > 0)
                        context += "\n" + prompts::render(prompts::kDebateAction,
                                                          {{"pattern_textual_context", groups_text(*groups)},
                                                           {"pattern_image_context", "(image references listed above)"}});
                }
                if (!history.empty()) context += "History:\n" + history;
                Json extra{{"turn", turn}, {"trajectories", trajectories},
                           {"groups", groups ? Json(*groups) : Json(nullptr)}};
                auto reply = parse_debate_reply(oracle.debate_turn(roles[role], context, extra));
                ++out.debate_turns;
                std::string note = std::string(roles[role]) + ": " + std::string(to_string(reply.action));
                switch (reply.action) {
                    case DebateActionKind::GenerateGroups:
                        groups = sanitize(reply.groups.empty() ? semantic_groups(ids, descriptions, constraints) : reply.groups);
                        note += " -> " + std::to_string(groups->size()) + " groups";
                        break;
                    case DebateActionKind::ValidateCurrentGroup: {
                        bool ok = reply.trajectory_ids.size() >= 2;
                        for (std::size_t i = 1; ok && i < reply.trajectory_ids.size(); ++i) {
                            int a = reply.trajectory_ids[0], b = reply.trajectory_ids[i];
                            ok = recs.count(a) && recs.count(b) &&
                                 constraints.ranking_consistent(recs[a]->summary.ranking, recs[b]->summary.ranking);
                        }
                        note += ok ? " -> consistent" : " -> inconsistent";
                        break;
                    }
                    case DebateActionKind::ValidateOtherGroup: {
                        // Moves the first trajectory into the group of the others when consistent.
                        auto& t = reply.trajectory_ids;
                        bool moved = false;
                        if (groups && t.size() >= 2 && recs.count(t[0])) {
                            auto target = std::find_if(groups->begin(), groups->end(), [&](auto& g) {
                                return std::find(g.begin(), g.end(), t[1]) != g.end();
                            });
                            bool ok = target != groups->end() &&
                                      std::find(target->begin(), target->end(), t[0]) == target->end();
                            for (std::size_t i = 1; ok && i < t.size(); ++i)
                                ok = recs.count(t[i]) &&
                                     constraints.ranking_consistent(recs[t[0]]->summary.ranking, recs[t[i]]->summary.ranking);
                            if (ok) {
                                for (auto& g : *groups) g.erase(std::remove(g.begin(), g.end(), t[0]), g.end());
                                target->push_back(t[0]);
                                groups->erase(std::remove_if(groups->begin(), groups->end(), [](auto& g) { return g.empty(); }),
                                              groups->end());
                                moved = true;
                            }
                        }
                        note += moved ? " -> moved" : " -> kept";
                        break;
                    }
                    case DebateActionKind::Finish:
                        if (groups) finished = true;
                        else note += " rejected, no groups yet";
                        break;
                    case DebateActionKind::Invalid: note += " (" + reply.raw_action.substr(0, 80) + ")"; break;
                }
                history += note + "\n";
                out.log.push_back(note);
            }
        }
    } catch (const Error& e) {
        if (e.code() != ErrorCode::OracleUnavailable) throw;
        out.log.push_back(std::string("debate aborted: ") + e.what());
        groups.reset();
    }

    if (!groups) {
        out.fallback = true;
        out.log.push_back("fallback: ranking-only grouping");
        groups = greedy_groups(ids, recs, descriptions, constraints, false);
    } else if (!finished) {
        out.log.push_back("debate hit the turn cap; keeping the last grouping");
    }

    // C_r is a hard constraint: split any group whose members disagree.
    for (auto& g : *groups)
        for (auto& part : greedy_groups(g, recs, descriptions, constraints, false)) out.groups.push_back(part);

    for (auto& g : out.groups) {
        std::map<std::string, int> votes;
        for (int id : g) ++votes[descriptions[id]];
        std::string best = descriptions[g.front()];
        for (int id : g)
            if (votes[descriptions[id]] > votes[best]) best = descriptions[id];
        out.descriptions.push_back(best);
    }
    return out;
}

PatternProfile make_profile(const std::vector<int>& record_ids, const std::string& text, const ExperiencePool& pool,
                            EncoderOracle& encoder) {
    PatternProfile p;
    p.exp_id = -1;
    std::vector<const AtomicExperienceRecord*> recs;
    std::vector<Eigen::VectorXd> embeddings;
    for (int id : record_ids) {
        const auto& r = pool.record(id);
        recs.push_back(&r);
        if (std::find(p.related_trajectory_ids.begin(), p.related_trajectory_ids.end(), id) == p.related_trajectory_ids.end())
            p.related_trajectory_ids.push_back(id);
        if (std::find(p.support.begin(), p.support.end(), r.image) == p.support.end()) {
            p.support.push_back(r.image);
            embeddings.push_back(encoder.embed(r.image));
        }
    }
    if (recs.empty()) throw Error(ErrorCode::InvalidInput, "profile needs at least one record");
    p.key = recs.front()->key;
    p.preference = recs.front()->preference;
    p.text = text;
    p.ranking = stabilize(recs);
    p.centroid = centroid_of(embeddings);
    return p;
}

IterateResult iterate_profiles(std::vector<PatternProfile> fresh, std::vector<PatternProfile> old,
                               const ExperiencePool& pool, LanguageOracle& oracle, EncoderOracle& encoder,
                               const DualConsistency& constraints, int& next_exp_id) {
    IterateResult out;
    std::vector<bool> handled(fresh.size(), false);
    std::set<int> touched;
    std::vector<PatternProfile> added;
    auto add = [&](std::size_t i, const std::string& why) {
        fresh[i].exp_id = next_exp_id++;
        out.operations.push_back(std::to_string(i + 1) + " | add -> exp " + std::to_string(fresh[i].exp_id) + why);
        added.push_back(fresh[i]);
        handled[i] = true;
    };

    if (!old.empty() && !fresh.empty()) {
        std::string new_listing, db_listing;
        Json new_json = Json::array(), old_json = Json::array();
        for (std::size_t i = 0; i < fresh.size(); ++i) {
            new_listing += std::to_string(i + 1) + ". " + fresh[i].text + " (ranking: " + top_text(fresh[i].ranking, 3) + ")\n";
            new_json.push_back({{"index", static_cast<int>(i + 1)}, {"text", fresh[i].text}});
        }
        for (auto& p : old) {
            db_listing += std::to_string(p.exp_id) + ". " + p.text + " (ranking: " + top_text(p.ranking, 3) + ")\n";
            old_json.push_back({{"exp_id", p.exp_id}, {"text", p.text}});
        }
        auto prompt = prompts::render(prompts::kProfileOperation, {{"degradation_type", old.front().key},
                                                                   {"new_pattern", new_listing},
                                                                   {"pattern_db", db_listing},
                                                                   {"history_plan", "none"},
                                                                   {"history_feedback", "none"}});
        PlanParse plan;
        try {
            plan = parse_plan_lines(oracle.propose_plan(prompt, Json{{"new", new_json}, {"old", old_json}}));
        } catch (const Error& e) {
            if (e.code() != ErrorCode::OracleUnavailable) throw;
            out.warnings.push_back(std::string("plan oracle unavailable: ") + e.what());
        }
        for (auto& d : plan.diagnostics) out.warnings.push_back("plan line skipped: " + d);

        for (auto& op : plan.operations) {
            if (op.source < 1 || op.source > static_cast<int>(fresh.size())) {
                out.warnings.push_back("plan names unknown new pattern " + std::to_string(op.source));
                continue;
            }
            const auto i = static_cast<std::size_t>(op.source - 1);
            if (handled[i]) {
                out.warnings.push_back("new pattern " + std::to_string(op.source) + " already handled");
                continue;
            }
            if (op.kind == MetaOpKind::Add) {
                add(i, "");
                continue;
            }
            auto target = std::find_if(old.begin(), old.end(), [&](auto& p) { return op.target && p.exp_id == *op.target; });
            if (target == old.end() || touched.count(target->exp_id)) {
                add(i, " (" + std::string(to_string(op.kind)) + " target unavailable)");
                continue;
            }
            const std::string label = std::to_string(op.source) + " | " + std::string(to_string(op.kind)) + " | " +
                                      std::to_string(target->exp_id);
            switch (op.kind) {
                case MetaOpKind::Merge:
                case MetaOpKind::Update: {
                    if (!constraints.ranking_consistent(fresh[i].ranking, target->ranking)) {
                        add(i, " (" + label + " vetoed by ranking consistency)");
                        break;
                    }
                    auto ids = target->related_trajectory_ids;
                    for (int id : fresh[i].related_trajectory_ids)
                        if (std::find(ids.begin(), ids.end(), id) == ids.end()) ids.push_back(id);
                    std::string text = target->text;
                    if (op.kind == MetaOpKind::Merge && fresh[i].text != text && !fresh[i].text.empty())
                        text += " / " + fresh[i].text;
                    int exp = target->exp_id;
                    *target = make_profile(ids, text, pool, encoder);
                    target->exp_id = exp;
                    touched.insert(exp);
                    handled[i] = true;
                    out.operations.push_back(label);
                    break;
                }
                case MetaOpKind::Replace: {
                    int exp = target->exp_id;
                    *target = fresh[i];
                    target->exp_id = exp;
                    touched.insert(exp);
                    handled[i] = true;
                    out.operations.push_back(label);
                    break;
                }
                case MetaOpKind::Delete:
                    if (target->support.empty()) {
                        touched.insert(target->exp_id);
                        out.operations.push_back(label);
                        old.erase(target);
                    } else {
                        out.warnings.push_back(label + " refused: profile still has support");
                    }
                    add(i, "");
                    break;
                case MetaOpKind::Add: break;
            }
        }
    }
    for (std::size_t i = 0; i < fresh.size(); ++i)
        if (!handled[i]) add(i, "");

    // Consistency sweep.
    std::vector<PatternProfile> all = std::move(old);
    for (auto& p : added) all.push_back(std::move(p));
    std::map<int, const AtomicExperienceRecord*> recs;
    std::map<int, std::string> no_text;
    for (auto& p : all)
        for (int id : p.related_trajectory_ids) recs[id] = &pool.record(id);
    for (std::size_t k = 0; k < all.size(); ++k) {
        auto parts = greedy_groups(all[k].related_trajectory_ids, recs, no_text, constraints, false);
        if (parts.size() < 2) continue;
        auto text = all[k].text;
        int exp = all[k].exp_id;
        all[k] = make_profile(parts[0], text, pool, encoder);
        all[k].exp_id = exp;
        for (std::size_t s = 1; s < parts.size(); ++s) {
            auto extra = make_profile(parts[s], text, pool, encoder);
            extra.exp_id = next_exp_id++;
            out.operations.push_back("split exp " + std::to_string(exp) + " -> exp " + std::to_string(extra.exp_id));
            all.push_back(std::move(extra));
        }
    }
    out.profiles = std::move(all);
    return out;
}

// ---- driver ------------------------------------------------------------------------------

Json RoundReport::to_json() const {
    return Json{{"degradation_type", key},
                {"preference", expool::to_string(preference)},
                {"round", round},
                {"records", records},
                {"ranking", ranking},
                {"theta", theta},
                {"nu", nu},
                {"converged", converged},
                {"gate", expool::to_string(gate)},
                {"insight_updated", insight_updated},
                {"mini_batches", mini_batches},
                {"operations", operations},
                {"warnings", warnings}};
}

class Evolver::CachedEncoder : public EncoderOracle {
public:
    explicit CachedEncoder(EncoderOracle& inner) : inner_(inner) {}
    Eigen::VectorXd embed(const ImageRef& image) override {
        auto it = cache_.find(image);
        if (it != cache_.end()) return it->second;
        return cache_[image] = inner_.embed(image);
    }
    Eigen::Index dimension() const override { return inner_.dimension(); }

private:
    EncoderOracle& inner_;
    std::map<ImageRef, Eigen::VectorXd> cache_;
};

Evolver::Evolver(ExperiencePool& pool, Environment& env, LanguageOracle& language, EncoderOracle& encoder,
                 EvolveConfig config)
    : pool_(pool), env_(env), language_(language), encoder_(encoder), config_(std::move(config)) {
    config_.validate();
}

int Evolver::acquire(const ImageRef& image, const DegradationSet& degradations, Preference preference) {
    auto anchors = coarse_anchors(pool_, degradations, preference, env_.registry());
    auto rec = acquire_record(image, degradations, preference, env_, anchors);
    auto& part = pool_.partition(rec.key, preference);
    rec.round = part.rounds;
    const auto key = rec.key;
    int id = pool_.add_record(std::move(rec));
    pool_.partition(key, preference).pending.push_back(id);
    return id;
}

std::optional<EvolutionBatch> Evolver::maybe_trigger(const std::string& key, Preference preference) {
    auto& part = pool_.partition(key, preference);
    const auto B = static_cast<std::size_t>(config_.batch_size);
    if (part.pending.size() < B) return std::nullopt;
    EvolutionBatch batch{key, preference, {part.pending.begin(), part.pending.begin() + static_cast<long>(B)}, part.rounds + 1};
    part.pending.erase(part.pending.begin(), part.pending.begin() + static_cast<long>(B));
    return batch;
}

RoundReport Evolver::evolve(const EvolutionBatch& batch) {
    auto& part = pool_.partition(batch.key, batch.preference);
    std::vector<const AtomicExperienceRecord*> recs;
    for (int id : batch.records) recs.push_back(&pool_.record(id));
    auto update = evolve_coarse(part.stats, recs, config_, batch.round);
    part.stats = update.stats;
    part.rounds = batch.round;
    pool_.put_coarse(update.entry);

    RoundReport report;
    report.key = batch.key;
    report.preference = batch.preference;
    report.round = batch.round;
    report.records = static_cast<int>(batch.records.size());
    report.ranking = update.entry.ranking.ordered();
    for (auto& k : report.ranking) report.theta.push_back(update.fit.theta(update.fit.index_of(k)));
    report.nu = update.fit.nu;
    report.converged = update.fit.converged;
    report.gate = update.entry.gate;

    refresh_insight(batch.preference, report);
    if (update.entry.gate == Gate::NeedsFine) {
        auto& queue = pool_.partition(batch.key, batch.preference).profile_queue;
        queue.insert(queue.end(), batch.records.begin(), batch.records.end());
        process_profile_queue(batch.key, batch.preference, report);
    }
    return report;
}

void Evolver::refresh_insight(Preference preference, RoundReport& report) {
    std::vector<std::pair<std::string, BtdFit>> fits;
    for (auto& [key, pref] : pool_.partitions()) {
        if (pref != preference || key.find('+') == std::string::npos) continue;
        const auto* part = pool_.find_partition(key, pref);
        if (!part || part->stats.rounds() == 0) continue;
        try {
            fits.emplace_back(key, fit(part->stats, config_.fit));
        } catch (const Error& e) {
            if (e.code() != ErrorCode::DegenerateData && e.code() != ErrorCode::NumericalInstability) throw;
        }
    }
    if (fits.empty()) return;
    try {
        auto text = language_.distill_insight(insight_prompt(preference, fits),
                                              Json{{"preference", std::string(to_string(preference))}});
        auto b = text.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) {
            report.warnings.push_back("insight reply was empty; previous insight kept");
            return;
        }
        pool_.set_insight({preference, text.substr(b, text.find_last_not_of(" \t\r\n") - b + 1), report.round});
        report.insight_updated = true;
    } catch (const Error& e) {
        if (e.code() != ErrorCode::OracleUnavailable) throw;
        report.warnings.push_back(std::string("insight skipped: ") + e.what());
    }
}

void Evolver::process_profile_queue(const std::string& key, Preference preference, RoundReport& report) {
    DualConsistency constraints{config_.rho_threshold, config_.rho_top, config_.semantic_threshold};
    CachedEncoder encoder(encoder_);
    const auto mini = static_cast<std::size_t>(config_.mini_batch);
    while (pool_.partition(key, preference).profile_queue.size() >= mini) {
        auto& queue = pool_.partition(key, preference).profile_queue;
        std::vector<int> ids(queue.begin(), queue.begin() + static_cast<long>(mini));
        queue.erase(queue.begin(), queue.begin() + static_cast<long>(mini));
        std::vector<const AtomicExperienceRecord*> recs;
        for (int id : ids) recs.push_back(&pool_.record(id));

        auto parts = partition_patterns(recs, language_, constraints, config_.debate_rounds, descriptions_);
        if (parts.fallback) report.warnings.push_back("mini-batch grouped without debate");
        std::vector<PatternProfile> fresh;
        for (std::size_t g = 0; g < parts.groups.size(); ++g)
            fresh.push_back(make_profile(parts.groups[g], parts.descriptions[g], pool_, encoder));

        auto& part = pool_.partition(key, preference);
        auto result = iterate_profiles(std::move(fresh), pool_.profiles(key, preference), pool_, language_, encoder,
                                       constraints, part.next_exp_id);
        pool_.set_profiles(key, preference, std::move(result.profiles));
        ++report.mini_batches;
        for (auto& o : result.operations) report.operations.push_back(o);
        for (auto& w : result.warnings) report.warnings.push_back(w);
    }
}

std::vector<RoundReport> Evolver::evolve_ready(int max_batches) {
    std::vector<RoundReport> reports;
    bool progressed = true;
    while (progressed) {
        progressed = false;
        for (auto& [key, pref] : pool_.partitions()) {
            if (max_batches > 0 && static_cast<int>(reports.size()) >= max_batches) return reports;
            if (auto batch = maybe_trigger(key, pref)) {
                reports.push_back(evolve(*batch));
                progressed = true;
            }
        }
    }
    return reports;
}

}  // namespace expool
