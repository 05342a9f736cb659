#include "expool/pool.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace expool {

namespace {

Json ranking_json(const Ranking& r) {
    Json j = Json::object();
    int rank = 1;
    for (auto& k : r.ordered()) j[k] = rank++;
    return j;
}

Ranking ranking_from_json(const Json& j) {
    std::map<std::string, int> m;
    for (auto& [k, v] : j.items()) m[k] = v.get<int>();
    return Ranking::from_map(m);
}

Json matrix_json(const Eigen::MatrixXi& m) {
    Json rows = Json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        Json row = Json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(row);
    }
    return rows;
}

Eigen::MatrixXi matrix_from_json(const Json& j, Eigen::Index n) {
    Eigen::MatrixXi m = Eigen::MatrixXi::Zero(n, n);
    if (static_cast<Eigen::Index>(j.size()) != n) throw Error(ErrorCode::ParseError, "matrix has wrong row count");
    for (Eigen::Index i = 0; i < n; ++i) {
        if (static_cast<Eigen::Index>(j[i].size()) != n) throw Error(ErrorCode::ParseError, "matrix has wrong column count");
        for (Eigen::Index k = 0; k < n; ++k) m(i, k) = j[i][k].get<int>();
    }
    return m;
}

Json vector_json(const Eigen::VectorXd& v) {
    Json j = Json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) j.push_back(v(i));
    return j;
}

Eigen::VectorXd vector_from_json(const Json& j) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
    return v;
}

void write_file(const std::filesystem::path& path, const Json& doc) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::InvalidInput, "cannot write " + path.string());
    out << doc.dump(2) << '\n';
    if (!out) throw Error(ErrorCode::InvalidInput, "short write on " + path.string());
}

Json read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::ParseError, path.string() + ": cannot open");
    std::stringstream buf;
    buf << in.rdbuf();
    Json doc;
    try {
        doc = Json::parse(buf.str());
    } catch (const Json::parse_error& e) {
        throw Error(ErrorCode::ParseError, path.string() + " at byte " + std::to_string(e.byte) + ": " + e.what());
    }
    if (!doc.is_object() || !doc.contains("schema"))
        throw Error(ErrorCode::ParseError, path.string() + ": missing schema field");
    if (doc["schema"] != kPoolSchema)
        throw Error(ErrorCode::UnsupportedVersion, path.string() + ": schema " + doc["schema"].dump());
    return doc;
}

template <typename F>
auto parse_field(const std::filesystem::path& path, F&& f) {
    try {
        return f();
    } catch (const Json::exception& e) {
        throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
    }
}

std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n\"'`*");
    if (b == std::string::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n\"'`*");
    return s.substr(b, e - b + 1);
}

}  // namespace

std::string_view to_string(Gate gate) { return gate == Gate::SufficientAlone ? "sufficient_alone" : "needs_fine"; }

Gate parse_gate(std::string_view text) {
    if (text == "sufficient_alone") return Gate::SufficientAlone;
    if (text == "needs_fine") return Gate::NeedsFine;
    throw Error(ErrorCode::ParseError, "unknown gate '" + std::string(text) + "'");
}

// ---- json shapes -------------------------------------------------------------------------

Json to_json(const CoarseEntry& e) {
    return Json{{"degradation_type", e.key},
                {"preference", to_string(e.preference)},
                {"ranking", ranking_json(e.ranking)},
                {"gate", to_string(e.gate)},
                {"round", e.round}};
}

CoarseEntry coarse_entry_from_json(const Json& j) {
    CoarseEntry e;
    e.key = canonical_key(parse_canonical_key(j.at("degradation_type").get<std::string>()));
    e.preference = parse_preference(j.at("preference").get<std::string>());
    e.ranking = ranking_from_json(j.at("ranking"));
    e.gate = j.contains("gate") ? parse_gate(j["gate"].get<std::string>()) : Gate::SufficientAlone;
    e.round = j.value("round", 0);
    return e;
}

Json to_json(const PatternProfile& p) {
    return Json{{"exp_id", p.exp_id},
                {"degradation_type", p.key},
                {"preference", to_string(p.preference)},
                {"degradation_pattern", p.text},
                {"ranking", ranking_json(p.ranking)},
                {"related_trajectory_ids", p.related_trajectory_ids},
                {"support", p.support},
                {"centroid", vector_json(p.centroid)}};
}

PatternProfile pattern_profile_from_json(const Json& j) {
    PatternProfile p;
    p.exp_id = j.at("exp_id").get<int>();
    p.key = j.at("degradation_type").get<std::string>();
    p.preference = parse_preference(j.at("preference").get<std::string>());
    p.text = j.at("degradation_pattern").get<std::string>();
    p.ranking = ranking_from_json(j.at("ranking"));
    p.related_trajectory_ids = j.at("related_trajectory_ids").get<std::vector<int>>();
    p.support = j.value("support", std::vector<std::string>{});
    p.centroid = vector_from_json(j.value("centroid", Json::array()));
    return p;
}

Json to_json(const AtomicExperienceRecord& r) {
    Json metrics = Json::array();
    for (auto& m : r.metrics) metrics.push_back(m ? Json(*m) : Json(nullptr));
    Json anchors = Json::object();
    for (auto& [d, t] : r.anchors) anchors[d.str()] = t.str();
    Json win_rate = Json::object();
    for (std::size_t i = 0; i < r.summary.keys.size(); ++i) win_rate[r.summary.keys[i]] = r.summary.win_rate[i];
    return Json{{"id", r.id},
                {"image", r.image},
                {"degradation_type", r.key},
                {"preference", to_string(r.preference)},
                {"round", r.round},
                {"candidates", r.candidates},
                {"anchors", anchors},
                {"metrics", metrics},
                {"metric_count", r.outcomes.metric_count},
                {"favor", matrix_json(r.outcomes.favor)},
                {"win_rate", win_rate},
                {"ranking", ranking_json(r.summary.ranking)}};
}

AtomicExperienceRecord record_from_json(const Json& j) {
    AtomicExperienceRecord r;
    r.id = j.at("id").get<int>();
    r.image = j.at("image").get<std::string>();
    r.key = j.at("degradation_type").get<std::string>();
    r.preference = parse_preference(j.at("preference").get<std::string>());
    r.round = j.value("round", 0);
    r.candidates = j.at("candidates").get<std::vector<std::string>>();
    const Json anchors = j.value("anchors", Json::object());
    for (auto& [d, t] : anchors.items())
        r.anchors[DegradationType(d)] = ToolId(t.get<std::string>());
    for (auto& m : j.at("metrics")) {
        if (m.is_null()) r.metrics.emplace_back(std::nullopt);
        else r.metrics.emplace_back(m.get<MetricVector>());
    }
    if (r.metrics.size() != r.candidates.size()) throw Error(ErrorCode::ParseError, "record metrics misaligned");
    auto n = static_cast<Eigen::Index>(r.candidates.size());
    r.outcomes.keys = r.candidates;
    for (auto& m : r.metrics) r.outcomes.valid.push_back(m.has_value());
    r.outcomes.metric_count = j.at("metric_count").get<int>();
    r.outcomes.favor = matrix_from_json(j.at("favor"), n);
    for (auto& [k, v] : j.at("win_rate").items()) {
        r.summary.keys.push_back(k);
        r.summary.win_rate.push_back(v.get<double>());
    }
    r.summary.ranking = ranking_from_json(j.at("ranking"));
    return r;
}

bool PatternProfile::operator==(const PatternProfile& o) const {
    return exp_id == o.exp_id && key == o.key && preference == o.preference && support == o.support &&
           text == o.text && ranking == o.ranking && related_trajectory_ids == o.related_trajectory_ids &&
           centroid.size() == o.centroid.size() && centroid == o.centroid;
}

bool AtomicExperienceRecord::operator==(const AtomicExperienceRecord& o) const { return to_json(*this) == to_json(o); }

// ---- pool --------------------------------------------------------------------------------

std::optional<InsightEntry> ExperiencePool::insight(Preference preference) const {
    auto it = insight_.find(preference);
    if (it == insight_.end()) return std::nullopt;
    return it->second;
}

void ExperiencePool::set_insight(InsightEntry entry) {
    if (entry.text.empty()) throw Error(ErrorCode::InvalidInput, "insight text must be non-empty");
    insight_[entry.preference] = std::move(entry);
}

std::optional<CoarseEntry> ExperiencePool::coarse_lookup(const std::string& key, Preference preference) const {
    auto it = coarse_.find({key, preference});
    if (it == coarse_.end()) return std::nullopt;
    return it->second;
}

void ExperiencePool::put_coarse(CoarseEntry entry) {
    if (entry.ranking.empty()) throw Error(ErrorCode::InvalidInput, "coarse entry needs a ranking");
    entry.key = canonical_key(parse_canonical_key(entry.key));
    coarse_[{entry.key, entry.preference}] = std::move(entry);
}

std::vector<CoarseEntry> ExperiencePool::coarse_entries() const {
    std::vector<CoarseEntry> out;
    for (auto& [_, e] : coarse_) out.push_back(e);
    return out;
}

const std::vector<PatternProfile>& ExperiencePool::profiles(const std::string& key, Preference preference) const {
    static const std::vector<PatternProfile> none;
    auto it = profiles_.find({key, preference});
    return it == profiles_.end() ? none : it->second;
}

void ExperiencePool::set_profiles(const std::string& key, Preference preference, std::vector<PatternProfile> profiles) {
    for (auto& p : profiles) {
        if (p.support.empty()) throw Error(ErrorCode::InvalidInput, "profile " + std::to_string(p.exp_id) + " has no support");
        for (int id : p.related_trajectory_ids)
            if (id < 0 || id >= static_cast<int>(records_.size()))
                throw Error(ErrorCode::InvalidInput, "profile refers to unknown record " + std::to_string(id));
    }
    if (profiles.empty()) profiles_.erase({key, preference});
    else profiles_[{key, preference}] = std::move(profiles);
}

std::size_t ExperiencePool::profile_count() const {
    std::size_t n = 0;
    for (auto& [_, v] : profiles_) n += v.size();
    return n;
}

int ExperiencePool::add_record(AtomicExperienceRecord record) {
    record.id = static_cast<int>(records_.size());
    records_.push_back(std::move(record));
    return records_.back().id;
}

const AtomicExperienceRecord& ExperiencePool::record(int id) const {
    if (id < 0 || id >= static_cast<int>(records_.size()))
        throw Error(ErrorCode::InvalidInput, "unknown record " + std::to_string(id));
    return records_[static_cast<std::size_t>(id)];
}

PartitionState& ExperiencePool::partition(const std::string& key, Preference preference) {
    return state_[{key, preference}];
}

const PartitionState* ExperiencePool::find_partition(const std::string& key, Preference preference) const {
    auto it = state_.find({key, preference});
    return it == state_.end() ? nullptr : &it->second;
}

std::vector<PartitionKey> ExperiencePool::partitions() const {
    std::vector<PartitionKey> out;
    for (auto& [k, _] : state_) out.push_back(k);
    return out;
}

bool ExperiencePool::operator==(const ExperiencePool& o) const {
    return insight_ == o.insight_ && coarse_ == o.coarse_ && profiles_ == o.profiles_ && records_ == o.records_ &&
           state_ == o.state_;
}

void ExperiencePool::save(const std::filesystem::path& directory) const {
    namespace fs = std::filesystem;
    auto target = fs::absolute(directory).lexically_normal();
    if (target.filename().empty()) target = target.parent_path();
    auto staging = target;
    staging += ".staging";
    fs::remove_all(staging);
    fs::create_directories(staging);

    Json insight = Json::array();
    for (auto& [p, e] : insight_)
        insight.push_back({{"preference", to_string(p)}, {"text", e.text}, {"round", e.round}});
    write_file(staging / "insight.json", Json{{"schema", kPoolSchema}, {"entries", insight}});

    Json coarse = Json::array();
    for (auto& [_, e] : coarse_) coarse.push_back(to_json(e));
    write_file(staging / "coarse.json", Json{{"schema", kPoolSchema}, {"entries", coarse}});

    for (auto& [k, list] : profiles_) {
        Json arr = Json::array();
        for (auto& p : list) arr.push_back(to_json(p));
        write_file(staging / "profiles" / k.first / (std::string(to_string(k.second)) + ".json"),
                   Json{{"schema", kPoolSchema}, {"degradation_type", k.first},
                        {"preference", to_string(k.second)}, {"profiles", arr}});
    }

    Json records = Json::array();
    for (auto& r : records_) records.push_back(to_json(r));
    write_file(staging / "trajectories.json", Json{{"schema", kPoolSchema}, {"records", records}});

    Json parts = Json::array();
    for (auto& [k, s] : state_) {
        parts.push_back({{"degradation_type", k.first},
                         {"preference", to_string(k.second)},
                         {"keys", s.stats.keys()},
                         {"wins", matrix_json(s.stats.wins())},
                         {"ties", matrix_json(s.stats.ties())},
                         {"rounds", s.stats.rounds()},
                         {"evolution_rounds", s.rounds},
                         {"pending", s.pending},
                         {"profile_queue", s.profile_queue},
                         {"next_exp_id", s.next_exp_id}});
    }
    write_file(staging / "state.json", Json{{"schema", kPoolSchema}, {"partitions", parts}});

    auto backup = target;
    backup += ".previous";
    fs::remove_all(backup);
    if (fs::exists(target)) fs::rename(target, backup);
    fs::rename(staging, target);
    fs::remove_all(backup);
}

ExperiencePool ExperiencePool::load(const std::filesystem::path& directory) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(directory)) throw Error(ErrorCode::InvalidInput, "no pool at " + directory.string());
    ExperiencePool pool;

    auto path = directory / "insight.json";
    auto doc = read_file(path);
    parse_field(path, [&] {
        for (auto& e : doc.at("entries")) {
            InsightEntry entry{parse_preference(e.at("preference").get<std::string>()), e.at("text").get<std::string>(),
                               e.value("round", 0)};
            pool.insight_[entry.preference] = entry;
        }
        return 0;
    });

    path = directory / "coarse.json";
    doc = read_file(path);
    parse_field(path, [&] {
        for (auto& e : doc.at("entries")) pool.put_coarse(coarse_entry_from_json(e));
        return 0;
    });

    path = directory / "trajectories.json";
    doc = read_file(path);
    parse_field(path, [&] {
        for (auto& r : doc.at("records")) pool.records_.push_back(record_from_json(r));
        return 0;
    });
    for (std::size_t i = 0; i < pool.records_.size(); ++i)
        if (pool.records_[i].id != static_cast<int>(i)) throw Error(ErrorCode::ParseError, path.string() + ": record ids out of sequence");

    if (fs::is_directory(directory / "profiles")) {
        std::vector<fs::path> files;
        for (auto& entry : fs::recursive_directory_iterator(directory / "profiles"))
            if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        for (auto& f : files) {
            auto pdoc = read_file(f);
            parse_field(f, [&] {
                std::vector<PatternProfile> list;
                for (auto& p : pdoc.at("profiles")) list.push_back(pattern_profile_from_json(p));
                pool.set_profiles(pdoc.at("degradation_type").get<std::string>(),
                                  parse_preference(pdoc.at("preference").get<std::string>()), std::move(list));
                return 0;
            });
        }
    }

    path = directory / "state.json";
    doc = read_file(path);
    parse_field(path, [&] {
        for (auto& p : doc.at("partitions")) {
            PartitionState s;
            auto keys = p.at("keys").get<std::vector<std::string>>();
            auto n = static_cast<Eigen::Index>(keys.size());
            s.stats = PairwiseStats::from_counts(keys, matrix_from_json(p.at("wins"), n),
                                                 matrix_from_json(p.at("ties"), n), p.at("rounds").get<int>());
            s.rounds = p.at("evolution_rounds").get<int>();
            s.pending = p.at("pending").get<std::vector<int>>();
            s.profile_queue = p.at("profile_queue").get<std::vector<int>>();
            s.next_exp_id = p.at("next_exp_id").get<int>();
            pool.state_[{p.at("degradation_type").get<std::string>(),
                         parse_preference(p.at("preference").get<std::string>())}] = std::move(s);
        }
        return 0;
    });
    return pool;
}

// ---- retrieval ---------------------------------------------------------------------------

double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    if (a.size() != b.size()) throw Error(ErrorCode::DimensionError, "embedding dimensions differ");
    const double na = a.norm(), nb = b.norm();
    if (na == 0 || nb == 0 || !std::isfinite(na) || !std::isfinite(nb))
        throw Error(ErrorCode::DegenerateEmbedding, "zero or non-finite embedding");
    return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

Eigen::VectorXd centroid_of(const std::vector<Eigen::VectorXd>& embeddings) {
    if (embeddings.empty()) throw Error(ErrorCode::DegenerateEmbedding, "centroid of nothing");
    Eigen::VectorXd c = Eigen::VectorXd::Zero(embeddings.front().size());
    for (auto& e : embeddings) {
        if (e.size() != c.size()) throw Error(ErrorCode::DimensionError, "embedding dimensions differ");
        c += e;
    }
    double n = c.norm();
    if (n == 0) throw Error(ErrorCode::DegenerateEmbedding, "support embeddings cancel out");
    return c / n;
}

std::vector<ScoredProfile> recall_topk(const std::vector<PatternProfile>& profiles, const Eigen::VectorXd& query,
                                       std::size_t k) {
    std::vector<ScoredProfile> scored;
    for (auto& p : profiles) scored.push_back({&p, cosine_similarity(p.centroid, query)});
    std::stable_sort(scored.begin(), scored.end(), [](const ScoredProfile& a, const ScoredProfile& b) {
        if (a.similarity != b.similarity) return a.similarity > b.similarity;
        return a.profile->exp_id < b.profile->exp_id;
    });
    if (scored.size() > k) scored.resize(k);
    return scored;
}

RefineResult refine(const std::vector<ScoredProfile>& candidates, const ImageRef& image, const std::string& key,
                    LanguageOracle& oracle) {
    if (candidates.empty()) throw Error(ErrorCode::InvalidInput, "refine needs at least one candidate");
    if (candidates.size() == 1) return {candidates.front().profile, false, {}};
    std::vector<std::string> texts;
    for (auto& c : candidates) texts.push_back(c.profile->text);
    std::string reply;
    try {
        reply = oracle.refine_choice(texts, image, key);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::OracleUnavailable) throw;
        return {candidates.front().profile, true, std::string("refine oracle unavailable: ") + e.what()};
    }
    if (auto idx = parse_refine_reply(reply, texts.size())) return {candidates[*idx].profile, false, {}};
    return {candidates.front().profile, true, "refine reply names no candidate: " + reply.substr(0, 120)};
}

// ---- guidance ----------------------------------------------------------------------------

std::string_view to_string(GuidanceLevel level) {
    switch (level) {
        case GuidanceLevel::None: return "none";
        case GuidanceLevel::Insight: return "insight";
        case GuidanceLevel::Coarse: return "coarse";
        case GuidanceLevel::Fine: return "fine";
    }
    return "none";
}

GuidanceLevel parse_guidance_level(std::string_view text) {
    for (auto l : {GuidanceLevel::None, GuidanceLevel::Insight, GuidanceLevel::Coarse, GuidanceLevel::Fine})
        if (to_string(l) == text) return l;
    throw Error(ErrorCode::InvalidInput, "unknown guidance level '" + std::string(text) + "'");
}

std::map<DegradationType, ToolId> Guidance::assignment() const {
    std::map<DegradationType, ToolId> out;
    for (auto& [d, list] : tools)
        if (!list.empty()) out[d] = list.front();
    return out;
}

std::vector<DegradationType> insight_order_chain(const std::string& text) {
    std::string norm;
    for (std::size_t i = 0; i < text.size(); ++i) {
        // UTF-8 right arrow
        if (text.compare(i, 3, "\xE2\x86\x92") == 0) {
            norm += "->";
            i += 2;
        } else {
            norm += text[i];
        }
    }
    std::vector<DegradationType> best;
    std::string segment;
    auto flush = [&] {
        if (segment.find("->") != std::string::npos) {
            std::vector<DegradationType> chain;
            std::size_t start = 0;
            while (start <= segment.size()) {
                auto end = segment.find("->", start);
                if (end == std::string::npos) end = segment.size();
                auto item = lower(trim(segment.substr(start, end - start)));
                if (!item.empty()) chain.emplace_back(item);
                start = end + 2;
            }
            if (chain.size() > best.size()) best = chain;
        }
        segment.clear();
    };
    for (char c : norm) {
        if (c == '.' || c == ':' || c == ';' || c == '\n' || c == '(' || c == ')' || c == ',') flush();
        else segment += c;
    }
    flush();
    return best;
}

namespace {

Ranking orders_by_chain(const DegradationSet& D, const std::vector<DegradationType>& chain) {
    auto position = [&](const DegradationType& d) {
        for (std::size_t i = 0; i < chain.size(); ++i)
            if (chain[i].str().find(d.str()) != std::string::npos) return static_cast<int>(i);
        return -1;
    };
    std::vector<std::pair<int, std::string>> scored;
    RemovalOrder order = D.members();
    do {
        int discord = 0;
        for (std::size_t a = 0; a < order.size(); ++a)
            for (std::size_t b = a + 1; b < order.size(); ++b) {
                int pa = position(order[a]), pb = position(order[b]);
                if (pa >= 0 && pb >= 0 && pa > pb) ++discord;
            }
        scored.emplace_back(discord, order_key(order));
    } while (std::next_permutation(order.begin(), order.end()));
    std::sort(scored.begin(), scored.end());
    std::vector<std::string> keys;
    for (auto& [_, k] : scored) keys.push_back(k);
    return Ranking(keys);
}

std::vector<ToolId> ranked_tools(const std::vector<ToolId>& registry_tools, const Ranking& ranking) {
    std::vector<ToolId> out;
    for (auto& k : ranking.ordered()) {
        ToolId t(k);
        if (std::find(registry_tools.begin(), registry_tools.end(), t) != registry_tools.end()) out.push_back(t);
    }
    for (auto& t : registry_tools)
        if (std::find(out.begin(), out.end(), t) == out.end()) out.push_back(t);
    return out;
}

}  // namespace

Guidance get_guidance(const ExperiencePool& pool, const ImageRef& image, const DegradationSet& D,
                      Preference preference, const ToolRegistry& registry, const GuidanceOptions& options,
                      LanguageOracle* language, EncoderOracle* encoder) {
    Guidance g;
    if (D.empty()) return g;
    const bool coarse_allowed = options.max_level >= GuidanceLevel::Coarse;
    for (auto& d : D.members()) {
        const auto& reg = registry.tools(d);
        auto single = coarse_allowed ? pool.coarse_lookup(d.str(), preference) : std::nullopt;
        g.tools[d] = single ? ranked_tools(reg, single->ranking) : reg;
    }
    const auto key = canonical_key(D);
    auto coarse = coarse_allowed ? pool.coarse_lookup(key, preference) : std::nullopt;
    if (coarse) {
        const auto& candidates = pool.profiles(key, preference);
        if (coarse->gate == Gate::NeedsFine && options.max_level >= GuidanceLevel::Fine && !candidates.empty() &&
            encoder) {
            try {
                auto query = encoder->embed(image);
                ++g.retrievals;
                auto top = recall_topk(candidates, query, std::max<std::size_t>(options.top_k, 1));
                RefineResult chosen{top.front().profile, false, {}};
                if (language) chosen = refine(top, image, key, *language);
                if (!chosen.warning.empty()) g.warnings.push_back(chosen.warning);
                g.level = GuidanceLevel::Fine;
                g.profile = *chosen.profile;
                g.ranking = chosen.profile->ranking;
                if (D.size() == 1) {
                    auto& d = D.members().front();
                    g.tools[d] = ranked_tools(g.tools[d], chosen.profile->ranking);
                }
                return g;
            } catch (const Error& e) {
                if (e.code() != ErrorCode::OracleUnavailable && e.code() != ErrorCode::DegenerateEmbedding &&
                    e.code() != ErrorCode::DimensionError)
                    throw;
                g.warnings.push_back(std::string("fine retrieval skipped: ") + e.what());
            }
        }
        g.level = GuidanceLevel::Coarse;
        g.ranking = coarse->ranking;
        if (D.size() == 1) {
            auto& d = D.members().front();
            g.tools[d] = ranked_tools(registry.tools(d), coarse->ranking);
        }
        return g;
    }
    if (options.max_level >= GuidanceLevel::Insight && D.size() > 1) {
        if (auto insight = pool.insight(preference)) {
            g.level = GuidanceLevel::Insight;
            g.insight = insight->text;
            g.ranking = orders_by_chain(D, insight_order_chain(insight->text));
        }
    }
    return g;
}

}  // namespace expool
