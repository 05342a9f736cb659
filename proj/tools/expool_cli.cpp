#include "expool/evolve.hpp"
#include "expool/experiments.hpp"
#include "expool/pool.hpp"
#include "expool/simenv.hpp"
#include "expool/workflow.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <fstream>
#include <iostream>
#include <memory>
#include <thread>

using namespace expool;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitOracle = 3;

struct OracleUnavailableExit : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Options {
    std::string world = "world.json";
    std::string pool = "pool";
    std::string preference = "fidelity";
    std::string oracle = "mock";
    std::string endpoint;
    std::string model;
    std::string api_key_env = "EXPOOL_API_KEY";
    int timeout_s = 60;
    std::string record;
    std::string replay;
    std::uint64_t seed = 1;
    std::string out;

    int batch_size = 25;
    double alpha = 0.975;
    int mini_batch = 12;
    int top_k = 3;
    int max_batches = 0;

    int budget_rollbacks = 8;
    int budget_invocations = 40;
    std::string level = "fine";
    std::string only;
    int jobs = 1;

    std::string preset = "groupa";
    std::vector<std::string> images;

    std::string experiment;
    int seeds = 0;
    std::vector<std::string> traces;
    std::string format = "text";
};

Preference preference_of(const Options& o) { return parse_preference(o.preference); }

EvolveConfig evolve_config(const Options& o) {
    EvolveConfig c;
    c.batch_size = o.batch_size;
    c.alpha = o.alpha;
    c.mini_batch = o.mini_batch;
    c.top_k = static_cast<std::size_t>(o.top_k);
    c.validate();
    return c;
}

WorkflowConfig workflow_config(const Options& o) {
    WorkflowConfig c;
    c.preference = preference_of(o);
    c.max_rollbacks = o.budget_rollbacks;
    c.max_invocations = o.budget_invocations;
    c.guidance.max_level = parse_guidance_level(o.level);
    c.guidance.top_k = static_cast<std::size_t>(o.top_k);
    c.validate();
    return c;
}

// Owns whichever oracle stack the flags ask for.
class OracleStack {
public:
    OracleStack(const Options& o, const SimWorld& world) {
        if (!o.replay.empty()) {
            replay_transcript_ = Transcript::load(o.replay);
            replay_ = std::make_unique<TranscriptReplay>(replay_transcript_);
            base_language_ = std::make_unique<ReplayLanguageOracle>(*replay_);
            base_encoder_ = std::make_unique<ReplayEncoderOracle>(*replay_, world.spec().embedding_dim);
        } else {
            base_encoder_ = std::make_unique<SimEncoder>(world);
            if (o.oracle == "mock") {
                base_language_ = std::make_unique<SimLanguageOracle>(world);
            } else if (o.oracle == "remote") {
                RemoteConfig rc;
                rc.endpoint = o.endpoint;
                rc.model = o.model;
                rc.api_key_env = o.api_key_env;
                rc.timeout = std::chrono::seconds(o.timeout_s);
                try {
                    base_language_ = std::make_unique<RemoteLanguageOracle>(rc, std::make_shared<HttpTransport>());
                } catch (const Error& e) {
                    throw OracleUnavailableExit(e.what());
                }
            } else {
                throw Error(ErrorCode::ConfigError, "unknown oracle '" + o.oracle + "' (mock or remote)");
            }
        }
        if (!o.record.empty()) {
            language_ = std::make_unique<RecordingLanguageOracle>(*base_language_, recorded_);
            encoder_ = std::make_unique<RecordingEncoderOracle>(*base_encoder_, recorded_);
        }
        record_path_ = o.record;
    }

    LanguageOracle& language() { return language_ ? *language_ : *base_language_; }
    EncoderOracle& encoder() { return encoder_ ? *encoder_ : *base_encoder_; }

    void finish() const {
        if (!record_path_.empty()) recorded_.save(record_path_);
    }

private:
    Transcript replay_transcript_;
    std::unique_ptr<TranscriptReplay> replay_;
    std::unique_ptr<LanguageOracle> base_language_;
    std::unique_ptr<EncoderOracle> base_encoder_;
    Transcript recorded_;
    std::unique_ptr<LanguageOracle> language_;
    std::unique_ptr<EncoderOracle> encoder_;
    std::string record_path_;
};

ExperiencePool load_or_empty(const std::string& dir) {
    if (std::filesystem::exists(std::filesystem::path(dir) / "state.json")) return ExperiencePool::load(dir);
    return {};
}

void write_output(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorCode::InvalidInput, "cannot write " + path);
    f << text;
}

std::vector<ImageRef> select_images(const SimWorld& world, const std::string& only) {
    std::vector<ImageRef> out;
    for (auto& img : world.originals()) {
        if (!only.empty() && canonical_key(world.state(img).degradations()) != canonical_key(parse_canonical_key(only)))
            continue;
        out.push_back(img);
    }
    return out;
}

int cmd_simulate(const Options& o) {
    SimWorld world(preset_world(parse_world_preset(o.preset), o.seed));
    for (auto& item : o.images) {
        auto colon = item.rfind(':');
        if (colon == std::string::npos) throw Error(ErrorCode::InvalidInput, "--images expects key:count, got '" + item + "'");
        auto D = parse_canonical_key(item.substr(0, colon));
        world.generate_images(static_cast<std::size_t>(std::stoul(item.substr(colon + 1))), D);
    }
    world.save(o.world);
    std::cout << "world " << o.world << ": preset " << o.preset << ", " << world.originals().size() << " images\n";
    return 0;
}

int cmd_acquire(const Options& o) {
    auto world = SimWorld::load(o.world);
    auto pool = load_or_empty(o.pool);
    OracleStack oracles(o, world);
    Evolver evolver(pool, world, oracles.language(), oracles.encoder(), evolve_config(o));
    std::set<ImageRef> seen;
    for (auto& r : pool.records()) seen.insert(r.image);
    int added = 0;
    for (auto& img : select_images(world, o.only)) {
        if (seen.count(img)) continue;
        auto D = world.state(img).degradations();
        if (D.empty()) continue;
        evolver.acquire(img, D, preference_of(o));
        ++added;
    }
    pool.save(o.pool);
    oracles.finish();
    std::cout << "acquired " << added << " records; pool holds " << pool.records().size() << "\n";
    return 0;
}

int cmd_evolve(const Options& o) {
    auto world = SimWorld::load(o.world);
    auto pool = load_or_empty(o.pool);
    OracleStack oracles(o, world);
    Evolver evolver(pool, world, oracles.language(), oracles.encoder(), evolve_config(o));
    auto reports = evolver.evolve_ready(o.max_batches);
    pool.save(o.pool);
    oracles.finish();
    Json out = Json::array();
    for (auto& r : reports) out.push_back(r.to_json());
    write_output(o.out, out.dump(2) + "\n");
    if (!o.out.empty() && o.out != "-") std::cout << "evolved " << reports.size() << " batches\n";
    return 0;
}

int cmd_infer(const Options& o) {
    auto world = SimWorld::load(o.world);
    const auto pool = load_or_empty(o.pool);
    const auto cfg = workflow_config(o);
    auto images = select_images(world, o.only);
    std::vector<WorkflowTrace> traces(images.size());
    if (o.jobs > 1 && (!o.record.empty() || !o.replay.empty()))
        throw Error(ErrorCode::ConfigError, "transcripts need --jobs 1 so the call order is reproducible");
    if (o.jobs <= 1) {
        OracleStack oracles(o, world);
        for (std::size_t i = 0; i < images.size(); ++i)
            traces[i] = run_workflow(images[i], world, pool, &oracles.language(), &oracles.encoder(), cfg);
        oracles.finish();
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(o.jobs));
        std::vector<std::thread> threads;
        for (int j = 0; j < o.jobs; ++j)
            threads.emplace_back([&, j] {
                try {
                    OracleStack oracles(o, world);
                    for (std::size_t i = next++; i < images.size(); i = next++)
                        traces[i] = run_workflow(images[i], world, pool, &oracles.language(), &oracles.encoder(), cfg);
                } catch (...) {
                    errors[static_cast<std::size_t>(j)] = std::current_exception();
                }
            });
        for (auto& t : threads) t.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    std::string lines;
    int successes = 0;
    for (auto& t : traces) {
        lines += t.to_json().dump() + "\n";
        successes += t.status == TraceStatus::Success;
    }
    write_output(o.out, lines);
    if (!o.out.empty() && o.out != "-")
        std::cout << "restored " << successes << "/" << traces.size() << " images; traces in " << o.out << "\n";
    return 0;
}

int cmd_inspect(const Options& o) {
    const auto pool = ExperiencePool::load(o.pool);
    Json out;
    out["records"] = pool.records().size();
    out["profiles"] = pool.profile_count();
    Json parts = Json::array();
    for (auto& [key, pref] : pool.partitions()) {
        const auto* part = pool.find_partition(key, pref);
        Json p{{"degradation_type", key},
               {"preference", std::string(to_string(pref))},
               {"rounds", part->rounds},
               {"pending", part->pending.size()},
               {"profile_queue", part->profile_queue.size()},
               {"profiles", pool.profiles(key, pref).size()}};
        if (auto c = pool.coarse_lookup(key, pref)) {
            p["gate"] = std::string(to_string(c->gate));
            p["ranking"] = c->ranking.ordered();
        }
        parts.push_back(p);
    }
    out["partitions"] = parts;
    Json insights = Json::array();
    for (auto pref : {Preference::Fidelity, Preference::Perception})
        if (auto i = pool.insight(pref)) insights.push_back({{"preference", std::string(to_string(pref))}, {"text", i->text}});
    out["insight"] = insights;
    write_output(o.out, out.dump(2) + "\n");
    return 0;
}

std::string render(const ExperimentReport& r, const std::string& format) {
    if (format == "csv") return r.csv();
    if (format == "json") return r.to_json().dump(2) + "\n";
    return r.summary();
}

int cmd_report(const Options& o) {
    const auto pref = preference_of(o);
    if (o.experiment.empty()) {
        if (o.traces.empty()) throw Error(ErrorCode::InvalidInput, "report needs --experiment or --traces");
        auto world = SimWorld::load(o.world);
        std::vector<std::pair<std::string, std::vector<WorkflowTrace>>> runs;
        for (auto& path : o.traces) {
            std::ifstream f(path);
            if (!f) throw Error(ErrorCode::InvalidInput, "cannot read " + path);
            std::vector<WorkflowTrace> traces;
            for (std::string line; std::getline(f, line);)
                if (!line.empty()) traces.push_back(WorkflowTrace::from_json(Json::parse(line)));
            runs.emplace_back(std::filesystem::path(path).stem().string(), std::move(traces));
        }
        ExperimentReport r;
        r.name = "traces";
        r.conditions = summarize_conditions(runs, world, pref);
        write_output(o.out, render(r, o.format));
        return 0;
    }
    if (o.experiment == "granularity") {
        GranularityConfig g;
        if (o.seeds > 0) g.seeds = o.seeds;
        g.base_seed = o.seed;
        g.preference = pref;
        g.evolve = evolve_config(o);
        g.workflow = workflow_config(o);
        g.jobs = o.jobs;
        write_output(o.out, render(granularity_ablation(g), o.format));
    } else if (o.experiment == "evolution-times") {
        EvolutionTimesConfig e;
        if (o.seeds > 0) e.seeds = o.seeds;
        e.base_seed = o.seed;
        e.preference = pref;
        e.evolve = evolve_config(o);
        e.workflow = workflow_config(o);
        e.jobs = o.jobs;
        write_output(o.out, render(evolution_times(e), o.format));
    } else if (o.experiment == "gate") {
        const int seeds = o.seeds > 0 ? o.seeds : 50;
        Json out = Json::array();
        for (auto preset : {WorldPreset::Dominant, WorldPreset::Symmetric}) {
            auto g = gate_experiment(preset, seeds, o.seed, evolve_config(o), pref);
            out.push_back({{"preset", std::string(to_string(preset))},
                           {"rounds", g.rounds},
                           {"sufficient_alone", g.sufficient},
                           {"needs_fine", g.needs_fine}});
        }
        write_output(o.out, out.dump(2) + "\n");
    } else {
        throw Error(ErrorCode::InvalidInput, "unknown experiment '" + o.experiment + "'");
    }
    return 0;
}

void add_oracle_flags(CLI::App* app, Options& o) {
    app->add_option("--oracle", o.oracle, "mock or remote")->check(CLI::IsMember({"mock", "remote"}));
    app->add_option("--endpoint", o.endpoint, "chat-completions base URL");
    app->add_option("--model", o.model, "remote model name");
    app->add_option("--api-key-env", o.api_key_env, "environment variable holding the API key");
    app->add_option("--timeout", o.timeout_s, "remote timeout in seconds");
    app->add_option("--record", o.record, "write every oracle call to this transcript");
    app->add_option("--replay", o.replay, "answer oracle calls from this transcript");
}

void add_evolve_flags(CLI::App* app, Options& o) {
    app->add_option("--batch-size", o.batch_size, "records per evolution batch");
    app->add_option("--alpha", o.alpha, "gate confidence level");
    app->add_option("--mini-batch", o.mini_batch, "records per profile mini-batch");
    app->add_option("--top-k", o.top_k, "profiles recalled before refinement");
}

void add_workflow_flags(CLI::App* app, Options& o) {
    app->add_option("--budget-rollbacks", o.budget_rollbacks, "rollback cap per image");
    app->add_option("--budget-invocations", o.budget_invocations, "tool invocation cap per image");
    app->add_option("--level", o.level, "highest guidance level: none, insight, coarse, fine");
    app->add_option("--jobs", o.jobs, "worker threads");
}

}  // namespace

int main(int argc, char** argv) {
    Options o;
    CLI::App app{"Experience-pool image restoration driver"};
    app.set_config("--config", "", "read options from a TOML/INI file");
    app.require_subcommand(1);
    app.add_option("--world", o.world, "world manifest path");
    app.add_option("--pool", o.pool, "experience pool directory");
    app.add_option("--pref", o.preference, "fidelity or perception")->check(CLI::IsMember({"fidelity", "perception"}));
    app.add_option("--seed", o.seed, "world seed");
    app.add_option("--out", o.out, "output path ('-' for stdout)");

    auto* simulate = app.add_subcommand("simulate", "create a simulated world and its images");
    simulate->add_option("--preset", o.preset, "groupa, groupb, groupc, dominant, symmetric, counterexample");
    simulate->add_option("--images", o.images, "degradation key and count, e.g. 'dark+rain:20'")->delimiter(',');

    auto* acquire = app.add_subcommand("acquire", "record atomic experience for every image");
    acquire->add_option("--only", o.only, "restrict to one degradation key");
    add_oracle_flags(acquire, o);
    add_evolve_flags(acquire, o);

    auto* evolve = app.add_subcommand("evolve", "run every ready evolution batch");
    evolve->add_option("--max-batches", o.max_batches, "stop after this many batches (0: all)");
    add_oracle_flags(evolve, o);
    add_evolve_flags(evolve, o);

    auto* infer = app.add_subcommand("infer", "restore images with pool guidance");
    infer->add_option("--only", o.only, "restrict to one degradation key");
    add_oracle_flags(infer, o);
    add_workflow_flags(infer, o);
    infer->add_option("--top-k", o.top_k, "profiles recalled before refinement");

    app.add_subcommand("inspect", "summarize a pool");

    auto* report = app.add_subcommand("report", "aggregate traces or run an experiment");
    report->add_option("--experiment", o.experiment, "granularity, evolution-times or gate");
    report->add_option("--traces", o.traces, "trace files, one condition each");
    report->add_option("--seeds", o.seeds, "number of seeds");
    report->add_option("--format", o.format, "text, csv or json")->check(CLI::IsMember({"text", "csv", "json"}));
    add_evolve_flags(report, o);
    add_workflow_flags(report, o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitUsage;
    }

    try {
        if (simulate->parsed()) return cmd_simulate(o);
        if (acquire->parsed()) return cmd_acquire(o);
        if (evolve->parsed()) return cmd_evolve(o);
        if (infer->parsed()) return cmd_infer(o);
        if (report->parsed()) return cmd_report(o);
        return cmd_inspect(o);
    } catch (const OracleUnavailableExit& e) {
        std::cerr << "oracle unavailable: " << e.what() << "\n";
        return kExitOracle;
    } catch (const Error& e) {
        std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
        if (e.code() == ErrorCode::OracleUnavailable) return kExitOracle;
        if (e.code() == ErrorCode::InvalidInput || e.code() == ErrorCode::ConfigError) return kExitUsage;
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
