// Experiment plumbing behind the command-line tool: one config for the whole
// pipeline, the on-disk layout of its artifacts, and one function per
// command.
#pragma once

#include <filesystem>
#include <iostream>
#include <map>

#include "voxnav/eval.hpp"

namespace voxnav {

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string out = "voxnav-out";
    int workers = 1;

    SceneParams scene;  // layout is set per scene from the lists below
    int seen_scenes = 5;
    int novel_scenes = 8;
    std::vector<Layout> seen_layouts{Layout::rooms, Layout::clutter};
    std::vector<Layout> novel_layouts{Layout::maze, Layout::rooms, Layout::clutter};
    // scene i of a group uses derive_seed(seed, start + i)
    std::uint64_t seen_seed_start = 0;
    std::uint64_t novel_seed_start = 1000;

    SensorConfig sensor;  // shared by collection and evaluation
    CollectConfig collect;
    TrainConfig train;
    EvalConfig eval;
    int eval_episodes = 50;  // per scene group
    std::string agent = "snn_proxy_policy";

    void validate() const;
    CollectConfig collect_config() const;
    EvalConfig eval_config() const;
    TrainConfig train_config() const;
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    auto layouts = [](const std::vector<Layout>& v) {
        std::vector<std::string> s;
        for (auto l : v) s.push_back(to_string(l));
        return s;
    };
    nlohmann::json collect = c.collect, train = c.train, eval = c.eval;
    collect.erase("sensor");
    eval.erase("sensor");
    train.erase("seed");
    j = {{"seed", c.seed},
         {"out", c.out},
         {"workers", c.workers},
         {"scene", c.scene},
         {"seen_scenes", c.seen_scenes},
         {"novel_scenes", c.novel_scenes},
         {"seen_layouts", layouts(c.seen_layouts)},
         {"novel_layouts", layouts(c.novel_layouts)},
         {"seen_seed_start", c.seen_seed_start},
         {"novel_seed_start", c.novel_seed_start},
         {"sensor", c.sensor},
         {"collect", collect},
         {"train", train},
         {"eval", eval},
         {"eval_episodes", c.eval_episodes},
         {"agent", c.agent}};
}

namespace experiment_detail {

inline const char* type_name(const nlohmann::json& j) {
    if (j.is_number()) return "number";
    return j.type_name();
}

/// Rejects keys the reference config does not have and values whose JSON
/// type differs from the reference, naming the offending field.
inline void check_fields(const nlohmann::json& given, const nlohmann::json& ref, const std::string& path) {
    if (ref.is_object()) {
        if (!given.is_object()) throw ConfigError("config field '" + path + "' must be an object");
        for (auto it = given.begin(); it != given.end(); ++it) {
            const std::string p = path.empty() ? it.key() : path + "." + it.key();
            if (!ref.contains(it.key())) throw ConfigError("unknown config field '" + p + "'");
            check_fields(it.value(), ref[it.key()], p);
        }
        return;
    }
    const bool ok = ref.is_number() ? given.is_number() : given.type() == ref.type();
    if (!ok)
        throw ConfigError("config field '" + path + "' must be a " + type_name(ref) + ", got " + type_name(given));
    if (ref.is_number_unsigned() && given.is_number_integer() && given.get<std::int64_t>() < 0)
        throw ConfigError("config field '" + path + "' must be non-negative");
    if (ref.is_number_integer() && given.is_number_float())
        throw ConfigError("config field '" + path + "' must be an integer");
    if (ref.is_array() && !ref.empty())
        for (std::size_t i = 0; i < given.size(); ++i)
            check_fields(given[i], ref[0], path + "[" + std::to_string(i) + "]");
}

template <typename T>
T section(const nlohmann::json& j, const char* key, const T& fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config field '") + key + "': " + e.what());
    }
}

}  // namespace experiment_detail

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    using experiment_detail::section;
    const ExperimentConfig d;
    experiment_detail::check_fields(j, nlohmann::json(d), "");
    auto layouts = [&](const char* key, const std::vector<Layout>& fallback) {
        std::vector<Layout> v;
        for (const auto& s : section(j, key, std::vector<std::string>{})) v.push_back(parse_layout(s));
        return j.contains(key) ? v : fallback;
    };
    c.seed = section(j, "seed", d.seed);
    c.out = section(j, "out", d.out);
    c.workers = section(j, "workers", d.workers);
    c.scene = section(j, "scene", d.scene);
    c.seen_scenes = section(j, "seen_scenes", d.seen_scenes);
    c.novel_scenes = section(j, "novel_scenes", d.novel_scenes);
    c.seen_layouts = layouts("seen_layouts", d.seen_layouts);
    c.novel_layouts = layouts("novel_layouts", d.novel_layouts);
    c.seen_seed_start = section(j, "seen_seed_start", d.seen_seed_start);
    c.novel_seed_start = section(j, "novel_seed_start", d.novel_seed_start);
    c.sensor = section(j, "sensor", d.sensor);
    c.collect = section(j, "collect", d.collect);
    c.train = section(j, "train", d.train);
    c.eval = section(j, "eval", d.eval);
    c.eval_episodes = section(j, "eval_episodes", d.eval_episodes);
    c.agent = section(j, "agent", d.agent);
}

inline void ExperimentConfig::validate() const {
    auto field = [](const std::string& name, const std::function<void()>& check) {
        try {
            check();
        } catch (const ConfigError& e) {
            throw ConfigError(name + ": " + e.what());
        }
    };
    if (out.empty()) throw ConfigError("out: output directory must not be empty");
    if (workers < 1) throw ConfigError("workers: must be >= 1");
    if (seen_scenes < 1) throw ConfigError("seen_scenes: must be >= 1");
    if (novel_scenes < 0) throw ConfigError("novel_scenes: must be >= 0");
    if (seen_layouts.empty()) throw ConfigError("seen_layouts: must not be empty");
    if (novel_scenes > 0 && novel_layouts.empty()) throw ConfigError("novel_layouts: must not be empty");
    if (eval_episodes < 1) throw ConfigError("eval_episodes: must be >= 1");
    const auto seen_end = seen_seed_start + std::uint64_t(seen_scenes);
    const auto novel_end = novel_seed_start + std::uint64_t(novel_scenes);
    if (novel_scenes > 0 && seen_seed_start < novel_end && novel_seed_start < seen_end)
        throw ConfigError("seen_seed_start/novel_seed_start: seen seeds [" + std::to_string(seen_seed_start) + ", " +
                          std::to_string(seen_end) + ") overlap novel seeds [" + std::to_string(novel_seed_start) +
                          ", " + std::to_string(novel_end) + ")");
    field("scene", [&] { scene.validate(); });
    field("sensor", [&] { sensor.validate(); });
    field("collect", [&] {
        if (collect.per_scene < 1) throw ConfigError("per_scene must be >= 1");
        if (collect.record_every < 1) throw ConfigError("record_every must be >= 1");
    });
    field("train", [&] { train.validate(); });
    field("eval", [&] { EpisodeConfig{{0, 0}, eval.success_radius, eval.max_steps, eval.dt}.validate(); });
    field("agent", [&] {
        const auto k = parse_agent_kind(agent);
        (void)k;
    });
    if (sensor.grid.nx != sensor.grid.ny || sensor.grid.ny != sensor.grid.nz || sensor.grid.nx % train.grid_size != 0)
        throw ConfigError("train.grid_size: " + std::to_string(train.grid_size) + " must divide the sensor grid " +
                          to_string(sensor.grid));
}

inline CollectConfig ExperimentConfig::collect_config() const {
    CollectConfig c = collect;
    c.sensor = sensor;
    c.workers = workers;
    return c;
}

inline EvalConfig ExperimentConfig::eval_config() const {
    EvalConfig c = eval;
    c.sensor = sensor;
    c.workers = workers;
    return c;
}

inline TrainConfig ExperimentConfig::train_config() const {
    TrainConfig c = train;
    c.seed = derive_seed(seed, 0x747261696eULL);
    return c;
}

// ------------------------------------------------------------------ layout

/// Where each artifact of an experiment lives under `out`.
struct ArtifactPaths {
    std::filesystem::path root;

    std::filesystem::path scenes(const std::string& group) const { return root / "scenes" / group; }
    std::filesystem::path dataset() const { return root / "dataset"; }
    std::filesystem::path model(const std::string& name) const { return root / "models" / (name + ".ckpt"); }
    std::filesystem::path loss_curve(const std::string& name, const std::string& phase) const {
        return root / "models" / (name + "." + phase + ".csv");
    }
    std::filesystem::path report(const std::string& name) const { return root / "reports" / name; }
    std::filesystem::path trace(const std::string& name) const { return root / "traces" / (name + ".csv"); }
    std::filesystem::path log(const std::string& command) const { return root / "logs" / (command + ".json"); }
};

/// Checkpoint name for an agent trained at `grid`: e.g. gt_grid_policy-g16 or
/// snn_proxy_policy-g64-nonmodular.
inline std::string model_name(const std::string& agent, std::uint32_t grid, bool modular = true) {
    std::string n = agent + "-g" + std::to_string(grid);
    if (agent == "snn_proxy_policy" && !modular) n += "-nonmodular";
    return n;
}

/// Writes the resolved config of a command next to its outputs.
inline void log_config(const ExperimentConfig& cfg, const std::string& command, const nlohmann::json& extra = {}) {
    const ArtifactPaths paths{cfg.out};
    std::filesystem::create_directories(paths.log(command).parent_path());
    nlohmann::json j = {{"command", command}, {"config", cfg}};
    if (!extra.is_null()) j["options"] = extra;
    write_text(paths.log(command).string(), j.dump(2) + "\n");
    std::cerr << "[" << command << "] resolved config: " << paths.log(command).string() << "\n";
}

// ---------------------------------------------------------------- commands

inline std::uint64_t scene_seed(const ExperimentConfig& cfg, const std::string& group, int i) {
    const auto start = group == "novel" ? cfg.novel_seed_start : cfg.seen_seed_start;
    return derive_seed(cfg.seed, start + std::uint64_t(i));
}

/// Generates the seen and novel scene sets and writes them with an index
/// file per group.
inline std::map<std::string, std::vector<Scene>> gen_scenes(const ExperimentConfig& cfg) {
    cfg.validate();
    std::map<std::string, std::vector<Scene>> groups;
    for (const std::string group : {"seen", "novel"}) {
        const bool novel = group == "novel";
        const int n = novel ? cfg.novel_scenes : cfg.seen_scenes;
        const auto& layouts = novel ? cfg.novel_layouts : cfg.seen_layouts;
        std::vector<Scene> scenes(static_cast<std::size_t>(n));
        parallel_for(scenes.size(), cfg.workers, [&](std::size_t i) {
            SceneParams p = cfg.scene;
            p.layout = layouts[i % layouts.size()];
            scenes[i] = generate_scene(p, scene_seed(cfg, group, int(i)));
        });
        const auto dir = ArtifactPaths{cfg.out}.scenes(group);
        std::filesystem::remove_all(dir);
        std::filesystem::create_directories(dir);
        nlohmann::json index = nlohmann::json::array();
        for (const auto& s : scenes) {
            save_scene(dir.string(), s);
            index.push_back(s.id + ".json");
        }
        write_text((dir / "index.json").string(), index.dump(2) + "\n");
        groups[group] = std::move(scenes);
    }
    return groups;
}

/// Loads a scene group written by gen_scenes.
inline std::vector<Scene> load_scene_group(const ExperimentConfig& cfg, const std::string& group) {
    const auto dir = ArtifactPaths{cfg.out}.scenes(group);
    const auto index = dir / "index.json";
    if (!std::filesystem::exists(index))
        throw DependencyError("no " + group + " scenes at " + dir.string() + " (run gen-scenes first)");
    std::vector<Scene> scenes;
    for (const auto& f : nlohmann::json::parse(read_text(index.string())))
        scenes.push_back(load_scene((dir / f.get<std::string>()).string()));
    return scenes;
}

/// Expert demonstrations on the first seen_scenes seen scenes.
inline Dataset collect(const ExperimentConfig& cfg) {
    cfg.validate();
    auto scenes = load_scene_group(cfg, "seen");
    if (scenes.size() < std::size_t(cfg.seen_scenes))
        throw DependencyError("collect needs " + std::to_string(cfg.seen_scenes) + " seen scenes, found " +
                              std::to_string(scenes.size()) + " (rerun gen-scenes)");
    scenes.resize(std::size_t(cfg.seen_scenes));
    Dataset ds = collect_demonstrations(scenes, cfg.collect_config(), derive_seed(cfg.seed, 0x636f6c6cULL));
    const auto dir = ArtifactPaths{cfg.out}.dataset();
    std::filesystem::remove_all(dir);
    save_dataset(dir.string(), ds);
    return ds;
}

/// Trains cfg.agent on the collected dataset and writes the checkpoint and
/// one loss-curve CSV per phase. Returns the checkpoint name.
inline std::string train(const ExperimentConfig& cfg, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    const auto kind = parse_agent_kind(cfg.agent);
    if (kind != AgentKind::gt_grid_policy && kind != AgentKind::snn_proxy_policy)
        throw ConfigError("agent: only gt_grid_policy and snn_proxy_policy are trainable");
    const ArtifactPaths paths{cfg.out};
    const Dataset ds = load_dataset(paths.dataset().string());
    const TrainConfig tc = cfg.train_config();
    TrainResult r = train_agent(prepare_frames(ds, tc), tc, cfg.agent, on_epoch);
    r.bundle.config["sensor"] = cfg.sensor;
    const std::string name = model_name(cfg.agent, tc.grid_size, tc.modular);
    std::filesystem::create_directories(paths.model(name).parent_path());
    save_checkpoint(paths.model(name).string(), r.bundle);
    for (const auto& c : r.curves) write_text(paths.loss_curve(name, c.phase).string(), c.to_csv());
    return name;
}

/// Loaded agent; the bundle owns the networks the agent points into.
struct LoadedAgent {
    std::unique_ptr<ModelBundle> bundle;
    Agent agent;
    std::string name;
};

inline LoadedAgent load_agent(const ExperimentConfig& cfg, const std::string& agent, std::uint32_t grid, bool modular) {
    LoadedAgent a;
    const auto kind = parse_agent_kind(agent);
    if (kind == AgentKind::expert || kind == AgentKind::stub) {
        a.agent = kind == AgentKind::expert ? Agent::expert() : Agent::stub();
        a.name = agent;
        return a;
    }
    a.name = model_name(agent, grid, modular);
    const auto path = ArtifactPaths{cfg.out}.model(a.name);
    // relative to the output directory so that reports do not depend on it
    const auto shown = std::filesystem::relative(path, cfg.out).generic_string();
    if (!std::filesystem::exists(path))
        throw DependencyError("no checkpoint " + shown + " (run train --agent " + agent + " --grid-size " +
                              std::to_string(grid) + (modular ? "" : " --modular false") + " first)");
    a.bundle = std::make_unique<ModelBundle>(load_checkpoint(path.string(), grid));
    if (a.bundle->agent != agent)
        throw CorruptError("checkpoint " + shown + " holds " + a.bundle->agent + ", expected " + agent);
    a.agent = Agent::from_bundle(*a.bundle, a.name);
    return a;
}

/// Seen-group and novel-group task lists; tasks depend only on the seed.
inline std::vector<EvalTask> group_tasks(const ExperimentConfig& cfg, const std::vector<Scene>& scenes,
                                         const std::string& group) {
    return make_tasks(scenes, cfg.eval_episodes, cfg.eval_config(),
                      derive_seed(cfg.seed, group == "novel" ? 0x6e6f76ULL : 0x7365656eULL));
}

inline void write_traces(const std::string& path, const std::vector<EpisodeResult>& results) {
    std::string out = "group,scene,episode,step,x,y,heading\n";
    for (std::size_t e = 0; e < results.size(); ++e)
        for (std::size_t s = 0; s < results[e].trace.size(); ++s) {
            const auto& p = results[e].trace[s];
            out += results[e].group + "," + results[e].scene_id + "," + std::to_string(e) + "," + std::to_string(s) +
                   "," + eval_detail::num(p[0]) + "," + eval_detail::num(p[1]) + "," + eval_detail::num(p[2]) + "\n";
        }
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    write_text(path, out);
}

/// Evaluates an agent on the seen and novel scene groups and writes
/// reports/eval-<name>.{csv,json}.
inline MetricsReport evaluate(const ExperimentConfig& cfg, const std::string& agent, bool traces = false) {
    cfg.validate();
    const auto a = load_agent(cfg, agent, cfg.train.grid_size, cfg.train.modular);
    EvalConfig ec = cfg.eval_config();
    ec.record_trace = traces;
    std::vector<EpisodeResult> all;
    for (const std::string group : {"seen", "novel"}) {
        if (group == "novel" && cfg.novel_scenes == 0) continue;
        auto scenes = load_scene_group(cfg, group);
        const auto results = evaluate_agent(a.agent, scenes, group_tasks(cfg, scenes, group), ec, group);
        all.insert(all.end(), results.begin(), results.end());
    }
    const ArtifactPaths paths{cfg.out};
    if (traces) write_traces(paths.trace(a.name).string(), all);
    const MetricsReport rep = build_report(all, ec.ne_failures_only);
    std::filesystem::create_directories(paths.report("x").parent_path());
    emit_report(rep, paths.report("eval-" + a.name).string());
    return rep;
}

/// One row per arm on the seen tasks. Axis "grid" compares `agent` trained at
/// each of `grids`; axis "modular" compares the modular and non-modular proxy
/// agents at the configured grid. Arms without a checkpoint are reported
/// with an error instead of failing the run.
inline MetricsReport ablate(const ExperimentConfig& cfg, const std::string& axis, const std::string& agent,
                            const std::vector<std::uint32_t>& grids) {
    cfg.validate();
    struct ArmSpec {
        std::string label, agent;
        std::uint32_t grid;
        bool modular;
    };
    std::vector<ArmSpec> specs;
    if (axis == "grid") {
        if (grids.empty()) throw ConfigError("grids: ablation over grid size needs at least one grid");
        for (auto g : grids) specs.push_back({agent + " " + std::to_string(g) + "^3", agent, g, cfg.train.modular});
    } else if (axis == "modular") {
        specs.push_back({"modular", "snn_proxy_policy", cfg.train.grid_size, true});
        specs.push_back({"non-modular", "snn_proxy_policy", cfg.train.grid_size, false});
    } else {
        throw ConfigError("axis: unknown ablation axis '" + axis + "' (expected grid or modular)");
    }
    const auto scenes = load_scene_group(cfg, "seen");
    const auto tasks = group_tasks(cfg, scenes, "seen");
    std::vector<LoadedAgent> loaded;
    std::vector<AblationArm> arms;
    for (const auto& s : specs) {
        try {
            loaded.push_back(load_agent(cfg, s.agent, s.grid, s.modular));
            arms.push_back({s.label, loaded.back().agent, ""});
        } catch (const Error& e) {
            arms.push_back({s.label, Agent::stub(), e.what()});
        }
    }
    const MetricsReport rep = run_ablation(arms, scenes, tasks, cfg.eval_config());
    const ArtifactPaths paths{cfg.out};
    std::filesystem::create_directories(paths.report("x").parent_path());
    emit_report(rep, paths.report("ablate-" + axis).string());
    return rep;
}

/// Cost and throughput of an agent on observations from the seen tasks'
/// start poses; writes reports/bench-<name>.{csv,json}.
inline CostBlock bench(const ExperimentConfig& cfg, const std::string& agent, int repetitions) {
    cfg.validate();
    const auto a = load_agent(cfg, agent, cfg.train.grid_size, cfg.train.modular);
    const auto scenes = load_scene_group(cfg, "seen");
    const auto tasks = group_tasks(cfg, scenes, "seen");
    std::vector<VoxelGrid> samples;
    for (std::size_t i = 0; i < std::min<std::size_t>(tasks.size(), 8); ++i)
        samples.push_back(observe(scenes[tasks[i].scene], tasks[i].task.start, cfg.sensor, ObservationMode::gt_depth_grid));
    MetricsReport rep;
    rep.cost = benchmark_agent(a.agent, samples, repetitions);
    const ArtifactPaths paths{cfg.out};
    std::filesystem::create_directories(paths.report("x").parent_path());
    emit_report(rep, paths.report("bench-" + a.name).string());
    return *rep.cost;
}

/// Plain-text tables of every report under reports/, in file-name order.
inline std::string render_reports(const ExperimentConfig& cfg) {
    const auto dir = ArtifactPaths{cfg.out}.report("x").parent_path();
    std::vector<std::filesystem::path> files;
    if (std::filesystem::exists(dir))
        for (const auto& e : std::filesystem::directory_iterator(dir))
            if (e.path().extension() == ".csv") files.push_back(e.path());
    if (files.empty()) throw DependencyError("no reports in " + dir.string() + " (run evaluate, ablate or bench first)");
    std::sort(files.begin(), files.end());
    std::string out;
    char buf[256];
    for (const auto& f : files) {
        const MetricsReport r = report_from_csv(read_text(f.string()));
        out += "== " + f.stem().string() + "\n";
        if (!r.rows.empty()) {
            std::snprintf(buf, sizeof buf, "%-32s %6s %6s %7s %8s\n", "scene", "SR", "SPL", "NE(m)", "episodes");
            out += buf;
        }
        for (const auto& row : r.rows) {
            if (!row.error.empty()) {
                out += row.scene + "  error: " + row.error + "\n";
                continue;
            }
            std::snprintf(buf, sizeof buf, "%-32s %6.3f %6.3f %7.3f %8zu\n", row.scene.c_str(), row.sr, row.spl, row.ne,
                          row.episodes);
            out += buf;
        }
        if (r.cost) {
            std::snprintf(buf, sizeof buf, "MACs %llu  params %llu  %.1f Hz  real-time %s\n",
                          static_cast<unsigned long long>(r.cost->macs), static_cast<unsigned long long>(r.cost->params),
                          r.cost->hz, r.cost->real_time ? "yes" : "no");
            out += buf;
        }
        out += "\n";
    }
    return out;
}

}  // namespace voxnav
