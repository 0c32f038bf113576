// voxnav command-line tool: gen-scenes, collect, train, evaluate, ablate,
// bench, report. Settings come from defaults, then --config, then VOXNAV_*
// environment variables, then flags.
#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "voxnav/voxnav.hpp"

using namespace voxnav;

namespace {

template <typename T>
std::string str(const T& v) {
    std::ostringstream s;
    s << v;
    return s.str();
}

/// Command-line values; unset ones leave the config untouched.
struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::uint32_t> grid_size;
    std::optional<double> alpha, lr;
    std::optional<int> epochs_perception, epochs_policy, epochs_joint;
    std::optional<bool> modular;
    std::optional<int> workers;
    std::optional<std::string> out;
    std::optional<int> scenes, novel_scenes, per_scene, episodes;
    std::optional<std::string> agent;

    void apply(ExperimentConfig& c) const {
        if (seed) c.seed = *seed;
        if (grid_size) c.train.grid_size = *grid_size;
        if (alpha) c.train.alpha = *alpha;
        if (lr) c.train.lr = *lr;
        if (epochs_perception) c.train.epochs_perception = *epochs_perception;
        if (epochs_policy) c.train.epochs_policy = *epochs_policy;
        if (epochs_joint) c.train.epochs_joint = *epochs_joint;
        if (modular) c.train.modular = *modular;
        if (workers) c.workers = *workers;
        if (out) c.out = *out;
        if (scenes) c.seen_scenes = *scenes;
        if (novel_scenes) c.novel_scenes = *novel_scenes;
        if (per_scene) c.collect.per_scene = *per_scene;
        if (episodes) c.eval_episodes = *episodes;
        if (agent) c.agent = *agent;
    }
};

ExperimentConfig resolve(const Overrides& o) {
    ExperimentConfig c;
    if (!o.config.empty()) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(read_text(o.config));
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError("config file " + o.config + ": " + e.what());
        }
        c = j.get<ExperimentConfig>();
    }
    o.apply(c);
    c.validate();
    return c;
}

template <typename T>
CLI::Option* opt(CLI::App& app, const std::string& name, std::optional<T>& target, const std::string& help,
                 const std::string& env, const std::string& def) {
    return app.add_option(name, target, help)->envname("VOXNAV_" + env)->default_str(def);
}

void print_epoch(const std::string& phase, const LossRow& r) {
    std::fprintf(stderr, "[train] %s epoch %d %s total %.6f\n", phase.c_str(), r.epoch, r.split.c_str(), r.total);
}

}  // namespace

int main(int argc, char** argv) {
    const ExperimentConfig d;
    Overrides o;
    CLI::App app{"voxnav: point-goal navigation from voxel occupancy grids"};
    app.require_subcommand(1);
    app.fallthrough();

    app.add_option("--config", o.config, "JSON experiment config (file path); flags override its values")
        ->envname("VOXNAV_CONFIG");
    opt(app, "--seed", o.seed, "master seed for scenes, data, training and evaluation", "SEED", str(d.seed));
    opt(app, "--grid-size", o.grid_size, "policy/proxy grid size n for an n^3 grid (voxels per side)", "GRID_SIZE",
        str(d.train.grid_size));
    opt(app, "--alpha", o.alpha, "weight of the action loss in the joint loss (unitless)", "ALPHA", str(d.train.alpha));
    opt(app, "--lr", o.lr, "Adam learning rate (unitless)", "LR", str(d.train.lr));
    opt(app, "--epochs-perception", o.epochs_perception, "perception phase length (epochs)", "EPOCHS_PERCEPTION",
        str(d.train.epochs_perception));
    opt(app, "--epochs-policy", o.epochs_policy, "policy phase length (epochs)", "EPOCHS_POLICY",
        str(d.train.epochs_policy));
    opt(app, "--epochs-joint", o.epochs_joint, "joint phase length (epochs)", "EPOCHS_JOINT", str(d.train.epochs_joint));
    opt(app, "--modular", o.modular, "true: perception, policy, then joint; false: joint only from random init",
        "MODULAR", "true");
    opt(app, "--workers", o.workers, "threads for scene generation, collection and evaluation (count)", "WORKERS",
        str(d.workers));
    opt(app, "--out", o.out, "output directory for all artifacts (path)", "OUT", d.out);

    auto* gen = app.add_subcommand("gen-scenes", "generate seen and novel procedural scenes");
    opt(*gen, "--scenes", o.scenes, "number of seen scenes (count)", "SCENES", str(d.seen_scenes));
    opt(*gen, "--novel-scenes", o.novel_scenes, "number of novel scenes (count)", "NOVEL_SCENES", str(d.novel_scenes));

    auto* col = app.add_subcommand("collect", "record expert demonstrations on the seen scenes");
    opt(*col, "--scenes", o.scenes, "number of seen scenes to use (count)", "SCENES", str(d.seen_scenes));
    opt(*col, "--per-scene", o.per_scene, "successful trajectories per scene (count)", "PER_SCENE",
        str(d.collect.per_scene));

    auto* tr = app.add_subcommand("train", "train an agent on the collected demonstrations");
    opt(*tr, "--agent", o.agent, "gt_grid_policy or snn_proxy_policy", "AGENT", d.agent);

    auto* ev = app.add_subcommand("evaluate", "closed-loop evaluation on seen and novel scenes");
    bool traces = false;
    opt(*ev, "--agent", o.agent, "expert, gt_grid_policy, snn_proxy_policy or stub", "AGENT", d.agent);
    opt(*ev, "--episodes", o.episodes, "episodes per scene group (count)", "EPISODES", str(d.eval_episodes));
    ev->add_flag("--trace", traces, "also write per-step poses (x m, y m, heading rad) as CSV")->envname("VOXNAV_TRACE");

    auto* ab = app.add_subcommand("ablate", "compare trained agents along one axis");
    std::string axis = "grid";
    std::vector<std::uint32_t> grids{64, 16, 4};
    std::string ablate_agent = "gt_grid_policy";
    ab->add_option("--axis", axis, "grid (grid sizes) or modular (modular vs non-modular)")
        ->check(CLI::IsMember({"grid", "modular"}))
        ->envname("VOXNAV_AXIS")
        ->capture_default_str();
    ab->add_option("--grids", grids, "grid sizes for the grid axis (voxels per side)")
        ->envname("VOXNAV_GRIDS")
        ->capture_default_str();
    ab->add_option("--agent", ablate_agent, "agent for the grid axis")->envname("VOXNAV_ABLATE_AGENT")->capture_default_str();
    opt(*ab, "--episodes", o.episodes, "episodes per arm (count)", "EPISODES", str(d.eval_episodes));

    auto* be = app.add_subcommand("bench", "MACs, parameters and inference rate of an agent");
    int reps = 100;
    opt(*be, "--agent", o.agent, "gt_grid_policy or snn_proxy_policy", "AGENT", d.agent);
    be->add_option("--reps", reps, "timed forward passes (count, >= 10)")->envname("VOXNAV_REPS")->capture_default_str();

    auto* rep = app.add_subcommand("report", "print every report in the output directory as a table");

    CLI11_PARSE(app, argc, argv);

    try {
        const ExperimentConfig cfg = resolve(o);
        const std::string cmd = app.get_subcommands().front()->get_name();
        if (gen->parsed()) {
            log_config(cfg, cmd);
            const auto groups = gen_scenes(cfg);
            for (const auto& [group, scenes] : groups)
                std::cout << group << ": " << scenes.size() << " scenes in "
                          << ArtifactPaths{cfg.out}.scenes(group).string() << "\n";
        } else if (col->parsed()) {
            log_config(cfg, cmd);
            const Dataset ds = collect(cfg);
            std::cout << ds.trajectories.size() << " trajectories, " << ds.frame_count() << " frames in "
                      << ArtifactPaths{cfg.out}.dataset().string() << "\n";
        } else if (tr->parsed()) {
            log_config(cfg, cmd);
            const auto name = train(cfg, print_epoch);
            std::cout << "checkpoint " << ArtifactPaths{cfg.out}.model(name).string() << "\n";
        } else if (ev->parsed()) {
            log_config(cfg, cmd, {{"trace", traces}});
            std::cout << report_to_csv(evaluate(cfg, cfg.agent, traces));
        } else if (ab->parsed()) {
            log_config(cfg, cmd, {{"axis", axis}, {"grids", grids}, {"agent", ablate_agent}});
            std::cout << report_to_csv(ablate(cfg, axis, ablate_agent, grids));
        } else if (be->parsed()) {
            log_config(cfg, cmd, {{"reps", reps}});
            const CostBlock c = bench(cfg, cfg.agent, reps);
            std::cout << "macs " << c.macs << "\nparams " << c.params << "\nhz " << c.hz << "\nreal_time "
                      << (c.real_time ? "true" : "false") << "\n";
        } else if (rep->parsed()) {
            std::cout << render_reports(cfg);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DependencyError& e) {
        std::cerr << "dependency error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
