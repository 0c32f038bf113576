#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <sys/wait.h>

#include "voxnav/experiment.hpp"

using namespace voxnav;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code = -1;
    std::string output;
};

RunResult run(const std::string& args, const std::string& env = "") {
    const std::string cmd = env + " " + VOXNAV_CLI_PATH + " " + args + " 2>&1";
    RunResult r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[4096];
    std::size_t n;
    while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.output.append(buf, n);
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

fs::path fresh_dir(const std::string& name) {
    auto d = fs::temp_directory_path() / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

// Small, fast experiment: 16³ sensor, tiny camera, short episodes.
std::string tiny_config(const fs::path& dir) {
    const std::string path = (dir / "tiny.json").string();
    write_text(path, R"({"scene": {"size_x": 5.0, "size_y": 5.0},
 "seen_scenes": 2, "novel_scenes": 1,
 "sensor": {"grid": {"n": [16, 16, 16], "voxel": 0.4}, "camera_width": 16, "camera_height": 9},
 "collect": {"per_scene": 3, "record_every": 6, "max_geodesic": 3.0},
 "train": {"grid_size": 4, "epochs_perception": 1, "epochs_policy": 1, "epochs_joint": 1, "proxy_channels": [2, 4]},
 "eval": {"max_steps": 300, "min_geodesic": 1.0, "max_geodesic": 3.0},
 "eval_episodes": 2})");
    return path;
}

std::string files_digest(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
    std::sort(files.begin(), files.end());
    std::string out;
    for (const auto& f : files) {
        const auto b = read_file((dir / f).string());
        out += f.string() + " " + std::to_string(fnv1a(b)) + "\n";
    }
    return out;
}

}  // namespace

TEST(ExperimentConfig, JsonRoundTripAndDefaults) {
    ExperimentConfig c;
    EXPECT_EQ(c.train.lr, 1e-3);
    EXPECT_EQ(c.train.alpha, 0.1);
    EXPECT_EQ(c.collect.per_scene, 100);
    EXPECT_EQ(c.train.grid_size, 64u);
    EXPECT_NO_THROW(c.validate());
    c.seed = 9;
    c.novel_layouts = {Layout::maze};
    c.train.alpha = 0.3;
    const nlohmann::json j = c;
    EXPECT_EQ(nlohmann::json(j.get<ExperimentConfig>()).dump(), j.dump());
    EXPECT_EQ(nlohmann::json::parse("{}").get<ExperimentConfig>().eval_episodes, 50);
}

TEST(ExperimentConfig, FieldLevelErrors) {
    auto message = [](const std::string& text) {
        try {
            nlohmann::json::parse(text).get<ExperimentConfig>().validate();
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string("no error");
    };
    EXPECT_NE(message(R"({"train": {"alhpa": 0.1}})").find("train.alhpa"), std::string::npos);
    EXPECT_NE(message(R"({"train": {"alpha": "big"}})").find("train.alpha"), std::string::npos);
    EXPECT_NE(message(R"({"train": {"alpha": -1}})").find("train: alpha"), std::string::npos);
    EXPECT_NE(message(R"({"workers": 1.5})").find("workers"), std::string::npos);
    EXPECT_NE(message(R"({"seen_layouts": ["caves"]})").find("caves"), std::string::npos);
    EXPECT_NE(message(R"({"seen_seed_start": 0, "novel_seed_start": 3})").find("overlap"), std::string::npos);
    EXPECT_NE(message(R"({"train": {"grid_size": 24}})").find("train.grid_size"), std::string::npos);
    EXPECT_EQ(message(R"({"train": {"grid_size": 16}})"), "no error");
}

TEST(ExperimentConfig, SceneGroupsUseDisjointSeeds) {
    ExperimentConfig c;
    std::set<std::uint64_t> seen, novel;
    for (int i = 0; i < c.seen_scenes; ++i) seen.insert(scene_seed(c, "seen", i));
    for (int i = 0; i < c.novel_scenes; ++i) novel.insert(scene_seed(c, "novel", i));
    for (auto s : novel) EXPECT_EQ(seen.count(s), 0u);
}

TEST(Cli, HelpListsEveryFlagWithDefaults) {
    const auto r = run("--help");
    EXPECT_EQ(r.code, 0);
    for (const char* flag : {"--config", "--seed", "--grid-size", "--alpha", "--lr", "--epochs-perception",
                             "--epochs-policy", "--epochs-joint", "--modular", "--workers", "--out"})
        EXPECT_NE(r.output.find(flag), std::string::npos) << flag;
    for (const char* def : {"[0.1]", "[0.001]", "[150]", "[50]", "[300]", "[64]", "[true]"})
        EXPECT_NE(r.output.find(def), std::string::npos) << def;
    for (const char* env : {"VOXNAV_SEED", "VOXNAV_ALPHA", "VOXNAV_OUT"})
        EXPECT_NE(r.output.find(env), std::string::npos) << env;
    for (const char* cmd : {"gen-scenes", "collect", "train", "evaluate", "ablate", "bench", "report"})
        EXPECT_NE(r.output.find(cmd), std::string::npos) << cmd;
    EXPECT_NE(run("collect --help").output.find("--per-scene"), std::string::npos);
}

TEST(Cli, GenScenesIsDeterministic) {
    const auto dir = fresh_dir("voxnav_cli_gen");
    const auto cfg = tiny_config(dir);
    ASSERT_EQ(run("--config " + cfg + " --seed 7 --out " + (dir / "a").string() + " gen-scenes").code, 0);
    ASSERT_EQ(run("--config " + cfg + " --seed 7 --out " + (dir / "b").string() + " gen-scenes").code, 0);
    EXPECT_EQ(files_digest(dir / "a" / "scenes"), files_digest(dir / "b" / "scenes"));
    ASSERT_EQ(run("--config " + cfg + " --seed 8 --out " + (dir / "c").string() + " gen-scenes").code, 0);
    EXPECT_NE(files_digest(dir / "a" / "scenes"), files_digest(dir / "c" / "scenes"));
}

TEST(Cli, CollectFiveScenesOfOneHundred) {
    const auto dir = fresh_dir("voxnav_cli_collect");
    const auto cfg = tiny_config(dir);
    const std::string base = "--config " + cfg + " --out " + (dir / "o").string() + " --workers 2 ";
    ASSERT_EQ(run(base + "gen-scenes --scenes 5").code, 0);
    const auto r = run(base + "collect --scenes 5 --per-scene 100");
    ASSERT_EQ(r.code, 0) << r.output;
    const auto manifest = nlohmann::json::parse(read_text((dir / "o" / "dataset" / "manifest.json").string()));
    EXPECT_EQ(manifest["trajectories"].size(), 500u);
    EXPECT_EQ(manifest["scenes"].size(), 5u);
}

TEST(Cli, DependencyAndConfigErrorsExitNonZero) {
    const auto dir = fresh_dir("voxnav_cli_errors");
    const auto cfg = tiny_config(dir);
    const std::string base = "--config " + cfg + " --out " + (dir / "o").string() + " ";
    auto r = run(base + "evaluate");
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.output.find("dependency error"), std::string::npos) << r.output;
    r = run(base + "collect");
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.output.find("gen-scenes"), std::string::npos) << r.output;
    EXPECT_EQ(run(base + "train").code, 3);
    EXPECT_EQ(run(base + "report").code, 3);

    r = run(base + "--alpha -1 train");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("alpha"), std::string::npos) << r.output;
    write_text((dir / "bad.json").string(), R"({"train": {"epochs_joint": "many"}})");
    r = run("--config " + (dir / "bad.json").string() + " gen-scenes");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("train.epochs_joint"), std::string::npos) << r.output;
    EXPECT_EQ(run("--config /nonexistent.json gen-scenes").code, 3);
    EXPECT_NE(run(base + "ablate --axis colour").code, 0);
}

TEST(Cli, EnvironmentAndFlagOverrides) {
    const auto dir = fresh_dir("voxnav_cli_env");
    const auto cfg = tiny_config(dir);
    const auto out = (dir / "o").string();
    auto logged = [&](const std::string& cmd) {
        return nlohmann::json::parse(read_text(out + "/logs/" + cmd + ".json"))["config"];
    };
    ASSERT_EQ(run("--config " + cfg + " --out " + out + " gen-scenes", "VOXNAV_SEED=11 VOXNAV_ALPHA=0.5").code, 0);
    EXPECT_EQ(logged("gen-scenes")["seed"], 11);
    EXPECT_EQ(logged("gen-scenes")["train"]["alpha"], 0.5);
    ASSERT_EQ(run("--config " + cfg + " --out " + out + " --seed 12 gen-scenes", "VOXNAV_SEED=11").code, 0);
    EXPECT_EQ(logged("gen-scenes")["seed"], 12);
    EXPECT_EQ(logged("gen-scenes")["seen_scenes"], 2);  // from the config file
    ASSERT_EQ(run("gen-scenes", "VOXNAV_CONFIG=" + cfg + " VOXNAV_OUT=" + out + " VOXNAV_SCENES=3").code, 0);
    EXPECT_EQ(logged("gen-scenes")["seen_scenes"], 3);
}

TEST(Cli, PipelineProducesEveryArtifact) {
    const auto dir = fresh_dir("voxnav_cli_pipeline");
    const auto cfg = tiny_config(dir);
    const auto out = dir / "o";
    const std::string base = "--config " + cfg + " --out " + out.string() + " ";
    for (const std::string cmd : {"gen-scenes", "collect", "train", "train --modular=false",
                                  "train --agent gt_grid_policy", "evaluate --trace", "evaluate --agent expert",
                                  "ablate --axis modular", "ablate --grids 16 4", "bench --reps 10", "report"}) {
        const auto r = run(base + cmd);
        ASSERT_EQ(r.code, 0) << cmd << "\n" << r.output;
    }
    EXPECT_TRUE(fs::exists(out / "models" / "snn_proxy_policy-g4.ckpt"));
    EXPECT_TRUE(fs::exists(out / "models" / "snn_proxy_policy-g4-nonmodular.ckpt"));
    EXPECT_TRUE(fs::exists(out / "models" / "snn_proxy_policy-g4.perception.csv"));
    EXPECT_FALSE(fs::exists(out / "models" / "snn_proxy_policy-g4-nonmodular.perception.csv"));
    EXPECT_TRUE(fs::exists(out / "models" / "snn_proxy_policy-g4-nonmodular.joint.csv"));
    EXPECT_TRUE(fs::exists(out / "traces" / "snn_proxy_policy-g4.csv"));

    const auto eval = report_from_csv(read_text((out / "reports" / "eval-snn_proxy_policy-g4.csv").string()));
    EXPECT_NE(find_row(eval, "seen-average"), nullptr);
    EXPECT_NE(find_row(eval, "novel-average"), nullptr);
    EXPECT_NE(find_row(eval, "all-average"), nullptr);
    EXPECT_EQ(find_row(eval, "all-average")->episodes, 4u);
    EXPECT_EQ(report_from_csv(read_text((out / "reports" / "eval-expert.csv").string())).rows.back().sr, 1.0);

    const auto grid = report_from_csv(read_text((out / "reports" / "ablate-grid.csv").string()));
    ASSERT_EQ(grid.rows.size(), 2u);
    EXPECT_FALSE(grid.rows[0].error.empty());  // no 16³ checkpoint was trained
    EXPECT_TRUE(grid.rows[1].error.empty());
    const auto bench = report_from_csv(read_text((out / "reports" / "bench-snn_proxy_policy-g4.csv").string()));
    ASSERT_TRUE(bench.cost.has_value());
    EXPECT_GT(bench.cost->macs, 0u);

    const auto log = nlohmann::json::parse(read_text((out / "logs" / "train.json").string()));
    EXPECT_EQ(log["command"], "train");
    EXPECT_EQ(log["config"]["train"]["grid_size"], 4);
}
