#include <gtest/gtest.h>

#include <sstream>

#include "cli.hpp"
#include "cloak/config.hpp"
#include "cloak/io.hpp"
#include "test_support.hpp"

namespace cloak {
namespace {

struct Outcome {
    int code;
    std::string out;
    std::string err;
};

Outcome run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run_command(args, out, err);
    return {code, out.str(), err.str()};
}

// Small enough that the whole pipeline runs in seconds.
const char* kTinyConfig = R"({
  "seed": 3,
  "corpus": {"image_size": 8, "identities": 4, "per_id": 4, "embedder_per_id": 6},
  "model": {"base_channels": 4, "mid_channels": 8, "embed_dim": 8, "time_dim": 8, "groups": 2},
  "base": {"steps": 30},
  "dreambooth": {"steps": 6, "batch": 2, "class_image_count": 2, "class_sample_steps": 10},
  "attack": {"t_out": 2, "t_in": 2, "apv_rounds": 3},
  "eval": {"samples": 4, "ddim_steps": 10, "heatmap_resolution": 8,
           "embedder": {"steps": 200, "min_accuracy": 0.0}}
})";

TEST(Cli, UsageErrorsExitWithTwo) {
    EXPECT_EQ(run({}).code, cli::kExitUsage);
    EXPECT_EQ(run({"frobnicate"}).code, cli::kExitUsage);
    EXPECT_EQ(run({"attack", "--no-such-flag"}).code, cli::kExitUsage);
    const auto dir = testing::temp_dir("cli_bad");
    write_text(dir / "bad.json", R"({"attack": {"B": 30}})");
    const Outcome o = run({"attack", "--config", (dir / "bad.json").string(), "--run", (dir / "r").string()});
    EXPECT_EQ(o.code, cli::kExitUsage);
    EXPECT_NE(o.err.find("B"), std::string::npos);
    EXPECT_EQ(run({"attack", "--config", (dir / "missing.json").string()}).code, cli::kExitUsage);
    std::filesystem::remove_all(dir);
}

TEST(Cli, HelpListsSubcommands) {
    const Outcome o = run({"--help"});
    EXPECT_EQ(o.code, cli::kExitOk);
    for (const char* s : {"corpus", "train-base", "dreambooth", "lora", "ti", "attack", "evaluate", "heatmap", "report"})
        EXPECT_NE(o.out.find(s), std::string::npos) << s;
}

TEST(Cli, CorpusGenerateWritesImagesAndManifest) {
    const auto dir = testing::temp_dir("cli_corpus");
    const Outcome o = run({"corpus", "generate", "--identities", "3", "--per-id", "2", "--image-size", "8", "--out",
                           dir.string()});
    ASSERT_EQ(o.code, cli::kExitOk) << o.err;
    EXPECT_TRUE(fs::exists(dir / "id002_001.png"));
    const std::string manifest = read_text(dir / "manifest.csv");
    EXPECT_EQ(std::count(manifest.begin(), manifest.end(), '\n'), 7);
    EXPECT_EQ(read_png(dir / "id000_000.png").shape(), (Shape{3, 8, 8}));
    EXPECT_EQ(run({"corpus", "generate", "--image-size", "7", "--out", dir.string()}).code, cli::kExitUsage);
    std::filesystem::remove_all(dir);
}

TEST(Cli, MissingPrerequisiteIsARuntimeError) {
    const auto dir = testing::temp_dir("cli_prereq");
    write_text(dir / "tiny.json", kTinyConfig);
    const Outcome o = run({"evaluate", "--config", (dir / "tiny.json").string(), "--run", (dir / "r").string(),
                           "--log-level", "off"});
    EXPECT_EQ(o.code, cli::kExitRuntime);
    EXPECT_NE(o.err.find("evaluate"), std::string::npos);
    std::filesystem::remove_all(dir);
}

TEST(Cli, TinyPipelineEndToEnd) {
    const auto dir = testing::temp_dir("cli_pipeline");
    write_text(dir / "tiny.json", kTinyConfig);
    const cli::RunLayout layout{dir / "run"};
    auto step = [&](std::vector<std::string> args) {
        args.insert(args.end(), {"--config", (dir / "tiny.json").string(), "--run", layout.root.string(),
                                 "--log-level", "off"});
        const Outcome o = run(args);
        EXPECT_EQ(o.code, cli::kExitOk) << args[0] << ": " << o.err;
        return o;
    };
    step({"train-base"});
    EXPECT_TRUE(fs::exists(layout.checkpoints() / "base.bin"));
    EXPECT_TRUE(fs::exists(layout.config()));
    step({"attack", "--variant", "dadiff"});
    EXPECT_TRUE(fs::exists(layout.logs() / "attack_dadiff.csv"));
    EXPECT_TRUE(fs::exists(layout.images() / "protected_dadiff_000.png"));
    step({"attack", "--variant", "cond_only_single_step"});
    step({"dreambooth", "--data", "clean"});
    step({"dreambooth", "--data", "dadiff"});
    step({"evaluate", "--mechanism", "dreambooth", "--data", "clean"});
    step({"evaluate", "--mechanism", "dreambooth", "--data", "dadiff"});
    step({"heatmap", "--model", "dreambooth_dadiff", "--data", "dadiff"});
    step({"report"});

    const std::string report = read_text(layout.report());
    EXPECT_EQ(report.rfind("mechanism,data,prompt,ism_proxy,fdfr_proxy,feature_fid", 0), 0u);
    // Two prompts plus the mean row for each evaluated model.
    EXPECT_EQ(std::count(report.begin(), report.end(), '\n'), 1 + 2 * 3);
    EXPECT_TRUE(fs::exists(layout.figures() / "dynamics.png"));
    EXPECT_TRUE(fs::exists(layout.logs() / "dynamics_summary.json"));

    // Every PNG carries the config hash of the run.
    const std::string hash = load_config(dir / "tiny.json").hash();
    EXPECT_EQ(read_png_text(layout.images() / "protected_dadiff_000.png").at("config_hash"), hash);
    EXPECT_EQ(read_png_text(layout.figures() / "dynamics.png").at("config_hash"), hash);

    // Re-evaluating replaces rows instead of appending.
    step({"evaluate", "--mechanism", "dreambooth", "--data", "clean"});
    const std::string again = read_text(layout.report());
    EXPECT_EQ(std::count(again.begin(), again.end(), '\n'), 1 + 2 * 3);
    std::filesystem::remove_all(dir);
}

TEST(Cli, RepeatedRunsAreByteIdentical) {
    const auto dir = testing::temp_dir("cli_repeat");
    write_text(dir / "tiny.json", kTinyConfig);
    for (const char* name : {"a", "b"})
        for (std::vector<std::string> args : {std::vector<std::string>{"train-base"},
                                              std::vector<std::string>{"attack", "--variant", "dadiff"}}) {
            args.insert(args.end(), {"--config", (dir / "tiny.json").string(), "--run", (dir / name).string(),
                                     "--log-level", "off"});
            ASSERT_EQ(run(args).code, cli::kExitOk);
        }
    for (const char* f : {"logs/attack_dadiff.csv", "images/protected_dadiff_000.png", "images/protected_dadiff.bin",
                          "checkpoints/base.bin"})
        EXPECT_EQ(read_text(dir / "a" / f), read_text(dir / "b" / f)) << f;
    std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace cloak
