#include "hitrans/cli.hpp"
#include "hitrans/inference.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace hitrans;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
    int status;
    std::string out, err;
};

Result run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int status = cli::run(args, out, err);
    return {status, out.str(), err.str()};
}

fs::path temp_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("hitrans_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

json read_json(const fs::path& p) { return json::parse(read_bytes(p)); }

void expect_single_line_error(const Result& r, const std::string& kind) {
    EXPECT_NE(r.status, 0);
    ASSERT_FALSE(r.err.empty());
    EXPECT_EQ(r.err.find('\n'), r.err.size() - 1) << r.err;
    const auto j = json::parse(r.err);
    EXPECT_EQ(j.at("error"), kind) << r.err;
    EXPECT_TRUE(j.at("message").is_string());
}

/// Tiny model and short schedule for S=64 synthetic data.
fs::path tiny_config(const fs::path& dir) {
    const json cfg{{"model",
                    {{"input_size", 64},
                     {"sub_patch_size", 2},
                     {"width_multiplier", "1/16"},
                     {"tr1", {{"layers", 1}, {"heads", 6}, {"hidden_dim", 12}}},
                     {"tr2", {{"layers", 1}, {"heads", 3}, {"hidden_dim", 6}}}}},
                   {"train", {{"epochs", 3}, {"warmup_epochs", 1}, {"patience", 5}}},
                   {"synthetic",
                    {{"num_slides", 3}, {"slide_width", 128}, {"slide_height", 128}, {"patch_size", 64}, {"split", {1, 1, 1}}}}};
    std::ofstream(dir / "tiny.json") << cfg.dump(2);
    return dir / "tiny.json";
}

class CliWorkflow : public ::testing::Test {
  protected:
    static void SetUpTestSuite() {
        dir_ = new fs::path(temp_dir("workflow"));
        config_ = new fs::path(tiny_config(*dir_));
        const auto r = run({"synth", "--config", config_->string(), "--seed", "3", "--out", (*dir_ / "data").string()});
        ASSERT_EQ(r.status, 0) << r.err;
    }
    static void TearDownTestSuite() {
        delete config_;
        delete dir_;
    }
    static fs::path manifest() { return *dir_ / "data" / "manifest.jsonl"; }
    static Result train(const std::string& out, std::vector<std::string> extra = {}) {
        std::vector<std::string> args{"train",      "--config", config_->string(), "--manifest", manifest().string(),
                                      "--seed",     "7",        "--threads",       "1",          "--out",
                                      (*dir_ / out).string()};
        args.insert(args.end(), extra.begin(), extra.end());
        return run(args);
    }
    static fs::path* dir_;
    static fs::path* config_;
};

fs::path* CliWorkflow::dir_ = nullptr;
fs::path* CliWorkflow::config_ = nullptr;

}  // namespace

TEST(Cli, HelpListsEveryFlag) {
    const auto top = run({"--help"});
    EXPECT_EQ(top.status, 0);
    for (const char* cmd : {"patchify", "split", "train", "evaluate", "infer", "ablate", "synth"}) {
        EXPECT_NE(top.out.find(cmd), std::string::npos) << cmd;
        const auto r = run({cmd, "--help"});
        EXPECT_EQ(r.status, 0) << cmd;
        for (const char* flag : {"--config", "--seed", "--out", "--threads"}) {
            EXPECT_NE(r.out.find(flag), std::string::npos) << cmd << " " << flag;
        }
    }
    const auto train = run({"train", "--help"}).out;
    for (const char* flag : {"--checkpoint", "--manifest", "--epochs", "--train.base_lr", "--model.tr1.layers",
                             "--width_multiplier", "--variant", "--pretrained_backbone"}) {
        EXPECT_NE(train.find(flag), std::string::npos) << flag;
    }
    const auto eval = run({"evaluate", "--help"}).out;
    for (const char* flag : {"--checkpoint", "--manifest", "--split", "--eval.threshold", "--overlays"}) {
        EXPECT_NE(eval.find(flag), std::string::npos) << flag;
    }
}

TEST(Cli, UsageErrorsAreSingleLineJson) {
    expect_single_line_error(run({}), "usage");
    expect_single_line_error(run({"bogus"}), "usage");
    expect_single_line_error(run({"train", "--no-such-flag", "1"}), "usage");
    // flags of other commands are not accepted
    expect_single_line_error(run({"synth", "--epochs", "3"}), "usage");
}

TEST(Cli, ConfigErrors) {
    const auto dir = temp_dir("config_errors");
    std::ofstream(dir / "bad.json") << R"({"train": {"epochz": 3}})";
    expect_single_line_error(run({"train", "--config", (dir / "bad.json").string(), "--out", dir.string()}), "config");
    std::ofstream(dir / "top.json") << R"({"trian": {}})";
    expect_single_line_error(run({"train", "--config", (dir / "top.json").string(), "--out", dir.string()}), "config");
    std::ofstream(dir / "seed.json") << R"({"train": {"seed": 3}})";
    expect_single_line_error(run({"train", "--config", (dir / "seed.json").string(), "--out", dir.string()}), "config");
    expect_single_line_error(run({"train", "--epochs", "many", "--out", dir.string()}), "config");
    expect_single_line_error(run({"train", "--out", dir.string()}), "config");  // no manifest
    expect_single_line_error(run({"train", "--config", (dir / "missing.json").string()}), "config");
    expect_single_line_error(run({"evaluate", "--manifest", "m.jsonl", "--out", dir.string()}), "config");
    expect_single_line_error(run({"train", "--sub_patch_size", "13", "--out", dir.string()}), "config");
}

TEST(Cli, RunConfigJsonRoundTrip) {
    cli::RunConfig c;
    c.command = "train";
    c.seed = 11;
    c.variant = VariantKind::tr1_only;
    c.train.epochs = 7;
    c.train.warmup_epochs = 2;
    c.eval.overlays = true;
    c.paths.manifest = "x/manifest.jsonl";
    c.data.split = {0.6, 0.2, 0.2};
    c.data.split_fractions = true;
    const auto back = cli::run_config_from_json(cli::to_json(c));
    EXPECT_EQ(cli::to_json(back), cli::to_json(c));
    EXPECT_EQ(back.train.seed, 11u);
    EXPECT_EQ(back.synthetic.seed, 11u);
}

TEST(Cli, OutputRootEnvironment) {
    const auto root = temp_dir("env_root");
    ASSERT_EQ(setenv(cli::kOutputRootEnv, root.c_str(), 1), 0);
    const auto r = run({"synth", "--num_slides", "1", "--synthetic.split", "[1,0,0]", "--slide_width", "64",
                        "--slide_height", "64", "--synthetic.patch_size", "64", "--out", "rel"});
    unsetenv(cli::kOutputRootEnv);
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_TRUE(fs::exists(root / "rel" / "manifest.jsonl"));
    EXPECT_TRUE(fs::exists(root / "rel" / "resolved_config.json"));
}

TEST_F(CliWorkflow, SynthWritesManifestAndSnapshot) {
    const auto m = read_manifest(manifest());
    EXPECT_EQ(m.slides.size(), 3u);
    EXPECT_EQ(m.patch_size, 64);
    const auto snap = read_json(*dir_ / "data" / "resolved_config.json");
    EXPECT_EQ(snap.at("command"), "synth");
    EXPECT_EQ(snap.at("seed"), 3);
    EXPECT_EQ(snap.at("synthetic").at("num_slides"), 3);
}

TEST_F(CliWorkflow, TrainTwiceIsIdentical) {
    const auto a = train("train_a");
    ASSERT_EQ(a.status, 0) << a.err;
    const auto b = train("train_b");
    ASSERT_EQ(b.status, 0) << b.err;
    EXPECT_EQ(read_bytes(*dir_ / "train_a" / "history.jsonl"), read_bytes(*dir_ / "train_b" / "history.jsonl"));
    EXPECT_EQ(read_bytes(*dir_ / "train_a" / "best.ckpt"), read_bytes(*dir_ / "train_b" / "best.ckpt"));
    auto sa = json::parse(a.out), sb = json::parse(b.out);
    sa.erase("checkpoint");
    sb.erase("checkpoint");
    EXPECT_EQ(sa, sb);
    std::ifstream hist(*dir_ / "train_a" / "history.jsonl");
    std::string line;
    int n = 0;
    while (std::getline(hist, line)) {
        const auto rec = json::parse(line);
        for (const char* key : {"epoch", "lr", "wd", "train_loss", "val_jaccard", "active_components"}) {
            EXPECT_TRUE(rec.contains(key)) << key;
        }
        ++n;
    }
    EXPECT_EQ(n, 3);
}

TEST_F(CliWorkflow, ResolvedConfigReproducesRun) {
    ASSERT_EQ(train("train_snap").status, 0);
    const auto snap = *dir_ / "train_snap" / "resolved_config.json";
    EXPECT_EQ(read_json(snap).at("train").at("epochs"), 3);
    const auto r = run({"train", "--config", snap.string(), "--out", (*dir_ / "train_rerun").string()});
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_EQ(read_bytes(*dir_ / "train_snap" / "history.jsonl"), read_bytes(*dir_ / "train_rerun" / "history.jsonl"));
}

TEST_F(CliWorkflow, OverridesBeatConfigFile) {
    const auto r = train("train_override", {"--epochs", "2", "--variant", "no_addon"});
    ASSERT_EQ(r.status, 0) << r.err;
    const auto snap = read_json(*dir_ / "train_override" / "resolved_config.json");
    EXPECT_EQ(snap.at("train").at("epochs"), 2);
    EXPECT_EQ(snap.at("variant"), "no_addon");
    EXPECT_EQ(load_model<float>(*dir_ / "train_override" / "best.ckpt").variant(), VariantKind::no_addon);
}

TEST_F(CliWorkflow, ResumeFromLastCheckpoint) {
    ASSERT_EQ(train("resume").status, 0);
    const auto dir = *dir_ / "resume";
    const auto history = read_bytes(dir / "history.jsonl");
    const auto best = read_bytes(dir / "best.ckpt");
    // Resuming a finished run keeps its history and best checkpoint.
    const auto r = train("resume", {"--checkpoint", (dir / "last.ckpt").string()});
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_EQ(read_bytes(dir / "history.jsonl"), history);
    EXPECT_EQ(read_bytes(dir / "best.ckpt"), best);
    // Continuing with a longer schedule appends epochs.
    const auto more = train("resume", {"--checkpoint", (dir / "last.ckpt").string(), "--epochs", "4"});
    ASSERT_EQ(more.status, 0) << more.err;
    const auto longer = read_bytes(dir / "history.jsonl");
    EXPECT_EQ(longer.substr(0, history.size()), history);
    EXPECT_EQ(std::count(longer.begin(), longer.end(), '\n'), 4);
    expect_single_line_error(train("resume_bad", {"--checkpoint", (dir / "last.ckpt").string(), "--variant", "no_addon"}),
                             "config");
}

TEST_F(CliWorkflow, EvaluateWritesReport) {
    ASSERT_EQ(train("train_eval").status, 0);
    const auto ckpt = *dir_ / "train_eval" / "best.ckpt";
    const auto out = *dir_ / "eval";
    const auto r = run({"evaluate", "--checkpoint", ckpt.string(), "--manifest", manifest().string(), "--split", "test",
                        "--out", out.string(), "--overlays", "true"});
    ASSERT_EQ(r.status, 0) << r.err;
    const auto report = read_json(out / "eval.json").get<EvalReport>();
    const auto m = read_manifest(manifest());
    ASSERT_EQ(report.per_slide.size(), 1u);
    EXPECT_EQ(report.per_slide.begin()->first, m.split.test.front());
    EXPECT_EQ(report.average, mean_score(report.per_slide));
    EXPECT_EQ(json::parse(r.out), read_json(out / "eval.json"));
    EXPECT_TRUE(fs::exists(out / "overlays" / (m.split.test.front() + "_overlay.png")));

    const auto direct = evaluate_cohort(load_model<float>(ckpt), m, "test");
    EXPECT_EQ(direct.per_slide, report.per_slide);

    const auto again = run({"evaluate", "--checkpoint", ckpt.string(), "--manifest", manifest().string(), "--split",
                            "test", "--out", (*dir_ / "eval2").string(), "--threads", "2"});
    ASSERT_EQ(again.status, 0);
    EXPECT_EQ(read_json(*dir_ / "eval2" / "eval.json").at("per_slide"), read_json(out / "eval.json").at("per_slide"));
}

TEST_F(CliWorkflow, InferWritesSlideSizedMasks) {
    ASSERT_EQ(train("train_infer").status, 0);
    const auto ckpt = *dir_ / "train_infer" / "best.ckpt";
    const auto odd = *dir_ / "odd";
    fs::create_directories(odd);
    RgbImage slide(100, 70, {200, 120, 165});
    write_rgb_png(odd / "odd.png", slide);
    const auto r = run({"infer", "--checkpoint", ckpt.string(), "--input", odd.string(), "--out",
                        (*dir_ / "inferred").string()});
    ASSERT_EQ(r.status, 0) << r.err;
    const auto mask = read_mask_png(*dir_ / "inferred" / "odd_pred.png");
    EXPECT_EQ(mask.rows(), 70);
    EXPECT_EQ(mask.cols(), 100);
    const auto by_split = run({"infer", "--checkpoint", ckpt.string(), "--manifest", manifest().string(), "--split",
                               "val", "--out", (*dir_ / "inferred_val").string()});
    ASSERT_EQ(by_split.status, 0) << by_split.err;
    const auto m = read_manifest(manifest());
    EXPECT_TRUE(fs::exists(*dir_ / "inferred_val" / (m.split.val.front() + "_pred.png")));
    expect_single_line_error(run({"infer", "--checkpoint", (*dir_ / "nope.ckpt").string(), "--input", odd.string(),
                                  "--out", (*dir_ / "x").string()}),
                             "checkpoint");
}

TEST_F(CliWorkflow, PatchifyThenSplit) {
    const auto slides = *dir_ / "raw";
    fs::create_directories(slides);
    SyntheticSpec spec;
    spec.num_slides = 5;
    spec.slide_width = 128;
    spec.slide_height = 128;
    spec.patch_size = 64;
    spec.split = {3, 1, 1};
    for (const auto& s : synthesize_slides(spec)) {
        write_rgb_png(slides / (s.id + ".png"), s.image);
        write_mask_png(slides / (s.id + "_mask.png"), s.annotation);
    }
    const auto p = run({"patchify", "--slides", slides.string(), "--data.patch_size", "64", "--out",
                        (*dir_ / "patched").string()});
    ASSERT_EQ(p.status, 0) << p.err;
    const auto patched = read_manifest(*dir_ / "patched" / "manifest.jsonl");
    EXPECT_EQ(patched.slides.size(), 5u);
    EXPECT_TRUE(patched.split.empty());
    EXPECT_GE(patched.records.size(), 15u);

    const auto s = run({"split", "--manifest", (*dir_ / "patched" / "manifest.jsonl").string(), "--data.split",
                        "[3,1,1]", "--seed", "2", "--out", (*dir_ / "splitted").string()});
    ASSERT_EQ(s.status, 0) << s.err;
    const auto m = read_manifest(*dir_ / "splitted" / "manifest.jsonl");
    EXPECT_EQ(m.split.train.size(), 3u);
    EXPECT_EQ(m.split.val.size(), 1u);
    EXPECT_EQ(m.split.test.size(), 1u);
    EXPECT_EQ(m.records.size(), patched.records.size());
    EXPECT_FALSE(load_samples<float>(m, "train").empty());  // rebased paths still resolve

    expect_single_line_error(run({"split", "--manifest", (*dir_ / "patched" / "manifest.jsonl").string(),
                                  "--data.split", "[4,1,1]", "--out", (*dir_ / "bad_split").string()}),
                             "data");
    expect_single_line_error(run({"patchify", "--slides", (*dir_ / "nowhere").string(), "--out",
                                  (*dir_ / "bad_patch").string()}),
                             "data");
}

TEST_F(CliWorkflow, AblateWritesThreeReports) {
    const auto out = *dir_ / "ablate";
    const auto r = run({"ablate", "--config", config_->string(), "--epochs", "2", "--out", out.string()});
    ASSERT_EQ(r.status, 0) << r.err;
    const auto summary = json::parse(r.out);
    for (const char* v : {"no_addon", "tr1_only", "hitrans"}) {
        const auto report = read_json(out / (std::string("eval_") + v + ".json"));
        EXPECT_EQ(report.at("average"), summary.at(v));
        EXPECT_TRUE(fs::exists(out / v / "best.ckpt"));
        EXPECT_EQ(read_json(out / v / "resolved_config.json").at("variant"), v);
    }
    EXPECT_TRUE(fs::exists(out / "resolved_config.json"));
    EXPECT_TRUE(fs::exists(out / "data" / "manifest.jsonl"));
}
