#include "hitrans/cli.hpp"

#include "hitrans/checkpoint.hpp"
#include "hitrans/inference.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <ostream>
#include <set>

namespace hitrans::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
    }
}

template <typename T>
void read_if(const json& j, const char* key, T& out, const std::string& where) {
    if (auto it = j.find(key); it != j.end()) {
        try {
            it->get_to(out);
        } catch (const json::exception& e) {
            throw ConfigError("bad value for '" + where + "." + key + "': " + e.what());
        }
    }
}

json data_json(const DataConfig& d) {
    return json{{"patch_size", d.patch_size},
                {"tissue_threshold", d.tissue_threshold},
                {"split", d.split},
                {"split_fractions", d.split_fractions},
                {"normalization", d.normalization}};
}

DataConfig data_from_json(const json& j) {
    reject_unknown(j, {"patch_size", "tissue_threshold", "split", "split_fractions", "normalization"}, "data");
    DataConfig d;
    read_if(j, "patch_size", d.patch_size, "data");
    read_if(j, "tissue_threshold", d.tissue_threshold, "data");
    read_if(j, "split", d.split, "data");
    read_if(j, "split_fractions", d.split_fractions, "data");
    if (j.contains("normalization")) {
        try {
            j.at("normalization").get_to(d.normalization);
        } catch (const DataError& e) {
            throw ConfigError(std::string("data.") + e.what());
        }
    }
    if (d.patch_size < 1) throw ConfigError("data.patch_size must be positive");
    if (!(d.tissue_threshold >= 0.0 && d.tissue_threshold <= 1.0)) {
        throw ConfigError("data.tissue_threshold must be in [0, 1]");
    }
    return d;
}

json eval_json(const EvalConfig& e) {
    return json{{"split", e.split}, {"threshold", e.threshold}, {"overlays", e.overlays}};
}

EvalConfig eval_from_json(const json& j) {
    reject_unknown(j, {"split", "threshold", "overlays"}, "eval");
    EvalConfig e;
    read_if(j, "split", e.split, "eval");
    read_if(j, "threshold", e.threshold, "eval");
    read_if(j, "overlays", e.overlays, "eval");
    if (e.split != "train" && e.split != "val" && e.split != "test") {
        throw ConfigError("eval.split must be train, val or test");
    }
    if (!(e.threshold > 0.0 && e.threshold < 1.0)) throw ConfigError("eval.threshold must be in (0, 1)");
    return e;
}

json paths_json(const PathConfig& p) {
    return json{{"manifest", p.manifest},
                {"checkpoint", p.checkpoint},
                {"slides", p.slides},
                {"input", p.input},
                {"pretrained_backbone", p.pretrained_backbone}};
}

PathConfig paths_from_json(const json& j) {
    reject_unknown(j, {"manifest", "checkpoint", "slides", "input", "pretrained_backbone"}, "paths");
    PathConfig p;
    read_if(j, "manifest", p.manifest, "paths");
    read_if(j, "checkpoint", p.checkpoint, "paths");
    read_if(j, "slides", p.slides, "paths");
    read_if(j, "input", p.input, "paths");
    read_if(j, "pretrained_backbone", p.pretrained_backbone, "paths");
    return p;
}

}  // namespace

json to_json(const RunConfig& c) {
    json train = c.train;
    train.erase("seed");
    json synthetic = c.synthetic;
    synthetic.erase("seed");
    return json{{"command", c.command},
                {"seed", c.seed},
                {"threads", c.threads},
                {"variant", std::string(variant_name(c.variant))},
                {"model", c.model},
                {"train", train},
                {"data", data_json(c.data)},
                {"eval", eval_json(c.eval)},
                {"synthetic", synthetic},
                {"paths", paths_json(c.paths)}};
}

RunConfig run_config_from_json(const json& j) {
    reject_unknown(j, {"command", "seed", "threads", "variant", "model", "train", "data", "eval", "synthetic", "paths"},
                   "run config");
    RunConfig c;
    read_if(j, "command", c.command, "run config");
    read_if(j, "seed", c.seed, "run config");
    read_if(j, "threads", c.threads, "run config");
    if (c.threads < 1) throw ConfigError("threads must be >= 1");
    if (j.contains("variant")) {
        try {
            c.variant = parse_variant(j.at("variant").get<std::string>());
        } catch (const std::exception& e) {
            throw ConfigError(std::string("variant: ") + e.what());
        }
    }
    try {
        if (j.contains("model")) j.at("model").get_to(c.model);
        c.model.validate();
        if (j.contains("train")) {
            if (j.at("train").contains("seed")) throw ConfigError("train.seed is not configurable; set the top-level seed");
            j.at("train").get_to(c.train);
        }
        if (j.contains("synthetic")) {
            if (j.at("synthetic").contains("seed")) {
                throw ConfigError("synthetic.seed is not configurable; set the top-level seed");
            }
            j.at("synthetic").get_to(c.synthetic);
        }
    } catch (const DataError& e) {
        throw ConfigError(e.what());
    } catch (const json::exception& e) {
        throw ConfigError(e.what());
    }
    c.train.seed = c.seed;
    c.train.validate();
    c.synthetic.seed = c.seed;
    try {
        c.synthetic.validate();
    } catch (const DataError& e) {
        throw ConfigError(e.what());
    }
    if (j.contains("data")) c.data = data_from_json(j.at("data"));
    if (j.contains("eval")) c.eval = eval_from_json(j.at("eval"));
    if (j.contains("paths")) c.paths = paths_from_json(j.at("paths"));
    return c;
}

namespace {

class UsageError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

void leaves(const json& j, const std::string& prefix, std::vector<std::string>& out) {
    if (j.is_object() && !j.empty()) {
        for (const auto& [k, v] : j.items()) leaves(v, prefix + "/" + k, out);
    } else {
        out.push_back(prefix);
    }
}

const std::set<std::string> kCoreFlags{"config", "seed", "threads", "out", "checkpoint", "manifest", "split", "help"};

/// JSON pointers of every leaf in the default config.
const std::vector<std::string>& all_leaves() {
    static const std::vector<std::string> paths = [] {
        std::vector<std::string> out;
        leaves(to_json(RunConfig{}), "", out);
        return out;
    }();
    return paths;
}

std::string last_component(const std::string& ptr) { return ptr.substr(ptr.rfind('/') + 1); }

bool has_prefix(const std::string& ptr, const std::string& prefix) {
    return ptr == prefix || ptr.rfind(prefix + "/", 0) == 0;
}

struct CommandSpec {
    const char* name;
    const char* description;
    std::vector<std::string> sections;
    bool checkpoint, manifest, split;
};

const std::vector<CommandSpec>& commands() {
    static const std::vector<CommandSpec> specs{
        {"synth", "Generate a synthetic slide cohort with patches and manifest.jsonl", {"/synthetic"}, false, false,
         false},
        {"patchify",
         "Cut {id}.png / {id}_mask.png slides into tissue-filtered patches and write manifest.jsonl",
         {"/data/patch_size", "/data/tissue_threshold", "/data/normalization", "/paths/slides"},
         false,
         false,
         false},
        {"split", "Assign the slides of a manifest to train / val / test", {"/data/split", "/data/split_fractions"},
         false, true, false},
        {"train",
         "Train a model on a manifest; writes history.jsonl, best.ckpt and last.ckpt (--checkpoint resumes)",
         {"/variant", "/model", "/train", "/paths/pretrained_backbone"},
         true,
         true,
         false},
        {"evaluate", "Slide-level Jaccard of a checkpoint on one split; writes eval.json",
         {"/eval/threshold", "/eval/overlays"}, true, true, true},
        {"infer", "Predict slide masks with a checkpoint; writes {id}_pred.png", {"/eval/threshold", "/paths/input"},
         true, true, true},
        {"ablate", "Train and evaluate no_addon, tr1_only and hitrans on one dataset (synthetic unless --manifest)",
         {"/model", "/train", "/synthetic", "/eval/threshold", "/eval/overlays", "/paths/pretrained_backbone"},
         false,
         true,
         true},
    };
    return specs;
}

std::string flag_name(const std::string& ptr) {
    std::string s = ptr.substr(1);
    std::replace(s.begin(), s.end(), '/', '.');
    return s;
}

/// Bare aliases exist for leaf names that are unique across the whole config.
bool has_alias(const std::string& ptr) {
    const auto name = last_component(ptr);
    if (kCoreFlags.count(name)) return false;
    int n = 0;
    for (const auto& p : all_leaves()) n += last_component(p) == name;
    return n == 1;
}

json parse_override(const std::string& ptr, const std::string& text) {
    const json def = to_json(RunConfig{}).at(json::json_pointer(ptr));
    if (def.is_string()) return text;
    try {
        return json::parse(text);
    } catch (const json::exception&) {
        throw ConfigError("--" + flag_name(ptr) + ": cannot parse '" + text + "' as JSON");
    }
}

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
}

void write_json_file(const fs::path& path, const json& j) {
    fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw DataError("cannot write " + path.string());
        out << j.dump(2) << '\n';
        if (!out.flush()) throw DataError("failed writing " + path.string());
    }
    fs::rename(tmp, path);
}

fs::path resolve_out(const std::string& out) {
    fs::path p(out);
    if (p.is_relative()) {
        if (const char* root = std::getenv(kOutputRootEnv); root && *root) p = fs::path(root) / p;
    }
    return p;
}

void write_resolved(const fs::path& dir, const RunConfig& c) { write_json_file(dir / "resolved_config.json", to_json(c)); }

DatasetManifest require_manifest(const RunConfig& c) {
    if (c.paths.manifest.empty()) throw ConfigError(c.command + " needs --manifest");
    return read_manifest(c.paths.manifest);
}

void check_patch_size(const ModelConfig& model, const DatasetManifest& m) {
    if (model.input_size != m.patch_size) {
        throw ConfigError("model.input_size " + std::to_string(model.input_size) + " does not match the manifest patch_size " +
                          std::to_string(m.patch_size));
    }
}

json fit_summary(const FitResult<float>& r, const fs::path& out) {
    return json{{"best_epoch", r.state.best_epoch},
                {"best_val_jaccard", r.state.best_val_metric},
                {"epochs_run", r.history.size()},
                {"checkpoint", (out / "best.ckpt").string()}};
}

FitResult<float> train_model(const RunConfig& c, const DatasetManifest& m, const fs::path& out) {
    check_patch_size(c.model, m);
    const auto train = load_samples<float>(m, "train");
    const auto val = load_samples<float>(m, "val");
    if (train.empty()) throw DataError("manifest has no patches in the train split");
    if (val.empty()) throw DataError("manifest has no patches in the val split");
    FitOptions<float> options;
    options.out_dir = out;
    Model<float> model = build_variant<float>(c.variant, c.model, c.seed);
    if (!c.paths.checkpoint.empty()) {
        auto ck = load_checkpoint<float>(c.paths.checkpoint);
        if (!(ck.model.config() == c.model) || ck.model.variant() != c.variant) {
            throw ConfigError("checkpoint " + c.paths.checkpoint + " was trained with a different model or variant");
        }
        options.resume = std::make_pair(std::move(ck.optimizer), std::move(ck.state));
        model = std::move(ck.model);
    } else if (!c.paths.pretrained_backbone.empty()) {
        load_backbone_weights(model, c.paths.pretrained_backbone);
    }
    return fit(std::move(model), train, val, c.train, std::move(options));
}

EvalReport evaluate_model(const RunConfig& c, const Model<float>& model, const DatasetManifest& m, const fs::path& out) {
    EvalOptions opt;
    opt.threshold = c.eval.threshold;
    opt.threads = c.threads;
    if (c.eval.overlays) opt.overlay_dir = out / "overlays";
    return evaluate_cohort(model, m, c.eval.split, opt);
}

std::vector<std::pair<std::string, fs::path>> slide_pngs(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
    std::vector<std::pair<std::string, fs::path>> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto p = e.path();
        if (p.extension() != ".png") continue;
        const auto stem = p.stem().string();
        if (stem.size() >= 5 && stem.compare(stem.size() - 5, 5, "_mask") == 0) continue;
        out.emplace_back(stem, p);
    }
    std::sort(out.begin(), out.end());
    return out;
}

json cmd_synth(const RunConfig& c, const fs::path& out) {
    const auto m = synthesize_dataset(c.synthetic, out);
    return json{{"manifest", (out / "manifest.jsonl").string()}, {"slides", m.slides.size()}, {"patches", m.records.size()}};
}

json cmd_patchify(const RunConfig& c, const fs::path& out) {
    if (c.paths.slides.empty()) throw ConfigError("patchify needs --paths.slides DIR");
    DatasetManifest m;
    m.patch_size = c.data.patch_size;
    m.tissue_threshold = c.data.tissue_threshold;
    m.normalization = c.data.normalization;
    m.seed = c.seed;
    m.config_hash = fnv1a_hex(data_json(c.data).dump());
    m.root = out;
    PatchifyOptions opt;
    opt.patch_size = c.data.patch_size;
    opt.tissue_threshold = c.data.tissue_threshold;
    const auto slides = slide_pngs(c.paths.slides);
    if (slides.empty()) throw DataError("no slide PNGs in " + c.paths.slides);
    for (const auto& [id, path] : slides) {
        const auto mask_path = path.parent_path() / (id + "_mask.png");
        if (!fs::exists(mask_path)) throw DataError("slide " + id + " has no annotation " + mask_path.string());
        const auto image = read_rgb_png(path);
        const auto mask = read_mask_png(mask_path);
        auto recs = patchify(image, mask, id, opt, out);
        m.records.insert(m.records.end(), recs.begin(), recs.end());
        m.slides[id] = SlideAssets{fs::absolute(path).lexically_normal().string(),
                                   fs::absolute(mask_path).lexically_normal().string()};
    }
    write_manifest(out / "manifest.jsonl", m);
    return json{{"manifest", (out / "manifest.jsonl").string()}, {"slides", m.slides.size()}, {"patches", m.records.size()}};
}

std::string rebase(const std::string& rel, const fs::path& from, const fs::path& to) {
    const fs::path p(rel);
    if (p.is_absolute()) return rel;
    return fs::absolute(from / p).lexically_normal().lexically_proximate(fs::absolute(to).lexically_normal()).string();
}

json cmd_split(const RunConfig& c, const fs::path& out) {
    auto m = require_manifest(c);
    const auto ratios = c.data.split_fractions
                            ? SplitRatios::fractional(c.data.split[0], c.data.split[1], c.data.split[2])
                            : SplitRatios{c.data.split, false};
    m.split = split_cohort(m.slide_ids(), ratios, c.seed);
    m.seed = c.seed;
    for (auto& r : m.records) {
        r.image_path = rebase(r.image_path, m.root, out);
        r.mask_path = rebase(r.mask_path, m.root, out);
    }
    for (auto& [_, a] : m.slides) {
        a.image = rebase(a.image, m.root, out);
        a.mask = rebase(a.mask, m.root, out);
    }
    m.root = out;
    write_manifest(out / "manifest.jsonl", m);
    return json{{"manifest", (out / "manifest.jsonl").string()},
                {"train", m.split.train},
                {"val", m.split.val},
                {"test", m.split.test}};
}

json cmd_train(const RunConfig& c, const fs::path& out) {
    const auto m = require_manifest(c);
    return fit_summary(train_model(c, m, out), out);
}

Model<float> require_model(const RunConfig& c) {
    if (c.paths.checkpoint.empty()) throw ConfigError(c.command + " needs --checkpoint");
    return load_model<float>(c.paths.checkpoint);
}

json cmd_evaluate(const RunConfig& c, const fs::path& out) {
    const auto model = require_model(c);
    const auto m = require_manifest(c);
    check_patch_size(model.config(), m);
    const json report = evaluate_model(c, model, m, out);
    write_json_file(out / "eval.json", report);
    return report;
}

json cmd_infer(const RunConfig& c, const fs::path& out) {
    const auto model = require_model(c);
    std::vector<std::pair<std::string, fs::path>> inputs;
    Normalization norm;
    if (!c.paths.input.empty()) {
        if (fs::is_directory(c.paths.input)) {
            inputs = slide_pngs(c.paths.input);
        } else {
            inputs.emplace_back(fs::path(c.paths.input).stem().string(), c.paths.input);
        }
    } else if (!c.paths.manifest.empty()) {
        const auto m = read_manifest(c.paths.manifest);
        norm = m.normalization;
        for (const auto& id : m.split.get(c.eval.split)) {
            auto it = m.slides.find(id);
            if (it == m.slides.end()) throw DataError("manifest has no slide assets for " + id);
            inputs.emplace_back(id, m.root / it->second.image);
        }
    } else {
        throw ConfigError("infer needs --paths.input or --manifest");
    }
    if (inputs.empty()) throw DataError("nothing to infer");
    fs::create_directories(out);
    json written = json::array();
    for (const auto& [id, path] : inputs) {
        const auto mask = predict_slide(model, read_rgb_png(path), norm, c.eval.threshold, c.threads);
        const auto dst = out / (id + "_pred.png");
        write_mask_png(dst, mask);
        written.push_back({{"slide_id", id}, {"prediction", dst.string()}, {"positive_pixels", mask.cast<long>().sum()}});
    }
    return json{{"predictions", written}};
}

json cmd_ablate(const RunConfig& c, const fs::path& out) {
    RunConfig base = c;
    if (base.paths.manifest.empty()) {
        synthesize_dataset(c.synthetic, out / "data");
        base.paths.manifest = (out / "data" / "manifest.jsonl").string();
    }
    const auto m = read_manifest(base.paths.manifest);
    check_patch_size(c.model, m);
    json summary = json::object();
    for (auto kind : {VariantKind::no_addon, VariantKind::tr1_only, VariantKind::hitrans}) {
        const std::string name(variant_name(kind));
        RunConfig run = base;
        run.command = "train";
        run.variant = kind;
        const auto dir = out / name;
        write_resolved(dir, run);
        const auto result = train_model(run, m, dir);
        const json report = evaluate_model(run, result.best_model, m, dir);
        write_json_file(dir / "eval.json", report);
        write_json_file(out / ("eval_" + name + ".json"), report);
        summary[name] = report.at("average");
    }
    write_json_file(out / "ablation.json", summary);
    return summary;
}

json dispatch(const RunConfig& c, const fs::path& out) {
    if (c.command == "synth") return cmd_synth(c, out);
    if (c.command == "patchify") return cmd_patchify(c, out);
    if (c.command == "split") return cmd_split(c, out);
    if (c.command == "train") return cmd_train(c, out);
    if (c.command == "evaluate") return cmd_evaluate(c, out);
    if (c.command == "infer") return cmd_infer(c, out);
    if (c.command == "ablate") return cmd_ablate(c, out);
    throw UsageError("unknown command '" + c.command + "'");
}

std::string one_line(std::string s) {
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
}

int fail(std::ostream& err, const std::string& kind, const std::string& message, int code) {
    err << json{{"error", kind}, {"message", one_line(message)}}.dump() << std::endl;
    return code;
}

struct Flags {
    std::string config, out = "out", checkpoint, manifest, split;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::map<std::string, std::string> overrides;
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"HiTrans hierarchical-transformer segmentation", "hitrans"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Help for every subcommand");
    std::map<std::string, Flags> flags;
    std::map<std::string, std::vector<std::pair<CLI::Option*, std::string>>> override_opts;
    for (const auto& spec : commands()) {
        auto* sub = app.add_subcommand(spec.name, spec.description);
        auto& f = flags[spec.name];
        sub->add_option("--config", f.config, "JSON run config (defaults < file < flags)");
        sub->add_option("--seed", f.seed, "Seed for initialization, shuffling, splits and synthesis");
        sub->add_option("--out", f.out, std::string("Output directory; relative paths resolve against $") +
                                            kOutputRootEnv + " when set")
            ->capture_default_str();
        sub->add_option("--threads", f.threads, "Worker threads for tiled inference")->check(CLI::PositiveNumber);
        if (spec.checkpoint) {
            sub->add_option("--checkpoint", f.checkpoint,
                            std::string(spec.name) == "train" ? "Training checkpoint to resume from" : "Model checkpoint");
        }
        if (spec.manifest) sub->add_option("--manifest", f.manifest, "Dataset manifest.jsonl");
        if (spec.split) sub->add_option("--split", f.split, "train, val or test");
        const json defaults = to_json(RunConfig{});
        for (const auto& ptr : all_leaves()) {
            const bool wanted = std::any_of(spec.sections.begin(), spec.sections.end(),
                                            [&](const std::string& s) { return has_prefix(ptr, s); });
            if (!wanted) continue;
            std::string names = "--" + flag_name(ptr);
            if (has_alias(ptr) && last_component(ptr) != flag_name(ptr)) names += ",--" + last_component(ptr);
            auto* opt = sub->add_option(names, f.overrides[ptr],
                                        "Sets " + flag_name(ptr) + " (default " + defaults.at(json::json_pointer(ptr)).dump() + ")");
            override_opts[spec.name].emplace_back(opt, ptr);
        }
    }

    std::vector<std::string> storage{"hitrans"};
    storage.insert(storage.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& s : storage) argv.push_back(s.data());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        return fail(err, "usage", e.what(), 2);
    }

    const std::string command = app.get_subcommands().front()->get_name();
    const auto& f = flags.at(command);
    RunConfig config;
    fs::path out_dir;
    try {
        json j = f.config.empty() ? json::object() : read_json_file(f.config);
        if (!j.is_object()) throw ConfigError("config must be a JSON object");
        for (const auto& [opt, ptr] : override_opts[command]) {
            if (opt->count()) j[json::json_pointer(ptr)] = parse_override(ptr, f.overrides.at(ptr));
        }
        if (f.seed) j["seed"] = *f.seed;
        if (f.threads) j["threads"] = *f.threads;
        if (!f.checkpoint.empty()) j["paths"]["checkpoint"] = f.checkpoint;
        if (!f.manifest.empty()) j["paths"]["manifest"] = f.manifest;
        if (!f.split.empty()) j["eval"]["split"] = f.split;
        config = run_config_from_json(j);
        config.command = command;
        out_dir = resolve_out(f.out);
        write_resolved(out_dir, config);
        out << dispatch(config, out_dir).dump() << std::endl;
        return 0;
    } catch (const UsageError& e) {
        return fail(err, "usage", e.what(), 2);
    } catch (const ConfigError& e) {
        return fail(err, "config", e.what(), 2);
    } catch (const DataError& e) {
        return fail(err, "data", e.what(), 3);
    } catch (const ImageError& e) {
        return fail(err, "data", e.what(), 3);
    } catch (const CheckpointError& e) {
        return fail(err, "checkpoint", e.what(), 4);
    } catch (const ShapeError& e) {
        return fail(err, "shape", e.what(), 5);
    } catch (const TrainingError& e) {
        return fail(err, "training", e.what(), 6);
    } catch (const fs::filesystem_error& e) {
        return fail(err, "io", e.what(), 3);
    } catch (const std::exception& e) {
        return fail(err, "internal", e.what(), 1);
    }
}

}  // namespace hitrans::cli
