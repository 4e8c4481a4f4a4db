#pragma once

#include "hitrans/config.hpp"
#include "hitrans/data.hpp"
#include "hitrans/model.hpp"
#include "hitrans/training.hpp"

#include <json.hpp>

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

namespace hitrans::cli {

struct DataConfig {
    int patch_size = 256;
    double tissue_threshold = 0.5;
    /// train / val / test; counts unless split_fractions.
    std::array<double, 3> split{30, 10, 10};
    bool split_fractions = false;
    Normalization normalization;
    friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct EvalConfig {
    std::string split = "test";
    double threshold = 0.5;
    bool overlays = false;
    friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct PathConfig {
    std::string manifest;
    std::string checkpoint;
    /// Directory of {id}.png slides with {id}_mask.png annotations (patchify).
    std::string slides;
    /// Slide PNG or directory of slide PNGs (infer).
    std::string input;
    std::string pretrained_backbone;
    friend bool operator==(const PathConfig&, const PathConfig&) = default;
};

/// Everything a command needs. The top-level seed is copied into train.seed and synthetic.seed.
struct RunConfig {
    std::string command;
    std::uint64_t seed = 0;
    int threads = 1;
    VariantKind variant = VariantKind::hitrans;
    ModelConfig model = scaled_config(256, 2, 8, 2, 48, 24);
    TrainConfig train;
    DataConfig data;
    EvalConfig eval;
    SyntheticSpec synthetic;
    PathConfig paths;
};

nlohmann::json to_json(const RunConfig& c);
/// Missing keys keep their defaults; unknown keys throw ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);

inline constexpr const char* kOutputRootEnv = "HITRANS_OUTPUT_ROOT";

/// Runs one command line (without the program name). Returns the process exit status;
/// failures print one JSON line {"error", "message"} to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace hitrans::cli
