#pragma once

#include <json.hpp>

#include <array>
#include <stdexcept>
#include <string>

namespace hitrans {

class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Exact rational p/q used to thin channel widths for desk-scale runs.
struct Ratio {
    int num = 1;
    int den = 1;

    /// Scales `width`; throws when the result is not a positive integer.
    int apply(int width, const std::string& what) const;
    std::string to_string() const;
    static Ratio parse(const std::string& text);
    friend bool operator==(const Ratio&, const Ratio&) = default;
};

struct TransformerConfig {
    int layers = 12;
    int heads = 6;
    int hidden_dim = 384;
    int mlp_ratio = 4;
    friend bool operator==(const TransformerConfig&, const TransformerConfig&) = default;
};

struct ModelConfig {
    int input_size = 4096;
    int channels_in = 3;
    int backbone_stride = 32;
    std::array<int, 5> backbone_widths{64, 64, 128, 256, 512};
    Ratio width_multiplier{};
    int sub_patch_size = 16;
    TransformerConfig tr1{12, 6, 384, 4};
    TransformerConfig tr2{12, 3, 192, 4};
    std::array<int, 5> decoder_widths{512, 256, 128, 64, 32};
    int num_classes = 1;
    bool use_positional_embeddings = true;

    /// Widths after the multiplier.
    std::array<int, 5> scaled_backbone_widths() const;
    std::array<int, 5> scaled_decoder_widths() const;

    /// Throws ConfigError naming the first violated constraint.
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// A scaled configuration for CPU runs: input side `size`, sub-patch `p`, multiplier 1/`den`,
/// and transformers of the given depth and width.
ModelConfig scaled_config(int size, int p, int den, int tr_layers = 2, int tr1_dim = 48, int tr2_dim = 24);

struct MapShape {
    int height = 0;
    int width = 0;
    int channels = 0;
    friend bool operator==(const MapShape&, const MapShape&) = default;
};

/// Tensor geometry implied by a ModelConfig.
struct ShapePlan {
    std::array<MapShape, 5> map_sizes{};
    int grid_side = 0;
    int num_sub_patches = 0;
    int tokens_per_sub_patch = 0;
    int tr1_sequence_length = 0;
    int tr2_sequence_length = 0;
    std::array<int, 4> decoder_stage_sides{};
    MapShape output_size{};
};

ShapePlan derive_shape_plan(const ModelConfig& config);

void to_json(nlohmann::json& j, const TransformerConfig& c);
void from_json(const nlohmann::json& j, TransformerConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
/// Rejects unknown keys; missing keys keep their defaults.
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace hitrans
