#pragma once

#include "hitrans/autodiff.hpp"
#include "hitrans/config.hpp"
#include "hitrans/ops.hpp"
#include "hitrans/parameters.hpp"
#include "hitrans/tensor.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace hitrans {

class InputError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Ablation variants: the full hierarchy, the regional encoder alone, and the plain residual U-Net.
enum class VariantKind { hitrans, tr1_only, no_addon };

std::string_view variant_name(VariantKind kind);
VariantKind parse_variant(std::string_view name);

enum class Mode { train, eval };

/// map5 split into sub-patch token sequences, with the map5 coordinate every token came from.
template <typename Scalar>
struct TokenGrid {
    /// (batch * num_sub_patches, tokens_per_sub_patch, dim)
    Tensor<Scalar> values;
    Index batch = 0;
    Index grid_rows = 0;
    Index grid_cols = 0;
    int sub_patch = 0;
    /// origin[k * P*P + t] = (row, col) on map5 of token t in sub-patch k.
    std::vector<std::pair<Index, Index>> origin;

    Index num_sub_patches() const { return grid_rows * grid_cols; }
    Index tokens_per_sub_patch() const { return Index(sub_patch) * sub_patch; }
    Index dim() const { return values.dim(2); }
};

template <typename Scalar>
TokenGrid<Scalar> unfold_sub_patches(const FeatureMap<Scalar>& map5, int p);

template <typename Scalar>
FeatureMap<Scalar> fold_sub_patches(const TokenGrid<Scalar>& grid);

/// Every intermediate of one forward pass, kept as tape variables.
template <typename Scalar>
struct ForwardTrace {
    std::array<Var<Scalar>, 5> maps;
    Var<Scalar> seg_embeddings;  // (B, G*G, D1)
    Var<Scalar> regional_map;    // (B, D1, S/32, S/32)
    Var<Scalar> global_cells;    // (B, G*G, D2), output of the global encoder
    Var<Scalar> fused;           // decoder input
    std::array<Var<Scalar>, 5> decoder_stages;
    Var<Scalar> logits;          // (B, 1, S, S)
    std::vector<ops::BatchStats<Scalar>> batch_stats;
};

/// Parameter-store indices of each layer; independent of precision.
namespace layout {

struct BnIds {
    std::size_t weight, bias, running_mean, running_var;
};
struct ConvBnIds {
    std::size_t conv;
    BnIds bn;
};
struct BasicBlockIds {
    ConvBnIds conv1, conv2;
    std::optional<ConvBnIds> downsample;
    int stride = 1;
};
struct TransformerBlockIds {
    std::size_t norm1_w, norm1_b, qkv_w, qkv_b, proj_w, proj_b, norm2_w, norm2_b, fc1_w, fc1_b, fc2_w, fc2_b;
};
using LinearIds = std::pair<std::size_t, std::size_t>;  // weight, bias
struct DecoderStageIds {
    std::optional<LinearIds> up;
    ConvBnIds conv1, conv2;
};

struct Layout {
    ConvBnIds stem{};
    std::array<std::array<BasicBlockIds, 2>, 4> layers{};
    std::optional<LinearIds> linear1;
    std::optional<std::size_t> seg_token, tr1_pos, tr2_pos;
    std::vector<TransformerBlockIds> tr1_blocks, tr2_blocks;
    std::optional<LinearIds> proj_in, proj_out;
    std::array<DecoderStageIds, 5> decoder{};
    LinearIds head{};
};

}  // namespace layout

template <typename Scalar>
class Model {
  public:
    /// Allocates and initializes all parameters deterministically from `seed`.
    static Model build(const ModelConfig& config, std::uint64_t seed, VariantKind kind = VariantKind::hitrans);

    const ModelConfig& config() const { return config_; }
    const ShapePlan& plan() const { return plan_; }
    VariantKind variant() const { return variant_; }
    ParameterStore<Scalar>& parameters() { return params_; }
    const ParameterStore<Scalar>& parameters() const { return params_; }

    /// Full forward pass recorded on `tape`. Training mode normalizes with batch statistics.
    ForwardTrace<Scalar> run(Tape<Scalar>& tape, const Tensor<Scalar>& batch, Mode mode) const;

    /// Stage entry points on tape variables.
    std::array<Var<Scalar>, 5> feature_maps(Tape<Scalar>& tape, const Var<Scalar>& x, Mode mode,
                                            std::vector<ops::BatchStats<Scalar>>* stats) const;
    /// tokens: (B*G*G, P*P, C5). Returns (seg (B, G*G, D1), regional map (B, D1, S/32, S/32)).
    std::pair<Var<Scalar>, Var<Scalar>> encode_regional(Tape<Scalar>& tape, const Var<Scalar>& tokens, Index batch,
                                                        Index map_rows, Index map_cols) const;
    /// seg: (B, G*G, D1) -> (B, G*G, D2).
    Var<Scalar> encode_global(Tape<Scalar>& tape, const Var<Scalar>& seg) const;
    /// Projects global cells to D1, broadcast-adds them over their sub-patch regions, then concatenates map5.
    Var<Scalar> fuse(Tape<Scalar>& tape, const Var<Scalar>& regional, const Var<Scalar>& global_cells,
                     const Var<Scalar>& map5) const;
    std::array<Var<Scalar>, 5> decode(Tape<Scalar>& tape, const Var<Scalar>& fused,
                                      const std::array<Var<Scalar>, 4>& skips, Mode mode,
                                      std::vector<ops::BatchStats<Scalar>>* stats, Var<Scalar>* logits) const;

    /// Same architecture and parameter values in another precision.
    template <typename Other>
    Model<Other> cast() const;

  private:
    template <typename>
    friend class Model;

    Model() = default;

    ParamRef<Scalar> param(Tape<Scalar>& tape, std::size_t id) const {
        return ParamRef<Scalar>{&params_[id].value, tape.grad_sink(id, params_[id])};
    }

    Var<Scalar> conv_bn(Tape<Scalar>& tape, const Var<Scalar>& x, const layout::ConvBnIds& ids, int stride, int pad, Mode mode,
                        std::vector<ops::BatchStats<Scalar>>* stats) const;
    Var<Scalar> basic_block(Tape<Scalar>& tape, const Var<Scalar>& x, const layout::BasicBlockIds& ids, Mode mode,
                            std::vector<ops::BatchStats<Scalar>>* stats) const;
    Var<Scalar> double_conv(Tape<Scalar>& tape, const Var<Scalar>& x, const layout::DecoderStageIds& ids, Mode mode,
                            std::vector<ops::BatchStats<Scalar>>* stats) const;
    Var<Scalar> transformer(Tape<Scalar>& tape, Var<Scalar> x, const std::vector<layout::TransformerBlockIds>& blocks,
                            int heads) const;

    ModelConfig config_;
    ShapePlan plan_;
    VariantKind variant_ = VariantKind::hitrans;
    ParameterStore<Scalar> params_;

    layout::Layout ids_;
};

template <typename Scalar>
template <typename Other>
Model<Other> Model<Scalar>::cast() const {
    Model<Other> m;
    m.config_ = config_;
    m.plan_ = plan_;
    m.variant_ = variant_;
    for (const auto& p : params_) {
        const auto id = m.params_.add(p.name, p.component, p.value.shape(), p.trainable);
        m.params_[id].value = p.value.template cast<Other>();
    }
    m.ids_ = ids_;
    return m;
}

template <typename Scalar>
Model<Scalar> build_model(const ModelConfig& config, std::uint64_t seed) {
    return Model<Scalar>::build(config, seed, VariantKind::hitrans);
}

template <typename Scalar>
Model<Scalar> build_variant(VariantKind kind, const ModelConfig& config, std::uint64_t seed) {
    return Model<Scalar>::build(config, seed, kind);
}

/// Evaluation-mode stage functions on plain tensors.
template <typename Scalar>
std::array<FeatureMap<Scalar>, 5> extract_feature_maps(const Model<Scalar>& model, const Tensor<Scalar>& batch);

template <typename Scalar>
struct RegionalEncoding {
    Tensor<Scalar> seg_embeddings;  // (B, G*G, D1)
    FeatureMap<Scalar> regional_map;
};

template <typename Scalar>
RegionalEncoding<Scalar> encode_regional(const Model<Scalar>& model, const TokenGrid<Scalar>& grid);

/// seg_embeddings (B, G*G, D1) -> global map (B, D2, G, G).
template <typename Scalar>
FeatureMap<Scalar> encode_global(const Model<Scalar>& model, const Tensor<Scalar>& seg_embeddings);

template <typename Scalar>
FeatureMap<Scalar> fuse(const Model<Scalar>& model, const FeatureMap<Scalar>& regional_map,
                        const FeatureMap<Scalar>& global_map, const FeatureMap<Scalar>& map5);

/// skips are map1..map4.
template <typename Scalar>
Tensor<Scalar> decode(const Model<Scalar>& model, const FeatureMap<Scalar>& fused,
                      const std::array<FeatureMap<Scalar>, 4>& skips);

/// Evaluation-mode logits (B, 1, S, S). Safe to call concurrently on a shared model.
template <typename Scalar>
Tensor<Scalar> forward(const Model<Scalar>& model, const Tensor<Scalar>& batch);

}  // namespace hitrans
