#include "hitrans/model.hpp"

#include <cmath>
#include <random>

namespace hitrans {

std::string_view variant_name(VariantKind kind) {
    switch (kind) {
        case VariantKind::hitrans: return "hitrans";
        case VariantKind::tr1_only: return "tr1_only";
        case VariantKind::no_addon: return "no_addon";
    }
    return "unknown";
}

VariantKind parse_variant(std::string_view name) {
    for (VariantKind k : {VariantKind::hitrans, VariantKind::tr1_only, VariantKind::no_addon}) {
        if (variant_name(k) == name) return k;
    }
    throw ConfigError("invalid variant kind '" + std::string(name) + "' (expected hitrans, tr1_only or no_addon)");
}

namespace {

/// Allocates parameters and draws their initial values in allocation order.
template <typename Scalar>
class Initializer {
  public:
    Initializer(ParameterStore<Scalar>& store, std::uint64_t seed) : store_(store), rng_(seed) {}

    std::size_t normal(const std::string& name, Component c, std::vector<Index> shape, double stddev) {
        const auto id = store_.add(name, c, std::move(shape));
        std::normal_distribution<double> dist(0.0, stddev);
        for (Index i = 0; i < store_[id].value.size(); ++i) store_[id].value[i] = static_cast<Scalar>(dist(rng_));
        return id;
    }

    /// Normal with draws beyond two standard deviations rejected.
    std::size_t trunc_normal(const std::string& name, Component c, std::vector<Index> shape, double stddev = 0.02) {
        const auto id = store_.add(name, c, std::move(shape));
        std::normal_distribution<double> dist(0.0, stddev);
        for (Index i = 0; i < store_[id].value.size(); ++i) {
            double v = dist(rng_);
            while (std::abs(v) > 2.0 * stddev) v = dist(rng_);
            store_[id].value[i] = static_cast<Scalar>(v);
        }
        return id;
    }

    std::size_t constant(const std::string& name, Component c, std::vector<Index> shape, double value,
                         bool trainable = true) {
        const auto id = store_.add(name, c, std::move(shape), trainable);
        store_[id].value.values().setConstant(static_cast<Scalar>(value));
        return id;
    }

    std::size_t conv(const std::string& name, Component c, Index cout, Index cin, Index k) {
        return normal(name, c, {cout, cin, k, k}, std::sqrt(2.0 / static_cast<double>(cout * k * k)));
    }

    layout::BnIds bn(const std::string& prefix, Component c, Index channels) {
        layout::BnIds ids{};
        ids.weight = constant(prefix + ".weight", c, {channels}, 1.0);
        ids.bias = constant(prefix + ".bias", c, {channels}, 0.0);
        ids.running_mean = constant(prefix + ".running_mean", c, {channels}, 0.0, false);
        ids.running_var = constant(prefix + ".running_var", c, {channels}, 1.0, false);
        return ids;
    }

    layout::ConvBnIds conv_bn(const std::string& conv_name, const std::string& bn_name, Component c, Index cout,
                              Index cin, Index k) {
        layout::ConvBnIds ids{};
        ids.conv = conv(conv_name + ".weight", c, cout, cin, k);
        ids.bn = bn(bn_name, c, cout);
        return ids;
    }

    layout::LinearIds linear(const std::string& prefix, Component c, Index dout, Index din) {
        const auto w = trunc_normal(prefix + ".weight", c, {dout, din});
        const auto b = constant(prefix + ".bias", c, {dout}, 0.0);
        return {w, b};
    }

    layout::TransformerBlockIds transformer_block(const std::string& prefix, Component c, Index dim, Index mlp) {
        layout::TransformerBlockIds b{};
        b.norm1_w = constant(prefix + ".norm1.weight", c, {dim}, 1.0);
        b.norm1_b = constant(prefix + ".norm1.bias", c, {dim}, 0.0);
        std::tie(b.qkv_w, b.qkv_b) = linear(prefix + ".attn.qkv", c, 3 * dim, dim);
        std::tie(b.proj_w, b.proj_b) = linear(prefix + ".attn.proj", c, dim, dim);
        b.norm2_w = constant(prefix + ".norm2.weight", c, {dim}, 1.0);
        b.norm2_b = constant(prefix + ".norm2.bias", c, {dim}, 0.0);
        std::tie(b.fc1_w, b.fc1_b) = linear(prefix + ".mlp.fc1", c, mlp, dim);
        std::tie(b.fc2_w, b.fc2_b) = linear(prefix + ".mlp.fc2", c, dim, mlp);
        return b;
    }

  private:
    ParameterStore<Scalar>& store_;
    std::mt19937_64 rng_;
};

}  // namespace

template <typename Scalar>
Model<Scalar> Model<Scalar>::build(const ModelConfig& config, std::uint64_t seed, VariantKind kind) {
    Model m;
    m.config_ = config;
    m.plan_ = derive_shape_plan(config);
    m.variant_ = kind;
    const auto bw = config.scaled_backbone_widths();
    const auto dw = config.scaled_decoder_widths();
    Initializer<Scalar> init(m.params_, seed);
    auto& ids = m.ids_;

    constexpr auto bb = Component::backbone;
    ids.stem = init.conv_bn("backbone.stem.conv", "backbone.stem.bn", bb, bw[0], config.channels_in, 7);
    Index cin = bw[0];
    for (int layer = 0; layer < 4; ++layer) {
        const Index cout = bw[layer + 1];
        const int stride = layer == 0 ? 1 : 2;
        for (int block = 0; block < 2; ++block) {
            const std::string prefix = "backbone.layer" + std::to_string(layer + 1) + "." + std::to_string(block);
            auto& b = ids.layers[layer][block];
            b.stride = block == 0 ? stride : 1;
            const Index in_ch = block == 0 ? cin : cout;
            b.conv1 = init.conv_bn(prefix + ".conv1", prefix + ".bn1", bb, cout, in_ch, 3);
            b.conv2 = init.conv_bn(prefix + ".conv2", prefix + ".bn2", bb, cout, cout, 3);
            if (b.stride != 1 || in_ch != cout) {
                b.downsample = init.conv_bn(prefix + ".downsample.conv", prefix + ".downsample.bn", bb, cout, in_ch, 1);
            }
        }
        cin = cout;
    }

    const Index c5 = bw[4];
    const Index d1 = config.tr1.hidden_dim;
    const Index d2 = config.tr2.hidden_dim;
    const Index tr1_len = m.plan_.tr1_sequence_length;
    const Index tr2_len = m.plan_.tr2_sequence_length;

    Index decoder_in = c5;
    if (kind != VariantKind::no_addon) {
        constexpr auto t1 = Component::tr1;
        ids.linear1 = init.linear("tr1.linear1", t1, d1, c5);
        ids.seg_token = init.trunc_normal("tr1.seg_token", t1, {d1});
        if (config.use_positional_embeddings) ids.tr1_pos = init.trunc_normal("tr1.pos", t1, {tr1_len, d1});
        for (int i = 0; i < config.tr1.layers; ++i) {
            ids.tr1_blocks.push_back(
                init.transformer_block("tr1.block" + std::to_string(i), t1, d1, d1 * config.tr1.mlp_ratio));
        }
        decoder_in = d1 + c5;
    }
    if (kind == VariantKind::hitrans) {
        constexpr auto t2 = Component::tr2;
        ids.proj_in = init.linear("tr2.proj_in", t2, d2, d1);
        if (config.use_positional_embeddings) ids.tr2_pos = init.trunc_normal("tr2.pos", t2, {tr2_len, d2});
        for (int i = 0; i < config.tr2.layers; ++i) {
            ids.tr2_blocks.push_back(
                init.transformer_block("tr2.block" + std::to_string(i), t2, d2, d2 * config.tr2.mlp_ratio));
        }
        ids.proj_out = init.linear("tr2.proj_out", t2, d1, d2);
    }

    constexpr auto dec = Component::decoder;
    const std::array<Index, 4> skip_channels{bw[3], bw[2], bw[1], bw[0]};
    {
        auto& s0 = ids.decoder[0];
        s0.conv1 = init.conv_bn("decoder.stage0.conv1", "decoder.stage0.bn1", dec, dw[0], decoder_in, 3);
        s0.conv2 = init.conv_bn("decoder.stage0.conv2", "decoder.stage0.bn2", dec, dw[0], dw[0], 3);
    }
    for (int stage = 1; stage < 5; ++stage) {
        const std::string prefix = "decoder.stage" + std::to_string(stage);
        auto& s = ids.decoder[stage];
        const Index up_in = dw[stage - 1], up_out = dw[stage];
        const auto uw = init.normal(prefix + ".up.weight", dec, {up_in, up_out, 2, 2},
                                    std::sqrt(1.0 / static_cast<double>(up_in)));
        const auto ub = init.constant(prefix + ".up.bias", dec, {up_out}, 0.0);
        s.up = layout::LinearIds{uw, ub};
        const Index cat = up_out + skip_channels[stage - 1];
        s.conv1 = init.conv_bn(prefix + ".conv1", prefix + ".bn1", dec, dw[stage], cat, 3);
        s.conv2 = init.conv_bn(prefix + ".conv2", prefix + ".bn2", dec, dw[stage], dw[stage], 3);
    }
    const auto hw = init.normal("decoder.head.weight", dec, {Index(config.num_classes), dw[4], 1, 1},
                                std::sqrt(1.0 / static_cast<double>(dw[4])));
    const auto hb = init.constant("decoder.head.bias", dec, {Index(config.num_classes)}, 0.0);
    ids.head = {hw, hb};
    return m;
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::conv_bn(Tape<Scalar>& tape, const Var<Scalar>& x, const layout::ConvBnIds& ids, int stride,
                                   int pad, Mode mode, std::vector<ops::BatchStats<Scalar>>* stats) const {
    auto y = ops::conv2d(tape, x, param(tape, ids.conv), ParamRef<Scalar>{}, stride, pad);
    ops::BatchStats<Scalar> st;
    const bool training = mode == Mode::train;
    y = ops::batch_norm(tape, y, param(tape, ids.bn.weight), param(tape, ids.bn.bias),
                        params_[ids.bn.running_mean].value, params_[ids.bn.running_var].value, training,
                        training ? &st : nullptr);
    if (training && stats) {
        st.running_mean_id = ids.bn.running_mean;
        st.running_var_id = ids.bn.running_var;
        stats->push_back(std::move(st));
    }
    return y;
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::basic_block(Tape<Scalar>& tape, const Var<Scalar>& x, const layout::BasicBlockIds& ids,
                                       Mode mode, std::vector<ops::BatchStats<Scalar>>* stats) const {
    auto out = ops::relu(tape, conv_bn(tape, x, ids.conv1, ids.stride, 1, mode, stats));
    out = conv_bn(tape, out, ids.conv2, 1, 1, mode, stats);
    auto shortcut = ids.downsample ? conv_bn(tape, x, *ids.downsample, ids.stride, 0, mode, stats) : x;
    return ops::relu(tape, ops::add(tape, out, shortcut));
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::double_conv(Tape<Scalar>& tape, const Var<Scalar>& x, const layout::DecoderStageIds& ids,
                                       Mode mode, std::vector<ops::BatchStats<Scalar>>* stats) const {
    auto y = ops::relu(tape, conv_bn(tape, x, ids.conv1, 1, 1, mode, stats));
    return ops::relu(tape, conv_bn(tape, y, ids.conv2, 1, 1, mode, stats));
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::transformer(Tape<Scalar>& tape, Var<Scalar> x,
                                       const std::vector<layout::TransformerBlockIds>& blocks, int heads) const {
    for (const auto& b : blocks) {
        auto h = ops::layer_norm(tape, x, param(tape, b.norm1_w), param(tape, b.norm1_b));
        h = ops::linear(tape, h, param(tape, b.qkv_w), param(tape, b.qkv_b));
        h = ops::self_attention(tape, h, heads);
        h = ops::linear(tape, h, param(tape, b.proj_w), param(tape, b.proj_b));
        x = ops::add(tape, x, h);
        h = ops::layer_norm(tape, x, param(tape, b.norm2_w), param(tape, b.norm2_b));
        h = ops::gelu(tape, ops::linear(tape, h, param(tape, b.fc1_w), param(tape, b.fc1_b)));
        h = ops::linear(tape, h, param(tape, b.fc2_w), param(tape, b.fc2_b));
        x = ops::add(tape, x, h);
    }
    return x;
}

template <typename Scalar>
std::array<Var<Scalar>, 5> Model<Scalar>::feature_maps(Tape<Scalar>& tape, const Var<Scalar>& x, Mode mode,
                                                       std::vector<ops::BatchStats<Scalar>>* stats) const {
    const auto& in = x->value;
    if (in.rank() != 4 || in.dim(1) != config_.channels_in || in.dim(2) != config_.input_size ||
        in.dim(3) != config_.input_size) {
        throw InputError("input batch " + shape_to_string(in.shape()) + " does not match (N, " +
                         std::to_string(config_.channels_in) + ", " + std::to_string(config_.input_size) + ", " +
                         std::to_string(config_.input_size) + ")");
    }
    std::array<Var<Scalar>, 5> maps;
    maps[0] = ops::relu(tape, conv_bn(tape, x, ids_.stem, 2, 3, mode, stats));
    auto h = ops::max_pool3x3s2(tape, maps[0]);
    for (int layer = 0; layer < 4; ++layer) {
        for (const auto& block : ids_.layers[layer]) h = basic_block(tape, h, block, mode, stats);
        maps[layer + 1] = h;
    }
    return maps;
}

template <typename Scalar>
std::pair<Var<Scalar>, Var<Scalar>> Model<Scalar>::encode_regional(Tape<Scalar>& tape, const Var<Scalar>& tokens,
                                                                   Index batch, Index map_rows, Index map_cols) const {
    if (!ids_.linear1) throw ConfigError(std::string(variant_name(variant_)) + " has no regional encoder");
    const int p = config_.sub_patch_size;
    const auto& in = tokens->value;
    const auto& w1 = params_[ids_.linear1->first].value;
    if (in.rank() != 3 || in.dim(2) != w1.dim(1)) {
        throw ShapeError("encode_regional: token dim " + (in.rank() == 3 ? std::to_string(in.dim(2)) : "?") +
                         " does not match linear1 input " + std::to_string(w1.dim(1)));
    }
    auto h = ops::linear(tape, tokens, param(tape, ids_.linear1->first), param(tape, ids_.linear1->second));
    h = ops::prepend_token(tape, h, param(tape, *ids_.seg_token));
    if (ids_.tr1_pos) h = ops::add_positional(tape, h, param(tape, *ids_.tr1_pos));
    h = transformer(tape, h, ids_.tr1_blocks, config_.tr1.heads);
    auto [seg, rest] = ops::split_first_token(tape, h);
    const Index cells = (map_rows / p) * (map_cols / p);
    seg = ops::reshape(tape, seg, {batch, cells, Index(config_.tr1.hidden_dim)});
    auto regional = ops::fold_tokens(tape, rest, batch, map_rows, map_cols, p);
    return {seg, regional};
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::encode_global(Tape<Scalar>& tape, const Var<Scalar>& seg) const {
    if (!ids_.proj_in) throw ConfigError(std::string(variant_name(variant_)) + " has no global encoder");
    const auto& in = seg->value;
    if (in.rank() != 3 || in.dim(1) != plan_.num_sub_patches || in.dim(2) != config_.tr1.hidden_dim) {
        throw ShapeError("encode_global: expected (B, " + std::to_string(plan_.num_sub_patches) + ", " +
                         std::to_string(config_.tr1.hidden_dim) + "), got " + shape_to_string(in.shape()));
    }
    auto g = ops::linear(tape, seg, param(tape, ids_.proj_in->first), param(tape, ids_.proj_in->second));
    if (ids_.tr2_pos) g = ops::add_positional(tape, g, param(tape, *ids_.tr2_pos));
    return transformer(tape, g, ids_.tr2_blocks, config_.tr2.heads);
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::fuse(Tape<Scalar>& tape, const Var<Scalar>& regional, const Var<Scalar>& global_cells,
                                const Var<Scalar>& map5) const {
    Var<Scalar> merged = regional;
    if (global_cells) {
        if (!ids_.proj_out) throw ConfigError(std::string(variant_name(variant_)) + " has no global projection");
        auto cells = ops::linear(tape, global_cells, param(tape, ids_.proj_out->first), param(tape, ids_.proj_out->second));
        merged = ops::broadcast_add_cells(tape, regional, cells, config_.sub_patch_size);
    }
    return ops::concat_channels(tape, merged, map5);
}

template <typename Scalar>
std::array<Var<Scalar>, 5> Model<Scalar>::decode(Tape<Scalar>& tape, const Var<Scalar>& fused,
                                                 const std::array<Var<Scalar>, 4>& skips, Mode mode,
                                                 std::vector<ops::BatchStats<Scalar>>* stats,
                                                 Var<Scalar>* logits) const {
    std::array<Var<Scalar>, 5> stages;
    auto h = double_conv(tape, fused, ids_.decoder[0], mode, stats);
    stages[0] = h;
    for (int stage = 1; stage < 5; ++stage) {
        const auto& s = ids_.decoder[stage];
        h = ops::conv_transpose2x2(tape, h, param(tape, s.up->first), param(tape, s.up->second));
        const auto& skip = skips[stage - 1]->value;
        if (skip.dim(2) != h->value.dim(2) || skip.dim(3) != h->value.dim(3)) {
            throw ShapeError("decode: stage " + std::to_string(stage) + " output " + shape_to_string(h->value.shape()) +
                             " does not match skip " + shape_to_string(skip.shape()));
        }
        h = ops::concat_channels(tape, h, skips[stage - 1]);
        h = double_conv(tape, h, s, mode, stats);
        stages[stage] = h;
    }
    if (logits) {
        auto head = ops::conv2d(tape, h, param(tape, ids_.head.first), param(tape, ids_.head.second), 1, 0);
        *logits = ops::upsample_bilinear2x_aligned(tape, head);
    }
    return stages;
}

template <typename Scalar>
ForwardTrace<Scalar> Model<Scalar>::run(Tape<Scalar>& tape, const Tensor<Scalar>& batch, Mode mode) const {
    ForwardTrace<Scalar> t;
    auto* stats = mode == Mode::train ? &t.batch_stats : nullptr;
    auto x = tape.leaf(batch);
    t.maps = feature_maps(tape, x, mode, stats);
    const auto& m5 = t.maps[4];
    const Index b = batch.dim(0), rows = m5->value.dim(2), cols = m5->value.dim(3);
    if (variant_ == VariantKind::no_addon) {
        t.fused = m5;
    } else {
        auto tokens = ops::unfold_tokens(tape, m5, config_.sub_patch_size);
        std::tie(t.seg_embeddings, t.regional_map) = encode_regional(tape, tokens, b, rows, cols);
        if (variant_ == VariantKind::hitrans) t.global_cells = encode_global(tape, t.seg_embeddings);
        t.fused = fuse(tape, t.regional_map, t.global_cells, m5);
    }
    t.decoder_stages = decode(tape, t.fused, {t.maps[3], t.maps[2], t.maps[1], t.maps[0]}, mode, stats, &t.logits);
    return t;
}

template <typename Scalar>
TokenGrid<Scalar> unfold_sub_patches(const FeatureMap<Scalar>& map5, int p) {
    if (map5.rank() != 4 || p <= 0 || map5.dim(2) % p != 0 || map5.dim(3) % p != 0) {
        throw ShapeError("unfold_sub_patches: map " + shape_to_string(map5.shape()) +
                         " sides not divisible by P=" + std::to_string(p));
    }
    Tape<Scalar> tape;
    TokenGrid<Scalar> grid;
    grid.values = ops::unfold_tokens(tape, tape.leaf(map5), p)->value;
    grid.batch = map5.dim(0);
    grid.grid_rows = map5.dim(2) / p;
    grid.grid_cols = map5.dim(3) / p;
    grid.sub_patch = p;
    grid.origin.reserve(static_cast<std::size_t>(grid.num_sub_patches() * p * p));
    for (Index k = 0; k < grid.num_sub_patches(); ++k) {
        const Index gy = k / grid.grid_cols, gx = k % grid.grid_cols;
        for (Index t = 0; t < Index(p) * p; ++t) grid.origin.emplace_back(gy * p + t / p, gx * p + t % p);
    }
    return grid;
}

template <typename Scalar>
FeatureMap<Scalar> fold_sub_patches(const TokenGrid<Scalar>& grid) {
    const Index p = grid.sub_patch;
    if (grid.values.rank() != 3 || grid.values.dim(0) != grid.batch * grid.num_sub_patches() ||
        grid.values.dim(1) != p * p ||
        grid.origin.size() != static_cast<std::size_t>(grid.num_sub_patches() * p * p)) {
        throw ShapeError("fold_sub_patches: inconsistent grid metadata for values " +
                         shape_to_string(grid.values.shape()));
    }
    Tape<Scalar> tape;
    return ops::fold_tokens(tape, tape.leaf(grid.values), grid.batch, grid.grid_rows * p, grid.grid_cols * p,
                            grid.sub_patch)
        ->value;
}

template <typename Scalar>
std::array<FeatureMap<Scalar>, 5> extract_feature_maps(const Model<Scalar>& model, const Tensor<Scalar>& batch) {
    Tape<Scalar> tape;
    auto maps = model.feature_maps(tape, tape.leaf(batch), Mode::eval, nullptr);
    std::array<FeatureMap<Scalar>, 5> out;
    for (std::size_t i = 0; i < 5; ++i) out[i] = maps[i]->value;
    return out;
}

template <typename Scalar>
RegionalEncoding<Scalar> encode_regional(const Model<Scalar>& model, const TokenGrid<Scalar>& grid) {
    Tape<Scalar> tape;
    const Index p = grid.sub_patch;
    if (p != model.config().sub_patch_size) throw ShapeError("encode_regional: grid P differs from model P");
    auto [seg, regional] =
        model.encode_regional(tape, tape.leaf(grid.values), grid.batch, grid.grid_rows * p, grid.grid_cols * p);
    return {seg->value, regional->value};
}

template <typename Scalar>
FeatureMap<Scalar> encode_global(const Model<Scalar>& model, const Tensor<Scalar>& seg_embeddings) {
    Tape<Scalar> tape;
    auto cells = model.encode_global(tape, tape.leaf(seg_embeddings));
    return ops::cells_to_map(tape, cells, model.plan().grid_side)->value;
}

template <typename Scalar>
FeatureMap<Scalar> fuse(const Model<Scalar>& model, const FeatureMap<Scalar>& regional_map,
                        const FeatureMap<Scalar>& global_map, const FeatureMap<Scalar>& map5) {
    const auto& plan = model.plan();
    const Index g = plan.grid_side;
    if (regional_map.rank() != 4 || global_map.rank() != 4 || map5.rank() != 4 || global_map.dim(2) != g ||
        global_map.dim(3) != g || regional_map.dim(2) != map5.dim(2) || regional_map.dim(3) != map5.dim(3)) {
        throw ShapeError("fuse: regional " + shape_to_string(regional_map.shape()) + ", global " +
                         shape_to_string(global_map.shape()) + ", map5 " + shape_to_string(map5.shape()) +
                         " inconsistent with the shape plan");
    }
    const Index b = global_map.dim(0), d2 = global_map.dim(1);
    Tensor<Scalar> cells({b, g * g, d2});
    for (Index s = 0; s < b; ++s) cells.matrix(s) = global_map.sample_matrix(s).transpose();
    Tape<Scalar> tape;
    return model.fuse(tape, tape.leaf(regional_map), tape.leaf(cells), tape.leaf(map5))->value;
}

template <typename Scalar>
Tensor<Scalar> decode(const Model<Scalar>& model, const FeatureMap<Scalar>& fused,
                      const std::array<FeatureMap<Scalar>, 4>& skips) {
    Tape<Scalar> tape;
    Var<Scalar> logits;
    std::array<Var<Scalar>, 4> skip_vars;
    for (std::size_t i = 0; i < 4; ++i) skip_vars[i] = tape.leaf(skips[i]);
    model.decode(tape, tape.leaf(fused), skip_vars, Mode::eval, nullptr, &logits);
    return logits->value;
}

template <typename Scalar>
Tensor<Scalar> forward(const Model<Scalar>& model, const Tensor<Scalar>& batch) {
    Tape<Scalar> tape;
    return model.run(tape, batch, Mode::eval).logits->value;
}

#define HITRANS_INSTANTIATE_MODEL(S)                                                                           \
    template class Model<S>;                                                                                   \
    template TokenGrid<S> unfold_sub_patches(const FeatureMap<S>&, int);                                       \
    template FeatureMap<S> fold_sub_patches(const TokenGrid<S>&);                                              \
    template std::array<FeatureMap<S>, 5> extract_feature_maps(const Model<S>&, const Tensor<S>&);             \
    template RegionalEncoding<S> encode_regional(const Model<S>&, const TokenGrid<S>&);                        \
    template FeatureMap<S> encode_global(const Model<S>&, const Tensor<S>&);                                   \
    template FeatureMap<S> fuse(const Model<S>&, const FeatureMap<S>&, const FeatureMap<S>&, const FeatureMap<S>&); \
    template Tensor<S> decode(const Model<S>&, const FeatureMap<S>&, const std::array<FeatureMap<S>, 4>&);     \
    template Tensor<S> forward(const Model<S>&, const Tensor<S>&);

HITRANS_INSTANTIATE_MODEL(float)
HITRANS_INSTANTIATE_MODEL(double)

#undef HITRANS_INSTANTIATE_MODEL

}  // namespace hitrans
