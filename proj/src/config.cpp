#include "hitrans/config.hpp"

#include <charconv>
#include <set>

namespace hitrans {

int Ratio::apply(int width, const std::string& what) const {
    if (num <= 0 || den <= 0) {
        throw ConfigError("width_multiplier must be positive, got " + to_string());
    }
    const long long scaled = static_cast<long long>(width) * num;
    if (scaled % den != 0 || scaled / den <= 0) {
        throw ConfigError(what + " = " + std::to_string(width) + " scaled by " + to_string() +
                          " is not a positive integer");
    }
    return static_cast<int>(scaled / den);
}

std::string Ratio::to_string() const {
    return std::to_string(num) + "/" + std::to_string(den);
}

Ratio Ratio::parse(const std::string& text) {
    Ratio r;
    const auto slash = text.find('/');
    auto parse_int = [&](std::string_view s, int& out) {
        const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
        if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
            throw ConfigError("bad width_multiplier '" + text + "'");
        }
    };
    const std::string_view view(text);
    if (slash == std::string::npos) {
        parse_int(view, r.num);
        r.den = 1;
    } else {
        parse_int(view.substr(0, slash), r.num);
        parse_int(view.substr(slash + 1), r.den);
    }
    if (r.num <= 0 || r.den <= 0) throw ConfigError("width_multiplier must be positive, got '" + text + "'");
    return r;
}

std::array<int, 5> ModelConfig::scaled_backbone_widths() const {
    std::array<int, 5> out{};
    for (std::size_t i = 0; i < 5; ++i) {
        out[i] = width_multiplier.apply(backbone_widths[i], "backbone_widths[" + std::to_string(i) + "]");
    }
    return out;
}

std::array<int, 5> ModelConfig::scaled_decoder_widths() const {
    std::array<int, 5> out{};
    for (std::size_t i = 0; i < 5; ++i) {
        out[i] = width_multiplier.apply(decoder_widths[i], "decoder_widths[" + std::to_string(i) + "]");
    }
    return out;
}

namespace {

void validate_transformer(const TransformerConfig& t, const std::string& name) {
    if (t.layers < 0) throw ConfigError(name + ".layers must be >= 0");
    if (t.heads <= 0) throw ConfigError(name + ".heads must be positive");
    if (t.hidden_dim <= 0) throw ConfigError(name + ".hidden_dim must be positive");
    if (t.mlp_ratio <= 0) throw ConfigError(name + ".mlp_ratio must be positive");
    if (t.hidden_dim % t.heads != 0) {
        throw ConfigError(name + ".hidden_dim (" + std::to_string(t.hidden_dim) + ") not divisible by " + name +
                          ".heads (" + std::to_string(t.heads) + ")");
    }
}

}  // namespace

void ModelConfig::validate() const {
    if (input_size <= 0) throw ConfigError("input_size must be positive");
    if (channels_in <= 0) throw ConfigError("channels_in must be positive");
    if (backbone_stride != 32) {
        throw ConfigError("backbone_stride is fixed at 32 for an 18-layer residual encoder, got " +
                          std::to_string(backbone_stride));
    }
    if (num_classes != 1) throw ConfigError("num_classes must be 1 (binary mask)");
    if (sub_patch_size <= 0) throw ConfigError("sub_patch_size must be positive");
    if (input_size % backbone_stride != 0) {
        throw ConfigError("input_size (" + std::to_string(input_size) + ") not divisible by backbone_stride (" +
                          std::to_string(backbone_stride) + ")");
    }
    const int map5 = input_size / backbone_stride;
    if (map5 % sub_patch_size != 0) {
        throw ConfigError("(input_size / backbone_stride) = " + std::to_string(map5) +
                          " not divisible by sub_patch_size (" + std::to_string(sub_patch_size) + ")");
    }
    for (int w : backbone_widths) {
        if (w <= 0) throw ConfigError("backbone_widths must be positive");
    }
    for (int w : decoder_widths) {
        if (w <= 0) throw ConfigError("decoder_widths must be positive");
    }
    (void)scaled_backbone_widths();
    (void)scaled_decoder_widths();
    validate_transformer(tr1, "tr1");
    validate_transformer(tr2, "tr2");
}

ModelConfig scaled_config(int size, int p, int den, int tr_layers, int tr1_dim, int tr2_dim) {
    ModelConfig c;
    c.input_size = size;
    c.sub_patch_size = p;
    c.width_multiplier = Ratio{1, den};
    c.tr1 = TransformerConfig{tr_layers, 6, tr1_dim, 4};
    c.tr2 = TransformerConfig{tr_layers, 3, tr2_dim, 4};
    return c;
}

ShapePlan derive_shape_plan(const ModelConfig& config) {
    config.validate();
    const auto widths = config.scaled_backbone_widths();
    ShapePlan plan;
    for (int level = 0; level < 5; ++level) {
        const int side = config.input_size >> (level + 1);
        plan.map_sizes[level] = MapShape{side, side, widths[level]};
    }
    const int map5 = plan.map_sizes[4].height;
    plan.grid_side = map5 / config.sub_patch_size;
    plan.num_sub_patches = plan.grid_side * plan.grid_side;
    plan.tokens_per_sub_patch = config.sub_patch_size * config.sub_patch_size;
    plan.tr1_sequence_length = plan.tokens_per_sub_patch + 1;
    plan.tr2_sequence_length = plan.num_sub_patches;
    for (int stage = 0; stage < 4; ++stage) {
        plan.decoder_stage_sides[stage] = map5 << (stage + 1);
    }
    plan.output_size = MapShape{config.input_size, config.input_size, config.num_classes};
    return plan;
}

void to_json(nlohmann::json& j, const TransformerConfig& c) {
    j = nlohmann::json{{"layers", c.layers}, {"heads", c.heads}, {"hidden_dim", c.hidden_dim}, {"mlp_ratio", c.mlp_ratio}};
}

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
    }
}

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& out) {
    if (auto it = j.find(key); it != j.end()) {
        try {
            out = it->get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
        }
    }
}

}  // namespace

void from_json(const nlohmann::json& j, TransformerConfig& c) {
    reject_unknown(j, {"layers", "heads", "hidden_dim", "mlp_ratio"}, "transformer config");
    read_if(j, "layers", c.layers);
    read_if(j, "heads", c.heads);
    read_if(j, "hidden_dim", c.hidden_dim);
    read_if(j, "mlp_ratio", c.mlp_ratio);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{
        {"input_size", c.input_size},
        {"channels_in", c.channels_in},
        {"backbone_stride", c.backbone_stride},
        {"backbone_widths", c.backbone_widths},
        {"width_multiplier", c.width_multiplier.to_string()},
        {"sub_patch_size", c.sub_patch_size},
        {"tr1", c.tr1},
        {"tr2", c.tr2},
        {"decoder_widths", c.decoder_widths},
        {"num_classes", c.num_classes},
        {"use_positional_embeddings", c.use_positional_embeddings},
    };
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    reject_unknown(j,
                   {"input_size", "channels_in", "backbone_stride", "backbone_widths", "width_multiplier",
                    "sub_patch_size", "tr1", "tr2", "decoder_widths", "num_classes", "use_positional_embeddings"},
                   "model config");
    read_if(j, "input_size", c.input_size);
    read_if(j, "channels_in", c.channels_in);
    read_if(j, "backbone_stride", c.backbone_stride);
    read_if(j, "backbone_widths", c.backbone_widths);
    read_if(j, "sub_patch_size", c.sub_patch_size);
    read_if(j, "decoder_widths", c.decoder_widths);
    read_if(j, "num_classes", c.num_classes);
    read_if(j, "use_positional_embeddings", c.use_positional_embeddings);
    if (auto it = j.find("width_multiplier"); it != j.end()) {
        if (it->is_string()) {
            c.width_multiplier = Ratio::parse(it->get<std::string>());
        } else if (it->is_number_integer()) {
            c.width_multiplier = Ratio{it->get<int>(), 1};
        } else {
            throw ConfigError("width_multiplier must be a string like \"1/8\" or an integer");
        }
    }
    if (auto it = j.find("tr1"); it != j.end()) from_json(*it, c.tr1);
    if (auto it = j.find("tr2"); it != j.end()) from_json(*it, c.tr2);
}

}  // namespace hitrans
