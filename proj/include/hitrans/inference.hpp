#pragma once

#include "hitrans/data.hpp"
#include "hitrans/image.hpp"
#include "hitrans/metrics.hpp"
#include "hitrans/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace hitrans {

struct TileCoord {
    Index x = 0;
    Index y = 0;
    Index pad_right = 0;
    Index pad_bottom = 0;
    friend bool operator==(const TileCoord&, const TileCoord&) = default;
};

/// Row-major ceil(width/S) x ceil(height/S) grid; the last column/row records its reflect padding.
std::vector<TileCoord> plan_tiles(Index width, Index height, int size);

/// The S x S input for `tile`, reflect-padded past the slide edge.
RgbImage extract_tile(const RgbImage& slide, const TileCoord& tile, int size);

using LogitPlane = Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Maps one S x S tile to S x S logits. `index` is the tile's position in plan_tiles order.
using TilePredictor = std::function<LogitPlane(const RgbImage& tile, std::size_t index)>;

template <typename Scalar>
TilePredictor model_predictor(const Model<Scalar>& model, const Normalization& normalization);

/// Non-overlapping tiled inference: predict, sigmoid, threshold, crop padding, place.
/// Tiles are spread over `threads` workers; each writes a disjoint region.
Mask predict_slide(const TilePredictor& predictor, const RgbImage& slide, int size, double threshold, int threads = 1);

template <typename Scalar>
Mask predict_slide(const Model<Scalar>& model, const RgbImage& slide, const Normalization& normalization,
                   double threshold, int threads = 1) {
    return predict_slide(model_predictor(model, normalization), slide, model.config().input_size, threshold, threads);
}

struct EvalReport {
    std::map<std::string, double> per_slide;
    double average = 0.0;
    double threshold = 0.5;
};

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

/// Arithmetic mean over slides, summed in slide-id order.
double mean_score(const std::map<std::string, double>& per_slide);

struct EvalOptions {
    double threshold = 0.5;
    int threads = 1;
    /// When set, writes {slide}_overlay.png: image | annotation | prediction.
    std::optional<std::filesystem::path> overlay_dir;
};

EvalReport evaluate_cohort(const TilePredictor& predictor, int size, const DatasetManifest& manifest,
                           const std::string& split, const EvalOptions& options = {});

template <typename Scalar>
EvalReport evaluate_cohort(const Model<Scalar>& model, const DatasetManifest& manifest, const std::string& split,
                           const EvalOptions& options = {}) {
    return evaluate_cohort(model_predictor(model, manifest.normalization), model.config().input_size, manifest, split,
                           options);
}

/// image | ground truth tinted | prediction tinted, side by side.
RgbImage overlay_panel(const RgbImage& image, const Mask& truth, const Mask& pred);

/// Trainable scalars per component name, plus "total".
template <typename Scalar>
std::map<std::string, Index> parameter_counts(const Model<Scalar>& model);

}  // namespace hitrans
