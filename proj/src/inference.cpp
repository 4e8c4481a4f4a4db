#include "hitrans/inference.hpp"

#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

namespace hitrans {

std::vector<TileCoord> plan_tiles(Index width, Index height, int size) {
    if (width < 1 || height < 1) throw ShapeError("plan_tiles: slide must be at least 1x1");
    if (size < 1) throw ShapeError("plan_tiles: tile size must be positive");
    const Index cols = (width + size - 1) / size;
    const Index rows = (height + size - 1) / size;
    std::vector<TileCoord> tiles;
    tiles.reserve(static_cast<std::size_t>(rows * cols));
    for (Index r = 0; r < rows; ++r) {
        for (Index c = 0; c < cols; ++c) {
            TileCoord t;
            t.x = c * size;
            t.y = r * size;
            t.pad_right = std::max<Index>(0, t.x + size - width);
            t.pad_bottom = std::max<Index>(0, t.y + size - height);
            tiles.push_back(t);
        }
    }
    return tiles;
}

RgbImage extract_tile(const RgbImage& slide, const TileCoord& tile, int size) {
    if (tile.pad_right == 0 && tile.pad_bottom == 0) return crop(slide, tile.x, tile.y, size, size);
    RgbImage out(size, size);
    for (Index y = 0; y < size; ++y) {
        const Index sy = reflect_index(tile.y + y, slide.height);
        for (Index x = 0; x < size; ++x) {
            const Index sx = reflect_index(tile.x + x, slide.width);
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = slide.at(sy, sx, c);
        }
    }
    return out;
}

template <typename Scalar>
TilePredictor model_predictor(const Model<Scalar>& model, const Normalization& normalization) {
    return [&model, normalization](const RgbImage& tile, std::size_t) {
        auto x = normalize_image<Scalar>(tile, normalization);
        x = x.reshaped({1, 3, tile.height, tile.width});
        const auto logits = forward(model, x);
        return LogitPlane(logits.matrix(0).template cast<float>().array());
    };
}

Mask predict_slide(const TilePredictor& predictor, const RgbImage& slide, int size, double threshold, int threads) {
    const auto tiles = plan_tiles(slide.width, slide.height, size);
    Mask out = Mask::Zero(slide.height, slide.width);
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (std::size_t i = next++; i < tiles.size(); i = next++) {
            try {
                const auto& t = tiles[i];
                const LogitPlane logits = predictor(extract_tile(slide, t, size), i);
                if (logits.rows() != size || logits.cols() != size) {
                    throw ShapeError("predictor returned " + std::to_string(logits.rows()) + "x" +
                                     std::to_string(logits.cols()) + " logits for a " + std::to_string(size) +
                                     " tile");
                }
                const Index h = size - t.pad_bottom, w = size - t.pad_right;
                out.block(t.y, t.x, h, w) = threshold_logits(logits.topLeftCorner(h, w), threshold);
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next = tiles.size();
            }
        }
    };
    const int n = std::max(1, std::min<int>(threads, static_cast<int>(tiles.size())));
    if (n == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < n; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (failure) std::rethrow_exception(failure);
    return out;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
    j = nlohmann::json{{"threshold", r.threshold}, {"per_slide", r.per_slide}, {"average", r.average}};
}

void from_json(const nlohmann::json& j, EvalReport& r) {
    j.at("threshold").get_to(r.threshold);
    j.at("per_slide").get_to(r.per_slide);
    j.at("average").get_to(r.average);
}

double mean_score(const std::map<std::string, double>& per_slide) {
    if (per_slide.empty()) throw std::invalid_argument("mean_score: no slides");
    double sum = 0.0;
    for (const auto& [_, v] : per_slide) sum += v;
    return sum / static_cast<double>(per_slide.size());
}

RgbImage overlay_panel(const RgbImage& image, const Mask& truth, const Mask& pred) {
    const Index w = image.width, h = image.height;
    RgbImage out(3 * w, h);
    auto tint = [](std::uint8_t v, std::uint8_t target) { return static_cast<std::uint8_t>((v + target) / 2); };
    for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                const std::uint8_t v = image.at(y, x, c);
                out.at(y, x, c) = v;
                const std::array<std::uint8_t, 3> green{0, 200, 0}, red{220, 0, 0};
                out.at(y, x + w, c) = truth(y, x) ? tint(v, green[c]) : v;
                out.at(y, x + 2 * w, c) = pred(y, x) ? tint(v, red[c]) : v;
            }
        }
    }
    return out;
}

EvalReport evaluate_cohort(const TilePredictor& predictor, int size, const DatasetManifest& manifest,
                           const std::string& split, const EvalOptions& options) {
    const auto& ids = manifest.split.get(split);
    if (ids.empty()) throw DataError("evaluate_cohort: split '" + split + "' is empty");
    if (options.overlay_dir) std::filesystem::create_directories(*options.overlay_dir);
    EvalReport report;
    report.threshold = options.threshold;
    for (const auto& id : ids) {
        auto it = manifest.slides.find(id);
        if (it == manifest.slides.end()) throw DataError("evaluate_cohort: no slide assets for " + id);
        const auto image_path = manifest.root / it->second.image;
        const auto mask_path = manifest.root / it->second.mask;
        if (!std::filesystem::exists(image_path)) throw DataError("evaluate_cohort: missing " + image_path.string());
        if (!std::filesystem::exists(mask_path)) throw DataError("evaluate_cohort: missing " + mask_path.string());
        const auto image = read_rgb_png(image_path);
        const auto truth = read_mask_png(mask_path);
        const auto pred = predict_slide(predictor, image, size, options.threshold, options.threads);
        report.per_slide[id] = jaccard(pred, truth);
        if (options.overlay_dir) {
            write_rgb_png(*options.overlay_dir / (id + "_overlay.png"), overlay_panel(image, truth, pred));
        }
    }
    report.average = mean_score(report.per_slide);
    return report;
}

template <typename Scalar>
std::map<std::string, Index> parameter_counts(const Model<Scalar>& model) {
    std::map<std::string, Index> counts;
    for (Component c : kAllComponents) counts[std::string(component_name(c))] = 0;
    Index total = 0;
    for (const auto& p : model.parameters()) {
        if (!p.trainable) continue;
        counts[std::string(component_name(p.component))] += p.value.size();
        total += p.value.size();
    }
    counts["total"] = total;
    return counts;
}

template TilePredictor model_predictor<float>(const Model<float>&, const Normalization&);
template TilePredictor model_predictor<double>(const Model<double>&, const Normalization&);
template std::map<std::string, Index> parameter_counts<float>(const Model<float>&);
template std::map<std::string, Index> parameter_counts<double>(const Model<double>&);

}  // namespace hitrans
