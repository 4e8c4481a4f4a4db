#pragma once

#include "hitrans/image.hpp"
#include "hitrans/metrics.hpp"
#include "hitrans/tensor.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace hitrans {

class DataError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// 8-bit RGB -> [0, 1] -> (x - mean) / std per channel.
struct Normalization {
    std::array<double, 3> mean{0.485, 0.456, 0.406};
    std::array<double, 3> std{0.229, 0.224, 0.225};
    friend bool operator==(const Normalization&, const Normalization&) = default;
};

void to_json(nlohmann::json& j, const Normalization& n);
void from_json(const nlohmann::json& j, Normalization& n);

/// (3, H, W)
template <typename Scalar>
Tensor<Scalar> normalize_image(const RgbImage& image, const Normalization& norm);
/// (1, H, W) of 0 / 1
template <typename Scalar>
Tensor<Scalar> mask_tensor(const Mask& mask);

/// Patch-level training unit: normalized image (3, S, S) and binary mask (1, S, S).
template <typename Scalar>
struct Sample {
    Tensor<Scalar> image;
    Tensor<Scalar> mask;
};

inline constexpr int kTissueDownsample = 32;

/// Otsu threshold of a thumbnail whose cells are rounded box averages of grayscale blocks.
/// Tissue is every cell at or below `level`; level is empty when the thumbnail has a single intensity.
struct TissueEstimate {
    Mask mask;  // slide-sized
    std::optional<int> level;
    int downsample = kTissueDownsample;
};

/// Rounded mean gray level per downsample x downsample block (partial blocks at the border average what exists).
Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> gray_thumbnail(const RgbImage& image,
                                                                                           int downsample);
/// Otsu level on a 256-bin histogram; smallest maximizer of the between-class variance.
std::optional<int> otsu_level(const std::array<std::int64_t, 256>& histogram);

TissueEstimate estimate_tissue(const RgbImage& image, int downsample = kTissueDownsample);
Mask estimate_tissue_mask(const RgbImage& image, int downsample = kTissueDownsample);
/// Tissue fraction of a grid-aligned crop given the slide-level Otsu level.
double tissue_fraction(const RgbImage& crop, std::optional<int> level, int downsample = kTissueDownsample);

struct PatchRecord {
    std::string slide_id;
    Index x = 0;
    Index y = 0;
    int size = 0;
    double tissue_fraction = 0.0;
    /// Slide-level Otsu level (-1 when the slide had no tissue); lets tissue_fraction be recomputed from the crop.
    int tissue_level = -1;
    std::string image_path;
    std::string mask_path;
    friend bool operator==(const PatchRecord&, const PatchRecord&) = default;
};

void to_json(nlohmann::json& j, const PatchRecord& r);
void from_json(const nlohmann::json& j, PatchRecord& r);

struct PatchifyOptions {
    int patch_size = 4096;
    double tissue_threshold = 0.5;
    int downsample = kTissueDownsample;
};

/// Seamless S-grid, partial border tiles dropped, tiles kept when tissue_fraction >= threshold.
/// Crops are written under out_dir / subdir; record paths are relative to out_dir.
std::vector<PatchRecord> patchify(const RgbImage& slide, const Mask& annotation, const std::string& slide_id,
                                  const PatchifyOptions& options, const std::filesystem::path& out_dir,
                                  const std::string& subdir = "patches");

struct Splits {
    std::vector<std::string> train, val, test;

    const std::vector<std::string>& get(const std::string& name) const;
    bool empty() const { return train.empty() && val.empty() && test.empty(); }
    friend bool operator==(const Splits&, const Splits&) = default;
};

/// Either absolute counts summing to the cohort size, or fractions summing to 1.
struct SplitRatios {
    std::array<double, 3> values{30, 10, 10};
    bool fractions = false;

    static SplitRatios counts(int train, int val, int test) { return {{double(train), double(val), double(test)}, false}; }
    static SplitRatios fractional(double train, double val, double test) { return {{train, val, test}, true}; }
};

/// Sorts ids, shuffles them with mt19937_64(seed), then cuts train | val | test.
Splits split_cohort(std::vector<std::string> slide_ids, const SplitRatios& ratios, std::uint64_t seed);

struct SlideAssets {
    std::string image;
    std::string mask;
    friend bool operator==(const SlideAssets&, const SlideAssets&) = default;
};

struct DatasetManifest {
    int patch_size = 0;
    double tissue_threshold = 0.5;
    Normalization normalization;
    std::uint64_t seed = 0;
    Splits split;
    /// Full-resolution slide and annotation per slide id, relative to root.
    std::map<std::string, SlideAssets> slides;
    std::string config_hash;
    std::vector<PatchRecord> records;
    /// Directory that relative paths resolve against; not serialized.
    std::filesystem::path root;

    /// Splits pairwise disjoint; once splits exist, every record's slide is in exactly one.
    void validate() const;
    std::vector<std::string> slide_ids() const;
    std::vector<const PatchRecord*> records_in(const std::string& split) const;
};

nlohmann::json manifest_header(const DatasetManifest& m);
/// JSON lines: header object first, then one record per line.
void write_manifest(const std::filesystem::path& file, const DatasetManifest& m);
DatasetManifest read_manifest(const std::filesystem::path& file);

std::string fnv1a_hex(const std::string& text);

/// Decodes the patch crops of one split; checks their size.
template <typename Scalar>
std::vector<Sample<Scalar>> load_samples(const DatasetManifest& manifest, const std::string& split);

using Rgb = std::array<std::uint8_t, 3>;

/// Desk-scale slides: pink tissue, white background holes, purple neoplasm blobs.
/// With global_context every tile carries a corner marker whose color decides the label of
/// orange "ambiguous" blobs placed in the far corner of the same tile.
struct SyntheticSpec {
    int num_slides = 8;
    int slide_width = 512;
    int slide_height = 512;
    int patch_size = 256;
    bool global_context = false;
    std::uint64_t seed = 0;
    int noise = 12;
    std::array<int, 3> split{6, 1, 1};
    double tissue_threshold = 0.5;
    Rgb background{242, 242, 242};
    Rgb tissue{200, 120, 165};
    Rgb neoplasm{130, 60, 175};
    Rgb ambiguous{205, 125, 80};
    Rgb marker_positive{40, 70, 210};
    Rgb marker_negative{40, 160, 60};

    void validate() const;
    /// Side of the square marker at each tile's top-left corner.
    int marker_size() const { return std::max(4, patch_size / 4); }
    /// Ambiguous pixels satisfy max(x, y) >= this, in tile coordinates.
    int ambiguous_offset() const { return patch_size * 3 / 4; }

    friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);

struct SyntheticSlide {
    std::string id;
    RgbImage image;
    Mask annotation;
    Mask ambiguous;  // pixels whose label depends on the marker
};

std::vector<SyntheticSlide> synthesize_slides(const SyntheticSpec& spec);

/// Writes slides/, patches/ and manifest.jsonl under out_dir and returns the manifest.
DatasetManifest synthesize_dataset(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

/// Nearest texture color of the 5x5 box mean; neoplasm and ambiguous map to 1.
Mask local_texture_oracle(const RgbImage& image, const SyntheticSpec& spec);

}  // namespace hitrans
