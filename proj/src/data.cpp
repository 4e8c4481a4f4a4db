#include "hitrans/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

namespace hitrans {

namespace {

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const char* what) {
    if (!j.is_object()) throw DataError(std::string(what) + " must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!allowed.count(key)) throw DataError(std::string("unknown ") + what + " key '" + key + "'");
    }
}

template <typename T>
void get_if(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace

void to_json(nlohmann::json& j, const Normalization& n) { j = nlohmann::json{{"mean", n.mean}, {"std", n.std}}; }

void from_json(const nlohmann::json& j, Normalization& n) {
    check_keys(j, {"mean", "std"}, "normalization");
    j.at("mean").get_to(n.mean);
    j.at("std").get_to(n.std);
    for (double s : n.std) {
        if (!(s > 0.0)) throw DataError("normalization std must be positive");
    }
}

template <typename Scalar>
Tensor<Scalar> normalize_image(const RgbImage& image, const Normalization& norm) {
    Tensor<Scalar> out({3, image.height, image.width});
    const Index plane = image.height * image.width;
    for (int c = 0; c < 3; ++c) {
        const double scale = 1.0 / (255.0 * norm.std[c]);
        const double shift = norm.mean[c] / norm.std[c];
        for (Index i = 0; i < plane; ++i) {
            out[c * plane + i] = static_cast<Scalar>(image.pixels[static_cast<std::size_t>(i * 3 + c)] * scale - shift);
        }
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> mask_tensor(const Mask& mask) {
    Tensor<Scalar> out({1, mask.rows(), mask.cols()});
    for (Index i = 0; i < mask.size(); ++i) out[i] = mask.data()[i] ? Scalar(1) : Scalar(0);
    return out;
}

Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> gray_thumbnail(const RgbImage& image,
                                                                                           int downsample) {
    if (downsample < 1) throw DataError("downsample must be >= 1");
    const Index rows = (image.height + downsample - 1) / downsample;
    const Index cols = (image.width + downsample - 1) / downsample;
    Eigen::Array<std::int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> sum =
        Eigen::Array<std::int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Zero(rows, cols);
    for (Index y = 0; y < image.height; ++y) {
        for (Index x = 0; x < image.width; ++x) {
            sum(y / downsample, x / downsample) += gray_level(image.at(y, x, 0), image.at(y, x, 1), image.at(y, x, 2));
        }
    }
    Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> thumb(rows, cols);
    for (Index r = 0; r < rows; ++r) {
        const Index h = std::min<Index>(downsample, image.height - r * downsample);
        for (Index c = 0; c < cols; ++c) {
            const Index w = std::min<Index>(downsample, image.width - c * downsample);
            const Index n = h * w;
            thumb(r, c) = static_cast<std::uint8_t>((sum(r, c) + n / 2) / n);
        }
    }
    return thumb;
}

std::optional<int> otsu_level(const std::array<std::int64_t, 256>& histogram) {
    std::int64_t total = 0, distinct = 0;
    double weighted = 0.0;
    for (int i = 0; i < 256; ++i) {
        total += histogram[i];
        distinct += histogram[i] > 0;
        weighted += double(i) * double(histogram[i]);
    }
    if (distinct < 2) return std::nullopt;
    std::int64_t count0 = 0;
    double sum0 = 0.0;
    double best = -1.0;
    int level = 0;
    for (int t = 0; t < 255; ++t) {
        count0 += histogram[t];
        sum0 += double(t) * double(histogram[t]);
        const std::int64_t count1 = total - count0;
        if (count0 == 0 || count1 == 0) continue;
        const double mu0 = sum0 / double(count0);
        const double mu1 = (weighted - sum0) / double(count1);
        const double between = double(count0) * double(count1) * (mu0 - mu1) * (mu0 - mu1);
        if (between > best) {
            best = between;
            level = t;
        }
    }
    return level;
}

TissueEstimate estimate_tissue(const RgbImage& image, int downsample) {
    const auto thumb = gray_thumbnail(image, downsample);
    std::array<std::int64_t, 256> hist{};
    for (Index i = 0; i < thumb.size(); ++i) ++hist[thumb.data()[i]];
    TissueEstimate est;
    est.downsample = downsample;
    est.level = otsu_level(hist);
    est.mask = Mask::Zero(image.height, image.width);
    if (!est.level) return est;
    for (Index y = 0; y < image.height; ++y) {
        for (Index x = 0; x < image.width; ++x) est.mask(y, x) = thumb(y / downsample, x / downsample) <= *est.level;
    }
    return est;
}

Mask estimate_tissue_mask(const RgbImage& image, int downsample) { return estimate_tissue(image, downsample).mask; }

double tissue_fraction(const RgbImage& crop, std::optional<int> level, int downsample) {
    if (!level || crop.width == 0 || crop.height == 0) return 0.0;
    const auto thumb = gray_thumbnail(crop, downsample);
    Index count = 0;
    for (Index r = 0; r < thumb.rows(); ++r) {
        const Index h = std::min<Index>(downsample, crop.height - r * downsample);
        for (Index c = 0; c < thumb.cols(); ++c) {
            const Index w = std::min<Index>(downsample, crop.width - c * downsample);
            if (thumb(r, c) <= *level) count += h * w;
        }
    }
    return static_cast<double>(count) / static_cast<double>(crop.width * crop.height);
}

void to_json(nlohmann::json& j, const PatchRecord& r) {
    j = nlohmann::json{{"slide_id", r.slide_id},
                       {"x", r.x},
                       {"y", r.y},
                       {"size", r.size},
                       {"tissue_fraction", r.tissue_fraction},
                       {"tissue_level", r.tissue_level},
                       {"image_path", r.image_path},
                       {"mask_path", r.mask_path}};
}

void from_json(const nlohmann::json& j, PatchRecord& r) {
    check_keys(j, {"slide_id", "x", "y", "size", "tissue_fraction", "tissue_level", "image_path", "mask_path"},
               "record");
    j.at("slide_id").get_to(r.slide_id);
    j.at("x").get_to(r.x);
    j.at("y").get_to(r.y);
    j.at("size").get_to(r.size);
    j.at("tissue_fraction").get_to(r.tissue_fraction);
    get_if(j, "tissue_level", r.tissue_level);
    j.at("image_path").get_to(r.image_path);
    j.at("mask_path").get_to(r.mask_path);
}

std::vector<PatchRecord> patchify(const RgbImage& slide, const Mask& annotation, const std::string& slide_id,
                                  const PatchifyOptions& options, const std::filesystem::path& out_dir,
                                  const std::string& subdir) {
    if (annotation.rows() != slide.height || annotation.cols() != slide.width) {
        throw DataError("patchify: slide " + slide_id + " is " + std::to_string(slide.width) + "x" +
                        std::to_string(slide.height) + " but its annotation is " + std::to_string(annotation.cols()) +
                        "x" + std::to_string(annotation.rows()));
    }
    const Index s = options.patch_size;
    if (s < 1) throw DataError("patchify: patch_size must be positive");
    std::error_code ec;
    std::filesystem::create_directories(out_dir / subdir, ec);
    if (ec || !std::filesystem::is_directory(out_dir / subdir)) {
        throw DataError("patchify: cannot create output directory " + (out_dir / subdir).string());
    }

    const auto tissue = estimate_tissue(slide, options.downsample);
    std::vector<PatchRecord> records;
    for (Index y = 0; y + s <= slide.height; y += s) {
        for (Index x = 0; x + s <= slide.width; x += s) {
            const Index count = tissue.mask.block(y, x, s, s).cast<Index>().sum();
            const double fraction = static_cast<double>(count) / static_cast<double>(s * s);
            if (fraction < options.tissue_threshold) continue;
            PatchRecord rec;
            rec.slide_id = slide_id;
            rec.x = x;
            rec.y = y;
            rec.size = options.patch_size;
            rec.tissue_fraction = fraction;
            rec.tissue_level = tissue.level.value_or(-1);
            const std::string stem = slide_id + "_" + std::to_string(x) + "_" + std::to_string(y);
            rec.image_path = subdir + "/" + stem + ".png";
            rec.mask_path = subdir + "/" + stem + "_mask.png";
            write_rgb_png(out_dir / rec.image_path, crop(slide, x, y, s, s));
            write_mask_png(out_dir / rec.mask_path, annotation.block(y, x, s, s));
            records.push_back(std::move(rec));
        }
    }
    return records;
}

const std::vector<std::string>& Splits::get(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw DataError("unknown split '" + name + "' (expected train, val or test)");
}

Splits split_cohort(std::vector<std::string> ids, const SplitRatios& ratios, std::uint64_t seed) {
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw DataError("split_cohort: duplicate slide id");
    const auto n = static_cast<std::int64_t>(ids.size());
    std::array<std::int64_t, 3> counts{};
    for (double v : ratios.values) {
        if (!(v >= 0.0)) throw DataError("split_cohort: ratios must be non-negative");
    }
    if (ratios.fractions) {
        const double sum = ratios.values[0] + ratios.values[1] + ratios.values[2];
        if (std::abs(sum - 1.0) > 1e-9) throw DataError("split_cohort: fractions must sum to 1");
        counts[1] = std::llround(ratios.values[1] * double(n));
        counts[2] = std::llround(ratios.values[2] * double(n));
        counts[0] = n - counts[1] - counts[2];
        if (counts[0] < 0) throw DataError("split_cohort: fractions leave no room for the training split");
    } else {
        for (int i = 0; i < 3; ++i) {
            if (ratios.values[i] != std::floor(ratios.values[i])) throw DataError("split_cohort: counts must be integers");
            counts[i] = static_cast<std::int64_t>(ratios.values[i]);
        }
        const std::int64_t sum = counts[0] + counts[1] + counts[2];
        if (sum > n) {
            throw DataError("split_cohort: counts " + std::to_string(sum) + " exceed cohort size " + std::to_string(n));
        }
        if (sum < n) {
            throw DataError("split_cohort: counts " + std::to_string(sum) + " do not cover cohort size " +
                            std::to_string(n));
        }
    }
    std::mt19937_64 rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    Splits out;
    auto it = ids.begin();
    out.train.assign(it, it + counts[0]);
    it += counts[0];
    out.val.assign(it, it + counts[1]);
    it += counts[1];
    out.test.assign(it, it + counts[2]);
    return out;
}

void DatasetManifest::validate() const {
    std::map<std::string, int> membership;
    for (const auto* part : {&split.train, &split.val, &split.test}) {
        for (const auto& id : *part) {
            if (++membership[id] > 1) throw DataError("manifest: slide " + id + " is in more than one split");
        }
    }
    for (const auto& r : records) {
        if (r.size != patch_size) throw DataError("manifest: record " + r.image_path + " has size " + std::to_string(r.size));
        if (r.x % r.size != 0 || r.y % r.size != 0) throw DataError("manifest: record " + r.image_path + " is off-grid");
        if (!(r.tissue_fraction >= 0.0 && r.tissue_fraction <= 1.0)) {
            throw DataError("manifest: record " + r.image_path + " has tissue_fraction outside [0, 1]");
        }
        if (!split.empty() && !membership.count(r.slide_id)) {
            throw DataError("manifest: slide " + r.slide_id + " is in no split");
        }
    }
}

std::vector<std::string> DatasetManifest::slide_ids() const {
    std::set<std::string> ids;
    for (const auto& [id, _] : slides) ids.insert(id);
    for (const auto& r : records) ids.insert(r.slide_id);
    return {ids.begin(), ids.end()};
}

std::vector<const PatchRecord*> DatasetManifest::records_in(const std::string& name) const {
    const auto& ids = split.get(name);
    const std::set<std::string> wanted(ids.begin(), ids.end());
    std::vector<const PatchRecord*> out;
    for (const auto& r : records) {
        if (wanted.count(r.slide_id)) out.push_back(&r);
    }
    return out;
}

nlohmann::json manifest_header(const DatasetManifest& m) {
    nlohmann::json slides = nlohmann::json::object();
    for (const auto& [id, a] : m.slides) slides[id] = {{"image", a.image}, {"mask", a.mask}};
    return nlohmann::json{{"patch_size", m.patch_size},
                          {"tissue_threshold", m.tissue_threshold},
                          {"normalization", m.normalization},
                          {"seed", m.seed},
                          {"split", {{"train", m.split.train}, {"val", m.split.val}, {"test", m.split.test}}},
                          {"slides", slides},
                          {"provenance", {{"config_hash", m.config_hash}, {"seed", m.seed}}}};
}

void write_manifest(const std::filesystem::path& file, const DatasetManifest& m) {
    m.validate();
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw DataError("cannot write manifest " + file.string());
    out << manifest_header(m).dump() << '\n';
    for (const auto& r : m.records) out << nlohmann::json(r).dump() << '\n';
    if (!out.flush()) throw DataError("failed writing manifest " + file.string());
}

DatasetManifest read_manifest(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw DataError("cannot open manifest " + file.string());
    DatasetManifest m;
    m.root = file.parent_path();
    std::string line;
    int lineno = 0;
    try {
        if (!std::getline(in, line)) throw DataError("manifest " + file.string() + " is empty");
        ++lineno;
        const auto h = nlohmann::json::parse(line);
        check_keys(h, {"patch_size", "tissue_threshold", "normalization", "seed", "split", "slides", "provenance"},
                   "manifest header");
        h.at("patch_size").get_to(m.patch_size);
        get_if(h, "tissue_threshold", m.tissue_threshold);
        get_if(h, "normalization", m.normalization);
        get_if(h, "seed", m.seed);
        if (h.contains("split")) {
            const auto& s = h.at("split");
            check_keys(s, {"train", "val", "test"}, "split");
            get_if(s, "train", m.split.train);
            get_if(s, "val", m.split.val);
            get_if(s, "test", m.split.test);
        }
        if (h.contains("slides")) {
            for (const auto& [id, a] : h.at("slides").items()) {
                check_keys(a, {"image", "mask"}, "slide assets");
                m.slides[id] = SlideAssets{a.at("image").get<std::string>(), a.at("mask").get<std::string>()};
            }
        }
        if (h.contains("provenance")) get_if(h.at("provenance"), "config_hash", m.config_hash);
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            m.records.push_back(nlohmann::json::parse(line).get<PatchRecord>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("manifest " + file.string() + " line " + std::to_string(lineno) + ": " + e.what());
    }
    m.validate();
    return m;
}

std::string fnv1a_hex(const std::string& text) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

template <typename Scalar>
std::vector<Sample<Scalar>> load_samples(const DatasetManifest& manifest, const std::string& split) {
    std::vector<Sample<Scalar>> out;
    for (const auto* r : manifest.records_in(split)) {
        const auto image = read_rgb_png(manifest.root / r->image_path);
        const auto mask = read_mask_png(manifest.root / r->mask_path);
        if (image.width != r->size || image.height != r->size || mask.rows() != r->size || mask.cols() != r->size) {
            throw DataError("patch " + r->image_path + " does not have the declared size " + std::to_string(r->size));
        }
        out.push_back({normalize_image<Scalar>(image, manifest.normalization), mask_tensor<Scalar>(mask)});
    }
    return out;
}

void SyntheticSpec::validate() const {
    if (num_slides < 1) throw DataError("synthetic: num_slides must be >= 1");
    if (patch_size < 32 || patch_size % kTissueDownsample != 0) {
        throw DataError("synthetic: patch_size must be a positive multiple of 32");
    }
    if (slide_width < patch_size || slide_height < patch_size || slide_width % patch_size != 0 ||
        slide_height % patch_size != 0) {
        throw DataError("synthetic: slide sizes must be positive multiples of patch_size");
    }
    if (noise < 0 || noise > 60) throw DataError("synthetic: noise must be in [0, 60]");
    if (split[0] < 0 || split[1] < 0 || split[2] < 0 || split[0] + split[1] + split[2] != num_slides) {
        throw DataError("synthetic: split counts must be non-negative and sum to num_slides");
    }
}

void to_json(nlohmann::json& j, const SyntheticSpec& s) {
    j = nlohmann::json{{"num_slides", s.num_slides},
                       {"slide_width", s.slide_width},
                       {"slide_height", s.slide_height},
                       {"patch_size", s.patch_size},
                       {"global_context", s.global_context},
                       {"seed", s.seed},
                       {"noise", s.noise},
                       {"split", s.split},
                       {"tissue_threshold", s.tissue_threshold},
                       {"background", s.background},
                       {"tissue", s.tissue},
                       {"neoplasm", s.neoplasm},
                       {"ambiguous", s.ambiguous},
                       {"marker_positive", s.marker_positive},
                       {"marker_negative", s.marker_negative}};
}

void from_json(const nlohmann::json& j, SyntheticSpec& s) {
    check_keys(j,
               {"num_slides", "slide_width", "slide_height", "patch_size", "global_context", "seed", "noise", "split",
                "tissue_threshold", "background", "tissue", "neoplasm", "ambiguous", "marker_positive",
                "marker_negative"},
               "synthetic");
    get_if(j, "num_slides", s.num_slides);
    get_if(j, "slide_width", s.slide_width);
    get_if(j, "slide_height", s.slide_height);
    get_if(j, "patch_size", s.patch_size);
    get_if(j, "global_context", s.global_context);
    get_if(j, "seed", s.seed);
    get_if(j, "noise", s.noise);
    get_if(j, "split", s.split);
    get_if(j, "tissue_threshold", s.tissue_threshold);
    get_if(j, "background", s.background);
    get_if(j, "tissue", s.tissue);
    get_if(j, "neoplasm", s.neoplasm);
    get_if(j, "ambiguous", s.ambiguous);
    get_if(j, "marker_positive", s.marker_positive);
    get_if(j, "marker_negative", s.marker_negative);
}

namespace {

enum Texture : std::uint8_t { kBackground, kTissue, kNeoplasm, kAmbiguous, kMarkerPositive, kMarkerNegative };

using TextureMap = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void paint_disk(TextureMap& tex, Index x0, Index y0, Index s, double cx, double cy, double r, std::uint8_t value) {
    for (Index y = 0; y < s; ++y) {
        for (Index x = 0; x < s; ++x) {
            const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            if (dx * dx + dy * dy <= r * r) tex(y0 + y, x0 + x) = value;
        }
    }
}

void paint_tile(TextureMap& tex, Index x0, Index y0, const SyntheticSpec& spec, std::mt19937_64& rng) {
    const int s = spec.patch_size;
    const int m = spec.marker_size();
    auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    auto coin = [&] { return std::bernoulli_distribution(0.5)(rng); };

    tex.block(y0, x0, s, s).setConstant(kTissue);
    paint_disk(tex, x0, y0, s, uniform(0, s), uniform(0, s), uniform(s / 6.0, s / 3.5), kBackground);

    const int blobs = coin() ? 2 : 1;
    for (int b = 0; b < blobs; ++b) {
        const double r = uniform(s / 12.0, s / 6.0);
        double cx, cy;
        do {
            cx = uniform(0, s);
            cy = uniform(0, s);
        } while (spec.global_context && std::max(cx, cy) - r < m + 2);
        paint_disk(tex, x0, y0, s, cx, cy, r, kNeoplasm);
    }
    if (!spec.global_context) return;

    const double offset = spec.ambiguous_offset();
    const int ambiguous = std::uniform_int_distribution<int>(2, 4)(rng);
    for (int b = 0; b < ambiguous; ++b) {
        const double r = uniform(s / 14.0, s / 8.0);
        double near = uniform(r, s - r);
        double far = uniform(offset + r, s - r);
        if (coin()) std::swap(near, far);
        paint_disk(tex, x0, y0, s, near, far, r, kAmbiguous);
    }
    tex.block(y0, x0, m, m).setConstant(coin() ? kMarkerPositive : kMarkerNegative);
}

}  // namespace

std::vector<SyntheticSlide> synthesize_slides(const SyntheticSpec& spec) {
    spec.validate();
    std::mt19937_64 master(spec.seed);
    const std::array<Rgb, 6> palette{spec.background, spec.tissue,           spec.neoplasm,
                                     spec.ambiguous,  spec.marker_positive, spec.marker_negative};
    std::vector<SyntheticSlide> slides;
    for (int n = 0; n < spec.num_slides; ++n) {
        std::mt19937_64 rng(master());
        SyntheticSlide slide;
        std::ostringstream id;
        id << "slide" << std::setw(3) << std::setfill('0') << n;
        slide.id = id.str();

        TextureMap tex(spec.slide_height, spec.slide_width);
        Mask positive_marker = Mask::Zero(spec.slide_height, spec.slide_width);
        for (Index y0 = 0; y0 < spec.slide_height; y0 += spec.patch_size) {
            for (Index x0 = 0; x0 < spec.slide_width; x0 += spec.patch_size) {
                paint_tile(tex, x0, y0, spec, rng);
                if (spec.global_context && tex(y0, x0) == kMarkerPositive) {
                    positive_marker.block(y0, x0, spec.patch_size, spec.patch_size).setOnes();
                }
            }
        }

        slide.image = RgbImage(spec.slide_width, spec.slide_height);
        slide.annotation = Mask::Zero(spec.slide_height, spec.slide_width);
        slide.ambiguous = Mask::Zero(spec.slide_height, spec.slide_width);
        std::uniform_int_distribution<int> noise(-spec.noise, spec.noise);
        for (Index y = 0; y < spec.slide_height; ++y) {
            for (Index x = 0; x < spec.slide_width; ++x) {
                const auto t = tex(y, x);
                for (int c = 0; c < 3; ++c) {
                    slide.image.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(palette[t][c] + noise(rng), 0, 255));
                }
                slide.ambiguous(y, x) = t == kAmbiguous;
                slide.annotation(y, x) = t == kNeoplasm || (t == kAmbiguous && positive_marker(y, x));
            }
        }
        slides.push_back(std::move(slide));
    }
    return slides;
}

DatasetManifest synthesize_dataset(const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
    const auto slides = synthesize_slides(spec);
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "slides", ec);
    if (ec) throw DataError("cannot create " + (out_dir / "slides").string() + ": " + ec.message());

    DatasetManifest m;
    m.patch_size = spec.patch_size;
    m.tissue_threshold = spec.tissue_threshold;
    m.seed = spec.seed;
    m.config_hash = fnv1a_hex(nlohmann::json(spec).dump());
    m.root = out_dir;
    std::vector<std::string> ids;
    PatchifyOptions options;
    options.patch_size = spec.patch_size;
    options.tissue_threshold = spec.tissue_threshold;
    for (const auto& s : slides) {
        SlideAssets assets{"slides/" + s.id + ".png", "slides/" + s.id + "_mask.png"};
        write_rgb_png(out_dir / assets.image, s.image);
        write_mask_png(out_dir / assets.mask, s.annotation);
        m.slides[s.id] = assets;
        auto recs = patchify(s.image, s.annotation, s.id, options, out_dir);
        m.records.insert(m.records.end(), recs.begin(), recs.end());
        ids.push_back(s.id);
    }
    m.split = split_cohort(ids, SplitRatios::counts(spec.split[0], spec.split[1], spec.split[2]), spec.seed);
    write_manifest(out_dir / "manifest.jsonl", m);
    return m;
}

Mask local_texture_oracle(const RgbImage& image, const SyntheticSpec& spec) {
    const std::array<Rgb, 6> palette{spec.background, spec.tissue,           spec.neoplasm,
                                     spec.ambiguous,  spec.marker_positive, spec.marker_negative};
    const Index h = image.height, w = image.width;
    // Integral image per channel.
    std::array<Eigen::Array<std::int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 3> integral;
    for (int c = 0; c < 3; ++c) {
        integral[c] = Eigen::Array<std::int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Zero(h + 1, w + 1);
        for (Index y = 0; y < h; ++y) {
            for (Index x = 0; x < w; ++x) {
                integral[c](y + 1, x + 1) =
                    image.at(y, x, c) + integral[c](y, x + 1) + integral[c](y + 1, x) - integral[c](y, x);
            }
        }
    }
    Mask out(h, w);
    for (Index y = 0; y < h; ++y) {
        const Index y0 = std::max<Index>(0, y - 2), y1 = std::min<Index>(h, y + 3);
        for (Index x = 0; x < w; ++x) {
            const Index x0 = std::max<Index>(0, x - 2), x1 = std::min<Index>(w, x + 3);
            const double n = double((y1 - y0) * (x1 - x0));
            std::array<double, 3> mean;
            for (int c = 0; c < 3; ++c) {
                mean[c] = double(integral[c](y1, x1) - integral[c](y0, x1) - integral[c](y1, x0) + integral[c](y0, x0)) / n;
            }
            int best = 0;
            double best_d = 1e300;
            for (int t = 0; t < 6; ++t) {
                double d = 0;
                for (int c = 0; c < 3; ++c) d += (mean[c] - palette[t][c]) * (mean[c] - palette[t][c]);
                if (d < best_d) {
                    best_d = d;
                    best = t;
                }
            }
            out(y, x) = best == kNeoplasm || best == kAmbiguous;
        }
    }
    return out;
}

#define HITRANS_INSTANTIATE(S)                                                                    \
    template Tensor<S> normalize_image<S>(const RgbImage&, const Normalization&);                 \
    template Tensor<S> mask_tensor<S>(const Mask&);                                               \
    template std::vector<Sample<S>> load_samples<S>(const DatasetManifest&, const std::string&);

HITRANS_INSTANTIATE(float)
HITRANS_INSTANTIATE(double)

}  // namespace hitrans
