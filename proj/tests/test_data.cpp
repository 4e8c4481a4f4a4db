#include "hitrans/data.hpp"

#include <gtest/gtest.h>
#include <png.h>

#include <algorithm>
#include <fstream>
#include <random>
#include <set>

using namespace hitrans;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("hitrans_data_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

RgbImage noisy(Index w, Index h, Rgb base, int noise, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> d(-noise, noise);
    RgbImage img(w, h);
    for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(base[c] + d(rng), 0, 255));
        }
    }
    return img;
}

/// Left `dark_cols` columns dark, the rest white.
RgbImage half_dark(Index w, Index h, Index dark_cols, int offset = 0) {
    RgbImage img(w, h);
    for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
            const int v = (x < dark_cols ? 90 : 235) + offset;
            img.set(y, x, {std::uint8_t(v), std::uint8_t(v), std::uint8_t(v)});
        }
    }
    return img;
}

std::string read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST(Tissue, PureWhiteHasNoTissue) {
    const auto est = estimate_tissue(RgbImage(128, 96, {255, 255, 255}));
    EXPECT_FALSE(est.level.has_value());
    EXPECT_EQ(est.mask.cast<int>().sum(), 0);
    EXPECT_EQ(est.mask.rows(), 96);
    EXPECT_EQ(est.mask.cols(), 128);
}

TEST(Tissue, HalfDarkHalfWhiteSplitsExactly) {
    const auto img = half_dark(256, 128, 128);
    const auto mask = estimate_tissue_mask(img);
    for (Index y = 0; y < 128; ++y) {
        for (Index x = 0; x < 256; ++x) ASSERT_EQ(mask(y, x), x < 128 ? 1 : 0) << y << "," << x;
    }
}

TEST(Tissue, BrightnessOffsetInvariance) {
    const auto base = estimate_tissue_mask(half_dark(192, 160, 96));
    for (int offset : {-15, -4, 3, 12}) {
        EXPECT_TRUE((estimate_tissue_mask(half_dark(192, 160, 96, offset)) == base).all()) << offset;
    }
}

TEST(Tissue, OtsuPicksBetweenModes) {
    std::array<std::int64_t, 256> hist{};
    hist[40] = 10;
    hist[200] = 30;
    const auto level = otsu_level(hist);
    ASSERT_TRUE(level);
    EXPECT_EQ(*level, 40);
    hist.fill(0);
    hist[7] = 5;
    EXPECT_FALSE(otsu_level(hist));
}

TEST(Tissue, ThumbnailRoundsBlockMeans) {
    RgbImage img(64, 32, {0, 0, 0});
    img.set(0, 0, {255, 255, 255});
    const auto thumb = gray_thumbnail(img, 32);
    ASSERT_EQ(thumb.rows(), 1);
    ASSERT_EQ(thumb.cols(), 2);
    EXPECT_EQ(thumb(0, 0), 0);  // 255 / 1024 rounds to 0
    img.set(0, 32, {255, 255, 255});
    img.set(1, 32, {255, 255, 255});
    img.set(2, 32, {255, 255, 255});
    img.set(3, 32, {255, 255, 255});
    EXPECT_EQ(gray_thumbnail(img, 32)(0, 1), 1);  // 1020 / 1024
}

TEST(Patchify, AllTissueGrid) {
    const int s = 64;
    const auto dir = temp_dir("grid");
    const auto slide = noisy(3 * s, 2 * s, {150, 90, 130}, 10, 1);
    // one white corner block keeps Otsu two-moded without dropping any tile
    auto img = slide;
    for (Index y = 0; y < 32; ++y)
        for (Index x = 0; x < 32; ++x) img.set(y, x, {245, 245, 245});
    PatchifyOptions opt;
    opt.patch_size = s;
    const auto recs = patchify(img, Mask::Zero(2 * s, 3 * s), "a", opt, dir);
    ASSERT_EQ(recs.size(), 6u);
    std::vector<std::pair<Index, Index>> got;
    for (const auto& r : recs) got.emplace_back(r.x, r.y);
    const std::vector<std::pair<Index, Index>> want{{0, 0}, {64, 0}, {128, 0}, {0, 64}, {64, 64}, {128, 64}};
    EXPECT_EQ(got, want);
    EXPECT_DOUBLE_EQ(recs[0].tissue_fraction, 0.75);
    EXPECT_DOUBLE_EQ(recs[1].tissue_fraction, 1.0);
    EXPECT_EQ(recs[2].image_path, "patches/a_128_0.png");
    EXPECT_EQ(recs[2].mask_path, "patches/a_128_0_mask.png");
}

TEST(Patchify, PartialColumnDropped) {
    const int s = 64;
    const auto dir = temp_dir("partial");
    auto img = noisy(3 * s + 17, 2 * s, {150, 90, 130}, 10, 2);
    for (Index y = 0; y < 32; ++y)
        for (Index x = 0; x < 32; ++x) img.set(y, x, {245, 245, 245});
    PatchifyOptions opt;
    opt.patch_size = s;
    const auto recs = patchify(img, Mask::Zero(2 * s, 3 * s + 17), "b", opt, dir);
    EXPECT_EQ(recs.size(), 6u);
    for (const auto& r : recs) EXPECT_LE(r.x + s, 3 * s);
}

TEST(Patchify, AllWhiteGivesNothing) {
    const auto dir = temp_dir("white");
    PatchifyOptions opt;
    opt.patch_size = 64;
    EXPECT_TRUE(patchify(RgbImage(192, 128, {250, 250, 250}), Mask::Zero(128, 192), "w", opt, dir).empty());
}

TEST(Patchify, ThresholdFiltersTiles) {
    const auto dir = temp_dir("threshold");
    const auto img = half_dark(128, 64, 96);  // left tile all tissue, right tile half
    PatchifyOptions opt;
    opt.patch_size = 64;
    const auto recs = patchify(img, Mask::Zero(64, 128), "t", opt, dir);
    ASSERT_EQ(recs.size(), 2u);
    EXPECT_EQ(recs[1].tissue_fraction, 0.5);
    opt.tissue_threshold = 0.51;
    const auto strict = patchify(img, Mask::Zero(64, 128), "t", opt, dir);
    ASSERT_EQ(strict.size(), 1u);
    EXPECT_EQ(strict[0].x, 0);
}

TEST(Patchify, SizeMismatchAndUnwritableDir) {
    PatchifyOptions opt;
    opt.patch_size = 32;
    EXPECT_THROW(patchify(RgbImage(64, 64), Mask::Zero(64, 63), "x", opt, temp_dir("mm")), DataError);
    const auto dir = temp_dir("blocked");
    std::ofstream(dir / "patches") << "file in the way";
    EXPECT_THROW(patchify(RgbImage(64, 64), Mask::Zero(64, 64), "x", opt, dir), DataError);
}

TEST(Split, PaperCohortSizes) {
    std::vector<std::string> ids;
    for (int i = 0; i < 50; ++i) ids.push_back("s" + std::to_string(i));
    const auto s = split_cohort(ids, SplitRatios::counts(30, 10, 10), 3);
    EXPECT_EQ(s.train.size(), 30u);
    EXPECT_EQ(s.val.size(), 10u);
    EXPECT_EQ(s.test.size(), 10u);
}

TEST(Split, PartitionAndDeterminismProperty) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 40; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 60);
        std::vector<std::string> ids;
        for (int i = 0; i < n; ++i) ids.push_back("id" + std::to_string(rng() % 100000) + "_" + std::to_string(i));
        const int a = static_cast<int>(rng() % (n + 1));
        const int b = static_cast<int>(rng() % (n - a + 1));
        const auto seed = rng();
        auto shuffled = ids;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        const auto s1 = split_cohort(ids, SplitRatios::counts(a, b, n - a - b), seed);
        const auto s2 = split_cohort(shuffled, SplitRatios::counts(a, b, n - a - b), seed);
        EXPECT_EQ(s1, s2);
        std::multiset<std::string> all(s1.train.begin(), s1.train.end());
        all.insert(s1.val.begin(), s1.val.end());
        all.insert(s1.test.begin(), s1.test.end());
        EXPECT_EQ(all, std::multiset<std::string>(ids.begin(), ids.end()));
    }
}

TEST(Split, SeedsDiffer) {
    std::vector<std::string> ids;
    for (int i = 0; i < 50; ++i) ids.push_back("s" + std::to_string(i));
    EXPECT_NE(split_cohort(ids, SplitRatios::counts(30, 10, 10), 1).train,
              split_cohort(ids, SplitRatios::counts(30, 10, 10), 2).train);
}

TEST(Split, Errors) {
    const std::vector<std::string> ids{"a", "b", "c"};
    EXPECT_THROW(split_cohort(ids, SplitRatios::counts(2, 1, 1), 0), DataError);
    EXPECT_THROW(split_cohort(ids, SplitRatios::counts(1, 1, 0), 0), DataError);
    EXPECT_THROW(split_cohort({"a", "a"}, SplitRatios::counts(1, 1, 0), 0), DataError);
    EXPECT_THROW(split_cohort(ids, SplitRatios::fractional(0.5, 0.2, 0.2), 0), DataError);
    const auto f = split_cohort({"a", "b", "c", "d", "e", "f", "g", "h", "i", "j"}, SplitRatios::fractional(0.6, 0.2, 0.2), 0);
    EXPECT_EQ(f.train.size(), 6u);
    EXPECT_EQ(f.val.size(), 2u);
    EXPECT_EQ(f.test.size(), 2u);
}

TEST(Manifest, RoundTripAndStrictKeys) {
    const auto dir = temp_dir("manifest");
    DatasetManifest m;
    m.patch_size = 64;
    m.seed = 9;
    m.split.train = {"a"};
    m.split.test = {"b"};
    m.slides["a"] = {"slides/a.png", "slides/a_mask.png"};
    m.config_hash = "abc";
    PatchRecord r;
    r.slide_id = "a";
    r.x = 64;
    r.size = 64;
    r.tissue_fraction = 0.8125;
    r.tissue_level = 171;
    r.image_path = "patches/a_64_0.png";
    r.mask_path = "patches/a_64_0_mask.png";
    m.records.push_back(r);
    write_manifest(dir / "manifest.jsonl", m);
    const auto back = read_manifest(dir / "manifest.jsonl");
    EXPECT_EQ(back.patch_size, 64);
    EXPECT_EQ(back.seed, 9u);
    EXPECT_EQ(back.split, m.split);
    EXPECT_EQ(back.slides, m.slides);
    EXPECT_EQ(back.records, m.records);
    EXPECT_EQ(back.config_hash, "abc");
    EXPECT_EQ(back.root, dir);

    auto text = read_bytes(dir / "manifest.jsonl");
    text.replace(text.find("\"x\""), 3, "\"q\"");
    std::ofstream(dir / "bad.jsonl") << text;
    EXPECT_THROW(read_manifest(dir / "bad.jsonl"), DataError);
}

TEST(Manifest, ValidateRejectsOverlapAndOffGrid) {
    DatasetManifest m;
    m.patch_size = 64;
    m.split.train = {"a"};
    m.split.val = {"a"};
    EXPECT_THROW(m.validate(), DataError);
    m.split.val.clear();
    PatchRecord r;
    r.slide_id = "a";
    r.size = 64;
    r.x = 10;
    m.records.push_back(r);
    EXPECT_THROW(m.validate(), DataError);
    m.records[0].x = 0;
    m.records[0].slide_id = "z";
    EXPECT_THROW(m.validate(), DataError);
}

class SyntheticDataset : public ::testing::Test {
  protected:
    static void SetUpTestSuite() {
        spec_ = new SyntheticSpec;
        spec_->num_slides = 4;
        spec_->slide_width = 256;
        spec_->slide_height = 192;
        spec_->patch_size = 64;
        spec_->split = {2, 1, 1};
        spec_->seed = 7;
        dir_ = new std::filesystem::path(temp_dir("synthetic"));
        manifest_ = new DatasetManifest(synthesize_dataset(*spec_, *dir_));
    }
    static void TearDownTestSuite() {
        delete manifest_;
        delete dir_;
        delete spec_;
    }
    static SyntheticSpec* spec_;
    static std::filesystem::path* dir_;
    static DatasetManifest* manifest_;
};

SyntheticSpec* SyntheticDataset::spec_ = nullptr;
std::filesystem::path* SyntheticDataset::dir_ = nullptr;
DatasetManifest* SyntheticDataset::manifest_ = nullptr;

TEST_F(SyntheticDataset, BitIdenticalRegeneration) {
    const auto again = temp_dir("synthetic_again");
    const auto m2 = synthesize_dataset(*spec_, again);
    EXPECT_EQ(m2.records, manifest_->records);
    EXPECT_EQ(read_bytes(again / "manifest.jsonl"), read_bytes(*dir_ / "manifest.jsonl"));
    for (const auto& r : manifest_->records) {
        ASSERT_EQ(read_bytes(again / r.image_path), read_bytes(*dir_ / r.image_path));
        ASSERT_EQ(read_bytes(again / r.mask_path), read_bytes(*dir_ / r.mask_path));
    }
}

TEST_F(SyntheticDataset, MostTilesKeptAndSplitsCover) {
    EXPECT_GE(manifest_->records.size(), 40u);  // 48 tiles total
    EXPECT_EQ(manifest_->split.train.size(), 2u);
    EXPECT_EQ(manifest_->split.val.size(), 1u);
    EXPECT_EQ(manifest_->split.test.size(), 1u);
    EXPECT_EQ(manifest_->slide_ids().size(), 4u);
}

TEST_F(SyntheticDataset, RecordsDecodeAlignAndRecomputeTissue) {
    for (const auto& id : manifest_->slide_ids()) {
        const auto& a = manifest_->slides.at(id);
        const auto slide = read_rgb_png(*dir_ / a.image);
        const auto annot = read_mask_png(*dir_ / a.mask);
        ASSERT_EQ(slide.width, 256);
        ASSERT_EQ(slide.height, 192);
        ASSERT_EQ(annot.rows(), 192);
        ASSERT_EQ(annot.cols(), 256);
        std::set<std::pair<Index, Index>> seen;
        for (const auto& r : manifest_->records) {
            if (r.slide_id != id) continue;
            EXPECT_TRUE(seen.emplace(r.x, r.y).second);
            const auto img = read_rgb_png(*dir_ / r.image_path);
            const auto mask = read_mask_png(*dir_ / r.mask_path);
            ASSERT_EQ(img, crop(slide, r.x, r.y, r.size, r.size));
            ASSERT_TRUE((mask == annot.block(r.y, r.x, r.size, r.size)).all());
            ASSERT_GE(r.tissue_level, 0);
            EXPECT_EQ(tissue_fraction(img, r.tissue_level), r.tissue_fraction);
            EXPECT_GE(r.tissue_fraction, spec_->tissue_threshold);
            EXPECT_LE(r.tissue_fraction, 1.0);
        }
    }
}

TEST_F(SyntheticDataset, MaskFilesAreSingleChannelZeroOr255) {
    for (const auto& r : manifest_->records) {
        png_image png{};
        png.version = PNG_IMAGE_VERSION;
        ASSERT_TRUE(png_image_begin_read_from_file(&png, (*dir_ / r.mask_path).c_str()));
        EXPECT_EQ(PNG_IMAGE_PIXEL_CHANNELS(png.format), 1u);
        png.format = PNG_FORMAT_GRAY;
        std::vector<std::uint8_t> raw(PNG_IMAGE_SIZE(png));
        ASSERT_TRUE(png_image_finish_read(&png, nullptr, raw.data(), 0, nullptr));
        ASSERT_EQ(png.width, 64u);
        for (auto v : raw) ASSERT_TRUE(v == 0 || v == 255);
    }
}

TEST_F(SyntheticDataset, SamplesLoadNormalized) {
    const auto train = load_samples<float>(*manifest_, "train");
    ASSERT_FALSE(train.empty());
    EXPECT_EQ(train[0].image.shape(), (std::vector<Index>{3, 64, 64}));
    EXPECT_EQ(train[0].mask.shape(), (std::vector<Index>{1, 64, 64}));
}

TEST(Synthetic, MasksBinaryAndSized) {
    SyntheticSpec spec;
    spec.num_slides = 2;
    spec.slide_width = 128;
    spec.slide_height = 64;
    spec.patch_size = 64;
    spec.split = {1, 1, 0};
    spec.global_context = true;
    for (const auto& s : synthesize_slides(spec)) {
        EXPECT_EQ(s.annotation.rows(), 64);
        EXPECT_EQ(s.annotation.cols(), 128);
        EXPECT_TRUE((s.annotation <= 1).all());
        EXPECT_TRUE((s.ambiguous <= 1).all());
        EXPECT_EQ(s.image.width, 128);
    }
}

TEST(Synthetic, RejectsInvalidSpecs) {
    SyntheticSpec spec;
    spec.patch_size = 48;
    EXPECT_THROW(synthesize_slides(spec), DataError);
    spec = {};
    spec.slide_width = 300;
    EXPECT_THROW(synthesize_slides(spec), DataError);
    spec = {};
    spec.split = {6, 1, 0};
    EXPECT_THROW(synthesize_slides(spec), DataError);
    EXPECT_THROW(nlohmann::json({{"num_slide", 3}}).get<SyntheticSpec>(), DataError);
}

TEST(Synthetic, JsonRoundTrip) {
    SyntheticSpec spec;
    spec.global_context = true;
    spec.seed = 42;
    spec.tissue = {1, 2, 3};
    EXPECT_EQ(nlohmann::json(spec).get<SyntheticSpec>(), spec);
}

TEST(Synthetic, LocalOracleSolvesPlainTask) {
    SyntheticSpec spec;
    spec.num_slides = 3;
    spec.patch_size = 128;
    spec.slide_width = 256;
    spec.slide_height = 256;
    spec.split = {3, 0, 0};
    for (const auto& s : synthesize_slides(spec)) {
        EXPECT_GE(jaccard(local_texture_oracle(s.image, spec), s.annotation), 0.95) << s.id;
    }
}

TEST(Synthetic, LocalOracleIsAtChanceOnAmbiguousTexture) {
    SyntheticSpec spec;
    spec.num_slides = 12;
    spec.patch_size = 128;
    spec.slide_width = 256;
    spec.slide_height = 256;
    spec.split = {12, 0, 0};
    spec.global_context = true;
    Index correct = 0, total = 0;
    double overall = 0.0;
    const auto slides = synthesize_slides(spec);
    for (const auto& s : slides) {
        const auto pred = local_texture_oracle(s.image, spec);
        overall += jaccard(pred, s.annotation);
        for (Index i = 0; i < pred.size(); ++i) {
            if (!s.ambiguous.data()[i]) continue;
            ++total;
            correct += pred.data()[i] == s.annotation.data()[i];
        }
    }
    ASSERT_GT(total, 0);
    const double acc = double(correct) / double(total);
    EXPECT_GT(acc, 0.3);
    EXPECT_LT(acc, 0.7);
    EXPECT_LT(overall / double(slides.size()), 0.95);
}

TEST(Synthetic, AmbiguousBlobsStayInFarCorner) {
    SyntheticSpec spec;
    spec.num_slides = 4;
    spec.patch_size = 128;
    spec.slide_width = 256;
    spec.slide_height = 256;
    spec.split = {4, 0, 0};
    spec.global_context = true;
    const Index s = spec.patch_size, off = spec.ambiguous_offset();
    for (const auto& sl : synthesize_slides(spec)) {
        for (Index y = 0; y < sl.ambiguous.rows(); ++y) {
            for (Index x = 0; x < sl.ambiguous.cols(); ++x) {
                if (sl.ambiguous(y, x)) ASSERT_GE(std::max(x % s, y % s), off);
            }
        }
    }
}

TEST(Normalization, MapsChannels) {
    RgbImage img(2, 1, {255, 0, 128});
    Normalization n;
    const auto t = normalize_image<double>(img, n);
    EXPECT_EQ(t.shape(), (std::vector<Index>{3, 1, 2}));
    EXPECT_NEAR(t[0], (1.0 - 0.485) / 0.229, 1e-12);
    EXPECT_NEAR(t[2], (0.0 - 0.456) / 0.224, 1e-12);
    EXPECT_NEAR(t[4], (128.0 / 255.0 - 0.406) / 0.225, 1e-12);
    EXPECT_THROW(nlohmann::json({{"mean", {0, 0, 0}}, {"std", {1, 0, 1}}}).get<Normalization>(), DataError);
}
