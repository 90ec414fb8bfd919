#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include "json.hpp"
#include <random>

#include "dafd/data.hpp"
#include "test_util.hpp"

using namespace dafd;
using namespace dafd::data;
using dafd::test_util::max_abs_diff;

namespace {

const std::vector<ShapeKind> kFour{ShapeKind::disk, ShapeKind::square, ShapeKind::cross, ShapeKind::ring};

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("dafd_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::string error_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const std::exception& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(GenShapes, DeterministicAndBalanced) {
    const auto a = gen_shapes(kFour, 20, 18, 42);
    const auto b = gen_shapes(kFour, 20, 18, 42);
    const auto c = gen_shapes(kFour, 20, 18, 43);
    EXPECT_EQ(a.digest(), b.digest());
    EXPECT_NE(a.digest(), c.digest());
    EXPECT_EQ(a.class_counts(), (std::vector<std::size_t>{20, 20, 20, 20}));
    EXPECT_EQ(a.images.shape(), (Shape4{80, 1, 18, 18}));
    for (double v : a.images.data()) {
        EXPECT_GE(v, -1.0);
        EXPECT_LE(v, 1.0);
    }
    EXPECT_THROW(gen_shapes(kFour, 1, 10, 1), std::invalid_argument);
    EXPECT_THROW(gen_shapes({}, 1, 18, 1), std::invalid_argument);
    EXPECT_THROW(parse_shape("triangle"), std::invalid_argument);
}

TEST(GenShapes, NearestCentroidLearnable) {
    const auto train = gen_shapes(kFour, 200, 18, 1);
    const auto test = gen_shapes(kFour, 200, 18, 2);
    const std::size_t d = train.images.per_sample();
    std::vector<std::vector<double>> centroid(4, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < train.size(); ++i) {
        const auto s = train.images.sample(i);
        for (std::size_t k = 0; k < d; ++k) centroid[std::size_t(train.labels[i])][k] += s[k] / 200.0;
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const auto s = test.images.sample(i);
        int best = 0;
        double best_d = 1e300;
        for (int c = 0; c < 4; ++c) {
            double dist = 0.0;
            for (std::size_t k = 0; k < d; ++k) dist += (s[k] - centroid[std::size_t(c)][k]) * (s[k] - centroid[std::size_t(c)][k]);
            if (dist < best_d) best_d = dist, best = c;
        }
        correct += best == test.labels[i];
    }
    EXPECT_GE(double(correct) / double(test.size()), 0.9);
}

TEST(PatchRotate, HandWorkedBlock) {
    Dataset ds;
    ds.images = Tensor4<double>({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    ds.labels = {0};
    ds.num_classes = 1;
    const auto shifted = apply_shift(ds, ShiftSpec::parse("patch-rotate-negate"), {1, "target"});
    const std::vector<double> expect{-3, -6, -9, -2, -5, -8, -1, -4, -7};
    EXPECT_EQ(test_util::to_vec(shifted.images.data()), expect);
    EXPECT_EQ(shifted.domain.index, 1);
}

TEST(PatchRotate, FourTurnsAndConstantImage) {
    std::mt19937_64 rng(1);
    const auto x = random_tensor<double>({2, 1, 6, 6}, rng);
    EXPECT_EQ(test_util::to_vec(patch_rotate(x, 3, 4).data()), test_util::to_vec(x.data()));
    EXPECT_THROW(patch_rotate(x, 4, 1), ShapeError);
    Dataset ds;
    ds.images = Tensor4<double>({1, 1, 6, 6}, 0.3);
    ds.labels = {0};
    ds.num_classes = 1;
    const auto shifted = apply_shift(ds, ShiftSpec::parse("patch-rotate-negate"), {1, "t"});
    for (double v : shifted.images.data()) EXPECT_EQ(v, -0.3);
}

TEST(PatchRotate, InverseIsBitExact) {
    const auto ds = gen_shapes(kFour, 5, 18, 3);
    const auto shifted = apply_shift(ds, ShiftSpec::parse("patch-rotate-negate"), {1, "t"});
    const auto back = invert_patch_rotate_negate(shifted, 3, {0, "source"});
    EXPECT_EQ(test_util::to_vec(back.images.data()), test_util::to_vec(ds.images.data()));
}

TEST(PatchRotate, ToyShiftFilterRestoresResponses) {
    std::mt19937_64 rng(2);
    const auto ds = gen_shapes(kFour, 3, 18, 4);
    const auto shifted = apply_shift(ds, ShiftSpec::parse("patch-rotate-negate"), {1, "t"});
    const auto w = random_tensor<double>({5, 1, 3, 3}, rng);
    const ConvSpec spec{3, 0};
    const auto y = conv2d(ds.images, w, spec);
    const auto yt = conv2d(shifted.images, toy_shift_filter(w), spec);
    EXPECT_LE(max_abs_diff(y.data(), yt.data()), 1e-12);
}

TEST(Shift, PhotometricAndParsing) {
    Dataset ds;
    ds.images = Tensor4<double>({1, 1, 3, 3}, 0.5);
    ds.labels = {0};
    ds.num_classes = 1;
    const auto s = apply_shift(ds, ShiftSpec::parse("photometric:0.5,0.1"), {1, "t"});
    for (double v : s.images.data()) EXPECT_NEAR(v, 0.35, 1e-15);
    EXPECT_THROW(ShiftSpec::parse("sepia"), std::invalid_argument);
    EXPECT_THROW(ShiftSpec::parse("photometric:0.5"), std::invalid_argument);
    EXPECT_EQ(ShiftSpec::parse("negate-only").kind, ShiftKind::negate_only);
}

TEST(Idx, RoundTrip) {
    const auto dir = temp_dir("idx_rt");
    IdxFile img{kIdxImagesMagic, {3, 2, 2}, {0, 255, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100}};
    IdxFile lab{kIdxLabelsMagic, {3}, {1, 0, 2}};
    write_idx(dir / "img.idx", img);
    write_idx(dir / "lab.idx", lab);
    const auto back = read_idx(dir / "img.idx");
    EXPECT_EQ(back.magic, img.magic);
    EXPECT_EQ(back.dims, img.dims);
    EXPECT_EQ(back.payload, img.payload);
    const auto ds = load_idx_dataset(dir / "img.idx", dir / "lab.idx", 3);
    EXPECT_EQ(ds.images.shape(), (Shape4{3, 1, 2, 2}));
    EXPECT_DOUBLE_EQ(ds.images[0], -1.0);
    EXPECT_DOUBLE_EQ(ds.images[1], 1.0);
    EXPECT_EQ(ds.labels, (std::vector<int>{1, 0, 2}));
}

TEST(Idx, MalformedFiles) {
    const auto dir = temp_dir("idx_bad");
    // header says 2 images of 2x2, payload holds 3 bytes
    write_bytes(dir / "trunc.idx", {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3});
    const auto msg = error_of([&] { read_idx(dir / "trunc.idx"); });
    EXPECT_NE(msg.find("8"), std::string::npos) << msg;
    EXPECT_NE(msg.find("3"), std::string::npos) << msg;
    EXPECT_THROW(read_idx(dir / "trunc.idx"), FormatError);

    write_bytes(dir / "magic.idx", {0, 0, 8, 2, 0, 0, 0, 1, 0});
    EXPECT_THROW(read_idx(dir / "magic.idx"), FormatError);
    write_idx(dir / "labels.idx", IdxFile{kIdxLabelsMagic, {2}, {0, 1}});
    EXPECT_THROW(parse_idx_images(dir / "labels.idx"), FormatError);
    EXPECT_THROW(read_idx(dir / "missing.idx"), FormatError);
}

TEST(Split, FractionCounts) {
    Dataset big;
    big.images = Tensor4<double>({73257, 1, 1, 1});
    big.num_classes = 10;
    for (std::size_t i = 0; i < 73257; ++i) big.labels.push_back(static_cast<int>(i % 10));
    EXPECT_EQ(split_indices(big, 0.005, 1, false).first.size(), 366u);
    EXPECT_EQ(split_indices(big, 0.005, 1, true).first.size(), 366u);
    const auto [kept, held] = split_indices(big, 1.0, 1, true);
    EXPECT_EQ(kept.size(), 73257u);
    EXPECT_TRUE(held.empty());
    EXPECT_THROW(split_indices(big, 0.0, 1, true), std::invalid_argument);
}

TEST(Split, StratifiedAndDeterministic) {
    const auto ds = gen_shapes(kFour, 40, 18, 5);
    const auto [kept, held] = split_fraction(ds, 0.25, 9, true);
    EXPECT_EQ(kept.class_counts(), (std::vector<std::size_t>{10, 10, 10, 10}));
    EXPECT_EQ(held.size(), 120u);
    EXPECT_EQ(split_indices(ds, 0.25, 9, true), split_indices(ds, 0.25, 9, true));
    // too small a fraction to keep one of every class
    EXPECT_THROW(split_indices(ds, 0.01, 9, true), std::invalid_argument);
}

TEST(Dataset, ManifestAndSubset) {
    const auto ds = gen_shapes(kFour, 3, 18, 7);
    const auto j = nlohmann::json::parse(ds.manifest_json());
    EXPECT_EQ(j["seed"].get<std::uint64_t>(), 7u);
    EXPECT_EQ(j["size"].get<std::size_t>(), 12u);
    EXPECT_TRUE(j.contains("digest"));
    EXPECT_TRUE(j.contains("generator"));
    const auto sub = ds.subset({0, 5});
    EXPECT_EQ(sub.size(), 2u);
    EXPECT_EQ(sub.labels[1], ds.labels[5]);
    EXPECT_THROW(ds.subset({100}), std::out_of_range);
}
