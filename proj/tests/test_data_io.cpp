// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "lgpool/descendant/descendant.hpp"
#include "lgpool/distill/trainer.hpp"
#include "lgpool/io/serialize.hpp"
#include "support.hpp"

using namespace lgp;
using lgp::testing::iota_idx;
using lgp::testing::tiny;

namespace {

std::string temp_path(const std::string& stem) {
    return (std::filesystem::temp_directory_path() / ("lgpool_test_" + stem + "_" + std::to_string(::getpid()))).string();
}

void put_u32(std::vector<std::uint8_t>& b, std::size_t off, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b[off + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

void reseal(std::vector<std::uint8_t>& b) {
    const auto sum = io::fnv1a64(std::span<const std::uint8_t>(b.data(), b.size() - 8));
    for (int i = 0; i < 8; ++i) b[b.size() - 8 + i] = static_cast<std::uint8_t>(sum >> (8 * i));
}

FormatErrc code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const FormatError& e) {
        return e.code();
    }
    ADD_FAILURE() << "no FormatError thrown";
    return FormatErrc::io;
}

LearngenePool<float> mini_pool() {
    auto p = build_pool(init_vit<float>(tiny(4, 2), 1), init_vit<float>(tiny(8, 2, 2), 2));
    init_stitch_random(p, 5);
    return p;
}

/// Decode and rebuild whatever the bytes claim to be. Only library errors may escape.
void load_everything(std::span<const std::uint8_t> bytes) {
    const auto a = io::decode_archive(bytes);
    const auto kind = a.manifest.value("kind", std::string());
    if (kind == "model") io::model_from_archive(a);
    if (kind == "pool") io::pool_from_archive(a);
    if (kind == "descendant") io::descendant_from_archive(a);
    if (a.manifest.contains("distill_plan")) io::learned_block_matrices(a);
}

template <class F>
void expect_total(F&& f, std::span<const std::uint8_t> bytes, const std::string& what) {
    try {
        f(bytes);
    } catch (const lgp::Error&) {
    } catch (const std::exception& e) {
        ADD_FAILURE() << what << ": non-library exception " << typeid(e).name() << ": " << e.what();
    }
}

}  // namespace

// ---- synthetic data ----

TEST(GenSynthetic, DeterministicAndCounted) {
    const auto a = gen_synthetic(4, 6, 8, 11);
    EXPECT_EQ(a, gen_synthetic(4, 6, 8, 11));
    EXPECT_NE(a.pixels, gen_synthetic(4, 6, 8, 12).pixels);
    EXPECT_EQ(a.size(), 24u);
    EXPECT_EQ(a.pixels.size(), 24u * 3 * 8 * 8);
    EXPECT_EQ(gen_synthetic(5, 1, 8, 0).size(), 5u);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.labels[i], static_cast<int>(i % 4));
    EXPECT_THROW(gen_synthetic(0, 1, 8, 0), ValidationError);
    EXPECT_THROW(gen_synthetic(2, 0, 8, 0), ValidationError);
    EXPECT_THROW(gen_synthetic(2, 1, 0, 0), ValidationError);
}

TEST(GenSynthetic, NormalizationConstants) {
    auto ds = gen_synthetic(2, 1, 4, 0);
    ds.pixels[0] = 0;
    ds.pixels[1] = 255;
    ds.pixels[2] = 51;
    const std::size_t idx[] = {0};
    const auto x = ds.images<double>(idx);
    EXPECT_DOUBLE_EQ(x[0], -2.0);
    EXPECT_DOUBLE_EQ(x[1], 2.0);
    EXPECT_DOUBLE_EQ(x[2], (0.2 - 0.5) / 0.25);
}

TEST(GenSynthetic, MiniVitLearnsTwoClasses) {
    const auto data = gen_synthetic(2, 100, 32, 7);
    auto m = init_vit<float>(profiles::mini(16, 2, 2, 2), 3);
    Hyper h;
    h.lr = 2e-3;
    h.batch_size = 16;
    h.epochs = 20;
    train_supervised(m, data, h);
    const double acc = evaluate<float>(m, data);
    EXPECT_GT(acc, 0.9) << acc;
}

// ---- raw dataset ----

TEST(RawDataset, FileRoundTrip) {
    const auto ds = gen_synthetic(3, 4, 8, 1);
    const auto path = temp_path("ds");
    io::save_raw_dataset(ds, path);
    EXPECT_EQ(io::load_raw_dataset(path), ds);
    std::filesystem::remove(path);
    EXPECT_EQ(code_of([&] { io::load_raw_dataset(path); }), FormatErrc::io);
}

TEST(RawDataset, HeaderLayout) {
    const auto b = io::encode_dataset(gen_synthetic(3, 2, 4, 1));
    ASSERT_EQ(b.size(), 28u + 6 * 48 + 6 * 4);
    EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "LGDS");
    EXPECT_EQ(b[4], 1);
    EXPECT_EQ(b[8], 6);
    EXPECT_EQ(b[12], 3);
    EXPECT_EQ(b[16], 4);
    EXPECT_EQ(b[20], 4);
    EXPECT_EQ(b[24], 3);
    EXPECT_EQ(b[28 + 6 * 48 + 4], 1);  // second label, little-endian
}

TEST(RawDataset, EmptyIsValid) {
    auto ds = gen_synthetic(3, 1, 4, 0);
    ds = take(ds, 0);
    const auto back = io::decode_dataset(io::encode_dataset(ds));
    EXPECT_TRUE(back.empty());
    EXPECT_EQ(back.num_classes, 3u);
}

TEST(RawDataset, TypedErrors) {
    const auto good = io::encode_dataset(gen_synthetic(3, 2, 4, 1));
    auto bad = good;
    bad[0] = 'X';
    EXPECT_EQ(code_of([&] { io::decode_dataset(bad); }), FormatErrc::bad_magic);
    for (std::size_t cut : {0ul, 3ul, 10ul, 28ul, 100ul, good.size() - 1})
        EXPECT_EQ(code_of([&] { io::decode_dataset(std::span(good).first(cut)); }), FormatErrc::truncated) << cut;
    bad = good;
    put_u32(bad, good.size() - 4, 3);
    EXPECT_EQ(code_of([&] { io::decode_dataset(bad); }), FormatErrc::label_out_of_range);
    bad = good;
    bad.push_back(0);
    EXPECT_EQ(code_of([&] { io::decode_dataset(bad); }), FormatErrc::corrupt_header);
    bad = good;
    put_u32(bad, 4, 2);
    EXPECT_EQ(code_of([&] { io::decode_dataset(bad); }), FormatErrc::unsupported_version);
    bad = good;
    put_u32(bad, 12, 0);
    EXPECT_EQ(code_of([&] { io::decode_dataset(bad); }), FormatErrc::corrupt_header);
    bad = good;
    put_u32(bad, 8, 0xffffffffu);
    EXPECT_EQ(code_of([&] { io::decode_dataset(bad); }), FormatErrc::truncated);
}

TEST(RawDataset, FuzzedBytesOnlyRaiseTypedErrors) {
    const auto good = io::encode_dataset(gen_synthetic(3, 3, 4, 2));
    std::mt19937_64 rng(9);
    auto decode = [](std::span<const std::uint8_t> b) { io::decode_dataset(b); };
    for (int trial = 0; trial < 3000; ++trial) {
        auto b = good;
        const int flips = 1 + static_cast<int>(rng() % 4);
        for (int f = 0; f < flips; ++f) {
            // Bias toward the header, where structure lives.
            const std::size_t pos = (rng() % 2) ? rng() % 28 : rng() % b.size();
            b[pos] = static_cast<std::uint8_t>(rng());
        }
        if (rng() % 3 == 0) b.resize(rng() % (b.size() + 1));
        expect_total(decode, b, "dataset trial " + std::to_string(trial));
    }
}

// ---- archive ----

TEST(Archive, DuplicateAndMissingNames) {
    Archive a;
    a.add("x", Tensor<float>::zeros({2}));
    EXPECT_EQ(code_of([&] { a.add("x", Tensor<float>::zeros({3})); }), FormatErrc::duplicate_name);
    EXPECT_EQ(code_of([&] { a.get("y"); }), FormatErrc::missing_tensor);
    try {
        a.get("x", {3});
        ADD_FAILURE();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.code(), FormatErrc::shape_mismatch);
        EXPECT_NE(std::string(e.what()).find("'x'"), std::string::npos);
    }
}

TEST(Archive, ValuesAndOrderSurvive) {
    Archive a;
    a.manifest["note"] = "hi";
    std::mt19937_64 rng(1);
    a.add("b", Tensor<float>::randn({2, 3}, rng));
    a.add("a", Tensor<float>({1}, {std::numeric_limits<float>::denorm_min()}));
    const auto back = io::decode_archive(io::encode_archive(a));
    EXPECT_EQ(back.manifest, a.manifest);
    ASSERT_EQ(back.tensors().size(), 2u);
    EXPECT_EQ(back.tensors()[0].first, "b");
    EXPECT_TRUE(back.get("b") == a.get("b"));
    EXPECT_TRUE(back.get("a") == a.get("a"));
}

TEST(Archive, VersionMismatchCarriesMigrationMessage) {
    auto b = io::encode_archive(io::model_to_archive(init_vit<float>(tiny(4, 1), 0)));
    put_u32(b, 4, 2);
    reseal(b);
    try {
        io::decode_archive(b);
        ADD_FAILURE();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.code(), FormatErrc::unsupported_version);
        EXPECT_NE(std::string(e.what()).find("re-export"), std::string::npos);
    }
}

TEST(Archive, ChecksumCatchesCorruption) {
    auto b = io::encode_archive(io::model_to_archive(init_vit<float>(tiny(4, 1), 0)));
    b[b.size() / 2] ^= 1;
    EXPECT_EQ(code_of([&] { io::decode_archive(b); }), FormatErrc::checksum_mismatch);
}

TEST(Archive, WrongDimInManifestNamesTheTensor) {
    auto a = io::model_to_archive(init_vit<float>(tiny(8, 1, 2), 0));
    a.manifest["config"]["dim"] = 4;
    a.manifest["config"]["heads"] = 1;
    const auto back = io::decode_archive(io::encode_archive(a));
    try {
        io::model_from_archive(back);
        ADD_FAILURE();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.code(), FormatErrc::shape_mismatch);
        EXPECT_NE(std::string(e.what()).find("tensor '"), std::string::npos) << e.what();
    }
}

TEST(Archive, KindIsChecked) {
    const auto a = io::model_to_archive(init_vit<float>(tiny(4, 1), 0));
    EXPECT_EQ(code_of([&] { io::pool_from_archive(a); }), FormatErrc::bad_manifest);
    EXPECT_THROW(io::model_to_archive(init_vit<float>(tiny(4, 1), 0), nlohmann::json::array()), ValidationError);
}

// ---- checkpoint round trips ----

TEST(Checkpoint, ModelResaveIsByteIdentical) {
    const auto m = init_vit<float>(tiny(8, 2, 2), 4);
    const auto bytes = io::encode_archive(io::model_to_archive(m, {{"seed", 4}, {"normalization", Normalization{}}}));
    const auto a = io::decode_archive(bytes);
    const auto back = io::model_from_archive(a);
    EXPECT_EQ(back.config, m.config);
    const auto x = lgp::testing::random_images<float>(m.config, 2, 1);
    EXPECT_TRUE(forward(back, x).value() == forward(m, x).value());
    EXPECT_EQ(io::encode_archive(io::model_to_archive(back, a.manifest)), bytes);
    EXPECT_EQ(a.manifest.at("normalization").get<Normalization>(), Normalization{});
}

TEST(Checkpoint, PoolResaveIsByteIdentical) {
    const auto pool = mini_pool();
    const auto bytes = io::encode_archive(io::pool_to_archive(pool));
    const auto back = io::pool_from_archive(io::decode_archive(bytes));
    EXPECT_EQ(pool_checksum(back), pool_checksum(pool));
    EXPECT_EQ(back.stitch(1).init_source, StitchInit::random);
    EXPECT_EQ(io::encode_archive(io::pool_to_archive(back)), bytes);
}

TEST(Checkpoint, DescendantResaveIsByteIdentical) {
    const auto pool = mini_pool();
    for (const auto& path : enumerate_paths(pool, PathMode::general)) {
        const auto d = assemble(pool, path);
        const auto bytes = io::encode_archive(io::descendant_to_archive(d));
        const auto back = io::descendant_from_archive(io::decode_archive(bytes));
        EXPECT_EQ(back.path, path);
        EXPECT_EQ(back.pool_checksum, d.pool_checksum);
        EXPECT_EQ(io::encode_archive(io::descendant_to_archive(back)), bytes) << path.id();
        const auto x = lgp::testing::random_images<float>(pool.low_config, 2, 3);
        EXPECT_TRUE(forward(back, x).value() == forward(d, x).value()) << path.id();
    }
}

TEST(Checkpoint, TransformsRoundTrip) {
    const auto anc = init_vit<float>(tiny(8, 4, 2), 0);
    const auto aux = init_vit<float>(tiny(4, 2), 1);
    const auto plan = make_dense_plan(4, 2, false);
    const auto mats = make_transforms<float>(plan, anc.config.dim, aux.config.dim, 7);
    auto a = io::model_to_archive(aux);
    io::add_transforms(a, mats, plan);
    const auto back = io::decode_archive(io::encode_archive(a));
    EXPECT_EQ(io::archive_plan(back), plan);
    const auto ws = io::learned_block_matrices(back);
    ASSERT_EQ(ws.size(), plan.pairs.size());
    for (std::size_t i = 0; i < ws.size(); ++i) EXPECT_TRUE(ws[i] == mats.block[i].matrix.value());
    EXPECT_TRUE(io::learned_block_matrices(io::model_to_archive(aux)).empty());
}

// ---- fuzzing ----

class ArchiveFuzz : public ::testing::TestWithParam<std::string> {};

TEST_P(ArchiveFuzz, OnlyTypedErrors) {
    std::vector<std::uint8_t> good;
    const auto pool = mini_pool();
    if (GetParam() == "model") good = io::encode_archive(io::model_to_archive(init_vit<float>(tiny(4, 1), 0)));
    if (GetParam() == "pool") good = io::encode_archive(io::pool_to_archive(pool));
    if (GetParam() == "descendant") good = io::encode_archive(io::descendant_to_archive(assemble(pool, {1, 2})));
    ASSERT_FALSE(good.empty());
    const std::size_t mlen = good[8] | (good[9] << 8);
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 1500; ++trial) {
        auto b = good;
        const int flips = 1 + static_cast<int>(rng() % 3);
        for (int f = 0; f < flips; ++f) {
            // Half the flips land in the header and manifest.
            const std::size_t pos = (rng() % 2) ? rng() % (16 + mlen + 40) : rng() % b.size();
            if (rng() % 2) {
                b[pos] = static_cast<std::uint8_t>(rng());
            } else {
                // Digit swaps keep the JSON parseable so the semantic checks run.
                if (b[pos] >= '0' && b[pos] <= '9') b[pos] = static_cast<std::uint8_t>('0' + rng() % 10);
            }
        }
        if (rng() % 4 == 0) b.resize(16 + rng() % (b.size() - 16));
        // Unsealed input must hit the checksum; resealed input exercises the parser.
        expect_total(load_everything, b, GetParam() + " raw trial " + std::to_string(trial));
        if (b.size() >= 28) {
            reseal(b);
            expect_total(load_everything, b, GetParam() + " sealed trial " + std::to_string(trial));
        }
    }
}

INSTANTIATE_TEST_SUITE_P(Kinds, ArchiveFuzz, ::testing::Values("model", "pool", "descendant"));
