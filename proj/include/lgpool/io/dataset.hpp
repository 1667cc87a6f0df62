// SPDX-License-Identifier: Apache-2.0
//
// Image classification datasets: a procedural generator and the raw binary
// on-disk format.
//
// Raw format, all integers little-endian:
//
//   offset  size          field
//   0       4             magic "LGDS"
//   4       4  u32        version (1)
//   8       4  u32        count
//   12      4  u32        channels
//   16      4  u32        height
//   20      4  u32        width
//   24      4  u32        num_classes
//   28      count*C*H*W   u8 pixels, image-major then channel, row, column
//   ...     4*count       u32 labels
//
// Pixels become reals on load as (x/255 - mean) / std with
// mean = 0.5 and std = 0.25.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "lgpool/io/binary.hpp"
#include "lgpool/numerics/tensor.hpp"

namespace lgp {

struct Normalization {
    double mean = 0.5;
    double std = 0.25;

    friend bool operator==(const Normalization&, const Normalization&) = default;
};

inline void to_json(nlohmann::json& j, const Normalization& n) { j = {{"mean", n.mean}, {"std", n.std}}; }
inline void from_json(const nlohmann::json& j, Normalization& n) {
    j.at("mean").get_to(n.mean);
    j.at("std").get_to(n.std);
}

struct Dataset {
    std::size_t channels = 3;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t num_classes = 0;
    std::vector<std::uint8_t> pixels;
    std::vector<int> labels;
    Normalization norm;

    std::size_t size() const { return labels.size(); }
    bool empty() const { return labels.empty(); }
    std::size_t image_bytes() const { return channels * height * width; }

    /// Normalized images for the given sample indices, shape B x C x H x W.
    template <class T>
    Tensor<T> images(std::span<const std::size_t> idx) const {
        const std::size_t per = image_bytes();
        Tensor<T> out({idx.size(), channels, height, width});
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const std::uint8_t* src = pixels.data() + idx[b] * per;
            for (std::size_t i = 0; i < per; ++i)
                out[b * per + i] = static_cast<T>((static_cast<double>(src[i]) / 255.0 - norm.mean) / norm.std);
        }
        return out;
    }

    std::vector<int> labels_at(std::span<const std::size_t> idx) const {
        std::vector<int> out;
        out.reserve(idx.size());
        for (auto i : idx) out.push_back(labels[i]);
        return out;
    }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Class-conditional procedural images. Class c is a sinusoidal grating with
/// its own orientation, spatial frequency and colour mix; each sample draws a
/// random phase, a small orientation jitter and additive pixel noise.
/// Labels cycle through the classes so any prefix is roughly balanced.
inline Dataset gen_synthetic(std::size_t num_classes, std::size_t samples_per_class, std::size_t image_size,
                             std::uint64_t seed, std::size_t channels = 3) {
    if (num_classes == 0 || samples_per_class == 0 || image_size == 0 || channels == 0)
        throw ValidationError("gen_synthetic: all arguments must be positive");
    Dataset ds;
    ds.channels = channels;
    ds.height = ds.width = image_size;
    ds.num_classes = num_classes;
    const std::size_t count = num_classes * samples_per_class;
    ds.pixels.resize(count * ds.image_bytes());
    ds.labels.resize(count);

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 12.0);
    const double pi = std::numbers::pi;

    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t c = i % num_classes;
        ds.labels[i] = static_cast<int>(c);
        const double theta = pi * static_cast<double>(c) / static_cast<double>(num_classes) + 0.08 * (unit(rng) - 0.5);
        const double freq = 1.0 + static_cast<double>(c % 3);  // cycles per image
        const double phase = 2.0 * pi * unit(rng);
        const double kx = std::cos(theta) * freq * 2.0 * pi / static_cast<double>(image_size);
        const double ky = std::sin(theta) * freq * 2.0 * pi / static_cast<double>(image_size);
        std::uint8_t* img = ds.pixels.data() + i * ds.image_bytes();
        for (std::size_t ch = 0; ch < channels; ++ch) {
            // Colour signature: each class brightens a different channel.
            const double gain = (ch == c % channels) ? 100.0 : 45.0;
            for (std::size_t y = 0; y < image_size; ++y)
                for (std::size_t x = 0; x < image_size; ++x) {
                    const double wave = std::sin(kx * static_cast<double>(x) + ky * static_cast<double>(y) + phase);
                    const double v = 128.0 + gain * wave + noise(rng);
                    img[(ch * image_size + y) * image_size + x] =
                        static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
                }
        }
    }
    return ds;
}

/// First `n` samples (or all, if fewer).
inline Dataset take(const Dataset& ds, std::size_t n) {
    Dataset out = ds;
    n = std::min(n, ds.size());
    out.labels.resize(n);
    out.pixels.resize(n * ds.image_bytes());
    return out;
}

namespace io {

inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
    ByteWriter w;
    w.str("LGDS");
    w.u32(kDatasetVersion);
    w.u32(static_cast<std::uint32_t>(ds.size()));
    w.u32(static_cast<std::uint32_t>(ds.channels));
    w.u32(static_cast<std::uint32_t>(ds.height));
    w.u32(static_cast<std::uint32_t>(ds.width));
    w.u32(static_cast<std::uint32_t>(ds.num_classes));
    w.bytes(ds.pixels);
    for (int y : ds.labels) w.u32(static_cast<std::uint32_t>(y));
    return std::move(w.buffer());
}

inline Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    if (r.remaining() < 4) throw FormatError(FormatErrc::truncated, "file shorter than the dataset magic");
    if (r.str(4, "magic") != "LGDS") throw FormatError(FormatErrc::bad_magic, "not a raw dataset file (magic != LGDS)");
    const auto version = r.u32("version");
    if (version != kDatasetVersion)
        throw FormatError(FormatErrc::unsupported_version,
                          "dataset version " + std::to_string(version) + ", expected " + std::to_string(kDatasetVersion));
    Dataset ds;
    const std::uint64_t count = r.u32("count");
    ds.channels = r.u32("channels");
    ds.height = r.u32("height");
    ds.width = r.u32("width");
    ds.num_classes = r.u32("num_classes");
    if (ds.channels == 0 || ds.height == 0 || ds.width == 0 || ds.num_classes == 0)
        throw FormatError(FormatErrc::corrupt_header, "dataset header has a zero dimension or class count");
    const auto per = checked_mul(checked_mul(ds.channels, ds.height), ds.width);
    const std::uint64_t pixel_bytes = checked_mul(count, per);
    const auto pix = r.bytes(pixel_bytes, "image block");
    ds.pixels.assign(pix.begin(), pix.end());
    if (count * 4 > r.remaining()) throw FormatError(FormatErrc::truncated, "label block shorter than count");
    ds.labels.reserve(static_cast<std::size_t>(count));
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto y = r.u32("label block");
        if (y >= ds.num_classes)
            throw FormatError(FormatErrc::label_out_of_range,
                              "label " + std::to_string(y) + " at index " + std::to_string(i) + " >= num_classes " +
                                  std::to_string(ds.num_classes));
        ds.labels.push_back(static_cast<int>(y));
    }
    if (r.remaining() != 0)
        throw FormatError(FormatErrc::corrupt_header, std::to_string(r.remaining()) + " trailing bytes after label block");
    return ds;
}

inline void save_raw_dataset(const Dataset& ds, const std::string& path) { write_file(path, encode_dataset(ds)); }

inline Dataset load_raw_dataset(const std::string& path) { return decode_dataset(read_file(path)); }

}  // namespace io

}  // namespace lgp
