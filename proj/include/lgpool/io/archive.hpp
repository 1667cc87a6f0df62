// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint archive: a JSON manifest plus an ordered list of named float32
// tensors.
//
// Byte layout, all integers little-endian:
//
//   magic "LGCK" (4 bytes)
//   u32  format version (1)
//   u64  manifest length M
//   M    manifest, UTF-8 JSON (keys sorted)
//   u32  tensor count
//   per tensor, in insertion order:
//     u32  name length K, then K bytes of name
//     u32  rank R (1..8), then R x u64 dims (each > 0)
//     prod(dims) x f32 values, row-major
//   u64  FNV-1a 64 of every preceding byte
//
// Encoding is a pure function of the archive contents, so save -> load ->
// save reproduces identical bytes.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "lgpool/io/binary.hpp"
#include "lgpool/numerics/tensor.hpp"

namespace lgp {

class Archive {
public:
    static constexpr std::uint32_t kFormatVersion = 1;

    nlohmann::json manifest = nlohmann::json::object();

    void add(const std::string& name, Tensor<float> t) {
        if (index_.count(name)) throw FormatError(FormatErrc::duplicate_name, "tensor name '" + name + "' already in archive");
        index_.emplace(name, tensors_.size());
        tensors_.emplace_back(name, std::move(t));
    }

    template <class T>
    void add_cast(const std::string& name, const Tensor<T>& t) {
        add(name, t.template cast<float>());
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    const Tensor<float>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw FormatError(FormatErrc::missing_tensor, "archive has no tensor '" + name + "'");
        return tensors_[it->second].second;
    }

    /// Tensor `name`, validated against the expected shape.
    const Tensor<float>& get(const std::string& name, const Shape& expect) const {
        const auto& t = get(name);
        if (t.shape() != expect)
            throw FormatError(FormatErrc::shape_mismatch, "tensor '" + name + "' has shape " + shape_str(t.shape()) +
                                                             ", manifest implies " + shape_str(expect));
        return t;
    }

    const std::vector<std::pair<std::string, Tensor<float>>>& tensors() const { return tensors_; }

private:
    std::vector<std::pair<std::string, Tensor<float>>> tensors_;
    std::unordered_map<std::string, std::size_t> index_;
};

namespace io {

inline std::vector<std::uint8_t> encode_archive(const Archive& a) {
    ByteWriter w;
    w.str("LGCK");
    w.u32(Archive::kFormatVersion);
    const std::string manifest = a.manifest.dump();
    w.u64(manifest.size());
    w.str(manifest);
    w.u32(static_cast<std::uint32_t>(a.tensors().size()));
    for (const auto& [name, t] : a.tensors()) {
        w.u32(static_cast<std::uint32_t>(name.size()));
        w.str(name);
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) w.u64(d);
        for (float v : t.data()) w.f32(v);
    }
    const auto sum = fnv1a64(w.buffer());
    w.u64(sum);
    return std::move(w.buffer());
}

inline Archive decode_archive(std::span<const std::uint8_t> bytes) {
    ByteReader head(bytes);
    if (head.remaining() < 4) throw FormatError(FormatErrc::truncated, "file shorter than the archive magic");
    if (head.str(4, "magic") != "LGCK") throw FormatError(FormatErrc::bad_magic, "not a checkpoint archive (magic != LGCK)");
    const auto version = head.u32("format version");
    if (version != Archive::kFormatVersion)
        throw FormatError(FormatErrc::unsupported_version,
                          "archive format version " + std::to_string(version) + " is not supported by this build (" +
                              std::to_string(Archive::kFormatVersion) +
                              "); re-export the checkpoint with a matching lgpool release");
    if (bytes.size() < 8 + 8 + 4 + 8) throw FormatError(FormatErrc::truncated, "file shorter than the archive header");
    const auto body = bytes.first(bytes.size() - 8);
    ByteReader tail(bytes.subspan(bytes.size() - 8));
    if (tail.u64("checksum") != fnv1a64(body))
        throw FormatError(FormatErrc::checksum_mismatch, "archive checksum does not match its contents (file corrupted or truncated)");
    ByteReader r(body);
    r.str(8, "header");
    Archive a;
    const auto mlen = r.u64("manifest length");
    const auto mtext = r.str(mlen, "manifest");
    try {
        a.manifest = nlohmann::json::parse(mtext);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatErrc::bad_manifest, std::string("manifest is not valid JSON: ") + e.what());
    }
    if (!a.manifest.is_object()) throw FormatError(FormatErrc::bad_manifest, "manifest must be a JSON object");
    const auto count = r.u32("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto nlen = r.u32("tensor name length");
        auto name = r.str(nlen, "tensor name");
        const auto rank = r.u32("tensor rank");
        if (rank == 0 || rank > 8)
            throw FormatError(FormatErrc::corrupt_header, "tensor '" + name + "' has rank " + std::to_string(rank));
        Shape shape;
        std::uint64_t numel = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            const auto d = r.u64("tensor dims");
            if (d == 0) throw FormatError(FormatErrc::corrupt_header, "tensor '" + name + "' has a zero dimension");
            numel = checked_mul(numel, d);
            shape.push_back(static_cast<std::size_t>(d));
        }
        if (checked_mul(numel, 4) > r.remaining())
            throw FormatError(FormatErrc::truncated, "tensor '" + name + "' data runs past end of file");
        std::vector<float> data(static_cast<std::size_t>(numel));
        for (auto& v : data) v = r.f32("tensor data");
        a.add(name, Tensor<float>(std::move(shape), std::move(data)));
    }
    if (r.remaining() != 0)
        throw FormatError(FormatErrc::corrupt_header, std::to_string(r.remaining()) + " trailing bytes after last tensor");
    return a;
}

inline void save_archive(const Archive& a, const std::string& path) { write_file(path, encode_archive(a)); }

inline Archive load_archive(const std::string& path) { return decode_archive(read_file(path)); }

}  // namespace io

}  // namespace lgp
