// SPDX-License-Identifier: Apache-2.0
//
// Models, pools and descendants to and from checkpoint archives.
//
// Every manifest carries "format_version" and "kind"; the architecture
// fields listed per kind determine every tensor shape, and loading checks
// each stored tensor against them. Callers add anything else (seed, training
// metadata, normalization, resolved run config) through `meta`.

#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "lgpool/descendant/descendant.hpp"
#include "lgpool/distill/losses.hpp"
#include "lgpool/io/archive.hpp"

namespace lgp::io {

using nlohmann::json;

namespace detail {

inline Archive start(const std::string& kind, const json& meta) {
    Archive a;
    if (!meta.is_null() && !meta.is_object()) throw ValidationError("archive metadata must be a JSON object");
    if (meta.is_object()) a.manifest = meta;
    a.manifest["format_version"] = Archive::kFormatVersion;
    a.manifest["kind"] = kind;
    return a;
}

inline void expect_kind(const Archive& a, const std::string& kind) {
    const auto it = a.manifest.find("kind");
    if (it == a.manifest.end() || !it->is_string())
        throw FormatError(FormatErrc::bad_manifest, "manifest has no 'kind' field");
    if (it->get<std::string>() != kind)
        throw FormatError(FormatErrc::bad_manifest,
                          "checkpoint holds a " + it->get<std::string>() + ", expected a " + kind);
}

template <class V>
V manifest_field(const Archive& a, const std::string& key) {
    try {
        return a.manifest.at(key).get<V>();
    } catch (const json::exception& e) {
        throw FormatError(FormatErrc::bad_manifest, "manifest field '" + key + "': " + e.what());
    }
}

inline std::uint64_t stored_values(const Archive& a) {
    std::uint64_t n = 0;
    for (const auto& [name, t] : a.tensors()) n += t.numel();
    return n;
}

/// Config from the manifest, refused when it implies more weights than the
/// archive holds (so a corrupted size never drives a huge allocation).
inline ModelConfig manifest_config(const Archive& a, const std::string& key, bool whole_model = true) {
    auto cfg = manifest_field<ModelConfig>(a, key);
    try {
        cfg.validate();
    } catch (const ValidationError& e) {
        throw FormatError(FormatErrc::bad_manifest, "manifest field '" + key + "': " + e.what());
    }
    constexpr std::size_t kMaxSide = 1u << 16, kMaxDepth = 1u << 12;
    if (cfg.image_size > kMaxSide || cfg.dim > kMaxSide || cfg.num_classes > kMaxSide || cfg.channels > kMaxSide ||
        cfg.mlp_ratio > 64 || cfg.depth > kMaxDepth)
        throw FormatError(FormatErrc::bad_manifest, "manifest field '" + key + "': sizes out of range");
    if (whole_model && accounting::count_params(cfg) > stored_values(a))
        throw FormatError(FormatErrc::shape_mismatch, "manifest field '" + key + "' implies " +
                                                          std::to_string(accounting::count_params(cfg)) +
                                                          " weights but the archive stores " +
                                                          std::to_string(stored_values(a)));
    return cfg;
}

inline void put(Archive& a, const NamedParams<float>& params) {
    for (const auto& [name, v] : params) a.add(name, v.value());
}

/// Overwrite every parameter from the archive, shape-checked.
inline void fill(const Archive& a, const NamedParams<float>& params) {
    for (const auto& [name, v] : params) {
        auto copy = v;
        copy.mutable_value() = a.get(name, v.shape());
    }
}

}  // namespace detail

// ---- single models ----

inline Archive model_to_archive(const VitModel<float>& m, const json& meta = json::object()) {
    auto a = detail::start("model", meta);
    a.manifest["config"] = m.config;
    detail::put(a, m.named_parameters());
    return a;
}

inline VitModel<float> model_from_archive(const Archive& a) {
    detail::expect_kind(a, "model");
    auto m = init_vit<float>(detail::manifest_config(a, "config"), 0);
    detail::fill(a, m.named_parameters());
    return m;
}

/// Learnable transformation matrices under W.<anc>.<aux> / M.<anc>.<aux>,
/// plus the plan in the manifest.
inline void add_transforms(Archive& a, const TransformSet<float>& mats, const DistillPlan& plan) {
    a.manifest["distill_plan"] = plan;
    a.manifest["transforms_learnable"] = !mats.block.empty() && mats.block.front().learnable;
    for (const auto* set : {&mats.block, &mats.attn})
        for (const auto& m : *set)
            if (m.learnable) a.add(m.name(), m.matrix.value());
}

inline DistillPlan archive_plan(const Archive& a) { return detail::manifest_field<DistillPlan>(a, "distill_plan"); }

/// The block-based W matrices in plan order; empty when widths matched.
inline std::vector<Tensor<float>> learned_block_matrices(const Archive& a) {
    std::vector<Tensor<float>> out;
    if (!a.manifest.contains("distill_plan") || !detail::manifest_field<bool>(a, "transforms_learnable")) return out;
    for (const auto& p : archive_plan(a).pairs)
        out.push_back(a.get("W." + std::to_string(p.anc_block) + "." + std::to_string(p.aux_block)));
    return out;
}

// ---- pools ----

inline Archive pool_to_archive(const LearngenePool<float>& pool, const json& meta = json::object()) {
    auto a = detail::start("pool", meta);
    a.manifest["low_config"] = pool.low_config;
    a.manifest["high_config"] = pool.high_config;
    a.manifest["length"] = pool.length();
    json init = json::array();
    for (const auto& s : pool.stitches) init.push_back(to_string(s.init_source));
    a.manifest["stitch_init"] = init;
    detail::put(a, pool.named_parameters());
    return a;
}

inline LearngenePool<float> pool_from_archive(const Archive& a) {
    detail::expect_kind(a, "pool");
    const auto lo = detail::manifest_config(a, "low_config");
    const auto hi = detail::manifest_config(a, "high_config");
    const auto length = detail::manifest_field<std::size_t>(a, "length");
    if (lo.depth != length || hi.depth != length)
        throw FormatError(FormatErrc::bad_manifest, "pool manifest: length does not match row depths");
    LearngenePool<float> pool;
    try {
        pool = build_pool(init_vit<float>(lo, 0), init_vit<float>(hi, 0));
    } catch (const ValidationError& e) {
        throw FormatError(FormatErrc::bad_manifest, std::string("pool manifest: ") + e.what());
    }
    const auto init = detail::manifest_field<std::vector<std::string>>(a, "stitch_init");
    if (init.size() != length) throw FormatError(FormatErrc::bad_manifest, "pool manifest: stitch_init has wrong length");
    for (std::size_t s = 0; s < length; ++s) {
        try {
            pool.stitches[s].init_source = stitch_init_from_string(init[s]);
        } catch (const ValidationError& e) {
            throw FormatError(FormatErrc::bad_manifest, e.what());
        }
    }
    detail::fill(a, pool.named_parameters());
    return pool;
}

// ---- descendants ----

inline Archive descendant_to_archive(const DescendantModel<float>& d, const json& meta = json::object()) {
    auto a = detail::start("descendant", meta);
    a.manifest["low_config"] = d.low_config;
    a.manifest["high_config"] = d.high_config;
    a.manifest["path"] = d.path.id();
    a.manifest["pool_length"] = d.pool_length;
    a.manifest["pool_checksum"] = d.pool_checksum;
    a.manifest["stitch_init"] = d.stitch ? to_string(d.stitch->init_source) : "none";
    detail::put(a, d.named_parameters());
    return a;
}

inline DescendantModel<float> descendant_from_archive(const Archive& a) {
    detail::expect_kind(a, "descendant");
    const auto lo = detail::manifest_config(a, "low_config", false);
    const auto hi = detail::manifest_config(a, "high_config", false);
    const auto length = detail::manifest_field<std::size_t>(a, "pool_length");
    if (lo.depth != length || hi.depth != length || !lo.same_frame(hi) || lo.dim > hi.dim)
        throw FormatError(FormatErrc::bad_manifest, "descendant manifest: inconsistent row configs");
    DescendantModel<float> d;
    d.low_config = lo;
    d.high_config = hi;
    d.pool_length = length;
    try {
        d.path = Path::parse(detail::manifest_field<std::string>(a, "path"));
        d.path.validate(length);
    } catch (const ValidationError& e) {
        throw FormatError(FormatErrc::bad_manifest, std::string("descendant manifest: ") + e.what());
    }
    if (account(PoolConfig{lo, hi}, d.path).params > detail::stored_values(a))
        throw FormatError(FormatErrc::shape_mismatch, "descendant manifest implies more weights than the archive stores");
    d.pool_checksum = detail::manifest_field<std::uint64_t>(a, "pool_checksum");

    // Skeleton with the right shapes, then overwritten from the archive.
    std::mt19937_64 rng(0);
    d.embed = init_patch_embed<float>(d.embed_config(), rng);
    for (std::size_t i = 0; i < d.path.k; ++i) d.low_blocks.push_back(init_block<float>(lo, rng));
    if (d.path.uses_stitch(length)) {
        StitchInit src;
        try {
            src = stitch_init_from_string(detail::manifest_field<std::string>(a, "stitch_init"));
        } catch (const ValidationError& e) {
            throw FormatError(FormatErrc::bad_manifest, e.what());
        }
        d.stitch = StitchLayer<float>{Var<float>::parameter(Tensor<float>::zeros({lo.dim, hi.dim})),
                                      Var<float>::parameter(Tensor<float>::zeros({hi.dim})), d.path.k, src};
    }
    for (std::size_t i = 0; i < d.path.high_count(length); ++i) d.high_blocks.push_back(init_block<float>(hi, rng));
    d.head = init_head<float>(d.path.ends_high(length) ? hi : lo, rng);
    detail::fill(a, d.named_parameters());
    return d;
}

}  // namespace lgp::io
