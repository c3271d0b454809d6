#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "demist/tensor.hpp"

namespace demist {

using Dims = std::array<int64_t, 3>;

// 3D scalar grid with spacing, optional mask, and free-form metadata.
// Data is x-fastest: index = x + d0*(y + d1*z). Immutable by convention after
// construction; shared freely across workers.
struct Volume {
    Dims dims{0, 0, 0};
    std::array<float, 3> spacing{1.f, 1.f, 1.f};
    std::vector<float> data;
    std::vector<uint8_t> mask;  // empty = no mask
    std::map<std::string, std::string> meta;

    Volume() = default;
    Volume(Dims d, float fill = 0.f)
        : dims(d), data(static_cast<size_t>(d[0] * d[1] * d[2]), fill) {}

    int64_t numel() const { return dims[0] * dims[1] * dims[2]; }
    bool has_mask() const { return !mask.empty(); }

    int64_t index(int64_t x, int64_t y, int64_t z) const { return x + dims[0] * (y + dims[1] * z); }
    float& at(int64_t x, int64_t y, int64_t z) { return data[static_cast<size_t>(index(x, y, z))]; }
    float at(int64_t x, int64_t y, int64_t z) const { return data[static_cast<size_t>(index(x, y, z))]; }
    bool in_mask(int64_t i) const { return mask.empty() || mask[static_cast<size_t>(i)] != 0; }

    void validate() const;  // dims/mask consistency, finite data, positive spacing
};

struct Patch {
    Dims origin{0, 0, 0};
    std::vector<float> block;  // size^3, x-fastest
};

struct PatchSet {
    Dims patch_size{0, 0, 0};
    Dims stride{0, 0, 0};
    std::vector<Patch> patches;
};

// VOL1 container: "VOL1" magic, LE u32 dims triple, f32 spacing triple,
// u8 mask flag, f32 payload (x-fastest), optional u8 mask payload.
void write_volume(const Volume& v, const std::string& path);
Volume read_volume(const std::string& path);

// Maps the [lo_pct, hi_pct] percentile range (computed inside the mask) to
// [0,1] and clips. Degenerate range (hi == lo) produces an all-zero volume
// with meta["degenerate_norm"]="1" instead of an error.
Volume percentile_normalize(const Volume& v, double lo_pct = 0.0, double hi_pct = 99.5);

// Percentile by linear interpolation between order statistics over in-mask voxels.
double volume_percentile(const Volume& v, double pct);

// Deterministic overlapping patch grid; last origin per axis is clamped so the
// final patch touches the boundary.
PatchSet extract_patches(const Volume& v, int64_t size, int64_t stride);

// Blend patches with a separable cosine-taper window, normalized to a
// partition of unity. Every voxel must be covered by at least one patch.
Volume stitch_patches(const PatchSet& ps, Dims dims);

// conversions to/from the (1,X,Y,Z) tensor layout used by the networks
Tensor volume_to_tensor(const Volume& v);
Volume tensor_to_volume(const Tensor& t, const Volume& like);

}  // namespace demist
