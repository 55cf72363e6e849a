#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chmfl/volume.hpp"

namespace chmfl {

/// Paired PET/CT volumes with a binary tumor mask and a binary distant
/// metastasis label; the unit of the dataset manifest.
struct PatientRecord {
    std::string id;
    Volume pet;
    Volume ct;
    Volume mask;
    int dm_label = 0;

    void validate() const {
        pet.validate();
        ct.validate();
        mask.validate();
        if (dm_label != 0 && dm_label != 1)
            throw std::invalid_argument("patient " + id + ": label outside {0,1}");
        bool nonempty = false;
        for (float v : mask.voxels)
            if (v != 0.0f) { nonempty = true; break; }
        if (!nonempty) throw std::invalid_argument("patient " + id + ": empty tumor mask");
    }
};

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

/// Resample onto an isotropic grid of spacing `target_mm`. Scalar volumes use
/// trilinear interpolation; MASK volumes use nearest-neighbour and stay binary.
inline Volume resample_isotropic(const Volume& v, double target_mm) {
    if (target_mm <= 0) throw std::invalid_argument("resample_isotropic: target_mm must be > 0");
    Volume out;
    out.modality = v.modality;
    out.spacing = {target_mm, target_mm, target_mm};
    for (int a = 0; a < 3; ++a) {
        const double ext = (double)v.extents[a] * v.spacing[a] / target_mm;
        out.extents[a] = (std::size_t)std::llround(ext);
        if (out.extents[a] < 1)
            throw std::invalid_argument("resample_isotropic: degenerate output extent");
    }
    // shortcut: grid already matches
    if (out.extents == v.extents && v.spacing[0] == target_mm && v.spacing[1] == target_mm &&
        v.spacing[2] == target_mm) {
        out.voxels = v.voxels;
        return out;
    }
    out.voxels.resize(out.size());
    const bool nearest = v.modality == Modality::MASK;
    const auto D = v.extents[0], H = v.extents[1], W = v.extents[2];
    for (std::size_t d = 0; d < out.extents[0]; ++d) {
        const double ud = (double)d * target_mm / v.spacing[0];
        for (std::size_t h = 0; h < out.extents[1]; ++h) {
            const double uh = (double)h * target_mm / v.spacing[1];
            for (std::size_t w = 0; w < out.extents[2]; ++w) {
                const double uw = (double)w * target_mm / v.spacing[2];
                float val;
                if (nearest) {
                    const std::size_t id = std::min(D - 1, (std::size_t)std::llround(ud));
                    const std::size_t ih = std::min(H - 1, (std::size_t)std::llround(uh));
                    const std::size_t iw = std::min(W - 1, (std::size_t)std::llround(uw));
                    val = v.at(id, ih, iw) >= 0.5f ? 1.0f : 0.0f;
                } else {
                    const double cd = std::clamp(ud, 0.0, (double)(D - 1));
                    const double ch = std::clamp(uh, 0.0, (double)(H - 1));
                    const double cw = std::clamp(uw, 0.0, (double)(W - 1));
                    const std::size_t d0 = (std::size_t)cd, h0 = (std::size_t)ch,
                                      w0 = (std::size_t)cw;
                    const std::size_t d1 = std::min(d0 + 1, D - 1);
                    const std::size_t h1 = std::min(h0 + 1, H - 1);
                    const std::size_t w1 = std::min(w0 + 1, W - 1);
                    const double fd = cd - (double)d0, fh = ch - (double)h0, fw = cw - (double)w0;
                    const double c00 = v.at(d0, h0, w0) * (1 - fw) + v.at(d0, h0, w1) * fw;
                    const double c01 = v.at(d0, h1, w0) * (1 - fw) + v.at(d0, h1, w1) * fw;
                    const double c10 = v.at(d1, h0, w0) * (1 - fw) + v.at(d1, h0, w1) * fw;
                    const double c11 = v.at(d1, h1, w0) * (1 - fw) + v.at(d1, h1, w1) * fw;
                    const double c0 = c00 * (1 - fh) + c01 * fh;
                    const double c1 = c10 * (1 - fh) + c11 * fh;
                    val = (float)(c0 * (1 - fd) + c1 * fd);
                }
                out.at(d, h, w) = val;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// bounding box
// ---------------------------------------------------------------------------

/// Centroid of the tumor mask in voxel coordinates, rounded to nearest voxel.
inline std::array<std::size_t, 3> mask_centroid(const Volume& mask) {
    double sd = 0, sh = 0, sw = 0, n = 0;
    for (std::size_t d = 0; d < mask.extents[0]; ++d)
        for (std::size_t h = 0; h < mask.extents[1]; ++h)
            for (std::size_t w = 0; w < mask.extents[2]; ++w)
                if (mask.at(d, h, w) != 0.0f) {
                    sd += (double)d;
                    sh += (double)h;
                    sw += (double)w;
                    n += 1;
                }
    if (n == 0) throw std::invalid_argument("mask_centroid: empty mask");
    return {(std::size_t)std::llround(sd / n), (std::size_t)std::llround(sh / n),
            (std::size_t)std::llround(sw / n)};
}

/// Crop a box of the given physical size (mm) centered on the mask centroid.
/// Regions outside the field of view are zero-padded.
inline Volume extract_bounding_box(const Volume& v, const Volume& mask,
                                   std::array<double, 3> box_mm) {
    if (v.extents != mask.extents || v.spacing != mask.spacing)
        throw std::invalid_argument("extract_bounding_box: volume and mask grids differ");
    const auto c = mask_centroid(mask);
    Volume out;
    out.modality = v.modality;
    out.spacing = v.spacing;
    std::array<std::ptrdiff_t, 3> start;
    for (int a = 0; a < 3; ++a) {
        out.extents[a] = (std::size_t)std::llround(box_mm[a] / v.spacing[a]);
        if (out.extents[a] < 1)
            throw std::invalid_argument("extract_bounding_box: degenerate box");
        start[a] = (std::ptrdiff_t)c[a] - (std::ptrdiff_t)(out.extents[a] / 2);
    }
    out.voxels.assign(out.size(), 0.0f);
    for (std::size_t d = 0; d < out.extents[0]; ++d) {
        const std::ptrdiff_t sd = start[0] + (std::ptrdiff_t)d;
        if (sd < 0 || sd >= (std::ptrdiff_t)v.extents[0]) continue;
        for (std::size_t h = 0; h < out.extents[1]; ++h) {
            const std::ptrdiff_t sh = start[1] + (std::ptrdiff_t)h;
            if (sh < 0 || sh >= (std::ptrdiff_t)v.extents[1]) continue;
            const std::ptrdiff_t w0 = std::max<std::ptrdiff_t>(0, -start[2]);
            const std::ptrdiff_t w1 = std::min<std::ptrdiff_t>(
                (std::ptrdiff_t)out.extents[2], (std::ptrdiff_t)v.extents[2] - start[2]);
            for (std::ptrdiff_t w = w0; w < w1; ++w)
                out.at(d, h, (std::size_t)w) =
                    v.at((std::size_t)sd, (std::size_t)sh, (std::size_t)(start[2] + w));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// intensity normalization
// ---------------------------------------------------------------------------

inline float percentile(std::vector<float> sorted_copy, double q) {
    std::sort(sorted_copy.begin(), sorted_copy.end());
    const double pos = q / 100.0 * (double)(sorted_copy.size() - 1);
    const std::size_t lo = (std::size_t)pos;
    const std::size_t hi = std::min(lo + 1, sorted_copy.size() - 1);
    const double f = pos - (double)lo;
    return (float)((1 - f) * sorted_copy[lo] + f * sorted_copy[hi]);
}

/// Clip to the [0.5, 99.5] percentile range, then z-score standardize to
/// mean 0, variance 1.
inline Volume normalize_intensity(const Volume& v) {
    const float lo = percentile(v.voxels, 0.5);
    const float hi = percentile(v.voxels, 99.5);
    Volume out = v;
    out.modality = v.modality;
    double mean = 0;
    for (auto& x : out.voxels) {
        x = std::clamp(x, lo, hi);
        mean += x;
    }
    mean /= (double)out.voxels.size();
    double var = 0;
    for (float x : out.voxels) {
        const double d = x - mean;
        var += d * d;
    }
    var /= (double)out.voxels.size();
    if (var == 0) throw std::invalid_argument("normalize_intensity: zero-variance volume");
    const double inv = 1.0 / std::sqrt(var);
    for (auto& x : out.voxels) x = (float)((x - mean) * inv);
    // standardized intensities are signed; drop the SUV non-negativity tag
    if (out.modality == Modality::PET) out.modality = Modality::CT;
    return out;
}

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

/// Manifest: JSON array of {"id", "pet", "ct", "mask", "dm"} entries with
/// paths relative to the manifest's directory.
inline std::vector<PatientRecord> load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_manifest: cannot open " + path);
    nlohmann::json j;
    is >> j;
    if (!j.is_array()) throw std::runtime_error("load_manifest: expected a JSON array");
    const auto dir = std::filesystem::path(path).parent_path();
    std::vector<PatientRecord> records;
    std::set<std::string> seen;
    for (const auto& e : j) {
        PatientRecord r;
        r.id = e.at("id").get<std::string>();
        if (!seen.insert(r.id).second)
            throw std::runtime_error("load_manifest: duplicate patient id " + r.id);
        const int dm = e.at("dm").get<int>();
        if (dm != 0 && dm != 1)
            throw std::runtime_error("load_manifest: label outside {0,1} for " + r.id);
        r.dm_label = dm;
        auto resolve = [&](const std::string& p) {
            std::filesystem::path fp(p);
            return fp.is_absolute() ? fp.string() : (dir / fp).string();
        };
        r.pet = read_volume(resolve(e.at("pet").get<std::string>()));
        r.ct = read_volume(resolve(e.at("ct").get<std::string>()));
        r.mask = read_volume(resolve(e.at("mask").get<std::string>()));
        r.validate();
        records.push_back(std::move(r));
    }
    return records;
}

// ---------------------------------------------------------------------------
// full preprocessing chain
// ---------------------------------------------------------------------------

/// Resample PET/CT/mask to the target isotropic spacing, crop the fixed
/// physical bounding box around the tumor centroid, and normalize PET and CT
/// intensities. The mask stays binary throughout.
inline PatientRecord preprocess_record(const PatientRecord& r, double target_mm,
                                       std::array<double, 3> box_mm = {112, 112, 144}) {
    PatientRecord out;
    out.id = r.id;
    out.dm_label = r.dm_label;
    Volume pet = resample_isotropic(r.pet, target_mm);
    Volume ct = resample_isotropic(r.ct, target_mm);
    Volume mask = resample_isotropic(r.mask, target_mm);
    out.pet = normalize_intensity(extract_bounding_box(pet, mask, box_mm));
    out.ct = normalize_intensity(extract_bounding_box(ct, mask, box_mm));
    out.mask = extract_bounding_box(mask, mask, box_mm);
    out.mask.modality = Modality::MASK;
    return out;
}

}  // namespace chmfl
