#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chmfl/preprocess.hpp"
#include "chmfl/volume.hpp"

namespace chmfl {

/// Synthetic PET-CT phantom generator. The DM label is tied to the amplitude
/// of a band-limited uptake-heterogeneity field inside the tumor; the two
/// class-conditional amplitude ranges are disjoint, so the labels are
/// learnable by construction.
struct PhantomConfig {
    std::array<std::size_t, 3> extents{32, 32, 32};
    double spacing_mm = 1.0;
    std::size_t n_patients = 48;
    double balance = 0.5;  // fraction with DM = 1
    double tumor_radius_min = 5.0;  // voxels
    double tumor_radius_max = 8.0;
    double pet_background = 1.0;
    double tumor_contrast = 4.0;  // uptake added inside the tumor
    std::array<double, 2> het_range_dm0{0.0, 0.05};
    std::array<double, 2> het_range_dm1{0.85, 1.0};
    double pet_noise_std = 0.03;
    double ct_noise_std = 15.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (tumor_radius_min < 2.0 || tumor_radius_max < tumor_radius_min)
            throw std::invalid_argument("phantom config: bad tumor radius range");
        const double min_ext = (double)std::min({extents[0], extents[1], extents[2]});
        if (2.0 * tumor_radius_max + 2.0 > min_ext)
            throw std::invalid_argument("phantom config: tumor larger than volume");
        if (balance < 0 || balance > 1)
            throw std::invalid_argument("phantom config: balance outside [0,1]");
        if (het_range_dm0[1] >= het_range_dm1[0])
            throw std::invalid_argument(
                "phantom config: class heterogeneity ranges must be disjoint");
    }
};

namespace phantom_detail {

// Band-limited random field: mean of a few random 3D cosines, values in [-1,1].
// Gives each patient a seeded texture component on top of the radial shell
// pattern below.
struct CosineField {
    static constexpr int kWaves = 4;
    std::array<std::array<double, 3>, kWaves> freq;
    std::array<double, kWaves> phase;

    explicit CosineField(std::mt19937_64& rng) {
        std::uniform_real_distribution<double> f(3.0, 6.0);
        std::uniform_real_distribution<double> ph(0.0, 2.0 * M_PI);
        for (int w = 0; w < kWaves; ++w) {
            for (int a = 0; a < 3; ++a) freq[w][a] = f(rng);
            phase[w] = ph(rng);
        }
    }

    double operator()(double ud, double uh, double uw) const {
        double s = 0;
        for (int w = 0; w < kWaves; ++w)
            s += std::cos(2.0 * M_PI * (freq[w][0] * ud + freq[w][1] * uh + freq[w][2] * uw) +
                          phase[w]);
        return s / kWaves;
    }
};

}  // namespace phantom_detail

inline std::vector<PatientRecord> generate_phantoms(const PhantomConfig& cfg) {
    cfg.validate();
    const std::size_t n_pos = (std::size_t)std::llround((double)cfg.n_patients * cfg.balance);
    std::vector<PatientRecord> records;
    records.reserve(cfg.n_patients);
    const auto [D, H, W] = cfg.extents;

    for (std::size_t i = 0; i < cfg.n_patients; ++i) {
        std::mt19937_64 rng(cfg.seed + 0x9E3779B97F4A7C15ull * (i + 1));
        PatientRecord r;
        {
            char buf[16];
            std::snprintf(buf, sizeof(buf), "p%03zu", i);
            r.id = buf;
        }
        r.dm_label = i < n_pos ? 1 : 0;

        std::uniform_real_distribution<double> radius_dist(cfg.tumor_radius_min,
                                                           cfg.tumor_radius_max);
        std::array<double, 3> radius{radius_dist(rng), radius_dist(rng), radius_dist(rng)};
        std::array<double, 3> center;
        for (int a = 0; a < 3; ++a) {
            const double lo = radius[a] + 1.0;
            const double hi = (double)cfg.extents[a] - radius[a] - 2.0;
            center[a] = std::uniform_real_distribution<double>(lo, hi)(rng);
        }

        const auto& hr = r.dm_label ? cfg.het_range_dm1 : cfg.het_range_dm0;
        const double amp = std::uniform_real_distribution<double>(hr[0], hr[1])(rng);
        phantom_detail::CosineField het(rng);

        // smooth body ellipsoid for the CT anatomy
        std::array<double, 3> body_c{(double)D / 2, (double)H / 2, (double)W / 2};
        std::array<double, 3> body_r{(double)D * 0.45, (double)H * 0.45, (double)W * 0.45};

        std::normal_distribution<double> pet_noise(0.0, cfg.pet_noise_std);
        std::normal_distribution<double> ct_noise(0.0, cfg.ct_noise_std);

        auto init = [&](Volume& v, Modality m) {
            v.modality = m;
            v.extents = cfg.extents;
            v.spacing = {cfg.spacing_mm, cfg.spacing_mm, cfg.spacing_mm};
            v.voxels.assign(v.size(), 0.0f);
        };
        init(r.ct, Modality::CT);
        init(r.pet, Modality::PET);
        init(r.mask, Modality::MASK);

        for (std::size_t d = 0; d < D; ++d)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) {
                    auto q = [&](std::size_t i0, const std::array<double, 3>& c,
                                 const std::array<double, 3>& rr, std::size_t i1,
                                 std::size_t i2) {
                        const double xd = ((double)i0 - c[0]) / rr[0];
                        const double xh = ((double)i1 - c[1]) / rr[1];
                        const double xw = ((double)i2 - c[2]) / rr[2];
                        return xd * xd + xh * xh + xw * xw;
                    };
                    const double body_q = q(d, body_c, body_r, h, w);
                    const double tumor_q = q(d, center, radius, h, w);
                    const bool in_tumor = tumor_q <= 1.0;
                    r.mask.at(d, h, w) = in_tumor ? 1.0f : 0.0f;

                    double ct = body_q <= 1.0 ? 40.0 + 60.0 * (1.0 - body_q) : -1000.0;
                    if (in_tumor) ct += 30.0;
                    r.ct.at(d, h, w) = (float)(ct + ct_noise(rng));

                    double pet = cfg.pet_background;
                    if (in_tumor) {
                        // Heterogeneity field: a radial shell aligned with the
                        // tumor's own geometry (rim +1, core -1) plus a seeded
                        // cosine texture. At high amplitude the tumor reads as
                        // a hollow shell with a cold core — a large-scale
                        // spatial signature that survives per-sample intensity
                        // normalization — while at low amplitude it stays a
                        // solid quasi-uniform blob. Within-tumor variance
                        // scales with the amplitude, so the oracle-feature
                        // separation between the class ranges is preserved.
                        const double tex =
                            het((double)d / (double)D, (double)h / (double)H,
                                (double)w / (double)W);
                        const double shell = 2.0 * tumor_q - 1.0;
                        const double field = (shell + 0.25 * tex) / 1.25;
                        pet += cfg.tumor_contrast * (1.0 + amp * field);
                    }
                    pet += pet_noise(rng);
                    r.pet.at(d, h, w) = (float)std::max(0.0, pet);
                }
        r.validate();
        records.push_back(std::move(r));
    }
    return records;
}

/// Write volumes in the container format plus a manifest consumable by
/// load_manifest(); returns the manifest path.
inline std::string export_phantoms(const std::vector<PatientRecord>& dataset,
                                   const std::string& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& r : dataset) {
        const std::string pet = r.id + "_pet.chvl";
        const std::string ct = r.id + "_ct.chvl";
        const std::string mask = r.id + "_mask.chvl";
        write_volume(r.pet, (std::filesystem::path(dir) / pet).string());
        write_volume(r.ct, (std::filesystem::path(dir) / ct).string());
        write_volume(r.mask, (std::filesystem::path(dir) / mask).string());
        manifest.push_back({{"id", r.id}, {"pet", pet}, {"ct", ct}, {"mask", mask},
                            {"dm", r.dm_label}});
    }
    const std::string path = (std::filesystem::path(dir) / "manifest.json").string();
    std::ofstream os(path);
    if (!os) throw std::runtime_error("export_phantoms: cannot write " + path);
    os << manifest.dump(2) << "\n";
    return path;
}

}  // namespace chmfl
