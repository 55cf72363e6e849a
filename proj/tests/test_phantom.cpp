#include <doctest.h>

#include <filesystem>

#include "chmfl/phantom.hpp"

using namespace chmfl;

namespace {

// Within-tumor PET variance: the oracle feature that defines the labels.
double tumor_pet_variance(const PatientRecord& r) {
    double mean = 0, n = 0;
    for (std::size_t i = 0; i < r.mask.voxels.size(); ++i)
        if (r.mask.voxels[i] != 0.0f) {
            mean += r.pet.voxels[i];
            n += 1;
        }
    mean /= n;
    double var = 0;
    for (std::size_t i = 0; i < r.mask.voxels.size(); ++i)
        if (r.mask.voxels[i] != 0.0f) {
            const double d = r.pet.voxels[i] - mean;
            var += d * d;
        }
    return var / n;
}

}  // namespace

TEST_CASE("phantom generation basics") {
    PhantomConfig cfg;
    cfg.n_patients = 12;
    cfg.seed = 5;
    auto ds = generate_phantoms(cfg);
    REQUIRE(ds.size() == 12);

    std::size_t pos = 0;
    for (const auto& r : ds) {
        CHECK_NOTHROW(r.validate());
        CHECK(r.pet.extents == cfg.extents);
        CHECK(r.ct.extents == cfg.extents);
        CHECK(r.mask.extents == cfg.extents);
        for (float v : r.pet.voxels) CHECK(v >= 0.0f);
        for (float v : r.mask.voxels) CHECK((v == 0.0f || v == 1.0f));
        // tumor strictly inside the volume: no mask voxel touches a face
        const auto [D, H, W] = cfg.extents;
        for (std::size_t d = 0; d < D; ++d)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w)
                    if (r.mask.at(d, h, w) != 0.0f) {
                        CHECK(d > 0);
                        CHECK(d < D - 1);
                        CHECK(h > 0);
                        CHECK(h < H - 1);
                        CHECK(w > 0);
                        CHECK(w < W - 1);
                    }
        pos += (std::size_t)r.dm_label;
    }
    CHECK(pos == 6);  // balance 0.5
}

TEST_CASE("phantom generation is deterministic") {
    PhantomConfig cfg;
    cfg.n_patients = 6;
    cfg.seed = 77;
    auto a = generate_phantoms(cfg);
    auto b = generate_phantoms(cfg);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].id == b[i].id);
        CHECK(a[i].dm_label == b[i].dm_label);
        CHECK(a[i].pet.voxels == b[i].pet.voxels);
        CHECK(a[i].ct.voxels == b[i].ct.voxels);
        CHECK(a[i].mask.voxels == b[i].mask.voxels);
    }
    PhantomConfig other = cfg;
    other.seed = 78;
    auto c = generate_phantoms(other);
    CHECK(c[0].pet.voxels != a[0].pet.voxels);
}

TEST_CASE("labels are separable by within-tumor PET variance") {
    PhantomConfig cfg;
    cfg.n_patients = 24;
    cfg.seed = 11;
    auto ds = generate_phantoms(cfg);
    double max_dm0 = -1e300, min_dm1 = 1e300;
    for (const auto& r : ds) {
        const double v = tumor_pet_variance(r);
        if (r.dm_label)
            min_dm1 = std::min(min_dm1, v);
        else
            max_dm0 = std::max(max_dm0, v);
    }
    // a single threshold between the classes classifies every patient
    CHECK(max_dm0 < min_dm1);
}

TEST_CASE("config validation") {
    PhantomConfig cfg;
    cfg.extents = {8, 8, 8};  // tumor radius up to 7 cannot fit
    CHECK_THROWS_AS((void)generate_phantoms(cfg), std::invalid_argument);

    PhantomConfig overlap;
    overlap.het_range_dm0 = {0.0, 0.9};  // overlaps dm1 range
    CHECK_THROWS_AS(overlap.validate(), std::invalid_argument);

    PhantomConfig bal;
    bal.balance = 1.5;
    CHECK_THROWS_AS(bal.validate(), std::invalid_argument);
}

TEST_CASE("export round-trips through the manifest loader") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "chmfl_test_phantom";
    fs::remove_all(dir);

    PhantomConfig cfg;
    cfg.n_patients = 4;
    cfg.seed = 3;
    auto ds = generate_phantoms(cfg);
    const auto manifest = export_phantoms(ds, dir.string());
    CHECK(fs::exists(manifest));

    auto loaded = load_manifest(manifest);
    REQUIRE(loaded.size() == ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        CHECK(loaded[i].id == ds[i].id);
        CHECK(loaded[i].dm_label == ds[i].dm_label);
        CHECK(loaded[i].pet.voxels == ds[i].pet.voxels);
        CHECK(loaded[i].ct.voxels == ds[i].ct.voxels);
        CHECK(loaded[i].mask.voxels == ds[i].mask.voxels);
        CHECK(loaded[i].pet.spacing == ds[i].pet.spacing);
    }

    SUBCASE("empty dataset yields a valid empty manifest") {
        const auto edir = (dir / "empty").string();
        const auto em = export_phantoms({}, edir);
        CHECK(load_manifest(em).empty());
    }
}
