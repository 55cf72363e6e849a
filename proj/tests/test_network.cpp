#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "chmfl/network.hpp"
#include "test_support.hpp"

using namespace chmfl;

namespace {

// 8^3 input, 3 levels, base 2: channels (2,4,8), fused width 28
NetworkConfig tiny_cfg() {
    NetworkConfig cfg;
    cfg.input_extents = {8, 8, 8};
    cfg.base_channels = 2;
    cfg.levels = 3;
    cfg.fc_hidden = {6, 3};
    cfg.dropout_p = 0.0;
    return cfg;
}

template <typename T>
TensorPtr<T> random_input(const NetworkConfig& cfg, std::mt19937_64& rng) {
    return testsup::random_tensor<T>(
        {1, 1, cfg.input_extents[0], cfg.input_extents[1], cfg.input_extents[2]}, rng);
}

}  // namespace

TEST_CASE("config arithmetic and validation") {
    NetworkConfig cfg;  // paper-scale defaults
    CHECK(cfg.channels(1) == 16);
    CHECK(cfg.channels(5) == 256);
    CHECK(cfg.fused_vector_width() == 992);
    CHECK_NOTHROW(cfg.validate());

    auto shapes = expected_param_shapes(cfg);
    CHECK(shapes.at("head.fc1.weight") == std::vector<std::size_t>{512, 992});
    CHECK(shapes.at("pet.input.conv.weight") == std::vector<std::size_t>{16, 1, 5, 5, 5});
    CHECK(shapes.at("ct.down4.conv.weight") == std::vector<std::size_t>{256, 128, 2, 2, 2});
    CHECK(shapes.at("dec.up1.convt.weight") == std::vector<std::size_t>{128, 512, 2, 2, 2});
    CHECK(shapes.at("dec.res1.proj.weight") == std::vector<std::size_t>{128, 384, 1, 1, 1});
    CHECK(shapes.at("dec.out.proj.weight") == std::vector<std::size_t>{2, 16, 1, 1, 1});

    NetworkConfig bad = cfg;
    bad.input_extents = {112, 112, 142};  // not divisible by 16
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.dropout_p = 1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("init_params layout and statistics") {
    auto cfg = tiny_cfg();
    std::mt19937_64 rng(5);
    auto params = init_params<double>(cfg, rng);
    CHECK_NOTHROW(audit_params(params, cfg));

    for (const auto& [name, t] : params) {
        if (name.ends_with(".bias") || name.ends_with(".beta") ||
            name.ends_with(".running_mean"))
            for (double v : t->data) CHECK(v == 0.0);
        if (name.ends_with(".gamma") || name.ends_with(".running_var"))
            for (double v : t->data) CHECK(v == 1.0);
        const bool buffer =
            name.ends_with(".running_mean") || name.ends_with(".running_var");
        CHECK(t->requires_grad == !buffer);
    }

    // He variance on a big conv weight: fan_in = in_ch * kernel volume
    NetworkConfig big;
    big.input_extents = {32, 32, 32};
    std::mt19937_64 rng2(6);
    auto bp = init_params<double>(big, rng2);
    const auto& w = bp.at("pet.down4.conv.weight");  // 256x128x2x2x2
    double var = 0;
    for (double v : w->data) var += v * v;
    var /= (double)w->size();
    const double want = 2.0 / (128.0 * 8.0);
    CHECK(var == doctest::Approx(want).epsilon(0.10));

    // determinism
    std::mt19937_64 ra(11), rb(11);
    auto pa = init_params<double>(cfg, ra);
    auto pb = init_params<double>(cfg, rb);
    for (const auto& [name, t] : pa) CHECK(t->data == pb.at(name)->data);
}

TEST_CASE("encoder shapes follow the halving/doubling pattern") {
    auto cfg = tiny_cfg();
    std::mt19937_64 rng(7);
    auto params = init_params<double>(cfg, rng);
    auto x = random_input<double>(cfg, rng);
    auto maps = encoder_forward(params, "pet", x, cfg, false);
    REQUIRE(maps.size() == 3);
    CHECK(maps[0]->shape == std::vector<std::size_t>{1, 2, 8, 8, 8});
    CHECK(maps[1]->shape == std::vector<std::size_t>{1, 4, 4, 4, 4});
    CHECK(maps[2]->shape == std::vector<std::size_t>{1, 8, 2, 2, 2});

    auto wrong = Tensor<double>::zeros({1, 1, 4, 4, 4});
    CHECK_THROWS_AS((void)encoder_forward(params, "pet", wrong, cfg, false),
                    std::invalid_argument);
}

TEST_CASE("hierarchical fusion concatenates channels and pools levels") {
    auto cfg = tiny_cfg();
    std::mt19937_64 rng(8);
    auto params = init_params<double>(cfg, rng);
    auto pet = random_input<double>(cfg, rng);
    auto ct = random_input<double>(cfg, rng);
    auto pm = encoder_forward(params, "pet", pet, cfg, false);
    auto cm = encoder_forward(params, "ct", ct, cfg, false);
    auto [vec, fused] = hierarchical_fusion(pm, cm);

    CHECK(vec->shape == std::vector<std::size_t>{1, cfg.fused_vector_width()});
    CHECK(cfg.fused_vector_width() == 28);
    REQUIRE(fused.size() == 3);
    for (std::size_t l = 0; l < 3; ++l) {
        CHECK(fused[l]->shape[1] == 2 * cfg.channels(l + 1));
        // channel-concat structure: first half is PET, second half CT
        CHECK(narrow(fused[l], 1, 0, cfg.channels(l + 1))->data == pm[l]->data);
        CHECK(narrow(fused[l], 1, cfg.channels(l + 1), cfg.channels(l + 1))->data ==
              cm[l]->data);
    }
    // pooled entries: entry c of the level-l slice is the max of channel c
    double m = -1e300;
    for (double v : fused[0]->data) m = std::max(m, v);
    double vec_max = -1e300;
    for (std::size_t c = 0; c < 4; ++c) vec_max = std::max(vec_max, vec->data[c]);
    CHECK(vec_max == doctest::Approx(m));
}

TEST_CASE("decoder restores input resolution") {
    auto cfg = tiny_cfg();
    std::mt19937_64 rng(9);
    auto params = init_params<double>(cfg, rng);
    auto pet = random_input<double>(cfg, rng);
    auto ct = random_input<double>(cfg, rng);
    auto pm = encoder_forward(params, "pet", pet, cfg, false);
    auto cm = encoder_forward(params, "ct", ct, cfg, false);
    auto [vec, fused] = hierarchical_fusion(pm, cm);
    std::vector<TensorPtr<double>> diag;
    auto seg = cfl_decode(params, fused, cfg, false, static_cast<Tape<double>*>(nullptr), &diag);
    CHECK(seg->shape == std::vector<std::size_t>{1, 2, 8, 8, 8});
    REQUIRE(diag.size() == 2);
    CHECK(diag[0]->shape == std::vector<std::size_t>{1, 4, 4, 4, 4});
    CHECK(diag[1]->shape == std::vector<std::size_t>{1, 2, 8, 8, 8});

    // per-voxel softmax over the class axis sums to 1
    auto probs = softmax(seg, 1);
    for (std::size_t i = 0; i < 512; ++i)
        CHECK(probs->data[i] + probs->data[512 + i] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("full forward pass") {
    auto cfg = tiny_cfg();
    std::mt19937_64 rng(10);
    auto params = init_params<double>(cfg, rng);
    auto pet = random_input<double>(cfg, rng);
    auto ct = random_input<double>(cfg, rng);

    std::mt19937_64 drop_rng(1);
    auto out = forward(params, cfg, pet, ct, false, drop_rng);
    CHECK(out.dm_logits->shape == std::vector<std::size_t>{1, 2});
    CHECK(out.seg_logits->shape == std::vector<std::size_t>{1, 2, 8, 8, 8});
    auto p = softmax(out.dm_logits, 1);
    CHECK(p->data[0] + p->data[1] == doctest::Approx(1.0).epsilon(1e-12));

    SUBCASE("inference is pure") {
        std::mt19937_64 r2(99);
        auto again = forward(params, cfg, pet, ct, false, r2);
        CHECK(again.dm_logits->data == out.dm_logits->data);
        CHECK(again.seg_logits->data == out.seg_logits->data);
    }
    SUBCASE("branches have independent weights") {
        std::mt19937_64 r3(1);
        auto swapped = forward(params, cfg, ct, pet, false, r3);
        // the tiny relu head can saturate to zero, so compare pre-head outputs
        CHECK(swapped.fused_vector->data != out.fused_vector->data);
        CHECK(swapped.seg_logits->data != out.seg_logits->data);
    }
}

TEST_CASE("segmentation loss reaches encoder parameters") {
    auto cfg = tiny_cfg();
    std::mt19937_64 rng(12);
    auto params = init_params<double>(cfg, rng);
    auto pet = random_input<double>(cfg, rng);
    auto ct = random_input<double>(cfg, rng);

    Tape<double> tape;
    std::mt19937_64 drop_rng(1);
    auto out = forward(params, cfg, pet, ct, true, drop_rng, &tape);
    // loss built only from the segmentation branch
    auto probs = softmax(out.seg_logits, 1, &tape);
    auto loss = sum(mul(probs, probs, &tape), &tape);
    backward(loss, tape);

    const auto& w = params.at("pet.input.conv.weight");
    REQUIRE(!w->grad.empty());
    double norm = 0;
    for (double g : w->grad) norm += g * g;
    CHECK(norm > 0.0);
}

TEST_CASE("checkpoint round trip") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "chmfl_test_network";
    fs::create_directories(dir);
    const auto path = (dir / "model.chck").string();

    auto cfg = tiny_cfg();
    std::mt19937_64 rng(13);
    auto params = init_params<float>(cfg, rng);
    save_checkpoint(params, cfg, path);
    auto [loaded, loaded_cfg] = load_checkpoint<float>(path);
    CHECK(loaded_cfg == cfg);
    REQUIRE(loaded.size() == params.size());
    for (const auto& [name, t] : params) {
        CHECK(loaded.at(name)->shape == t->shape);
        CHECK(loaded.at(name)->data == t->data);  // f32 payload: bit-exact
        const bool buffer =
            name.ends_with(".running_mean") || name.ends_with(".running_var");
        CHECK(loaded.at(name)->requires_grad == !buffer);
    }

    SUBCASE("missing parameter fails the audit") {
        auto broken = params;
        broken.erase("head.fc3.bias");
        const auto bp = (dir / "broken.chck").string();
        save_checkpoint(broken, cfg, bp);
        CHECK_THROWS_WITH_AS((void)load_checkpoint<float>(bp),
                             doctest::Contains("head.fc3.bias"), std::runtime_error);
    }
    SUBCASE("bad magic rejected") {
        const auto mp = (dir / "junk.chck").string();
        std::ofstream(mp, std::ios::binary) << "not a checkpoint";
        CHECK_THROWS_AS((void)load_checkpoint<float>(mp), std::runtime_error);
    }
}

TEST_CASE("volume_to_tensor lifts to network layout") {
    Volume v;
    v.extents = {2, 3, 4};
    v.voxels.resize(24);
    for (std::size_t i = 0; i < 24; ++i) v.voxels[i] = (float)i;
    auto t = volume_to_tensor<double>(v);
    CHECK(t->shape == std::vector<std::size_t>{1, 1, 2, 3, 4});
    for (std::size_t i = 0; i < 24; ++i) CHECK(t->data[i] == (double)i);
}
