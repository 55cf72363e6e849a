#include <doctest.h>

#include "chmfl/optim.hpp"
#include "test_support.hpp"

using namespace chmfl;
using testsup::fd_gradient;
using testsup::random_tensor;
using testsup::rel_err;

namespace {

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
std::vector<TrainingExample<T>> tiny_dataset(std::size_t n, std::mt19937_64& rng) {
    std::vector<TrainingExample<T>> ds;
    for (std::size_t i = 0; i < n; ++i) {
        TrainingExample<T> ex;
        ex.id = "t" + std::to_string(i);
        ex.label = (int)(i % 2);
        ex.pet = random_tensor<T>({1, 1, 8, 8, 8}, rng);
        ex.ct = random_tensor<T>({1, 1, 8, 8, 8}, rng);
        ex.mask = Tensor<T>::zeros({1, 1, 8, 8, 8});
        for (std::size_t d = 3; d < 6; ++d)
            for (std::size_t h = 3; h < 6; ++h)
                for (std::size_t w = 3; w < 6; ++w)
                    ex.mask->data[(d * 8 + h) * 8 + w] = T(1);
        ex.seg_target = seg_target_from_mask(ex.mask);
        ex.dm_target = Tensor<T>::zeros({1, 2});
        ex.dm_target->data[(std::size_t)ex.label] = T(1);
        ds.push_back(std::move(ex));
    }
    return ds;
}

}  // namespace

TEST_CASE("total_loss reproduces the hand-computed dual-task value") {
    // classification: target [1,0], predicted probabilities [0.8, 0.2]
    auto dm_logits = Tensor<double>::create({1, 2}, {std::log(0.8), std::log(0.2)});
    auto dm_target = Tensor<double>::create({1, 2}, {1, 0});
    // segmentation: 2 voxels, true-class probabilities 0.9 and 0.6
    auto seg_logits = Tensor<double>::create(
        {1, 2, 1, 1, 2}, {std::log(0.1), std::log(0.4), std::log(0.9), std::log(0.6)});
    auto seg_target = Tensor<double>::create({1, 2, 1, 1, 2}, {0, 0, 1, 1});

    auto L = total_loss(dm_logits, dm_target, seg_logits, seg_target, 0.5);
    // 0.5 * (-ln 0.8) + 0.5 * ((-ln 0.9 - ln 0.6) / 2) = 0.26562
    CHECK(L->data[0] == doctest::Approx(0.26562).epsilon(1e-5));

    SUBCASE("boundary weights isolate the single-task terms") {
        auto cls = cross_entropy_with_softmax(dm_logits, dm_target, 1, true);
        auto seg = cross_entropy_with_softmax(seg_logits, seg_target, 1, true);
        auto L0 = total_loss(dm_logits, dm_target, seg_logits, seg_target, 0.0);
        auto L1 = total_loss(dm_logits, dm_target, seg_logits, seg_target, 1.0);
        CHECK(std::fabs(L0->data[0] - cls->data[0]) < 1e-12);
        CHECK(std::fabs(L1->data[0] - seg->data[0]) < 1e-12);
    }
    SUBCASE("w outside [0,1] rejected") {
        CHECK_THROWS_AS(
            (void)total_loss(dm_logits, dm_target, seg_logits, seg_target, 1.5),
            std::invalid_argument);
    }
}

TEST_CASE("total_loss is non-negative and vanishes at perfect predictions") {
    auto dm_logits = Tensor<double>::create({1, 2}, {60.0, -60.0});
    auto dm_target = Tensor<double>::create({1, 2}, {1, 0});
    auto seg_logits =
        Tensor<double>::create({1, 2, 1, 1, 2}, {60.0, -60.0, -60.0, 60.0});
    auto seg_target = Tensor<double>::create({1, 2, 1, 1, 2}, {1, 0, 0, 1});
    auto L = total_loss(dm_logits, dm_target, seg_logits, seg_target, 0.5);
    CHECK(L->data[0] >= 0.0);
    CHECK(L->data[0] < 1e-11);

    std::mt19937_64 rng(1);
    for (int t = 0; t < 20; ++t) {
        auto lg = random_tensor<double>({1, 2}, rng, false, -5, 5);
        auto L2 = total_loss(lg, dm_target, seg_logits, seg_target, 0.3);
        CHECK(L2->data[0] >= 0.0);
    }
}

TEST_CASE("cross-entropy clamp caps the per-position loss") {
    // a confidently wrong prediction: true-class probability far below 1e-12
    auto logits = Tensor<double>::create({1, 2}, {100.0, -100.0});
    auto target = Tensor<double>::create({1, 2}, {0, 1});
    auto ce = cross_entropy_with_softmax(logits, target, 1, true);
    CHECK(ce->data[0] == doctest::Approx(-std::log(1e-12)).epsilon(1e-9));
}

TEST_CASE("cross-entropy gradient matches finite differences") {
    std::mt19937_64 rng(2);
    for (bool average : {true, false}) {
        auto logits = random_tensor<double>({1, 3, 2, 2}, rng, true, -2, 2);
        // random target distribution per position
        auto target = Tensor<double>::zeros({1, 3, 2, 2});
        std::uniform_real_distribution<double> u(0.1, 1.0);
        for (std::size_t pos = 0; pos < 4; ++pos) {
            double z = 0;
            for (std::size_t a = 0; a < 3; ++a) {
                target->data[a * 4 + pos] = u(rng);
                z += target->data[a * 4 + pos];
            }
            for (std::size_t a = 0; a < 3; ++a) target->data[a * 4 + pos] /= z;
        }
        Tape<double> tape;
        auto ce = cross_entropy_with_softmax(logits, target, 1, average, &tape);
        backward(ce, tape);
        auto f = [&] {
            return cross_entropy_with_softmax(logits, target, 1, average)->data[0];
        };
        auto fd = fd_gradient<double>(logits, f);
        for (std::size_t i = 0; i < logits->size(); ++i)
            CHECK(rel_err(logits->grad[i], fd[i]) < 1e-4);
    }
}

TEST_CASE("seg_target_from_mask builds two-class probabilities") {
    auto mask = Tensor<double>::create({1, 1, 1, 1, 3}, {0, 1, 0});
    auto t = seg_target_from_mask(mask);
    CHECK(t->shape == std::vector<std::size_t>{1, 2, 1, 1, 3});
    CHECK(t->data == std::vector<double>{1, 0, 1, 0, 1, 0});

    auto bad = Tensor<double>::create({1, 1, 1, 1, 1}, {0.5});
    CHECK_THROWS_AS((void)seg_target_from_mask(bad), std::invalid_argument);
}

TEST_CASE("adam_step basics") {
    TrainingConfig cfg;
    cfg.learning_rate = 0.1;

    SUBCASE("zero gradient leaves parameters unchanged") {
        ModelParams<double> params;
        params.emplace("theta", Tensor<double>::create({3}, {1, 2, 3}, true));
        params.at("theta")->ensure_grad();
        AdamState<double> st;
        adam_step(params, st, cfg);
        CHECK(params.at("theta")->data == std::vector<double>{1, 2, 3});
    }
    SUBCASE("first step moves each coordinate by about lr against the gradient") {
        ModelParams<double> params;
        params.emplace("theta", Tensor<double>::create({2}, {0.0, 0.0}, true));
        params.at("theta")->ensure_grad();
        params.at("theta")->grad = {4.0, -0.25};
        AdamState<double> st;
        adam_step(params, st, cfg);
        CHECK(params.at("theta")->data[0] == doctest::Approx(-0.1).epsilon(1e-6));
        CHECK(params.at("theta")->data[1] == doctest::Approx(0.1).epsilon(1e-6));
    }
    SUBCASE("missing gradient raises") {
        ModelParams<double> params;
        params.emplace("theta", Tensor<double>::create({1}, {1.0}, true));
        AdamState<double> st;
        CHECK_THROWS_AS(adam_step(params, st, cfg), std::runtime_error);
    }
    SUBCASE("minimizes a quadratic") {
        ModelParams<double> params;
        params.emplace("theta", Tensor<double>::create({1}, {1.0}, true));
        auto& th = params.at("theta");
        th->ensure_grad();
        AdamState<double> st;
        for (int i = 0; i < 200; ++i) {
            th->grad[0] = 2.0 * th->data[0];  // d/dtheta theta^2
            adam_step(params, st, cfg);
        }
        CHECK(std::fabs(th->data[0]) < 0.05);
    }
    SUBCASE("non-trainable buffers are skipped") {
        ModelParams<double> params;
        params.emplace("buf", Tensor<double>::create({1}, {7.0}, false));
        AdamState<double> st;
        CHECK_NOTHROW(adam_step(params, st, cfg));
        CHECK(params.at("buf")->data[0] == 7.0);
    }
}

TEST_CASE("train smoke run on a tiny synthetic set") {
    auto net = tiny_cfg();
    std::mt19937_64 rng(3);
    auto params = init_params<double>(net, rng);
    auto ds = tiny_dataset<double>(4, rng);
    TrainingConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.max_epochs = 5;
    cfg.plateau_patience = 10;
    cfg.seed = 9;

    auto history = train(params, net, ds, cfg);
    REQUIRE(!history.empty());
    CHECK(history.size() <= 5);
    for (const auto& st : history) {
        CHECK(st.mean_loss >= 0.0);
        CHECK(std::isfinite(st.mean_loss));
        CHECK(st.mean_loss ==
              doctest::Approx(0.5 * st.mean_cls_loss + 0.5 * st.mean_seg_loss)
                  .epsilon(1e-9));
    }
    // the best-so-far sequence improves at least once beyond the first epoch
    double best = history.front().mean_loss;
    bool improved = false;
    for (std::size_t i = 1; i < history.size(); ++i)
        if (history[i].mean_loss < best - 1e-6) {
            improved = true;
            best = history[i].mean_loss;
        }
    CHECK(improved);
}

TEST_CASE("train determinism and plateau boundary") {
    auto net = tiny_cfg();
    std::mt19937_64 rng(4);
    auto init = init_params<double>(net, rng);
    auto ds = tiny_dataset<double>(3, rng);
    TrainingConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.max_epochs = 3;
    cfg.plateau_patience = 10;
    cfg.seed = 42;

    auto clone_params = [&] {
        ModelParams<double> c;
        for (const auto& [n, p] : init) c.emplace(n, p->clone());
        return c;
    };
    auto pa = clone_params();
    auto pb = clone_params();
    auto ha = train(pa, net, ds, cfg);
    auto hb = train(pb, net, ds, cfg);
    REQUIRE(ha.size() == hb.size());
    for (std::size_t i = 0; i < ha.size(); ++i) CHECK(ha[i].mean_loss == hb[i].mean_loss);
    for (const auto& [n, p] : pa) CHECK(p->data == pb.at(n)->data);

    SUBCASE("patience 0 stops after one epoch") {
        auto pc = clone_params();
        TrainingConfig c0 = cfg;
        c0.plateau_patience = 0;
        auto hc = train(pc, net, ds, c0);
        CHECK(hc.size() == 1);
    }
    SUBCASE("empty dataset rejected") {
        auto pd = clone_params();
        std::vector<TrainingExample<double>> none;
        CHECK_THROWS_AS((void)train(pd, net, none, cfg), std::invalid_argument);
    }
}

TEST_CASE("encoder receives gradient from both loss terms at 0 < w < 1") {
    auto net = tiny_cfg();
    std::mt19937_64 rng(5);
    auto params = init_params<double>(net, rng);
    auto ds = tiny_dataset<double>(1, rng);
    const auto& ex = ds[0];

    auto grad_norm_for = [&](double w, const char* pname) {
        for (auto& [n, p] : params)
            if (p->requires_grad) p->zero_grad();
        Tape<double> tape;
        std::mt19937_64 drop(1);
        auto out = forward(params, net, ex.pet, ex.ct, true, drop, &tape);
        auto L = total_loss(out.dm_logits, ex.dm_target, out.seg_logits, ex.seg_target, w,
                            &tape);
        backward(L, tape);
        double s = 0;
        for (double g : params.at(pname)->grad) s += g * g;
        return s;
    };
    CHECK(grad_norm_for(0.5, "pet.input.conv.weight") > 0.0);
    CHECK(grad_norm_for(0.5, "ct.input.conv.weight") > 0.0);
    // w = 0: decoder-only parameters receive nothing
    CHECK(grad_norm_for(0.0, "dec.out.conv.weight") == 0.0);
    // w = 1: classification head receives nothing
    CHECK(grad_norm_for(1.0, "head.fc1.weight") == 0.0);
}
