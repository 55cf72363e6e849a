#include <doctest.h>

#include <random>
#include <set>

#include "chmfl/metrics.hpp"

using namespace chmfl;

namespace {

Volume mask_from(std::vector<float> v) {
    Volume m;
    m.extents = {1, 1, v.size()};
    m.modality = Modality::MASK;
    m.voxels = std::move(v);
    return m;
}

// Student-t two-sided p-value by Simpson quadrature over the density —
// an oracle independent of the incomplete-beta implementation.
double t_pvalue_quadrature(double t, double df) {
    const double a = std::fabs(t), b = 200.0;
    const int n = 200000;  // even
    const double h = (b - a) / n;
    const double lognorm = std::lgamma((df + 1) / 2) - std::lgamma(df / 2) -
                           0.5 * std::log(df * M_PI);
    auto pdf = [&](double x) {
        return std::exp(lognorm - (df + 1) / 2 * std::log1p(x * x / df));
    };
    double s = pdf(a) + pdf(b);
    for (int i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * pdf(a + i * h);
    return 2.0 * s * h / 3.0;
}

}  // namespace

TEST_CASE("classification metrics reproduce the published confusion row") {
    ConfusionCounts c{21, 4, 20, 3};
    auto m = classification_metrics(c);
    REQUIRE((m.acc && m.sen && m.spe && m.pre && m.f1));
    CHECK(*m.acc == doctest::Approx(0.854).epsilon(5e-4));
    CHECK(*m.sen == doctest::Approx(0.875).epsilon(5e-4));
    CHECK(*m.spe == doctest::Approx(0.833).epsilon(5e-4));
    CHECK(*m.pre == doctest::Approx(0.840).epsilon(5e-4));
    CHECK(*m.f1 == doctest::Approx(0.857).epsilon(5e-4));
}

TEST_CASE("classification metrics degenerate cases") {
    auto perfect = classification_metrics({10, 0, 10, 0});
    CHECK(*perfect.acc == 1.0);
    CHECK(*perfect.sen == 1.0);
    CHECK(*perfect.spe == 1.0);
    CHECK(*perfect.pre == 1.0);
    CHECK(*perfect.f1 == 1.0);

    // no positive predictions: precision undefined, the rest computed
    auto m = classification_metrics({0, 0, 5, 3});
    CHECK(!m.pre.has_value());
    CHECK(!m.f1.has_value());
    CHECK(*m.acc == doctest::Approx(5.0 / 8.0));
    CHECK(*m.sen == 0.0);
    CHECK(*m.spe == 1.0);

    auto empty = classification_metrics({});
    CHECK(!empty.acc.has_value());
}

TEST_CASE("classification metrics invert back to counts") {
    auto check_invert = [](std::size_t tp, std::size_t fp, std::size_t tn, std::size_t fn) {
        ConfusionCounts c{tp, fp, tn, fn};
        auto m = classification_metrics(c);
        if (!m.acc || !m.sen || !m.spe) return;
        const std::size_t total = c.total(), pos = tp + fn, neg = tn + fp;
        const auto rtp = (std::size_t)std::llround(*m.sen * (double)pos);
        const auto rtn = (std::size_t)std::llround(*m.spe * (double)neg);
        CHECK(rtp == tp);
        CHECK(rtn == tn);
        CHECK((std::size_t)std::llround(*m.acc * (double)total) == tp + tn);
    };
    // exhaustive over small totals, randomized over larger ones
    for (std::size_t tp = 0; tp <= 12; ++tp)
        for (std::size_t fp = 0; fp <= 12; ++fp)
            for (std::size_t tn = 0; tn <= 12; ++tn)
                for (std::size_t fn = 0; fn <= 12; ++fn) check_invert(tp, fp, tn, fn);
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<std::size_t> u(0, 50);
    for (int i = 0; i < 10000; ++i) check_invert(u(rng), u(rng), u(rng), u(rng));
}

TEST_CASE("roc_auc oracles") {
    SUBCASE("perfect separation") {
        auto r = roc_auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0});
        CHECK(r.auc == 1.0);
    }
    SUBCASE("pure ties") {
        auto r = roc_auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0});
        CHECK(r.auc == 0.5);
    }
    SUBCASE("pairwise concordance example") {
        auto r = roc_auc({0.9, 0.8, 0.3, 0.1}, {1, 0, 1, 0});
        CHECK(r.auc == doctest::Approx(0.75));
    }
    SUBCASE("single class rejected") {
        CHECK_THROWS_AS((void)roc_auc({0.1, 0.9}, {1, 1}), std::invalid_argument);
    }
}

TEST_CASE("roc points are a monotone staircase from (0,0) to (1,1)") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0, 1);
    std::bernoulli_distribution coin(0.4);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> s;
        std::vector<int> l{1, 0};  // guarantee both classes
        s.push_back(u(rng));
        s.push_back(u(rng));
        for (int i = 0; i < 20; ++i) {
            s.push_back(u(rng));
            l.push_back(coin(rng) ? 1 : 0);
        }
        auto r = roc_auc(s, l);
        REQUIRE(r.points.size() >= 2);
        CHECK(r.points.front() == std::pair<double, double>{0.0, 0.0});
        CHECK(r.points.back() == std::pair<double, double>{1.0, 1.0});
        for (std::size_t i = 1; i < r.points.size(); ++i) {
            CHECK(r.points[i].first >= r.points[i - 1].first);
            CHECK(r.points[i].second >= r.points[i - 1].second);
        }
        // trapezoidal area equals the Mann-Whitney AUC
        double area = 0;
        for (std::size_t i = 1; i < r.points.size(); ++i)
            area += (r.points[i].first - r.points[i - 1].first) *
                    (r.points[i].second + r.points[i - 1].second) / 2.0;
        CHECK(area == doctest::Approx(r.auc).epsilon(1e-12));
        // strictly monotone transform leaves AUC unchanged
        auto warped = s;
        for (auto& x : warped) x = std::exp(3.0 * x) + 1.0;
        CHECK(roc_auc(warped, l).auc == doctest::Approx(r.auc));
    }
}

TEST_CASE("segmentation metrics oracles") {
    SUBCASE("identical masks") {
        auto a = mask_from({1, 0, 1, 1, 0});
        auto m = segmentation_metrics(a, a);
        CHECK(m.dsc == 1.0);
        CHECK(m.jaccard == 1.0);
        CHECK(*m.voxel_acc == 1.0);
    }
    SUBCASE("disjoint masks") {
        auto m = segmentation_metrics(mask_from({1, 1, 0, 0}), mask_from({0, 0, 1, 1}));
        CHECK(m.dsc == 0.0);
        CHECK(m.jaccard == 0.0);
    }
    SUBCASE("hand-counted overlap |P|=6, |T|=4, |P∩T|=3") {
        std::vector<float> p(12, 0.0f), t(12, 0.0f);
        for (int i = 0; i < 6; ++i) p[i] = 1.0f;   // P = {0..5}
        for (int i = 3; i < 7; ++i) t[i] = 1.0f;   // T = {3..6}, intersection {3,4,5}
        auto m = segmentation_metrics(mask_from(p), mask_from(t));
        CHECK(m.dsc == doctest::Approx(0.6));
        CHECK(m.jaccard == doctest::Approx(3.0 / 7.0));
    }
    SUBCASE("empty vs empty") {
        auto m = segmentation_metrics(mask_from({0, 0}), mask_from({0, 0}));
        CHECK(m.dsc == 1.0);
        CHECK(m.jaccard == 1.0);
    }
    SUBCASE("extent mismatch") {
        CHECK_THROWS_AS((void)segmentation_metrics(mask_from({0}), mask_from({0, 0})),
                        std::invalid_argument);
    }
}

TEST_CASE("Jaccard equals D/(2-D) for all inputs") {
    std::mt19937_64 rng(3);
    std::bernoulli_distribution coin(0.3);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<float> p(50), t(50);
        for (int i = 0; i < 50; ++i) {
            p[i] = coin(rng) ? 1.0f : 0.0f;
            t[i] = coin(rng) ? 1.0f : 0.0f;
        }
        auto m = segmentation_metrics(mask_from(p), mask_from(t));
        CHECK(m.jaccard == doctest::Approx(m.dsc / (2.0 - m.dsc)).epsilon(1e-12));
    }
}

TEST_CASE("fold assignment") {
    std::vector<std::string> ids;
    for (int i = 0; i < 48; ++i) ids.push_back("p" + std::to_string(i));

    auto split = make_folds(ids, 6, 7);
    std::vector<std::size_t> sizes(6, 0);
    for (const auto& [id, f] : split.assignment) {
        CHECK(f < 6);
        sizes[f]++;
    }
    for (std::size_t s : sizes) CHECK(s == 8);
    CHECK(split.assignment.size() == 48);  // partition: every id exactly once

    SUBCASE("remainder case 7 ids into 6 folds") {
        std::vector<std::string> seven(ids.begin(), ids.begin() + 7);
        auto sp = make_folds(seven, 6, 1);
        std::vector<std::size_t> sz(6, 0);
        for (const auto& [id, f] : sp.assignment) sz[f]++;
        std::multiset<std::size_t> got(sz.begin(), sz.end());
        CHECK(got == std::multiset<std::size_t>{2, 1, 1, 1, 1, 1});
    }
    SUBCASE("determinism and seed sensitivity") {
        auto a = make_folds(ids, 6, 7);
        CHECK(a.assignment == split.assignment);
        auto b = make_folds(ids, 6, 8);
        CHECK(b.assignment != split.assignment);
    }
    SUBCASE("fewer ids than folds rejected") {
        std::vector<std::string> five(ids.begin(), ids.begin() + 5);
        CHECK_THROWS_AS((void)make_folds(five, 6, 0), std::invalid_argument);
    }
}

TEST_CASE("unpaired t-test") {
    SUBCASE("identical means") {
        auto r = unpaired_t_test({1, 2, 3}, {3, 2, 1});
        CHECK(r.t == doctest::Approx(0.0));
        CHECK(r.p_two_sided == doctest::Approx(1.0));
    }
    SUBCASE("hand-computed pooled-variance example") {
        auto r = unpaired_t_test({1, 2, 3}, {2, 3, 4});
        CHECK(r.t == doctest::Approx(-1.2247).epsilon(1e-4));
        CHECK(r.df == 4.0);
        CHECK(r.p_two_sided == doctest::Approx(0.288).epsilon(5e-3));
        // independent quadrature oracle for the p-value
        CHECK(r.p_two_sided ==
              doctest::Approx(t_pvalue_quadrature(r.t, r.df)).epsilon(1e-6));
    }
    SUBCASE("quadrature agreement over a range of statistics") {
        auto check = [](std::vector<double> a, std::vector<double> b) {
            auto r = unpaired_t_test(a, b);
            CHECK(r.p_two_sided ==
                  doctest::Approx(t_pvalue_quadrature(r.t, r.df)).epsilon(1e-6));
        };
        check({0.1, 0.5, 0.9, 0.3}, {1.2, 1.9, 1.4});
        check({5, 6, 7, 8, 9}, {5.5, 6.5, 7.5});
        check({-2, 0, 2}, {10, 11, 12, 13});
    }
    SUBCASE("error cases") {
        CHECK_THROWS_AS((void)unpaired_t_test({1}, {1, 2}), std::invalid_argument);
        CHECK_THROWS_AS((void)unpaired_t_test({2, 2}, {2, 2}), std::invalid_argument);
    }
}
