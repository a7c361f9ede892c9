#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "qseg/error.hpp"
#include "qseg/log.hpp"
#include "qseg/ops.hpp"
#include "qseg/protoseg.hpp"
#include "testutil.hpp"

using namespace qseg;
using namespace qseg::testutil;

namespace {

// Brute-force mean over masked feature vectors, resizing first when needed.
Tensor pool_oracle(const Tensor& features, const Tensor& mask) {
    Tensor feat = features;
    if (features.extent(0) != mask.extent(0) || features.extent(1) != mask.extent(1)) {
        feat = bilinear_resize(features, mask.extent(0), mask.extent(1));
    }
    const int z = feat.extent(2);
    Tensor proto({z});
    double count = 0.0;
    for (int y = 0; y < mask.extent(0); ++y)
        for (int x = 0; x < mask.extent(1); ++x)
            if (mask(y, x) != 0.0) {
                count += 1.0;
                for (int c = 0; c < z; ++c) proto(c) += feat(y, x, c);
            }
    for (int c = 0; c < z; ++c) proto(c) /= count;
    return proto;
}

}  // namespace

TEST_CASE("masked average pool examples") {
    SUBCASE("constant features give a constant prototype") {
        Tensor f({3, 3, 2}, std::vector<double>(18, 1.75));
        std::mt19937_64 rng(3);
        Tensor m = nonempty_random_mask(3, 3, rng);
        Tensor p = masked_average_pool(f, m);
        CHECK(p(0) == doctest::Approx(1.75).epsilon(1e-12));
        CHECK(p(1) == doctest::Approx(1.75).epsilon(1e-12));
    }
    SUBCASE("all-ones mask gives the spatial mean") {
        Tensor f({2, 2, 1}, std::vector<double>{1, 2, 3, 4});
        Tensor m({2, 2}, std::vector<double>{1, 1, 1, 1});
        Tensor p = masked_average_pool(f, m);
        CHECK(p(0) == doctest::Approx(2.5).epsilon(1e-12));
    }
    SUBCASE("hand-computed masked mean") {
        Tensor f({2, 2, 2}, std::vector<double>{1, 0, 3, 0, 5, 2, 7, 4});
        Tensor m({2, 2}, std::vector<double>{1, 0, 0, 1});
        Tensor p = masked_average_pool(f, m);
        CHECK(p(0) == doctest::Approx(4.0).epsilon(1e-12));
        CHECK(p(1) == doctest::Approx(2.0).epsilon(1e-12));
    }
    SUBCASE("empty mask is rejected") {
        Tensor f({2, 2, 2});
        Tensor m({2, 2});
        CHECK_THROWS_WITH_AS(masked_average_pool(f, m), doctest::Contains("empty support mask"),
                             Error);
    }
}

TEST_CASE("masked average pool equals the brute-force oracle") {
    std::mt19937_64 rng(101);
    for (int trial = 0; trial < 20; ++trial) {
        std::uniform_int_distribution<int> dim(2, 8);
        Tensor f = random_tensor({dim(rng), dim(rng), 3}, rng);
        Tensor m = nonempty_random_mask(dim(rng) + 4, dim(rng) + 4, rng);
        Tensor got = masked_average_pool(f, m);
        Tensor want = pool_oracle(f, m);
        for (int c = 0; c < 3; ++c) CHECK(got(c) == doctest::Approx(want(c)).epsilon(1e-12));
    }
}

TEST_CASE("masked average pool gradient matches finite differences") {
    std::mt19937_64 rng(103);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor f = random_tensor({3, 4, 2}, rng);
        Tensor m = nonempty_random_mask(6, 5, rng);
        Tensor r = random_tensor({2}, rng);
        auto loss = [&]() {
            Tensor p = masked_average_pool(f, m);
            return p(0) * r(0) + p(1) * r(1);
        };
        Tensor g = masked_average_pool_backward(f.shape(), m, r);
        CHECK(max_grad_err(f, g, loss) < 1e-5);
    }
}

TEST_CASE("anomaly scores hit the similarity extremes") {
    const int z = 4;
    Tensor p({z}, std::vector<double>{0.5, -0.25, 1.0, 0.75});
    Tensor q({1, 3, z});
    for (int c = 0; c < z; ++c) {
        q(0, 0, c) = 2.0 * p(c);   // parallel
        q(0, 2, c) = -0.5 * p(c);  // anti-parallel
    }
    q(0, 1, 0) = p(1);  // orthogonal by construction
    q(0, 1, 1) = -p(0);

    Tensor s = anomaly_score_map(q, p, 20.0);
    CHECK(s(0, 0) == doctest::Approx(-20.0).epsilon(1e-12));
    CHECK(s(0, 1) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(s(0, 2) == doctest::Approx(20.0).epsilon(1e-12));
}

TEST_CASE("anomaly scores stay inside [-a, a] and ignore query scale") {
    std::mt19937_64 rng(107);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor q = random_tensor({5, 6, 3}, rng);
        Tensor p = random_tensor({3}, rng);
        const double a = 20.0;
        Tensor s = anomaly_score_map(q, p, a);
        for (size_t i = 0; i < s.size(); ++i) {
            CHECK(s[i] >= -a - 1e-12);
            CHECK(s[i] <= a + 1e-12);
        }
        Tensor q_scaled = q;
        for (size_t i = 0; i < q_scaled.size(); ++i) q_scaled[i] *= 17.5;
        Tensor s2 = anomaly_score_map(q_scaled, p, a);
        for (size_t i = 0; i < s.size(); ++i) CHECK(s2[i] == doctest::Approx(s[i]).epsilon(1e-9));
    }
}

TEST_CASE("zero-norm vectors score zero with a warning") {
    reset_warn_counts();
    Tensor q({1, 2, 2}, std::vector<double>{0, 0, 1, 1});
    Tensor p({2}, std::vector<double>{1, 0});
    Tensor s = anomaly_score_map(q, p, 20.0);
    CHECK(s(0, 0) == 0.0);
    CHECK(warn_count(Warn::zero_norm_cosine) > 0);
}

TEST_CASE("anomaly score gradients match finite differences") {
    std::mt19937_64 rng(109);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor q = random_tensor({3, 3, 3}, rng, 0.2, 1.0);
        Tensor p = random_tensor({3}, rng, 0.2, 1.0);
        Tensor r = random_tensor({3, 3}, rng);
        auto loss = [&]() {
            Tensor s = anomaly_score_map(q, p, 20.0);
            double acc = 0.0;
            for (size_t i = 0; i < s.size(); ++i) acc += s[i] * r[i];
            return acc;
        };
        ScoreGrads g = anomaly_score_backward(q, p, 20.0, r);
        CHECK(max_grad_err(q, g.query, loss) < 1e-5);
        CHECK(max_grad_err(p, g.prototype, loss) < 1e-5);
    }
}

TEST_CASE("threshold head examples") {
    SUBCASE("zero weights yield the output bias") {
        ThresholdHeadParams head;
        head.w1 = Tensor({3, 2});
        head.b1 = Tensor({2});
        head.w2 = Tensor({2, 1});
        head.b2 = Tensor({1}, std::vector<double>{-1.25});
        std::mt19937_64 rng(5);
        Tensor coarse = random_tensor({4, 4, 3}, rng);
        CHECK(predict_threshold_from(coarse, head) == doctest::Approx(-1.25).epsilon(1e-12));
    }
    SUBCASE("spatially permuting the coarse map leaves T unchanged") {
        ThresholdHeadParams head = ThresholdHeadParams::init(3, 2, 17);
        std::mt19937_64 rng(6);
        Tensor coarse = random_tensor({2, 2, 3}, rng);
        const double t = predict_threshold_from(coarse, head);
        Tensor permuted({2, 2, 3});
        const int order[4] = {3, 0, 2, 1};
        for (int i = 0; i < 4; ++i)
            for (int c = 0; c < 3; ++c)
                permuted(i / 2, i % 2, c) = coarse(order[i] / 2, order[i] % 2, c);
        CHECK(predict_threshold_from(permuted, head) == doctest::Approx(t).epsilon(1e-12));
    }
    SUBCASE("hand-computed two-layer map") {
        ThresholdHeadParams head;
        head.w1 = Tensor({2, 2}, std::vector<double>{1, 1, 1, -1});
        head.b1 = Tensor({2});
        head.w2 = Tensor({2, 1}, std::vector<double>{1, 1});
        head.b2 = Tensor({1});
        // constant map pools to (1,2); relu(3) + relu(-1) = 3
        Tensor coarse({1, 1, 2}, std::vector<double>{1.0, 2.0});
        CHECK(predict_threshold_from(coarse, head) == doctest::Approx(3.0).epsilon(1e-12));
    }
}

TEST_CASE("threshold head gradients match finite differences") {
    std::mt19937_64 rng(113);
    for (int trial = 0; trial < 20; ++trial) {
        ThresholdHeadParams head = ThresholdHeadParams::init(3, 2, 1000 + trial);
        // keep hidden pre-activations away from the relu kink
        for (size_t i = 0; i < head.b1.size(); ++i) head.b1[i] = 0.3;
        Tensor coarse = random_tensor({3, 4, 3}, rng);

        auto loss = [&]() { return predict_threshold_from(coarse, head); };
        ThresholdCache cache;
        predict_threshold_from(coarse, head, &cache);
        ThresholdGrads g = predict_threshold_backward(coarse, head, cache, 1.0);

        CHECK(max_grad_err(head.w1, g.w1, loss) < 1e-5);
        CHECK(max_grad_err(head.b1, g.b1, loss) < 1e-5);
        CHECK(max_grad_err(head.w2, g.w2, loss) < 1e-5);
        CHECK(max_grad_err(head.b2, g.b2, loss) < 1e-5);
        CHECK(max_grad_err(coarse, g.coarse, loss) < 1e-5);
    }
}

TEST_CASE("soft threshold examples and closure") {
    Tensor s({2, 2}, std::vector<double>{-20.0, 0.0, 3.5, 20.0});
    ProbabilityMaps m = soft_threshold(s, 0.0);
    CHECK(m.foreground(0, 1) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(m.foreground(0, 0) == doctest::Approx(1.0).epsilon(1e-8));  // sigma(20) ~ 1
    for (size_t i = 0; i < s.size(); ++i) {
        CHECK(m.foreground[i] + m.background[i] == doctest::Approx(1.0).epsilon(1e-15));
    }

    // matching S and T give exactly one half
    ProbabilityMaps at_t = soft_threshold(s, 3.5);
    CHECK(at_t.foreground(1, 0) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("foreground probability increases pointwise in T") {
    std::mt19937_64 rng(127);
    Tensor s = random_tensor({4, 4}, rng, -20.0, 20.0);
    ProbabilityMaps lo = soft_threshold(s, -1.0);
    ProbabilityMaps hi = soft_threshold(s, 2.5);
    for (size_t i = 0; i < s.size(); ++i) CHECK(hi.foreground[i] > lo.foreground[i]);
}

TEST_CASE("soft threshold gradients match finite differences") {
    std::mt19937_64 rng(131);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor s = random_tensor({3, 3}, rng, -5.0, 5.0);
        Tensor t({1}, std::vector<double>{0.7});
        Tensor r_fg = random_tensor({3, 3}, rng);
        Tensor r_bg = random_tensor({3, 3}, rng);
        auto loss = [&]() {
            ProbabilityMaps m = soft_threshold(s, t(0));
            double acc = 0.0;
            for (size_t i = 0; i < s.size(); ++i) {
                acc += m.foreground[i] * r_fg[i] + m.background[i] * r_bg[i];
            }
            return acc;
        };
        SoftThresholdGrads g = soft_threshold_backward(s, t(0), r_fg, r_bg);
        CHECK(max_grad_err(s, g.score, loss) < 1e-5);
        Tensor gt({1}, std::vector<double>{g.threshold});
        CHECK(max_grad_err(t, gt, loss) < 1e-5);
    }
}

TEST_CASE("dual-path fusion blends both channels") {
    Tensor fg_fine({1, 1}, std::vector<double>{1.0});
    Tensor fg_coarse({1, 1}, std::vector<double>{0.5});
    ProbabilityMaps fine{fg_fine, Tensor({1, 1}, std::vector<double>{0.0})};
    ProbabilityMaps coarse{fg_coarse, Tensor({1, 1}, std::vector<double>{0.5})};

    ProbabilityMaps fused = fuse_dual(fine, coarse, 0.8);
    CHECK(fused.foreground(0, 0) == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(fused.foreground(0, 0) + fused.background(0, 0) == doctest::Approx(1.0).epsilon(1e-15));

    CHECK_THROWS_AS(fuse_dual(fine, coarse, 1.0), Error);
    CHECK_THROWS_AS(fuse_dual(fine, coarse, -0.1), Error);

    // boundary value allowed with the strict check off: output equals the fine map
    ProbabilityMaps limit = fuse_dual(fine, coarse, 1.0, false);
    CHECK(limit.foreground(0, 0) == 1.0);
    CHECK(limit.background(0, 0) == 0.0);
}

TEST_CASE("fused maps keep the closure property on random inputs") {
    std::mt19937_64 rng(137);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor s1 = random_tensor({5, 5}, rng, -20.0, 20.0);
        Tensor s2 = random_tensor({5, 5}, rng, -20.0, 20.0);
        ProbabilityMaps fused = fuse_dual(soft_threshold(s1, 0.3), soft_threshold(s2, -1.2), 0.6);
        for (size_t i = 0; i < fused.foreground.size(); ++i) {
            CHECK(std::abs(fused.foreground[i] + fused.background[i] - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("hard mask keeps ties as foreground and thresholds at one half") {
    ProbabilityMaps tie{Tensor({1, 1}, std::vector<double>{0.5}),
                        Tensor({1, 1}, std::vector<double>{0.5})};
    CHECK(hard_mask(tie)(0, 0) == 1.0);

    ProbabilityMaps mixed{Tensor({1, 2}, std::vector<double>{0.9, 0.1}),
                          Tensor({1, 2}, std::vector<double>{0.1, 0.9})};
    Tensor m = hard_mask(mixed);
    CHECK(m(0, 0) == 1.0);
    CHECK(m(0, 1) == 0.0);

    std::mt19937_64 rng(139);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor s = random_tensor({6, 6}, rng, -20.0, 20.0);
        ProbabilityMaps maps = soft_threshold(s, 0.0);
        Tensor got = hard_mask(maps);
        for (size_t i = 0; i < got.size(); ++i) {
            const double want = maps.foreground[i] >= 0.5 ? 1.0 : 0.0;
            CHECK(got[i] == want);
        }
    }
}
