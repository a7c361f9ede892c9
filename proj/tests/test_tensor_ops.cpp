#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "qseg/error.hpp"
#include "qseg/ops.hpp"
#include "qseg/tensor.hpp"
#include "testutil.hpp"

using namespace qseg;
using namespace qseg::testutil;

namespace {

// Definitional cross-correlation, written independently of the library loops.
Tensor conv_oracle(const Tensor& in, const Tensor& k, const Tensor& bias, const ConvSpec& s) {
    const int H = in.extent(0), W = in.extent(1), Cin = in.extent(2);
    const int kh = k.extent(0), kw = k.extent(1), Cout = k.extent(3);
    const int out_h = (H + 2 * s.padding - ((kh - 1) * s.dilation + 1)) / s.stride + 1;
    const int out_w = (W + 2 * s.padding - ((kw - 1) * s.dilation + 1)) / s.stride + 1;
    Tensor out({out_h, out_w, Cout});
    for (int oh = 0; oh < out_h; ++oh)
        for (int ow = 0; ow < out_w; ++ow)
            for (int co = 0; co < Cout; ++co) {
                double acc = bias(co);
                for (int a = 0; a < kh; ++a)
                    for (int b = 0; b < kw; ++b)
                        for (int ci = 0; ci < Cin; ++ci) {
                            const int y = oh * s.stride - s.padding + a * s.dilation;
                            const int x = ow * s.stride - s.padding + b * s.dilation;
                            if (y < 0 || y >= H || x < 0 || x >= W) continue;
                            acc += in(y, x, ci) * k(a, b, ci, co);
                        }
                out(oh, ow, co) = acc;
            }
    return out;
}

// Closed-form bilinear sample of a map at one half-pixel source location.
double bilinear_oracle_at(const Tensor& map, double sy, double sx) {
    const int H = map.extent(0), W = map.extent(1);
    auto clamp = [](int v, int hi) { return std::min(std::max(v, 0), hi); };
    const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
    const double fy = sy - y0, fx = sx - x0;
    const int yl = clamp(y0, H - 1), yh = clamp(y0 + 1, H - 1);
    const int xl = clamp(x0, W - 1), xh = clamp(x0 + 1, W - 1);
    return (1 - fy) * ((1 - fx) * map(yl, xl) + fx * map(yl, xh)) +
           fy * ((1 - fx) * map(yh, xl) + fx * map(yh, xh));
}

}  // namespace

TEST_CASE("tensor shape and data invariants") {
    Tensor t({2, 3, 4});
    CHECK(t.size() == 24);
    CHECK(t.rank() == 3);
    CHECK_THROWS_AS(Tensor({2, 0, 4}), Error);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1.0, 2.0, 3.0}), Error);
}

TEST_CASE("tensor serialization round trip") {
    std::mt19937_64 rng(11);
    Tensor t = random_tensor({3, 5, 2}, rng, -10.0, 10.0);
    const auto dir = std::filesystem::temp_directory_path() / "qseg_tensor_test";
    std::filesystem::create_directories(dir);

    const std::string p64 = (dir / "a.t").string();
    save_tensor(t, p64, Precision::f64);
    Tensor back = load_tensor(p64);
    REQUIRE(back.same_shape(t));
    CHECK(std::memcmp(back.data(), t.data(), t.size() * sizeof(double)) == 0);

    const std::string p32 = (dir / "b.t").string();
    save_tensor(t, p32, Precision::f32);
    Tensor approx = load_tensor(p32);
    REQUIRE(approx.same_shape(t));
    for (size_t i = 0; i < t.size(); ++i) {
        CHECK(approx[i] == doctest::Approx(t[i]).epsilon(1e-6));
    }

    CHECK_THROWS_AS(load_tensor((dir / "missing.t").string()), Error);
}

TEST_CASE("conv2d identity and zero kernels") {
    std::mt19937_64 rng(7);
    Tensor in = random_tensor({5, 4, 1}, rng);

    Tensor ident({1, 1, 1, 1}, std::vector<double>{1.0});
    Tensor zero_bias({1});
    Tensor out = conv2d(in, ident, zero_bias, {1, 1, 0});
    REQUIRE(out.same_shape(in));
    for (size_t i = 0; i < in.size(); ++i) CHECK(out[i] == in[i]);

    Tensor zeros({3, 3, 1, 2});
    Tensor bias2({2});
    Tensor z = conv2d(in, zeros, bias2, {1, 1, 1});
    CHECK(z.shape() == std::vector<int>{5, 4, 2});
    for (size_t i = 0; i < z.size(); ++i) CHECK(z[i] == 0.0);
}

TEST_CASE("conv2d matches the hand cross-correlation example") {
    Tensor in({3, 3, 1}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor k({2, 2, 1, 1}, std::vector<double>{1, 1, 1, 1});
    Tensor bias({1});
    Tensor out = conv2d(in, k, bias, {1, 1, 0});
    REQUIRE(out.shape() == std::vector<int>{2, 2, 1});
    CHECK(out(0, 0, 0) == 12.0);
    CHECK(out(0, 1, 0) == 16.0);
    CHECK(out(1, 0, 0) == 24.0);
    CHECK(out(1, 1, 0) == 28.0);
}

TEST_CASE("conv2d agrees with the brute-force oracle on random instances") {
    std::mt19937_64 rng(23);
    for (int trial = 0; trial < 20; ++trial) {
        std::uniform_int_distribution<int> dim(3, 9), chan(1, 3), ksz(1, 3), one_two(1, 2);
        ConvSpec s{one_two(rng), one_two(rng), one_two(rng) - 1};
        const int kh = ksz(rng), kw = ksz(rng);
        Tensor in = random_tensor({dim(rng) + kh, dim(rng) + kw, chan(rng)}, rng);
        Tensor k = random_tensor({kh, kw, in.extent(2), chan(rng)}, rng);
        Tensor b = random_tensor({k.extent(3)}, rng);
        Tensor got = conv2d(in, k, b, s);
        Tensor want = conv_oracle(in, k, b, s);
        REQUIRE(got.same_shape(want));
        for (size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("conv2d rejects mismatched shapes with a diagnostic") {
    Tensor in({4, 4, 2});
    Tensor k({3, 3, 3, 1});
    Tensor b({1});
    CHECK_THROWS_WITH_AS(conv2d(in, k, b, {1, 1, 0}),
                         doctest::Contains("channels"), Error);
    Tensor k_big({9, 1, 2, 1});
    CHECK_THROWS_AS(conv2d(in, k_big, b, {1, 1, 0}), Error);
}

TEST_CASE("conv2d gradients match finite differences") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        std::uniform_int_distribution<int> chan(1, 2), one_two(1, 2);
        ConvSpec s{one_two(rng), one_two(rng), 1};
        Tensor in = random_tensor({5, 5, chan(rng)}, rng);
        Tensor k = random_tensor({3, 3, in.extent(2), chan(rng)}, rng);
        Tensor b = random_tensor({k.extent(3)}, rng);
        Tensor r = random_tensor(conv2d(in, k, b, s).shape(), rng);

        auto loss = [&]() {
            Tensor out = conv2d(in, k, b, s);
            double acc = 0.0;
            for (size_t i = 0; i < out.size(); ++i) acc += out[i] * r[i];
            return acc;
        };
        ConvGrads g = conv2d_backward(in, k, s, r);
        CHECK(max_grad_err(in, g.input, loss) < 1e-5);
        CHECK(max_grad_err(k, g.kernel, loss) < 1e-5);
        CHECK(max_grad_err(b, g.bias, loss) < 1e-5);
    }
}

TEST_CASE("dense forward examples") {
    SUBCASE("zero weights give the bias") {
        Tensor x({3}, std::vector<double>{1, 2, 3});
        Tensor w({3, 2});
        Tensor b({2}, std::vector<double>{0.5, -1.0});
        Tensor y = dense(x, w, b);
        CHECK(y(0) == 0.5);
        CHECK(y(1) == -1.0);
    }
    SUBCASE("identity weights pass the input through") {
        Tensor x({2}, std::vector<double>{3.0, -4.0});
        Tensor w({2, 2}, std::vector<double>{1, 0, 0, 1});
        Tensor b({2});
        Tensor y = dense(x, w, b);
        CHECK(y(0) == 3.0);
        CHECK(y(1) == -4.0);
    }
    SUBCASE("hand-computed affine map") {
        Tensor x({2}, std::vector<double>{1.0, 2.0});
        Tensor w({2, 2}, std::vector<double>{1, 0, 0, 1});
        Tensor b({2}, std::vector<double>{0.5, -0.5});
        Tensor y = dense(x, w, b);
        CHECK(y(0) == doctest::Approx(1.5));
        CHECK(y(1) == doctest::Approx(1.5));
    }
    SUBCASE("dimension mismatch is rejected") {
        Tensor x({3});
        Tensor w({2, 2});
        Tensor b({2});
        CHECK_THROWS_AS(dense(x, w, b), Error);
    }
}

TEST_CASE("dense gradients match finite differences") {
    std::mt19937_64 rng(37);
    for (int trial = 0; trial < 20; ++trial) {
        std::uniform_int_distribution<int> dim(1, 6);
        Tensor x = random_tensor({dim(rng)}, rng);
        Tensor w = random_tensor({x.extent(0), dim(rng)}, rng);
        Tensor b = random_tensor({w.extent(1)}, rng);
        Tensor r = random_tensor({w.extent(1)}, rng);
        auto loss = [&]() {
            Tensor y = dense(x, w, b);
            double acc = 0.0;
            for (size_t i = 0; i < y.size(); ++i) acc += y[i] * r[i];
            return acc;
        };
        DenseGrads g = dense_backward(x, w, r);
        CHECK(max_grad_err(x, g.input, loss) < 1e-5);
        CHECK(max_grad_err(w, g.weights, loss) < 1e-5);
        CHECK(max_grad_err(b, g.bias, loss) < 1e-5);
    }
}

TEST_CASE("activation forward examples") {
    Tensor x({4}, std::vector<double>{0.0, -2.0, -0.0001, 3.0});
    Tensor s = activation(x, Activation::sigmoid);
    CHECK(s(0) == 0.5);
    Tensor rl = activation(x, Activation::relu);
    CHECK(rl(0) == 0.0);
    CHECK(rl(1) == 0.0);
    CHECK(rl(2) == 0.0);
    CHECK(rl(3) == 3.0);
}

TEST_CASE("sigmoid backward at zero is a quarter") {
    Tensor x({1}, std::vector<double>{0.0});
    Tensor up({1}, std::vector<double>{1.0});
    Tensor g = activation_backward(x, Activation::sigmoid, up);
    CHECK(g(0) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("activation gradients match finite differences") {
    std::mt19937_64 rng(41);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_tensor_off_kink({4, 3, 2}, rng);
        Tensor r = random_tensor(x.shape(), rng);
        for (Activation kind : {Activation::relu, Activation::sigmoid}) {
            auto loss = [&]() {
                Tensor y = activation(x, kind);
                double acc = 0.0;
                for (size_t i = 0; i < y.size(); ++i) acc += y[i] * r[i];
                return acc;
            };
            Tensor g = activation_backward(x, kind, r);
            CHECK(max_grad_err(x, g, loss) < 1e-5);
        }
    }
}

TEST_CASE("bilinear resize identity and constant maps") {
    std::mt19937_64 rng(43);
    Tensor m = random_tensor({4, 6, 2}, rng);
    Tensor same = bilinear_resize(m, 4, 6);
    for (size_t i = 0; i < m.size(); ++i) CHECK(same[i] == doctest::Approx(m[i]).epsilon(1e-12));

    Tensor c({3, 3}, std::vector<double>(9, 2.5));
    Tensor big = bilinear_resize(c, 7, 5);
    for (size_t i = 0; i < big.size(); ++i) CHECK(big[i] == doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("bilinear resize matches the closed-form oracle") {
    Tensor m({2, 2}, std::vector<double>{0, 1, 2, 3});
    Tensor out = bilinear_resize(m, 3, 3);
    for (int oy = 0; oy < 3; ++oy) {
        for (int ox = 0; ox < 3; ++ox) {
            const double sy = (oy + 0.5) * 2.0 / 3.0 - 0.5;
            const double sx = (ox + 0.5) * 2.0 / 3.0 - 0.5;
            CHECK(out(oy, ox) == doctest::Approx(bilinear_oracle_at(m, sy, sx)).epsilon(1e-12));
        }
    }
    // frozen values for the 9 sample points under the half-pixel convention
    const std::vector<double> want{0, 0.5, 1, 1, 1.5, 2, 2, 2.5, 3};
    for (size_t i = 0; i < want.size(); ++i) CHECK(out[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("bilinear resize gradients match finite differences") {
    std::mt19937_64 rng(47);
    for (int trial = 0; trial < 20; ++trial) {
        std::uniform_int_distribution<int> dim(2, 7);
        Tensor m = random_tensor({dim(rng), dim(rng), 2}, rng);
        const int oh = dim(rng), ow = dim(rng);
        Tensor r = random_tensor({oh, ow, 2}, rng);
        auto loss = [&]() {
            Tensor y = bilinear_resize(m, oh, ow);
            double acc = 0.0;
            for (size_t i = 0; i < y.size(); ++i) acc += y[i] * r[i];
            return acc;
        };
        Tensor g = bilinear_resize_backward(m.shape(), r);
        CHECK(max_grad_err(m, g, loss) < 1e-5);
    }
}

TEST_CASE("global average pool examples and gradients") {
    Tensor m({2, 2, 1}, std::vector<double>{1, 2, 3, 4});
    Tensor v = global_avg_pool(m);
    REQUIRE(v.shape() == std::vector<int>{1});
    CHECK(v(0) == doctest::Approx(2.5).epsilon(1e-12));

    Tensor c({3, 5, 4}, std::vector<double>(60, -1.25));
    Tensor vc = global_avg_pool(c);
    REQUIRE(vc.extent(0) == 4);
    for (int i = 0; i < 4; ++i) CHECK(vc(i) == doctest::Approx(-1.25).epsilon(1e-12));

    std::mt19937_64 rng(53);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_tensor({3, 4, 2}, rng);
        Tensor r = random_tensor({2}, rng);
        auto loss = [&]() {
            Tensor y = global_avg_pool(x);
            return y(0) * r(0) + y(1) * r(1);
        };
        Tensor g = global_avg_pool_backward(x.shape(), r);
        CHECK(max_grad_err(x, g, loss) < 1e-5);
    }
}

TEST_CASE("three-op chain matches end-to-end finite differences") {
    std::mt19937_64 rng(59);
    Tensor in = random_tensor_off_kink({6, 6, 1}, rng);
    Tensor k = random_tensor({3, 3, 1, 2}, rng);
    Tensor b = random_tensor({2}, rng);
    const ConvSpec s{1, 1, 1};
    Tensor r = random_tensor({2}, rng);

    auto loss = [&]() {
        Tensor pre = conv2d(in, k, b, s);
        Tensor act = activation(pre, Activation::sigmoid);
        Tensor pooled = global_avg_pool(act);
        return pooled(0) * r(0) + pooled(1) * r(1);
    };

    Tensor pre = conv2d(in, k, b, s);
    Tensor act = activation(pre, Activation::sigmoid);
    Tensor g_act = global_avg_pool_backward(act.shape(), r);
    Tensor g_pre = activation_backward(pre, Activation::sigmoid, g_act);
    ConvGrads g = conv2d_backward(in, k, s, g_pre);

    CHECK(max_grad_err(in, g.input, loss) < 1e-5);
    CHECK(max_grad_err(k, g.kernel, loss) < 1e-5);
    CHECK(max_grad_err(b, g.bias, loss) < 1e-5);
}

TEST_CASE("operations are deterministic") {
    std::mt19937_64 rng(61);
    Tensor in = random_tensor({8, 8, 3}, rng);
    Tensor k = random_tensor({3, 3, 3, 4}, rng);
    Tensor b = random_tensor({4}, rng);
    Tensor a = conv2d(in, k, b, {2, 1, 1});
    Tensor c = conv2d(in, k, b, {2, 1, 1});
    CHECK(std::memcmp(a.data(), c.data(), a.size() * sizeof(double)) == 0);

    Tensor r1 = bilinear_resize(in, 13, 5);
    Tensor r2 = bilinear_resize(in, 13, 5);
    CHECK(std::memcmp(r1.data(), r2.data(), r1.size() * sizeof(double)) == 0);
}
