#include "qseg/ops.hpp"

#include <algorithm>
#include <cmath>

#include "qseg/error.hpp"

namespace qseg {

namespace {

struct ConvDims {
    int in_h, in_w, in_c;
    int k_h, k_w, out_c;
    int out_h, out_w;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                   const ConvSpec& spec) {
    require(input.rank() == 3, "shape_mismatch",
            "conv2d input must be H x W x C, got " + shape_string(input.shape()));
    require(kernel.rank() == 4, "shape_mismatch",
            "conv2d kernel must be kh x kw x Cin x Cout, got " + shape_string(kernel.shape()));
    require(bias.rank() == 1, "shape_mismatch",
            "conv2d bias must be rank 1, got " + shape_string(bias.shape()));
    require(spec.stride >= 1, "bad_argument", "conv2d stride must be >= 1");
    require(spec.dilation >= 1, "bad_argument", "conv2d dilation must be >= 1");
    require(spec.padding >= 0, "bad_argument", "conv2d padding must be >= 0");

    ConvDims d;
    d.in_h = input.extent(0);
    d.in_w = input.extent(1);
    d.in_c = input.extent(2);
    d.k_h = kernel.extent(0);
    d.k_w = kernel.extent(1);
    require(kernel.extent(2) == d.in_c, "shape_mismatch",
            "conv2d kernel input channels " + std::to_string(kernel.extent(2)) +
                " do not match input channels " + std::to_string(d.in_c));
    d.out_c = kernel.extent(3);
    require(bias.extent(0) == d.out_c, "shape_mismatch",
            "conv2d bias length " + std::to_string(bias.extent(0)) +
                " does not match kernel output channels " + std::to_string(d.out_c));

    const int eff_h = (d.k_h - 1) * spec.dilation + 1;
    const int eff_w = (d.k_w - 1) * spec.dilation + 1;
    d.out_h = (d.in_h + 2 * spec.padding - eff_h) / spec.stride + 1;
    d.out_w = (d.in_w + 2 * spec.padding - eff_w) / spec.stride + 1;
    require(d.in_h + 2 * spec.padding >= eff_h, "shape_mismatch",
            "conv2d kernel height " + std::to_string(eff_h) + " (dilated) exceeds padded input height " +
                std::to_string(d.in_h + 2 * spec.padding));
    require(d.in_w + 2 * spec.padding >= eff_w, "shape_mismatch",
            "conv2d kernel width " + std::to_string(eff_w) + " (dilated) exceeds padded input width " +
                std::to_string(d.in_w + 2 * spec.padding));
    return d;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, const ConvSpec& spec) {
    const ConvDims d = conv_dims(input, kernel, bias, spec);
    Tensor out({d.out_h, d.out_w, d.out_c});

    for (int oh = 0; oh < d.out_h; ++oh) {
        for (int ow = 0; ow < d.out_w; ++ow) {
            double* o = &out(oh, ow, 0);
            for (int co = 0; co < d.out_c; ++co) o[co] = bias(co);
            for (int kh = 0; kh < d.k_h; ++kh) {
                const int iy = oh * spec.stride - spec.padding + kh * spec.dilation;
                if (iy < 0 || iy >= d.in_h) continue;
                for (int kw = 0; kw < d.k_w; ++kw) {
                    const int ix = ow * spec.stride - spec.padding + kw * spec.dilation;
                    if (ix < 0 || ix >= d.in_w) continue;
                    const double* in = &input(iy, ix, 0);
                    for (int ci = 0; ci < d.in_c; ++ci) {
                        const double v = in[ci];
                        if (v == 0.0) continue;
                        const double* k = &kernel(kh, kw, ci, 0);
                        for (int co = 0; co < d.out_c; ++co) o[co] += v * k[co];
                    }
                }
            }
        }
    }
    return out;
}

ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const ConvSpec& spec,
                          const Tensor& grad_out) {
    Tensor bias({kernel.extent(3)});
    const ConvDims d = conv_dims(input, kernel, bias, spec);
    require(grad_out.rank() == 3 && grad_out.extent(0) == d.out_h && grad_out.extent(1) == d.out_w &&
                grad_out.extent(2) == d.out_c,
            "shape_mismatch", "conv2d_backward gradient shape " + shape_string(grad_out.shape()) +
                                  " does not match output shape");

    ConvGrads g;
    g.input = Tensor(input.shape());
    g.kernel = Tensor(kernel.shape());
    g.bias = Tensor({d.out_c});

    for (int oh = 0; oh < d.out_h; ++oh) {
        for (int ow = 0; ow < d.out_w; ++ow) {
            const double* go = &grad_out(oh, ow, 0);
            for (int co = 0; co < d.out_c; ++co) g.bias(co) += go[co];
            for (int kh = 0; kh < d.k_h; ++kh) {
                const int iy = oh * spec.stride - spec.padding + kh * spec.dilation;
                if (iy < 0 || iy >= d.in_h) continue;
                for (int kw = 0; kw < d.k_w; ++kw) {
                    const int ix = ow * spec.stride - spec.padding + kw * spec.dilation;
                    if (ix < 0 || ix >= d.in_w) continue;
                    const double* in = &input(iy, ix, 0);
                    double* gin = &g.input(iy, ix, 0);
                    for (int ci = 0; ci < d.in_c; ++ci) {
                        const double* k = &kernel(kh, kw, ci, 0);
                        double* gk = &g.kernel(kh, kw, ci, 0);
                        const double v = in[ci];
                        double acc = 0.0;
                        for (int co = 0; co < d.out_c; ++co) {
                            gk[co] += v * go[co];
                            acc += k[co] * go[co];
                        }
                        gin[ci] += acc;
                    }
                }
            }
        }
    }
    return g;
}

Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias) {
    require(input.rank() == 1 && weights.rank() == 2 && bias.rank() == 1, "shape_mismatch",
            "dense expects vector, matrix, vector");
    const int n = input.extent(0);
    const int m = weights.extent(1);
    require(weights.extent(0) == n, "shape_mismatch",
            "dense weights rows " + std::to_string(weights.extent(0)) + " do not match input length " +
                std::to_string(n));
    require(bias.extent(0) == m, "shape_mismatch",
            "dense bias length " + std::to_string(bias.extent(0)) + " does not match output length " +
                std::to_string(m));

    Tensor out({m});
    for (int j = 0; j < m; ++j) out(j) = bias(j);
    for (int i = 0; i < n; ++i) {
        const double v = input(i);
        if (v == 0.0) continue;
        const double* w = &weights(i, 0);
        for (int j = 0; j < m; ++j) out(j) += v * w[j];
    }
    return out;
}

DenseGrads dense_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_out) {
    const int n = input.extent(0);
    const int m = weights.extent(1);
    require(grad_out.rank() == 1 && grad_out.extent(0) == m, "shape_mismatch",
            "dense_backward gradient length does not match output length");

    DenseGrads g;
    g.input = Tensor({n});
    g.weights = Tensor(weights.shape());
    g.bias = grad_out;
    for (int i = 0; i < n; ++i) {
        const double v = input(i);
        const double* w = &weights(i, 0);
        double* gw = &g.weights(i, 0);
        double acc = 0.0;
        for (int j = 0; j < m; ++j) {
            gw[j] = v * grad_out(j);
            acc += w[j] * grad_out(j);
        }
        g.input(i) = acc;
    }
    return g;
}

double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Tensor activation(const Tensor& input, Activation kind) {
    Tensor out(input.shape());
    if (kind == Activation::relu) {
        for (size_t i = 0; i < input.size(); ++i) out[i] = input[i] > 0.0 ? input[i] : 0.0;
    } else {
        for (size_t i = 0; i < input.size(); ++i) out[i] = sigmoid(input[i]);
    }
    return out;
}

Tensor activation_backward(const Tensor& input, Activation kind, const Tensor& grad_out) {
    require(input.same_shape(grad_out), "shape_mismatch",
            "activation_backward gradient shape does not match input shape");
    Tensor g(input.shape());
    if (kind == Activation::relu) {
        for (size_t i = 0; i < input.size(); ++i) g[i] = input[i] > 0.0 ? grad_out[i] : 0.0;
    } else {
        for (size_t i = 0; i < input.size(); ++i) {
            const double s = sigmoid(input[i]);
            g[i] = s * (1.0 - s) * grad_out[i];
        }
    }
    return g;
}

namespace {

struct Sample {
    int lo, hi;
    double w_hi;  // weight of hi, 1-w_hi goes to lo
};

// Half-pixel source coordinate with edge clamping.
Sample sample_axis(int out_idx, int in_extent, int out_extent) {
    const double src = (out_idx + 0.5) * static_cast<double>(in_extent) / out_extent - 0.5;
    double lo_f = std::floor(src);
    Sample s;
    s.w_hi = src - lo_f;
    s.lo = std::clamp(static_cast<int>(lo_f), 0, in_extent - 1);
    s.hi = std::clamp(static_cast<int>(lo_f) + 1, 0, in_extent - 1);
    return s;
}

}  // namespace

Tensor bilinear_resize(const Tensor& map, int out_h, int out_w) {
    require(map.rank() == 2 || map.rank() == 3, "shape_mismatch",
            "bilinear_resize expects H x W or H x W x C, got " + shape_string(map.shape()));
    require(out_h >= 1 && out_w >= 1, "bad_argument", "bilinear_resize target extents must be >= 1");
    const int in_h = map.extent(0);
    const int in_w = map.extent(1);
    const int c = map.rank() == 3 ? map.extent(2) : 1;

    std::vector<int> out_shape = map.rank() == 3 ? std::vector<int>{out_h, out_w, c}
                                                 : std::vector<int>{out_h, out_w};
    Tensor out(out_shape);
    const double* src = map.data();
    double* dst = out.data();

    for (int oy = 0; oy < out_h; ++oy) {
        const Sample sy = sample_axis(oy, in_h, out_h);
        for (int ox = 0; ox < out_w; ++ox) {
            const Sample sx = sample_axis(ox, in_w, out_w);
            const double w00 = (1.0 - sy.w_hi) * (1.0 - sx.w_hi);
            const double w01 = (1.0 - sy.w_hi) * sx.w_hi;
            const double w10 = sy.w_hi * (1.0 - sx.w_hi);
            const double w11 = sy.w_hi * sx.w_hi;
            const double* p00 = src + (static_cast<size_t>(sy.lo) * in_w + sx.lo) * c;
            const double* p01 = src + (static_cast<size_t>(sy.lo) * in_w + sx.hi) * c;
            const double* p10 = src + (static_cast<size_t>(sy.hi) * in_w + sx.lo) * c;
            const double* p11 = src + (static_cast<size_t>(sy.hi) * in_w + sx.hi) * c;
            double* o = dst + (static_cast<size_t>(oy) * out_w + ox) * c;
            for (int ch = 0; ch < c; ++ch) {
                o[ch] = w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
            }
        }
    }
    return out;
}

Tensor bilinear_resize_backward(const std::vector<int>& in_shape, const Tensor& grad_out) {
    require(in_shape.size() == grad_out.shape().size(), "shape_mismatch",
            "bilinear_resize_backward rank mismatch");
    const int in_h = in_shape[0];
    const int in_w = in_shape[1];
    const int out_h = grad_out.extent(0);
    const int out_w = grad_out.extent(1);
    const int c = in_shape.size() == 3 ? in_shape[2] : 1;
    if (in_shape.size() == 3) {
        require(grad_out.extent(2) == c, "shape_mismatch",
                "bilinear_resize_backward channel mismatch");
    }

    Tensor g(in_shape);
    double* dst = g.data();
    const double* src = grad_out.data();

    for (int oy = 0; oy < out_h; ++oy) {
        const Sample sy = sample_axis(oy, in_h, out_h);
        for (int ox = 0; ox < out_w; ++ox) {
            const Sample sx = sample_axis(ox, in_w, out_w);
            const double w00 = (1.0 - sy.w_hi) * (1.0 - sx.w_hi);
            const double w01 = (1.0 - sy.w_hi) * sx.w_hi;
            const double w10 = sy.w_hi * (1.0 - sx.w_hi);
            const double w11 = sy.w_hi * sx.w_hi;
            double* p00 = dst + (static_cast<size_t>(sy.lo) * in_w + sx.lo) * c;
            double* p01 = dst + (static_cast<size_t>(sy.lo) * in_w + sx.hi) * c;
            double* p10 = dst + (static_cast<size_t>(sy.hi) * in_w + sx.lo) * c;
            double* p11 = dst + (static_cast<size_t>(sy.hi) * in_w + sx.hi) * c;
            const double* go = src + (static_cast<size_t>(oy) * out_w + ox) * c;
            for (int ch = 0; ch < c; ++ch) {
                p00[ch] += w00 * go[ch];
                p01[ch] += w01 * go[ch];
                p10[ch] += w10 * go[ch];
                p11[ch] += w11 * go[ch];
            }
        }
    }
    return g;
}

Tensor global_avg_pool(const Tensor& map) {
    require(map.rank() == 3, "shape_mismatch",
            "global_avg_pool expects H x W x C, got " + shape_string(map.shape()));
    const int h = map.extent(0), w = map.extent(1), c = map.extent(2);
    Tensor out({c});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double* p = &map(y, x, 0);
            for (int ch = 0; ch < c; ++ch) out(ch) += p[ch];
        }
    }
    const double inv = 1.0 / (static_cast<double>(h) * w);
    for (int ch = 0; ch < c; ++ch) out(ch) *= inv;
    return out;
}

Tensor global_avg_pool_backward(const std::vector<int>& in_shape, const Tensor& grad_out) {
    require(in_shape.size() == 3 && grad_out.rank() == 1 && grad_out.extent(0) == in_shape[2],
            "shape_mismatch", "global_avg_pool_backward shape mismatch");
    Tensor g(in_shape);
    const int h = in_shape[0], w = in_shape[1], c = in_shape[2];
    const double inv = 1.0 / (static_cast<double>(h) * w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double* p = &g(y, x, 0);
            for (int ch = 0; ch < c; ++ch) p[ch] = grad_out(ch) * inv;
        }
    }
    return g;
}

}  // namespace qseg
