#pragma once

#include "qseg/tensor.hpp"

namespace qseg {

/// Differentiable-operation contract: every op exposes a forward evaluation
/// and a backward evaluation that maps the gradient w.r.t. the output to
/// gradients w.r.t. each input. All ops are pure functions of their inputs.

struct ConvSpec {
    int stride = 1;
    int dilation = 1;
    int padding = 0;
};

/// input H x W x Cin, kernel kh x kw x Cin x Cout, bias Cout.
/// Cross-correlation with zero padding.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, const ConvSpec& spec);

struct ConvGrads {
    Tensor input;
    Tensor kernel;
    Tensor bias;
};
ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const ConvSpec& spec,
                          const Tensor& grad_out);

/// input n, weights n x m, bias m -> output m.
Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias);

struct DenseGrads {
    Tensor input;
    Tensor weights;
    Tensor bias;
};
DenseGrads dense_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_out);

enum class Activation { relu, sigmoid };

Tensor activation(const Tensor& input, Activation kind);
Tensor activation_backward(const Tensor& input, Activation kind, const Tensor& grad_out);

double sigmoid(double x);

/// Centers-aligned ("half-pixel") bilinear interpolation with edge clamping.
/// Accepts H x W or H x W x C maps.
Tensor bilinear_resize(const Tensor& map, int out_h, int out_w);
Tensor bilinear_resize_backward(const std::vector<int>& in_shape, const Tensor& grad_out);

/// H x W x C -> per-channel spatial mean (length C).
Tensor global_avg_pool(const Tensor& map);
Tensor global_avg_pool_backward(const std::vector<int>& in_shape, const Tensor& grad_out);

}  // namespace qseg
