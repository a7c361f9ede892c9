#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qseg/ops.hpp"
#include "qseg/tensor.hpp"

namespace qseg {

/// Pair of feature maps for one image: fine at 1/4 of the image resolution,
/// coarse at 1/8. Both share channel depth Z.
struct DualFeatures {
    Tensor fine;    // H/4 x W/4 x Z
    Tensor coarse;  // H/8 x W/8 x Z
};

struct ConvBlock {
    std::string name;
    Tensor kernel;  // kh x kw x Cin x Cout
    Tensor bias;    // Cout
    ConvSpec spec;
    bool relu = true;
};

/// Small trainable extractor shared between support and query images.
/// Topology: two stride-2 3x3 blocks down to 1/4 resolution (fine tap via a
/// 1x1 projection), one stride-2 3x3 block to 1/8, one dilation-2 3x3 block,
/// then the coarse 1x1 projection. Both taps project to the same Z.
struct EncoderParams {
    std::vector<ConvBlock> blocks;
    int z = 32;

    static EncoderParams init(int z, uint64_t seed);
};

/// Forward intermediates kept for the backward pass.
struct EncoderCache {
    Tensor input;
    std::vector<Tensor> pre;   // pre-activation output of each block
    std::vector<Tensor> post;  // after relu where the block has one
};

/// Requires H and W divisible by 8; rejected before any computation.
DualFeatures extract_features(const Tensor& image, const EncoderParams& params,
                              EncoderCache* cache = nullptr);

struct EncoderGrads {
    std::vector<Tensor> kernel;
    std::vector<Tensor> bias;

    static EncoderGrads zeros_like(const EncoderParams& params);
    void accumulate(const EncoderGrads& other);
};

/// Gradients of a scalar loss w.r.t. all block parameters, given gradients
/// w.r.t. the two feature maps of one image.
EncoderGrads encoder_backward(const EncoderParams& params, const EncoderCache& cache,
                              const Tensor& grad_fine, const Tensor& grad_coarse);

}  // namespace qseg
