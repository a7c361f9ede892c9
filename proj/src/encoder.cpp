#include "qseg/encoder.hpp"

#include <cmath>
#include <random>

#include "qseg/error.hpp"
#include "qseg/rng.hpp"

namespace qseg {

namespace {

// Block order is fixed; taps come after indices kFineProj and kCoarseProj.
constexpr int kStem1 = 0;
constexpr int kStem2 = 1;
constexpr int kFineProj = 2;
constexpr int kDown = 3;
constexpr int kDilated = 4;
constexpr int kCoarseProj = 5;

ConvBlock make_block(std::mt19937_64& rng, const std::string& name, int kh, int kw, int cin,
                     int cout, ConvSpec spec, bool relu) {
    ConvBlock b;
    b.name = name;
    b.kernel = Tensor({kh, kw, cin, cout});
    b.bias = Tensor({cout});
    b.spec = spec;
    b.relu = relu;
    const double s = std::sqrt(1.0 / (static_cast<double>(kh) * kw * cin));
    std::uniform_real_distribution<double> dist(-s, s);
    for (size_t i = 0; i < b.kernel.size(); ++i) b.kernel[i] = dist(rng);
    if (!relu && kh == 1 && kw == 1) {
        // Projection taps start with zero column sums. Rectified inputs share
        // a large common component; without this the projected vectors all
        // land in one narrow cone, the cosine gradient vanishes there, and
        // meta-training stalls at the foreground base rate.
        for (int co = 0; co < cout; ++co) {
            double mean = 0.0;
            for (int ci = 0; ci < cin; ++ci) mean += b.kernel(0, 0, ci, co);
            mean /= cin;
            for (int ci = 0; ci < cin; ++ci) b.kernel(0, 0, ci, co) -= mean;
        }
    }
    return b;
}

}  // namespace

EncoderParams EncoderParams::init(int z, uint64_t seed) {
    require(z >= 2 && z % 2 == 0, "bad_argument", "encoder channel depth Z must be even and >= 2");
    std::mt19937_64 rng(seed);
    EncoderParams p;
    p.z = z;
    const int half = z / 2;
    p.blocks.push_back(make_block(rng, "stem1", 3, 3, 1, half, {2, 1, 1}, true));
    {
        // Start the stem as derivative-like filters (each 3x3 sums to zero):
        // features then respond to local contrast rather than absolute
        // intensity, which is what lets prototypes transfer to intensity
        // bands never seen in training.
        Tensor& k = p.blocks[0].kernel;
        for (int co = 0; co < half; ++co) {
            double mean = 0.0;
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b) mean += k(a, b, 0, co);
            mean /= 9.0;
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b) k(a, b, 0, co) -= mean;
        }
    }
    p.blocks.push_back(make_block(rng, "stem2", 3, 3, half, z, {2, 1, 1}, true));
    p.blocks.push_back(make_block(rng, "fine_proj", 1, 1, z, z, {1, 1, 0}, false));
    p.blocks.push_back(make_block(rng, "down", 3, 3, z, z, {2, 1, 1}, true));
    p.blocks.push_back(make_block(rng, "dilated", 3, 3, z, z, {1, 2, 2}, true));
    p.blocks.push_back(make_block(rng, "coarse_proj", 1, 1, z, z, {1, 1, 0}, false));
    return p;
}

DualFeatures extract_features(const Tensor& image, const EncoderParams& params,
                              EncoderCache* cache) {
    require(image.rank() == 3 && image.extent(2) == 1, "shape_mismatch",
            "encoder input must be H x W x 1, got " + shape_string(image.shape()));
    require(image.extent(0) % 8 == 0, "shape_mismatch",
            "encoder input height " + std::to_string(image.extent(0)) + " not divisible by 8");
    require(image.extent(1) % 8 == 0, "shape_mismatch",
            "encoder input width " + std::to_string(image.extent(1)) + " not divisible by 8");
    require(params.blocks.size() == 6, "bad_argument", "encoder expects 6 conv blocks");

    if (cache) {
        cache->input = image;
        cache->pre.clear();
        cache->post.clear();
    }

    auto apply = [&](const Tensor& in, int idx) {
        const ConvBlock& b = params.blocks[static_cast<size_t>(idx)];
        Tensor pre = conv2d(in, b.kernel, b.bias, b.spec);
        Tensor post = b.relu ? activation(pre, Activation::relu) : pre;
        if (cache) {
            cache->pre.push_back(pre);
            cache->post.push_back(post);
        }
        return post;
    };

    const Tensor a0 = apply(image, kStem1);
    const Tensor a1 = apply(a0, kStem2);
    DualFeatures f;
    f.fine = apply(a1, kFineProj);
    const Tensor a3 = apply(a1, kDown);
    const Tensor a4 = apply(a3, kDilated);
    f.coarse = apply(a4, kCoarseProj);
    return f;
}

EncoderGrads EncoderGrads::zeros_like(const EncoderParams& params) {
    EncoderGrads g;
    for (const ConvBlock& b : params.blocks) {
        g.kernel.emplace_back(b.kernel.shape());
        g.bias.emplace_back(b.bias.shape());
    }
    return g;
}

void EncoderGrads::accumulate(const EncoderGrads& other) {
    for (size_t b = 0; b < kernel.size(); ++b) {
        for (size_t i = 0; i < kernel[b].size(); ++i) kernel[b][i] += other.kernel[b][i];
        for (size_t i = 0; i < bias[b].size(); ++i) bias[b][i] += other.bias[b][i];
    }
}

EncoderGrads encoder_backward(const EncoderParams& params, const EncoderCache& cache,
                              const Tensor& grad_fine, const Tensor& grad_coarse) {
    require(cache.pre.size() == 6, "bad_argument", "encoder cache missing; run extract_features");
    EncoderGrads g = EncoderGrads::zeros_like(params);

    // Gradient through one block: relu first, then the convolution.
    auto back = [&](int idx, const Tensor& block_input, const Tensor& grad_post) {
        const ConvBlock& b = params.blocks[static_cast<size_t>(idx)];
        Tensor grad_pre = b.relu
                              ? activation_backward(cache.pre[static_cast<size_t>(idx)],
                                                    Activation::relu, grad_post)
                              : grad_post;
        ConvGrads cg = conv2d_backward(block_input, b.kernel, b.spec, grad_pre);
        const auto bi = static_cast<size_t>(idx);
        for (size_t i = 0; i < cg.kernel.size(); ++i) g.kernel[bi][i] += cg.kernel[i];
        for (size_t i = 0; i < cg.bias.size(); ++i) g.bias[bi][i] += cg.bias[i];
        return cg.input;
    };

    const Tensor& a0 = cache.post[kStem1];
    const Tensor& a1 = cache.post[kStem2];
    const Tensor& a3 = cache.post[kDown];
    const Tensor& a4 = cache.post[kDilated];

    Tensor g_a4 = back(kCoarseProj, a4, grad_coarse);
    Tensor g_a3 = back(kDilated, a3, g_a4);
    Tensor g_a1 = back(kDown, a1, g_a3);
    Tensor g_a1_fine = back(kFineProj, a1, grad_fine);
    for (size_t i = 0; i < g_a1.size(); ++i) g_a1[i] += g_a1_fine[i];
    Tensor g_a0 = back(kStem2, a0, g_a1);
    back(kStem1, cache.input, g_a0);
    return g;
}

}  // namespace qseg
