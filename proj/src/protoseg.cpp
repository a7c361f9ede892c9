#include "qseg/protoseg.hpp"

#include <cmath>
#include <random>

#include "qseg/error.hpp"
#include "qseg/log.hpp"
#include "qseg/ops.hpp"

namespace qseg {

namespace {

double mask_sum(const Tensor& mask) {
    double s = 0.0;
    for (size_t i = 0; i < mask.size(); ++i) s += mask[i];
    return s;
}

void check_mask(const Tensor& mask) {
    require(mask.rank() == 2, "shape_mismatch",
            "mask must be H x W, got " + shape_string(mask.shape()));
}

}  // namespace

ThresholdHeadParams ThresholdHeadParams::init(int z, int hidden, uint64_t seed) {
    require(z >= 1 && hidden >= 1, "bad_argument", "threshold head dimensions must be >= 1");
    std::mt19937_64 rng(seed);
    ThresholdHeadParams p;
    p.w1 = Tensor({z, hidden});
    p.b1 = Tensor({hidden});
    p.w2 = Tensor({hidden, 1});
    p.b2 = Tensor({1});
    const double s1 = std::sqrt(1.0 / z);
    std::uniform_real_distribution<double> d1(-s1, s1);
    for (size_t i = 0; i < p.w1.size(); ++i) p.w1[i] = d1(rng);
    const double s2 = std::sqrt(1.0 / hidden);
    std::uniform_real_distribution<double> d2(-s2, s2);
    for (size_t i = 0; i < p.w2.size(); ++i) p.w2[i] = d2(rng);
    return p;
}

Tensor masked_average_pool(const Tensor& features, const Tensor& mask) {
    require(features.rank() == 3, "shape_mismatch",
            "features must be H x W x Z, got " + shape_string(features.shape()));
    check_mask(mask);
    const int h = mask.extent(0), w = mask.extent(1);
    const double total = mask_sum(mask);
    require(total > 0.0, "empty_mask", "empty support mask");

    const Tensor* feat = &features;
    Tensor resized;
    if (features.extent(0) != h || features.extent(1) != w) {
        resized = bilinear_resize(features, h, w);
        feat = &resized;
    }
    const int z = feat->extent(2);
    Tensor proto({z});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double m = mask(y, x);
            if (m == 0.0) continue;
            const double* f = &(*feat)(y, x, 0);
            for (int c = 0; c < z; ++c) proto(c) += m * f[c];
        }
    }
    for (int c = 0; c < z; ++c) proto(c) /= total;
    return proto;
}

Tensor masked_average_pool_backward(const std::vector<int>& features_shape, const Tensor& mask,
                                    const Tensor& grad_prototype) {
    check_mask(mask);
    require(features_shape.size() == 3, "shape_mismatch", "features shape must be rank 3");
    const int h = mask.extent(0), w = mask.extent(1);
    const int z = features_shape[2];
    require(grad_prototype.rank() == 1 && grad_prototype.extent(0) == z, "shape_mismatch",
            "prototype gradient length does not match channel depth");
    const double total = mask_sum(mask);
    require(total > 0.0, "empty_mask", "empty support mask");

    Tensor grad_resized({h, w, z});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double m = mask(y, x);
            if (m == 0.0) continue;
            double* g = &grad_resized(y, x, 0);
            for (int c = 0; c < z; ++c) g[c] = m * grad_prototype(c) / total;
        }
    }
    if (features_shape[0] == h && features_shape[1] == w) return grad_resized;
    return bilinear_resize_backward(features_shape, grad_resized);
}

Tensor anomaly_score_map(const Tensor& query, const Tensor& prototype, double a) {
    require(query.rank() == 3, "shape_mismatch",
            "query features must be H x W x Z, got " + shape_string(query.shape()));
    const int z = query.extent(2);
    require(prototype.rank() == 1 && prototype.extent(0) == z, "shape_mismatch",
            "prototype length " + std::to_string(prototype.extent(0)) +
                " does not match channel depth " + std::to_string(z));
    require(a > 0.0, "bad_argument", "similarity scale a must be > 0");

    const int h = query.extent(0), w = query.extent(1);
    double pn = 0.0;
    for (int c = 0; c < z; ++c) pn += prototype(c) * prototype(c);
    pn = std::sqrt(pn);
    if (pn == 0.0) warn(Warn::zero_norm_cosine, "zero-norm prototype in anomaly_score_map");

    Tensor score({h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double* q = &query(y, x, 0);
            double dot = 0.0, qn = 0.0;
            for (int c = 0; c < z; ++c) {
                dot += q[c] * prototype(c);
                qn += q[c] * q[c];
            }
            qn = std::sqrt(qn);
            const double denom = qn * pn;
            if (denom == 0.0) {
                if (pn > 0.0) warn(Warn::zero_norm_cosine, "zero-norm query vector in anomaly_score_map");
                score(y, x) = 0.0;
            } else {
                score(y, x) = -a * dot / denom;
            }
        }
    }
    return score;
}

ScoreGrads anomaly_score_backward(const Tensor& query, const Tensor& prototype, double a,
                                  const Tensor& grad_score) {
    const int h = query.extent(0), w = query.extent(1), z = query.extent(2);
    require(grad_score.rank() == 2 && grad_score.extent(0) == h && grad_score.extent(1) == w,
            "shape_mismatch", "score gradient shape does not match");

    ScoreGrads g;
    g.query = Tensor(query.shape());
    g.prototype = Tensor(prototype.shape());

    double pn2 = 0.0;
    for (int c = 0; c < z; ++c) pn2 += prototype(c) * prototype(c);
    const double pn = std::sqrt(pn2);
    if (pn == 0.0) return g;  // score was identically 0

    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double gs = grad_score(y, x);
            if (gs == 0.0) continue;
            const double* q = &query(y, x, 0);
            double dot = 0.0, qn2 = 0.0;
            for (int c = 0; c < z; ++c) {
                dot += q[c] * prototype(c);
                qn2 += q[c] * q[c];
            }
            const double qn = std::sqrt(qn2);
            if (qn == 0.0) continue;
            const double inv = 1.0 / (qn * pn);
            const double cosine = dot * inv;
            double* gq = &g.query(y, x, 0);
            for (int c = 0; c < z; ++c) {
                gq[c] += -a * gs * (prototype(c) * inv - cosine * q[c] / qn2);
                g.prototype(c) += -a * gs * (q[c] * inv - cosine * prototype(c) / pn2);
            }
        }
    }
    return g;
}

double predict_threshold_from(const Tensor& coarse, const ThresholdHeadParams& head,
                              ThresholdCache* cache) {
    Tensor pooled = global_avg_pool(coarse);
    Tensor pre = dense(pooled, head.w1, head.b1);
    Tensor hidden = activation(pre, Activation::relu);
    Tensor out = dense(hidden, head.w2, head.b2);
    if (cache) {
        cache->pooled = std::move(pooled);
        cache->hidden_pre = std::move(pre);
    }
    return out(0);
}

double predict_threshold(const DualFeatures& query, const ThresholdHeadParams& head) {
    return predict_threshold_from(query.coarse, head, nullptr);
}

ThresholdGrads predict_threshold_backward(const Tensor& coarse, const ThresholdHeadParams& head,
                                          const ThresholdCache& cache, double grad_t) {
    Tensor hidden = activation(cache.hidden_pre, Activation::relu);
    Tensor grad_out({1}, std::vector<double>{grad_t});
    DenseGrads g2 = dense_backward(hidden, head.w2, grad_out);
    Tensor grad_pre = activation_backward(cache.hidden_pre, Activation::relu, g2.input);
    DenseGrads g1 = dense_backward(cache.pooled, head.w1, grad_pre);

    ThresholdGrads g;
    g.w1 = std::move(g1.weights);
    g.b1 = std::move(g1.bias);
    g.w2 = std::move(g2.weights);
    g.b2 = std::move(g2.bias);
    g.coarse = global_avg_pool_backward(coarse.shape(), g1.input);
    return g;
}

ProbabilityMaps soft_threshold(const Tensor& score, double threshold) {
    require(score.rank() == 2, "shape_mismatch",
            "score map must be H x W, got " + shape_string(score.shape()));
    ProbabilityMaps m;
    m.foreground = Tensor(score.shape());
    m.background = Tensor(score.shape());
    for (size_t i = 0; i < score.size(); ++i) {
        const double s = sigmoid(score[i] - threshold);
        m.foreground[i] = 1.0 - s;
        m.background[i] = s;
    }
    return m;
}

SoftThresholdGrads soft_threshold_backward(const Tensor& score, double threshold,
                                           const Tensor& grad_fg, const Tensor& grad_bg) {
    require(grad_fg.same_shape(score) && grad_bg.same_shape(score), "shape_mismatch",
            "soft_threshold_backward gradient shapes do not match score map");
    SoftThresholdGrads g;
    g.score = Tensor(score.shape());
    g.threshold = 0.0;
    for (size_t i = 0; i < score.size(); ++i) {
        const double s = sigmoid(score[i] - threshold);
        const double ds = s * (1.0 - s);
        // foreground = 1 - sigma(S - T): d/dS = -sigma', d/dT = +sigma'
        const double through = (grad_bg[i] - grad_fg[i]) * ds;
        g.score[i] = through;
        g.threshold -= through;
    }
    return g;
}

ProbabilityMaps fuse_dual(const ProbabilityMaps& fine, const ProbabilityMaps& coarse, double alpha,
                          bool strict) {
    if (strict) {
        require(alpha > 0.0 && alpha < 1.0, "bad_argument",
                "fusion balance factor must lie in (0,1), got " + std::to_string(alpha));
    }
    require(fine.foreground.same_shape(coarse.foreground), "shape_mismatch",
            "fuse_dual inputs must share extents; fine " + shape_string(fine.foreground.shape()) +
                " vs coarse " + shape_string(coarse.foreground.shape()));
    ProbabilityMaps out;
    out.foreground = Tensor(fine.foreground.shape());
    out.background = Tensor(fine.background.shape());
    for (size_t i = 0; i < out.foreground.size(); ++i) {
        out.foreground[i] = alpha * fine.foreground[i] + (1.0 - alpha) * coarse.foreground[i];
        out.background[i] = alpha * fine.background[i] + (1.0 - alpha) * coarse.background[i];
    }
    return out;
}

Tensor hard_mask(const ProbabilityMaps& maps) {
    require(maps.foreground.same_shape(maps.background), "shape_mismatch",
            "probability map channels must share extents");
    Tensor out(maps.foreground.shape());
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = maps.background[i] <= maps.foreground[i] ? 1.0 : 0.0;
    }
    return out;
}

}  // namespace qseg
