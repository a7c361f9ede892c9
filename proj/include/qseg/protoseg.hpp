#pragma once

#include <cstdint>

#include "qseg/encoder.hpp"
#include "qseg/tensor.hpp"

namespace qseg {

struct SegConfig {
    double a = 20.0;      // similarity scaling factor
    double alpha = 0.8;   // fusion balance factor, in (0,1)
};

/// Two dense layers Z -> hidden -> 1 with a relu hidden, fed by the globally
/// pooled coarse query features. Produces one scalar threshold per image.
struct ThresholdHeadParams {
    Tensor w1;  // Z x hidden
    Tensor b1;  // hidden
    Tensor w2;  // hidden x 1
    Tensor b2;  // 1

    static ThresholdHeadParams init(int z, int hidden, uint64_t seed);
};

/// foreground + background = 1 elementwise, always.
struct ProbabilityMaps {
    Tensor foreground;
    Tensor background;
};

/// Mean of feature vectors at mask-positive locations. Features are bilinearly
/// resized to the mask extents first when they differ. Rejects an empty mask.
Tensor masked_average_pool(const Tensor& features, const Tensor& mask);

/// Gradient w.r.t. the un-resized features of the given shape.
Tensor masked_average_pool_backward(const std::vector<int>& features_shape, const Tensor& mask,
                                    const Tensor& grad_prototype);

/// S(h,w) = -a * cos(query(h,w), prototype). Zero-norm vectors score 0 with a
/// logged warning.
Tensor anomaly_score_map(const Tensor& query, const Tensor& prototype, double a);

struct ScoreGrads {
    Tensor query;
    Tensor prototype;
};
ScoreGrads anomaly_score_backward(const Tensor& query, const Tensor& prototype, double a,
                                  const Tensor& grad_score);

struct ThresholdCache {
    Tensor pooled;      // Z
    Tensor hidden_pre;  // hidden
};

/// T = head(global_avg_pool(coarse map)).
double predict_threshold_from(const Tensor& coarse, const ThresholdHeadParams& head,
                              ThresholdCache* cache = nullptr);
double predict_threshold(const DualFeatures& query, const ThresholdHeadParams& head);

struct ThresholdGrads {
    Tensor w1, b1, w2, b2;
    Tensor coarse;  // gradient w.r.t. the coarse feature map
};
ThresholdGrads predict_threshold_backward(const Tensor& coarse, const ThresholdHeadParams& head,
                                          const ThresholdCache& cache, double grad_t);

/// foreground = 1 - sigmoid(S - T), background = complement.
ProbabilityMaps soft_threshold(const Tensor& score, double threshold);

struct SoftThresholdGrads {
    Tensor score;
    double threshold;
};
SoftThresholdGrads soft_threshold_backward(const Tensor& score, double threshold,
                                           const Tensor& grad_fg, const Tensor& grad_bg);

/// alpha * fine + (1 - alpha) * coarse on both channels. Inputs must already
/// share extents. alpha outside (0,1) is rejected unless strict is off.
ProbabilityMaps fuse_dual(const ProbabilityMaps& fine, const ProbabilityMaps& coarse, double alpha,
                          bool strict = true);

/// 1 where background <= foreground (ties are foreground), else 0.
Tensor hard_mask(const ProbabilityMaps& maps);

}  // namespace qseg
