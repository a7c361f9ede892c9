#pragma once

#include <vector>

#include "qseg/episode.hpp"
#include "qseg/model.hpp"
#include "qseg/refine.hpp"

namespace qseg {

struct PathOutput {
    bool fine = false;
    Tensor prototype_initial;     // pooled from the support features
    Tensor prototype;             // after refinement (equal when disabled)
    Tensor score;                 // feature-resolution anomaly map
    ProbabilityMaps feature_maps;
    Tensor fg_image;              // foreground upsampled to image extents
    RefineTrace refine_trace;
};

struct SegmentationResult {
    ProbabilityMaps fused;  // image extents
    Tensor mask;            // binary, image extents
    double threshold_fine = 0.0;
    double threshold_coarse = 0.0;
    std::vector<PathOutput> paths;
};

struct EpisodeFeatures {
    DualFeatures support;
    DualFeatures query;
};

EpisodeFeatures compute_features(const Episode& episode, const ModelParams& params);

/// Inference flow: pool prototypes, score, soft-threshold with the shared
/// query-informed T, optionally refine each path's prototype, upsample and
/// fuse. Overrides exist so sweeps can reuse one feature extraction.
SegmentationResult segment_with_features(const EpisodeFeatures& features, const Episode& episode,
                                         const ModelParams& params,
                                         const RefineConfig* refine_override = nullptr,
                                         const double* alpha_override = nullptr);

SegmentationResult segment_episode(const Episode& episode, const ModelParams& params);

/// Foreground map upsampled to the image extents; background is its
/// complement so the closure is exact by construction.
ProbabilityMaps upsample_maps(const ProbabilityMaps& feature_maps, int out_h, int out_w);

}  // namespace qseg
