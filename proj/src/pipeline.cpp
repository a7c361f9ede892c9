#include "qseg/pipeline.hpp"

#include "qseg/error.hpp"
#include "qseg/ops.hpp"

namespace qseg {

EpisodeFeatures compute_features(const Episode& episode, const ModelParams& params) {
    require(episode.support_image.rank() == 3 && episode.query_image.rank() == 3,
            "shape_mismatch", "episode images must be H x W x 1");
    require(episode.support_image.same_shape(episode.query_image), "shape_mismatch",
            "support and query images must share extents");
    EpisodeFeatures f;
    f.support = extract_features(episode.support_image, params.encoder);
    f.query = extract_features(episode.query_image, params.encoder);
    return f;
}

ProbabilityMaps upsample_maps(const ProbabilityMaps& feature_maps, int out_h, int out_w) {
    ProbabilityMaps out;
    out.foreground = bilinear_resize(feature_maps.foreground, out_h, out_w);
    out.background = Tensor(out.foreground.shape());
    for (size_t i = 0; i < out.foreground.size(); ++i) {
        out.background[i] = 1.0 - out.foreground[i];
    }
    return out;
}

SegmentationResult segment_with_features(const EpisodeFeatures& features, const Episode& episode,
                                         const ModelParams& params,
                                         const RefineConfig* refine_override,
                                         const double* alpha_override) {
    const ModelConfig& cfg = params.config;
    const RefineConfig& refine = refine_override ? *refine_override : cfg.refine;
    const double alpha = alpha_override ? *alpha_override : cfg.seg.alpha;
    const int img_h = episode.support_image.extent(0);
    const int img_w = episode.support_image.extent(1);

    SegmentationResult result;
    if (cfg.threshold_adaptation) {
        result.threshold_coarse = predict_threshold_from(features.query.coarse, params.head);
        result.threshold_fine = cfg.per_path_threshold
                                    ? predict_threshold_from(features.query.fine, params.head_fine)
                                    : result.threshold_coarse;
    } else {
        result.threshold_coarse = params.fixed_threshold(0);
        result.threshold_fine = result.threshold_coarse;
    }

    auto run_path = [&](bool fine) {
        const Tensor& support_feat = fine ? features.support.fine : features.support.coarse;
        const Tensor& query_feat = fine ? features.query.fine : features.query.coarse;
        const double threshold = fine ? result.threshold_fine : result.threshold_coarse;

        PathOutput out;
        out.fine = fine;
        out.prototype_initial = masked_average_pool(support_feat, episode.support_mask);
        out.prototype = refine.enabled
                            ? refine_prototype(query_feat, out.prototype_initial, threshold,
                                               refine, cfg.seg.a, &out.refine_trace)
                            : out.prototype_initial;
        out.score = anomaly_score_map(query_feat, out.prototype, cfg.seg.a);
        out.feature_maps = soft_threshold(out.score, threshold);
        out.fg_image = bilinear_resize(out.feature_maps.foreground, img_h, img_w);
        return out;
    };

    if (cfg.path != PathMode::coarse) result.paths.push_back(run_path(true));
    if (cfg.path != PathMode::fine) result.paths.push_back(run_path(false));

    result.fused.foreground = Tensor({img_h, img_w});
    if (cfg.path == PathMode::dual) {
        const Tensor& fine_fg = result.paths[0].fg_image;
        const Tensor& coarse_fg = result.paths[1].fg_image;
        for (size_t i = 0; i < result.fused.foreground.size(); ++i) {
            result.fused.foreground[i] = alpha * fine_fg[i] + (1.0 - alpha) * coarse_fg[i];
        }
    } else {
        result.fused.foreground = result.paths[0].fg_image;
    }
    result.fused.background = Tensor(result.fused.foreground.shape());
    for (size_t i = 0; i < result.fused.foreground.size(); ++i) {
        result.fused.background[i] = 1.0 - result.fused.foreground[i];
    }
    result.mask = hard_mask(result.fused);
    return result;
}

SegmentationResult segment_episode(const Episode& episode, const ModelParams& params) {
    const EpisodeFeatures features = compute_features(episode, params);
    return segment_with_features(features, episode, params);
}

}  // namespace qseg
