#include "qseg/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "qseg/error.hpp"
#include "qseg/log.hpp"
#include "qseg/ops.hpp"
#include "qseg/pipeline.hpp"
#include "qseg/rng.hpp"

namespace fs = std::filesystem;

namespace qseg {

namespace {

constexpr double kClampEps = 1e-7;

double clamp_prob(double p) {
    return std::min(std::max(p, kClampEps), 1.0 - kClampEps);
}

struct PathCache {
    bool fine = false;
    Tensor prototype;
    Tensor score;
    ProbabilityMaps feature_maps;
    Tensor fg_image;
};

/// One segmentation direction (support->query or the alignment reverse).
struct DirectionCache {
    bool active = false;
    double threshold_fine = 0.0;
    double threshold_coarse = 0.0;
    ThresholdCache tc_coarse;
    ThresholdCache tc_fine;
    Tensor pool_mask;
    ProbabilityMaps fused;
    std::vector<PathCache> paths;
    double loss = 0.0;
};

struct FeatureGrads {
    Tensor fine;
    Tensor coarse;

    explicit FeatureGrads(const DualFeatures& like)
        : fine(like.fine.shape()), coarse(like.coarse.shape()) {}
    Tensor& at(bool is_fine) { return is_fine ? fine : coarse; }
};

double path_weight(const ModelConfig& cfg, bool fine) {
    if (cfg.path != PathMode::dual) return 1.0;
    return fine ? cfg.seg.alpha : 1.0 - cfg.seg.alpha;
}

/// Segments `target` features with prototypes pooled from `source` under
/// `pool_mask`, thresholded by the target-informed T. Pure forward; caches
/// everything the backward pass needs.
void forward_direction(const DualFeatures& source, const DualFeatures& target,
                       const Tensor& pool_mask, const Tensor& truth, const ModelParams& params,
                       int img_h, int img_w, DirectionCache& dc) {
    const ModelConfig& cfg = params.config;
    dc.active = true;
    dc.pool_mask = pool_mask;

    if (cfg.threshold_adaptation) {
        dc.threshold_coarse = predict_threshold_from(target.coarse, params.head, &dc.tc_coarse);
        dc.threshold_fine = cfg.per_path_threshold
                                ? predict_threshold_from(target.fine, params.head_fine, &dc.tc_fine)
                                : dc.threshold_coarse;
    } else {
        dc.threshold_coarse = params.fixed_threshold(0);
        dc.threshold_fine = dc.threshold_coarse;
    }

    auto run_path = [&](bool fine) {
        PathCache pc;
        pc.fine = fine;
        const Tensor& src = fine ? source.fine : source.coarse;
        const Tensor& tgt = fine ? target.fine : target.coarse;
        pc.prototype = masked_average_pool(src, pool_mask);
        pc.score = anomaly_score_map(tgt, pc.prototype, cfg.seg.a);
        pc.feature_maps = soft_threshold(pc.score, fine ? dc.threshold_fine : dc.threshold_coarse);
        pc.fg_image = bilinear_resize(pc.feature_maps.foreground, img_h, img_w);
        dc.paths.push_back(std::move(pc));
    };
    if (cfg.path != PathMode::coarse) run_path(true);
    if (cfg.path != PathMode::fine) run_path(false);

    dc.fused.foreground = Tensor({img_h, img_w});
    for (const PathCache& pc : dc.paths) {
        const double w = path_weight(cfg, pc.fine);
        for (size_t i = 0; i < dc.fused.foreground.size(); ++i) {
            dc.fused.foreground[i] += w * pc.fg_image[i];
        }
    }
    dc.fused.background = Tensor(dc.fused.foreground.shape());
    for (size_t i = 0; i < dc.fused.foreground.size(); ++i) {
        dc.fused.background[i] = 1.0 - dc.fused.foreground[i];
    }
    dc.loss = seg_loss(dc.fused, truth);
}

/// Backward of forward_direction with upstream gradient `up` on its loss.
/// Accumulates feature gradients for both sides and parameter gradients.
void backward_direction(const DirectionCache& dc, const DualFeatures& source,
                        const DualFeatures& target, const Tensor& truth,
                        const ModelParams& params, double up, FeatureGrads& g_source,
                        FeatureGrads& g_target, ModelParams& grads) {
    const ModelConfig& cfg = params.config;
    const int hw = truth.extent(0) * truth.extent(1);

    // d loss / d fused foreground, folding in the complement background
    Tensor g_fg(dc.fused.foreground.shape());
    for (size_t i = 0; i < g_fg.size(); ++i) {
        const double m = truth[i];
        const double f = dc.fused.foreground[i];
        const double b = dc.fused.background[i];
        double g = 0.0;
        if (f > kClampEps && f < 1.0 - kClampEps) g -= m / f;
        if (b > kClampEps && b < 1.0 - kClampEps) g += (1.0 - m) / b;
        g_fg[i] = up * g / hw;
    }

    double g_threshold_fine = 0.0, g_threshold_coarse = 0.0;
    for (const PathCache& pc : dc.paths) {
        const double w = path_weight(cfg, pc.fine);
        Tensor g_fg_img(pc.fg_image.shape());
        for (size_t i = 0; i < g_fg_img.size(); ++i) g_fg_img[i] = w * g_fg[i];

        Tensor g_fg_feat =
            bilinear_resize_backward(pc.feature_maps.foreground.shape(), g_fg_img);
        Tensor zeros(pc.feature_maps.background.shape());
        const double threshold = pc.fine ? dc.threshold_fine : dc.threshold_coarse;
        SoftThresholdGrads g_soft =
            soft_threshold_backward(pc.score, threshold, g_fg_feat, zeros);
        (pc.fine ? g_threshold_fine : g_threshold_coarse) += g_soft.threshold;

        const Tensor& tgt = pc.fine ? target.fine : target.coarse;
        ScoreGrads g_score = anomaly_score_backward(tgt, pc.prototype, cfg.seg.a, g_soft.score);
        Tensor& g_tgt = g_target.at(pc.fine);
        for (size_t i = 0; i < g_tgt.size(); ++i) g_tgt[i] += g_score.query[i];

        const Tensor& src = pc.fine ? source.fine : source.coarse;
        Tensor g_src = masked_average_pool_backward(src.shape(), dc.pool_mask, g_score.prototype);
        Tensor& g_src_acc = g_source.at(pc.fine);
        for (size_t i = 0; i < g_src_acc.size(); ++i) g_src_acc[i] += g_src[i];
    }

    if (cfg.threshold_adaptation) {
        auto add_head = [&](const Tensor& coarse_like, const ThresholdHeadParams& head,
                            const ThresholdCache& tc, double g_t, ThresholdHeadParams& g_head,
                            Tensor& g_input) {
            if (g_t == 0.0) return;
            ThresholdGrads g = predict_threshold_backward(coarse_like, head, tc, g_t);
            for (size_t i = 0; i < g.w1.size(); ++i) g_head.w1[i] += g.w1[i];
            for (size_t i = 0; i < g.b1.size(); ++i) g_head.b1[i] += g.b1[i];
            for (size_t i = 0; i < g.w2.size(); ++i) g_head.w2[i] += g.w2[i];
            for (size_t i = 0; i < g.b2.size(); ++i) g_head.b2[i] += g.b2[i];
            for (size_t i = 0; i < g_input.size(); ++i) g_input[i] += g.coarse[i];
        };
        if (cfg.per_path_threshold) {
            add_head(target.coarse, params.head, dc.tc_coarse, g_threshold_coarse, grads.head,
                     g_target.coarse);
            add_head(target.fine, params.head_fine, dc.tc_fine, g_threshold_fine, grads.head_fine,
                     g_target.fine);
        } else {
            add_head(target.coarse, params.head, dc.tc_coarse,
                     g_threshold_fine + g_threshold_coarse, grads.head, g_target.coarse);
        }
    } else {
        grads.fixed_threshold(0) += g_threshold_fine + g_threshold_coarse;
    }
}

bool mask_empty(const Tensor& mask) {
    for (size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] != 0.0) return false;
    }
    return true;
}

EpisodeLosses episode_pass(const Episode& episode, const ModelParams& params, bool align_enabled,
                           ModelParams* grads) {
    require(episode.query_mask.has_value(), "bad_argument",
            "training episode needs a query ground-truth mask");
    const int img_h = episode.support_image.extent(0);
    const int img_w = episode.support_image.extent(1);

    EncoderCache support_cache, query_cache;
    EpisodeFeatures feats;
    feats.support = extract_features(episode.support_image, params.encoder,
                                     grads ? &support_cache : nullptr);
    feats.query =
        extract_features(episode.query_image, params.encoder, grads ? &query_cache : nullptr);

    DirectionCache seg_dir;
    forward_direction(feats.support, feats.query, episode.support_mask, *episode.query_mask,
                      params, img_h, img_w, seg_dir);

    DirectionCache align_dir;
    Tensor pseudo_mask = hard_mask(seg_dir.fused);
    if (align_enabled) {
        if (mask_empty(pseudo_mask)) {
            warn(Warn::alignment_skipped,
                 "alignment skipped: predicted query foreground is empty");
        } else {
            forward_direction(feats.query, feats.support, pseudo_mask, episode.support_mask,
                              params, img_h, img_w, align_dir);
        }
    }

    EpisodeLosses losses;
    losses.seg = seg_dir.loss;
    losses.align = align_dir.active ? align_dir.loss : 0.0;
    losses.align_skipped = align_enabled && !align_dir.active;
    losses.total = losses.seg + losses.align;

    if (grads) {
        FeatureGrads g_support(feats.support), g_query(feats.query);
        backward_direction(seg_dir, feats.support, feats.query, *episode.query_mask, params, 1.0,
                           g_support, g_query, *grads);
        if (align_dir.active) {
            backward_direction(align_dir, feats.query, feats.support, episode.support_mask,
                               params, 1.0, g_query, g_support, *grads);
        }
        EncoderGrads ge = encoder_backward(params.encoder, support_cache, g_support.fine,
                                           g_support.coarse);
        EncoderGrads gq =
            encoder_backward(params.encoder, query_cache, g_query.fine, g_query.coarse);
        ge.accumulate(gq);
        for (size_t b = 0; b < grads->encoder.blocks.size(); ++b) {
            Tensor& k = grads->encoder.blocks[b].kernel;
            Tensor& bias = grads->encoder.blocks[b].bias;
            for (size_t i = 0; i < k.size(); ++i) k[i] += ge.kernel[b][i];
            for (size_t i = 0; i < bias.size(); ++i) bias[i] += ge.bias[b][i];
        }
    }
    return losses;
}

}  // namespace

double learning_rate(const TrainConfig& cfg, int64_t t) {
    return cfg.lr0 * std::pow(cfg.decay, static_cast<double>(t / cfg.decay_every));
}

double seg_loss(const ProbabilityMaps& pred, const Tensor& truth) {
    require(pred.foreground.same_shape(truth), "shape_mismatch",
            "prediction extents " + shape_string(pred.foreground.shape()) +
                " do not match truth " + shape_string(truth.shape()));
    double loss = 0.0;
    for (size_t i = 0; i < truth.size(); ++i) {
        const double m = truth[i];
        loss -= m * std::log(clamp_prob(pred.foreground[i])) +
                (1.0 - m) * std::log(clamp_prob(pred.background[i]));
    }
    return loss / static_cast<double>(truth.size());
}

EpisodeLosses total_loss(const Episode& episode, const ModelParams& params, bool align_enabled) {
    return episode_pass(episode, params, align_enabled, nullptr);
}

EpisodeLosses total_loss_and_grads(const Episode& episode, const ModelParams& params,
                                   ModelParams& grads, bool align_enabled) {
    return episode_pass(episode, params, align_enabled, &grads);
}

double align_loss(const Episode& episode, const ModelParams& params) {
    return episode_pass(episode, params, true, nullptr).align;
}

void optimizer_step(ModelParams& params, const ModelParams& grads, OptimState& state,
                    const TrainConfig& cfg, int64_t t) {
    bool finite = true;
    grads.for_each_param(
        [&](const std::string&, const Tensor& g) { finite &= g.all_finite(); });
    if (!finite) {
        warn(Warn::nonfinite_gradient, "non-finite gradient; optimizer step skipped");
        return;
    }

    std::vector<const Tensor*> gs;
    grads.for_each_param([&](const std::string&, const Tensor& g) { gs.push_back(&g); });

    const double lr = learning_rate(cfg, t);
    if (!cfg.adam) {
        size_t idx = 0;
        params.for_each_param([&](const std::string&, Tensor& w) {
            const Tensor& g = *gs[idx++];
            for (size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
        });
        state.step += 1;
        return;
    }

    if (!state.has_moments) {
        state.m = ModelParams::zeros_like(params);
        state.v = ModelParams::zeros_like(params);
        state.has_moments = true;
    }
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    state.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));

    std::vector<Tensor*> ms, vs;
    state.m.for_each_param([&](const std::string&, Tensor& m) { ms.push_back(&m); });
    state.v.for_each_param([&](const std::string&, Tensor& v) { vs.push_back(&v); });
    size_t idx = 0;
    params.for_each_param([&](const std::string&, Tensor& w) {
        const Tensor& g = *gs[idx];
        Tensor& m = *ms[idx];
        Tensor& v = *vs[idx];
        ++idx;
        for (size_t i = 0; i < w.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
    });
}

namespace {

std::string param_file_name(const std::string& name) {
    std::string f = name;
    for (char& c : f) {
        if (c == '.') c = '_';
    }
    return f + ".t";
}

}  // namespace

void save_checkpoint(const std::string& dir, const ModelParams& params, const OptimState& state,
                     int64_t iteration, const std::string& config_text) {
    fs::create_directories(dir);
    std::ofstream manifest(fs::path(dir) / "checkpoint.txt");
    require(manifest.good(), "io", "cannot write checkpoint manifest in '" + dir + "'");
    manifest << "checkpoint v1\n";
    manifest << "iteration " << iteration << "\n";
    manifest << "opt_step " << state.step << "\n";
    manifest << "moments " << (state.has_moments ? 1 : 0) << "\n";

    params.for_each_param([&](const std::string& name, const Tensor& t) {
        const std::string file = param_file_name(name);
        save_tensor(t, (fs::path(dir) / file).string());
        manifest << "param " << name << " " << file << "\n";
    });
    if (state.has_moments) {
        state.m.for_each_param([&](const std::string& name, const Tensor& t) {
            const std::string file = "m_" + param_file_name(name);
            save_tensor(t, (fs::path(dir) / file).string());
            manifest << "moment_m " << name << " " << file << "\n";
        });
        state.v.for_each_param([&](const std::string& name, const Tensor& t) {
            const std::string file = "v_" + param_file_name(name);
            save_tensor(t, (fs::path(dir) / file).string());
            manifest << "moment_v " << name << " " << file << "\n";
        });
    }
    if (!config_text.empty()) {
        std::ofstream cfg(fs::path(dir) / "config.txt");
        cfg << config_text;
    }
}

bool checkpoint_exists(const std::string& dir) {
    return fs::exists(fs::path(dir) / "checkpoint.txt");
}

Checkpoint load_checkpoint(const std::string& dir, const ModelConfig& cfg) {
    std::ifstream manifest(fs::path(dir) / "checkpoint.txt");
    require(manifest.good(), "missing_checkpoint",
            "expected checkpoint manifest at '" + (fs::path(dir) / "checkpoint.txt").string() + "'");
    std::string line;
    std::getline(manifest, line);
    require(line == "checkpoint v1", "bad_format", "unrecognized checkpoint header");

    Checkpoint ck;
    ck.params = ModelParams::init(cfg, 0);
    int moments = 0;

    std::vector<std::tuple<std::string, std::string, std::string>> entries;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        if (kind == "iteration") ls >> ck.iteration;
        else if (kind == "opt_step") ls >> ck.state.step;
        else if (kind == "moments") ls >> moments;
        else {
            std::string name, file;
            ls >> name >> file;
            entries.emplace_back(kind, name, file);
        }
    }

    auto load_into = [&](ModelParams& target, const std::string& want_kind) {
        target.for_each_param([&](const std::string& name, Tensor& t) {
            for (const auto& [kind, ename, file] : entries) {
                if (kind == want_kind && ename == name) {
                    Tensor loaded = load_tensor((fs::path(dir) / file).string());
                    require(loaded.same_shape(t), "bad_format",
                            "checkpoint tensor '" + name + "' has shape " +
                                shape_string(loaded.shape()) + ", expected " +
                                shape_string(t.shape()));
                    t = std::move(loaded);
                    return;
                }
            }
            fail("bad_format", "checkpoint missing tensor '" + name + "'");
        });
    };
    load_into(ck.params, "param");
    if (moments) {
        ck.state.m = ModelParams::zeros_like(ck.params);
        ck.state.v = ModelParams::zeros_like(ck.params);
        ck.state.has_moments = true;
        load_into(ck.state.m, "moment_m");
        load_into(ck.state.v, "moment_v");
    }

    std::ifstream cfg_in(fs::path(dir) / "config.txt");
    if (cfg_in.good()) {
        std::stringstream ss;
        ss << cfg_in.rdbuf();
        ck.config_text = ss.str();
    }
    return ck;
}

SupervoxelLabels cached_supervoxels(const Tensor& volume, int volume_id,
                                    const SupervoxelConfig& cfg, const std::string& cache_dir) {
    const fs::path path = fs::path(cache_dir) / supervoxel_cache_name(volume_id, cfg);
    if (fs::exists(path)) {
        SupervoxelLabels labels = load_labels(path.string());
        if (labels.shape == volume.shape()) {
            labels.min_size = cfg.min_size;
            return labels;
        }
    }
    SupervoxelLabels labels = cluster_supervoxels(volume, cfg);
    fs::create_directories(cache_dir);
    save_labels(labels, path.string());
    return labels;
}

Checkpoint meta_train(const Dataset& dataset, const SplitPlan& split, const ModelConfig& model_cfg,
                      const TrainConfig& cfg, const TrainOptions& options) {
    require(!dataset.phantoms.empty(), "bad_argument", "empty dataset");
    require(split.admitted.size() == dataset.phantoms.size(), "bad_argument",
            "split admission lists do not match the dataset");
    fs::create_directories(options.out_dir);

    // supervoxel pseudo-labels, one cached labeling per volume
    std::vector<SupervoxelLabels> labels;
    for (size_t v = 0; v < dataset.phantoms.size(); ++v) {
        SupervoxelConfig sv = options.supervoxel;
        sv.seed = derive_seed(options.supervoxel.seed, "sv", static_cast<uint64_t>(v));
        labels.push_back(cached_supervoxels(dataset.phantoms[v].volume, static_cast<int>(v), sv,
                                            options.cache_dir));
    }

    ModelParams params = ModelParams::init(model_cfg, derive_seed(cfg.seed, "init"));
    OptimState state;
    int64_t start = 0;

    const std::string ck_dir = (fs::path(options.out_dir) / "checkpoint").string();
    if (options.resume && checkpoint_exists(ck_dir)) {
        Checkpoint ck = load_checkpoint(ck_dir, model_cfg);
        params = std::move(ck.params);
        state = std::move(ck.state);
        start = ck.iteration;
    }

    const fs::path loss_path = fs::path(options.out_dir) / "loss.csv";
    std::ofstream loss_log;
    if (start == 0) {
        loss_log.open(loss_path);
        loss_log << "iteration,lr,loss_seg,loss_align,loss_total\n";
    } else {
        loss_log.open(loss_path, std::ios::app);
    }
    require(loss_log.good(), "io", "cannot write loss log at '" + loss_path.string() + "'");

    char row[160];
    for (int64_t t = start; t < cfg.iterations; ++t) {
        // stateless per-iteration randomness: resume == uninterrupted run
        std::mt19937_64 rng = make_rng(cfg.seed, "sampler", static_cast<uint64_t>(t));
        std::uniform_int_distribution<size_t> pick_volume(0, dataset.phantoms.size() - 1);

        Episode episode;
        bool sampled = false;
        for (int attempt = 0; attempt < 64 && !sampled; ++attempt) {
            const size_t v = pick_volume(rng);
            try {
                episode = sample_pseudo_episode(dataset.phantoms[v].volume, labels[v], rng,
                                                &split.admitted[v],
                                                options.supervoxel.min_slice_area);
                episode.support_volume = static_cast<int>(v);
                episode.query_volume = static_cast<int>(v);
                sampled = true;
            } catch (const Error& e) {
                if (e.code() != "no_eligible_supervoxel") throw;
            }
        }
        require(sampled, "empty_training", "no volume offers an eligible pseudo episode");

        ModelParams grads = ModelParams::zeros_like(params);
        const EpisodeLosses losses =
            total_loss_and_grads(episode, params, grads, cfg.align_loss_enabled);
        optimizer_step(params, grads, state, cfg, t);

        if (t % cfg.log_every == 0 || t + 1 == cfg.iterations) {
            std::snprintf(row, sizeof(row), "%lld,%.10g,%.10g,%.10g,%.10g\n",
                          static_cast<long long>(t), learning_rate(cfg, t), losses.seg,
                          losses.align, losses.total);
            loss_log << row;
        }
        if ((t + 1) % cfg.checkpoint_every == 0 || t + 1 == cfg.iterations) {
            save_checkpoint(ck_dir, params, state, t + 1);
        }
    }
    loss_log.flush();

    Checkpoint ck;
    ck.params = std::move(params);
    ck.state = std::move(state);
    ck.iteration = cfg.iterations;
    return ck;
}

}  // namespace qseg
