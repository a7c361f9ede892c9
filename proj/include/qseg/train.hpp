#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qseg/episode.hpp"
#include "qseg/model.hpp"
#include "qseg/phantom.hpp"
#include "qseg/supervoxel.hpp"

namespace qseg {

struct TrainConfig {
    double lr0 = 0.001;
    double decay = 0.98;
    int decay_every = 1000;
    int iterations = 2000;
    uint64_t seed = 0;
    bool align_loss_enabled = true;
    bool adam = false;  // plain SGD unless enabled
    int checkpoint_every = 500;
    int log_every = 1;
};

/// lr(t) = lr0 * decay^floor(t / decay_every)
double learning_rate(const TrainConfig& cfg, int64_t t);

/// Mean binary cross-entropy over both channels, probabilities clamped to
/// [1e-7, 1 - 1e-7]. Expects foreground + background = 1.
double seg_loss(const ProbabilityMaps& pred, const Tensor& truth);

struct EpisodeLosses {
    double seg = 0.0;
    double align = 0.0;
    double total = 0.0;
    bool align_skipped = false;
};

/// Forward pass of Lseg + Lreg with refinement off (training flow).
EpisodeLosses total_loss(const Episode& episode, const ModelParams& params,
                         bool align_enabled = true);

/// Forward plus gradients of the total loss into every trainable tensor,
/// accumulated into `grads` (shaped like the parameters).
EpisodeLosses total_loss_and_grads(const Episode& episode, const ModelParams& params,
                                   ModelParams& grads, bool align_enabled = true);

/// The alignment term alone: the hard query prediction acts as the pseudo
/// support mask and the support image is segmented in reverse.
double align_loss(const Episode& episode, const ModelParams& params);

struct OptimState {
    ModelParams m;  // first/second moment buffers, allocated when adam is on
    ModelParams v;
    int64_t step = 0;
    bool has_moments = false;
};

/// Plain SGD update with lr(t); adam-style moments behind the config flag.
/// A non-finite gradient skips the step with a logged warning.
void optimizer_step(ModelParams& params, const ModelParams& grads, OptimState& state,
                    const TrainConfig& cfg, int64_t t);

void save_checkpoint(const std::string& dir, const ModelParams& params, const OptimState& state,
                     int64_t iteration, const std::string& config_text = "");

struct Checkpoint {
    ModelParams params;
    OptimState state;
    int64_t iteration = 0;
    std::string config_text;
};

Checkpoint load_checkpoint(const std::string& dir, const ModelConfig& cfg);
bool checkpoint_exists(const std::string& dir);

struct TrainOptions {
    std::string out_dir;    // checkpoints + loss.csv
    std::string cache_dir;  // supervoxel label cache
    SupervoxelConfig supervoxel;
    bool resume = false;
};

/// Episodic meta-training over supervoxel pseudo-labels: sample a pseudo
/// episode, run both paths, descend Lseg + Lreg. Deterministic for a fixed
/// seed; per-iteration randomness is derived statelessly so resumed runs
/// reproduce uninterrupted ones bit-exactly.
Checkpoint meta_train(const Dataset& dataset, const SplitPlan& split, const ModelConfig& model_cfg,
                      const TrainConfig& cfg, const TrainOptions& options);

/// Supervoxel labels for one volume, from the cache when present.
SupervoxelLabels cached_supervoxels(const Tensor& volume, int volume_id,
                                    const SupervoxelConfig& cfg, const std::string& cache_dir);

}  // namespace qseg
