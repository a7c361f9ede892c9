#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qseg/model.hpp"
#include "qseg/phantom.hpp"
#include "qseg/supervoxel.hpp"
#include "qseg/train.hpp"

namespace qseg {

/// Every knob of the pipeline as flat "section.key" entries. Resolution
/// order: defaults <- config file <- QSEG_* environment <- explicit
/// overrides. The resolved text is serialized verbatim into every output
/// directory so runs are reproducible from it.
struct RunConfig {
    uint64_t seed = 7;

    int data_volumes = 20;
    int data_classes = 4;
    int data_depth = 32;
    int data_size = 64;
    double data_noise = 0.03;
    double data_bias = 0.12;
    double data_jitter = 0.01;
    double data_slice_gain = 0.02;
    double data_contrast_base = 0.3;
    double data_contrast_step = 0.06;

    int sv_k = 50;
    double sv_compactness = 0.1;
    int sv_min_size = 100;
    int sv_min_slice_area = 100;

    int model_z = 32;
    int model_hidden = 16;
    double model_t0 = -4.0;

    double seg_a = 20.0;
    double seg_alpha = 0.8;
    std::string seg_path = "dual";
    bool seg_threshold_adaptation = true;
    bool seg_per_path_threshold = false;

    bool refine_enabled = true;
    double refine_step = 0.01;
    int refine_iterations = 7;
    std::string refine_convention = "foreground";

    double train_lr0 = 0.001;
    double train_decay = 0.98;
    int train_decay_every = 1000;
    int train_iterations = 2000;
    bool train_align = true;
    std::string train_optimizer = "sgd";
    int train_checkpoint_every = 500;
    int train_log_every = 1;

    int split_setting = 2;
    int split_fold = 0;

    int eval_workers = 1;

    void set(const std::string& key, const std::string& value);
    void load_file(const std::string& path);
    void apply_env(const std::string& prefix = "QSEG_");
    void apply_override(const std::string& key_equals_value);

    /// Canonical text form, one sorted "key=value" per line.
    std::string serialize() const;
    std::string fingerprint() const;

    ModelConfig model_config() const;
    TrainConfig train_config() const;
    PhantomConfig phantom_config() const;
    SupervoxelConfig supervoxel_config() const;
};

}  // namespace qseg
