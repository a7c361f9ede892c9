#pragma once

#include <functional>
#include <string>

#include "qseg/encoder.hpp"
#include "qseg/protoseg.hpp"
#include "qseg/refine.hpp"
#include "qseg/tensor.hpp"

namespace qseg {

enum class PathMode { fine, coarse, dual };

PathMode path_mode_from_string(const std::string& name);
std::string to_string(PathMode mode);

/// Architecture and inference knobs; everything that shapes parameters or the
/// forward flow, resolved before any module runs.
struct ModelConfig {
    int z = 32;
    int head_hidden = 16;  // Z/2
    double threshold_init = -4.0;
    SegConfig seg;
    PathMode path = PathMode::dual;
    bool threshold_adaptation = true;
    bool per_path_threshold = false;
    RefineConfig refine;
};

/// Trainable state: the shared encoder, the threshold head(s), and the
/// learned fixed threshold used when adaptation is off.
struct ModelParams {
    ModelConfig config;
    EncoderParams encoder;
    ThresholdHeadParams head;       // fed by the coarse path
    ThresholdHeadParams head_fine;  // only used with per-path thresholds
    Tensor fixed_threshold;         // single element

    static ModelParams init(const ModelConfig& cfg, uint64_t seed);
    static ModelParams zeros_like(const ModelParams& other);

    /// Visits every parameter tensor in a fixed order with a stable name.
    void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
    void for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const;
};

}  // namespace qseg
