#pragma once

#include <cstdint>
#include <vector>

#include "qseg/tensor.hpp"

namespace qseg {

enum class ReplaceConvention { foreground, background };

struct RefineConfig {
    double step = 0.01;                // v
    int iterations = 7;                // N
    bool enabled = true;               // off during meta-training
    ReplaceConvention convention = ReplaceConvention::foreground;
};

/// Locations selected by the convention carry the prototype; the rest keep the
/// original query vectors. The mask lives at feature resolution.
Tensor reconstruct_features(const Tensor& query, const Tensor& mask, const Tensor& prototype,
                            ReplaceConvention convention = ReplaceConvention::foreground);

/// Both tensors are min-max normalized with constants taken from `original`,
/// then mean binary cross-entropy with `original` as the target.
/// Probabilities are clamped to [1e-7, 1 - 1e-7]. A degenerate original
/// (max == min) yields 0 with a warning.
double reconstruction_loss(const Tensor& rebuilt, const Tensor& original);

/// Analytic gradient of reconstruction_loss(reconstruct_features(query, mask,
/// p), original) with respect to p, holding the mask fixed.
Tensor grad_wrt_prototype(const Tensor& query, const Tensor& mask, const Tensor& prototype,
                          const Tensor& original,
                          ReplaceConvention convention = ReplaceConvention::foreground);

struct RefineTrace {
    std::vector<double> losses;       // loss at p(n) before each update
    std::vector<Tensor> prototypes;   // p(n+1) after each update
};

/// One gradient-descent pass on the prototype: rescore, threshold with the
/// fixed T, rebuild, and step against the reconstruction loss. Runs
/// independently per path. step == 0 or iterations == 0 returns p0.
Tensor refine_prototype(const Tensor& query, const Tensor& p0, double threshold,
                        const RefineConfig& cfg, double a, RefineTrace* trace = nullptr);

/// Reconstruction loss at p with the mask it induces; used by the dynamics
/// checks and the per-iteration trace.
double refinement_loss_at(const Tensor& query, const Tensor& prototype, double threshold, double a,
                          ReplaceConvention convention = ReplaceConvention::foreground);

/// Audit counter: evaluation variants with refinement off must keep this at 0.
uint64_t refine_invocation_count();
void reset_refine_invocation_count();

}  // namespace qseg
