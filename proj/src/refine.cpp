#include "qseg/refine.hpp"

#include <atomic>
#include <cmath>

#include "qseg/error.hpp"
#include "qseg/log.hpp"
#include "qseg/protoseg.hpp"

namespace qseg {

namespace {

constexpr double kClampEps = 1e-7;

std::atomic<uint64_t> invocation_count{0};

void check_refine_shapes(const Tensor& query, const Tensor& mask, const Tensor& prototype) {
    require(query.rank() == 3, "shape_mismatch",
            "query features must be H x W x Z, got " + shape_string(query.shape()));
    require(mask.rank() == 2 && mask.extent(0) == query.extent(0) &&
                mask.extent(1) == query.extent(1),
            "shape_mismatch", "mask extents must match query feature extents");
    require(prototype.rank() == 1 && prototype.extent(0) == query.extent(2), "shape_mismatch",
            "prototype length does not match channel depth");
}

bool replaced(double mask_value, ReplaceConvention convention) {
    return convention == ReplaceConvention::foreground ? mask_value != 0.0 : mask_value == 0.0;
}

}  // namespace

Tensor reconstruct_features(const Tensor& query, const Tensor& mask, const Tensor& prototype,
                            ReplaceConvention convention) {
    check_refine_shapes(query, mask, prototype);
    const int h = query.extent(0), w = query.extent(1), z = query.extent(2);
    Tensor out = query;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (!replaced(mask(y, x), convention)) continue;
            double* o = &out(y, x, 0);
            for (int c = 0; c < z; ++c) o[c] = prototype(c);
        }
    }
    return out;
}

double reconstruction_loss(const Tensor& rebuilt, const Tensor& original) {
    require(rebuilt.same_shape(original), "shape_mismatch",
            "reconstruction_loss arguments must share shape");
    double lo = original[0], hi = original[0];
    for (size_t i = 0; i < original.size(); ++i) {
        lo = std::min(lo, original[i]);
        hi = std::max(hi, original[i]);
    }
    if (hi == lo) {
        warn(Warn::degenerate_reconstruction, "degenerate original in reconstruction_loss");
        return 0.0;
    }
    const double scale = 1.0 / (hi - lo);
    double loss = 0.0;
    for (size_t i = 0; i < original.size(); ++i) {
        const double target = (original[i] - lo) * scale;
        double prob = (rebuilt[i] - lo) * scale;
        prob = std::min(std::max(prob, kClampEps), 1.0 - kClampEps);
        loss -= target * std::log(prob) + (1.0 - target) * std::log(1.0 - prob);
    }
    return loss / static_cast<double>(original.size());
}

Tensor grad_wrt_prototype(const Tensor& query, const Tensor& mask, const Tensor& prototype,
                          const Tensor& original, ReplaceConvention convention) {
    check_refine_shapes(query, mask, prototype);
    require(original.same_shape(query), "shape_mismatch",
            "original features must share the query shape");
    const int h = query.extent(0), w = query.extent(1), z = query.extent(2);

    Tensor grad(prototype.shape());
    double lo = original[0], hi = original[0];
    for (size_t i = 0; i < original.size(); ++i) {
        lo = std::min(lo, original[i]);
        hi = std::max(hi, original[i]);
    }
    if (hi == lo) return grad;  // loss is identically 0

    const double scale = 1.0 / (hi - lo);
    const double inv_n = 1.0 / static_cast<double>(original.size());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (!replaced(mask(y, x), convention)) continue;
            const double* orig = &original(y, x, 0);
            for (int c = 0; c < z; ++c) {
                const double target = (orig[c] - lo) * scale;
                const double raw = (prototype(c) - lo) * scale;
                if (raw <= kClampEps || raw >= 1.0 - kClampEps) continue;  // clamp is flat
                grad(c) += (-target / raw + (1.0 - target) / (1.0 - raw)) * scale * inv_n;
            }
        }
    }
    return grad;
}

Tensor refine_prototype(const Tensor& query, const Tensor& p0, double threshold,
                        const RefineConfig& cfg, double a, RefineTrace* trace) {
    invocation_count.fetch_add(1, std::memory_order_relaxed);
    require(cfg.step >= 0.0 && cfg.iterations >= 0, "bad_argument",
            "refinement step and iteration count must be non-negative");
    if (cfg.step == 0.0 || cfg.iterations == 0) return p0;

    Tensor p = p0;
    for (int n = 0; n < cfg.iterations; ++n) {
        const Tensor score = anomaly_score_map(query, p, a);
        const Tensor mask = hard_mask(soft_threshold(score, threshold));
        if (trace) {
            const Tensor rebuilt = reconstruct_features(query, mask, p, cfg.convention);
            trace->losses.push_back(reconstruction_loss(rebuilt, query));
        }
        const Tensor grad = grad_wrt_prototype(query, mask, p, query, cfg.convention);
        for (size_t i = 0; i < p.size(); ++i) p[i] -= cfg.step * grad[i];
        if (trace) trace->prototypes.push_back(p);
    }
    return p;
}

double refinement_loss_at(const Tensor& query, const Tensor& prototype, double threshold, double a,
                          ReplaceConvention convention) {
    const Tensor score = anomaly_score_map(query, prototype, a);
    const Tensor mask = hard_mask(soft_threshold(score, threshold));
    const Tensor rebuilt = reconstruct_features(query, mask, prototype, convention);
    return reconstruction_loss(rebuilt, query);
}

uint64_t refine_invocation_count() {
    return invocation_count.load(std::memory_order_relaxed);
}

void reset_refine_invocation_count() {
    invocation_count.store(0, std::memory_order_relaxed);
}

}  // namespace qseg
