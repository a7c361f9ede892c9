#pragma once

#include <functional>
#include <string>
#include <vector>

#include "qseg/model.hpp"
#include "qseg/phantom.hpp"

namespace qseg {

/// Soerensen-Dice overlap as a percentage. Both masks empty scores 100,
/// exactly one empty scores 0, so slice-level aggregation is total.
double dsc(const Tensor& pred, const Tensor& truth);

struct EvalConfig {
    int workers = 1;
    bool refine = true;  // refinement active at inference
    std::string fingerprint;
};

struct EpisodeRow {
    int class_id;
    int query_volume;
    int query_slice;
    int support_volume;
    int support_slice;
    double dsc;
};

struct ClassSummary {
    int class_id;  // -1 marks the overall row
    int groups;    // query volumes (or classes for the overall row)
    double mean;
    double stddev;
};

struct EvalReport {
    std::vector<EpisodeRow> episodes;
    std::vector<ClassSummary> classes;
    double mean = 0.0;    // mean of per-class means
    double stddev = 0.0;  // population std across per-class means
    std::string fingerprint;
};

/// Full stratified pass over the test classes: per-class DSC averaged per
/// query volume, then across volumes. Episodes evaluate in parallel against
/// the frozen parameters; aggregation order is fixed.
EvalReport evaluate(const Dataset& dataset, const SplitPlan& split, const ModelParams& params,
                    const EvalConfig& cfg);

/// Same protocol with an arbitrary predictor (episode -> binary mask);
/// lets tests drive the harness with oracle predictors.
using Predictor = std::function<Tensor(const Episode&)>;
EvalReport evaluate_with(const Dataset& dataset, const SplitPlan& split,
                         const Predictor& predict, const EvalConfig& cfg);

void write_report(const EvalReport& report, const std::string& episodes_csv,
                  const std::string& summary_csv);

struct AblationVariant {
    std::string name;
    ModelParams params;
    bool refine;
};

struct AblationRow {
    std::string variant;
    std::vector<ClassSummary> classes;
    double mean;
    double stddev;
};

std::vector<AblationRow> ablate_components(const std::vector<AblationVariant>& variants,
                                           const Dataset& dataset, const SplitPlan& split,
                                           const EvalConfig& cfg);
void write_ablation(const std::vector<AblationRow>& rows, const std::vector<int>& class_ids,
                    const std::string& csv_path, const std::string& fingerprint);

struct AlphaRow {
    double alpha;
    double mean;
    double stddev;
};

/// Re-fuses the per-path predictions of one checkpoint under each balance
/// factor; everything else (features, thresholds, refinement) is shared.
std::vector<AlphaRow> sweep_alpha(const Dataset& dataset, const SplitPlan& split,
                                  const ModelParams& params, const std::vector<double>& values,
                                  const EvalConfig& cfg);
void write_alpha_sweep(const std::vector<AlphaRow>& rows, const std::string& csv_path,
                       const std::string& fingerprint);

/// Default grid for the alpha sweep.
std::vector<double> default_alpha_grid();

struct TraceRow {
    int iteration;
    std::vector<double> per_class_mean;
    double mu;
    double sigma;
};

/// Mean DSC per class at every refinement iteration 0..max_iterations,
/// sharing one forward pass per episode.
std::vector<TraceRow> trace_refinement(const Dataset& dataset, const SplitPlan& split,
                                       const ModelParams& params, int max_iterations,
                                       const EvalConfig& cfg);
int peak_mean_iteration(const std::vector<TraceRow>& rows);
void write_trace(const std::vector<TraceRow>& rows, const std::vector<int>& class_ids,
                 const std::string& csv_path, const std::string& fingerprint);

}  // namespace qseg
