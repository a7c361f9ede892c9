#include "qseg/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <thread>

#include "qseg/error.hpp"
#include "qseg/pipeline.hpp"
#include "qseg/protoseg.hpp"

namespace qseg {

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

/// Ordered parallel map: results land by index regardless of worker count.
template <typename Fn>
void parallel_for(size_t n, int workers, Fn&& fn) {
    workers = std::max(1, workers);
    if (workers == 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    auto body = [&]() {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= n) return;
            fn(i);
        }
    };
    std::vector<std::thread> pool;
    for (int t = 1; t < workers; ++t) pool.emplace_back(body);
    body();
    for (std::thread& t : pool) t.join();
}

struct Grouped {
    std::vector<ClassSummary> classes;
    double mean = 0.0;
    double stddev = 0.0;
};

double population_std(const std::vector<double>& xs, double mean) {
    if (xs.size() <= 1) return 0.0;
    double acc = 0.0;
    for (double x : xs) acc += (x - mean) * (x - mean);
    return std::sqrt(acc / static_cast<double>(xs.size()));
}

/// Per-class mean of per-query-volume means, then the overall row across
/// class means.
Grouped aggregate(const std::vector<EpisodeRow>& rows) {
    std::map<int, std::map<int, std::pair<double, int>>> acc;  // class -> volume -> (sum, n)
    for (const EpisodeRow& r : rows) {
        auto& [sum, n] = acc[r.class_id][r.query_volume];
        sum += r.dsc;
        n += 1;
    }
    Grouped g;
    std::vector<double> class_means;
    for (const auto& [cid, volumes] : acc) {
        std::vector<double> volume_means;
        for (const auto& [vid, sn] : volumes) {
            volume_means.push_back(sn.first / sn.second);
        }
        const double mean =
            std::accumulate(volume_means.begin(), volume_means.end(), 0.0) /
            static_cast<double>(volume_means.size());
        g.classes.push_back({cid, static_cast<int>(volume_means.size()), mean,
                             population_std(volume_means, mean)});
        class_means.push_back(mean);
    }
    g.mean = class_means.empty()
                 ? 0.0
                 : std::accumulate(class_means.begin(), class_means.end(), 0.0) /
                       static_cast<double>(class_means.size());
    g.stddev = population_std(class_means, g.mean);
    g.classes.push_back({-1, static_cast<int>(class_means.size()), g.mean, g.stddev});
    return g;
}

RefineConfig eval_refine(const ModelParams& params, bool enabled) {
    RefineConfig rc = params.config.refine;
    rc.enabled = enabled;
    return rc;
}

}  // namespace

double dsc(const Tensor& pred, const Tensor& truth) {
    require(pred.same_shape(truth), "shape_mismatch",
            "dsc mask extents differ: " + shape_string(pred.shape()) + " vs " +
                shape_string(truth.shape()));
    size_t a = 0, b = 0, both = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const bool pa = pred[i] != 0.0;
        const bool pb = truth[i] != 0.0;
        a += pa;
        b += pb;
        both += pa && pb;
    }
    if (a + b == 0) return 100.0;
    return 200.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

EvalReport evaluate_with(const Dataset& dataset, const SplitPlan& split,
                         const Predictor& predict, const EvalConfig& cfg) {
    const std::vector<EvalCase> cases = enumerate_eval_cases(dataset, split);
    std::vector<EpisodeRow> rows(cases.size());

    parallel_for(cases.size(), cfg.workers, [&](size_t i) {
        const EvalCase& c = cases[i];
        const Episode ep = materialize_episode(dataset, c);
        rows[i] = {c.class_id, c.query_volume, c.query_slice, c.support_volume, c.support_slice,
                   dsc(predict(ep), *ep.query_mask)};
    });

    EvalReport report;
    report.episodes = std::move(rows);
    Grouped g = aggregate(report.episodes);
    report.classes = std::move(g.classes);
    report.mean = g.mean;
    report.stddev = g.stddev;
    report.fingerprint = cfg.fingerprint;
    return report;
}

EvalReport evaluate(const Dataset& dataset, const SplitPlan& split, const ModelParams& params,
                    const EvalConfig& cfg) {
    const RefineConfig rc = eval_refine(params, cfg.refine);
    return evaluate_with(
        dataset, split,
        [&](const Episode& ep) {
            const EpisodeFeatures feats = compute_features(ep, params);
            return segment_with_features(feats, ep, params, &rc).mask;
        },
        cfg);
}

void write_report(const EvalReport& report, const std::string& episodes_csv,
                  const std::string& summary_csv) {
    std::ofstream ep(episodes_csv);
    require(ep.good(), "io", "cannot write '" + episodes_csv + "'");
    ep << "# config=" << report.fingerprint << "\n";
    ep << "class,query_volume,query_slice,support_volume,support_slice,dsc\n";
    for (const EpisodeRow& r : report.episodes) {
        ep << r.class_id << "," << r.query_volume << "," << r.query_slice << ","
           << r.support_volume << "," << r.support_slice << "," << fmt(r.dsc) << "\n";
    }

    std::ofstream sm(summary_csv);
    require(sm.good(), "io", "cannot write '" + summary_csv + "'");
    sm << "# config=" << report.fingerprint << " std=across-query-volumes\n";
    sm << "class,groups,mean_dsc,std_dsc\n";
    for (const ClassSummary& c : report.classes) {
        if (c.class_id < 0) {
            sm << "mean," << c.groups << "," << fmt(c.mean) << "," << fmt(c.stddev) << "\n";
        } else {
            sm << c.class_id << "," << c.groups << "," << fmt(c.mean) << "," << fmt(c.stddev)
               << "\n";
        }
    }
}

std::vector<AblationRow> ablate_components(const std::vector<AblationVariant>& variants,
                                           const Dataset& dataset, const SplitPlan& split,
                                           const EvalConfig& cfg) {
    std::vector<AblationRow> rows;
    for (const AblationVariant& v : variants) {
        EvalConfig vc = cfg;
        vc.refine = v.refine;
        EvalReport report = evaluate(dataset, split, v.params, vc);
        rows.push_back({v.name, report.classes, report.mean, report.stddev});
    }
    return rows;
}

void write_ablation(const std::vector<AblationRow>& rows, const std::vector<int>& class_ids,
                    const std::string& csv_path, const std::string& fingerprint) {
    std::ofstream out(csv_path);
    require(out.good(), "io", "cannot write '" + csv_path + "'");
    out << "# config=" << fingerprint << "\n";
    out << "variant";
    for (int c : class_ids) out << ",class_" << c;
    out << ",mean,std\n";
    for (const AblationRow& r : rows) {
        out << r.variant;
        for (int c : class_ids) {
            double value = 0.0;
            for (const ClassSummary& s : r.classes) {
                if (s.class_id == c) value = s.mean;
            }
            out << "," << fmt(value);
        }
        out << "," << fmt(r.mean) << "," << fmt(r.stddev) << "\n";
    }
}

std::vector<double> default_alpha_grid() {
    return {0.2, 0.4, 0.5, 0.6, 0.8, 0.9};
}

std::vector<AlphaRow> sweep_alpha(const Dataset& dataset, const SplitPlan& split,
                                  const ModelParams& params, const std::vector<double>& values,
                                  const EvalConfig& cfg) {
    require(params.config.path == PathMode::dual, "bad_argument",
            "the alpha sweep needs the dual-path model");
    for (double a : values) {
        require(a > 0.0 && a < 1.0, "bad_argument",
                "alpha values must lie in (0,1), got " + std::to_string(a));
    }
    const std::vector<EvalCase> cases = enumerate_eval_cases(dataset, split);
    const RefineConfig rc = eval_refine(params, cfg.refine);

    // one forward per episode; each alpha only re-fuses the two paths
    std::vector<std::vector<EpisodeRow>> rows(values.size(),
                                              std::vector<EpisodeRow>(cases.size()));
    parallel_for(cases.size(), cfg.workers, [&](size_t i) {
        const EvalCase& c = cases[i];
        const Episode ep = materialize_episode(dataset, c);
        const EpisodeFeatures feats = compute_features(ep, params);
        const SegmentationResult res = segment_with_features(feats, ep, params, &rc);
        const Tensor& fine_fg = res.paths[0].fg_image;
        const Tensor& coarse_fg = res.paths[1].fg_image;
        for (size_t ai = 0; ai < values.size(); ++ai) {
            ProbabilityMaps fused;
            fused.foreground = Tensor(fine_fg.shape());
            fused.background = Tensor(fine_fg.shape());
            for (size_t px = 0; px < fine_fg.size(); ++px) {
                fused.foreground[px] =
                    values[ai] * fine_fg[px] + (1.0 - values[ai]) * coarse_fg[px];
                fused.background[px] = 1.0 - fused.foreground[px];
            }
            rows[ai][i] = {c.class_id, c.query_volume, c.query_slice, c.support_volume,
                           c.support_slice, dsc(hard_mask(fused), *ep.query_mask)};
        }
    });

    std::vector<AlphaRow> out;
    for (size_t ai = 0; ai < values.size(); ++ai) {
        Grouped g = aggregate(rows[ai]);
        out.push_back({values[ai], g.mean, g.stddev});
    }
    return out;
}

void write_alpha_sweep(const std::vector<AlphaRow>& rows, const std::string& csv_path,
                       const std::string& fingerprint) {
    std::ofstream out(csv_path);
    require(out.good(), "io", "cannot write '" + csv_path + "'");
    out << "# config=" << fingerprint << "\n";
    out << "alpha,mean_dsc,std_dsc\n";
    for (const AlphaRow& r : rows) {
        out << fmt(r.alpha) << "," << fmt(r.mean) << "," << fmt(r.stddev) << "\n";
    }
}

std::vector<TraceRow> trace_refinement(const Dataset& dataset, const SplitPlan& split,
                                       const ModelParams& params, int max_iterations,
                                       const EvalConfig& cfg) {
    require(max_iterations >= 1, "bad_argument", "trace needs at least one iteration");
    const std::vector<EvalCase> cases = enumerate_eval_cases(dataset, split);

    RefineConfig rc = params.config.refine;
    rc.enabled = true;
    rc.iterations = max_iterations;

    // per episode, DSC at refinement checkpoints 0..N
    std::vector<std::vector<double>> dsc_at(cases.size());
    parallel_for(cases.size(), cfg.workers, [&](size_t i) {
        const EvalCase& c = cases[i];
        const Episode ep = materialize_episode(dataset, c);
        const EpisodeFeatures feats = compute_features(ep, params);
        const SegmentationResult res = segment_with_features(feats, ep, params, &rc);
        const int img_h = ep.support_image.extent(0);
        const int img_w = ep.support_image.extent(1);

        auto fuse_at = [&](int n) {
            Tensor fused_fg({img_h, img_w});
            for (size_t pi = 0; pi < res.paths.size(); ++pi) {
                const PathOutput& path = res.paths[pi];
                const Tensor& proto =
                    n == 0 ? path.prototype_initial
                           : path.refine_trace.prototypes[static_cast<size_t>(n - 1)];
                const Tensor& feat = path.fine ? feats.query.fine : feats.query.coarse;
                const double threshold =
                    path.fine ? res.threshold_fine : res.threshold_coarse;
                Tensor score = anomaly_score_map(feat, proto, params.config.seg.a);
                ProbabilityMaps maps = soft_threshold(score, threshold);
                Tensor fg = bilinear_resize(maps.foreground, img_h, img_w);
                const double w = params.config.path == PathMode::dual
                                     ? (path.fine ? params.config.seg.alpha
                                                  : 1.0 - params.config.seg.alpha)
                                     : 1.0;
                for (size_t px = 0; px < fused_fg.size(); ++px) fused_fg[px] += w * fg[px];
            }
            ProbabilityMaps fused;
            fused.foreground = fused_fg;
            fused.background = Tensor(fused_fg.shape());
            for (size_t px = 0; px < fused_fg.size(); ++px) {
                fused.background[px] = 1.0 - fused_fg[px];
            }
            return hard_mask(fused);
        };

        dsc_at[i].resize(static_cast<size_t>(max_iterations) + 1);
        for (int n = 0; n <= max_iterations; ++n) {
            dsc_at[i][static_cast<size_t>(n)] = dsc(fuse_at(n), *ep.query_mask);
        }
    });

    std::vector<TraceRow> rows;
    std::vector<int> class_order;
    for (int n = 0; n <= max_iterations; ++n) {
        std::vector<EpisodeRow> ep_rows(cases.size());
        for (size_t i = 0; i < cases.size(); ++i) {
            ep_rows[i] = {cases[i].class_id, cases[i].query_volume, cases[i].query_slice,
                          cases[i].support_volume, cases[i].support_slice,
                          dsc_at[i][static_cast<size_t>(n)]};
        }
        Grouped g = aggregate(ep_rows);
        TraceRow row;
        row.iteration = n;
        std::vector<double> class_means;
        for (const ClassSummary& s : g.classes) {
            if (s.class_id >= 0) {
                row.per_class_mean.push_back(s.mean);
                class_means.push_back(s.mean);
            }
        }
        row.mu = g.mean;
        row.sigma = g.stddev;
        rows.push_back(std::move(row));
    }
    return rows;
}

int peak_mean_iteration(const std::vector<TraceRow>& rows) {
    int best = 0;
    for (size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].mu > rows[static_cast<size_t>(best)].mu) best = static_cast<int>(i);
    }
    return best;
}

void write_trace(const std::vector<TraceRow>& rows, const std::vector<int>& class_ids,
                 const std::string& csv_path, const std::string& fingerprint) {
    std::ofstream out(csv_path);
    require(out.good(), "io", "cannot write '" + csv_path + "'");
    out << "# config=" << fingerprint << "\n";
    out << "iteration";
    for (int c : class_ids) out << ",class_" << c;
    out << ",mu,sigma\n";
    for (const TraceRow& r : rows) {
        out << r.iteration;
        for (double m : r.per_class_mean) out << "," << fmt(m);
        out << "," << fmt(r.mu) << "," << fmt(r.sigma) << "\n";
    }
    out << "# peak_mean_iteration=" << peak_mean_iteration(rows) << "\n";
}

}  // namespace qseg
