#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "qseg/config.hpp"
#include "qseg/error.hpp"
#include "qseg/eval.hpp"
#include "qseg/phantom.hpp"
#include "qseg/pipeline.hpp"
#include "qseg/png_io.hpp"
#include "qseg/rng.hpp"
#include "qseg/train.hpp"

namespace fs = std::filesystem;
using namespace qseg;

namespace {

struct CommonOpts {
    std::string config_file;
    std::vector<std::string> overrides;
    std::string out_dir;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_file, "key=value config file");
    cmd->add_option("--set", opts.overrides, "override one config key, e.g. --set train.lr0=0.01")
        ->take_all();
    cmd->add_option("--out", opts.out_dir, "output directory");
}

/// defaults <- stored checkpoint config <- file <- QSEG_* env <- --set
RunConfig resolve_config(const CommonOpts& opts, const std::string& stored_config = "") {
    RunConfig cfg;
    if (!stored_config.empty() && fs::exists(stored_config)) cfg.load_file(stored_config);
    if (!opts.config_file.empty()) cfg.load_file(opts.config_file);
    cfg.apply_env();
    for (const std::string& kv : opts.overrides) cfg.apply_override(kv);
    return cfg;
}

std::string default_out_dir(const std::string& command) {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", std::localtime(&t));
    return "runs/" + command + "-" + stamp;
}

std::string ensure_out_dir(CommonOpts& opts, const std::string& command) {
    if (opts.out_dir.empty()) opts.out_dir = default_out_dir(command);
    fs::create_directories(opts.out_dir);
    return opts.out_dir;
}

void write_config(const RunConfig& cfg, const std::string& dir) {
    std::ofstream out(fs::path(dir) / "config.txt");
    require(out.good(), "io", "cannot write config to '" + dir + "'");
    out << cfg.serialize();
}

void warn_fingerprint_mismatch(const RunConfig& cfg, const std::string& checkpoint_dir) {
    const fs::path stored = fs::path(checkpoint_dir) / "config.txt";
    if (!fs::exists(stored)) return;
    std::ifstream in(stored);
    std::stringstream ss;
    ss << in.rdbuf();
    if (fnv1a64(ss.str()) != fnv1a64(cfg.serialize())) {
        std::fprintf(stderr,
                     "warn: config fingerprint differs from the checkpoint's; proceeding\n");
    }
}

Tensor load_image_file(const std::string& path) {
    require(fs::exists(path), "io", "cannot read input file '" + path + "'");
    Tensor t = fs::path(path).extension() == ".png" ? read_png_gray(path) : load_tensor(path);
    if (t.rank() == 2) {
        Tensor expanded({t.extent(0), t.extent(1), 1});
        for (size_t i = 0; i < t.size(); ++i) expanded[i] = t[i];
        return expanded;
    }
    require(t.rank() == 3 && t.extent(2) == 1, "bad_format",
            "image '" + path + "' must be H x W (x1)");
    return t;
}

Tensor load_mask_file(const std::string& path) {
    Tensor t = load_image_file(path);
    Tensor mask({t.extent(0), t.extent(1)});
    for (size_t i = 0; i < mask.size(); ++i) mask[i] = t[i] != 0.0 ? 1.0 : 0.0;
    return mask;
}

SplitPlan split_for(const RunConfig& cfg, const Dataset& ds) {
    return make_split(ds, cfg.split_setting, cfg.split_fold, cfg.seed);
}

int cmd_gen_data(CommonOpts& common, int volumes, int classes, uint64_t seed, bool force) {
    RunConfig cfg = resolve_config(common);
    if (volumes > 0) cfg.data_volumes = volumes;
    if (classes > 0) cfg.data_classes = classes;
    if (seed != static_cast<uint64_t>(-1)) cfg.seed = seed;

    require(!common.out_dir.empty(), "config", "gen-data requires --out");
    const fs::path dir = common.out_dir;
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        require(force, "refused",
                "output directory '" + dir.string() + "' is not empty (use --force)");
    }
    fs::create_directories(dir);

    Dataset ds = make_dataset(cfg.data_volumes, derive_seed(cfg.seed, "dataset"),
                              cfg.phantom_config());
    save_dataset(ds, dir.string());

    // cache the supervoxel labelings alongside the volumes
    const SupervoxelConfig sv = cfg.supervoxel_config();
    for (size_t v = 0; v < ds.phantoms.size(); ++v) {
        SupervoxelConfig per_volume = sv;
        per_volume.seed = derive_seed(sv.seed, "sv", v);
        cached_supervoxels(ds.phantoms[v].volume, static_cast<int>(v), per_volume, dir.string());
    }
    write_config(cfg, dir.string());
    std::printf("wrote %d volumes, %d classes to %s\n", cfg.data_volumes, cfg.data_classes,
                dir.string().c_str());
    return 0;
}

int cmd_train(CommonOpts& common, const std::string& data_dir, int setting, int fold, int iters,
              uint64_t seed, bool resume) {
    RunConfig cfg = resolve_config(common);
    if (setting > 0) cfg.split_setting = setting;
    if (fold >= 0) cfg.split_fold = fold;
    if (iters > 0) cfg.train_iterations = iters;
    if (seed != static_cast<uint64_t>(-1)) cfg.seed = seed;

    const std::string out = ensure_out_dir(common, "train");
    Dataset ds = load_dataset(data_dir);
    SplitPlan split = split_for(cfg, ds);
    save_split(split, (fs::path(out) / "split.txt").string());
    write_config(cfg, out);

    TrainOptions opts;
    opts.out_dir = out;
    opts.cache_dir = data_dir;
    opts.supervoxel = cfg.supervoxel_config();
    opts.resume = resume;
    meta_train(ds, split, cfg.model_config(), cfg.train_config(), opts);
    write_config(cfg, (fs::path(out) / "checkpoint").string());
    std::printf("checkpoint at %s\n", (fs::path(out) / "checkpoint").string().c_str());
    return 0;
}

int cmd_eval(CommonOpts& common, const std::string& checkpoint, const std::string& data_dir,
             bool no_refine, bool overlays) {
    RunConfig cfg = resolve_config(common, (fs::path(checkpoint) / "config.txt").string());
    warn_fingerprint_mismatch(cfg, checkpoint);

    const std::string out = ensure_out_dir(common, "eval");
    Dataset ds = load_dataset(data_dir);
    SplitPlan split = split_for(cfg, ds);
    Checkpoint ck = load_checkpoint(checkpoint, cfg.model_config());

    EvalConfig ec;
    ec.workers = cfg.eval_workers;
    ec.refine = cfg.refine_enabled && !no_refine;
    ec.fingerprint = cfg.fingerprint();
    EvalReport report = evaluate(ds, split, ck.params, ec);
    write_report(report, (fs::path(out) / "episodes.csv").string(),
                 (fs::path(out) / "summary.csv").string());
    write_config(cfg, out);

    if (overlays) {
        const fs::path overlay_dir = fs::path(out) / "overlays";
        fs::create_directories(overlay_dir);
        RefineConfig rc = ck.params.config.refine;
        rc.enabled = ec.refine;
        for (const EvalCase& c : enumerate_eval_cases(ds, split)) {
            const Episode ep = materialize_episode(ds, c);
            const SegmentationResult res = segment_with_features(compute_features(ep, ck.params),
                                                                 ep, ck.params, &rc);
            char name[64];
            std::snprintf(name, sizeof(name), "c%d_v%02d_z%02d.png", c.class_id, c.query_volume,
                          c.query_slice);
            write_png_overlay((overlay_dir / name).string(), ep.query_image, res.mask,
                              &*ep.query_mask);
        }
    }

    for (const ClassSummary& s : report.classes) {
        if (s.class_id < 0) {
            std::printf("mean  %6.2f +- %.2f\n", s.mean, s.stddev);
        } else {
            std::printf("class %d  %6.2f +- %.2f (over %d volumes)\n", s.class_id, s.mean,
                        s.stddev, s.groups);
        }
    }
    return 0;
}

int cmd_infer(CommonOpts& common, const std::string& checkpoint, const std::string& support,
              const std::string& support_mask, const std::string& query,
              const std::string& query_mask, bool no_refine) {
    RunConfig cfg = resolve_config(common, (fs::path(checkpoint) / "config.txt").string());
    warn_fingerprint_mismatch(cfg, checkpoint);
    const std::string out = ensure_out_dir(common, "infer");

    Episode ep;
    ep.support_image = load_image_file(support);
    ep.support_mask = load_mask_file(support_mask);
    ep.query_image = load_image_file(query);
    if (!query_mask.empty()) ep.query_mask = load_mask_file(query_mask);

    Checkpoint ck = load_checkpoint(checkpoint, cfg.model_config());
    ck.params.config.refine.enabled = cfg.refine_enabled && !no_refine;
    const SegmentationResult res = segment_episode(ep, ck.params);

    write_png_mask1((fs::path(out) / "mask.png").string(), res.mask);
    write_png_gray8((fs::path(out) / "prob.png").string(), res.fused.foreground);
    write_config(cfg, out);

    nlohmann::json summary;
    summary["threshold"] = {{"fine", res.threshold_fine}, {"coarse", res.threshold_coarse}};
    for (const PathOutput& path : res.paths) {
        nlohmann::json trace = nlohmann::json::array();
        for (double l : path.refine_trace.losses) trace.push_back(l);
        summary["refine_loss"][path.fine ? "fine" : "coarse"] = trace;
    }
    if (ep.query_mask) {
        summary["dsc"] = dsc(res.mask, *ep.query_mask);
        std::printf("dsc %.2f\n", summary["dsc"].get<double>());
    }
    std::ofstream js(fs::path(out) / "summary.json");
    js << summary.dump(2) << "\n";
    std::printf("mask at %s\n", (fs::path(out) / "mask.png").string().c_str());
    return 0;
}

int cmd_sweep(CommonOpts& common, const std::string& param, const std::string& checkpoint,
              const std::string& checkpoint_root, const std::string& data_dir,
              const std::string& values_csv) {
    if (param == "alpha") {
        require(!checkpoint.empty(), "config", "sweep --param alpha requires --checkpoint");
        RunConfig cfg = resolve_config(common, (fs::path(checkpoint) / "config.txt").string());
        const std::string out = ensure_out_dir(common, "sweep");
        Dataset ds = load_dataset(data_dir);
        SplitPlan split = split_for(cfg, ds);
        Checkpoint ck = load_checkpoint(checkpoint, cfg.model_config());

        std::vector<double> values = default_alpha_grid();
        if (!values_csv.empty()) {
            values.clear();
            std::stringstream ss(values_csv);
            std::string item;
            while (std::getline(ss, item, ',')) values.push_back(std::stod(item));
        }
        EvalConfig ec;
        ec.workers = cfg.eval_workers;
        ec.refine = cfg.refine_enabled;
        ec.fingerprint = cfg.fingerprint();
        std::vector<AlphaRow> rows = sweep_alpha(ds, split, ck.params, values, ec);
        write_alpha_sweep(rows, (fs::path(out) / "alpha_sweep.csv").string(), ec.fingerprint);
        write_config(cfg, out);
        for (const AlphaRow& r : rows) {
            std::printf("alpha %.2f  %6.2f +- %.2f\n", r.alpha, r.mean, r.stddev);
        }
        return 0;
    }

    require(param == "components", "config", "sweep --param must be 'alpha' or 'components'");
    require(!checkpoint_root.empty(), "config",
            "sweep --param components requires --checkpoint-root");
    RunConfig cfg = resolve_config(common);
    const std::string out = ensure_out_dir(common, "sweep");
    Dataset ds = load_dataset(data_dir);

    // variant -> (trained checkpoint, refinement at eval time)
    struct VariantSpec {
        const char* name;
        const char* dir;
        bool refine;
    };
    const VariantSpec specs[] = {
        {"single_fine", "single_fine", false}, {"single_coarse", "single_coarse", false},
        {"dp", "dp", false},                   {"dp_pr", "dp", true},
        {"dp_ta", "dp_ta", false},             {"dp_ta_pr", "dp_ta", true},
    };

    std::vector<AblationVariant> variants;
    SplitPlan split;
    bool have_split = false;
    for (const VariantSpec& spec : specs) {
        const
        fs::path ck_dir = fs::path(checkpoint_root) / spec.dir / "checkpoint";
        if (!checkpoint_exists(ck_dir.string())) {
            std::fprintf(stderr, "warn: variant %s: no checkpoint under %s; row omitted\n",
                         spec.name, ck_dir.string().c_str());
            continue;
        }
        CommonOpts variant_common = common;
        RunConfig vcfg = resolve_config(variant_common, (ck_dir / "config.txt").string());
        if (!have_split) {
            split = split_for(vcfg, ds);
            have_split = true;
        }
        Checkpoint ck = load_checkpoint(ck_dir.string(), vcfg.model_config());
        variants.push_back({spec.name, std::move(ck.params), spec.refine});
    }
    require(have_split, "missing_checkpoint", "no variant checkpoints found");

    EvalConfig ec;
    ec.workers = cfg.eval_workers;
    ec.fingerprint = cfg.fingerprint();
    std::vector<AblationRow> rows = ablate_components(variants, ds, split, ec);
    write_ablation(rows, split.test_classes, (fs::path(out) / "ablation.csv").string(),
                   ec.fingerprint);
    write_config(cfg, out);
    for (const AblationRow& r : rows) {
        std::printf("%-14s %6.2f +- %.2f\n", r.variant.c_str(), r.mean, r.stddev);
    }
    return 0;
}

int cmd_trace(CommonOpts& common, const std::string& checkpoint, const std::string& data_dir,
              int max_n) {
    RunConfig cfg = resolve_config(common, (fs::path(checkpoint) / "config.txt").string());
    const std::string out = ensure_out_dir(common, "trace");
    Dataset ds = load_dataset(data_dir);
    SplitPlan split = split_for(cfg, ds);
    Checkpoint ck = load_checkpoint(checkpoint, cfg.model_config());

    EvalConfig ec;
    ec.workers = cfg.eval_workers;
    ec.fingerprint = cfg.fingerprint();
    std::vector<TraceRow> rows = trace_refinement(ds, split, ck.params, max_n, ec);
    write_trace(rows, split.test_classes, (fs::path(out) / "trace.csv").string(), ec.fingerprint);
    write_config(cfg, out);
    std::printf("peak mean DSC at iteration %d\n", peak_mean_iteration(rows));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"few-shot segmentation with query-informed thresholding and prototype refinement"};
    app.require_subcommand(1);

    CommonOpts gen_common, train_common, eval_common, infer_common, sweep_common, trace_common;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic phantom dataset");
    add_common(gen, gen_common);
    int gen_volumes = -1, gen_classes = -1;
    uint64_t gen_seed = static_cast<uint64_t>(-1);
    bool gen_force = false;
    gen->add_option("--volumes", gen_volumes, "number of volumes");
    gen->add_option("--classes", gen_classes, "number of classes");
    gen->add_option("--seed", gen_seed, "root seed");
    gen->add_flag("--force", gen_force, "overwrite a non-empty output directory");

    auto* train = app.add_subcommand("train", "meta-train on supervoxel pseudo-episodes");
    add_common(train, train_common);
    std::string train_data;
    int train_setting = -1, train_fold = -1, train_iters = -1;
    uint64_t train_seed = static_cast<uint64_t>(-1);
    bool train_resume = false;
    train->add_option("--data", train_data, "dataset directory")->required();
    train->add_option("--setting", train_setting, "evaluation setting (1 or 2)");
    train->add_option("--fold", train_fold, "class fold (0 or 1)");
    train->add_option("--iters", train_iters, "training iterations");
    train->add_option("--seed", train_seed, "root seed");
    train->add_flag("--resume", train_resume, "resume from the latest checkpoint");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test classes");
    add_common(eval_cmd, eval_common);
    std::string eval_ck, eval_data;
    bool eval_no_refine = false, eval_overlays = false;
    eval_cmd->add_option("--checkpoint", eval_ck, "checkpoint directory")->required();
    eval_cmd->add_option("--data", eval_data, "dataset directory")->required();
    eval_cmd->add_flag("--no-refine", eval_no_refine, "disable test-time prototype refinement");
    eval_cmd->add_flag("--overlays", eval_overlays, "write boundary overlay PNGs");

    auto* infer = app.add_subcommand("infer", "segment one query image from one support pair");
    add_common(infer, infer_common);
    std::string in_ck, in_support, in_support_mask, in_query, in_query_mask;
    bool in_no_refine = false;
    infer->add_option("--checkpoint", in_ck, "checkpoint directory")->required();
    infer->add_option("--support", in_support, "support image (png or tensor)")->required();
    infer->add_option("--support-mask", in_support_mask, "support mask")->required();
    infer->add_option("--query", in_query, "query image")->required();
    infer->add_option("--query-mask", in_query_mask, "optional query ground truth");
    infer->add_flag("--no-refine", in_no_refine, "disable test-time prototype refinement");

    auto* sweep = app.add_subcommand("sweep", "alpha or component ablation sweeps");
    add_common(sweep, sweep_common);
    std::string sw_param, sw_ck, sw_ck_root, sw_data, sw_values;
    sweep->add_option("--param", sw_param, "alpha or components")->required();
    sweep->add_option("--checkpoint", sw_ck, "checkpoint directory (alpha sweep)");
    sweep->add_option("--checkpoint-root", sw_ck_root,
                      "directory of per-variant training runs (component sweep)");
    sweep->add_option("--data", sw_data, "dataset directory")->required();
    sweep->add_option("--values", sw_values, "comma-separated alpha values");

    auto* trace = app.add_subcommand("trace", "DSC against refinement iterations");
    add_common(trace, trace_common);
    std::string tr_ck, tr_data;
    int tr_max_n = 10;
    trace->add_option("--checkpoint", tr_ck, "checkpoint directory")->required();
    trace->add_option("--data", tr_data, "dataset directory")->required();
    trace->add_option("--maxN", tr_max_n, "maximum refinement iteration");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(gen_common, gen_volumes, gen_classes, gen_seed,
                                               gen_force);
        if (train->parsed())
            return cmd_train(train_common, train_data, train_setting, train_fold, train_iters,
                             train_seed, train_resume);
        if (eval_cmd->parsed())
            return cmd_eval(eval_common, eval_ck, eval_data, eval_no_refine, eval_overlays);
        if (infer->parsed())
            return cmd_infer(infer_common, in_ck, in_support, in_support_mask, in_query,
                             in_query_mask, in_no_refine);
        if (sweep->parsed())
            return cmd_sweep(sweep_common, sw_param, sw_ck, sw_ck_root, sw_data, sw_values);
        if (trace->parsed()) return cmd_trace(trace_common, tr_ck, tr_data, tr_max_n);
    } catch (const Error& e) {
        std::fprintf(stderr, "error:%s: %s\n", e.code().c_str(), e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error:internal: %s\n", e.what());
        return 2;
    }
    return 0;
}
