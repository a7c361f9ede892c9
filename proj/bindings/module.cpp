#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "qseg/config.hpp"
#include "qseg/error.hpp"
#include "qseg/eval.hpp"
#include "qseg/phantom.hpp"
#include "qseg/pipeline.hpp"
#include "qseg/protoseg.hpp"
#include "qseg/refine.hpp"
#include "qseg/supervoxel.hpp"
#include "qseg/train.hpp"

namespace py = pybind11;
using namespace qseg;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    std::vector<int> shape(static_cast<size_t>(a.ndim()));
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<size_t>(i)] = static_cast<int>(a.shape(i));
    std::vector<double> values(a.data(), a.data() + a.size());
    return Tensor(shape, std::move(values));
}

py::array_t<double> array_from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::copy(t.data(), t.data() + t.size(), out.mutable_data());
    return out;
}

RunConfig config_from_dict(const py::dict& d) {
    RunConfig cfg;
    for (auto item : d) {
        cfg.set(py::str(item.first), py::str(item.second));
    }
    return cfg;
}

Episode episode_from_arrays(const py::array_t<double>& support_image,
                            const py::array_t<double>& support_mask,
                            const py::array_t<double>& query_image,
                            const py::object& query_mask) {
    Episode ep;
    ep.support_image = tensor_from_array(support_image);
    ep.support_mask = tensor_from_array(support_mask);
    ep.query_image = tensor_from_array(query_image);
    if (!query_mask.is_none()) {
        ep.query_mask = tensor_from_array(query_mask.cast<py::array_t<double>>());
    }
    auto promote = [](Tensor& t) {
        if (t.rank() == 2) {
            Tensor e({t.extent(0), t.extent(1), 1}, t.values());
            t = std::move(e);
        }
    };
    promote(ep.support_image);
    promote(ep.query_image);
    return ep;
}

}  // namespace

PYBIND11_MODULE(_qseg, m) {
    m.doc() = "few-shot segmentation with query-informed thresholding and prototype refinement";

    py::register_exception<Error>(m, "QsegError");

    // tensor file io
    m.def("save_tensor",
          [](const py::array_t<double>& a, const std::string& path, bool f32) {
              save_tensor(tensor_from_array(a), path, f32 ? Precision::f32 : Precision::f64);
          },
          py::arg("array"), py::arg("path"), py::arg("f32") = false);
    m.def("load_tensor", [](const std::string& path) { return array_from_tensor(load_tensor(path)); });

    // core operations
    m.def("conv2d",
          [](const py::array_t<double>& input, const py::array_t<double>& kernel,
             const py::array_t<double>& bias, int stride, int dilation, int padding) {
              return array_from_tensor(conv2d(tensor_from_array(input), tensor_from_array(kernel),
                                              tensor_from_array(bias),
                                              {stride, dilation, padding}));
          },
          py::arg("input"), py::arg("kernel"), py::arg("bias"), py::arg("stride") = 1,
          py::arg("dilation") = 1, py::arg("padding") = 0);
    m.def("bilinear_resize", [](const py::array_t<double>& map, int h, int w) {
        return array_from_tensor(bilinear_resize(tensor_from_array(map), h, w));
    });
    m.def("masked_average_pool", [](const py::array_t<double>& features, const py::array_t<double>& mask) {
        return array_from_tensor(masked_average_pool(tensor_from_array(features), tensor_from_array(mask)));
    });
    m.def("anomaly_score_map",
          [](const py::array_t<double>& query, const py::array_t<double>& prototype, double a) {
              return array_from_tensor(
                  anomaly_score_map(tensor_from_array(query), tensor_from_array(prototype), a));
          },
          py::arg("query"), py::arg("prototype"), py::arg("a") = 20.0);
    m.def("soft_threshold", [](const py::array_t<double>& score, double threshold) {
        ProbabilityMaps maps = soft_threshold(tensor_from_array(score), threshold);
        return py::make_tuple(array_from_tensor(maps.foreground), array_from_tensor(maps.background));
    });
    m.def("hard_mask", [](const py::array_t<double>& fg, const py::array_t<double>& bg) {
        return array_from_tensor(hard_mask({tensor_from_array(fg), tensor_from_array(bg)}));
    });
    m.def("dsc", [](const py::array_t<double>& pred, const py::array_t<double>& truth) {
        return dsc(tensor_from_array(pred), tensor_from_array(truth));
    });
    m.def("preprocess", [](const py::array_t<double>& volume, int target_size) {
        return array_from_tensor(preprocess(tensor_from_array(volume), target_size));
    });
    m.def("refine_prototype",
          [](const py::array_t<double>& query, const py::array_t<double>& p0, double threshold,
             double step, int iterations, double a) {
              RefineConfig cfg;
              cfg.step = step;
              cfg.iterations = iterations;
              return array_from_tensor(refine_prototype(tensor_from_array(query),
                                                        tensor_from_array(p0), threshold, cfg, a));
          },
          py::arg("query"), py::arg("p0"), py::arg("threshold"), py::arg("step") = 0.01,
          py::arg("iterations") = 7, py::arg("a") = 20.0);
    m.def("cluster_supervoxels",
          [](const py::array_t<double>& volume, int k, double compactness, int min_size,
             uint64_t seed) {
              SupervoxelConfig cfg{k, compactness, min_size, 1, seed};
              SupervoxelLabels labels = cluster_supervoxels(tensor_from_array(volume), cfg);
              Tensor t(labels.shape);
              for (size_t i = 0; i < t.size(); ++i) t[i] = labels.labels[i];
              return py::make_tuple(array_from_tensor(t), labels.count);
          },
          py::arg("volume"), py::arg("k"), py::arg("compactness") = 0.1, py::arg("min_size") = 100,
          py::arg("seed") = 0);

    // model-level surface
    py::class_<ModelParams>(m, "Model")
        .def_static(
            "init",
            [](const py::dict& config, uint64_t seed) {
                return ModelParams::init(config_from_dict(config).model_config(), seed);
            },
            py::arg("config") = py::dict(), py::arg("seed") = 0)
        .def_static("load",
                    [](const std::string& checkpoint_dir, const py::dict& config) {
                        RunConfig cfg = config_from_dict(config);
                        return load_checkpoint(checkpoint_dir, cfg.model_config()).params;
                    },
                    py::arg("checkpoint_dir"), py::arg("config") = py::dict())
        .def("segment",
             [](const ModelParams& params, const py::array_t<double>& support_image,
                const py::array_t<double>& support_mask, const py::array_t<double>& query_image,
                bool refine) {
                 Episode ep = episode_from_arrays(support_image, support_mask, query_image,
                                                  py::none());
                 ModelParams run = params;
                 run.config.refine.enabled = refine && params.config.refine.enabled;
                 SegmentationResult res = segment_episode(ep, run);
                 py::dict out;
                 out["mask"] = array_from_tensor(res.mask);
                 out["foreground"] = array_from_tensor(res.fused.foreground);
                 out["threshold_fine"] = res.threshold_fine;
                 out["threshold_coarse"] = res.threshold_coarse;
                 return out;
             },
             py::arg("support_image"), py::arg("support_mask"), py::arg("query_image"),
             py::arg("refine") = true);

    // dataset + training, enough to drive a small end-to-end run from python
    m.def("generate_dataset",
          [](const std::string& dir, const py::dict& config) {
              RunConfig cfg = config_from_dict(config);
              Dataset ds = make_dataset(cfg.data_volumes, derive_seed(cfg.seed, "dataset"),
                                        cfg.phantom_config());
              save_dataset(ds, dir);
              return static_cast<int>(ds.phantoms.size());
          },
          py::arg("dir"), py::arg("config") = py::dict());
    m.def("train",
          [](const std::string& data_dir, const std::string& out_dir, const py::dict& config) {
              RunConfig cfg = config_from_dict(config);
              Dataset ds = load_dataset(data_dir);
              SplitPlan split = make_split(ds, cfg.split_setting, cfg.split_fold, cfg.seed);
              TrainOptions opts;
              opts.out_dir = out_dir;
              opts.cache_dir = data_dir;
              opts.supervoxel = cfg.supervoxel_config();
              Checkpoint ck = meta_train(ds, split, cfg.model_config(), cfg.train_config(), opts);
              return ck.params;
          },
          py::arg("data_dir"), py::arg("out_dir"), py::arg("config") = py::dict());
    m.def("evaluate",
          [](const std::string& data_dir, const ModelParams& params, const py::dict& config) {
              RunConfig cfg = config_from_dict(config);
              Dataset ds = load_dataset(data_dir);
              SplitPlan split = make_split(ds, cfg.split_setting, cfg.split_fold, cfg.seed);
              EvalConfig ec;
              ec.workers = cfg.eval_workers;
              ec.refine = cfg.refine_enabled;
              EvalReport report = evaluate(ds, split, params, ec);
              py::dict out;
              out["mean"] = report.mean;
              out["std"] = report.stddev;
              py::dict per_class;
              for (const ClassSummary& c : report.classes) {
                  if (c.class_id >= 0) per_class[py::int_(c.class_id)] = c.mean;
              }
              out["per_class"] = per_class;
              out["episodes"] = static_cast<int>(report.episodes.size());
              return out;
          },
          py::arg("data_dir"), py::arg("params"), py::arg("config") = py::dict());
}
