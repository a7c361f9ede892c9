#include "qseg/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "qseg/error.hpp"
#include "qseg/rng.hpp"

namespace qseg {

namespace {

struct Entry {
    std::string key;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
};

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "on") return true;
    if (v == "0" || v == "false" || v == "off") return false;
    fail("config", "key '" + key + "' expects a boolean, got '" + v + "'");
}

template <typename T>
Entry make_entry(const std::string& key, T* target) {
    Entry e;
    e.key = key;
    if constexpr (std::is_same_v<T, bool>) {
        e.get = [target]() { return std::string(*target ? "true" : "false"); };
        e.set = [key, target](const std::string& v) { *target = parse_bool(key, v); };
    } else if constexpr (std::is_same_v<T, int>) {
        e.get = [target]() { return std::to_string(*target); };
        e.set = [key, target](const std::string& v) {
            try {
                *target = std::stoi(v);
            } catch (const std::exception&) {
                fail("config", "key '" + key + "' expects an integer, got '" + v + "'");
            }
        };
    } else if constexpr (std::is_same_v<T, uint64_t>) {
        e.get = [target]() { return std::to_string(*target); };
        e.set = [key, target](const std::string& v) {
            try {
                *target = std::stoull(v);
            } catch (const std::exception&) {
                fail("config", "key '" + key + "' expects an integer, got '" + v + "'");
            }
        };
    } else if constexpr (std::is_same_v<T, double>) {
        e.get = [target]() { return fmt_double(*target); };
        e.set = [key, target](const std::string& v) {
            try {
                size_t used = 0;
                *target = std::stod(v, &used);
                require(used == v.size(), "config",
                        "key '" + key + "' expects a number, got '" + v + "'");
            } catch (const Error&) {
                throw;
            } catch (const std::exception&) {
                fail("config", "key '" + key + "' expects a number, got '" + v + "'");
            }
        };
    } else {
        e.get = [target]() { return *target; };
        e.set = [target](const std::string& v) { *target = v; };
    }
    return e;
}

std::vector<Entry> registry(RunConfig& c) {
    return {
        make_entry("seed", &c.seed),
        make_entry("data.volumes", &c.data_volumes),
        make_entry("data.classes", &c.data_classes),
        make_entry("data.depth", &c.data_depth),
        make_entry("data.size", &c.data_size),
        make_entry("data.noise", &c.data_noise),
        make_entry("data.bias", &c.data_bias),
        make_entry("data.jitter", &c.data_jitter),
        make_entry("data.slice_gain", &c.data_slice_gain),
        make_entry("data.contrast_base", &c.data_contrast_base),
        make_entry("data.contrast_step", &c.data_contrast_step),
        make_entry("sv.k", &c.sv_k),
        make_entry("sv.compactness", &c.sv_compactness),
        make_entry("sv.min_size", &c.sv_min_size),
        make_entry("sv.min_slice_area", &c.sv_min_slice_area),
        make_entry("model.z", &c.model_z),
        make_entry("model.hidden", &c.model_hidden),
        make_entry("model.t0", &c.model_t0),
        make_entry("seg.a", &c.seg_a),
        make_entry("seg.alpha", &c.seg_alpha),
        make_entry("seg.path", &c.seg_path),
        make_entry("seg.threshold_adaptation", &c.seg_threshold_adaptation),
        make_entry("seg.per_path_threshold", &c.seg_per_path_threshold),
        make_entry("refine.enabled", &c.refine_enabled),
        make_entry("refine.step", &c.refine_step),
        make_entry("refine.iterations", &c.refine_iterations),
        make_entry("refine.convention", &c.refine_convention),
        make_entry("train.lr0", &c.train_lr0),
        make_entry("train.decay", &c.train_decay),
        make_entry("train.decay_every", &c.train_decay_every),
        make_entry("train.iterations", &c.train_iterations),
        make_entry("train.align", &c.train_align),
        make_entry("train.optimizer", &c.train_optimizer),
        make_entry("train.checkpoint_every", &c.train_checkpoint_every),
        make_entry("train.log_every", &c.train_log_every),
        make_entry("split.setting", &c.split_setting),
        make_entry("split.fold", &c.split_fold),
        make_entry("eval.workers", &c.eval_workers),
    };
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
    for (Entry& e : registry(*this)) {
        if (e.key == key) {
            e.set(value);
            return;
        }
    }
    fail("config", "unknown configuration key '" + key + "'");
}

void RunConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "config", "cannot read config file '" + path + "'");
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        while (!line.empty() && (line.back() == ' ' || line.back() == '\r')) line.pop_back();
        size_t start = line.find_first_not_of(' ');
        if (start == std::string::npos) continue;
        const size_t eq = line.find('=');
        require(eq != std::string::npos, "config",
                path + ":" + std::to_string(lineno) + ": expected key=value");
        set(line.substr(start, eq - start), line.substr(eq + 1));
    }
}

void RunConfig::apply_env(const std::string& prefix) {
    for (Entry& e : registry(*this)) {
        std::string name = prefix;
        for (char ch : e.key) {
            name += ch == '.' ? '_' : static_cast<char>(std::toupper(ch));
        }
        if (const char* v = std::getenv(name.c_str())) e.set(v);
    }
}

void RunConfig::apply_override(const std::string& key_equals_value) {
    const size_t eq = key_equals_value.find('=');
    require(eq != std::string::npos, "config",
            "override '" + key_equals_value + "' must be key=value");
    set(key_equals_value.substr(0, eq), key_equals_value.substr(eq + 1));
}

std::string RunConfig::serialize() const {
    auto entries = registry(const_cast<RunConfig&>(*this));
    std::string out;
    for (const Entry& e : entries) {
        out += e.key;
        out += "=";
        out += e.get();
        out += "\n";
    }
    return out;
}

std::string RunConfig::fingerprint() const {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(serialize())));
    return buf;
}

ModelConfig RunConfig::model_config() const {
    ModelConfig m;
    m.z = model_z;
    m.head_hidden = model_hidden;
    m.threshold_init = model_t0;
    m.seg.a = seg_a;
    m.seg.alpha = seg_alpha;
    m.path = path_mode_from_string(seg_path);
    m.threshold_adaptation = seg_threshold_adaptation;
    m.per_path_threshold = seg_per_path_threshold;
    m.refine.enabled = refine_enabled;
    m.refine.step = refine_step;
    m.refine.iterations = refine_iterations;
    if (refine_convention == "foreground") {
        m.refine.convention = ReplaceConvention::foreground;
    } else if (refine_convention == "background") {
        m.refine.convention = ReplaceConvention::background;
    } else {
        fail("config", "refine.convention must be 'foreground' or 'background'");
    }
    return m;
}

TrainConfig RunConfig::train_config() const {
    TrainConfig t;
    t.lr0 = train_lr0;
    t.decay = train_decay;
    t.decay_every = train_decay_every;
    t.iterations = train_iterations;
    t.seed = derive_seed(seed, "train");
    t.align_loss_enabled = train_align;
    if (train_optimizer == "adam") {
        t.adam = true;
    } else {
        require(train_optimizer == "sgd", "config",
                "train.optimizer must be 'sgd' or 'adam', got '" + train_optimizer + "'");
    }
    t.checkpoint_every = train_checkpoint_every;
    t.log_every = train_log_every;
    return t;
}

PhantomConfig RunConfig::phantom_config() const {
    PhantomConfig p;
    p.classes = data_classes;
    p.depth = data_depth;
    p.size = data_size;
    p.noise_sigma = data_noise;
    p.bias_amplitude = data_bias;
    p.intensity_jitter = data_jitter;
    p.slice_gain = data_slice_gain;
    p.contrast_base = data_contrast_base;
    p.contrast_step = data_contrast_step;
    return p;
}

SupervoxelConfig RunConfig::supervoxel_config() const {
    SupervoxelConfig s;
    s.target_count = sv_k;
    s.compactness = sv_compactness;
    s.min_size = sv_min_size;
    s.min_slice_area = sv_min_slice_area;
    s.seed = derive_seed(seed, "supervoxel");
    return s;
}

}  // namespace qseg
