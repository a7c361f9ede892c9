#include "qseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "qseg/error.hpp"
#include "qseg/rng.hpp"

namespace fs = std::filesystem;

namespace qseg {

namespace {

struct Ellipsoid {
    double cz, cy, cx;
    double az, ay, ax;     // semi-axes
    double rot[3][3];      // row-major rotation
};

// Size profiles cycle over class index: in-plane and depth semi-axis ranges
// as fractions of the volume extents.
struct SizeProfile {
    double plane_lo, plane_hi, depth_lo, depth_hi;
};
constexpr SizeProfile kProfiles[4] = {
    {0.24, 0.32, 0.18, 0.26},
    {0.19, 0.26, 0.15, 0.22},
    {0.15, 0.21, 0.12, 0.18},
    {0.12, 0.17, 0.10, 0.16},
};

void random_rotation(std::mt19937_64& rng, double rot[3][3]) {
    std::normal_distribution<double> g(0.0, 1.0);
    double q[4];
    double norm = 0.0;
    for (double& v : q) {
        v = g(rng);
        norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : q) v /= norm;
    const double a = q[0], b = q[1], c = q[2], d = q[3];
    rot[0][0] = a * a + b * b - c * c - d * d;
    rot[0][1] = 2 * (b * c - a * d);
    rot[0][2] = 2 * (b * d + a * c);
    rot[1][0] = 2 * (b * c + a * d);
    rot[1][1] = a * a - b * b + c * c - d * d;
    rot[1][2] = 2 * (c * d - a * b);
    rot[2][0] = 2 * (b * d - a * c);
    rot[2][1] = 2 * (c * d + a * b);
    rot[2][2] = a * a - b * b - c * c + d * d;
}

Tensor ellipsoid_mask(const Ellipsoid& e, int d, int h, int w) {
    Tensor m({d, h, w});
    const double pad = std::max({e.az, e.ay, e.ax});
    const int z0 = std::max(0, static_cast<int>(e.cz - pad) - 1);
    const int z1 = std::min(d - 1, static_cast<int>(e.cz + pad) + 1);
    const int y0 = std::max(0, static_cast<int>(e.cy - pad) - 1);
    const int y1 = std::min(h - 1, static_cast<int>(e.cy + pad) + 1);
    const int x0 = std::max(0, static_cast<int>(e.cx - pad) - 1);
    const int x1 = std::min(w - 1, static_cast<int>(e.cx + pad) + 1);
    for (int z = z0; z <= z1; ++z)
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double v[3] = {z - e.cz, y - e.cy, x - e.cx};
                double r[3];
                for (int i = 0; i < 3; ++i) {
                    r[i] = e.rot[i][0] * v[0] + e.rot[i][1] * v[1] + e.rot[i][2] * v[2];
                }
                const double q = (r[0] / e.az) * (r[0] / e.az) + (r[1] / e.ay) * (r[1] / e.ay) +
                                 (r[2] / e.ax) * (r[2] / e.ax);
                if (q <= 1.0) m(z, y, x) = 1.0;
            }
    return m;
}

bool overlaps(const Tensor& a, const Tensor& b) {
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i] != 0.0 && b[i] != 0.0) return true;
    }
    return false;
}

Phantom generate_one(int id, uint64_t seed, const PhantomConfig& cfg) {
    const int d = cfg.depth, h = cfg.size, w = cfg.size;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma);

    Phantom p;
    p.id = id;
    p.volume = Tensor({d, h, w});
    for (int c = 0; c < cfg.classes; ++c) p.class_ids.push_back(c);

    Tensor occupied({d, h, w});
    for (int c = 0; c < cfg.classes; ++c) {
        const SizeProfile& prof = kProfiles[c % 4];
        Tensor mask;
        bool placed = false;
        for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
            Ellipsoid e;
            e.az = (prof.depth_lo + (prof.depth_hi - prof.depth_lo) * unit(rng)) * d;
            e.ay = (prof.plane_lo + (prof.plane_hi - prof.plane_lo) * unit(rng)) * h;
            e.ax = (prof.plane_lo + (prof.plane_hi - prof.plane_lo) * unit(rng)) * w;
            random_rotation(rng, e.rot);
            // exact half-extent of the rotated ellipsoid along each axis
            double ext[3];
            for (int i = 0; i < 3; ++i) {
                ext[i] = 1.0 + std::sqrt(e.rot[0][i] * e.rot[0][i] * e.az * e.az +
                                         e.rot[1][i] * e.rot[1][i] * e.ay * e.ay +
                                         e.rot[2][i] * e.rot[2][i] * e.ax * e.ax);
            }
            if (2.0 * ext[0] + 2.0 >= d || 2.0 * ext[1] + 2.0 >= h || 2.0 * ext[2] + 2.0 >= w)
                continue;
            e.cz = ext[0] + unit(rng) * (d - 2.0 * ext[0]);
            e.cy = ext[1] + unit(rng) * (h - 2.0 * ext[1]);
            e.cx = ext[2] + unit(rng) * (w - 2.0 * ext[2]);
            mask = ellipsoid_mask(e, d, h, w);
            if (!overlaps(mask, occupied)) {
                placed = true;
                break;
            }
        }
        require(placed, "phantom_overlap",
                "could not place a disjoint ellipsoid for class " + std::to_string(c) +
                    " in volume " + std::to_string(id));
        for (size_t i = 0; i < mask.size(); ++i) occupied[i] += mask[i];
        p.masks.push_back(std::move(mask));
    }

    // Intensity: class means over a background with a smooth random field
    // (linear tilt plus low-frequency bumps), per-volume jitter and voxel
    // noise. The bumps give background supervoxels an appearance of their
    // own; on a flat background they would be purely spatial constructs and
    // their pseudo-labels unlearnable from local intensity.
    std::uniform_real_distribution<double> sym(-1.0, 1.0);
    const double gz = sym(rng), gy = sym(rng), gx = sym(rng);
    // Many small bumps with volume-independent statistics: the background is
    // locally structured (supervoxels get an appearance of their own) yet
    // globally homogeneous, so context features cannot fingerprint a volume.
    struct Bump {
        double cz, cy, cx, sz, sxy, amp;
    };
    std::vector<Bump> bumps(static_cast<size_t>(d) * h * w / 3000);
    for (Bump& b : bumps) {
        b.cz = 0.5 * (sym(rng) + 1.0) * d;
        b.cy = 0.5 * (sym(rng) + 1.0) * h;
        b.cx = 0.5 * (sym(rng) + 1.0) * w;
        b.sz = 0.6 + 0.3 * (sym(rng) + 1.0);
        b.sxy = 2.0 + 1.5 * (sym(rng) + 1.0);
        b.amp = cfg.bias_amplitude * sym(rng);
    }
    std::vector<double> class_mean(static_cast<size_t>(cfg.classes));
    for (int c = 0; c < cfg.classes; ++c) {
        class_mean[static_cast<size_t>(c)] =
            cfg.background_mean + cfg.contrast(c) + cfg.intensity_jitter * sym(rng);
    }
    // slice-wise acquisition gain, the kind of artifact that separates
    // adjacent slices and different volumes alike
    std::vector<double> gain(static_cast<size_t>(d));
    for (double& g : gain) g = 1.0 + cfg.slice_gain * sym(rng);
    for (int z = 0; z < d; ++z)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double v = cfg.background_mean;
                for (int c = 0; c < cfg.classes; ++c) {
                    if (p.masks[static_cast<size_t>(c)](z, y, x) != 0.0) {
                        v = class_mean[static_cast<size_t>(c)];
                        break;
                    }
                }
                double bias = 0.3 * cfg.bias_amplitude * (gz * (double(z) / d - 0.5) +
                                                          gy * (double(y) / h - 0.5) +
                                                          gx * (double(x) / w - 0.5));
                for (const Bump& b : bumps) {
                    const double dz = (z - b.cz) / b.sz;
                    const double dyx = ((y - b.cy) * (y - b.cy) + (x - b.cx) * (x - b.cx)) /
                                       (b.sxy * b.sxy);
                    bias += b.amp * std::exp(-0.5 * (dz * dz + dyx));
                }
                p.volume(z, y, x) = gain[static_cast<size_t>(z)] * (v + bias) + noise(rng);
            }
    return p;
}

}  // namespace

std::vector<Phantom> generate_phantoms(int count, uint64_t seed, const PhantomConfig& cfg) {
    require(count >= 1, "bad_argument", "phantom count must be >= 1");
    require(cfg.classes >= 2, "bad_argument", "phantom config needs at least 2 classes");
    require(cfg.depth >= 8, "bad_argument", "phantom depth must be >= 8");
    require(cfg.size % 8 == 0 && cfg.size >= 16, "bad_argument",
            "phantom size must be >= 16 and divisible by 8");
    std::vector<Phantom> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        out.push_back(generate_one(i, derive_seed(seed, "phantom", static_cast<uint64_t>(i)), cfg));
    }
    return out;
}

Tensor preprocess(const Tensor& volume, int target_size) {
    require(volume.rank() == 3, "shape_mismatch",
            "volume must be D x H x W, got " + shape_string(volume.shape()));
    require(target_size >= 1, "bad_argument", "target size must be >= 1");

    // Crop/pad before the statistics so a second pass sees the same voxels;
    // together with the nearest-rank percentile this makes preprocess
    // idempotent (the clipped top maps to exactly 1.0 again).
    const int d = volume.extent(0), h = volume.extent(1), w = volume.extent(2);
    Tensor framed = volume;
    if (h != target_size || w != target_size) {
        framed = Tensor({d, target_size, target_size});
        const int off_y = (h - target_size) / 2;
        const int off_x = (w - target_size) / 2;
        for (int z = 0; z < d; ++z)
            for (int y = 0; y < target_size; ++y)
                for (int x = 0; x < target_size; ++x) {
                    const int sy = y + off_y, sx = x + off_x;
                    if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                    framed(z, y, x) = volume(z, sy, sx);
                }
    }

    const size_t n = framed.size();
    std::vector<double> sorted(framed.values());
    std::sort(sorted.begin(), sorted.end());
    const size_t idx = static_cast<size_t>(std::ceil(0.995 * static_cast<double>(n))) - 1;
    const double cap = sorted[std::min(idx, n - 1)];

    const double lo = sorted[0];
    const double scale = cap > lo ? 1.0 / (cap - lo) : 0.0;
    Tensor out(framed.shape());
    for (size_t i = 0; i < n; ++i) {
        out[i] = (std::min(framed[i], cap) - lo) * scale;
    }
    return out;
}

Dataset make_dataset(int count, uint64_t seed, const PhantomConfig& cfg) {
    Dataset ds;
    ds.phantoms = generate_phantoms(count, seed, cfg);
    for (Phantom& p : ds.phantoms) p.volume = preprocess(p.volume, cfg.size);
    ds.class_ids = ds.phantoms.front().class_ids;
    return ds;
}

void save_dataset(const Dataset& dataset, const std::string& dir) {
    fs::create_directories(dir);
    std::ofstream manifest(fs::path(dir) / "manifest.txt");
    require(manifest.good(), "io", "cannot write manifest in '" + dir + "'");
    manifest << "dataset v1\n";
    manifest << "classes";
    for (int c : dataset.class_ids) manifest << " " << c;
    manifest << "\n";
    char buf[64];
    for (const Phantom& p : dataset.phantoms) {
        std::snprintf(buf, sizeof(buf), "vol_%03d.t", p.id);
        const std::string vol_name = buf;
        save_tensor(p.volume, (fs::path(dir) / vol_name).string());
        manifest << "volume " << p.id << " " << vol_name << " masks";
        for (size_t c = 0; c < p.masks.size(); ++c) {
            std::snprintf(buf, sizeof(buf), "vol_%03d_m%d.t", p.id, p.class_ids[c]);
            save_tensor(p.masks[c], (fs::path(dir) / buf).string());
            manifest << " " << buf;
        }
        manifest << "\n";
    }
}

Dataset load_dataset(const std::string& dir) {
    const fs::path manifest_path = fs::path(dir) / "manifest.txt";
    std::ifstream manifest(manifest_path);
    require(manifest.good(), "missing_dataset",
            "expected dataset manifest at '" + manifest_path.string() + "'");
    std::string line;
    std::getline(manifest, line);
    require(line == "dataset v1", "bad_format", "unrecognized dataset manifest header");

    Dataset ds;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        if (kind == "classes") {
            int c;
            while (ls >> c) ds.class_ids.push_back(c);
        } else if (kind == "volume") {
            Phantom p;
            std::string vol_name, marker;
            ls >> p.id >> vol_name >> marker;
            require(marker == "masks", "bad_format", "malformed volume line in manifest");
            p.volume = load_tensor((fs::path(dir) / vol_name).string());
            std::string mask_name;
            while (ls >> mask_name) {
                p.masks.push_back(load_tensor((fs::path(dir) / mask_name).string()));
            }
            p.class_ids = ds.class_ids;
            require(p.masks.size() == ds.class_ids.size(), "bad_format",
                    "volume " + std::to_string(p.id) + " mask count mismatch");
            ds.phantoms.push_back(std::move(p));
        }
    }
    require(!ds.phantoms.empty(), "missing_dataset", "dataset manifest lists no volumes");
    return ds;
}

namespace {

bool slice_has_class(const Tensor& mask, int z) {
    const int h = mask.extent(1), w = mask.extent(2);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (mask(z, y, x) != 0.0) return true;
    return false;
}

std::vector<int> class_slices(const Phantom& p, int class_id) {
    std::vector<int> slices;
    const Tensor& m = p.masks[static_cast<size_t>(class_id)];
    for (int z = 0; z < p.volume.extent(0); ++z) {
        if (slice_has_class(m, z)) slices.push_back(z);
    }
    return slices;
}

Tensor mask_slice(const Tensor& mask, int z) {
    const int h = mask.extent(1), w = mask.extent(2);
    Tensor s({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) s(y, x) = mask(z, y, x);
    return s;
}

Tensor image_slice(const Tensor& volume, int z) {
    const int h = volume.extent(1), w = volume.extent(2);
    Tensor s({h, w, 1});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) s(y, x, 0) = volume(z, y, x);
    return s;
}

}  // namespace

SplitPlan make_split(const Dataset& dataset, int setting, int fold, uint64_t seed) {
    require(setting == 1 || setting == 2, "bad_argument", "setting must be 1 or 2");
    require(fold == 0 || fold == 1, "bad_argument", "fold must be 0 or 1");
    require(dataset.class_ids.size() >= 2, "bad_argument", "split needs at least 2 classes");

    SplitPlan plan;
    plan.setting = setting;
    plan.fold = fold;

    std::vector<int> order = dataset.class_ids;
    std::sort(order.begin(), order.end());
    std::mt19937_64 rng(derive_seed(seed, "split"));
    std::shuffle(order.begin(), order.end(), rng);
    const size_t half = order.size() / 2;
    for (size_t i = 0; i < order.size(); ++i) {
        const bool in_test = (i < half) == (fold == 0);
        (in_test ? plan.test_classes : plan.train_classes).push_back(order[i]);
    }
    std::sort(plan.train_classes.begin(), plan.train_classes.end());
    std::sort(plan.test_classes.begin(), plan.test_classes.end());

    bool any_pair = false;
    for (const Phantom& p : dataset.phantoms) {
        const int d = p.volume.extent(0);
        std::vector<uint8_t> admit(static_cast<size_t>(d), 1);
        if (setting == 2) {
            for (int z = 0; z < d; ++z) {
                for (int c : plan.test_classes) {
                    if (slice_has_class(p.masks[static_cast<size_t>(c)], z)) {
                        admit[static_cast<size_t>(z)] = 0;
                        break;
                    }
                }
            }
        }
        for (int z = 0; z + 1 < d; ++z) {
            any_pair |= admit[static_cast<size_t>(z)] && admit[static_cast<size_t>(z) + 1];
        }
        plan.admitted.push_back(std::move(admit));
    }
    require(any_pair, "empty_training",
            "setting-2 removal left no adjacent admitted slice pair in any volume");
    return plan;
}

void save_split(const SplitPlan& split, const std::string& path) {
    std::ofstream out(path);
    require(out.good(), "io", "cannot write split plan to '" + path + "'");
    out << "split v1\n";
    out << "setting " << split.setting << "\n";
    out << "fold " << split.fold << "\n";
    out << "train_classes";
    for (int c : split.train_classes) out << " " << c;
    out << "\ntest_classes";
    for (int c : split.test_classes) out << " " << c;
    out << "\n";
    for (size_t v = 0; v < split.admitted.size(); ++v) {
        out << "admit " << v << " " << split.admitted[v].size() << " :";
        for (size_t z = 0; z < split.admitted[v].size(); ++z) {
            if (split.admitted[v][z]) out << " " << z;
        }
        out << "\n";
    }
}

SplitPlan load_split(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "io", "cannot read split plan from '" + path + "'");
    std::string line;
    std::getline(in, line);
    require(line == "split v1", "bad_format", "unrecognized split header");

    SplitPlan plan;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        if (kind == "setting") ls >> plan.setting;
        else if (kind == "fold") ls >> plan.fold;
        else if (kind == "train_classes") {
            int c;
            while (ls >> c) plan.train_classes.push_back(c);
        } else if (kind == "test_classes") {
            int c;
            while (ls >> c) plan.test_classes.push_back(c);
        } else if (kind == "admit") {
            int vid, depth;
            std::string colon;
            ls >> vid >> depth >> colon;
            require(colon == ":" && depth >= 0, "bad_format", "malformed admit line in split plan");
            std::vector<uint8_t> admit(static_cast<size_t>(depth), 0);
            int z;
            while (ls >> z) admit[static_cast<size_t>(z)] = 1;
            plan.admitted.push_back(std::move(admit));
        }
    }
    return plan;
}

std::vector<EvalCase> enumerate_eval_cases(const Dataset& dataset, const SplitPlan& split) {
    std::vector<EvalCase> cases;
    const int volumes = static_cast<int>(dataset.phantoms.size());
    for (int c : split.test_classes) {
        std::vector<int> with_class;
        for (int v = 0; v < volumes; ++v) {
            if (!class_slices(dataset.phantoms[static_cast<size_t>(v)], c).empty()) {
                with_class.push_back(v);
            }
        }
        require(with_class.size() >= 2, "too_few_volumes",
                "class " + std::to_string(c) + " appears in fewer than 2 volumes");
        for (size_t qi = 0; qi < with_class.size(); ++qi) {
            const int qv = with_class[qi];
            const int sv = with_class[(qi + 1) % with_class.size()];
            const std::vector<int> s_slices =
                class_slices(dataset.phantoms[static_cast<size_t>(sv)], c);
            const int s_slice = s_slices[s_slices.size() / 2];
            for (int qz : class_slices(dataset.phantoms[static_cast<size_t>(qv)], c)) {
                cases.push_back({c, sv, s_slice, qv, qz});
            }
        }
    }
    return cases;
}

Episode materialize_episode(const Dataset& dataset, const EvalCase& c) {
    const Phantom& sp = dataset.phantoms[static_cast<size_t>(c.support_volume)];
    const Phantom& qp = dataset.phantoms[static_cast<size_t>(c.query_volume)];
    Episode ep;
    ep.support_image = image_slice(sp.volume, c.support_slice);
    ep.support_mask = mask_slice(sp.masks[static_cast<size_t>(c.class_id)], c.support_slice);
    ep.query_image = image_slice(qp.volume, c.query_slice);
    ep.query_mask = mask_slice(qp.masks[static_cast<size_t>(c.class_id)], c.query_slice);
    ep.class_id = c.class_id;
    ep.support_volume = c.support_volume;
    ep.query_volume = c.query_volume;
    ep.support_slice = c.support_slice;
    ep.query_slice = c.query_slice;
    return ep;
}

Episode sample_eval_episode(const Dataset& dataset, const SplitPlan& split, std::mt19937_64& rng) {
    require(!split.test_classes.empty(), "bad_argument", "split has no test classes");
    std::uniform_int_distribution<size_t> pick_class(0, split.test_classes.size() - 1);
    const int c = split.test_classes[pick_class(rng)];

    std::vector<int> with_class;
    for (size_t v = 0; v < dataset.phantoms.size(); ++v) {
        if (!class_slices(dataset.phantoms[v], c).empty()) with_class.push_back(static_cast<int>(v));
    }
    require(with_class.size() >= 2, "too_few_volumes",
            "class " + std::to_string(c) + " appears in fewer than 2 volumes");

    std::uniform_int_distribution<size_t> pick_vol(0, with_class.size() - 1);
    const int qv = with_class[pick_vol(rng)];
    int sv = qv;
    while (sv == qv) sv = with_class[pick_vol(rng)];

    const std::vector<int> q_slices = class_slices(dataset.phantoms[static_cast<size_t>(qv)], c);
    const std::vector<int> s_slices = class_slices(dataset.phantoms[static_cast<size_t>(sv)], c);
    std::uniform_int_distribution<size_t> pick_q(0, q_slices.size() - 1);
    std::uniform_int_distribution<size_t> pick_s(0, s_slices.size() - 1);
    return materialize_episode(dataset,
                               {c, sv, s_slices[pick_s(rng)], qv, q_slices[pick_q(rng)]});
}

}  // namespace qseg
