#include "qseg/supervoxel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <queue>

#include "qseg/error.hpp"

namespace qseg {

namespace {

struct Center {
    double intensity, z, y, x;
    double acc_i = 0, acc_z = 0, acc_y = 0, acc_x = 0;
    size_t members = 0;
};

constexpr int kAssignmentRounds = 10;

size_t flat(int z, int y, int x, int h, int w) {
    return (static_cast<size_t>(z) * h + static_cast<size_t>(y)) * w + static_cast<size_t>(x);
}

}  // namespace

SupervoxelLabels cluster_supervoxels(const Tensor& volume, const SupervoxelConfig& cfg) {
    require(volume.rank() == 3, "shape_mismatch",
            "volume must be D x H x W, got " + shape_string(volume.shape()));
    require(volume.all_finite(), "bad_argument", "volume intensities must be finite");
    require(cfg.target_count >= 1, "bad_argument", "supervoxel count must be >= 1");
    const int d = volume.extent(0), h = volume.extent(1), w = volume.extent(2);
    const size_t n = volume.size();
    require(static_cast<size_t>(cfg.target_count) <= n, "bad_argument",
            "supervoxel count " + std::to_string(cfg.target_count) + " exceeds voxel count " +
                std::to_string(n));

    // Intensities min-max normalized per volume so compactness is unit-free.
    double lo = volume[0], hi = volume[0];
    for (size_t i = 0; i < n; ++i) {
        lo = std::min(lo, volume[i]);
        hi = std::max(hi, volume[i]);
    }
    const double scale = hi > lo ? 1.0 / (hi - lo) : 0.0;
    std::vector<double> intensity(n);
    for (size_t i = 0; i < n; ++i) intensity[i] = (volume[i] - lo) * scale;

    const double step = std::cbrt(static_cast<double>(n) / cfg.target_count);
    const double spatial_w = cfg.compactness / step;

    // Jittered seed grid.
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> jitter(-step / 4.0, step / 4.0);
    std::vector<Center> centers;
    for (double z = step / 2.0; z < d; z += step) {
        for (double y = step / 2.0; y < h; y += step) {
            for (double x = step / 2.0; x < w; x += step) {
                Center c;
                c.z = std::clamp(z + jitter(rng), 0.0, d - 1.0);
                c.y = std::clamp(y + jitter(rng), 0.0, h - 1.0);
                c.x = std::clamp(x + jitter(rng), 0.0, w - 1.0);
                c.intensity = intensity[flat(static_cast<int>(c.z), static_cast<int>(c.y),
                                             static_cast<int>(c.x), h, w)];
                centers.push_back(c);
            }
        }
    }

    const int window = std::max(1, static_cast<int>(std::ceil(step)));
    std::vector<int32_t> assign(n, -1);
    std::vector<double> best(n);

    for (int round = 0; round < kAssignmentRounds; ++round) {
        std::fill(best.begin(), best.end(), std::numeric_limits<double>::infinity());
        for (size_t ci = 0; ci < centers.size(); ++ci) {
            const Center& c = centers[ci];
            const int z0 = std::max(0, static_cast<int>(c.z) - window);
            const int z1 = std::min(d - 1, static_cast<int>(c.z) + window);
            const int y0 = std::max(0, static_cast<int>(c.y) - window);
            const int y1 = std::min(h - 1, static_cast<int>(c.y) + window);
            const int x0 = std::max(0, static_cast<int>(c.x) - window);
            const int x1 = std::min(w - 1, static_cast<int>(c.x) + window);
            for (int z = z0; z <= z1; ++z) {
                const double dz = z - c.z;
                for (int y = y0; y <= y1; ++y) {
                    const double dy = y - c.y;
                    for (int x = x0; x <= x1; ++x) {
                        const size_t i = flat(z, y, x, h, w);
                        const double di = intensity[i] - c.intensity;
                        const double dx = x - c.x;
                        const double dist = di * di + spatial_w * spatial_w *
                                                          (dz * dz + dy * dy + dx * dx);
                        if (dist < best[i]) {
                            best[i] = dist;
                            assign[i] = static_cast<int32_t>(ci);
                        }
                    }
                }
            }
        }
        // Voxels outside every window fall to the globally nearest center.
        for (size_t i = 0; i < n; ++i) {
            if (assign[i] >= 0) continue;
            const int z = static_cast<int>(i) / (h * w);
            const int y = (static_cast<int>(i) / w) % h;
            const int x = static_cast<int>(i) % w;
            double bd = std::numeric_limits<double>::infinity();
            for (size_t ci = 0; ci < centers.size(); ++ci) {
                const Center& c = centers[ci];
                const double di = intensity[i] - c.intensity;
                const double dz = z - c.z, dy = y - c.y, dx = x - c.x;
                const double dist =
                    di * di + spatial_w * spatial_w * (dz * dz + dy * dy + dx * dx);
                if (dist < bd) {
                    bd = dist;
                    assign[i] = static_cast<int32_t>(ci);
                }
            }
        }
        for (Center& c : centers) {
            c.acc_i = c.acc_z = c.acc_y = c.acc_x = 0.0;
            c.members = 0;
        }
        for (size_t i = 0; i < n; ++i) {
            Center& c = centers[static_cast<size_t>(assign[i])];
            const size_t hw = static_cast<size_t>(h) * w;
            c.acc_i += intensity[i];
            c.acc_z += static_cast<double>(i / hw);
            c.acc_y += static_cast<double>((i % hw) / w);
            c.acc_x += static_cast<double>(i % static_cast<size_t>(w));
            c.members += 1;
        }
        for (Center& c : centers) {
            if (c.members == 0) continue;  // empty cluster keeps its center
            const double inv = 1.0 / static_cast<double>(c.members);
            c.intensity = c.acc_i * inv;
            c.z = c.acc_z * inv;
            c.y = c.acc_y * inv;
            c.x = c.acc_x * inv;
        }
    }

    // Connectivity: each 6-connected component becomes a candidate label.
    std::vector<int32_t> comp(n, -1);
    std::vector<size_t> comp_size;
    int32_t next = 0;
    std::vector<size_t> stack;
    for (size_t start = 0; start < n; ++start) {
        if (comp[start] >= 0) continue;
        const int32_t id = next++;
        comp[start] = id;
        stack.assign(1, start);
        size_t size = 0;
        while (!stack.empty()) {
            const size_t i = stack.back();
            stack.pop_back();
            ++size;
            const int z = static_cast<int>(i) / (h * w);
            const int y = (static_cast<int>(i) / w) % h;
            const int x = static_cast<int>(i) % w;
            const int nz[6] = {z - 1, z + 1, z, z, z, z};
            const int ny[6] = {y, y, y - 1, y + 1, y, y};
            const int nx[6] = {x, x, x, x, x - 1, x + 1};
            for (int k = 0; k < 6; ++k) {
                if (nz[k] < 0 || nz[k] >= d || ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w)
                    continue;
                const size_t j = flat(nz[k], ny[k], nx[k], h, w);
                if (comp[j] >= 0 || assign[j] != assign[i]) continue;
                comp[j] = id;
                stack.push_back(j);
            }
        }
        comp_size.push_back(size);
    }

    // Merge components below min_size into the adjacent component with the
    // largest shared boundary, smallest component first.
    std::vector<int32_t> remap(comp_size.size());
    for (size_t i = 0; i < remap.size(); ++i) remap[i] = static_cast<int32_t>(i);
    auto resolve = [&](int32_t id) {
        while (remap[static_cast<size_t>(id)] != id) id = remap[static_cast<size_t>(id)];
        return id;
    };

    for (;;) {
        // current sizes under the remap
        std::map<int32_t, size_t> sizes;
        for (size_t c = 0; c < comp_size.size(); ++c) {
            sizes[resolve(static_cast<int32_t>(c))] += comp_size[c];
        }
        if (sizes.size() <= 1) break;
        int32_t victim = -1;
        size_t victim_size = std::numeric_limits<size_t>::max();
        for (const auto& [id, size] : sizes) {
            if (size < static_cast<size_t>(cfg.min_size) && size < victim_size) {
                victim = id;
                victim_size = size;
            }
        }
        if (victim < 0) break;

        std::map<int32_t, size_t> boundary;
        for (size_t i = 0; i < n; ++i) {
            if (resolve(comp[i]) != victim) continue;
            const int z = static_cast<int>(i) / (h * w);
            const int y = (static_cast<int>(i) / w) % h;
            const int x = static_cast<int>(i) % w;
            const int nz[6] = {z - 1, z + 1, z, z, z, z};
            const int ny[6] = {y, y, y - 1, y + 1, y, y};
            const int nx[6] = {x, x, x, x, x - 1, x + 1};
            for (int k = 0; k < 6; ++k) {
                if (nz[k] < 0 || nz[k] >= d || ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w)
                    continue;
                const int32_t other = resolve(comp[flat(nz[k], ny[k], nx[k], h, w)]);
                if (other != victim) boundary[other] += 1;
            }
        }
        int32_t target = -1;
        size_t contact = 0;
        for (const auto& [id, faces] : boundary) {
            if (faces > contact) {
                contact = faces;
                target = id;
            }
        }
        if (target < 0) break;  // isolated component, nothing to merge into
        remap[static_cast<size_t>(victim)] = target;
    }

    // Compact final ids in first-voxel scan order.
    SupervoxelLabels out;
    out.shape = {d, h, w};
    out.labels.assign(n, -1);
    out.min_size = cfg.min_size;
    std::map<int32_t, int32_t> final_id;
    for (size_t i = 0; i < n; ++i) {
        const int32_t root = resolve(comp[i]);
        auto [it, inserted] = final_id.try_emplace(root, static_cast<int32_t>(final_id.size()));
        out.labels[i] = it->second;
    }
    out.count = static_cast<int>(final_id.size());
    return out;
}

namespace {

Tensor volume_slice(const Tensor& volume, int z) {
    const int h = volume.extent(1), w = volume.extent(2);
    Tensor s({h, w, 1});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) s(y, x, 0) = volume(z, y, x);
    return s;
}

Tensor footprint(const SupervoxelLabels& labels, int z, int32_t label) {
    const int h = labels.shape[1], w = labels.shape[2];
    Tensor m({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) m(y, x) = labels.at(z, y, x) == label ? 1.0 : 0.0;
    return m;
}

std::vector<std::vector<int>> slice_areas(const SupervoxelLabels& labels) {
    const int d = labels.shape[0];
    std::vector<std::vector<int>> area(static_cast<size_t>(labels.count),
                                       std::vector<int>(static_cast<size_t>(d), 0));
    const int hw = labels.shape[1] * labels.shape[2];
    for (int z = 0; z < d; ++z) {
        for (int i = 0; i < hw; ++i) {
            area[static_cast<size_t>(labels.labels[static_cast<size_t>(z) * hw + i])]
                [static_cast<size_t>(z)] += 1;
        }
    }
    return area;
}

bool slice_ok(const std::vector<uint8_t>* admitted, int z) {
    return !admitted || (*admitted)[static_cast<size_t>(z)] != 0;
}

}  // namespace

std::vector<int> eligible_supervoxels(const SupervoxelLabels& labels,
                                      const std::vector<uint8_t>* admitted, int min_slice_area) {
    const int d = labels.shape[0];
    const int need = std::max(1, min_slice_area);
    const auto area = slice_areas(labels);
    std::vector<int> eligible;
    for (int l = 0; l < labels.count; ++l) {
        bool ok = false;
        for (int z = 0; z + 1 < d && !ok; ++z) {
            ok = area[static_cast<size_t>(l)][static_cast<size_t>(z)] >= need &&
                 area[static_cast<size_t>(l)][static_cast<size_t>(z + 1)] >= need &&
                 slice_ok(admitted, z) && slice_ok(admitted, z + 1);
        }
        if (ok) eligible.push_back(l);
    }
    return eligible;
}

Episode sample_pseudo_episode(const Tensor& volume, const SupervoxelLabels& labels,
                              std::mt19937_64& rng, const std::vector<uint8_t>* admitted,
                              int min_slice_area) {
    require(volume.rank() == 3 && volume.shape() == labels.shape, "shape_mismatch",
            "volume and label shapes differ");
    const int d = labels.shape[0];
    const int need = std::max(1, min_slice_area);
    const auto area = slice_areas(labels);

    const std::vector<int> eligible = eligible_supervoxels(labels, admitted, min_slice_area);
    require(!eligible.empty(), "no_eligible_supervoxel",
            "no supervoxel spans two adjacent admitted slices");

    std::uniform_int_distribution<size_t> pick_label(0, eligible.size() - 1);
    const int32_t label = eligible[pick_label(rng)];

    // support slices with at least one usable adjacent query slice
    std::vector<std::pair<int, int>> pairs;  // (support, query)
    for (int z = 0; z < d; ++z) {
        if (area[static_cast<size_t>(label)][static_cast<size_t>(z)] < need ||
            !slice_ok(admitted, z))
            continue;
        for (int dz : {-1, 1}) {
            const int q = z + dz;
            if (q < 0 || q >= d) continue;
            if (area[static_cast<size_t>(label)][static_cast<size_t>(q)] >= need &&
                slice_ok(admitted, q)) {
                pairs.emplace_back(z, q);
            }
        }
    }
    std::uniform_int_distribution<size_t> pick_pair(0, pairs.size() - 1);
    const auto [support_z, query_z] = pairs[pick_pair(rng)];

    Episode ep;
    ep.support_image = volume_slice(volume, support_z);
    ep.support_mask = footprint(labels, support_z, label);
    ep.query_image = volume_slice(volume, query_z);
    ep.query_mask = footprint(labels, query_z, label);
    ep.class_id = static_cast<int>(label);
    ep.support_slice = support_z;
    ep.query_slice = query_z;
    return ep;
}

void save_labels(const SupervoxelLabels& labels, const std::string& path) {
    Tensor t(labels.shape);
    for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(labels.labels[i]);
    save_tensor(t, path, Precision::f64);
}

SupervoxelLabels load_labels(const std::string& path) {
    Tensor t = load_tensor(path);
    require(t.rank() == 3, "bad_format", "label volume must be rank 3");
    SupervoxelLabels out;
    out.shape = t.shape();
    out.labels.resize(t.size());
    int32_t max_label = -1;
    for (size_t i = 0; i < t.size(); ++i) {
        out.labels[i] = static_cast<int32_t>(t[i]);
        max_label = std::max(max_label, out.labels[i]);
    }
    out.count = max_label + 1;
    return out;
}

std::string supervoxel_cache_name(int volume_id, const SupervoxelConfig& cfg) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "sv_v%03d_k%d_c%g_s%llu.t", volume_id, cfg.target_count,
                  cfg.compactness, static_cast<unsigned long long>(cfg.seed));
    return buf;
}

}  // namespace qseg
