#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "qseg/episode.hpp"
#include "qseg/tensor.hpp"

namespace qseg {

/// Total, exclusive labeling of a volume; every label holds at least
/// min_size voxels after small-component merging.
struct SupervoxelLabels {
    std::vector<int> shape;        // D, H, W
    std::vector<int32_t> labels;   // row-major, one label per voxel
    int count = 0;
    int min_size = 0;

    int32_t at(int z, int y, int x) const {
        return labels[(static_cast<size_t>(z) * shape[1] + static_cast<size_t>(y)) * shape[2] +
                      static_cast<size_t>(x)];
    }
};

struct SupervoxelConfig {
    int target_count = 50;     // k
    double compactness = 0.1;
    int min_size = 100;        // voxels per supervoxel after merging
    int min_slice_area = 100;  // pixels a footprint needs to seed an episode
    uint64_t seed = 0;
};

/// SLIC-style k-means over (intensity, scaled x, y, z) from a jittered seed
/// grid: 10 assignment/update rounds, connectivity enforcement, then merging
/// of small components into the adjacent label with the largest shared
/// boundary. Deterministic for a fixed seed.
SupervoxelLabels cluster_supervoxels(const Tensor& volume, const SupervoxelConfig& cfg);

/// Picks a supervoxel uniformly among those spanning two adjacent (admitted)
/// slices, one of its slices as the support, and an adjacent slice as the
/// query; both masks are the supervoxel's 2D footprints. `admitted` restricts
/// usable slices when present (size D, nonzero = usable).
Episode sample_pseudo_episode(const Tensor& volume, const SupervoxelLabels& labels,
                              std::mt19937_64& rng,
                              const std::vector<uint8_t>* admitted = nullptr,
                              int min_slice_area = 1);

/// Labels of supervoxels eligible for episode sampling under the admission
/// list, in increasing order. A footprint below min_slice_area pixels does
/// not count as present on a slice.
std::vector<int> eligible_supervoxels(const SupervoxelLabels& labels,
                                      const std::vector<uint8_t>* admitted = nullptr,
                                      int min_slice_area = 1);

void save_labels(const SupervoxelLabels& labels, const std::string& path);
SupervoxelLabels load_labels(const std::string& path);

/// Cache file name keyed by (volume id, k, compactness, seed).
std::string supervoxel_cache_name(int volume_id, const SupervoxelConfig& cfg);

}  // namespace qseg
