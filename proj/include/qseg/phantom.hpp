#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "qseg/episode.hpp"
#include "qseg/tensor.hpp"

namespace qseg {

/// Synthetic volume with one ellipsoid per class. Masks are recorded exactly
/// and are pairwise disjoint.
struct Phantom {
    int id = -1;
    Tensor volume;               // D x H x W
    std::vector<Tensor> masks;   // one D x H x W binary mask per class
    std::vector<int> class_ids;
};

struct PhantomConfig {
    int classes = 4;
    int depth = 32;
    int size = 64;  // H = W, divisible by 8
    double background_mean = 0.2;
    double noise_sigma = 0.03;
    double bias_amplitude = 0.12;
    double intensity_jitter = 0.01;  // per-volume shift of each class mean
    double slice_gain = 0.02;        // per-slice multiplicative wobble
    double contrast_base = 0.3;
    double contrast_step = 0.06;
    int max_retries = 100;           // re-draws allowed per overlapping ellipsoid

    /// Mean intensity offset of class c over the background.
    double contrast(int class_index) const { return contrast_base + contrast_step * class_index; }
};

std::vector<Phantom> generate_phantoms(int count, uint64_t seed, const PhantomConfig& cfg);

/// Clip at the 99.5th percentile (nearest-rank), min-max normalize to [0,1],
/// then center crop/pad slices to target_size x target_size.
Tensor preprocess(const Tensor& volume, int target_size);

struct Dataset {
    std::vector<Phantom> phantoms;
    std::vector<int> class_ids;
};

Dataset make_dataset(int count, uint64_t seed, const PhantomConfig& cfg);

void save_dataset(const Dataset& dataset, const std::string& dir);
Dataset load_dataset(const std::string& dir);

/// Class split plus per-volume slice admission lists for training.
struct SplitPlan {
    int setting = 2;
    int fold = 0;
    std::vector<int> train_classes;
    std::vector<int> test_classes;
    std::vector<std::vector<uint8_t>> admitted;  // [volume][slice], nonzero = usable
};

/// Classes are shuffled by seed once, split into two groups, and the fold
/// picks which group is held out. Setting 2 additionally removes every
/// training slice containing test-class pixels.
SplitPlan make_split(const Dataset& dataset, int setting, int fold, uint64_t seed);

void save_split(const SplitPlan& split, const std::string& path);
SplitPlan load_split(const std::string& path);

/// One entry of the stratified evaluation pass.
struct EvalCase {
    int class_id;
    int support_volume;
    int support_slice;
    int query_volume;
    int query_slice;
};

/// Every (test class, query volume, query slice containing the class), with
/// the support taken from the next volume containing the class in cyclic id
/// order and the middle slice of its span.
std::vector<EvalCase> enumerate_eval_cases(const Dataset& dataset, const SplitPlan& split);

Episode materialize_episode(const Dataset& dataset, const EvalCase& c);

/// Uniformly random evaluation episode; support and query volumes differ.
Episode sample_eval_episode(const Dataset& dataset, const SplitPlan& split, std::mt19937_64& rng);

}  // namespace qseg
