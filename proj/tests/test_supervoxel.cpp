#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <map>
#include <random>
#include <set>

#include "qseg/error.hpp"
#include "qseg/supervoxel.hpp"
#include "testutil.hpp"

using namespace qseg;
using namespace qseg::testutil;

namespace {

Tensor noisy_volume(int d, int h, int w, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 0.02);
    Tensor v({d, h, w});
    for (size_t i = 0; i < v.size(); ++i) v[i] = 0.5 + noise(rng);
    return v;
}

std::map<int32_t, size_t> label_sizes(const SupervoxelLabels& labels) {
    std::map<int32_t, size_t> sizes;
    for (int32_t l : labels.labels) sizes[l] += 1;
    return sizes;
}

}  // namespace

TEST_CASE("labels form a total partition with compact ids") {
    Tensor v = noisy_volume(12, 24, 24, 3);
    SupervoxelConfig cfg{8, 0.1, 50, 7};
    SupervoxelLabels labels = cluster_supervoxels(v, cfg);

    REQUIRE(labels.labels.size() == v.size());
    auto sizes = label_sizes(labels);
    CHECK(static_cast<int>(sizes.size()) == labels.count);
    for (const auto& [l, size] : sizes) {
        CHECK(l >= 0);
        CHECK(l < labels.count);
        CHECK(size >= static_cast<size_t>(cfg.min_size));
    }
    // homogeneous volume: roughly the requested number of roughly equal blocks
    CHECK(labels.count >= cfg.target_count / 2);
    CHECK(labels.count <= cfg.target_count * 2);
    const size_t avg = v.size() / static_cast<size_t>(labels.count);
    for (const auto& [l, size] : sizes) {
        CHECK(size < avg * 6);
    }
}

TEST_CASE("clustering is deterministic for a fixed seed") {
    Tensor v = noisy_volume(10, 20, 20, 11);
    SupervoxelConfig cfg{6, 0.1, 40, 5};
    SupervoxelLabels a = cluster_supervoxels(v, cfg);
    SupervoxelLabels b = cluster_supervoxels(v, cfg);
    CHECK(a.count == b.count);
    CHECK(std::memcmp(a.labels.data(), b.labels.data(), a.labels.size() * sizeof(int32_t)) == 0);
}

TEST_CASE("intensity-weighted clustering respects a two-intensity split") {
    const int d = 16, h = 24, w = 24;
    std::mt19937_64 rng(17);
    std::normal_distribution<double> noise(0.0, 0.01);
    Tensor v({d, h, w});
    for (int z = 0; z < d; ++z)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) v(z, y, x) = (y < h / 2 ? 0.0 : 1.0) + noise(rng);

    SupervoxelConfig cfg{12, 0.05, 40, 23};
    SupervoxelLabels labels = cluster_supervoxels(v, cfg);

    // purity: fraction of each supervoxel on its majority side
    std::map<int32_t, std::pair<size_t, size_t>> split;  // label -> (low, high)
    for (int z = 0; z < d; ++z)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                auto& [lo_n, hi_n] = split[labels.at(z, y, x)];
                (y < h / 2 ? lo_n : hi_n) += 1;
            }
    int pure = 0;
    for (const auto& [l, counts] : split) {
        const double total = static_cast<double>(counts.first + counts.second);
        const double majority = static_cast<double>(std::max(counts.first, counts.second));
        if (majority / total >= 0.95) ++pure;
    }
    CHECK(static_cast<double>(pure) / static_cast<double>(split.size()) >= 0.95);
}

TEST_CASE("an oversized cluster request is rejected") {
    Tensor v({2, 2, 2});
    SupervoxelConfig cfg{100, 0.1, 1, 0};
    CHECK_THROWS_AS(cluster_supervoxels(v, cfg), Error);
}

TEST_CASE("label volumes survive a cache round trip") {
    Tensor v = noisy_volume(8, 16, 16, 29);
    SupervoxelConfig cfg{5, 0.1, 30, 2};
    SupervoxelLabels labels = cluster_supervoxels(v, cfg);

    const auto dir = std::filesystem::temp_directory_path() / "qseg_sv_test";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / supervoxel_cache_name(0, cfg)).string();
    save_labels(labels, path);
    SupervoxelLabels back = load_labels(path);
    CHECK(back.count == labels.count);
    CHECK(std::memcmp(back.labels.data(), labels.labels.data(),
                      labels.labels.size() * sizeof(int32_t)) == 0);
}

TEST_CASE("pseudo episodes use adjacent slices of one supervoxel") {
    Tensor v = noisy_volume(12, 24, 24, 31);
    SupervoxelConfig cfg{8, 0.1, 50, 13};
    SupervoxelLabels labels = cluster_supervoxels(v, cfg);
    std::mt19937_64 rng(101);

    for (int trial = 0; trial < 50; ++trial) {
        Episode ep = sample_pseudo_episode(v, labels, rng);
        CHECK(std::abs(ep.query_slice - ep.support_slice) == 1);
        double s_fg = 0.0, q_fg = 0.0;
        for (size_t i = 0; i < ep.support_mask.size(); ++i) s_fg += ep.support_mask[i];
        for (size_t i = 0; i < ep.query_mask->size(); ++i) q_fg += (*ep.query_mask)[i];
        CHECK(s_fg > 0.0);
        CHECK(q_fg > 0.0);
        // the support mask is exactly the footprint of the chosen supervoxel
        for (int y = 0; y < 24; ++y)
            for (int x = 0; x < 24; ++x) {
                const double want =
                    labels.at(ep.support_slice, y, x) == ep.class_id ? 1.0 : 0.0;
                REQUIRE(ep.support_mask(y, x) == want);
            }
    }
}

TEST_CASE("sampling covers every eligible supervoxel") {
    Tensor v = noisy_volume(12, 24, 24, 37);
    SupervoxelConfig cfg{8, 0.1, 50, 19};
    SupervoxelLabels labels = cluster_supervoxels(v, cfg);
    const std::vector<int> eligible = eligible_supervoxels(labels);
    REQUIRE(!eligible.empty());

    std::mt19937_64 rng(7);
    std::set<int> seen;
    for (int trial = 0; trial < 1000; ++trial) {
        seen.insert(sample_pseudo_episode(v, labels, rng).class_id);
    }
    for (int l : eligible) CHECK(seen.count(l) == 1);
    CHECK(seen.size() == eligible.size());
}

TEST_CASE("admission lists restrict episode slices") {
    Tensor v = noisy_volume(12, 24, 24, 41);
    SupervoxelConfig cfg{8, 0.1, 50, 19};
    SupervoxelLabels labels = cluster_supervoxels(v, cfg);

    std::vector<uint8_t> admitted(12, 0);
    admitted[2] = admitted[3] = admitted[4] = 1;
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 30; ++trial) {
        Episode ep = sample_pseudo_episode(v, labels, rng, &admitted);
        CHECK(ep.support_slice >= 2);
        CHECK(ep.support_slice <= 4);
        CHECK(ep.query_slice >= 2);
        CHECK(ep.query_slice <= 4);
    }

    // admitting only isolated slices leaves no adjacent pair
    std::vector<uint8_t> isolated(12, 0);
    isolated[1] = isolated[5] = isolated[9] = 1;
    CHECK_THROWS_WITH_AS(sample_pseudo_episode(v, labels, rng, &isolated),
                         doctest::Contains("no supervoxel"), Error);
}
