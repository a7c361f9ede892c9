#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <random>
#include <set>

#include "qseg/error.hpp"
#include "qseg/phantom.hpp"
#include "testutil.hpp"

using namespace qseg;

namespace {

PhantomConfig small_cfg() {
    PhantomConfig cfg;
    cfg.classes = 4;
    cfg.depth = 24;
    cfg.size = 32;
    return cfg;
}

double masked_mean(const Tensor& volume, const Tensor& mask, bool inside) {
    double acc = 0.0;
    size_t n = 0;
    for (size_t i = 0; i < volume.size(); ++i) {
        if ((mask[i] != 0.0) == inside) {
            acc += volume[i];
            ++n;
        }
    }
    return acc / static_cast<double>(n);
}

}  // namespace

TEST_CASE("phantom generation is deterministic and masks are disjoint") {
    const PhantomConfig cfg = small_cfg();
    auto a = generate_phantoms(3, 42, cfg);
    auto b = generate_phantoms(3, 42, cfg);
    REQUIRE(a.size() == 3);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(std::memcmp(a[i].volume.data(), b[i].volume.data(),
                          a[i].volume.size() * sizeof(double)) == 0);
    }
    for (const Phantom& p : a) {
        REQUIRE(p.masks.size() == 4);
        for (size_t i = 0; i < p.volume.size(); ++i) {
            int hits = 0;
            for (const Tensor& m : p.masks) hits += m[i] != 0.0 ? 1 : 0;
            REQUIRE(hits <= 1);
        }
        for (const Tensor& m : p.masks) {
            double fg = 0.0;
            for (size_t i = 0; i < m.size(); ++i) fg += m[i];
            CHECK(fg > 0.0);
        }
    }
}

TEST_CASE("class contrast survives noise, bias field and jitter") {
    const PhantomConfig cfg = small_cfg();
    auto phantoms = generate_phantoms(100, 7, cfg);

    // union of all organ masks defines the background complement
    for (int c = 0; c < cfg.classes; ++c) {
        double delta = 0.0;
        for (const Phantom& p : phantoms) {
            Tensor organ_union(p.volume.shape());
            for (const Tensor& m : p.masks)
                for (size_t i = 0; i < m.size(); ++i) organ_union[i] += m[i];
            delta += masked_mean(p.volume, p.masks[static_cast<size_t>(c)], true) -
                     masked_mean(p.volume, organ_union, false);
        }
        delta /= static_cast<double>(phantoms.size());
        CHECK(std::abs(delta - cfg.contrast(c)) < 3.0 * cfg.noise_sigma);
    }
}

TEST_CASE("preprocess clips the bright end and normalizes") {
    std::mt19937_64 rng(5);
    Tensor v({8, 16, 16});
    std::uniform_real_distribution<double> dist(10.0, 20.0);
    for (size_t i = 0; i < v.size(); ++i) v[i] = dist(rng);
    v[100] = 1e6;  // one extreme outlier

    // nearest-rank 99.5th percentile of the raw volume
    std::vector<double> sorted(v.values());
    std::sort(sorted.begin(), sorted.end());
    const double want_cap =
        sorted[static_cast<size_t>(std::ceil(0.995 * static_cast<double>(sorted.size()))) - 1];

    Tensor out = preprocess(v, 16);
    double mx = out[0], mn = out[0];
    size_t argmax = 0;
    for (size_t i = 0; i < out.size(); ++i) {
        if (out[i] > mx) {
            mx = out[i];
            argmax = i;
        }
        mn = std::min(mn, out[i]);
    }
    CHECK(mx == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(mn == doctest::Approx(0.0).epsilon(1e-12));
    // the outlier was clipped to the percentile value, which normalizes to 1
    CHECK(out[100] == doctest::Approx(1.0).epsilon(1e-12));
    // and the percentile value itself maps to the max
    const double norm_cap = (want_cap - sorted[0]) / (want_cap - sorted[0]);
    CHECK(out[argmax] == doctest::Approx(norm_cap).epsilon(1e-12));
}

TEST_CASE("preprocess is idempotent") {
    std::mt19937_64 rng(9);
    Tensor v({6, 24, 24});
    std::uniform_real_distribution<double> dist(-3.0, 11.0);
    for (size_t i = 0; i < v.size(); ++i) v[i] = dist(rng);

    Tensor once = preprocess(v, 16);
    Tensor twice = preprocess(once, 16);
    REQUIRE(once.same_shape(twice));
    for (size_t i = 0; i < once.size(); ++i) {
        CHECK(std::abs(once[i] - twice[i]) < 1e-12);
    }
}

TEST_CASE("preprocess leaves a constant volume constant") {
    Tensor v({4, 8, 8}, 3.5);
    Tensor out = preprocess(v, 8);
    for (size_t i = 0; i < out.size(); ++i) CHECK(out[i] == 0.0);
}

TEST_CASE("preprocess pads and crops to the target square") {
    Tensor v({4, 24, 12}, 1.0);
    v(0, 12, 6) = 2.0;
    Tensor out = preprocess(v, 16);
    CHECK(out.shape() == std::vector<int>{4, 16, 16});
}

TEST_CASE("dataset round trips through the directory format") {
    const PhantomConfig cfg = small_cfg();
    Dataset ds = make_dataset(3, 11, cfg);
    const auto dir = std::filesystem::temp_directory_path() / "qseg_dataset_test";
    std::filesystem::remove_all(dir);
    save_dataset(ds, dir.string());
    Dataset back = load_dataset(dir.string());
    REQUIRE(back.phantoms.size() == ds.phantoms.size());
    CHECK(back.class_ids == ds.class_ids);
    for (size_t i = 0; i < ds.phantoms.size(); ++i) {
        CHECK(std::memcmp(back.phantoms[i].volume.data(), ds.phantoms[i].volume.data(),
                          ds.phantoms[i].volume.size() * sizeof(double)) == 0);
    }
    CHECK_THROWS_WITH_AS(load_dataset((dir / "nope").string()), doctest::Contains("manifest"),
                         Error);
}

TEST_CASE("splits separate classes and honor the fold complement") {
    const PhantomConfig cfg = small_cfg();
    Dataset ds = make_dataset(4, 13, cfg);

    SplitPlan f0 = make_split(ds, 1, 0, 99);
    SplitPlan f1 = make_split(ds, 1, 1, 99);

    std::set<int> test0(f0.test_classes.begin(), f0.test_classes.end());
    std::set<int> test1(f1.test_classes.begin(), f1.test_classes.end());
    for (int c : f0.train_classes) CHECK(test0.count(c) == 0);

    // the two folds cover every class exactly once as a test class
    std::set<int> joint;
    joint.insert(test0.begin(), test0.end());
    joint.insert(test1.begin(), test1.end());
    CHECK(joint.size() == ds.class_ids.size());
    CHECK(test0.size() + test1.size() == ds.class_ids.size());

    // setting 1 admits every slice
    for (const auto& admit : f0.admitted) {
        for (uint8_t a : admit) CHECK(a == 1);
    }
}

TEST_CASE("setting 2 admits no slice containing test classes") {
    const PhantomConfig cfg = small_cfg();
    Dataset ds = make_dataset(4, 17, cfg);
    SplitPlan plan = make_split(ds, 2, 0, 3);

    size_t admitted_total = 0;
    for (size_t v = 0; v < ds.phantoms.size(); ++v) {
        const Phantom& p = ds.phantoms[v];
        for (int z = 0; z < p.volume.extent(0); ++z) {
            if (!plan.admitted[v][static_cast<size_t>(z)]) continue;
            ++admitted_total;
            for (int c : plan.test_classes) {
                const Tensor& m = p.masks[static_cast<size_t>(c)];
                for (int y = 0; y < m.extent(1); ++y)
                    for (int x = 0; x < m.extent(2); ++x) REQUIRE(m(z, y, x) == 0.0);
            }
        }
    }
    CHECK(admitted_total > 0);
}

TEST_CASE("split plans survive serialization") {
    const PhantomConfig cfg = small_cfg();
    Dataset ds = make_dataset(3, 19, cfg);
    SplitPlan plan = make_split(ds, 2, 1, 5);
    const auto path = std::filesystem::temp_directory_path() / "qseg_split_test.txt";
    save_split(plan, path.string());
    SplitPlan back = load_split(path.string());
    CHECK(back.setting == plan.setting);
    CHECK(back.fold == plan.fold);
    CHECK(back.train_classes == plan.train_classes);
    CHECK(back.test_classes == plan.test_classes);
    REQUIRE(back.admitted.size() == plan.admitted.size());
    for (size_t v = 0; v < plan.admitted.size(); ++v) CHECK(back.admitted[v] == plan.admitted[v]);
}

TEST_CASE("evaluation cases cover every class and volume pair") {
    const PhantomConfig cfg = small_cfg();
    Dataset ds = make_dataset(4, 23, cfg);
    SplitPlan plan = make_split(ds, 1, 0, 7);

    auto cases = enumerate_eval_cases(ds, plan);
    REQUIRE(!cases.empty());
    std::set<std::pair<int, int>> seen;
    for (const EvalCase& c : cases) {
        CHECK(c.support_volume != c.query_volume);
        CHECK(std::find(plan.test_classes.begin(), plan.test_classes.end(), c.class_id) !=
              plan.test_classes.end());
        seen.insert({c.class_id, c.query_volume});
    }
    CHECK(seen.size() == plan.test_classes.size() * ds.phantoms.size());

    // materialized episodes carry nonempty masks on both sides
    Episode ep = materialize_episode(ds, cases.front());
    double s_fg = 0.0, q_fg = 0.0;
    for (size_t i = 0; i < ep.support_mask.size(); ++i) s_fg += ep.support_mask[i];
    for (size_t i = 0; i < ep.query_mask->size(); ++i) q_fg += (*ep.query_mask)[i];
    CHECK(s_fg > 0.0);
    CHECK(q_fg > 0.0);
}

TEST_CASE("random evaluation episodes draw support and query from different volumes") {
    const PhantomConfig cfg = small_cfg();
    Dataset ds = make_dataset(3, 29, cfg);
    SplitPlan plan = make_split(ds, 1, 0, 7);
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 25; ++trial) {
        Episode ep = sample_eval_episode(ds, plan, rng);
        CHECK(ep.support_volume != ep.query_volume);
        CHECK(std::find(plan.test_classes.begin(), plan.test_classes.end(), ep.class_id) !=
              plan.test_classes.end());
        REQUIRE(ep.query_mask.has_value());
    }
}
