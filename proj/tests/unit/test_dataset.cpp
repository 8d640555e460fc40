#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "planseg/dataset.hpp"
#include "planseg/errors.hpp"
#include "planseg/tensor.hpp"

using namespace planseg;

namespace {

Volume blank(const std::string& id, const std::string& patient, const Triple& shape) {
  Volume v;
  v.case_id = id;
  v.patient_id = patient;
  v.shape = shape;
  v.channels.assign(2, std::vector<float>(static_cast<std::size_t>(voxel_count(shape)), 0.0f));
  v.segmentation = std::vector<std::uint8_t>(static_cast<std::size_t>(voxel_count(shape)), 0);
  return v;
}

std::vector<Volume> patients(int num_patients, const std::vector<int>& cases_per_patient = {}) {
  std::vector<Volume> out;
  for (int p = 0; p < num_patients; ++p) {
    const int cases = cases_per_patient.empty() ? 1 : cases_per_patient[p];
    for (int c = 0; c < cases; ++c)
      out.push_back(blank("p" + std::to_string(p) + "_c" + std::to_string(c), "p" + std::to_string(p), {1, 1, 1}));
  }
  return out;
}

// Sort-based percentile with linear interpolation between closest ranks.
double oracle_percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("planseg_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_SUITE("dataset") {
  TEST_CASE("synthetic dataset: identities, shapes and determinism") {
    SyntheticDatasetSpec spec;
    spec.shape = {32, 32, 32};
    spec.seed = 5;
    const auto a = generate_synthetic_dataset(spec);
    CHECK(a.size() == 10);
    std::set<std::string> ids;
    std::map<std::string, int> per_patient;
    for (const auto& v : a) {
      ids.insert(v.case_id);
      ++per_patient[v.patient_id];
      CHECK_NOTHROW(check_volume(v));
      CHECK(v.num_channels() == 2);
    }
    CHECK(ids.size() == 10);
    CHECK(per_patient.size() == 8);
    CHECK(std::any_of(per_patient.begin(), per_patient.end(), [](const auto& kv) { return kv.second >= 2; }));
    CHECK(generate_synthetic_dataset(spec) == a);
    spec.seed = 6;
    CHECK_FALSE(generate_synthetic_dataset(spec) == a);
  }

  TEST_CASE("synthetic intensities follow the channel ranges") {
    SyntheticDatasetSpec spec;
    spec.shape = {32, 32, 32};
    spec.num_patients = 6;
    spec.total_cases = 6;
    spec.empty_probability = 0.0;
    spec.seed = 3;
    for (const auto& v : generate_synthetic_dataset(spec)) {
      const auto [lo, hi] = std::minmax_element(v.channels[0].begin(), v.channels[0].end());
      CHECK(*lo >= -100.0f);
      CHECK(*hi <= 200.0f);
      REQUIRE(v.has_foreground());
      double lesion = 0.0, background = 0.0;
      std::int64_t nl = 0, nb = 0;
      for (std::int64_t i = 0; i < v.voxels(); ++i) {
        if ((*v.segmentation)[i]) {
          lesion += v.channels[1][i];
          ++nl;
        } else {
          background += v.channels[1][i];
          ++nb;
        }
      }
      CHECK(lesion / nl > 3.0);
      CHECK(background / nb < 2.0);
    }
  }

  TEST_CASE("empty lesion range gives empty masks; shapes below 32 are rejected") {
    SyntheticDatasetSpec spec;
    spec.shape = {32, 32, 32};
    spec.min_lesions = spec.max_lesions = 0;
    for (const auto& v : generate_synthetic_dataset(spec)) CHECK_FALSE(v.has_foreground());
    spec.shape = {31, 32, 32};
    CHECK_THROWS_AS(generate_synthetic_dataset(spec), ParameterError);
    spec.shape = {32, 32, 32};
    spec.min_lesions = 3;
    spec.max_lesions = 2;
    CHECK_THROWS_AS(generate_synthetic_dataset(spec), ParameterError);
  }

  TEST_CASE("percentiles of 1..1000 match the sort oracle") {
    std::vector<double> v(1000);
    for (int i = 0; i < 1000; ++i) v[i] = i + 1;
    std::vector<double> shuffled = v;
    std::shuffle(shuffled.begin(), shuffled.end(), std::mt19937_64(1));
    const auto s = channel_stats(shuffled);
    CHECK(s.clip_lower == doctest::Approx(5.995).epsilon(1e-12));
    CHECK(s.clip_upper == doctest::Approx(995.005).epsilon(1e-12));
    CHECK(s.clip_lower == oracle_percentile(v, 0.5));
    CHECK(s.clip_upper == oracle_percentile(v, 99.5));
    std::mt19937_64 rng(2);
    std::normal_distribution<double> d(0, 10);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> r(1 + trial * 7);
      for (auto& x : r) x = d(rng);
      auto sorted = r;
      std::sort(sorted.begin(), sorted.end());
      for (double q : {0.0, 0.5, 25.0, 50.0, 99.5, 100.0})
        CHECK(percentile_sorted(sorted, q) == doctest::Approx(oracle_percentile(r, q)).epsilon(1e-14));
    }
  }

  TEST_CASE("constant foreground gives degenerate bounds and the epsilon std") {
    auto v = blank("a", "p", {4, 4, 4});
    for (auto& x : v.channels[0]) x = 7.0f;
    (*v.segmentation)[5] = (*v.segmentation)[9] = 1;
    v.channels[0][0] = -1000.0f;  // background, ignored
    const auto stats = compute_normalization_stats(std::span<const Volume>(&v, 1));
    CHECK(stats.channels[0].clip_lower == 7.0);
    CHECK(stats.channels[0].clip_upper == 7.0);
    CHECK(stats.channels[0].mean == 7.0);
    CHECK(stats.channels[0].std == kStdEpsilon);
  }

  TEST_CASE("stats need foreground and ignore validation volumes") {
    std::vector<Volume> none{blank("a", "p", {4, 4, 4})};
    CHECK_THROWS_AS(compute_normalization_stats(none), StatsError);
    CHECK_NOTHROW(compute_whole_volume_stats(none));

    SyntheticDatasetSpec spec;
    spec.shape = {32, 32, 32};
    spec.empty_probability = 0.0;
    spec.seed = 1;
    const auto all = generate_synthetic_dataset(spec);
    const auto folds = assign_folds(all, 2, 0);
    std::vector<Volume> train;
    for (const auto& v : all)
      if (folds.fold_of_case.at(v.case_id) == 0) train.push_back(v);
    const auto a = compute_normalization_stats(train);
    // Validation cases are simply not part of the input; changing them changes nothing.
    auto perturbed = all;
    for (auto& v : perturbed)
      if (folds.fold_of_case.at(v.case_id) == 1)
        for (auto& x : v.channels[1]) x += 100.0f;
    std::vector<Volume> train2;
    for (const auto& v : perturbed)
      if (folds.fold_of_case.at(v.case_id) == 0) train2.push_back(v);
    CHECK(compute_normalization_stats(train2) == a);
  }

  TEST_CASE("normalize clips then standardizes, elementwise") {
    NormalizationStats stats{{{-1.0, 5.0, 2.0, 0.5}, {0.0, 10.0, 1.0, 4.0}}};
    auto v = blank("a", "p", {5, 4, 3});
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<float> u(-20, 20);
    for (auto& ch : v.channels)
      for (auto& x : ch) x = u(rng);
    v.channels[0][0] = 2.0f;   // the mean
    v.channels[0][1] = 50.0f;  // above the upper bound
    const auto n = normalize(v, stats);
    CHECK(n.channels[0][0] == 0.0f);
    CHECK(n.channels[0][1] == doctest::Approx((5.0 - 2.0) / 0.5));
    for (int c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < v.channels[c].size(); ++i) {
        const auto& s = stats.channels[c];
        const double expected = (std::clamp<double>(v.channels[c][i], s.clip_lower, s.clip_upper) - s.mean) / s.std;
        CHECK(n.channels[c][i] == doctest::Approx(expected).epsilon(1e-6));
      }
    // Affine within the bounds: three in-range values stay collinear.
    const double a = -0.5, b = 1.0, c = 4.0;
    auto f = [&](double x) { return (x - stats.channels[0].mean) / stats.channels[0].std; };
    CHECK((f(b) - f(a)) * (c - a) == doctest::Approx((f(c) - f(a)) * (b - a)));
    CHECK(stats_from_json(to_json(stats)) == stats);
  }

  TEST_CASE("fold assignment") {
    SUBCASE("10 patients in 5 folds") {
      const auto f = assign_folds(patients(10), 5, 3);
      for (int k = 0; k < 5; ++k) CHECK(f.cases_in_fold(k).size() == 2);
    }
    SUBCASE("a patient's cases share a fold") {
      const auto vols = patients(7, {3, 1, 1, 2, 1, 1, 1});
      const auto f = assign_folds(vols, 5, 11);
      for (const auto& v : vols) CHECK(f.fold_of_case.at(v.case_id) == f.fold_of_case.at(v.patient_id + "_c0"));
      CHECK(f.fold_of_case.size() == vols.size());
    }
    SUBCASE("900 patients and 1014 cases give 180 patients per fold") {
      std::vector<int> cases(900, 1);
      for (int i = 0; i < 114; ++i) cases[(i * 7) % 900] += 1;
      const auto vols = patients(900, cases);
      REQUIRE(vols.size() == 1014);
      const auto f = assign_folds(vols, 5, 0);
      std::vector<std::set<std::string>> pats(5);
      for (const auto& v : vols) pats[f.fold_of_case.at(v.case_id)].insert(v.patient_id);
      for (const auto& p : pats) CHECK(p.size() == 180);
    }
    SUBCASE("uneven patient counts differ by at most one") {
      const auto vols = patients(13);
      const auto f = assign_folds(vols, 5, 2);
      std::vector<int> sizes;
      for (int k = 0; k < 5; ++k) sizes.push_back(static_cast<int>(f.cases_in_fold(k).size()));
      CHECK(*std::max_element(sizes.begin(), sizes.end()) - *std::min_element(sizes.begin(), sizes.end()) <= 1);
    }
    SUBCASE("deterministic, and errors") {
      CHECK(assign_folds(patients(10), 5, 3) == assign_folds(patients(10), 5, 3));
      CHECK_THROWS_AS(assign_folds(patients(4), 5, 0), AssignmentError);
      CHECK_THROWS_AS(assign_folds(patients(4), 1, 0), AssignmentError);
    }
  }

  TEST_CASE("forced patches contain a single foreground voxel") {
    auto v = blank("a", "p", {20, 20, 20});
    const auto at = linear_index(v.shape, 17, 2, 11);
    (*v.segmentation)[at] = 1;
    v.channels[1][at] = 42.0f;
    std::mt19937_64 rng(1);
    for (int t = 0; t < 200; ++t) {
      const auto s = sample_patch(v, {8, 8, 8}, true, rng);
      CHECK(std::count(s.label.begin(), s.label.end(), 1) == 1);
      CHECK(std::count(s.image.begin(), s.image.end(), 42.0f) == 1);
    }
  }

  TEST_CASE("forcing without foreground falls back to uniform corners") {
    const auto v = blank("a", "p", {12, 12, 12});
    std::mt19937_64 rng(2);
    std::set<Triple> corners;
    for (int t = 0; t < 300; ++t) corners.insert(sample_patch(v, {8, 8, 8}, true, rng).corner);
    CHECK(corners.size() > 50);
    for (const auto& c : corners)
      for (int a = 0; a < 3; ++a) CHECK((c[a] >= 0 && c[a] <= 4));
  }

  TEST_CASE("uniform corners: each axis marginal within 5 sigma") {
    auto v = blank("a", "p", {64, 64, 64});
    std::mt19937_64 rng(3);
    constexpr int kSamples = 10000, kPositions = 33;
    std::vector<std::array<int, kPositions>> counts(3);
    for (auto& c : counts) c.fill(0);
    for (int t = 0; t < kSamples; ++t) {
      const auto s = sample_patch(v, {32, 32, 32}, false, rng);
      for (int a = 0; a < 3; ++a) {
        REQUIRE(s.corner[a] >= 0);
        REQUIRE(s.corner[a] < kPositions);
        ++counts[a][s.corner[a]];
      }
    }
    const double p = 1.0 / kPositions;
    const double mean = kSamples * p, sigma = std::sqrt(kSamples * p * (1 - p));
    for (int a = 0; a < 3; ++a)
      for (int k = 0; k < kPositions; ++k) CHECK(std::abs(counts[a][k] - mean) <= 5 * sigma);
  }

  TEST_CASE("small volumes are zero padded symmetrically") {
    auto v = blank("a", "p", {5, 8, 8});
    for (auto& x : v.channels[0]) x = 1.0f;
    CHECK(padded_shape(v.shape, {8, 8, 8}) == Triple{8, 8, 8});
    CHECK(padding_before(v.shape, {8, 8, 8}) == Triple{1, 0, 0});
    std::mt19937_64 rng(1);
    const auto s = sample_patch(v, {8, 8, 8}, false, rng);
    CHECK(s.corner == Triple{0, 0, 0});
    CHECK(s.image[0] == 0.0f);
    CHECK(s.image[1] == 1.0f);
    CHECK(s.image[5] == 1.0f);
    CHECK(s.image[6] == 0.0f);
    CHECK(s.image[7] == 0.0f);
  }

  TEST_CASE("sampling is deterministic under a fixed state") {
    SyntheticDatasetSpec spec;
    spec.shape = {32, 32, 32};
    const auto v = generate_synthetic_dataset(spec).front();
    std::mt19937_64 a(9), b(9);
    for (int t = 0; t < 20; ++t) {
      const auto x = sample_patch(v, {16, 16, 16}, t % 2 == 0, a);
      const auto y = sample_patch(v, {16, 16, 16}, t % 2 == 0, b);
      CHECK(x.corner == y.corner);
      CHECK(x.image == y.image);
    }
  }

  TEST_CASE("MVOL round-trip") {
    SyntheticDatasetSpec spec;
    spec.shape = {32, 32, 32};
    spec.num_patients = 3;
    spec.total_cases = 4;
    const auto vols = generate_synthetic_dataset(spec);
    const auto root = scratch_dir("mvol");
    write_dataset(root, vols);
    CHECK(std::filesystem::exists(root / "dataset.json"));
    const auto& first = vols.front();
    CHECK(std::filesystem::file_size(root / first.case_id / "channel_0.raw") == 4u * 32 * 32 * 32);
    CHECK(std::filesystem::file_size(root / first.case_id / "segmentation.raw") == 32u * 32 * 32);
    CHECK(read_dataset(root) == vols);

    auto unlabeled = vols.front();
    unlabeled.segmentation.reset();
    write_volume(root / "unlabeled", unlabeled);
    CHECK(read_volume(root / "unlabeled") == unlabeled);

    std::filesystem::resize_file(root / first.case_id / "channel_1.raw", 100);
    CHECK_THROWS_AS(read_volume(root / first.case_id), IoError);
    std::filesystem::remove_all(root);
  }
}
