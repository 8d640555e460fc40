#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "planseg/errors.hpp"
#include "planseg/inference.hpp"
#include "support/inference_oracles.hpp"

using namespace planseg;

namespace {

PatchPredictor constant_predictor(float l0, float l1, int* calls = nullptr) {
  return [=](const Tensor<float>& x) {
    if (calls) ++*calls;
    Tensor<float> y(x.n, 2, x.ext);
    std::fill_n(y.channel(0, 0), y.spatial(), l0);
    std::fill_n(y.channel(0, 1), y.spatial(), l1);
    return y;
  };
}

ProbabilityMap random_map(const Triple& shape, int classes, std::mt19937_64& rng) {
  ProbabilityMap m{classes, shape, std::vector<float>(static_cast<std::size_t>(classes * voxel_count(shape)))};
  std::uniform_real_distribution<float> u(0.01f, 1.0f);
  for (std::int64_t v = 0; v < m.voxels(); ++v) {
    float s = 0.0f;
    for (int c = 0; c < classes; ++c) s += m.channel(c)[v] = u(rng);
    for (int c = 0; c < classes; ++c) m.channel(c)[v] /= s;
  }
  return m;
}

}  // namespace

TEST_SUITE("inference") {
  TEST_CASE("worked tiling examples") {
    CHECK(axis_positions(256, 128, 0.5) == std::vector<int>{0, 64, 128});
    CHECK(axis_positions(200, 128, 0.5) == std::vector<int>{0, 36, 72});
    for (double f : {0.1, 0.5, 0.6, 1.0}) CHECK(axis_positions(128, 128, f) == std::vector<int>{0});
    const auto plan = compute_tiling({256, 200, 128}, {128, 128, 128}, 0.5);
    CHECK(plan.positions.size() == 9);
    CHECK(plan.positions.front() == Triple{0, 0, 0});
    CHECK(plan.positions.back() == Triple{128, 72, 0});
    CHECK(oracles::check_tiling({256, 200, 128}, {128, 128, 128}, 0.5).empty());
  }

  TEST_CASE("step 0.6 needs fewer tiles on a large volume") {
    CHECK(compute_tiling({400, 400, 400}, {128, 128, 128}, 0.6).positions.size() <
          compute_tiling({400, 400, 400}, {128, 128, 128}, 0.5).positions.size());
  }

  TEST_CASE("small images are padded to the patch") {
    const auto plan = compute_tiling({5, 40, 8}, {8, 16, 8}, 0.5);
    CHECK(plan.image_shape == Triple{8, 40, 8});
    CHECK(plan.axis_positions[0] == std::vector<int>{0});
  }

  TEST_CASE("fraction out of range") {
    CHECK_THROWS_AS(compute_tiling({64, 64, 64}, {32, 32, 32}, 0.0), ParameterError);
    CHECK_THROWS_AS(compute_tiling({64, 64, 64}, {32, 32, 32}, 1.01), ParameterError);
    CHECK_THROWS_AS(compute_tiling({64, 64, 64}, {32, 32, 32}, NAN), ParameterError);
  }

  TEST_CASE("random tilings match the enumeration and cover the volume") {
    const auto outcome = oracles::check_random_tilings(500, 17);
    INFO(outcome.first_failure);
    CHECK(outcome.failures == 0);
  }

  TEST_CASE("gaussian map: peak, symmetry, no zeros and the centre/corner ratio") {
    const Triple p{32, 32, 32};
    const auto g = gaussian_importance_map(p);
    CHECK(*std::max_element(g.begin(), g.end()) == 1.0f);
    CHECK(g[linear_index(p, 15, 16, 15)] == 1.0f);
    CHECK(*std::min_element(g.begin(), g.end()) > 0.0f);
    for (unsigned m = 1; m < 8; ++m) {
      auto f = g;
      flip_blocks(std::span<float>(f), p, m);
      CHECK(f == g);
    }
    // Centre voxels sit 0.5 from the Gaussian centre and corners 15.5, with sigma 4 on every axis.
    const double expected = std::exp(-3.0 * (15.5 * 15.5 - 0.5 * 0.5) / (2.0 * 16.0));
    CHECK(g[0] / g[linear_index(p, 16, 16, 16)] == doctest::Approx(expected).epsilon(1e-5));

    const auto odd = gaussian_importance_map({9, 5, 7});
    CHECK(odd[linear_index({9, 5, 7}, 4, 2, 3)] == 1.0f);
  }

  TEST_CASE("zero values are clamped to the smallest positive weight") {
    const auto g = gaussian_importance_map({200, 8, 8});
    const float smallest = *std::min_element(g.begin(), g.end());
    CHECK(smallest > 0.0f);
    CHECK(g[0] == smallest);
  }

  TEST_CASE("mirror axes 1 and 2 cost four forward passes per tile") {
    std::mt19937_64 rng(1);
    const auto vol = oracles::random_volume({20, 20, 20}, rng);
    int calls = 0;
    InferenceStats stats;
    predict_volume(constant_predictor(0, 1, &calls), vol, {{8, 8, 8}, 0.5, {1, 2}, 2, 1}, &stats);
    CHECK(stats.tiles == 64);
    CHECK(stats.forward_passes == 4 * stats.tiles);
    CHECK(calls == stats.forward_passes);
    stats = {};  // counters accumulate across calls
    predict_volume(constant_predictor(0, 1), vol, {{8, 8, 8}, 0.5, {0, 1, 2}, 2, 1}, &stats);
    CHECK(stats.forward_passes == 8 * stats.tiles);
  }

  TEST_CASE("invariants over random shapes") {
    const auto r = oracles::check_inference_invariants(12, 5);
    CHECK(r.trials == 12);
    CHECK(r.tta_deviation <= 1e-5);
    CHECK(r.ensemble_idempotent);
    CHECK(r.constant_deviation <= 1e-6);
    CHECK(r.normalization_deviation <= 1e-4);
  }

  TEST_CASE("worker count does not change the result") {
    std::mt19937_64 rng(2);
    const auto vol = oracles::random_volume({19, 14, 11}, rng);
    nn::UNet<float> net(plan_topology({8, 8, 8}, {1, 1, 1}, EncoderType::Residual, 2, 2), 4);
    const auto one = predict_volume(net, vol, {{8, 8, 8}, 0.5, {0}, 2, 1});
    const auto three = predict_volume(net, vol, {{8, 8, 8}, 0.5, {0}, 2, 3});
    CHECK(one == three);
    CHECK(one.shape == vol.shape);
  }

  TEST_CASE("non-finite output names the tile") {
    std::mt19937_64 rng(3);
    const auto vol = oracles::random_volume({16, 8, 8}, rng);
    int calls = 0;
    const PatchPredictor broken = [&](const Tensor<float>& x) {
      Tensor<float> y(x.n, 2, x.ext);
      if (++calls == 2) y.data[5] = NAN;
      return y;
    };
    try {
      predict_volume(broken, vol, {{8, 8, 8}, 0.5, {}, 2, 1});
      FAIL("expected an inference error");
    } catch (const InferenceError& e) {
      CHECK(std::string(e.what()).find("tile 1") != std::string::npos);
    }
  }

  TEST_CASE("ensemble: idempotence, complement symmetry, mean oracle and errors") {
    std::mt19937_64 rng(4);
    const Triple shape{5, 4, 3};
    const auto p = random_map(shape, 2, rng);
    const std::vector<ProbabilityMap> copies(4, p);
    CHECK(ensemble(copies) == p);

    ProbabilityMap q = p;
    for (std::int64_t v = 0; v < p.voxels(); ++v) std::swap(q.channel(0)[v], q.channel(1)[v]);
    const std::vector<ProbabilityMap> pair{p, q};
    for (float x : ensemble(pair).data) CHECK(x == doctest::Approx(0.5f).epsilon(1e-6));

    std::vector<ProbabilityMap> ten;
    for (int i = 0; i < 10; ++i) ten.push_back(random_map(shape, 2, rng));
    const auto mean = ensemble(ten);
    for (std::size_t i = 0; i < mean.data.size(); ++i) {
      double s = 0.0;
      for (const auto& m : ten) s += m.data[i];
      CHECK(mean.data[i] == doctest::Approx(s / 10.0).epsilon(1e-6));
    }
    CHECK(oracles::max_normalization_error(mean) <= 1e-4);

    CHECK_THROWS_AS(ensemble(std::span<const ProbabilityMap>()), ParameterError);
    const std::vector<ProbabilityMap> bad{p, random_map({5, 4, 4}, 2, rng)};
    CHECK_THROWS_AS(ensemble(bad), ShapeError);
  }

  TEST_CASE("segment is an argmax with ties to the lower class") {
    std::mt19937_64 rng(5);
    ProbabilityMap uniform{2, {3, 3, 3}, std::vector<float>(54, 0.5f)};
    for (auto l : segment(uniform)) CHECK(l == 0);
    const auto m = random_map({6, 5, 4}, 3, rng);
    const auto labels = segment(m);
    for (std::int64_t v = 0; v < m.voxels(); ++v) {
      int best = 0;
      for (int c = 1; c < 3; ++c)
        if (m.channel(c)[v] > m.channel(best)[v]) best = c;
      CHECK(labels[v] == best);
    }
    ProbabilityMap onehot{2, {2, 2, 2}, std::vector<float>(16, 0.0f)};
    for (int v = 0; v < 8; ++v) onehot.channel(v % 2)[v] = 1.0f;
    const auto l = segment(onehot);
    for (int v = 0; v < 8; ++v) CHECK(l[v] == v % 2);
  }

  TEST_CASE("case prediction round-trip") {
    std::mt19937_64 rng(6);
    auto vol = oracles::random_volume({6, 5, 4}, rng);
    vol.case_id = "case_0001";
    vol.spacing = {2, 2, 3};
    const auto map = random_map(vol.shape, 2, rng);
    const auto labels = segment(map);
    const auto dir = std::filesystem::temp_directory_path() / "planseg_test_prediction";
    std::filesystem::remove_all(dir);
    write_case_prediction(dir, vol, map, labels);
    CHECK(read_case_probabilities(dir) == map);
    const auto back = read_case_prediction(dir);
    CHECK(back.case_id == "case_0001");
    CHECK(back.spacing == vol.spacing);
    CHECK(*back.segmentation == labels);
    std::filesystem::remove_all(dir);
  }
}
