#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "planseg/errors.hpp"
#include "planseg/metrics.hpp"
#include "support/metrics_oracles.hpp"

using namespace planseg;

namespace {

CaseMetrics with_dice(const std::string& id, std::optional<double> d, bool gt_empty = false, bool pred_empty = false) {
  CaseMetrics m;
  m.case_id = id;
  m.dice = d;
  m.gt_empty = gt_empty;
  m.pred_empty = pred_empty;
  return m;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("dice basics") {
    const std::vector<std::uint8_t> a{1, 1, 0, 0}, b{1, 0, 1, 0}, none{0, 0, 0, 0};
    CHECK(dice(a, a) == 1.0);
    CHECK(dice(a, b) == 0.5);
    CHECK_FALSE(dice(none, none).has_value());
    CHECK(dice(a, none) == 0.0);
    CHECK_THROWS_AS(dice(a, std::vector<std::uint8_t>{1, 0}), ShapeError);
  }

  TEST_CASE("an isolated 8-voxel component at 2 mm spacing is 0.064 ml") {
    const Triple shape{6, 6, 6};
    std::vector<std::uint8_t> pred(216, 0), gt(216, 0);
    for (int z = 0; z < 2; ++z)
      for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x) pred[linear_index(shape, x, y, z)] = 1;
    gt[linear_index(shape, 5, 5, 5)] = 1;
    const auto v = fp_fn_volumes(pred, gt, shape, {2, 2, 2});
    CHECK(v.fp_ml == doctest::Approx(0.064).epsilon(1e-12));
    CHECK(v.fp_ml == static_cast<double>(oracles::unmatched_voxels(pred, gt, shape)) * 0.008);
    CHECK(v.fn_ml == doctest::Approx(0.008).epsilon(1e-12));

    // One shared voxel clears the whole component.
    gt[linear_index(shape, 1, 1, 1)] = 1;
    CHECK(fp_fn_volumes(pred, gt, shape, {2, 2, 2}).fp_ml == 0.0);
    CHECK(fp_fn_volumes(pred, pred, shape, {2, 2, 2}).fp_ml == 0.0);
    CHECK(fp_fn_volumes(pred, pred, shape, {2, 2, 2}).fn_ml == 0.0);
  }

  TEST_CASE("diagonal neighbours are one component") {
    const Triple shape{3, 3, 3};
    std::vector<std::uint8_t> m(27, 0);
    m[linear_index(shape, 0, 0, 0)] = 1;
    m[linear_index(shape, 1, 1, 1)] = 1;
    m[linear_index(shape, 2, 2, 2)] = 1;
    m[linear_index(shape, 2, 0, 0)] = 1;
    int n = 0;
    const auto l = label_components(m, shape, &n);
    CHECK(n == 1);
    CHECK(l[linear_index(shape, 2, 0, 0)] == 1);
    m[linear_index(shape, 1, 1, 1)] = 0;
    label_components(m, shape, &n);
    CHECK(n == 3);
  }

  TEST_CASE("random masks agree with flood fill and direct counting") {
    const auto outcome = oracles::check_random_masks(150, 21);
    INFO(outcome.first_failure);
    CHECK(outcome.failures == 0);
  }

  TEST_CASE("the two aggregation conventions") {
    SUBCASE("perfect case plus a correctly empty case") {
      const std::vector<CaseMetrics> cases{with_dice("a", 1.0), with_dice("b", std::nullopt, true, true)};
      const auto r = aggregate(cases);
      CHECK(r.mean_dice_challenge == 0.5);
      CHECK(r.mean_dice_nnunet == 1.0);
    }
    SUBCASE("all cases non-empty: conventions agree") {
      const std::vector<CaseMetrics> cases{with_dice("a", 0.25), with_dice("b", 0.75), with_dice("c", 0.5)};
      const auto r = aggregate(cases);
      CHECK(r.mean_dice_challenge == 0.5);
      CHECK(r.mean_dice_nnunet == r.mean_dice_challenge);
    }
    SUBCASE("single correctly empty case") {
      const std::vector<CaseMetrics> cases{with_dice("a", std::nullopt, true, true)};
      const auto r = aggregate(cases);
      CHECK(r.mean_dice_challenge == 0.0);
      CHECK_FALSE(r.mean_dice_nnunet.has_value());
      CHECK(to_json(r)["mean_dice_nnunet"].is_null());
    }
    SUBCASE("false positives on an empty ground truth score 0 under both") {
      const std::vector<std::uint8_t> pred{1, 0}, gt{0, 0};
      const auto m = evaluate_case("x", pred, gt, {2, 1, 1}, {1, 1, 1});
      CHECK(m.dice == 0.0);
      const std::vector<CaseMetrics> cases{m, with_dice("y", 1.0)};
      const auto r = aggregate(cases);
      CHECK(r.mean_dice_challenge == 0.5);
      CHECK(r.mean_dice_nnunet == 0.5);
    }
    SUBCASE("adding a correctly empty case never raises the challenge mean") {
      std::mt19937_64 rng(1);
      std::uniform_real_distribution<double> u(0, 1);
      for (int t = 0; t < 50; ++t) {
        std::vector<CaseMetrics> cases;
        for (int i = 0; i < 1 + t % 5; ++i) cases.push_back(with_dice("c" + std::to_string(i), u(rng)));
        const auto before = aggregate(cases);
        cases.push_back(with_dice("empty", std::nullopt, true, true));
        const auto after = aggregate(cases);
        CHECK(after.mean_dice_challenge <= before.mean_dice_challenge);
        CHECK(after.mean_dice_nnunet == before.mean_dice_nnunet);
      }
    }
    CHECK_THROWS_AS(aggregate(std::span<const CaseMetrics>()), ParameterError);
  }

  TEST_CASE("report JSON and CSV") {
    std::vector<CaseMetrics> cases{with_dice("a", 0.5), with_dice("b", std::nullopt, true, true)};
    cases[0].fp_volume_ml = 0.25;
    cases[0].fn_volume_ml = 0.125;
    const auto r = aggregate(cases);
    CHECK(r.mean_fp_volume == 0.125);
    CHECK(r.mean_fn_volume == 0.0625);
    const auto back = report_from_json(to_json(r));
    CHECK(back.cases == r.cases);
    CHECK(back.mean_dice_challenge == r.mean_dice_challenge);
    CHECK(back.mean_dice_nnunet == r.mean_dice_nnunet);
    CHECK(back.convention_note == r.convention_note);
    const auto csv = to_csv(r);
    CHECK(csv.find("case_id,dice,fp_volume_ml,fn_volume_ml,gt_empty,pred_empty\n") == 0);
    CHECK(csv.find("\nb,,0,0,1,1\n") != std::string::npos);

    const auto dir = std::filesystem::temp_directory_path() / "planseg_test_report";
    std::filesystem::remove_all(dir);
    write_report(dir, r);
    std::ifstream in(dir / "evaluation.json");
    CHECK(report_from_json(nlohmann::json::parse(in)).cases == r.cases);
    CHECK(std::filesystem::exists(dir / "evaluation.csv"));
    std::filesystem::remove_all(dir);
  }
}
