#include "planseg/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include "planseg/errors.hpp"
#include "planseg/tensor.hpp"

namespace planseg {

using nlohmann::json;

std::optional<double> dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) throw ShapeError("dice: prediction and ground truth differ in size");
  std::int64_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = gt[i] != 0;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return std::nullopt;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

namespace {

class DisjointSets {
 public:
  std::int32_t make() {
    parent_.push_back(static_cast<std::int32_t>(parent_.size()));
    return parent_.back();
  }
  std::int32_t find(std::int32_t a) {
    while (parent_[a] != a) a = parent_[a] = parent_[parent_[a]];
    return a;
  }
  void unite(std::int32_t a, std::int32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b) std::swap(a, b);
    parent_[a] = b;
  }

 private:
  std::vector<std::int32_t> parent_;
};

}  // namespace

std::vector<std::int32_t> label_components(std::span<const std::uint8_t> mask, const Triple& shape,
                                           int* num_components) {
  if (static_cast<std::int64_t>(mask.size()) != voxel_count(shape))
    throw ShapeError("label_components: mask does not match shape");
  std::vector<std::int32_t> provisional(mask.size(), -1);
  DisjointSets sets;
  // Two-pass labelling: join each voxel with its already-visited 26-neighbours.
  for (int z = 0; z < shape[2]; ++z)
    for (int y = 0; y < shape[1]; ++y)
      for (int x = 0; x < shape[0]; ++x) {
        const std::int64_t i = linear_index(shape, x, y, z);
        if (!mask[i]) continue;
        std::int32_t label = -1;
        for (int dz = -1; dz <= 0; ++dz)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              if (dz == 0 && (dy > 0 || (dy == 0 && dx >= 0))) continue;
              const int nx = x + dx, ny = y + dy, nz = z + dz;
              if (nx < 0 || ny < 0 || nz < 0 || nx >= shape[0] || ny >= shape[1]) continue;
              const std::int32_t other = provisional[linear_index(shape, nx, ny, nz)];
              if (other < 0) continue;
              if (label < 0) {
                label = other;
              } else {
                sets.unite(label, other);
              }
            }
        provisional[i] = label >= 0 ? label : sets.make();
      }

  std::vector<std::int32_t> out(mask.size(), 0);
  std::vector<std::int32_t> final_of;
  int count = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (provisional[i] < 0) continue;
    const std::int32_t root = sets.find(provisional[i]);
    if (static_cast<std::size_t>(root) >= final_of.size()) final_of.resize(root + 1, 0);
    if (final_of[root] == 0) final_of[root] = ++count;
    out[i] = final_of[root];
  }
  if (num_components) *num_components = count;
  return out;
}

namespace {

// Voxels in components of `a` that share no voxel with `b`.
std::int64_t unmatched_component_voxels(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b,
                                        const Triple& shape) {
  int n = 0;
  const auto labels = label_components(a, shape, &n);
  std::vector<std::int64_t> size(static_cast<std::size_t>(n) + 1, 0);
  std::vector<bool> touched(static_cast<std::size_t>(n) + 1, false);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!labels[i]) continue;
    ++size[labels[i]];
    if (b[i]) touched[labels[i]] = true;
  }
  std::int64_t total = 0;
  for (int c = 1; c <= n; ++c)
    if (!touched[c]) total += size[c];
  return total;
}

}  // namespace

FpFnVolumes fp_fn_volumes(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, const Triple& shape,
                          const Spacing& spacing) {
  if (pred.size() != gt.size()) throw ShapeError("fp_fn_volumes: prediction and ground truth differ in size");
  const double voxel_ml = spacing[0] * spacing[1] * spacing[2] / 1000.0;
  return {static_cast<double>(unmatched_component_voxels(pred, gt, shape)) * voxel_ml,
          static_cast<double>(unmatched_component_voxels(gt, pred, shape)) * voxel_ml};
}

CaseMetrics evaluate_case(const std::string& case_id, std::span<const std::uint8_t> pred,
                          std::span<const std::uint8_t> gt, const Triple& shape, const Spacing& spacing) {
  CaseMetrics m;
  m.case_id = case_id;
  m.dice = dice(pred, gt);
  const auto v = fp_fn_volumes(pred, gt, shape, spacing);
  m.fp_volume_ml = v.fp_ml;
  m.fn_volume_ml = v.fn_ml;
  m.gt_empty = std::none_of(gt.begin(), gt.end(), [](std::uint8_t x) { return x != 0; });
  m.pred_empty = std::none_of(pred.begin(), pred.end(), [](std::uint8_t x) { return x != 0; });
  return m;
}

EvalReport aggregate(std::span<const CaseMetrics> cases) {
  if (cases.empty()) throw ParameterError("aggregate needs at least one case");
  EvalReport r;
  r.cases.assign(cases.begin(), cases.end());
  double challenge = 0.0, nnunet = 0.0;
  int included = 0;
  for (const auto& c : cases) {
    // An empty-gt case with a non-empty prediction has dice 0 under both conventions, which the
    // formula already yields; only the both-empty case is undefined.
    if (c.dice) {
      challenge += *c.dice;
      nnunet += *c.dice;
      ++included;
    }
    r.mean_fp_volume += c.fp_volume_ml;
    r.mean_fn_volume += c.fn_volume_ml;
  }
  const double n = static_cast<double>(cases.size());
  r.mean_dice_challenge = challenge / n;
  if (included > 0) r.mean_dice_nnunet = nnunet / included;
  r.mean_fp_volume /= n;
  r.mean_fn_volume /= n;
  return r;
}

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> optional_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace

json to_json(const EvalReport& report) {
  json cases = json::array();
  for (const auto& c : report.cases)
    cases.push_back({{"case_id", c.case_id},
                     {"dice", optional_json(c.dice)},
                     {"fp_volume_ml", c.fp_volume_ml},
                     {"fn_volume_ml", c.fn_volume_ml},
                     {"gt_empty", c.gt_empty},
                     {"pred_empty", c.pred_empty}});
  return {{"cases", cases},
          {"mean_dice_challenge", report.mean_dice_challenge},
          {"mean_dice_nnunet", optional_json(report.mean_dice_nnunet)},
          {"mean_fp_volume_ml", report.mean_fp_volume},
          {"mean_fn_volume_ml", report.mean_fn_volume},
          {"convention_note", report.convention_note}};
}

EvalReport report_from_json(const json& j) {
  EvalReport r;
  for (const auto& c : j.at("cases"))
    r.cases.push_back({c.at("case_id").get<std::string>(), optional_from(c.at("dice")),
                       c.at("fp_volume_ml").get<double>(), c.at("fn_volume_ml").get<double>(),
                       c.at("gt_empty").get<bool>(), c.at("pred_empty").get<bool>()});
  r.mean_dice_challenge = j.at("mean_dice_challenge").get<double>();
  r.mean_dice_nnunet = optional_from(j.at("mean_dice_nnunet"));
  r.mean_fp_volume = j.at("mean_fp_volume_ml").get<double>();
  r.mean_fn_volume = j.at("mean_fn_volume_ml").get<double>();
  r.convention_note = j.at("convention_note").get<std::string>();
  return r;
}

std::string to_csv(const EvalReport& report) {
  std::ostringstream out;
  out.precision(17);
  out << "case_id,dice,fp_volume_ml,fn_volume_ml,gt_empty,pred_empty\n";
  for (const auto& c : report.cases) {
    out << c.case_id << ',';
    if (c.dice) out << *c.dice;
    out << ',' << c.fp_volume_ml << ',' << c.fn_volume_ml << ',' << (c.gt_empty ? 1 : 0) << ','
        << (c.pred_empty ? 1 : 0) << '\n';
  }
  return out.str();
}

void write_report(const std::filesystem::path& dir, const EvalReport& report) {
  std::filesystem::create_directories(dir);
  std::ofstream json_out(dir / "evaluation.json");
  std::ofstream csv_out(dir / "evaluation.csv");
  if (!json_out || !csv_out) throw IoError("cannot write evaluation report under " + dir.string());
  json_out << to_json(report).dump(2) << "\n";
  csv_out << to_csv(report);
}

}  // namespace planseg
