#include "planseg/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>

#include <nlohmann/json.hpp>

#include "planseg/errors.hpp"

namespace planseg {

namespace fs = std::filesystem;
using nlohmann::json;

bool Volume::has_foreground() const {
  if (!segmentation) return false;
  return std::any_of(segmentation->begin(), segmentation->end(), [](std::uint8_t v) { return v != 0; });
}

std::vector<std::int64_t> Volume::foreground_indices() const {
  std::vector<std::int64_t> out;
  if (!segmentation) return out;
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(segmentation->size()); ++i)
    if ((*segmentation)[i]) out.push_back(i);
  return out;
}

void check_volume(const Volume& v) {
  for (int a = 0; a < 3; ++a)
    if (v.shape[a] <= 0) throw ShapeError("volume " + v.case_id + ": non-positive shape");
  for (const auto& c : v.channels)
    if (static_cast<std::int64_t>(c.size()) != v.voxels())
      throw ShapeError("volume " + v.case_id + ": channel size does not match shape");
  if (v.segmentation && static_cast<std::int64_t>(v.segmentation->size()) != v.voxels())
    throw ShapeError("volume " + v.case_id + ": segmentation size does not match shape");
  for (double s : v.spacing)
    if (!(s > 0)) throw ShapeError("volume " + v.case_id + ": spacing must be positive");
}

// ---- synthetic data --------------------------------------------------------------

namespace {

struct Wave {
  std::array<double, 3> freq;
  double phase;
};

// Sum of a few low-frequency cosines, scaled into [-1, 1].
class SmoothField {
 public:
  SmoothField(std::mt19937_64& rng, const Triple& shape) : shape_(shape) {
    std::uniform_int_distribution<int> f(0, 2);
    std::uniform_real_distribution<double> ph(0.0, 2.0 * std::numbers::pi);
    for (auto& w : waves_) {
      for (auto& fr : w.freq) fr = f(rng);
      w.phase = ph(rng);
    }
  }

  double operator()(int x, int y, int z) const {
    double acc = 0.0;
    for (const auto& w : waves_) {
      const double arg = 2.0 * std::numbers::pi *
                             (w.freq[0] * x / shape_[0] + w.freq[1] * y / shape_[1] + w.freq[2] * z / shape_[2]) +
                         w.phase;
      acc += std::cos(arg);
    }
    return acc / static_cast<double>(waves_.size());
  }

 private:
  Triple shape_;
  std::array<Wave, 3> waves_{};
};

struct Ellipsoid {
  std::array<double, 3> center;
  std::array<double, 3> radius;

  // Squared normalised distance; <= 1 inside.
  double r2(int x, int y, int z) const {
    const double dx = (x - center[0]) / radius[0];
    const double dy = (y - center[1]) / radius[1];
    const double dz = (z - center[2]) / radius[2];
    return dx * dx + dy * dy + dz * dz;
  }
};

Ellipsoid random_ellipsoid(std::mt19937_64& rng, const Triple& shape, double rmin, double rmax) {
  Ellipsoid e{};
  std::uniform_real_distribution<double> rad(rmin, rmax);
  for (int a = 0; a < 3; ++a) {
    e.radius[a] = rad(rng);
    const double margin = std::min(e.radius[a] + 1.0, shape[a] / 2.0);
    std::uniform_real_distribution<double> c(margin, shape[a] - 1.0 - margin);
    e.center[a] = c(rng);
  }
  return e;
}

struct PatientAnatomy {
  std::uint64_t seed;
};

Volume make_case(std::mt19937_64& rng, const SyntheticDatasetSpec& spec, const PatientAnatomy& anatomy,
                 std::string case_id, std::string patient_id) {
  Volume v;
  v.case_id = std::move(case_id);
  v.patient_id = std::move(patient_id);
  v.shape = spec.shape;
  v.spacing = spec.spacing;
  const std::int64_t n = v.voxels();
  v.channels.assign(2, std::vector<float>(static_cast<std::size_t>(n)));
  v.segmentation = std::vector<std::uint8_t>(static_cast<std::size_t>(n), 0);

  // Cases of one patient share anatomy (background fields), but not lesions or noise.
  std::mt19937_64 anatomy_rng(anatomy.seed);
  const SmoothField tissue(anatomy_rng, spec.shape);
  const SmoothField uptake(anatomy_rng, spec.shape);

  const double scale = std::min({spec.shape[0], spec.shape[1], spec.shape[2]}) / 64.0;
  std::bernoulli_distribution has_organ(0.5);
  std::optional<Ellipsoid> organ;
  if (has_organ(rng)) organ = random_ellipsoid(rng, spec.shape, 6.0 * scale, 10.0 * scale);
  std::uniform_real_distribution<double> organ_level(3.0, 6.0);
  const double organ_suv = organ_level(rng);

  std::bernoulli_distribution empty(spec.empty_probability);
  int lesions = 0;
  if (!empty(rng)) {
    std::uniform_int_distribution<int> count(spec.min_lesions, spec.max_lesions);
    lesions = count(rng);
  }
  std::vector<Ellipsoid> lesion_shapes;
  std::vector<double> lesion_suv;
  std::uniform_real_distribution<double> suv(4.0, 15.0);
  for (int i = 0; i < lesions; ++i) {
    lesion_shapes.push_back(random_ellipsoid(rng, spec.shape, 2.0 * scale, 6.0 * scale));
    lesion_suv.push_back(suv(rng));
  }

  std::normal_distribution<double> ct_noise(0.0, 10.0);
  std::normal_distribution<double> pet_noise(0.0, 0.15);
  auto& ct = v.channels[0];
  auto& pet = v.channels[1];
  auto& seg = *v.segmentation;
  for (int z = 0; z < spec.shape[2]; ++z) {
    for (int y = 0; y < spec.shape[1]; ++y) {
      for (int x = 0; x < spec.shape[0]; ++x) {
        const std::int64_t i = (static_cast<std::int64_t>(z) * spec.shape[1] + y) * spec.shape[0] + x;
        double ct_value = 50.0 + 150.0 * tissue(x, y, z);
        double pet_value = 1.0 + 0.8 * uptake(x, y, z);
        // Physiological uptake: bright in PET, but with a distinctive dense CT signature and no label.
        if (organ && organ->r2(x, y, z) <= 1.0) {
          ct_value = 180.0;
          pet_value = organ_suv;
        }
        for (std::size_t l = 0; l < lesion_shapes.size(); ++l) {
          const double r2 = lesion_shapes[l].r2(x, y, z);
          if (r2 <= 1.0) {
            pet_value = std::max(pet_value, lesion_suv[l] * (1.0 - 0.4 * r2));
            seg[i] = 1;
          }
        }
        ct[i] = static_cast<float>(std::clamp(ct_value + ct_noise(rng), -100.0, 200.0));
        pet[i] = static_cast<float>(std::max(0.0, pet_value + pet_noise(rng)));
      }
    }
  }
  return v;
}

std::string numbered(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04d", prefix, i);
  return buf;
}

}  // namespace

std::vector<Volume> generate_synthetic_dataset(const SyntheticDatasetSpec& spec) {
  if (spec.num_patients < 1) throw ParameterError("num_patients must be positive");
  if (spec.total_cases < spec.num_patients) throw ParameterError("total_cases must be at least num_patients");
  for (int a = 0; a < 3; ++a)
    if (spec.shape[a] < 32) throw ParameterError("every volume axis must be at least 32 voxels");
  for (double s : spec.spacing)
    if (!(s > 0)) throw ParameterError("spacing must be positive");
  if (spec.min_lesions < 0 || spec.max_lesions < spec.min_lesions) throw ParameterError("invalid lesion count range");
  if (!(spec.empty_probability >= 0 && spec.empty_probability <= 1))
    throw ParameterError("empty_probability must lie in [0, 1]");

  std::mt19937_64 rng(spec.seed);
  std::vector<int> cases_of(static_cast<std::size_t>(spec.num_patients), 1);
  std::uniform_int_distribution<int> pick(0, spec.num_patients - 1);
  for (int extra = spec.total_cases - spec.num_patients; extra > 0; --extra) ++cases_of[pick(rng)];

  std::vector<PatientAnatomy> anatomy;
  for (int p = 0; p < spec.num_patients; ++p) anatomy.push_back({rng()});

  std::vector<Volume> out;
  out.reserve(static_cast<std::size_t>(spec.total_cases));
  int case_index = 0;
  for (int p = 0; p < spec.num_patients; ++p)
    for (int k = 0; k < cases_of[p]; ++k)
      out.push_back(make_case(rng, spec, anatomy[p], numbered("case", case_index++), numbered("patient", p)));
  return out;
}

// ---- normalisation -----------------------------------------------------------------

double percentile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw StatsError("percentile of an empty sample");
  const double pos = q / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

ChannelStats channel_stats(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  ChannelStats s;
  s.clip_lower = percentile_sorted(values, kClipLowerPercentile);
  s.clip_upper = percentile_sorted(values, kClipUpperPercentile);
  double sum = 0.0;
  std::int64_t count = 0;
  for (double v : values) {
    if (v < s.clip_lower || v > s.clip_upper) continue;
    sum += v;
    ++count;
  }
  s.mean = sum / static_cast<double>(count);
  double sq = 0.0;
  for (double v : values) {
    if (v < s.clip_lower || v > s.clip_upper) continue;
    sq += (v - s.mean) * (v - s.mean);
  }
  s.std = std::max(std::sqrt(sq / static_cast<double>(count)), kStdEpsilon);
  return s;
}

namespace {

NormalizationStats pooled_stats(std::span<const Volume> training, bool foreground_only) {
  if (training.empty()) throw StatsError("no training volumes");
  const int channels = training.front().num_channels();
  NormalizationStats stats;
  for (int c = 0; c < channels; ++c) {
    std::vector<double> values;
    for (const auto& v : training) {
      if (v.num_channels() != channels) throw ShapeError("training volumes disagree on channel count");
      const auto& data = v.channels[c];
      for (std::size_t i = 0; i < data.size(); ++i)
        if (!foreground_only || (v.segmentation && (*v.segmentation)[i])) values.push_back(data[i]);
    }
    if (values.empty())
      throw StatsError("training split has no foreground voxels; use whole-volume statistics instead");
    stats.channels.push_back(channel_stats(std::move(values)));
  }
  return stats;
}

}  // namespace

NormalizationStats compute_normalization_stats(std::span<const Volume> training) {
  return pooled_stats(training, true);
}

NormalizationStats compute_whole_volume_stats(std::span<const Volume> training) {
  return pooled_stats(training, false);
}

Volume normalize(Volume v, const NormalizationStats& stats) {
  if (static_cast<int>(stats.channels.size()) != v.num_channels())
    throw ConfigurationError("normalization stats and volume disagree on channel count");
  for (int c = 0; c < v.num_channels(); ++c) {
    const auto& s = stats.channels[c];
    for (auto& x : v.channels[c]) {
      const double clipped = std::clamp(static_cast<double>(x), s.clip_lower, s.clip_upper);
      x = static_cast<float>((clipped - s.mean) / s.std);
    }
  }
  return v;
}

json to_json(const NormalizationStats& stats) {
  json out = json::array();
  for (const auto& c : stats.channels)
    out.push_back({{"clip_lower", c.clip_lower}, {"clip_upper", c.clip_upper}, {"mean", c.mean}, {"std", c.std}});
  return out;
}

NormalizationStats stats_from_json(const json& j) {
  NormalizationStats stats;
  for (const auto& c : j)
    stats.channels.push_back({c.at("clip_lower").get<double>(), c.at("clip_upper").get<double>(),
                              c.at("mean").get<double>(), c.at("std").get<double>()});
  return stats;
}

// ---- folds ------------------------------------------------------------------------

std::vector<std::string> FoldAssignment::cases_in_fold(int fold) const {
  std::vector<std::string> out;
  for (const auto& [id, f] : fold_of_case)
    if (f == fold) out.push_back(id);
  return out;
}

FoldAssignment assign_folds(std::span<const Volume> volumes, int num_folds, std::uint64_t seed) {
  if (num_folds < 2) throw AssignmentError("need at least 2 folds");
  std::set<std::string> unique;
  for (const auto& v : volumes) unique.insert(v.patient_id);
  std::vector<std::string> patients(unique.begin(), unique.end());
  if (static_cast<int>(patients.size()) < num_folds)
    throw AssignmentError("fewer patients (" + std::to_string(patients.size()) + ") than folds (" +
                          std::to_string(num_folds) + ")");
  std::mt19937_64 rng(seed);
  std::shuffle(patients.begin(), patients.end(), rng);
  std::map<std::string, int> fold_of_patient;
  for (std::size_t i = 0; i < patients.size(); ++i) fold_of_patient[patients[i]] = static_cast<int>(i % num_folds);

  FoldAssignment fa;
  fa.num_folds = num_folds;
  for (const auto& v : volumes) {
    if (!fa.fold_of_case.emplace(v.case_id, fold_of_patient.at(v.patient_id)).second)
      throw AssignmentError("duplicate case id " + v.case_id);
  }
  return fa;
}

// ---- patches ------------------------------------------------------------------------

Triple padded_shape(const Triple& shape, const Triple& patch) {
  return {std::max(shape[0], patch[0]), std::max(shape[1], patch[1]), std::max(shape[2], patch[2])};
}

Triple padding_before(const Triple& shape, const Triple& patch) {
  const Triple padded = padded_shape(shape, patch);
  return {(padded[0] - shape[0]) / 2, (padded[1] - shape[1]) / 2, (padded[2] - shape[2]) / 2};
}

PatchSample extract_patch(const Volume& v, const Triple& patch, const Triple& corner) {
  const Triple before = padding_before(v.shape, patch);
  PatchSample out;
  out.corner = corner;
  const std::int64_t pv = voxel_count(patch);
  out.image.assign(static_cast<std::size_t>(pv * v.num_channels()), 0.0f);
  out.label.assign(static_cast<std::size_t>(pv), 0);

  // Source range along x for every row is contiguous, so copy row segments.
  const int x0 = corner[0] - before[0];
  const int xa = std::max(0, -x0);
  const int xb = std::min(patch[0], v.shape[0] - x0);
  if (xa >= xb) return out;
  for (int pz = 0; pz < patch[2]; ++pz) {
    const int z = corner[2] - before[2] + pz;
    if (z < 0 || z >= v.shape[2]) continue;
    for (int py = 0; py < patch[1]; ++py) {
      const int y = corner[1] - before[1] + py;
      if (y < 0 || y >= v.shape[1]) continue;
      const std::int64_t src = (static_cast<std::int64_t>(z) * v.shape[1] + y) * v.shape[0] + x0;
      const std::int64_t dst = (static_cast<std::int64_t>(pz) * patch[1] + py) * patch[0];
      for (int c = 0; c < v.num_channels(); ++c)
        std::copy(v.channels[c].begin() + src + xa, v.channels[c].begin() + src + xb,
                  out.image.begin() + c * pv + dst + xa);
      if (v.segmentation)
        std::copy(v.segmentation->begin() + src + xa, v.segmentation->begin() + src + xb,
                  out.label.begin() + dst + xa);
    }
  }
  return out;
}

PatchSample sample_patch(const Volume& v, const Triple& patch, bool force_foreground, std::mt19937_64& rng,
                         const std::vector<std::int64_t>* foreground) {
  const Triple padded = padded_shape(v.shape, patch);
  const Triple before = padding_before(v.shape, patch);
  Triple corner{};

  std::vector<std::int64_t> scanned;
  if (force_foreground && !foreground) {
    scanned = v.foreground_indices();
    foreground = &scanned;
  }
  if (force_foreground && !foreground->empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, foreground->size() - 1);
    std::int64_t idx = (*foreground)[pick(rng)];
    const std::array<std::int64_t, 3> pos{idx % v.shape[0], (idx / v.shape[0]) % v.shape[1],
                                          idx / (static_cast<std::int64_t>(v.shape[0]) * v.shape[1])};
    for (int a = 0; a < 3; ++a) {
      const int p = static_cast<int>(pos[a]) + before[a];
      const int lo = std::max(0, p - patch[a] + 1);
      const int hi = std::min(padded[a] - patch[a], p);
      corner[a] = std::uniform_int_distribution<int>(lo, hi)(rng);
    }
  } else {
    for (int a = 0; a < 3; ++a) corner[a] = std::uniform_int_distribution<int>(0, padded[a] - patch[a])(rng);
  }
  return extract_patch(v, patch, corner);
}

// ---- MVOL io --------------------------------------------------------------------------

namespace {

template <class T>
void write_raw(const fs::path& file, std::span<const T> values) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot open " + file.string() + " for writing");
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (T v : values) {
      auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
      std::reverse(bytes.begin(), bytes.end());
      out.write(bytes.data(), sizeof(T));
    }
  }
  if (!out) throw IoError("failed writing " + file.string());
}

template <class T>
std::vector<T> read_raw(const fs::path& file, std::int64_t count) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  std::vector<T> values(static_cast<std::size_t>(count));
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(T)));
  if (in.gcount() != static_cast<std::streamsize>(count * sizeof(T)))
    throw IoError(file.string() + ": expected " + std::to_string(count * sizeof(T)) + " bytes");
  if (in.peek() != std::char_traits<char>::eof()) throw IoError(file.string() + ": trailing bytes");
  if constexpr (std::endian::native != std::endian::little && sizeof(T) > 1) {
    for (auto& v : values) {
      auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
      std::reverse(bytes.begin(), bytes.end());
      v = std::bit_cast<T>(bytes);
    }
  }
  return values;
}

json read_json(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open " + file.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(file.string() + ": " + e.what());
  }
}

void write_json(const fs::path& file, const json& j) {
  std::ofstream out(file);
  if (!out) throw IoError("cannot open " + file.string() + " for writing");
  out << j.dump(2) << "\n";
}

}  // namespace

void write_f32le(const fs::path& file, std::span<const float> values) { write_raw<float>(file, values); }
std::vector<float> read_f32le(const fs::path& file, std::int64_t count) { return read_raw<float>(file, count); }
void write_u8(const fs::path& file, std::span<const std::uint8_t> values) { write_raw<std::uint8_t>(file, values); }
std::vector<std::uint8_t> read_u8(const fs::path& file, std::int64_t count) {
  return read_raw<std::uint8_t>(file, count);
}

void write_volume(const fs::path& dir, const Volume& v) {
  check_volume(v);
  fs::create_directories(dir);
  json header = {{"case_id", v.case_id},
                 {"patient_id", v.patient_id},
                 {"shape", v.shape},
                 {"spacing", v.spacing},
                 {"dtype", "f32le"},
                 {"has_segmentation", v.segmentation.has_value()}};
  std::vector<std::string> names;
  for (int c = 0; c < v.num_channels(); ++c)
    names.push_back(c < static_cast<int>(kChannelNames.size()) ? kChannelNames[c] : "channel_" + std::to_string(c));
  header["channel_names"] = names;
  write_json(dir / "header.json", header);
  for (int c = 0; c < v.num_channels(); ++c)
    write_f32le(dir / ("channel_" + std::to_string(c) + ".raw"), v.channels[c]);
  if (v.segmentation) write_u8(dir / "segmentation.raw", *v.segmentation);
}

Volume read_volume(const fs::path& dir) {
  const json header = read_json(dir / "header.json");
  Volume v;
  try {
    if (header.at("dtype").get<std::string>() != "f32le") throw IoError(dir.string() + ": unsupported dtype");
    v.case_id = header.at("case_id").get<std::string>();
    v.patient_id = header.at("patient_id").get<std::string>();
    v.shape = header.at("shape").get<Triple>();
    v.spacing = header.at("spacing").get<Spacing>();
    const auto channels = header.at("channel_names").size();
    for (std::size_t c = 0; c < channels; ++c)
      v.channels.push_back(read_f32le(dir / ("channel_" + std::to_string(c) + ".raw"), v.voxels()));
    const bool has_seg = header.value("has_segmentation", fs::exists(dir / "segmentation.raw"));
    if (has_seg) v.segmentation = read_u8(dir / "segmentation.raw", v.voxels());
  } catch (const json::exception& e) {
    throw IoError(dir.string() + "/header.json: " + e.what());
  }
  check_volume(v);
  return v;
}

void write_dataset(const fs::path& root, std::span<const Volume> volumes) {
  fs::create_directories(root);
  json cases = json::array();
  std::set<std::string> patients;
  for (const auto& v : volumes) {
    write_volume(root / v.case_id, v);
    cases.push_back({{"case_id", v.case_id}, {"patient_id", v.patient_id}});
    patients.insert(v.patient_id);
  }
  write_json(root / "dataset.json", {{"format", "MVOL"},
                                     {"channel_names", kChannelNames},
                                     {"num_cases", volumes.size()},
                                     {"patients", patients},
                                     {"cases", cases}});
}

std::vector<Volume> read_dataset(const fs::path& root) {
  const json index = read_json(root / "dataset.json");
  std::vector<Volume> out;
  try {
    for (const auto& c : index.at("cases")) {
      out.push_back(read_volume(root / c.at("case_id").get<std::string>()));
      if (out.back().patient_id != c.at("patient_id").get<std::string>())
        throw IoError(out.back().case_id + ": patient id differs between dataset.json and header.json");
    }
  } catch (const json::exception& e) {
    throw IoError((root / "dataset.json").string() + ": " + e.what());
  }
  return out;
}

}  // namespace planseg
