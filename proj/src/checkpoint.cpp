#include "planseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "planseg/errors.hpp"

namespace planseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum class SectionKind : std::uint8_t { Text = 0, Tensor = 1 };

template <class T>
void put(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(value);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(bytes.data(), sizeof(T));
}

template <class T>
T get(std::istream& in, const fs::path& file) {
  std::array<char, sizeof(T)> bytes{};
  if (!in.read(bytes.data(), sizeof(T))) throw IoError(file.string() + ": truncated checkpoint");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

void put_name(std::ostream& out, SectionKind kind, const std::string& name) {
  put(out, static_cast<std::uint8_t>(kind));
  put(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
}

void put_text(std::ostream& out, const std::string& name, const std::string& text) {
  put_name(out, SectionKind::Text, name);
  put(out, static_cast<std::uint64_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

std::string get_string(std::istream& in, std::uint64_t size, const fs::path& file) {
  // Guard against corrupt lengths before allocating.
  if (size > (std::uint64_t{1} << 32)) throw IoError(file.string() + ": implausible section length");
  std::string s(static_cast<std::size_t>(size), '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(size))) throw IoError(file.string() + ": truncated checkpoint");
  return s;
}

}  // namespace

void write_checkpoint(const fs::path& file, const Checkpoint& ckpt) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  // Write to a sibling and rename, so a crash never leaves a half-written checkpoint behind.
  const fs::path tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(kCheckpointMagic, 4);
    put(out, kCheckpointVersion);
    put(out, static_cast<std::uint32_t>(4 + ckpt.tensors.size()));

    json meta = ckpt.meta;
    meta["seed"] = ckpt.seed;
    meta["epoch"] = ckpt.epoch;
    put_text(out, "descriptor", to_json(ckpt.descriptor).dump());
    put_text(out, "meta", meta.dump());
    put_text(out, "config", ckpt.config.dump());
    put_text(out, "normalization", ckpt.normalization.dump());
    for (const auto& [name, t] : ckpt.tensors) {
      std::int64_t count = 1;
      for (auto d : t.shape) count *= d;
      if (count != static_cast<std::int64_t>(t.values.size()))
        throw IoError("tensor " + name + ": value count does not match shape");
      put_name(out, SectionKind::Tensor, name);
      put(out, static_cast<std::uint32_t>(t.shape.size()));
      for (auto d : t.shape) put(out, static_cast<std::int64_t>(d));
      if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(t.values.data()),
                  static_cast<std::streamsize>(t.values.size() * sizeof(float)));
      } else {
        for (float v : t.values) put(out, v);
      }
    }
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  fs::rename(tmp, file);
}

Checkpoint read_checkpoint(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + file.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw IoError(file.string() + ": not a checkpoint file");
  const auto version = get<std::uint32_t>(in, file);
  if (version != kCheckpointVersion)
    throw IoError(file.string() + ": unsupported checkpoint version " + std::to_string(version));
  const auto sections = get<std::uint32_t>(in, file);

  Checkpoint ckpt;
  bool have_descriptor = false, have_meta = false;
  for (std::uint32_t s = 0; s < sections; ++s) {
    const auto kind = static_cast<SectionKind>(get<std::uint8_t>(in, file));
    const std::string name = get_string(in, get<std::uint32_t>(in, file), file);
    if (kind == SectionKind::Text) {
      const std::string text = get_string(in, get<std::uint64_t>(in, file), file);
      json j;
      try {
        j = json::parse(text);
      } catch (const json::exception& e) {
        throw IoError(file.string() + ": section " + name + ": " + e.what());
      }
      if (name == "descriptor") {
        ckpt.descriptor = topology_from_json(j);
        have_descriptor = true;
      } else if (name == "meta") {
        ckpt.seed = j.at("seed").get<std::uint64_t>();
        ckpt.epoch = j.at("epoch").get<int>();
        j.erase("seed");
        j.erase("epoch");
        ckpt.meta = std::move(j);
        have_meta = true;
      } else if (name == "config") {
        ckpt.config = std::move(j);
      } else if (name == "normalization") {
        ckpt.normalization = std::move(j);
      }
    } else if (kind == SectionKind::Tensor) {
      StoredTensor t;
      const auto rank = get<std::uint32_t>(in, file);
      if (rank > 8) throw IoError(file.string() + ": implausible tensor rank in " + name);
      std::int64_t count = 1;
      for (std::uint32_t d = 0; d < rank; ++d) {
        t.shape.push_back(get<std::int64_t>(in, file));
        if (t.shape.back() < 0 || t.shape.back() > (std::int64_t{1} << 31))
          throw IoError(file.string() + ": implausible tensor shape in " + name);
        count *= t.shape.back();
      }
      t.values.resize(static_cast<std::size_t>(count));
      if (!in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(count * sizeof(float))))
        throw IoError(file.string() + ": truncated tensor " + name);
      if constexpr (std::endian::native == std::endian::big) {
        for (auto& v : t.values) {
          auto b = std::bit_cast<std::array<char, 4>>(v);
          std::reverse(b.begin(), b.end());
          v = std::bit_cast<float>(b);
        }
      }
      ckpt.tensors.emplace(name, std::move(t));
    } else {
      throw IoError(file.string() + ": unknown section kind");
    }
  }
  if (!have_descriptor || !have_meta) throw IoError(file.string() + ": missing descriptor or meta section");
  if (in.peek() != std::char_traits<char>::eof()) throw IoError(file.string() + ": trailing bytes after last section");
  return ckpt;
}

void store_state(Checkpoint& ckpt, nn::UNet<float>& net, const SgdNesterov<float>* optimizer) {
  const auto params = net.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = *params[k];
    ckpt.tensors["param/" + p.name] = {p.shape, p.value};
    if (optimizer) ckpt.tensors["momentum/" + p.name] = {p.shape, optimizer->buffers()[k]};
  }
}

void load_state(const Checkpoint& ckpt, nn::UNet<float>& net, SgdNesterov<float>* optimizer) {
  const auto params = net.parameters();
  auto fetch = [&](const std::string& key, const nn::Parameter<float>& p) -> const StoredTensor& {
    auto it = ckpt.tensors.find(key);
    if (it == ckpt.tensors.end()) throw IoError("checkpoint lacks tensor " + key);
    if (it->second.shape != p.shape) throw IoError("checkpoint tensor " + key + " has a different shape");
    return it->second;
  };
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    p.value = fetch("param/" + p.name, p).values;
    if (optimizer) optimizer->buffers()[k] = fetch("momentum/" + p.name, p).values;
  }
}

nn::UNet<float> network_from_checkpoint(const Checkpoint& ckpt) {
  nn::UNet<float> net(ckpt.descriptor, ckpt.seed);
  load_state(ckpt, net, nullptr);
  return net;
}

}  // namespace planseg
