#include "pni/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>

#include <json.hpp>

#include "pni/error.hpp"

namespace pni {
namespace {

constexpr char kMagic[8] = {'P', 'N', 'I', 'C', 'K', 'P', 'T', '\0'};
constexpr char kEndMagic[8] = {'P', 'N', 'I', 'K', 'E', 'N', 'D', '\0'};
constexpr std::size_t kHeaderSize = 20;
constexpr std::size_t kTrailerSize = 16;

void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(std::span<const std::uint8_t> in, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | in[at + static_cast<std::size_t>(i)];
  return v;
}

struct Entry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

}  // namespace

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::uint8_t> serialize_checkpoint(const TrainState& state) {
  std::vector<Entry> entries;
  for (const auto& p : state.model.parameters()) {
    entries.push_back({p.name, p.value.shape(), {p.value.data().begin(), p.value.data().end()}});
  }
  for (const auto& c : state.model.coefficients()) {
    entries.push_back({"alpha/" + c.layer_id, {2}, {c.value(), c.velocity}});
  }
  for (const auto& [name, v] : state.optimizer.velocity) {
    entries.push_back({"velocity/" + name, {v.size()}, v});
  }

  nlohmann::ordered_json manifest;
  manifest["spec"] = to_json(state.model.spec());
  manifest["epoch"] = state.epoch;
  manifest["rng"] = {{"seed", state.rng.seed()}, {"counter", state.rng.counter()}};
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& e : entries) {
    table.push_back({{"name", e.name}, {"dtype", "f64"}, {"shape", e.shape}, {"offset", offset}});
    offset += e.values.size() * sizeof(double);
  }
  manifest["tensors"] = table;
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le(out, kCheckpointVersion, 4);
  put_le(out, text.size(), 8);
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& e : entries) {
    for (double v : e.values) put_le(out, std::bit_cast<std::uint64_t>(v), 8);
  }
  put_le(out, fnv1a64(out), 8);
  out.insert(out.end(), std::begin(kEndMagic), std::end(kEndMagic));
  return out;
}

TrainState deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderSize) throw IntegrityError("truncated checkpoint header", bytes.size());
  if (std::memcmp(bytes.data(), kMagic, 8) != 0) throw IntegrityError("not a checkpoint file", 0);
  const auto version = static_cast<std::uint32_t>(get_le(bytes, 8, 4));
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint format version " + std::to_string(version) + ", this build reads version " +
                       std::to_string(kCheckpointVersion));
  }
  const std::uint64_t manifest_len = get_le(bytes, 12, 8);
  if (manifest_len > bytes.size() - kHeaderSize) throw IntegrityError("truncated manifest", bytes.size());
  const std::size_t payload_at = kHeaderSize + manifest_len;
  if (bytes.size() < payload_at + kTrailerSize) throw IntegrityError("truncated checkpoint", bytes.size());
  const std::size_t trailer_at = bytes.size() - kTrailerSize;
  if (std::memcmp(bytes.data() + trailer_at + 8, kEndMagic, 8) != 0) {
    throw IntegrityError("missing end marker, file truncated or corrupt", trailer_at + 8);
  }
  if (get_le(bytes, trailer_at, 8) != fnv1a64(bytes.first(trailer_at))) {
    throw IntegrityError("checksum mismatch", trailer_at);
  }

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + kHeaderSize, bytes.begin() + static_cast<std::ptrdiff_t>(payload_at));
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("unreadable manifest: ") + e.what(), kHeaderSize);
  }

  const std::size_t payload_len = trailer_at - payload_at;
  std::map<std::string, Entry> tensors;
  try {
    for (const auto& t : manifest.at("tensors")) {
      if (t.at("dtype") != "f64") throw IntegrityError("unsupported dtype", kHeaderSize);
      Entry e{t.at("name").get<std::string>(), t.at("shape").get<Shape>(), {}};
      const std::size_t off = t.at("offset").get<std::size_t>();
      const std::size_t count = numel(e.shape);
      if (off > payload_len || count * sizeof(double) > payload_len - off) {
        throw IntegrityError("tensor '" + e.name + "' runs past the payload", payload_at + payload_len);
      }
      e.values.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        e.values[i] = std::bit_cast<double>(get_le(bytes, payload_at + off + i * 8, 8));
      }
      tensors.emplace(e.name, std::move(e));
    }

    TrainState state;
    state.model = Model::create(model_spec_from_json(manifest.at("spec")), 0);
    state.epoch = manifest.at("epoch").get<std::size_t>();
    state.rng = Rng(manifest.at("rng").at("seed").get<std::uint64_t>(),
                    manifest.at("rng").at("counter").get<std::uint64_t>());
    auto take = [&](const std::string& name, const Shape& shape) -> const Entry& {
      auto it = tensors.find(name);
      if (it == tensors.end()) throw IntegrityError("missing tensor '" + name + "'", kHeaderSize);
      if (it->second.shape != shape) throw IntegrityError("tensor '" + name + "' has the wrong shape", kHeaderSize);
      return it->second;
    };
    for (auto& p : state.model.parameters()) {
      const Entry& e = take(p.name, p.value.shape());
      std::copy(e.values.begin(), e.values.end(), p.value.mutable_data().begin());
    }
    for (auto& c : state.model.coefficients()) {
      const Entry& e = take("alpha/" + c.layer_id, {2});
      c.set_value(e.values[0]);
      c.velocity = e.values[1];
    }
    for (const auto& [name, e] : tensors) {
      if (name.starts_with("velocity/")) state.optimizer.velocity[name.substr(9)] = e.values;
    }
    return state;
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("malformed manifest: ") + e.what(), kHeaderSize);
  } catch (const ConfigError& e) {
    throw IntegrityError(std::string("invalid model spec: ") + e.what(), kHeaderSize);
  }
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(state);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string(), "checkpoint");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string(), "checkpoint");
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return deserialize_checkpoint(bytes);
}

}  // namespace pni
