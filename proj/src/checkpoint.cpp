#include "topowmamba/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>

#include "json.hpp"

namespace twm {

static_assert(std::endian::native == std::endian::little, "checkpoint format is little-endian");

namespace {

constexpr char kMagic[4] = {'T', 'W', 'M', 'B'};
constexpr std::uint32_t kVersion = 1;

template <typename V>
void put(std::string& buf, V v) {
  char tmp[sizeof(V)];
  std::memcpy(tmp, &v, sizeof(V));
  buf.append(tmp, sizeof(V));
}

template <typename V>
V take(const std::string& buf, std::size_t& off) {
  if (off + sizeof(V) > buf.size()) throw IoError("checkpoint truncated");
  V v;
  std::memcpy(&v, buf.data() + off, sizeof(V));
  off += sizeof(V);
  return v;
}

void put_tensor(std::string& buf, const std::string& name, const Shape& shape, const float* data, std::int64_t n) {
  if (name.size() > 0xffff) throw IoError("tensor name too long");
  put<std::uint16_t>(buf, static_cast<std::uint16_t>(name.size()));
  buf.append(name);
  put<std::uint8_t>(buf, 0);  // dtype f32
  put<std::uint8_t>(buf, static_cast<std::uint8_t>(shape.size()));
  for (auto e : shape) put<std::uint64_t>(buf, static_cast<std::uint64_t>(e));
  buf.append(reinterpret_cast<const char*>(data), static_cast<std::size_t>(n) * sizeof(float));
}

}  // namespace

void checkpoint_save(const Model<float>& model, const NamedBuffers& optimizer_state, const CheckpointMeta& meta,
                     const std::string& path) {
  std::string buf;
  buf.append(kMagic, 4);
  put<std::uint32_t>(buf, kVersion);

  nlohmann::json j;
  j["config"] = nlohmann::json::parse(model.config().to_json_string());
  j["meta"] = {{"epoch", meta.epoch}, {"step", meta.step}, {"best_metric", meta.best_metric}};
  j["has_optimizer"] = !optimizer_state.empty();
  const std::string cfg = j.dump();
  put<std::uint64_t>(buf, cfg.size());
  buf.append(cfg);

  const auto& params = model.parameters();
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(params.size() + optimizer_state.size()));
  for (const auto& p : params) put_tensor(buf, p.name, p.tensor.shape(), p.tensor.data(), p.tensor.numel());
  for (const auto& [name, vec] : optimizer_state)
    put_tensor(buf, name, Shape{static_cast<std::int64_t>(vec.size())}, vec.data(),
               static_cast<std::int64_t>(vec.size()));

  put<std::uint32_t>(buf, crc32(buf.data(), buf.size()));

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp + " for writing");
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot rename " + tmp + " to " + path);
}

LoadedCheckpoint checkpoint_load(const std::string& path) {
  std::string buf;
  {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint " + path);
    buf.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  }
  if (buf.size() < 12) throw IoError("checkpoint truncated: " + path);
  if (std::memcmp(buf.data(), kMagic, 4) != 0) throw IoError("bad checkpoint magic in " + path);

  const std::uint32_t stored_crc = [&] {
    std::uint32_t v;
    std::memcpy(&v, buf.data() + buf.size() - 4, 4);
    return v;
  }();
  if (crc32(buf.data(), buf.size() - 4) != stored_crc) throw IoError("checkpoint CRC mismatch in " + path);

  std::size_t off = 4;
  const auto version = take<std::uint32_t>(buf, off);
  if (version != kVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));

  const auto json_len = take<std::uint64_t>(buf, off);
  if (off + json_len > buf.size()) throw IoError("checkpoint truncated");
  const std::string cfg_text = buf.substr(off, json_len);
  off += json_len;

  nlohmann::json j = nlohmann::json::parse(cfg_text);
  LoadedCheckpoint out;
  out.config = ModelConfig::from_json_string(j.at("config").dump());
  if (j.contains("meta")) {
    out.meta.epoch = j["meta"].value("epoch", std::int64_t{0});
    out.meta.step = j["meta"].value("step", std::int64_t{0});
    out.meta.best_metric = j["meta"].value("best_metric", 0.0);
  }

  const auto count = take<std::uint32_t>(buf, off);
  std::map<std::string, std::pair<Shape, std::vector<float>>> table;
  std::vector<std::string> order;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = take<std::uint16_t>(buf, off);
    if (off + name_len > buf.size()) throw IoError("checkpoint truncated");
    std::string name = buf.substr(off, name_len);
    off += name_len;
    const auto dtype = take<std::uint8_t>(buf, off);
    if (dtype != 0) throw IoError("unsupported tensor dtype in checkpoint");
    const auto rank = take<std::uint8_t>(buf, off);
    Shape shape(rank);
    std::int64_t n = 1;
    for (std::uint8_t r = 0; r < rank; ++r) {
      shape[r] = static_cast<std::int64_t>(take<std::uint64_t>(buf, off));
      n *= shape[r];
    }
    if (off + static_cast<std::size_t>(n) * 4 > buf.size()) throw IoError("checkpoint truncated");
    std::vector<float> data(static_cast<std::size_t>(n));
    std::memcpy(data.data(), buf.data() + off, static_cast<std::size_t>(n) * 4);
    off += static_cast<std::size_t>(n) * 4;
    if (table.count(name)) throw IoError("duplicate tensor name in checkpoint: " + name);
    table[name] = {std::move(shape), std::move(data)};
    order.push_back(std::move(name));
  }

  out.model = std::make_shared<Model<float>>(out.config, 0);
  for (auto& p : out.model->parameters()) {
    auto it = table.find(p.name);
    if (it == table.end()) throw IoError("checkpoint is missing parameter " + p.name);
    if (it->second.first != p.tensor.shape())
      throw IoError("checkpoint shape mismatch for " + p.name + ": file " + shape_str(it->second.first) +
                    " vs model " + shape_str(p.tensor.shape()));
    p.tensor.values() = it->second.second;
    table.erase(it);
  }
  for (const auto& name : order)
    if (table.count(name)) {
      if (name.rfind("opt.", 0) != 0) throw IoError("unexpected tensor in checkpoint: " + name);
      out.optimizer_state.emplace_back(name, std::move(table[name].second));
    }
  return out;
}

void require_config_match(const ModelConfig& requested, const ModelConfig& loaded) {
  auto keys = diff_configs(requested, loaded);
  if (keys.empty()) return;
  std::string msg = "config mismatch on:";
  for (const auto& k : keys) msg += " " + k;
  throw ConfigError(msg);
}

}  // namespace twm
