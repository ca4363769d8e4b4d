#include "topowmamba/dataset.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace twm {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<const SampleRef*> DatasetManifest::split_samples(const std::string& split) const {
  std::vector<const SampleRef*> out;
  for (const auto& s : samples)
    if (s.split == split) out.push_back(&s);
  return out;
}

DatasetManifest load_manifest(const std::string& dir) {
  const auto path = fs::path(dir) / "manifest.json";
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  json j = json::parse(f);
  DatasetManifest m;
  m.root = dir;
  m.h = j.at("h").get<std::int64_t>();
  m.w = j.at("w").get<std::int64_t>();
  m.num_classes = j.at("num_classes").get<std::int64_t>();
  m.class_names = j.at("class_names").get<std::vector<std::string>>();
  auto sp = j.at("spacing_mm").get<std::vector<double>>();
  if (sp.size() != 2) throw IoError("manifest spacing_mm must be [row, col]");
  m.spacing_r = sp[0];
  m.spacing_c = sp[1];
  for (const auto& e : j.at("samples")) {
    SampleRef r;
    r.id = e.at("id").get<std::string>();
    r.image = e.at("image").get<std::string>();
    r.mask = e.at("mask").get<std::string>();
    r.split = e.at("split").get<std::string>();
    m.samples.push_back(std::move(r));
  }
  return m;
}

void save_manifest(const DatasetManifest& m, const std::string& dir) {
  json j;
  j["h"] = m.h;
  j["w"] = m.w;
  j["num_classes"] = m.num_classes;
  j["class_names"] = m.class_names;
  j["spacing_mm"] = json::array({m.spacing_r, m.spacing_c});
  j["samples"] = json::array();
  for (const auto& s : m.samples)
    j["samples"].push_back({{"id", s.id}, {"image", s.image}, {"mask", s.mask}, {"split", s.split}});
  std::ofstream f(fs::path(dir) / "manifest.json", std::ios::trunc);
  if (!f) throw IoError("cannot write manifest in " + dir);
  f << j.dump(2) << "\n";
}

std::vector<float> read_image_f32(const std::string& path, std::int64_t expected) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open image " + path);
  std::vector<float> data(static_cast<std::size_t>(expected));
  f.read(reinterpret_cast<char*>(data.data()), expected * 4);
  if (f.gcount() != expected * 4) throw IoError("image " + path + " is not " + std::to_string(expected) + " floats");
  f.peek();
  if (!f.eof()) throw IoError("image " + path + " has trailing bytes");
  return data;
}

void write_image_f32(const std::string& path, const std::vector<float>& data) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write image " + path);
  f.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * 4));
}

LabelMask read_mask_u8(const std::string& path, std::int64_t h, std::int64_t w, double sr, double sc) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open mask " + path);
  LabelMask m;
  m.h = h;
  m.w = w;
  m.spacing_r = sr;
  m.spacing_c = sc;
  m.classes.resize(static_cast<std::size_t>(h * w));
  f.read(reinterpret_cast<char*>(m.classes.data()), h * w);
  if (f.gcount() != h * w) throw IoError("mask " + path + " is not " + std::to_string(h * w) + " bytes");
  return m;
}

void write_mask_u8(const std::string& path, const LabelMask& mask) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write mask " + path);
  f.write(reinterpret_cast<const char*>(mask.classes.data()), static_cast<std::streamsize>(mask.classes.size()));
}

namespace {

int pgm_next_int(std::istream& s) {
  // skips whitespace and '#' comments
  for (;;) {
    int c = s.peek();
    if (c == '#') {
      std::string line;
      std::getline(s, line);
    } else if (std::isspace(c)) {
      s.get();
    } else {
      break;
    }
  }
  int v;
  if (!(s >> v)) throw IoError("malformed PGM header");
  return v;
}

}  // namespace

std::vector<float> read_pgm(const std::string& path, std::int64_t& h, std::int64_t& w) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  char m0 = 0, m1 = 0;
  f.get(m0);
  f.get(m1);
  if (m0 != 'P' || m1 != '5') throw IoError(path + " is not a binary (P5) PGM");
  w = pgm_next_int(f);
  h = pgm_next_int(f);
  const int maxval = pgm_next_int(f);
  if (maxval <= 0 || maxval > 255) throw IoError(path + ": only 8-bit PGM is supported");
  f.get();  // single whitespace after maxval
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(h * w));
  f.read(reinterpret_cast<char*>(raw.data()), h * w);
  if (f.gcount() != h * w) throw IoError(path + ": truncated PGM payload");
  std::vector<float> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = static_cast<float>(raw[i]);
  return out;
}

void write_pgm(const std::string& path, const std::vector<std::uint8_t>& gray, std::int64_t h, std::int64_t w) {
  if (static_cast<std::int64_t>(gray.size()) != h * w) throw ShapeError("write_pgm: size mismatch");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f << "P5\n" << w << " " << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
}

void write_ppm(const std::string& path, const std::vector<std::uint8_t>& rgb, std::int64_t h, std::int64_t w) {
  if (static_cast<std::int64_t>(rgb.size()) != 3 * h * w) throw ShapeError("write_ppm: size mismatch");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f << "P6\n" << w << " " << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

std::vector<float> preprocess_slice(const std::vector<float>& img, std::int64_t h, std::int64_t w,
                                    std::int64_t target_h, std::int64_t target_w,
                                    std::optional<std::pair<double, double>> window) {
  if (h < 1 || w < 1 || static_cast<std::int64_t>(img.size()) != h * w)
    throw ShapeError("preprocess_slice: empty or mis-sized image");
  std::vector<float> work = img;
  for (auto& v : work) {
    if (!std::isfinite(v)) throw NumericError("preprocess_slice: non-finite input");
    if (window) v = static_cast<float>(std::clamp(static_cast<double>(v), window->first, window->second));
  }
  float lo = work[0], hi = work[0];
  for (auto v : work) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi > lo) {
    const float inv = 1.0f / (hi - lo);
    for (auto& v : work) v = (v - lo) * inv;
  } else {
    std::fill(work.begin(), work.end(), 0.0f);
  }
  if (h == target_h && w == target_w) return work;

  // bilinear, align_corners = false
  std::vector<float> out(static_cast<std::size_t>(target_h * target_w));
  const double sr = static_cast<double>(h) / static_cast<double>(target_h);
  const double sc = static_cast<double>(w) / static_cast<double>(target_w);
  for (std::int64_t r = 0; r < target_h; ++r) {
    const double fy = (static_cast<double>(r) + 0.5) * sr - 0.5;
    const auto y0 = static_cast<std::int64_t>(std::floor(fy));
    const double wy = fy - std::floor(fy);
    const auto y0c = std::clamp<std::int64_t>(y0, 0, h - 1);
    const auto y1c = std::clamp<std::int64_t>(y0 + 1, 0, h - 1);
    for (std::int64_t c = 0; c < target_w; ++c) {
      const double fx = (static_cast<double>(c) + 0.5) * sc - 0.5;
      const auto x0 = static_cast<std::int64_t>(std::floor(fx));
      const double wx = fx - std::floor(fx);
      const auto x0c = std::clamp<std::int64_t>(x0, 0, w - 1);
      const auto x1c = std::clamp<std::int64_t>(x0 + 1, 0, w - 1);
      const double v = (1 - wy) * ((1 - wx) * work[static_cast<std::size_t>(y0c * w + x0c)] +
                                   wx * work[static_cast<std::size_t>(y0c * w + x1c)]) +
                       wy * ((1 - wx) * work[static_cast<std::size_t>(y1c * w + x0c)] +
                             wx * work[static_cast<std::size_t>(y1c * w + x1c)]);
      out[static_cast<std::size_t>(r * target_w + c)] = static_cast<float>(v);
    }
  }
  return out;
}

}  // namespace twm
