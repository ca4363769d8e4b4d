#include "topowmamba/phantom.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "topowmamba/dataset.hpp"

namespace twm {

namespace fs = std::filesystem;
using nlohmann::json;

void PhantomSpec::validate() const {
  if (n_samples < 1) throw ConfigError("PhantomSpec: n_samples must be >= 1");
  if (h < 16 || w < 16) throw ConfigError("PhantomSpec: image extents must be >= 16");
  if (num_classes < 2) throw ConfigError("PhantomSpec: num_classes must be >= 2");
  if (noise_sigma < 0) throw ConfigError("PhantomSpec: noise_sigma must be >= 0");
  const double m = static_cast<double>(std::min(h, w));
  if (ellipse_r_min <= 0 || ellipse_r_min > ellipse_r_max || ellipse_r_max > 0.45)
    throw ConfigError("PhantomSpec: ellipse radius range invalid");
  if (tube_r_min <= 0 || tube_r_min > tube_r_max || tube_r_max > 0.2)
    throw ConfigError("PhantomSpec: tube radius range invalid");
  if (ellipse_r_min * m < 2.0 || tube_r_min * m < 1.0)
    throw ConfigError("PhantomSpec: radii too small to guarantee foreground pixels");
  if (!intensity.empty()) {
    if (static_cast<std::int64_t>(intensity.size()) != num_classes)
      throw ConfigError("PhantomSpec: intensity must list one band per class");
    for (const auto& b : intensity)
      if (b[0] < 0 || b[1] > 1 || b[0] > b[1]) throw ConfigError("PhantomSpec: intensity bands must be within [0,1]");
  }
}

std::vector<std::array<double, 2>> PhantomSpec::effective_intensity() const {
  if (!intensity.empty()) return intensity;
  std::vector<std::array<double, 2>> bands;
  const double lo = 0.05, hi = 0.95;
  const double span = (hi - lo) / static_cast<double>(num_classes);
  for (std::int64_t c = 0; c < num_classes; ++c) {
    const double center = lo + (static_cast<double>(c) + 0.5) * span;
    bands.push_back({center - 0.3 * span, center + 0.3 * span});
  }
  return bands;
}

std::string PhantomSpec::to_json_string(int indent) const {
  json j;
  j["n_samples"] = n_samples;
  j["h"] = h;
  j["w"] = w;
  j["num_classes"] = num_classes;
  j["noise_sigma"] = noise_sigma;
  j["ellipse_r_min"] = ellipse_r_min;
  j["ellipse_r_max"] = ellipse_r_max;
  j["tube_r_min"] = tube_r_min;
  j["tube_r_max"] = tube_r_max;
  if (!intensity.empty()) j["intensity"] = intensity;
  j["seed"] = seed;
  return j.dump(indent);
}

PhantomSpec PhantomSpec::from_json_string(const std::string& text) {
  json j = json::parse(text);
  PhantomSpec s;
  if (j.contains("n_samples")) s.n_samples = j["n_samples"].get<std::int64_t>();
  if (j.contains("h")) s.h = j["h"].get<std::int64_t>();
  if (j.contains("w")) s.w = j["w"].get<std::int64_t>();
  if (j.contains("num_classes")) s.num_classes = j["num_classes"].get<std::int64_t>();
  if (j.contains("noise_sigma")) s.noise_sigma = j["noise_sigma"].get<double>();
  if (j.contains("ellipse_r_min")) s.ellipse_r_min = j["ellipse_r_min"].get<double>();
  if (j.contains("ellipse_r_max")) s.ellipse_r_max = j["ellipse_r_max"].get<double>();
  if (j.contains("tube_r_min")) s.tube_r_min = j["tube_r_min"].get<double>();
  if (j.contains("tube_r_max")) s.tube_r_max = j["tube_r_max"].get<double>();
  if (j.contains("intensity")) s.intensity = j["intensity"].get<std::vector<std::array<double, 2>>>();
  if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
  s.validate();
  return s;
}

namespace {

void fill_ellipse(std::vector<std::uint8_t>& mask, std::int64_t h, std::int64_t w, double cy, double cx, double a,
                  double b, double theta, std::uint8_t cls) {
  const double ct = std::cos(theta), st = std::sin(theta);
  for (std::int64_t r = 0; r < h; ++r) {
    for (std::int64_t c = 0; c < w; ++c) {
      const double dy = static_cast<double>(r) + 0.5 - cy;
      const double dx = static_cast<double>(c) + 0.5 - cx;
      const double u = (dx * ct + dy * st) / a;
      const double v = (-dx * st + dy * ct) / b;
      if (u * u + v * v <= 1.0) mask[static_cast<std::size_t>(r * w + c)] = cls;
    }
  }
}

void fill_tube(std::vector<std::uint8_t>& mask, std::int64_t h, std::int64_t w, double col0, double amp, double freq,
               double phase, double radius, std::uint8_t cls) {
  // dense polyline down the image
  const std::int64_t steps = 4 * h;
  std::vector<std::pair<double, double>> path;
  path.reserve(static_cast<std::size_t>(steps));
  for (std::int64_t i = 0; i < steps; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(steps - 1);
    const double row = t * (static_cast<double>(h) - 1.0);
    const double col = col0 + amp * std::sin(2.0 * M_PI * freq * t + phase);
    path.emplace_back(row, col);
  }
  const double r2 = radius * radius;
  for (std::int64_t r = 0; r < h; ++r) {
    for (std::int64_t c = 0; c < w; ++c) {
      const double py = static_cast<double>(r) + 0.5, px = static_cast<double>(c) + 0.5;
      for (const auto& [qy, qx] : path) {
        const double dy = py - qy, dx = px - qx;
        if (dy * dy + dx * dx <= r2) {
          mask[static_cast<std::size_t>(r * w + c)] = cls;
          break;
        }
      }
    }
  }
}

bool all_classes_present(const std::vector<std::uint8_t>& mask, std::int64_t num_classes) {
  std::vector<bool> seen(static_cast<std::size_t>(num_classes), false);
  for (auto v : mask) seen[v] = true;
  for (bool s : seen)
    if (!s) return false;
  return true;
}

}  // namespace

PhantomSample gen_phantom_sample(const PhantomSpec& spec, std::int64_t index) {
  spec.validate();
  Rng rng(Rng::derive_seed(spec.seed, 0x5A17u + static_cast<std::uint64_t>(index)));
  const auto h = spec.h, w = spec.w;
  const double m = static_cast<double>(std::min(h, w));
  const std::int64_t k_fg = spec.num_classes - 1;
  const std::int64_t n_ellipses = k_fg >= 2 ? k_fg - 1 : 1;
  const bool has_tube = k_fg >= 2;

  for (int attempt = 0; attempt < 64; ++attempt) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(h * w), 0);
    const double cy = static_cast<double>(h) * (0.5 + rng.uniform(-0.08, 0.08));
    const double cx = static_cast<double>(w) * (0.5 + rng.uniform(-0.08, 0.08));
    const double a = rng.uniform(spec.ellipse_r_min, spec.ellipse_r_max) * m;
    const double b = rng.uniform(spec.ellipse_r_min, spec.ellipse_r_max) * m;
    const double theta = rng.uniform(0.0, M_PI);
    for (std::int64_t e = 0; e < n_ellipses; ++e) {
      const double scale = std::pow(0.62, static_cast<double>(e));
      fill_ellipse(mask, h, w, cy, cx, a * scale, b * scale, theta, static_cast<std::uint8_t>(e + 1));
    }
    if (has_tube) {
      const double amp = rng.uniform(0.08, 0.2) * static_cast<double>(w);
      const double freq = rng.uniform(0.6, 1.6);
      const double phase = rng.uniform(0.0, 2.0 * M_PI);
      const double radius = rng.uniform(spec.tube_r_min, spec.tube_r_max) * m;
      // let the tube pass near the ellipse stack so class boundaries touch
      const double col0 = cx + rng.uniform(-0.15, 0.15) * static_cast<double>(w);
      fill_tube(mask, h, w, col0, amp, freq, phase, radius, static_cast<std::uint8_t>(k_fg));
    }
    if (!all_classes_present(mask, spec.num_classes)) continue;

    const auto bands = spec.effective_intensity();
    std::vector<double> level(static_cast<std::size_t>(spec.num_classes));
    for (std::int64_t c = 0; c < spec.num_classes; ++c)
      level[static_cast<std::size_t>(c)] = rng.uniform(bands[static_cast<std::size_t>(c)][0],
                                                       bands[static_cast<std::size_t>(c)][1]);
    PhantomSample out;
    out.image.resize(static_cast<std::size_t>(h * w));
    for (std::int64_t p = 0; p < h * w; ++p) {
      double v = level[mask[static_cast<std::size_t>(p)]] + spec.noise_sigma * rng.normal();
      out.image[static_cast<std::size_t>(p)] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    out.mask.h = h;
    out.mask.w = w;
    out.mask.classes = std::move(mask);
    return out;
  }
  throw ConfigError("gen_phantom_sample: could not realize every class; spec too tight");
}

void gen_phantoms(const PhantomSpec& spec, const std::string& out_dir) {
  spec.validate();
  fs::create_directories(fs::path(out_dir) / "images");
  fs::create_directories(fs::path(out_dir) / "masks");

  DatasetManifest manifest;
  manifest.h = spec.h;
  manifest.w = spec.w;
  manifest.num_classes = spec.num_classes;
  manifest.spacing_r = 1.0;
  manifest.spacing_c = 1.0;
  manifest.class_names.push_back("background");
  const std::int64_t k_fg = spec.num_classes - 1;
  const std::int64_t n_ellipses = k_fg >= 2 ? k_fg - 1 : 1;
  for (std::int64_t e = 0; e < n_ellipses; ++e)
    manifest.class_names.push_back(n_ellipses == 1 ? "ellipse" : "ellipse" + std::to_string(e + 1));
  if (k_fg >= 2) manifest.class_names.push_back("tube");

  // seeded 70/15/15 split
  std::vector<std::int64_t> order(static_cast<std::size_t>(spec.n_samples));
  for (std::int64_t i = 0; i < spec.n_samples; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng split_rng(Rng::derive_seed(spec.seed, 0x5917u));
  split_rng.shuffle(order.begin(), order.end());
  std::vector<std::string> split_of(static_cast<std::size_t>(spec.n_samples));
  const auto n_train = std::max<std::int64_t>(1, spec.n_samples * 70 / 100);
  const auto n_val = std::min(spec.n_samples - n_train, spec.n_samples * 15 / 100);
  for (std::int64_t pos = 0; pos < spec.n_samples; ++pos) {
    const auto idx = order[static_cast<std::size_t>(pos)];
    split_of[static_cast<std::size_t>(idx)] = pos < n_train ? "train" : pos < n_train + n_val ? "val" : "test";
  }

  char id[32];
  for (std::int64_t i = 0; i < spec.n_samples; ++i) {
    std::snprintf(id, sizeof(id), "s%05lld", static_cast<long long>(i));
    auto sample = gen_phantom_sample(spec, i);
    SampleRef ref;
    ref.id = id;
    ref.image = std::string("images/") + id + ".f32";
    ref.mask = std::string("masks/") + id + ".u8";
    ref.split = split_of[static_cast<std::size_t>(i)];
    write_image_f32((fs::path(out_dir) / ref.image).string(), sample.image);
    write_mask_u8((fs::path(out_dir) / ref.mask).string(), sample.mask);
    manifest.samples.push_back(std::move(ref));
  }
  save_manifest(manifest, out_dir);
}

}  // namespace twm
