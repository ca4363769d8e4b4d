#pragma once

#include <optional>

#include "topowmamba/metrics.hpp"

namespace twm {

struct SampleRef {
  std::string id;
  std::string image;  // path relative to the dataset dir
  std::string mask;
  std::string split;  // train | val | test
};

struct DatasetManifest {
  std::int64_t h = 0, w = 0, num_classes = 0;
  std::vector<std::string> class_names;
  double spacing_r = 1.0, spacing_c = 1.0;
  std::vector<SampleRef> samples;
  std::string root;

  std::vector<const SampleRef*> split_samples(const std::string& split) const;
};

DatasetManifest load_manifest(const std::string& dir);
void save_manifest(const DatasetManifest& m, const std::string& dir);

// raw little-endian f32 image and u8 mask payloads
std::vector<float> read_image_f32(const std::string& path, std::int64_t expected);
void write_image_f32(const std::string& path, const std::vector<float>& data);
LabelMask read_mask_u8(const std::string& path, std::int64_t h, std::int64_t w, double sr, double sc);
void write_mask_u8(const std::string& path, const LabelMask& mask);

// binary PGM (P5, maxval <= 255) and PPM (P6) support for prediction IO
std::vector<float> read_pgm(const std::string& path, std::int64_t& h, std::int64_t& w);
void write_pgm(const std::string& path, const std::vector<std::uint8_t>& gray, std::int64_t h, std::int64_t w);
void write_ppm(const std::string& path, const std::vector<std::uint8_t>& rgb, std::int64_t h, std::int64_t w);

// Optional window clamp, per-slice min-max normalization to [0,1] (constant
// slices map to zeros), bilinear resize to the target extents.
std::vector<float> preprocess_slice(const std::vector<float>& img, std::int64_t h, std::int64_t w,
                                    std::int64_t target_h, std::int64_t target_w,
                                    std::optional<std::pair<double, double>> window = std::nullopt);

}  // namespace twm
