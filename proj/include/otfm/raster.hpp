#pragma once

#include <optional>
#include <string>
#include <vector>

#include "otfm/common.hpp"

namespace otfm {

// Band-sequential image, values normalized to [0,1].
struct RasterImage {
  int bands = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;
  std::string sensor_tag;

  RasterImage() = default;
  RasterImage(int b, int h, int w)
      : bands(b), height(h), width(w), data(std::size_t(b) * h * w, 0.0) {
    if (b < 1 || h < 1 || w < 1)
      throw ArgumentError("RasterImage: dimensions must be positive");
  }

  std::size_t index(int b, int i, int j) const {
    return (std::size_t(b) * height + i) * width + j;
  }
  double& at(int b, int i, int j) { return data[index(b, i, j)]; }
  double at(int b, int i, int j) const { return data[index(b, i, j)]; }
  std::size_t pixel_count() const { return std::size_t(height) * width; }

  // Throws DataError when the shape/range invariants do not hold.
  void validate() const;
};

struct SampleTriplet {
  RasterImage pan;    // 1 x H x W
  RasterImage lrms;   // B x h x w
  std::optional<RasterImage> hrms_ref;
  int ratio = 0;

  void validate() const;
};

struct DatasetManifest {
  std::vector<std::string> entries;  // path stems relative to the manifest file
  std::string split;
  int ratio = 0;
  int bands = 0;
};

// Container I/O. bit_depth selects payload encoding: 8/16 quantize, 32 stores
// IEEE-754 floats.
RasterImage load_raster(const std::string& path);
void save_raster(const RasterImage& img, const std::string& path, int bit_depth = 32);

// Triplet entries are path stems; the loader appends ".pan.otfm",
// ".lrms.otfm" and optionally ".hrms.otfm".
SampleTriplet load_triplet(const std::string& stem);
void save_triplet(const SampleTriplet& t, const std::string& stem, int bit_depth = 32);

DatasetManifest load_manifest(const std::string& path);
void save_manifest(const DatasetManifest& m, const std::string& path);

// Directory of the manifest joined with an entry stem.
std::string resolve_entry(const std::string& manifest_path, const std::string& entry);

std::vector<SampleTriplet> extract_patches(const SampleTriplet& t, int patch_hr,
                                           int stride_hr);

}  // namespace otfm
