#include "otfm/raster.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace otfm {

namespace {

constexpr char kMagic[4] = {'O', 'T', 'F', 'M'};
constexpr std::uint8_t kVersion = 1;

void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(char(v & 0xff));
  s.push_back(char(v >> 8));
}
void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}
std::uint16_t get_u16(const unsigned char* p) {
  return std::uint16_t(p[0]) | (std::uint16_t(p[1]) << 8);
}
std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
         (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

}  // namespace

void RasterImage::validate() const {
  if (bands < 1 || height < 1 || width < 1)
    throw DataError("raster: non-positive dimensions");
  if (data.size() != std::size_t(bands) * height * width)
    throw DataError("raster: data length does not match bands*height*width");
  for (double v : data)
    if (!std::isfinite(v) || v < 0.0 || v > 1.0)
      throw DataError("raster: values must be finite and in [0,1]");
}

void SampleTriplet::validate() const {
  pan.validate();
  lrms.validate();
  if (ratio < 1) throw DataError("triplet: ratio must be >= 1");
  if (pan.bands != 1) throw DataError("triplet: pan must have exactly 1 band");
  if (pan.height != lrms.height * ratio || pan.width != lrms.width * ratio)
    throw DataError("triplet: pan dimensions must equal ratio * lrms dimensions");
  if (hrms_ref) {
    hrms_ref->validate();
    if (hrms_ref->bands != lrms.bands)
      throw DataError("triplet: hrms band count must match lrms");
    if (hrms_ref->height != pan.height || hrms_ref->width != pan.width)
      throw DataError("triplet: hrms dimensions must match pan");
  }
}

RasterImage load_raster(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open raster file: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  if (bytes.size() < 16) throw DataError("raster header truncated: " + path);
  const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (std::memcmp(p, kMagic, 4) != 0)
    throw DataError("bad raster magic in " + path);
  const std::uint8_t version = p[4];
  const std::uint8_t depth = p[5];
  if (version != kVersion)
    throw DataError("unsupported raster version " + std::to_string(version));
  if (depth != 8 && depth != 16 && depth != 32)
    throw DataError("unsupported bit depth " + std::to_string(depth));
  const std::uint16_t bands = get_u16(p + 6);
  const std::uint32_t height = get_u32(p + 8);
  const std::uint32_t width = get_u32(p + 12);
  if (bands == 0 || height == 0 || width == 0)
    throw DataError("raster declares empty dimensions: " + path);
  const std::size_t count = std::size_t(bands) * height * width;
  const std::size_t bytes_per = depth / 8;
  if (bytes.size() != 16 + count * bytes_per)
    throw DataError("raster payload size mismatch in " + path);

  RasterImage img(bands, int(height), int(width));
  const unsigned char* d = p + 16;
  if (depth == 8) {
    for (std::size_t i = 0; i < count; ++i) img.data[i] = double(d[i]) / 255.0;
  } else if (depth == 16) {
    for (std::size_t i = 0; i < count; ++i)
      img.data[i] = double(get_u16(d + 2 * i)) / 65535.0;
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t u = get_u32(d + 4 * i);
      float fv;
      std::memcpy(&fv, &u, 4);
      if (!std::isfinite(fv) || fv < 0.0f || fv > 1.0f)
        throw DataError("raster float payload outside [0,1] in " + path);
      img.data[i] = double(fv);
    }
  }
  return img;
}

void save_raster(const RasterImage& img, const std::string& path, int bit_depth) {
  img.validate();
  if (bit_depth != 8 && bit_depth != 16 && bit_depth != 32)
    throw ArgumentError("save_raster: bit depth must be 8, 16 or 32");
  if (img.bands > 0xffff) throw ArgumentError("save_raster: too many bands");
  std::string out;
  out.reserve(16 + img.data.size() * (bit_depth / 8));
  out.append(kMagic, 4);
  out.push_back(char(kVersion));
  out.push_back(char(bit_depth));
  put_u16(out, std::uint16_t(img.bands));
  put_u32(out, std::uint32_t(img.height));
  put_u32(out, std::uint32_t(img.width));
  if (bit_depth == 8) {
    for (double v : img.data)
      out.push_back(char(std::uint8_t(std::lround(v * 255.0))));
  } else if (bit_depth == 16) {
    for (double v : img.data) put_u16(out, std::uint16_t(std::lround(v * 65535.0)));
  } else {
    for (double v : img.data) {
      float fv = float(v);
      std::uint32_t u;
      std::memcpy(&u, &fv, 4);
      put_u32(out, u);
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open for writing: " + path);
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw DataError("write failed: " + path);
}

SampleTriplet load_triplet(const std::string& stem) {
  SampleTriplet t;
  t.pan = load_raster(stem + ".pan.otfm");
  t.lrms = load_raster(stem + ".lrms.otfm");
  if (std::filesystem::exists(stem + ".hrms.otfm"))
    t.hrms_ref = load_raster(stem + ".hrms.otfm");
  if (t.lrms.height == 0 || t.pan.height % t.lrms.height != 0)
    throw DataError("triplet " + stem + ": pan/lrms sizes not an integer ratio");
  t.ratio = t.pan.height / t.lrms.height;
  t.validate();
  return t;
}

void save_triplet(const SampleTriplet& t, const std::string& stem, int bit_depth) {
  t.validate();
  save_raster(t.pan, stem + ".pan.otfm", bit_depth);
  save_raster(t.lrms, stem + ".lrms.otfm", bit_depth);
  if (t.hrms_ref) save_raster(*t.hrms_ref, stem + ".hrms.otfm", bit_depth);
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest: " + path);
  std::string header;
  if (!std::getline(f, header)) throw DataError("empty manifest: " + path);
  DatasetManifest m;
  {
    std::istringstream hs(header);
    std::string tag, ver, kv;
    hs >> tag >> ver;
    if (tag != "#otfm-manifest" || ver != "v1")
      throw DataError("manifest header must start with '#otfm-manifest v1': " + path);
    while (hs >> kv) {
      auto eq = kv.find('=');
      if (eq == std::string::npos)
        throw DataError("malformed manifest header field '" + kv + "'");
      const std::string key = kv.substr(0, eq);
      const std::string val = kv.substr(eq + 1);
      try {
        if (key == "ratio")
          m.ratio = std::stoi(val);
        else if (key == "bands")
          m.bands = std::stoi(val);
        else
          throw DataError("unknown manifest header field '" + key + "'");
      } catch (const std::invalid_argument&) {
        throw DataError("non-integer manifest header value '" + kv + "'");
      }
    }
  }
  if (m.ratio < 1 || m.bands < 1)
    throw DataError("manifest must declare positive ratio and bands: " + path);
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    m.entries.push_back(line);
  }
  return m;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot open manifest for writing: " + path);
  f << "#otfm-manifest v1 ratio=" << m.ratio << " bands=" << m.bands << "\n";
  for (const auto& e : m.entries) f << e << "\n";
  if (!f) throw DataError("manifest write failed: " + path);
}

std::string resolve_entry(const std::string& manifest_path, const std::string& entry) {
  std::filesystem::path dir = std::filesystem::path(manifest_path).parent_path();
  return (dir / entry).string();
}

std::vector<SampleTriplet> extract_patches(const SampleTriplet& t, int patch_hr,
                                           int stride_hr) {
  t.validate();
  const int r = t.ratio;
  if (patch_hr < 1 || stride_hr < 1 || patch_hr % r != 0 || stride_hr % r != 0)
    throw ArgumentError("extract_patches: patch and stride must be positive and divisible by ratio");
  const int H = t.pan.height, W = t.pan.width;
  if (patch_hr > H || patch_hr > W)
    throw ArgumentError("extract_patches: patch larger than image");

  auto crop = [](const RasterImage& img, int top, int left, int size) {
    RasterImage out(img.bands, size, size);
    out.sensor_tag = img.sensor_tag;
    for (int b = 0; b < img.bands; ++b)
      for (int i = 0; i < size; ++i)
        for (int j = 0; j < size; ++j)
          out.at(b, i, j) = img.at(b, top + i, left + j);
    return out;
  };

  std::vector<SampleTriplet> patches;
  for (int top = 0; top + patch_hr <= H; top += stride_hr)
    for (int left = 0; left + patch_hr <= W; left += stride_hr) {
      SampleTriplet p;
      p.ratio = r;
      p.pan = crop(t.pan, top, left, patch_hr);
      p.lrms = crop(t.lrms, top / r, left / r, patch_hr / r);
      if (t.hrms_ref) p.hrms_ref = crop(*t.hrms_ref, top, left, patch_hr);
      patches.push_back(std::move(p));
    }
  return patches;
}

}  // namespace otfm
