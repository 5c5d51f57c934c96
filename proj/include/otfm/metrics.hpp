#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "otfm/degradation.hpp"
#include "otfm/raster.hpp"
#include "otfm/sampler.hpp"

// Fusion quality metrics. Reduced-resolution protocol compares against a
// reference (SAM, ERGAS, SCC, Q2n); full-resolution protocol scores spectral
// and spatial consistency without one (D_lambda, D_s, HQNR).

namespace otfm::metrics {

// Mean spectral angle between per-pixel band vectors, in degrees. Pixels
// where either vector has zero norm contribute an angle of 0.
double sam(const RasterImage& fused, const RasterImage& ref);

// 100/ratio * sqrt(mean_b (RMSE_b / mean_b(ref))^2); band means guarded by
// 1e-12 so empty bands cannot divide by zero.
double ergas(const RasterImage& fused, const RasterImage& ref, int ratio);

// Mean per-band Pearson correlation of Laplacian high-pass detail
// ([[0,-1,0],[-1,4,-1],[0,-1,0]], edge replication). Bands whose detail is
// constant in either image contribute 0; their indices are appended to
// `degenerate` when given.
double scc(const RasterImage& fused, const RasterImage& ref,
           std::vector<int>* degenerate = nullptr);

// Windowed universal image quality index of two single-band images
// (correlation * luminance * contrast), averaged over window x window tiles
// with stride = window; an image smaller than the window is one whole-image
// window.
double uiqi(const RasterImage& a, const RasterImage& b, int window = 32);

// Hypercomplex generalization of the quality index: bands are zero-padded to
// the next power of two and each pixel becomes one Cayley-Dickson 2^k-on.
// Per window Q = 4 |cov| |m1| |m2| / ((var1 + var2) (|m1|^2 + |m2|^2)),
// averaged over tiles as in uiqi. Identical inputs score 1.
double q2n(const RasterImage& fused, const RasterImage& ref, int window = 32);

// Spectral distortion: 1 - Q2n between the MTF-degraded fusion and the
// observed LRMS.
double d_lambda(const RasterImage& fused, const RasterImage& lrms,
                const MtfSpec& mtf);

// Spatial distortion: mean over bands of |Q(fused_b, pan) - Q(lrms_b,
// degraded pan)|.
double d_s(const RasterImage& fused, const RasterImage& lrms,
           const RasterImage& pan, const MtfSpec& mtf);

// (1 - d_lambda)(1 - d_s); both inputs must lie in [0,1].
double hqnr(double d_lambda_value, double d_s_value);

enum class Protocol { reduced, full };

struct MetricReport {
  Protocol protocol = Protocol::reduced;
  std::vector<std::map<std::string, double>> per_image;
  std::map<std::string, std::pair<double, double>> aggregate;  // mean, std
};

// Population mean/std aggregation of the per-image maps.
void aggregate_report(MetricReport& report);

// Machine-readable lines "metric=<name> mean=<v> std=<v>".
std::string report_lines(const MetricReport& report);

// Human-readable aligned table.
std::string report_table(const MetricReport& report);

// One-step fusion of every manifest entry, scored under the chosen protocol.
// The reduced protocol needs hrms_ref on every triplet.
template <typename S>
MetricReport evaluate(const std::string& manifest_path,
                      const train::CheckpointData<S>& ck, Protocol protocol) {
  DatasetManifest manifest = load_manifest(manifest_path);
  if (manifest.entries.empty()) throw DataError("evaluate: manifest is empty");

  MetricReport report;
  report.protocol = protocol;
  for (const std::string& entry : manifest.entries) {
    SampleTriplet t = load_triplet(resolve_entry(manifest_path, entry));
    if (protocol == Protocol::reduced && !t.hrms_ref)
      throw DataError("evaluate: reduced protocol requires a reference: " + entry);

    sample::FusionRequest req;
    req.pan = t.pan;
    req.lrms = t.lrms;
    req.steps = 1;
    RasterImage fused = sample::fuse(req, ck);

    MtfSpec spec = ck.mtf;
    spec.ratio = t.ratio;
    std::map<std::string, double> row;
    if (protocol == Protocol::reduced) {
      row["sam"] = sam(fused, *t.hrms_ref);
      row["ergas"] = ergas(fused, *t.hrms_ref, t.ratio);
      row["scc"] = scc(fused, *t.hrms_ref);
      row["q2n"] = q2n(fused, *t.hrms_ref);
    } else {
      const double dl = d_lambda(fused, t.lrms, spec);
      const double ds = d_s(fused, t.lrms, t.pan, spec);
      row["d_lambda"] = dl;
      row["d_s"] = ds;
      row["hqnr"] = hqnr(dl, ds);
    }
    report.per_image.push_back(std::move(row));
  }
  aggregate_report(report);
  return report;
}

}  // namespace otfm::metrics
