#pragma once

#include "otfm/degradation.hpp"
#include "otfm/raster.hpp"

namespace otfm {

// Amplitude of the deterministic perturbation separating PAN from the exact
// band mean.
constexpr double kPanNoiseAmp = 0.01;

// Deterministic synthetic triplet: HRMS as clipped Gaussian-blob fields with
// band-correlated coarse and fine structure, PAN as the band mean plus a
// small perturbation, LRMS via the sensor observation model. Pure function of
// its arguments.
SampleTriplet synth_scene(std::uint64_t seed, int bands, int hr_size, int ratio);

}  // namespace otfm
