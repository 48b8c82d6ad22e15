#pragma once

#include <complex>
#include <span>
#include <vector>

#include "ringmo/tensor.hpp"

// 2-D discrete Fourier analysis of image patches.
//
// Patches are real [H, W] matrices. Radial distances are measured in
// normalized frequency, scaled so that the axis Nyquist frequency sits at
// radius 1: rho = 2 * sqrt((ky/H)^2 + (kx/W)^2). A bin belongs to the high
// band iff rho > cutoff, so the DC bin is always low.
namespace ringmo::freq {

using Complex = std::complex<double>;
using Patch = Tensor<double>;

constexpr double kDefaultCutoff = 0.25;
constexpr double kDefaultThreshold = 0.5;

struct FrequencySpectrum {
  int height = 0;
  int width = 0;
  std::vector<Complex> coeffs;  // row-major [height][width], unnormalized
  bool dc_centered = false;

  Complex& at(int y, int x) { return coeffs[static_cast<std::size_t>(y) * width + x]; }
  const Complex& at(int y, int x) const { return coeffs[static_cast<std::size_t>(y) * width + x]; }
};

/// Direct O(H^2 W^2) transform. The reference every other path is checked against.
FrequencySpectrum dft2_direct(const Patch& patch);

/// Row-column transform with cached twiddles; O(HW(H+W)).
FrequencySpectrum dft2(const Patch& patch);

/// Inverse transform (divides by H*W); accepts centered or uncentered
/// spectra. Returns the real part and reports the largest |imag| seen.
Patch idft2(const FrequencySpectrum& spec, double* max_imag = nullptr);

/// Moves frequency (0,0) to index (H/2, W/2).
FrequencySpectrum centered(FrequencySpectrum spec);
/// Inverse of centered().
FrequencySpectrum uncentered(FrequencySpectrum spec);

/// Normalized radius of a bin at centered index (y, x).
double normalized_radius(int y, int x, int height, int width);

struct BandEnergy {
  double high = 0;
  double total = 0;
};

BandEnergy band_energy(const FrequencySpectrum& spec, double cutoff_radius);

/// Fraction of energy strictly beyond the cutoff. Requires a centered
/// spectrum. An all-zero spectrum yields 0.
double radial_energy_ratio(const FrequencySpectrum& spec, double cutoff_radius);

enum class Band { Low, High };

struct FreqClass {
  Band band = Band::Low;
  double ratio = 0;
};

/// High iff the radial energy ratio of the mean-removed patch exceeds the
/// threshold. Removing the mean makes the class independent of brightness
/// offsets; a constant patch has no AC energy and is Low.
FreqClass classify_patch(const Patch& patch, double cutoff_radius = kDefaultCutoff,
                         double threshold = kDefaultThreshold);

/// Classifies a multi-channel patch by pooling band energy over channels.
FreqClass classify_channels(std::span<const Patch> channels, double cutoff_radius = kDefaultCutoff,
                            double threshold = kDefaultThreshold);

enum class FilterKind { HighPass, LowPass };

/// Zeroes the complementary band and inverse-transforms. The real part is
/// returned; `imag_residue` receives the discarded imaginary magnitude.
Patch ideal_filter(const Patch& patch, double cutoff_radius, FilterKind kind, double* imag_residue = nullptr);

/// log(1 + |coeff|) of a centered spectrum, as an [H, W] matrix.
Patch log_magnitude(const FrequencySpectrum& spec);

const char* to_string(Band band);

}  // namespace ringmo::freq
