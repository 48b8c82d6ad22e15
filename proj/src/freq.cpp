#include "ringmo/freq.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace ringmo::freq {

namespace {

void check_patch(const Patch& patch) {
  if (patch.rank() != 2) throw ShapeError("expected an [H,W] patch, got " + shape_str(patch.shape()));
}

void check_cutoff(double cutoff) {
  if (!(cutoff > 0.0 && cutoff < 1.0)) {
    throw std::invalid_argument("cutoff radius must lie in (0,1), got " + std::to_string(cutoff));
  }
}

// e^{sign * 2 pi i k / n} for k in [0, n)
std::vector<Complex> twiddles(int n, double sign) {
  std::vector<Complex> t(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    const double a = sign * 2.0 * std::numbers::pi * k / n;
    t[k] = Complex(std::cos(a), std::sin(a));
  }
  return t;
}

// In-place 1-D DFT over a strided line.
void dft_line(Complex* base, int n, std::ptrdiff_t stride, const std::vector<Complex>& tw, std::vector<Complex>& tmp) {
  tmp.assign(static_cast<std::size_t>(n), Complex(0, 0));
  for (int k = 0; k < n; ++k) {
    Complex acc(0, 0);
    for (int j = 0; j < n; ++j) acc += base[j * stride] * tw[(static_cast<long>(k) * j) % n];
    tmp[k] = acc;
  }
  for (int k = 0; k < n; ++k) base[k * stride] = tmp[k];
}

void transform_2d(FrequencySpectrum& s, double sign) {
  const auto row_tw = twiddles(s.width, sign);
  const auto col_tw = twiddles(s.height, sign);
  std::vector<Complex> tmp;
  for (int y = 0; y < s.height; ++y) dft_line(&s.at(y, 0), s.width, 1, row_tw, tmp);
  for (int x = 0; x < s.width; ++x) dft_line(&s.at(0, x), s.height, s.width, col_tw, tmp);
}

FrequencySpectrum shifted(const FrequencySpectrum& spec, bool forward) {
  FrequencySpectrum out = spec;
  const int h = spec.height, w = spec.width;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      // centered index i holds frequency i - n/2
      const int sy = forward ? (y - h / 2 + h) % h : (y + h / 2) % h;
      const int sx = forward ? (x - w / 2 + w) % w : (x + w / 2) % w;
      out.at(y, x) = spec.at(sy, sx);
    }
  out.dc_centered = forward;
  return out;
}

}  // namespace

FrequencySpectrum dft2_direct(const Patch& patch) {
  check_patch(patch);
  FrequencySpectrum s;
  s.height = static_cast<int>(patch.dim(0));
  s.width = static_cast<int>(patch.dim(1));
  s.coeffs.assign(static_cast<std::size_t>(s.height) * s.width, Complex(0, 0));
  for (int u = 0; u < s.height; ++u)
    for (int v = 0; v < s.width; ++v) {
      Complex acc(0, 0);
      for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) {
          const double a = -2.0 * std::numbers::pi *
                           (static_cast<double>(u) * y / s.height + static_cast<double>(v) * x / s.width);
          acc += patch[static_cast<std::int64_t>(y) * s.width + x] * Complex(std::cos(a), std::sin(a));
        }
      s.at(u, v) = acc;
    }
  return s;
}

FrequencySpectrum dft2(const Patch& patch) {
  check_patch(patch);
  FrequencySpectrum s;
  s.height = static_cast<int>(patch.dim(0));
  s.width = static_cast<int>(patch.dim(1));
  s.coeffs.assign(patch.vec().begin(), patch.vec().end());
  transform_2d(s, -1.0);
  return s;
}

Patch idft2(const FrequencySpectrum& spec, double* max_imag) {
  FrequencySpectrum s = spec.dc_centered ? uncentered(spec) : spec;
  transform_2d(s, +1.0);
  const double inv = 1.0 / (static_cast<double>(s.height) * s.width);
  Patch out(Shape{s.height, s.width});
  double worst = 0;
  for (std::size_t i = 0; i < s.coeffs.size(); ++i) {
    out[static_cast<std::int64_t>(i)] = s.coeffs[i].real() * inv;
    worst = std::max(worst, std::abs(s.coeffs[i].imag() * inv));
  }
  if (max_imag) *max_imag = worst;
  return out;
}

FrequencySpectrum centered(FrequencySpectrum spec) {
  if (spec.dc_centered) return spec;
  return shifted(spec, true);
}

FrequencySpectrum uncentered(FrequencySpectrum spec) {
  if (!spec.dc_centered) return spec;
  return shifted(spec, false);
}

double normalized_radius(int y, int x, int height, int width) {
  const double fy = static_cast<double>(y - height / 2) / height;
  const double fx = static_cast<double>(x - width / 2) / width;
  return 2.0 * std::sqrt(fy * fy + fx * fx);
}

BandEnergy band_energy(const FrequencySpectrum& spec, double cutoff_radius) {
  check_cutoff(cutoff_radius);
  if (!spec.dc_centered) throw std::invalid_argument("band_energy: spectrum must be DC-centered");
  BandEnergy e;
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x) {
      const double p = std::norm(spec.at(y, x));
      e.total += p;
      if (normalized_radius(y, x, spec.height, spec.width) > cutoff_radius) e.high += p;
    }
  return e;
}

double radial_energy_ratio(const FrequencySpectrum& spec, double cutoff_radius) {
  const auto e = band_energy(spec, cutoff_radius);
  if (e.total <= 0.0) return 0.0;
  return std::clamp(e.high / e.total, 0.0, 1.0);
}

FreqClass classify_patch(const Patch& patch, double cutoff_radius, double threshold) {
  return classify_channels(std::span<const Patch>(&patch, 1), cutoff_radius, threshold);
}

FreqClass classify_channels(std::span<const Patch> channels, double cutoff_radius, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument("classification threshold must lie in (0,1)");
  }
  BandEnergy total;
  double raw_energy = 0;
  for (const auto& ch : channels) {
    // The DC term measures brightness, not texture; classify on the AC spectrum.
    Patch ac = ch;
    double m = 0;
    for (auto v : ac.vec()) m += v;
    m /= static_cast<double>(ac.size());
    for (auto& v : ac.vec()) v -= m;
    for (auto v : ch.vec()) raw_energy += v * v * static_cast<double>(ch.size());
    const auto e = band_energy(centered(dft2(ac)), cutoff_radius);
    total.high += e.high;
    total.total += e.total;
  }
  // rounding residue of the mean subtraction is not texture
  constexpr double kNegligible = 1e-20;
  FreqClass c;
  c.ratio = total.total > kNegligible * raw_energy && total.total > 0.0
                ? std::clamp(total.high / total.total, 0.0, 1.0)
                : 0.0;
  c.band = c.ratio > threshold ? Band::High : Band::Low;
  return c;
}

Patch ideal_filter(const Patch& patch, double cutoff_radius, FilterKind kind, double* imag_residue) {
  check_cutoff(cutoff_radius);
  auto spec = centered(dft2(patch));
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x) {
      const bool high = normalized_radius(y, x, spec.height, spec.width) > cutoff_radius;
      const bool keep = kind == FilterKind::HighPass ? high : !high;
      if (!keep) spec.at(y, x) = Complex(0, 0);
    }
  return idft2(spec, imag_residue);
}

Patch log_magnitude(const FrequencySpectrum& spec) {
  const auto c = centered(spec);
  Patch out(Shape{c.height, c.width});
  for (std::size_t i = 0; i < c.coeffs.size(); ++i) out[static_cast<std::int64_t>(i)] = std::log1p(std::abs(c.coeffs[i]));
  return out;
}

const char* to_string(Band band) { return band == Band::High ? "high" : "low"; }

}  // namespace ringmo::freq
