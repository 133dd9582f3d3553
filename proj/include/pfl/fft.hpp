#pragma once

// FFTW-backed transforms and the differentiable power-spectrum op.

#include <fftw3.h>

#include <complex>
#include <map>
#include <memory>
#include <vector>

#include "pfl/tensor.hpp"

namespace pfl {

namespace detail {

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};

/// Per-thread plan cache. FFTW planning is not thread-safe, so each thread
/// plans its own transforms; plans are built with FFTW_ESTIMATE and are
/// deterministic.
class FftPlans {
 public:
  struct Entry {
    std::size_t n = 0;
    std::unique_ptr<double, FftwFree> real;
    std::unique_ptr<fftw_complex, FftwFree> spec;
    std::unique_ptr<fftw_complex, FftwFree> cin;
    std::unique_ptr<fftw_complex, FftwFree> cout;
    fftw_plan r2c = nullptr;
    fftw_plan c2c = nullptr;
    ~Entry() {
      if (r2c) fftw_destroy_plan(r2c);
      if (c2c) fftw_destroy_plan(c2c);
    }
  };

  static Entry& get(std::size_t n) {
    thread_local std::map<std::size_t, std::unique_ptr<Entry>> cache;
    auto& slot = cache[n];
    if (!slot) {
      slot = std::make_unique<Entry>();
      slot->n = n;
      slot->real.reset(static_cast<double*>(fftw_malloc(sizeof(double) * n)));
      slot->spec.reset(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (n / 2 + 1))));
      slot->cin.reset(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n)));
      slot->cout.reset(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n)));
      slot->r2c = fftw_plan_dft_r2c_1d(static_cast<int>(n), slot->real.get(), slot->spec.get(), FFTW_ESTIMATE);
      slot->c2c = fftw_plan_dft_1d(static_cast<int>(n), slot->cin.get(), slot->cout.get(), FFTW_FORWARD, FFTW_ESTIMATE);
    }
    return *slot;
  }
};

}  // namespace detail

/// Real FFT of `input` zero-padded (or truncated) to n points; returns n/2+1 bins.
inline std::vector<std::complex<double>> rfft(std::span<const double> input, std::size_t n) {
  auto& plan = detail::FftPlans::get(n);
  double* buf = plan.real.get();
  for (std::size_t i = 0; i < n; ++i) buf[i] = i < input.size() ? input[i] : 0.0;
  fftw_execute(plan.r2c);
  std::vector<std::complex<double>> out(n / 2 + 1);
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = {plan.spec.get()[k][0], plan.spec.get()[k][1]};
  return out;
}

/// |rfft(row, fft_size)|^2 for every row of a [frames x width] tensor.
/// Output is [frames x (fft_size/2 + 1)].
template <typename T>
Tensor<T> power_spectrum(const Tensor<T>& framed, std::size_t fft_size) {
  if (framed.rank() != 2) throw ShapeError("power_spectrum expects [frames x width]");
  const std::size_t nf = framed.dim(0), width = framed.dim(1);
  if (fft_size < width) throw std::invalid_argument("power_spectrum: fft_size smaller than the frame width");
  const std::size_t bins = fft_size / 2 + 1;
  auto& plan = detail::FftPlans::get(fft_size);
  std::vector<T> out(nf * bins);
  // Spectra are kept for the backward rule.
  auto spectra = std::make_shared<std::vector<std::complex<double>>>(nf * bins);
  auto xv = framed.data();
  double* buf = plan.real.get();
  for (std::size_t f = 0; f < nf; ++f) {
    for (std::size_t i = 0; i < fft_size; ++i) buf[i] = i < width ? static_cast<double>(xv[f * width + i]) : 0.0;
    fftw_execute(plan.r2c);
    for (std::size_t k = 0; k < bins; ++k) {
      std::complex<double> z{plan.spec.get()[k][0], plan.spec.get()[k][1]};
      (*spectra)[f * bins + k] = z;
      out[f * bins + k] = static_cast<T>(std::norm(z));
    }
  }
  auto nx = framed.node();
  return detail::make_result<T>("power_spectrum", Shape{nf, bins}, std::move(out), {&framed},
                                [nx, nf, width, bins, fft_size, spectra](detail::Node<T>& self) {
                                  // d|X_k|^2/dx_n = 2 Re(conj(X_k) e^{-2 pi i k n / N})
                                  auto& p = detail::FftPlans::get(fft_size);
                                  auto& gx = nx->grad_buffer();
                                  fftw_complex* in = p.cin.get();
                                  for (std::size_t f = 0; f < nf; ++f) {
                                    for (std::size_t k = 0; k < fft_size; ++k) {
                                      if (k < bins) {
                                        auto z = std::conj((*spectra)[f * bins + k]) * static_cast<double>(self.grad[f * bins + k]);
                                        in[k][0] = z.real();
                                        in[k][1] = z.imag();
                                      } else {
                                        in[k][0] = 0.0;
                                        in[k][1] = 0.0;
                                      }
                                    }
                                    fftw_execute(p.c2c);
                                    for (std::size_t n = 0; n < width; ++n)
                                      gx[f * width + n] += static_cast<T>(2.0 * p.cout.get()[n][0]);
                                  }
                                });
}

}  // namespace pfl
