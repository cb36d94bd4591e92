#include "syndiag/signal.hpp"

#include <cmath>
#include <stdexcept>

#include "syndiag/rng.hpp"

namespace syndiag {

namespace {
constexpr double kTwoPi = 6.283185307179586476925287;
}

void SignalSpec::validate(int64_t min_length) const {
  double nyquist = sample_rate / 2.0;
  if (!(base_frequency > 0.0) || base_frequency >= nyquist)
    throw std::invalid_argument("signal: base_frequency outside (0, nyquist)");
  if (!(fault_frequency > 0.0) || fault_frequency >= nyquist)
    throw std::invalid_argument("signal: fault_frequency outside (0, nyquist)");
  if (condition_scale(condition_id) * base_frequency >= nyquist)
    throw std::invalid_argument("signal: condition-scaled base_frequency above nyquist");
  if (noise_sigma < 0.0) throw std::invalid_argument("signal: negative noise_sigma");
  if (length < min_length) throw std::invalid_argument("signal: length below minimum");
  if (!(sample_rate > 0.0)) throw std::invalid_argument("signal: sample_rate must be > 0");
}

double condition_scale(int condition_id) { return 1.0 + 0.08 * condition_id; }

double ring_frequency(int class_id, double sample_rate) {
  if (class_id <= 0) return 0.0;
  return sample_rate * (0.10 + 0.028 * ((class_id - 1) % 8));
}

std::vector<double> generate_signal(const SignalSpec& spec) {
  spec.validate();
  const double fs = spec.sample_rate;
  const double f_base = spec.base_frequency * condition_scale(spec.condition_id);
  std::vector<double> x(static_cast<size_t>(spec.length), 0.0);

  for (int64_t n = 0; n < spec.length; ++n)
    x[static_cast<size_t>(n)] = std::sin(kTwoPi * f_base * static_cast<double>(n) / fs);

  if (spec.impulse_amplitude > 0.0 && spec.class_id > 0) {
    const double f_ring = ring_frequency(spec.class_id, fs);
    const double period = fs / spec.fault_frequency;     // samples between impulses
    const double decay_tau = 0.004 * fs;                 // ~4 ms ring-down
    const int64_t ring_len = static_cast<int64_t>(8.0 * decay_tau);
    for (double t0 = 0.0; t0 < static_cast<double>(spec.length); t0 += period) {
      int64_t start = static_cast<int64_t>(std::ceil(t0));
      int64_t stop = std::min(spec.length, start + ring_len);
      for (int64_t n = start; n < stop; ++n) {
        double dt = static_cast<double>(n) - t0;
        x[static_cast<size_t>(n)] += spec.impulse_amplitude * std::exp(-dt / decay_tau) *
                                     std::sin(kTwoPi * f_ring * dt / fs);
      }
    }
  }

  if (spec.noise_sigma > 0.0) {
    Rng rng(spec.seed, 0x5161);
    for (auto& v : x) v += spec.noise_sigma * rng.gaussian();
  }
  return x;
}

int64_t window_count(int64_t length, int64_t window_size, int64_t step) {
  if (length < window_size) return 0;
  return (length - window_size) / step + 1;
}

std::vector<Window> slide_windows(const std::vector<double>& signal, int64_t window_size,
                                  int64_t step) {
  if (window_size < 1 || step < 1) throw std::invalid_argument("slide_windows: bad size/step");
  if (static_cast<int64_t>(signal.size()) < window_size)
    throw std::invalid_argument("slide_windows: signal shorter than window");
  int64_t count = window_count(static_cast<int64_t>(signal.size()), window_size, step);
  std::vector<Window> out;
  out.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    Window w;
    w.offset = i * step;
    w.samples.assign(signal.begin() + w.offset, signal.begin() + w.offset + window_size);
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace syndiag
