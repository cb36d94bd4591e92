#pragma once

#include <cstdint>
#include <vector>

namespace syndiag {

// Synthetic vibration recording: carrier sinusoid plus a decaying-impulse
// train at the fault frequency plus Gaussian noise. class_id selects the
// impulse ring-down pattern, condition_id scales the carrier (emulating a
// change in shaft speed).
struct SignalSpec {
  int class_id = 0;
  int condition_id = 0;
  double base_frequency = 250.0;   // Hz
  double fault_frequency = 40.0;   // Hz, impulse repetition rate
  double impulse_amplitude = 0.0;
  double noise_sigma = 0.0;
  int64_t length = 4096;
  double sample_rate = 12800.0;    // Hz
  uint64_t seed = 0;

  void validate(int64_t min_length = 1) const;
};

// Carrier frequency multiplier for a working condition.
double condition_scale(int condition_id);
// Ring-down carrier frequency of the impulse response for a fault class.
double ring_frequency(int class_id, double sample_rate);

std::vector<double> generate_signal(const SignalSpec& spec);

struct Window {
  int64_t offset = 0;
  std::vector<double> samples;
};

std::vector<Window> slide_windows(const std::vector<double>& signal, int64_t window_size = 512,
                                  int64_t step = 256);

// Closed-form window count for a signal of the given length.
int64_t window_count(int64_t length, int64_t window_size = 512, int64_t step = 256);

}  // namespace syndiag
