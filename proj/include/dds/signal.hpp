#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <utility>
#include <vector>

#include "dds/common.hpp"
#include "dds/rng.hpp"

namespace dds::signal {

inline constexpr double kPi = 3.14159265358979323846;

template <class S>
struct AudioBuffer {
  std::vector<S> samples;
  int sample_rate = 16000;
};

// Log-magnitude spectrogram; values(d, t) >= 0, frames are columns.
template <class S>
struct Spectrogram {
  Mat<S> values;
  int hop = 0;
  int window = 0;
  int sample_rate = 0;

  Index d() const { return values.rows(); }
  Index t() const { return values.cols(); }
};

struct NoteEvent {
  int source_id = 0;
  double onset = 0.0;     // seconds
  double duration = 0.0;  // seconds
  double intensity = 1.0;
};

// Binary source-activity matrix; rows = sources, columns = frames.
template <class S>
struct PianoRoll {
  Mat<S> active;

  Index k() const { return active.rows(); }
  Index t() const { return active.cols(); }
};

struct SynthConfig {
  int k = 8;
  std::vector<double> fundamentals;  // Hz, one per source
  int partials = 8;
  double partial_decay = 0.5;
  double noise_level = 0.01;
  std::uint64_t seed = 0;

  // Geometric fundamental series so sources overlap spectrally the way
  // neighbouring piano notes do.
  static SynthConfig defaults(int k, double base_hz = 110.0,
                              double octave_fraction = 1.0 / 12.0) {
    SynthConfig cfg;
    cfg.k = k;
    cfg.fundamentals.resize(k);
    for (int i = 0; i < k; ++i)
      cfg.fundamentals[i] = base_hz * std::pow(2.0, i * octave_fraction);
    return cfg;
  }
};

inline void validate(const SynthConfig& cfg, int sample_rate) {
  if (cfg.k < 1) throw config_error("synth config: k must be >= 1");
  if (int(cfg.fundamentals.size()) != cfg.k)
    throw config_error("synth config: need one fundamental per source");
  for (double f : cfg.fundamentals)
    if (!(f > 0.0) || f * cfg.partials >= sample_rate / 2.0)
      throw config_error("synth config: partials exceed Nyquist");
}

namespace detail {

// In-place iterative radix-2 FFT; size must be a power of two.
inline void fft_pow2(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / double(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        const std::complex<double> u = a[i + j];
        const std::complex<double> v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

// |DFT| of a real windowed segment over bins 1..n/2.
inline void spectrum_magnitudes(const std::vector<double>& seg,
                                std::vector<double>& mag) {
  const std::size_t n = seg.size();
  const std::size_t half = n / 2;
  mag.resize(half);
  if ((n & (n - 1)) == 0) {
    std::vector<std::complex<double>> buf(n);
    for (std::size_t i = 0; i < n; ++i) buf[i] = seg[i];
    fft_pow2(buf);
    for (std::size_t b = 1; b <= half; ++b) mag[b - 1] = std::abs(buf[b]);
    return;
  }
  for (std::size_t b = 1; b <= half; ++b) {
    double re = 0.0, im = 0.0;
    const double w = -2.0 * kPi * double(b) / double(n);
    for (std::size_t i = 0; i < n; ++i) {
      re += seg[i] * std::cos(w * double(i));
      im += seg[i] * std::sin(w * double(i));
    }
    mag[b - 1] = std::hypot(re, im);
  }
}

}  // namespace detail

// Log-magnitude STFT. Frames are Hann-windowed segments of `window`
// samples every `hop` samples; bin 0 (DC) and the redundant upper half
// are dropped so D = window/2. Values are log(1 + |X|), hence >= 0.
template <class S>
Spectrogram<S> stft_log_magnitude(const AudioBuffer<S>& audio, int window,
                                  int hop) {
  const Index n = Index(audio.samples.size());
  if (window < 2 || window % 2 != 0)
    throw error("stft: window must be even and >= 2");
  if (hop < 1) throw error("stft: hop must be >= 1");
  if (n < window) throw error("input too short");
  for (S v : audio.samples)
    if (!std::isfinite(double(v))) throw error("invalid audio");

  const Index frames = (n - window) / hop + 1;
  const Index d = window / 2;

  std::vector<double> hann(window);
  for (int i = 0; i < window; ++i)
    hann[i] = 0.5 * (1.0 - std::cos(2.0 * kPi * double(i) / double(window)));

  Spectrogram<S> out;
  out.values.resize(d, frames);
  out.hop = hop;
  out.window = window;
  out.sample_rate = audio.sample_rate;

  std::vector<double> seg(window), mag;
  for (Index f = 0; f < frames; ++f) {
    const Index off = f * hop;
    for (int i = 0; i < window; ++i)
      seg[i] = double(audio.samples[off + i]) * hann[i];
    detail::spectrum_magnitudes(seg, mag);
    for (Index b = 0; b < d; ++b) out.values(b, f) = S(std::log1p(mag[b]));
  }
  return out;
}

// Harmonic tone with geometric partial decay, an exponential amplitude
// envelope and additive uniform noise. Deterministic for a fixed config
// seed; intensity is a pure linear scale of the unit-peak waveform.
template <class S>
AudioBuffer<S> synth_note(int source_id, double duration, double intensity,
                          const SynthConfig& cfg, int sample_rate = 16000) {
  if (source_id < 0 || source_id >= cfg.k) throw error("unknown source");
  if (!(intensity > 0.0) || intensity > 1.0)
    throw error("synth_note: intensity must be in (0, 1]");
  if (!(duration > 0.0)) throw error("synth_note: duration must be > 0");

  const Index n = std::max<Index>(1, Index(std::llround(duration * sample_rate)));
  const double f0 = cfg.fundamentals.at(source_id);

  // Noise stream must not depend on intensity, so that intensity scaling
  // stays exactly linear.
  Rng rng(mix_seed({cfg.seed, std::uint64_t(source_id),
                    std::uint64_t(std::llround(duration * 1e6)),
                    std::uint64_t(sample_rate)}));

  std::vector<double> u(n);
  double peak = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double t = double(i) / sample_rate;
    const double env = std::exp(-3.0 * t / duration);
    double s = 0.0;
    double amp = 1.0;
    for (int p = 1; p <= cfg.partials; ++p) {
      s += amp * std::sin(2.0 * kPi * f0 * p * t);
      amp *= cfg.partial_decay;
    }
    double v = env * s;
    if (cfg.noise_level > 0.0)
      v += cfg.noise_level * (2.0 * rng.uniform01() - 1.0);
    u[i] = v;
    peak = std::max(peak, std::abs(v));
  }
  const double scale = intensity / std::max(1.0, peak);

  AudioBuffer<S> out;
  out.sample_rate = sample_rate;
  out.samples.resize(std::size_t(n));
  for (Index i = 0; i < n; ++i) out.samples[std::size_t(i)] = S(u[i] * scale);
  return out;
}

// Sum of synth_note renderings placed at their onsets, peak-normalized so
// the mixture stays within [-1, 1]. Events are echoed back for ground-truth
// quantization.
template <class S>
std::pair<AudioBuffer<S>, std::vector<NoteEvent>> synth_mixture(
    const std::vector<NoteEvent>& events, const SynthConfig& cfg,
    int sample_rate = 16000) {
  if (events.empty()) throw error("synth_mixture: no events");

  Index total = 0;
  for (const NoteEvent& e : events) {
    const Index start = Index(std::llround(e.onset * sample_rate));
    const Index len = std::max<Index>(1, Index(std::llround(e.duration * sample_rate)));
    total = std::max(total, start + len);
  }

  std::vector<double> acc(std::size_t(total), 0.0);
  for (const NoteEvent& e : events) {
    const AudioBuffer<S> note =
        synth_note<S>(e.source_id, e.duration, e.intensity, cfg, sample_rate);
    const Index start = Index(std::llround(e.onset * sample_rate));
    for (std::size_t i = 0; i < note.samples.size(); ++i)
      acc[std::size_t(start) + i] += double(note.samples[i]);
  }

  double peak = 0.0;
  for (double v : acc) peak = std::max(peak, std::abs(v));
  const double scale = peak > 1.0 ? 1.0 / peak : 1.0;

  AudioBuffer<S> out;
  out.sample_rate = sample_rate;
  out.samples.resize(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out.samples[i] = S(acc[i] * scale);
  return {std::move(out), events};
}

// Frame f is active for source k iff the frame's center time lies within
// [onset, onset + duration). Center convention: (f*hop + window/2) / rate.
template <class S>
PianoRoll<S> quantize_ground_truth(const std::vector<NoteEvent>& events, int k,
                                   Index t, int hop, int window,
                                   int sample_rate) {
  if (t < 1) throw error("quantize_ground_truth: need at least one frame");
  PianoRoll<S> roll;
  roll.active = Mat<S>::Zero(k, t);
  for (const NoteEvent& e : events) {
    if (e.source_id < 0 || e.source_id >= k) throw error("unknown source");
    for (Index f = 0; f < t; ++f) {
      const double center =
          (double(f) * hop + double(window) / 2.0) / sample_rate;
      if (center >= e.onset && center < e.onset + e.duration)
        roll.active(e.source_id, f) = S(1);
    }
  }
  return roll;
}

// Drops columns where no source is active, from spectrogram and roll alike.
template <class S>
std::pair<Spectrogram<S>, PianoRoll<S>> discard_silent_frames(
    const Spectrogram<S>& spec, const PianoRoll<S>& roll) {
  if (spec.t() != roll.t())
    throw error("discard_silent_frames: frame counts differ");
  std::vector<Index> keep;
  for (Index f = 0; f < roll.t(); ++f)
    if (roll.active.col(f).sum() > S(0)) keep.push_back(f);
  if (keep.empty()) throw error("empty after silence removal");

  Spectrogram<S> s2;
  s2.hop = spec.hop;
  s2.window = spec.window;
  s2.sample_rate = spec.sample_rate;
  s2.values.resize(spec.d(), Index(keep.size()));
  PianoRoll<S> r2;
  r2.active.resize(roll.k(), Index(keep.size()));
  for (std::size_t i = 0; i < keep.size(); ++i) {
    s2.values.col(Index(i)) = spec.values.col(keep[i]);
    r2.active.col(Index(i)) = roll.active.col(keep[i]);
  }
  return {std::move(s2), std::move(r2)};
}

}  // namespace dds::signal
