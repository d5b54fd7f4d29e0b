#pragma once

// Log-mel filterbank features from 16 kHz PCM: Hann-windowed STFT magnitude
// through an HTK-mel triangular filterbank, log with a 1e-10 floor, and
// optional per-utterance cepstral mean subtraction.

#include <complex>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "pcfnat/common.hpp"
#include "pcfnat/tensor.hpp"

namespace pcfnat {

struct FbankConfig {
  int sample_rate = 16000;
  double window_ms = 25.0;
  double shift_ms = 10.0;
  int mel_bins = 80;
  bool cepstral_mean_subtraction = true;

  int window_samples() const {
    return static_cast<int>(sample_rate * window_ms / 1000.0 + 0.5);
  }
  int shift_samples() const {
    return static_cast<int>(sample_rate * shift_ms / 1000.0 + 0.5);
  }
  void validate() const {
    if (mel_bins < 1) throw config_error("fbank: mel_bins must be >= 1");
    if (window_samples() < shift_samples())
      throw config_error("fbank: window must be at least one shift long");
  }
};

namespace fbank_detail {

constexpr double kPi = 3.14159265358979323846;

// In-place iterative radix-2 FFT; size must be a power of two.
inline void fft_inplace(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw contract_error("fft: size must be a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / static_cast<double>(len);
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

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular filters on the magnitude-spectrum bins, HTK mel spacing from
// 0 Hz to Nyquist. Returns [mel_bins][fft_bins].
inline std::vector<std::vector<double>> mel_filterbank(int mel_bins, int nfft, int sample_rate) {
  const int fft_bins = nfft / 2 + 1;
  const double nyquist = sample_rate / 2.0;
  const double mel_lo = hz_to_mel(0.0), mel_hi = hz_to_mel(nyquist);
  std::vector<double> centers(static_cast<std::size_t>(mel_bins) + 2);
  for (int i = 0; i < mel_bins + 2; ++i)
    centers[static_cast<std::size_t>(i)] =
        mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (mel_bins + 1));
  std::vector<std::vector<double>> filters(static_cast<std::size_t>(mel_bins),
                                           std::vector<double>(static_cast<std::size_t>(fft_bins), 0.0));
  for (int m = 0; m < mel_bins; ++m) {
    const double lo = centers[static_cast<std::size_t>(m)];
    const double mid = centers[static_cast<std::size_t>(m) + 1];
    const double hi = centers[static_cast<std::size_t>(m) + 2];
    for (int k = 0; k < fft_bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / nfft;
      double w = 0.0;
      if (f > lo && f < mid)
        w = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi)
        w = (hi - f) / (hi - mid);
      filters[static_cast<std::size_t>(m)][static_cast<std::size_t>(k)] = w;
    }
  }
  return filters;
}

// Center frequency of each mel filter, for probes.
inline std::vector<double> mel_centers_hz(int mel_bins, int sample_rate) {
  const double nyquist = sample_rate / 2.0;
  const double mel_lo = hz_to_mel(0.0), mel_hi = hz_to_mel(nyquist);
  std::vector<double> centers(static_cast<std::size_t>(mel_bins));
  for (int m = 0; m < mel_bins; ++m)
    centers[static_cast<std::size_t>(m)] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * (m + 1) / (mel_bins + 1));
  return centers;
}

}  // namespace fbank_detail

// samples -> [mel_bins, T] with T = floor((N - window)/shift) + 1.
inline Tensor<float> extract_fbank(std::span<const float> samples, const FbankConfig& cfg) {
  cfg.validate();
  const index_t win = cfg.window_samples();
  const index_t hop = cfg.shift_samples();
  const index_t n = static_cast<index_t>(samples.size());
  if (n < win)
    throw contract_error(strcat_msg("extract_fbank: ", n, " samples shorter than one window (",
                                    win, ")"));
  const index_t frames = (n - win) / hop + 1;
  const std::size_t nfft = fbank_detail::next_pow2(static_cast<std::size_t>(win));
  const int fft_bins = static_cast<int>(nfft) / 2 + 1;

  std::vector<double> window(static_cast<std::size_t>(win));
  for (index_t i = 0; i < win; ++i)
    window[static_cast<std::size_t>(i)] =
        0.5 - 0.5 * std::cos(2.0 * fbank_detail::kPi * i / static_cast<double>(win));

  const auto filters = fbank_detail::mel_filterbank(cfg.mel_bins, static_cast<int>(nfft),
                                                    cfg.sample_rate);

  Tensor<float> out = Tensor<float>::uninitialized({cfg.mel_bins, frames});
  std::vector<std::complex<double>> buf(nfft);
  std::vector<double> mag(static_cast<std::size_t>(fft_bins));
  for (index_t t = 0; t < frames; ++t) {
    const float* frame = samples.data() + t * hop;
    for (std::size_t i = 0; i < static_cast<std::size_t>(win); ++i)
      buf[i] = {static_cast<double>(frame[i]) * window[i], 0.0};
    for (std::size_t i = static_cast<std::size_t>(win); i < nfft; ++i) buf[i] = {0.0, 0.0};
    fbank_detail::fft_inplace(buf);
    for (int k = 0; k < fft_bins; ++k) mag[static_cast<std::size_t>(k)] = std::abs(buf[static_cast<std::size_t>(k)]);
    for (int m = 0; m < cfg.mel_bins; ++m) {
      double acc = 0.0;
      const auto& filt = filters[static_cast<std::size_t>(m)];
      for (int k = 0; k < fft_bins; ++k) acc += filt[static_cast<std::size_t>(k)] * mag[static_cast<std::size_t>(k)];
      out.data()[static_cast<std::size_t>(m * frames + t)] =
          static_cast<float>(std::log(std::max(acc, 1e-10)));
    }
  }
  if (cfg.cepstral_mean_subtraction) {
    for (int m = 0; m < cfg.mel_bins; ++m) {
      float* row = out.data().data() + static_cast<index_t>(m) * frames;
      double mean = 0;
      for (index_t t = 0; t < frames; ++t) mean += row[t];
      mean /= static_cast<double>(frames);
      for (index_t t = 0; t < frames; ++t) row[t] -= static_cast<float>(mean);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// WAV (RIFF, PCM 16-bit)
// ---------------------------------------------------------------------------

struct WavData {
  std::vector<float> samples;  // mono, scaled to [-1, 1]
  int sample_rate = 0;
};

inline WavData read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw parse_error("cannot open wav file: " + path);
  auto read_u32 = [&]() {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  auto read_u16 = [&]() {
    std::uint16_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 2);
    return v;
  };
  char tag[5] = {0};
  in.read(tag, 4);
  if (std::string(tag, 4) != "RIFF") throw parse_error(path + ": not a RIFF file");
  read_u32();
  in.read(tag, 4);
  if (std::string(tag, 4) != "WAVE") throw parse_error(path + ": not a WAVE file");

  WavData wav;
  int channels = 0, bits = 0;
  bool got_fmt = false;
  while (in.read(tag, 4)) {
    const std::uint32_t chunk = read_u32();
    const std::string id(tag, 4);
    if (id == "fmt ") {
      const std::uint16_t fmt = read_u16();
      channels = read_u16();
      wav.sample_rate = static_cast<int>(read_u32());
      read_u32();  // byte rate
      read_u16();  // block align
      bits = read_u16();
      if (chunk > 16) in.seekg(chunk - 16, std::ios::cur);
      if (fmt != 1) throw parse_error(path + ": only PCM wav supported");
      got_fmt = true;
    } else if (id == "data") {
      if (!got_fmt) throw parse_error(path + ": data chunk before fmt");
      if (bits != 16) throw parse_error(path + ": only 16-bit PCM supported");
      if (channels != 1) throw parse_error(path + ": only mono supported");
      const std::size_t count = chunk / 2;
      std::vector<std::int16_t> raw(count);
      in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(chunk));
      wav.samples.resize(count);
      for (std::size_t i = 0; i < count; ++i)
        wav.samples[i] = static_cast<float>(raw[i]) / 32768.0f;
      return wav;
    } else {
      in.seekg(chunk + (chunk & 1), std::ios::cur);
    }
  }
  throw parse_error(path + ": no data chunk");
}

inline void write_wav(const std::string& path, std::span<const float> samples, int sample_rate) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw parse_error("cannot write wav file: " + path);
  auto put_u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  auto put_u16 = [&](std::uint16_t v) { out.write(reinterpret_cast<const char*>(&v), 2); };
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  out.write("RIFF", 4);
  put_u32(36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  put_u32(16);
  put_u16(1);
  put_u16(1);
  put_u32(static_cast<std::uint32_t>(sample_rate));
  put_u32(static_cast<std::uint32_t>(sample_rate * 2));
  put_u16(2);
  put_u16(16);
  out.write("data", 4);
  put_u32(data_bytes);
  for (float s : samples) {
    const float c = std::min(1.0f, std::max(-1.0f, s));
    const std::int16_t v = static_cast<std::int16_t>(c * 32767.0f);
    out.write(reinterpret_cast<const char*>(&v), 2);
  }
}

// Reads a wav file and checks the rate against the feature config.
inline std::vector<float> load_wav_checked(const std::string& path, const FbankConfig& cfg) {
  WavData wav = read_wav(path);
  if (wav.sample_rate != cfg.sample_rate)
    throw contract_error(strcat_msg(path, ": unsupported sample rate ", wav.sample_rate,
                                    " (expected ", cfg.sample_rate, ")"));
  return std::move(wav.samples);
}

}  // namespace pcfnat
