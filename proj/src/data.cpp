#include "dualse/data.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "dualse/fft.hpp"

namespace dualse {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;

void peak_normalize(Waveform& w, double peak) {
  float mx = 0.0f;
  for (float v : w.samples) mx = std::max(mx, std::abs(v));
  if (mx > 0.0f) {
    const float scale = static_cast<float>(peak) / mx;
    for (auto& v : w.samples) v *= scale;
  }
}

double power(const Waveform& w) {
  double acc = 0;
  for (float v : w.samples) acc += static_cast<double>(v) * v;
  return acc / std::max<size_t>(1, w.samples.size());
}
}  // namespace

std::string corpus_role_name(CorpusRole role) {
  switch (role) {
    case CorpusRole::CleanPrior: return "clean_prior";
    case CorpusRole::NoisePrior: return "noise_prior";
    case CorpusRole::NoisyTrain: return "noisy_train";
    case CorpusRole::EvalPair: return "eval_pair";
  }
  return "unknown";
}

CorpusRole corpus_role_from_name(const std::string& name) {
  if (name == "clean_prior") return CorpusRole::CleanPrior;
  if (name == "noise_prior") return CorpusRole::NoisePrior;
  if (name == "noisy_train") return CorpusRole::NoisyTrain;
  if (name == "eval_pair") return CorpusRole::EvalPair;
  throw std::invalid_argument("unknown corpus role: " + name);
}

void CorpusManifest::validate() const {
  std::vector<std::string> ids;
  for (const auto& e : entries) ids.push_back(e.id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
    throw std::invalid_argument("manifest: duplicate ids");
  }
  for (const auto& e : entries) {
    if (!fs::exists(dir + "/" + e.path)) {
      throw std::invalid_argument("manifest: missing file " + e.path);
    }
  }
}

void save_manifest(const CorpusManifest& m, const std::string& csv_path,
                   const std::string& config_echo_json) {
  std::ofstream f(csv_path);
  if (!f) throw std::runtime_error("cannot write manifest " + csv_path);
  f << "id,path,duration_sec\n";
  for (const auto& e : m.entries) {
    f << e.id << "," << e.path << "," << e.duration_sec << "\n";
  }
  json meta;
  meta["role"] = corpus_role_name(m.role);
  meta["sample_rate"] = m.sample_rate;
  meta["config"] = config_echo_json.empty() ? json::object() : json::parse(config_echo_json);
  std::ofstream mf(csv_path + ".meta.json");
  mf << meta.dump(2) << "\n";
}

CorpusManifest load_manifest(const std::string& csv_path) {
  std::ifstream f(csv_path);
  if (!f) throw std::runtime_error("cannot read manifest " + csv_path);
  CorpusManifest m;
  m.dir = fs::path(csv_path).parent_path().string();
  if (m.dir.empty()) m.dir = ".";
  std::string line;
  if (!std::getline(f, line) || line.rfind("id,path,duration_sec", 0) != 0) {
    throw std::runtime_error("manifest: bad header in " + csv_path);
  }
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    ManifestEntry e;
    std::string dur;
    if (!std::getline(ss, e.id, ',') || !std::getline(ss, e.path, ',') || !std::getline(ss, dur)) {
      throw std::runtime_error("manifest: bad row: " + line);
    }
    e.duration_sec = std::stod(dur);
    m.entries.push_back(std::move(e));
  }
  std::ifstream mf(csv_path + ".meta.json");
  if (mf) {
    json meta = json::parse(mf);
    m.role = corpus_role_from_name(meta.at("role").get<std::string>());
    m.sample_rate = meta.at("sample_rate").get<int>();
  }
  return m;
}

void SynthSpeechConfig::validate() const {
  if (!(f0_min > 0 && f0_min < f0_max)) throw std::invalid_argument("speech: bad f0 range");
  if (harmonics < 1) throw std::invalid_argument("speech: harmonics must be >= 1");
  if (f0_max * harmonics >= sample_rate / 2.0) {
    throw std::invalid_argument("speech: f0_max * harmonics exceeds Nyquist (" +
                                std::to_string(f0_max * harmonics) + " >= " +
                                std::to_string(sample_rate / 2.0) + ")");
  }
  if (!(dur_min > 0 && dur_min <= dur_max)) throw std::invalid_argument("speech: bad durations");
  if (!(am_rate_min > 0 && am_rate_min <= am_rate_max)) {
    throw std::invalid_argument("speech: bad AM rate range");
  }
  for (const auto& [lo, hi] : formant_ranges) {
    if (!(lo < hi)) throw std::invalid_argument("speech: empty formant range");
  }
}

SynthSpeechConfig shifted_speech_config() {
  SynthSpeechConfig cfg;
  cfg.f0_min = 280.0;
  cfg.f0_max = 420.0;
  cfg.harmonics = 9;
  cfg.formant_ranges = {{{600.0, 1200.0}, {1800.0, 2800.0}, {3000.0, 3800.0}}};
  cfg.domain_tag = "shifted";
  return cfg;
}

std::string noise_kind_name(NoiseKind k) {
  switch (k) {
    case NoiseKind::White: return "white";
    case NoiseKind::Pink: return "pink";
    case NoiseKind::Babble: return "babble";
  }
  return "unknown";
}

NoiseKind noise_kind_from_name(const std::string& name) {
  if (name == "white") return NoiseKind::White;
  if (name == "pink") return NoiseKind::Pink;
  if (name == "babble") return NoiseKind::Babble;
  throw std::invalid_argument("unknown noise kind: " + name);
}

void MixSpec::validate() const {
  if (snr_min_db > snr_max_db) throw std::invalid_argument("mix: snr_min > snr_max");
}

Waveform synth_speech_utterance(const SynthSpeechConfig& cfg, RandomStream& rs) {
  cfg.validate();
  const int sr = cfg.sample_rate;
  const double dur = rs.uniform(cfg.dur_min, cfg.dur_max);
  const int64_t n = static_cast<int64_t>(std::lround(dur * sr));

  const double f0 = rs.uniform(cfg.f0_min, cfg.f0_max);
  const double vib_rate = rs.uniform(3.0, 6.0);
  const double vib_depth = 0.02;
  const double vib_phase = rs.uniform(0.0, kTwoPi);

  std::array<double, 3> formants;
  for (size_t j = 0; j < formants.size(); ++j) {
    formants[j] = rs.uniform(cfg.formant_ranges[j].first, cfg.formant_ranges[j].second);
  }

  // Harmonic amplitudes from formant resonances, floored so every harmonic
  // carries a little energy.
  std::vector<double> amp(cfg.harmonics), phase(cfg.harmonics);
  for (int h = 0; h < cfg.harmonics; ++h) {
    const double fh = (h + 1) * f0;
    double a = 0.01;
    for (double fc : formants) {
      const double d = (fh - fc) / cfg.formant_bw;
      a += std::exp(-0.5 * d * d);
    }
    amp[h] = a / (1.0 + 0.3 * h);  // gentle spectral tilt
    phase[h] = rs.uniform(0.0, kTwoPi);
  }

  const double am_rate = rs.uniform(cfg.am_rate_min, cfg.am_rate_max);
  const double am_phase = rs.uniform(0.0, kTwoPi);

  Waveform w;
  w.sample_rate = sr;
  w.samples.resize(n);
  double base_phase = rs.uniform(0.0, kTwoPi);
  for (int64_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sr;
    const double f_inst = f0 * (1.0 + vib_depth * std::sin(kTwoPi * vib_rate * t + vib_phase));
    base_phase += kTwoPi * f_inst / sr;
    double s = 0;
    for (int h = 0; h < cfg.harmonics; ++h) {
      s += amp[h] * std::sin((h + 1) * base_phase + phase[h]);
    }
    // Syllabic envelope kept strictly positive: pauses, not silence.
    const double env = 0.55 - 0.45 * std::cos(kTwoPi * am_rate * t + am_phase);
    w.samples[i] = static_cast<float>(env * s);
  }
  peak_normalize(w, 0.9);
  return w;
}

namespace {

Waveform shaped_noise(int sample_rate, int64_t n, RandomStream& rs,
                      const std::function<double(double)>& amplitude_of_freq) {
  // Shape white Gaussian noise in the frequency domain over the next
  // power-of-two length, then crop.
  int64_t m = 1;
  while (m < n) m <<= 1;
  std::vector<std::complex<double>> spec(m);
  spec[0] = {0.0, 0.0};
  for (int64_t k = 1; k <= m / 2; ++k) {
    const double f = static_cast<double>(k) * sample_rate / m;
    const double a = amplitude_of_freq(f);
    const std::complex<double> v(rs.normal() * a, rs.normal() * a);
    spec[k] = v;
    if (k < m / 2) spec[m - k] = std::conj(v);
  }
  spec[m / 2] = {spec[m / 2].real(), 0.0};
  fft_radix2(spec.data(), m, +1);
  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.resize(n);
  for (int64_t i = 0; i < n; ++i) w.samples[i] = static_cast<float>(spec[i].real());
  peak_normalize(w, 0.9);
  return w;
}

}  // namespace

Waveform synth_noise_utterance(NoiseKind kind, int sample_rate, double duration_sec,
                               RandomStream& rs) {
  const int64_t n = static_cast<int64_t>(std::lround(duration_sec * sample_rate));
  switch (kind) {
    case NoiseKind::White: {
      Waveform w;
      w.sample_rate = sample_rate;
      w.samples.resize(n);
      for (auto& v : w.samples) v = static_cast<float>(rs.normal());
      peak_normalize(w, 0.9);
      return w;
    }
    case NoiseKind::Pink:
      // -3 dB per octave power slope: amplitude ~ 1/sqrt(f).
      return shaped_noise(sample_rate, n, rs,
                          [](double f) { return f > 0 ? 1.0 / std::sqrt(f) : 0.0; });
    case NoiseKind::Babble: {
      // A few slowly amplitude-modulated band-limited streams.
      Waveform acc;
      acc.sample_rate = sample_rate;
      acc.samples.assign(n, 0.0f);
      const int streams = 4;
      for (int s = 0; s < streams; ++s) {
        const double fc = rs.uniform(300.0, 2500.0);
        const double bw = rs.uniform(200.0, 600.0);
        Waveform band = shaped_noise(sample_rate, n, rs, [fc, bw](double f) {
          const double d = (f - fc) / bw;
          return std::exp(-0.5 * d * d);
        });
        const double rate = rs.uniform(1.0, 3.5);
        const double ph = rs.uniform(0.0, kTwoPi);
        for (int64_t i = 0; i < n; ++i) {
          const double env = 0.6 - 0.4 * std::cos(kTwoPi * rate * i / sample_rate + ph);
          acc.samples[i] += static_cast<float>(env) * band.samples[i];
        }
      }
      peak_normalize(acc, 0.9);
      return acc;
    }
  }
  throw std::invalid_argument("unknown noise kind");
}

namespace {

std::string index_id(const std::string& name, int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d", i);
  return name + "_" + buf;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir + ": " + ec.message());
}

}  // namespace

CorpusManifest synth_speech_corpus(const SynthSpeechConfig& cfg, int count, uint64_t seed,
                                   const std::string& out_dir, const std::string& name) {
  cfg.validate();
  ensure_dir(out_dir);
  CorpusManifest m;
  m.role = CorpusRole::CleanPrior;
  m.sample_rate = cfg.sample_rate;
  m.dir = out_dir;
  for (int i = 0; i < count; ++i) {
    RandomStream rs(seed, "speech:" + cfg.domain_tag, static_cast<uint64_t>(i));
    Waveform w = synth_speech_utterance(cfg, rs);
    ManifestEntry e;
    e.id = index_id(name, i);
    e.path = e.id + ".wav";
    e.duration_sec = w.duration_sec();
    write_wav(out_dir + "/" + e.path, w);
    m.entries.push_back(std::move(e));
  }
  json echo;
  echo["kind"] = "speech";
  echo["domain_tag"] = cfg.domain_tag;
  echo["f0_min"] = cfg.f0_min;
  echo["f0_max"] = cfg.f0_max;
  echo["harmonics"] = cfg.harmonics;
  echo["seed"] = seed;
  echo["count"] = count;
  save_manifest(m, out_dir + "/" + name + ".csv", echo.dump());
  return m;
}

CorpusManifest synth_noise_corpus(NoiseKind kind, int count, uint64_t seed, int sample_rate,
                                  const std::string& out_dir, const std::string& name) {
  ensure_dir(out_dir);
  CorpusManifest m;
  m.role = CorpusRole::NoisePrior;
  m.sample_rate = sample_rate;
  m.dir = out_dir;
  for (int i = 0; i < count; ++i) {
    RandomStream rs(seed, "noise:" + noise_kind_name(kind), static_cast<uint64_t>(i));
    const double dur = rs.uniform(1.0, 1.5);
    Waveform w = synth_noise_utterance(kind, sample_rate, dur, rs);
    ManifestEntry e;
    e.id = index_id(name, i);
    e.path = e.id + ".wav";
    e.duration_sec = w.duration_sec();
    write_wav(out_dir + "/" + e.path, w);
    m.entries.push_back(std::move(e));
  }
  json echo;
  echo["kind"] = "noise";
  echo["noise_kind"] = noise_kind_name(kind);
  echo["seed"] = seed;
  echo["count"] = count;
  save_manifest(m, out_dir + "/" + name + ".csv", echo.dump());
  return m;
}

MixResult mix_at_snr(const Waveform& speech, const Waveform& noise, double snr_db) {
  if (speech.samples.empty() || noise.samples.empty()) {
    throw std::invalid_argument("mix_at_snr: empty input");
  }
  // Tile short noise, crop long noise from its start.
  Waveform cropped;
  cropped.sample_rate = noise.sample_rate;
  cropped.samples.resize(speech.samples.size());
  for (size_t i = 0; i < cropped.samples.size(); ++i) {
    cropped.samples[i] = noise.samples[i % noise.samples.size()];
  }
  const double ps = power(speech);
  const double pn = power(cropped);
  if (ps <= 0) throw std::invalid_argument("mix_at_snr: zero-power speech");
  if (pn <= 0) throw std::invalid_argument("mix_at_snr: zero-power noise");
  const double gain = std::sqrt(ps / (pn * std::pow(10.0, snr_db / 10.0)));

  MixResult out;
  out.gain = gain;
  out.noisy.sample_rate = speech.sample_rate;
  out.noisy.samples.resize(speech.samples.size());
  for (size_t i = 0; i < speech.samples.size(); ++i) {
    out.noisy.samples[i] =
        speech.samples[i] + static_cast<float>(gain) * cropped.samples[i];
  }
  return out;
}

namespace {

struct PairSynth {
  Waveform clean, noise_scaled, noisy;
  double snr = 0.0;
};

PairSynth synth_pair(const SynthSpeechConfig& speech_cfg, NoiseKind noise_kind,
                     const MixSpec& mix, uint64_t seed, const std::string& stream_tag,
                     uint64_t index) {
  RandomStream s_rs(seed, stream_tag + ":speech", index);
  RandomStream n_rs(seed, stream_tag + ":noise", index);
  RandomStream m_rs(seed, stream_tag + ":mix", index);
  PairSynth out;
  out.clean = synth_speech_utterance(speech_cfg, s_rs);
  const double dur = out.clean.duration_sec();
  Waveform noise = synth_noise_utterance(noise_kind, speech_cfg.sample_rate, dur + 0.1, n_rs);
  out.snr = m_rs.uniform(mix.snr_min_db, mix.snr_max_db);
  MixResult mixed = mix_at_snr(out.clean, noise, out.snr);
  out.noisy = mixed.noisy;
  out.noise_scaled.sample_rate = noise.sample_rate;
  out.noise_scaled.samples.resize(out.clean.samples.size());
  for (size_t i = 0; i < out.noise_scaled.samples.size(); ++i) {
    out.noise_scaled.samples[i] =
        static_cast<float>(mixed.gain) * noise.samples[i % noise.samples.size()];
  }
  // Joint rescale so the mixture survives 16-bit encoding unclipped; the SNR
  // and the additive identity noisy = clean + noise are scale-invariant.
  float peak = 0.0f;
  for (float v : out.noisy.samples) peak = std::max(peak, std::abs(v));
  if (peak > 0.95f) {
    const float s = 0.95f / peak;
    for (auto& v : out.noisy.samples) v *= s;
    for (auto& v : out.clean.samples) v *= s;
    for (auto& v : out.noise_scaled.samples) v *= s;
  }
  return out;
}

}  // namespace

CorpusManifest synth_noisy_corpus(const SynthSpeechConfig& speech_cfg, NoiseKind noise_kind,
                                  const MixSpec& mix, int count, uint64_t seed,
                                  const std::string& out_dir, const std::string& name) {
  speech_cfg.validate();
  mix.validate();
  ensure_dir(out_dir);
  CorpusManifest m;
  m.role = CorpusRole::NoisyTrain;
  m.sample_rate = speech_cfg.sample_rate;
  m.dir = out_dir;
  for (int i = 0; i < count; ++i) {
    PairSynth p = synth_pair(speech_cfg, noise_kind, mix, seed, "noisy:" + name,
                             static_cast<uint64_t>(i));
    ManifestEntry e;
    e.id = index_id(name, i);
    e.path = e.id + ".wav";
    e.duration_sec = p.noisy.duration_sec();
    write_wav(out_dir + "/" + e.path, p.noisy);
    m.entries.push_back(std::move(e));
  }
  json echo;
  echo["kind"] = "noisy_train";
  echo["noise_kind"] = noise_kind_name(noise_kind);
  echo["snr_min_db"] = mix.snr_min_db;
  echo["snr_max_db"] = mix.snr_max_db;
  echo["seed"] = seed;
  echo["count"] = count;
  echo["speech_domain"] = speech_cfg.domain_tag;
  save_manifest(m, out_dir + "/" + name + ".csv", echo.dump());
  return m;
}

CorpusManifest synth_eval_pairs(const SynthSpeechConfig& speech_cfg, NoiseKind noise_kind,
                                const MixSpec& mix, int count, uint64_t seed,
                                const std::string& out_dir, const std::string& name) {
  speech_cfg.validate();
  mix.validate();
  ensure_dir(out_dir);
  CorpusManifest m;
  m.role = CorpusRole::EvalPair;
  m.sample_rate = speech_cfg.sample_rate;
  m.dir = out_dir;
  for (int i = 0; i < count; ++i) {
    PairSynth p = synth_pair(speech_cfg, noise_kind, mix, seed, "eval:" + name,
                             static_cast<uint64_t>(i));
    const std::string id = index_id(name, i);
    write_wav(out_dir + "/" + id + ".noisy.wav", p.noisy);
    write_wav(out_dir + "/" + id + ".clean.wav", p.clean);
    write_wav(out_dir + "/" + id + ".noise.wav", p.noise_scaled);
    ManifestEntry e;
    e.id = id;
    e.path = id + ".noisy.wav";
    e.duration_sec = p.noisy.duration_sec();
    m.entries.push_back(std::move(e));
  }
  json echo;
  echo["kind"] = "eval_pair";
  echo["noise_kind"] = noise_kind_name(noise_kind);
  echo["snr_min_db"] = mix.snr_min_db;
  echo["snr_max_db"] = mix.snr_max_db;
  echo["seed"] = seed;
  echo["count"] = count;
  echo["speech_domain"] = speech_cfg.domain_tag;
  save_manifest(m, out_dir + "/" + name + ".csv", echo.dump());
  return m;
}

std::vector<EvalPair> load_eval_pairs(const CorpusManifest& m) {
  if (m.role != CorpusRole::EvalPair) {
    throw std::invalid_argument("load_eval_pairs: manifest role is not eval_pair");
  }
  std::vector<EvalPair> pairs;
  for (size_t i = 0; i < m.entries.size(); ++i) {
    const auto& e = m.entries[i];
    const std::string suffix = ".noisy.wav";
    if (e.path.size() < suffix.size() ||
        e.path.compare(e.path.size() - suffix.size(), suffix.size(), suffix) != 0) {
      throw std::invalid_argument("eval manifest entry lacks reference naming: " + e.path);
    }
    const std::string stem = e.path.substr(0, e.path.size() - suffix.size());
    EvalPair p;
    p.id = e.id;
    p.noisy = read_wav(m.dir + "/" + e.path);
    p.clean = read_wav(m.dir + "/" + stem + ".clean.wav");
    p.noise = read_wav(m.dir + "/" + stem + ".noise.wav");
    pairs.push_back(std::move(p));
  }
  return pairs;
}

CorpusCache::CorpusCache(const CorpusManifest& m) : manifest_(m) {
  if (m.entries.empty()) throw std::invalid_argument("corpus cache: empty manifest");
  for (size_t i = 0; i < m.entries.size(); ++i) {
    waves_.push_back(read_wav(m.wav_path(i)));
  }
}

namespace {

void crop_into(const Waveform& w, int64_t clip_len, RandomStream& rs, float* dst,
               std::string* id_out, const std::string& id) {
  const int64_t n = w.length();
  if (n >= clip_len) {
    const int64_t start = rs.randint(0, n - clip_len + 1);
    for (int64_t i = 0; i < clip_len; ++i) dst[i] = w.samples[start + i];
  } else {
    // Zero-pad short clips at a random offset.
    const int64_t start = rs.randint(0, clip_len - n + 1);
    std::fill(dst, dst + clip_len, 0.0f);
    for (int64_t i = 0; i < n; ++i) dst[start + i] = w.samples[i];
  }
  *id_out = id;
}

}  // namespace

BatchTriple sample_unpaired_batch(const CorpusCache& clean, const CorpusCache& noise,
                                  const CorpusCache& noisy, int64_t batch, int64_t clip_len,
                                  uint64_t seed, uint64_t step) {
  for (const CorpusCache* c : {&clean, &noise, &noisy}) {
    if (c->manifest().role == CorpusRole::EvalPair) {
      throw std::invalid_argument("sample_unpaired_batch: eval_pair manifests are not allowed "
                                  "in training");
    }
  }
  RandomStream rs(seed, "batch", step);
  BatchTriple out;
  out.batch = batch;
  out.clip_len = clip_len;
  out.noisy.resize(batch * clip_len);
  out.clean_prior.resize(batch * clip_len);
  out.noise_prior.resize(batch * clip_len);
  out.noisy_ids.resize(batch);
  out.clean_ids.resize(batch);
  out.noise_ids.resize(batch);
  for (int64_t b = 0; b < batch; ++b) {
    const int64_t in = rs.randint(0, static_cast<int64_t>(noisy.size()));
    crop_into(noisy.wave(in), clip_len, rs, out.noisy.data() + b * clip_len, &out.noisy_ids[b],
              noisy.manifest().entries[in].id);
    const int64_t ic = rs.randint(0, static_cast<int64_t>(clean.size()));
    crop_into(clean.wave(ic), clip_len, rs, out.clean_prior.data() + b * clip_len,
              &out.clean_ids[b], clean.manifest().entries[ic].id);
    const int64_t inn = rs.randint(0, static_cast<int64_t>(noise.size()));
    crop_into(noise.wave(inn), clip_len, rs, out.noise_prior.data() + b * clip_len,
              &out.noise_ids[b], noise.manifest().entries[inn].id);
  }
  return out;
}

}  // namespace dualse
