#pragma once

// Synthetic unpaired corpora: a clean-speech prior (amplitude-modulated
// harmonic complexes with formant shaping), noise priors (white / pink /
// babble-like), SNR-controlled mixtures, and the seeded batch sampler that
// enforces the unpaired-training contract.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "dualse/dsp.hpp"
#include "dualse/rng.hpp"

namespace dualse {

enum class CorpusRole { CleanPrior, NoisePrior, NoisyTrain, EvalPair };

std::string corpus_role_name(CorpusRole role);
CorpusRole corpus_role_from_name(const std::string& name);

struct ManifestEntry {
  std::string id;
  std::string path;  // relative to the manifest's directory
  double duration_sec = 0.0;
};

struct CorpusManifest {
  std::vector<ManifestEntry> entries;
  CorpusRole role = CorpusRole::CleanPrior;
  int sample_rate = 8000;
  std::string dir;  // directory holding the CSV and audio files

  std::string wav_path(size_t i) const { return dir + "/" + entries[i].path; }
  void validate() const;  // unique ids, files exist
};

// CSV schema: header `id,path,duration_sec`; role and sample rate live in the
// sidecar `<name>.meta.json` together with an echo of the generation config.
void save_manifest(const CorpusManifest& m, const std::string& csv_path,
                   const std::string& config_echo_json);
CorpusManifest load_manifest(const std::string& csv_path);

struct SynthSpeechConfig {
  double f0_min = 120.0, f0_max = 250.0;
  int harmonics = 12;
  std::array<std::pair<double, double>, 3> formant_ranges = {
      {{300.0, 900.0}, {1000.0, 2200.0}, {2400.0, 3400.0}}};
  double formant_bw = 250.0;
  double am_rate_min = 2.0, am_rate_max = 6.0;
  double dur_min = 0.6, dur_max = 1.2;
  int sample_rate = 8000;
  std::string domain_tag = "base";

  void validate() const;
};

// Disjoint f0/formant ranges relative to the base config: the out-of-domain
// clean-speech prior.
SynthSpeechConfig shifted_speech_config();

enum class NoiseKind { White, Pink, Babble };
std::string noise_kind_name(NoiseKind k);
NoiseKind noise_kind_from_name(const std::string& name);

struct MixSpec {
  double snr_min_db = 0.0;
  double snr_max_db = 10.0;

  void validate() const;
};

// Single-utterance synthesis (deterministic given the stream).
Waveform synth_speech_utterance(const SynthSpeechConfig& cfg, RandomStream& rs);
Waveform synth_noise_utterance(NoiseKind kind, int sample_rate, double duration_sec,
                               RandomStream& rs);

// Corpus generation: writes WAVs + CSV + sidecar into out_dir, returns the
// manifest. Deterministic given (config, seed).
CorpusManifest synth_speech_corpus(const SynthSpeechConfig& cfg, int count, uint64_t seed,
                                   const std::string& out_dir, const std::string& name);
CorpusManifest synth_noise_corpus(NoiseKind kind, int count, uint64_t seed, int sample_rate,
                                  const std::string& out_dir, const std::string& name);

// noisy = speech + gain * noise with the gain chosen so the realized SNR over
// the clip equals snr_db exactly. Short noise is tiled, long noise cropped
// from its start. Zero-power speech or noise is an error.
struct MixResult {
  Waveform noisy;
  double gain = 0.0;
};
MixResult mix_at_snr(const Waveform& speech, const Waveform& noise, double snr_db);

// Simulated noisy corpora. Speech/noise draws use dedicated substreams that
// never overlap the prior corpora's streams.
CorpusManifest synth_noisy_corpus(const SynthSpeechConfig& speech_cfg, NoiseKind noise_kind,
                                  const MixSpec& mix, int count, uint64_t seed,
                                  const std::string& out_dir, const std::string& name);

// Evaluation triplets: <id>.noisy.wav / .clean.wav / .noise.wav; the manifest
// points at the noisy file, references are resolved by suffix.
CorpusManifest synth_eval_pairs(const SynthSpeechConfig& speech_cfg, NoiseKind noise_kind,
                                const MixSpec& mix, int count, uint64_t seed,
                                const std::string& out_dir, const std::string& name);

struct EvalPair {
  std::string id;
  Waveform noisy, clean, noise;
};
std::vector<EvalPair> load_eval_pairs(const CorpusManifest& m);

// In-memory corpus for the training loop.
class CorpusCache {
 public:
  explicit CorpusCache(const CorpusManifest& m);
  const CorpusManifest& manifest() const { return manifest_; }
  const Waveform& wave(size_t i) const { return waves_[i]; }
  size_t size() const { return waves_.size(); }

 private:
  CorpusManifest manifest_;
  std::vector<Waveform> waves_;
};

struct BatchTriple {
  // Row-major [batch x clip_len].
  std::vector<float> noisy, clean_prior, noise_prior;
  int64_t batch = 0;
  int64_t clip_len = 0;
  std::vector<std::string> noisy_ids, clean_ids, noise_ids;
};

// Draws one training batch for a given step. Clean-prior and noise-prior clips
// are sampled independently of the noisy clips; manifests with role EvalPair
// are rejected so the trainer can never observe references. Deterministic in
// (seed, step).
BatchTriple sample_unpaired_batch(const CorpusCache& clean, const CorpusCache& noise,
                                  const CorpusCache& noisy, int64_t batch, int64_t clip_len,
                                  uint64_t seed, uint64_t step);

}  // namespace dualse
