#pragma once

// Training harness: config file handling, the two-domain dataset loaders,
// augmentation, the per-iteration update schedule, metrics emission, and
// checkpoint round-trips.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ucast/backbone.hpp"
#include "ucast/contrastive.hpp"
#include "ucast/domain_enhance.hpp"
#include "ucast/style_codec.hpp"
#include "ucast/video.hpp"

namespace ucast {

// Raised for malformed config files / keys; the CLI maps it to a usage error.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  // objective weights
  real lambda1 = 1.0;
  real lambda2 = 2.0;
  real lambda3 = 0.2;
  real lambda4 = 1.0;
  // optimizer + schedule
  real lr = 1e-4;
  real beta1 = 0.5;
  real beta2 = 0.999;
  int64_t iterations = 2000;
  int64_t batch_size = 4;
  int64_t resolution = 64;
  bool decay = true;  // linear learning-rate decay to 0 over `iterations`
  // ablation flags
  bool fixed_temperature = false;
  bool no_contrastive = false;
  bool mix_de = false;
  bool no_de = false;
  bool one_de = false;
  bool asym_cycle = false;
  // architecture
  std::string extractor = "conv_stack";  // or "external"
  std::string extractor_weights;         // archive path when extractor=external
  // conv_stack only: update the extractor together with the projector, or
  // keep it frozen at its seeded init (external weights are always frozen)
  bool train_extractor = true;
  std::string backbone = "adain";        // or "identity"
  int64_t extractor_width = 8;
  int64_t code_dim = 64;
  int64_t msp_hidden = 64;
  int64_t gen_width = 8;
  int64_t disc_width = 8;
  // desk default: small enough to fill within the first training phase, so
  // loss trends reflect alignment rather than a still-growing negative pool
  int64_t bank_capacity = 256;
  int64_t msp_pretrain_steps = 0;
  // temperature scheme
  TemperatureConfig temperature;
  // patch-wise content term
  int64_t patch_layer = 2;
  int64_t patch_negatives = 255;
  real patch_tau = 0.07;
  // adversarial pairing switch (swapped = the alternative assignment)
  bool swap_adv_pairing = false;
  // bookkeeping
  uint64_t seed = 1234;
  int64_t checkpoint_every = 0;  // 0 = final checkpoint only

  void validate() const;  // throws ConfigError
};

// plain-text "key: value" per line, '#' comments, unknown keys fatal
TrainConfig parse_config_file(const std::string& path);
// applies one key/value pair; throws ConfigError on unknown key or bad value
void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& value);
// canonical text form (covers every settable key; reparses to an equal
// config) and its FNV-1a hash
std::string serialize_config(const TrainConfig& cfg);
std::string config_hash(const TrainConfig& cfg);

// UCAST_NUM_WORKERS, default 0 (synchronous decode)
int64_t num_workers_from_env();

// random resize (scale in [0.8,1.2]) -> random crop back to the input
// resolution -> rotation by a random multiple of 90 degrees, independently
// per image; too-small intermediates fall back to resizing up
ImageBatch augment(const ImageBatch& image, Rng& rng);

// lambda1*adv + lambda2*cyc + lambda3*contra_g + lambda4*contra_c with the
// ablation flags masking their terms; throws std::runtime_error naming the
// first non-finite part that carries weight
real total_loss(real adv, real cyc, real contra_g, real contra_c, const TrainConfig& cfg);

// Infinite shuffled iterator over an image directory. All files are decoded
// and resized up front (in parallel when workers > 0); unreadable files are
// dropped with one warning each. The batch sequence depends only on the
// seed, never on the worker count.
class DatasetLoader {
 public:
  DatasetLoader(const std::string& root, Domain domain, int64_t resolution, int64_t batch_size,
                uint64_t seed, int64_t num_workers = 0);

  ImageBatch next();
  int64_t num_images() const { return static_cast<int64_t>(images_.size()); }

  // deterministic-resume support
  std::string serialize_state() const;
  void restore_state(const std::string& blob);

 private:
  void reshuffle();

  Domain domain_;
  int64_t resolution_;
  int64_t batch_size_;
  std::vector<Tensor> images_;  // decoded + resized, index order = sorted filenames

  Rng rng_;
  std::vector<int64_t> perm_;
  int64_t cursor_ = 0;
};

// per-iteration scalar record; written as one JSON object per line
struct StepMetrics {
  int64_t iteration = 0;
  real lr = 0;
  real loss_total = 0;
  real adv_value = 0;  // the two-discriminator objective (what D maximizes)
  real loss_gen_adv = 0;
  real loss_cyc = 0;
  real loss_contra_g = 0;
  real loss_contra_c = 0;
  real loss_msp = 0;
  real tau_pos_mean = 0;
  real tau_neg_mean = 0;
  int64_t bank_size = 0;
  bool warmup = false;

  std::string to_json() const;
};

class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg);

  // Restores everything (parameters, optimizer moments, bank, temperature
  // state, RNGs, iteration counter) from a checkpoint written by
  // save_checkpoint. The config must hash-match the one the checkpoint was
  // trained with.
  static Trainer resume(const std::string& checkpoint_path, const TrainConfig& cfg);

  // one full iteration on explicit batches (see train_step schedule below)
  StepMetrics train_step(const ImageBatch& batch_c, const ImageBatch& batch_s);

  // drives loaders + metrics + periodic checkpoints up to cfg.iterations
  void run(const std::string& content_dir, const std::string& style_dir,
           const std::string& out_dir);

  // loader_*_state: pass the loaders' serialized states when checkpointing
  // mid-run so a resumed run sees the identical batch sequence
  void save_checkpoint(const std::string& path, const std::string& loader_content_state = "",
                       const std::string& loader_style_state = "") const;

  int64_t iteration() const { return iteration_; }
  real current_lr() const;
  bool finished() const { return iteration_ >= cfg_.iterations; }

  // component access (tests, CLI inference)
  const TrainConfig& config() const { return cfg_; }
  FeatureExtractor& extractor() { return *extractor_; }
  MspProjector& msp() { return msp_; }
  GeneratorBackbone& generator() { return *generator_; }
  PatchDiscriminator& disc_r() { return disc_r_; }
  PatchDiscriminator& disc_a() { return disc_a_; }
  MemoryBank& bank() { return bank_; }
  TemperatureState& temperature_state() { return temp_state_; }
  Rng& rng() { return rng_; }

 private:
  void build_models();
  ParamMap msp_group() const;   // projector (+ extractor when trainable)
  ParamMap gen_group() const;
  ParamMap disc_group() const;

  TrainConfig cfg_;
  Rng rng_;  // augmentation + patch-location sampling
  int64_t iteration_ = 0;

  std::unique_ptr<FeatureExtractor> extractor_;
  bool extractor_trainable_ = true;
  MspProjector msp_;
  std::unique_ptr<GeneratorBackbone> generator_;
  PatchDiscriminator disc_r_;
  PatchDiscriminator disc_a_;

  MemoryBank bank_;
  TemperatureState temp_state_;

  Adam opt_msp_;
  Adam opt_gen_;
  Adam opt_disc_;

  uint64_t loader_seed_c_ = 0;
  uint64_t loader_seed_s_ = 0;
  // loader states waiting to be applied when run() builds its loaders
  std::optional<std::string> pending_content_state_;
  std::optional<std::string> pending_style_state_;
};

// The model components of a checkpoint, for inference-only use.
struct InferenceModel {
  TrainConfig cfg;
  std::unique_ptr<FeatureExtractor> extractor;
  MspProjector msp;
  std::unique_ptr<GeneratorBackbone> generator;
};
InferenceModel load_inference_model(const std::string& checkpoint_path);

}  // namespace ucast
