#include "ucast/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace fs = std::filesystem;

namespace ucast {

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

namespace {

real parse_real(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    real r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a number");
  }
}

int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as an integer");
  }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    // stoull would wrap a negative literal around instead of rejecting it
    if (v.find('-') != std::string::npos) throw std::invalid_argument("negative");
    uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as an unsigned integer");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false/1/0, got '" + v + "'");
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string fmt_real(real v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  auto bad = [](const std::string& m) { throw ConfigError("config: " + m); };
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0 || lambda4 < 0) bad("loss weights must be >= 0");
  if (!(lr > 0)) bad("lr must be > 0");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) bad("betas must lie in [0,1)");
  if (iterations < 1) bad("iterations must be >= 1");
  if (batch_size < 1) bad("batch_size must be >= 1");
  if (resolution < 16) bad("resolution must be >= 16");
  if ((mix_de ? 1 : 0) + (no_de ? 1 : 0) + (one_de ? 1 : 0) > 1) {
    bad("mix_de / no_de / one_de are mutually exclusive");
  }
  if (extractor != "conv_stack" && extractor != "external") {
    bad("extractor must be 'conv_stack' or 'external'");
  }
  if (extractor == "external" && extractor_weights.empty()) {
    bad("extractor=external requires extractor_weights");
  }
  if (backbone != "adain" && backbone != "identity") bad("backbone must be 'adain' or 'identity'");
  if (extractor_width < 1 || gen_width < 1 || disc_width < 1) bad("widths must be >= 1");
  if (code_dim < 1 || msp_hidden < 1) bad("code_dim and msp_hidden must be >= 1");
  if (bank_capacity < 1) bad("bank_capacity must be >= 1");
  if (msp_pretrain_steps < 0) bad("msp_pretrain_steps must be >= 0");
  if (patch_layer < 0) bad("patch_layer must be >= 0");
  if (patch_negatives < 1) bad("patch_negatives must be >= 1");
  if (!(patch_tau > 0)) bad("patch_tau must be > 0");
  if (checkpoint_every < 0) bad("checkpoint_every must be >= 0");
  try {
    temperature.validate();
  } catch (const std::invalid_argument& e) {
    bad(e.what());
  }
}

void apply_config_entry(TrainConfig& c, const std::string& key, const std::string& value) {
  if (key == "lambda1") c.lambda1 = parse_real(key, value);
  else if (key == "lambda2") c.lambda2 = parse_real(key, value);
  else if (key == "lambda3") c.lambda3 = parse_real(key, value);
  else if (key == "lambda4") c.lambda4 = parse_real(key, value);
  else if (key == "lr") c.lr = parse_real(key, value);
  else if (key == "beta1") c.beta1 = parse_real(key, value);
  else if (key == "beta2") c.beta2 = parse_real(key, value);
  else if (key == "iterations") c.iterations = parse_int(key, value);
  else if (key == "batch_size") c.batch_size = parse_int(key, value);
  else if (key == "resolution") c.resolution = parse_int(key, value);
  else if (key == "decay") c.decay = parse_bool(key, value);
  else if (key == "fixed_temperature") c.fixed_temperature = parse_bool(key, value);
  else if (key == "no_contrastive") c.no_contrastive = parse_bool(key, value);
  else if (key == "mix_de") c.mix_de = parse_bool(key, value);
  else if (key == "no_de") c.no_de = parse_bool(key, value);
  else if (key == "one_de") c.one_de = parse_bool(key, value);
  else if (key == "asym_cycle") c.asym_cycle = parse_bool(key, value);
  else if (key == "extractor") c.extractor = value;
  else if (key == "extractor_weights") c.extractor_weights = value;
  else if (key == "train_extractor") c.train_extractor = parse_bool(key, value);
  else if (key == "backbone") c.backbone = value;
  else if (key == "extractor_width") c.extractor_width = parse_int(key, value);
  else if (key == "code_dim") c.code_dim = parse_int(key, value);
  else if (key == "msp_hidden") c.msp_hidden = parse_int(key, value);
  else if (key == "gen_width") c.gen_width = parse_int(key, value);
  else if (key == "disc_width") c.disc_width = parse_int(key, value);
  else if (key == "bank_capacity") c.bank_capacity = parse_int(key, value);
  else if (key == "msp_pretrain_steps") c.msp_pretrain_steps = parse_int(key, value);
  else if (key == "t_range_neg") c.temperature.t_range_neg = parse_real(key, value);
  else if (key == "t_bound_neg") c.temperature.t_bound_neg = parse_real(key, value);
  else if (key == "t_range_pos") c.temperature.t_range_pos = parse_real(key, value);
  else if (key == "t_bound_pos") c.temperature.t_bound_pos = parse_real(key, value);
  else if (key == "clip_threshold") c.temperature.clip_threshold = parse_real(key, value);
  else if (key == "ema_decay") c.temperature.ema_decay = parse_real(key, value);
  else if (key == "fixed_tau") c.temperature.fixed_tau = parse_real(key, value);
  else if (key == "prior_mu_neg") c.temperature.prior_mu_neg = parse_real(key, value);
  else if (key == "prior_sigma_neg") c.temperature.prior_sigma_neg = parse_real(key, value);
  else if (key == "prior_mu_pos") c.temperature.prior_mu_pos = parse_real(key, value);
  else if (key == "prior_sigma_pos") c.temperature.prior_sigma_pos = parse_real(key, value);
  else if (key == "patch_layer") c.patch_layer = parse_int(key, value);
  else if (key == "patch_negatives") c.patch_negatives = parse_int(key, value);
  else if (key == "patch_tau") c.patch_tau = parse_real(key, value);
  else if (key == "swap_adv_pairing") c.swap_adv_pairing = parse_bool(key, value);
  else if (key == "seed") c.seed = parse_u64(key, value);
  else if (key == "checkpoint_every") c.checkpoint_every = parse_int(key, value);
  else throw ConfigError("unknown config key '" + key + "'");
}

TrainConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  TrainConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t colon = line.find(':');
    if (colon == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key: value'");
    }
    apply_config_entry(cfg, trim(line.substr(0, colon)), trim(line.substr(colon + 1)));
  }
  cfg.validate();
  return cfg;
}

std::string serialize_config(const TrainConfig& c) {
  std::ostringstream os;
  os << "lambda1: " << fmt_real(c.lambda1) << "\n";
  os << "lambda2: " << fmt_real(c.lambda2) << "\n";
  os << "lambda3: " << fmt_real(c.lambda3) << "\n";
  os << "lambda4: " << fmt_real(c.lambda4) << "\n";
  os << "lr: " << fmt_real(c.lr) << "\n";
  os << "beta1: " << fmt_real(c.beta1) << "\n";
  os << "beta2: " << fmt_real(c.beta2) << "\n";
  os << "iterations: " << c.iterations << "\n";
  os << "batch_size: " << c.batch_size << "\n";
  os << "resolution: " << c.resolution << "\n";
  os << "decay: " << (c.decay ? "true" : "false") << "\n";
  os << "fixed_temperature: " << (c.fixed_temperature ? "true" : "false") << "\n";
  os << "no_contrastive: " << (c.no_contrastive ? "true" : "false") << "\n";
  os << "mix_de: " << (c.mix_de ? "true" : "false") << "\n";
  os << "no_de: " << (c.no_de ? "true" : "false") << "\n";
  os << "one_de: " << (c.one_de ? "true" : "false") << "\n";
  os << "asym_cycle: " << (c.asym_cycle ? "true" : "false") << "\n";
  os << "extractor: " << c.extractor << "\n";
  if (!c.extractor_weights.empty()) os << "extractor_weights: " << c.extractor_weights << "\n";
  os << "train_extractor: " << (c.train_extractor ? "true" : "false") << "\n";
  os << "backbone: " << c.backbone << "\n";
  os << "extractor_width: " << c.extractor_width << "\n";
  os << "code_dim: " << c.code_dim << "\n";
  os << "msp_hidden: " << c.msp_hidden << "\n";
  os << "gen_width: " << c.gen_width << "\n";
  os << "disc_width: " << c.disc_width << "\n";
  os << "bank_capacity: " << c.bank_capacity << "\n";
  os << "msp_pretrain_steps: " << c.msp_pretrain_steps << "\n";
  os << "t_range_neg: " << fmt_real(c.temperature.t_range_neg) << "\n";
  os << "t_bound_neg: " << fmt_real(c.temperature.t_bound_neg) << "\n";
  os << "t_range_pos: " << fmt_real(c.temperature.t_range_pos) << "\n";
  os << "t_bound_pos: " << fmt_real(c.temperature.t_bound_pos) << "\n";
  os << "clip_threshold: " << fmt_real(c.temperature.clip_threshold) << "\n";
  os << "ema_decay: " << fmt_real(c.temperature.ema_decay) << "\n";
  os << "fixed_tau: " << fmt_real(c.temperature.fixed_tau) << "\n";
  os << "prior_mu_neg: " << fmt_real(c.temperature.prior_mu_neg) << "\n";
  os << "prior_sigma_neg: " << fmt_real(c.temperature.prior_sigma_neg) << "\n";
  os << "prior_mu_pos: " << fmt_real(c.temperature.prior_mu_pos) << "\n";
  os << "prior_sigma_pos: " << fmt_real(c.temperature.prior_sigma_pos) << "\n";
  os << "patch_layer: " << c.patch_layer << "\n";
  os << "patch_negatives: " << c.patch_negatives << "\n";
  os << "patch_tau: " << fmt_real(c.patch_tau) << "\n";
  os << "swap_adv_pairing: " << (c.swap_adv_pairing ? "true" : "false") << "\n";
  os << "seed: " << c.seed << "\n";
  os << "checkpoint_every: " << c.checkpoint_every << "\n";
  return os.str();
}

std::string config_hash(const TrainConfig& cfg) {
  const std::string text = serialize_config(cfg);
  uint64_t h = 14695981039346656037ull;  // FNV-1a
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, h);
  return buf;
}

int64_t num_workers_from_env() {
  const char* v = std::getenv("UCAST_NUM_WORKERS");
  if (v == nullptr || *v == '\0') return 0;
  int64_t n = parse_int("UCAST_NUM_WORKERS", v);
  if (n < 0) throw ConfigError("UCAST_NUM_WORKERS must be >= 0");
  return n;
}

// ---------------------------------------------------------------------------
// augmentation + objective assembly
// ---------------------------------------------------------------------------

namespace {

Tensor slice_image(const Tensor& batch, int64_t b) {
  const int64_t C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  Tensor out({1, C, H, W});
  const int64_t n = C * H * W;
  for (int64_t i = 0; i < n; ++i) out[i] = batch[b * n + i];
  return out;
}

}  // namespace

ImageBatch augment(const ImageBatch& image, Rng& rng) {
  validate_image_batch(image);
  const int64_t B = image.batch(), H = image.height(), W = image.width();
  Tensor out({B, 3, H, W});
  for (int64_t b = 0; b < B; ++b) {
    Tensor img = slice_image(image.pixels, b);
    const real scale = rng.uniform(0.8, 1.2);
    // scales below 1 would leave nothing to crop; resize up instead
    const int64_t rh = std::max(static_cast<int64_t>(std::llround(static_cast<real>(H) * scale)), H);
    const int64_t rw = std::max(static_cast<int64_t>(std::llround(static_cast<real>(W) * scale)), W);
    img = resize_bilinear(img, rh, rw);
    const int64_t top = rng.uniform_int(rh - H + 1);
    const int64_t left = rng.uniform_int(rw - W + 1);
    img = crop(img, top, left, H, W);
    img = rot90(img, rng.uniform_int(4));  // square crop, so dims are stable
    const int64_t n = 3 * H * W;
    for (int64_t i = 0; i < n; ++i) out[b * n + i] = img[i];
  }
  ImageBatch res;
  res.pixels = std::move(out);
  res.domain = image.domain;
  return res;
}

real total_loss(real adv, real cyc, real contra_g, real contra_c, const TrainConfig& cfg) {
  struct Part {
    const char* name;
    real weight;
    real value;
  };
  const Part parts[] = {
      {"adversarial", cfg.no_de ? 0 : cfg.lambda1, adv},
      {"cycle", cfg.no_de ? 0 : cfg.lambda2, cyc},
      {"contrastive-style", cfg.no_contrastive ? 0 : cfg.lambda3, contra_g},
      {"contrastive-content", cfg.lambda4, contra_c},
  };
  real total = 0;
  for (const Part& p : parts) {
    if (p.weight == 0) continue;
    if (!std::isfinite(p.value)) {
      throw std::runtime_error(std::string("total loss: part '") + p.name + "' is non-finite");
    }
    total += p.weight * p.value;
  }
  return total;
}

// ---------------------------------------------------------------------------
// dataset loader
// ---------------------------------------------------------------------------

namespace {

bool has_image_extension(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

}  // namespace

DatasetLoader::DatasetLoader(const std::string& root, Domain domain, int64_t resolution,
                             int64_t batch_size, uint64_t seed, int64_t num_workers)
    : domain_(domain), resolution_(resolution), batch_size_(batch_size), rng_(seed) {
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_regular_file() && has_image_extension(entry.path())) {
      files.push_back(entry.path().string());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("dataset loader: no image files in " + root);

  // Decode everything up front (in parallel when allowed); batch assembly is
  // then a deterministic copy regardless of worker count.
  std::vector<std::optional<Tensor>> decoded(files.size());
  std::atomic<size_t> next{0};
  auto decode_range = [&]() {
    for (size_t i = next.fetch_add(1); i < files.size(); i = next.fetch_add(1)) {
      try {
        Tensor img = load_image(files[i]);
        if (img.dim(2) != resolution_ || img.dim(3) != resolution_) {
          img = resize_bilinear(img, resolution_, resolution_);
        }
        decoded[i] = std::move(img);
      } catch (const std::exception&) {
        // handled below, in deterministic file order
      }
    }
  };
  if (num_workers > 0) {
    std::vector<std::thread> pool;
    for (int64_t w = 0; w < num_workers; ++w) pool.emplace_back(decode_range);
    for (auto& t : pool) t.join();
  } else {
    decode_range();
  }
  for (size_t i = 0; i < files.size(); ++i) {
    if (decoded[i].has_value()) {
      images_.push_back(std::move(*decoded[i]));
    } else {
      std::cerr << "dataset loader: skipping unreadable file " << files[i] << "\n";
    }
  }
  if (images_.empty()) throw std::runtime_error("dataset loader: no readable images in " + root);
}

void DatasetLoader::reshuffle() {
  const int64_t n = num_images();
  perm_.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) perm_[static_cast<size_t>(i)] = i;
  for (int64_t i = n - 1; i > 0; --i) {
    const int64_t j = rng_.uniform_int(i + 1);
    std::swap(perm_[static_cast<size_t>(i)], perm_[static_cast<size_t>(j)]);
  }
  cursor_ = 0;
}

ImageBatch DatasetLoader::next() {
  Tensor out({batch_size_, 3, resolution_, resolution_});
  const int64_t n = 3 * resolution_ * resolution_;
  for (int64_t b = 0; b < batch_size_; ++b) {
    if (cursor_ >= static_cast<int64_t>(perm_.size())) reshuffle();
    const Tensor& img = images_[static_cast<size_t>(perm_[static_cast<size_t>(cursor_++)])];
    for (int64_t i = 0; i < n; ++i) out[b * n + i] = img[i];
  }
  ImageBatch res;
  res.pixels = std::move(out);
  res.domain = domain_;
  return res;
}

std::string DatasetLoader::serialize_state() const {
  std::ostringstream os;
  os << "cursor " << cursor_ << "\n";
  os << "perm " << perm_.size();
  for (int64_t v : perm_) os << " " << v;
  os << "\n";
  os << "rng " << rng_.serialize() << "\n";
  return os.str();
}

void DatasetLoader::restore_state(const std::string& blob) {
  std::istringstream is(blob);
  std::string tag;
  int64_t cursor = 0;
  size_t perm_n = 0;
  if (!(is >> tag >> cursor) || tag != "cursor") {
    throw std::runtime_error("dataset loader state: bad cursor field");
  }
  if (!(is >> tag >> perm_n) || tag != "perm") {
    throw std::runtime_error("dataset loader state: bad perm field");
  }
  std::vector<int64_t> perm(perm_n);
  for (size_t i = 0; i < perm_n; ++i) {
    if (!(is >> perm[i]) || perm[i] < 0 || perm[i] >= num_images()) {
      throw std::runtime_error("dataset loader state: bad perm entry");
    }
  }
  if (!(is >> tag) || tag != "rng") throw std::runtime_error("dataset loader state: bad rng field");
  std::string rest;
  std::getline(is, rest);
  Rng rng;
  rng.deserialize(trim(rest));
  if (cursor < 0 || cursor > static_cast<int64_t>(perm_n)) {
    throw std::runtime_error("dataset loader state: cursor out of range");
  }
  rng_ = rng;
  perm_ = std::move(perm);
  cursor_ = cursor;
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

std::string StepMetrics::to_json() const {
  nlohmann::json j;
  j["iteration"] = iteration;
  j["lr"] = lr;
  j["loss_total"] = loss_total;
  j["adv_value"] = adv_value;
  j["loss_gen_adv"] = loss_gen_adv;
  j["loss_cyc"] = loss_cyc;
  j["loss_contra_g"] = loss_contra_g;
  j["loss_contra_c"] = loss_contra_c;
  j["loss_msp"] = loss_msp;
  j["tau_pos_mean"] = tau_pos_mean;
  j["tau_neg_mean"] = tau_neg_mean;
  j["bank_size"] = bank_size;
  j["warmup"] = warmup;
  return j.dump();
}

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

namespace {

// Warm-up stand-in while the bank lacks negatives: a fixed-temperature
// positive-alignment penalty, one term per layer.
Variable warmup_positive_penalty(const StyleCode& z, const StyleCode& z_target, real tau) {
  Variable total;
  for (size_t i = 0; i < z.codes.size(); ++i) {
    Variable s = row_dot(z.codes[i], z_target.codes[i].detach());
    Variable term = mul_scalar(add_scalar(neg(mean_all(s)), 1.0), 1.0 / tau);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

void set_group_trainable(ParamMap& params, bool b) {
  for (auto& [name, p] : params) {
    (void)name;
    p.set_requires_grad(b);
  }
}

void zero_group(ParamMap& params) {
  for (auto& [name, p] : params) {
    (void)name;
    p.zero_grad();
  }
}

}  // namespace

Trainer::Trainer(const TrainConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  build_models();
}

void Trainer::build_models() {
  // every component draws its init stream from one master seed, in a fixed
  // order, so a config seed pins the whole system
  Rng master(cfg_.seed);
  Rng ext_rng(master.fork_seed());
  Rng msp_rng(master.fork_seed());
  Rng gen_rng(master.fork_seed());
  Rng dr_rng(master.fork_seed());
  Rng da_rng(master.fork_seed());
  loader_seed_c_ = master.fork_seed();
  loader_seed_s_ = master.fork_seed();
  rng_ = Rng(master.fork_seed());

  if (cfg_.extractor == "conv_stack") {
    extractor_ = std::make_unique<ConvStackExtractor>(cfg_.extractor_width, ext_rng);
    extractor_trainable_ = cfg_.train_extractor;
  } else {
    extractor_ = std::make_unique<ExternalExtractor>(cfg_.extractor_weights);
    extractor_trainable_ = false;
  }
  msp_ = MspProjector(extractor_->tap_channels(), cfg_.msp_hidden, cfg_.code_dim, msp_rng);
  if (cfg_.backbone == "adain") {
    generator_ =
        std::make_unique<AdaInBackbone>(cfg_.gen_width, cfg_.code_dim, extractor_->tap_strides(),
                                        gen_rng);
  } else {
    generator_ = std::make_unique<IdentityBackbone>();
  }
  disc_r_ = PatchDiscriminator(cfg_.disc_width, dr_rng);
  disc_a_ = PatchDiscriminator(cfg_.disc_width, da_rng);

  bank_ = MemoryBank(extractor_->num_taps(), cfg_.code_dim, cfg_.bank_capacity);
  temp_state_ = TemperatureState{};
  opt_msp_ = Adam(cfg_.lr, cfg_.beta1, cfg_.beta2);
  opt_gen_ = Adam(cfg_.lr, cfg_.beta1, cfg_.beta2);
  opt_disc_ = Adam(cfg_.lr, cfg_.beta1, cfg_.beta2);
}

ParamMap Trainer::msp_group() const {
  ParamMap out;
  msp_.collect_params("msp.", out);
  if (extractor_trainable_) extractor_->collect_params("extractor.", out);
  return out;
}

ParamMap Trainer::gen_group() const {
  ParamMap out;
  generator_->collect_params("gen.", out);
  return out;
}

ParamMap Trainer::disc_group() const {
  ParamMap out;
  disc_r_.collect_params("disc_r.", out);
  disc_a_.collect_params("disc_a.", out);
  return out;
}

real Trainer::current_lr() const {
  if (!cfg_.decay) return cfg_.lr;
  real frac = 1.0 - static_cast<real>(iteration_) / static_cast<real>(cfg_.iterations);
  return cfg_.lr * std::max<real>(frac, 0.0);
}

StepMetrics Trainer::train_step(const ImageBatch& batch_c, const ImageBatch& batch_s) {
  validate_image_batch(batch_c, cfg_.resolution);
  validate_image_batch(batch_s, cfg_.resolution);
  if (batch_c.batch() != batch_s.batch()) {
    throw std::invalid_argument("train_step: batch size mismatch");
  }

  StepMetrics m;
  m.warmup = bank_.empty() || bank_.size(0) < cfg_.batch_size;
  const real lr_scale = current_lr() / cfg_.lr;  // applied lr for this step
  const bool pretrain = iteration_ < cfg_.msp_pretrain_steps;
  const AdvPairing pairing =
      cfg_.swap_adv_pairing ? AdvPairing::kSwapped : AdvPairing::kArtisticFake;

  Variable xc = constant(batch_c.pixels);
  Variable xs = constant(batch_s.pixels);

  // style codes of the real batches; constants for the generator and the
  // bank, computed once before any parameter moves
  StyleCode z_c_ng, z_s_ng;
  {
    NoGradGuard ng;
    z_c_ng = encode_style(xc, *extractor_, msp_);
    z_s_ng = encode_style(xs, *extractor_, msp_);
  }

  ParamMap msp_params = msp_group();
  ParamMap gen_params = gen_group();
  ParamMap disc_params = disc_group();

  if (!pretrain) {
    // shared differentiable generator forward for (a) and (b)
    Variable i_cs = generator_->stylize(xc, z_s_ng);  // artistic-direction fake
    Variable i_sc = generator_->stylize(xs, z_c_ng);  // realistic-direction fake
    Variable fake_a = pairing == AdvPairing::kArtisticFake ? i_cs : i_sc;

    // (a) discriminator update on detached fakes
    if (!cfg_.no_de) {
      Variable d_loss;
      if (cfg_.mix_de) {
        d_loss = mixed_discriminator_loss(disc_r_, xc, xs, i_cs.detach(), i_sc.detach());
      } else if (cfg_.one_de) {
        d_loss = artistic_only_discriminator_loss(disc_a_, xs, fake_a.detach());
      } else {
        d_loss = discriminator_loss(disc_r_, disc_a_, xc, xs, i_cs.detach(), i_sc.detach(),
                                    pairing);
      }
      if (!std::isfinite(d_loss.item())) {
        throw std::runtime_error("train_step: non-finite discriminator loss");
      }
      zero_group(disc_params);
      d_loss.backward();
      opt_disc_.step(disc_params, lr_scale);
      m.adv_value = -d_loss.item();  // the value the discriminators maximize
    }

    // (b) generator update on the full objective, style branch + critics
    // frozen so only generator parameters accumulate gradient
    set_group_trainable(msp_params, false);
    set_group_trainable(disc_params, false);

    Variable obj;
    auto add_part = [&obj](const Variable& v, real w) {
      if (w == 0) return;
      Variable t = mul_scalar(v, w);
      obj = obj.defined() ? add(obj, t) : t;
    };

    if (!cfg_.no_de) {
      Variable g_adv;
      if (cfg_.mix_de) {
        g_adv = mixed_generator_adversarial_loss(disc_r_, i_cs, i_sc);
      } else if (cfg_.one_de) {
        g_adv = artistic_only_generator_adversarial_loss(disc_a_, fake_a);
      } else {
        g_adv = generator_adversarial_loss(disc_r_, disc_a_, i_cs, i_sc, pairing);
      }
      m.loss_gen_adv = g_adv.item();
      add_part(g_adv, cfg_.lambda1);

      // reconstruct each source through the opposite stylization
      Variable rec_c = generator_->stylize(i_cs, z_c_ng);
      Variable rec_s = cfg_.asym_cycle ? xs : generator_->stylize(i_sc, z_s_ng);
      Variable cyc = cycle_consistency_loss(xc, xs, rec_c, rec_s, cfg_.asym_cycle);
      m.loss_cyc = cyc.item();
      add_part(cyc, cfg_.lambda2);
    }

    if (!cfg_.no_contrastive && cfg_.lambda3 != 0) {
      StyleCode z_tilde = encode_style(i_cs, *extractor_, msp_);
      if (m.warmup) {
        Variable w = warmup_positive_penalty(z_tilde, z_s_ng, cfg_.temperature.fixed_tau);
        m.loss_contra_g = w.item();
        m.tau_pos_mean = m.tau_neg_mean = cfg_.temperature.fixed_tau;
        add_part(w, cfg_.lambda3);
      } else {
        AdaptiveLossResult r = adaptive_contrastive_loss(z_tilde, z_s_ng, z_c_ng, bank_,
                                                         temp_state_, cfg_.temperature,
                                                         cfg_.fixed_temperature);
        m.loss_contra_g = r.loss.item();
        m.tau_pos_mean = r.mean_tau_pos;
        m.tau_neg_mean = r.mean_tau_neg;
        add_part(r.loss, cfg_.lambda3);
        // (e) running statistics feed the next step's temperatures
        update_stats(temp_state_, r.mean_sum_g_neg, r.mean_pos_content_sim, cfg_.temperature);
      }
    }

    if (cfg_.lambda4 != 0) {
      FeatureStack f_c = extractor_->extract(xc);
      FeatureStack f_out = extractor_->extract(i_cs);
      if (cfg_.patch_layer >= f_c.num_layers()) {
        throw std::invalid_argument("train_step: patch_layer out of range");
      }
      Variable pc = patch_content_loss(f_c.layers[static_cast<size_t>(cfg_.patch_layer)],
                                       f_out.layers[static_cast<size_t>(cfg_.patch_layer)],
                                       cfg_.patch_negatives, cfg_.patch_tau, rng_);
      m.loss_contra_c = pc.item();
      add_part(pc, cfg_.lambda4);
    }

    // finite-check every weighted part (throws naming the offender) and
    // record the assembled objective
    m.loss_total = total_loss(m.loss_gen_adv, m.loss_cyc, m.loss_contra_g, m.loss_contra_c, cfg_);

    if (obj.defined()) {
      zero_group(gen_params);
      obj.backward();
      opt_gen_.step(gen_params, lr_scale);
    }

    set_group_trainable(disc_params, true);
    set_group_trainable(msp_params, true);
  }

  // (c) projector update on the style batch and its augmented positive,
  // generator frozen
  {
    set_group_trainable(gen_params, false);
    ImageBatch batch_s_aug = augment(batch_s, rng_);
    StyleCode z = encode_style(batch_s, *extractor_, msp_);
    StyleCode z_plus = encode_style(batch_s_aug, *extractor_, msp_);
    Variable msp_loss =
        m.warmup ? warmup_positive_penalty(z, z_plus, cfg_.temperature.fixed_tau)
                 : msp_contrastive_loss(z, z_plus, bank_, cfg_.temperature.fixed_tau);
    if (!std::isfinite(msp_loss.item())) {
      throw std::runtime_error("train_step: non-finite projector loss");
    }
    m.loss_msp = msp_loss.item();
    zero_group(msp_params);
    msp_loss.backward();
    opt_msp_.step(msp_params, lr_scale);
    set_group_trainable(gen_params, true);
  }

  // (d) the real artistic codes from before this step's updates become
  // negatives for later steps
  bank_.enqueue(z_s_ng);

  // (f) schedule tick
  ++iteration_;
  m.iteration = iteration_;
  m.lr = lr_scale * cfg_.lr;
  m.bank_size = bank_.size(0);
  return m;
}

void Trainer::run(const std::string& content_dir, const std::string& style_dir,
                  const std::string& out_dir) {
  const int64_t workers = num_workers_from_env();
  DatasetLoader content(content_dir, Domain::kRealistic, cfg_.resolution, cfg_.batch_size,
                        loader_seed_c_, workers);
  DatasetLoader style(style_dir, Domain::kArtistic, cfg_.resolution, cfg_.batch_size,
                      loader_seed_s_, workers);
  if (pending_content_state_) {
    content.restore_state(*pending_content_state_);
    pending_content_state_.reset();
  }
  if (pending_style_state_) {
    style.restore_state(*pending_style_state_);
    pending_style_state_.reset();
  }

  fs::create_directories(out_dir);
  const std::string metrics_path = (fs::path(out_dir) / "metrics.jsonl").string();
  std::ofstream metrics(metrics_path, iteration_ > 0 ? std::ios::app : std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot open " + metrics_path);

  while (!finished()) {
    ImageBatch bc = content.next();
    ImageBatch bs = style.next();
    StepMetrics m = train_step(bc, bs);
    metrics << m.to_json() << "\n";
    metrics.flush();
    const bool periodic = cfg_.checkpoint_every > 0 && iteration_ % cfg_.checkpoint_every == 0;
    if (periodic && !finished()) {
      const std::string path =
          (fs::path(out_dir) / ("ckpt_" + std::to_string(iteration_) + ".bin")).string();
      save_checkpoint(path, content.serialize_state(), style.serialize_state());
    }
  }
  const std::string final_path =
      (fs::path(out_dir) / ("ckpt_" + std::to_string(iteration_) + ".bin")).string();
  save_checkpoint(final_path, content.serialize_state(), style.serialize_state());
}

void Trainer::save_checkpoint(const std::string& path, const std::string& loader_content_state,
                              const std::string& loader_style_state) const {
  Archive a;
  auto put_group = [&a](const ParamMap& params) {
    for (const auto& [name, p] : params) a.put_tensor(name, p.value());
  };
  // parameters (the extractor serializes even when frozen, so external
  // weights travel with the checkpoint)
  ParamMap all;
  extractor_->collect_params("extractor.", all);
  msp_.collect_params("msp.", all);
  generator_->collect_params("gen.", all);
  disc_r_.collect_params("disc_r.", all);
  disc_a_.collect_params("disc_a.", all);
  put_group(all);

  auto put_opt = [&a](const Adam& opt, const std::string& prefix) {
    for (const auto& [name, slot] : opt.slots()) {
      a.put_tensor(prefix + name + ".m", slot.m);
      a.put_tensor(prefix + name + ".v", slot.v);
      a.put_i64(prefix + name + ".t", slot.t);
    }
  };
  put_opt(opt_msp_, "opt.msp.");
  put_opt(opt_gen_, "opt.gen.");
  put_opt(opt_disc_, "opt.disc.");

  bank_.save(a);
  a.put_tensor("tempstate.mu_neg", Tensor::scalar(temp_state_.mu_neg));
  a.put_tensor("tempstate.m2_neg", Tensor::scalar(temp_state_.m2_neg));
  a.put_tensor("tempstate.mu_pos", Tensor::scalar(temp_state_.mu_pos));
  a.put_tensor("tempstate.m2_pos", Tensor::scalar(temp_state_.m2_pos));
  a.put_i64("tempstate.update_count", temp_state_.update_count);

  a.put_i64("iteration", iteration_);
  a.put_blob("config", serialize_config(cfg_));
  a.put_blob("config_hash", config_hash(cfg_));
  a.put_blob("rng.trainer", rng_.serialize());
  if (!loader_content_state.empty()) a.put_blob("loader.content", loader_content_state);
  if (!loader_style_state.empty()) a.put_blob("loader.style", loader_style_state);
  a.save(path);
}

namespace {

void load_group_params(const Archive& a, ParamMap& params) {
  for (auto& [name, p] : params) {
    const Tensor& t = a.tensor(name);
    if (t.shape() != p.shape()) {
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    }
    p.mutable_value() = t;
  }
}

void load_opt(const Archive& a, Adam& opt, const std::string& prefix, const ParamMap& params) {
  for (const auto& [name, p] : params) {
    (void)p;
    if (!a.has(prefix + name + ".m")) continue;  // parameter never updated
    Adam::Slot slot;
    slot.m = a.tensor(prefix + name + ".m");
    slot.v = a.tensor(prefix + name + ".v");
    slot.t = a.i64(prefix + name + ".t");
    opt.slots()[name] = std::move(slot);
  }
}

}  // namespace

Trainer Trainer::resume(const std::string& checkpoint_path, const TrainConfig& cfg) {
  Archive a = Archive::load(checkpoint_path);
  if (a.blob("config_hash") != config_hash(cfg)) {
    throw ConfigError("checkpoint " + checkpoint_path +
                      " was trained with a different configuration");
  }
  Trainer t(cfg);

  ParamMap all;
  t.extractor_->collect_params("extractor.", all);
  t.msp_.collect_params("msp.", all);
  t.generator_->collect_params("gen.", all);
  t.disc_r_.collect_params("disc_r.", all);
  t.disc_a_.collect_params("disc_a.", all);
  load_group_params(a, all);

  load_opt(a, t.opt_msp_, "opt.msp.", t.msp_group());
  load_opt(a, t.opt_gen_, "opt.gen.", t.gen_group());
  load_opt(a, t.opt_disc_, "opt.disc.", t.disc_group());

  t.bank_ = MemoryBank::load(a, cfg.bank_capacity);
  t.temp_state_.mu_neg = a.tensor("tempstate.mu_neg")[0];
  t.temp_state_.m2_neg = a.tensor("tempstate.m2_neg")[0];
  t.temp_state_.mu_pos = a.tensor("tempstate.mu_pos")[0];
  t.temp_state_.m2_pos = a.tensor("tempstate.m2_pos")[0];
  t.temp_state_.update_count = a.i64("tempstate.update_count");

  t.iteration_ = a.i64("iteration");
  t.rng_.deserialize(a.blob("rng.trainer"));
  if (a.has("loader.content")) t.pending_content_state_ = a.blob("loader.content");
  if (a.has("loader.style")) t.pending_style_state_ = a.blob("loader.style");
  return t;
}

InferenceModel load_inference_model(const std::string& checkpoint_path) {
  Archive a = Archive::load(checkpoint_path);
  TrainConfig cfg;
  std::istringstream is(a.blob("config"));
  std::string line;
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty()) continue;
    size_t colon = line.find(':');
    if (colon == std::string::npos) throw std::runtime_error("checkpoint: malformed config blob");
    apply_config_entry(cfg, trim(line.substr(0, colon)), trim(line.substr(colon + 1)));
  }
  // external extractor weights live inside the checkpoint itself
  if (cfg.extractor == "external") cfg.extractor_weights = checkpoint_path;
  cfg.validate();

  InferenceModel model;
  model.cfg = cfg;
  Rng master(cfg.seed);
  Rng ext_rng(master.fork_seed());
  Rng msp_rng(master.fork_seed());
  Rng gen_rng(master.fork_seed());
  if (cfg.extractor == "conv_stack") {
    model.extractor = std::make_unique<ConvStackExtractor>(cfg.extractor_width, ext_rng);
  } else {
    model.extractor = std::make_unique<ExternalExtractor>(a);
  }
  model.msp = MspProjector(model.extractor->tap_channels(), cfg.msp_hidden, cfg.code_dim, msp_rng);
  if (cfg.backbone == "adain") {
    model.generator = std::make_unique<AdaInBackbone>(cfg.gen_width, cfg.code_dim,
                                                      model.extractor->tap_strides(), gen_rng);
  } else {
    model.generator = std::make_unique<IdentityBackbone>();
  }

  ParamMap all;
  model.extractor->collect_params("extractor.", all);
  model.msp.collect_params("msp.", all);
  model.generator->collect_params("gen.", all);
  load_group_params(a, all);
  // inference never trains
  for (auto& [name, p] : all) {
    (void)name;
    p.set_requires_grad(false);
  }
  return model;
}

}  // namespace ucast
