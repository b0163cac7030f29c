#pragma once

// Contrastive machinery: the FIFO memory bank of negative style codes, the
// projector-side and generator-side InfoNCE losses, the input-dependent
// dual temperatures, and the analytic gradient oracle the tests check
// automatic differentiation against.

#include <deque>
#include <vector>

#include "ucast/checkpoint.hpp"
#include "ucast/style_codec.hpp"

namespace ucast {

// Ranges/bounds/priors for the input-dependent temperatures. The running
// statistics live in TemperatureState; priors apply before the first update.
struct TemperatureConfig {
  real t_range_neg = 0.2;
  real t_bound_neg = 0.05;
  real t_range_pos = 1.0;
  real t_bound_pos = 0.5;
  real clip_threshold = 0.3;  // similarities at or below this are ignored by the clip
  real ema_decay = 0.99;
  real fixed_tau = 0.07;  // projector loss + the fixed-temperature ablation
  real prior_mu_neg = 0.0;
  real prior_sigma_neg = 1.0;
  real prior_mu_pos = 0.0;
  real prior_sigma_pos = 1.0;

  void validate() const;  // throws std::invalid_argument on bad values
};

// Exponential moving estimates of mean/std for the two temperature inputs:
// the clipped negative-similarity sum and the style/content similarity.
// Tracks E[x] and E[x^2]; sigma is derived and floored at 1e-6.
struct TemperatureState {
  real mu_neg = 0.0;
  real m2_neg = 0.0;
  real mu_pos = 0.0;
  real m2_pos = 0.0;
  int64_t update_count = 0;

  real sigma_neg() const;
  real sigma_pos() const;
};

// EMA update of both channels. Non-finite inputs are rejected (returns
// false, state untouched). First observation initializes the means exactly.
bool update_stats(TemperatureState& state, real sum_g_neg, real pos_content_sim,
                  const TemperatureConfig& config);

// Sum of similarities above the clip threshold: sum_j g(s_j) with
// g(s) = s for s > threshold, else 0.
real clipped_similarity_sum(const std::vector<real>& s_neg, real threshold);

// Input-dependent negative temperature: bounded sigmoid of the standardized
// clipped similarity sum. Always inside (t_bound_neg, t_bound_neg + t_range_neg).
real negative_temperature(const std::vector<real>& s_neg, const TemperatureState& state,
                          const TemperatureConfig& config);

// Positive temperature tau+ = tau- * f(s_content) where f is a bounded
// sigmoid DECREASING in the style/content similarity: incompatible pairs
// shift the penalty toward the negatives.
real positive_temperature(real tau_neg, real z_hat_dot_zc, const TemperatureState& state,
                          const TemperatureConfig& config);

// Per-layer FIFO buffers of detached negative style codes.
class MemoryBank {
 public:
  MemoryBank() = default;
  MemoryBank(int64_t num_layers, int64_t dim, int64_t capacity = 4096);

  // Appends every row of every layer; evicts oldest-first past capacity.
  void enqueue(const StyleCode& codes);

  int64_t num_layers() const { return static_cast<int64_t>(queues_.size()); }
  int64_t dim() const { return dim_; }
  int64_t capacity() const { return capacity_; }
  int64_t size(int64_t layer) const;
  bool empty() const { return queues_.empty() || size(0) == 0; }
  bool full() const { return !queues_.empty() && size(0) == capacity_; }

  // (n, dim) matrix of layer entries, oldest first.
  Tensor snapshot(int64_t layer) const;

  void save(Archive& archive, const std::string& prefix = "bank.") const;
  static MemoryBank load(const Archive& archive, int64_t capacity,
                         const std::string& prefix = "bank.");

 private:
  int64_t capacity_ = 4096;
  int64_t dim_ = 0;
  std::vector<std::deque<std::vector<real>>> queues_;
};

// Projector-training InfoNCE: -sum_i log[ exp(z_i.z+_i/tau) /
// (exp(z_i.z+_i/tau) + sum_j exp(z_i.z-_ij/tau)) ], averaged over the batch
// rows. Differentiable through both z and z_plus.
Variable msp_contrastive_loss(const StyleCode& z, const StyleCode& z_plus, const MemoryBank& bank,
                              real tau);

// One dual-temperature InfoNCE layer from raw similarities. s_pos is (B,1),
// s_neg is (B,N); tau_pos/tau_neg give the per-row temperatures. Returns the
// mean over rows of logsumexp(logits) - s_pos/tau_pos.
Variable dual_temperature_infonce(const Variable& s_pos, const Variable& s_neg,
                                  const std::vector<real>& tau_pos,
                                  const std::vector<real>& tau_neg);

struct AdaptiveLossResult {
  Variable loss;
  real mean_tau_pos = 0.0;
  real mean_tau_neg = 0.0;
  // Temperature-input means for the trainer's running-statistics update.
  real mean_sum_g_neg = 0.0;
  real mean_pos_content_sim = 0.0;
};

// Generator-side adaptive contrastive loss over all layers. Gradients flow
// into z_tilde only; z_hat, z_c, the bank, and the temperatures are
// constants. With fixed_temperature both temperatures collapse to
// config.fixed_tau (the non-adaptive form).
AdaptiveLossResult adaptive_contrastive_loss(const StyleCode& z_tilde, const StyleCode& z_hat,
                                             const StyleCode& z_c, const MemoryBank& bank,
                                             const TemperatureState& state,
                                             const TemperatureConfig& config,
                                             bool fixed_temperature = false);

// Analytic gradients of one dual-temperature InfoNCE term, computed in
// shifted (overflow-safe) form. The independent oracle for gradient checks.
struct ContrastiveGradients {
  real g_pos = 0.0;
  std::vector<real> g_neg;
  real loss = 0.0;
};
ContrastiveGradients contrastive_gradients(real s_pos, const std::vector<real>& s_neg,
                                           real tau_pos, real tau_neg);

}  // namespace ucast
