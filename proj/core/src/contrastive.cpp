#include "ucast/contrastive.hpp"

#include <cmath>
#include <stdexcept>

namespace ucast {

namespace {

constexpr real kSigmaFloor = 1e-6;

real stable_sigmoid(real x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// mean/std pair for the negative channel, falling back to priors until the
// first update
void neg_stats(const TemperatureState& state, const TemperatureConfig& config, real& mu,
               real& sigma) {
  if (state.update_count > 0) {
    mu = state.mu_neg;
    sigma = state.sigma_neg();
  } else {
    mu = config.prior_mu_neg;
    sigma = std::max(config.prior_sigma_neg, kSigmaFloor);
  }
}

void pos_stats(const TemperatureState& state, const TemperatureConfig& config, real& mu,
               real& sigma) {
  if (state.update_count > 0) {
    mu = state.mu_pos;
    sigma = state.sigma_pos();
  } else {
    mu = config.prior_mu_pos;
    sigma = std::max(config.prior_sigma_pos, kSigmaFloor);
  }
}

}  // namespace

void TemperatureConfig::validate() const {
  if (t_range_neg <= 0 || t_range_pos <= 0) {
    throw std::invalid_argument("temperature config: ranges must be positive");
  }
  if (t_bound_neg <= 0 || t_bound_pos <= 0) {
    throw std::invalid_argument("temperature config: bounds must be positive");
  }
  if (!(ema_decay > 0 && ema_decay < 1)) {
    throw std::invalid_argument("temperature config: ema_decay must lie in (0,1)");
  }
  if (fixed_tau <= 0) throw std::invalid_argument("temperature config: fixed_tau must be positive");
  if (clip_threshold < -1.0 || clip_threshold > 1.0) {
    throw std::invalid_argument("temperature config: clip_threshold must lie in [-1,1]");
  }
}

real TemperatureState::sigma_neg() const {
  return std::max(std::sqrt(std::max(m2_neg - mu_neg * mu_neg, 0.0)), kSigmaFloor);
}

real TemperatureState::sigma_pos() const {
  return std::max(std::sqrt(std::max(m2_pos - mu_pos * mu_pos, 0.0)), kSigmaFloor);
}

bool update_stats(TemperatureState& state, real sum_g_neg, real pos_content_sim,
                  const TemperatureConfig& config) {
  if (!std::isfinite(sum_g_neg) || !std::isfinite(pos_content_sim)) return false;
  const real d = config.ema_decay;
  if (state.update_count == 0) {
    state.mu_neg = sum_g_neg;
    state.m2_neg = sum_g_neg * sum_g_neg;
    state.mu_pos = pos_content_sim;
    state.m2_pos = pos_content_sim * pos_content_sim;
  } else {
    state.mu_neg = d * state.mu_neg + (1.0 - d) * sum_g_neg;
    state.m2_neg = d * state.m2_neg + (1.0 - d) * sum_g_neg * sum_g_neg;
    state.mu_pos = d * state.mu_pos + (1.0 - d) * pos_content_sim;
    state.m2_pos = d * state.m2_pos + (1.0 - d) * pos_content_sim * pos_content_sim;
  }
  state.update_count += 1;
  return true;
}

real clipped_similarity_sum(const std::vector<real>& s_neg, real threshold) {
  real sum = 0;
  for (real s : s_neg) {
    if (s > threshold) sum += s;
  }
  return sum;
}

real negative_temperature(const std::vector<real>& s_neg, const TemperatureState& state,
                          const TemperatureConfig& config) {
  const real sum_g = clipped_similarity_sum(s_neg, config.clip_threshold);
  real mu, sigma;
  neg_stats(state, config, mu, sigma);
  const real z = (sum_g - mu) / sigma;
  return config.t_range_neg * stable_sigmoid(z) + config.t_bound_neg;
}

real positive_temperature(real tau_neg, real z_hat_dot_zc, const TemperatureState& state,
                          const TemperatureConfig& config) {
  real mu, sigma;
  pos_stats(state, config, mu, sigma);
  const real z = (z_hat_dot_zc - mu) / sigma;
  const real f = config.t_range_pos * stable_sigmoid(-z) + config.t_bound_pos;
  return tau_neg * f;
}

MemoryBank::MemoryBank(int64_t num_layers, int64_t dim, int64_t capacity)
    : capacity_(capacity), dim_(dim) {
  if (num_layers < 1 || dim < 1 || capacity < 1) {
    throw std::invalid_argument("memory bank: layers, dim, capacity must be >= 1");
  }
  queues_.resize(static_cast<size_t>(num_layers));
}

void MemoryBank::enqueue(const StyleCode& codes) {
  if (codes.num_layers() != num_layers()) {
    throw std::invalid_argument("memory bank: code has " + std::to_string(codes.num_layers()) +
                                " layers, bank has " + std::to_string(num_layers()));
  }
  for (int64_t i = 0; i < num_layers(); ++i) {
    const Tensor& c = codes.codes[static_cast<size_t>(i)].value();
    if (c.ndim() != 2 || c.dim(1) != dim_) {
      throw std::invalid_argument("memory bank: expected (B," + std::to_string(dim_) +
                                  ") codes, got " + shape_str(c.shape()));
    }
    auto& q = queues_[static_cast<size_t>(i)];
    for (int64_t r = 0; r < c.dim(0); ++r) {
      std::vector<real> row(static_cast<size_t>(dim_));
      for (int64_t k = 0; k < dim_; ++k) row[static_cast<size_t>(k)] = c.at(r, k);
      q.push_back(std::move(row));
      if (static_cast<int64_t>(q.size()) > capacity_) q.pop_front();
    }
  }
}

int64_t MemoryBank::size(int64_t layer) const {
  return static_cast<int64_t>(queues_.at(static_cast<size_t>(layer)).size());
}

Tensor MemoryBank::snapshot(int64_t layer) const {
  const auto& q = queues_.at(static_cast<size_t>(layer));
  Tensor out({static_cast<int64_t>(q.size()), dim_});
  int64_t r = 0;
  for (const auto& row : q) {
    for (int64_t k = 0; k < dim_; ++k) out.at(r, k) = row[static_cast<size_t>(k)];
    ++r;
  }
  return out;
}

void MemoryBank::save(Archive& archive, const std::string& prefix) const {
  for (int64_t i = 0; i < num_layers(); ++i) {
    archive.put_tensor(prefix + "layer" + std::to_string(i), snapshot(i));
  }
}

MemoryBank MemoryBank::load(const Archive& archive, int64_t capacity, const std::string& prefix) {
  std::vector<Tensor> layers;
  for (int64_t i = 0;; ++i) {
    const std::string name = prefix + "layer" + std::to_string(i);
    if (!archive.has(name)) break;
    layers.push_back(archive.tensor(name));
  }
  if (layers.empty()) throw std::invalid_argument("memory bank: archive has no bank entries");
  MemoryBank bank(static_cast<int64_t>(layers.size()), layers[0].dim(1), capacity);
  for (size_t i = 0; i < layers.size(); ++i) {
    const Tensor& t = layers[i];
    auto& q = bank.queues_[i];
    for (int64_t r = 0; r < t.dim(0); ++r) {
      std::vector<real> row(static_cast<size_t>(t.dim(1)));
      for (int64_t k = 0; k < t.dim(1); ++k) row[static_cast<size_t>(k)] = t.at(r, k);
      q.push_back(std::move(row));
    }
  }
  return bank;
}

Variable msp_contrastive_loss(const StyleCode& z, const StyleCode& z_plus, const MemoryBank& bank,
                              real tau) {
  if (tau <= 0) throw std::domain_error("contrastive loss: tau must be positive");
  if (bank.empty()) throw std::invalid_argument("contrastive loss: memory bank is empty");
  if (z.num_layers() != bank.num_layers() || z_plus.num_layers() != bank.num_layers()) {
    throw std::invalid_argument("contrastive loss: layer count mismatch with bank");
  }
  Variable total;
  for (int64_t i = 0; i < bank.num_layers(); ++i) {
    const Variable& zi = z.codes[static_cast<size_t>(i)];
    const Variable& zp = z_plus.codes[static_cast<size_t>(i)];
    Variable s_pos = row_dot(zi, zp);                                  // (B,1)
    Variable s_neg = matmul_nt(zi, constant(bank.snapshot(i)));        // (B,N)
    Variable logits = mul_scalar(concat_cols(s_pos, s_neg), 1.0 / tau);
    Variable per_row = sub(logsumexp_rows(logits), mul_scalar(s_pos, 1.0 / tau));
    Variable term = mean_all(per_row);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

Variable dual_temperature_infonce(const Variable& s_pos, const Variable& s_neg,
                                  const std::vector<real>& tau_pos,
                                  const std::vector<real>& tau_neg) {
  const int64_t B = s_pos.shape()[0];
  if (s_pos.shape() != Shape{B, 1} || s_neg.shape()[0] != B) {
    throw std::invalid_argument("dual_temperature_infonce: shape mismatch");
  }
  if (static_cast<int64_t>(tau_pos.size()) != B || static_cast<int64_t>(tau_neg.size()) != B) {
    throw std::invalid_argument("dual_temperature_infonce: one temperature pair per row required");
  }
  Tensor inv_pos({B, 1}), inv_neg({B, 1});
  for (int64_t b = 0; b < B; ++b) {
    const real tp = tau_pos[static_cast<size_t>(b)], tn = tau_neg[static_cast<size_t>(b)];
    if (tp <= 0 || tn <= 0) throw std::domain_error("dual_temperature_infonce: non-positive tau");
    inv_pos[b] = 1.0 / tp;
    inv_neg[b] = 1.0 / tn;
  }
  Variable pos_logit = mul_rowwise(s_pos, constant(inv_pos));  // (B,1)
  Variable neg_logit = mul_rowwise(s_neg, constant(inv_neg));  // (B,N)
  Variable per_row = sub(logsumexp_rows(concat_cols(pos_logit, neg_logit)), pos_logit);
  return mean_all(per_row);
}

AdaptiveLossResult adaptive_contrastive_loss(const StyleCode& z_tilde, const StyleCode& z_hat,
                                             const StyleCode& z_c, const MemoryBank& bank,
                                             const TemperatureState& state,
                                             const TemperatureConfig& config,
                                             bool fixed_temperature) {
  config.validate();
  if (bank.empty()) throw std::invalid_argument("adaptive loss: memory bank is empty");
  const int64_t M = bank.num_layers();
  if (z_tilde.num_layers() != M || z_hat.num_layers() != M || z_c.num_layers() != M) {
    throw std::invalid_argument("adaptive loss: layer count mismatch");
  }

  AdaptiveLossResult result;
  int64_t rows_total = 0;
  for (int64_t i = 0; i < M; ++i) {
    const Variable& zt = z_tilde.codes[static_cast<size_t>(i)];
    Variable zh = z_hat.codes[static_cast<size_t>(i)].detach();
    Variable zc = z_c.codes[static_cast<size_t>(i)].detach();
    const Tensor bank_mat = bank.snapshot(i);
    const int64_t B = zt.shape()[0], N = bank_mat.dim(0);

    Variable s_pos = row_dot(zt, zh);                       // (B,1)
    Variable s_neg = matmul_nt(zt, constant(bank_mat));     // (B,N)

    // temperatures come from detached values; no gradient through this path
    std::vector<real> tau_pos(static_cast<size_t>(B)), tau_neg(static_cast<size_t>(B));
    const Tensor& sneg_val = s_neg.value();
    const Tensor& zh_val = zh.value();
    const Tensor& zc_val = zc.value();
    for (int64_t b = 0; b < B; ++b) {
      real content_sim = 0;
      for (int64_t k = 0; k < zh_val.dim(1); ++k) content_sim += zh_val.at(b, k) * zc_val.at(b, k);
      if (!std::isfinite(content_sim)) {
        throw std::runtime_error("adaptive loss: non-finite style/content similarity");
      }
      std::vector<real> row(static_cast<size_t>(N));
      for (int64_t j = 0; j < N; ++j) {
        row[static_cast<size_t>(j)] = sneg_val.at(b, j);
        if (!std::isfinite(row[static_cast<size_t>(j)])) {
          throw std::runtime_error("adaptive loss: non-finite negative similarity");
        }
      }
      real tn, tp;
      if (fixed_temperature) {
        tn = tp = config.fixed_tau;
      } else {
        tn = negative_temperature(row, state, config);
        tp = positive_temperature(tn, content_sim, state, config);
      }
      tau_neg[static_cast<size_t>(b)] = tn;
      tau_pos[static_cast<size_t>(b)] = tp;
      result.mean_tau_neg += tn;
      result.mean_tau_pos += tp;
      result.mean_sum_g_neg += clipped_similarity_sum(row, config.clip_threshold);
      result.mean_pos_content_sim += content_sim;
    }
    rows_total += B;

    Variable term = dual_temperature_infonce(s_pos, s_neg, tau_pos, tau_neg);
    result.loss = result.loss.defined() ? add(result.loss, term) : term;
  }
  if (rows_total > 0) {
    result.mean_tau_pos /= static_cast<real>(rows_total);
    result.mean_tau_neg /= static_cast<real>(rows_total);
    result.mean_sum_g_neg /= static_cast<real>(rows_total);
    result.mean_pos_content_sim /= static_cast<real>(rows_total);
  }
  return result;
}

ContrastiveGradients contrastive_gradients(real s_pos, const std::vector<real>& s_neg,
                                           real tau_pos, real tau_neg) {
  if (tau_pos <= 0 || tau_neg <= 0) {
    throw std::domain_error("contrastive_gradients: temperatures must be positive");
  }
  const real lp = s_pos / tau_pos;
  real shift = lp;
  for (real s : s_neg) shift = std::max(shift, s / tau_neg);

  const real p = std::exp(lp - shift);
  real e_sum = 0;
  std::vector<real> e(s_neg.size());
  for (size_t j = 0; j < s_neg.size(); ++j) {
    e[j] = std::exp(s_neg[j] / tau_neg - shift);
    e_sum += e[j];
  }
  const real z = p + e_sum;

  ContrastiveGradients out;
  out.g_pos = -(e_sum / z) / tau_pos;
  out.g_neg.resize(s_neg.size());
  for (size_t j = 0; j < s_neg.size(); ++j) out.g_neg[j] = (e[j] / z) / tau_neg;
  out.loss = (shift + std::log(z)) - lp;
  return out;
}

}  // namespace ucast
