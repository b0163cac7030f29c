#include "ucast/nn.hpp"

#include <cmath>

namespace ucast {

namespace {

// Kaiming-uniform bound used by the reference framework: U(-sqrt(1/fan_in)*sqrt(3)*gain, ...)
// with gain = sqrt(2) for relu-family stacks reduces to sqrt(6/fan_in); biases use
// U(+-1/sqrt(fan_in)). Keeping biases nonzero avoids degenerate all-zero codes
// on constant inputs.
Tensor uniform_init(const Shape& shape, real bound, Rng& rng) {
  Tensor t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

LinearLayer::LinearLayer(int64_t in_features, int64_t out_features, Rng& rng) {
  const real wb = std::sqrt(6.0 / static_cast<real>(in_features));
  const real bb = 1.0 / std::sqrt(static_cast<real>(in_features));
  weight = Variable(uniform_init({out_features, in_features}, wb, rng), true);
  bias = Variable(uniform_init({out_features}, bb, rng), true);
}

void LinearLayer::collect_params(const std::string& prefix, ParamMap& out) const {
  out[prefix + "weight"] = weight;
  out[prefix + "bias"] = bias;
}

Conv2dLayer::Conv2dLayer(int64_t in_ch, int64_t out_ch, int64_t ksize, int64_t stride, int64_t pad,
                         Rng& rng)
    : stride_(stride), pad_(pad) {
  const int64_t fan_in = in_ch * ksize * ksize;
  const real wb = std::sqrt(6.0 / static_cast<real>(fan_in));
  const real bb = 1.0 / std::sqrt(static_cast<real>(fan_in));
  weight = Variable(uniform_init({out_ch, in_ch, ksize, ksize}, wb, rng), true);
  bias = Variable(uniform_init({out_ch}, bb, rng), true);
}

void Conv2dLayer::collect_params(const std::string& prefix, ParamMap& out) const {
  out[prefix + "weight"] = weight;
  out[prefix + "bias"] = bias;
}

Adam::Adam(real lr, real beta1, real beta2, real eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(ParamMap& params, real lr_scale) {
  for (auto& [name, p] : params) {
    if (!p.requires_grad()) continue;
    Tensor g = p.grad();
    Slot& s = slots_[name];
    if (s.m.empty()) {
      s.m = Tensor(p.shape());
      s.v = Tensor(p.shape());
    }
    s.t += 1;
    const real bc1 = 1.0 - std::pow(beta1_, static_cast<real>(s.t));
    const real bc2 = 1.0 - std::pow(beta2_, static_cast<real>(s.t));
    const real lr = lr_ * lr_scale;
    Tensor& value = p.mutable_value();
    for (int64_t i = 0; i < g.numel(); ++i) {
      s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
      s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
      const real mhat = s.m[i] / bc1;
      const real vhat = s.v[i] / bc2;
      value[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

}  // namespace ucast
