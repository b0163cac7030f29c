#pragma once

// Small module/optimizer layer on top of the autograd Variable type.
// Parameters are named so checkpoints can address them individually.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ucast/autograd.hpp"
#include "ucast/rng.hpp"

namespace ucast {

// Ordered name -> parameter map. Iteration order is the name order, which
// keeps optimizer state and checkpoints stable across runs.
using ParamMap = std::map<std::string, Variable>;

// Base for anything that owns trainable parameters.
class Module {
 public:
  virtual ~Module() = default;

  // Collects parameters into `out`, prefixing each name with `prefix`.
  virtual void collect_params(const std::string& prefix, ParamMap& out) const = 0;

  ParamMap named_params(const std::string& prefix = "") const {
    ParamMap out;
    collect_params(prefix, out);
    return out;
  }

  void set_trainable(bool b) {
    for (auto& [name, p] : named_params()) {
      (void)name;
      p.set_requires_grad(b);
    }
  }

  void zero_grad() {
    for (auto& [name, p] : named_params()) {
      (void)name;
      p.zero_grad();
    }
  }
};

// y = x W^T + b with PyTorch-style kaiming-uniform init.
class LinearLayer : public Module {
 public:
  LinearLayer() = default;
  LinearLayer(int64_t in_features, int64_t out_features, Rng& rng);

  Variable forward(const Variable& x) const { return linear(x, weight, bias); }
  void collect_params(const std::string& prefix, ParamMap& out) const override;

  Variable weight;  // (out, in)
  Variable bias;    // (out)
};

// 2D convolution wrapper; square kernel, symmetric zero padding.
class Conv2dLayer : public Module {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(int64_t in_ch, int64_t out_ch, int64_t ksize, int64_t stride, int64_t pad, Rng& rng);

  Variable forward(const Variable& x) const { return conv2d(x, weight, bias, stride_, pad_); }
  void collect_params(const std::string& prefix, ParamMap& out) const override;

  int64_t stride() const { return stride_; }
  int64_t pad() const { return pad_; }

  Variable weight;  // (out, in, k, k)
  Variable bias;    // (out)

 private:
  int64_t stride_ = 1;
  int64_t pad_ = 0;
};

// Adam with optional in-step learning-rate override (used for linear decay).
// State is keyed by parameter name so it survives checkpointing.
class Adam {
 public:
  Adam() = default;
  Adam(real lr, real beta1, real beta2, real eps = 1e-8);

  // Applies one update to every parameter in `params` that has a gradient.
  void step(ParamMap& params, real lr_scale = 1.0);

  real lr() const { return lr_; }

  // Checkpoint support: per-parameter first/second moments plus step counts.
  struct Slot {
    Tensor m;
    Tensor v;
    int64_t t = 0;
  };
  std::map<std::string, Slot>& slots() { return slots_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }

 private:
  real lr_ = 1e-4;
  real beta1_ = 0.5;
  real beta2_ = 0.999;
  real eps_ = 1e-8;
  std::map<std::string, Slot> slots_;
};

}  // namespace ucast
