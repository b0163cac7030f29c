#pragma once

// Generator backbones: the interface the trainer drives, a reference
// encoder-decoder conditioned on style codes at every upsampling stage, a
// trivial identity backbone for interface swaps, and style interpolation.

#include <memory>
#include <vector>

#include "ucast/style_codec.hpp"

namespace ucast {

// Instance-normalize features, then apply the per-channel affine produced by
// `head` from the style vector (head emits [gamma | beta], 2C wide).
Variable condition(const Variable& features, const Variable& style_vec, const LinearLayer& head);

class GeneratorBackbone : public Module {
 public:
  // Per conditioning site: (B,C) scale and shift derived from a style code.
  struct ConditionParams {
    std::vector<Variable> gamma;
    std::vector<Variable> beta;
  };

  ~GeneratorBackbone() override = default;

  virtual int64_t num_sites() const = 0;
  virtual ConditionParams condition_params(const StyleCode& style) const = 0;
  // Run encoder + conditioned decoder with externally supplied affines
  // (plain stylization passes its own; interpolation passes mixtures).
  virtual Variable decode(const Variable& content, const ConditionParams& params) const = 0;

  Variable stylize(const Variable& content, const StyleCode& style) const {
    return decode(content, condition_params(style));
  }
};

// Reference backbone: 3 stride-2 encoder convs, mirrored nearest-neighbor
// upsampling decoder, every upsampling stage conditioned on the style code
// of the matching extractor depth. Output through (tanh+1)/2, so pixels stay
// in [0,1].
class AdaInBackbone : public GeneratorBackbone {
 public:
  AdaInBackbone() = default;
  // msp_layer_strides: cumulative stride of each extractor tap; each decoder
  // site picks the code layer whose stride matches its working resolution.
  AdaInBackbone(int64_t base_width, int64_t code_dim, std::vector<int64_t> msp_layer_strides,
                Rng& rng);

  int64_t num_sites() const override { return static_cast<int64_t>(dec_.size()); }
  ConditionParams condition_params(const StyleCode& style) const override;
  Variable decode(const Variable& content, const ConditionParams& params) const override;
  void collect_params(const std::string& prefix, ParamMap& out) const override;

  const std::vector<int64_t>& site_code_layers() const { return site_code_layer_; }

 private:
  std::vector<Conv2dLayer> enc_;
  std::vector<Conv2dLayer> dec_;
  std::vector<LinearLayer> heads_;  // one [gamma|beta] head per decoder site
  Conv2dLayer out_;
  std::vector<int64_t> site_code_layer_;  // decoder site -> style-code layer index
};

// Pass-through backbone: no parameters, output == content. Exists to prove
// the trainer/backbone seam is swappable.
class IdentityBackbone : public GeneratorBackbone {
 public:
  int64_t num_sites() const override { return 0; }
  ConditionParams condition_params(const StyleCode&) const override { return {}; }
  Variable decode(const Variable& content, const ConditionParams&) const override {
    return content;
  }
  void collect_params(const std::string&, ParamMap&) const override {}
};

// Throws std::invalid_argument unless weights are nonnegative, match the
// style count, and sum to 1 within 1e-6.
void validate_convex_weights(const std::vector<real>& weights, size_t num_styles);

// Image-level stylization: encode the style, run the backbone, return a
// generated-domain batch. Runs gradient-free.
ImageBatch stylize(const ImageBatch& content, const ImageBatch& style,
                   const GeneratorBackbone& g, const FeatureExtractor& extractor,
                   const MspProjector& msp);

// Convex mixture of the per-site conditioning affines. Exact one-hot weights
// take the plain stylize path (bitwise-equal by construction).
ImageBatch interpolate_styles(const ImageBatch& content, const std::vector<ImageBatch>& styles,
                              const std::vector<real>& weights, const GeneratorBackbone& g,
                              const FeatureExtractor& extractor, const MspProjector& msp);

}  // namespace ucast
