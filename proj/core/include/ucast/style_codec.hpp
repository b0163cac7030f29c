#pragma once

// Style encoding: a pluggable multi-scale feature extractor plus the
// multi-layer style projector that maps per-layer features to unit-norm
// latent style codes.

#include <memory>
#include <string>
#include <vector>

#include "ucast/checkpoint.hpp"
#include "ucast/image.hpp"
#include "ucast/nn.hpp"

namespace ucast {

// Per-tap feature maps; spatial size decreases and channel count grows with
// depth.
struct FeatureStack {
  std::vector<Variable> layers;
  std::vector<std::string> layer_ids;

  int64_t num_layers() const { return static_cast<int64_t>(layers.size()); }
  int64_t batch() const { return layers.empty() ? 0 : layers[0].shape()[0]; }
};

// M per-layer style codes, each row a unit vector of dimension K.
// codes[i] has shape (batch, K).
struct StyleCode {
  std::vector<Variable> codes;

  int64_t num_layers() const { return static_cast<int64_t>(codes.size()); }
  int64_t batch() const { return codes.empty() ? 0 : codes[0].shape()[0]; }
  int64_t dim() const { return codes.empty() ? 0 : codes[0].shape()[1]; }

  StyleCode detach() const {
    StyleCode out;
    out.codes.reserve(codes.size());
    for (const auto& c : codes) out.codes.push_back(c.detach());
    return out;
  }
};

// Interface every feature backbone implements. Extraction must be a pure
// function of (weights, input).
class FeatureExtractor : public Module {
 public:
  ~FeatureExtractor() override = default;

  virtual FeatureStack extract(const Variable& pixels) const = 0;
  virtual std::vector<int64_t> tap_channels() const = 0;
  // Cumulative downsampling factor at each tap (e.g. {1,2,4,8}).
  virtual std::vector<int64_t> tap_strides() const = 0;
  virtual int64_t min_input_size() const = 0;

  int64_t num_taps() const { return static_cast<int64_t>(tap_channels().size()); }
};

// Small strided conv stack: stage s has width base*(s+1) and cumulative
// strides {1,2,4,...}; each stage is conv3x3 + ReLU with a tap after the
// activation. Stands in for the big pretrained extractors at desk scale.
class ConvStackExtractor : public FeatureExtractor {
 public:
  // Fresh, seeded weights; taps default to every stage ("tap1".."tapS").
  ConvStackExtractor(int64_t base_width, Rng& rng, std::vector<std::string> taps = {},
                     int64_t num_stages = 4);

  FeatureStack extract(const Variable& pixels) const override;
  std::vector<int64_t> tap_channels() const override;
  std::vector<int64_t> tap_strides() const override;
  int64_t min_input_size() const override;
  void collect_params(const std::string& prefix, ParamMap& out) const override;

  static std::string stage_tap_name(int64_t stage) { return "tap" + std::to_string(stage + 1); }

 private:
  ConvStackExtractor() = default;
  friend class ExternalExtractor;

  std::vector<Conv2dLayer> stages_;
  std::vector<int64_t> tap_stages_;  // which stages feed the output, ascending
  std::vector<std::string> tap_names_;
};

// Adapter for an externally trained multi-scale extractor: weights come from
// an archive holding "extractor.stage{i}.weight"/".bias" conv tensors.
// Parameters are frozen by default (pretrained weights).
class ExternalExtractor : public FeatureExtractor {
 public:
  explicit ExternalExtractor(const std::string& weight_file);
  explicit ExternalExtractor(const Archive& archive);

  FeatureStack extract(const Variable& pixels) const override;
  std::vector<int64_t> tap_channels() const override;
  std::vector<int64_t> tap_strides() const override;
  int64_t min_input_size() const override;
  void collect_params(const std::string& prefix, ParamMap& out) const override;

 private:
  ConvStackExtractor inner_;
};

// Projector head per tap layer: concat(global max pool, global avg pool)
// -> 1x1 conv (a linear map, since pooling collapsed the spatial axes)
// -> 2-layer perceptron -> K outputs -> L2 normalize.
class MspProjector : public Module {
 public:
  MspProjector() = default;
  MspProjector(const std::vector<int64_t>& layer_channels, int64_t hidden, int64_t code_dim,
               Rng& rng);

  StyleCode project(const FeatureStack& features) const;
  void collect_params(const std::string& prefix, ParamMap& out) const override;

  int64_t num_layers() const { return static_cast<int64_t>(heads_.size()); }
  int64_t code_dim() const { return code_dim_; }

 private:
  struct Head {
    LinearLayer pool_proj;  // the 1x1 conv over the pooled 1x1 map
    LinearLayer fc1;
    LinearLayer fc2;
  };
  std::vector<Head> heads_;
  int64_t code_dim_ = 0;
};

// Validates the image batch, then runs the extractor.
FeatureStack extract_features(const ImageBatch& image, const FeatureExtractor& extractor);

// project(extract_features(image)): the canonical per-image style code z.
StyleCode encode_style(const ImageBatch& image, const FeatureExtractor& extractor,
                       const MspProjector& msp);

// Differentiable path for training: takes pixels already wrapped in a
// Variable (e.g. generator output) so gradients can flow through.
StyleCode encode_style(const Variable& pixels, const FeatureExtractor& extractor,
                       const MspProjector& msp);

}  // namespace ucast
