#include "ucast/backbone.hpp"

#include <cmath>
#include <stdexcept>

namespace ucast {

Variable condition(const Variable& features, const Variable& style_vec, const LinearLayer& head) {
  const int64_t C = features.shape()[1];
  if (head.weight.shape()[0] != 2 * C) {
    throw std::invalid_argument("condition: head emits " + std::to_string(head.weight.shape()[0]) +
                                " values, features have " + std::to_string(C) + " channels");
  }
  Variable affine = head.forward(style_vec);  // (B, 2C)
  Variable gamma = slice_cols(affine, 0, C);
  Variable beta = slice_cols(affine, C, C);
  return channel_affine(instance_norm(features), gamma, beta);
}

AdaInBackbone::AdaInBackbone(int64_t base_width, int64_t code_dim,
                             std::vector<int64_t> msp_layer_strides, Rng& rng) {
  if (base_width < 1 || code_dim < 1) {
    throw std::invalid_argument("backbone: base_width and code_dim must be >= 1");
  }
  if (msp_layer_strides.empty()) {
    throw std::invalid_argument("backbone: need at least one style-code layer");
  }
  const int64_t w = base_width;
  enc_.emplace_back(3, w, 3, 2, 1, rng);
  enc_.emplace_back(w, 2 * w, 3, 2, 1, rng);
  enc_.emplace_back(2 * w, 4 * w, 3, 2, 1, rng);

  // decoder works at strides {8,4,2}; each site conditions on the code layer
  // whose extractor stride is nearest (ties toward the deeper layer)
  const std::vector<int64_t> site_ch_in = {4 * w, 2 * w, w};
  const std::vector<int64_t> site_ch_out = {2 * w, w, w};
  for (size_t s = 0; s < 3; ++s) {
    const int64_t site_stride = int64_t{8} >> s;
    int64_t best = 0;
    real best_d = 1e30;
    for (size_t i = 0; i < msp_layer_strides.size(); ++i) {
      const real d = std::fabs(std::log2(static_cast<real>(site_stride)) -
                               std::log2(static_cast<real>(msp_layer_strides[i])));
      if (d < best_d || (d == best_d && msp_layer_strides[i] > msp_layer_strides[best])) {
        best_d = d;
        best = static_cast<int64_t>(i);
      }
    }
    site_code_layer_.push_back(best);
    dec_.emplace_back(site_ch_in[s], site_ch_out[s], 3, 1, 1, rng);
    LinearLayer head(code_dim, 2 * site_ch_in[s], rng);
    // start near the identity affine: gamma half biased to 1
    for (int64_t c = 0; c < site_ch_in[s]; ++c) head.bias.mutable_value()[c] = 1.0;
    heads_.push_back(std::move(head));
  }
  out_ = Conv2dLayer(w, 3, 3, 1, 1, rng);
}

AdaInBackbone::ConditionParams AdaInBackbone::condition_params(const StyleCode& style) const {
  ConditionParams p;
  for (size_t s = 0; s < heads_.size(); ++s) {
    const int64_t layer = site_code_layer_[s];
    if (layer >= style.num_layers()) {
      throw std::invalid_argument("backbone: style code has too few layers");
    }
    Variable affine = heads_[s].forward(style.codes[static_cast<size_t>(layer)]);
    const int64_t C = affine.shape()[1] / 2;
    p.gamma.push_back(slice_cols(affine, 0, C));
    p.beta.push_back(slice_cols(affine, C, C));
  }
  return p;
}

Variable AdaInBackbone::decode(const Variable& content, const ConditionParams& params) const {
  if (enc_.empty()) throw std::logic_error("backbone: uninitialized");
  if (params.gamma.size() != dec_.size() || params.beta.size() != dec_.size()) {
    throw std::invalid_argument("backbone: conditioning parameter count mismatch");
  }
  if (content.shape()[2] < 8 || content.shape()[3] < 8) {
    throw std::invalid_argument("backbone: input below minimum resolution 8");
  }
  Variable x = content;
  for (const auto& layer : enc_) x = relu(layer.forward(x));
  for (size_t s = 0; s < dec_.size(); ++s) {
    x = channel_affine(instance_norm(x), params.gamma[s], params.beta[s]);
    x = upsample_nearest2(relu(dec_[s].forward(x)));
  }
  return mul_scalar(add_scalar(tanh(out_.forward(x)), 1.0), 0.5);
}

void AdaInBackbone::collect_params(const std::string& prefix, ParamMap& out) const {
  for (size_t i = 0; i < enc_.size(); ++i) {
    enc_[i].collect_params(prefix + "enc" + std::to_string(i) + ".", out);
  }
  for (size_t i = 0; i < dec_.size(); ++i) {
    dec_[i].collect_params(prefix + "dec" + std::to_string(i) + ".", out);
    heads_[i].collect_params(prefix + "head" + std::to_string(i) + ".", out);
  }
  out_.collect_params(prefix + "out.", out);
}

void validate_convex_weights(const std::vector<real>& weights, size_t num_styles) {
  if (weights.size() != num_styles) {
    throw std::invalid_argument("interpolation: " + std::to_string(weights.size()) +
                                " weights for " + std::to_string(num_styles) + " styles");
  }
  if (weights.empty()) throw std::invalid_argument("interpolation: empty style list");
  real sum = 0;
  for (real w : weights) {
    if (!(w >= 0)) throw std::invalid_argument("interpolation: weights must be nonnegative");
    sum += w;
  }
  if (std::fabs(sum - 1.0) > 1e-6) {
    throw std::invalid_argument("interpolation: weights sum to " + std::to_string(sum) +
                                ", expected 1");
  }
}

namespace {

// A single style exemplar conditions a whole content batch; anything else
// has to match row for row.
StyleCode align_style_batch(StyleCode code, int64_t content_batch) {
  if (code.batch() == content_batch) return code;
  if (code.batch() != 1) {
    throw std::invalid_argument("stylize: style batch " + std::to_string(code.batch()) +
                                " does not match content batch " +
                                std::to_string(content_batch));
  }
  for (auto& c : code.codes) {
    const Tensor& row = c.value();
    Tensor tiled({content_batch, row.dim(1)});
    for (int64_t r = 0; r < content_batch; ++r)
      for (int64_t k = 0; k < row.dim(1); ++k) tiled.at(r, k) = row.at(0, k);
    c = constant(tiled);
  }
  return code;
}

}  // namespace

ImageBatch stylize(const ImageBatch& content, const ImageBatch& style,
                   const GeneratorBackbone& g, const FeatureExtractor& extractor,
                   const MspProjector& msp) {
  NoGradGuard guard;
  StyleCode code = encode_style(style, extractor, msp);
  validate_image_batch(content);
  code = align_style_batch(std::move(code), content.pixels.dim(0));
  ImageBatch out;
  out.pixels = g.stylize(constant(content.pixels), code).value();
  out.domain = Domain::kGenerated;
  return out;
}

ImageBatch interpolate_styles(const ImageBatch& content, const std::vector<ImageBatch>& styles,
                              const std::vector<real>& weights, const GeneratorBackbone& g,
                              const FeatureExtractor& extractor, const MspProjector& msp) {
  validate_convex_weights(weights, styles.size());
  // exact one-hot degenerates to the plain path so outputs match bit for bit
  for (size_t k = 0; k < weights.size(); ++k) {
    if (weights[k] == 1.0) {
      bool rest_zero = true;
      for (size_t j = 0; j < weights.size(); ++j) rest_zero = rest_zero && (j == k || weights[j] == 0.0);
      if (rest_zero) return stylize(content, styles[k], g, extractor, msp);
    }
  }

  NoGradGuard guard;
  validate_image_batch(content);
  GeneratorBackbone::ConditionParams mixed;
  bool first = true;
  for (size_t k = 0; k < styles.size(); ++k) {
    if (weights[k] == 0.0) continue;  // exact zeros contribute nothing
    StyleCode code = align_style_batch(encode_style(styles[k], extractor, msp),
                                       content.pixels.dim(0));
    GeneratorBackbone::ConditionParams p = g.condition_params(code);
    for (size_t s = 0; s < p.gamma.size(); ++s) {
      Variable gw = mul_scalar(p.gamma[s], weights[k]);
      Variable bw = mul_scalar(p.beta[s], weights[k]);
      if (first) {
        mixed.gamma.push_back(gw);
        mixed.beta.push_back(bw);
      } else {
        mixed.gamma[s] = add(mixed.gamma[s], gw);
        mixed.beta[s] = add(mixed.beta[s], bw);
      }
    }
    first = false;
  }
  ImageBatch out;
  out.pixels = g.decode(constant(content.pixels), mixed).value();
  out.domain = Domain::kGenerated;
  return out;
}

}  // namespace ucast
