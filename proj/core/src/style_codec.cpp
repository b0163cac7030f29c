#include "ucast/style_codec.hpp"

#include <algorithm>
#include <stdexcept>

namespace ucast {

ConvStackExtractor::ConvStackExtractor(int64_t base_width, Rng& rng, std::vector<std::string> taps,
                                       int64_t num_stages) {
  if (base_width < 1 || num_stages < 1) {
    throw std::invalid_argument("extractor: base_width and num_stages must be >= 1");
  }
  int64_t in_ch = 3;
  for (int64_t s = 0; s < num_stages; ++s) {
    const int64_t out_ch = base_width * (s + 1);
    const int64_t stride = s == 0 ? 1 : 2;
    stages_.emplace_back(in_ch, out_ch, 3, stride, 1, rng);
    in_ch = out_ch;
  }
  if (taps.empty()) {
    for (int64_t s = 0; s < num_stages; ++s) taps.push_back(stage_tap_name(s));
  }
  for (const auto& name : taps) {
    int64_t stage = -1;
    for (int64_t s = 0; s < num_stages; ++s) {
      if (name == stage_tap_name(s)) stage = s;
    }
    if (stage < 0) throw std::invalid_argument("extractor: unknown tap point '" + name + "'");
    tap_stages_.push_back(stage);
    tap_names_.push_back(name);
  }
  if (!std::is_sorted(tap_stages_.begin(), tap_stages_.end())) {
    throw std::invalid_argument("extractor: tap points must be listed shallow to deep");
  }
}

FeatureStack ConvStackExtractor::extract(const Variable& pixels) const {
  if (pixels.shape().size() != 4 || pixels.shape()[1] != 3) {
    throw std::invalid_argument("extractor: input must be (B,3,H,W)");
  }
  if (pixels.shape()[2] < min_input_size() || pixels.shape()[3] < min_input_size()) {
    throw std::invalid_argument("extractor: input spatial size " +
                                std::to_string(pixels.shape()[2]) + " below minimum " +
                                std::to_string(min_input_size()) + " for the deepest tap");
  }
  FeatureStack out;
  Variable x = pixels;
  size_t next_tap = 0;
  for (size_t s = 0; s < stages_.size(); ++s) {
    x = relu(stages_[s].forward(x));
    while (next_tap < tap_stages_.size() &&
           tap_stages_[next_tap] == static_cast<int64_t>(s)) {
      out.layers.push_back(x);
      out.layer_ids.push_back(tap_names_[next_tap]);
      ++next_tap;
    }
  }
  return out;
}

std::vector<int64_t> ConvStackExtractor::tap_channels() const {
  std::vector<int64_t> out;
  for (int64_t s : tap_stages_) out.push_back(stages_[static_cast<size_t>(s)].weight.shape()[0]);
  return out;
}

std::vector<int64_t> ConvStackExtractor::tap_strides() const {
  std::vector<int64_t> out;
  for (int64_t s : tap_stages_) out.push_back(int64_t{1} << s);
  return out;
}

int64_t ConvStackExtractor::min_input_size() const {
  int64_t deepest = tap_stages_.empty() ? static_cast<int64_t>(stages_.size()) - 1
                                        : tap_stages_.back();
  // stride doubles per stage after the first; require >=1 pixel at the
  // deepest tap with a safety factor of 2 so the 3x3 kernels see context
  int64_t size = 2;
  for (int64_t s = 1; s <= deepest; ++s) size *= 2;
  return size;
}

void ConvStackExtractor::collect_params(const std::string& prefix, ParamMap& out) const {
  for (size_t s = 0; s < stages_.size(); ++s) {
    stages_[s].collect_params(prefix + "stage" + std::to_string(s) + ".", out);
  }
}

ExternalExtractor::ExternalExtractor(const std::string& weight_file)
    : ExternalExtractor(Archive::load(weight_file)) {}

ExternalExtractor::ExternalExtractor(const Archive& archive) {
  for (int64_t s = 0;; ++s) {
    const std::string wname = "extractor.stage" + std::to_string(s) + ".weight";
    const std::string bname = "extractor.stage" + std::to_string(s) + ".bias";
    if (!archive.has(wname)) {
      if (s == 0) throw std::invalid_argument("external extractor: archive has no " + wname);
      break;
    }
    if (!archive.has(bname)) {
      throw std::invalid_argument("external extractor: archive missing " + bname);
    }
    const Tensor& w = archive.tensor(wname);
    if (w.ndim() != 4) throw std::invalid_argument("external extractor: " + wname + " not 4D");
    Conv2dLayer layer;
    // same geometry as the built-in stack: 3x3, stride 2 except stage 0
    Rng dummy(0);
    layer = Conv2dLayer(w.dim(1), w.dim(0), w.dim(2), s == 0 ? 1 : 2, 1, dummy);
    layer.weight = Variable(w, false);
    layer.bias = Variable(archive.tensor(bname), false);
    inner_.stages_.push_back(std::move(layer));
  }
  const int64_t n = static_cast<int64_t>(inner_.stages_.size());
  for (int64_t s = 0; s < n; ++s) {
    inner_.tap_stages_.push_back(s);
    inner_.tap_names_.push_back(ConvStackExtractor::stage_tap_name(s));
  }
}

FeatureStack ExternalExtractor::extract(const Variable& pixels) const {
  return inner_.extract(pixels);
}

std::vector<int64_t> ExternalExtractor::tap_channels() const { return inner_.tap_channels(); }

std::vector<int64_t> ExternalExtractor::tap_strides() const { return inner_.tap_strides(); }

int64_t ExternalExtractor::min_input_size() const { return inner_.min_input_size(); }

void ExternalExtractor::collect_params(const std::string& prefix, ParamMap& out) const {
  inner_.collect_params(prefix, out);
}

MspProjector::MspProjector(const std::vector<int64_t>& layer_channels, int64_t hidden,
                           int64_t code_dim, Rng& rng)
    : code_dim_(code_dim) {
  if (hidden < 1 || code_dim < 1) {
    throw std::invalid_argument("msp: hidden and code_dim must be >= 1");
  }
  for (int64_t C : layer_channels) {
    Head h;
    h.pool_proj = LinearLayer(2 * C, hidden, rng);
    h.fc1 = LinearLayer(hidden, hidden, rng);
    h.fc2 = LinearLayer(hidden, code_dim, rng);
    heads_.push_back(std::move(h));
  }
}

StyleCode MspProjector::project(const FeatureStack& features) const {
  if (features.num_layers() != num_layers()) {
    throw std::invalid_argument("msp: feature stack has " +
                                std::to_string(features.num_layers()) + " layers, projector has " +
                                std::to_string(num_layers()));
  }
  StyleCode out;
  for (size_t i = 0; i < heads_.size(); ++i) {
    const Variable& f = features.layers[i];
    Variable pooled = concat_cols(global_max_pool(f), global_avg_pool(f));
    Variable h = relu(heads_[i].pool_proj.forward(pooled));
    h = relu(heads_[i].fc1.forward(h));
    h = heads_[i].fc2.forward(h);
    out.codes.push_back(l2_normalize_rows(h));
  }
  return out;
}

void MspProjector::collect_params(const std::string& prefix, ParamMap& out) const {
  for (size_t i = 0; i < heads_.size(); ++i) {
    const std::string base = prefix + "layer" + std::to_string(i) + ".";
    heads_[i].pool_proj.collect_params(base + "pool_proj.", out);
    heads_[i].fc1.collect_params(base + "fc1.", out);
    heads_[i].fc2.collect_params(base + "fc2.", out);
  }
}

FeatureStack extract_features(const ImageBatch& image, const FeatureExtractor& extractor) {
  validate_image_batch(image);
  return extractor.extract(constant(image.pixels));
}

StyleCode encode_style(const ImageBatch& image, const FeatureExtractor& extractor,
                       const MspProjector& msp) {
  return msp.project(extract_features(image, extractor));
}

StyleCode encode_style(const Variable& pixels, const FeatureExtractor& extractor,
                       const MspProjector& msp) {
  return msp.project(extractor.extract(pixels));
}

}  // namespace ucast
