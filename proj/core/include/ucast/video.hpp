#pragma once

// Video extensions: patch-wise contrastive content loss, dense-flow
// ingestion, backward warping, occlusion masking, and the temporal
// consistency metric.

#include <stdexcept>
#include <string>
#include <vector>

#include "ucast/autograd.hpp"
#include "ucast/rng.hpp"
#include "ucast/tensor.hpp"

namespace ucast {

// Dense per-pixel displacement field (H, W, 2) carrying (u, v) in pixels,
// mapping positions in the next frame back into the previous one.
struct FlowField {
  Tensor vectors;

  int64_t height() const { return vectors.dim(0); }
  int64_t width() const { return vectors.dim(1); }
  real u(int64_t y, int64_t x) const { return vectors[(y * width() + x) * 2]; }
  real v(int64_t y, int64_t x) const { return vectors[(y * width() + x) * 2 + 1]; }
};

// Raised on malformed flow files (bad magic, truncation); the CLI maps it to
// its runtime-error exit code.
class FlowFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// "UFLO" file: 4 magic bytes, little-endian u32 width and height, then
// height*width*2 little-endian f32 values in row-major (u, v) order.
FlowField read_uflo(const std::string& path);
void write_uflo(const std::string& path, const FlowField& flow);

// Bilinear backward warp of a single (1,C,H,W) frame: output(y,x) samples
// frame at (y + v, x + u), clamping out-of-bounds coordinates to the edge.
// Zero flow reproduces the input bitwise.
Tensor warp(const Tensor& frame, const FlowField& flow);

// Boolean (H,W) map, 1 where the channel-max absolute difference exceeds
// the threshold strictly. The printed-form mask SELECTS large-difference
// pixels; invert=true gives the conventional excluding variant.
struct OcclusionMask {
  Tensor mask;  // (H,W) of 0/1

  int64_t count() const;
};
OcclusionMask occlusion_mask(const Tensor& warped_prev, const Tensor& current,
                             real threshold = 10.0 / 255.0, bool invert = false);

// Average over consecutive frame pairs and masked pixels of
// |mask * (warp(prev) - current)|. Pairs with an empty mask contribute 0.
real temporal_loss(const std::vector<Tensor>& frames, const std::vector<FlowField>& flows,
                   real threshold = 10.0 / 255.0, bool invert_mask = false);

// Patch-wise InfoNCE content loss: for each of num_negatives+1 sampled
// locations per image, the positive pair is (output feature, content
// feature at the same spot) and the negatives are the content features of
// the other sampled spots. Gradients flow into output_feats only.
Variable patch_content_loss(const Variable& content_feats, const Variable& output_feats,
                            int64_t num_negatives, real tau, Rng& rng);

}  // namespace ucast
