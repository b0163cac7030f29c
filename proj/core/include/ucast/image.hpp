#pragma once

// Image batches, codec round-trips, and the deterministic geometry helpers
// (resize / crop / rotate / flip) the augmentation pipeline builds on.

#include <string>

#include "ucast/tensor.hpp"

namespace ucast {

enum class Domain { kRealistic, kArtistic, kGenerated };

const char* domain_name(Domain d);

// (batch, 3, H, W) pixels in [0,1] plus the domain the batch was drawn from.
struct ImageBatch {
  Tensor pixels;
  Domain domain = Domain::kGenerated;

  int64_t batch() const { return pixels.dim(0); }
  int64_t height() const { return pixels.dim(2); }
  int64_t width() const { return pixels.dim(3); }
};

// Throws std::invalid_argument when the invariants don't hold:
// NCHW with C==3, square H==W==resolution (resolution<0 skips the size
// check), all values finite in [0,1].
void validate_image_batch(const ImageBatch& img, int64_t resolution = -1);

// Decode a PNG/JPEG file into a (1,3,H,W) [0,1] RGB tensor. Throws
// std::runtime_error on missing/corrupt files.
Tensor load_image(const std::string& path);

// Encode (1,3,H,W) or (3,H,W) in [0,1] as 8-bit PNG (values clamped,
// round-to-nearest). Throws std::runtime_error on write failure.
void save_image(const std::string& path, const Tensor& img);

// Bilinear resize with half-pixel centers and edge clamping. Deterministic,
// no external codec involvement. Works per-(batch,channel) plane.
Tensor resize_bilinear(const Tensor& img, int64_t out_h, int64_t out_w);

// Axis-aligned crop; [top, top+h) x [left, left+w) must lie inside.
Tensor crop(const Tensor& img, int64_t top, int64_t left, int64_t h, int64_t w);

// Rotate counter-clockwise by k*90 degrees (k taken mod 4).
Tensor rot90(const Tensor& img, int64_t k);

// Mirror along the width axis.
Tensor flip_horizontal(const Tensor& img);

}  // namespace ucast
