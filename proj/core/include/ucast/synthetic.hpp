#pragma once

// Procedural desk-scale corpora: two artificial painting "styles" (distinct
// palettes + texture kernels over shared base shapes) and a "realistic"
// domain of smooth gradients with plain geometric shapes.

#include <string>

#include "ucast/rng.hpp"
#include "ucast/tensor.hpp"

namespace ucast {

constexpr int64_t kNumSyntheticStyles = 2;

// (1,3,R,R) smooth-gradient scene with a few soft shapes.
Tensor synth_realistic_image(int64_t resolution, Rng& rng);

// (1,3,R,R) shape scene rendered in the palette/texture of style_id.
Tensor synth_styled_image(int64_t resolution, int64_t style_id, Rng& rng);

// Writes `count` PNGs named img_0000.png... into dir (created if missing).
// kind: "realistic", "style0", "style1", or "art" (alternating styles).
void write_synthetic_corpus(const std::string& dir, const std::string& kind, int64_t count,
                            int64_t resolution, uint64_t seed);

}  // namespace ucast
