#include "ucast/video.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace ucast {

namespace {

constexpr char kFlowMagic[4] = {'U', 'F', 'L', 'O'};

uint32_t read_u32le(std::istream& is, const std::string& path) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw FlowFormatError("flow file truncated: " + path);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

float read_f32le(std::istream& is, const std::string& path) {
  const uint32_t bits = read_u32le(is, path);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

void write_u32le(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                        static_cast<unsigned char>((v >> 8) & 0xFF),
                        static_cast<unsigned char>((v >> 16) & 0xFF),
                        static_cast<unsigned char>((v >> 24) & 0xFF)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

// normalizes (3,H,W) to (1,3,H,W); rejects anything else
Tensor as_single_frame(const Tensor& t, const char* what) {
  if (t.ndim() == 3) return t.reshaped({1, t.dim(0), t.dim(1), t.dim(2)});
  if (t.ndim() == 4 && t.dim(0) == 1) return t;
  throw std::invalid_argument(std::string(what) + ": expected a single (1,C,H,W) frame, got " +
                              shape_str(t.shape()));
}

}  // namespace

FlowField read_uflo(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FlowFormatError("cannot open flow file: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kFlowMagic, 4) != 0) {
    throw FlowFormatError("bad flow magic in " + path);
  }
  const uint32_t w = read_u32le(is, path);
  const uint32_t h = read_u32le(is, path);
  if (w == 0 || h == 0) throw FlowFormatError("flow file has zero dimension: " + path);
  FlowField flow;
  flow.vectors = Tensor({static_cast<int64_t>(h), static_cast<int64_t>(w), 2});
  for (int64_t i = 0; i < flow.vectors.numel(); ++i) {
    flow.vectors[i] = static_cast<real>(read_f32le(is, path));
  }
  return flow;
}

void write_uflo(const std::string& path, const FlowField& flow) {
  if (flow.vectors.ndim() != 3 || flow.vectors.dim(2) != 2) {
    throw std::invalid_argument("flow field must be (H,W,2)");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write flow file: " + path);
  os.write(kFlowMagic, 4);
  write_u32le(os, static_cast<uint32_t>(flow.width()));
  write_u32le(os, static_cast<uint32_t>(flow.height()));
  for (int64_t i = 0; i < flow.vectors.numel(); ++i) {
    const float f = static_cast<float>(flow.vectors[i]);
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    write_u32le(os, bits);
  }
  if (!os) throw std::runtime_error("flow write failed: " + path);
}

Tensor warp(const Tensor& frame_in, const FlowField& flow) {
  Tensor frame = as_single_frame(frame_in, "warp");
  const int64_t C = frame.dim(1), H = frame.dim(2), W = frame.dim(3);
  if (flow.height() != H || flow.width() != W) {
    throw std::invalid_argument("warp: flow " + std::to_string(flow.width()) + "x" +
                                std::to_string(flow.height()) + " vs frame " + std::to_string(W) +
                                "x" + std::to_string(H));
  }
  Tensor out(frame.shape());
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      real sx = static_cast<real>(x) + flow.u(y, x);
      real sy = static_cast<real>(y) + flow.v(y, x);
      sx = std::min(static_cast<real>(W - 1), std::max<real>(0.0, sx));
      sy = std::min(static_cast<real>(H - 1), std::max<real>(0.0, sy));
      const int64_t x0 = static_cast<int64_t>(sx), y0 = static_cast<int64_t>(sy);
      const int64_t x1 = std::min(W - 1, x0 + 1), y1 = std::min(H - 1, y0 + 1);
      const real wx = sx - static_cast<real>(x0), wy = sy - static_cast<real>(y0);
      for (int64_t c = 0; c < C; ++c) {
        const real v00 = frame.at(0, c, y0, x0), v01 = frame.at(0, c, y0, x1);
        const real v10 = frame.at(0, c, y1, x0), v11 = frame.at(0, c, y1, x1);
        out.at(0, c, y, x) =
            (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
      }
    }
  return out;
}

int64_t OcclusionMask::count() const {
  int64_t n = 0;
  for (int64_t i = 0; i < mask.numel(); ++i) n += mask[i] != 0.0 ? 1 : 0;
  return n;
}

OcclusionMask occlusion_mask(const Tensor& warped_prev, const Tensor& current, real threshold,
                             bool invert) {
  Tensor a = as_single_frame(warped_prev, "occlusion_mask");
  Tensor b = as_single_frame(current, "occlusion_mask");
  if (a.shape() != b.shape()) throw std::invalid_argument("occlusion_mask: shape mismatch");
  const int64_t C = a.dim(1), H = a.dim(2), W = a.dim(3);
  OcclusionMask m;
  m.mask = Tensor({H, W});
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      real d = 0;
      for (int64_t c = 0; c < C; ++c) d = std::max(d, std::fabs(a.at(0, c, y, x) - b.at(0, c, y, x)));
      bool on = d > threshold;  // strict
      if (invert) on = !on;
      m.mask.at(y, x) = on ? 1.0 : 0.0;
    }
  return m;
}

real temporal_loss(const std::vector<Tensor>& frames, const std::vector<FlowField>& flows,
                   real threshold, bool invert_mask) {
  if (frames.size() < 2) return 0.0;
  if (flows.size() != frames.size() - 1) {
    throw std::invalid_argument("temporal_loss: need one flow per consecutive frame pair (" +
                                std::to_string(frames.size() - 1) + "), got " +
                                std::to_string(flows.size()));
  }
  real total = 0;
  for (size_t t = 1; t < frames.size(); ++t) {
    Tensor prev = as_single_frame(frames[t - 1], "temporal_loss");
    Tensor cur = as_single_frame(frames[t], "temporal_loss");
    if (prev.shape() != cur.shape()) throw std::invalid_argument("temporal_loss: frame size mismatch");
    Tensor warped = warp(prev, flows[t - 1]);
    OcclusionMask m = occlusion_mask(warped, cur, threshold, invert_mask);
    const int64_t on = m.count();
    if (on == 0) continue;  // empty mask pair contributes 0
    const int64_t C = cur.dim(1), H = cur.dim(2), W = cur.dim(3);
    real sum = 0;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        if (m.mask.at(y, x) == 0.0) continue;
        for (int64_t c = 0; c < C; ++c) sum += std::fabs(warped.at(0, c, y, x) - cur.at(0, c, y, x));
      }
    total += sum / (static_cast<real>(on) * static_cast<real>(C));
  }
  return total / static_cast<real>(frames.size() - 1);
}

Variable patch_content_loss(const Variable& content_feats, const Variable& output_feats,
                            int64_t num_negatives, real tau, Rng& rng) {
  if (content_feats.shape() != output_feats.shape() || content_feats.shape().size() != 4) {
    throw std::invalid_argument("patch_content_loss: feature shapes must match and be NCHW");
  }
  if (tau <= 0) throw std::domain_error("patch_content_loss: tau must be positive");
  const int64_t B = content_feats.shape()[0];
  const int64_t H = content_feats.shape()[2], W = content_feats.shape()[3];
  const int64_t L = num_negatives + 1;  // one positive location + W negatives
  if (num_negatives < 1 || L > H * W) {
    throw std::invalid_argument("patch_content_loss: need 1 <= num_negatives < H*W (have " +
                                std::to_string(H * W) + " locations, asked " +
                                std::to_string(num_negatives) + " negatives)");
  }

  Variable content_const = content_feats.detach();
  Variable total;
  for (int64_t b = 0; b < B; ++b) {
    // partial Fisher-Yates: L distinct locations of this image
    std::vector<int64_t> perm(static_cast<size_t>(H * W));
    for (int64_t i = 0; i < H * W; ++i) perm[static_cast<size_t>(i)] = i;
    for (int64_t i = 0; i < L; ++i) {
      const int64_t j = i + static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(H * W - i)));
      std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
    }
    std::vector<SpatialSite> sites;
    sites.reserve(static_cast<size_t>(L));
    for (int64_t i = 0; i < L; ++i) {
      sites.push_back({b, perm[static_cast<size_t>(i)] / W, perm[static_cast<size_t>(i)] % W});
    }

    Variable v = l2_normalize_rows(gather_spatial(output_feats, sites));        // (L,C)
    Variable vc = l2_normalize_rows(gather_spatial(content_const, sites));      // (L,C)
    Variable logits = mul_scalar(matmul_nt(v, vc), 1.0 / tau);                  // (L,L)
    Variable per_row = sub(logsumexp_rows(logits), diag_col(logits));
    Variable term = mean_all(per_row);
    total = total.defined() ? add(total, term) : term;
  }
  return mul_scalar(total, 1.0 / static_cast<real>(B));
}

}  // namespace ucast
