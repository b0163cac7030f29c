#include "ucast/image.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cmath>
#include <stdexcept>

namespace ucast {

const char* domain_name(Domain d) {
  switch (d) {
    case Domain::kRealistic: return "realistic";
    case Domain::kArtistic: return "artistic";
    case Domain::kGenerated: return "generated";
  }
  return "?";
}

void validate_image_batch(const ImageBatch& img, int64_t resolution) {
  const Tensor& t = img.pixels;
  if (t.ndim() != 4 || t.dim(1) != 3) {
    throw std::invalid_argument("image batch must be (B,3,H,W), got " + shape_str(t.shape()));
  }
  if (t.dim(2) != t.dim(3)) {
    throw std::invalid_argument("image batch must be square, got " + shape_str(t.shape()));
  }
  if (resolution >= 0 && t.dim(2) != resolution) {
    throw std::invalid_argument("image batch resolution " + std::to_string(t.dim(2)) +
                                " != configured " + std::to_string(resolution));
  }
  for (int64_t i = 0; i < t.numel(); ++i) {
    if (!std::isfinite(t[i]) || t[i] < 0.0 || t[i] > 1.0) {
      throw std::invalid_argument("image batch has pixel outside [0,1] at flat index " +
                                  std::to_string(i));
    }
  }
}

Tensor load_image(const std::string& path) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("failed to decode image: " + path);
  const int64_t H = bgr.rows, W = bgr.cols;
  Tensor out({1, 3, H, W});
  for (int64_t h = 0; h < H; ++h) {
    const cv::Vec3b* row = bgr.ptr<cv::Vec3b>(static_cast<int>(h));
    for (int64_t w = 0; w < W; ++w) {
      // OpenCV decodes BGR; store RGB.
      out.at(0, 0, h, w) = row[w][2] / 255.0;
      out.at(0, 1, h, w) = row[w][1] / 255.0;
      out.at(0, 2, h, w) = row[w][0] / 255.0;
    }
  }
  return out;
}

void save_image(const std::string& path, const Tensor& img) {
  Tensor t = img;
  if (t.ndim() == 3) t = t.reshaped({1, t.dim(0), t.dim(1), t.dim(2)});
  if (t.ndim() != 4 || t.dim(0) != 1 || t.dim(1) != 3) {
    throw std::runtime_error("save_image expects (1,3,H,W) or (3,H,W), got " +
                             shape_str(img.shape()));
  }
  const int64_t H = t.dim(2), W = t.dim(3);
  cv::Mat bgr(static_cast<int>(H), static_cast<int>(W), CV_8UC3);
  for (int64_t h = 0; h < H; ++h) {
    cv::Vec3b* row = bgr.ptr<cv::Vec3b>(static_cast<int>(h));
    for (int64_t w = 0; w < W; ++w) {
      auto to8 = [&](int64_t c) {
        real v = std::min(1.0, std::max(0.0, t.at(0, c, h, w)));
        return static_cast<unsigned char>(std::lround(v * 255.0));
      };
      row[w] = cv::Vec3b(to8(2), to8(1), to8(0));
    }
  }
  if (!cv::imwrite(path, bgr)) throw std::runtime_error("failed to write image: " + path);
}

Tensor resize_bilinear(const Tensor& img, int64_t out_h, int64_t out_w) {
  if (img.ndim() != 4) throw std::invalid_argument("resize_bilinear: expected NCHW");
  if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("resize_bilinear: bad output size");
  const int64_t B = img.dim(0), C = img.dim(1), H = img.dim(2), W = img.dim(3);
  Tensor out({B, C, out_h, out_w});
  const real sy = static_cast<real>(H) / static_cast<real>(out_h);
  const real sx = static_cast<real>(W) / static_cast<real>(out_w);
  for (int64_t oh = 0; oh < out_h; ++oh) {
    // half-pixel source center, clamped to the valid sample grid
    real fy = (static_cast<real>(oh) + 0.5) * sy - 0.5;
    fy = std::min(static_cast<real>(H - 1), std::max<real>(0.0, fy));
    const int64_t y0 = static_cast<int64_t>(fy);
    const int64_t y1 = std::min(H - 1, y0 + 1);
    const real wy = fy - static_cast<real>(y0);
    for (int64_t ow = 0; ow < out_w; ++ow) {
      real fx = (static_cast<real>(ow) + 0.5) * sx - 0.5;
      fx = std::min(static_cast<real>(W - 1), std::max<real>(0.0, fx));
      const int64_t x0 = static_cast<int64_t>(fx);
      const int64_t x1 = std::min(W - 1, x0 + 1);
      const real wx = fx - static_cast<real>(x0);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
          const real v00 = img.at(b, c, y0, x0), v01 = img.at(b, c, y0, x1);
          const real v10 = img.at(b, c, y1, x0), v11 = img.at(b, c, y1, x1);
          out.at(b, c, oh, ow) = (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                                 wy * ((1 - wx) * v10 + wx * v11);
        }
    }
  }
  return out;
}

Tensor crop(const Tensor& img, int64_t top, int64_t left, int64_t h, int64_t w) {
  if (img.ndim() != 4) throw std::invalid_argument("crop: expected NCHW");
  const int64_t B = img.dim(0), C = img.dim(1), H = img.dim(2), W = img.dim(3);
  if (top < 0 || left < 0 || h <= 0 || w <= 0 || top + h > H || left + w > W) {
    throw std::invalid_argument("crop window out of range");
  }
  Tensor out({B, C, h, w});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) out.at(b, c, y, x) = img.at(b, c, top + y, left + x);
  return out;
}

Tensor rot90(const Tensor& img, int64_t k) {
  if (img.ndim() != 4) throw std::invalid_argument("rot90: expected NCHW");
  k = ((k % 4) + 4) % 4;
  if (k == 0) return img;
  const int64_t B = img.dim(0), C = img.dim(1), H = img.dim(2), W = img.dim(3);
  Shape oshape = (k % 2 == 0) ? Shape{B, C, H, W} : Shape{B, C, W, H};
  Tensor out(oshape);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
          const real v = img.at(b, c, y, x);
          switch (k) {
            case 1: out.at(b, c, W - 1 - x, y) = v; break;       // 90 ccw
            case 2: out.at(b, c, H - 1 - y, W - 1 - x) = v; break;
            case 3: out.at(b, c, x, H - 1 - y) = v; break;       // 270 ccw
            default: break;
          }
        }
  return out;
}

Tensor flip_horizontal(const Tensor& img) {
  if (img.ndim() != 4) throw std::invalid_argument("flip_horizontal: expected NCHW");
  const int64_t B = img.dim(0), C = img.dim(1), H = img.dim(2), W = img.dim(3);
  Tensor out(img.shape());
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) out.at(b, c, y, x) = img.at(b, c, y, W - 1 - x);
  return out;
}

}  // namespace ucast
