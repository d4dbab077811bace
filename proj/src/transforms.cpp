#include "semab/data.hpp"
#include "semab/error.hpp"

#include <cmath>

namespace semab {

namespace {

void require_chw(std::string_view op, const Tensor& image) {
  if (image.rank() != 3) {
    throw Error("shape_mismatch", std::string(op) + ": expected C x H x W, got " + to_string(image.shape));
  }
}

}  // namespace

Tensor rotate_ccw(const Tensor& image, std::size_t quarter_turns) {
  require_chw("rotate", image);
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (H != W) throw Error("not_square", "rotate: image " + to_string(image.shape) + " is not square");
  const std::size_t n = H - 1;
  Tensor out(image.shape);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        double v = 0;
        switch (quarter_turns % 4) {
          case 0: v = image.at(c, y, x); break;
          case 1: v = image.at(c, x, n - y); break;
          case 2: v = image.at(c, n - y, n - x); break;
          case 3: v = image.at(c, n - x, y); break;
        }
        out.at(c, y, x) = v;
      }
    }
  }
  return out;
}

RotationBatch rotate_batch(std::span<const Tensor> images, Rng& rng, RotationMode mode) {
  RotationBatch batch;
  for (const Tensor& img : images) {
    if (mode == RotationMode::all_four) {
      for (std::size_t r = 0; r < 4; ++r) {
        batch.images.push_back(rotate_ccw(img, r));
        batch.rotation_labels.push_back(r);
      }
    } else {
      const auto r = static_cast<std::size_t>(rng.below(4));
      batch.images.push_back(rotate_ccw(img, r));
      batch.rotation_labels.push_back(r);
    }
  }
  return batch;
}

MaskGeometry MaskGeometry::scaled_to(std::size_t side) {
  MaskGeometry g;
  const double ratio = static_cast<double>(side) / 32.0;
  g.window = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(21.0 * ratio)));
  g.block = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(16.0 * ratio)));
  g.block = std::min(g.block, g.window);
  g.min_dim = g.window;
  return g;
}

Tensor random_center_mask(const Tensor& image, Rng& rng, const MaskGeometry& geometry,
                          MaskPlacement* placement) {
  require_chw("random_center_mask", image);
  const std::size_t H = image.dim(1), W = image.dim(2);
  if (H < geometry.min_dim || W < geometry.min_dim || geometry.block > geometry.window) {
    throw Error("image_too_small", "random_center_mask: image " + to_string(image.shape) +
                                       " needs spatial dims >= " + std::to_string(geometry.min_dim));
  }
  const std::size_t top = geometry.window_start(H) + static_cast<std::size_t>(rng.below(geometry.placements()));
  const std::size_t left = geometry.window_start(W) + static_cast<std::size_t>(rng.below(geometry.placements()));
  Tensor out = image;
  for (std::size_t c = 0; c < image.dim(0); ++c)
    for (std::size_t y = top; y < top + geometry.block; ++y)
      for (std::size_t x = left; x < left + geometry.block; ++x) out.at(c, y, x) = 0.0;
  if (placement) *placement = {top, left};
  return out;
}

Tensor crop_flip(const Tensor& image, std::size_t pad, std::size_t top, std::size_t left, bool flip) {
  require_chw("crop_flip", image);
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (top > 2 * pad || left > 2 * pad) {
    throw Error("out_of_range", "crop_flip: offset outside the padded frame");
  }
  Tensor out(image.shape);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      const long sy = static_cast<long>(y + top) - static_cast<long>(pad);
      if (sy < 0 || sy >= static_cast<long>(H)) continue;
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t ox = flip ? W - 1 - x : x;
        const long sx = static_cast<long>(ox + left) - static_cast<long>(pad);
        if (sx < 0 || sx >= static_cast<long>(W)) continue;
        out.at(c, y, x) = image.at(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
      }
    }
  }
  return out;
}

Tensor augment_crop_flip(const Tensor& image, std::size_t pad, Rng& rng) {
  const auto top = static_cast<std::size_t>(rng.below(2 * pad + 1));
  const auto left = static_cast<std::size_t>(rng.below(2 * pad + 1));
  const bool flip = rng.bernoulli(0.5);
  return crop_flip(image, pad, top, left, flip);
}

}  // namespace semab
