#pragma once

#include "wsrtl/image.hpp"

#include <string>

namespace wsrtl {

/// Dense displacement field in pixels. With frames a and b the convention is
/// b(x + u, y + v) ~ a(x, y).
struct FlowField {
  GrayImage u;
  GrayImage v;

  FlowField() = default;
  FlowField(int height, int width) : u(GrayImage::Zero(height, width)), v(GrayImage::Zero(height, width)) {}

  int height() const { return static_cast<int>(u.rows()); }
  int width() const { return static_cast<int>(u.cols()); }
  bool empty() const { return u.size() == 0; }
  GrayImage magnitude() const { return (u.square() + v.square()).sqrt(); }
  bool all_finite() const { return u.isFinite().all() && v.isFinite().all(); }

  FlowField crop(int y0, int x0, int h, int w) const;
  /// Mirror image of the field: columns reversed and u negated.
  FlowField flipped_horizontal() const;
  /// Block average by an integer factor (dimensions must divide).
  FlowField average_pooled(int factor) const;
};

struct TvL1Config {
  double lambda = 0.15;
  double theta = 0.3;
  double tau = 0.25;
  int levels = 5;
  double zoom = 0.5;
  int warps = 5;
  int iterations = 30;
};

/// Duality-based TV-L1 on the luma of both frames (scaled to [0, 255]),
/// coarse to fine with a fixed iteration budget. Throws on size mismatch.
FlowField extract_flow(const Image& frame_a, const Image& frame_b, const TvL1Config& config = {});
FlowField extract_flow(const GrayImage& frame_a, const GrayImage& frame_b, const TvL1Config& config = {});

/// Little-endian "WFLO" file: magic, uint32 H, uint32 W, then H*W (u, v)
/// float32 pairs in row-major order.
void write_flow(const std::string& path, const FlowField& flow);
FlowField read_flow(const std::string& path);

}  // namespace wsrtl
