#include "wsrtl/alignment.hpp"

#include <cmath>
#include <stdexcept>

namespace wsrtl {

Eigen::Matrix<double, 2, 3> SimilarityTransform::matrix() const {
  const double a = scale * std::cos(angle), b = scale * std::sin(angle);
  Eigen::Matrix<double, 2, 3> m;
  m << a, -b, tx, b, a, ty;
  return m;
}

Point2 SimilarityTransform::apply(const Point2& p) const {
  const double a = scale * std::cos(angle), b = scale * std::sin(angle);
  return {a * p.x - b * p.y + tx, b * p.x + a * p.y + ty};
}

SimilarityTransform SimilarityTransform::inverse() const {
  SimilarityTransform inv;
  inv.scale = 1.0 / scale;
  inv.angle = -angle;
  const double a = inv.scale * std::cos(inv.angle), b = inv.scale * std::sin(inv.angle);
  inv.tx = -(a * tx - b * ty);
  inv.ty = -(b * tx + a * ty);
  return inv;
}

SimilarityTransform estimate_similarity(std::span<const Point2> source, std::span<const Point2> target) {
  if (source.size() != target.size()) throw std::invalid_argument("estimate_similarity: point count mismatch");
  if (source.size() < 2) throw std::invalid_argument("estimate_similarity: need at least two correspondences");
  const double n = static_cast<double>(source.size());
  double sx = 0, sy = 0, tx = 0, ty = 0;
  for (std::size_t i = 0; i < source.size(); ++i) {
    sx += source[i].x;
    sy += source[i].y;
    tx += target[i].x;
    ty += target[i].y;
  }
  sx /= n;
  sy /= n;
  tx /= n;
  ty /= n;
  double norm = 0, dot = 0, cross = 0;
  for (std::size_t i = 0; i < source.size(); ++i) {
    const double px = source[i].x - sx, py = source[i].y - sy;
    const double qx = target[i].x - tx, qy = target[i].y - ty;
    norm += px * px + py * py;
    dot += px * qx + py * qy;
    cross += px * qy - py * qx;
  }
  if (norm < 1e-12) throw std::invalid_argument("estimate_similarity: degenerate (coincident) landmarks");
  const double a = dot / norm, b = cross / norm;
  SimilarityTransform t;
  t.scale = std::hypot(a, b);
  t.angle = std::atan2(b, a);
  t.tx = tx - (a * sx - b * sy);
  t.ty = ty - (b * sx + a * sy);
  return t;
}

Image warp_similarity(const Image& image, const SimilarityTransform& transform, int out_height, int out_width) {
  const SimilarityTransform inv = transform.inverse();
  Image out(image.channels(), out_height, out_width);
  for (int y = 0; y < out_height; ++y)
    for (int x = 0; x < out_width; ++x) {
      const Point2 src = inv.apply({static_cast<double>(x), static_cast<double>(y)});
      for (int c = 0; c < image.channels(); ++c) out(c, y, x) = image.sample(c, src.y, src.x);
    }
  return out;
}

AlignedFace align_face(const Image& image, std::span<const Point2> landmarks,
                       std::span<const Point2> reference_landmarks, int output_size) {
  AlignedFace face;
  face.transform = estimate_similarity(landmarks, reference_landmarks);
  face.image = warp_similarity(image, face.transform, output_size, output_size);
  face.landmarks.reserve(landmarks.size());
  for (const auto& p : landmarks) face.landmarks.push_back(face.transform.apply(p));
  return face;
}

}  // namespace wsrtl
