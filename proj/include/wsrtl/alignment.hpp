#pragma once

#include "wsrtl/image.hpp"

#include <Eigen/Dense>

#include <span>
#include <vector>

namespace wsrtl {

/// x' = scale * R(angle) * x + t
struct SimilarityTransform {
  double scale = 1.0;
  double angle = 0.0;  // radians, counter-clockwise in image coordinates
  double tx = 0.0;
  double ty = 0.0;

  Eigen::Matrix<double, 2, 3> matrix() const;
  Point2 apply(const Point2& p) const;
  SimilarityTransform inverse() const;
};

/// Least-squares similarity mapping `source` onto `target`. Throws
/// std::invalid_argument for fewer than two points or coincident sources.
SimilarityTransform estimate_similarity(std::span<const Point2> source, std::span<const Point2> target);

/// Inverse-mapped bilinear warp producing an out_height x out_width image.
Image warp_similarity(const Image& image, const SimilarityTransform& transform, int out_height, int out_width);

struct AlignedFace {
  Image image;
  SimilarityTransform transform;
  std::vector<Point2> landmarks;
};

/// Aligns a face so that its landmarks best match the reference layout;
/// reference coordinates live in the output_size x output_size frame.
AlignedFace align_face(const Image& image, std::span<const Point2> landmarks,
                       std::span<const Point2> reference_landmarks, int output_size = 200);

}  // namespace wsrtl
