#pragma once

#include "wsrtl/image.hpp"

#include <span>
#include <string>
#include <vector>

namespace wsrtl {

/// Locates one AU's symmetric centers relative to two anchor landmarks.
struct AURule {
  std::string name;
  int left_anchor = 0;
  int right_anchor = 0;
  /// Offset from the anchor in units of the table's reference distance
  /// (pixels when no scale anchors are set). The right side mirrors x.
  double offset_x = 0.0;
  double offset_y = 0.0;
};

struct AURuleTable {
  std::vector<AURule> rules;
  int num_landmarks = 0;
  int scale_anchor_a = -1;
  int scale_anchor_b = -1;
  int roi_image_size = 48;

  int num_aus() const { return static_cast<int>(rules.size()); }
  /// Throws std::invalid_argument when an anchor index is out of range.
  void validate() const;
};

/// Rounds a fractional position onto the pixel grid of an extent-sized axis.
int fractional_to_pixel(double fraction, int extent);

/// Centers rounded to pixels and clamped so that the roi_image_size patch
/// lies inside the image. Throws if the patch cannot fit at all.
AUCenters compute_au_centers(std::span<const Point2> landmarks, const AURuleTable& table, int image_width,
                             int image_height);

/// Default left-side layout (fractions of the image extent) used by the
/// synthetic face scheme.
std::vector<Point2> synthetic_layout(int num_aus);

/// Landmark scheme of the synthetic faces: landmark 2k is AU k's left center,
/// 2k+1 its mirror image.
std::vector<Point2> synthetic_landmarks(std::span<const Point2> left_fractions, int image_size);

/// Zero-offset rules over the synthetic landmark scheme.
AURuleTable synthetic_rule_table(int num_aus, int roi_image_size = 48);

AURuleTable read_rule_table(const std::string& path);
void write_rule_table(const std::string& path, const AURuleTable& table);

}  // namespace wsrtl
