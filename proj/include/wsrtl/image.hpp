#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace wsrtl {

struct Point2 {
  double x = 0;
  double y = 0;
};

/// Integer pixel location of an AU center.
struct PixelCenter {
  int x = 0;
  int y = 0;
  bool operator==(const PixelCenter&) const = default;
};

/// One symmetric center pair per AU, index-aligned with the rule table.
struct AUCenters {
  std::vector<PixelCenter> left;
  std::vector<PixelCenter> right;
};

using GrayImage = Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Planar (CHW) float image with intensities nominally in [0, 1].
class Image {
 public:
  Image() = default;
  Image(int channels, int height, int width, float fill = 0.f)
      : channels_(channels), height_(height), width_(width),
        data_(Eigen::ArrayXf::Constant(static_cast<Eigen::Index>(channels) * height * width, fill)) {}

  int channels() const { return channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  bool empty() const { return data_.size() == 0; }

  float& operator()(int c, int y, int x) { return data_[index(c, y, x)]; }
  float operator()(int c, int y, int x) const { return data_[index(c, y, x)]; }
  Eigen::ArrayXf& array() { return data_; }
  const Eigen::ArrayXf& array() const { return data_; }
  const float* data() const { return data_.data(); }

  Image crop(int y0, int x0, int h, int w) const;
  Image flipped_horizontal() const;
  /// Luma in [0, 1] (single-channel images are returned as-is).
  GrayImage gray() const;
  /// Bilinear sample with border clamping.
  float sample(int c, double y, double x) const;

 private:
  Eigen::Index index(int c, int y, int x) const {
    return (static_cast<Eigen::Index>(c) * height_ + y) * width_ + x;
  }

  int channels_ = 0, height_ = 0, width_ = 0;
  Eigen::ArrayXf data_;
};

/// Reads binary PPM (P6) or PGM (P5) with maxval 255; grayscale input is
/// replicated to three channels.
Image read_image(const std::string& path);
/// Writes P6 for 3-channel images and P5 otherwise, clamping to [0, 1].
void write_image(const std::string& path, const Image& image);
void write_gray(const std::string& path, const GrayImage& gray);

}  // namespace wsrtl
