#include "wsrtl/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace wsrtl {

Image Image::crop(int y0, int x0, int h, int w) const {
  if (y0 < 0 || x0 < 0 || y0 + h > height_ || x0 + w > width_)
    throw std::out_of_range("Image::crop: window outside image");
  Image out(channels_, h, w);
  for (int c = 0; c < channels_; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out(c, y, x) = (*this)(c, y0 + y, x0 + x);
  return out;
}

Image Image::flipped_horizontal() const {
  Image out(channels_, height_, width_);
  for (int c = 0; c < channels_; ++c)
    for (int y = 0; y < height_; ++y)
      for (int x = 0; x < width_; ++x) out(c, y, x) = (*this)(c, y, width_ - 1 - x);
  return out;
}

GrayImage Image::gray() const {
  GrayImage g(height_, width_);
  for (int y = 0; y < height_; ++y)
    for (int x = 0; x < width_; ++x)
      g(y, x) = channels_ >= 3 ? 0.299f * (*this)(0, y, x) + 0.587f * (*this)(1, y, x) + 0.114f * (*this)(2, y, x)
                               : (*this)(0, y, x);
  return g;
}

float Image::sample(int c, double y, double x) const {
  // Round-off from transform estimation must not turn an exact pixel hit
  // into a blend with the neighbor.
  auto snap = [](double v) {
    const double r = std::round(v);
    return std::abs(v - r) < 1e-9 ? r : v;
  };
  y = snap(y);
  x = snap(x);
  y = std::clamp(y, 0.0, static_cast<double>(height_ - 1));
  x = std::clamp(x, 0.0, static_cast<double>(width_ - 1));
  const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
  const int y1 = std::min(y0 + 1, height_ - 1), x1 = std::min(x0 + 1, width_ - 1);
  const double ty = y - y0, tx = x - x0;
  const double top = (*this)(c, y0, x0) * (1 - tx) + (*this)(c, y0, x1) * tx;
  const double bot = (*this)(c, y1, x0) * (1 - tx) + (*this)(c, y1, x1) * tx;
  return static_cast<float>(top * (1 - ty) + bot * ty);
}

namespace {

int read_header_int(std::istream& in) {
  int value = 0;
  while (true) {
    int ch = in.peek();
    if (ch == '#') {
      std::string comment;
      std::getline(in, comment);
    } else if (std::isspace(ch)) {
      in.get();
    } else {
      break;
    }
  }
  if (!(in >> value)) throw std::runtime_error("malformed PNM header");
  return value;
}

}  // namespace

Image read_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image " + path);
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic != "P6" && magic != "P5") throw std::runtime_error(path + ": only binary PPM/PGM is supported");
  const int width = read_header_int(in), height = read_header_int(in), maxval = read_header_int(in);
  if (maxval != 255) throw std::runtime_error(path + ": only 8-bit images are supported");
  in.get();
  const int file_channels = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> raw(static_cast<std::size_t>(width) * height * file_channels);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw std::runtime_error(path + ": truncated pixel data");
  Image image(3, height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) {
        const int src = file_channels == 3 ? c : 0;
        image(c, y, x) = raw[(static_cast<std::size_t>(y) * width + x) * file_channels + src] / 255.f;
      }
  return image;
}

namespace {
unsigned char to_byte(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f));
}
}  // namespace

void write_image(const std::string& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write image " + path);
  const bool color = image.channels() >= 3;
  out << (color ? "P6" : "P5") << '\n' << image.width() << ' ' << image.height() << "\n255\n";
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x) {
      if (color) {
        for (int c = 0; c < 3; ++c) out.put(static_cast<char>(to_byte(image(c, y, x))));
      } else {
        out.put(static_cast<char>(to_byte(image(0, y, x))));
      }
    }
  if (!out) throw std::runtime_error("failed writing " + path);
}

void write_gray(const std::string& path, const GrayImage& gray) {
  Image image(1, static_cast<int>(gray.rows()), static_cast<int>(gray.cols()));
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x) image(0, y, x) = gray(y, x);
  write_image(path, image);
}

}  // namespace wsrtl
