#include "wsrtl/flow.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace wsrtl {

FlowField FlowField::crop(int y0, int x0, int h, int w) const {
  if (y0 < 0 || x0 < 0 || y0 + h > height() || x0 + w > width())
    throw std::out_of_range("FlowField::crop: window outside field");
  FlowField out;
  out.u = u.block(y0, x0, h, w);
  out.v = v.block(y0, x0, h, w);
  return out;
}

FlowField FlowField::flipped_horizontal() const {
  FlowField out;
  out.u = -u.rowwise().reverse();
  out.v = v.rowwise().reverse();
  return out;
}

FlowField FlowField::average_pooled(int factor) const {
  if (factor <= 0 || height() % factor || width() % factor)
    throw std::invalid_argument("FlowField::average_pooled: factor must divide the field size");
  FlowField out(height() / factor, width() / factor);
  const float norm = 1.f / static_cast<float>(factor * factor);
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x) {
      out.u(y, x) = u.block(y * factor, x * factor, factor, factor).sum() * norm;
      out.v(y, x) = v.block(y * factor, x * factor, factor, factor).sum() * norm;
    }
  return out;
}

namespace {

using Plane = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double bilinear(const Plane& img, double y, double x) {
  const int h = static_cast<int>(img.rows()), w = static_cast<int>(img.cols());
  y = std::clamp(y, 0.0, h - 1.0);
  x = std::clamp(x, 0.0, w - 1.0);
  const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double ty = y - y0, tx = x - x0;
  return (img(y0, x0) * (1 - tx) + img(y0, x1) * tx) * (1 - ty) + (img(y1, x0) * (1 - tx) + img(y1, x1) * tx) * ty;
}

Plane gaussian_blur(const Plane& img, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (int i = -radius; i <= radius; ++i) total += k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  const int h = static_cast<int>(img.rows()), w = static_cast<int>(img.cols());
  Plane tmp(h, w), out(h, w);
  // Symmetric (mirror) boundary.
  auto reflect = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[static_cast<std::size_t>(i + radius)] * img(y, reflect(x + i, w));
      tmp(y, x) = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[static_cast<std::size_t>(i + radius)] * tmp(reflect(y + i, h), x);
      out(y, x) = acc;
    }
  return out;
}

// Half-pixel-centered bilinear resize.
Plane resize(const Plane& img, int out_h, int out_w) {
  const double sy = static_cast<double>(img.rows()) / out_h, sx = static_cast<double>(img.cols()) / out_w;
  Plane out(out_h, out_w);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) out(y, x) = bilinear(img, (y + 0.5) * sy - 0.5, (x + 0.5) * sx - 0.5);
  return out;
}

// Central differences, one-sided at the border.
void centered_gradient(const Plane& img, Plane& gx, Plane& gy) {
  const int h = static_cast<int>(img.rows()), w = static_cast<int>(img.cols());
  gx.resize(h, w);
  gy.resize(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int xl = std::max(x - 1, 0), xr = std::min(x + 1, w - 1);
      const int yu = std::max(y - 1, 0), yd = std::min(y + 1, h - 1);
      gx(y, x) = (img(y, xr) - img(y, xl)) / std::max(1, xr - xl);
      gy(y, x) = (img(yd, x) - img(yu, x)) / std::max(1, yd - yu);
    }
}

// Forward differences with zero at the last row/column, and the matching
// negative-adjoint divergence.
void forward_gradient(const Plane& f, Plane& fx, Plane& fy) {
  const int h = static_cast<int>(f.rows()), w = static_cast<int>(f.cols());
  fx = Plane::Zero(h, w);
  fy = Plane::Zero(h, w);
  fx.leftCols(w - 1) = f.rightCols(w - 1) - f.leftCols(w - 1);
  fy.topRows(h - 1) = f.bottomRows(h - 1) - f.topRows(h - 1);
}

Plane divergence(const Plane& px, const Plane& py) {
  const int h = static_cast<int>(px.rows()), w = static_cast<int>(px.cols());
  Plane div(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double dx = x == 0 ? px(y, x) : (x == w - 1 ? -px(y, x - 1) : px(y, x) - px(y, x - 1));
      const double dy = y == 0 ? py(y, x) : (y == h - 1 ? -py(y - 1, x) : py(y, x) - py(y - 1, x));
      div(y, x) = dx + dy;
    }
  return div;
}

void solve_level(const Plane& i0, const Plane& i1, Plane& u1, Plane& u2, const TvL1Config& cfg) {
  const int h = static_cast<int>(i0.rows()), w = static_cast<int>(i0.cols());
  const double l_t = cfg.lambda * cfg.theta, taut = cfg.tau / cfg.theta;
  Plane i1x, i1y;
  centered_gradient(i1, i1x, i1y);
  Plane p11 = Plane::Zero(h, w), p12 = Plane::Zero(h, w), p21 = Plane::Zero(h, w), p22 = Plane::Zero(h, w);
  Plane i1w(h, w), i1wx(h, w), i1wy(h, w), rho_c(h, w), v1(h, w), v2(h, w);
  Plane u1x, u1y, u2x, u2y;

  for (int warp = 0; warp < cfg.warps; ++warp) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double sx = x + u1(y, x), sy = y + u2(y, x);
        i1w(y, x) = bilinear(i1, sy, sx);
        i1wx(y, x) = bilinear(i1x, sy, sx);
        i1wy(y, x) = bilinear(i1y, sy, sx);
      }
    const Plane grad = i1wx.square() + i1wy.square();
    rho_c = i1w - i1wx * u1 - i1wy * u2 - i0;

    for (int it = 0; it < cfg.iterations; ++it) {
      // Pointwise thresholding of the data term.
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double rho = rho_c(y, x) + i1wx(y, x) * u1(y, x) + i1wy(y, x) * u2(y, x);
          const double g = grad(y, x);
          double d1 = 0, d2 = 0;
          if (rho < -l_t * g) {
            d1 = l_t * i1wx(y, x);
            d2 = l_t * i1wy(y, x);
          } else if (rho > l_t * g) {
            d1 = -l_t * i1wx(y, x);
            d2 = -l_t * i1wy(y, x);
          } else if (g > 1e-10) {
            d1 = -rho * i1wx(y, x) / g;
            d2 = -rho * i1wy(y, x) / g;
          }
          v1(y, x) = u1(y, x) + d1;
          v2(y, x) = u2(y, x) + d2;
        }
      u1 = v1 + cfg.theta * divergence(p11, p12);
      u2 = v2 + cfg.theta * divergence(p21, p22);

      // Projected dual ascent on the TV term.
      forward_gradient(u1, u1x, u1y);
      forward_gradient(u2, u2x, u2y);
      const Plane ng1 = 1.0 + taut * (u1x.square() + u1y.square()).sqrt();
      const Plane ng2 = 1.0 + taut * (u2x.square() + u2y.square()).sqrt();
      p11 = (p11 + taut * u1x) / ng1;
      p12 = (p12 + taut * u1y) / ng1;
      p21 = (p21 + taut * u2x) / ng2;
      p22 = (p22 + taut * u2y) / ng2;
    }
  }
}

Plane to_plane(const GrayImage& g) { return g.cast<double>() * 255.0; }

}  // namespace

FlowField extract_flow(const GrayImage& frame_a, const GrayImage& frame_b, const TvL1Config& config) {
  if (frame_a.rows() != frame_b.rows() || frame_a.cols() != frame_b.cols())
    throw std::invalid_argument("extract_flow: frames differ in size");
  if (frame_a.size() == 0) throw std::invalid_argument("extract_flow: empty frames");
  if (config.zoom <= 0 || config.zoom >= 1) throw std::invalid_argument("extract_flow: zoom must be in (0, 1)");

  std::vector<Plane> pyr0{to_plane(frame_a)}, pyr1{to_plane(frame_b)};
  const double sigma = 0.6 * std::sqrt(1.0 / (config.zoom * config.zoom) - 1.0);
  for (int l = 1; l < config.levels; ++l) {
    const int h = static_cast<int>(std::lround(pyr0.back().rows() * config.zoom));
    const int w = static_cast<int>(std::lround(pyr0.back().cols() * config.zoom));
    if (h < 16 || w < 16) break;
    pyr0.push_back(resize(gaussian_blur(pyr0.back(), sigma), h, w));
    pyr1.push_back(resize(gaussian_blur(pyr1.back(), sigma), h, w));
  }

  Plane u1 = Plane::Zero(pyr0.back().rows(), pyr0.back().cols()), u2 = u1;
  for (int l = static_cast<int>(pyr0.size()) - 1; l >= 0; --l) {
    const auto& i0 = pyr0[static_cast<std::size_t>(l)];
    if (u1.rows() != i0.rows() || u1.cols() != i0.cols()) {
      const double fy = static_cast<double>(i0.rows()) / u1.rows(), fx = static_cast<double>(i0.cols()) / u1.cols();
      u1 = resize(u1, static_cast<int>(i0.rows()), static_cast<int>(i0.cols())) * fx;
      u2 = resize(u2, static_cast<int>(i0.rows()), static_cast<int>(i0.cols())) * fy;
    }
    solve_level(i0, pyr1[static_cast<std::size_t>(l)], u1, u2, config);
  }

  FlowField flow;
  flow.u = u1.cast<float>();
  flow.v = u2.cast<float>();
  return flow;
}

FlowField extract_flow(const Image& frame_a, const Image& frame_b, const TvL1Config& config) {
  if (frame_a.height() != frame_b.height() || frame_a.width() != frame_b.width())
    throw std::invalid_argument("extract_flow: frames differ in size");
  return extract_flow(frame_a.gray(), frame_b.gray(), config);
}

static_assert(std::endian::native == std::endian::little, "flow IO assumes a little-endian host");

void write_flow(const std::string& path, const FlowField& flow) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write flow file " + path);
  out.write("WFLO", 4);
  const std::array<std::uint32_t, 2> dims{static_cast<std::uint32_t>(flow.height()),
                                          static_cast<std::uint32_t>(flow.width())};
  out.write(reinterpret_cast<const char*>(dims.data()), sizeof(dims));
  std::vector<float> buf(static_cast<std::size_t>(flow.u.size()) * 2);
  for (int y = 0; y < flow.height(); ++y)
    for (int x = 0; x < flow.width(); ++x) {
      const std::size_t i = (static_cast<std::size_t>(y) * flow.width() + x) * 2;
      buf[i] = flow.u(y, x);
      buf[i + 1] = flow.v(y, x);
    }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!out) throw std::runtime_error("failed writing " + path);
}

FlowField read_flow(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open flow file " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "WFLO") throw std::runtime_error(path + ": not a WFLO flow file");
  std::array<std::uint32_t, 2> dims{};
  in.read(reinterpret_cast<char*>(dims.data()), sizeof(dims));
  if (!in || dims[0] == 0 || dims[1] == 0 || dims[0] > 1u << 15 || dims[1] > 1u << 15)
    throw std::runtime_error(path + ": bad flow header");
  FlowField flow(static_cast<int>(dims[0]), static_cast<int>(dims[1]));
  std::vector<float> buf(static_cast<std::size_t>(dims[0]) * dims[1] * 2);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!in) throw std::runtime_error(path + ": truncated flow data");
  for (int y = 0; y < flow.height(); ++y)
    for (int x = 0; x < flow.width(); ++x) {
      const std::size_t i = (static_cast<std::size_t>(y) * flow.width() + x) * 2;
      flow.u(y, x) = buf[i];
      flow.v(y, x) = buf[i + 1];
    }
  return flow;
}

}  // namespace wsrtl
