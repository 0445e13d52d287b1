#include "wsrtl/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <stdexcept>

namespace wsrtl {

namespace {

constexpr std::array<std::array<float, 3>, 8> kPalette{{
    {0.95f, 0.15f, 0.15f},
    {0.15f, 0.85f, 0.2f},
    {0.15f, 0.3f, 0.95f},
    {0.95f, 0.9f, 0.1f},
    {0.85f, 0.2f, 0.9f},
    {0.1f, 0.9f, 0.9f},
    {0.05f, 0.05f, 0.05f},
    {1.0f, 0.55f, 0.0f},
}};

struct Subject {
  std::array<float, 3> tint;
  float brightness;
  double rx, ry;
};

struct Stamp {
  int au;
  PixelCenter center;
  bool mirrored;
};

void draw_face(Image& img, const Subject& s, double cx, double cy) {
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      const double ex = (x - cx) / s.rx, ey = (y - cy) / s.ry;
      const double r2 = ex * ex + ey * ey;
      for (int c = 0; c < 3; ++c)
        img(c, y, x) = r2 <= 1.0 ? static_cast<float>(s.tint[static_cast<std::size_t>(c)] * s.brightness * (1.0 - 0.35 * r2))
                                 : 0.15f;
    }
}

// Cosine-windowed grating on the half-open square [c - size/2, c + size/2).
void draw_stamp(Image& img, const Stamp& st, int num_aus, int size) {
  const double theta = std::numbers::pi * st.au / num_aus;
  const double period = 5.0 + st.au % 3;
  const auto& color = kPalette[static_cast<std::size_t>(st.au) % kPalette.size()];
  const int half = size / 2;
  for (int y = st.center.y - half; y < st.center.y + half; ++y)
    for (int x = st.center.x - half; x < st.center.x + half; ++x) {
      if (y < 0 || x < 0 || y >= img.height() || x >= img.width()) continue;
      double lx = x - st.center.x + 0.5, ly = y - st.center.y + 0.5;
      if (st.mirrored) lx = -lx;
      const double w = std::cos(std::numbers::pi * lx / size) * std::cos(std::numbers::pi * ly / size);
      const double g = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * (lx * std::cos(theta) + ly * std::sin(theta)) / period);
      const double a = 0.9 * w;
      for (int c = 0; c < 3; ++c)
        img(c, y, x) = static_cast<float>(img(c, y, x) * (1 - a) + a * color[static_cast<std::size_t>(c)] * g);
    }
}

}  // namespace

SyntheticDataset generate_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.num_aus < 1 || spec.subjects < 1 || spec.samples_per_subject < 1)
    throw std::invalid_argument("synthetic spec: counts must be positive");
  if (spec.unlabeled_fraction < 0 || spec.unlabeled_fraction >= 1)
    throw std::invalid_argument("synthetic spec: unlabeled_fraction must be in [0, 1)");
  const int motion_au = spec.motion_au < 0 ? spec.num_aus - 1 : spec.motion_au;
  if (motion_au >= spec.num_aus) throw std::invalid_argument("synthetic spec: motion AU out of range");

  SyntheticDataset data;
  data.rules = synthetic_rule_table(spec.num_aus, spec.roi_image_size);
  data.layout = synthetic_layout(spec.num_aus);
  const auto base_landmarks = synthetic_landmarks(data.layout, spec.image_size);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<float> gauss(0.f, 1.f);
  auto coin = [&](double p) { return unit(rng) < p ? 1.f : 0.f; };

  const double center = (spec.image_size - 1) / 2.0;
  for (int subj = 0; subj < spec.subjects; ++subj) {
    Subject s;
    for (int c = 0; c < 3; ++c)
      s.tint[static_cast<std::size_t>(c)] = static_cast<float>(std::array{0.8, 0.62, 0.5}[static_cast<std::size_t>(c)] + 0.2 * unit(rng) - 0.1);
    s.brightness = static_cast<float>(0.85 + 0.25 * unit(rng));
    s.rx = spec.image_size * (0.36 + 0.04 * unit(rng));
    s.ry = spec.image_size * (0.42 + 0.04 * unit(rng));
    char name[16];
    std::snprintf(name, sizeof(name), "S%03d", subj);

    for (int j = 0; j < spec.samples_per_subject; ++j) {
      std::vector<float> labels(static_cast<std::size_t>(spec.num_aus));
      if (spec.force_label) {
        std::fill(labels.begin(), labels.end(), *spec.force_label);
      } else {
        for (auto& l : labels) l = coin(0.5);
        if (spec.num_aus >= 2) labels[1] = coin(spec.cooccur_flip) > 0 ? 1.f - labels[0] : labels[0];
        if (spec.num_aus >= 4) {
          const double r = unit(rng);
          labels[2] = r < 1.0 / 3 ? 1.f : 0.f;
          labels[3] = r >= 1.0 / 3 && r < 2.0 / 3 ? 1.f : 0.f;
        }
      }

      const double off_x = std::floor(unit(rng) * 7) - 3, off_y = std::floor(unit(rng) * 7) - 3;
      std::vector<Point2> landmarks;
      for (const auto& p : base_landmarks)
        landmarks.push_back({p.x + off_x + spec.landmark_jitter * (2 * unit(rng) - 1),
                             p.y + off_y + spec.landmark_jitter * (2 * unit(rng) - 1)});
      const AUCenters centers = compute_au_centers(landmarks, data.rules, spec.image_size, spec.image_size);

      Image frame_a(3, spec.image_size, spec.image_size);
      draw_face(frame_a, s, center + off_x, center + off_y);
      Image frame_b = frame_a;
      FlowField flow(spec.image_size, spec.image_size);
      for (int k = 0; k < spec.num_aus; ++k) {
        if (labels[static_cast<std::size_t>(k)] < 0.5f) continue;
        const auto& lc = centers.left[static_cast<std::size_t>(k)];
        const auto& rc = centers.right[static_cast<std::size_t>(k)];
        draw_stamp(frame_a, {k, lc, false}, spec.num_aus, spec.stamp_size);
        draw_stamp(frame_a, {k, rc, true}, spec.num_aus, spec.stamp_size);
        if (k == motion_au) {
          const PixelCenter lb{lc.x - spec.motion_x, lc.y + spec.motion_y};
          const PixelCenter rb{rc.x + spec.motion_x, rc.y + spec.motion_y};
          draw_stamp(frame_b, {k, lb, false}, spec.num_aus, spec.stamp_size);
          draw_stamp(frame_b, {k, rb, true}, spec.num_aus, spec.stamp_size);
          const int half = spec.stamp_size / 2;
          for (const auto& [c, sign] : {std::pair{lc, -1}, std::pair{rc, 1}})
            for (int y = c.y - half; y < c.y + half; ++y)
              for (int x = c.x - half; x < c.x + half; ++x) {
                flow.u(y, x) = static_cast<float>(sign * spec.motion_x);
                flow.v(y, x) = static_cast<float>(spec.motion_y);
              }
        } else {
          draw_stamp(frame_b, {k, lc, false}, spec.num_aus, spec.stamp_size);
          draw_stamp(frame_b, {k, rc, true}, spec.num_aus, spec.stamp_size);
        }
      }
      // Sensor noise is shared by both frames of a pair.
      for (Eigen::Index i = 0; i < frame_a.array().size(); ++i) {
        const float n = spec.noise * gauss(rng);
        frame_a.array()[i] = std::clamp(frame_a.array()[i] + n, 0.f, 1.f);
        frame_b.array()[i] = std::clamp(frame_b.array()[i] + n, 0.f, 1.f);
      }

      Sample sample;
      sample.image = frame_a;
      sample.landmarks = landmarks;
      sample.labels = labels;
      sample.subject_id = name;
      const bool unlabeled = std::floor((j + 1) * spec.unlabeled_fraction) > std::floor(j * spec.unlabeled_fraction);
      if (unlabeled) {
        data.unlabeled.push_back(std::move(sample));
      } else {
        sample.is_labeled = true;
        sample.flow_gt = flow;
        data.pairs.push_back({static_cast<int>(data.labeled.size()), frame_a, frame_b, flow});
        data.labeled.push_back(std::move(sample));
      }
    }
  }
  return data;
}

Dataset merged(const SyntheticDataset& data) {
  Dataset all = data.labeled;
  all.insert(all.end(), data.unlabeled.begin(), data.unlabeled.end());
  return all;
}

}  // namespace wsrtl
