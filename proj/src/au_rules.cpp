#include "wsrtl/au_rules.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace wsrtl {

void AURuleTable::validate() const {
  if (rules.empty()) throw std::invalid_argument("AU rule table is empty");
  auto valid = [&](int idx) { return idx >= 0 && idx < num_landmarks; };
  for (const auto& r : rules)
    if (!valid(r.left_anchor) || !valid(r.right_anchor))
      throw std::invalid_argument("AU rule " + r.name + ": anchor index outside landmark scheme");
  if ((scale_anchor_a >= 0 || scale_anchor_b >= 0) && (!valid(scale_anchor_a) || !valid(scale_anchor_b)))
    throw std::invalid_argument("AU rule table: invalid scale anchors");
  if (roi_image_size <= 0) throw std::invalid_argument("AU rule table: roi_image_size must be positive");
}

int fractional_to_pixel(double fraction, int extent) {
  return static_cast<int>(std::lround(fraction * (extent - 1)));
}

AUCenters compute_au_centers(std::span<const Point2> landmarks, const AURuleTable& table, int image_width,
                             int image_height) {
  table.validate();
  if (static_cast<int>(landmarks.size()) != table.num_landmarks)
    throw std::invalid_argument("compute_au_centers: landmark count " + std::to_string(landmarks.size()) +
                                " does not match scheme size " + std::to_string(table.num_landmarks));
  const int half = table.roi_image_size / 2;
  if (table.roi_image_size > image_width || table.roi_image_size > image_height)
    throw std::invalid_argument("compute_au_centers: RoI patch larger than the image");

  double unit = 1.0;
  if (table.scale_anchor_a >= 0) {
    const auto& a = landmarks[static_cast<std::size_t>(table.scale_anchor_a)];
    const auto& b = landmarks[static_cast<std::size_t>(table.scale_anchor_b)];
    unit = std::hypot(a.x - b.x, a.y - b.y);
  }
  auto place = [&](const Point2& anchor, double dx, double dy) {
    PixelCenter c{static_cast<int>(std::lround(anchor.x + dx * unit)),
                  static_cast<int>(std::lround(anchor.y + dy * unit))};
    c.x = std::clamp(c.x, half, image_width - (table.roi_image_size - half));
    c.y = std::clamp(c.y, half, image_height - (table.roi_image_size - half));
    return c;
  };

  AUCenters centers;
  for (const auto& r : table.rules) {
    centers.left.push_back(place(landmarks[static_cast<std::size_t>(r.left_anchor)], r.offset_x, r.offset_y));
    centers.right.push_back(place(landmarks[static_cast<std::size_t>(r.right_anchor)], -r.offset_x, r.offset_y));
  }
  return centers;
}

std::vector<Point2> synthetic_layout(int num_aus) {
  const int cols = num_aus <= 6 ? 2 : (num_aus + 3) / 4;
  const int rows = (num_aus + cols - 1) / cols;
  std::vector<Point2> layout;
  for (int k = 0; k < num_aus; ++k) {
    const int r = k / cols, c = k % cols;
    const double x = cols > 1 ? 0.16 + (0.38 - 0.16) * c / (cols - 1) : 0.3;
    const double y = rows > 1 ? 0.28 + (0.72 - 0.28) * r / (rows - 1) : 0.5;
    layout.push_back({x, y});
  }
  return layout;
}

std::vector<Point2> synthetic_landmarks(std::span<const Point2> left_fractions, int image_size) {
  std::vector<Point2> landmarks;
  const double extent = image_size - 1;
  for (const auto& f : left_fractions) {
    landmarks.push_back({f.x * extent, f.y * extent});
    landmarks.push_back({(1.0 - f.x) * extent, f.y * extent});
  }
  return landmarks;
}

AURuleTable synthetic_rule_table(int num_aus, int roi_image_size) {
  AURuleTable table;
  table.num_landmarks = 2 * num_aus;
  table.roi_image_size = roi_image_size;
  for (int k = 0; k < num_aus; ++k) table.rules.push_back({"AU" + std::to_string(k), 2 * k, 2 * k + 1, 0.0, 0.0});
  return table;
}

AURuleTable read_rule_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open rule table " + path);
  const auto j = nlohmann::json::parse(in);
  AURuleTable table;
  table.num_landmarks = j.at("num_landmarks").get<int>();
  table.roi_image_size = j.value("roi_image_size", 48);
  if (j.contains("scale_anchors")) {
    table.scale_anchor_a = j["scale_anchors"].at(0).get<int>();
    table.scale_anchor_b = j["scale_anchors"].at(1).get<int>();
  }
  for (const auto& r : j.at("rules")) {
    AURule rule;
    rule.name = r.value("name", "AU" + std::to_string(table.rules.size()));
    rule.left_anchor = r.at("left").get<int>();
    rule.right_anchor = r.at("right").get<int>();
    if (r.contains("offset")) {
      rule.offset_x = r["offset"].at(0).get<double>();
      rule.offset_y = r["offset"].at(1).get<double>();
    }
    table.rules.push_back(rule);
  }
  table.validate();
  return table;
}

void write_rule_table(const std::string& path, const AURuleTable& table) {
  nlohmann::json j;
  j["num_landmarks"] = table.num_landmarks;
  j["roi_image_size"] = table.roi_image_size;
  if (table.scale_anchor_a >= 0) j["scale_anchors"] = {table.scale_anchor_a, table.scale_anchor_b};
  for (const auto& r : table.rules)
    j["rules"].push_back({{"name", r.name}, {"left", r.left_anchor}, {"right", r.right_anchor},
                          {"offset", {r.offset_x, r.offset_y}}});
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write rule table " + path);
  out << j.dump(2) << '\n';
}

}  // namespace wsrtl
