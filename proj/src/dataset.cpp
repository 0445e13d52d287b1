#include "wsrtl/dataset.hpp"

#include "wsrtl/alignment.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace wsrtl {

namespace fs = std::filesystem;

void Sample::validate(int num_aus) const {
  if (image.empty()) throw std::invalid_argument("sample " + subject_id + ": empty image");
  for (const auto& p : landmarks)
    if (p.x < 0 || p.y < 0 || p.x > image.width() - 1 || p.y > image.height() - 1)
      throw std::invalid_argument("sample " + subject_id + ": landmark outside image");
  if (has_labels() && static_cast<int>(labels.size()) != num_aus)
    throw std::invalid_argument("sample " + subject_id + ": label count " + std::to_string(labels.size()) +
                                " differs from AU count " + std::to_string(num_aus));
  if (is_labeled && !has_labels()) throw std::invalid_argument("sample " + subject_id + ": labeled without labels");
  if (flow_gt && (flow_gt->height() != image.height() || flow_gt->width() != image.width()))
    throw std::invalid_argument("sample " + subject_id + ": flow size differs from image size");
}

std::vector<Point2> read_landmarks(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open landmarks " + path);
  std::vector<Point2> points;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    Point2 p;
    if (!(ss >> p.x >> p.y)) throw std::runtime_error(path + ": malformed landmark line '" + line + "'");
    points.push_back(p);
  }
  return points;
}

void write_landmarks(const std::string& path, const std::vector<Point2>& landmarks) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write landmarks " + path);
  out << std::setprecision(17);
  for (const auto& p : landmarks) out << p.x << ' ' << p.y << '\n';
}

namespace {

std::string resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path.string() : (base / path).string();
}

std::vector<float> parse_labels(const nlohmann::json& j, const ManifestOptions& options) {
  std::vector<float> labels;
  for (const auto& v : j) {
    const double raw = v.get<double>();
    if (options.intensity_threshold) {
      labels.push_back(raw > *options.intensity_threshold ? 1.f : 0.f);
    } else {
      if (raw != 0.0 && raw != 1.0) throw std::invalid_argument("manifest: non-binary label without intensity threshold");
      labels.push_back(static_cast<float>(raw));
    }
  }
  return labels;
}

}  // namespace

Dataset load_manifest(const std::string& path, const ManifestOptions& options) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path);
  const fs::path base = fs::path(path).parent_path();
  Dataset samples;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line);
    Sample s;
    s.image = read_image(resolve(base, j.at("image_path").get<std::string>()));
    if (j.contains("landmarks")) {
      for (const auto& p : j["landmarks"]) s.landmarks.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    } else {
      s.landmarks = read_landmarks(resolve(base, j.at("landmarks_path").get<std::string>()));
    }
    s.subject_id = j.at("subject_id").get<std::string>();
    if (j.contains("labels") && !j["labels"].is_null()) {
      s.labels = parse_labels(j["labels"], options);
      s.is_labeled = true;
    } else if (j.contains("eval_labels")) {
      s.labels = parse_labels(j["eval_labels"], options);
    }
    if (j.contains("flow_path") && !j["flow_path"].is_null())
      s.flow_gt = read_flow(resolve(base, j["flow_path"].get<std::string>()));
    if (!options.reference_landmarks.empty()) {
      if (s.flow_gt) throw std::invalid_argument("manifest: flow files must already be in the aligned frame");
      auto aligned = align_face(s.image, s.landmarks, options.reference_landmarks, options.aligned_size);
      s.image = std::move(aligned.image);
      s.landmarks = std::move(aligned.landmarks);
    }
    try {
      s.validate(options.num_aus);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

void save_manifest(const std::string& path, const Dataset& samples) {
  const fs::path base = fs::path(path).parent_path();
  fs::create_directories(base / "images");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    std::ostringstream stem;
    stem << std::setw(5) << std::setfill('0') << i;
    nlohmann::json j;
    j["image_path"] = "images/" + stem.str() + ".ppm";
    j["landmarks_path"] = "images/" + stem.str() + ".txt";
    j["subject_id"] = s.subject_id;
    write_image((base / j["image_path"].get<std::string>()).string(), s.image);
    write_landmarks((base / j["landmarks_path"].get<std::string>()).string(), s.landmarks);
    if (s.has_labels()) j[s.is_labeled ? "labels" : "eval_labels"] = s.labels;
    if (s.flow_gt) {
      j["flow_path"] = "images/" + stem.str() + ".flo";
      write_flow((base / j["flow_path"].get<std::string>()).string(), *s.flow_gt);
    }
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path);
}

AUCenters mirror_centers(const AUCenters& centers, int width) {
  AUCenters out;
  for (const auto& c : centers.right) out.left.push_back({width - c.x, c.y});
  for (const auto& c : centers.left) out.right.push_back({width - c.x, c.y});
  return out;
}

Dataset filter_subjects(const Dataset& samples, const std::vector<std::string>& subjects) {
  const std::set<std::string> keep(subjects.begin(), subjects.end());
  Dataset out;
  for (const auto& s : samples)
    if (keep.count(s.subject_id)) out.push_back(s);
  return out;
}

std::vector<std::string> subject_list(const Dataset& samples) {
  std::set<std::string> ids;
  for (const auto& s : samples) ids.insert(s.subject_id);
  return {ids.begin(), ids.end()};
}

void fill_batch_row(Batch& batch, int row, const Sample& sample, int index, const AURuleTable& rules, int crop_y,
                    int crop_x, bool flip, int crop_size) {
  Image img = sample.image.crop(crop_y, crop_x, crop_size, crop_size);
  std::vector<Point2> landmarks;
  for (const auto& p : sample.landmarks) landmarks.push_back({p.x - crop_x, p.y - crop_y});
  AUCenters centers = compute_au_centers(landmarks, rules, crop_size, crop_size);
  std::optional<FlowField> flow;
  if (sample.flow_gt) flow = sample.flow_gt->crop(crop_y, crop_x, crop_size, crop_size);
  if (flip) {
    img = img.flipped_horizontal();
    centers = mirror_centers(centers, crop_size);
    if (flow) flow = flow->flipped_horizontal();
  }
  const Eigen::Index plane = static_cast<Eigen::Index>(3) * crop_size * crop_size;
  batch.images.array().segment(row * plane, plane) = img.array();
  const int n = batch.labels.dim(1);
  for (int k = 0; k < n; ++k)
    batch.labels.at(row, k) = sample.has_labels() ? sample.labels[static_cast<std::size_t>(k)] : 0.f;
  batch.centers[static_cast<std::size_t>(row)] = std::move(centers);
  batch.labeled[static_cast<std::size_t>(row)] = sample.is_labeled;
  batch.flow[static_cast<std::size_t>(row)] = std::move(flow);
  batch.indices[static_cast<std::size_t>(row)] = index;
}

namespace {

Batch empty_batch(int size, int num_aus, int crop_size) {
  Batch b;
  b.images = TensorF({size, 3, crop_size, crop_size});
  b.labels = TensorF({size, num_aus});
  b.centers.resize(static_cast<std::size_t>(size));
  b.labeled.resize(static_cast<std::size_t>(size));
  b.flow.resize(static_cast<std::size_t>(size));
  b.indices.resize(static_cast<std::size_t>(size));
  return b;
}

}  // namespace

Batch make_batch(const Dataset& samples, const std::vector<int>& indices, const AURuleTable& rules, int crop_size) {
  Batch b = empty_batch(static_cast<int>(indices.size()), rules.num_aus(), crop_size);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto& s = samples.at(static_cast<std::size_t>(indices[r]));
    fill_batch_row(b, static_cast<int>(r), s, indices[r], rules, (s.image.height() - crop_size) / 2,
                   (s.image.width() - crop_size) / 2, false, crop_size);
  }
  return b;
}

BatchIterator::BatchIterator(const Dataset& samples, const AURuleTable& rules, int batch_size, std::uint64_t seed,
                             bool augment, int crop_size)
    : samples_(&samples), rules_(&rules), batch_size_(batch_size), augment_(augment), crop_size_(crop_size),
      rng_(seed) {
  if (samples.empty()) throw std::invalid_argument("BatchIterator: empty dataset");
  if (batch_size <= 0 || static_cast<std::size_t>(batch_size) > samples.size())
    throw std::invalid_argument("BatchIterator: batch size must be in [1, dataset size]");
  order_.resize(samples.size());
  reshuffle();
}

void BatchIterator::reshuffle() {
  std::iota(order_.begin(), order_.end(), 0);
  // Fisher-Yates driven by the engine directly, so the order does not depend
  // on the standard library's distribution implementations.
  for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_() % i]);
  cursor_ = 0;
}

Batch BatchIterator::next() {
  if (cursor_ + static_cast<std::size_t>(batch_size_) > order_.size()) {
    reshuffle();
    ++epoch_;
  }
  Batch b = empty_batch(batch_size_, rules_->num_aus(), crop_size_);
  for (int r = 0; r < batch_size_; ++r) {
    const int idx = order_[cursor_++];
    const auto& s = (*samples_)[static_cast<std::size_t>(idx)];
    const int my = s.image.height() - crop_size_, mx = s.image.width() - crop_size_;
    int cy = my / 2, cx = mx / 2;
    bool flip = false;
    if (augment_) {
      cy = static_cast<int>(rng_() % static_cast<std::uint64_t>(my + 1));
      cx = static_cast<int>(rng_() % static_cast<std::uint64_t>(mx + 1));
      flip = (rng_() & 1u) != 0;
    }
    fill_batch_row(b, r, s, idx, *rules_, cy, cx, flip, crop_size_);
  }
  return b;
}

std::string BatchIterator::rng_state() const {
  std::ostringstream ss;
  ss << rng_;
  return ss.str();
}

void BatchIterator::set_rng_state(const std::string& state) {
  std::istringstream ss(state);
  ss >> rng_;
}

void BatchIterator::restore(const std::string& rng_state, std::size_t cursor, std::vector<int> order,
                            std::uint64_t epoch) {
  if (order.size() != order_.size()) throw std::invalid_argument("BatchIterator::restore: dataset size changed");
  set_rng_state(rng_state);
  cursor_ = cursor;
  order_ = std::move(order);
  epoch_ = epoch;
}

}  // namespace wsrtl
