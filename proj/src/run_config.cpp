#include "wsrtl/run_config.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

namespace wsrtl {

using nlohmann::ordered_json;

namespace {

ordered_json synthetic_json(const SyntheticSpec& s) {
  ordered_json j;
  j["num_aus"] = s.num_aus;
  j["subjects"] = s.subjects;
  j["samples_per_subject"] = s.samples_per_subject;
  j["image_size"] = s.image_size;
  j["roi_image_size"] = s.roi_image_size;
  j["unlabeled_fraction"] = s.unlabeled_fraction;
  j["cooccur_flip"] = s.cooccur_flip;
  j["motion_au"] = s.motion_au;
  j["motion_x"] = s.motion_x;
  j["motion_y"] = s.motion_y;
  j["noise"] = s.noise;
  j["stamp_size"] = s.stamp_size;
  j["landmark_jitter"] = s.landmark_jitter;
  return j;
}

SyntheticSpec synthetic_from(const ordered_json& j) {
  SyntheticSpec s;
  s.num_aus = j.value("num_aus", s.num_aus);
  s.subjects = j.value("subjects", s.subjects);
  s.samples_per_subject = j.value("samples_per_subject", s.samples_per_subject);
  s.image_size = j.value("image_size", s.image_size);
  s.roi_image_size = j.value("roi_image_size", s.roi_image_size);
  s.unlabeled_fraction = j.value("unlabeled_fraction", s.unlabeled_fraction);
  s.cooccur_flip = j.value("cooccur_flip", s.cooccur_flip);
  s.motion_au = j.value("motion_au", s.motion_au);
  s.motion_x = j.value("motion_x", s.motion_x);
  s.motion_y = j.value("motion_y", s.motion_y);
  s.noise = j.value("noise", s.noise);
  s.stamp_size = j.value("stamp_size", s.stamp_size);
  s.landmark_jitter = j.value("landmark_jitter", s.landmark_jitter);
  return s;
}

ordered_json data_json(const DataConfig& d) {
  ordered_json j;
  j["source"] = d.source;
  j["synthetic"] = synthetic_json(d.synthetic);
  j["seed"] = d.seed;
  j["labeled_manifest"] = d.labeled_manifest;
  j["unlabeled_manifest"] = d.unlabeled_manifest;
  j["rules"] = d.rules;
  j["intensity_threshold"] = d.intensity_threshold;
  j["folds"] = d.folds;
  j["fold"] = d.fold;
  j["fold_seed"] = d.fold_seed;
  return j;
}

ordered_json full_json(const RunConfig& c) {
  ordered_json j;
  j["model"] = ordered_json::parse(c.model.to_json());
  j["train"] = ordered_json::parse(c.train.to_json());
  j["data"] = data_json(c.data);
  j["eval_every"] = c.eval_every;
  j["checkpoint_every"] = c.checkpoint_every;
  return j;
}

// Every key of `given` must exist in `known`, recursively for objects.
void check_keys(const ordered_json& given, const ordered_json& known, const std::string& where) {
  if (!given.is_object()) throw ConfigError(where.empty() ? "config must be a JSON object" : where + " must be an object");
  for (const auto& [k, v] : given.items()) {
    const std::string path = where.empty() ? k : where + "." + k;
    if (!known.contains(k)) throw ConfigError("unknown config key '" + path + "'");
    if (known[k].is_object()) check_keys(v, known[k], path);
  }
}

void apply_override(ordered_json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  ordered_json value;
  try {
    value = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  ordered_json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' is malformed");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part)) (*node)[part] = ordered_json::object();
    node = &(*node)[part];
    if (!node->is_object()) throw ConfigError("override key '" + key + "' crosses a non-object value");
    start = dot + 1;
  }
}

}  // namespace

void RunConfig::validate() const {
  try {
    model.validate();
    train.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (data.source != "synthetic" && data.source != "manifest")
    throw ConfigError("data.source must be 'synthetic' or 'manifest'");
  if (data.folds < 2) throw ConfigError("data.folds must be at least 2");
  if (data.fold < 0 || data.fold >= data.folds) throw ConfigError("data.fold must lie in [0, folds)");
  if (eval_every < 0 || checkpoint_every < 0) throw ConfigError("eval_every and checkpoint_every must be non-negative");
  if (data.source == "synthetic") {
    const auto& s = data.synthetic;
    if (s.num_aus != model.num_aus) throw ConfigError("data.synthetic.num_aus differs from model.num_aus");
    if (s.image_size < model.image_size) throw ConfigError("data.synthetic.image_size is smaller than model.image_size");
    if (s.roi_image_size != model.patch_size)
      throw ConfigError("data.synthetic.roi_image_size must equal model.patch_size");
    if (s.subjects < data.folds) throw ConfigError("fewer synthetic subjects than folds");
  } else if (data.labeled_manifest.empty() || data.rules.empty()) {
    throw ConfigError("manifest source needs data.labeled_manifest and data.rules");
  }
}

std::string RunConfig::to_json() const { return full_json(*this).dump(2); }

std::uint64_t RunConfig::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : full_json(*this).dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

RunConfig RunConfig::from_json(const std::string& text) { return from_text(text, {}); }

RunConfig RunConfig::from_text(const std::string& text, const std::vector<std::string>& overrides) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& o : overrides) apply_override(j, o);
  const RunConfig defaults;
  check_keys(j, full_json(defaults), "");

  RunConfig c;
  try {
    if (j.contains("model")) {
      ordered_json m = ordered_json::parse(c.model.to_json());
      m["roi_hidden"] = 0;  // to_json resolves the width-dependent default
      m.update(j["model"]);
      c.model = ModelConfig::from_json(m.dump());
    }
    if (j.contains("train")) c.train = TrainConfig::from_json(j["train"].dump());
    if (j.contains("data")) {
      const auto& d = j["data"];
      c.data.source = d.value("source", c.data.source);
      if (d.contains("synthetic")) c.data.synthetic = synthetic_from(d["synthetic"]);
      c.data.seed = d.value("seed", c.data.seed);
      c.data.labeled_manifest = d.value("labeled_manifest", c.data.labeled_manifest);
      c.data.unlabeled_manifest = d.value("unlabeled_manifest", c.data.unlabeled_manifest);
      c.data.rules = d.value("rules", c.data.rules);
      c.data.intensity_threshold = d.value("intensity_threshold", c.data.intensity_threshold);
      c.data.folds = d.value("folds", c.data.folds);
      c.data.fold = d.value("fold", c.data.fold);
      c.data.fold_seed = d.value("fold_seed", c.data.fold_seed);
    }
    c.eval_every = j.value("eval_every", c.eval_every);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config value has the wrong type: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str(), overrides);
}

RunData load_run_data(const RunConfig& config, int fold) {
  RunData out;
  Dataset all;
  if (config.data.source == "synthetic") {
    const auto data = generate_synthetic_dataset(config.data.synthetic, config.data.seed);
    out.rules = data.rules;
    all = merged(data);
  } else {
    namespace fs = std::filesystem;
    out.rules = read_rule_table(config.data.rules);
    ManifestOptions opt;
    opt.num_aus = config.model.num_aus;
    if (config.data.intensity_threshold >= 0) opt.intensity_threshold = config.data.intensity_threshold;
    all = load_manifest(config.data.labeled_manifest, opt);
    if (!config.data.unlabeled_manifest.empty()) {
      const auto more = load_manifest(config.data.unlabeled_manifest, opt);
      all.insert(all.end(), more.begin(), more.end());
    }
  }
  if (out.rules.num_aus() != config.model.num_aus) throw ConfigError("rule table AU count differs from model.num_aus");

  std::vector<std::string> ids;
  for (const auto& s : all) ids.push_back(s.subject_id);
  const auto folds = subject_kfold(ids, config.data.folds, config.data.fold_seed);
  if (fold < 0 || fold >= static_cast<int>(folds.size())) throw ConfigError("fold out of range");
  const Fold& f = folds[static_cast<std::size_t>(fold)];
  out.test_subjects = f.test;
  for (const auto& s : filter_subjects(all, f.train)) (s.is_labeled ? out.labeled : out.unlabeled).push_back(s);
  for (const auto& s : filter_subjects(all, f.test))
    if (s.has_labels()) out.test.push_back(s);
  return out;
}

}  // namespace wsrtl
