#include "wsrtl/checkpoint.hpp"
#include "wsrtl/run_config.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace wsrtl;
namespace fs = std::filesystem;

namespace {

constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  std::int64_t seed = -1;
  int fold = -1;
  int iterations = -1;
  std::string checkpoint;
};

fs::path output_root(const Common& c) {
  if (!c.out.empty()) return c.out;
  if (const char* env = std::getenv("WSRTL_OUTPUT_DIR"); env && *env) return env;
  return "wsrtl_out";
}

std::string hex(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Artifacts are written into <dir>.partial and moved into place only once
// complete, so a failed run never leaves a half-written result behind.
class Staging {
 public:
  explicit Staging(fs::path final_dir) : final_(std::move(final_dir)), stage_(final_.string() + ".partial") {
    fs::remove_all(stage_);
    fs::create_directories(stage_);
  }
  const fs::path& dir() const { return stage_; }
  fs::path operator/(const std::string& name) const { return stage_ / name; }
  void commit() {
    fs::remove_all(final_);
    fs::rename(stage_, final_);
  }

 private:
  fs::path final_, stage_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::vector<std::string> all_overrides(const Common& c) {
  std::vector<std::string> o = c.overrides;
  if (c.seed >= 0) {
    o.push_back("train.seed=" + std::to_string(c.seed));
    o.push_back("model.seed=" + std::to_string(c.seed));
  }
  if (c.fold >= 0) o.push_back("data.fold=" + std::to_string(c.fold));
  if (c.iterations >= 0) o.push_back("train.iterations=" + std::to_string(c.iterations));
  return o;
}

RunConfig load_config(const Common& c, bool required) {
  if (!c.config.empty()) return RunConfig::load(c.config, all_overrides(c));
  if (!c.checkpoint.empty()) {
    const fs::path sibling = fs::path(c.checkpoint).parent_path() / "config.json";
    if (fs::exists(sibling)) return RunConfig::load(sibling.string(), all_overrides(c));
  }
  if (required) throw ConfigError("--config is required");
  return RunConfig::from_text("{}", all_overrides(c));
}

std::string stamp(const RunConfig& rc) {
  nlohmann::ordered_json j;
  j["config_hash"] = hex(rc.hash());
  j["seed"] = rc.seed();
  j["fold"] = rc.data.fold;
  return j.dump(2) + "\n";
}

std::unique_ptr<WsrtlModel<float>> load_model(const std::string& path, const RunConfig& rc) {
  if (path.empty()) throw ConfigError("--checkpoint is required");
  if (!fs::exists(path)) throw ConfigError("checkpoint " + path + " does not exist");
  const ModelConfig mc = checkpoint_config(path);
  if (mc.to_json() != rc.model.to_json()) throw ConfigError("checkpoint model config differs from the run config");
  auto model = std::make_unique<WsrtlModel<float>>(mc);
  read_checkpoint(path, *model, nullptr, nullptr);
  return model;
}

std::string similarity_csv(const Eigen::MatrixXd& s) {
  std::ostringstream os;
  char buf[32];
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.6f", s(i, j));
      os << (j ? "," : "") << buf;
    }
    os << '\n';
  }
  return os.str();
}

Eigen::MatrixXd query_matrix(const WsrtlModel<float>& model) {
  const auto& q = model.transformer().queries().value();
  return q.matrix().cast<double>();
}

// Diverging blue-white-red for values in [-1, 1].
void diverging(double v, float rgb[3]) {
  const float t = static_cast<float>(std::clamp(v, -1.0, 1.0));
  if (t >= 0) {
    rgb[0] = 1.f;
    rgb[1] = rgb[2] = 1.f - t;
  } else {
    rgb[2] = 1.f;
    rgb[0] = rgb[1] = 1.f + t;
  }
}

Image heatmap(const Eigen::MatrixXd& s, int cell) {
  const int n = static_cast<int>(s.rows());
  Image img(3, n * cell, n * cell, 1.f);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      float rgb[3];
      diverging(s(i, j), rgb);
      for (int y = 0; y < cell; ++y)
        for (int x = 0; x < cell; ++x)
          for (int c = 0; c < 3; ++c) img(c, i * cell + y, j * cell + x) = rgb[c];
    }
  return img;
}

// One displacement component as gray: mid-gray is zero, black and white
// are -scale and +scale.
Image flow_gray(const GrayImage& comp, double scale) {
  Image img(3, static_cast<int>(comp.rows()), static_cast<int>(comp.cols()));
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      const float g = static_cast<float>(std::clamp(0.5 + 0.5 * comp(y, x) / std::max(scale, 1e-9), 0.0, 1.0));
      for (int ch = 0; ch < 3; ++ch) img(ch, y, x) = g;
    }
  return img;
}

Image upscale(const Image& in, int factor) {
  Image out(in.channels(), in.height() * factor, in.width() * factor);
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < out.height(); ++y)
      for (int x = 0; x < out.width(); ++x) out(c, y, x) = in(c, y / factor, x / factor);
  return out;
}

// Parts laid out left to right (or top to bottom) on a white canvas.
Image tile(const std::vector<Image>& parts, bool vertical, int gap = 4) {
  int along = 0, across = 0;
  for (const auto& p : parts) {
    along += (vertical ? p.height() : p.width()) + gap;
    across = std::max(across, vertical ? p.width() : p.height());
  }
  along -= gap;
  Image out(3, vertical ? along : across, vertical ? across : along, 1.f);
  int offset = 0;
  for (const auto& p : parts) {
    const int y0 = vertical ? offset : 0, x0 = vertical ? 0 : offset;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < p.height(); ++y)
        for (int x = 0; x < p.width(); ++x) out(c, y0 + y, x0 + x) = p(p.channels() == 3 ? c : 0, y, x);
    offset += (vertical ? p.height() : p.width()) + gap;
  }
  return out;
}

Image batch_image(const TensorF& t, int row) {
  Image img(t.dim(1), t.dim(2), t.dim(3));
  const Eigen::Index plane = img.array().size();
  img.array() = t.array().segment(row * plane, plane);
  return img;
}

FlowField tensor_flow(const TensorF& t, int row) {
  FlowField f(t.dim(2), t.dim(3));
  for (int y = 0; y < f.height(); ++y)
    for (int x = 0; x < f.width(); ++x) {
      f.u(y, x) = t.at(row, 0, y, x);
      f.v(y, x) = t.at(row, 1, y, x);
    }
  return f;
}

const Sample& pick(const Dataset& samples, int index, bool need_flow) {
  int seen = 0;
  for (const auto& s : samples) {
    if (need_flow && !s.flow_gt) continue;
    if (seen++ == index) return s;
  }
  throw ConfigError("--sample " + std::to_string(index) + " is out of range");
}

// ---------------------------------------------------------------------------

int cmd_synth(const Common& c) {
  const RunConfig rc = load_config(c, false);
  const auto data = generate_synthetic_dataset(rc.data.synthetic, rc.data.seed);
  Staging st(output_root(c) / "synth");
  save_manifest((st / "samples.jsonl").string(), merged(data));
  write_rule_table((st / "rules.json").string(), data.rules);
  fs::create_directories(st / "pairs");
  std::ostringstream pairs;
  for (std::size_t i = 0; i < data.pairs.size(); ++i) {
    const auto& p = data.pairs[i];
    const std::string stem = "pairs/" + std::to_string(i);
    write_image((st / (stem + "_a.ppm")).string(), p.frame_a);
    write_image((st / (stem + "_b.ppm")).string(), p.frame_b);
    write_flow((st / (stem + "_gt.flo")).string(), p.flow);
    nlohmann::ordered_json j;
    j["sample"] = p.sample;
    j["frame_a"] = stem + "_a.ppm";
    j["frame_b"] = stem + "_b.ppm";
    j["flow_gt"] = stem + "_gt.flo";
    pairs << j.dump() << '\n';
  }
  write_text(st / "pairs.jsonl", pairs.str());
  write_text(st / "config.json", rc.to_json() + "\n");
  write_text(st / "stamp.json", stamp(rc));
  st.commit();
  std::cout << "synth-data: " << data.labeled.size() << " labeled, " << data.unlabeled.size() << " unlabeled, "
            << data.pairs.size() << " frame pairs\n";
  return 0;
}

int cmd_extract_flow(const Common& c, const std::string& frame_a, const std::string& frame_b,
                     const std::string& pairs_path) {
  if (pairs_path.empty() && (frame_a.empty() || frame_b.empty()))
    throw ConfigError("extract-flow needs --pairs or both --frame-a and --frame-b");
  Staging st(output_root(c) / "flow");
  if (!pairs_path.empty()) {
    std::ifstream in(pairs_path);
    if (!in) throw ConfigError("cannot read " + pairs_path);
    const fs::path base = fs::path(pairs_path).parent_path();
    std::ostringstream csv;
    csv << "pair,sample,mean_epe\n";
    std::string line;
    int i = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      const FlowField f = extract_flow(read_image((base / j.at("frame_a").get<std::string>()).string()),
                                       read_image((base / j.at("frame_b").get<std::string>()).string()));
      write_flow((st / (std::to_string(i) + ".flo")).string(), f);
      csv << i << ',' << j.at("sample").get<int>() << ',';
      if (j.contains("flow_gt")) {
        const FlowField gt = read_flow((base / j["flow_gt"].get<std::string>()).string());
        const double epe = ((f.u - gt.u).square() + (f.v - gt.v).square()).sqrt().mean();
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6f", epe);
        csv << buf;
      }
      csv << '\n';
      ++i;
    }
    write_text(st / "flows.csv", csv.str());
  } else {
    const FlowField f = extract_flow(read_image(frame_a), read_image(frame_b));
    write_flow((st / "flow.flo").string(), f);
    const GrayImage mag = f.magnitude();
    write_gray((st / "magnitude.pgm").string(), mag / std::max(mag.maxCoeff(), 1e-6f));
    const double scale = std::max(1.0f, mag.maxCoeff());
    write_image((st / "uv.ppm").string(), tile({flow_gray(f.u, scale), flow_gray(f.v, scale)}, false));
  }
  st.commit();
  std::cout << "extract-flow: wrote " << (output_root(c) / "flow").string() << "\n";
  return 0;
}

int cmd_train(const Common& c) {
  const RunConfig rc = load_config(c, true);
  const RunData data = load_run_data(rc, rc.data.fold);
  if (data.labeled.empty()) throw ConfigError("no labeled samples in the training subjects");

  const fs::path final_dir = output_root(c) / ("train_fold" + std::to_string(rc.data.fold));
  Staging st(final_dir);
  write_text(st / "config.json", rc.to_json() + "\n");
  write_text(st / "stamp.json", stamp(rc));

  WsrtlModel<float> model(rc.model);
  Trainer trainer(model, rc.train, data.labeled, data.unlabeled, data.rules);
  FitOptions opt;
  opt.log_path = (st / "log.jsonl").string();
  opt.checkpoint_path = (st / "checkpoint.wckp").string();
  opt.checkpoint_every = rc.checkpoint_every;
  opt.eval_every = rc.eval_every;
  if (!data.test.empty()) opt.eval_set = &data.test;
  fit(trainer, opt);

  std::optional<double> f1;
  if (!data.test.empty()) {
    const auto ev = evaluate(model, data.test, data.rules);
    write_text(st / "report.md", report_markdown(ev.report, {}));
    write_text(st / "report.csv", report_csv(ev.report, {}));
    f1 = ev.report.average;
  }
  write_text(st / "queries.csv", similarity_csv(query_matrix(model)));
  st.commit();
  std::cout << "train: config_hash=" << hex(rc.hash()) << " seed=" << rc.seed() << " fold=" << rc.data.fold
            << " iterations=" << trainer.iteration();
  if (f1) std::cout << " heldout_f1=" << *f1;
  std::cout << "\n";
  return 0;
}

int cmd_eval(const Common& c) {
  const RunConfig rc = load_config(c, false);
  const auto model = load_model(c.checkpoint, rc);
  const RunData data = load_run_data(rc, rc.data.fold);
  if (data.test.empty()) throw ConfigError("fold has no labeled held-out samples");
  const auto ev = evaluate(*model, data.test, data.rules);
  Staging st(output_root(c) / ("eval_fold" + std::to_string(rc.data.fold)));
  write_text(st / "report.md", report_markdown(ev.report, {}));
  write_text(st / "report.csv", report_csv(ev.report, {}));
  write_text(st / "stamp.json", stamp(rc));
  st.commit();
  std::cout << report_markdown(ev.report, {});
  return 0;
}

int cmd_viz_similarity(const Common& c) {
  const RunConfig rc = load_config(c, false);
  const auto model = load_model(c.checkpoint, rc);
  const Eigen::MatrixXd s = query_similarity(query_matrix(*model));
  Staging st(output_root(c) / "viz_similarity");
  write_image((st / "similarity.ppm").string(), heatmap(s, 24));
  write_text(st / "similarity.csv", similarity_csv(s));
  write_text(st / "queries.csv", similarity_csv(query_matrix(*model)));
  write_text(st / "stamp.json", stamp(rc));
  st.commit();
  std::cout << similarity_csv(s);
  return 0;
}

int cmd_viz_inpaint(const Common& c, int sample, int au) {
  const RunConfig rc = load_config(c, false);
  const auto model = load_model(c.checkpoint, rc);
  const RunData data = load_run_data(rc, rc.data.fold);
  const Dataset& pool = data.test.empty() ? data.labeled : data.test;
  const Sample& s = pick(pool, sample, false);
  if (au < 0 || au >= rc.model.num_aus) throw ConfigError("--au out of range");
  const Batch b = make_batch(Dataset{s}, {0}, data.rules, rc.model.image_size);
  const auto crop = crop_au(b.images, b.centers, rc.model.patch_size, {au});
  NoGradGuard guard;
  const auto fwd = model->forward(Var<float>(crop.cropped), b.centers, false);
  const auto left = ops::gather_tokens(fwd.relation.left, {au});
  const auto right = ops::gather_tokens(fwd.relation.right, {au});
  const TensorF fake = model->generate(ops::concat0(std::vector{left, right})).value();
  const TensorF filled = paste_patches(crop, fake);
  Staging st(output_root(c) / "viz_inpaint");
  write_image((st / "inpaint.ppm").string(),
              tile({batch_image(crop.cropped, 0), batch_image(b.images, 0), batch_image(filled, 0)}, true));
  char buf[64];
  std::snprintf(buf, sizeof(buf), "au,l1\n%d,%.6f\n", au,
                static_cast<double>((fake.array() - crop.patches.array()).abs().mean()));
  write_text(st / "inpaint.csv", buf);
  write_text(st / "stamp.json", stamp(rc));
  st.commit();
  return 0;
}

int cmd_viz_flow(const Common& c, int sample) {
  const RunConfig rc = load_config(c, false);
  const auto model = load_model(c.checkpoint, rc);
  const RunData data = load_run_data(rc, rc.data.fold);
  Dataset pool;
  for (const auto* set : {&data.test, &data.labeled})
    for (const auto& s : *set)
      if (s.flow_gt) pool.push_back(s);
  const Sample& s = pick(pool, sample, true);
  const Batch b = make_batch(Dataset{s}, {0}, data.rules, rc.model.image_size);
  NoGradGuard guard;
  const auto fwd = model->forward(Var<float>(b.images), b.centers, false);
  const FlowField pred = tensor_flow(model->estimate_flow(fwd.pyramid.stages[3]).value(), 0);
  const int factor = rc.model.image_size / rc.model.flow_size();
  const FlowField gt = b.flow[0]->average_pooled(factor);
  const double scale = std::max({1e-3f, gt.magnitude().maxCoeff(), pred.magnitude().maxCoeff()});
  Staging st(output_root(c) / "viz_flow");
  // Top row: frame, ground-truth u and v. Bottom row: predicted u and v
  // under their ground truth.
  auto uv = [&](const FlowField& f) {
    return tile({upscale(flow_gray(f.u, scale), factor), upscale(flow_gray(f.v, scale), factor)}, false);
  };
  write_image((st / "flow.ppm").string(),
              tile({tile({batch_image(b.images, 0), uv(gt)}, false), tile({Image(3, b.images.dim(2), b.images.dim(3), 1.f), uv(pred)}, false)}, true));
  write_flow((st / "predicted.flo").string(), pred);
  write_text(st / "stamp.json", stamp(rc));
  st.commit();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised AU relation learning: data, training, evaluation and figures"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub, bool with_checkpoint) {
    sub->add_option("--config", common.config, "JSON run configuration");
    sub->add_option("--set", common.overrides, "override, dotted.key=value (repeatable)");
    sub->add_option("--out", common.out, "output root (default: $WSRTL_OUTPUT_DIR or ./wsrtl_out)");
    sub->add_option("--seed", common.seed, "sets train.seed and model.seed");
    sub->add_option("--fold", common.fold, "held-out fold index");
    if (with_checkpoint) sub->add_option("--checkpoint", common.checkpoint, "checkpoint file");
  };

  auto* synth = app.add_subcommand("synth-data", "generate the synthetic face set");
  add_common(synth, false);
  auto* flow = app.add_subcommand("extract-flow", "TV-L1 flow between frame pairs");
  add_common(flow, false);
  std::string frame_a, frame_b, pairs;
  flow->add_option("--frame-a", frame_a);
  flow->add_option("--frame-b", frame_b);
  flow->add_option("--pairs", pairs, "pairs.jsonl from synth-data");
  auto* train = app.add_subcommand("train", "train one fold");
  add_common(train, false);
  train->add_option("--iterations", common.iterations);
  auto* eval = app.add_subcommand("eval", "score a checkpoint on a held-out fold");
  add_common(eval, true);
  auto* vflow = app.add_subcommand("viz-flow", "ground-truth and predicted flow side by side");
  add_common(vflow, true);
  int sample = 0, au = 0;
  vflow->add_option("--sample", sample);
  auto* vinp = app.add_subcommand("viz-inpaint", "original, cropped and inpainted face");
  add_common(vinp, true);
  vinp->add_option("--sample", sample);
  vinp->add_option("--au", au);
  auto* vsim = app.add_subcommand("viz-similarity", "AU query cosine similarity heatmap");
  add_common(vsim, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (*synth) return cmd_synth(common);
    if (*flow) return cmd_extract_flow(common, frame_a, frame_b, pairs);
    if (*train) return cmd_train(common);
    if (*eval) return cmd_eval(common);
    if (*vflow) return cmd_viz_flow(common, sample);
    if (*vinp) return cmd_viz_inpaint(common, sample, au);
    if (*vsim) return cmd_viz_similarity(common);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kConfigError;
}
