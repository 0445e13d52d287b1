#include "wsrtl/trainer.hpp"

#include "wsrtl/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>

namespace wsrtl {

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (iterations < 0) fail("iterations must be non-negative");
  if (batch_size < 1) fail("batch_size must be positive");
  if (lambda1 < 0 || lambda1 > 1) fail("lambda1 must lie in [0, 1]");
  if (lambda2 < 0 || lambda_f < 0 || lambda_u < 0) fail("loss weights must be non-negative");
  if (!(temperature > 0) || temperature > 1) fail("temperature must lie in (0, 1]");
  if (!(alpha > 0)) fail("alpha must be positive");
  if (!(lr > 0)) fail("lr must be positive");
  if (flow_step < 1) fail("flow_step must be positive");
}

std::string TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["iterations"] = iterations;
  j["batch_size"] = batch_size;
  j["lambda1"] = lambda1;
  j["lambda2"] = lambda2;
  j["lambda_f"] = lambda_f;
  j["lambda_u"] = lambda_u;
  j["temperature"] = temperature;
  j["alpha"] = alpha;
  j["lr"] = lr;
  j["flow_step"] = flow_step;
  j["seed"] = seed;
  j["augment"] = augment;
  j["use_semi"] = use_semi;
  j["use_roii"] = use_roii;
  j["use_ofe"] = use_ofe;
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  TrainConfig c;
  c.iterations = j.value("iterations", c.iterations);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lambda1 = j.value("lambda1", c.lambda1);
  c.lambda2 = j.value("lambda2", c.lambda2);
  c.lambda_f = j.value("lambda_f", c.lambda_f);
  c.lambda_u = j.value("lambda_u", c.lambda_u);
  c.temperature = j.value("temperature", c.temperature);
  c.alpha = j.value("alpha", c.alpha);
  c.lr = j.value("lr", c.lr);
  c.flow_step = j.value("flow_step", c.flow_step);
  c.seed = j.value("seed", c.seed);
  c.augment = j.value("augment", c.augment);
  c.use_semi = j.value("use_semi", c.use_semi);
  c.use_roii = j.value("use_roii", c.use_roii);
  c.use_ofe = j.value("use_ofe", c.use_ofe);
  return c;
}

template <typename Scalar>
Var<Scalar> masked_supervised_loss(const Var<Scalar>& probs, const Tensor<Scalar>& labels, const Tensor<Scalar>& mask,
                                   int* all_masked) {
  if (!mask.empty() && (mask.array() == Scalar(0)).all() && all_masked) ++*all_masked;
  return ops::bce(probs, labels, mask);
}

template Var<float> masked_supervised_loss<float>(const Var<float>&, const Tensor<float>&, const Tensor<float>&, int*);
template Var<double> masked_supervised_loss<double>(const Var<double>&, const Tensor<double>&, const Tensor<double>&,
                                                    int*);

namespace {

TensorF select_rows(const TensorF& t, const std::vector<int>& rows) {
  return ops::select0(ops::constant(t), rows).value();
}

std::vector<int> range(int begin, int end) {
  std::vector<int> r;
  for (int i = begin; i < end; ++i) r.push_back(i);
  return r;
}

void check(const LossReport& report, const char* name, double value) {
  if (!std::isfinite(value)) {
    std::ostringstream os;
    os << "non-finite " << name << " at iteration " << report.iter << " (L_semi=" << report.semi
       << " L_Sup=" << report.sup << " L_D=" << report.d << " L_C=" << report.c << " L_G=" << report.g
       << " L_rec=" << report.rec << " L_F=" << report.f << ")";
    throw TrainingDiverged(os.str(), report);
  }
}

}  // namespace

Trainer::Trainer(WsrtlModel<float>& model, const TrainConfig& config, const Dataset& labeled,
                 const Dataset& unlabeled, const AURuleTable& rules)
    : model_(model), config_(config), rules_(rules), adam_(AdamConfig{config.lr}), rng_(config.seed) {
  config_.validate();
  if (labeled.empty()) throw std::invalid_argument("trainer: empty labeled set");
  if ((config_.use_roii || config_.use_ofe) && !model.config().training_heads)
    throw std::invalid_argument("trainer: auxiliary tasks need a model with training heads");
  if (rules.num_aus() != model.config().num_aus) throw std::invalid_argument("trainer: rule table AU count");
  const int crop = model.config().image_size;
  labeled_it_.emplace(labeled, rules, config_.batch_size, config_.seed + 1, config_.augment, crop);
  if (!unlabeled.empty())
    unlabeled_it_.emplace(unlabeled, rules, config_.batch_size, config_.seed + 2, config_.augment, crop);
}

LossReport Trainer::step() {
  const Batch l = labeled_it_->next();
  if (!unlabeled_it_) return train_step(l, nullptr);
  const Batch u = unlabeled_it_->next();
  return train_step(l, &u);
}

LossReport Trainer::train_step(const Batch& labeled, const Batch* unlabeled) {
  auto& store = model_.store();
  LossReport rep;
  rep.iter = ++iteration_;
  const int b = labeled.size();
  if (unlabeled && unlabeled->size() != b) throw std::invalid_argument("train_step: batch sizes differ");
  const bool with_u = unlabeled != nullptr;

  // Pseudo labels from one evaluation-mode pass before any update.
  TensorF guessed;
  if (with_u && (config_.use_semi || config_.use_roii))
    guessed = guess_labels(model_, unlabeled->images, unlabeled->centers, config_.temperature);

  if (with_u && config_.use_semi) {
    const MixedBatch mixed = mixmatch(labeled.images, labeled.labels, labeled.centers, unlabeled->images, guessed,
                                      unlabeled->centers, config_.alpha, rng_);
    store.zero_grad();
    const auto probs = model_.predict(Var<float>(mixed.images), mixed.centers, true).fused_probs;
    const auto loss = semi_loss(ops::slice0(probs, 0, b), select_rows(mixed.targets, range(0, b)),
                                ops::slice0(probs, b, 2 * b), select_rows(mixed.targets, range(b, 2 * b)),
                                config_.lambda_u);
    rep.semi = loss.total.item();
    check(rep, "L_semi", rep.semi);
    backward(loss.total);
    adam_.step(store, {ParamGroup::backbone});
    notify(Phase::semi);
  }

  // Joint batch: labeled rows (the second half cropped) then cropped
  // unlabeled rows.
  const bool roii = config_.use_roii;
  const int intact = roii ? b - b / 2 : b;
  std::vector<int> crop_rows = roii ? range(intact, b) : std::vector<int>{};
  TensorF images = labeled.images;
  std::vector<AUCenters> centers = labeled.centers;
  if (roii && with_u) {
    images = ops::concat0(std::vector{ops::constant(labeled.images), ops::constant(unlabeled->images)}).value();
    centers.insert(centers.end(), unlabeled->centers.begin(), unlabeled->centers.end());
    for (int i = 0; i < b; ++i) crop_rows.push_back(b + i);
  }
  std::optional<CropOutcome> crop;
  if (!crop_rows.empty()) {
    std::vector<AUCenters> crop_centers;
    for (int r : crop_rows) crop_centers.push_back(centers[static_cast<std::size_t>(r)]);
    crop = crop_random_au(select_rows(images, crop_rows), crop_centers, model_.config().patch_size, rng_);
    for (std::size_t i = 0; i < crop_rows.size(); ++i) {
      const int r = crop_rows[i], au = crop->au[i];
      crop->target[i] = r < b ? labeled.labels.at(r, au) : (guessed.at(r - b, au) >= 0.5f ? 1.f : 0.f);
      const Eigen::Index plane = images.size() / images.dim(0);
      images.array().segment(r * plane, plane) =
          crop->cropped.array().segment(static_cast<Eigen::Index>(i) * plane, plane);
    }
  }

  store.zero_grad();
  const auto fwd = model_.forward(Var<float>(images), centers, true);
  TensorF mask({b, labeled.labels.dim(1)}, 1.f);
  if (crop)
    for (std::size_t i = 0; i < crop_rows.size(); ++i)
      if (crop_rows[i] < b) mask.at(crop_rows[i], crop->au[i]) = 0.f;
  auto total = masked_supervised_loss(ops::slice0(fwd.prediction.fused_probs, 0, b), labeled.labels, mask,
                                      &all_masked_);
  rep.sup = total.item();
  check(rep, "L_Sup", rep.sup);

  if (crop) {
    const int m = crop->size();
    std::vector<int> au(crop->au.begin(), crop->au.end());
    auto left = ops::gather_tokens(ops::select0(fwd.relation.left, crop_rows), au);
    auto right = ops::gather_tokens(ops::select0(fwd.relation.right, crop_rows), au);
    const auto fake = model_.generate(ops::concat0(std::vector{left, right}));
    const auto real = ops::constant(crop->patches);
    TensorF targets({2 * m});
    for (int i = 0; i < m; ++i) targets[i] = targets[m + i] = crop->target[static_cast<std::size_t>(i)];

    // D step on detached fakes.
    store.zero_grad();
    const auto l_d = discriminator_loss(adversarial_losses(model_.discriminate(real),
                                                           model_.discriminate(fake.detach())).adv);
    rep.d = l_d.item();
    check(rep, "L_D", rep.d);
    backward(l_d);
    adam_.step(store, {ParamGroup::discriminator});
    notify(Phase::discriminator);

    // C step on real patches only.
    store.zero_grad();
    const auto l_c = ops::bce(model_.classify(real), targets, TensorF());
    rep.c = l_c.item();
    check(rep, "L_C", rep.c);
    backward(l_c);
    adam_.step(store, {ParamGroup::classifier});
    notify(Phase::classifier);

    // G loss through the updated, frozen D and C.
    store.set_trainable(ParamGroup::discriminator, false);
    store.set_trainable(ParamGroup::classifier, false);
    store.zero_grad();
    const auto adv = adversarial_losses(model_.discriminate(real), model_.discriminate(fake));
    const auto sem = semantic_losses(model_.classify(real), model_.classify(fake), targets);
    const auto rec = reconstruction_loss(real, fake);
    const auto l_g = generator_loss(adv.adv_g, rec, sem.generator, RoiiWeights{config_.lambda1, config_.lambda2});
    store.set_trainable(ParamGroup::discriminator, true);
    store.set_trainable(ParamGroup::classifier, true);
    rep.adv_g = adv.adv_g.item();
    rep.rec = rec.item();
    rep.c_g = sem.generator.item();
    rep.g = l_g.item();
    check(rep, "L_G", rep.g);
    total = ops::add(total, l_g);
  } else {
    store.zero_grad();
  }

  if (config_.use_ofe) {
    const FlowTarget target = flow_target(labeled.flow, model_.config().image_size / model_.config().flow_size());
    rep.flow_rows = static_cast<int>(target.rows.size());
    if (!target.rows.empty()) {
      const auto pred = model_.estimate_flow(ops::select0(fwd.pyramid.stages[3], target.rows));
      const auto l_f = flow_loss(pred, ops::constant(select_rows(target.flow, target.rows)));
      rep.f = l_f.item();
      check(rep, "L_F", rep.f);
      total = ops::add(total, ops::scale(l_f, static_cast<float>(config_.lambda_f)));
    }
  }

  rep.total = joint_loss({rep.sup, rep.d, rep.g, rep.f}, config_.lambda_f);
  backward(total);
  adam_.step(store, {ParamGroup::backbone, ParamGroup::generator, ParamGroup::flow});
  notify(Phase::joint);
  return rep;
}

void Trainer::save_checkpoint(const std::string& path) const {
  CheckpointState s;
  s.iteration = iteration_;
  s.all_masked = all_masked_;
  std::ostringstream rng;
  rng << rng_;
  s.rng_state = rng.str();
  s.train_config = config_.to_json();
  for (const auto* it : {&labeled_it_, &unlabeled_it_}) {
    if (!*it) {
      s.samplers.emplace_back();
      continue;
    }
    const auto& i = **it;
    s.samplers.push_back(SamplerState{true, i.rng_state(), i.cursor(), i.order(), i.epoch()});
  }
  write_checkpoint(path, model_, &adam_, s);
}

void Trainer::load_checkpoint(const std::string& path) {
  CheckpointState s;
  read_checkpoint(path, model_, &adam_, &s);
  iteration_ = s.iteration;
  all_masked_ = s.all_masked;
  std::istringstream rng(s.rng_state);
  rng >> rng_;
  std::optional<BatchIterator>* its[] = {&labeled_it_, &unlabeled_it_};
  for (std::size_t k = 0; k < 2 && k < s.samplers.size(); ++k) {
    const auto& st = s.samplers[k];
    if (st.present != its[k]->has_value()) throw std::runtime_error("checkpoint: sampler layout differs");
    if (st.present) (*its[k])->restore(st.rng_state, st.cursor, st.order, st.epoch);
  }
}

std::string log_line(const LossReport& r, std::optional<double> f1_avg) {
  nlohmann::ordered_json j;
  j["iter"] = r.iter;
  j["L"] = r.total;
  j["L_semi"] = r.semi;
  j["L_Sup"] = r.sup;
  j["L_D"] = r.d;
  j["L_G"] = r.g;
  j["L_F"] = r.f;
  if (f1_avg) j["f1_avg"] = *f1_avg;
  return j.dump();
}

FitResult fit(Trainer& trainer, const FitOptions& options) {
  FitResult result;
  std::ofstream log;
  if (!options.log_path.empty()) {
    log.open(options.log_path, trainer.iteration() > 0 ? std::ios::app : std::ios::trunc);
    if (!log) throw std::runtime_error("cannot open log " + options.log_path);
  }
  while (trainer.iteration() < trainer.config().iterations) {
    const LossReport rep = trainer.step();
    result.history.push_back(rep);
    std::optional<double> f1;
    if (options.eval_every > 0 && options.eval_set && rep.iter % options.eval_every == 0) {
      f1 = evaluate(trainer.model(), *options.eval_set, trainer.rules()).report.average;
      result.last_f1 = f1;
    }
    if (log.is_open()) {
      log << log_line(rep, f1) << '\n';
      log.flush();
      if (!log) throw std::runtime_error("log write failed");
    }
    if (options.on_step) options.on_step(rep);
    if (!options.checkpoint_path.empty() && options.checkpoint_every > 0 && rep.iter % options.checkpoint_every == 0)
      trainer.save_checkpoint(options.checkpoint_path);
    if (options.target_f1 > 0 && f1 && *f1 >= options.target_f1) {
      result.reached_target = true;
      break;
    }
  }
  if (!options.checkpoint_path.empty()) trainer.save_checkpoint(options.checkpoint_path);
  return result;
}

}  // namespace wsrtl
