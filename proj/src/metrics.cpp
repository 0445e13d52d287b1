#include "wsrtl/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace wsrtl {

F1Report f1_per_au(const TensorF& probs, const TensorF& labels, double threshold) {
  if (probs.shape() != labels.shape() || probs.rank() != 2)
    throw std::invalid_argument("f1_per_au: probs and labels must both be [M, N]");
  const int m = probs.dim(0), n = probs.dim(1);
  F1Report r;
  r.tp.assign(static_cast<std::size_t>(n), 0);
  r.fp = r.tp;
  r.fn = r.tp;
  for (int i = 0; i < m; ++i)
    for (int k = 0; k < n; ++k) {
      const bool pred = probs.at(i, k) >= threshold, truth = labels.at(i, k) >= 0.5f;
      const auto kk = static_cast<std::size_t>(k);
      r.tp[kk] += pred && truth;
      r.fp[kk] += pred && !truth;
      r.fn[kk] += !pred && truth;
    }
  for (int k = 0; k < n; ++k) {
    const auto kk = static_cast<std::size_t>(k);
    const double tp = static_cast<double>(r.tp[kk]);
    const double p = tp + r.fp[kk] > 0 ? tp / (tp + r.fp[kk]) : 0.0;
    const double rc = tp + r.fn[kk] > 0 ? tp / (tp + r.fn[kk]) : 0.0;
    r.degenerate.push_back(p + rc == 0);
    r.f1.push_back(p + rc > 0 ? 2 * p * rc / (p + rc) : 0.0);
  }
  r.average = n > 0 ? std::accumulate(r.f1.begin(), r.f1.end(), 0.0) / n : 0.0;
  return r;
}

std::vector<Fold> subject_kfold(const std::vector<std::string>& subject_ids, int k, std::uint64_t seed) {
  const std::set<std::string> unique(subject_ids.begin(), subject_ids.end());
  std::vector<std::string> subjects(unique.begin(), unique.end());
  if (k < 2) throw std::invalid_argument("subject_kfold: k must be at least 2");
  if (static_cast<int>(subjects.size()) < k)
    throw std::invalid_argument("subject_kfold: " + std::to_string(subjects.size()) + " subjects for " +
                                std::to_string(k) + " folds");
  std::mt19937_64 rng(seed);
  for (std::size_t i = subjects.size(); i > 1; --i) std::swap(subjects[i - 1], subjects[rng() % i]);
  std::vector<Fold> folds(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    for (std::size_t f = 0; f < folds.size(); ++f)
      (f == i % folds.size() ? folds[f].test : folds[f].train).push_back(subjects[i]);
  }
  for (auto& f : folds) {
    std::sort(f.train.begin(), f.train.end());
    std::sort(f.test.begin(), f.test.end());
  }
  return folds;
}

Evaluation evaluate(const WsrtlModel<float>& model, const Dataset& samples, const AURuleTable& rules,
                    int batch_size) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty dataset");
  const int n = model.config().num_aus, crop = model.config().image_size;
  Evaluation e;
  e.probs = TensorF({static_cast<int>(samples.size()), n});
  e.labels = e.probs;
  NoGradGuard guard;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<int> idx;
    for (std::size_t i = start; i < std::min(samples.size(), start + static_cast<std::size_t>(batch_size)); ++i) {
      if (!samples[i].has_labels()) throw std::invalid_argument("evaluate: sample without labels");
      idx.push_back(static_cast<int>(i));
    }
    const Batch b = make_batch(samples, idx, rules, crop);
    const auto p = model.predict(Var<float>(b.images), b.centers, false);
    for (int r = 0; r < b.size(); ++r)
      for (int k = 0; k < n; ++k) {
        e.probs.at(idx[static_cast<std::size_t>(r)], k) = p.fused_probs.value().at(r, k);
        e.labels.at(idx[static_cast<std::size_t>(r)], k) = b.labels.at(r, k);
      }
  }
  e.report = f1_per_au(e.probs, e.labels);
  return e;
}

namespace {

std::string au_name(const std::vector<std::string>& names, int k) {
  return k < static_cast<int>(names.size()) && !names[static_cast<std::size_t>(k)].empty()
             ? names[static_cast<std::size_t>(k)]
             : "AU" + std::to_string(k);
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", 100 * v);
  return buf;
}

}  // namespace

std::string report_markdown(const F1Report& report, const std::vector<std::string>& au_names) {
  std::ostringstream os;
  os << "| AU | F1 (%) |\n|---|---|\n";
  for (int k = 0; k < report.num_aus(); ++k)
    os << "| " << au_name(au_names, k) << " | " << pct(report.f1[static_cast<std::size_t>(k)])
       << (report.degenerate[static_cast<std::size_t>(k)] ? " (P+R=0)" : "") << " |\n";
  os << "| Avg. | " << pct(report.average) << " |\n";
  return os.str();
}

std::string report_csv(const F1Report& report, const std::vector<std::string>& au_names) {
  std::ostringstream os;
  os << "au,f1,tp,fp,fn,degenerate\n";
  char buf[64];
  for (int k = 0; k < report.num_aus(); ++k) {
    const auto kk = static_cast<std::size_t>(k);
    std::snprintf(buf, sizeof(buf), "%.6f", report.f1[kk]);
    os << au_name(au_names, k) << ',' << buf << ',' << report.tp[kk] << ',' << report.fp[kk] << ','
       << report.fn[kk] << ',' << (report.degenerate[kk] ? 1 : 0) << '\n';
  }
  std::snprintf(buf, sizeof(buf), "%.6f", report.average);
  os << "Avg.," << buf << ",,,,\n";
  return os.str();
}

}  // namespace wsrtl
