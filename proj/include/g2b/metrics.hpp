#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "g2b/util.hpp"

namespace g2b {

// Accuracies are stored as exact counts and only converted to reals at
// report time, so identical runs produce bit-identical metrics.
struct Fraction {
  int64_t correct = 0;
  int64_t total = 0;

  double value() const {
    return total > 0 ? static_cast<double>(correct) / static_cast<double>(total)
                     : 0.0;
  }
  bool operator==(const Fraction&) const = default;
};

// Lower-triangular accuracy record: per_task[k][j] is the accuracy on
// round-j test classes measured after training round k (j <= k), overall[k]
// the accuracy over the union of all classes seen through round k.
struct AccuracyMatrix {
  std::vector<std::vector<Fraction>> per_task;
  std::vector<Fraction> overall;

  int rounds() const { return static_cast<int>(overall.size()); }

  void append_row(std::vector<Fraction> row, Fraction row_overall) {
    if (static_cast<int>(row.size()) != rounds() + 1)
      throw ConfigError(cat("accuracy row ", rounds(), " must have ",
                            rounds() + 1, " entries, got ", row.size()));
    per_task.push_back(std::move(row));
    overall.push_back(row_overall);
  }

  // a[k][j], zero-based; j > k is a protocol violation, not a zero.
  const Fraction& at(int k, int j) const {
    if (k < 0 || k >= rounds() || j < 0 || j > k)
      throw ConfigError(cat("accuracy matrix: a[", k, "][", j,
                            "] is outside the lower triangle"));
    return per_task[k][j];
  }

  void validate() const {
    if (per_task.size() != overall.size())
      throw ConfigError("accuracy matrix: ragged rows");
    for (int k = 0; k < rounds(); ++k) {
      if (static_cast<int>(per_task[k].size()) != k + 1)
        throw ConfigError(cat("accuracy matrix: row ", k, " has ",
                              per_task[k].size(), " entries"));
      int64_t correct = 0, total = 0;
      for (const auto& f : per_task[k]) {
        if (f.correct < 0 || f.correct > f.total)
          throw ConfigError("accuracy matrix: entry outside [0,1]");
        correct += f.correct;
        total += f.total;
      }
      if (overall[k].total > 0 &&
          (correct != overall[k].correct || total != overall[k].total))
        throw ConfigError(cat("accuracy matrix: overall[", k,
                              "] inconsistent with its row"));
    }
  }
};

inline double avg_accuracy(const AccuracyMatrix& m) {
  if (m.rounds() < 1) throw ConfigError("avg_accuracy: empty matrix");
  double s = 0;
  for (const auto& f : m.overall) s += f.value();
  return s / static_cast<double>(m.rounds());
}

inline double last_accuracy(const AccuracyMatrix& m) {
  if (m.rounds() < 1) throw ConfigError("last_accuracy: empty matrix");
  return m.overall.back().value();
}

// Forgetting measure F_k (k is a 1-based round index, k >= 2): mean over old
// tasks of the drop from the task's running-maximum accuracy to its round-k
// accuracy. Per-task terms are floored at zero so F_k >= 0 holds exactly and
// F_k == 0 iff no task ever dropped below its running maximum.
inline double forgetting_measure(const AccuracyMatrix& m, int k) {
  if (k < 2)
    throw ConfigError(cat("forgetting_measure: need k >= 2, got ", k));
  if (k > m.rounds())
    throw ConfigError(cat("forgetting_measure: k=", k, " exceeds ",
                          m.rounds(), " recorded rounds"));
  const int kk = k - 1;  // zero-based final round
  double sum = 0;
  for (int j = 0; j < kk; ++j) {
    double run_max = 0;
    for (int l = j; l < kk; ++l) run_max = std::max(run_max, m.at(l, j).value());
    sum += std::max(0.0, run_max - m.at(kk, j).value());
  }
  return sum / static_cast<double>(kk);
}

// Mean/stddev (population) per block of per-sample mask sparsities.
struct SparsitySummary {
  std::vector<double> mean;
  std::vector<double> stddev;

  size_t blocks() const { return mean.size(); }
};

inline SparsitySummary sparsity_report(
    const std::vector<std::vector<double>>& per_block_observations) {
  SparsitySummary out;
  for (const auto& obs : per_block_observations) {
    if (obs.empty()) {
      out.mean.push_back(0.0);
      out.stddev.push_back(0.0);
      continue;
    }
    double m = 0;
    for (double x : obs) m += x;
    m /= static_cast<double>(obs.size());
    double v = 0;
    for (double x : obs) v += (x - m) * (x - m);
    v /= static_cast<double>(obs.size());
    out.mean.push_back(m);
    out.stddev.push_back(std::sqrt(v));
  }
  return out;
}

}  // namespace g2b
