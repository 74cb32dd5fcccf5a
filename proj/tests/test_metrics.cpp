#include <catch2/catch.hpp>

#include <random>

#include "g2b/metrics.hpp"

using namespace g2b;

namespace {

Fraction frac(int64_t c, int64_t t) { return Fraction{c, t}; }

// Builds a matrix from per-round overall values expressed over a fixed
// denominator, with single-task rows mirroring the overall.
AccuracyMatrix from_overall(const std::vector<double>& o, int64_t denom = 1000) {
  AccuracyMatrix m;
  for (size_t k = 0; k < o.size(); ++k) {
    std::vector<Fraction> row(k + 1);
    int64_t total_correct = static_cast<int64_t>(o[k] * denom * (k + 1) + 0.5);
    // spread correct counts over the row, last entry absorbs the remainder
    int64_t acc = 0;
    for (size_t j = 0; j + 1 < row.size(); ++j) {
      row[j] = frac(static_cast<int64_t>(o[k] * denom + 0.5), denom);
      acc += row[j].correct;
    }
    row.back() = frac(total_correct - acc, denom);
    m.append_row(row, frac(total_correct, denom * (k + 1)));
  }
  m.validate();
  return m;
}

}  // namespace

TEST_CASE("avg accuracy is the arithmetic mean of per-round overalls") {
  auto m = from_overall({0.9, 0.8, 0.7});
  REQUIRE(avg_accuracy(m) == Approx(0.8).margin(1e-9));
  REQUIRE(last_accuracy(m) == Approx(0.7).margin(1e-9));
}

TEST_CASE("single-round matrix has avg == last == o0") {
  auto m = from_overall({0.63});
  REQUIRE(avg_accuracy(m) == Approx(0.63).margin(1e-9));
  REQUIRE(last_accuracy(m) == avg_accuracy(m));
}

TEST_CASE("last accuracy never exceeds the per-round maximum") {
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> d(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> o;
    for (int k = 0; k < 6; ++k) o.push_back(d(rng));
    auto m = from_overall(o);
    double mx = 0;
    for (const auto& f : m.overall) mx = std::max(mx, f.value());
    REQUIRE(last_accuracy(m) <= mx);
  }
}

TEST_CASE("forgetting measure reproduces the hand example F_2 = 0.2") {
  AccuracyMatrix m;
  m.append_row({frac(9, 10)}, frac(9, 10));          // a[1][1] = 0.9
  m.append_row({frac(7, 10), frac(8, 10)}, frac(15, 20));  // a[2][1]=0.7, a[2][2]=0.8
  m.validate();
  REQUIRE(forgetting_measure(m, 2) == Approx(0.2).margin(1e-12));
}

TEST_CASE("a model that never changes has zero forgetting") {
  AccuracyMatrix m;
  m.append_row({frac(4, 5)}, frac(4, 5));
  m.append_row({frac(4, 5), frac(3, 5)}, frac(7, 10));
  m.append_row({frac(4, 5), frac(3, 5), frac(2, 5)}, frac(9, 15));
  REQUIRE(forgetting_measure(m, 3) == 0.0);
}

TEST_CASE("forgetting requires at least one old task") {
  auto m = from_overall({0.5});
  REQUIRE_THROWS_AS(forgetting_measure(m, 1), ConfigError);
  REQUIRE_THROWS_AS(forgetting_measure(m, 0), ConfigError);
}

TEST_CASE("forgetting only reads rounds up to k") {
  std::mt19937 rng(11);
  std::uniform_int_distribution<int64_t> c(0, 50);
  for (int trial = 0; trial < 30; ++trial) {
    AccuracyMatrix m;
    for (int k = 0; k < 6; ++k) {
      std::vector<Fraction> row;
      int64_t tot_c = 0;
      for (int j = 0; j <= k; ++j) {
        row.push_back(frac(c(rng), 50));
        tot_c += row.back().correct;
      }
      m.append_row(row, frac(tot_c, 50 * (k + 1)));
    }
    m.validate();
    const double f3 = forgetting_measure(m, 3);

    AccuracyMatrix prefix;
    for (int k = 0; k < 3; ++k)
      prefix.append_row(m.per_task[k], m.overall[k]);
    REQUIRE(forgetting_measure(prefix, 3) == f3);
  }
}

TEST_CASE("forgetting is nonnegative and zero iff no drop") {
  std::mt19937 rng(13);
  std::uniform_int_distribution<int64_t> c(0, 20);
  for (int trial = 0; trial < 200; ++trial) {
    AccuracyMatrix m;
    const int rounds = 2 + trial % 5;
    for (int k = 0; k < rounds; ++k) {
      std::vector<Fraction> row;
      int64_t tot = 0;
      for (int j = 0; j <= k; ++j) {
        row.push_back(frac(c(rng), 20));
        tot += row.back().correct;
      }
      m.append_row(row, frac(tot, 20 * (k + 1)));
    }
    const double f = forgetting_measure(m, rounds);
    REQUIRE(f >= 0.0);

    bool any_drop = false;
    for (int j = 0; j < rounds - 1; ++j) {
      double run_max = 0;
      for (int l = j; l < rounds - 1; ++l)
        run_max = std::max(run_max, m.at(l, j).value());
      if (m.at(rounds - 1, j).value() < run_max - 1e-12) any_drop = true;
    }
    REQUIRE((f == 0.0) == !any_drop);
  }
}

TEST_CASE("matrix rejects out-of-triangle access and ragged rows") {
  auto m = from_overall({0.5, 0.6});
  REQUIRE_THROWS_AS(m.at(0, 1), ConfigError);  // j > k must be absent
  REQUIRE_THROWS_AS(m.at(2, 0), ConfigError);
  REQUIRE_NOTHROW(m.at(1, 1));

  AccuracyMatrix bad;
  REQUIRE_THROWS_AS(bad.append_row({frac(1, 2), frac(1, 2)}, frac(1, 2)),
                    ConfigError);
}

TEST_CASE("overall consistency with row counts is validated") {
  AccuracyMatrix m;
  m.append_row({frac(5, 10)}, frac(5, 10));
  m.per_task.push_back({frac(5, 10), frac(5, 10)});
  m.overall.push_back(frac(3, 20));  // inconsistent with 10/20
  REQUIRE_THROWS_AS(m.validate(), ConfigError);
}

TEST_CASE("sparsity report on forced all-ones masks is identically zero") {
  std::vector<std::vector<double>> obs(3, std::vector<double>(40, 0.0));
  auto s = sparsity_report(obs);
  REQUIRE(s.blocks() == 3);
  for (double m : s.mean) REQUIRE(m == 0.0);
  for (double sd : s.stddev) REQUIRE(sd == 0.0);
}

TEST_CASE("sparsity report mean/std match a hand computation") {
  std::vector<std::vector<double>> obs{{0.2, 0.4, 0.6}};
  auto s = sparsity_report(obs);
  REQUIRE(s.mean[0] == Approx(0.4).margin(1e-12));
  REQUIRE(s.stddev[0] == Approx(std::sqrt(0.08 / 3.0)).margin(1e-12));
}
