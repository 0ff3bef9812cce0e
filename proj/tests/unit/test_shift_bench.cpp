#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "anyshift/errors.hpp"
#include "anyshift/kernels.hpp"
#include "anyshift/shift_bench.hpp"

using namespace anyshift;

namespace {

std::map<int, int> label_counts(const Dataset& ds) {
  std::map<int, int> c;
  for (const auto& ex : ds) ++c[ex.y];
  return c;
}

// Exact posterior over classes under the generative mixture.
int bayes_predict(const BaseWorld& w, const RowVector& x) {
  int best = 0;
  double best_lp = -1e300;
  for (int c = 0; c < w.n_classes(); ++c) {
    double m = -1e300;
    std::vector<double> lps;
    for (int s = 0; s < w.subpops(); ++s) {
      lps.push_back(-0.5 * (x - w.component_mean(c, s)).squaredNorm() / (w.params.noise_scale * w.params.noise_scale));
      m = std::max(m, lps.back());
    }
    double z = 0;
    for (double lp : lps) z += std::exp(lp - m);
    const double lp = m + std::log(z);
    if (lp > best_lp) {
      best_lp = lp;
      best = c;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("world is deterministic and respects separation") {
  const BaseWorld a = make_base_world(5), b = make_base_world(5), c = make_base_world(6);
  CHECK(a.means == b.means);
  CHECK(a.means != c.means);
  CHECK(a.means.rows() == 32);
  for (Index i = 0; i < a.means.rows(); ++i) {
    CHECK(a.means.row(i).norm() == doctest::Approx(4.0));
    for (Index j = i + 1; j < a.means.rows(); ++j) CHECK((a.means.row(i) - a.means.row(j)).norm() >= 2.0);
  }
}

TEST_CASE("sampling is deterministic in the seed") {
  const BaseWorld w = make_base_world(5);
  const auto task = apply_shift(w, ShiftSpec::identity());
  const Dataset a = sample_dataset(w, task.train, 50, 3), b = sample_dataset(w, task.train, 50, 3);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].x == b[i].x);
  CHECK(sample_dataset(w, task.train, 50, 4)[0].x != a[0].x);
}

TEST_CASE("bayes classifier beats chance by a wide margin") {
  const BaseWorld w = make_base_world(7);
  const auto task = apply_shift(w, ShiftSpec::identity());
  const Dataset ds = sample_dataset(w, task.test, 2000, 1);
  int hit = 0;
  for (const auto& ex : ds) hit += bayes_predict(w, ex.x) == ex.y;
  CHECK(static_cast<double>(hit) / ds.size() >= 3.0 / w.n_classes());
}

TEST_CASE("label weights are realized as binomial frequencies") {
  const BaseWorld w = make_base_world(8);
  const std::vector<double> weights{1, 2, 3, 4, 1, 1, 1, 1};
  const auto task = apply_shift(w, ShiftSpec::label({6, 7}, weights));
  const int n = 20000;
  const auto counts = label_counts(sample_dataset(w, task.train, n, 2));
  double total = 0;
  for (int c = 0; c < 6; ++c) total += weights[c];
  for (int c = 0; c < 8; ++c) {
    const double p = c < 6 ? weights[c] / total : 0.0;
    const int k = counts.count(c) ? counts.at(c) : 0;
    if (p == 0.0) {
      CHECK(k == 0);
    } else {
      CHECK(std::abs(k - n * p) <= 4.0 * std::sqrt(n * p * (1 - p)));
    }
  }
  // the test side keeps the uniform marginal over every class
  CHECK(label_counts(sample_dataset(w, task.test, 800, 3)).size() == 8);
  CHECK(task.new_classes() == std::vector<int>{6, 7});
}

TEST_CASE("identity shift stays inside the noise bounds") {
  const BaseWorld w = make_base_world(9);
  const auto task = apply_shift(w, ShiftSpec::identity());
  const auto d = diagnose_shift(sample_dataset(w, task.train, 3000, 1), sample_dataset(w, task.test, 3000, 2));
  CHECK(d.label_marginal_tv <= d.label_tv_noise_bound);
  CHECK(d.input_mean_shift <= d.input_mean_noise_bound);
}

TEST_CASE("label tv matches a brute-force count") {
  const BaseWorld w = make_base_world(9);
  const auto task = apply_shift(w, ShiftSpec::label({0, 1, 2}, {}));
  const Dataset tr = sample_dataset(w, task.train, 500, 1), te = sample_dataset(w, task.test, 700, 2);
  const auto a = label_counts(tr), b = label_counts(te);
  double tv = 0;
  for (int c = 0; c < 8; ++c) {
    const double pa = a.count(c) ? a.at(c) / 500.0 : 0.0;
    const double pb = b.count(c) ? b.at(c) / 700.0 : 0.0;
    tv += 0.5 * std::abs(pa - pb);
  }
  CHECK(diagnose_shift(tr, te).label_marginal_tv == doctest::Approx(tv).epsilon(1e-12));
}

TEST_CASE("disjoint label supports give tv one") {
  Dataset a(3), b(2);
  for (auto& ex : a) ex = {RowVector::Zero(2), 0, 0, 0};
  for (auto& ex : b) ex = {RowVector::Zero(2), 1, 0, 0};
  CHECK(diagnose_shift(a, b).label_marginal_tv == doctest::Approx(1.0));
}

TEST_CASE("covariate map is an orthogonal rotation plus bias") {
  const Matrix r = planar_rotation(6, 0.4, 3);
  CHECK((r * r.transpose() - Matrix::Identity(6, 6)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(r.determinant() == doctest::Approx(1.0));
  CHECK(planar_rotation(6, 0.0, 3).isIdentity(1e-12));
  const BaseWorld w = make_base_world(10);
  const auto task = apply_shift(w, ShiftSpec::covariate(4, 0.5, 1.5, 0.0));
  CHECK(task.test.transformed);
  CHECK_FALSE(task.train.transformed);
  CHECK(task.test.bias.norm() == doctest::Approx(1.5));
  CHECK(task.test.rotation == planar_rotation(64, 0.5, 4));
}

TEST_CASE("covariate shift transports p(y|x) intact") {
  // undoing the map recovers inputs the untouched Bayes rule classifies as well as unshifted ones
  const BaseWorld w = make_base_world(10);
  const auto task = apply_shift(w, ShiftSpec::covariate(4, 0.5, 1.5, 0.0));
  const Dataset plain = sample_dataset(w, apply_shift(w, ShiftSpec::identity()).test, 1500, 5);
  const Dataset moved = sample_dataset(w, task.test, 1500, 6);
  int hit_plain = 0, hit_undone = 0, hit_raw = 0;
  for (const auto& ex : plain) hit_plain += bayes_predict(w, ex.x) == ex.y;
  for (const auto& ex : moved) {
    const RowVector undone = (ex.x - task.test.bias) * task.test.rotation;
    hit_undone += bayes_predict(w, undone) == ex.y;
    hit_raw += bayes_predict(w, ex.x) == ex.y;
  }
  const double se = std::sqrt(0.25 / 1500.0);
  CHECK(std::abs(hit_plain - hit_undone) / 1500.0 <= 4.0 * std::sqrt(2.0) * se);
  CHECK(hit_raw < hit_undone);
}

TEST_CASE("both-sided covariate moves train and test alike") {
  const BaseWorld w = make_base_world(10);
  const auto task = apply_shift(w, ShiftSpec::covariate(4, 0.5, 1.5, 0.0, true));
  CHECK(task.train.transformed);
  CHECK(task.test.transformed);
  CHECK(task.train.rotation == task.test.rotation);
}

TEST_CASE("concept shift relabels to superclasses") {
  const BaseWorld w = make_base_world(11);
  const auto task = apply_shift(w, ShiftSpec::concept_shift());
  CHECK(task.test.superclass_labels);
  const Dataset ds = sample_dataset(w, task.test, 400, 1);
  std::set<int> ys;
  for (const auto& ex : ds) ys.insert(ex.y);
  CHECK(static_cast<int>(ys.size()) == w.n_superclasses());
}

TEST_CASE("conditional shift keeps labels and moves class-conditional inputs") {
  const BaseWorld w = make_base_world(12);
  const auto task = apply_shift(w, ShiftSpec::conditional({0, 1}, {2, 3}));
  const Dataset tr = sample_dataset(w, task.train, 4000, 1), te = sample_dataset(w, task.test, 4000, 2);
  for (const auto& ex : tr) CHECK(ex.subpop < 2);
  for (const auto& ex : te) CHECK(ex.subpop >= 2);
  const auto d = diagnose_shift(tr, te);
  CHECK(d.label_marginal_tv <= d.label_tv_noise_bound);
  for (const auto& [c, s] : d.per_class_shift) CHECK(s > d.per_class_noise_bound.at(c));
}

TEST_CASE("joint shift realizes both diagnostics") {
  const BaseWorld w = make_base_world(13);
  const auto task = apply_shift(w, ShiftSpec::joint({ShiftSpec::covariate(17, 0.5, 1.0, 0.0), ShiftSpec::label({4, 5, 6, 7})}));
  const auto d = diagnose_shift(sample_dataset(w, task.train, 2000, 1), sample_dataset(w, task.test, 2000, 2));
  CHECK(d.label_marginal_tv > d.label_tv_noise_bound);
  CHECK(d.input_mean_shift > d.input_mean_noise_bound);
}

TEST_CASE("invalid specs are rejected") {
  const BaseWorld w = make_base_world(14);
  CHECK_THROWS_AS(apply_shift(w, ShiftSpec::label({}, {0, 0, 0, 0, 0, 0, 0, 0})), ConfigError);
  CHECK_THROWS_AS(apply_shift(w, ShiftSpec::label({}, {-1, 1, 1, 1, 1, 1, 1, 1})), ConfigError);
  CHECK_THROWS_AS(apply_shift(w, ShiftSpec::conditional({0, 1}, {1, 2})), ConfigError);
  CHECK_THROWS_AS(apply_shift(w, ShiftSpec::conditional({}, {1})), ConfigError);
  CHECK_THROWS_AS(apply_shift(w, ShiftSpec::joint({})), ConfigError);
  CHECK_THROWS_AS(apply_shift(w, ShiftSpec::label({0, 1, 2, 3, 4, 5, 6, 7})), ConfigError);
  CHECK_THROWS_AS(shift_from_json(nlohmann::json{{"kind", "sideways"}}), ConfigError);
  CHECK_THROWS_AS(shift_from_json(nlohmann::json{{"kind", "covariate"}, {"apply_to", "train"}}), ConfigError);
}

TEST_CASE("shift specs round-trip through json") {
  const ShiftSpec s = ShiftSpec::joint({ShiftSpec::covariate(17, 0.5, 1.0, 0.1, true), ShiftSpec::label({4, 5}, {1, 2, 1, 1, 1, 1, 1, 1}),
                                        ShiftSpec::conditional({0}, {1}), ShiftSpec::concept_shift()});
  CHECK(to_json(shift_from_json(to_json(s))) == to_json(s));
}
