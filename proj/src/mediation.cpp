#include "cfaudit/mediation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "cfaudit/common.hpp"

namespace cfaudit::mediation {

using nlohmann::json;

// ============================================================== lasso

namespace {

double largest_eigenvalue_of_gram(const Eigen::MatrixXd& X) {
  // power iteration on [X 1]^T [X 1] / n
  const auto n = static_cast<double>(X.rows());
  Eigen::VectorXd v = Eigen::VectorXd::Ones(X.cols() + 1).normalized();
  double lambda = 0.0;
  for (int it = 0; it < 100; ++it) {
    Eigen::VectorXd Av = X * v.head(X.cols());
    Av.array() += v(X.cols());
    Eigen::VectorXd next(X.cols() + 1);
    next.head(X.cols()) = X.transpose() * Av;
    next(X.cols()) = Av.sum();
    next /= n;
    const double norm = next.norm();
    if (norm == 0.0) return 0.0;
    const double change = std::abs(norm - lambda);
    lambda = norm;
    v = next / norm;
    if (change < 1e-10 * lambda) break;
  }
  return lambda;
}

Eigen::VectorXd sigmoid(const Eigen::VectorXd& z) {
  return z.unaryExpr([](double t) { return t >= 0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t)); });
}

double soft_threshold(double v, double t) {
  if (v > t) return v - t;
  if (v < -t) return v + t;
  return 0.0;
}

}  // namespace

LassoFit fit_lasso_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double lambda,
                            const LassoOptions& options, const LassoFit* warm) {
  if (X.rows() != y.size() || X.rows() == 0) throw ArgumentError("lasso needs matching, non-empty X and y");
  if (lambda < 0) throw ArgumentError("lasso weight must be non-negative");
  const auto n = static_cast<double>(X.rows());
  const double L = std::max(1e-12, 1.01 * largest_eigenvalue_of_gram(X) / 4.0);
  const double step = 1.0 / L;

  LassoFit fit;
  fit.coefficients = Eigen::VectorXd::Zero(X.cols());
  if (warm && warm->coefficients.size() == X.cols()) {
    fit.coefficients = warm->coefficients;
    fit.bias = warm->bias;
  } else {
    const double p = std::clamp(y.mean(), 1e-6, 1.0 - 1e-6);
    fit.bias = std::log(p / (1.0 - p));
  }

  Eigen::VectorXd w = fit.coefficients, w_prev = w, yw = w;
  double b = fit.bias, b_prev = b, yb = b;
  double t = 1.0;
  for (int it = 1; it <= options.max_iterations; ++it) {
    Eigen::VectorXd z = X * yw;
    z.array() += yb;
    const Eigen::VectorXd r = sigmoid(z) - y;
    const Eigen::VectorXd grad_w = X.transpose() * r / n;
    const double grad_b = r.sum() / n;

    Eigen::VectorXd w_next = yw - step * grad_w;
    for (Eigen::Index j = 0; j < w_next.size(); ++j) w_next(j) = soft_threshold(w_next(j), step * lambda);
    const double b_next = yb - step * grad_b;

    double change = std::abs(b_next - b);
    if (w.size() > 0) change = std::max(change, (w_next - w).cwiseAbs().maxCoeff());
    w_prev = w;
    b_prev = b;
    w = w_next;
    b = b_next;
    fit.iterations = it;
    if (change < options.tolerance) {
      fit.converged = true;
      break;
    }
    // adaptive restart keeps the momentum from overshooting
    const double direction = (yw - w).dot(w - w_prev) + (yb - b) * (b - b_prev);
    if (direction > 0) t = 1.0;
    const double t_next = (1.0 + std::sqrt(1.0 + 4.0 * t * t)) / 2.0;
    const double beta = (t - 1.0) / t_next;
    yw = w + beta * (w - w_prev);
    yb = b + beta * (b - b_prev);
    t = t_next;
  }
  fit.coefficients = w;
  fit.bias = b;
  return fit;
}

double lambda_max(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  if (X.rows() == 0 || X.cols() == 0) return 0.0;
  const Eigen::VectorXd centred = y.array() - y.mean();
  return (X.transpose() * centred).cwiseAbs().maxCoeff() / static_cast<double>(X.rows());
}

std::vector<double> lambda_grid(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, int count, double ratio) {
  if (count < 1) throw ArgumentError("lambda grid needs at least one value");
  if (!(ratio > 0 && ratio <= 1)) throw ArgumentError("lambda grid ratio must lie in (0, 1]");
  const double top = std::max(lambda_max(X, y), 1e-8);
  std::vector<double> grid;
  for (int i = 0; i < count; ++i) {
    const double e = count == 1 ? 0.0 : std::log10(ratio) * i / (count - 1);
    grid.push_back(top * std::pow(10.0, e));
  }
  return grid;
}

// ============================================================== probes

Eigen::VectorXd ConceptProbe::logits(const Eigen::MatrixXd& units) const {
  if (units.cols() != static_cast<Eigen::Index>(coefficients.size()))
    throw ArgumentError("probe expects " + std::to_string(coefficients.size()) + " units");
  const Eigen::Map<const Eigen::VectorXd> v(coefficients.data(), static_cast<Eigen::Index>(coefficients.size()));
  Eigen::VectorXd out = units * v;
  out.array() += bias;
  return out;
}

json ConceptProbe::to_json() const {
  return {{"concept", concept_name}, {"coefficients", coefficients}, {"bias", bias},
          {"lambda", lambda},        {"support", support},           {"sparsity", sparsity},
          {"auc", auc},              {"recall", recall},             {"sample_count", sample_count},
          {"lambda_path", lambda_path}, {"support_path", support_path}};
}

ConceptProbe ConceptProbe::from_json(const json& j) {
  ConceptProbe p;
  p.concept_name = j.at("concept").get<std::string>();
  p.coefficients = j.at("coefficients").get<std::vector<double>>();
  p.bias = j.at("bias").get<double>();
  p.lambda = j.value("lambda", 0.0);
  p.support = j.at("support").get<std::vector<std::int64_t>>();
  p.sparsity = j.value("sparsity", 0.0);
  p.auc = j.value("auc", 0.5);
  p.recall = j.value("recall", 0.0);
  p.sample_count = j.value("sample_count", std::int64_t{0});
  p.lambda_path = j.value("lambda_path", std::vector<double>{});
  p.support_path = j.value("support_path", std::vector<std::int64_t>{});
  return p;
}

namespace {

struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;  // 0 marks constant columns

  explicit Standardizer(const Eigen::MatrixXd& X) {
    mean = X.colwise().mean();
    scale = ((X.rowwise() - mean.transpose()).array().square().colwise().sum() / static_cast<double>(X.rows()))
                .sqrt()
                .matrix()
                .transpose();
  }
  Eigen::MatrixXd apply(const Eigen::MatrixXd& X) const {
    Eigen::MatrixXd Z = X.rowwise() - mean.transpose();
    for (Eigen::Index j = 0; j < Z.cols(); ++j) Z.col(j) = scale(j) > 1e-12 ? Eigen::VectorXd(Z.col(j) / scale(j))
                                                                             : Eigen::VectorXd::Zero(Z.rows());
    return Z;
  }
};

Eigen::MatrixXd rows_of(const Eigen::MatrixXd& X, const std::vector<Eigen::Index>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), X.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = X.row(rows[i]);
  return out;
}

Eigen::VectorXd rows_of(const Eigen::VectorXd& y, const std::vector<Eigen::Index>& rows) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) out(static_cast<Eigen::Index>(i)) = y(rows[i]);
  return out;
}

// Fits along the grid (descending lambda, warm-started) on standardised training rows.
std::vector<LassoFit> fit_path(const Eigen::MatrixXd& Z, const Eigen::VectorXd& y, const std::vector<double>& lambdas,
                               const LassoOptions& options) {
  std::vector<LassoFit> path;
  for (double lambda : lambdas) path.push_back(fit_lasso_logistic(Z, y, lambda, options, path.empty() ? nullptr : &path.back()));
  return path;
}

// Stratified fold index per row.
std::vector<int> stratified_folds(const Eigen::VectorXd& y, int folds, std::uint64_t seed) {
  std::vector<int> fold(static_cast<std::size_t>(y.size()));
  std::mt19937_64 rng(seed);
  for (double cls : {0.0, 1.0}) {
    std::vector<std::size_t> members;
    for (Eigen::Index i = 0; i < y.size(); ++i)
      if (y(i) == cls) members.push_back(static_cast<std::size_t>(i));
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t k = 0; k < members.size(); ++k) fold[members[k]] = static_cast<int>(k % static_cast<std::size_t>(folds));
  }
  return fold;
}

int fold_count(const Eigen::VectorXd& y, int requested) {
  const auto positives = static_cast<int>(y.sum());
  const auto negatives = static_cast<int>(y.size()) - positives;
  return std::max(2, std::min({requested, positives, negatives}));
}

// One-standard-error rule on the held-out error rate: the largest lambda whose mean
// error is within one fold standard error of the best.
std::size_t select_lambda(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const std::vector<double>& lambdas,
                          int folds, std::uint64_t seed, const LassoOptions& options) {
  if (lambdas.size() == 1) return 0;
  const int k = fold_count(y, folds);
  const auto fold = stratified_folds(y, k, seed);
  std::vector<std::vector<double>> errors(lambdas.size());
  for (int f = 0; f < k; ++f) {
    std::vector<Eigen::Index> train, test;
    for (Eigen::Index i = 0; i < y.size(); ++i) (fold[static_cast<std::size_t>(i)] == f ? test : train).push_back(i);
    const auto Xtr = rows_of(X, train);
    const Standardizer s(Xtr);
    const auto path = fit_path(s.apply(Xtr), rows_of(y, train), lambdas, options);
    const auto Zte = s.apply(rows_of(X, test));
    const auto yte = rows_of(y, test);
    for (std::size_t l = 0; l < lambdas.size(); ++l) {
      Eigen::VectorXd z = Zte * path[l].coefficients;
      z.array() += path[l].bias;
      double wrong = 0.0;
      for (Eigen::Index i = 0; i < z.size(); ++i) wrong += (z(i) >= 0.0) != (yte(i) > 0.5) ? 1.0 : 0.0;
      errors[l].push_back(wrong / static_cast<double>(z.size()));
    }
  }
  std::vector<EffectSummary> summary;
  for (const auto& e : errors) summary.push_back(summarize(e));
  std::size_t best = 0;
  for (std::size_t l = 1; l < lambdas.size(); ++l)
    if (summary[l].mean < summary[best].mean - 1e-12) best = l;
  const double limit = summary[best].mean + summary[best].standard_error + 1e-12;
  for (std::size_t l = 0; l < best; ++l)
    if (summary[l].mean <= limit) return l;
  return best;
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

ConceptProbe fit_probe(const Eigen::MatrixXd& units, const std::vector<std::int8_t>& labels, const std::string& name,
                       const ProbeOptions& options) {
  if (units.rows() != static_cast<Eigen::Index>(labels.size()))
    throw ArgumentError("one concept label per unit row required");
  if (options.folds < 2) throw ArgumentError("nested cross-validation needs at least 2 folds");
  std::vector<Eigen::Index> keep;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == 0 || labels[i] == 1) keep.push_back(static_cast<Eigen::Index>(i));
  const auto X = rows_of(units, keep);
  Eigen::VectorXd y(static_cast<Eigen::Index>(keep.size()));
  for (std::size_t i = 0; i < keep.size(); ++i) y(static_cast<Eigen::Index>(i)) = labels[static_cast<std::size_t>(keep[i])];
  const double positives = y.sum();
  if (positives < 1 || positives > static_cast<double>(y.size()) - 1)
    throw ArgumentError("concept '" + name + "' needs both positive and negative labels");
  if (positives < 2 || positives > static_cast<double>(y.size()) - 2)
    throw ArgumentError("concept '" + name + "' needs at least two examples of each label for cross-validation");

  const Standardizer full(X);
  const auto Z = full.apply(X);
  auto lambdas = options.lambdas.empty() ? lambda_grid(Z, y, options.grid_size, options.grid_ratio) : options.lambdas;
  std::sort(lambdas.begin(), lambdas.end(), std::greater<>());

  // Outer loop: each fold picks lambda by an inner CV on its own training part.
  const int outer = fold_count(y, options.folds);
  const auto outer_fold = stratified_folds(y, outer, options.seed);
  std::vector<double> fold_aucs;
  std::int64_t tp = 0;
  for (int f = 0; f < outer; ++f) {
    std::vector<Eigen::Index> train, test;
    for (Eigen::Index i = 0; i < y.size(); ++i) (outer_fold[static_cast<std::size_t>(i)] == f ? test : train).push_back(i);
    const auto Xtr = rows_of(X, train);
    const auto ytr = rows_of(y, train);
    const auto chosen = select_lambda(Xtr, ytr, lambdas, options.folds, options.seed + 1 + static_cast<std::uint64_t>(f),
                                      options.lasso);
    const Standardizer s(Xtr);
    const auto path = fit_path(s.apply(Xtr), ytr, std::vector<double>(lambdas.begin(), lambdas.begin() + static_cast<long>(chosen) + 1),
                               options.lasso);
    Eigen::VectorXd z = s.apply(rows_of(X, test)) * path.back().coefficients;
    z.array() += path.back().bias;
    std::vector<double> neg, pos;
    for (std::size_t i = 0; i < test.size(); ++i) {
      if (y(test[i]) > 0.5) {
        pos.push_back(z(static_cast<Eigen::Index>(i)));
        if (z(static_cast<Eigen::Index>(i)) >= 0.0) ++tp;
      } else {
        neg.push_back(z(static_cast<Eigen::Index>(i)));
      }
    }
    if (!neg.empty() && !pos.empty()) fold_aucs.push_back(metrics::rank_auc(neg, pos));
  }

  const auto chosen = select_lambda(X, y, lambdas, options.folds, options.seed, options.lasso);
  const auto path = fit_path(Z, y, lambdas, options.lasso);
  const auto& best = path[chosen];

  ConceptProbe probe;
  probe.concept_name = name;
  probe.lambda = lambdas[chosen];
  probe.lambda_path = lambdas;
  for (const auto& fit : path) probe.support_path.push_back((fit.coefficients.array() != 0.0).count());
  Eigen::VectorXd v = Eigen::VectorXd::Zero(X.cols());
  double b = best.bias;
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    if (best.coefficients(j) == 0.0 || full.scale(j) <= 1e-12) continue;
    v(j) = best.coefficients(j) / full.scale(j);
    b -= v(j) * full.mean(j);
    probe.support.push_back(j);
  }
  probe.coefficients = to_std(v);
  probe.bias = b;
  probe.sparsity = X.cols() == 0 ? 0.0 : static_cast<double>(probe.support.size()) / static_cast<double>(X.cols());
  probe.auc = fold_aucs.empty() ? 0.5
                                : std::accumulate(fold_aucs.begin(), fold_aucs.end(), 0.0) /
                                      static_cast<double>(fold_aucs.size());
  probe.recall = static_cast<double>(tp) / positives;
  probe.sample_count = y.size();
  return probe;
}

Eigen::MatrixXd unit_matrix(const classifier::Classifier& model, const torch::Tensor& x) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> chunks;
  for (std::int64_t start = 0; start < x.size(0); start += 256)
    chunks.push_back(model.vectorize(model.phi1(x.slice(0, start, std::min(x.size(0), start + 256)))));
  const auto units = torch::cat(chunks).to(torch::kFloat64).contiguous();
  Eigen::MatrixXd out(units.size(0), units.size(1));
  const auto acc = units.accessor<double, 2>();
  for (std::int64_t i = 0; i < units.size(0); ++i)
    for (std::int64_t j = 0; j < units.size(1); ++j) out(i, j) = acc[i][j];
  return out;
}

ConceptProbe fit_concept_probe(const classifier::Classifier& model, const data::Dataset& data, std::size_t concept_index,
                               const ProbeOptions& options) {
  if (concept_index >= data.concept_names().size()) throw ArgumentError("concept index out of range");
  return fit_probe(unit_matrix(model, data.images()), data.concept_column(concept_index),
                   data.concept_names()[concept_index], options);
}

Eigen::MatrixXd concept_logits(const classifier::Classifier& model, const std::vector<ConceptProbe>& probes,
                               const torch::Tensor& x) {
  const auto units = unit_matrix(model, x);
  Eigen::MatrixXd w(units.rows(), static_cast<Eigen::Index>(probes.size()));
  for (std::size_t k = 0; k < probes.size(); ++k) w.col(static_cast<Eigen::Index>(k)) = probes[k].logits(units);
  return w;
}

double logit(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ArgumentError("logit needs a probability in (0, 1)");
  return std::log(p / (1.0 - p));
}

// ============================================================== effects

namespace {

std::vector<double> target_probabilities(const classifier::Classifier& model, const torch::Tensor& x,
                                         std::int64_t target) {
  torch::NoGradGuard no_grad;
  return metrics::to_vector(model.predict(x).select(1, target));
}

void check_pairs(const torch::Tensor& x, const torch::Tensor& x_prime) {
  if (x.sizes() != x_prime.sizes()) throw ArgumentError("factual and counterfactual batches differ in shape");
  if (x.size(0) == 0) throw ArgumentError("effects need at least one pair");
}

std::vector<double> ratios(const std::vector<double>& numerator, const std::vector<double>& factual, double eps) {
  std::vector<double> out(numerator.size());
  for (std::size_t i = 0; i < numerator.size(); ++i) out[i] = numerator[i] / std::max(factual[i], eps) - 1.0;
  return out;
}

// Phi2 of `base`'s activations with `units` overwritten by the donor's values.
std::vector<double> swapped(const classifier::Classifier& model, const std::vector<std::int64_t>& units,
                            const torch::Tensor& base, const torch::Tensor& donor, std::int64_t target) {
  torch::NoGradGuard no_grad;
  const auto values = classifier::unit_values(model, model.phi1(donor), units);
  return metrics::to_vector(classifier::intervene_forward(model, base, units, values).select(1, target));
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

std::vector<double> ate_samples(const classifier::Classifier& model, const torch::Tensor& x, const torch::Tensor& x_prime,
                                std::int64_t target_class, double eps) {
  check_pairs(x, x_prime);
  return ratios(target_probabilities(model, x_prime, target_class), target_probabilities(model, x, target_class), eps);
}

std::vector<double> direct_effect_samples(const classifier::Classifier& model, const std::vector<std::int64_t>& units,
                                          const torch::Tensor& x, const torch::Tensor& x_prime,
                                          std::int64_t target_class, double eps) {
  check_pairs(x, x_prime);
  return ratios(swapped(model, units, x_prime, x, target_class), target_probabilities(model, x, target_class), eps);
}

std::vector<double> indirect_effect_samples(const classifier::Classifier& model, const std::vector<std::int64_t>& units,
                                            const torch::Tensor& x, const torch::Tensor& x_prime,
                                            std::int64_t target_class, double eps) {
  check_pairs(x, x_prime);
  return ratios(swapped(model, units, x, x_prime, target_class), target_probabilities(model, x, target_class), eps);
}

double ate(const classifier::Classifier& model, const torch::Tensor& x, const torch::Tensor& x_prime,
           std::int64_t target_class, double eps) {
  return mean_of(ate_samples(model, x, x_prime, target_class, eps));
}

double direct_effect(const classifier::Classifier& model, const std::vector<std::int64_t>& units, const torch::Tensor& x,
                     const torch::Tensor& x_prime, std::int64_t target_class, double eps) {
  return mean_of(direct_effect_samples(model, units, x, x_prime, target_class, eps));
}

double indirect_effect(const classifier::Classifier& model, const std::vector<std::int64_t>& units,
                       const torch::Tensor& x, const torch::Tensor& x_prime, std::int64_t target_class, double eps) {
  return mean_of(indirect_effect_samples(model, units, x, x_prime, target_class, eps));
}

json EffectSummary::to_json() const { return {{"mean", mean}, {"standard_error", standard_error}, {"count", count}}; }

EffectSummary summarize(const std::vector<double>& samples) {
  EffectSummary s;
  s.count = static_cast<std::int64_t>(samples.size());
  if (samples.empty()) return s;
  s.mean = mean_of(samples);
  if (samples.size() > 1) {
    double ss = 0.0;
    for (double v : samples) ss += (v - s.mean) * (v - s.mean);
    s.standard_error = std::sqrt(ss / static_cast<double>(samples.size() - 1) / static_cast<double>(samples.size()));
  }
  return s;
}

json DirectionalEffects::to_json() const { return {{"ate", ate.to_json()}, {"de", de.to_json()}, {"ie", ie.to_json()}}; }

json ConceptEffects::to_json() const {
  return {{"concept", concept_name},         {"units", units},
          {"control", control},             {"pooled", pooled.to_json()},
          {"increase", increase.to_json()}, {"decrease", decrease.to_json()}};
}

json EffectReport::to_json() const {
  json list = json::array();
  for (const auto& c : concepts) list.push_back(c.to_json());
  return {{"sample_count", sample_count}, {"target_class", target_class}, {"concepts", list}, {"ranking", ranking}};
}

std::vector<std::int64_t> random_control_units(const std::vector<ConceptProbe>& probes, std::int64_t unit_count,
                                               std::uint64_t seed) {
  if (unit_count < 1) throw ArgumentError("unit count must be positive");
  std::set<std::int64_t> used;
  std::vector<std::size_t> sizes;
  for (const auto& p : probes) {
    used.insert(p.support.begin(), p.support.end());
    sizes.push_back(p.support.size());
  }
  std::size_t size = 1;
  if (!sizes.empty()) {
    std::sort(sizes.begin(), sizes.end());
    size = std::max<std::size_t>(1, sizes[sizes.size() / 2]);
  }
  std::vector<std::int64_t> pool;
  for (std::int64_t u = 0; u < unit_count; ++u)
    if (!used.count(u)) pool.push_back(u);
  if (pool.size() < size) {
    pool.resize(static_cast<std::size_t>(unit_count));
    std::iota(pool.begin(), pool.end(), 0);
  }
  size = std::min(size, pool.size());
  std::mt19937_64 rng(seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(size);
  std::sort(pool.begin(), pool.end());
  return pool;
}

namespace {

DirectionalEffects effects_for(const classifier::Classifier& model, const std::vector<std::int64_t>& units,
                               const torch::Tensor& x, const torch::Tensor& x_prime, std::int64_t target, double eps,
                               const std::vector<double>& ate_all) {
  DirectionalEffects e;
  e.ate = summarize(ate_all);
  e.de = summarize(direct_effect_samples(model, units, x, x_prime, target, eps));
  e.ie = summarize(indirect_effect_samples(model, units, x, x_prime, target, eps));
  return e;
}

}  // namespace

EffectReport rank_concepts(const classifier::Classifier& model, const std::vector<ConceptProbe>& probes,
                           const torch::Tensor& x, const torch::Tensor& x_prime, const RankOptions& options) {
  check_pairs(x, x_prime);
  const auto unit_count = model.unit_count();
  for (const auto& p : probes)
    if (static_cast<std::int64_t>(p.coefficients.size()) != unit_count)
      throw ArgumentError("probe '" + p.concept_name + "' was fitted on a different unit space");

  const auto fx = target_probabilities(model, x, options.target_class);
  std::vector<std::int64_t> up, down;
  for (std::size_t i = 0; i < fx.size(); ++i) (fx[i] < 0.5 ? up : down).push_back(static_cast<std::int64_t>(i));
  const auto up_t = torch::tensor(up, torch::kLong);
  const auto down_t = torch::tensor(down, torch::kLong);

  std::vector<std::pair<std::string, std::vector<std::int64_t>>> concepts;
  for (const auto& p : probes) concepts.emplace_back(p.concept_name, p.support);
  if (options.random_control) concepts.emplace_back(kControlConcept, random_control_units(probes, unit_count, options.seed));

  EffectReport report;
  report.sample_count = x.size(0);
  report.target_class = options.target_class;
  const auto ate_pooled = ate_samples(model, x, x_prime, options.target_class, options.eps);
  for (std::size_t k = 0; k < concepts.size(); ++k) {
    ConceptEffects c;
    c.concept_name = concepts[k].first;
    c.units = concepts[k].second;
    c.control = options.random_control && k + 1 == concepts.size();
    c.pooled = effects_for(model, c.units, x, x_prime, options.target_class, options.eps, ate_pooled);
    if (!up.empty()) {
      const auto xu = x.index_select(0, up_t), xpu = x_prime.index_select(0, up_t);
      c.increase = effects_for(model, c.units, xu, xpu, options.target_class, options.eps,
                               ate_samples(model, xu, xpu, options.target_class, options.eps));
    }
    if (!down.empty()) {
      const auto xd = x.index_select(0, down_t), xpd = x_prime.index_select(0, down_t);
      c.decrease = effects_for(model, c.units, xd, xpd, options.target_class, options.eps,
                               ate_samples(model, xd, xpd, options.target_class, options.eps));
    }
    report.concepts.push_back(std::move(c));
  }
  std::vector<std::size_t> order(report.concepts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(report.concepts[a].pooled.ie.mean) > std::abs(report.concepts[b].pooled.ie.mean);
  });
  for (auto i : order) report.ranking.push_back(report.concepts[i].concept_name);
  return report;
}

torch::Tensor flipping_counterfactuals(const classifier::Classifier& model, const metrics::ExplainFn& explain,
                                       const torch::Tensor& x, std::int64_t target_class,
                                       const metrics::FlipThresholds& thresholds) {
  const auto fx = target_probabilities(model, x, target_class);
  std::vector<std::int64_t> pos, neg;
  for (std::size_t i = 0; i < fx.size(); ++i) (fx[i] >= 0.5 ? pos : neg).push_back(static_cast<std::int64_t>(i));
  auto out = torch::empty_like(x);
  torch::NoGradGuard no_grad;
  if (!pos.empty()) {
    const auto idx = torch::tensor(pos, torch::kLong);
    out.index_copy_(0, idx, explain(x.index_select(0, idx), thresholds.low).to(x.scalar_type()));
  }
  if (!neg.empty()) {
    const auto idx = torch::tensor(neg, torch::kLong);
    out.index_copy_(0, idx, explain(x.index_select(0, idx), thresholds.high).to(x.scalar_type()));
  }
  return out;
}

EffectReport rank_concepts(const classifier::Classifier& model, const metrics::ExplainFn& explain,
                           const std::vector<ConceptProbe>& probes, const torch::Tensor& x, const RankOptions& options) {
  const auto x_prime = flipping_counterfactuals(model, explain, x, options.target_class, options.thresholds);
  return rank_concepts(model, probes, x, x_prime, options);
}

// ============================================================== surrogate tree

double entropy(const std::vector<double>& distribution) {
  const double total = std::accumulate(distribution.begin(), distribution.end(), 0.0);
  if (total <= 0) return 0.0;
  double h = 0.0;
  for (double c : distribution)
    if (c > 0) h -= (c / total) * std::log2(c / total);
  return h;
}

DecisionTree::DecisionTree(std::vector<TreeNode> nodes, std::vector<std::string> feature_names,
                           std::int64_t class_count, int max_depth)
    : nodes_(std::move(nodes)),
      feature_names_(std::move(feature_names)),
      class_count_(class_count),
      max_depth_(max_depth) {}

std::int64_t DecisionTree::predict(const Eigen::VectorXd& row) const {
  if (nodes_.empty()) throw StateError("decision tree has no nodes");
  int i = 0;
  while (nodes_[static_cast<std::size_t>(i)].feature >= 0) {
    const auto& n = nodes_[static_cast<std::size_t>(i)];
    if (n.feature >= row.size()) throw ArgumentError("row has too few features for the tree");
    i = row(n.feature) <= n.threshold ? n.left : n.right;
  }
  return nodes_[static_cast<std::size_t>(i)].prediction;
}

std::vector<std::int64_t> DecisionTree::predict(const Eigen::MatrixXd& rows) const {
  std::vector<std::int64_t> out;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) out.push_back(predict(Eigen::VectorXd(rows.row(i).transpose())));
  return out;
}

int DecisionTree::depth() const {
  if (nodes_.empty()) return 0;
  std::function<int(int)> walk = [&](int i) -> int {
    const auto& n = nodes_[static_cast<std::size_t>(i)];
    return n.feature < 0 ? 0 : 1 + std::max(walk(n.left), walk(n.right));
  };
  return walk(0);
}

std::vector<std::string> DecisionTree::rules() const {
  std::vector<std::string> out;
  if (nodes_.empty()) return out;
  auto name = [&](int f) {
    return static_cast<std::size_t>(f) < feature_names_.size() ? feature_names_[static_cast<std::size_t>(f)]
                                                              : "w" + std::to_string(f);
  };
  std::function<void(int, std::vector<std::string>&)> walk = [&](int i, std::vector<std::string>& conditions) {
    const auto& n = nodes_[static_cast<std::size_t>(i)];
    if (n.feature < 0) {
      std::ostringstream line;
      line << std::setprecision(4);
      if (conditions.empty()) {
        line << "always";
      } else {
        line << "if ";
        for (std::size_t k = 0; k < conditions.size(); ++k) line << (k ? " and " : "") << conditions[k];
        line << " then";
      }
      const double total = std::accumulate(n.distribution.begin(), n.distribution.end(), 0.0);
      const double p = total > 0 ? n.distribution[static_cast<std::size_t>(n.prediction)] / total : 0.0;
      line << " class " << n.prediction << " [n=" << n.count << ", p=" << p << "]";
      out.push_back(line.str());
      return;
    }
    std::ostringstream t;
    t << std::setprecision(6) << n.threshold;
    conditions.push_back(name(n.feature) + " <= " + t.str());
    walk(n.left, conditions);
    conditions.back() = name(n.feature) + " > " + t.str();
    walk(n.right, conditions);
    conditions.pop_back();
  };
  std::vector<std::string> conditions;
  walk(0, conditions);
  return out;
}

json DecisionTree::to_json() const {
  json nodes = json::array();
  for (const auto& n : nodes_)
    nodes.push_back({{"feature", n.feature}, {"threshold", n.threshold}, {"left", n.left}, {"right", n.right},
                     {"distribution", n.distribution}, {"count", n.count}, {"prediction", n.prediction}});
  return {{"nodes", nodes}, {"feature_names", feature_names_}, {"class_count", class_count_},
          {"max_depth", max_depth_}, {"depth", depth()}, {"rules", rules()}};
}

DecisionTree DecisionTree::from_json(const json& j) {
  std::vector<TreeNode> nodes;
  for (const auto& n : j.at("nodes")) {
    TreeNode t;
    t.feature = n.at("feature").get<int>();
    t.threshold = n.at("threshold").get<double>();
    t.left = n.at("left").get<int>();
    t.right = n.at("right").get<int>();
    t.distribution = n.at("distribution").get<std::vector<double>>();
    t.count = n.at("count").get<std::int64_t>();
    t.prediction = n.at("prediction").get<std::int64_t>();
    nodes.push_back(std::move(t));
  }
  return DecisionTree(std::move(nodes), j.value("feature_names", std::vector<std::string>{}),
                      j.at("class_count").get<std::int64_t>(), j.at("max_depth").get<int>());
}

namespace {

struct TreeBuilder {
  const Eigen::MatrixXd& X;
  const std::vector<std::int64_t>& y;
  std::int64_t classes;
  int max_depth;
  std::int64_t min_split;
  std::vector<TreeNode> nodes;

  std::vector<double> counts(const std::vector<Eigen::Index>& rows) const {
    std::vector<double> c(static_cast<std::size_t>(classes), 0.0);
    for (auto r : rows) c[static_cast<std::size_t>(y[static_cast<std::size_t>(r)])] += 1.0;
    return c;
  }

  int build(const std::vector<Eigen::Index>& rows, int depth) {
    TreeNode node;
    node.distribution = counts(rows);
    node.count = static_cast<std::int64_t>(rows.size());
    node.prediction = std::max_element(node.distribution.begin(), node.distribution.end()) - node.distribution.begin();
    const int index = static_cast<int>(nodes.size());
    nodes.push_back(node);

    const double parent = entropy(node.distribution);
    if (depth >= max_depth || parent <= 0.0 || node.count < min_split) return index;

    const double n = static_cast<double>(rows.size());
    double best_score = parent - 1e-12;
    int best_feature = -1;
    double best_threshold = 0.0;
    std::vector<std::pair<double, std::int64_t>> column(rows.size());
    for (Eigen::Index f = 0; f < X.cols(); ++f) {
      for (std::size_t i = 0; i < rows.size(); ++i) column[i] = {X(rows[i], f), y[static_cast<std::size_t>(rows[i])]};
      std::stable_sort(column.begin(), column.end(),
                       [](const auto& a, const auto& b) { return a.first < b.first; });
      std::vector<double> left(static_cast<std::size_t>(classes), 0.0);
      auto right = node.distribution;
      for (std::size_t i = 0; i + 1 < column.size(); ++i) {
        left[static_cast<std::size_t>(column[i].second)] += 1.0;
        right[static_cast<std::size_t>(column[i].second)] -= 1.0;
        if (!(column[i].first < column[i + 1].first)) continue;
        const double nl = static_cast<double>(i + 1);
        const double score = (nl * entropy(left) + (n - nl) * entropy(right)) / n;
        if (score < best_score - 1e-12) {
          best_score = score;
          best_feature = static_cast<int>(f);
          best_threshold = column[i].first + (column[i + 1].first - column[i].first) / 2.0;
        }
      }
    }
    if (best_feature < 0) return index;

    std::vector<Eigen::Index> l, r;
    for (auto row : rows) (X(row, best_feature) <= best_threshold ? l : r).push_back(row);
    const int left_index = build(l, depth + 1);
    const int right_index = build(r, depth + 1);
    auto& stored = nodes[static_cast<std::size_t>(index)];
    stored.feature = best_feature;
    stored.threshold = best_threshold;
    stored.left = left_index;
    stored.right = right_index;
    return index;
  }
};

}  // namespace

DecisionTree fit_tree(const Eigen::MatrixXd& X, const std::vector<std::int64_t>& y, std::int64_t class_count,
                      int max_depth, std::vector<std::string> feature_names, std::int64_t min_samples_split) {
  if (X.rows() == 0 || X.rows() != static_cast<Eigen::Index>(y.size()))
    throw ArgumentError("tree needs non-empty data with one label per row");
  if (class_count < 1) throw ArgumentError("class count must be positive");
  if (max_depth < 0) throw ArgumentError("max depth must be non-negative");
  for (auto label : y)
    if (label < 0 || label >= class_count) throw ArgumentError("tree label outside [0, class_count)");
  TreeBuilder builder{X, y, class_count, max_depth, std::max<std::int64_t>(2, min_samples_split), {}};
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(X.rows()));
  std::iota(rows.begin(), rows.end(), 0);
  builder.build(rows, 0);
  return DecisionTree(std::move(builder.nodes), std::move(feature_names), class_count, max_depth);
}

json SurrogateTree::to_json() const {
  return {{"tree", tree.to_json()},         {"fidelity", fidelity},           {"recall", recall},
          {"mean_recall", mean_recall},     {"train_count", train_count},     {"heldout_count", heldout_count}};
}

SurrogateTree fit_surrogate_tree(const classifier::Classifier& model, const std::vector<ConceptProbe>& probes,
                                 const torch::Tensor& train, const torch::Tensor& heldout, int max_depth) {
  if (train.size(0) == 0 || heldout.size(0) == 0) throw ArgumentError("surrogate tree needs train and held-out data");
  auto decisions = [&](const torch::Tensor& x) {
    torch::NoGradGuard no_grad;
    const auto arg = model.predict(x).argmax(1).contiguous();
    return std::vector<std::int64_t>(arg.data_ptr<std::int64_t>(), arg.data_ptr<std::int64_t>() + arg.numel());
  };
  std::vector<std::string> names;
  for (const auto& p : probes) names.push_back(p.concept_name);

  SurrogateTree s;
  s.tree = fit_tree(concept_logits(model, probes, train), decisions(train), model.class_count(), max_depth, names);
  s.train_count = train.size(0);
  s.heldout_count = heldout.size(0);
  const auto truth = decisions(heldout);
  const auto guess = s.tree.predict(concept_logits(model, probes, heldout));
  std::vector<double> hits(static_cast<std::size_t>(model.class_count()), 0.0), totals(hits.size(), 0.0);
  std::int64_t agree = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    totals[static_cast<std::size_t>(truth[i])] += 1;
    if (truth[i] == guess[i]) {
      ++agree;
      hits[static_cast<std::size_t>(truth[i])] += 1;
    }
  }
  s.fidelity = static_cast<double>(agree) / static_cast<double>(truth.size());
  double sum = 0.0;
  int present = 0;
  for (std::size_t k = 0; k < hits.size(); ++k) {
    if (totals[k] > 0) {
      s.recall.push_back(hits[k] / totals[k]);
      sum += hits[k] / totals[k];
      ++present;
    } else {
      s.recall.push_back(std::numeric_limits<double>::quiet_NaN());
    }
  }
  s.mean_recall = present ? sum / present : 0.0;
  return s;
}

}  // namespace cfaudit::mediation
