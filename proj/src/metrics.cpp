#include "cfaudit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "cfaudit/common.hpp"

namespace cfaudit::metrics {

using nlohmann::json;

std::vector<double> to_vector(const torch::Tensor& t) {
  const auto flat = t.detach().to(torch::kCPU).to(torch::kFloat64).contiguous().view(-1);
  return {flat.data_ptr<double>(), flat.data_ptr<double>() + flat.numel()};
}

// ============================================================== FID

ActivationStats activation_stats(const Eigen::MatrixXd& features) {
  if (features.rows() < 2) throw ArgumentError("activation_stats needs at least two rows");
  ActivationStats s;
  s.count = features.rows();
  s.mean = features.colwise().mean().transpose();
  const Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
  s.covariance = (centered.transpose() * centered) / static_cast<double>(features.rows() - 1);
  return s;
}

ActivationStats activation_stats(const torch::Tensor& features) {
  if (features.dim() != 2) throw ArgumentError("features must be [N, D]");
  const auto f = features.detach().to(torch::kCPU).to(torch::kFloat64).contiguous();
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
      f.data_ptr<double>(), f.size(0), f.size(1));
  return activation_stats(Eigen::MatrixXd(m));
}

namespace {

bool psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) return false;
  const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  return es.eigenvalues().minCoeff() >= -1e-10 * scale;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) throw ArgumentError("eigendecomposition failed");
  const Eigen::VectorXd roots = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * roots.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double fid(const ActivationStats& a, const ActivationStats& b) {
  const auto d = a.mean.size();
  if (b.mean.size() != d || a.covariance.rows() != d || a.covariance.cols() != d || b.covariance.rows() != d ||
      b.covariance.cols() != d)
    throw ArgumentError("fid: feature dimensions differ");
  Eigen::MatrixXd sa = 0.5 * (a.covariance + a.covariance.transpose());
  Eigen::MatrixXd sb = 0.5 * (b.covariance + b.covariance.transpose());
  if (!psd(sa) || !psd(sb)) {
    log::warn("fid: covariance not positive semidefinite; adding 1e-6 to the diagonal");
    sa.diagonal().array() += 1e-6;
    sb.diagonal().array() += 1e-6;
  }
  const Eigen::MatrixXd root_a = psd_sqrt(sa);
  const Eigen::MatrixXd inner = root_a * sb * root_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double trace_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (a.mean - b.mean).squaredNorm() + sa.trace() + sb.trace() - 2.0 * trace_sqrt;
  return std::max(0.0, value);
}

// ============================================================== CV score

double cv_score(const torch::Tensor& p_inputs, const torch::Tensor& p_counterfactuals, const FlipThresholds& t) {
  const auto p = to_vector(p_inputs);
  const auto q = to_vector(p_counterfactuals);
  if (p.empty() || p.size() != q.size()) throw ArgumentError("cv_score needs matching non-empty inputs");
  if (!(t.low <= t.high)) throw ArgumentError("flip thresholds must satisfy low <= high");
  std::size_t flipped = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool positive_side = p[i] >= 0.5;
    if (positive_side ? q[i] < t.low : q[i] > t.high) ++flipped;
  }
  return static_cast<double>(flipped) / static_cast<double>(p.size());
}

double cv_score(const ProbFn& f, const torch::Tensor& x, const torch::Tensor& x_c, std::int64_t target_class,
                const FlipThresholds& t) {
  torch::NoGradGuard no_grad;
  return cv_score(f(x).select(1, target_class), f(x_c).select(1, target_class), t);
}

// ============================================================== importance & deletion

torch::Tensor counterfactual_importance_map(const torch::Tensor& x, const torch::Tensor& x_neg,
                                            const torch::Tensor& x_pos) {
  if (x.sizes() != x_neg.sizes() || x.sizes() != x_pos.sizes())
    throw ArgumentError("importance map inputs must share one shape");
  auto diff = (x_pos - x_neg).abs().to(torch::kFloat64);
  if (diff.dim() == 3) diff = diff.sum(0);
  const double top = diff.max().item<double>();
  return top > 0.0 ? diff / top : diff;
}

std::string to_string(Filler filler) { return filler == Filler::blur ? "blur" : "mean"; }

Filler filler_from_string(const std::string& name) {
  if (name == "mean") return Filler::mean;
  if (name == "blur") return Filler::blur;
  throw ArgumentError("unknown filler: " + name);
}

double trapezoid_auc(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ArgumentError("trapezoid_auc needs >= 2 matching points");
  const double span = x.back() - x.front();
  if (!(span > 0.0)) throw ArgumentError("x must increase");
  double area = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    if (!(x[i] > x[i - 1])) throw ArgumentError("x must be strictly increasing");
    area += 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1]);
  }
  return area / span;
}

namespace {

torch::Tensor gaussian_blur(const torch::Tensor& image, double sigma) {
  const auto radius = static_cast<std::int64_t>(std::ceil(3.0 * sigma));
  auto k = torch::arange(-radius, radius + 1, torch::kFloat64);
  k = torch::exp(-k * k / (2.0 * sigma * sigma));
  k = k / k.sum();
  const auto channels = image.size(0);
  auto x = image.to(torch::kFloat64).unsqueeze(0);
  const auto kh = k.view({1, 1, 1, -1}).repeat({channels, 1, 1, 1});
  const auto kv = k.view({1, 1, -1, 1}).repeat({channels, 1, 1, 1});
  namespace F = torch::nn::functional;
  x = F::pad(x, F::PadFuncOptions({radius, radius, radius, radius}).mode(torch::kReplicate));
  x = F::conv2d(x, kh, F::Conv2dFuncOptions().groups(channels));
  x = F::conv2d(x, kv, F::Conv2dFuncOptions().groups(channels));
  return x.squeeze(0).to(image.scalar_type());
}

}  // namespace

DeletionResult deletion_auc(const ProbFn& f, const torch::Tensor& image, const torch::Tensor& importance,
                            std::int64_t target_class, const std::vector<double>& fractions, Filler filler) {
  if (fractions.size() < 2) throw ArgumentError("deletion needs at least two removal fractions");
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    if (!(fractions[i] >= 0.0 && fractions[i] <= 1.0)) throw ArgumentError("removal fractions must lie in [0,1]");
    if (i > 0 && !(fractions[i] > fractions[i - 1])) throw ArgumentError("removal fractions must increase");
  }
  if (image.dim() != 3) throw ArgumentError("deletion expects a [C,H,W] image");
  const auto h = image.size(1);
  const auto w = image.size(2);
  auto map = importance.dim() == 3 ? importance.sum(0) : importance;
  if (map.dim() != 2 || map.size(0) != h || map.size(1) != w)
    throw ArgumentError("importance map must match the image's spatial shape");

  const auto scores = to_vector(map);
  std::vector<std::int64_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) { return scores[a] > scores[b]; });

  torch::Tensor fill;
  if (filler == Filler::mean) {
    fill = image.mean({1, 2}, true).expand_as(image);
  } else {
    fill = gaussian_blur(image, std::max(1.0, static_cast<double>(std::min(h, w)) / 8.0));
  }

  DeletionResult result;
  result.fractions = fractions;
  result.filler = to_string(filler);
  std::vector<torch::Tensor> variants;
  const auto pixels = static_cast<std::int64_t>(order.size());
  for (double frac : fractions) {
    const auto removed = static_cast<std::int64_t>(std::llround(frac * static_cast<double>(pixels)));
    auto mask = torch::zeros({pixels}, torch::kBool);
    if (removed > 0)
      mask.index_fill_(0, torch::tensor(std::vector<std::int64_t>(order.begin(), order.begin() + removed)), true);
    mask = mask.view({1, h, w}).expand_as(image);
    variants.push_back(torch::where(mask, fill, image));
  }
  torch::NoGradGuard no_grad;
  const auto probs = f(torch::stack(variants)).select(1, target_class);
  result.probabilities = to_vector(probs);
  result.auc = trapezoid_auc(result.fractions, result.probabilities);
  return result;
}

// ============================================================== rank statistics

std::vector<double> average_ranks(const std::vector<double>& values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

SpearmanResult spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ArgumentError("spearman needs >= 2 paired values");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return {0.0, false};
  return {sxy / std::sqrt(sxx * syy), true};
}

json ConsistencyCurve::to_json() const {
  json out = json::array();
  for (const auto& b : bands)
    out.push_back({{"band", {b.low, b.high}},
                   {"count", b.count},
                   {"requested", b.requested},
                   {"realized", b.realized},
                   {"spearman", b.spearman.rho},
                   {"spearman_defined", b.spearman.defined}});
  return out;
}

ConsistencyCurve consistency_curve(const ProbFn& f, const ExplainFn& explain, const torch::Tensor& probe_set,
                                   std::int64_t target_class, std::int64_t bins, std::int64_t band_count) {
  if (bins < 2) throw ArgumentError("consistency_curve needs at least two bins");
  if (band_count < 1) throw ArgumentError("band_count must be positive");
  torch::NoGradGuard no_grad;
  const auto p = to_vector(f(probe_set).select(1, target_class));
  std::vector<std::vector<std::int64_t>> members(static_cast<std::size_t>(band_count));
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto band = static_cast<std::int64_t>(std::floor(p[i] * static_cast<double>(band_count)));
    band = std::clamp<std::int64_t>(band, 0, band_count - 1);
    members[static_cast<std::size_t>(band)].push_back(static_cast<std::int64_t>(i));
  }
  ConsistencyCurve curve;
  for (std::int64_t b = 0; b < band_count; ++b) {
    const double low = static_cast<double>(b) / static_cast<double>(band_count);
    const double high = static_cast<double>(b + 1) / static_cast<double>(band_count);
    const auto& idx = members[static_cast<std::size_t>(b)];
    if (idx.empty()) {
      log::warn("consistency_curve: no inputs with f(x) in [" + std::to_string(low) + ", " + std::to_string(high) +
                "); band omitted");
      continue;
    }
    const auto inputs = probe_set.index_select(0, torch::tensor(idx));
    ConsistencyBand band{low, high, static_cast<std::int64_t>(idx.size()), {}, {}, {}};
    for (std::int64_t n = 0; n < bins; ++n) {
      const double c = (static_cast<double>(n) + 0.5) / static_cast<double>(bins);
      const auto realized = f(explain(inputs, c)).select(1, target_class).mean().item<double>();
      band.requested.push_back(c);
      band.realized.push_back(realized);
    }
    band.spearman = spearman(band.requested, band.realized);
    curve.bands.push_back(std::move(band));
  }
  return curve;
}

double confounding_metric(const ProbFn& oracle, const torch::Tensor& x, const torch::Tensor& x_c) {
  if (x.size(0) == 0 || x.sizes() != x_c.sizes()) throw ArgumentError("confounding_metric needs matching pairs");
  torch::NoGradGuard no_grad;
  const auto a = oracle(x).argmax(1);
  const auto b = oracle(x_c).argmax(1);
  return a.ne(b).to(torch::kFloat64).mean().item<double>();
}

// ============================================================== separation

double rank_auc(const std::vector<double>& negatives, const std::vector<double>& positives) {
  if (negatives.empty() || positives.empty()) throw ArgumentError("rank_auc needs two non-empty groups");
  std::vector<double> all(negatives);
  all.insert(all.end(), positives.begin(), positives.end());
  const auto ranks = average_ranks(all);
  double positive_rank_sum = 0.0;
  for (std::size_t i = negatives.size(); i < all.size(); ++i) positive_rank_sum += ranks[i];
  const double np = static_cast<double>(positives.size());
  const double nn = static_cast<double>(negatives.size());
  return (positive_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

namespace {

Histogram histogram(const std::vector<double>& v, double low, double high, std::int64_t bins) {
  Histogram h{low, high, std::vector<std::int64_t>(static_cast<std::size_t>(bins), 0)};
  const double width = high > low ? (high - low) / static_cast<double>(bins) : 1.0;
  for (double s : v) {
    auto b = static_cast<std::int64_t>(std::floor((s - low) / width));
    ++h.counts[static_cast<std::size_t>(std::clamp<std::int64_t>(b, 0, bins - 1))];
  }
  return h;
}

json histogram_json(const Histogram& h) { return {{"low", h.low}, {"high", h.high}, {"counts", h.counts}}; }

}  // namespace

json ScoreSeparationReport::to_json() const {
  return {{"auc_roc", auc_roc},
          {"tnr_at_tpr95", tnr_at_tpr95},
          {"threshold", threshold},
          {"negatives", negatives},
          {"positives", positives},
          {"negative_histogram", histogram_json(negative_histogram)},
          {"positive_histogram", histogram_json(positive_histogram)}};
}

ScoreSeparationReport separation_report(const std::vector<double>& scores_in, const std::vector<double>& scores_out,
                                        std::int64_t histogram_bins) {
  if (scores_in.empty() || scores_out.empty()) throw ArgumentError("separation_report needs two non-empty groups");
  for (double s : scores_in)
    if (!std::isfinite(s)) throw ArgumentError("scores must be finite");
  for (double s : scores_out)
    if (!std::isfinite(s)) throw ArgumentError("scores must be finite");
  ScoreSeparationReport r;
  r.negatives = static_cast<std::int64_t>(scores_in.size());
  r.positives = static_cast<std::int64_t>(scores_out.size());
  r.auc_roc = rank_auc(scores_in, scores_out);

  // threshold keeps 95% of the positive group at or above it
  std::vector<double> sorted(scores_out);
  std::sort(sorted.begin(), sorted.end());
  const auto k = static_cast<std::size_t>(std::floor(0.05 * static_cast<double>(sorted.size())));
  r.threshold = sorted[k];
  const auto below = std::count_if(scores_in.begin(), scores_in.end(), [&](double s) { return s < r.threshold; });
  r.tnr_at_tpr95 = static_cast<double>(below) / static_cast<double>(scores_in.size());

  const double low = std::min(*std::min_element(scores_in.begin(), scores_in.end()), sorted.front());
  const double high = std::max(*std::max_element(scores_in.begin(), scores_in.end()), sorted.back());
  r.negative_histogram = histogram(scores_in, low, high, histogram_bins);
  r.positive_histogram = histogram(scores_out, low, high, histogram_bins);
  return r;
}

double expected_calibration_error(const torch::Tensor& probabilities, const torch::Tensor& labels,
                                  std::int64_t bins) {
  if (probabilities.dim() != 2 || labels.dim() != 1 || probabilities.size(0) != labels.size(0) ||
      probabilities.size(0) == 0)
    throw ArgumentError("ece needs [N, K] probabilities and [N] labels");
  if (bins < 1) throw ArgumentError("ece needs at least one bin");
  const auto [conf_t, pred_t] = probabilities.detach().to(torch::kFloat64).max(1);
  const auto conf = to_vector(conf_t);
  const auto correct = to_vector(pred_t.eq(labels.to(pred_t.device())).to(torch::kFloat64));
  std::vector<double> conf_sum(static_cast<std::size_t>(bins), 0.0), acc_sum(static_cast<std::size_t>(bins), 0.0);
  std::vector<double> count(static_cast<std::size_t>(bins), 0.0);
  for (std::size_t i = 0; i < conf.size(); ++i) {
    auto b = static_cast<std::int64_t>(std::ceil(conf[i] * static_cast<double>(bins))) - 1;
    b = std::clamp<std::int64_t>(b, 0, bins - 1);
    conf_sum[static_cast<std::size_t>(b)] += conf[i];
    acc_sum[static_cast<std::size_t>(b)] += correct[i];
    count[static_cast<std::size_t>(b)] += 1.0;
  }
  double ece = 0.0;
  for (std::size_t b = 0; b < count.size(); ++b)
    if (count[b] > 0) ece += std::abs(acc_sum[b] - conf_sum[b]) / static_cast<double>(conf.size());
  return ece;
}

// ============================================================== ledger

json MetricRecord::to_json() const {
  json j = {{"metric", metric}, {"config", config}, {"value", value}, {"group_sizes", group_sizes}};
  j["seed"] = seed ? json(*seed) : json(nullptr);
  return j;
}

void append_to_ledger(const std::filesystem::path& ledger, const MetricRecord& record) {
  if (ledger.has_parent_path()) std::filesystem::create_directories(ledger.parent_path());
  std::ofstream out(ledger, std::ios::app);
  if (!out) throw ArgumentError("cannot open ledger " + ledger.string());
  out << record.to_json().dump() << '\n';
}

std::vector<MetricRecord> read_ledger(const std::filesystem::path& ledger) {
  std::ifstream in(ledger);
  if (!in) throw ArgumentError("cannot open ledger " + ledger.string());
  std::vector<MetricRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    MetricRecord r;
    r.metric = j.at("metric").get<std::string>();
    r.config = j.value("config", json::object());
    r.value = j.at("value");
    r.group_sizes = j.value("group_sizes", json::object());
    if (!j.at("seed").is_null()) r.seed = j.at("seed").get<std::uint64_t>();
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace cfaudit::metrics
