#include "regvit/probes.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "regvit/errors.hpp"
#include "regvit/parallel.hpp"
#include "regvit/report.hpp"
#include "regvit/rng.hpp"

namespace regvit {

namespace {

using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Matrix to_eigen(const Tensor& t) {
  if (t.rank() != 2) throw DimensionError("expected a matrix, got " + shape_to_string(t.shape()));
  return Eigen::Map<const RowMatrix>(t.data().data(), static_cast<Eigen::Index>(t.dim(0)),
                                     static_cast<Eigen::Index>(t.dim(1)));
}

Tensor from_eigen(const Matrix& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  Eigen::Map<RowMatrix>(t.data().data(), m.rows(), m.cols()) = m;
  return t;
}

void require_rank3(const Tensor& t, const char* what) {
  if (t.rank() != 3) throw DimensionError(std::string(what) + " must be [images, N, d], got " + shape_to_string(t.shape()));
}

// Rows of a [images, N, d] tensor whose image lies on the requested side of the split.
struct SplitRows {
  Matrix train, test;
  std::vector<std::size_t> train_cells, test_cells;
};

SplitRows split_tokens(const Tensor& tokens) {
  const std::size_t images = tokens.dim(0), n = tokens.dim(1), d = tokens.dim(2);
  std::size_t n_test = 0;
  for (std::size_t i = 0; i < images; ++i) n_test += is_held_out(i) ? 1 : 0;
  if (n_test == 0 || n_test == images) {
    throw DataError("split of " + std::to_string(images) + " images leaves an empty train or test side");
  }
  SplitRows s;
  s.train.resize(static_cast<Eigen::Index>((images - n_test) * n), static_cast<Eigen::Index>(d));
  s.test.resize(static_cast<Eigen::Index>(n_test * n), static_cast<Eigen::Index>(d));
  Eigen::Index tr = 0, te = 0;
  for (std::size_t i = 0; i < images; ++i) {
    const bool held = is_held_out(i);
    for (std::size_t p = 0; p < n; ++p) {
      const double* src = tokens.data().data() + (i * n + p) * d;
      auto row = held ? s.test.row(te++) : s.train.row(tr++);
      for (std::size_t k = 0; k < d; ++k) row(static_cast<Eigen::Index>(k)) = src[k];
      (held ? s.test_cells : s.train_cells).push_back(p);
    }
  }
  return s;
}

Matrix standardize(const LogisticModel& model, const Tensor& x) {
  Matrix z = to_eigen(x);
  if (static_cast<std::size_t>(z.cols()) != model.mean.numel()) {
    throw DimensionError("probe expects " + std::to_string(model.mean.numel()) + " features, got " +
                         std::to_string(z.cols()));
  }
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    const auto k = static_cast<std::size_t>(j);
    z.col(j) = (z.col(j).array() - model.mean[k]) / model.scale[k];
  }
  return z;
}

Matrix softmax_rows(Matrix logits) {
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    logits.row(i) = (logits.row(i).array() - m).exp();
    logits.row(i) /= logits.row(i).sum();
  }
  return logits;
}

Matrix logits_of(const LogisticModel& model, const Matrix& z) {
  const Matrix w = to_eigen(model.weights);
  Matrix logits = z * w;
  for (Eigen::Index k = 0; k < logits.cols(); ++k) logits.col(k).array() += model.bias[static_cast<std::size_t>(k)];
  return logits;
}

double mean_and_std(const std::vector<double>& v, double& std) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  std = std::sqrt(var / static_cast<double>(v.size()));
  return mean;
}

}  // namespace

Tensor fit_ridge(const Tensor& x, const Tensor& y, double lambda) {
  if (!(lambda >= 0.0)) throw ContractError("ridge lambda must be non-negative");
  if (x.rank() != 2 || y.rank() != 2 || x.dim(0) != y.dim(0)) {
    throw DimensionError("ridge needs X [n×p] and Y [n×q] with matching n, got " + shape_to_string(x.shape()) + " and " +
                         shape_to_string(y.shape()));
  }
  const Matrix mx = to_eigen(x), my = to_eigen(y);
  Matrix a = mx.transpose() * mx;
  a.diagonal().array() += lambda;
  const Matrix rhs = mx.transpose() * my;
  if (lambda > 0.0) {
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() == Eigen::Success) return from_eigen(llt.solve(rhs));
  }
  Eigen::ColPivHouseholderQR<Matrix> qr(a);
  if (qr.rank() < a.cols()) {
    throw SingularError("ridge system is singular (rank " + std::to_string(qr.rank()) + " of " +
                        std::to_string(a.cols()) + "); use lambda > 0");
  }
  return from_eigen(qr.solve(rhs));
}

LogisticModel fit_logistic(const Tensor& x, const std::vector<std::size_t>& labels, const LogisticOptions& options) {
  if (x.rank() != 2 || x.dim(0) != labels.size()) {
    throw DimensionError("logistic probe needs X [n×p] and n labels, got " + shape_to_string(x.shape()) + " and " +
                         std::to_string(labels.size()));
  }
  if (labels.empty()) throw DataError("logistic probe has no samples");
  const std::size_t k = *std::max_element(labels.begin(), labels.end()) + 1;
  if (std::all_of(labels.begin(), labels.end(), [&](std::size_t l) { return l == labels.front(); })) {
    throw DataError("logistic probe needs at least two classes, got only class " + std::to_string(labels.front()));
  }
  const std::size_t n = x.dim(0), p = x.dim(1);

  LogisticModel model;
  model.mean = Tensor({p}, 0.0);
  model.scale = Tensor({p}, 1.0);
  for (std::size_t j = 0; j < p; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += x.at(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (x.at(i, j) - mean) * (x.at(i, j) - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    model.mean[j] = mean;
    model.scale[j] = sd > 1e-12 ? sd : 1.0;
  }
  model.weights = Tensor({p, k}, 0.0);
  model.bias = Tensor({k}, 0.0);

  const Matrix z = standardize(model, x);
  Matrix onehot = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < n; ++i) onehot(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(labels[i])) = 1.0;

  Matrix w = Matrix::Zero(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(k));
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(k));
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t step = 0; step < options.steps; ++step) {
    Matrix logits = z * w;
    logits.rowwise() += b;
    const Matrix g = (softmax_rows(std::move(logits)) - onehot) * inv_n;
    w -= options.lr * (z.transpose() * g + options.lambda * w);
    b -= options.lr * g.colwise().sum();
  }
  model.weights = from_eigen(w);
  for (std::size_t c = 0; c < k; ++c) model.bias[c] = b(static_cast<Eigen::Index>(c));
  return model;
}

Tensor predict_proba(const LogisticModel& model, const Tensor& x) {
  return from_eigen(softmax_rows(logits_of(model, standardize(model, x))));
}

std::vector<std::size_t> predict(const LogisticModel& model, const Tensor& x) {
  const Matrix logits = logits_of(model, standardize(model, x));
  std::vector<std::size_t> out;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < logits.cols(); ++c)
      if (logits(i, c) > logits(i, best)) best = c;
    out.push_back(static_cast<std::size_t>(best));
  }
  return out;
}

double logistic_loss(const LogisticModel& model, const Tensor& x, const std::vector<std::size_t>& labels) {
  const Matrix logits = logits_of(model, standardize(model, x));
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) throw DimensionError("label count does not match rows");
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    total += lse - logits(i, static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]));
  }
  return total / static_cast<double>(labels.size());
}

double accuracy(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& labels) {
  if (predicted.size() != labels.size() || labels.empty()) throw DimensionError("accuracy needs equal, nonempty lists");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

bool is_held_out(std::size_t group) { return derive_seed(0x5e11ULL, group) % 5 == 0; }

PositionProbeResult position_probe(const Tensor& tokens, GridShape grid, const LogisticOptions& options) {
  require_rank3(tokens, "position probe tokens");
  if (tokens.dim(1) != grid.area()) {
    throw DimensionError("position probe has " + std::to_string(tokens.dim(1)) + " tokens per image for a " +
                         std::to_string(grid.rows) + "x" + std::to_string(grid.cols) + " grid");
  }
  const SplitRows s = split_tokens(tokens);
  const LogisticModel model = fit_logistic(from_eigen(s.train), s.train_cells, options);
  const auto predicted = predict(model, from_eigen(s.test));
  PositionProbeResult r;
  r.top1 = accuracy(predicted, s.test_cells);
  double dist = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double dr = static_cast<double>(predicted[i] / grid.cols) - static_cast<double>(s.test_cells[i] / grid.cols);
    const double dc = static_cast<double>(predicted[i] % grid.cols) - static_cast<double>(s.test_cells[i] % grid.cols);
    dist += std::sqrt(dr * dr + dc * dc);
  }
  r.mean_distance = dist / static_cast<double>(predicted.size());
  return r;
}

double reconstruction_probe(const Tensor& tokens, const Tensor& pixels, double lambda) {
  require_rank3(tokens, "reconstruction tokens");
  require_rank3(pixels, "reconstruction pixels");
  if (tokens.dim(0) != pixels.dim(0) || tokens.dim(1) != pixels.dim(1)) {
    throw DimensionError("tokens " + shape_to_string(tokens.shape()) + " and pixels " + shape_to_string(pixels.shape()) +
                         " are not aligned");
  }
  const SplitRows xs = split_tokens(tokens);
  const SplitRows ys = split_tokens(pixels);
  const Eigen::RowVectorXd mx = xs.train.colwise().mean();
  const Eigen::RowVectorXd my = ys.train.colwise().mean();
  const Matrix w = to_eigen(fit_ridge(from_eigen(xs.train.rowwise() - mx), from_eigen(ys.train.rowwise() - my), lambda));
  Matrix pred = (xs.test.rowwise() - mx) * w;
  pred.rowwise() += my;
  return std::sqrt((pred - ys.test).rowwise().squaredNorm().mean());
}

double reconstruction_probe(const Tensor& tokens, const Tensor& pixels) {
  require_rank3(tokens, "reconstruction tokens");
  std::size_t train_rows = 0;
  for (std::size_t i = 0; i < tokens.dim(0); ++i) train_rows += is_held_out(i) ? 0 : tokens.dim(1);
  return reconstruction_probe(tokens, pixels, 1e-3 * static_cast<double>(train_rows));
}

std::string TokenSelector::name() const {
  switch (kind) {
    case SelectorKind::Cls: return "cls";
    case SelectorKind::Register: return "register:" + std::to_string(register_index);
    case SelectorKind::RandomNormalPatch: return "random_normal_patch";
    case SelectorKind::RandomOutlierPatch: return "random_outlier_patch";
  }
  return "cls";
}

TokenSelector TokenSelector::parse(const std::string& text) {
  if (text == "cls") return {SelectorKind::Cls, 0};
  if (text == "random_normal_patch") return {SelectorKind::RandomNormalPatch, 0};
  if (text == "random_outlier_patch") return {SelectorKind::RandomOutlierPatch, 0};
  const std::string prefix = "register:";
  if (text.rfind(prefix, 0) == 0 && text.size() > prefix.size() &&
      std::all_of(text.begin() + static_cast<long>(prefix.size()), text.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    return {SelectorKind::Register, std::stoul(text.substr(prefix.size()))};
  }
  throw UsageError("unknown token selector '" + text +
                   "' (expected cls, register:<i>, random_normal_patch or random_outlier_patch)");
}

ProbeFeatures probe_features(const Params& params, const ModelConfig& config, const Dataset& dataset) {
  check_params(config, params);
  if (dataset.empty()) throw DataError("probe dataset is empty");
  const std::size_t m = dataset.size(), n = config.num_patches(), d = config.embed_dim, r = config.n_registers;
  ProbeFeatures f;
  f.cls = Tensor({m, d});
  if (r) f.registers = Tensor({m, r, d});
  f.patches = Tensor({m, n, d});
  f.patch_norms = Tensor({m, n});
  f.labels.resize(m);
  parallel_for(m, [&](std::size_t i) {
    const ForwardTrace trace = run_model(dataset[i].image, params, config, false);
    const Tensor& out = trace.output();
    double* dst_cls = f.cls.data().data() + i * d;
    for (std::size_t k = 0; k < d; ++k) dst_cls[k] = out.at(0, k);
    for (std::size_t j = 0; j < r; ++j)
      for (std::size_t k = 0; k < d; ++k) f.registers.data()[(i * r + j) * d + k] = out.at(1 + j, k);
    for (std::size_t p = 0; p < n; ++p) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double v = out.at(1 + r + p, k);
        f.patches.data()[(i * n + p) * d + k] = v;
        s += v * v;
      }
      f.patch_norms.at(i, p) = std::sqrt(s);
    }
    f.labels[i] = dataset[i].label;
  });
  return f;
}

ProbeResult classification_probe(const ProbeFeatures& features, const TokenSelector& selector, double tau,
                                 std::size_t n_seeds, std::uint64_t seed, const LogisticOptions& options) {
  if (n_seeds == 0) throw ContractError("n_seeds must be positive");
  const std::size_t m = features.n_images();
  const std::size_t d = features.cls.dim(1);
  const std::size_t n = features.patches.dim(1);
  if (selector.kind == SelectorKind::Register && selector.register_index >= features.n_registers()) {
    throw ContractError("selector " + selector.name() + " needs a model with more than " +
                        std::to_string(selector.register_index) + " registers (model has " +
                        std::to_string(features.n_registers()) + ")");
  }
  const bool want_outlier = selector.kind == SelectorKind::RandomOutlierPatch;

  // Eligible patch indices per image for stochastic selectors.
  std::vector<std::vector<std::size_t>> pool(m);
  if (selector.stochastic()) {
    if (!(tau > 0.0)) throw ContractError("outlier threshold must be positive");
    bool any = false;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < n; ++p)
        if ((features.patch_norms.at(i, p) > tau) == want_outlier) pool[i].push_back(p);
      any = any || !pool[i].empty();
    }
    if (!any) {
      throw EmptyMaskError(std::string("no ") + (want_outlier ? "outlier" : "normal") + " patch tokens at tau " +
                           format_double(tau) + "; selector " + selector.name() + " has nothing to draw");
    }
  }

  const std::size_t runs = selector.stochastic() ? n_seeds : 1;
  std::vector<double> scores;
  for (std::size_t s = 0; s < runs; ++s) {
    Rng rng(derive_seed(seed, s));
    std::vector<std::size_t> train_rows, test_rows;
    std::vector<const double*> picked(m, nullptr);
    for (std::size_t i = 0; i < m; ++i) {
      switch (selector.kind) {
        case SelectorKind::Cls: picked[i] = features.cls.data().data() + i * d; break;
        case SelectorKind::Register:
          picked[i] = features.registers.data().data() + (i * features.n_registers() + selector.register_index) * d;
          break;
        default: {
          if (pool[i].empty()) continue;
          const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool[i].size()) - 1));
          picked[i] = features.patches.data().data() + (i * n + pool[i][j]) * d;
        }
      }
      (is_held_out(i) ? test_rows : train_rows).push_back(i);
    }
    if (train_rows.empty() || test_rows.empty()) {
      throw DataError("selector " + selector.name() + " leaves an empty train or test split");
    }
    auto gather = [&](const std::vector<std::size_t>& rows, std::vector<std::size_t>& labels) {
      Tensor x({rows.size(), d});
      for (std::size_t r = 0; r < rows.size(); ++r) {
        std::copy(picked[rows[r]], picked[rows[r]] + d, x.data().begin() + static_cast<long>(r * d));
        labels.push_back(features.labels[rows[r]]);
      }
      return x;
    };
    std::vector<std::size_t> train_labels, test_labels;
    const Tensor x_train = gather(train_rows, train_labels);
    const Tensor x_test = gather(test_rows, test_labels);
    const LogisticModel model = fit_logistic(x_train, train_labels, options);
    scores.push_back(accuracy(predict(model, x_test), test_labels));
  }

  ProbeResult result{"classification", selector.name(), "accuracy", 0.0, 0.0, runs};
  result.value = mean_and_std(scores, result.std);
  return result;
}

ProbeResult classification_probe(const Params& params, const ModelConfig& config, const Dataset& dataset,
                                 const TokenSelector& selector, double tau, std::size_t n_seeds, std::uint64_t seed) {
  return classification_probe(probe_features(params, config, dataset), selector, tau, n_seeds, seed);
}

std::string probe_results_csv(const std::vector<ProbeResult>& results) {
  CsvWriter csv({"task", "selector", "metric", "value", "std", "n_seeds"});
  for (const auto& r : results) {
    csv.row({r.task, r.selector, r.metric, format_double(r.value), format_double(r.std), std::to_string(r.n_seeds)});
  }
  return csv.str();
}

}  // namespace regvit
