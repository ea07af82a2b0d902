#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>

#include "sdcs/classical.hpp"
#include "sdcs/model_io.hpp"

namespace sdcs::classical {

namespace {

constexpr std::array<char, 4> kSvmMagic = {'S', 'V', 'M', '1'};
constexpr std::uint32_t kSvmFormatVersion = 1;
constexpr double kTau = 1e-12;

Eigen::MatrixXd rbf_gram(const FeatureMatrix& x, double gamma) {
  const Eigen::VectorXd sq = x.rowwise().squaredNorm();
  Eigen::MatrixXd k = -2.0 * (x * x.transpose());
  k.colwise() += sq;
  k.rowwise() += sq.transpose();
  return (-gamma * k.array().max(0.0)).exp().matrix();
}

}  // namespace

double rbf_kernel(const double* a, const double* b, int dim, double gamma) {
  double d = 0.0;
  for (int i = 0; i < dim; ++i) {
    const double t = a[i] - b[i];
    d += t * t;
  }
  return std::exp(-gamma * d);
}

BinarySvm svm_train_binary(const FeatureMatrix& x, std::span<const int> y, double c, double gamma,
                           const SvmOptions& options) {
  const int n = static_cast<int>(x.rows());
  if (static_cast<std::size_t>(n) != y.size()) throw ShapeError("svm: label count differs from rows");
  if (!(c > 0.0) || !(gamma > 0.0)) throw ConfigError("svm: C and gamma must be positive");
  for (int v : y) {
    if (v != 1 && v != -1) throw DataError("svm: binary labels must be +1 or -1");
  }
  const Eigen::MatrixXd k = rbf_gram(x, gamma);
  std::vector<double> alpha(n, 0.0);
  std::vector<double> grad(n, -1.0);
  const long cap = options.max_iterations > 0 ? options.max_iterations
                                              : std::max<long>(1000000L, 100L * n);
  BinarySvm out;
  auto objective = [&] {
    double f = 0.0;
    for (int t = 0; t < n; ++t) f += alpha[t] * (grad[t] - 1.0);
    return -0.5 * f;
  };
  auto in_up = [&](int t) { return (y[t] == 1 && alpha[t] < c) || (y[t] == -1 && alpha[t] > 0.0); };
  auto in_low = [&](int t) { return (y[t] == 1 && alpha[t] > 0.0) || (y[t] == -1 && alpha[t] < c); };

  long iter = 0;
  while (true) {
    double gmax = -std::numeric_limits<double>::infinity();
    int i = -1;
    for (int t = 0; t < n; ++t) {
      if (in_up(t) && -y[t] * grad[t] >= gmax) {
        gmax = -y[t] * grad[t];
        i = t;
      }
    }
    double gmax2 = -std::numeric_limits<double>::infinity();
    double best = std::numeric_limits<double>::infinity();
    int j = -1;
    for (int t = 0; t < n && i >= 0; ++t) {
      if (!in_low(t)) continue;
      const double yg = y[t] * grad[t];
      gmax2 = std::max(gmax2, yg);
      const double b = gmax + yg;
      if (b > 0.0) {
        double a = k(i, i) + k(t, t) - 2.0 * k(i, t);
        if (a <= 0.0) a = kTau;
        const double obj = -(b * b) / a;
        if (obj <= best) {
          best = obj;
          j = t;
        }
      }
    }
    out.max_violation = (i >= 0) ? std::max(0.0, gmax + gmax2) : 0.0;
    if (i < 0 || j < 0 || gmax + gmax2 < options.tolerance) {
      out.converged = true;
      break;
    }
    if (iter >= cap) break;
    ++iter;

    const double old_i = alpha[i];
    const double old_j = alpha[j];
    const double qij = y[i] * y[j] * k(i, j);
    if (y[i] != y[j]) {
      double quad = k(i, i) + k(j, j) + 2.0 * qij;
      if (quad <= 0.0) quad = kTau;
      const double delta = (-grad[i] - grad[j]) / quad;
      const double diff = alpha[i] - alpha[j];
      alpha[i] += delta;
      alpha[j] += delta;
      if (diff > 0.0) {
        if (alpha[j] < 0.0) {
          alpha[j] = 0.0;
          alpha[i] = diff;
        }
      } else if (alpha[i] < 0.0) {
        alpha[i] = 0.0;
        alpha[j] = -diff;
      }
      if (diff > 0.0) {
        if (alpha[i] > c) {
          alpha[i] = c;
          alpha[j] = c - diff;
        }
      } else if (alpha[j] > c) {
        alpha[j] = c;
        alpha[i] = c + diff;
      }
    } else {
      double quad = k(i, i) + k(j, j) - 2.0 * qij;
      if (quad <= 0.0) quad = kTau;
      const double delta = (grad[i] - grad[j]) / quad;
      const double sum = alpha[i] + alpha[j];
      alpha[i] -= delta;
      alpha[j] += delta;
      if (sum > c) {
        if (alpha[i] > c) {
          alpha[i] = c;
          alpha[j] = sum - c;
        }
      } else if (alpha[j] < 0.0) {
        alpha[j] = 0.0;
        alpha[i] = sum;
      }
      if (sum > c) {
        if (alpha[j] > c) {
          alpha[j] = c;
          alpha[i] = sum - c;
        }
      } else if (alpha[i] < 0.0) {
        alpha[i] = 0.0;
        alpha[j] = sum;
      }
    }
    const double di = alpha[i] - old_i;
    const double dj = alpha[j] - old_j;
    for (int t = 0; t < n; ++t) {
      grad[t] += y[t] * (y[i] * k(t, i) * di + y[j] * k(t, j) * dj);
    }
    if (options.record_objective) out.objective.push_back(objective());
  }
  out.iterations = iter;

  double ub = std::numeric_limits<double>::infinity();
  double lb = -std::numeric_limits<double>::infinity();
  double free_sum = 0.0;
  int free_count = 0;
  for (int t = 0; t < n; ++t) {
    const double yg = y[t] * grad[t];
    if (alpha[t] >= c) {
      if (y[t] == -1) ub = std::min(ub, yg); else lb = std::max(lb, yg);
    } else if (alpha[t] <= 0.0) {
      if (y[t] == 1) ub = std::min(ub, yg); else lb = std::max(lb, yg);
    } else {
      free_sum += yg;
      ++free_count;
    }
  }
  out.rho = free_count ? free_sum / free_count : 0.5 * (ub + lb);
  for (int t = 0; t < n; ++t) {
    if (alpha[t] > 0.0) {
      out.support.push_back(t);
      out.coef.push_back(alpha[t] * y[t]);
    }
  }
  out.alpha = std::move(alpha);
  return out;
}

int SvmModel::num_features() const {
  return pairs.empty() ? 0 : static_cast<int>(pairs.front().support_vectors.cols());
}

double SvmModel::decision(std::size_t pair, const double* row) const {
  const SvmPairModel& p = pairs.at(pair);
  const int dim = static_cast<int>(p.support_vectors.cols());
  double f = -p.rho;
  Eigen::VectorXd sv(dim);
  for (Eigen::Index s = 0; s < p.support_vectors.rows(); ++s) {
    sv = p.support_vectors.row(s).transpose();
    f += p.coef[s] * rbf_kernel(sv.data(), row, dim, gamma);
  }
  return f;
}

int SvmModel::predict_one(const double* row) const {
  std::vector<int> votes(classes.size(), 0);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const SvmPairModel& p = pairs[k];
    const int winner = decision(k, row) > 0.0 ? p.class_a : p.class_b;
    ++votes[std::lower_bound(classes.begin(), classes.end(), winner) - classes.begin()];
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < votes.size(); ++i) {
    if (votes[i] > votes[best]) best = i;
  }
  return classes[best];
}

std::vector<int> SvmModel::predict(const FeatureMatrix& features) const {
  if (classes.empty()) throw DataError("svm model is untrained");
  if (features.cols() != num_features()) throw ShapeError("svm: feature dimension mismatch");
  const FeatureMatrix x = scaler.means.size() ? scaler.apply(features) : features;
  std::vector<int> out(static_cast<std::size_t>(x.rows()));
  Eigen::VectorXd row(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    row = x.row(r).transpose();
    out[r] = predict_one(row.data());
  }
  return out;
}

SvmModel svm_train(const FeatureMatrix& x, std::span<const int> labels, double c, double gamma,
                   const SvmOptions& options) {
  if (static_cast<std::size_t>(x.rows()) != labels.size()) throw ShapeError("svm: label count differs from rows");
  SvmModel model;
  model.c = c;
  model.gamma = gamma;
  model.classes.assign(labels.begin(), labels.end());
  std::sort(model.classes.begin(), model.classes.end());
  model.classes.erase(std::unique(model.classes.begin(), model.classes.end()), model.classes.end());
  if (model.classes.size() < 2) throw DataError("svm: at least two classes are required");

  for (std::size_t a = 0; a < model.classes.size(); ++a) {
    for (std::size_t b = a + 1; b < model.classes.size(); ++b) {
      std::vector<Eigen::Index> rows;
      std::vector<int> y;
      for (std::size_t r = 0; r < labels.size(); ++r) {
        if (labels[r] == model.classes[a] || labels[r] == model.classes[b]) {
          rows.push_back(static_cast<Eigen::Index>(r));
          y.push_back(labels[r] == model.classes[a] ? 1 : -1);
        }
      }
      FeatureMatrix sub(static_cast<Eigen::Index>(rows.size()), x.cols());
      for (std::size_t r = 0; r < rows.size(); ++r) sub.row(r) = x.row(rows[r]);
      const BinarySvm bin = svm_train_binary(sub, y, c, gamma, options);
      SvmPairModel pair;
      pair.class_a = model.classes[a];
      pair.class_b = model.classes[b];
      pair.rho = bin.rho;
      pair.coef = bin.coef;
      pair.support_vectors.resize(static_cast<Eigen::Index>(bin.support.size()), x.cols());
      for (std::size_t s = 0; s < bin.support.size(); ++s) pair.support_vectors.row(s) = sub.row(bin.support[s]);
      model.converged = model.converged && bin.converged;
      model.pairs.push_back(std::move(pair));
    }
  }
  return model;
}

GridSearchResult svm_grid_search(const FeatureMatrix& train, std::span<const int> train_labels,
                                 const FeatureMatrix& val, std::span<const int> val_labels,
                                 std::span<const double> cs, std::span<const double> gammas,
                                 const SvmOptions& options) {
  if (static_cast<std::size_t>(val.rows()) != val_labels.size() || val.rows() == 0) {
    throw DataError("svm grid search needs a non-empty labeled validation set");
  }
  const FeatureScaler scaler = FeatureScaler::fit(train);
  const FeatureMatrix xt = scaler.apply(train);
  GridSearchResult result;
  bool have = false;
  for (double c : cs) {
    for (double g : gammas) {
      SvmModel m = svm_train(xt, train_labels, c, g, options);
      m.scaler = scaler;
      const auto pred = m.predict(val);
      long hits = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == val_labels[i];
      const GridPoint point{c, g, static_cast<double>(hits) / static_cast<double>(pred.size())};
      result.points.push_back(point);
      if (!have || point.accuracy > result.best.accuracy) {
        result.best = point;
        result.model = std::move(m);
        have = true;
      }
    }
  }
  if (!have) throw ConfigError("svm grid search: empty grid");
  return result;
}

void SvmModel::write(std::ostream& out) const {
  using namespace binio;
  write_magic(out, kSvmMagic);
  write_u32(out, kSvmFormatVersion);
  write_f64(out, c);
  write_f64(out, gamma);
  write_u32(out, converged ? 1 : 0);
  const auto dim = static_cast<std::uint32_t>(num_features());
  write_u32(out, dim);
  write_u32(out, static_cast<std::uint32_t>(scaler.means.size()));
  for (Eigen::Index i = 0; i < scaler.means.size(); ++i) {
    write_f64(out, scaler.means[i]);
    write_f64(out, scaler.stds[i]);
  }
  write_u32(out, static_cast<std::uint32_t>(classes.size()));
  for (int cl : classes) write_u32(out, static_cast<std::uint32_t>(cl));
  write_u32(out, static_cast<std::uint32_t>(pairs.size()));
  for (const SvmPairModel& p : pairs) {
    write_u32(out, static_cast<std::uint32_t>(p.class_a));
    write_u32(out, static_cast<std::uint32_t>(p.class_b));
    write_f64(out, p.rho);
    write_u32(out, static_cast<std::uint32_t>(p.coef.size()));
    for (std::size_t s = 0; s < p.coef.size(); ++s) {
      write_f64(out, p.coef[s]);
      for (std::uint32_t d = 0; d < dim; ++d) write_f64(out, p.support_vectors(static_cast<Eigen::Index>(s), d));
    }
  }
  if (!out) throw FormatError("failed writing SVM model");
}

SvmModel SvmModel::read(std::istream& in) {
  using namespace binio;
  expect_magic(in, kSvmMagic, "SVM model");
  const std::uint32_t version = read_u32(in);
  if (version != kSvmFormatVersion) throw FormatError("unsupported SVM model version " + std::to_string(version));
  SvmModel m;
  m.c = read_f64(in);
  m.gamma = read_f64(in);
  m.converged = read_u32(in) != 0;
  const std::uint32_t dim = read_u32(in);
  const std::uint32_t scaled = read_u32(in);
  if (scaled != 0 && scaled != dim) throw FormatError("SVM scaler size mismatch");
  m.scaler.means.resize(scaled);
  m.scaler.stds.resize(scaled);
  for (std::uint32_t i = 0; i < scaled; ++i) {
    m.scaler.means[i] = read_f64(in);
    m.scaler.stds[i] = read_f64(in);
  }
  const std::uint32_t nclass = read_u32(in);
  if (nclass < 2 || nclass > 1024) throw FormatError("SVM class count out of range");
  for (std::uint32_t i = 0; i < nclass; ++i) m.classes.push_back(static_cast<int>(read_u32(in)));
  const std::uint32_t npairs = read_u32(in);
  if (npairs != nclass * (nclass - 1) / 2) throw FormatError("SVM pair table size mismatch");
  for (std::uint32_t k = 0; k < npairs; ++k) {
    SvmPairModel p;
    p.class_a = static_cast<int>(read_u32(in));
    p.class_b = static_cast<int>(read_u32(in));
    p.rho = read_f64(in);
    const std::uint32_t nsv = read_u32(in);
    if (nsv > (1u << 24)) throw FormatError("SVM support vector count out of range");
    p.coef.resize(nsv);
    p.support_vectors.resize(nsv, dim);
    for (std::uint32_t s = 0; s < nsv; ++s) {
      p.coef[s] = read_f64(in);
      for (std::uint32_t d = 0; d < dim; ++d) p.support_vectors(s, d) = read_f64(in);
    }
    m.pairs.push_back(std::move(p));
  }
  return m;
}

void SvmModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write(out);
}

SvmModel SvmModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read(in);
}

}  // namespace sdcs::classical
