#include "spotkit/eval/probe.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace spotkit::eval {

namespace {

using Mat = Eigen::MatrixXd;

Mat to_matrix(const std::vector<std::vector<double>>& rows, std::size_t d) {
  Mat m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != d) throw std::invalid_argument("probe: embeddings have different dimensions");
    for (std::size_t k = 0; k < d; ++k) m(Eigen::Index(i), Eigen::Index(k)) = rows[i][k];
  }
  return m;
}

// Largest eigenvalue of A^T A / n by power iteration from a fixed start.
double top_eigenvalue(const Mat& a) {
  Eigen::VectorXd v = Eigen::VectorXd::Ones(a.cols()).normalized();
  double lambda = 0;
  for (int it = 0; it < 200; ++it) {
    Eigen::VectorXd w = a.transpose() * (a * v) / double(a.rows());
    const double n = w.norm();
    if (n == 0) return 0;
    lambda = n;
    v = w / n;
  }
  return lambda;
}

}  // namespace

ClassifierReport linear_probe(const std::vector<std::vector<double>>& train_x, const std::vector<int>& train_y,
                              const std::vector<std::vector<double>>& test_x, const std::vector<int>& test_y,
                              const ProbeOptions& opts) {
  if (train_x.size() != train_y.size() || test_x.size() != test_y.size()) {
    throw std::invalid_argument("probe: embedding and label counts differ");
  }
  std::map<int, std::pair<std::size_t, std::size_t>> counts;
  for (int y : train_y) ++counts[y].first;
  for (int y : test_y) ++counts[y].second;
  if (counts.size() < 2) throw std::invalid_argument("probe: need at least 2 classes, got " + std::to_string(counts.size()));
  for (const auto& [c, n] : counts) {
    if (n.first < opts.min_per_class || n.second < opts.min_per_class) {
      throw std::invalid_argument("probe: class " + std::to_string(c) + " has " + std::to_string(n.first) + " train and " +
                                  std::to_string(n.second) + " test examples, need at least " +
                                  std::to_string(opts.min_per_class) + " of each");
    }
  }
  ClassifierReport r;
  std::map<int, Eigen::Index> slot;
  for (const auto& [c, n] : counts) {
    slot[c] = Eigen::Index(r.classes.size());
    r.classes.push_back(c);
  }
  const auto K = Eigen::Index(r.classes.size());
  const std::size_t d = train_x.front().size();

  Mat x = to_matrix(train_x, d);
  Mat xt = to_matrix(test_x, d);
  const Eigen::RowVectorXd mean = x.colwise().mean();
  Eigen::RowVectorXd sd = ((x.rowwise() - mean).array().square().colwise().mean()).sqrt();
  for (Eigen::Index k = 0; k < sd.size(); ++k) sd[k] = sd[k] > 1e-12 ? 1.0 / sd[k] : 0.0;
  auto standardize = [&](Mat& m) {
    m = (m.rowwise() - mean).array().rowwise() * sd.array();
    m.conservativeResize(Eigen::NoChange, m.cols() + 1);
    m.col(m.cols() - 1).setOnes();  // bias column
  };
  standardize(x);
  standardize(xt);

  const double n = double(x.rows());
  Mat y = Mat::Zero(x.rows(), K);
  for (std::size_t i = 0; i < train_y.size(); ++i) y(Eigen::Index(i), slot[train_y[i]]) = 1.0;

  const double step = 1.0 / (0.5 * top_eigenvalue(x) + opts.l2);
  Mat w = Mat::Zero(x.cols(), K);
  for (std::size_t it = 0; it < opts.iterations; ++it) {
    Mat z = x * w;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const double m = z.row(i).maxCoeff();
      z.row(i) = (z.row(i).array() - m).exp();
      z.row(i) /= z.row(i).sum();
    }
    Mat g = x.transpose() * (z - y) / n;
    g.topRows(g.rows() - 1) += opts.l2 * w.topRows(w.rows() - 1);
    w -= step * g;
  }

  r.confusion.assign(r.classes.size(), std::vector<std::size_t>(r.classes.size(), 0));
  const Mat scores = xt * w;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test_y.size(); ++i) {
    Eigen::Index pred;
    scores.row(Eigen::Index(i)).maxCoeff(&pred);
    const auto truth = slot[test_y[i]];
    ++r.confusion[std::size_t(truth)][std::size_t(pred)];
    correct += pred == truth;
  }
  r.accuracy = double(correct) / double(test_y.size());
  r.chance = 1.0 / double(K);
  return r;
}

ProbeReport style_probe(const std::vector<ProbeExample>& examples, const ProbeOptions& opts) {
  std::vector<std::vector<double>> tx, ex;
  std::vector<int> ts, es, tc, ec;
  for (const auto& e : examples) {
    (e.test ? ex : tx).push_back(e.x);
    (e.test ? es : ts).push_back(e.style);
    (e.test ? ec : tc).push_back(e.content);
  }
  ProbeReport r;
  r.n_train = tx.size();
  r.n_test = ex.size();
  r.style = linear_probe(tx, ts, ex, es, opts);
  r.content = linear_probe(tx, tc, ex, ec, opts);
  return r;
}

void to_json(nlohmann::json& j, const ClassifierReport& r) {
  j = {{"classes", r.classes}, {"accuracy", r.accuracy}, {"chance", r.chance}, {"confusion", r.confusion}};
}

void from_json(const nlohmann::json& j, ClassifierReport& r) {
  j.at("classes").get_to(r.classes);
  j.at("accuracy").get_to(r.accuracy);
  j.at("chance").get_to(r.chance);
  j.at("confusion").get_to(r.confusion);
}

void to_json(nlohmann::json& j, const ProbeReport& r) {
  j = {{"style", r.style}, {"content", r.content}, {"n_train", r.n_train}, {"n_test", r.n_test}};
}

void from_json(const nlohmann::json& j, ProbeReport& r) {
  j.at("style").get_to(r.style);
  j.at("content").get_to(r.content);
  j.at("n_train").get_to(r.n_train);
  j.at("n_test").get_to(r.n_test);
}

}  // namespace spotkit::eval
