#pragma once

#include <cstddef>
#include <vector>

#include <json.hpp>

namespace spotkit::eval {

struct ProbeExample {
  std::vector<double> x;  // utterance-mean style vector
  int style = 0;
  int content = 0;
  bool test = false;
};

struct ProbeOptions {
  double l2 = 1e-3;
  std::size_t iterations = 2000;
  std::size_t min_per_class = 5;
};

struct ClassifierReport {
  std::vector<int> classes;
  double accuracy = 0.0;  // on the test split
  double chance = 0.0;    // 1 / number of classes
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted], test split

  bool operator==(const ClassifierReport&) const = default;
};

struct ProbeReport {
  ClassifierReport style;
  ClassifierReport content;  // same embeddings, content labels
  std::size_t n_train = 0, n_test = 0;

  bool operator==(const ProbeReport&) const = default;
};

/// Multinomial logistic regression on standardized features, trained by full-batch
/// gradient descent on the train rows and scored on the test rows. Requires at least
/// two classes and `min_per_class` examples of every class in each split.
ClassifierReport linear_probe(const std::vector<std::vector<double>>& train_x, const std::vector<int>& train_y,
                              const std::vector<std::vector<double>>& test_x, const std::vector<int>& test_y,
                              const ProbeOptions& opts = {});

/// Style probe and content-leakage probe over the same embeddings.
ProbeReport style_probe(const std::vector<ProbeExample>& examples, const ProbeOptions& opts = {});

void to_json(nlohmann::json& j, const ClassifierReport& r);
void from_json(const nlohmann::json& j, ClassifierReport& r);
void to_json(nlohmann::json& j, const ProbeReport& r);
void from_json(const nlohmann::json& j, ProbeReport& r);

}  // namespace spotkit::eval
