#pragma once

// Continual-learning metrics over an accuracy matrix A, where A(j, t) is the
// test accuracy on task t after training on task j. Task indices are
// 0-based; `k` names the last task trained.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "clewi/autograd.hpp"
#include "clewi/data.hpp"
#include "clewi/errors.hpp"
#include "clewi/models.hpp"

namespace clewi {

class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(std::size_t num_tasks)
      : n_(num_tasks), a_(num_tasks * num_tasks, std::numeric_limits<double>::quiet_NaN()) {}

  std::size_t num_tasks() const { return n_; }
  double& at(std::size_t after, std::size_t task) { return a_.at(index(after, task)); }
  double at(std::size_t after, std::size_t task) const { return a_.at(index(after, task)); }

  void set_row(std::size_t after, const std::vector<double>& row) {
    if (row.size() != n_) throw ShapeError("accuracy row has the wrong length");
    for (std::size_t t = 0; t < n_; ++t) at(after, t) = row[t];
  }

 private:
  std::size_t index(std::size_t after, std::size_t task) const {
    if (after >= n_ || task >= n_) throw ShapeError("accuracy matrix index out of range");
    return after * n_ + task;
  }

  std::size_t n_;
  std::vector<double> a_;
};

/// Unweighted mean of A(k, t) over t <= k.
inline double final_acc(const AccuracyMatrix& A, std::size_t k) {
  double s = 0.0;
  for (std::size_t t = 0; t <= k; ++t) s += A.at(k, t);
  return s / double(k + 1);
}

inline double last_task_acc(const AccuracyMatrix& A, std::size_t k) { return A.at(k, k); }

/// Mean over t < k of (max over t <= j <= k of A(j, t)) - A(k, t); 0 for k = 0.
inline double forgetting_measure(const AccuracyMatrix& A, std::size_t k) {
  if (k == 0) return 0.0;
  double s = 0.0;
  for (std::size_t t = 0; t < k; ++t) {
    double best = A.at(t, t);
    for (std::size_t j = t + 1; j <= k; ++j) best = std::max(best, A.at(j, t));
    s += best - A.at(k, t);
  }
  return s / double(k);
}

/// Summed increase of task losses since each task was learned:
/// sum over t < i of L(i, t) - L(t, t), with L laid out like A.
inline double loss_forgetting(const std::vector<std::vector<double>>& L, std::size_t i) {
  double s = 0.0;
  for (std::size_t t = 0; t < i; ++t) s += L.at(i).at(t) - L.at(t).at(t);
  return s;
}

inline constexpr std::size_t kEvalBatchSize = 256;

/// Class predicted by argmax over every logit (first index on ties).
inline std::vector<int> predict_labels(const ModelArch& arch, const ParamSet& params,
                                       const Dataset& data) {
  std::vector<int> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); i += kEvalBatchSize) {
    std::vector<std::size_t> idx;
    for (std::size_t k = i; k < std::min(data.size(), i + kEvalBatchSize); ++k) idx.push_back(k);
    const Tensor logits = predict(arch, params, data.gather(idx).x);
    for (std::size_t r = 0; r < logits.dim(0); ++r) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < logits.dim(1); ++c)
        if (logits.at(r, c) > logits.at(r, best)) best = c;
      out.push_back(int(best));
    }
  }
  return out;
}

inline double accuracy(const ModelArch& arch, const ParamSet& params, const Dataset& data) {
  if (data.empty()) throw DataError("accuracy of an empty dataset");
  const auto pred = predict_labels(arch, params, data);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == data.labels[i];
  return double(hit) / double(pred.size());
}

/// Eval-mode mean cross-entropy.
inline double mean_loss(const ModelArch& arch, const ParamSet& params, const Dataset& data) {
  if (data.empty()) throw DataError("loss of an empty dataset");
  double s = 0.0;
  for (std::size_t i = 0; i < data.size(); i += kEvalBatchSize) {
    std::vector<std::size_t> idx;
    for (std::size_t k = i; k < std::min(data.size(), i + kEvalBatchSize); ++k) idx.push_back(k);
    const Batch b = data.gather(idx);
    Tape<float> tape(false);
    auto logits = forward(tape, arch, params, tape.constant(b.x));
    s += double(ops::softmax_cross_entropy(logits, b.y).value()[0]) * double(b.size());
  }
  return s / double(data.size());
}

/// One accuracy-matrix row: accuracy on every task's test set.
inline std::vector<double> evaluate(const ModelArch& arch, const ParamSet& params,
                                    const std::vector<const Dataset*>& test_sets) {
  std::vector<double> row;
  for (const auto* d : test_sets) row.push_back(accuracy(arch, params, *d));
  return row;
}

/// Loss forgetting of `theta_i` from the checkpoints taken right after each
/// earlier task: sum over t < i of L(theta_i, D_t) - L(theta_t, D_t).
inline double loss_forgetting(const ModelArch& arch, const ParamSet& theta_i,
                              const std::vector<ParamSet>& checkpoints,
                              const std::vector<const Dataset*>& task_data) {
  if (checkpoints.size() > task_data.size())
    throw ShapeError("loss_forgetting: more checkpoints than tasks");
  double s = 0.0;
  for (std::size_t t = 0; t < checkpoints.size(); ++t)
    s += mean_loss(arch, theta_i, *task_data[t]) - mean_loss(arch, checkpoints[t], *task_data[t]);
  return s;
}

}  // namespace clewi
