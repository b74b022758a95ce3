#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "clewi/data.hpp"
#include "clewi/errors.hpp"
#include "clewi/tensor.hpp"

namespace clewi {

struct ReplayBatch {
  Tensor x;
  std::vector<int> y;
  /// Stored logits [N x K] when the buffer keeps them.
  std::optional<Tensor> logits;
  std::vector<std::size_t> slots;

  std::size_t size() const { return y.size(); }
};

/// Fixed-capacity reservoir of past samples, optionally with the logits the
/// model produced when each sample was stored.
class MemoryBuffer {
 public:
  MemoryBuffer(std::size_t capacity, Shape sample_shape, std::uint64_t seed,
               std::size_t logit_dim = 0)
      : capacity_(capacity),
        sample_shape_(std::move(sample_shape)),
        sample_size_(shape_numel(sample_shape_)),
        logit_dim_(logit_dim),
        rng_(seed) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }
  std::uint64_t seen_count() const { return seen_; }
  bool stores_logits() const { return logit_dim_ > 0; }
  const Shape& sample_shape() const { return sample_shape_; }
  const std::vector<int>& labels() const { return labels_; }

  /// Offers one sample. Below capacity it is appended; otherwise a slot
  /// j ~ U[0, seen_count] is drawn and replaced when j < capacity.
  void reservoir_update(std::span<const float> x, int y,
                        std::span<const float> logits = {}) {
    if (x.size() != sample_size_) throw ShapeError("buffer: sample size mismatch");
    if (stores_logits() && logits.size() != logit_dim_)
      throw ShapeError("buffer: logits size mismatch");
    std::optional<std::size_t> slot;
    if (size() < capacity_) {
      slot = size();
      features_.resize(features_.size() + sample_size_);
      labels_.push_back(0);
      logits_.resize(logits_.size() + logit_dim_);
    } else if (capacity_ > 0) {
      std::uniform_int_distribution<std::uint64_t> pick(0, seen_);
      const std::uint64_t j = pick(rng_);
      if (j < capacity_) slot = std::size_t(j);
    }
    ++seen_;
    if (!slot) return;
    std::copy(x.begin(), x.end(), features_.begin() + std::ptrdiff_t(*slot * sample_size_));
    labels_[*slot] = y;
    if (stores_logits())
      std::copy(logits.begin(), logits.end(), logits_.begin() + std::ptrdiff_t(*slot * logit_dim_));
  }

  /// Uniform draw with replacement over occupied slots; nullopt when empty.
  std::optional<ReplayBatch> sample_batch(std::size_t batch_size, std::mt19937_64& rng) const {
    if (empty()) return std::nullopt;
    std::uniform_int_distribution<std::size_t> pick(0, size() - 1);
    std::vector<std::size_t> slots(batch_size);
    for (auto& s : slots) s = pick(rng);
    return gather(std::move(slots));
  }

  /// Every occupied slot exactly once, in slot order.
  std::vector<ReplayBatch> iterate_all(std::size_t batch_size) const {
    if (batch_size == 0) throw ShapeError("batch size must be >= 1");
    std::vector<ReplayBatch> out;
    for (std::size_t i = 0; i < size(); i += batch_size) {
      std::vector<std::size_t> slots;
      for (std::size_t k = i; k < std::min(size(), i + batch_size); ++k) slots.push_back(k);
      out.push_back(gather(std::move(slots)));
    }
    return out;
  }

  ReplayBatch gather(std::vector<std::size_t> slots) const {
    Shape s{slots.size()};
    s.insert(s.end(), sample_shape_.begin(), sample_shape_.end());
    ReplayBatch b{Tensor(s), {}, std::nullopt, std::move(slots)};
    if (stores_logits()) b.logits = Tensor({b.slots.size(), logit_dim_});
    for (std::size_t k = 0; k < b.slots.size(); ++k) {
      const std::size_t i = b.slots[k];
      if (i >= size()) throw ShapeError("buffer: slot out of range");
      std::copy_n(features_.begin() + std::ptrdiff_t(i * sample_size_), sample_size_,
                  b.x.data() + k * sample_size_);
      b.y.push_back(labels_[i]);
      if (stores_logits())
        std::copy_n(logits_.begin() + std::ptrdiff_t(i * logit_dim_), logit_dim_,
                    b.logits->data() + k * logit_dim_);
    }
    return b;
  }

 private:
  std::size_t capacity_;
  Shape sample_shape_;
  std::size_t sample_size_;
  std::size_t logit_dim_;
  std::mt19937_64 rng_;
  std::uint64_t seen_ = 0;
  std::vector<float> features_;
  std::vector<int> labels_;
  std::vector<float> logits_;
};

}  // namespace clewi
