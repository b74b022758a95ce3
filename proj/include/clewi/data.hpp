#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "clewi/errors.hpp"
#include "clewi/tensor.hpp"

namespace clewi {

struct Sample {
  Tensor x;
  int y = 0;
};

struct Batch {
  Tensor x;  ///< [N x sample_shape...]
  std::vector<int> y;

  std::size_t size() const { return y.size(); }
};

/// Labelled samples stored contiguously: sample i occupies
/// features[i * sample_size(), (i + 1) * sample_size()).
struct Dataset {
  Shape sample_shape;
  std::size_t num_classes = 0;
  std::vector<float> features;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::size_t sample_size() const { return shape_numel(sample_shape); }

  std::span<const float> features_of(std::size_t i) const {
    return {features.data() + i * sample_size(), sample_size()};
  }

  Sample sample(std::size_t i) const {
    auto f = features_of(i);
    return {Tensor(sample_shape, std::vector<float>(f.begin(), f.end())), labels.at(i)};
  }

  void push(std::span<const float> x, int y) {
    if (x.size() != sample_size()) throw ShapeError("dataset: sample size mismatch");
    if (y < 0 || std::size_t(y) >= num_classes)
      throw DataError("dataset: label " + std::to_string(y) + " outside [0, " +
                      std::to_string(num_classes) + ")");
    features.insert(features.end(), x.begin(), x.end());
    labels.push_back(y);
  }

  Batch gather(std::span<const std::size_t> idx) const {
    Shape s{idx.size()};
    s.insert(s.end(), sample_shape.begin(), sample_shape.end());
    Batch b{Tensor(s), {}};
    b.y.reserve(idx.size());
    const std::size_t d = sample_size();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      auto f = features_of(idx[k]);
      std::copy(f.begin(), f.end(), b.x.data() + k * d);
      b.y.push_back(labels[idx[k]]);
    }
    return b;
  }

  Batch all() const {
    std::vector<std::size_t> idx(size());
    std::iota(idx.begin(), idx.end(), 0);
    return gather(idx);
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out{sample_shape, num_classes, {}, {}};
    for (auto i : idx) out.push(features_of(i), labels[i]);
    return out;
  }

  /// Appends every sample of `other` (same sample shape and class count).
  void append(const Dataset& other) {
    if (other.sample_shape != sample_shape || other.num_classes != num_classes)
      throw ShapeError("dataset: cannot append incompatible dataset");
    features.insert(features.end(), other.features.begin(), other.features.end());
    labels.insert(labels.end(), other.labels.begin(), other.labels.end());
  }
};

struct LabeledSplit {
  Dataset train;
  Dataset test;
};

// ---------------------------------------------------------------------------
// Task streams

struct TaskData {
  std::vector<int> classes;
  Dataset train;
  Dataset test;
};

struct TaskStream {
  std::vector<TaskData> tasks;
  std::size_t classes_per_task = 0;
  std::vector<int> class_order;
  std::uint64_t seed = 0;

  std::size_t num_tasks() const { return tasks.size(); }
};

/// Shuffles the class order with `seed`, then chunks it contiguously into
/// `num_tasks` tasks of equal class count.
inline TaskStream split_by_class(const LabeledSplit& data, std::size_t num_tasks,
                                 std::uint64_t seed) {
  const std::size_t K = data.train.num_classes;
  if (num_tasks == 0 || K % num_tasks != 0)
    throw DataError("split_by_class: " + std::to_string(K) + " classes cannot be split into " +
                    std::to_string(num_tasks) + " equal tasks");
  TaskStream s;
  s.seed = seed;
  s.classes_per_task = K / num_tasks;
  s.class_order.resize(K);
  std::iota(s.class_order.begin(), s.class_order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(s.class_order.begin(), s.class_order.end(), rng);

  std::vector<std::size_t> task_of(K);
  for (std::size_t i = 0; i < K; ++i)
    task_of[std::size_t(s.class_order[i])] = i / s.classes_per_task;

  s.tasks.resize(num_tasks);
  for (std::size_t t = 0; t < num_tasks; ++t) {
    auto& task = s.tasks[t];
    task.classes.assign(s.class_order.begin() + std::ptrdiff_t(t * s.classes_per_task),
                        s.class_order.begin() + std::ptrdiff_t((t + 1) * s.classes_per_task));
    task.train = Dataset{data.train.sample_shape, K, {}, {}};
    task.test = Dataset{data.test.sample_shape, K, {}, {}};
  }
  for (std::size_t i = 0; i < data.train.size(); ++i)
    s.tasks[task_of[std::size_t(data.train.labels[i])]].train.push(data.train.features_of(i),
                                                                   data.train.labels[i]);
  for (std::size_t i = 0; i < data.test.size(); ++i)
    s.tasks[task_of[std::size_t(data.test.labels[i])]].test.push(data.test.features_of(i),
                                                                 data.test.labels[i]);
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian blobs

struct BlobOptions {
  std::size_t num_classes = 10;
  std::size_t dim = 32;
  std::size_t n_per_class = 300;
  /// Distance of each class mean from the origin.
  double separation = 3.0;
  /// Isotropic noise standard deviation.
  double noise = 1.0;
  std::uint64_t seed = 0;
};

/// Class means are random unit directions scaled by `separation`; samples
/// add isotropic Gaussian noise. Samples are ordered class by class.
inline Dataset synth_blobs(const BlobOptions& o) {
  if (o.dim < 2) throw DataError("synth_blobs: dim must be >= 2");
  std::mt19937_64 rng(o.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> means(o.num_classes, std::vector<double>(o.dim));
  for (auto& m : means) {
    double norm = 0.0;
    for (auto& v : m) {
      v = normal(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : m) v = v / norm * o.separation;
  }
  Dataset d{{o.dim}, o.num_classes, {}, {}};
  d.features.reserve(o.num_classes * o.n_per_class * o.dim);
  std::vector<float> x(o.dim);
  for (std::size_t c = 0; c < o.num_classes; ++c)
    for (std::size_t i = 0; i < o.n_per_class; ++i) {
      for (std::size_t k = 0; k < o.dim; ++k)
        x[k] = static_cast<float>(means[c][k] + o.noise * normal(rng));
      d.push(x, int(c));
    }
  return d;
}

/// Deterministic stratified split: within each class, every `ratio + 1`-th
/// sample goes to test, so train:test is ratio:1.
inline LabeledSplit split_train_test(const Dataset& d, std::size_t ratio = 5) {
  LabeledSplit s{Dataset{d.sample_shape, d.num_classes, {}, {}},
                 Dataset{d.sample_shape, d.num_classes, {}, {}}};
  std::vector<std::size_t> seen(d.num_classes, 0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const int y = d.labels[i];
    auto& target = (seen[std::size_t(y)]++ % (ratio + 1) == ratio) ? s.test : s.train;
    target.push(d.features_of(i), y);
  }
  return s;
}

// ---------------------------------------------------------------------------
// IDX files

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

struct Normalization {
  float mean = 0.0f;
  float stdev = 1.0f;
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off,
                               const std::string& path) {
  if (b.size() < off + 4) throw FormatError("idx: truncated header in " + path);
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

inline void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(std::uint8_t(v >> s));
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& b) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
}

}  // namespace detail

/// Reads an unsigned-byte IDX image file (N x rows x cols) and its label file.
/// Pixels are scaled to [0, 1], then normalised as (p - mean) / stdev.
/// `num_classes` 0 means one more than the largest label.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        Normalization norm = {}, std::size_t num_classes = 0) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  if (detail::read_be32(img, 0, images_path) != kIdxImagesMagic)
    throw FormatError("idx: bad image magic in " + images_path);
  if (detail::read_be32(lab, 0, labels_path) != kIdxLabelsMagic)
    throw FormatError("idx: bad label magic in " + labels_path);
  const std::size_t n = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t n_labels = detail::read_be32(lab, 4, labels_path);
  if (n != n_labels)
    throw DataError("idx: " + std::to_string(n) + " images but " + std::to_string(n_labels) +
                    " labels");
  if (img.size() != 16 + n * rows * cols)
    throw FormatError("idx: image payload size mismatch in " + images_path);
  if (lab.size() != 8 + n)
    throw FormatError("idx: label payload size mismatch in " + labels_path);

  std::size_t K = num_classes;
  if (K == 0)
    for (std::size_t i = 0; i < n; ++i) K = std::max<std::size_t>(K, lab[8 + i] + 1u);
  Dataset d{{1, rows, cols}, K, {}, {}};
  d.features.reserve(n * rows * cols);
  std::vector<float> x(rows * cols);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < rows * cols; ++p)
      x[p] = (float(img[16 + i * rows * cols + p]) / 255.0f - norm.mean) / norm.stdev;
    d.push(x, lab[8 + i]);
  }
  return d;
}

inline void write_idx_images(const std::string& path, std::size_t rows, std::size_t cols,
                             const std::vector<std::uint8_t>& pixels) {
  if (rows * cols == 0 || pixels.size() % (rows * cols) != 0)
    throw ShapeError("write_idx_images: pixel count not a multiple of rows * cols");
  std::vector<std::uint8_t> b;
  detail::put_be32(b, kIdxImagesMagic);
  detail::put_be32(b, std::uint32_t(pixels.size() / (rows * cols)));
  detail::put_be32(b, std::uint32_t(rows));
  detail::put_be32(b, std::uint32_t(cols));
  b.insert(b.end(), pixels.begin(), pixels.end());
  detail::write_file(path, b);
}

inline void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels) {
  std::vector<std::uint8_t> b;
  detail::put_be32(b, kIdxLabelsMagic);
  detail::put_be32(b, std::uint32_t(labels.size()));
  b.insert(b.end(), labels.begin(), labels.end());
  detail::write_file(path, b);
}

// ---------------------------------------------------------------------------
// Batching

/// Mini-batch index generator: one seeded shuffle per epoch, final partial
/// batch kept.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
      : n_(n), batch_(batch_size), rng_(seed) {
    if (batch_size == 0) throw ShapeError("batch size must be >= 1");
  }

  std::vector<std::vector<std::size_t>> next_epoch() {
    std::vector<std::size_t> order(n_);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng_);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < n_; i += batch_)
      out.emplace_back(order.begin() + std::ptrdiff_t(i),
                       order.begin() + std::ptrdiff_t(std::min(n_, i + batch_)));
    return out;
  }

 private:
  std::size_t n_;
  std::size_t batch_;
  std::mt19937_64 rng_;
};

}  // namespace clewi
