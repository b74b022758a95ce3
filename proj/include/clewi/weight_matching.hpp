#pragma once

// Activation matching, permutation, interpolation and repair of two networks
// of the same architecture.
//
// Permutation convention: perm[i] is the channel of θ_P matched to channel i
// of θ. Applying it to θ_P moves old channel perm[i] to position i on every
// producer and consumer axis of the group.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "clewi/errors.hpp"
#include "clewi/lsap.hpp"
#include "clewi/models.hpp"
#include "clewi/replay_buffer.hpp"

namespace clewi {

/// Batch size for activation statistics and batch-norm reset passes.
inline constexpr std::size_t kMatchBatchSize = 32;

/// Feature map used to build the correlation matrix for matching.
inline constexpr HookSite kMatchSite = HookSite::Activation;

struct Permutation {
  /// Indexed by group position in the PermutationSpec.
  std::vector<std::vector<std::size_t>> groups;

  static Permutation identity(const PermutationSpec& spec) {
    Permutation p;
    for (const auto& g : spec.groups) {
      std::vector<std::size_t> id(g.size);
      std::iota(id.begin(), id.end(), 0);
      p.groups.push_back(std::move(id));
    }
    return p;
  }

  static Permutation random(const PermutationSpec& spec, std::mt19937_64& rng) {
    Permutation p = identity(spec);
    for (auto& g : p.groups) std::shuffle(g.begin(), g.end(), rng);
    return p;
  }

  Permutation inverse() const {
    Permutation inv;
    for (const auto& g : groups) {
      std::vector<std::size_t> r(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) r[g[i]] = i;
      inv.groups.push_back(std::move(r));
    }
    return inv;
  }

  bool is_identity() const {
    for (const auto& g : groups)
      for (std::size_t i = 0; i < g.size(); ++i)
        if (g[i] != i) return false;
    return true;
  }

  friend bool operator==(const Permutation&, const Permutation&) = default;
};

struct ChannelMoments {
  std::vector<double> mean;
  /// Population variance.
  std::vector<double> var;
};

struct GroupStats {
  /// Pearson correlation, θ channels as rows and θ_P channels as columns,
  /// at the matching site.
  BasicTensor<double> correlation;
  ChannelMoments theta, theta_p;
  /// Moments of the producer's raw output (before any nonlinearity).
  ChannelMoments producer_theta, producer_theta_p;
};

struct ActivationStats {
  std::vector<GroupStats> groups;
  /// Buffer samples forwarded through each network.
  std::size_t sample_count = 0;
};

struct InterpolationResult {
  ParamSet params;
  double alpha = 0.0;
  Permutation permutation;
  /// Mean over channels of the correlation between each θ channel and the
  /// θ_P channel matched to it.
  std::vector<double> mean_matched_correlation;
};

namespace detail {

// Reindexes `axis` of t so that new slice i is old slice perm[i].
inline Tensor permute_axis(const Tensor& t, std::size_t axis, const std::vector<std::size_t>& perm) {
  const auto& s = t.shape();
  if (axis >= s.size() || s[axis] != perm.size())
    throw ShapeError("permute_axis: permutation length does not match axis size");
  std::size_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < axis; ++k) outer *= s[k];
  for (std::size_t k = axis + 1; k < s.size(); ++k) inner *= s[k];
  const std::size_t n = s[axis];
  Tensor out(s);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(t.data() + (o * n + perm[i]) * inner, inner, out.data() + (o * n + i) * inner);
  return out;
}

// Paired first and second moments of one group's channels, with or without
// the cross term.
class PairAccumulator {
 public:
  PairAccumulator(std::size_t channels, bool cross)
      : c_(channels), sa_(c_), sb_(c_), saa_(c_), sbb_(c_), sab_(cross ? c_ * c_ : 0) {}

  void add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape() || a.rank() < 2 || a.dim(1) != c_)
      throw ShapeError("activation statistics: feature maps do not match the group");
    const std::size_t n = a.dim(0);
    const std::size_t spatial = a.size() / (n * c_);
    std::vector<double> va(c_), vb(c_);
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t p = 0; p < spatial; ++p) {
        for (std::size_t c = 0; c < c_; ++c) {
          va[c] = a.data()[(s * c_ + c) * spatial + p];
          vb[c] = b.data()[(s * c_ + c) * spatial + p];
          sa_[c] += va[c];
          sb_[c] += vb[c];
          saa_[c] += va[c] * va[c];
          sbb_[c] += vb[c] * vb[c];
        }
        if (!sab_.empty()) {
          for (std::size_t i = 0; i < c_; ++i) {
            if (va[i] == 0.0) continue;
            double* row = sab_.data() + i * c_;
            for (std::size_t j = 0; j < c_; ++j) row[j] += va[i] * vb[j];
          }
        }
        ++count_;
      }
    }
  }

  ChannelMoments moments(bool second) const {
    const auto& s1 = second ? sb_ : sa_;
    const auto& s2 = second ? sbb_ : saa_;
    ChannelMoments m{std::vector<double>(c_), std::vector<double>(c_)};
    const double n = double(count_);
    for (std::size_t c = 0; c < c_; ++c) {
      m.mean[c] = s1[c] / n;
      m.var[c] = std::max(0.0, s2[c] / n - m.mean[c] * m.mean[c]);
      // Cancellation leaves rounding noise on constant channels.
      if (m.var[c] <= 1e-9 * m.mean[c] * m.mean[c]) m.var[c] = 0.0;
    }
    return m;
  }

  BasicTensor<double> correlation() const {
    const auto ma = moments(false), mb = moments(true);
    BasicTensor<double> r({c_, c_});
    const double n = double(count_);
    for (std::size_t i = 0; i < c_; ++i) {
      for (std::size_t j = 0; j < c_; ++j) {
        if (ma.var[i] == 0.0 || mb.var[j] == 0.0) continue;
        const double cov = sab_[i * c_ + j] / n - ma.mean[i] * mb.mean[j];
        r.data()[i * c_ + j] = std::clamp(cov / std::sqrt(ma.var[i] * mb.var[j]), -1.0, 1.0);
      }
    }
    return r;
  }

 private:
  std::size_t c_;
  std::vector<double> sa_, sb_, saa_, sbb_, sab_;
  std::size_t count_ = 0;
};

struct HookRecord {
  std::size_t group;
  HookSite site;
  Tensor value;
};

inline std::vector<HookRecord> record_hooks(const ModelArch& arch, const ParamSet& params,
                                            const Tensor& x) {
  std::vector<HookRecord> out;
  ActivationHook<float> hook = [&](std::size_t g, HookSite site, const Tensor& v) {
    out.push_back({g, site, v});
  };
  ForwardOptions<float> opt;
  opt.hook = &hook;
  Tape<float> tape(false);
  forward(tape, arch, params, tape.constant(x), opt);
  return out;
}

inline void require_same_arch(const ParamSet& a, const ParamSet& b) {
  if (a.arch_id != b.arch_id || a.width != b.width || a.tensors.size() != b.tensors.size())
    throw ShapeError("networks do not share an architecture");
  for (const auto& [name, t] : a.tensors)
    if (b.at(name).shape() != t.shape())
      throw ShapeError("networks differ in the shape of '" + name + "'");
}

}  // namespace detail

/// Applies `pi` to every axis of every group. Consumer axes move with their
/// producer, so the network function is unchanged.
inline ParamSet apply_permutation(const ParamSet& params, const Permutation& pi,
                                  const PermutationSpec& spec) {
  if (pi.groups.size() != spec.groups.size())
    throw ShapeError("permutation does not cover every group of the spec");
  ParamSet out = params;
  for (std::size_t g = 0; g < spec.groups.size(); ++g) {
    const auto& perm = pi.groups[g];
    if (perm.size() != spec.groups[g].size)
      throw ShapeError("permutation for group '" + spec.groups[g].name + "' has wrong length");
    for (const auto& ax : spec.groups[g].axes)
      out.at(ax.param) = detail::permute_axis(out.at(ax.param), ax.axis, perm);
  }
  return out;
}

/// Channel moments and cross-network correlations of every permutation group
/// over one pass of the buffer, both networks in eval mode.
inline ActivationStats collect_activations(const ModelArch& arch, const ParamSet& theta,
                                           const ParamSet& theta_p, const MemoryBuffer& buffer,
                                           const PermutationSpec& spec,
                                           std::size_t batch_size = kMatchBatchSize) {
  detail::require_same_arch(theta, theta_p);
  if (buffer.empty()) throw EmptyBufferError("collect_activations: buffer is empty");
  std::vector<detail::PairAccumulator> match, producer;
  for (const auto& g : spec.groups) {
    match.emplace_back(g.size, true);
    producer.emplace_back(g.size, false);
  }
  ActivationStats stats;
  for (const auto& batch : buffer.iterate_all(batch_size)) {
    const auto ra = detail::record_hooks(arch, theta, batch.x);
    const auto rb = detail::record_hooks(arch, theta_p, batch.x);
    for (std::size_t k = 0; k < ra.size(); ++k) {
      const auto& rec = ra[k];
      if (rec.group >= spec.groups.size()) throw ShapeError("hook reported an unknown group");
      if (rec.site == kMatchSite) match[rec.group].add(rec.value, rb[k].value);
      if (rec.site == HookSite::Producer) producer[rec.group].add(rec.value, rb[k].value);
    }
    stats.sample_count += batch.size();
  }
  for (std::size_t g = 0; g < spec.groups.size(); ++g) {
    stats.groups.push_back({match[g].correlation(), match[g].moments(false),
                            match[g].moments(true), producer[g].moments(false),
                            producer[g].moments(true)});
  }
  return stats;
}

/// Maximum-correlation matching per group, solved independently.
inline Permutation permutation_from_stats(const ActivationStats& stats) {
  Permutation pi;
  for (const auto& g : stats.groups)
    pi.groups.push_back(solve_lsap(g.correlation, Objective::Maximize).perm);
  return pi;
}

inline Permutation calc_permutation(const ModelArch& arch, const ParamSet& theta,
                                    const ParamSet& theta_p, const MemoryBuffer& buffer,
                                    const PermutationSpec& spec,
                                    std::size_t batch_size = kMatchBatchSize) {
  return permutation_from_stats(
      collect_activations(arch, theta, theta_p, buffer, spec, batch_size));
}

/// Reorders the θ_P side of `stats` as if θ_P had been permuted by `pi`.
inline ActivationStats permute_stats(const ActivationStats& stats, const Permutation& pi) {
  ActivationStats out = stats;
  for (std::size_t g = 0; g < stats.groups.size(); ++g) {
    const auto& perm = pi.groups.at(g);
    auto& dst = out.groups[g];
    const auto& src = stats.groups[g];
    dst.correlation = src.correlation;
    const std::size_t c = perm.size();
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t j = 0; j < c; ++j)
        dst.correlation.data()[i * c + j] = src.correlation.data()[i * c + perm[j]];
    for (std::size_t j = 0; j < c; ++j) {
      dst.theta_p.mean[j] = src.theta_p.mean[perm[j]];
      dst.theta_p.var[j] = src.theta_p.var[perm[j]];
      dst.producer_theta_p.mean[j] = src.producer_theta_p.mean[perm[j]];
      dst.producer_theta_p.var[j] = src.producer_theta_p.var[perm[j]];
    }
  }
  return out;
}

inline std::vector<double> mean_matched_correlation(const ActivationStats& stats,
                                                    const Permutation& pi) {
  std::vector<double> out;
  for (std::size_t g = 0; g < stats.groups.size(); ++g) {
    const auto& perm = pi.groups.at(g);
    const auto& r = stats.groups[g].correlation;
    double s = 0.0;
    for (std::size_t i = 0; i < perm.size(); ++i) s += r.data()[i * perm.size() + perm[i]];
    out.push_back(perm.empty() ? 0.0 : s / double(perm.size()));
  }
  return out;
}

/// (1 - alpha) * theta + alpha * other for every tensor, running statistics
/// included. The endpoints are returned as exact copies.
inline ParamSet interpolate(const ParamSet& theta, const ParamSet& other, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("interpolate: alpha must lie in [0, 1]");
  detail::require_same_arch(theta, other);
  if (alpha == 0.0) return theta;
  if (alpha == 1.0) return other;
  ParamSet out = theta;
  for (auto& [name, t] : out.tensors) {
    const auto& b = other.at(name);
    for (std::size_t k = 0; k < t.size(); ++k)
      t.data()[k] = static_cast<float>((1.0 - alpha) * double(t.data()[k]) +
                                       alpha * double(b.data()[k]));
  }
  return out;
}

/// Resets every running mean to 0 and variance to 1, then recomputes them
/// from one pass over the buffer. Batch k is blended in with momentum
/// 1 / (k + 1), so the result is the average of the per-batch moments.
inline ParamSet update_batchnorm(const ModelArch& arch, const ParamSet& params,
                                 const MemoryBuffer& buffer,
                                 std::size_t batch_size = kMatchBatchSize) {
  if (!arch.has_batchnorm()) throw Error("update_batchnorm: architecture has no batch norm");
  if (buffer.empty()) throw EmptyBufferError("update_batchnorm: buffer is empty");
  ParamSet out = params;
  for (auto& [name, t] : out.tensors) {
    if (name.ends_with(".running_mean")) t.fill(0.0f);
    if (name.ends_with(".running_var")) t.fill(1.0f);
  }
  const auto batches = buffer.iterate_all(batch_size);
  for (std::size_t k = 0; k < batches.size(); ++k) {
    ForwardOptions<float> opt;
    opt.mode = BnMode::Collect;
    opt.bn_momentum = 1.0 / double(k + 1);
    Tape<float> tape(false);
    forward(tape, arch, out, tape.constant(batches[k].x), opt);
  }
  return out;
}

/// Rescales and shifts every hidden unit of a batch-norm-free network so
/// that its pre-activation mean and variance on the buffer equal
/// (1 - alpha) * θ's + alpha * π(θ_P)'s. `stats` must already be expressed
/// in θ's channel order (see permute_stats). Layers are corrected front to
/// back, each measured after the earlier corrections.
inline ParamSet repair_affine(const ModelArch& arch, const ParamSet& theta_alpha,
                              const ActivationStats& stats, double alpha,
                              const MemoryBuffer& buffer,
                              std::size_t batch_size = kMatchBatchSize) {
  if (arch.has_batchnorm()) throw Error("repair_affine: architecture has batch norm");
  if (buffer.empty()) throw EmptyBufferError("repair_affine: buffer is empty");
  const auto spec = permutation_spec_of(arch);
  if (stats.groups.size() != spec.groups.size())
    throw ShapeError("repair_affine: statistics do not match the architecture");
  ParamSet out = theta_alpha;
  for (std::size_t g = 0; g < spec.groups.size(); ++g) {
    std::string weight, bias;
    for (const auto& ax : spec.groups[g].axes) {
      if (ax.axis != 0) continue;
      if (out.at(ax.param).rank() == 2 && weight.empty()) weight = ax.param;
      if (out.at(ax.param).rank() == 1 && bias.empty()) bias = ax.param;
    }
    if (weight.empty() || bias.empty())
      throw ShapeError("repair_affine: group '" + spec.groups[g].name + "' has no linear producer");

    const auto current = collect_activations(arch, out, out, buffer, spec, batch_size);
    const auto& cur = current.groups[g].producer_theta;
    const auto& a = stats.groups[g].producer_theta;
    const auto& b = stats.groups[g].producer_theta_p;
    auto& W = out.at(weight);
    auto& B = out.at(bias);
    const std::size_t fan_in = W.dim(1);
    for (std::size_t c = 0; c < W.dim(0); ++c) {
      const double target_mean = (1.0 - alpha) * a.mean[c] + alpha * b.mean[c];
      const double target_var = (1.0 - alpha) * a.var[c] + alpha * b.var[c];
      const double s =
          (target_var > 0.0 && cur.var[c] > 0.0) ? std::sqrt(target_var / cur.var[c]) : 1.0;
      for (std::size_t k = 0; k < fan_in; ++k)
        W.data()[c * fan_in + k] = static_cast<float>(s * W.data()[c * fan_in + k]);
      B.data()[c] =
          static_cast<float>(s * B.data()[c] + (target_mean - s * cur.mean[c]));
    }
  }
  return out;
}

/// Permute θ_P onto θ, interpolate, then restore activation statistics:
/// batch-norm reset for batch-norm networks, affine repair otherwise.
inline InterpolationResult clewi_task_step(const ModelArch& arch, const ParamSet& theta,
                                           const ParamSet& theta_p, const MemoryBuffer& buffer,
                                           double alpha,
                                           std::size_t batch_size = kMatchBatchSize) {
  const auto spec = permutation_spec_of(arch);
  const auto stats = collect_activations(arch, theta, theta_p, buffer, spec, batch_size);
  InterpolationResult r;
  r.alpha = alpha;
  r.permutation = permutation_from_stats(stats);
  r.mean_matched_correlation = mean_matched_correlation(stats, r.permutation);
  const ParamSet aligned = apply_permutation(theta_p, r.permutation, spec);
  const ParamSet mixed = interpolate(theta, aligned, alpha);
  r.params = arch.has_batchnorm()
                 ? update_batchnorm(arch, mixed, buffer, batch_size)
                 : repair_affine(arch, mixed, permute_stats(stats, r.permutation), alpha, buffer,
                                 batch_size);
  return r;
}

}  // namespace clewi
