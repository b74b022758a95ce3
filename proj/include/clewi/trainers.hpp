#pragma once

// Task-level training loops: finetune, joint, ER, aGEM and DER++.
//
// Every loop shares the same skeleton. For each mini-batch of the current
// task: build the method's loss on a fresh tape, take one SGD step, then
// offer each new sample to the buffer. Mean-reduced losses throughout.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "clewi/autograd.hpp"
#include "clewi/data.hpp"
#include "clewi/errors.hpp"
#include "clewi/models.hpp"
#include "clewi/replay_buffer.hpp"

namespace clewi {

enum class Method { Finetune, Joint, Er, Agem, Derpp };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::Finetune: return "finetune";
    case Method::Joint: return "joint";
    case Method::Er: return "er";
    case Method::Agem: return "agem";
    case Method::Derpp: return "derpp";
  }
  return "?";
}

/// Method names recognised in configs but not implemented.
inline constexpr std::string_view kUnimplementedMethods[] = {"oewc", "si",  "icarl", "gdumb",
                                                             "er-ace", "mir", "bic"};

inline Method parse_method(std::string_view s) {
  for (auto m : {Method::Finetune, Method::Joint, Method::Er, Method::Agem, Method::Derpp})
    if (s == to_string(m)) return m;
  for (auto u : kUnimplementedMethods)
    if (s == u) throw ConfigError("method '" + std::string(s) + "' is not implemented");
  throw ConfigError("unknown method '" + std::string(s) + "'");
}

struct TrainConfig {
  Method method = Method::Er;
  double lr = 0.03;
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  std::size_t replay_batch_size = 32;
  double momentum = 0.0;
  double derpp_mse_weight = 0.5;
  double derpp_ce_weight = 0.5;
  /// When false the buffer is still filled but never trained on.
  bool rehearsal = true;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr must be >= 0");
    if (batch_size == 0 || replay_batch_size == 0) throw ConfigError("batch sizes must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must be in [0, 1)");
    if (!(derpp_mse_weight >= 0.0) || !(derpp_ce_weight >= 0.0))
      throw ConfigError("DER++ weights must be >= 0");
  }

  bool uses_logits() const { return method == Method::Derpp; }
};

struct TaskReport {
  ParamSet params;
  /// Mean total loss per epoch.
  std::vector<double> epoch_loss;
  std::size_t steps = 0;
  /// aGEM: how many steps projected, and the worst
  /// |<g', g_ref>| / (|g| |g_ref|) after projection.
  std::size_t projections = 0;
  double max_projection_residual = 0.0;
  double wall_seconds = 0.0;
};

enum class TraceEvent { LossTerm, Step, BufferUpdate, Projection };

struct TraceRecord {
  TraceEvent event;
  std::size_t step;
  double value = 0.0;
};

/// Optional observer of what a training loop does, in order.
using TraceHook = std::function<void(const TraceRecord&)>;

using GradMap = std::map<std::string, Tensor>;

struct ProjectionResult {
  bool fired = false;
  double dot_before = 0.0;
  /// |<g', g_ref>| / (|g| |g_ref|) after projection; 0 when not fired.
  double residual = 0.0;
};

/// aGEM rule: when <g, g_ref> < 0, remove the component of g along g_ref.
/// Inner products are accumulated in double over every tensor of `g`.
inline ProjectionResult agem_project(GradMap& g, const GradMap& g_ref) {
  double dot = 0.0, ref_sq = 0.0, g_sq = 0.0;
  for (const auto& [name, t] : g) {
    const auto& r = g_ref.at(name);
    for (std::size_t k = 0; k < t.size(); ++k) {
      dot += double(t.data()[k]) * r.data()[k];
      ref_sq += double(r.data()[k]) * r.data()[k];
      g_sq += double(t.data()[k]) * t.data()[k];
    }
  }
  ProjectionResult res{false, dot, 0.0};
  if (!(dot < 0.0) || ref_sq == 0.0) return res;
  res.fired = true;
  const double c = dot / ref_sq;
  double after = 0.0;
  for (auto& [name, t] : g) {
    const auto& r = g_ref.at(name);
    for (std::size_t k = 0; k < t.size(); ++k) {
      t.data()[k] = static_cast<float>(double(t.data()[k]) - c * r.data()[k]);
      after += double(t.data()[k]) * r.data()[k];
    }
  }
  res.residual = std::abs(after) / std::sqrt(g_sq * ref_sq);
  return res;
}

/// Plain SGD with optional heavy-ball momentum; one instance per task.
class Sgd {
 public:
  Sgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

  void step(ParamSet& params, const GradMap& grads) {
    for (const auto& [name, g] : grads) {
      auto& p = params.at(name);
      if (momentum_ > 0.0) {
        auto [it, fresh] = velocity_.try_emplace(name, Tensor(g.shape()));
        auto& v = it->second;
        for (std::size_t k = 0; k < g.size(); ++k) {
          v.data()[k] = static_cast<float>(momentum_ * v.data()[k] + g.data()[k]);
          p.data()[k] = static_cast<float>(p.data()[k] - lr_ * v.data()[k]);
        }
      } else {
        for (std::size_t k = 0; k < g.size(); ++k)
          p.data()[k] = static_cast<float>(p.data()[k] - lr_ * g.data()[k]);
      }
    }
  }

 private:
  double lr_;
  double momentum_;
  std::map<std::string, Tensor> velocity_;
};

/// Loss of one training step, with each additive term kept for inspection.
struct StepLoss {
  Var<float> total;
  std::vector<double> terms;
};

/// Train-mode logits of `x`; running statistics in `params` are updated.
inline Var<float> train_logits(Tape<float>& tape, const ModelArch& arch, ParamSet& params,
                               const Tensor& x) {
  ForwardOptions<float> opt;
  opt.mode = BnMode::Train;
  return forward(tape, arch, params, tape.constant(x), opt);
}

/// DER++ objective: CE on the new batch, weighted MSE between current and
/// stored logits on one buffer batch, weighted CE on a second buffer batch.
/// Missing buffer batches drop their term.
inline StepLoss derpp_loss(Tape<float>& tape, const ModelArch& arch, ParamSet& params,
                           const Batch& batch, const ReplayBatch* distill,
                           const ReplayBatch* replay, const TrainConfig& cfg,
                           Var<float>* new_logits = nullptr) {
  auto logits = train_logits(tape, arch, params, batch.x);
  if (new_logits) *new_logits = logits;
  StepLoss out{ops::softmax_cross_entropy(logits, batch.y), {}};
  out.terms.push_back(out.total.value()[0]);
  if (distill) {
    if (!distill->logits) throw Error("DER++ needs a buffer that stores logits");
    auto z = ops::scale(ops::mse(train_logits(tape, arch, params, distill->x), *distill->logits),
                        static_cast<float>(cfg.derpp_mse_weight));
    out.terms.push_back(z.value()[0]);
    out.total = ops::add(out.total, z);
  }
  if (replay) {
    auto c = ops::scale(
        ops::softmax_cross_entropy(train_logits(tape, arch, params, replay->x), replay->y),
        static_cast<float>(cfg.derpp_ce_weight));
    out.terms.push_back(c.value()[0]);
    out.total = ops::add(out.total, c);
  }
  return out;
}

namespace detail {

inline void emit(const TraceHook& trace, TraceEvent e, std::size_t step, double v = 0.0) {
  if (trace) trace({e, step, v});
}

inline void check_finite(double loss, std::size_t epoch, std::size_t step) {
  if (!std::isfinite(loss))
    throw DivergenceError("training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                          ", step " + std::to_string(step));
}

inline void check_finite(const GradMap& g, std::size_t epoch, std::size_t step) {
  for (const auto& [name, t] : g)
    if (!t.all_finite())
      throw DivergenceError("training diverged: non-finite gradient for " + name + " at epoch " +
                            std::to_string(epoch) + ", step " + std::to_string(step));
}

}  // namespace detail

/// Trains on `train` for cfg.epochs epochs with the rule of cfg.method.
/// Joint behaves like finetune here; the caller passes the union of every
/// task seen so far (see train_joint). `buffer` may be null for finetune
/// and joint; when given it receives every new sample after each step.
inline TaskReport train_task(const ModelArch& arch, const ParamSet& start, const Dataset& train,
                             MemoryBuffer* buffer, const TrainConfig& cfg, std::uint64_t seed,
                             const TraceHook& trace = {}) {
  cfg.validate();
  const bool needs_buffer =
      cfg.method == Method::Er || cfg.method == Method::Agem || cfg.method == Method::Derpp;
  if (needs_buffer && !buffer) throw Error(to_string(cfg.method) + " needs a memory buffer");
  if (buffer && cfg.uses_logits() && !buffer->stores_logits())
    throw Error("DER++ needs a buffer that stores logits");
  const bool replay = cfg.rehearsal && needs_buffer;

  const auto t0 = std::chrono::steady_clock::now();
  TaskReport rep;
  rep.params = start;
  ParamSet& params = rep.params;
  Sgd sgd(cfg.lr, cfg.momentum);
  BatchSampler sampler(train.size(), cfg.batch_size, seed);
  std::mt19937_64 replay_rng(seed ^ 0x9e3779b97f4a7c15ULL);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (const auto& idx : sampler.next_epoch()) {
      const Batch batch = train.gather(idx);
      const std::size_t step = rep.steps;
      Tape<float> tape;
      GradMap grads;
      double loss = 0.0;
      Tensor stored_logits;

      switch (cfg.method) {
        case Method::Finetune:
        case Method::Joint:
        case Method::Er: {
          auto total = ops::softmax_cross_entropy(train_logits(tape, arch, params, batch.x), batch.y);
          detail::emit(trace, TraceEvent::LossTerm, step, total.value()[0]);
          if (replay) {
            if (auto rb = buffer->sample_batch(cfg.replay_batch_size, replay_rng)) {
              auto lm = ops::softmax_cross_entropy(train_logits(tape, arch, params, rb->x), rb->y);
              detail::emit(trace, TraceEvent::LossTerm, step, lm.value()[0]);
              total = ops::add(total, lm);
            }
          }
          loss = total.value()[0];
          detail::check_finite(loss, epoch, step);
          grads = tape.backward(total);
          break;
        }
        case Method::Agem: {
          auto l = ops::softmax_cross_entropy(train_logits(tape, arch, params, batch.x), batch.y);
          loss = l.value()[0];
          detail::emit(trace, TraceEvent::LossTerm, step, loss);
          detail::check_finite(loss, epoch, step);
          grads = tape.backward(l);
          if (replay) {
            if (auto rb = buffer->sample_batch(cfg.replay_batch_size, replay_rng)) {
              Tape<float> ref_tape;
              auto lr = ops::softmax_cross_entropy(train_logits(ref_tape, arch, params, rb->x),
                                                   rb->y);
              detail::check_finite(lr.value()[0], epoch, step);
              const auto res = agem_project(grads, ref_tape.backward(lr));
              if (res.fired) {
                ++rep.projections;
                rep.max_projection_residual = std::max(rep.max_projection_residual, res.residual);
                detail::emit(trace, TraceEvent::Projection, step, res.residual);
              }
            }
          }
          break;
        }
        case Method::Derpp: {
          std::optional<ReplayBatch> distill, again;
          if (replay) {
            distill = buffer->sample_batch(cfg.replay_batch_size, replay_rng);
            again = buffer->sample_batch(cfg.replay_batch_size, replay_rng);
          }
          Var<float> logits;
          auto l = derpp_loss(tape, arch, params, batch, distill ? &*distill : nullptr,
                              again ? &*again : nullptr, cfg, &logits);
          for (double t : l.terms) detail::emit(trace, TraceEvent::LossTerm, step, t);
          loss = l.total.value()[0];
          detail::check_finite(loss, epoch, step);
          stored_logits = logits.value();
          grads = tape.backward(l.total);
          break;
        }
      }

      detail::check_finite(grads, epoch, step);
      sgd.step(params, grads);
      detail::emit(trace, TraceEvent::Step, step, loss);

      if (buffer) {
        const std::size_t d = train.sample_size();
        for (std::size_t k = 0; k < batch.size(); ++k) {
          std::span<const float> x(batch.x.data() + k * d, d);
          if (buffer->stores_logits()) {
            if (stored_logits.size() == 0) {
              // Finetune-style loops do not keep logits; compute them.
              stored_logits = predict(arch, params, batch.x);
            }
            const std::size_t K = stored_logits.dim(1);
            buffer->reservoir_update(x, batch.y[k],
                                     std::span<const float>(stored_logits.data() + k * K, K));
          } else {
            buffer->reservoir_update(x, batch.y[k]);
          }
          detail::emit(trace, TraceEvent::BufferUpdate, step);
        }
      }
      loss_sum += loss;
      ++batches;
      ++rep.steps;
    }
    rep.epoch_loss.push_back(batches ? loss_sum / double(batches) : 0.0);
  }
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

inline TaskReport train_finetune(const ModelArch& arch, const ParamSet& params,
                                 const Dataset& train, TrainConfig cfg, std::uint64_t seed,
                                 MemoryBuffer* buffer = nullptr, const TraceHook& trace = {}) {
  cfg.method = Method::Finetune;
  return train_task(arch, params, train, buffer, cfg, seed, trace);
}

/// Finetune on the union of every task seen so far.
inline TaskReport train_joint(const ModelArch& arch, const ParamSet& params,
                              const std::vector<const Dataset*>& seen, TrainConfig cfg,
                              std::uint64_t seed, MemoryBuffer* buffer = nullptr,
                              const TraceHook& trace = {}) {
  if (seen.empty()) throw DataError("joint training needs at least one task");
  Dataset all = *seen.front();
  for (std::size_t i = 1; i < seen.size(); ++i) all.append(*seen[i]);
  cfg.method = Method::Joint;
  return train_task(arch, params, all, buffer, cfg, seed, trace);
}

inline TaskReport train_er(const ModelArch& arch, const ParamSet& params, const Dataset& train,
                           MemoryBuffer& buffer, TrainConfig cfg, std::uint64_t seed,
                           const TraceHook& trace = {}) {
  cfg.method = Method::Er;
  return train_task(arch, params, train, &buffer, cfg, seed, trace);
}

inline TaskReport train_agem(const ModelArch& arch, const ParamSet& params, const Dataset& train,
                             MemoryBuffer& buffer, TrainConfig cfg, std::uint64_t seed,
                             const TraceHook& trace = {}) {
  cfg.method = Method::Agem;
  return train_task(arch, params, train, &buffer, cfg, seed, trace);
}

inline TaskReport train_derpp(const ModelArch& arch, const ParamSet& params,
                              const Dataset& train, MemoryBuffer& buffer, TrainConfig cfg,
                              std::uint64_t seed, const TraceHook& trace = {}) {
  cfg.method = Method::Derpp;
  return train_task(arch, params, train, &buffer, cfg, seed, trace);
}

}  // namespace clewi
