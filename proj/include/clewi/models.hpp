#pragma once

// Desk-scale model zoo.
//
//   small-mlp      D -> h -> h -> K, ReLU, no batch norm (h = 64 * width)
//   small-convnet  3 x [conv3x3 -> BN -> ReLU], avg-pool after the first two,
//                  global average pool, linear head (8/16/32 * width channels)
//   small-resnet   stem conv3x3 -> BN -> ReLU, two identity residual blocks
//                  with an avg-pool between them, global pool, linear head
//                  (16 * width channels throughout)
//
// Every architecture also publishes the permutation groups of its hidden
// units: which parameter axes must be reindexed together so that the network
// function is unchanged.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "clewi/autograd.hpp"
#include "clewi/errors.hpp"
#include "clewi/tensor.hpp"

namespace clewi {

enum class ArchId { SmallMlp, SmallConvNet, SmallResNet };

inline std::string to_string(ArchId id) {
  switch (id) {
    case ArchId::SmallMlp: return "small-mlp";
    case ArchId::SmallConvNet: return "small-convnet";
    case ArchId::SmallResNet: return "small-resnet";
  }
  return "?";
}

inline ArchId parse_arch_id(std::string_view s) {
  if (s == "small-mlp") return ArchId::SmallMlp;
  if (s == "small-convnet") return ArchId::SmallConvNet;
  if (s == "small-resnet") return ArchId::SmallResNet;
  throw ConfigError("unknown architecture id '" + std::string(s) + "'");
}

struct ModelArch {
  ArchId id = ArchId::SmallMlp;
  std::size_t width = 1;
  std::size_t num_classes = 10;
  /// {D} for the MLP, {C, H, W} for the convolutional models.
  Shape input_shape{32};
  /// Channel/unit count at width 1; 0 picks the architecture default.
  std::size_t base_width = 0;

  std::size_t base() const {
    if (base_width) return base_width;
    switch (id) {
      case ArchId::SmallMlp: return 64;
      case ArchId::SmallConvNet: return 8;
      case ArchId::SmallResNet: return 16;
    }
    return 0;
  }

  bool has_batchnorm() const { return id != ArchId::SmallMlp; }
};

/// Names of batch-norm running statistics end with one of these suffixes;
/// every other tensor is trainable.
inline bool is_running_stat(std::string_view name) {
  auto ends_with = [&](std::string_view suf) {
    return name.size() >= suf.size() && name.substr(name.size() - suf.size()) == suf;
  };
  return ends_with(".running_mean") || ends_with(".running_var");
}

/// Named parameter tensors of one network, plus its architecture tag.
template <class T>
struct BasicParamSet {
  std::string arch_id;
  std::size_t width = 1;
  std::map<std::string, BasicTensor<T>> tensors;

  const BasicTensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ShapeError("param set has no tensor '" + name + "'");
    return it->second;
  }
  BasicTensor<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ShapeError("param set has no tensor '" + name + "'");
    return it->second;
  }

  template <class U>
  BasicParamSet<U> cast() const {
    BasicParamSet<U> out{arch_id, width, {}};
    for (const auto& [k, v] : tensors) out.tensors.emplace(k, v.template cast<U>());
    return out;
  }

  friend bool operator==(const BasicParamSet& a, const BasicParamSet& b) {
    return a.arch_id == b.arch_id && a.width == b.width && a.tensors == b.tensors;
  }
};

using ParamSet = BasicParamSet<float>;

template <class T>
bool bit_identical(const BasicParamSet<T>& a, const BasicParamSet<T>& b) {
  if (a.arch_id != b.arch_id || a.width != b.width || a.tensors.size() != b.tensors.size())
    return false;
  for (const auto& [k, v] : a.tensors) {
    auto it = b.tensors.find(k);
    if (it == b.tensors.end() || !bit_identical(v, it->second)) return false;
  }
  return true;
}

/// Trainable element count; running statistics are excluded.
template <class T>
std::size_t param_count(const BasicParamSet<T>& params) {
  std::size_t n = 0;
  for (const auto& [k, v] : params.tensors)
    if (!is_running_stat(k)) n += v.size();
  return n;
}

// ---------------------------------------------------------------------------
// Permutation metadata

struct AxisRef {
  std::string param;
  std::size_t axis = 0;

  friend bool operator==(const AxisRef&, const AxisRef&) = default;
  friend auto operator<=>(const AxisRef&, const AxisRef&) = default;
};

struct PermGroup {
  std::string name;
  std::size_t size = 0;
  /// Producer output axes first, then consumer input axes.
  std::vector<AxisRef> axes;
};

struct PermutationSpec {
  std::vector<PermGroup> groups;
  /// Channel axes that must never be permuted: network input and class output.
  std::vector<AxisRef> fixed;
};

namespace detail {

struct LayerNames {
  static std::vector<std::string> bn(const std::string& p) {
    return {p + ".weight", p + ".bias", p + ".running_mean", p + ".running_var"};
  }
};

inline void add_bn_axes(PermGroup& g, const std::string& bn) {
  for (const auto& n : LayerNames::bn(bn)) g.axes.push_back({n, 0});
}

}  // namespace detail

inline PermutationSpec permutation_spec_of(const ModelArch& arch) {
  PermutationSpec spec;
  const std::size_t b = arch.base() * arch.width;
  switch (arch.id) {
    case ArchId::SmallMlp: {
      PermGroup g1{"fc1", b, {{"fc1.weight", 0}, {"fc1.bias", 0}, {"fc2.weight", 1}}};
      PermGroup g2{"fc2", b, {{"fc2.weight", 0}, {"fc2.bias", 0}, {"head.weight", 1}}};
      spec.groups = {g1, g2};
      spec.fixed = {{"fc1.weight", 1}, {"head.weight", 0}, {"head.bias", 0}};
      break;
    }
    case ArchId::SmallConvNet: {
      const std::size_t ch[3] = {b, 2 * b, 4 * b};
      for (int i = 0; i < 3; ++i) {
        const std::string conv = "conv" + std::to_string(i + 1);
        PermGroup g{conv, ch[i], {{conv + ".weight", 0}}};
        detail::add_bn_axes(g, "bn" + std::to_string(i + 1));
        g.axes.push_back(i < 2 ? AxisRef{"conv" + std::to_string(i + 2) + ".weight", 1}
                               : AxisRef{"head.weight", 1});
        spec.groups.push_back(std::move(g));
      }
      spec.fixed = {{"conv1.weight", 1}, {"head.weight", 0}, {"head.bias", 0}};
      break;
    }
    case ArchId::SmallResNet: {
      // Everything on the skip path shares one group.
      PermGroup skip{"residual", b, {{"stem.weight", 0}}};
      detail::add_bn_axes(skip, "stem_bn");
      for (const char* blk : {"block1", "block2"}) {
        const std::string p = blk;
        skip.axes.push_back({p + ".conv2.weight", 0});
        detail::add_bn_axes(skip, p + ".bn2");
      }
      for (const char* blk : {"block1", "block2"}) {
        skip.axes.push_back({std::string(blk) + ".conv1.weight", 1});
      }
      skip.axes.push_back({"head.weight", 1});
      spec.groups.push_back(std::move(skip));
      for (const char* blk : {"block1", "block2"}) {
        const std::string p = blk;
        PermGroup inner{p + ".inner", b, {{p + ".conv1.weight", 0}}};
        detail::add_bn_axes(inner, p + ".bn1");
        inner.axes.push_back({p + ".conv2.weight", 1});
        spec.groups.push_back(std::move(inner));
      }
      spec.fixed = {{"stem.weight", 1}, {"head.weight", 0}, {"head.bias", 0}};
      break;
    }
  }
  return spec;
}

/// Checks the structural invariants of a spec against a parameter set:
/// axes exist with the group's size, and no axis is claimed twice.
template <class T>
void validate_spec(const PermutationSpec& spec, const BasicParamSet<T>& params) {
  std::vector<AxisRef> seen;
  auto claim = [&](const AxisRef& a) {
    for (const auto& s : seen)
      if (s == a) throw ShapeError("permutation spec: axis claimed twice: " + a.param);
    seen.push_back(a);
  };
  for (const auto& g : spec.groups) {
    for (const auto& a : g.axes) {
      const auto& t = params.at(a.param);
      if (a.axis >= t.rank() || t.dim(a.axis) != g.size) {
        throw ShapeError("permutation spec: " + a.param + " axis " +
                         std::to_string(a.axis) + " does not have size " +
                         std::to_string(g.size));
      }
      claim(a);
    }
  }
  for (const auto& a : spec.fixed) claim(a);
}

// ---------------------------------------------------------------------------
// Construction

namespace detail {

struct ShapeEntry {
  std::string name;
  Shape shape;
  /// Fan-in for weights; 0 marks biases and batch-norm tensors.
  std::size_t fan_in = 0;
  bool is_head = false;
};

inline void push_bn(std::vector<ShapeEntry>& out, const std::string& p, std::size_t c) {
  for (const auto& n : LayerNames::bn(p)) out.push_back({n, {c}});
}

inline std::vector<ShapeEntry> shape_table(const ModelArch& arch) {
  if (arch.width < 1) throw ShapeError("width multiplier must be >= 1");
  std::vector<ShapeEntry> t;
  const std::size_t b = arch.base() * arch.width;
  const std::size_t K = arch.num_classes;
  switch (arch.id) {
    case ArchId::SmallMlp: {
      if (arch.input_shape.size() != 1)
        throw ShapeError("small-mlp expects a flat input shape {D}");
      const std::size_t D = arch.input_shape[0];
      t.push_back({"fc1.weight", {b, D}, D});
      t.push_back({"fc1.bias", {b}});
      t.push_back({"fc2.weight", {b, b}, b});
      t.push_back({"fc2.bias", {b}});
      t.push_back({"head.weight", {K, b}, b, true});
      t.push_back({"head.bias", {K}, 0, true});
      break;
    }
    case ArchId::SmallConvNet: {
      if (arch.input_shape.size() != 3)
        throw ShapeError("small-convnet expects an input shape {C, H, W}");
      const auto& in = arch.input_shape;
      if (in[1] != in[2] || in[1] % 4 != 0)
        throw ShapeError("small-convnet needs square inputs with side divisible by 4");
      const std::size_t ch[4] = {in[0], b, 2 * b, 4 * b};
      for (int i = 1; i <= 3; ++i) {
        t.push_back({"conv" + std::to_string(i) + ".weight", {ch[i], ch[i - 1], 3, 3},
                     ch[i - 1] * 9});
        push_bn(t, "bn" + std::to_string(i), ch[i]);
      }
      t.push_back({"head.weight", {K, ch[3]}, ch[3], true});
      t.push_back({"head.bias", {K}, 0, true});
      break;
    }
    case ArchId::SmallResNet: {
      if (arch.input_shape.size() != 3)
        throw ShapeError("small-resnet expects an input shape {C, H, W}");
      const auto& in = arch.input_shape;
      if (in[1] != in[2] || in[1] % 2 != 0)
        throw ShapeError("small-resnet needs square inputs with even side");
      t.push_back({"stem.weight", {b, in[0], 3, 3}, in[0] * 9});
      push_bn(t, "stem_bn", b);
      for (const char* blk : {"block1", "block2"}) {
        const std::string p = blk;
        t.push_back({p + ".conv1.weight", {b, b, 3, 3}, b * 9});
        push_bn(t, p + ".bn1", b);
        t.push_back({p + ".conv2.weight", {b, b, 3, 3}, b * 9});
        push_bn(t, p + ".bn2", b);
      }
      t.push_back({"head.weight", {K, b}, b, true});
      t.push_back({"head.bias", {K}, 0, true});
      break;
    }
  }
  return t;
}

}  // namespace detail

/// Fresh parameters: He-normal weights (std sqrt(2 / fan_in), sqrt(1 / fan_in)
/// for the head), zero biases, batch norm gamma 1, beta 0, running mean 0,
/// running variance 1.
inline ParamSet build_model(const ModelArch& arch, std::uint64_t seed) {
  ParamSet p{to_string(arch.id), arch.width, {}};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto& e : detail::shape_table(arch)) {
    Tensor t(e.shape);
    const bool is_bn_scale_or_var = e.fan_in == 0 &&
        (e.name.ends_with("running_var") ||
         (e.name.ends_with(".weight") && e.shape.size() == 1));
    if (e.fan_in > 0) {
      const double stdev = std::sqrt((e.is_head ? 1.0 : 2.0) / double(e.fan_in));
      for (auto& v : t.values()) v = static_cast<float>(normal(rng) * stdev);
    } else if (is_bn_scale_or_var) {
      t.fill(1.0f);
    }
    p.tensors.emplace(e.name, std::move(t));
  }
  return p;
}

/// Confirms that `params` has exactly the names and shapes `arch` defines.
template <class T>
void check_params(const ModelArch& arch, const BasicParamSet<T>& params) {
  const auto table = detail::shape_table(arch);
  if (params.tensors.size() != table.size())
    throw ShapeError("param set does not match architecture " + to_string(arch.id));
  for (const auto& e : table) {
    if (params.at(e.name).shape() != e.shape)
      throw ShapeError("param '" + e.name + "' has shape " +
                       shape_str(params.at(e.name).shape()) + ", expected " +
                       shape_str(e.shape));
  }
}

// ---------------------------------------------------------------------------
// Forward

/// Where a forward pass reports activations of a permutation group.
enum class HookSite {
  Producer,    ///< raw output of the producing linear/conv layer
  Activation,  ///< post-nonlinearity feature map
};

template <class T>
using ActivationHook =
    std::function<void(std::size_t group, HookSite site, const BasicTensor<T>&)>;

template <class T>
struct ForwardOptions {
  BnMode mode = BnMode::Eval;
  double bn_momentum = kBatchNormMomentum;
  const ActivationHook<T>* hook = nullptr;
};

namespace detail {

template <class T>
class ForwardPass {
 public:
  ForwardPass(Tape<T>& tape, const BasicParamSet<T>& params, BasicParamSet<T>* mut,
              const ForwardOptions<T>& opt)
      : tape_(tape), params_(params), mut_(mut), opt_(opt) {}

  Var<T> p(const std::string& name) {
    return is_running_stat(name) ? tape_.constant(params_.at(name))
                                 : tape_.parameter(name, params_.at(name));
  }

  void emit(std::size_t group, HookSite site, Var<T> v) {
    if (opt_.hook && *opt_.hook) (*opt_.hook)(group, site, v.value());
  }

  Var<T> bn(Var<T> x, const std::string& name) {
    auto gamma = p(name + ".weight");
    auto beta = p(name + ".bias");
    if (opt_.mode == BnMode::Eval) {
      auto rm = params_.at(name + ".running_mean");
      auto rv = params_.at(name + ".running_var");
      return ops::batch_norm(x, gamma, beta, rm, rv, BnMode::Eval);
    }
    return ops::batch_norm(x, gamma, beta, mut_->at(name + ".running_mean"),
                           mut_->at(name + ".running_var"), opt_.mode, opt_.bn_momentum);
  }

  /// conv -> BN -> ReLU, reporting the conv output and the activation.
  Var<T> conv_bn_relu(Var<T> x, const std::string& conv, const std::string& bn_name,
                      std::size_t group) {
    auto y = ops::conv2d(x, p(conv + ".weight"), 1, 1);
    emit(group, HookSite::Producer, y);
    auto a = ops::relu(bn(y, bn_name));
    emit(group, HookSite::Activation, a);
    return a;
  }

  Var<T> global_pool_flat(Var<T> x) {
    const std::size_t side = x.shape()[2];
    auto pooled = ops::avgpool2d(x, side);
    return ops::reshape(pooled, {pooled.shape()[0], pooled.shape()[1]});
  }

  Var<T> run(const ModelArch& arch, Var<T> x) {
    const auto& xs = x.shape();
    Shape expected{xs.empty() ? 0 : xs[0]};
    expected.insert(expected.end(), arch.input_shape.begin(), arch.input_shape.end());
    if (xs != expected)
      throw ShapeError("forward: input " + shape_str(xs) + " does not match " +
                       to_string(arch.id) + " input " + shape_str(arch.input_shape));
    switch (arch.id) {
      case ArchId::SmallMlp: {
        auto h1 = ops::linear(x, p("fc1.weight"), p("fc1.bias"));
        emit(0, HookSite::Producer, h1);
        h1 = ops::relu(h1);
        emit(0, HookSite::Activation, h1);
        auto h2 = ops::linear(h1, p("fc2.weight"), p("fc2.bias"));
        emit(1, HookSite::Producer, h2);
        h2 = ops::relu(h2);
        emit(1, HookSite::Activation, h2);
        return ops::linear(h2, p("head.weight"), p("head.bias"));
      }
      case ArchId::SmallConvNet: {
        auto a = conv_bn_relu(x, "conv1", "bn1", 0);
        a = ops::avgpool2d(a, 2);
        a = conv_bn_relu(a, "conv2", "bn2", 1);
        a = ops::avgpool2d(a, 2);
        a = conv_bn_relu(a, "conv3", "bn3", 2);
        return ops::linear(global_pool_flat(a), p("head.weight"), p("head.bias"));
      }
      case ArchId::SmallResNet: {
        auto a = stem(x);
        a = block(a, "block1", 1);
        a = ops::avgpool2d(a, 2);
        a = block(a, "block2", 2);
        return ops::linear(global_pool_flat(a), p("head.weight"), p("head.bias"));
      }
    }
    throw ShapeError("forward: unknown architecture");
  }

 private:
  Var<T> stem(Var<T> x) {
    auto stem_out = ops::conv2d(x, p("stem.weight"), 1, 1);
    emit(0, HookSite::Producer, stem_out);
    auto a = ops::relu(bn(stem_out, "stem_bn"));
    emit(0, HookSite::Activation, a);
    return a;
  }

  Var<T> block(Var<T> x, const std::string& name, std::size_t inner_group) {
    auto h = conv_bn_relu(x, name + ".conv1", name + ".bn1", inner_group);
    auto y = ops::conv2d(h, p(name + ".conv2.weight"), 1, 1);
    emit(0, HookSite::Producer, y);
    auto out = ops::relu(ops::add(bn(y, name + ".bn2"), x));
    emit(0, HookSite::Activation, out);
    return out;
  }

  Tape<T>& tape_;
  const BasicParamSet<T>& params_;
  BasicParamSet<T>* mut_;
  const ForwardOptions<T>& opt_;
};

}  // namespace detail

/// Logits [N x num_classes]. Train and Collect modes update the batch-norm
/// running statistics stored in `params`.
template <class T>
Var<T> forward(Tape<T>& tape, const ModelArch& arch, BasicParamSet<T>& params, Var<T> x,
               const ForwardOptions<T>& opt = {}) {
  detail::ForwardPass<T> pass(tape, params, &params, opt);
  return pass.run(arch, x);
}

/// Eval-mode forward over read-only parameters.
template <class T>
Var<T> forward(Tape<T>& tape, const ModelArch& arch, const BasicParamSet<T>& params,
               Var<T> x, const ForwardOptions<T>& opt = {}) {
  if (opt.mode != BnMode::Eval)
    throw Error("forward: const parameters only support eval mode");
  detail::ForwardPass<T> pass(tape, params, nullptr, opt);
  return pass.run(arch, x);
}

/// Eval-mode logits without recording gradients.
inline Tensor predict(const ModelArch& arch, const ParamSet& params, const Tensor& x) {
  Tape<float> tape(false);
  return forward(tape, arch, params, tape.constant(x)).value();
}

// ---------------------------------------------------------------------------
// Reference descriptor

/// Shape table of the CIFAR-style ResNet18 (3x3 stem, 64-512 channels,
/// BasicBlocks with 1x1 projection shortcuts, 100-way head). Documentation
/// only; used to check trainable-parameter accounting.
inline std::vector<std::pair<std::string, Shape>> reference_resnet18_shapes(
    std::size_t num_classes = 100) {
  std::vector<std::pair<std::string, Shape>> t;
  auto bn = [&](const std::string& p, std::size_t c) {
    t.push_back({p + ".weight", {c}});
    t.push_back({p + ".bias", {c}});
  };
  t.push_back({"conv1.weight", {64, 3, 3, 3}});
  bn("bn1", 64);
  std::size_t in = 64;
  const std::size_t widths[4] = {64, 128, 256, 512};
  for (int layer = 0; layer < 4; ++layer) {
    const std::size_t out = widths[layer];
    for (int blk = 0; blk < 2; ++blk) {
      const std::string p = "layer" + std::to_string(layer + 1) + "." + std::to_string(blk);
      const bool downsample = blk == 0 && (layer > 0);
      t.push_back({p + ".conv1.weight", {out, in, 3, 3}});
      bn(p + ".bn1", out);
      t.push_back({p + ".conv2.weight", {out, out, 3, 3}});
      bn(p + ".bn2", out);
      if (downsample) {
        t.push_back({p + ".shortcut.0.weight", {out, in, 1, 1}});
        bn(p + ".shortcut.1", out);
      }
      in = out;
    }
  }
  t.push_back({"linear.weight", {num_classes, 512}});
  t.push_back({"linear.bias", {num_classes}});
  return t;
}

inline std::size_t reference_resnet18_param_count(std::size_t num_classes = 100) {
  std::size_t n = 0;
  for (const auto& [name, shape] : reference_resnet18_shapes(num_classes))
    n += shape_numel(shape);
  return n;
}

}  // namespace clewi
