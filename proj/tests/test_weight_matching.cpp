#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "clewi/weight_matching.hpp"

using namespace clewi;

namespace {

ModelArch mlp() { return {ArchId::SmallMlp, 1, 10, {12}, 16}; }
ModelArch convnet() { return {ArchId::SmallConvNet, 1, 10, {3, 8, 8}, 6}; }
ModelArch resnet() { return {ArchId::SmallResNet, 1, 10, {3, 8, 8}, 6}; }
std::vector<ModelArch> all_archs() { return {mlp(), convnet(), resnet()}; }

MemoryBuffer random_buffer(const ModelArch& arch, std::size_t n, std::uint64_t seed) {
  MemoryBuffer m(n, arch.input_shape, seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::vector<float> x(shape_numel(arch.input_shape));
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : x) v = normal(rng);
    m.reservoir_update(x, int(i % arch.num_classes));
  }
  return m;
}

Tensor random_input(const ModelArch& arch, std::size_t n, std::uint64_t seed) {
  Shape s{n};
  s.insert(s.end(), arch.input_shape.begin(), arch.input_shape.end());
  Tensor x(s);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  for (auto& v : x.values()) v = normal(rng);
  return x;
}

// A model whose biases and batch-norm tensors are not at their defaults, so
// permutation bugs on those axes show up in the logits.
ParamSet perturbed_model(const ModelArch& arch, std::uint64_t seed) {
  auto p = build_model(arch, seed);
  std::mt19937_64 rng(seed + 100);
  std::uniform_real_distribution<float> u(-0.5f, 0.5f);
  for (auto& [name, t] : p.tensors) {
    if (name.ends_with(".bias") || name.ends_with("running_mean"))
      for (auto& v : t.values()) v = u(rng);
    if (name.ends_with("running_var") || (name.ends_with(".weight") && t.rank() == 1))
      for (auto& v : t.values()) v = 1.0f + u(rng);
  }
  return p;
}

ChannelMoments moments_of(const std::vector<std::vector<double>>& per_channel) {
  ChannelMoments m;
  for (const auto& xs : per_channel) {
    double s = 0, s2 = 0;
    for (double v : xs) s += v;
    const double mean = s / double(xs.size());
    for (double v : xs) s2 += (v - mean) * (v - mean);
    m.mean.push_back(mean);
    m.var.push_back(s2 / double(xs.size()));
  }
  return m;
}

// Channel-major values of a [N, C, ...] feature map.
void scatter_channels(const Tensor& t, std::vector<std::vector<double>>& out) {
  const std::size_t n = t.dim(0), c = t.dim(1), spatial = t.size() / (n * c);
  out.resize(c);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < spatial; ++p)
        out[ch].push_back(t.data()[(s * c + ch) * spatial + p]);
}

// Recovery is only defined when every channel is distinguishable. A channel
// whose pre-activation is negative on every buffer sample is dead; negating
// its producer row brings it back. Earlier layers are fixed first.
ParamSet revive_dead_channels(const ModelArch& arch, ParamSet p, const MemoryBuffer& buf) {
  const auto spec = permutation_spec_of(arch);
  for (std::size_t g = 0; g < spec.groups.size(); ++g) {
    const auto var = collect_activations(arch, p, p, buf, spec).groups[g].theta.var;
    auto& w = p.at(spec.groups[g].axes[0].param);
    const std::size_t row = w.size() / w.dim(0);
    for (std::size_t c = 0; c < var.size(); ++c)
      if (var[c] == 0.0)
        for (std::size_t k = 0; k < row; ++k) w.data()[c * row + k] = -w.data()[c * row + k];
  }
  for (const auto& g : collect_activations(arch, p, p, buf, spec).groups)
    for (double v : g.theta.var) EXPECT_GT(v, 0.0);
  return p;
}

}  // namespace

TEST(CollectActivations, SelfCorrelationHasUnitDiagonal) {
  for (const auto& arch : all_archs()) {
    const auto p = perturbed_model(arch, 1);
    const auto buf = random_buffer(arch, 40, 2);
    const auto spec = permutation_spec_of(arch);
    const auto stats = collect_activations(arch, p, p, buf, spec);
    EXPECT_EQ(stats.sample_count, 40u);
    for (std::size_t g = 0; g < spec.groups.size(); ++g) {
      const auto& r = stats.groups[g].correlation;
      for (std::size_t i = 0; i < spec.groups[g].size; ++i) {
        if (stats.groups[g].theta.var[i] == 0.0) continue;
        EXPECT_NEAR(r.at(i, i), 1.0, 1e-9) << to_string(arch.id) << " group " << g;
      }
      for (double v : r.values()) {
        EXPECT_LE(v, 1.0);
        EXPECT_GE(v, -1.0);
      }
    }
  }
}

TEST(CollectActivations, ZeroVarianceChannelCorrelatesToZero) {
  const auto arch = mlp();
  auto p = build_model(arch, 3);
  // Hidden unit 2 of the first layer is switched off for every input.
  auto& w = p.at("fc1.weight");
  for (std::size_t k = 0; k < w.dim(1); ++k) w.at(2, k) = 0.0f;
  p.at("fc1.bias").data()[2] = -1.0f;
  const auto q = build_model(arch, 4);
  const auto stats =
      collect_activations(arch, p, q, random_buffer(arch, 30, 5), permutation_spec_of(arch));
  const auto& g = stats.groups[0];
  EXPECT_EQ(g.theta.var[2], 0.0);
  EXPECT_EQ(g.theta.mean[2], 0.0);
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(g.correlation.at(2, j), 0.0);

  const auto self = collect_activations(arch, p, p, random_buffer(arch, 30, 5),
                                        permutation_spec_of(arch));
  for (std::size_t j = 0; j < 16; ++j) {
    EXPECT_EQ(self.groups[0].correlation.at(2, j), 0.0);
    EXPECT_EQ(self.groups[0].correlation.at(j, 2), 0.0);
  }
}

TEST(CollectActivations, HandComputedTwoChannelCorrelation) {
  // θ's first layer is the identity and θ_P's is [[1, 1], [0, 2]]; all
  // inputs are positive so the ReLU passes everything through.
  //   a0 = (1, 2, 3)   a1 = (2, 1, 5)   b0 = a0 + a1   b1 = 2 a1
  // With population moments: var a0 = 2/3, var a1 = 26/9, cov(a0, a1) = 1.
  //   r(a0, b0) = (5/3) / sqrt(2/3 * 50/9)       = sqrt(3) / 2
  //   r(a0, b1) = 1 / sqrt(2/3 * 26/9)           = sqrt(27 / 52)
  //   r(a1, b0) = (35/9) / sqrt(26/9 * 50/9)     = 35 / sqrt(1300)
  //   r(a1, b1) = 1
  const ModelArch arch{ArchId::SmallMlp, 1, 2, {2}, 2};
  auto theta = build_model(arch, 0);
  auto theta_p = build_model(arch, 1);
  theta.at("fc1.weight") = Tensor::from({2, 2}, {1, 0, 0, 1});
  theta_p.at("fc1.weight") = Tensor::from({2, 2}, {1, 1, 0, 2});
  theta.at("fc1.bias").fill(0.0f);
  theta_p.at("fc1.bias").fill(0.0f);
  MemoryBuffer buf(3, {2}, 0);
  const float xs[3][2] = {{1, 2}, {2, 1}, {3, 5}};
  for (const auto& x : xs) buf.reservoir_update(x, 0);

  const auto stats = collect_activations(arch, theta, theta_p, buf, permutation_spec_of(arch));
  const auto& r = stats.groups[0].correlation;
  EXPECT_NEAR(r.at(0, 0), std::sqrt(3.0) / 2.0, 1e-6);
  EXPECT_NEAR(r.at(0, 1), std::sqrt(27.0 / 52.0), 1e-6);
  EXPECT_NEAR(r.at(1, 0), 35.0 / std::sqrt(1300.0), 1e-6);
  EXPECT_NEAR(r.at(1, 1), 1.0, 1e-6);
  EXPECT_NEAR(stats.groups[0].theta.mean[1], 8.0 / 3.0, 1e-6);
  EXPECT_NEAR(stats.groups[0].theta.var[1], 26.0 / 9.0, 1e-6);
  EXPECT_NEAR(stats.groups[0].theta_p.var[0], 50.0 / 9.0, 1e-6);
}

TEST(CollectActivations, EmptyBufferThrows) {
  const auto arch = mlp();
  const auto p = build_model(arch, 0);
  MemoryBuffer empty(10, arch.input_shape, 0);
  EXPECT_THROW(collect_activations(arch, p, p, empty, permutation_spec_of(arch)),
               EmptyBufferError);
  EXPECT_THROW(update_batchnorm(convnet(), build_model(convnet(), 0),
                                MemoryBuffer(4, convnet().input_shape, 0)),
               EmptyBufferError);
}

TEST(CollectActivations, MomentsMatchDirectComputation) {
  const auto arch = convnet();
  const auto a = perturbed_model(arch, 5), b = perturbed_model(arch, 6);
  const auto buf = random_buffer(arch, 37, 7);
  std::vector<std::vector<double>> ca, cb;
  for (const auto& batch : buf.iterate_all(37)) {
    ActivationHook<float> ha = [&](std::size_t g, HookSite s, const Tensor& t) {
      if (g == 1 && s == HookSite::Activation) scatter_channels(t, ca);
    };
    ActivationHook<float> hb = [&](std::size_t g, HookSite s, const Tensor& t) {
      if (g == 1 && s == HookSite::Activation) scatter_channels(t, cb);
    };
    Tape<float> tape(false);
    forward(tape, arch, a, tape.constant(batch.x), ForwardOptions<float>{BnMode::Eval, 0.1, &ha});
    forward(tape, arch, b, tape.constant(batch.x), ForwardOptions<float>{BnMode::Eval, 0.1, &hb});
  }
  const auto ma = moments_of(ca), mb = moments_of(cb);
  const auto stats = collect_activations(arch, a, b, buf, permutation_spec_of(arch));
  const auto& g = stats.groups[1];
  for (std::size_t i = 0; i < ca.size(); ++i) {
    EXPECT_NEAR(g.theta.mean[i], ma.mean[i], 1e-6);
    EXPECT_NEAR(g.theta_p.var[i], mb.var[i], 1e-6 * (1 + mb.var[i]));
    for (std::size_t j = 0; j < cb.size(); ++j) {
      double cov = 0;
      for (std::size_t k = 0; k < ca[i].size(); ++k)
        cov += (ca[i][k] - ma.mean[i]) * (cb[j][k] - mb.mean[j]);
      cov /= double(ca[i].size());
      const double r = (ma.var[i] > 0 && mb.var[j] > 0) ? cov / std::sqrt(ma.var[i] * mb.var[j])
                                                        : 0.0;
      EXPECT_NEAR(g.correlation.at(i, j), r, 1e-6);
    }
  }
}

TEST(CalcPermutation, SelfMatchIsIdentity) {
  for (const auto& arch : all_archs()) {
    const auto p = perturbed_model(arch, 8);
    const auto pi =
        calc_permutation(arch, p, p, random_buffer(arch, 48, 9), permutation_spec_of(arch));
    EXPECT_TRUE(pi.is_identity()) << to_string(arch.id);
  }
}

TEST(CalcPermutation, SingleChannelGroupsAreTrivial) {
  const ModelArch arch{ArchId::SmallMlp, 1, 3, {4}, 1};
  const auto pi = calc_permutation(arch, build_model(arch, 0), build_model(arch, 1),
                                   random_buffer(arch, 10, 0), permutation_spec_of(arch));
  for (const auto& g : pi.groups) EXPECT_EQ(g, std::vector<std::size_t>{0});
}

TEST(CalcPermutation, RecoversPlantedPermutation) {
  std::size_t recovered = 0, total = 0;
  for (const auto& arch : {mlp(), convnet()}) {
    const auto spec = permutation_spec_of(arch);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      std::mt19937_64 rng(seed);
      const auto buf = random_buffer(arch, 48, seed);
      const auto theta = revive_dead_channels(arch, build_model(arch, seed), buf);
      const auto sigma = Permutation::random(spec, rng);
      const auto theta_p = apply_permutation(theta, sigma, spec);
      const auto pi = calc_permutation(arch, theta, theta_p, buf, spec);
      const auto expect = sigma.inverse();
      for (std::size_t g = 0; g < spec.groups.size(); ++g, ++total)
        recovered += pi.groups[g] == expect.groups[g];
      // Undoing the plant gives back θ exactly.
      EXPECT_TRUE(bit_identical(apply_permutation(theta_p, pi, spec), theta));
    }
  }
  EXPECT_EQ(recovered, total);
}

TEST(ApplyPermutation, IdentityIsBitIdentical) {
  for (const auto& arch : all_archs()) {
    const auto spec = permutation_spec_of(arch);
    const auto p = perturbed_model(arch, 2);
    EXPECT_TRUE(bit_identical(apply_permutation(p, Permutation::identity(spec), spec), p));
  }
}

TEST(ApplyPermutation, PreservesNetworkFunction) {
  std::mt19937_64 rng(10);
  for (const auto& arch : all_archs()) {
    const auto spec = permutation_spec_of(arch);
    const auto p = perturbed_model(arch, 3);
    const auto x = random_input(arch, 100, 11);
    const auto ref = predict(arch, p, x);
    for (int trial = 0; trial < 3; ++trial) {
      const auto pi = Permutation::random(spec, rng);
      const auto q = apply_permutation(p, pi, spec);
      EXPECT_LT(max_abs_diff(predict(arch, q, x), ref), 1e-5) << to_string(arch.id);
    }
  }
}

TEST(ApplyPermutation, MissingGroupThrows) {
  const auto arch = resnet();
  const auto spec = permutation_spec_of(arch);
  auto pi = Permutation::identity(spec);
  pi.groups.pop_back();
  EXPECT_THROW(apply_permutation(build_model(arch, 0), pi, spec), ShapeError);
  pi = Permutation::identity(spec);
  pi.groups[0].pop_back();
  EXPECT_THROW(apply_permutation(build_model(arch, 0), pi, spec), ShapeError);
}

TEST(Interpolate, EndpointsAreExact) {
  for (const auto& arch : all_archs()) {
    const auto a = perturbed_model(arch, 1), b = perturbed_model(arch, 2);
    EXPECT_TRUE(bit_identical(interpolate(a, b, 0.0), a));
    EXPECT_TRUE(bit_identical(interpolate(a, b, 1.0), b));
  }
}

TEST(Interpolate, Midpoint) {
  ParamSet a{"small-mlp", 1, {{"w", Tensor::from({1}, {2.0f})}}};
  ParamSet b{"small-mlp", 1, {{"w", Tensor::from({1}, {4.0f})}}};
  EXPECT_EQ(interpolate(a, b, 0.5).at("w").data()[0], 3.0f);
  EXPECT_FLOAT_EQ(interpolate(a, b, 0.25).at("w").data()[0], 2.5f);
}

TEST(Interpolate, RunningStatsAreBlendedToo) {
  const auto arch = convnet();
  const auto a = perturbed_model(arch, 1), b = perturbed_model(arch, 2);
  const auto m = interpolate(a, b, 0.5);
  const float expect = 0.5f * (a.at("bn2.running_var").data()[1] + b.at("bn2.running_var").data()[1]);
  EXPECT_FLOAT_EQ(m.at("bn2.running_var").data()[1], expect);
}

TEST(Interpolate, RejectsMismatchAndBadAlpha) {
  const auto a = build_model(mlp(), 0);
  auto wide = mlp();
  wide.width = 2;
  EXPECT_THROW(interpolate(a, build_model(wide, 0), 0.5), ShapeError);
  EXPECT_THROW(interpolate(a, a, 1.5), Error);
  EXPECT_THROW(interpolate(a, a, -0.1), Error);
  EXPECT_THROW(interpolate(a, a, std::nan("")), Error);
}

TEST(UpdateBatchnorm, ZeroInputGivesZeroFirstLayerStatistics) {
  const auto arch = convnet();
  MemoryBuffer buf(40, arch.input_shape, 0);
  std::vector<float> x(shape_numel(arch.input_shape), 0.0f);
  for (int i = 0; i < 40; ++i) buf.reservoir_update(x, 0);
  const auto p = update_batchnorm(arch, perturbed_model(arch, 4), buf);
  for (float v : p.at("bn1.running_mean").values()) EXPECT_EQ(v, 0.0f);
  for (float v : p.at("bn1.running_var").values()) EXPECT_EQ(v, 0.0f);
  // The epsilon floor leaves the normalized output at beta.
  const auto logits = predict(arch, p, random_input(arch, 1, 0));
  EXPECT_TRUE(logits.all_finite());
}

TEST(UpdateBatchnorm, ConstantSamplesGiveMapMoments) {
  // Every buffer sample is the same image, so every batch has the same
  // per-channel moments: those of one conv1 output map.
  const auto arch = convnet();
  const auto p = perturbed_model(arch, 5);
  const auto img = random_input(arch, 1, 6);
  MemoryBuffer buf(64, arch.input_shape, 0);
  for (int i = 0; i < 64; ++i) buf.reservoir_update(img.values(), 0);

  Tape<float> tape(false);
  const auto y = ops::conv2d(tape.constant(img), tape.constant(p.at("conv1.weight")), 1, 1).value();
  std::vector<std::vector<double>> ch;
  scatter_channels(y, ch);
  const auto m = moments_of(ch);
  const double positions = double(ch[0].size());
  const double batch_elems = 32.0 * positions;

  const auto q = update_batchnorm(arch, p, buf);
  for (std::size_t c = 0; c < ch.size(); ++c) {
    EXPECT_NEAR(q.at("bn1.running_mean").data()[c], m.mean[c], 1e-5);
    // Unbiased batch variance of 32 copies of the map.
    EXPECT_NEAR(q.at("bn1.running_var").data()[c], m.var[c] * batch_elems / (batch_elems - 1),
                1e-5 * (1 + m.var[c]));
  }
}

TEST(UpdateBatchnorm, NormalizedOutputsHaveBetaMeanGammaStd) {
  for (const auto& arch : {convnet(), resnet()}) {
    const auto p = perturbed_model(arch, 6);
    const auto buf = random_buffer(arch, 200, 7);
    const auto q = update_batchnorm(arch, p, buf);
    // Producer outputs, in forward order, feed these batch norms.
    std::vector<std::string> bn_names =
        arch.id == ArchId::SmallConvNet
            ? std::vector<std::string>{"bn1", "bn2", "bn3"}
            : std::vector<std::string>{"stem_bn", "block1.bn1", "block1.bn2", "block2.bn1",
                                       "block2.bn2"};
    std::vector<std::vector<std::vector<double>>> maps(bn_names.size());
    for (const auto& batch : buf.iterate_all(32)) {
      std::size_t k = 0;
      ActivationHook<float> hook = [&](std::size_t, HookSite s, const Tensor& t) {
        if (s == HookSite::Producer) scatter_channels(t, maps[k++]);
      };
      Tape<float> tape(false);
      forward(tape, arch, q, tape.constant(batch.x), ForwardOptions<float>{BnMode::Eval, 0.1, &hook});
      ASSERT_EQ(k, bn_names.size());
    }
    for (std::size_t l = 0; l < bn_names.size(); ++l) {
      const auto& bn = bn_names[l];
      for (std::size_t c = 0; c < maps[l].size(); ++c) {
        const double rm = q.at(bn + ".running_mean").data()[c];
        const double rv = q.at(bn + ".running_var").data()[c];
        const double g = q.at(bn + ".weight").data()[c];
        const double b = q.at(bn + ".bias").data()[c];
        std::vector<std::vector<double>> out(1);
        for (double v : maps[l][c]) out[0].push_back((v - rm) / std::sqrt(rv + kBatchNormEps) * g + b);
        const auto m = moments_of(out);
        EXPECT_NEAR(m.mean[0], b, 0.1 * std::abs(g)) << bn << " channel " << c;
        EXPECT_NEAR(std::sqrt(m.var[0]), std::abs(g), 0.1 * std::abs(g)) << bn << " channel " << c;
      }
    }
  }
}

TEST(UpdateBatchnorm, DeterministicAndIdempotent) {
  const auto arch = resnet();
  const auto p = perturbed_model(arch, 7);
  const auto buf = random_buffer(arch, 70, 8);
  const auto a = update_batchnorm(arch, p, buf);
  EXPECT_TRUE(bit_identical(a, update_batchnorm(arch, p, buf)));
  EXPECT_TRUE(bit_identical(a, update_batchnorm(arch, a, buf)));
  EXPECT_THROW(update_batchnorm(mlp(), build_model(mlp(), 0), random_buffer(mlp(), 4, 0)), Error);
}

TEST(RepairAffine, SelfInterpolationNeedsNoCorrection) {
  const auto arch = mlp();
  const auto spec = permutation_spec_of(arch);
  const auto p = perturbed_model(arch, 1);
  const auto buf = random_buffer(arch, 64, 2);
  const auto stats = collect_activations(arch, p, p, buf, spec);
  for (double alpha : {0.0, 0.3, 1.0}) {
    const auto r = repair_affine(arch, interpolate(p, p, alpha), stats, alpha, buf);
    for (const auto& [name, t] : p.tensors)
      EXPECT_LT(max_abs_diff(r.at(name), t), 1e-5) << name << " alpha " << alpha;
  }
}

TEST(RepairAffine, AlphaZeroIsIdentityCorrection) {
  const auto arch = mlp();
  const auto spec = permutation_spec_of(arch);
  const auto a = perturbed_model(arch, 1), b = perturbed_model(arch, 2);
  const auto buf = random_buffer(arch, 64, 3);
  const auto pi = calc_permutation(arch, a, b, buf, spec);
  const auto stats = permute_stats(collect_activations(arch, a, b, buf, spec), pi);
  const auto r = repair_affine(arch, interpolate(a, apply_permutation(b, pi, spec), 0.0), stats,
                               0.0, buf);
  for (const auto& [name, t] : a.tensors) EXPECT_LT(max_abs_diff(r.at(name), t), 1e-5) << name;
}

TEST(RepairAffine, MeasuredMomentsHitTargets) {
  const auto arch = mlp();
  const auto spec = permutation_spec_of(arch);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto a = perturbed_model(arch, 10 + seed), b = perturbed_model(arch, 20 + seed);
    const auto buf = random_buffer(arch, 200, 30 + seed);
    const auto pi = calc_permutation(arch, a, b, buf, spec);
    const auto bp = apply_permutation(b, pi, spec);
    const auto stats = permute_stats(collect_activations(arch, a, b, buf, spec), pi);
    // Moments of the aligned θ_P measured directly agree with the permuted stats.
    const auto direct = collect_activations(arch, a, bp, buf, spec);
    for (std::size_t g = 0; g < spec.groups.size(); ++g)
      for (std::size_t c = 0; c < spec.groups[g].size; ++c)
        EXPECT_NEAR(direct.groups[g].producer_theta_p.mean[c],
                    stats.groups[g].producer_theta_p.mean[c], 1e-9);

    for (double alpha : {0.3, 0.5, 0.8}) {
      const auto r = repair_affine(arch, interpolate(a, bp, alpha), stats, alpha, buf);
      const auto after = collect_activations(arch, r, r, buf, spec);
      for (std::size_t g = 0; g < spec.groups.size(); ++g) {
        const auto& m = after.groups[g].producer_theta;
        const auto& ta = stats.groups[g].producer_theta;
        const auto& tb = stats.groups[g].producer_theta_p;
        for (std::size_t c = 0; c < spec.groups[g].size; ++c) {
          const double mean = (1 - alpha) * ta.mean[c] + alpha * tb.mean[c];
          const double var = (1 - alpha) * ta.var[c] + alpha * tb.var[c];
          EXPECT_LT(std::abs(m.mean[c] - mean), 1e-3) << "group " << g << " ch " << c;
          EXPECT_LT(std::abs(m.var[c] - var) / var, 0.05) << "group " << g << " ch " << c;
        }
      }
    }
  }
}

TEST(RepairAffine, RejectsBatchNormArchitectures) {
  const auto arch = convnet();
  const auto p = build_model(arch, 0);
  const auto buf = random_buffer(arch, 8, 0);
  const auto stats = collect_activations(arch, p, p, buf, permutation_spec_of(arch));
  EXPECT_THROW(repair_affine(arch, p, stats, 0.5, buf), Error);
}

TEST(ClewiTaskStep, SelfInterpolationPreservesFunction) {
  for (const auto& arch : all_archs()) {
    const auto p = perturbed_model(arch, 12);
    const auto buf = random_buffer(arch, 96, 13);
    const auto r = clewi_task_step(arch, p, p, buf, 0.37);
    EXPECT_TRUE(r.permutation.is_identity());
    const auto ref = arch.has_batchnorm() ? update_batchnorm(arch, p, buf) : p;
    const auto x = random_input(arch, 50, 14);
    EXPECT_LT(max_abs_diff(predict(arch, r.params, x), predict(arch, ref, x)), 1e-4)
        << to_string(arch.id);
    // Dead channels correlate to zero by convention.
    const auto stats = collect_activations(arch, p, p, buf, permutation_spec_of(arch));
    for (std::size_t g = 0; g < stats.groups.size(); ++g) {
      const auto& var = stats.groups[g].theta.var;
      const double live = double(std::count_if(var.begin(), var.end(), [](double v) { return v > 0; }));
      EXPECT_NEAR(r.mean_matched_correlation[g], live / double(var.size()), 1e-6);
    }
  }
}

TEST(ClewiTaskStep, DistinctNetworksGiveFiniteDeterministicResult) {
  for (const auto& arch : all_archs()) {
    const auto a = perturbed_model(arch, 1), b = perturbed_model(arch, 2);
    const auto buf = random_buffer(arch, 64, 3);
    const auto r1 = clewi_task_step(arch, a, b, buf, 0.3);
    const auto r2 = clewi_task_step(arch, a, b, buf, 0.3);
    EXPECT_TRUE(bit_identical(r1.params, r2.params));
    EXPECT_EQ(r1.permutation, r2.permutation);
    EXPECT_DOUBLE_EQ(r1.alpha, 0.3);
    for (const auto& [name, t] : r1.params.tensors) {
      EXPECT_TRUE(t.all_finite()) << name;
      EXPECT_EQ(t.shape(), a.at(name).shape());
    }
    ASSERT_EQ(r1.mean_matched_correlation.size(), permutation_spec_of(arch).groups.size());
    for (double c : r1.mean_matched_correlation) {
      EXPECT_TRUE(std::isfinite(c));
      EXPECT_GT(c, 0.0);
    }
  }
}
