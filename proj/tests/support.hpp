#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dap/attention.hpp"
#include "dap/prior.hpp"
#include "dap/random.hpp"
#include "dap/vit.hpp"

namespace dap::testing {

// Rank by counting: 1 + (# strictly smaller) + (# equal others) / 2.
inline std::vector<long double> counted_ranks(std::span<const double> v) {
  std::vector<long double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::size_t less = 0, equal = 0;
    for (std::size_t j = 0; j < v.size(); ++j) {
      if (v[j] < v[i]) ++less;
      if (j != i && v[j] == v[i]) ++equal;
    }
    r[i] = 1.0L + static_cast<long double>(less) + static_cast<long double>(equal) / 2.0L;
  }
  return r;
}

inline double brute_spearman(std::span<const double> a, std::span<const double> b) {
  const auto ra = counted_ranks(a);
  const auto rb = counted_ranks(b);
  const auto n = static_cast<long double>(a.size());
  long double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  long double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return static_cast<double>(sab / std::sqrt(saa * sbb));
}

// Softmax rows of scaled Gaussian logits, so every row is strictly positive.
inline AttentionStack random_stack(Rng& rng, std::size_t layers, std::size_t heads, std::size_t patches,
                                   double temperature = 2.0) {
  const std::size_t n = patches + 1;
  AttentionStack stack(layers, heads, n);
  for (std::size_t l = 0; l < layers; ++l)
    for (std::size_t h = 0; h < heads; ++h) {
      Matrix& a = stack.at(l, h);
      for (std::size_t i = 0; i < n; ++i) {
        double sum = 0;
        std::vector<double> row(n);
        for (std::size_t j = 0; j < n; ++j) sum += row[j] = std::exp(temperature * rng.normal());
        for (std::size_t j = 0; j < n; ++j) a(i, j) = static_cast<float>(row[j] / sum);
      }
    }
  return stack;
}

inline DecisionPrior random_prior(Rng& rng, std::size_t patches) {
  TokenImportance s;
  s.grid_side = 0;
  s.scores.resize(patches);
  for (double& v : s.scores) v = std::max(0.0, rng.normal());
  return build_prior(s, 0);
}

// Small model for gradient checks: default initialization plus jitter on the
// gains and biases so that no parameter group sits at a symmetric point.
inline ViTParams jittered_model(const ViTConfig& cfg, std::uint64_t seed) {
  ViTParams p = init_params(cfg);
  Rng rng(seed);
  for (auto& [name, t] : p.named_tensors()) {
    const bool affine = name.find("gamma") != std::string::npos || name.find("beta") != std::string::npos ||
                        name.find("bias") != std::string::npos;
    for (float& v : t->data()) v = affine ? v + 0.1f * static_cast<float>(rng.normal()) : 3.0f * v;
  }
  return p;
}

inline Image random_image(Rng& rng, std::size_t channels, std::size_t size) {
  Image img(channels, size, size);
  for (float& v : img.pixels) v = static_cast<float>(rng.uniform());
  return img;
}

struct GradCheckResult {
  std::size_t coordinates = 0;
  double worst_relative = 0.0;
  std::string worst_at;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

// Compares the float32 analytic gradient of logit `cls` against central
// differences (step h) of the same network evaluated in double precision.
// Samples `per_group` coordinates from each named parameter and from the
// Grad-CAM feature site.
inline GradCheckResult gradient_check(const ViTParams& params, const Image& image, std::size_t cls,
                                      const std::vector<std::string>& groups, std::size_t per_group,
                                      std::size_t feature_coords, Rng& rng, double h = 1e-3) {
  GradCheckResult out;
  const auto trace = forward(params, image);
  const auto bundle = backward_class_score(params, trace, cls, true);
  auto ref = params.cast<double>();
  const auto note = [&](double rel, const std::string& where) {
    ++out.coordinates;
    if (rel >= out.worst_relative) {
      out.worst_relative = rel;
      out.worst_at = where;
    }
  };
  for (const auto& group : groups) {
    BasicMatrix<double>* target = nullptr;
    const Matrix* grad = nullptr;
    for (auto& [n, t] : ref.named_tensors())
      if (n == group) target = t;
    for (const auto& [n, t] : std::as_const(*bundle.param_grads).named_tensors())
      if (n == group) grad = t;
    if (!target || !grad) throw std::invalid_argument("no parameter named " + group);
    for (std::size_t k = 0; k < per_group; ++k) {
      const std::size_t i = rng.below(target->size());
      const double old = target->data()[i];
      target->data()[i] = old + h;
      const double up = forward(ref, image).logits[cls];
      target->data()[i] = old - h;
      const double down = forward(ref, image).logits[cls];
      target->data()[i] = old;
      note(relative_error(grad->data()[i], (up - down) / (2 * h)), group + "[" + std::to_string(i) + "]");
    }
  }
  const std::size_t patches = params.config.num_patches();
  const std::size_t dim = params.config.embed_dim;
  for (std::size_t k = 0; k < feature_coords; ++k) {
    const std::size_t r = rng.below(patches);
    const std::size_t c = rng.below(dim);
    BasicMatrix<double> offset(patches, dim);
    BasicForwardOptions<double> opts;
    opts.feature_offset = &offset;
    offset(r, c) = h;
    const double up = forward(ref, image, opts).logits[cls];
    offset(r, c) = -h;
    const double down = forward(ref, image, opts).logits[cls];
    note(relative_error(bundle.feature_grad(r, c), (up - down) / (2 * h)),
         "features[" + std::to_string(r) + "," + std::to_string(c) + "]");
  }
  return out;
}

}  // namespace dap::testing
