#include "dap/vit.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numbers>
#include <numeric>

#include "dap/error.hpp"
#include "dap/fileio.hpp"
#include "dap/random.hpp"

namespace dap {

namespace {

constexpr double kLayerNormEps = 1e-6;
constexpr double kInitStd = 0.02;
constexpr double kAdamBeta2 = 0.999;
constexpr float kAdamEps = 1e-8f;
constexpr std::string_view kCheckpointMagic = "DAPCKPT1";

template <typename T>
BasicMatrix<T> row_vector(std::size_t n, T fill = T{0}) {
  return BasicMatrix<T>(1, n, fill);
}

// out = x * W + b (b broadcast over rows)
template <typename T>
BasicMatrix<T> affine(const BasicMatrix<T>& x, const BasicMatrix<T>& w, const BasicMatrix<T>& b) {
  BasicMatrix<T> out(x.rows(), w.cols());
  for (std::size_t i = 0; i < out.rows(); ++i) std::copy(b.data().begin(), b.data().end(), out.row(i).begin());
  gemm_acc<T>(x.data(), w.data(), out.data(), x.rows(), x.cols(), w.cols());
  return out;
}

template <typename T>
void add_column_sums(const BasicMatrix<T>& m, BasicMatrix<T>& acc) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < m.cols(); ++j) acc.data()[j] += r[j];
  }
}

template <typename T>
BasicMatrix<T> layer_norm(const BasicMatrix<T>& x, const BasicMatrix<T>& gamma, const BasicMatrix<T>& beta,
                          std::vector<T>& mean, std::vector<T>& rstd) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  BasicMatrix<T> out(n, d);
  mean.assign(n, T{0});
  rstd.assign(n, T{0});
  for (std::size_t i = 0; i < n; ++i) {
    auto r = x.row(i);
    T mu{0};
    for (T v : r) mu += v;
    mu /= static_cast<T>(d);
    T var{0};
    for (T v : r) var += (v - mu) * (v - mu);
    var /= static_cast<T>(d);
    const T rs = T{1} / std::sqrt(var + static_cast<T>(kLayerNormEps));
    mean[i] = mu;
    rstd[i] = rs;
    auto o = out.row(i);
    for (std::size_t j = 0; j < d; ++j) o[j] = (r[j] - mu) * rs * gamma.data()[j] + beta.data()[j];
  }
  return out;
}

// Returns dx; accumulates dgamma/dbeta when non-null.
template <typename T>
BasicMatrix<T> layer_norm_backward(const BasicMatrix<T>& x, const BasicMatrix<T>& dy, const BasicMatrix<T>& gamma,
                                   const std::vector<T>& mean, const std::vector<T>& rstd, BasicMatrix<T>* dgamma,
                                   BasicMatrix<T>* dbeta) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  BasicMatrix<T> dx(n, d);
  std::vector<T> xhat(d), dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    auto xr = x.row(i);
    auto dyr = dy.row(i);
    T mean_dxhat{0}, mean_dxhat_xhat{0};
    for (std::size_t j = 0; j < d; ++j) {
      xhat[j] = (xr[j] - mean[i]) * rstd[i];
      dxhat[j] = dyr[j] * gamma.data()[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xhat[j];
      if (dgamma) dgamma->data()[j] += dyr[j] * xhat[j];
      if (dbeta) dbeta->data()[j] += dyr[j];
    }
    mean_dxhat /= static_cast<T>(d);
    mean_dxhat_xhat /= static_cast<T>(d);
    auto dxr = dx.row(i);
    for (std::size_t j = 0; j < d; ++j) dxr[j] = rstd[i] * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
  }
  return dx;
}

template <typename T>
T gelu(T x) {
  return static_cast<T>(0.5) * x * (T{1} + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2.0)));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = static_cast<T>(0.5) * (T{1} + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2.0)));
  const T pdf = std::exp(static_cast<T>(-0.5) * x * x) * static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

// Copies columns [col, col + width) into a contiguous matrix.
template <typename T>
BasicMatrix<T> column_slice(const BasicMatrix<T>& m, std::size_t col, std::size_t width) {
  BasicMatrix<T> out(m.rows(), width);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto src = m.row(i).subspan(col, width);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

template <typename T>
void add_into_columns(BasicMatrix<T>& m, std::size_t col, const BasicMatrix<T>& src) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto dst = m.row(i).subspan(col, src.cols());
    auto s = src.row(i);
    for (std::size_t j = 0; j < src.cols(); ++j) dst[j] += s[j];
  }
}

template <typename T>
BasicMatrix<T> extract_patches(const ViTConfig& cfg, const Image& image) {
  if (image.channels != cfg.channels || image.height != cfg.image_size || image.width != cfg.image_size) {
    throw ShapeError("image " + std::to_string(image.channels) + "x" + std::to_string(image.height) + "x" +
                     std::to_string(image.width) + " does not match model input " + std::to_string(cfg.channels) +
                     "x" + std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
  }
  if (image.pixels.size() != image.channels * image.height * image.width) throw ShapeError("image buffer size mismatch");
  for (float v : image.pixels) {
    if (!(v >= 0.0f && v <= 1.0f)) throw InputError("pixel values must lie in [0, 1]");
  }
  const std::size_t g = cfg.grid_side();
  const std::size_t ps = cfg.patch_size;
  BasicMatrix<T> patches(cfg.num_patches(), cfg.patch_dim());
  for (std::size_t py = 0; py < g; ++py)
    for (std::size_t px = 0; px < g; ++px) {
      auto row = patches.row(py * g + px);
      std::size_t col = 0;
      for (std::size_t c = 0; c < cfg.channels; ++c)
        for (std::size_t dy = 0; dy < ps; ++dy)
          for (std::size_t dx = 0; dx < ps; ++dx) row[col++] = static_cast<T>(image.at(c, py * ps + dy, px * ps + dx));
    }
  return patches;
}

template <typename T>
std::size_t argmax(std::span<const T> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

// ---------------------------------------------------------------- config

void ViTConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
    throw ConfigError("image_size must be a positive multiple of patch_size");
  if (channels == 0 || embed_dim == 0 || num_layers == 0 || num_heads == 0 || mlp_hidden == 0)
    throw ConfigError("channels, embed_dim, num_layers, num_heads and mlp_hidden must be positive");
  if (embed_dim % num_heads != 0) throw ConfigError("embed_dim must be divisible by num_heads");
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
}

void to_json(nlohmann::json& j, const ViTConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"channels", c.channels},
                     {"embed_dim", c.embed_dim},   {"num_layers", c.num_layers}, {"num_heads", c.num_heads},
                     {"mlp_hidden", c.mlp_hidden}, {"num_classes", c.num_classes}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ViTConfig& c) {
  ViTConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.channels = j.value("channels", d.channels);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.num_layers = j.value("num_layers", d.num_layers);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.mlp_hidden = j.value("mlp_hidden", d.mlp_hidden);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.seed = j.value("seed", d.seed);
}

void to_json(nlohmann::json& j, const TrainOptions& o) {
  j = nlohmann::json{{"epochs", o.epochs}, {"lr", o.lr}, {"momentum", o.momentum},
                     {"batch_size", o.batch_size}, {"grad_clip", o.grad_clip},
                     {"optimizer", o.optimizer == Optimizer::kAdam ? "adam" : "sgd"}, {"seed", o.seed}};
}

void from_json(const nlohmann::json& j, TrainOptions& o) {
  TrainOptions d;
  o.epochs = j.value("epochs", d.epochs);
  o.lr = j.value("lr", d.lr);
  o.momentum = j.value("momentum", d.momentum);
  o.batch_size = j.value("batch_size", d.batch_size);
  o.grad_clip = j.value("grad_clip", d.grad_clip);
  const std::string opt = j.value("optimizer", std::string(d.optimizer == Optimizer::kAdam ? "adam" : "sgd"));
  if (opt == "sgd") o.optimizer = Optimizer::kSgd;
  else if (opt == "adam") o.optimizer = Optimizer::kAdam;
  else throw ConfigError("unknown optimizer: " + opt);
  o.seed = j.value("seed", d.seed);
}

// ---------------------------------------------------------------- params

template <typename T>
std::vector<std::pair<std::string, const BasicMatrix<T>*>> BasicViTParams<T>::named_tensors() const {
  std::vector<std::pair<std::string, const BasicMatrix<T>*>> out{
      {"patch_weight", &patch_weight}, {"patch_bias", &patch_bias}, {"class_token", &class_token}, {"pos_embed", &pos_embed}};
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.insert(out.end(), {{p + "ln1_gamma", &b.ln1_gamma},
                           {p + "ln1_beta", &b.ln1_beta},
                           {p + "qkv_weight", &b.qkv_weight},
                           {p + "qkv_bias", &b.qkv_bias},
                           {p + "proj_weight", &b.proj_weight},
                           {p + "proj_bias", &b.proj_bias},
                           {p + "ln2_gamma", &b.ln2_gamma},
                           {p + "ln2_beta", &b.ln2_beta},
                           {p + "mlp_weight1", &b.mlp_weight1},
                           {p + "mlp_bias1", &b.mlp_bias1},
                           {p + "mlp_weight2", &b.mlp_weight2},
                           {p + "mlp_bias2", &b.mlp_bias2}});
  }
  out.insert(out.end(), {{"norm_gamma", &norm_gamma}, {"norm_beta", &norm_beta}, {"head_weight", &head_weight},
                         {"head_bias", &head_bias}});
  return out;
}

template <typename T>
std::vector<std::pair<std::string, BasicMatrix<T>*>> BasicViTParams<T>::named_tensors() {
  auto const_view = std::as_const(*this).named_tensors();
  std::vector<std::pair<std::string, BasicMatrix<T>*>> out;
  out.reserve(const_view.size());
  for (auto& [name, ptr] : const_view) out.emplace_back(std::move(name), const_cast<BasicMatrix<T>*>(ptr));
  return out;
}

template <typename T>
BasicViTParams<T> BasicViTParams<T>::zeros_like() const {
  BasicViTParams<T> out = *this;
  for (auto& [name, t] : out.named_tensors()) t->fill(T{0});
  return out;
}

template <typename T>
template <typename U>
BasicViTParams<U> BasicViTParams<T>::cast() const {
  BasicViTParams<U> out;
  out.config = config;
  out.blocks.resize(blocks.size());
  auto src = named_tensors();
  auto dst = out.named_tensors();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<U>();
  return out;
}

template <typename T>
std::size_t BasicViTParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_tensors()) n += t->size();
  return n;
}

template struct BasicViTParams<float>;
template struct BasicViTParams<double>;
template BasicViTParams<double> BasicViTParams<float>::cast<double>() const;
template BasicViTParams<float> BasicViTParams<double>::cast<float>() const;

ViTParams init_params(const ViTConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.embed_dim;
  ViTParams p;
  p.config = cfg;
  p.patch_weight = Matrix(cfg.patch_dim(), d);
  p.patch_bias = row_vector<float>(d);
  p.class_token = row_vector<float>(d);
  p.pos_embed = Matrix(cfg.num_tokens(), d);
  p.blocks.resize(cfg.num_layers);
  for (auto& b : p.blocks) {
    b.ln1_gamma = row_vector<float>(d, 1.0f);
    b.ln1_beta = row_vector<float>(d);
    b.qkv_weight = Matrix(d, 3 * d);
    b.qkv_bias = row_vector<float>(3 * d);
    b.proj_weight = Matrix(d, d);
    b.proj_bias = row_vector<float>(d);
    b.ln2_gamma = row_vector<float>(d, 1.0f);
    b.ln2_beta = row_vector<float>(d);
    b.mlp_weight1 = Matrix(d, cfg.mlp_hidden);
    b.mlp_bias1 = row_vector<float>(cfg.mlp_hidden);
    b.mlp_weight2 = Matrix(cfg.mlp_hidden, d);
    b.mlp_bias2 = row_vector<float>(d);
  }
  p.norm_gamma = row_vector<float>(d, 1.0f);
  p.norm_beta = row_vector<float>(d);
  p.head_weight = Matrix(d, cfg.num_classes);
  p.head_bias = row_vector<float>(cfg.num_classes);

  Rng rng(cfg.seed);
  for (auto& [name, t] : p.named_tensors()) {
    const bool is_weight = name.ends_with("weight") || name == "class_token" || name == "pos_embed";
    if (!is_weight) continue;
    for (float& v : t->data()) v = static_cast<float>(rng.truncated_normal(kInitStd));
  }
  return p;
}

std::uint64_t params_checksum(const ViTParams& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : params.named_tensors()) h = fnv1a(t->data().data(), t->size() * sizeof(float), h);
  return h;
}

// ---------------------------------------------------------------- forward

template <typename T>
BasicMatrix<T> BasicForwardTrace<T>::gradcam_features() const {
  if (!has_activations()) throw StateError("trace holds no retained activations");
  const auto& ln1 = blocks.back().ln1_out;
  BasicMatrix<T> out(ln1.rows() - 1, ln1.cols());
  std::copy(ln1.data().begin() + static_cast<std::ptrdiff_t>(ln1.cols()), ln1.data().end(), out.data().begin());
  return out;
}

template <typename T>
BasicForwardTrace<T> forward(const BasicViTParams<T>& params, const Image& image, const BasicForwardOptions<T>& options) {
  const ViTConfig& cfg = params.config;
  const std::size_t n = cfg.num_tokens();
  const std::size_t d = cfg.embed_dim;
  const std::size_t heads = cfg.num_heads;
  const std::size_t dh = cfg.head_dim();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  BasicForwardTrace<T> trace;
  trace.attention = AttentionStack(cfg.num_layers, heads, n);

  BasicMatrix<T> patches = extract_patches<T>(cfg, image);
  BasicMatrix<T> embedded = affine(patches, params.patch_weight, params.patch_bias);
  BasicMatrix<T> z(n, d);
  for (std::size_t j = 0; j < d; ++j) z(0, j) = params.class_token.data()[j] + params.pos_embed(0, j);
  for (std::size_t i = 1; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) z(i, j) = embedded(i - 1, j) + params.pos_embed(i, j);

  if (options.feature_offset && (options.feature_offset->rows() != n - 1 || options.feature_offset->cols() != d))
    throw ShapeError("feature offset must be P x embed_dim");

  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto& bp = params.blocks[l];
    BasicBlockCache<T> c;
    c.input = z;
    c.ln1_out = layer_norm(z, bp.ln1_gamma, bp.ln1_beta, c.ln1_mean, c.ln1_rstd);
    if (options.feature_offset && l + 1 == cfg.num_layers) {
      for (std::size_t i = 1; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) c.ln1_out(i, j) += (*options.feature_offset)(i - 1, j);
    }
    c.qkv = affine(c.ln1_out, bp.qkv_weight, bp.qkv_bias);
    c.context = BasicMatrix<T>(n, d);
    c.attention.resize(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto q = column_slice(c.qkv, h * dh, dh);
      const auto k = column_slice(c.qkv, d + h * dh, dh);
      const auto v = column_slice(c.qkv, 2 * d + h * dh, dh);
      BasicMatrix<T> s(n, n);
      gemm_nt_acc<T>(q.data(), k.data(), s.data(), n, dh, n);
      for (T& x : s.data()) x *= scale;
      softmax_rows(s);
      BasicMatrix<T> ctx(n, dh);
      gemm_acc<T>(s.data(), v.data(), ctx.data(), n, n, dh);
      add_into_columns(c.context, h * dh, ctx);
      auto& captured = trace.attention.at(l, h);
      for (std::size_t i = 0; i < s.size(); ++i) captured.data()[i] = static_cast<float>(s.data()[i]);
      c.attention[h] = std::move(s);
    }
    c.mid = affine(c.context, bp.proj_weight, bp.proj_bias);
    for (std::size_t i = 0; i < c.mid.size(); ++i) c.mid.data()[i] += z.data()[i];
    c.ln2_out = layer_norm(c.mid, bp.ln2_gamma, bp.ln2_beta, c.ln2_mean, c.ln2_rstd);
    c.hidden_pre = affine(c.ln2_out, bp.mlp_weight1, bp.mlp_bias1);
    c.hidden = c.hidden_pre;
    for (T& x : c.hidden.data()) x = gelu(x);
    z = affine(c.hidden, bp.mlp_weight2, bp.mlp_bias2);
    for (std::size_t i = 0; i < z.size(); ++i) z.data()[i] += c.mid.data()[i];
    if (options.retain_activations) trace.blocks.push_back(std::move(c));
  }

  BasicMatrix<T> cls(1, d);
  std::copy(z.row(0).begin(), z.row(0).end(), cls.data().begin());
  std::vector<T> mean, rstd;
  BasicMatrix<T> normed = layer_norm(cls, params.norm_gamma, params.norm_beta, mean, rstd);
  BasicMatrix<T> logits = affine(normed, params.head_weight, params.head_bias);
  trace.logits.assign(logits.data().begin(), logits.data().end());
  if (!all_finite<T>(trace.logits)) throw InputError("forward produced non-finite logits");
  trace.predicted_class = argmax<T>(trace.logits);

  if (options.retain_activations) {
    trace.patches = std::move(patches);
    trace.final_stream = std::move(z);
    trace.final_norm = std::move(normed);
    trace.final_mean = mean[0];
    trace.final_rstd = rstd[0];
  }
  return trace;
}

std::vector<double> predict_probabilities(const ViTParams& params, const Image& image) {
  const auto trace = forward(params, image, BasicForwardOptions<float>{.retain_activations = false});
  std::vector<double> p(trace.logits.begin(), trace.logits.end());
  const double mx = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (double& v : p) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : p) v /= sum;
  return p;
}

// ---------------------------------------------------------------- backward

template <typename T>
BasicGradientBundle<T> backward(const BasicViTParams<T>& params, const BasicForwardTrace<T>& trace,
                                std::span<const T> upstream, bool with_param_grads) {
  if (!trace.has_activations()) throw StateError("trace holds no retained activations; rerun forward with retain");
  const ViTConfig& cfg = params.config;
  if (upstream.size() != cfg.num_classes) throw ShapeError("upstream gradient length must equal num_classes");
  const std::size_t n = cfg.num_tokens();
  const std::size_t d = cfg.embed_dim;
  const std::size_t m = cfg.mlp_hidden;
  const std::size_t heads = cfg.num_heads;
  const std::size_t dh = cfg.head_dim();
  const std::size_t k = cfg.num_classes;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  BasicGradientBundle<T> out;
  out.attention_grads.resize(cfg.num_layers * heads);
  BasicViTParams<T>* g = nullptr;
  if (with_param_grads) {
    out.param_grads = params.zeros_like();
    g = &*out.param_grads;
  }

  // head
  BasicMatrix<T> up(1, k, T{0});
  std::copy(upstream.begin(), upstream.end(), up.data().begin());
  if (g) {
    gemm_tn_acc<T>(trace.final_norm.data(), up.data(), g->head_weight.data(), 1, d, k);
    add_column_sums(up, g->head_bias);
  }
  BasicMatrix<T> dnorm(1, d);
  gemm_nt_acc<T>(up.data(), params.head_weight.data(), dnorm.data(), 1, k, d);

  BasicMatrix<T> cls(1, d);
  std::copy(trace.final_stream.row(0).begin(), trace.final_stream.row(0).end(), cls.data().begin());
  const std::vector<T> fmean{trace.final_mean}, frstd{trace.final_rstd};
  BasicMatrix<T> dcls = layer_norm_backward(cls, dnorm, params.norm_gamma, fmean, frstd, g ? &g->norm_gamma : nullptr,
                                            g ? &g->norm_beta : nullptr);
  BasicMatrix<T> dz(n, d);
  std::copy(dcls.data().begin(), dcls.data().end(), dz.row(0).begin());

  for (std::size_t li = cfg.num_layers; li-- > 0;) {
    const auto& bp = params.blocks[li];
    const auto& c = trace.blocks[li];
    auto* gb = g ? &g->blocks[li] : nullptr;

    // MLP branch: z_out = mid + gelu(ln2 W1 + b1) W2 + b2
    BasicMatrix<T> dmid = dz;
    BasicMatrix<T> dhidden(n, m);
    gemm_nt_acc<T>(dz.data(), bp.mlp_weight2.data(), dhidden.data(), n, d, m);
    if (gb) {
      gemm_tn_acc<T>(c.hidden.data(), dz.data(), gb->mlp_weight2.data(), n, m, d);
      add_column_sums(dz, gb->mlp_bias2);
    }
    for (std::size_t i = 0; i < dhidden.size(); ++i) dhidden.data()[i] *= gelu_grad(c.hidden_pre.data()[i]);
    if (gb) {
      gemm_tn_acc<T>(c.ln2_out.data(), dhidden.data(), gb->mlp_weight1.data(), n, d, m);
      add_column_sums(dhidden, gb->mlp_bias1);
    }
    BasicMatrix<T> dln2(n, d);
    gemm_nt_acc<T>(dhidden.data(), bp.mlp_weight1.data(), dln2.data(), n, m, d);
    const auto dmid_ln = layer_norm_backward(c.mid, dln2, bp.ln2_gamma, c.ln2_mean, c.ln2_rstd,
                                             gb ? &gb->ln2_gamma : nullptr, gb ? &gb->ln2_beta : nullptr);
    for (std::size_t i = 0; i < dmid.size(); ++i) dmid.data()[i] += dmid_ln.data()[i];

    // attention branch: mid = input + context Wp + bp
    BasicMatrix<T> dinput = dmid;
    BasicMatrix<T> dcontext(n, d);
    gemm_nt_acc<T>(dmid.data(), bp.proj_weight.data(), dcontext.data(), n, d, d);
    if (gb) {
      gemm_tn_acc<T>(c.context.data(), dmid.data(), gb->proj_weight.data(), n, d, d);
      add_column_sums(dmid, gb->proj_bias);
    }
    BasicMatrix<T> dqkv(n, 3 * d);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto q = column_slice(c.qkv, h * dh, dh);
      const auto kk = column_slice(c.qkv, d + h * dh, dh);
      const auto v = column_slice(c.qkv, 2 * d + h * dh, dh);
      const auto dctx = column_slice(dcontext, h * dh, dh);
      const auto& a = c.attention[h];

      BasicMatrix<T> da(n, n);
      gemm_nt_acc<T>(dctx.data(), v.data(), da.data(), n, dh, n);
      BasicMatrix<T> dv(n, dh);
      gemm_tn_acc<T>(a.data(), dctx.data(), dv.data(), n, n, dh);

      BasicMatrix<T> ds(n, n);
      for (std::size_t i = 0; i < n; ++i) {
        auto ar = a.row(i);
        auto dar = da.row(i);
        T dot{0};
        for (std::size_t j = 0; j < n; ++j) dot += ar[j] * dar[j];
        auto dsr = ds.row(i);
        for (std::size_t j = 0; j < n; ++j) dsr[j] = ar[j] * (dar[j] - dot) * scale;
      }
      BasicMatrix<T> dq(n, dh), dk(n, dh);
      gemm_acc<T>(ds.data(), kk.data(), dq.data(), n, n, dh);
      gemm_tn_acc<T>(ds.data(), q.data(), dk.data(), n, n, dh);
      add_into_columns(dqkv, h * dh, dq);
      add_into_columns(dqkv, d + h * dh, dk);
      add_into_columns(dqkv, 2 * d + h * dh, dv);
      out.attention_grads[li * heads + h] = std::move(da);
    }
    if (gb) {
      gemm_tn_acc<T>(c.ln1_out.data(), dqkv.data(), gb->qkv_weight.data(), n, d, 3 * d);
      add_column_sums(dqkv, gb->qkv_bias);
    }
    BasicMatrix<T> dln1(n, d);
    gemm_nt_acc<T>(dqkv.data(), bp.qkv_weight.data(), dln1.data(), n, 3 * d, d);
    if (li + 1 == cfg.num_layers) {
      out.feature_grad = BasicMatrix<T>(n - 1, d);
      std::copy(dln1.data().begin() + static_cast<std::ptrdiff_t>(d), dln1.data().end(), out.feature_grad.data().begin());
    }
    const auto dinput_ln = layer_norm_backward(c.input, dln1, bp.ln1_gamma, c.ln1_mean, c.ln1_rstd,
                                               gb ? &gb->ln1_gamma : nullptr, gb ? &gb->ln1_beta : nullptr);
    for (std::size_t i = 0; i < dinput.size(); ++i) dinput.data()[i] += dinput_ln.data()[i];
    dz = std::move(dinput);
  }

  if (g) {
    for (std::size_t i = 0; i < dz.size(); ++i) g->pos_embed.data()[i] += dz.data()[i];
    for (std::size_t j = 0; j < d; ++j) g->class_token.data()[j] += dz(0, j);
    const std::span<const T> dpatch(dz.data().data() + d, (n - 1) * d);
    gemm_tn_acc<T>(trace.patches.data(), dpatch, g->patch_weight.data(), n - 1, cfg.patch_dim(), d);
    for (std::size_t i = 1; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) g->patch_bias.data()[j] += dz(i, j);
  }
  return out;
}

template <typename T>
BasicGradientBundle<T> backward_class_score(const BasicViTParams<T>& params, const BasicForwardTrace<T>& trace,
                                            std::size_t class_idx, bool with_param_grads) {
  if (class_idx >= params.config.num_classes) throw InputError("class index out of range");
  std::vector<T> up(params.config.num_classes, T{0});
  up[class_idx] = T{1};
  auto bundle = backward<T>(params, trace, up, with_param_grads);
  bundle.class_index = class_idx;
  return bundle;
}

#define DAP_INSTANTIATE(T)                                                                                 \
  template struct BasicForwardTrace<T>;                                                                    \
  template BasicForwardTrace<T> forward(const BasicViTParams<T>&, const Image&, const BasicForwardOptions<T>&); \
  template BasicGradientBundle<T> backward(const BasicViTParams<T>&, const BasicForwardTrace<T>&,          \
                                           std::span<const T>, bool);                                     \
  template BasicGradientBundle<T> backward_class_score(const BasicViTParams<T>&, const BasicForwardTrace<T>&, \
                                                       std::size_t, bool);

DAP_INSTANTIATE(float)
DAP_INSTANTIATE(double)
#undef DAP_INSTANTIATE

// ---------------------------------------------------------------- training

double evaluate_accuracy(const ViTParams& params, std::span<const Sample> samples) {
  if (samples.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& s : samples) {
    const auto trace = forward(params, s.image, BasicForwardOptions<float>{.retain_activations = false});
    if (trace.predicted_class == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

TrainResult train(const ViTConfig& cfg, std::span<const Sample> train_set, std::span<const Sample> val_set,
                  const TrainOptions& options) {
  cfg.validate();
  if (options.batch_size == 0) throw ConfigError("batch_size must be positive");
  TrainResult result;
  result.params = init_params(cfg);
  ViTParams& params = result.params;
  ViTParams velocity = params.zeros_like();
  ViTParams second = options.optimizer == Optimizer::kAdam ? params.zeros_like() : ViTParams{};
  auto sec_list = second.named_tensors();
  std::size_t step = 0;
  auto param_list = params.named_tensors();
  auto vel_list = velocity.named_tensors();

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(options.seed, 0x545241494eULL));
  const auto lr = static_cast<float>(options.lr);
  const auto mu = static_cast<float>(options.momentum);

  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      const float inv_batch = 1.0f / static_cast<float>(end - start);
      ViTParams grads = params.zeros_like();
      auto grad_list = grads.named_tensors();
      for (std::size_t b = start; b < end; ++b) {
        const Sample& s = train_set[order[b]];
        if (s.label >= cfg.num_classes) throw ConfigError("sample label exceeds num_classes");
        ForwardTrace trace;
        try {
          trace = forward(params, s.image);
        } catch (const InputError& e) {
          throw TrainingError(epoch, e.what());
        }
        const auto& z = trace.logits;
        const float mx = *std::max_element(z.begin(), z.end());
        double denom = 0.0;
        for (float v : z) denom += std::exp(static_cast<double>(v - mx));
        const double loss = std::log(denom) - static_cast<double>(z[s.label] - mx);
        if (!std::isfinite(loss)) throw TrainingError(epoch, "loss is not finite");
        loss_sum += loss;
        if (trace.predicted_class == s.label) ++correct;
        std::vector<float> up(cfg.num_classes);
        for (std::size_t c = 0; c < cfg.num_classes; ++c) {
          const double p = std::exp(static_cast<double>(z[c] - mx)) / denom;
          up[c] = static_cast<float>(p - (c == s.label ? 1.0 : 0.0)) * inv_batch;
        }
        const auto bundle = backward<float>(params, trace, up, true);
        const auto sample_grads = bundle.param_grads->named_tensors();
        for (std::size_t t = 0; t < grad_list.size(); ++t) {
          auto dst = grad_list[t].second->data();
          auto src = sample_grads[t].second->data();
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
      }
      float scale = 1.0f;
      if (options.grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto& [name, g] : grad_list)
          for (float x : g->data()) sq += static_cast<double>(x) * static_cast<double>(x);
        const double norm = std::sqrt(sq);
        if (norm > options.grad_clip) scale = static_cast<float>(options.grad_clip / norm);
      }
      ++step;
      if (options.optimizer == Optimizer::kAdam) {
        const double b1 = options.momentum, b2 = kAdamBeta2;
        const auto c1 = static_cast<float>(1.0 - std::pow(b1, static_cast<double>(step)));
        const auto c2 = static_cast<float>(1.0 - std::pow(b2, static_cast<double>(step)));
        const auto fb2 = static_cast<float>(b2);
        for (std::size_t t = 0; t < param_list.size(); ++t) {
          auto p = param_list[t].second->data();
          auto m = vel_list[t].second->data();
          auto v = sec_list[t].second->data();
          auto gr = grad_list[t].second->data();
          for (std::size_t i = 0; i < p.size(); ++i) {
            const float g = scale * gr[i];
            m[i] = mu * m[i] + (1.0f - mu) * g;
            v[i] = fb2 * v[i] + (1.0f - fb2) * g * g;
            p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kAdamEps);
          }
        }
      } else {
        for (std::size_t t = 0; t < param_list.size(); ++t) {
          auto p = param_list[t].second->data();
          auto v = vel_list[t].second->data();
          auto gr = grad_list[t].second->data();
          for (std::size_t i = 0; i < p.size(); ++i) {
            v[i] = mu * v[i] + scale * gr[i];
            p[i] -= lr * v[i];
          }
        }
      }
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.loss = train_set.empty() ? 0.0 : loss_sum / static_cast<double>(train_set.size());
    entry.train_acc = train_set.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(train_set.size());
    try {
      entry.val_acc = evaluate_accuracy(params, val_set);
    } catch (const InputError& e) {
      throw TrainingError(epoch, e.what());
    }
    if (!std::isfinite(entry.loss)) throw TrainingError(epoch, "loss is not finite");
    result.log.push_back(entry);
  }
  result.train_acc = evaluate_accuracy(params, train_set);
  result.val_acc = evaluate_accuracy(params, val_set);
  return result;
}

TrainResult train(const ViTConfig& cfg, const DatasetSpec& dataset, const TrainOptions& options) {
  if (dataset.image_size != cfg.image_size || dataset.channels != cfg.channels)
    throw ConfigError("dataset image geometry does not match the model config");
  if (dataset.num_classes != cfg.num_classes) throw ConfigError("dataset classes do not match model classes");
  const auto train_set = generate_split(dataset, Split::kTrain);
  const auto val_set = generate_split(dataset, Split::kVal);
  return train(cfg, train_set, val_set, options);
}

// ---------------------------------------------------------------- checkpoint

namespace {

void append_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_u64_le(std::string_view bytes, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
  return v;
}

void append_f32_le(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float read_f32_le(std::string_view bytes, std::size_t at) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace

std::string serialize_checkpoint(const ViTParams& params) {
  nlohmann::json manifest;
  manifest["format"] = "dap-vit-checkpoint";
  manifest["version"] = 1;
  manifest["config"] = params.config;
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : params.named_tensors()) {
    tensors.push_back({{"name", name}, {"shape", {t->rows(), t->cols()}}, {"offset", offset}});
    offset += t->size() * sizeof(float);
  }
  manifest["tensors"] = tensors;
  manifest["blob_bytes"] = offset;
  const std::string text = manifest.dump();

  std::string out(kCheckpointMagic);
  append_u64_le(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : params.named_tensors())
    for (float v : t->data()) append_f32_le(out, v);
  return out;
}

ViTParams deserialize_checkpoint(std::string_view bytes) {
  const std::size_t header = kCheckpointMagic.size() + 8;
  if (bytes.size() < header || bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic)
    throw ParseError(0, "not a DAP checkpoint");
  const std::uint64_t manifest_size = read_u64_le(bytes, kCheckpointMagic.size());
  if (manifest_size > bytes.size() - header) throw ParseError(kCheckpointMagic.size(), "manifest length exceeds file");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(header, manifest_size));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(header, std::string("bad manifest: ") + e.what());
  }
  const ViTConfig cfg = manifest.at("config").get<ViTConfig>();
  ViTParams params = init_params(cfg);  // allocates every tensor with the right shape
  const std::size_t blob_at = header + manifest_size;
  const std::size_t blob_bytes = manifest.at("blob_bytes").get<std::size_t>();
  if (bytes.size() - blob_at != blob_bytes) {
    throw ParseError(blob_at, "blob: expected " + std::to_string(blob_bytes) + " bytes, got " +
                                  std::to_string(bytes.size() - blob_at));
  }
  auto tensors = params.named_tensors();
  const auto& table = manifest.at("tensors");
  if (table.size() != tensors.size()) throw ParseError(header, "tensor table does not match config");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& entry = table[i];
    auto* t = tensors[i].second;
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    if (entry.at("name").get<std::string>() != tensors[i].first || shape.size() != 2 || shape[0] != t->rows() ||
        shape[1] != t->cols())
      throw ParseError(header, "tensor " + tensors[i].first + " does not match config");
    const std::size_t off = entry.at("offset").get<std::size_t>();
    if (off + t->size() * sizeof(float) > blob_bytes) throw ParseError(blob_at + off, "tensor exceeds blob");
    for (std::size_t j = 0; j < t->size(); ++j) t->data()[j] = read_f32_le(bytes, blob_at + off + j * sizeof(float));
  }
  return params;
}

void save_checkpoint(const ViTParams& params, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(params));
}

ViTParams load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace dap
