#include "fusiondiff/dit.hpp"

#include <cmath>
#include <numbers>

#include "dit_blocks.hpp"
#include "fusiondiff/control_adapter.hpp"
#include "fusiondiff/errors.hpp"
#include "fusiondiff/rng.hpp"

namespace fusiondiff {

void DitConfig::validate() const {
  if (d_vl < 1 || channels < 1 || height < 1 || width < 1 || patch < 1 || hidden < 1 || heads < 1 || depth < 1 ||
      text_dim < 1 || mlp_ratio < 1)
    throw ConfigError("dit: all dimensions must be positive");
  if (height % patch || width % patch) throw ConfigError("dit: H and W must be divisible by the patch size");
  if (hidden % heads) throw ConfigError("dit: hidden width must be divisible by the head count");
  if (hidden % 4) throw ConfigError("dit: hidden width must be divisible by 4 (2-D sinusoidal positions)");
}

DitConfig DitConfig::full_scale() {
  DitConfig c;
  c.d_vl = 1536;
  c.channels = 4;
  c.height = 32;
  c.width = 32;
  c.patch = 2;
  c.hidden = 1152;
  c.heads = 16;
  c.depth = 14;
  c.text_dim = 1152;
  return c;
}

void to_json(nlohmann::json& j, const DitConfig& c) {
  j = {{"d_vl", c.d_vl},     {"channels", c.channels}, {"height", c.height}, {"width", c.width},
       {"patch", c.patch},   {"hidden", c.hidden},     {"heads", c.heads},   {"depth", c.depth},
       {"text_dim", c.text_dim}, {"mlp_ratio", c.mlp_ratio}};
}

void from_json(const nlohmann::json& j, DitConfig& c) {
  DitConfig d;
  c.d_vl = j.value("d_vl", d.d_vl);
  c.channels = j.value("channels", d.channels);
  c.height = j.value("height", d.height);
  c.width = j.value("width", d.width);
  c.patch = j.value("patch", d.patch);
  c.hidden = j.value("hidden", d.hidden);
  c.heads = j.value("heads", d.heads);
  c.depth = j.value("depth", d.depth);
  c.text_dim = j.value("text_dim", d.text_dim);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
}

size_t block_param_count(const DitConfig& c) {
  const size_t D = c.hidden, F = static_cast<size_t>(c.mlp_ratio) * c.hidden;
  size_t n = 0;
  n += 6 * D * D + 6 * D;          // AdaLN regressor
  n += 3 * D * D + 3 * D;          // self-attention qkv
  n += D * D + D;                  // self-attention out
  n += D * D + D;                  // cross-attention q
  n += 2 * D * D + 2 * D;          // cross-attention kv
  n += D * D + D;                  // cross-attention out
  n += F * D + F + D * F + D;      // FFN
  n += 3 * D;                      // zero gates
  return n;
}

size_t backbone_param_count(const DitConfig& c) {
  const size_t d = c.d_vl, S = c.spatial(), P = c.patch_dim(), D = c.hidden, Dt = c.text_dim;
  size_t n = 0;
  n += S * d + S;              // projector
  n += D * P + D;              // patch embed
  n += 2 * (D * D + D);        // time MLP
  n += D * Dt + D;             // text projection
  n += 2 * static_cast<size_t>(c.depth) * block_param_count(c);
  n += 2 * D * D + 2 * D;      // final AdaLN
  n += P * D + P;              // unpatch
  n += d * S + d;              // output head
  return n;
}

namespace detail {

namespace {

constexpr double kLnEps = 1e-6;

void ln_forward(const Mat& x, Mat& xhat, Vec& rstd) {
  const auto D = x.cols();
  xhat.resize(x.rows(), D);
  rstd.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mu = x.row(r).mean();
    auto centered = x.row(r).array() - mu;
    double var = centered.square().sum() / static_cast<double>(D);
    rstd[r] = 1.0 / std::sqrt(var + kLnEps);
    xhat.row(r) = centered * rstd[r];
  }
}

Mat ln_backward(const Mat& g_xhat, const Mat& xhat, const Vec& rstd) {
  Mat g(g_xhat.rows(), g_xhat.cols());
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    double mean_g = g_xhat.row(r).mean();
    double mean_gx = g_xhat.row(r).cwiseProduct(xhat.row(r)).mean();
    g.row(r) = rstd[r] * (g_xhat.row(r).array() - mean_g - xhat.row(r).array() * mean_gx);
  }
  return g;
}

// out = xhat * (1 + scale) + shift, row broadcast.
Mat modulate(const Mat& xhat, const Eigen::Ref<const Vec>& shift, const Eigen::Ref<const Vec>& scale) {
  Mat out = xhat.array().rowwise() * (1.0 + scale.array()).transpose();
  out.rowwise() += shift.transpose();
  return out;
}

Mat linear(const Mat& x, const Tensor& w, const Tensor& b) {
  Mat y = x * w.mat().transpose();
  y.rowwise() += b.vec().transpose();
  return y;
}

// Accumulates weight/bias gradients and returns d/dx.
Mat linear_backward(const Mat& x, const Mat& g_y, const Tensor& w, Tensor& gw, Tensor& gb) {
  gw.mat().noalias() += g_y.transpose() * x;
  gb.vec() += g_y.colwise().sum().transpose();
  return g_y * w.mat();
}

void softmax_rows(Mat& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    double m = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - m).exp();
    s.row(r) /= s.row(r).sum();
  }
}

// Multi-head attention core on already-projected q (Mq x D), k, v (Mk x D).
Mat attention_core(const Mat& q, const Mat& k, const Mat& v, int heads, std::vector<Mat>& probs) {
  const int D = static_cast<int>(q.cols());
  const int dh = D / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat out(q.rows(), D);
  probs.resize(heads);
  for (int h = 0; h < heads; ++h) {
    Mat s = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
    softmax_rows(s);
    out.middleCols(h * dh, dh) = s * v.middleCols(h * dh, dh);
    probs[h] = std::move(s);
  }
  return out;
}

void attention_core_backward(const AttentionCache& a, const Mat& g_out, int heads, Mat& g_q, Mat& g_k, Mat& g_v) {
  const int D = static_cast<int>(a.q.cols());
  const int dh = D / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  g_q.setZero(a.q.rows(), D);
  g_k.setZero(a.k.rows(), D);
  g_v.setZero(a.v.rows(), D);
  for (int h = 0; h < heads; ++h) {
    const Mat& p = a.probs[h];
    auto go = g_out.middleCols(h * dh, dh);
    Mat g_p = go * a.v.middleCols(h * dh, dh).transpose();
    g_v.middleCols(h * dh, dh).noalias() += p.transpose() * go;
    Vec row_dot = (g_p.cwiseProduct(p)).rowwise().sum();
    Mat g_s = p.cwiseProduct((g_p.colwise() - row_dot)) * scale;
    g_q.middleCols(h * dh, dh).noalias() += g_s * a.k.middleCols(h * dh, dh);
    g_k.middleCols(h * dh, dh).noalias() += g_s.transpose() * a.q.middleCols(h * dh, dh);
  }
}

double gelu(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
  constexpr double c = 0.7978845608028654;
  double u = c * (x + 0.044715 * x * x * x);
  double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

void init_trunc_normal(Tensor& t, double std, Rng& rng) {
  for (double& v : t.data) {
    double x;
    do {
      x = rng.normal();
    } while (std::abs(x) > 2.0);
    v = x * std;
  }
}

}  // namespace

void check_finite(const Mat& m, const std::string& where) {
  if (!m.allFinite()) throw NumericError("non-finite activation in " + where);
}

BlockWeights add_block(ParamStore& p, const std::string& pre, const DitConfig& c) {
  const int D = c.hidden, F = c.mlp_ratio * c.hidden;
  BlockWeights w{};
  w.ada_w = p.add(pre + ".ada.w", {6 * D, D});
  w.ada_b = p.add(pre + ".ada.b", {6 * D});
  w.qkv_w = p.add(pre + ".attn.qkv.w", {3 * D, D});
  w.qkv_b = p.add(pre + ".attn.qkv.b", {3 * D});
  w.attn_out_w = p.add(pre + ".attn.out.w", {D, D});
  w.attn_out_b = p.add(pre + ".attn.out.b", {D});
  w.q_w = p.add(pre + ".cross.q.w", {D, D});
  w.q_b = p.add(pre + ".cross.q.b", {D});
  w.kv_w = p.add(pre + ".cross.kv.w", {2 * D, D});
  w.kv_b = p.add(pre + ".cross.kv.b", {2 * D});
  w.cross_out_w = p.add(pre + ".cross.out.w", {D, D});
  w.cross_out_b = p.add(pre + ".cross.out.b", {D});
  w.fc1_w = p.add(pre + ".ffn.fc1.w", {F, D});
  w.fc1_b = p.add(pre + ".ffn.fc1.b", {F});
  w.fc2_w = p.add(pre + ".ffn.fc2.w", {D, F});
  w.fc2_b = p.add(pre + ".ffn.fc2.b", {D});
  w.gate_attn = p.add(pre + ".gate.attn", {D});
  w.gate_cross = p.add(pre + ".gate.cross", {D});
  w.gate_ffn = p.add(pre + ".gate.ffn", {D});
  return w;
}

BlockWeights find_block(const ParamStore& p, const std::string& pre) {
  BlockWeights w{};
  w.ada_w = p.index(pre + ".ada.w");
  w.ada_b = p.index(pre + ".ada.b");
  w.qkv_w = p.index(pre + ".attn.qkv.w");
  w.qkv_b = p.index(pre + ".attn.qkv.b");
  w.attn_out_w = p.index(pre + ".attn.out.w");
  w.attn_out_b = p.index(pre + ".attn.out.b");
  w.q_w = p.index(pre + ".cross.q.w");
  w.q_b = p.index(pre + ".cross.q.b");
  w.kv_w = p.index(pre + ".cross.kv.w");
  w.kv_b = p.index(pre + ".cross.kv.b");
  w.cross_out_w = p.index(pre + ".cross.out.w");
  w.cross_out_b = p.index(pre + ".cross.out.b");
  w.fc1_w = p.index(pre + ".ffn.fc1.w");
  w.fc1_b = p.index(pre + ".ffn.fc1.b");
  w.fc2_w = p.index(pre + ".ffn.fc2.w");
  w.fc2_b = p.index(pre + ".ffn.fc2.b");
  w.gate_attn = p.index(pre + ".gate.attn");
  w.gate_cross = p.index(pre + ".gate.cross");
  w.gate_ffn = p.index(pre + ".gate.ffn");
  return w;
}

Mat block_forward(const ParamStore& p, const BlockWeights& w, const DitConfig& c, const Mat& x, const Vec& silu_tau,
                  const Mat* text, BlockCache& bc) {
  const int D = c.hidden;
  bc.x = x;
  bc.mod = p[w.ada_w].mat() * silu_tau + p[w.ada_b].vec();
  bc.has_text = text != nullptr;

  // self-attention
  ln_forward(x, bc.xhat1, bc.rstd1);
  bc.attn.input = modulate(bc.xhat1, bc.mod.segment(0, D), bc.mod.segment(D, D));
  Mat qkv = linear(bc.attn.input, p[w.qkv_w], p[w.qkv_b]);
  bc.attn.q = qkv.leftCols(D);
  bc.attn.k = qkv.middleCols(D, D);
  bc.attn.v = qkv.rightCols(D);
  bc.attn.heads_out = attention_core(bc.attn.q, bc.attn.k, bc.attn.v, c.heads, bc.attn.probs);
  bc.r1 = linear(bc.attn.heads_out, p[w.attn_out_w], p[w.attn_out_b]);
  bc.x1 = x + (bc.r1.array().rowwise() * p[w.gate_attn].vec().transpose().array()).matrix();

  // cross-attention over text tokens
  if (text) {
    ln_forward(bc.x1, bc.xhat2, bc.rstd2);
    bc.cross.input = modulate(bc.xhat2, bc.mod.segment(2 * D, D), bc.mod.segment(3 * D, D));
    bc.cross.q = linear(bc.cross.input, p[w.q_w], p[w.q_b]);
    Mat kv = linear(*text, p[w.kv_w], p[w.kv_b]);
    bc.cross.k = kv.leftCols(D);
    bc.cross.v = kv.rightCols(D);
    bc.cross.heads_out = attention_core(bc.cross.q, bc.cross.k, bc.cross.v, c.heads, bc.cross.probs);
    bc.r2 = linear(bc.cross.heads_out, p[w.cross_out_w], p[w.cross_out_b]);
    bc.x2 = bc.x1 + (bc.r2.array().rowwise() * p[w.gate_cross].vec().transpose().array()).matrix();
  } else {
    bc.x2 = bc.x1;
  }

  // feed-forward
  ln_forward(bc.x2, bc.xhat3, bc.rstd3);
  bc.ffn_in = modulate(bc.xhat3, bc.mod.segment(4 * D, D), bc.mod.segment(5 * D, D));
  bc.ffn_pre = linear(bc.ffn_in, p[w.fc1_w], p[w.fc1_b]);
  bc.ffn_act = bc.ffn_pre.unaryExpr([](double v) { return gelu(v); });
  bc.r3 = linear(bc.ffn_act, p[w.fc2_w], p[w.fc2_b]);
  return bc.x2 + (bc.r3.array().rowwise() * p[w.gate_ffn].vec().transpose().array()).matrix();
}

Mat block_backward(const ParamStore& p, const BlockWeights& w, const DitConfig& c, const BlockCache& bc,
                   const Mat& g_out, const Vec& silu_tau, const Mat* text, ParamStore& grads, Vec& g_silu_tau,
                   Mat* g_text) {
  const int D = c.hidden;
  Vec g_mod = Vec::Zero(6 * D);

  // Gated residual branch: x_out = x_in + r .* gate. Returns d/d(modulated input).
  auto gated = [&](const Mat& g, const Mat& r, size_t gate) {
    grads[gate].vec() += g.cwiseProduct(r).colwise().sum().transpose();
    return Mat((g.array().rowwise() * p[gate].vec().transpose().array()).matrix());
  };
  // Backward of modulate + LN for one sub-layer; returns d/dx of the LN input.
  auto norm_back = [&](const Mat& g_mod_in, const Mat& xhat, const Vec& rstd, int slot) {
    auto scale = bc.mod.segment((2 * slot + 1) * D, D);
    g_mod.segment(2 * slot * D, D) += g_mod_in.colwise().sum().transpose();
    g_mod.segment((2 * slot + 1) * D, D) += g_mod_in.cwiseProduct(xhat).colwise().sum().transpose();
    Mat g_xhat = g_mod_in.array().rowwise() * (1.0 + scale.array()).transpose();
    return ln_backward(g_xhat, xhat, rstd);
  };

  // feed-forward
  Mat g_x2 = g_out;
  {
    Mat g_r3 = gated(g_out, bc.r3, w.gate_ffn);
    Mat g_act = linear_backward(bc.ffn_act, g_r3, p[w.fc2_w], grads[w.fc2_w], grads[w.fc2_b]);
    Mat g_pre = g_act.cwiseProduct(bc.ffn_pre.unaryExpr([](double v) { return gelu_grad(v); }));
    Mat g_in = linear_backward(bc.ffn_in, g_pre, p[w.fc1_w], grads[w.fc1_w], grads[w.fc1_b]);
    g_x2 += norm_back(g_in, bc.xhat3, bc.rstd3, 2);
  }

  // cross-attention
  Mat g_x1 = g_x2;
  if (bc.has_text) {
    Mat g_r2 = gated(g_x2, bc.r2, w.gate_cross);
    Mat g_heads = linear_backward(bc.cross.heads_out, g_r2, p[w.cross_out_w], grads[w.cross_out_w], grads[w.cross_out_b]);
    Mat g_q, g_k, g_v;
    attention_core_backward(bc.cross, g_heads, c.heads, g_q, g_k, g_v);
    Mat g_kv(g_k.rows(), 2 * D);
    g_kv << g_k, g_v;
    Mat g_t = linear_backward(*text, g_kv, p[w.kv_w], grads[w.kv_w], grads[w.kv_b]);
    if (g_text) *g_text += g_t;
    Mat g_in = linear_backward(bc.cross.input, g_q, p[w.q_w], grads[w.q_w], grads[w.q_b]);
    g_x1 += norm_back(g_in, bc.xhat2, bc.rstd2, 1);
  }

  // self-attention
  Mat g_x = g_x1;
  {
    Mat g_r1 = gated(g_x1, bc.r1, w.gate_attn);
    Mat g_heads = linear_backward(bc.attn.heads_out, g_r1, p[w.attn_out_w], grads[w.attn_out_w], grads[w.attn_out_b]);
    Mat g_q, g_k, g_v;
    attention_core_backward(bc.attn, g_heads, c.heads, g_q, g_k, g_v);
    Mat g_qkv(g_q.rows(), 3 * D);
    g_qkv << g_q, g_k, g_v;
    Mat g_in = linear_backward(bc.attn.input, g_qkv, p[w.qkv_w], grads[w.qkv_w], grads[w.qkv_b]);
    g_x += norm_back(g_in, bc.xhat1, bc.rstd1, 0);
  }

  grads[w.ada_w].mat().noalias() += g_mod * silu_tau.transpose();
  grads[w.ada_b].vec() += g_mod;
  g_silu_tau.noalias() += p[w.ada_w].mat().transpose() * g_mod;
  return g_x;
}

}  // namespace detail

// ---------------------------------------------------------------------------

namespace {

// Backbone tensor layout, all zeros.
ParamStore backbone_layout(const DitConfig& c) {
  const int d = c.d_vl, S = c.spatial(), P = c.patch_dim(), D = c.hidden;
  ParamStore p;
  p.add("proj.w", {S, d});
  p.add("proj.b", {S});
  p.add("patch.w", {D, P});
  p.add("patch.b", {D});
  p.add("time.fc1.w", {D, D});
  p.add("time.fc1.b", {D});
  p.add("time.fc2.w", {D, D});
  p.add("time.fc2.b", {D});
  p.add("text.w", {D, c.text_dim});
  p.add("text.b", {D});
  for (int l = 1; l <= c.depth; ++l) detail::add_block(p, "enc." + std::to_string(l), c);
  for (int l = 1; l <= c.depth; ++l) detail::add_block(p, "dec." + std::to_string(l), c);
  p.add("final.ada.w", {2 * D, D});
  p.add("final.ada.b", {2 * D});
  p.add("unpatch.w", {P, D});
  p.add("unpatch.b", {P});
  p.add("out.w", {d, S});
  p.add("out.b", {d});
  return p;
}

}  // namespace

Denoiser::Denoiser(const DitConfig& config, uint64_t init_seed) : config_(config) {
  config_.validate();
  params_ = backbone_layout(config_);
  auto& p = params_;
  // Signal-path maps use fan-in scaling; everything inside the blocks uses std 0.02.
  // AdaLN regressors, gates and biases start at zero.
  for (size_t i = 0; i < p.count(); ++i) {
    const std::string& name = p.name(i);
    Tensor& t = p[i];
    if (t.shape.size() != 2) continue;
    if (name.find(".ada.") != std::string::npos) continue;
    Rng rng(init_seed, {0x1417, i});
    bool signal = name == "proj.w" || name == "patch.w" || name == "unpatch.w" || name == "out.w";
    double std = signal ? 1.0 / std::sqrt(static_cast<double>(t.shape[1])) : 0.02;
    detail::init_trunc_normal(t, std, rng);
  }
  build_tables();
}

Denoiser::Denoiser(const DitConfig& config, ParamStore params) : config_(config), params_(std::move(params)) {
  config_.validate();
  ParamStore layout = backbone_layout(config_);
  if (params_.count() < layout.count()) throw ConfigError("parameter set is missing backbone tensors");
  for (size_t i = 0; i < layout.count(); ++i) {
    if (params_.name(i) != layout.name(i) || params_[i].shape != layout[i].shape)
      throw ConfigError("parameter set does not match the model configuration at '" + layout.name(i) + "'");
  }
  if (has_adapter()) {
    // Compare against the layout attach_adapter would produce.
    Denoiser probe(config_, std::move(layout), 0);
    attach_adapter(probe, 0);
    if (!probe.params().same_layout(params_)) throw ConfigError("adapter tensors do not match the model configuration");
  } else if (params_.count() != layout.count()) {
    throw ConfigError("parameter set has unexpected extra tensors");
  }
  build_tables();
}

Denoiser::Denoiser(const DitConfig& config, ParamStore params, int) : config_(config), params_(std::move(params)) {
  build_tables();
}

void Denoiser::build_tables() {
  const int D = config_.hidden, gh = config_.height / config_.patch, gw = config_.width / config_.patch;
  const int p = config_.patch;
  pos_.resize(config_.tokens(), D);
  // Half the channels encode the token row, half the column.
  const int quarter = D / 4;
  for (int ty = 0; ty < gh; ++ty) {
    for (int tx = 0; tx < gw; ++tx) {
      int t = ty * gw + tx;
      for (int i = 0; i < quarter; ++i) {
        double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / quarter);
        pos_(t, i) = std::sin(ty * omega);
        pos_(t, quarter + i) = std::cos(ty * omega);
        pos_(t, 2 * quarter + i) = std::sin(tx * omega);
        pos_(t, 3 * quarter + i) = std::cos(tx * omega);
      }
    }
  }
  perm_.resize(static_cast<size_t>(config_.tokens()) * config_.patch_dim());
  for (int ty = 0; ty < gh; ++ty)
    for (int tx = 0; tx < gw; ++tx)
      for (int ch = 0; ch < config_.channels; ++ch)
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx) {
            int t = ty * gw + tx;
            int k = (ch * p + dy) * p + dx;
            perm_[static_cast<size_t>(t) * config_.patch_dim() + k] =
                ch * config_.height * config_.width + (ty * p + dy) * config_.width + (tx * p + dx);
          }
}

Vec Denoiser::time_features(int n, int dim) {
  Vec f(dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * i / half);
    f[i] = std::cos(n * freq);
    f[half + i] = std::sin(n * freq);
  }
  if (dim % 2) f[dim - 1] = 0.0;
  return f;
}

Vec Denoiser::time_embed(int n) const {
  Vec f = time_features(n, config_.hidden);
  Vec h = detail::silu(params_.at("time.fc1.w").mat() * f + params_.at("time.fc1.b").vec());
  return params_.at("time.fc2.w").mat() * h + params_.at("time.fc2.b").vec();
}

Vec Denoiser::denoise(const Vec& z, int n, const Conditioning& cond, DenoiseCache* cache) const {
  using namespace detail;
  const auto& c = config_;
  const auto& p = params_;
  if (z.size() != c.d_vl) throw ConfigError("denoise: input length " + std::to_string(z.size()) + " != d_vl");
  if (cond.text && cond.text->token_embs.cols() != c.text_dim)
    throw ConfigError("denoise: text condition width does not match the model");
  if (cond.text && cond.text->token_embs.rows() < 1) throw ConfigError("denoise: text condition has no tokens");
  if (cond.query && cond.query->size() != c.d_vl) throw ConfigError("denoise: query length != d_vl");
  if (cond.query && !has_adapter()) throw ConfigError("denoise: control query given but no adapter is attached");

  auto st = std::make_shared<ForwardState>();
  st->owner = this;
  st->generation = generation_;
  st->n = n;
  st->delta = cond.delta;
  st->z = z;

  st->tfeat = time_features(n, c.hidden);
  st->t_pre = p.at("time.fc1.w").mat() * st->tfeat + p.at("time.fc1.b").vec();
  st->t_hidden = silu(st->t_pre);
  st->tau = p.at("time.fc2.w").mat() * st->t_hidden + p.at("time.fc2.b").vec();
  st->silu_tau = silu(st->tau);

  st->has_text = cond.text != nullptr;
  if (st->has_text) {
    st->text_in = cond.text->token_embs;
    st->text = st->text_in * p.at("text.w").mat().transpose();
    st->text.rowwise() += p.at("text.b").vec().transpose();
  }
  const Mat* text = st->has_text ? &st->text : nullptr;

  st->spatial = p.at("proj.w").mat() * z + p.at("proj.b").vec();
  const int M = c.tokens(), P = c.patch_dim();
  st->patches.resize(M, P);
  for (int t = 0; t < M; ++t)
    for (int k = 0; k < P; ++k) st->patches(t, k) = st->spatial[perm_[static_cast<size_t>(t) * P + k]];
  Mat x = st->patches * p.at("patch.w").mat().transpose();
  x.rowwise() += p.at("patch.b").vec().transpose();
  x += pos_;

  const int L = c.depth;
  st->enc_out.assign(L + 1, Mat());
  st->enc.resize(L);
  st->dec.resize(L);
  st->enc_out[0] = x;
  for (int l = 1; l <= L; ++l) {
    auto w = find_block(p, "enc." + std::to_string(l));
    st->enc_out[l] = block_forward(p, w, c, st->enc_out[l - 1], st->silu_tau, text, st->enc[l - 1]);
    check_finite(st->enc_out[l], "encoder block " + std::to_string(l));
  }

  st->skips.assign(L + 1, Mat());
  st->control = has_adapter();
  if (st->control) {
    st->query = cond.query ? *cond.query : Vec::Zero(c.d_vl);
    control_forward(p, c, *st);
  } else {
    for (int l = 1; l <= L; ++l) st->skips[l] = st->enc_out[l];
  }

  st->dec_in.assign(L + 1, Mat());
  Mat d = st->enc_out[L];
  for (int j = 1; j <= L; ++j) {
    st->dec_in[j] = d + cond.delta * st->skips[L - j + 1];
    auto w = find_block(p, "dec." + std::to_string(j));
    d = block_forward(p, w, c, st->dec_in[j], st->silu_tau, text, st->dec[j - 1]);
    check_finite(d, "decoder block " + std::to_string(j));
  }
  st->dec_out = d;

  const int D = c.hidden;
  st->final_mod = p.at("final.ada.w").mat() * st->silu_tau + p.at("final.ada.b").vec();
  ln_forward(d, st->final_xhat, st->final_rstd);
  st->final_tokens_in = modulate(st->final_xhat, st->final_mod.segment(0, D), st->final_mod.segment(D, D));
  Mat tok = st->final_tokens_in * p.at("unpatch.w").mat().transpose();
  tok.rowwise() += p.at("unpatch.b").vec().transpose();
  st->unpatched.resize(c.spatial());
  for (int t = 0; t < M; ++t)
    for (int k = 0; k < P; ++k) st->unpatched[perm_[static_cast<size_t>(t) * P + k]] = tok(t, k);
  Vec eps = p.at("out.w").mat() * st->unpatched + p.at("out.b").vec();
  if (!eps.allFinite()) throw NumericError("non-finite activation in output head");

  if (cache) cache->state = std::move(st);
  return eps;
}

void Denoiser::backward(const DenoiseCache& cache, const Vec& g_eps, ParamStore& grads) const {
  using namespace detail;
  const ForwardState* st = cache.state.get();
  if (!st) throw UsageError("backward: empty forward cache");
  if (st->owner != this || st->generation != generation_)
    throw UsageError("backward: forward cache is stale (parameters changed since denoise)");
  if (!grads.same_layout(params_)) throw ConfigError("backward: gradient store layout does not match parameters");
  if (g_eps.size() != config_.d_vl) throw ConfigError("backward: upstream gradient has wrong length");

  const auto& c = config_;
  const auto& p = params_;
  const int M = c.tokens(), P = c.patch_dim(), D = c.hidden, L = c.depth;
  auto G = [&](const char* name) -> Tensor& { return grads[p.index(name)]; };

  Vec g_silu_tau = Vec::Zero(D);
  Mat g_text;
  if (st->has_text) g_text.setZero(st->text.rows(), D);
  Mat* g_text_ptr = st->has_text ? &g_text : nullptr;
  const Mat* text = st->has_text ? &st->text : nullptr;

  // output head and unpatch
  G("out.w").mat().noalias() += g_eps * st->unpatched.transpose();
  G("out.b").vec() += g_eps;
  Vec g_unpatched = p.at("out.w").mat().transpose() * g_eps;
  Mat g_tok(M, P);
  for (int t = 0; t < M; ++t)
    for (int k = 0; k < P; ++k) g_tok(t, k) = g_unpatched[perm_[static_cast<size_t>(t) * P + k]];
  G("unpatch.w").mat().noalias() += g_tok.transpose() * st->final_tokens_in;
  G("unpatch.b").vec() += g_tok.colwise().sum().transpose();
  Mat g_fin = g_tok * p.at("unpatch.w").mat();

  // final AdaLN
  Vec g_fmod(2 * D);
  g_fmod.segment(0, D) = g_fin.colwise().sum().transpose();
  g_fmod.segment(D, D) = g_fin.cwiseProduct(st->final_xhat).colwise().sum().transpose();
  G("final.ada.w").mat().noalias() += g_fmod * st->silu_tau.transpose();
  G("final.ada.b").vec() += g_fmod;
  g_silu_tau.noalias() += p.at("final.ada.w").mat().transpose() * g_fmod;
  Mat g_xhat = g_fin.array().rowwise() * (1.0 + st->final_mod.segment(D, D).array()).transpose();
  Mat g_d = [&] {
    Mat g(g_xhat.rows(), g_xhat.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      double mg = g_xhat.row(r).mean();
      double mgx = g_xhat.row(r).cwiseProduct(st->final_xhat.row(r)).mean();
      g.row(r) = st->final_rstd[r] * (g_xhat.row(r).array() - mg - st->final_xhat.row(r).array() * mgx);
    }
    return g;
  }();

  // decoder
  std::vector<Mat> g_skips(L + 1);
  for (int l = 1; l <= L; ++l) g_skips[l].setZero(M, D);
  for (int j = L; j >= 1; --j) {
    auto w = find_block(p, "dec." + std::to_string(j));
    Mat g_u = block_backward(p, w, c, st->dec[j - 1], g_d, st->silu_tau, text, grads, g_silu_tau, g_text_ptr);
    g_skips[L - j + 1] += st->delta * g_u;
    g_d = std::move(g_u);
  }

  std::vector<Mat> g_enc(L + 1);
  for (int l = 0; l <= L; ++l) g_enc[l].setZero(M, D);
  g_enc[L] += g_d;
  if (st->control) {
    control_backward(p, c, *st, g_skips, g_enc, grads, g_silu_tau, g_text_ptr);
  } else {
    for (int l = 1; l <= L; ++l) g_enc[l] += g_skips[l];
  }

  // encoder
  for (int l = L; l >= 1; --l) {
    auto w = find_block(p, "enc." + std::to_string(l));
    g_enc[l - 1] += block_backward(p, w, c, st->enc[l - 1], g_enc[l], st->silu_tau, text, grads, g_silu_tau, g_text_ptr);
  }

  // patch embed and projector
  const Mat& g_x0 = g_enc[0];
  G("patch.w").mat().noalias() += g_x0.transpose() * st->patches;
  G("patch.b").vec() += g_x0.colwise().sum().transpose();
  Mat g_patches = g_x0 * p.at("patch.w").mat();
  Vec g_spatial(c.spatial());
  for (int t = 0; t < M; ++t)
    for (int k = 0; k < P; ++k) g_spatial[perm_[static_cast<size_t>(t) * P + k]] = g_patches(t, k);
  G("proj.w").mat().noalias() += g_spatial * st->z.transpose();
  G("proj.b").vec() += g_spatial;

  // text projection
  if (st->has_text) {
    G("text.w").mat().noalias() += g_text.transpose() * st->text_in;
    G("text.b").vec() += g_text.colwise().sum().transpose();
  }

  // time MLP
  Vec g_tau = g_silu_tau.cwiseProduct(silu_grad(st->tau));
  G("time.fc2.w").mat().noalias() += g_tau * st->t_hidden.transpose();
  G("time.fc2.b").vec() += g_tau;
  Vec g_hidden = p.at("time.fc2.w").mat().transpose() * g_tau;
  Vec g_pre = g_hidden.cwiseProduct(silu_grad(st->t_pre));
  G("time.fc1.w").mat().noalias() += g_pre * st->tfeat.transpose();
  G("time.fc1.b").vec() += g_pre;
}

}  // namespace fusiondiff
