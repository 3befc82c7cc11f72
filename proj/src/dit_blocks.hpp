#pragma once

// Internal building blocks shared by the backbone and the control branch.

#include <string>
#include <vector>

#include "fusiondiff/dit.hpp"

namespace fusiondiff::detail {

struct BlockWeights {
  size_t ada_w, ada_b;
  size_t qkv_w, qkv_b, attn_out_w, attn_out_b;
  size_t q_w, q_b, kv_w, kv_b, cross_out_w, cross_out_b;
  size_t fc1_w, fc1_b, fc2_w, fc2_b;
  size_t gate_attn, gate_cross, gate_ffn;
};

BlockWeights add_block(ParamStore& p, const std::string& prefix, const DitConfig& c);
BlockWeights find_block(const ParamStore& p, const std::string& prefix);

struct AttentionCache {
  Mat input;            // queries' source (post-AdaLN tokens)
  Mat q, k, v;          // projected, all heads side by side
  std::vector<Mat> probs;  // per head, rows sum to 1
  Mat heads_out;        // concatenated head outputs before the output projection
};

struct BlockCache {
  Mat x;                 // block input
  Vec mod;               // 6D: shift/scale for attn, cross, ffn
  Mat xhat1, xhat2, xhat3;
  Vec rstd1, rstd2, rstd3;
  AttentionCache attn, cross;
  Mat x1, x2;
  Mat r1, r2, r3;        // branch outputs before gating
  Mat ffn_in, ffn_pre, ffn_act;
  bool has_text = false;
};

// Forward through one transformer block. `text` is the projected token matrix (K x D) or null.
Mat block_forward(const ParamStore& p, const BlockWeights& w, const DitConfig& c, const Mat& x, const Vec& silu_tau,
                  const Mat* text, BlockCache& cache);

// Backward through one block; returns d/dx. Accumulates parameter gradients,
// d/d silu(tau) and (when text was present) d/d text.
Mat block_backward(const ParamStore& p, const BlockWeights& w, const DitConfig& c, const BlockCache& cache,
                   const Mat& g_out, const Vec& silu_tau, const Mat* text, ParamStore& grads, Vec& g_silu_tau,
                   Mat* g_text);

struct ControlWeights {
  size_t z1_w, z1_b;
  std::vector<BlockWeights> blocks;
  std::vector<size_t> z2_w, z2_b;
};

ControlWeights find_control(const ParamStore& p, int depth);

struct ForwardState {
  const Denoiser* owner = nullptr;
  uint64_t generation = 0;
  int n = 0;
  double delta = 1.0;
  Vec z;
  Vec tfeat, t_pre, t_hidden, tau, silu_tau;
  bool has_text = false;
  Mat text_in, text;  // raw condition tokens, projected tokens
  Vec spatial;        // projector output
  Mat patches;        // M x patch_dim
  std::vector<Mat> enc_out;  // h_0 .. h_L
  std::vector<BlockCache> enc, dec;
  // control branch
  bool control = false;
  Vec query;
  Vec z1_out;
  std::vector<Mat> ctrl_in;   // inputs of control blocks 1..L
  std::vector<Mat> ctrl_out;  // outputs of control blocks (before Z2)
  std::vector<BlockCache> ctrl;
  std::vector<Mat> skips;     // y_1 .. y_L (index 0 unused)
  std::vector<Mat> dec_in;    // u_1 .. u_L (index 0 unused)
  Mat dec_out;                // d_L
  Vec final_mod;
  Mat final_xhat;
  Vec final_rstd;
  Mat final_tokens_in;        // modulated tokens entering unpatch
  Vec unpatched;              // spatial vector entering the output head
};

// Control branch forward: fills st.skips from st.enc_out using the adapter.
void control_forward(const ParamStore& p, const DitConfig& c, ForwardState& st);
// Control branch backward: consumes d/d skips, accumulates into g_enc (d/d h_l)
// and adapter gradients. Text / time gradients are accumulated too.
void control_backward(const ParamStore& p, const DitConfig& c, const ForwardState& st, std::vector<Mat>& g_skips,
                      std::vector<Mat>& g_enc, ParamStore& grads, Vec& g_silu_tau, Mat* g_text);

inline Vec silu(const Vec& x) { return (x.array() / (1.0 + (-x.array()).exp())).matrix(); }
inline Vec silu_grad(const Vec& x) {
  Eigen::ArrayXd s = 1.0 / (1.0 + (-x.array()).exp());
  return (s * (1.0 + x.array() * (1.0 - s))).matrix();
}

void check_finite(const Mat& m, const std::string& where);

}  // namespace fusiondiff::detail
