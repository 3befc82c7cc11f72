#include "fusiondiff/control_adapter.hpp"

#include <string>

#include "dit_blocks.hpp"
#include "fusiondiff/errors.hpp"

namespace fusiondiff {

size_t adapter_param_count(const DitConfig& c) {
  const size_t D = c.hidden, d = c.d_vl, L = c.depth;
  return L * block_param_count(c) + (D * d + D) + L * (D * D + D);
}

void attach_adapter(Denoiser& model, uint64_t /*seed*/) {
  if (model.has_adapter()) throw ConfigError("attach_adapter: an adapter is already attached");
  const auto& c = model.config();
  const int D = c.hidden;
  ParamStore& p = model.mutable_params();
  p.add("ctrl.z1.w", {D, c.d_vl});
  p.add("ctrl.z1.b", {D});
  for (int l = 1; l <= c.depth; ++l) {
    const std::string src = "enc." + std::to_string(l) + ".";
    const std::string dst = "ctrl." + std::to_string(l) + ".";
    detail::add_block(p, "ctrl." + std::to_string(l), c);
    // Copy every tensor of the encoder block by suffix.
    for (size_t i = 0; i < p.count(); ++i) {
      const std::string& name = p.name(i);
      if (name.rfind(dst, 0) != 0) continue;
      p[i].data = p.at(src + name.substr(dst.size())).data;
    }
  }
  for (int l = 1; l <= c.depth; ++l) {
    p.add("ctrl.z2." + std::to_string(l) + ".w", {D, D});
    p.add("ctrl.z2." + std::to_string(l) + ".b", {D});
  }
}

void detach_adapter(Denoiser& model) {
  if (!model.has_adapter()) throw ConfigError("detach_adapter: no adapter attached");
  model.mutable_params().erase_prefix(kAdapterPrefix);
}

std::vector<bool> freeze_backbone_mask(const Denoiser& model) {
  if (!model.has_adapter()) throw ConfigError("freeze_backbone_mask: no adapter attached, nothing would train");
  const auto& p = model.params();
  std::vector<bool> mask(p.count());
  for (size_t i = 0; i < p.count(); ++i) mask[i] = p.name(i).rfind(kAdapterPrefix, 0) == 0;
  return mask;
}

std::vector<bool> full_mask(const Denoiser& model) { return std::vector<bool>(model.params().count(), true); }

namespace detail {

ControlWeights find_control(const ParamStore& p, int depth) {
  ControlWeights w;
  w.z1_w = p.index("ctrl.z1.w");
  w.z1_b = p.index("ctrl.z1.b");
  for (int l = 1; l <= depth; ++l) {
    w.blocks.push_back(find_block(p, "ctrl." + std::to_string(l)));
    w.z2_w.push_back(p.index("ctrl.z2." + std::to_string(l) + ".w"));
    w.z2_b.push_back(p.index("ctrl.z2." + std::to_string(l) + ".b"));
  }
  return w;
}

void control_forward(const ParamStore& p, const DitConfig& c, ForwardState& st) {
  const int L = c.depth;
  auto w = find_control(p, L);
  const Mat* text = st.has_text ? &st.text : nullptr;
  st.z1_out = p[w.z1_w].mat() * st.query + p[w.z1_b].vec();
  st.ctrl_in.assign(L + 1, Mat());
  st.ctrl_out.assign(L + 1, Mat());
  st.ctrl.resize(L);
  Mat h = st.enc_out[0];
  h.rowwise() += st.z1_out.transpose();
  for (int l = 1; l <= L; ++l) {
    st.ctrl_in[l] = std::move(h);
    st.ctrl_out[l] = block_forward(p, w.blocks[l - 1], c, st.ctrl_in[l], st.silu_tau, text, st.ctrl[l - 1]);
    check_finite(st.ctrl_out[l], "control block " + std::to_string(l));
    Mat z2 = st.ctrl_out[l] * p[w.z2_w[l - 1]].mat().transpose();
    z2.rowwise() += p[w.z2_b[l - 1]].vec().transpose();
    st.skips[l] = st.enc_out[l] + z2;
    h = st.skips[l];
  }
}

void control_backward(const ParamStore& p, const DitConfig& c, const ForwardState& st, std::vector<Mat>& g_skips,
                      std::vector<Mat>& g_enc, ParamStore& grads, Vec& g_silu_tau, Mat* g_text) {
  const int L = c.depth;
  auto w = find_control(p, L);
  const Mat* text = st.has_text ? &st.text : nullptr;
  Mat g_next = Mat::Zero(g_skips[1].rows(), g_skips[1].cols());  // d/d(input of control block l+1)
  for (int l = L; l >= 1; --l) {
    Mat g_y = g_skips[l] + g_next;
    g_enc[l] += g_y;
    grads[w.z2_w[l - 1]].mat().noalias() += g_y.transpose() * st.ctrl_out[l];
    grads[w.z2_b[l - 1]].vec() += g_y.colwise().sum().transpose();
    Mat g_c = g_y * p[w.z2_w[l - 1]].mat();
    g_next = block_backward(p, w.blocks[l - 1], c, st.ctrl[l - 1], g_c, st.silu_tau, text, grads, g_silu_tau, g_text);
  }
  // h_{c,0} = h_0 + Z1(query), broadcast over tokens.
  g_enc[0] += g_next;
  Vec g_z1 = g_next.colwise().sum().transpose();
  grads[w.z1_w].mat().noalias() += g_z1 * st.query.transpose();
  grads[w.z1_b].vec() += g_z1;
}

}  // namespace detail

ControlSignal control_signal(const Denoiser& model, const Vec& z, int n, const Conditioning& cond) {
  DenoiseCache cache;
  model.denoise(z, n, cond, &cache);
  ControlSignal s;
  s.delta = cond.delta;
  s.y.assign(cache.state->skips.begin() + 1, cache.state->skips.end());
  return s;
}

}  // namespace fusiondiff
