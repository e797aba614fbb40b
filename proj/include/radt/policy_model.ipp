#pragma once

// Template member definitions for PolicyModel; included by policy.hpp.

namespace radt::policy {

namespace detail {

// dropout mask tags (per layer offsets added)
inline constexpr u64 kTagInput = 1;
inline constexpr u64 kTagCtx = 2;

inline u64 block_tag(int layer, int which) {
  return 100 + static_cast<u64>(layer) * 10 + static_cast<u64>(which);
}
inline constexpr int kTagSaProbs = 0;
inline constexpr int kTagSaResid = 1;
inline constexpr int kTagCaProbs = 2;
inline constexpr int kTagCaResid = 3;
inline constexpr int kTagMlpResid = 4;

template <typename T>
void copy_mat(radt::Matrix<T>& dst, const radt::Matrix<T>& src) {
  dst.reshape(src.rows, src.cols);
  std::copy(src.data.begin(), src.data.end(), dst.data.begin());
}

template <typename T>
void add_inplace(radt::Matrix<T>& dst, const radt::Matrix<T>& src) {
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace detail

template <typename T>
PolicyModel<T>::PolicyModel(const PolicyConfig& cfg, u64 init_seed) : cfg_(cfg) {
  cfg_.finalize();
  Rng rng(derive_seed(init_seed, "model_init"));
  const int d = cfg_.dim;
  if (cfg_.include_rtg) emb_rtg_.init(params_, "emb.rtg", 1, d, rng);
  emb_state_.init(params_, "emb.state", 2, d, rng);
  emb_reward_.init(params_, "emb.reward", 1, d, rng);
  emb_action_.init(params_, "emb.action", cfg_.n_actions, d, rng);
  emb_pos_.init(params_, "emb.pos", cfg_.max_timesteps, d, rng);
  if (cfg_.cross_attention) {
    cemb_rtg_.init(params_, "cemb.rtg", 1, d, rng);
    cemb_state_.init(params_, "cemb.state", 2, d, rng);
    cemb_reward_.init(params_, "cemb.reward", 1, d, rng);
    cemb_action_.init(params_, "cemb.action", cfg_.n_actions, d, rng);
    cemb_pos_.init(params_, "cemb.pos", cfg_.max_ctx_steps, d, rng);
  }
  blocks_.resize(cfg_.layers);
  for (int l = 0; l < cfg_.layers; ++l) {
    auto& b = blocks_[l];
    std::string p = "blocks." + std::to_string(l) + ".";
    b.ln1.init(params_, p + "ln1", d);
    b.wqkv.init(params_, p + "attn.wqkv", d, 3 * d, rng);
    b.wo.init(params_, p + "attn.wo", d, d, rng);
    b.has_ca = cfg_.cross_attention && (l % cfg_.ca_every == 0);
    if (b.has_ca) {
      b.lnc.init(params_, p + "lnc", d);
      b.wq.init(params_, p + "ca.wq", d, d, rng);
      b.wkv.init(params_, p + "ca.wkv", d, 2 * d, rng);
      b.wco.init(params_, p + "ca.wo", d, d, rng);
    }
    b.ln2.init(params_, p + "ln2", d);
    b.fc1.init(params_, p + "mlp.fc1", d, 4 * d, rng);
    b.fc2.init(params_, p + "mlp.fc2", 4 * d, d, rng);
  }
  lnf_.init(params_, "lnf", d);
  head_.init(params_, "head", d, cfg_.n_actions, rng);
}

template <typename T>
void PolicyModel<T>::build_plan(const std::vector<const TokenSeq*>& batch,
                                const std::vector<const TokenSeq*>& ctx,
                                const KeepMasks* keeps, Workspace<T>& ws) const {
  const int B = static_cast<int>(batch.size());
  const int m = cfg_.tokens_per_step();
  int S = 1;
  for (const auto* s : batch) S = std::max(S, s->token_count(cfg_.include_rtg));
  ws.B = B;
  ws.S = S;
  const int total = B * S;
  ws.valid.assign(total, 0);
  ws.timestep.assign(total, -1);
  ws.tok_kind.assign(total, -1);
  ws.tok_val_a.assign(total, 0.0f);
  ws.tok_val_b.assign(total, 0.0f);
  ws.tok_action.assign(total, 0);
  ws.target_rows.clear();
  ws.target_actions.clear();

  for (int e = 0; e < B; ++e) {
    const TokenSeq& q = *batch[e];
    q.validate();
    if (q.steps > cfg_.max_timesteps)
      throw std::runtime_error("policy: sequence longer than max_timesteps");
    const int base = e * S;
    for (int t = 0; t < q.steps; ++t) {
      const bool partial = q.partial_last && t == q.steps - 1;
      int row = base + m * t;
      int slot = 0;
      auto put = [&](int kind, float a, float b, int act) {
        ws.valid[row + slot] = 1;
        ws.timestep[row + slot] = t;
        ws.tok_kind[row + slot] = kind;
        ws.tok_val_a[row + slot] = a;
        ws.tok_val_b[row + slot] = b;
        ws.tok_action[row + slot] = act;
        ++slot;
      };
      if (cfg_.include_rtg) put(0, q.rtg[t], 0, 0);
      put(1, q.state[t][0], q.state[t][1], 0);
      if (!partial) {
        put(2, 0, 0, q.action[t]);
        put(3, q.reward[t], 0, 0);
        if (q.target[t]) {
          ws.target_rows.push_back(base + m * t + state_token_row(0, cfg_.include_rtg));
          ws.target_actions.push_back(q.action[t]);
        }
      }
    }
    // query dropout: drop whole tokens from the attention graph
    if (keeps && e < static_cast<int>(keeps->size()) && (*keeps)[e]) {
      const auto& keep = *(*keeps)[e];
      const int n_tok = q.token_count(cfg_.include_rtg);
      if (static_cast<int>(keep.size()) != n_tok)
        throw std::runtime_error("policy: keep mask length mismatch");
      for (int i = 0; i < n_tok; ++i)
        if (!keep[i]) ws.valid[base + i] = 0;
    }
  }

  // context plan
  ws.ctx_off.assign(B + 1, 0);
  ws.ctx_has.assign(B, 0);
  ws.ctx_timestep.clear();
  ws.ctx_kind.clear();
  ws.ctx_val_a.clear();
  ws.ctx_val_b.clear();
  ws.ctx_action.clear();
  if (!ctx.empty()) {
    if (static_cast<int>(ctx.size()) != B)
      throw std::runtime_error("policy: ctx batch size mismatch");
    for (int e = 0; e < B; ++e) {
      ws.ctx_off[e] = static_cast<int>(ws.ctx_kind.size());
      const TokenSeq* c = ctx[e];
      if (!c || c->steps == 0) continue;
      if (!cfg_.cross_attention)
        throw std::runtime_error("policy: retrieved context requires cross_attention");
      c->validate();
      if (c->partial_last) throw std::runtime_error("policy: ctx must have full steps");
      if (c->steps > cfg_.max_ctx_steps)
        throw std::runtime_error("policy: ctx longer than max_ctx_steps");
      ws.ctx_has[e] = 1;
      for (int t = 0; t < c->steps; ++t) {
        auto put = [&](int kind, float a, float b, int act) {
          ws.ctx_timestep.push_back(t);
          ws.ctx_kind.push_back(kind);
          ws.ctx_val_a.push_back(a);
          ws.ctx_val_b.push_back(b);
          ws.ctx_action.push_back(act);
        };
        put(0, c->rtg[t], 0, 0);
        put(1, c->state[t][0], c->state[t][1], 0);
        put(2, 0, 0, c->action[t]);
        put(3, c->reward[t], 0, 0);
      }
    }
    ws.ctx_off[B] = static_cast<int>(ws.ctx_kind.size());
  }
}

template <typename T>
void PolicyModel<T>::embed_tokens(Workspace<T>& ws, bool training, u64 step) const {
  const int d = cfg_.dim;
  ws.x.reshape(ws.B * ws.S, d);
  const T inv_state = static_cast<T>(1.0 / cfg_.state_scale);
  const T inv_rtg = static_cast<T>(1.0 / cfg_.rtg_scale);
#pragma omp parallel for schedule(static)
  for (int r = 0; r < ws.x.rows; ++r) {
    T* xr = ws.x.row(r);
    if (ws.tok_kind[r] < 0) {
      std::fill(xr, xr + d, T(0));
      continue;
    }
    switch (ws.tok_kind[r]) {
      case 0: {
        T v = static_cast<T>(ws.tok_val_a[r]) * inv_rtg;
        const T* w = emb_rtg_.w->value.ptr();
        const T* b = emb_rtg_.b->value.ptr();
#pragma omp simd
        for (int c = 0; c < d; ++c) xr[c] = w[c] * v + b[c];
        break;
      }
      case 1: {
        T vx = static_cast<T>(ws.tok_val_a[r]) * inv_state;
        T vy = static_cast<T>(ws.tok_val_b[r]) * inv_state;
        const T* w0 = emb_state_.w->value.row(0);
        const T* w1 = emb_state_.w->value.row(1);
        const T* b = emb_state_.b->value.ptr();
#pragma omp simd
        for (int c = 0; c < d; ++c) xr[c] = w0[c] * vx + w1[c] * vy + b[c];
        break;
      }
      case 2: {
        const T* row = emb_action_.row(ws.tok_action[r]);
        std::copy(row, row + d, xr);
        break;
      }
      case 3: {
        T v = static_cast<T>(ws.tok_val_a[r]);
        const T* w = emb_reward_.w->value.ptr();
        const T* b = emb_reward_.b->value.ptr();
#pragma omp simd
        for (int c = 0; c < d; ++c) xr[c] = w[c] * v + b[c];
        break;
      }
      default: break;
    }
    const T* pos = emb_pos_.row(ws.timestep[r]);
#pragma omp simd
    for (int c = 0; c < d; ++c) xr[c] += pos[c];
  }
  nn::DropoutCtx<T> drop{training && cfg_.dropout > 0, static_cast<T>(cfg_.dropout),
                         ws.drop_seed, step};
  nn::dropout_forward(ws.x, drop, detail::kTagInput);
}

template <typename T>
void PolicyModel<T>::embed_ctx(Workspace<T>& ws, bool training, u64 step) const {
  const int d = cfg_.dim;
  const int total = ws.ctx_off.empty() ? 0 : ws.ctx_off[ws.B];
  ws.ctx_x.reshape(std::max(total, 1), d);
  if (total == 0) return;
  const T inv_state = static_cast<T>(1.0 / cfg_.state_scale);
  const T inv_rtg = static_cast<T>(1.0 / cfg_.rtg_scale);
#pragma omp parallel for schedule(static)
  for (int r = 0; r < total; ++r) {
    T* xr = ws.ctx_x.row(r);
    switch (ws.ctx_kind[r]) {
      case 0: {
        T v = static_cast<T>(ws.ctx_val_a[r]) * inv_rtg;
        const T* w = cemb_rtg_.w->value.ptr();
        const T* b = cemb_rtg_.b->value.ptr();
#pragma omp simd
        for (int c = 0; c < d; ++c) xr[c] = w[c] * v + b[c];
        break;
      }
      case 1: {
        T vx = static_cast<T>(ws.ctx_val_a[r]) * inv_state;
        T vy = static_cast<T>(ws.ctx_val_b[r]) * inv_state;
        const T* w0 = cemb_state_.w->value.row(0);
        const T* w1 = cemb_state_.w->value.row(1);
        const T* b = cemb_state_.b->value.ptr();
#pragma omp simd
        for (int c = 0; c < d; ++c) xr[c] = w0[c] * vx + w1[c] * vy + b[c];
        break;
      }
      case 2: {
        const T* row = cemb_action_.row(ws.ctx_action[r]);
        std::copy(row, row + d, xr);
        break;
      }
      case 3: {
        T v = static_cast<T>(ws.ctx_val_a[r]);
        const T* w = cemb_reward_.w->value.ptr();
        const T* b = cemb_reward_.b->value.ptr();
#pragma omp simd
        for (int c = 0; c < d; ++c) xr[c] = w[c] * v + b[c];
        break;
      }
      default: break;
    }
    const T* pos = cemb_pos_.row(ws.ctx_timestep[r]);
#pragma omp simd
    for (int c = 0; c < d; ++c) xr[c] += pos[c];
  }
  nn::DropoutCtx<T> drop{training && cfg_.dropout > 0, static_cast<T>(cfg_.dropout),
                         ws.drop_seed, step};
  nn::dropout_forward(ws.ctx_x, drop, detail::kTagCtx);
}

template <typename T>
void PolicyModel<T>::run_blocks(Workspace<T>& ws, bool training, u64 step,
                                CaptureCA<T>* capture) const {
  const int B = ws.B, S = ws.S, d = cfg_.dim;
  const bool any_ctx =
      !ws.ctx_has.empty() &&
      std::any_of(ws.ctx_has.begin(), ws.ctx_has.end(), [](uint8_t v) { return v != 0; });
  nn::DropoutCtx<T> drop{training && cfg_.dropout > 0, static_cast<T>(cfg_.dropout),
                         ws.drop_seed, step};
  ws.blocks.resize(blocks_.size());
  if (capture) capture->layer_probs.clear();

  for (int l = 0; l < static_cast<int>(blocks_.size()); ++l) {
    const auto& bp = blocks_[l];
    auto& c = ws.blocks[l];
    detail::copy_mat(c.x_in, ws.x);
    bp.ln1.forward(c.x_in, c.ln1_out, c.ln1_mean, c.ln1_rstd);
    bp.wqkv.forward(c.ln1_out, c.qkv);
    nn::attention_self_forward(c.qkv, B, S, cfg_.heads, ws.valid, /*causal=*/true, drop,
                               detail::block_tag(l, detail::kTagSaProbs), c.sa_probs,
                               c.sa_out);
    bp.wo.forward(c.sa_out, c.sa_proj);
    nn::dropout_forward(c.sa_proj, drop, detail::block_tag(l, detail::kTagSaResid));
    detail::add_inplace(ws.x, c.sa_proj);

    if (bp.has_ca && any_ctx) {
      detail::copy_mat(c.res1, ws.x);
      bp.lnc.forward(c.res1, c.lnc_out, c.lnc_mean, c.lnc_rstd);
      bp.wq.forward(c.lnc_out, c.ca_q);
      bp.wkv.forward(ws.ctx_x, c.ca_kv);
      nn::attention_cross_forward(c.ca_q, c.ca_kv, B, S, cfg_.heads, ws.ctx_off, ws.valid,
                                  drop, detail::block_tag(l, detail::kTagCaProbs),
                                  c.ca_probs, c.ca_out);
      bp.wco.forward(c.ca_out, c.ca_proj);
      // empty-context elements must pass through exactly unchanged
      for (int e = 0; e < B; ++e) {
        if (ws.ctx_has[e]) continue;
        for (int r = e * S; r < (e + 1) * S; ++r)
          std::fill(c.ca_proj.row(r), c.ca_proj.row(r) + d, T(0));
      }
      nn::dropout_forward(c.ca_proj, drop, detail::block_tag(l, detail::kTagCaResid));
      detail::add_inplace(ws.x, c.ca_proj);

      if (capture && ws.ctx_has[0]) {
        const int len = ws.ctx_off[1] - ws.ctx_off[0];
        Matrix<T> avg(S, len);
        const T inv_h = T(1) / static_cast<T>(cfg_.heads);
        for (int h = 0; h < cfg_.heads; ++h) {
          const T* flat = c.ca_probs.flat.data() + c.ca_probs.off[h];
          for (int i = 0; i < S; ++i)
            for (int j = 0; j < len; ++j)
              avg.at(i, j) += flat[static_cast<std::size_t>(i) * len + j] * inv_h;
        }
        capture->layer_probs.push_back(std::move(avg));
      }
    } else if (capture && bp.has_ca) {
      capture->layer_probs.emplace_back(0, 0);
    }

    detail::copy_mat(c.res2, ws.x);
    bp.ln2.forward(c.res2, c.ln2_out, c.ln2_mean, c.ln2_rstd);
    bp.fc1.forward(c.ln2_out, c.fc1);
    c.act.reshape(c.fc1.rows, c.fc1.cols);
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < c.fc1.data.size(); ++i)
      c.act.data[i] = nn::gelu(c.fc1.data[i]);
    bp.fc2.forward(c.act, c.fc2);
    nn::dropout_forward(c.fc2, drop, detail::block_tag(l, detail::kTagMlpResid));
    detail::add_inplace(ws.x, c.fc2);
  }
  lnf_.forward(ws.x, ws.lnf_out, ws.lnf_mean, ws.lnf_rstd);
}

template <typename T>
void PolicyModel<T>::backward_blocks(Workspace<T>& ws, bool training, u64 step) const {
  const int B = ws.B, S = ws.S, d = cfg_.dim;
  const bool any_ctx =
      !ws.ctx_has.empty() &&
      std::any_of(ws.ctx_has.begin(), ws.ctx_has.end(), [](uint8_t v) { return v != 0; });
  nn::DropoutCtx<T> drop{training && cfg_.dropout > 0, static_cast<T>(cfg_.dropout),
                         ws.drop_seed, step};
  const int total_ctx = ws.ctx_off.empty() ? 0 : ws.ctx_off[B];
  ws.d_ctx.reshape(std::max(total_ctx, 1), d);
  ws.d_ctx.zero();

  for (int l = static_cast<int>(blocks_.size()) - 1; l >= 0; --l) {
    const auto& bp = blocks_[l];
    auto& c = ws.blocks[l];

    // MLP
    detail::copy_mat(ws.d_a, ws.dx);
    nn::dropout_backward(ws.d_a, drop, detail::block_tag(l, detail::kTagMlpResid));
    bp.fc2.backward(c.act, ws.d_a, &ws.d_big, ws.scratch);
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < ws.d_big.data.size(); ++i)
      ws.d_big.data[i] *= nn::gelu_grad(c.fc1.data[i]);
    bp.fc1.backward(c.ln2_out, ws.d_big, &ws.d_a, ws.scratch);
    bp.ln2.backward(c.res2, ws.d_a, c.ln2_mean, c.ln2_rstd, ws.d_b);
    detail::add_inplace(ws.dx, ws.d_b);

    // cross-attention
    if (bp.has_ca && any_ctx) {
      detail::copy_mat(ws.d_a, ws.dx);
      for (int e = 0; e < B; ++e) {
        if (ws.ctx_has[e]) continue;
        for (int r = e * S; r < (e + 1) * S; ++r)
          std::fill(ws.d_a.row(r), ws.d_a.row(r) + d, T(0));
      }
      nn::dropout_backward(ws.d_a, drop, detail::block_tag(l, detail::kTagCaResid));
      bp.wco.backward(c.ca_out, ws.d_a, &ws.d_b, ws.scratch);
      nn::attention_cross_backward(c.ca_q, c.ca_kv, c.ca_probs, ws.d_b, B, S, cfg_.heads,
                                   ws.ctx_off, ws.valid, drop,
                                   detail::block_tag(l, detail::kTagCaProbs), ws.d_a,
                                   ws.d_kv);
      bp.wq.backward(c.lnc_out, ws.d_a, &ws.d_b, ws.scratch);
      bp.wkv.backward(ws.ctx_x, ws.d_kv, &ws.d_ctx_tmp, ws.scratch);
      detail::add_inplace(ws.d_ctx, ws.d_ctx_tmp);
      bp.lnc.backward(c.res1, ws.d_b, c.lnc_mean, c.lnc_rstd, ws.d_a);
      detail::add_inplace(ws.dx, ws.d_a);
    }

    // self-attention
    detail::copy_mat(ws.d_a, ws.dx);
    nn::dropout_backward(ws.d_a, drop, detail::block_tag(l, detail::kTagSaResid));
    bp.wo.backward(c.sa_out, ws.d_a, &ws.d_b, ws.scratch);
    nn::attention_self_backward(c.qkv, c.sa_probs, ws.d_b, B, S, cfg_.heads, ws.valid,
                                /*causal=*/true, drop,
                                detail::block_tag(l, detail::kTagSaProbs), ws.d_big);
    bp.wqkv.backward(c.ln1_out, ws.d_big, &ws.d_a, ws.scratch);
    bp.ln1.backward(c.x_in, ws.d_a, c.ln1_mean, c.ln1_rstd, ws.d_b);
    detail::add_inplace(ws.dx, ws.d_b);
  }
}

template <typename T>
void PolicyModel<T>::embed_backward(Workspace<T>& ws) const {
  const int d = cfg_.dim;
  const T inv_state = static_cast<T>(1.0 / cfg_.state_scale);
  const T inv_rtg = static_cast<T>(1.0 / cfg_.rtg_scale);
  {
    Matrix<T>& dx = ws.dx;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < d; ++c) {
      T drtg_w = 0, drtg_b = 0, dst_w0 = 0, dst_w1 = 0, dst_b = 0, drw_w = 0, drw_b = 0;
      for (int r = 0; r < dx.rows; ++r) {
        if (ws.tok_kind[r] < 0) continue;
        T g = dx.at(r, c);
        emb_pos_.tab->grad.at(ws.timestep[r], c) += g;
        switch (ws.tok_kind[r]) {
          case 0:
            drtg_w += g * static_cast<T>(ws.tok_val_a[r]) * inv_rtg;
            drtg_b += g;
            break;
          case 1:
            dst_w0 += g * static_cast<T>(ws.tok_val_a[r]) * inv_state;
            dst_w1 += g * static_cast<T>(ws.tok_val_b[r]) * inv_state;
            dst_b += g;
            break;
          case 2:
            emb_action_.tab->grad.at(ws.tok_action[r], c) += g;
            break;
          case 3:
            drw_w += g * static_cast<T>(ws.tok_val_a[r]);
            drw_b += g;
            break;
          default: break;
        }
      }
      if (cfg_.include_rtg) {
        emb_rtg_.w->grad.at(0, c) += drtg_w;
        emb_rtg_.b->grad.at(0, c) += drtg_b;
      }
      emb_state_.w->grad.at(0, c) += dst_w0;
      emb_state_.w->grad.at(1, c) += dst_w1;
      emb_state_.b->grad.at(0, c) += dst_b;
      emb_reward_.w->grad.at(0, c) += drw_w;
      emb_reward_.b->grad.at(0, c) += drw_b;
    }
  }
  const int total_ctx = ws.ctx_off.empty() ? 0 : ws.ctx_off[ws.B];
  if (total_ctx > 0) {
    Matrix<T>& dxc = ws.d_ctx;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < d; ++c) {
      T drtg_w = 0, drtg_b = 0, dst_w0 = 0, dst_w1 = 0, dst_b = 0, drw_w = 0, drw_b = 0;
      for (int r = 0; r < total_ctx; ++r) {
        T g = dxc.at(r, c);
        cemb_pos_.tab->grad.at(ws.ctx_timestep[r], c) += g;
        switch (ws.ctx_kind[r]) {
          case 0:
            drtg_w += g * static_cast<T>(ws.ctx_val_a[r]) * inv_rtg;
            drtg_b += g;
            break;
          case 1:
            dst_w0 += g * static_cast<T>(ws.ctx_val_a[r]) * inv_state;
            dst_w1 += g * static_cast<T>(ws.ctx_val_b[r]) * inv_state;
            dst_b += g;
            break;
          case 2:
            cemb_action_.tab->grad.at(ws.ctx_action[r], c) += g;
            break;
          case 3:
            drw_w += g * static_cast<T>(ws.ctx_val_a[r]);
            drw_b += g;
            break;
          default: break;
        }
      }
      cemb_rtg_.w->grad.at(0, c) += drtg_w;
      cemb_rtg_.b->grad.at(0, c) += drtg_b;
      cemb_state_.w->grad.at(0, c) += dst_w0;
      cemb_state_.w->grad.at(1, c) += dst_w1;
      cemb_state_.b->grad.at(0, c) += dst_b;
      cemb_reward_.w->grad.at(0, c) += drw_w;
      cemb_reward_.b->grad.at(0, c) += drw_b;
    }
  }
}

template <typename T>
double PolicyModel<T>::forward_loss(const std::vector<const TokenSeq*>& batch,
                                    const std::vector<const TokenSeq*>& ctx, bool training,
                                    u64 dropout_step, bool backward, Workspace<T>& ws,
                                    Matrix<T>* logits_out) const {
  build_plan(batch, ctx, nullptr, ws);
  embed_tokens(ws, training, dropout_step);
  embed_ctx(ws, training, dropout_step);
  run_blocks(ws, training, dropout_step, nullptr);
  head_.forward(ws.lnf_out, ws.logits);
  if (logits_out) detail::copy_mat(*logits_out, ws.logits);

  const int n_targets = static_cast<int>(ws.target_rows.size());
  if (n_targets == 0) throw std::runtime_error("policy: batch has no action targets");
  double loss = 0.0;
  const int A = cfg_.n_actions;
  std::vector<T> prob(A);
  for (int i = 0; i < n_targets; ++i) {
    const T* lr = ws.logits.row(ws.target_rows[i]);
    nn::softmax_row(lr, prob.data(), A);
    loss -= std::log(std::max(static_cast<double>(prob[ws.target_actions[i]]), 1e-300));
  }
  loss /= n_targets;

  if (backward) {
    ws.d_logits.reshape(ws.logits.rows, A);
    ws.d_logits.zero();
    const T inv_n = T(1) / static_cast<T>(n_targets);
    for (int i = 0; i < n_targets; ++i) {
      const T* lr = ws.logits.row(ws.target_rows[i]);
      T* dlr = ws.d_logits.row(ws.target_rows[i]);
      nn::softmax_row(lr, prob.data(), A);
      for (int a = 0; a < A; ++a) dlr[a] += prob[a] * inv_n;
      dlr[ws.target_actions[i]] -= inv_n;
    }
    head_.backward(ws.lnf_out, ws.d_logits, &ws.d_a, ws.scratch);
    lnf_.backward(ws.x, ws.d_a, ws.lnf_mean, ws.lnf_rstd, ws.dx);
    backward_blocks(ws, training, dropout_step);
    embed_backward(ws);
  }
  return loss;
}

template <typename T>
void PolicyModel<T>::logits_last(const TokenSeq& seq, const TokenSeq* ctx,
                                 std::vector<T>& out, Workspace<T>& ws,
                                 CaptureCA<T>* capture) const {
  std::vector<const TokenSeq*> batch{&seq};
  std::vector<const TokenSeq*> cb{ctx};
  build_plan(batch, cb, nullptr, ws);
  embed_tokens(ws, false, 0);
  embed_ctx(ws, false, 0);
  run_blocks(ws, false, 0, capture);
  head_.forward(ws.lnf_out, ws.logits);
  const int row = cfg_.tokens_per_step() * (seq.steps - 1) + (cfg_.include_rtg ? 1 : 0);
  out.assign(ws.logits.row(row), ws.logits.row(row) + cfg_.n_actions);
}

template <typename T>
void PolicyModel<T>::hidden_states(const TokenSeq& seq, const std::vector<uint8_t>* keep,
                                   Matrix<T>& out, Workspace<T>& ws) const {
  std::vector<const TokenSeq*> batch{&seq};
  std::vector<const TokenSeq*> cb{nullptr};
  KeepMasks keeps{keep};
  build_plan(batch, cb, keep ? &keeps : nullptr, ws);
  embed_tokens(ws, false, 0);
  embed_ctx(ws, false, 0);
  run_blocks(ws, false, 0, nullptr);
  detail::copy_mat(out, ws.lnf_out);
}

template <typename T>
void PolicyModel<T>::embed_states_mean(const std::vector<const TokenSeq*>& batch,
                                       const KeepMasks* keeps, Matrix<T>& keys,
                                       Workspace<T>& ws) const {
  std::vector<const TokenSeq*> cb(batch.size(), nullptr);
  build_plan(batch, cb, keeps, ws);
  embed_tokens(ws, false, 0);
  embed_ctx(ws, false, 0);
  run_blocks(ws, false, 0, nullptr);
  const int d = cfg_.dim;
  keys.reshape(static_cast<int>(batch.size()), d);
  keys.zero();
#pragma omp parallel for schedule(static)
  for (int e = 0; e < ws.B; ++e) {
    T* key = keys.row(e);
    int n = 0;
    for (int r = e * ws.S; r < (e + 1) * ws.S; ++r) {
      if (ws.tok_kind[r] != 1 || !ws.valid[r]) continue;
      const T* h = ws.lnf_out.row(r);
      for (int c = 0; c < d; ++c) key[c] += h[c];
      ++n;
    }
    if (n == 0)
      throw std::runtime_error("embed: sequence has no state tokens after dropout");
    T inv = T(1) / static_cast<T>(n);
    for (int c = 0; c < d; ++c) key[c] *= inv;
  }
}

}  // namespace radt::policy
