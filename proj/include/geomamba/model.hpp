#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "geomamba/nn.hpp"
#include "geomamba/ssm.hpp"

namespace geomamba::model {

enum class Modality { kOptical, kSar };

inline const char* modality_name(Modality m) { return m == Modality::kOptical ? "opt" : "sar"; }

enum class BlockKind { kConv, kSsmMixer };

/// Per-stage layout of the hierarchical backbone.
struct StageConfig {
  std::array<std::size_t, 4> channels{16, 32, 64, 128};
  std::array<std::size_t, 4> strides{4, 2, 2, 2};
  std::array<std::size_t, 4> blocks{1, 1, 1, 1};
  std::array<BlockKind, 4> kinds{BlockKind::kConv, BlockKind::kConv, BlockKind::kSsmMixer, BlockKind::kSsmMixer};
  std::array<bool, 4> gfi{false, true, true, false};

  std::size_t total_stride() const { return strides[0] * strides[1] * strides[2] * strides[3]; }

  void validate() const {
    if (total_stride() != 32) throw std::invalid_argument("StageConfig: strides must compound to 32");
    if (strides[0] < 2 || (strides[0] & (strides[0] - 1)) != 0)
      throw std::invalid_argument("StageConfig: stage-0 stride must be a power of two >= 2");
    if (gfi[0] || gfi[3]) throw std::invalid_argument("StageConfig: GFI is only allowed at intermediate stages");
    for (std::size_t i = 0; i < 4; ++i)
      if (channels[i] == 0 || strides[i] == 0) throw std::invalid_argument("StageConfig: zero channel/stride");
  }
};

struct ModelConfig {
  StageConfig stages{};
  std::size_t in_channels = 3;
  std::size_t image_size = 64;
  std::size_t num_classes = 8;
  std::size_t embed_dim = 1024;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t ssm_state = 8;
  double ln_eps = 1e-5;
  /// Stage blocks have separate weights per modality; false shares them.
  bool separate_streams = true;
};

// ---------------------------------------------------------------------------
// Building blocks

/// x + BN(conv(GELU(BN(conv(x)))))
struct ConvBlock {
  nn::Conv2d conv1, conv2;
  nn::BatchNorm bn1, bn2;

  Tensor operator()(const Tensor& x, bool training) {
    Tensor h = gelu(bn1(conv1(x), training));
    return add(x, bn2(conv2(h), training));
  }
};

inline ConvBlock make_conv_block(nn::ParamStore& ps, const std::string& name, std::size_t c, Rng& rng) {
  ConvBlock b;
  b.conv1 = nn::make_conv(ps, name + ".conv1", c, c, 3, 1, 1, rng);
  b.bn1 = nn::make_batch_norm(ps, name + ".bn1", c);
  b.conv2 = nn::make_conv(ps, name + ".conv2", c, c, 3, 1, 1, rng);
  b.bn2 = nn::make_batch_norm(ps, name + ".bn2", c);
  return b;
}

struct Mlp {
  nn::Linear fc1, fc2;
  Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }
};

inline Mlp make_mlp(nn::ParamStore& ps, const std::string& name, std::size_t dim, std::size_t hidden, Rng& rng,
                    bool zero_out = false) {
  Mlp m;
  m.fc1 = nn::make_linear(ps, name + ".fc1", dim, hidden, rng);
  m.fc2 = nn::make_linear(ps, name + ".fc2", hidden, dim, rng, zero_out ? nn::Init::kZero : nn::Init::kLecun);
  return m;
}

/// Selective SSM token mixer followed by an MLP, both pre-norm residual.
/// The scan runs in raster order and in reverse; the two outputs are averaged.
struct MixerBlock {
  nn::LayerNorm norm1, norm2;
  nn::Linear in_proj;    // C -> 2C (scan branch, gate branch)
  nn::Linear dt_proj;    // C -> C
  nn::Linear b_proj;     // C -> S
  nn::Linear c_proj;     // C -> S
  Tensor a_log;          // [C, S], A = -softplus(a_log)
  Tensor d_skip;         // [C]
  nn::Linear out_proj;   // 2C -> C
  Mlp mlp;

  Tensor a_matrix() const { return scale(softplus(a_log), -1.0); }

  Tensor mix(const Tensor& tokens) const {
    const std::size_t c = tokens.dim(2);
    Tensor xz = in_proj(tokens);
    Tensor xs = silu(slice(xz, 2, 0, c));
    Tensor z = silu(slice(xz, 2, c, 2 * c));
    Tensor delta = softplus(dt_proj(xs));
    Tensor bm = b_proj(xs);
    Tensor cm = c_proj(xs);
    Tensor a = a_matrix();
    Tensor fwd = selective_scan(xs, delta, a, bm, cm, d_skip, false);
    Tensor bwd = selective_scan(xs, delta, a, bm, cm, d_skip, true);
    Tensor y = scale(add(fwd, bwd), 0.5);
    return out_proj(concat({y, z}, 2));
  }

  Tensor operator()(const Tensor& x) const {
    const std::size_t h = x.dim(2), w = x.dim(3);
    Tensor t = nn::to_tokens(x);
    t = add(t, mix(norm1(t)));
    t = add(t, mlp(norm2(t)));
    return nn::from_tokens(t, h, w);
  }
};

inline MixerBlock make_mixer_block(nn::ParamStore& ps, const std::string& name, std::size_t c, const ModelConfig& cfg,
                                   Rng& rng) {
  MixerBlock m;
  m.norm1 = nn::make_layer_norm(ps, name + ".norm1", c, cfg.ln_eps);
  m.in_proj = nn::make_linear(ps, name + ".in_proj", c, 2 * c, rng);
  m.dt_proj = nn::make_linear(ps, name + ".dt_proj", c, c, rng);
  // softplus(bias) spread log-uniformly over [1e-3, 1e-1]
  auto bias = m.dt_proj.bias.mutable_data();
  for (std::size_t i = 0; i < c; ++i) {
    const double frac = c > 1 ? static_cast<double>(i) / static_cast<double>(c - 1) : 0.5;
    const double dt = std::exp(std::log(1e-3) + frac * (std::log(1e-1) - std::log(1e-3)));
    bias[i] = std::log(std::expm1(dt));
  }
  m.b_proj = nn::make_linear(ps, name + ".b_proj", c, cfg.ssm_state, rng);
  m.c_proj = nn::make_linear(ps, name + ".c_proj", c, cfg.ssm_state, rng);
  std::vector<double> a(c * cfg.ssm_state);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t s = 0; s < cfg.ssm_state; ++s) a[i * cfg.ssm_state + s] = std::log(std::expm1(static_cast<double>(s + 1)));
  m.a_log = ps.add(name + ".a_log", Tensor::from({c, cfg.ssm_state}, std::move(a)));
  m.d_skip = ps.add(name + ".d_skip", Tensor::full({c}, 1.0));
  m.out_proj = nn::make_linear(ps, name + ".out_proj", 2 * c, c, rng);
  m.norm2 = nn::make_layer_norm(ps, name + ".norm2", c, cfg.ln_eps);
  m.mlp = make_mlp(ps, name + ".mlp", c, c * cfg.mlp_ratio, rng);
  return m;
}

/// Multi-head cross-attention: queries from one token set, keys and values
/// from another. No positional encoding. The output projection starts at zero.
struct CrossAttention {
  nn::Linear q_proj, k_proj, v_proj, out_proj;
  std::size_t heads = 1;

  Tensor operator()(const Tensor& q_tokens, const Tensor& kv_tokens) const {
    if (q_tokens.ndim() != 3 || kv_tokens.ndim() != 3 || q_tokens.dim(0) != kv_tokens.dim(0) ||
        q_tokens.dim(2) != kv_tokens.dim(2))
      throw ShapeError("cross_attention", q_tokens.shape(), kv_tokens.shape(), "expected [N,Lq,C] and [N,Lk,C]");
    const std::size_t n = q_tokens.dim(0), lq = q_tokens.dim(1), lk = kv_tokens.dim(1), c = q_tokens.dim(2);
    const std::size_t hd = c / heads;
    auto split_heads = [&](const Tensor& t, std::size_t len) {
      return reshape(permute(reshape(t, {n, len, heads, hd}), {0, 2, 1, 3}), {n * heads, len, hd});
    };
    Tensor q = split_heads(q_proj(q_tokens), lq);
    Tensor k = split_heads(k_proj(kv_tokens), lk);
    Tensor v = split_heads(v_proj(kv_tokens), lk);
    Tensor scores = scale(matmul(q, transpose(k, 1, 2)), 1.0 / std::sqrt(static_cast<double>(hd)));
    Tensor ctx = matmul(softmax(scores, 2), v);  // [N*h, Lq, hd]
    Tensor merged = reshape(permute(reshape(ctx, {n, heads, lq, hd}), {0, 2, 1, 3}), {n, lq, c});
    return out_proj(merged);
  }
};

inline CrossAttention make_cross_attention(nn::ParamStore& ps, const std::string& name, std::size_t c,
                                           std::size_t heads, Rng& rng) {
  if (heads == 0 || c % heads != 0)
    throw std::invalid_argument("cross_attention: width " + std::to_string(c) + " not divisible by " +
                                std::to_string(heads) + " heads");
  CrossAttention a;
  a.q_proj = nn::make_linear(ps, name + ".q", c, c, rng);
  a.k_proj = nn::make_linear(ps, name + ".k", c, c, rng);
  a.v_proj = nn::make_linear(ps, name + ".v", c, c, rng);
  a.out_proj = nn::make_linear(ps, name + ".out", c, c, rng, nn::Init::kZero);
  a.heads = heads;
  return a;
}

/// F_cross(X_q, X_kv) = X_q' + MLP(LN(X_q')),  X_q' = X_q + MHCA(X_q, X_kv)
struct CrossInteraction {
  CrossAttention attn;
  nn::LayerNorm norm;
  Mlp mlp;

  Tensor operator()(const Tensor& x_q, const Tensor& x_kv) const {
    if (x_q.ndim() != 4 || x_kv.ndim() != 4 || x_q.dim(1) != x_kv.dim(1))
      throw ShapeError("gfi_cross", x_q.shape(), x_kv.shape(), "channel widths must match");
    const std::size_t h = x_q.dim(2), w = x_q.dim(3);
    Tensor q = nn::to_tokens(x_q);
    Tensor q1 = add(q, attn(q, nn::to_tokens(x_kv)));
    Tensor out = add(q1, mlp(norm(q1)));
    return nn::from_tokens(out, h, w);
  }
};

inline CrossInteraction make_cross_interaction(nn::ParamStore& ps, const std::string& name, std::size_t c,
                                               const ModelConfig& cfg, Rng& rng) {
  CrossInteraction x;
  x.attn = make_cross_attention(ps, name + ".mhca", c, cfg.heads, rng);
  x.norm = nn::make_layer_norm(ps, name + ".norm", c, cfg.ln_eps);
  x.mlp = make_mlp(ps, name + ".mlp", c, c * cfg.mlp_ratio, rng, /*zero_out=*/true);
  return x;
}

/// Geometric feature injection at one stage: prior injection into the SAR
/// stream followed by bidirectional cross-modal interaction.
struct GfiBlock {
  CrossAttention inject_attn;
  CrossInteraction opt_from_sar;
  CrossInteraction sar_from_opt;

  /// X~_sar = X_sar + CrossAttn(Q = X_sar, K = V = X_geo)
  Tensor inject(const Tensor& x_sar, const Tensor& x_geo) const {
    if (x_sar.ndim() != 4 || x_geo.ndim() != 4 || x_sar.dim(0) != x_geo.dim(0) || x_sar.dim(2) != x_geo.dim(2) ||
        x_sar.dim(3) != x_geo.dim(3) || x_sar.dim(1) != x_geo.dim(1))
      throw ShapeError("gfi_inject", x_sar.shape(), x_geo.shape(), "prior must match the SAR feature map");
    const std::size_t h = x_sar.dim(2), w = x_sar.dim(3);
    Tensor q = nn::to_tokens(x_sar);
    return nn::from_tokens(add(q, inject_attn(q, nn::to_tokens(x_geo))), h, w);
  }
};

inline GfiBlock make_gfi_block(nn::ParamStore& ps, const std::string& name, std::size_t c, const ModelConfig& cfg,
                               Rng& rng) {
  GfiBlock g;
  g.inject_attn = make_cross_attention(ps, name + ".inject", c, cfg.heads, rng);
  g.opt_from_sar = make_cross_interaction(ps, name + ".cross_opt", c, cfg, rng);
  g.sar_from_opt = make_cross_interaction(ps, name + ".cross_sar", c, cfg, rng);
  return g;
}

/// Auxiliary geometric prior encoder: three stride-2 conv layers over
/// [SAR intensity, Harris mask], then per-GFI-stage pooling and 1x1 projection.
struct PriorEncoder {
  std::array<nn::Conv2d, 3> convs;
  std::array<nn::BatchNorm, 3> norms;
  std::array<std::optional<nn::Conv2d>, 4> stage_proj;
  std::array<std::size_t, 4> pool{1, 1, 1, 1};

  /// Shared trunk at 1/8 input resolution.
  Tensor trunk(const Tensor& prior_input, bool training) {
    Tensor h = prior_input;
    for (std::size_t i = 0; i < 3; ++i) h = relu(norms[i](convs[i](h), training));
    return h;
  }

  Tensor at_stage(const Tensor& trunk_out, std::size_t stage) const {
    Tensor h = pool[stage] > 1 ? avg_pool2d(trunk_out, pool[stage], pool[stage]) : trunk_out;
    return (*stage_proj[stage])(h);
  }
};

// ---------------------------------------------------------------------------
// Full network

struct StreamFeatures {
  std::array<Tensor, 4> stages;  // X^0 .. X^3 (after any GFI at that stage)
  Tensor pooled;                 // [N, C3]
  Tensor embedding;              // f, [N, embed_dim]
  Tensor neck;                   // BN-neck output
  Tensor logits;                 // [N, num_classes]
  Tensor mask_shallow;           // [N,1,h0,w0] (when DS heads are evaluated)
  Tensor mask_deep;              // [N,1,h3,w3]
};

/// How GFI chooses the key/value partner of each stream.
enum class GfiPairing {
  kCross,  // row i of the optical batch interacts with row i of the SAR batch
  kSelf,   // each stream attends to its own (enhanced) features
};

struct ForwardOptions {
  bool training = false;
  bool use_gfi = true;
  bool use_ds = true;
  GfiPairing pairing = GfiPairing::kSelf;
};

struct ForwardInputs {
  const Tensor* optical = nullptr;    // [N,3,H,W]
  const Tensor* sar = nullptr;        // [N,3,H,W]
  const Tensor* sar_prior = nullptr;  // [N,2,H,W]: SAR intensity + Harris mask
};

struct ForwardOutput {
  std::optional<StreamFeatures> optical;
  std::optional<StreamFeatures> sar;
};

class GeoMamba {
 public:
  GeoMamba(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.stages.validate();
    if (cfg_.image_size % cfg_.stages.total_stride() != 0)
      throw std::invalid_argument("GeoMamba: image size must be divisible by 32");
    Rng rng = make_stream(seed, StreamTag::kInit);
    build_stream(Modality::kOptical, rng);
    if (cfg_.separate_streams) build_stream(Modality::kSar, rng);
    else sar_stem_ = build_stem("sar", rng);
    build_prior(rng);
    for (std::size_t i = 0; i < 4; ++i)
      if (cfg_.stages.gfi[i]) gfi_[i] = make_gfi_block(params_, "gfi" + std::to_string(i), cfg_.stages.channels[i], cfg_, rng);
    for (auto m : {Modality::kOptical, Modality::kSar}) {
      const std::string mn = modality_name(m);
      auto& heads = ds_heads_[static_cast<std::size_t>(m)];
      heads[0] = nn::make_conv(params_, "ds." + mn + ".shallow", cfg_.stages.channels[0], 1, 1, 1, 0, rng, nn::Init::kLecun);
      heads[1] = nn::make_conv(params_, "ds." + mn + ".deep", cfg_.stages.channels[3], 1, 1, 1, 0, rng, nn::Init::kLecun);
    }
    embed_proj_ = nn::make_linear(params_, "embed.proj", cfg_.stages.channels[3], cfg_.embed_dim, rng);
    neck_ = nn::make_batch_norm(params_, "embed.neck", cfg_.embed_dim);
    classifier_ = nn::make_linear(params_, "embed.classifier", cfg_.embed_dim, cfg_.num_classes, rng, nn::Init::kLecun, false);
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  nn::ParamStore& params() noexcept { return params_; }
  const nn::ParamStore& params() const noexcept { return params_; }
  GfiBlock& gfi(std::size_t stage) { return gfi_.at(stage).value(); }
  nn::Conv2d& ds_head(Modality m, bool deep) { return ds_heads_[static_cast<std::size_t>(m)][deep ? 1 : 0]; }

  ForwardOutput forward(const ForwardInputs& in, const ForwardOptions& opt) {
    const bool has_opt = in.optical != nullptr, has_sar = in.sar != nullptr;
    if (!has_opt && !has_sar) throw std::invalid_argument("GeoMamba::forward: no input stream");
    if (has_opt) check_input(*in.optical);
    if (has_sar) check_input(*in.sar);
    const bool cross = opt.pairing == GfiPairing::kCross && has_opt && has_sar;
    if (opt.use_gfi && cross && in.optical->dim(0) != in.sar->dim(0))
      throw ShapeError("gfi_pairing", in.optical->shape(), in.sar->shape(), "cross pairing needs equal batch sizes");

    std::optional<Tensor> x_opt, x_sar;
    std::array<Tensor, 4> st_opt, st_sar;
    if (has_opt) x_opt = stem(Modality::kOptical, *in.optical, opt.training);
    if (has_sar) x_sar = stem(Modality::kSar, *in.sar, opt.training);

    std::optional<Tensor> prior_trunk;
    if (opt.use_gfi && has_sar) {
      if (!in.sar_prior) throw std::invalid_argument("GeoMamba::forward: GFI needs the SAR prior input");
      const auto& p = *in.sar_prior;
      if (p.ndim() != 4 || p.dim(1) != 2 || p.dim(0) != in.sar->dim(0) || p.dim(2) != in.sar->dim(2) || p.dim(3) != in.sar->dim(3))
        throw ShapeError("prior_encoder", in.sar->shape(), p.shape(), "expected [N,2,H,W] prior input");
      prior_trunk = prior_.trunk(p, opt.training);
    }

    for (std::size_t i = 0; i < 4; ++i) {
      if (x_opt) x_opt = run_stage(Modality::kOptical, i, *x_opt, opt.training);
      if (x_sar) x_sar = run_stage(Modality::kSar, i, *x_sar, opt.training);
      if (opt.use_gfi && gfi_[i]) {
        const auto& g = *gfi_[i];
        std::optional<Tensor> sar_enh;
        if (x_sar) sar_enh = g.inject(*x_sar, prior_.at_stage(*prior_trunk, i));
        if (cross) {
          Tensor new_opt = g.opt_from_sar(*x_opt, *sar_enh);
          Tensor new_sar = g.sar_from_opt(*sar_enh, *x_opt);
          x_opt = new_opt;
          x_sar = new_sar;
        } else {
          if (x_opt) x_opt = g.opt_from_sar(*x_opt, *x_opt);
          if (x_sar) x_sar = g.sar_from_opt(*sar_enh, *sar_enh);
        }
      }
      if (x_opt) st_opt[i] = *x_opt;
      if (x_sar) st_sar[i] = *x_sar;
    }

    ForwardOutput out;
    if (has_opt) out.optical = head(Modality::kOptical, st_opt, opt);
    if (has_sar) out.sar = head(Modality::kSar, st_sar, opt);
    return out;
  }

  /// Stage features of a single stream without GFI or heads.
  std::array<Tensor, 4> backbone_forward(const Tensor& images, Modality m, bool training) {
    check_input(images);
    std::array<Tensor, 4> out;
    Tensor x = stem(m, images, training);
    for (std::size_t i = 0; i < 4; ++i) out[i] = x = run_stage(m, i, x, training);
    return out;
  }

  /// Single-channel mask logits from stage 0 (shallow) or stage 3 (deep).
  Tensor ds_project(const Tensor& stage_feature, Modality m, std::size_t stage) {
    if (stage != 0 && stage != 3) throw std::invalid_argument("ds_project: only stages 0 and 3 carry DS heads");
    auto& h = ds_head(m, stage == 3);
    if (stage_feature.ndim() != 4 || stage_feature.dim(1) != h.weight.dim(1))
      throw ShapeError("ds_project", stage_feature.shape(), h.weight.shape(), "feature width must match the head");
    return h(stage_feature);
  }

  /// Pooled, projected embedding of the deep feature.
  Tensor embed(const Tensor& deep_feature) const { return embed_proj_(global_avg_pool(deep_feature)); }

 private:
  struct StageModules {
    std::optional<nn::Conv2d> down;
    std::optional<nn::BatchNorm> down_bn;
    std::vector<ConvBlock> conv_blocks;
    std::vector<MixerBlock> mixer_blocks;
  };
  struct Stem {
    std::vector<nn::Conv2d> convs;
    std::vector<nn::BatchNorm> norms;
  };

  Stem build_stem(const std::string& mn, Rng& rng) {
    Stem s;
    std::size_t layers = 0;
    for (std::size_t v = cfg_.stages.strides[0]; v > 1; v >>= 1) ++layers;
    std::size_t in = cfg_.in_channels;
    for (std::size_t l = 0; l < layers; ++l) {
      const std::size_t out = l + 1 == layers ? cfg_.stages.channels[0] : std::max<std::size_t>(1, cfg_.stages.channels[0] / 2);
      const std::string name = "stem." + mn + "." + std::to_string(l);
      s.convs.push_back(nn::make_conv(params_, name + ".conv", in, out, 3, 2, 1, rng));
      s.norms.push_back(nn::make_batch_norm(params_, name + ".bn", out));
      in = out;
    }
    return s;
  }

  void build_stream(Modality m, Rng& rng) {
    const std::string mn = cfg_.separate_streams ? modality_name(m) : "shared";
    (m == Modality::kOptical ? opt_stem_ : sar_stem_) = build_stem(modality_name(m), rng);
    auto& stages = m == Modality::kOptical || !cfg_.separate_streams ? opt_stages_ : sar_stages_;
    for (std::size_t i = 0; i < 4; ++i) {
      const std::size_t c = cfg_.stages.channels[i];
      const std::string base = "stage" + std::to_string(i) + "." + mn;
      StageModules& sm = stages[i];
      if (i > 0) {
        sm.down = nn::make_conv(params_, base + ".down", cfg_.stages.channels[i - 1], c, 3, cfg_.stages.strides[i], 1, rng);
        sm.down_bn = nn::make_batch_norm(params_, base + ".down_bn", c);
      }
      for (std::size_t b = 0; b < cfg_.stages.blocks[i]; ++b) {
        const std::string bn = base + ".block" + std::to_string(b);
        if (cfg_.stages.kinds[i] == BlockKind::kConv) sm.conv_blocks.push_back(make_conv_block(params_, bn, c, rng));
        else sm.mixer_blocks.push_back(make_mixer_block(params_, bn, c, cfg_, rng));
      }
    }
  }

  void build_prior(Rng& rng) {
    const std::size_t c0 = cfg_.stages.channels[0], c1 = cfg_.stages.channels[1];
    const std::array<std::size_t, 4> widths{2, std::max<std::size_t>(1, c0 / 2), c0, c1};
    for (std::size_t l = 0; l < 3; ++l) {
      const std::string name = "prior.conv" + std::to_string(l);
      prior_.convs[l] = nn::make_conv(params_, name, widths[l], widths[l + 1], 3, 2, 1, rng);
      prior_.norms[l] = nn::make_batch_norm(params_, name + ".bn", widths[l + 1]);
    }
    std::size_t stride = 1;
    for (std::size_t i = 0; i < 4; ++i) {
      stride *= cfg_.stages.strides[i];
      if (!cfg_.stages.gfi[i]) continue;
      if (stride < 8) throw std::invalid_argument("GFI stage resolution finer than the prior encoder output");
      prior_.pool[i] = stride / 8;
      prior_.stage_proj[i] =
          nn::make_conv(params_, "prior.proj" + std::to_string(i), c1, cfg_.stages.channels[i], 1, 1, 0, rng);
    }
  }

  void check_input(const Tensor& x) const {
    if (x.ndim() != 4 || x.dim(1) != cfg_.in_channels)
      throw ShapeError("backbone", x.shape(), {0, cfg_.in_channels, cfg_.image_size, cfg_.image_size}, "wrong channel count");
    if (x.dim(2) != x.dim(3)) throw ShapeError("backbone", x.shape(), {}, "input must be square");
    if (x.dim(2) % cfg_.stages.total_stride() != 0)
      throw ShapeError("backbone", x.shape(), {}, "input side must be divisible by 32");
  }

  Tensor stem(Modality m, const Tensor& images, bool training) {
    Stem& s = m == Modality::kOptical ? opt_stem_ : sar_stem_;
    Tensor x = images;
    for (std::size_t l = 0; l < s.convs.size(); ++l) {
      x = s.norms[l](s.convs[l](x), training);
      if (l + 1 < s.convs.size()) x = relu(x);
    }
    return x;
  }

  Tensor run_stage(Modality m, std::size_t i, Tensor x, bool training) {
    StageModules& sm = (m == Modality::kOptical || !cfg_.separate_streams ? opt_stages_ : sar_stages_)[i];
    if (sm.down) x = (*sm.down_bn)((*sm.down)(x), training);
    for (auto& b : sm.conv_blocks) x = b(x, training);
    for (auto& b : sm.mixer_blocks) x = b(x);
    return x;
  }

  StreamFeatures head(Modality m, const std::array<Tensor, 4>& stages, const ForwardOptions& opt) {
    StreamFeatures f;
    f.stages = stages;
    f.pooled = global_avg_pool(stages[3]);
    f.embedding = embed_proj_(f.pooled);
    f.neck = neck_(f.embedding, opt.training);
    f.logits = classifier_(f.neck);
    if (opt.use_ds) {
      f.mask_shallow = ds_project(stages[0], m, 0);
      f.mask_deep = ds_project(stages[3], m, 3);
    }
    return f;
  }

  ModelConfig cfg_;
  nn::ParamStore params_;
  Stem opt_stem_, sar_stem_;
  std::array<StageModules, 4> opt_stages_, sar_stages_;
  PriorEncoder prior_;
  std::array<std::optional<GfiBlock>, 4> gfi_;
  std::array<std::array<nn::Conv2d, 2>, 2> ds_heads_;
  nn::Linear embed_proj_;
  nn::BatchNorm neck_;
  nn::Linear classifier_;
};

}  // namespace geomamba::model
