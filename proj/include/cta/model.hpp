#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cta/nn.hpp"

namespace cta {

enum class AttentionKind { mhsa, lmf_mhsa };
enum class RrcvVariant { none, cnn, dwconv, resnet };

inline std::string to_string(AttentionKind k) { return k == AttentionKind::mhsa ? "mhsa" : "lmf_mhsa"; }

inline std::string to_string(RrcvVariant v) {
  switch (v) {
    case RrcvVariant::none: return "none";
    case RrcvVariant::cnn: return "cnn";
    case RrcvVariant::dwconv: return "dwconv";
    case RrcvVariant::resnet: return "resnet";
  }
  return "?";
}

inline AttentionKind parse_attention(const std::string& s) {
  if (s == "mhsa") return AttentionKind::mhsa;
  if (s == "lmf_mhsa") return AttentionKind::lmf_mhsa;
  throw ConfigError("unknown attention kind '" + s + "' (expected mhsa|lmf_mhsa)");
}

inline RrcvVariant parse_rrcv(const std::string& s) {
  if (s == "none") return RrcvVariant::none;
  if (s == "cnn") return RrcvVariant::cnn;
  if (s == "dwconv") return RrcvVariant::dwconv;
  if (s == "resnet") return RrcvVariant::resnet;
  throw ConfigError("unknown rrcv variant '" + s + "' (expected none|cnn|dwconv|resnet)");
}

/// "1,3,5" style list; "none" or "" means no multi-scale fusion.
inline std::string scales_to_string(const std::vector<std::size_t>& scales, char sep = ',') {
  if (scales.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < scales.size(); ++i) s += (i ? std::string(1, sep) : "") + std::to_string(scales[i]);
  return s;
}

inline std::vector<std::size_t> parse_scales(const std::string& text) {
  std::vector<std::size_t> out;
  if (text.empty() || text == "none") return out;
  std::string item;
  std::istringstream is(text);
  while (std::getline(is, item, ',')) {
    try {
      std::size_t pos = 0;
      const long v = std::stol(item, &pos);
      if (pos != item.size() || v <= 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("invalid kernel scale '" + item + "'");
    }
  }
  return out;
}

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t in_channels = 3;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  AttentionKind attention = AttentionKind::lmf_mhsa;
  RrcvVariant rrcv = RrcvVariant::resnet;
  /// Depthwise branch kernels for multi-scale fusion; empty disables fusion.
  std::vector<std::size_t> kernel_scales{1, 3, 5};
  /// Token-axis reduction of K and V to ceil(T / r) rows; 1 disables it.
  std::size_t kv_reduction = 4;
  std::size_t num_classes = 10;
  bool use_class_token = true;
  /// RRCV feature-map width; 0 selects the default rule (see rrcv_width()).
  std::size_t rrcv_channels = 0;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t patch_tokens() const { return grid() * grid(); }
  std::size_t tokens() const { return patch_tokens() + (use_class_token ? 1 : 0); }
  std::size_t head_dim() const { return embed_dim / heads; }
  std::size_t reduced_tokens() const { return (tokens() + kv_reduction - 1) / kv_reduction; }
  bool uses_fusion() const { return attention == AttentionKind::lmf_mhsa && !kernel_scales.empty(); }
  bool uses_token_reduction() const { return attention == AttentionKind::lmf_mhsa && kv_reduction > 1; }

  /// D / patch^2 when integral, otherwise the largest power of two not above
  /// it, floored at 4.
  std::size_t rrcv_width() const {
    if (rrcv_channels) return rrcv_channels;
    const std::size_t area = patch_size * patch_size;
    if (embed_dim % area == 0) return embed_dim / area;
    std::size_t c = 1;
    while (c * 2 * area <= embed_dim) c *= 2;
    return std::max<std::size_t>(c, 4);
  }

  void validate() const {
    auto need = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError(msg);
    };
    need(image_size >= 1 && patch_size >= 1, "image_size and patch_size must be >= 1");
    need(image_size % patch_size == 0, "image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                                           std::to_string(patch_size));
    need(in_channels >= 1, "in_channels must be >= 1");
    need(embed_dim >= 1 && heads >= 1 && embed_dim % heads == 0,
         "embed_dim " + std::to_string(embed_dim) + " not divisible by heads " + std::to_string(heads));
    need(depth >= 1, "depth must be >= 1");
    need(mlp_ratio >= 1, "mlp_ratio must be >= 1");
    need(num_classes >= 1, "num_classes must be >= 1");
    need(kv_reduction >= 1, "kv_reduction must be >= 1");
    need(kv_reduction <= tokens(), "kv_reduction " + std::to_string(kv_reduction) + " exceeds token count " +
                                       std::to_string(tokens()));
    for (std::size_t i = 0; i < kernel_scales.size(); ++i) {
      const auto k = kernel_scales[i];
      need(k % 2 == 1, "even kernel size " + std::to_string(k) + " in kernel_scales");
      need(k <= 2 * grid() + 1, "kernel size " + std::to_string(k) + " too large for a " + std::to_string(grid()) +
                                    "x" + std::to_string(grid()) + " token grid");
      for (std::size_t j = 0; j < i; ++j) need(kernel_scales[j] != k, "duplicate kernel scale " + std::to_string(k));
    }
  }

  /// CI-scale model: 32px, patch 4, D=64, depth 4, 4 heads.
  static ModelConfig tiny() { return ModelConfig{}; }

  /// 224px, patch 16, depth 8, 8 heads. D=384 and r=4 are calibration knobs.
  static ModelConfig paper() {
    ModelConfig c;
    c.image_size = 224;
    c.patch_size = 16;
    c.embed_dim = 384;
    c.depth = 8;
    c.heads = 8;
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
struct MultiScaleParams {
  std::vector<std::size_t> scales;
  std::vector<Conv2dParams<T>> branches;  // depthwise, one per scale
  Conv2dParams<T> reduce;                 // pointwise |scales|*C -> C

  static MultiScaleParams init(std::size_t channels, const std::vector<std::size_t>& scales, SeedSequence& seeds) {
    if (scales.empty()) throw ConfigError("multi-scale fusion needs at least one kernel scale");
    MultiScaleParams p;
    p.scales = scales;
    for (auto k : scales) {
      if (k % 2 == 0) throw ConfigError("even kernel size " + std::to_string(k) + " in kernel_scales");
      p.branches.push_back(Conv2dParams<T>::depthwise(channels, k, seeds));
    }
    p.reduce = Conv2dParams<T>::pointwise(scales.size() * channels, channels, seeds);
    return p;
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    for (std::size_t i = 0; i < branches.size(); ++i) branches[i].collect(prefix + ".branch" + std::to_string(scales[i]), out);
    reduce.collect(prefix + ".reduce", out);
  }
};

template <typename T>
struct AttentionParams {
  std::size_t heads = 1;
  LinearParams<T> q, k, v, out;
  std::optional<MultiScaleParams<T>> fusion;
  std::optional<LinearParams<T>> k_tokens, v_tokens;  // token-axis maps T -> ceil(T/r)

  static AttentionParams init(const ModelConfig& cfg, SeedSequence& seeds) {
    const std::size_t d = cfg.embed_dim;
    AttentionParams p;
    p.heads = cfg.heads;
    if (cfg.uses_fusion()) p.fusion = MultiScaleParams<T>::init(d, cfg.kernel_scales, seeds);
    p.q = LinearParams<T>::init(d, d, seeds);
    p.k = LinearParams<T>::init(d, d, seeds);
    p.v = LinearParams<T>::init(d, d, seeds);
    if (cfg.uses_token_reduction()) {
      p.k_tokens = LinearParams<T>::init(cfg.tokens(), cfg.reduced_tokens(), seeds);
      p.v_tokens = LinearParams<T>::init(cfg.tokens(), cfg.reduced_tokens(), seeds);
    }
    p.out = LinearParams<T>::init(d, d, seeds);
    return p;
  }

  void collect(const std::string& prefix, ParamList<T>& out_list) const {
    if (fusion) fusion->collect(prefix + ".fusion", out_list);
    q.collect(prefix + ".q_proj", out_list);
    k.collect(prefix + ".k_proj", out_list);
    v.collect(prefix + ".v_proj", out_list);
    if (k_tokens) k_tokens->collect(prefix + ".k_tokens", out_list);
    if (v_tokens) v_tokens->collect(prefix + ".v_tokens", out_list);
    out.collect(prefix + ".out_proj", out_list);
  }
};

template <typename T>
struct RrcvParams {
  RrcvVariant variant = RrcvVariant::resnet;
  std::size_t channels = 4;
  std::size_t patch = 1;
  LinearParams<T> reverse;             // RE: D -> C * patch^2 per token
  std::vector<Conv2dParams<T>> body;   // cnn/resnet: 2 convs; dwconv: dw, pw, dw, pw
  Conv2dParams<T> pconv;               // PConv: C -> C
  LinearParams<T> embed;               // E: C * patch^2 -> D per token

  static RrcvParams init(const ModelConfig& cfg, SeedSequence& seeds) {
    if (cfg.rrcv == RrcvVariant::none) throw ConfigError("RRCV parameters requested for variant none");
    RrcvParams p;
    p.variant = cfg.rrcv;
    p.channels = cfg.rrcv_width();
    p.patch = cfg.patch_size;
    const std::size_t c = p.channels, area = p.patch * p.patch;
    p.reverse = LinearParams<T>::init(cfg.embed_dim, c * area, seeds);
    if (cfg.rrcv == RrcvVariant::dwconv) {
      for (int i = 0; i < 2; ++i) {
        p.body.push_back(Conv2dParams<T>::depthwise(c, 3, seeds));
        p.body.push_back(Conv2dParams<T>::pointwise(c, c, seeds));
      }
    } else {
      for (int i = 0; i < 2; ++i) p.body.push_back(Conv2dParams<T>::init(c, c, 3, 1, seeds));
    }
    p.pconv = Conv2dParams<T>::pointwise(c, c, seeds);
    p.embed = LinearParams<T>::init(c * area, cfg.embed_dim, seeds);
    return p;
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    reverse.collect(prefix + ".reverse", out);
    for (std::size_t i = 0; i < body.size(); ++i) body[i].collect(prefix + ".body" + std::to_string(i), out);
    pconv.collect(prefix + ".pconv", out);
    embed.collect(prefix + ".embed", out);
  }
};

template <typename T>
struct BlockParams {
  LayerNormParams<T> norm1, norm2;
  AttentionParams<T> attn;
  std::optional<RrcvParams<T>> rrcv;
  LinearParams<T> fc1, fc2;

  static BlockParams init(const ModelConfig& cfg, SeedSequence& seeds) {
    BlockParams b;
    b.norm1 = LayerNormParams<T>::init(cfg.embed_dim);
    b.attn = AttentionParams<T>::init(cfg, seeds);
    b.norm2 = LayerNormParams<T>::init(cfg.embed_dim);
    if (cfg.rrcv != RrcvVariant::none) b.rrcv = RrcvParams<T>::init(cfg, seeds);
    b.fc1 = LinearParams<T>::init(cfg.embed_dim, cfg.mlp_ratio * cfg.embed_dim, seeds);
    b.fc2 = LinearParams<T>::init(cfg.mlp_ratio * cfg.embed_dim, cfg.embed_dim, seeds);
    return b;
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    norm1.collect(prefix + ".norm1", out);
    attn.collect(prefix + ".attn", out);
    norm2.collect(prefix + ".norm2", out);
    if (rrcv) rrcv->collect(prefix + ".rrcv", out);
    fc1.collect(prefix + ".mlp.fc1", out);
    fc2.collect(prefix + ".mlp.fc2", out);
  }
};

template <typename T>
struct CtaNet {
  ModelConfig cfg;
  LinearParams<T> patch_proj;  // in_channels * patch^2 -> D
  Var<T> pos_embed;            // [T, D]
  Var<T> cls_token;            // [D], only with use_class_token
  std::vector<BlockParams<T>> blocks;
  LayerNormParams<T> norm;
  LinearParams<T> head;

  /// Stable, named enumeration in definition order.
  ParamList<T> parameters() const {
    ParamList<T> out;
    patch_proj.collect("patch_embed.proj", out);
    out.push_back({"pos_embed", pos_embed});
    if (cls_token.defined()) out.push_back({"cls_token", cls_token});
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect("blocks." + std::to_string(i), out);
    norm.collect("norm", out);
    head.collect("head", out);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.var.numel();
    return n;
  }

  void zero_grad() {
    for (auto p : parameters()) p.var.zero_grad();
  }
};

/// Deterministic per seed: every tensor draws from its own derived stream.
template <typename T>
CtaNet<T> model_init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SeedSequence seeds(seed);
  CtaNet<T> net;
  net.cfg = cfg;
  net.patch_proj = LinearParams<T>::init(cfg.in_channels * cfg.patch_size * cfg.patch_size, cfg.embed_dim, seeds);
  net.pos_embed = parameter(Tensor<T>::normal({cfg.tokens(), cfg.embed_dim}, 0.0, 0.02, seeds.next()));
  if (cfg.use_class_token) net.cls_token = parameter(Tensor<T>::normal({cfg.embed_dim}, 0.0, 0.02, seeds.next()));
  for (std::size_t i = 0; i < cfg.depth; ++i) net.blocks.push_back(BlockParams<T>::init(cfg, seeds));
  net.norm = LayerNormParams<T>::init(cfg.embed_dim);
  net.head = LinearParams<T>::init(cfg.embed_dim, cfg.num_classes, seeds);
  return net;
}

// ---------------------------------------------------------------------------
// Patch geometry

inline std::size_t exact_sqrt(std::size_t n, const char* what) {
  const auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (r * r != n) throw ShapeError(std::string(what) + ": token count " + std::to_string(n) + " is not a perfect square");
  return r;
}

/// [B, C, H, W] -> [B, C, N, p, p], patches in row-major grid order.
template <typename T>
Var<T> extract_patches(const Var<T>& x, std::size_t p) {
  if (x.rank() != 4) throw ShapeError("extract_patches expects [B,C,H,W]");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % p || w % p) throw ShapeError("image " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by patch " + std::to_string(p));
  const std::size_t gh = h / p, gw = w / p;
  auto y = permute(reshape(x, {b, c, gh, p, gw, p}), {0, 1, 2, 4, 3, 5});
  return reshape(y, {b, c, gh * gw, p, p});
}

/// Inverse of extract_patches: [B, C, N, Hp, Wp] -> [B, C, H, W].
template <typename T>
Var<T> reconstruct(const Var<T>& patches, std::size_t h, std::size_t w) {
  if (patches.rank() != 5) throw ShapeError("reconstruct expects [B,C,N,Hp,Wp]");
  const std::size_t b = patches.dim(0), c = patches.dim(1), n = patches.dim(2), hp = patches.dim(3), wp = patches.dim(4);
  if (n * hp * wp != h * w || h % hp || w % wp || (h / hp) * (w / wp) != n)
    throw ShapeError("reconstruct: " + std::to_string(n) + " patches of " + std::to_string(hp) + "x" +
                     std::to_string(wp) + " do not tile " + std::to_string(h) + "x" + std::to_string(w));
  const std::size_t gh = h / hp, gw = w / wp;
  auto y = permute(reshape(patches, {b, c, gh, gw, hp, wp}), {0, 1, 2, 4, 3, 5});
  return reshape(y, {b, c, h, w});
}

/// [B, C, H, W] -> [B, N, C * p * p] (per-patch vectors, channel-major).
template <typename T>
Var<T> patchify_tokens(const Var<T>& x, std::size_t p) {
  auto patches = extract_patches(x, p);
  const std::size_t b = x.dim(0), c = x.dim(1), n = patches.dim(2);
  return reshape(permute(patches, {0, 2, 1, 3, 4}), {b, n, c * p * p});
}

template <typename T>
Var<T> class_token_of(const Var<T>& x) {
  return slice(x, 1, 0, 1);
}

template <typename T>
Var<T> patch_tokens_of(const Var<T>& x, bool has_class_token) {
  return has_class_token ? slice(x, 1, 1, x.dim(1) - 1) : x;
}

/// E(.) on images: patch projection, optional class token, positional embedding.
template <typename T>
Var<T> patch_embed(const Var<T>& img, const CtaNet<T>& net) {
  const auto& cfg = net.cfg;
  if (img.rank() != 4 || img.dim(1) != cfg.in_channels || img.dim(2) != cfg.image_size || img.dim(3) != cfg.image_size)
    throw ShapeError("patch_embed expects [B," + std::to_string(cfg.in_channels) + "," + std::to_string(cfg.image_size) +
                     "," + std::to_string(cfg.image_size) + "], got " + to_string(img.shape()));
  auto tokens = linear(patchify_tokens(img, cfg.patch_size), net.patch_proj);
  if (cfg.use_class_token) {
    auto cls = broadcast_to(reshape(net.cls_token, {1, 1, cfg.embed_dim}), {img.dim(0), 1, cfg.embed_dim});
    tokens = concat<T>({cls, tokens}, 1);
  }
  return add(tokens, net.pos_embed);
}

/// RE(.): drops the class token, maps each token D -> C*p*p and reassembles
/// the patch grid into a [B, C, g*p, g*p] feature map.
template <typename T>
Var<T> reverse_embed(const Var<T>& x, const RrcvParams<T>& p, bool has_class_token) {
  auto patches = patch_tokens_of(x, has_class_token);
  const std::size_t b = patches.dim(0), n = patches.dim(1);
  const std::size_t g = exact_sqrt(n, "reverse_embed");
  const std::size_t c = p.channels, ps = p.patch;
  auto y = linear(patches, p.reverse);
  y = permute(reshape(y, {b, n, c, ps, ps}), {0, 2, 1, 3, 4});
  return reconstruct(y, g * ps, g * ps);
}

// ---------------------------------------------------------------------------
// RRCV

template <typename T>
Var<T> rrcv_body(const Var<T>& x, const RrcvParams<T>& p) {
  switch (p.variant) {
    case RrcvVariant::cnn:
      return conv2d(gelu(conv2d(x, p.body[0])), p.body[1]);
    case RrcvVariant::resnet:
      return add(x, conv2d(gelu(conv2d(x, p.body[0])), p.body[1]));
    case RrcvVariant::dwconv: {
      auto h = pointwise_conv2d(depthwise_conv2d(x, p.body[0]), p.body[1]);
      return pointwise_conv2d(depthwise_conv2d(gelu(h), p.body[2]), p.body[3]);
    }
    case RrcvVariant::none: break;
  }
  throw ConfigError("unknown RRCV variant");
}

/// Tokens -> RE -> CNN variant -> PConv -> E -> tokens. The class token is
/// passed through unchanged; output shape equals input shape.
template <typename T>
Var<T> rrcv_forward(const Var<T>& x, const RrcvParams<T>& p, bool has_class_token) {
  auto fmap = rrcv_body(reverse_embed(x, p, has_class_token), p);
  auto mixed = pointwise_conv2d(fmap, p.pconv);
  auto tokens = linear(patchify_tokens(mixed, p.patch), p.embed);
  if (!has_class_token) return tokens;
  return concat<T>({class_token_of(x), tokens}, 1);
}

// ---------------------------------------------------------------------------
// Attention

/// Depthwise branch per kernel scale (same padding), channel concat in scale
/// order, then a pointwise reduction back to C channels.
template <typename T>
Var<T> multi_scale_fuse(const Var<T>& x, const MultiScaleParams<T>& p) {
  if (x.rank() != 4) throw ShapeError("multi_scale_fuse expects [B,C,H,W]");
  std::vector<Var<T>> branches;
  for (const auto& conv : p.branches) branches.push_back(depthwise_conv2d(x, conv));
  auto cat = branches.size() == 1 ? branches[0] : concat(branches, 1);
  return pointwise_conv2d(cat, p.reduce);
}

template <typename T>
struct AttentionTrace {
  Tensor<T> weights;  // [B, heads, T, T'] softmax output
};

namespace detail {

template <typename T>
Var<T> split_heads(const Var<T>& x, std::size_t heads) {
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  return permute(reshape(x, {b, t, heads, d / heads}), {0, 2, 1, 3});
}

template <typename T>
Var<T> token_projection(const Var<T>& x, const LinearParams<T>& p) {
  // x [B, h, T, dk]; weight [T', T]; bias [T'] broadcast along dk
  if (x.dim(2) != p.in_dim())
    throw ShapeError("token projection expects " + std::to_string(p.in_dim()) + " tokens, got " + std::to_string(x.dim(2)));
  auto y = matmul(p.weight, x);
  if (p.bias.defined()) y = add(y, reshape(p.bias, {p.out_dim(), 1}));
  return y;
}

}  // namespace detail

/// Q/K/V per-token projections (equivalent to 1x1 convolutions on the token
/// map), optional token-axis K'/V' reduction, scaled dot-product attention per
/// head, head concat, output projection.
template <typename T>
Var<T> attention_core(const Var<T>& x, const AttentionParams<T>& p, AttentionTrace<T>* trace = nullptr) {
  if (x.rank() != 3) throw ShapeError("attention expects [B,T,D], got " + to_string(x.shape()));
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (d % p.heads) throw ConfigError("embed dim " + std::to_string(d) + " not divisible by heads " + std::to_string(p.heads));
  const std::size_t dk = d / p.heads;
  auto q = detail::split_heads(linear(x, p.q), p.heads);
  auto k = detail::split_heads(linear(x, p.k), p.heads);
  auto v = detail::split_heads(linear(x, p.v), p.heads);
  if (p.k_tokens) k = detail::token_projection(k, *p.k_tokens);
  if (p.v_tokens) v = detail::token_projection(v, *p.v_tokens);
  auto scores = scale(matmul(q, transpose(k, 2, 3)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk))));
  auto weights = softmax(scores, -1);
  if (trace) trace->weights = weights.value();
  auto ctx = reshape(permute(matmul(weights, v), {0, 2, 1, 3}), {b, t, d});
  return linear(ctx, p.out);
}

/// Baseline multi-head self-attention.
template <typename T>
Var<T> mhsa(const Var<T>& x, const AttentionParams<T>& p, AttentionTrace<T>* trace = nullptr) {
  if (p.fusion || p.k_tokens || p.v_tokens) throw ConfigError("mhsa given LMF-MHSA parameters");
  return attention_core(x, p, trace);
}

/// Multi-scale fusion applied to the patch-token grid; the class token is
/// re-prepended untouched.
template <typename T>
Var<T> fuse_tokens(const Var<T>& x, const MultiScaleParams<T>& p, bool has_class_token) {
  if (x.rank() != 3) throw ShapeError("fuse_tokens expects [B,T,D], got " + to_string(x.shape()));
  const std::size_t b = x.dim(0), d = x.dim(2);
  auto patches = patch_tokens_of(x, has_class_token);
  const std::size_t n = patches.dim(1);
  const std::size_t g = exact_sqrt(n, "lmf_mhsa");
  auto map = reshape(permute(patches, {0, 2, 1}), {b, d, g, g});
  auto back = permute(reshape(multi_scale_fuse(map, p), {b, d, n}), {0, 2, 1});
  return has_class_token ? concat<T>({class_token_of(x), back}, 1) : back;
}

/// Token-map fusion, then attention with reduced K'/V'.
template <typename T>
Var<T> lmf_mhsa(const Var<T>& x, const AttentionParams<T>& p, bool has_class_token,
                AttentionTrace<T>* trace = nullptr) {
  if (x.rank() != 3) throw ShapeError("lmf_mhsa expects [B,T,D], got " + to_string(x.shape()));
  if (p.k_tokens && p.k_tokens->in_dim() != x.dim(1))
    throw ShapeError("K/V token maps expect " + std::to_string(p.k_tokens->in_dim()) + " tokens, got " +
                     std::to_string(x.dim(1)));
  return attention_core(p.fusion ? fuse_tokens(x, *p.fusion, has_class_token) : x, p, trace);
}

template <typename T>
Var<T> attention_forward(const Var<T>& x, const AttentionParams<T>& p, const ModelConfig& cfg,
                         AttentionTrace<T>* trace = nullptr) {
  return cfg.attention == AttentionKind::mhsa ? mhsa(x, p, trace) : lmf_mhsa(x, p, cfg.use_class_token, trace);
}

// ---------------------------------------------------------------------------
// Block and model

/// y1 = x + Attn(LN1(x)); y2 = y1 + MLP(RRCV(LN2(y1))).
template <typename T>
Var<T> ct_block(const Var<T>& x, const BlockParams<T>& p, const ModelConfig& cfg, AttentionTrace<T>* trace = nullptr) {
  auto y1 = add(x, attention_forward(layer_norm(x, p.norm1), p.attn, cfg, trace));
  auto h = layer_norm(y1, p.norm2);
  if (p.rrcv) h = rrcv_forward(h, *p.rrcv, cfg.use_class_token);
  return add(y1, linear(gelu(linear(h, p.fc1)), p.fc2));
}

/// Class-token (or mean patch-token) features after the final norm: [B, D].
template <typename T>
Var<T> model_features(const Var<T>& img, const CtaNet<T>& net) {
  auto x = patch_embed(img, net);
  for (const auto& block : net.blocks) x = ct_block(x, block, net.cfg);
  x = layer_norm(x, net.norm);
  const std::size_t b = x.dim(0), d = x.dim(2);
  if (net.cfg.use_class_token) return reshape(class_token_of(x), {b, d});
  return mean(x, 1);
}

template <typename T>
Var<T> model_forward(const Var<T>& img, const CtaNet<T>& net) {
  return linear(model_features(img, net), net.head);
}

}  // namespace cta
