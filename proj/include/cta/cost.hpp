#pragma once

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "cta/model.hpp"

namespace cta {

// Closed-form parameter and multiply-accumulate counts. One MAC is two FLOPs;
// both are reported. Bias additions, normalization, softmax, activations and
// residual adds are elementwise work and are tallied separately from MACs.

struct CostRow {
  std::string layer;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;

  std::uint64_t flops() const { return 2 * macs; }
};

struct CostReport {
  std::string label;
  std::string convention = "1 MAC = 2 FLOPs";
  std::size_t batch = 1;
  std::vector<CostRow> rows;
  std::uint64_t elementwise_flops = 0;

  std::uint64_t total_params() const {
    std::uint64_t n = 0;
    for (const auto& r : rows) n += r.params;
    return n;
  }
  std::uint64_t total_macs() const {
    std::uint64_t n = 0;
    for (const auto& r : rows) n += r.macs;
    return n;
  }
  std::uint64_t total_flops() const { return 2 * total_macs(); }

  /// Sum over rows whose name ends with one of `suffixes`.
  std::uint64_t macs_matching(const std::vector<std::string>& suffixes) const {
    std::uint64_t n = 0;
    for (const auto& r : rows)
      for (const auto& s : suffixes)
        if (r.layer.size() >= s.size() && r.layer.compare(r.layer.size() - s.size(), s.size(), s) == 0) {
          n += r.macs;
          break;
        }
    return n;
  }
};

namespace cost {

using u64 = std::uint64_t;

inline u64 linear_params(u64 in, u64 out, bool bias = true) { return in * out + (bias ? out : 0); }
inline u64 linear_macs(u64 rows, u64 in, u64 out) { return rows * in * out; }

inline u64 conv_params(u64 in_ch, u64 out_ch, u64 k, u64 groups, bool bias = true) {
  return out_ch * (in_ch / groups) * k * k + (bias ? out_ch : 0);
}
/// out_elems * (in_ch / groups) * k^2.
inline u64 conv_macs(u64 batch, u64 out_ch, u64 out_h, u64 out_w, u64 in_ch, u64 k, u64 groups) {
  return batch * out_ch * out_h * out_w * (in_ch / groups) * k * k;
}

/// Depthwise k x k over M channels followed by a pointwise M -> N mixer.
inline u64 separable_params(u64 m, u64 n, u64 k, bool bias = false) {
  return conv_params(m, m, k, m, bias) + conv_params(m, n, 1, 1, bias);
}

// Elementwise FLOPs per element.
inline constexpr u64 kLayerNormFlops = 5;  // mean, centre, square, scale, shift
inline constexpr u64 kSoftmaxFlops = 3;    // exp, sum, divide
inline constexpr u64 kGeluFlops = 8;

}  // namespace cost

namespace detail {

class CostBuilder {
 public:
  explicit CostBuilder(CostReport& r) : r_(r) {}

  void add(std::string name, std::uint64_t params, std::uint64_t macs) {
    r_.rows.push_back({std::move(name), params, macs});
  }
  void linear(const std::string& name, std::uint64_t rows, std::uint64_t in, std::uint64_t out) {
    add(name, cost::linear_params(in, out), cost::linear_macs(rows, in, out));
    r_.elementwise_flops += rows * out;
  }
  void conv(const std::string& name, std::uint64_t b, std::uint64_t in, std::uint64_t out, std::uint64_t k,
            std::uint64_t groups, std::uint64_t hw) {
    add(name, cost::conv_params(in, out, k, groups), cost::conv_macs(b, out, hw, hw, in, k, groups));
    r_.elementwise_flops += b * out * hw * hw;
  }
  void layer_norm(const std::string& name, std::uint64_t elems, std::uint64_t dim) {
    add(name, 2 * dim, 0);
    r_.elementwise_flops += cost::kLayerNormFlops * elems;
  }
  void elementwise(std::uint64_t flops) { r_.elementwise_flops += flops; }

 private:
  CostReport& r_;
};

}  // namespace detail

/// Per-layer costs for one forward pass at `batch`, rows in parameter
/// enumeration order plus parameter-free attention rows.
inline CostReport cost_report(const ModelConfig& cfg, std::size_t batch = 1) {
  cfg.validate();
  CostReport rep;
  rep.label = to_string(cfg.attention) + "/" + to_string(cfg.rrcv);
  rep.batch = batch;
  detail::CostBuilder c(rep);
  const std::uint64_t B = batch, D = cfg.embed_dim, T = cfg.tokens(), N = cfg.patch_tokens();
  const std::uint64_t p = cfg.patch_size, g = cfg.grid(), H = cfg.heads, R = cfg.mlp_ratio;

  c.linear("patch_embed.proj", B * N, cfg.in_channels * p * p, D);
  c.add("pos_embed", T * D, 0);
  c.elementwise(B * T * D);
  if (cfg.use_class_token) c.add("cls_token", D, 0);

  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string pre = "blocks." + std::to_string(i) + ".";
    c.layer_norm(pre + "norm1", B * T * D, D);
    if (cfg.uses_fusion()) {
      for (auto k : cfg.kernel_scales) c.conv(pre + "attn.fusion.branch" + std::to_string(k), B, D, D, k, D, g);
      c.conv(pre + "attn.fusion.reduce", B, cfg.kernel_scales.size() * D, D, 1, 1, g);
    }
    c.linear(pre + "attn.q_proj", B * T, D, D);
    c.linear(pre + "attn.k_proj", B * T, D, D);
    c.linear(pre + "attn.v_proj", B * T, D, D);
    std::uint64_t keys = T;
    if (cfg.uses_token_reduction()) {
      keys = cfg.reduced_tokens();
      // [T', T] map applied to each of the D head columns
      c.add(pre + "attn.k_tokens", cost::linear_params(T, keys), B * keys * T * D);
      c.add(pre + "attn.v_tokens", cost::linear_params(T, keys), B * keys * T * D);
      c.elementwise(2 * B * keys * D);
    }
    c.add(pre + "attn.scores", 0, B * T * keys * D);  // per head T x T' x d_k
    c.elementwise(B * H * T * keys * (1 + cost::kSoftmaxFlops));
    c.add(pre + "attn.context", 0, B * T * keys * D);
    c.linear(pre + "attn.out_proj", B * T, D, D);
    c.elementwise(B * T * D);  // residual
    c.layer_norm(pre + "norm2", B * T * D, D);
    if (cfg.rrcv != RrcvVariant::none) {
      const std::uint64_t C = cfg.rrcv_width(), side = g * p;
      c.linear(pre + "rrcv.reverse", B * N, D, C * p * p);
      if (cfg.rrcv == RrcvVariant::dwconv) {
        for (int j = 0; j < 2; ++j) {
          c.conv(pre + "rrcv.body" + std::to_string(2 * j), B, C, C, 3, C, side);
          c.conv(pre + "rrcv.body" + std::to_string(2 * j + 1), B, C, C, 1, 1, side);
        }
      } else {
        c.conv(pre + "rrcv.body0", B, C, C, 3, 1, side);
        c.conv(pre + "rrcv.body1", B, C, C, 3, 1, side);
      }
      c.elementwise(B * C * side * side * (cost::kGeluFlops + (cfg.rrcv == RrcvVariant::resnet ? 1 : 0)));
      c.conv(pre + "rrcv.pconv", B, C, C, 1, 1, side);
      c.linear(pre + "rrcv.embed", B * N, C * p * p, D);
    }
    c.linear(pre + "mlp.fc1", B * T, D, R * D);
    c.elementwise(B * T * R * D * cost::kGeluFlops);
    c.linear(pre + "mlp.fc2", B * T, R * D, D);
    c.elementwise(B * T * D);
  }
  c.layer_norm("norm", B * T * D, D);
  c.linear("head", B, D, cfg.num_classes);
  return rep;
}

inline CostReport count_params(const ModelConfig& cfg) { return cost_report(cfg, 1); }
inline CostReport count_flops(const ModelConfig& cfg, std::size_t batch = 1) { return cost_report(cfg, batch); }

struct AttentionComparison {
  CostReport baseline;   // mhsa, no RRCV, no reduction
  CostReport candidate;  // lmf_mhsa at the configured r and scales
  double param_reduction_pct = 0;
  double flop_reduction_pct = 0;
  /// Q.K'^T plus weights.V' only.
  double score_flop_reduction_pct = 0;
  std::uint64_t fusion_macs = 0;
  std::uint64_t token_projection_macs = 0;
};

inline double reduction_pct(double before, double after) { return before == 0 ? 0.0 : 100.0 * (before - after) / before; }

/// Full model with mhsa, rrcv=none, r=1 versus the same config with lmf_mhsa.
/// Ratios are the same under either MAC or FLOP convention.
inline AttentionComparison compare_attention_costs(const ModelConfig& cfg, std::size_t batch = 1) {
  ModelConfig base = cfg;
  base.attention = AttentionKind::mhsa;
  base.rrcv = RrcvVariant::none;
  base.kv_reduction = 1;
  ModelConfig cand = cfg;
  cand.attention = AttentionKind::lmf_mhsa;

  AttentionComparison out;
  out.baseline = cost_report(base, batch);
  out.candidate = cost_report(cand, batch);
  out.param_reduction_pct = reduction_pct(static_cast<double>(out.baseline.total_params()),
                                          static_cast<double>(out.candidate.total_params()));
  out.flop_reduction_pct = reduction_pct(static_cast<double>(out.baseline.total_macs()),
                                         static_cast<double>(out.candidate.total_macs()));
  const std::vector<std::string> score{".attn.scores", ".attn.context"};
  out.score_flop_reduction_pct = reduction_pct(static_cast<double>(out.baseline.macs_matching(score)),
                                               static_cast<double>(out.candidate.macs_matching(score)));
  for (const auto& r : out.candidate.rows) {
    if (r.layer.find(".attn.fusion.") != std::string::npos) out.fusion_macs += r.macs;
    if (r.layer.find(".attn.k_tokens") != std::string::npos || r.layer.find(".attn.v_tokens") != std::string::npos)
      out.token_projection_macs += r.macs;
  }
  return out;
}

enum class TableFormat { aligned_text, csv };

inline TableFormat parse_table_format(const std::string& s) {
  if (s == "text" || s == "aligned-text" || s == "table") return TableFormat::aligned_text;
  if (s == "csv") return TableFormat::csv;
  throw ConfigError("unknown table format '" + s + "' (expected text or csv)");
}

/// CSV columns: layer,params,macs,flops. Layer names are prefixed with the
/// report label; each report ends with a "<label>:total" row.
inline std::string emit_table(const std::vector<CostReport>& reports, TableFormat fmt) {
  std::ostringstream os;
  if (fmt == TableFormat::csv) {
    os << "layer,params,macs,flops\n";
    for (const auto& r : reports) {
      for (const auto& row : r.rows) os << r.label << ':' << row.layer << ',' << row.params << ',' << row.macs << ',' << row.flops() << '\n';
      os << r.label << ":total," << r.total_params() << ',' << r.total_macs() << ',' << r.total_flops() << '\n';
    }
    return os.str();
  }
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    if (i) os << '\n';
    std::size_t w = 5;
    for (const auto& row : r.rows) w = std::max(w, row.layer.size());
    os << "# " << r.label << " (batch " << r.batch << ", " << r.convention << ")\n";
    os << std::left << std::setw(static_cast<int>(w)) << "layer" << std::right << std::setw(14) << "params"
       << std::setw(18) << "macs" << std::setw(18) << "flops" << '\n';
    for (const auto& row : r.rows)
      os << std::left << std::setw(static_cast<int>(w)) << row.layer << std::right << std::setw(14) << row.params
         << std::setw(18) << row.macs << std::setw(18) << row.flops() << '\n';
    os << std::left << std::setw(static_cast<int>(w)) << "total" << std::right << std::setw(14) << r.total_params()
       << std::setw(18) << r.total_macs() << std::setw(18) << r.total_flops() << '\n';
    os << "elementwise flops (not in total): " << r.elementwise_flops << '\n';
  }
  return os.str();
}

inline std::string emit_table(const std::vector<CostReport>& reports, const std::string& fmt) {
  return emit_table(reports, parse_table_format(fmt));
}

/// Human summary of a comparison: totals under both conventions, the three
/// reduction percentages, and a same-RRCV reference line isolating the
/// attention change.
inline std::string format_reductions(const ModelConfig& cfg, std::size_t batch = 1) {
  const auto cmp = compare_attention_costs(cfg, batch);
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "params:      " << cmp.baseline.total_params() << " -> " << cmp.candidate.total_params() << "  reduction "
     << cmp.param_reduction_pct << "%\n";
  os << "MACs:        " << cmp.baseline.total_macs() << " -> " << cmp.candidate.total_macs() << "\n";
  os << "FLOPs:       " << cmp.baseline.total_flops() << " -> " << cmp.candidate.total_flops()
     << "  (1 MAC = 2 FLOPs)  reduction " << cmp.flop_reduction_pct << "%\n";
  const std::vector<std::string> score{".attn.scores", ".attn.context"};
  os << "attention score MACs: " << cmp.baseline.macs_matching(score) << " -> " << cmp.candidate.macs_matching(score)
     << ", FLOPs: " << 2 * cmp.baseline.macs_matching(score) << " -> " << 2 * cmp.candidate.macs_matching(score)
     << "  reduction " << cmp.score_flop_reduction_pct << "%\n";
  os << "added by lmf_mhsa: fusion MACs " << cmp.fusion_macs << ", token projection MACs "
     << cmp.token_projection_macs << "\n";
  auto same = cfg;
  same.attention = AttentionKind::mhsa;
  same.kv_reduction = 1;
  const auto ref = cost_report(same, batch);
  os << "same-RRCV reference (mhsa, rrcv " << to_string(cfg.rrcv) << "): param reduction "
     << reduction_pct(static_cast<double>(ref.total_params()), static_cast<double>(cmp.candidate.total_params()))
     << "%, FLOP reduction "
     << reduction_pct(static_cast<double>(ref.total_macs()), static_cast<double>(cmp.candidate.total_macs())) << "%\n";
  return os.str();
}

}  // namespace cta
