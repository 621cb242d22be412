#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "cta/config.hpp"
#include "cta/cost.hpp"
#include "cta/train.hpp"

namespace cta {

struct AblationCell {
  std::string id;
  RunConfig cfg;
};

inline constexpr const char* kAblationHeader = "cell,attention,rrcv,scales,batch,depth,heads,top1,params,flops,seconds";

struct AblationRow {
  std::string cell;
  AttentionKind attention = AttentionKind::lmf_mhsa;
  RrcvVariant rrcv = RrcvVariant::none;
  std::vector<std::size_t> scales;
  std::size_t batch = 0, depth = 0, heads = 0;
  double top1 = 0;
  std::uint64_t params = 0, flops = 0;
  double seconds = 0;

  /// Scales use ';' inside the field so the row stays comma-separated.
  std::string csv() const {
    std::ostringstream os;
    os << cell << ',' << to_string(attention) << ',' << to_string(rrcv) << ',' << scales_to_string(scales, ';') << ','
       << batch << ',' << depth << ',' << heads << ',' << std::setprecision(17) << top1 << ',' << params << ','
       << flops << ',' << std::setprecision(6) << seconds;
    return os.str();
  }

  /// Equal up to wall time.
  bool same_results(const AblationRow& o) const {
    return cell == o.cell && attention == o.attention && rrcv == o.rrcv && scales == o.scales && batch == o.batch &&
           depth == o.depth && heads == o.heads && top1 == o.top1 && params == o.params && flops == o.flops;
  }
};

/// Ladder cells first, then the cross product with every listed axis. A
/// ladder owns its axis, so listing the same axis again is rejected.
inline std::vector<AblationCell> ablation_cells(const RunConfig& base) {
  base.validate();
  const auto& g = base.grid;
  if (g.empty()) throw ConfigError("empty ablation grid: set grid.ladder or at least one grid.* axis");

  std::vector<RunConfig> cells{base};
  if (g.ladder == "components") {
    if (!g.attention.empty() || !g.rrcv.empty())
      throw ConfigError("grid.ladder=components already varies attention and rrcv");
    const auto rrcv = base.model.rrcv == RrcvVariant::none ? RrcvVariant::resnet : base.model.rrcv;
    cells.clear();
    for (auto [attn, r] : {std::pair{AttentionKind::mhsa, RrcvVariant::none}, std::pair{AttentionKind::mhsa, rrcv},
                           std::pair{AttentionKind::lmf_mhsa, rrcv}}) {
      auto c = base;
      c.model.attention = attn;
      c.model.rrcv = r;
      cells.push_back(c);
    }
  } else if (g.ladder == "variants") {
    if (!g.rrcv.empty()) throw ConfigError("grid.ladder=variants already varies rrcv");
    cells.clear();
    for (auto r : {RrcvVariant::cnn, RrcvVariant::dwconv, RrcvVariant::resnet}) {
      auto c = base;
      c.model.rrcv = r;
      cells.push_back(c);
    }
  } else if (g.ladder == "scales") {
    if (!g.scales.empty()) throw ConfigError("grid.ladder=scales already varies kernel scales");
    cells.clear();
    for (const auto& s : std::vector<std::vector<std::size_t>>{{1}, {3}, {5}, {1, 3, 5}}) {
      auto c = base;
      c.model.attention = AttentionKind::lmf_mhsa;
      c.model.kernel_scales = s;
      cells.push_back(c);
    }
  }

  auto cross = [&cells](const auto& values, auto apply) {
    if (values.empty()) return;
    std::vector<RunConfig> next;
    for (const auto& c : cells)
      for (const auto& v : values) {
        auto n = c;
        apply(n, v);
        next.push_back(n);
      }
    cells = std::move(next);
  };
  cross(g.attention, [](RunConfig& c, AttentionKind a) { c.model.attention = a; });
  cross(g.rrcv, [](RunConfig& c, RrcvVariant r) { c.model.rrcv = r; });
  cross(g.scales, [](RunConfig& c, const std::vector<std::size_t>& s) { c.model.kernel_scales = s; });
  cross(g.batch, [](RunConfig& c, std::size_t b) { c.train.batch_size = b; });
  cross(g.depth, [](RunConfig& c, std::size_t d) { c.model.depth = d; });
  cross(g.heads, [](RunConfig& c, std::size_t h) { c.model.heads = h; });

  std::vector<AblationCell> out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    auto& c = cells[i];
    c.grid = GridSpec{};
    try {
      c.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("ablation cell " + std::to_string(i) + ": " + e.what());
    }
    char id[32];
    std::snprintf(id, sizeof id, "c%03zu", i);
    out.push_back({id, c});
  }
  return out;
}

/// Trains one cell from scratch with the shared seed and reports its final
/// validation top-1.
template <typename T>
AblationRow run_ablation_cell(const AblationCell& cell, const Dataset& train, const Dataset& val,
                              std::vector<MetricsRow>* history = nullptr) {
  const auto& c = cell.cfg;
  const auto t0 = std::chrono::steady_clock::now();
  auto net = model_init<T>(c.model, c.train.seed);
  OptimizerState<T> st;
  const auto rows = fit(net, train, val, st, c.train, 0, c.data.augment);
  if (history) *history = rows;
  AblationRow r;
  r.cell = cell.id;
  r.attention = c.model.attention;
  r.rrcv = c.model.rrcv;
  r.scales = c.model.attention == AttentionKind::lmf_mhsa ? c.model.kernel_scales : std::vector<std::size_t>{};
  r.batch = c.train.batch_size;
  r.depth = c.model.depth;
  r.heads = c.model.heads;
  r.top1 = rows.back().val_top1;
  r.params = count_params(c.model).total_params();
  r.flops = count_flops(c.model, 1).total_flops();
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline AblationRow parse_ablation_row(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> f;
  std::string item;
  while (std::getline(is, item, ',')) f.push_back(item);
  if (f.size() != 11) throw FormatError("ablation row needs 11 fields, got " + std::to_string(f.size()) + ": '" + line + "'");
  AblationRow r;
  try {
    r.cell = f[0];
    r.attention = parse_attention(f[1]);
    r.rrcv = parse_rrcv(f[2]);
    std::string s = f[3];
    std::replace(s.begin(), s.end(), ';', ',');
    r.scales = parse_scales(s);
    r.batch = std::stoul(f[4]);
    r.depth = std::stoul(f[5]);
    r.heads = std::stoul(f[6]);
    r.top1 = std::stod(f[7]);
    r.params = std::stoull(f[8]);
    r.flops = std::stoull(f[9]);
    r.seconds = std::stod(f[10]);
  } catch (const std::exception& e) {
    throw FormatError("malformed ablation row '" + line + "': " + e.what());
  }
  return r;
}

}  // namespace cta
