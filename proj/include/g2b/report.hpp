#pragma once

#include <algorithm>
#include <cstdio>
#include <map>

#include "g2b/experiment.hpp"

namespace g2b {

namespace detail {

inline std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}
inline std::string pct2(double v01) { return fmt("%.2f", v01 * 100.0); }
inline std::string f4(double v) { return fmt("%.4f", v); }
inline std::string signed2(double delta_pts) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%+.2f", delta_pts);
  return buf;
}

// Everything that must match for two runs to be comparable in one group:
// the stream definition and the data behind it.
inline std::string stream_key(const ExperimentConfig& c) {
  return cat(c.dataset, '|', c.dataset_root, '|', c.classes, '|',
             c.train_per_class, '|', c.test_per_class, '|', c.dataset_seed,
             '|', c.classes_per_round);
}

// Pairing key for vanilla/G2B deltas: same run in every respect but the
// side branch.
inline std::string pair_key(const ExperimentConfig& c) {
  return cat(stream_key(c), '|', c.backbone, '|', c.strategy, '|',
             c.stream_seed, '|', c.init_seed, '|', c.lr, '|', c.epochs, '|',
             c.batch_size);
}

inline std::string run_sort_key(const RunRecord& r) {
  return cat(r.config.strategy, '|', r.config.g2b ? 1 : 0, '|',
             r.config.backbone, '|', r.config.stream_seed, '|',
             r.config.init_seed, '|', r.config.output_dir);
}

inline std::string forgetting_cell(const RunRecord& r) {
  return r.rounds.size() >= 2 ? f4(r.forgetting()) : std::string("");
}

}  // namespace detail

// Machine-readable results table. Header is fixed:
//   method,g2b,avg,last,f_k,params_m
// avg/last in percent (2 decimals), f_k as a fraction (4 decimals, empty for
// single-round runs), params in millions.
inline std::string results_table(std::vector<RunRecord> records) {
  std::sort(records.begin(), records.end(),
            [](const RunRecord& a, const RunRecord& b) {
              return detail::run_sort_key(a) < detail::run_sort_key(b);
            });
  std::string out = "method,g2b,avg,last,f_k,params_m\n";
  for (const auto& r : records) {
    out += cat(r.config.strategy, ',', r.config.g2b ? 1 : 0, ',',
               detail::pct2(r.avg()), ',', detail::pct2(r.last()), ',',
               detail::forgetting_cell(r), ',',
               detail::fmt("%.4f", r.params_millions), '\n');
  }
  return out;
}

// Side-by-side vanilla/G2B table with signed two-decimal improvement
// columns (percentage points for avg/last, raw difference for f).
inline std::string delta_table(const std::vector<RunRecord>& records) {
  std::map<std::string, const RunRecord*> vanilla, wrapped;
  for (const auto& r : records) {
    auto key = detail::pair_key(r.config);
    (r.config.g2b ? wrapped : vanilla)[key] = &r;
  }
  std::string out =
      "method,backbone,stream_seed,avg_vanilla,avg_g2b,avg_delta,"
      "last_vanilla,last_g2b,last_delta,f_vanilla,f_g2b,f_delta\n";
  for (const auto& [key, v] : vanilla) {
    auto it = wrapped.find(key);
    if (it == wrapped.end()) continue;
    const RunRecord* g = it->second;
    out += cat(v->config.strategy, ',', v->config.backbone, ',',
               v->config.stream_seed, ',');
    out += cat(detail::pct2(v->avg()), ',', detail::pct2(g->avg()), ',',
               detail::signed2((g->avg() - v->avg()) * 100.0), ',');
    out += cat(detail::pct2(v->last()), ',', detail::pct2(g->last()), ',',
               detail::signed2((g->last() - v->last()) * 100.0), ',');
    if (v->rounds.size() >= 2 && g->rounds.size() >= 2)
      out += cat(detail::f4(v->forgetting()), ',', detail::f4(g->forgetting()),
                 ',', detail::signed2(g->forgetting() - v->forgetting()));
    else
      out += ",,";
    out += '\n';
  }
  return out;
}

// Accuracy-per-round line plot as a standalone SVG.
inline std::string accuracy_plot_svg(const std::vector<RunRecord>& records,
                                     const std::string& title) {
  const int W = 640, H = 400, ml = 56, mr = 180, mt = 40, mb = 44;
  const int pw = W - ml - mr, ph = H - mt - mb;
  int max_rounds = 1;
  for (const auto& r : records)
    max_rounds = std::max(max_rounds, static_cast<int>(r.rounds.size()));
  auto xpos = [&](int round) {
    return max_rounds == 1
               ? ml + pw / 2.0
               : ml + pw * (static_cast<double>(round) / (max_rounds - 1));
  };
  auto ypos = [&](double acc01) { return mt + ph * (1.0 - acc01); };

  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                  "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
                                  "#bcbd22", "#17becf"};
  std::string svg = cat(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"", W, "\" height=\"",
      H, "\" viewBox=\"0 0 ", W, " ", H, "\">\n",
      "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
      "<text x=\"", ml, "\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\">",
      title, "</text>\n");
  for (int g = 0; g <= 5; ++g) {
    const double acc = g / 5.0;
    svg += cat("<line x1=\"", ml, "\" y1=\"", ypos(acc), "\" x2=\"", ml + pw,
               "\" y2=\"", ypos(acc),
               "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n");
    svg += cat("<text x=\"", ml - 8, "\" y=\"", ypos(acc) + 4,
               "\" text-anchor=\"end\" font-family=\"sans-serif\" "
               "font-size=\"11\">",
               detail::fmt("%.0f", acc * 100), "</text>\n");
  }
  for (int r = 0; r < max_rounds; ++r)
    svg += cat("<text x=\"", xpos(r), "\" y=\"", mt + ph + 18,
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
               "font-size=\"11\">",
               r + 1, "</text>\n");
  svg += cat("<text x=\"", ml + pw / 2, "\" y=\"", H - 8,
             "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
             "font-size=\"12\">round</text>\n");
  svg += cat("<line x1=\"", ml, "\" y1=\"", mt, "\" x2=\"", ml, "\" y2=\"",
             mt + ph, "\" stroke=\"black\"/>\n<line x1=\"", ml, "\" y1=\"",
             mt + ph, "\" x2=\"", ml + pw, "\" y2=\"", mt + ph,
             "\" stroke=\"black\"/>\n");

  int color = 0, legend_y = mt + 8;
  for (const auto& rec : records) {
    const char* c = palette[color % 10];
    std::string points;
    for (size_t r = 0; r < rec.rounds.size(); ++r)
      points += cat(xpos(static_cast<int>(r)), ',',
                    ypos(rec.rounds[r].overall.value()), ' ');
    svg += cat("<polyline fill=\"none\" stroke=\"", c,
               "\" stroke-width=\"2\" points=\"", points, "\"/>\n");
    const std::string label =
        cat(rec.config.strategy, rec.config.g2b ? "+g2b" : "", " s",
            rec.config.stream_seed);
    svg += cat("<rect x=\"", ml + pw + 12, "\" y=\"", legend_y - 9,
               "\" width=\"14\" height=\"4\" fill=\"", c, "\"/>\n");
    svg += cat("<text x=\"", ml + pw + 32, "\" y=\"", legend_y,
               "\" font-family=\"sans-serif\" font-size=\"11\">", label,
               "</text>\n");
    legend_y += 18;
    ++color;
  }
  svg += "</svg>\n";
  return svg;
}

// Side-block ablation table: one row per run, annotated with the enabled
// prefix, parameter count and headline metrics.
inline std::string ablation_table(std::vector<RunRecord> records) {
  std::sort(records.begin(), records.end(),
            [](const RunRecord& a, const RunRecord& b) {
              auto count = [](const RunRecord& r) {
                int n = 0;
                for (bool b2 : r.config.side_blocks) n += b2 ? 1 : 0;
                return r.config.g2b ? (r.config.side_blocks.empty()
                                           ? 1 << 20
                                           : n)
                                    : -1;
              };
              return count(a) < count(b);
            });
  std::string out = "side_blocks,params_m,avg,last,f_k\n";
  for (const auto& r : records) {
    std::string blocks = "-";
    if (r.config.g2b) {
      blocks.clear();
      for (size_t i = 0; i < r.config.side_blocks.size(); ++i)
        if (r.config.side_blocks[i])
          blocks += cat(blocks.empty() ? "" : "+", i + 1);
      if (blocks.empty()) blocks = "-";
    }
    out += cat(blocks, ',', detail::fmt("%.4f", r.params_millions), ',',
               detail::pct2(r.avg()), ',', detail::pct2(r.last()), ',',
               detail::forgetting_cell(r), '\n');
  }
  return out;
}

struct ReportFiles {
  std::vector<std::string> written;
};

// Emits the results table, the vanilla/G2B delta table, and one
// accuracy-per-round plot per (dataset, rounds, backbone) group. Mixing
// incompatible stream configs inside one group is an error.
inline ReportFiles emit_report(const std::vector<RunRecord>& records,
                               const std::string& out_dir) {
  if (records.empty()) throw ConfigError("emit_report: no run records");
  std::filesystem::create_directories(out_dir);
  ReportFiles files;

  auto write = [&](const std::string& name, const std::string& content) {
    const auto path = (std::filesystem::path(out_dir) / name).string();
    atomic_write_text(path, content);
    files.written.push_back(path);
  };

  write("results.csv", results_table(records));
  const auto deltas = delta_table(records);
  if (std::count(deltas.begin(), deltas.end(), '\n') > 1)
    write("deltas.csv", deltas);

  std::map<std::string, std::vector<RunRecord>> groups;
  std::map<std::string, std::string> group_stream;
  for (const auto& r : records) {
    const std::string group = cat(r.config.dataset, '_', r.rounds.size(), "r_",
                                  r.config.backbone);
    const std::string stream = detail::stream_key(r.config);
    auto [it, fresh] = group_stream.try_emplace(group, stream);
    if (!fresh && it->second != stream)
      throw ConfigError(cat("emit_report: group ", group,
                            " mixes incompatible stream configs"));
    groups[group].push_back(r);
  }
  for (auto& [group, runs] : groups) {
    std::sort(runs.begin(), runs.end(),
              [](const RunRecord& a, const RunRecord& b) {
                return detail::run_sort_key(a) < detail::run_sort_key(b);
              });
    write(group + ".svg", accuracy_plot_svg(runs, group));
  }
  return files;
}

}  // namespace g2b
