#pragma once

#include <algorithm>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "heightbins/config.hpp"
#include "heightbins/metrics.hpp"
#include "heightbins/model.hpp"
#include "heightbins/training.hpp"

namespace heightbins {

struct AblationSetting {
  std::string label;
  std::function<void(RunConfig&)> apply;
};

enum class AblationGrid { dc, htc, levels };

inline std::optional<AblationGrid> parse_grid(const std::string& s) {
  if (s == "dc") return AblationGrid::dc;
  if (s == "htc") return AblationGrid::htc;
  if (s == "levels") return AblationGrid::levels;
  return std::nullopt;
}

inline AblationSetting dc_setting(Family fg, Family bg) {
  return {to_string(fg) + "/" + to_string(bg), [fg, bg](RunConfig& c) {
            c.loss.fg_family = fg;
            c.loss.bg_family = bg;
          }};
}

inline AblationSetting htc_setting(bool on) {
  return {on ? "w/ HTC" : "w/o HTC", [on](RunConfig& c) { c.model.head.head_tail_cut = on; }};
}

inline AblationSetting levels_setting(std::vector<int> levels) {
  std::string label;
  for (int l : levels) label += (label.empty() ? "F" : ",F") + std::to_string(l);
  return {label, [levels](RunConfig& c) {
            c.model.levels = levels;
            c.loss.lambdas.clear();
            for (int l : levels) c.loss.lambdas.push_back(default_lambda(l));
          }};
}

/// Rows of each grid. The dc grid starts from none/none, then every
/// foreground family with every background choice.
inline std::vector<AblationSetting> ablation_settings(AblationGrid grid) {
  std::vector<AblationSetting> out;
  switch (grid) {
    case AblationGrid::dc: {
      out.push_back(dc_setting(Family::none, Family::none));
      const Family fams[] = {Family::uniform, Family::gaussian, Family::laplace, Family::delta};
      for (Family fg : fams) {
        out.push_back(dc_setting(fg, Family::none));
        for (Family bg : fams) out.push_back(dc_setting(fg, bg));
      }
      break;
    }
    case AblationGrid::htc:
      out.push_back(htc_setting(false));
      out.push_back(htc_setting(true));
      break;
    case AblationGrid::levels:
      for (auto l : std::vector<std::vector<int>>{{5}, {2, 3, 5}, {2, 4, 5}, {3, 4, 5}, {2, 3, 4, 5}}) {
        out.push_back(levels_setting(l));
      }
      break;
  }
  return out;
}

struct AblationRow {
  std::string label;
  std::vector<std::uint64_t> seeds;
  std::vector<EvalReport> reports;  // one per seed, on the evaluation split
  EvalReport median;                // per-metric median over seeds
  std::optional<std::size_t> improvements;
};

inline std::optional<double> median_of(const std::vector<EvalReport>& rs, std::optional<double> EvalReport::*field) {
  std::vector<double> v;
  for (const auto& r : rs)
    if (r.*field) v.push_back(*(r.*field));
  if (v.empty()) return std::nullopt;
  return median(std::move(v));
}

inline EvalReport median_report(const std::vector<EvalReport>& rs) {
  EvalReport m;
  m.rmse = median_of(rs, &EvalReport::rmse);
  m.rmse_m = median_of(rs, &EvalReport::rmse_m);
  m.rmse_nm = median_of(rs, &EvalReport::rmse_nm);
  m.rmse_b = median_of(rs, &EvalReport::rmse_b);
  m.rmse_bg = median_of(rs, &EvalReport::rmse_bg);
  m.htc_accuracy = median_of(rs, &EvalReport::htc_accuracy);
  if (!rs.empty()) {
    m.building_count = rs.front().building_count;
    m.pixel_count = rs.front().pixel_count;
  }
  return m;
}

struct AblationTable {
  std::string grid;
  std::vector<AblationRow> rows;

  std::string to_text() const {
    std::ostringstream os;
    const bool with_impr = std::any_of(rows.begin(), rows.end(), [](const auto& r) { return r.improvements.has_value(); });
    os << std::left << std::setw(20) << "setting";
    for (const char* h : {"accuracy", "rmse", "rmse_m", "rmse_nm", "rmse_b", "rmse_bg"}) os << std::right << std::setw(10) << h;
    if (with_impr) os << std::setw(14) << "improvements";
    os << '\n';
    auto cell = [&](const std::optional<double>& v) {
      if (v) os << std::setw(10) << std::fixed << std::setprecision(4) << *v;
      else os << std::setw(10) << "-";
    };
    for (const auto& r : rows) {
      os << std::left << std::setw(20) << r.label << std::right;
      cell(r.median.htc_accuracy);
      cell(r.median.rmse);
      cell(r.median.rmse_m);
      cell(r.median.rmse_nm);
      cell(r.median.rmse_b);
      cell(r.median.rmse_bg);
      if (with_impr) {
        if (r.improvements) os << std::setw(14) << *r.improvements; else os << std::setw(14) << "-";
      }
      os << '\n';
    }
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rows) {
      nlohmann::json per = nlohmann::json::array();
      for (std::size_t i = 0; i < r.reports.size(); ++i) {
        nlohmann::json j = r.reports[i].to_json();
        j.erase("building_errors");
        j["seed"] = r.seeds[i];
        per.push_back(j);
      }
      nlohmann::json med = r.median.to_json();
      med.erase("building_errors");
      nlohmann::json row = {{"setting", r.label}, {"median", med}, {"runs", per}};
      if (r.improvements) row["improvements"] = *r.improvements;
      arr.push_back(row);
    }
    return {{"grid", grid}, {"rows", arr}};
  }
};

/// Number of metrics on which `row` beats `baseline` (lower RMSE).
inline std::size_t count_improvements(const EvalReport& row, const EvalReport& baseline) {
  std::size_t n = 0;
  for (auto f : {&EvalReport::rmse, &EvalReport::rmse_m, &EvalReport::rmse_nm, &EvalReport::rmse_b, &EvalReport::rmse_bg}) {
    if (row.*f && baseline.*f && *(row.*f) < *(baseline.*f)) ++n;
  }
  return n;
}

struct AblationData {
  const std::vector<Sample>* train = nullptr;
  const std::vector<Sample>* val = nullptr;
  const std::vector<Sample>* eval = nullptr;
};

/// Trains every setting once per seed from the same base configuration and
/// evaluates the best-validation weights on `data.eval`.
inline AblationTable run_ablation(const RunConfig& base, const std::string& grid_name,
                                  const std::vector<AblationSetting>& settings, const std::vector<std::uint64_t>& seeds,
                                  const AblationData& data,
                                  const std::function<void(const AblationRow&)>& on_row = {}) {
  AblationTable table{grid_name, {}};
  for (const auto& s : settings) {
    AblationRow row{s.label, seeds, {}, {}, std::nullopt};
    for (std::uint64_t seed : seeds) {
      RunConfig cfg = base;
      s.apply(cfg);
      cfg.seed = seed;
      const auto issues = cfg.problems();
      if (!issues.empty()) throw ConfigError("ablation " + s.label + ": " + issues.front());
      HeightNet net = HeightNet::create(cfg.model, seed);
      TrainOptions opt;
      opt.write_files = false;
      train(net, cfg, *data.train, *data.val, opt);
      row.reports.push_back(evaluate(net, *data.eval, cfg.batch_size, cfg.connectivity));
    }
    row.median = median_report(row.reports);
    table.rows.push_back(std::move(row));
    if (on_row) on_row(table.rows.back());
  }
  if (grid_name == "dc" && !table.rows.empty()) {
    const EvalReport& baseline = table.rows.front().median;
    for (std::size_t i = 1; i < table.rows.size(); ++i) {
      table.rows[i].improvements = count_improvements(table.rows[i].median, baseline);
    }
  }
  return table;
}

}  // namespace heightbins
