#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "heightbins/errors.hpp"

namespace heightbins {

/// Root mean square error over pixels where `mask` is nonzero; an empty
/// mask (or no mask pixels set) yields no value.
inline std::optional<double> rmse_masked(std::span<const double> pred, std::span<const double> gt,
                                         std::span<const std::uint8_t> mask) {
  if (pred.size() != gt.size() || mask.size() != gt.size()) {
    throw ContractViolation("rmse_masked: prediction, ground truth and mask lengths differ (" +
                            std::to_string(pred.size()) + ", " + std::to_string(gt.size()) + ", " +
                            std::to_string(mask.size()) + ")");
  }
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!mask[i]) continue;
    const double e = pred[i] - gt[i];
    s += e * e;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return std::sqrt(s / static_cast<double>(n));
}

inline std::optional<double> rmse(std::span<const double> pred, std::span<const double> gt) {
  const std::vector<std::uint8_t> all(gt.size(), 1);
  return rmse_masked(pred, gt, all);
}

enum class Connectivity { four = 4, eight = 8 };

struct Labeling {
  std::size_t width = 0, height = 0;
  std::vector<std::int32_t> labels;  // 0 = background, components numbered from 1
  std::size_t count = 0;
};

/// Flood-fill labeling; components are numbered in row-major order of their
/// first pixel.
inline Labeling connected_components(std::span<const std::uint8_t> mask, std::size_t width, std::size_t height,
                                     Connectivity conn = Connectivity::four) {
  if (mask.size() != width * height) {
    throw ContractViolation("connected_components: mask of " + std::to_string(mask.size()) + " pixels for " +
                            std::to_string(width) + "x" + std::to_string(height));
  }
  Labeling out{width, height, std::vector<std::int32_t>(mask.size(), 0), 0};
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || out.labels[start] != 0) continue;
    const auto label = static_cast<std::int32_t>(++out.count);
    out.labels[start] = label;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const long y = static_cast<long>(p / width), x = static_cast<long>(p % width);
      for (long dy = -1; dy <= 1; ++dy) {
        for (long dx = -1; dx <= 1; ++dx) {
          if (dx == 0 && dy == 0) continue;
          if (conn == Connectivity::four && dx != 0 && dy != 0) continue;
          const long ny = y + dy, nx = x + dx;
          if (ny < 0 || nx < 0 || ny >= static_cast<long>(height) || nx >= static_cast<long>(width)) continue;
          const std::size_t q = static_cast<std::size_t>(ny) * width + static_cast<std::size_t>(nx);
          if (mask[q] && out.labels[q] == 0) {
            out.labels[q] = label;
            stack.push_back(q);
          }
        }
      }
    }
  }
  return out;
}

/// Median; an even count averages the middle two.
inline double median(std::vector<double> v) {
  if (v.empty()) throw ContractViolation("median: empty sample");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(mid), v.end());
  const double upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  const double lower = *std::max_element(v.begin(), v.begin() + static_cast<long>(mid));
  return 0.5 * (lower + upper);
}

/// Per-building (pred_median - gt_median), in component label order.
inline std::vector<double> building_errors(std::span<const double> pred, std::span<const double> gt,
                                           const Labeling& lab) {
  if (pred.size() != gt.size() || lab.labels.size() != gt.size()) {
    throw ContractViolation("rmse_buildingwise: prediction, ground truth and footprint lengths differ");
  }
  std::vector<std::vector<double>> p(lab.count), g(lab.count);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (lab.labels[i] == 0) continue;
    const auto k = static_cast<std::size_t>(lab.labels[i] - 1);
    p[k].push_back(pred[i]);
    g[k].push_back(gt[i]);
  }
  std::vector<double> err(lab.count);
  for (std::size_t k = 0; k < lab.count; ++k) err[k] = median(std::move(p[k])) - median(std::move(g[k]));
  return err;
}

inline std::optional<double> rmse_buildingwise(std::span<const double> pred, std::span<const double> gt,
                                               std::span<const std::uint8_t> footprint, std::size_t width,
                                               std::size_t height, Connectivity conn = Connectivity::four) {
  const auto err = building_errors(pred, gt, connected_components(footprint, width, height, conn));
  if (err.empty()) return std::nullopt;
  double s = 0.0;
  for (double e : err) s += e * e;
  return std::sqrt(s / static_cast<double>(err.size()));
}

/// Fraction of pixels where (p_fg > 0.5) agrees with (gt > threshold).
inline double htc_accuracy(std::span<const double> p_fg, std::span<const double> gt, double threshold = 1.0) {
  if (p_fg.size() != gt.size()) throw ContractViolation("htc_accuracy: length mismatch");
  if (gt.empty()) throw ContractViolation("htc_accuracy: no pixels");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) hits += (p_fg[i] > 0.5) == (gt[i] > threshold);
  return static_cast<double>(hits) / static_cast<double>(gt.size());
}

/// Metric summary. Absent optionals mark undefined metrics (empty masks).
struct EvalReport {
  std::optional<double> rmse, rmse_m, rmse_nm, rmse_b, rmse_bg, htc_accuracy;
  std::size_t building_count = 0;
  std::size_t pixel_count = 0;
  std::vector<double> building_errors;

  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    auto put = [&](const char* k, const std::optional<double>& v) {
      os << k << '=';
      if (v) os << *v; else os << "undefined";
      os << '\n';
    };
    put("rmse", rmse);
    put("rmse_m", rmse_m);
    put("rmse_nm", rmse_nm);
    put("rmse_b", rmse_b);
    put("rmse_bg", rmse_bg);
    put("htc_accuracy", htc_accuracy);
    os << "building_count=" << building_count << '\n' << "pixel_count=" << pixel_count << '\n';
    return os.str();
  }

  nlohmann::json to_json() const {
    auto val = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"rmse", val(rmse)},
            {"rmse_m", val(rmse_m)},
            {"rmse_nm", val(rmse_nm)},
            {"rmse_b", val(rmse_b)},
            {"rmse_bg", val(rmse_bg)},
            {"htc_accuracy", val(htc_accuracy)},
            {"building_count", building_count},
            {"pixel_count", pixel_count},
            {"building_errors", building_errors}};
  }
};

/// Accumulates metrics over patches. Pixel metrics pool all pixels; RMSE-B
/// pools building errors across patches.
class EvalAccumulator {
 public:
  explicit EvalAccumulator(double fg_threshold = 1.0, Connectivity conn = Connectivity::four)
      : threshold_(fg_threshold), conn_(conn) {}

  /// `p_fg` may be empty when the model has no head-tail cut.
  void add(std::span<const double> pred, std::span<const double> gt, std::span<const std::uint8_t> footprint,
           std::size_t width, std::size_t height, std::span<const double> p_fg = {}) {
    if (pred.size() != width * height || gt.size() != pred.size() || footprint.size() != pred.size()) {
      throw ContractViolation("evaluate: patch buffers do not match " + std::to_string(width) + "x" +
                              std::to_string(height));
    }
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const double e2 = (pred[i] - gt[i]) * (pred[i] - gt[i]);
      all_.add(e2);
      (footprint[i] ? m_ : nm_).add(e2);
      if (gt[i] < threshold_) bg_.add(e2);
    }
    const auto errs = heightbins::building_errors(pred, gt, connected_components(footprint, width, height, conn_));
    errors_.insert(errors_.end(), errs.begin(), errs.end());
    if (!p_fg.empty()) {
      if (p_fg.size() != gt.size()) throw ContractViolation("evaluate: p_fg length mismatch");
      for (std::size_t i = 0; i < gt.size(); ++i) htc_hits_ += (p_fg[i] > 0.5) == (gt[i] > threshold_);
      htc_pixels_ += gt.size();
    }
  }

  EvalReport report() const {
    EvalReport r;
    r.rmse = all_.value();
    r.rmse_m = m_.value();
    r.rmse_nm = nm_.value();
    r.rmse_bg = bg_.value();
    r.building_count = errors_.size();
    r.building_errors = errors_;
    r.pixel_count = all_.n;
    if (!errors_.empty()) {
      double s = 0.0;
      for (double e : errors_) s += e * e;
      r.rmse_b = std::sqrt(s / static_cast<double>(errors_.size()));
    }
    if (htc_pixels_ > 0) r.htc_accuracy = static_cast<double>(htc_hits_) / static_cast<double>(htc_pixels_);
    return r;
  }

 private:
  struct Sq {
    double sum = 0.0;
    std::size_t n = 0;
    void add(double e2) {
      sum += e2;
      ++n;
    }
    std::optional<double> value() const {
      if (n == 0) return std::nullopt;
      return std::sqrt(sum / static_cast<double>(n));
    }
  };
  double threshold_;
  Connectivity conn_;
  Sq all_, m_, nm_, bg_;
  std::vector<double> errors_;
  std::size_t htc_hits_ = 0, htc_pixels_ = 0;
};

}  // namespace heightbins
