#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "heightbins/errors.hpp"
#include "heightbins/losses.hpp"
#include "heightbins/metrics.hpp"
#include "heightbins/model.hpp"
#include "heightbins/optim.hpp"

namespace heightbins {

/// Everything a training or evaluation run needs.
struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  OptimizerState optimizer;
  std::size_t batch_size = 4;
  std::size_t max_epochs = 50;
  std::size_t max_steps = 0;  // 0: no step limit
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  std::string manifest;
  std::string train_split = "train";
  std::string val_split = "val";
  std::string output_dir = "run";
  Connectivity connectivity = Connectivity::four;

  std::vector<std::string> problems() const {
    auto out = model.problems();
    const auto lp = loss.problems();
    out.insert(out.end(), lp.begin(), lp.end());
    if (loss.lambdas.size() != model.levels.size()) {
      out.push_back("loss: " + std::to_string(loss.lambdas.size()) + " lambda weights for " +
                    std::to_string(model.levels.size()) + " attached levels");
    }
    if (patience < 1) out.push_back("patience must be at least 1");
    if (batch_size < 1) out.push_back("batch_size must be at least 1");
    if (max_epochs < 1) out.push_back("max_epochs must be at least 1");
    if (!(optimizer.lr > 0.0)) out.push_back("optimizer: lr must be positive");
    if (!(optimizer.weight_decay >= 0.0)) out.push_back("optimizer: weight_decay must be nonnegative");
    if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
      out.push_back("optimizer: betas must lie in [0,1)");
    }
    if (!(optimizer.eps > 0.0)) out.push_back("optimizer: eps must be positive");
    if (model.head.fg_threshold != loss.fg_threshold) {
      out.push_back("model.head.fg_threshold and loss.fg_threshold must agree");
    }
    return out;
  }
};

/// Default per-level weight: halves with each coarser level, 1 at F5.
inline double default_lambda(int level) { return 1.0 / static_cast<double>(1 << (5 - level)); }

namespace detail {

/// Walks a JSON object, collecting every problem instead of stopping at the
/// first one.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path, std::vector<std::string>& errs)
      : j_(j), path_(std::move(path)), errs_(errs) {
    if (!j_.is_object()) errs_.push_back(path_ + ": expected an object");
  }

  ~ObjectReader() = default;

  /// Reports keys that no reader asked for.
  void finish() {
    if (!j_.is_object()) return;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) errs_.push_back(key(it.key()) + ": unknown key");
  }

  const nlohmann::json* find(const std::string& k) {
    seen_[k] = true;
    if (!j_.is_object() || !j_.contains(k)) return nullptr;
    return &j_.at(k);
  }

  std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

  void number(const std::string& k, double& dst) {
    if (auto v = find(k)) {
      if (v->is_number()) dst = v->get<double>(); else errs_.push_back(key(k) + ": expected a number");
    }
  }
  template <class Int>
  void count(const std::string& k, Int& dst) {
    if (auto v = find(k)) {
      if (v->is_number_integer() && v->get<std::int64_t>() >= 0) dst = v->get<Int>(); else errs_.push_back(key(k) + ": expected a nonnegative integer");
    }
  }
  void boolean(const std::string& k, bool& dst) {
    if (auto v = find(k)) {
      if (v->is_boolean()) dst = v->get<bool>(); else errs_.push_back(key(k) + ": expected true or false");
    }
  }
  void string(const std::string& k, std::string& dst) {
    if (auto v = find(k)) {
      if (v->is_string()) dst = v->get<std::string>(); else errs_.push_back(key(k) + ": expected a string");
    }
  }
  void family(const std::string& k, Family& dst) {
    std::string s;
    bool given = false;
    if (auto v = find(k)) {
      given = true;
      if (v->is_string()) s = v->get<std::string>(); else errs_.push_back(key(k) + ": expected a family name");
    }
    if (!given || s.empty()) return;
    if (auto f = parse_family(s)) dst = *f;
    else errs_.push_back(key(k) + ": unknown family '" + s + "' (gaussian, laplace, uniform, delta, none)");
  }
  template <class T>
  bool list(const std::string& k, std::vector<T>& dst) {
    auto v = find(k);
    if (!v) return false;
    if (!v->is_array()) {
      errs_.push_back(key(k) + ": expected an array");
      return false;
    }
    std::vector<T> out;
    for (const auto& e : *v) {
      const bool ok = std::is_integral_v<T> ? e.is_number_integer() : e.is_number();
      if (!ok) {
        errs_.push_back(key(k) + ": array holds a value of the wrong type");
        return false;
      }
      out.push_back(e.get<T>());
    }
    dst = std::move(out);
    return true;
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::vector<std::string>& errs_;
  std::map<std::string, bool> seen_;
};

inline std::string join_errors(const std::vector<std::string>& errs) {
  std::string msg;
  for (const auto& e : errs) msg += (msg.empty() ? "" : "; ") + e;
  return msg;
}

}  // namespace detail

/// Parses a run configuration. Relative paths are resolved against
/// `base_dir`. All problems are reported in one ConfigError.
inline RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  RunConfig c;
  std::vector<std::string> errs;
  detail::ObjectReader top(j, "", errs);
  bool lambdas_given = false;

  if (auto m = top.find("model")) {
    detail::ObjectReader r(*m, "model", errs);
    r.count("in_channels", c.model.backbone.in_channels);
    std::vector<std::size_t> widths;
    if (r.list("widths", widths)) {
      if (widths.size() != kPyramidLevels) errs.push_back("model.widths: expected 5 channel widths (F5..F1)");
      else std::copy(widths.begin(), widths.end(), c.model.backbone.widths.begin());
      for (auto w : widths)
        if (w == 0) errs.push_back("model.widths: widths must be positive");
    }
    r.count("image_size", c.model.image_size);
    r.list("levels", c.model.levels);
    if (auto h = r.find("head")) {
      detail::ObjectReader hr(*h, "model.head", errs);
      HeadConfig& hc = c.model.head;
      hr.count("n_bins", hc.n_bins);
      hr.count("tokens", hc.tokens);
      hr.count("patch_size", hc.patch_size);
      hr.count("embed_dim", hc.embed_dim);
      hr.count("depth", hc.depth);
      hr.count("heads", hc.heads);
      hr.count("mlp_hidden", hc.mlp_hidden);
      hr.number("h_min", hc.h_min);
      hr.number("h_max", hc.h_max);
      hr.number("fg_threshold", hc.fg_threshold);
      hr.boolean("head_tail_cut", hc.head_tail_cut);
      hr.finish();
    }
    r.finish();
  }
  if (auto l = top.find("loss")) {
    detail::ObjectReader r(*l, "loss", errs);
    r.number("mu_bin", c.loss.mu_bin);
    r.number("mu_htc", c.loss.mu_htc);
    r.number("mu_dist", c.loss.mu_dist);
    lambdas_given = r.list("lambdas", c.loss.lambdas);
    r.family("fg_family", c.loss.fg_family);
    r.family("bg_family", c.loss.bg_family);
    r.number("fg_threshold", c.loss.fg_threshold);
    r.number("mode_prob_min", c.loss.mode_prob_min);
    r.number("mode_prob_max", c.loss.mode_prob_max);
    r.number("prob_floor", c.loss.prob_floor);
    r.count("chamfer_max_points", c.loss.chamfer_max_points);
    r.finish();
  }
  if (auto o = top.find("optimizer")) {
    detail::ObjectReader r(*o, "optimizer", errs);
    r.number("lr", c.optimizer.lr);
    r.number("weight_decay", c.optimizer.weight_decay);
    r.number("beta1", c.optimizer.beta1);
    r.number("beta2", c.optimizer.beta2);
    r.number("eps", c.optimizer.eps);
    r.finish();
  }
  top.count("batch_size", c.batch_size);
  top.count("max_epochs", c.max_epochs);
  top.count("max_steps", c.max_steps);
  top.count("patience", c.patience);
  top.count("seed", c.seed);
  top.string("manifest", c.manifest);
  top.string("train_split", c.train_split);
  top.string("val_split", c.val_split);
  top.string("output_dir", c.output_dir);
  int conn = 4;
  top.count("connectivity", conn);
  if (conn == 4) c.connectivity = Connectivity::four;
  else if (conn == 8) c.connectivity = Connectivity::eight;
  else errs.push_back("connectivity: expected 4 or 8");
  top.finish();

  // The loss threshold follows the head unless set on its own.
  if (!(j.contains("loss") && j["loss"].is_object() && j["loss"].contains("fg_threshold"))) {
    c.loss.fg_threshold = c.model.head.fg_threshold;
  }
  if (!lambdas_given) {
    c.loss.lambdas.clear();
    for (int l : c.model.levels) c.loss.lambdas.push_back(default_lambda(l));
  }
  if (errs.empty()) {
    const auto p = c.problems();
    errs.insert(errs.end(), p.begin(), p.end());
  }
  if (!errs.empty()) throw ConfigError(detail::join_errors(errs));

  auto resolve = [&](std::string& p) {
    if (!p.empty() && !base_dir.empty() && std::filesystem::path(p).is_relative()) p = (base_dir / p).string();
  };
  resolve(c.manifest);
  resolve(c.output_dir);
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": invalid JSON at byte " + std::to_string(e.byte));
  }
  return run_config_from_json(j, path.parent_path());
}

/// Canonical JSON form; run_config_from_json(run_config_to_json(c)) == c.
inline nlohmann::json run_config_to_json(const RunConfig& c) {
  const auto& h = c.model.head;
  return {{"model",
           {{"in_channels", c.model.backbone.in_channels},
            {"widths", c.model.backbone.widths},
            {"image_size", c.model.image_size},
            {"levels", c.model.levels},
            {"head",
             {{"n_bins", h.n_bins},
              {"tokens", h.tokens},
              {"patch_size", h.patch_size},
              {"embed_dim", h.embed_dim},
              {"depth", h.depth},
              {"heads", h.heads},
              {"mlp_hidden", h.mlp_hidden},
              {"h_min", h.h_min},
              {"h_max", h.h_max},
              {"fg_threshold", h.fg_threshold},
              {"head_tail_cut", h.head_tail_cut}}}}},
          {"loss",
           {{"mu_bin", c.loss.mu_bin},
            {"mu_htc", c.loss.mu_htc},
            {"mu_dist", c.loss.mu_dist},
            {"lambdas", c.loss.lambdas},
            {"fg_family", to_string(c.loss.fg_family)},
            {"bg_family", to_string(c.loss.bg_family)},
            {"fg_threshold", c.loss.fg_threshold},
            {"mode_prob_min", c.loss.mode_prob_min},
            {"mode_prob_max", c.loss.mode_prob_max},
            {"prob_floor", c.loss.prob_floor},
            {"chamfer_max_points", c.loss.chamfer_max_points}}},
          {"optimizer",
           {{"lr", c.optimizer.lr},
            {"weight_decay", c.optimizer.weight_decay},
            {"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"eps", c.optimizer.eps}}},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"max_steps", c.max_steps},
          {"patience", c.patience},
          {"seed", c.seed},
          {"manifest", c.manifest},
          {"train_split", c.train_split},
          {"val_split", c.val_split},
          {"output_dir", c.output_dir},
          {"connectivity", static_cast<int>(c.connectivity)}};
}

}  // namespace heightbins
