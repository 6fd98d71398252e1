#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "heightbins/config.hpp"
#include "heightbins/losses.hpp"
#include "heightbins/metrics.hpp"
#include "heightbins/model.hpp"
#include "heightbins/optim.hpp"
#include "heightbins/params.hpp"
#include "heightbins/raster.hpp"
#include "heightbins/synth.hpp"

namespace heightbins {

/// One patch held in memory.
struct Sample {
  std::size_t size = 0;               // S (square patches)
  std::vector<double> image;          // C*S*S
  std::vector<double> height;         // S*S
  std::vector<std::uint8_t> footprint;
};

inline Sample sample_from_rasters(const RasterPatch& image, const RasterPatch& height, const RasterPatch& footprint) {
  if (image.kind != RasterKind::image || height.kind != RasterKind::height || footprint.kind != RasterKind::footprint) {
    throw DataError("sample: expected image, height and footprint rasters");
  }
  if (image.width != image.height || height.width != image.width || height.height != image.height ||
      footprint.width != image.width || footprint.height != image.height || height.channels != 1 ||
      footprint.channels != 1) {
    throw DataError("sample: image, height and footprint extents disagree");
  }
  Sample s;
  s.size = image.width;
  s.image.assign(image.values.begin(), image.values.end());
  s.height.assign(height.values.begin(), height.values.end());
  s.footprint.resize(footprint.values.size());
  for (std::size_t i = 0; i < s.footprint.size(); ++i) s.footprint[i] = footprint.values[i] != 0.0f;
  return s;
}

inline Sample sample_from_scene(const Scene& scene) {
  return sample_from_rasters(scene.image, scene.height, scene.footprint);
}

/// Loads every patch tagged `split`, checking it fits the model.
inline std::vector<Sample> load_split(const Manifest& m, const std::string& split, const ModelConfig& model) {
  std::vector<Sample> out;
  for (const auto* e : m.split(split)) {
    Sample s = sample_from_rasters(read_raster(m.resolve(e->image).string()), read_raster(m.resolve(e->height).string()),
                                   read_raster(m.resolve(e->footprint).string()));
    if (s.size != model.image_size || s.image.size() != model.backbone.in_channels * s.size * s.size) {
      throw DataError("patch " + e->image + " is " + std::to_string(s.size) + " px with " +
                      std::to_string(s.image.size() / (s.size * s.size)) + " channels; model expects " +
                      std::to_string(model.image_size) + " px with " + std::to_string(model.backbone.in_channels));
    }
    out.push_back(std::move(s));
  }
  return out;
}

struct Batch {
  Tensor images;  // [B, C, S, S]
  Tensor height;  // [B, 1, S, S]
};

inline Batch make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractViolation("make_batch: no samples selected");
  const std::size_t S = samples[indices[0]].size;
  const std::size_t C = samples[indices[0]].image.size() / (S * S);
  std::vector<double> img, h;
  img.reserve(indices.size() * C * S * S);
  h.reserve(indices.size() * S * S);
  for (std::size_t i : indices) {
    img.insert(img.end(), samples[i].image.begin(), samples[i].image.end());
    h.insert(h.end(), samples[i].height.begin(), samples[i].height.end());
  }
  const std::size_t B = indices.size();
  return {Tensor::from({B, C, S, S}, std::move(img)), Tensor::from({B, 1, S, S}, std::move(h))};
}

/// Patch order for `epoch`, a fixed shuffle seeded from (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, epoch));
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

/// Stops after `patience` consecutive checks without a strict improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  /// Returns true when the value improved on the best so far.
  bool update(double value) {
    if (value < best_) {
      best_ = value;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }
  bool should_stop() const { return stale_ >= patience_; }
  double best() const { return best_; }

 private:
  std::size_t patience_;
  std::size_t stale_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

/// Metrics of the finest head over `samples`, batched without gradients.
inline EvalReport evaluate(const HeightNet& net, const std::vector<Sample>& samples, std::size_t batch_size,
                           Connectivity conn = Connectivity::four) {
  NoGradGuard guard;
  EvalAccumulator acc(net.config().head.fg_threshold, conn);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) idx.push_back(i);
    const Batch b = make_batch(samples, idx);
    const auto out = net.forward(b.images);
    const HeadOutput& fin = out.final_output();
    const std::size_t S = samples[idx[0]].size, HW = S * S;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const Sample& s = samples[idx[k]];
      std::span<const double> pfg;
      if (fin.p_fg.defined()) pfg = fin.p_fg.data().subspan(k * HW, HW);
      acc.add(fin.height.data().subspan(k * HW, HW), s.height, s.footprint, S, S, pfg);
    }
  }
  return acc.report();
}

/// Mean total loss over `samples` (no gradients).
inline double mean_loss(const HeightNet& net, const std::vector<Sample>& samples, const LossConfig& cfg,
                        std::size_t batch_size) {
  NoGradGuard guard;
  double total = 0.0;
  std::size_t n = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) idx.push_back(i);
    const Batch b = make_batch(samples, idx);
    const auto out = net.forward(b.images);
    total += total_loss(out.head_ptrs(), gt_pyramid(b.height, net.config().levels), cfg).total.item() *
             static_cast<double>(idx.size());
    n += idx.size();
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double train_loss = 0.0;
  double train_l1 = 0.0;  // finest-level L1, meters
  double val_loss = 0.0;
  EvalReport val;
  bool improved = false;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"epoch", epoch},         {"step", step},         {"train_loss", train_loss},
                        {"train_l1", train_l1},   {"val_loss", val_loss}, {"improved", improved}};
    nlohmann::json v = val.to_json();
    v.erase("building_errors");
    j["val"] = v;
    return j;
  }
};

struct TrainResult {
  std::vector<double> step_losses;  // total loss of every optimizer step
  std::vector<double> step_l1;      // finest-level L1 of every step
  std::vector<EpochRecord> epochs;
  double best_val_rmse = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
  std::string stop_reason;
};

struct TrainOptions {
  /// Write checkpoints, the config copy and the JSONL log under output_dir.
  bool write_files = true;
  /// Leave the best-validation weights in the model when training ends.
  bool restore_best = true;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Details of a non-finite loss or gradient, written next to the run.
inline std::string numeric_diagnostic(std::size_t epoch, std::size_t step, std::uint64_t batch_seed,
                                      const LossBreakdown* loss, const std::string& cause) {
  std::ostringstream os;
  os.precision(17);
  os << "non-finite training state: " << cause << " epoch=" << epoch << " step=" << step
     << " batch_seed=" << batch_seed;
  if (loss) {
    os << " loss=" << loss->total.item();
    for (std::size_t i = 0; i < loss->levels.size(); ++i) {
      const auto& l = loss->levels[i];
      os << " level" << i << "=[height=" << l.height << ",bin=" << l.bin << ",htc=" << l.htc << ",dist=" << l.dist << "]";
    }
  }
  return os.str();
}

/// Mini-batch AdamW training with per-epoch validation, best-checkpoint
/// saving by validation RMSE and early stopping.
inline TrainResult train(HeightNet& net, const RunConfig& cfg, const std::vector<Sample>& train_set,
                         const std::vector<Sample>& val_set, const TrainOptions& opt = {}) {
  if (train_set.empty()) throw DataError("train: split '" + cfg.train_split + "' holds no patches");
  if (val_set.empty()) throw DataError("train: split '" + cfg.val_split + "' holds no patches");
  const std::filesystem::path out_dir(cfg.output_dir);
  std::ofstream log;
  if (opt.write_files) {
    std::filesystem::create_directories(out_dir);
    std::ofstream(out_dir / "run_config.json") << run_config_to_json(cfg).dump(2) << '\n';
    log.open(out_dir / "train_log.jsonl");
    if (!log) throw DataError("cannot write training log in " + out_dir.string());
  }
  OptimizerState state = cfg.optimizer;
  EarlyStopping stopper(cfg.patience);
  TrainResult res;
  std::vector<std::size_t> idx;
  std::vector<std::vector<double>> best_values;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto order = epoch_order(train_set.size(), cfg.seed, epoch);
    double loss_sum = 0.0, l1_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      if (cfg.max_steps && res.steps >= cfg.max_steps) break;
      idx.assign(order.begin() + static_cast<long>(start),
                 order.begin() + static_cast<long>(std::min(order.size(), start + cfg.batch_size)));
      const Batch b = make_batch(train_set, idx);
      const auto out = net.forward(b.images);
      const LossBreakdown lb = total_loss(out.head_ptrs(), gt_pyramid(b.height, cfg.model.levels), cfg.loss);
      const std::uint64_t batch_seed = derive_seed(cfg.seed, epoch);
      const auto fail = [&](const std::string& cause) {
        const std::string msg = numeric_diagnostic(epoch, res.steps, batch_seed, &lb, cause);
        if (opt.write_files) std::ofstream(out_dir / "numeric_failure.txt") << msg << '\n';
        throw NumericError(msg);
      };
      if (!std::isfinite(lb.total.item())) fail("loss");
      net.params().zero_grad();
      backward(lb.total);
      try {
        optimizer_step(net.params(), state);
      } catch (const NumericError& e) {
        fail(e.what());
      }
      ++res.steps;
      res.step_losses.push_back(lb.total.item());
      res.step_l1.push_back(lb.levels.back().height);
      loss_sum += lb.total.item() * static_cast<double>(idx.size());
      l1_sum += lb.levels.back().height * static_cast<double>(idx.size());
      seen += idx.size();
    }
    if (seen == 0) {
      res.stop_reason = "max_steps";
      break;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.step = res.steps;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.train_l1 = l1_sum / static_cast<double>(seen);
    rec.val = evaluate(net, val_set, cfg.batch_size, cfg.connectivity);
    rec.val_loss = mean_loss(net, val_set, cfg.loss, cfg.batch_size);
    const double metric = rec.val.rmse.value_or(std::numeric_limits<double>::infinity());
    rec.improved = stopper.update(metric);
    if (rec.improved) {
      res.best_val_rmse = metric;
      res.best_epoch = epoch;
      if (opt.write_files) save_checkpoint(net.params(), (out_dir / "best.ckpt").string());
      if (opt.restore_best) {
        best_values.clear();
        for (const auto& p : net.params().items()) best_values.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
      }
    }
    if (opt.write_files) {
      save_checkpoint(net.params(), (out_dir / "last.ckpt").string());
      log << rec.to_json().dump() << '\n' << std::flush;
    }
    if (opt.on_epoch) opt.on_epoch(rec);
    res.epochs.push_back(std::move(rec));
    if (stopper.should_stop()) {
      res.stop_reason = "early_stopping";
      break;
    }
    if (cfg.max_steps && res.steps >= cfg.max_steps) {
      res.stop_reason = "max_steps";
      break;
    }
  }
  if (res.stop_reason.empty()) res.stop_reason = "max_epochs";
  if (opt.restore_best && !best_values.empty()) {
    auto& items = net.params().items();
    for (std::size_t i = 0; i < items.size(); ++i) {
      std::copy(best_values[i].begin(), best_values[i].end(), items[i].tensor.mutable_data().begin());
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Inference

inline Tensor image_tensor(const RasterPatch& image) {
  if (image.kind != RasterKind::image) throw DataError("infer: input raster is not an image");
  return Tensor::from({1, image.channels, image.height, image.width}, {image.values.begin(), image.values.end()});
}

/// Predicted height map for one image raster.
inline RasterPatch predict_raster(const HeightNet& net, const RasterPatch& image) {
  NoGradGuard guard;
  const auto out = net.forward(image_tensor(image));
  RasterPatch r{image.width, image.height, 1, image.gsd, RasterKind::height, {}};
  const auto h = out.final_output().height.data();
  r.values.reserve(h.size());
  for (double v : h) r.values.push_back(static_cast<float>(std::max(0.0, v)));
  return r;
}

/// Bin-level view of a single pixel: edges, centers and probabilities.
inline nlohmann::json pixel_bin_dump(const HeightNet& net, const RasterPatch& image, std::size_t x, std::size_t y) {
  if (x >= image.width || y >= image.height) {
    throw ContractViolation("infer: pixel (" + std::to_string(x) + "," + std::to_string(y) + ") outside " +
                            std::to_string(image.width) + "x" + std::to_string(image.height));
  }
  NoGradGuard guard;
  const auto out = net.forward(image_tensor(image));
  const HeadOutput& o = out.final_output();
  const std::size_t N = o.bins.n_bins(), HW = image.width * image.height, p = y * image.width + x;
  auto column = [&](const Tensor& t) {
    std::vector<double> v(N);
    for (std::size_t n = 0; n < N; ++n) v[n] = t.data()[n * HW + p];
    return v;
  };
  nlohmann::json j = {{"x", x},
                      {"y", y},
                      {"height", o.height.data()[p]},
                      {"edges", std::vector<double>(o.bins.edges.data().begin(), o.bins.edges.data().end())},
                      {"centers", std::vector<double>(o.bins.centers.data().begin(), o.bins.centers.data().end())},
                      {"prob", column(o.prob)}};
  if (o.p_fg.defined()) {
    j["p_fg"] = o.p_fg.data()[p];
    j["prob_fg"] = column(o.prob_fg);
    j["prob_bg"] = column(o.prob_bg);
  }
  return j;
}

}  // namespace heightbins
