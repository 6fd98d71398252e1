#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "heightbins/heightbins.hpp"

namespace fs = std::filesystem;
using namespace heightbins;

namespace {

enum Exit { ok = 0, internal = 1, config = 2, data = 3, numeric = 4, gradcheck = 5 };

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

int fail(int code, const char* kind, const std::string& reason) {
  std::cerr << "error code=" << code << " kind=" << kind << " reason=" << nlohmann::json(one_line(reason)).dump()
            << '\n';
  return code;
}

void setup_logging() {
  // stdout carries results; logs go to stderr.
  spdlog::set_default_logger(spdlog::stderr_color_mt("heightbins"));
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("HEIGHTBINS_LOG")) {
    const std::string v = env;
    if (v == "error") spdlog::set_level(spdlog::level::err);
    else if (v == "info") spdlog::set_level(spdlog::level::info);
    else if (v == "debug") spdlog::set_level(spdlog::level::debug);
    else throw ConfigError("HEIGHTBINS_LOG must be error, info or debug, got '" + v + "'");
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

/// Model config for a checkpoint: explicit --config, else run_config.json
/// beside the checkpoint.
RunConfig config_for_checkpoint(const std::string& config_path, const fs::path& checkpoint) {
  if (!config_path.empty()) return load_run_config(config_path);
  const fs::path sidecar = checkpoint.parent_path() / "run_config.json";
  if (!fs::exists(sidecar)) {
    throw ConfigError("no --config given and no run_config.json next to " + checkpoint.string());
  }
  return load_run_config(sidecar);
}

int cmd_synth(const std::string& spec_path, const std::string& out_dir, std::size_t count, double val, double test) {
  SceneSpec spec;
  if (!spec_path.empty()) {
    std::ifstream in(spec_path);
    if (!in) throw ConfigError("cannot open scene spec " + spec_path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(spec_path + ": " + e.what());
    }
    spec = scene_spec_from_json(j);
  }
  CorpusOptions opt;
  opt.count = count;
  opt.val_fraction = val;
  opt.test_fraction = test;
  const Manifest m = synthesize_corpus(spec, opt, out_dir);
  spdlog::info("synth: wrote {} patches ({} train, {} val, {} test) to {}", m.entries.size(), m.split("train").size(),
               m.split("val").size(), m.split("test").size(), out_dir);
  return ok;
}

int cmd_train(const std::string& config_path) {
  const RunConfig cfg = load_run_config(config_path);
  const Manifest m = read_manifest(cfg.manifest);
  const auto train_set = load_split(m, cfg.train_split, cfg.model);
  const auto val_set = load_split(m, cfg.val_split, cfg.model);
  spdlog::info("train: {} train / {} val patches, backend {}", train_set.size(), val_set.size(), backend_name());
  HeightNet net = HeightNet::create(cfg.model, cfg.seed);
  TrainOptions opt;
  opt.on_epoch = [](const EpochRecord& r) {
    spdlog::info("epoch {} step {} train_loss {:.4f} train_l1 {:.4f} val_rmse {:.4f}{}", r.epoch, r.step, r.train_loss,
                 r.train_l1, r.val.rmse.value_or(-1.0), r.improved ? " *" : "");
  };
  const TrainResult res = train(net, cfg, train_set, val_set, opt);
  spdlog::info("train: stopped ({}) after {} steps; best val rmse {:.4f} at epoch {}", res.stop_reason, res.steps,
               res.best_val_rmse, res.best_epoch);
  std::cout << nlohmann::json({{"stop_reason", res.stop_reason},
                               {"steps", res.steps},
                               {"best_epoch", res.best_epoch},
                               {"best_val_rmse", res.best_val_rmse},
                               {"checkpoint", (fs::path(cfg.output_dir) / "best.ckpt").string()}})
                   .dump()
            << '\n';
  return ok;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint, const std::string& split,
             const std::string& json_out) {
  const RunConfig cfg = load_run_config(config_path);
  const Manifest m = read_manifest(cfg.manifest);
  const auto samples = load_split(m, split, cfg.model);
  if (samples.empty()) throw DataError("eval: split '" + split + "' holds no patches");
  HeightNet net = HeightNet::create(cfg.model, cfg.seed);
  load_checkpoint(net.params(), checkpoint);
  const EvalReport rep = evaluate(net, samples, cfg.batch_size, cfg.connectivity);
  std::cout << rep.to_text();
  nlohmann::json j = rep.to_json();
  j["split"] = split;
  if (!json_out.empty()) write_json(json_out, j);
  else std::cout << j.dump() << '\n';
  return ok;
}

int cmd_infer(const std::string& checkpoint, const std::string& input, const std::string& out,
              const std::string& config_path, const std::optional<std::pair<std::size_t, std::size_t>>& pixel,
              const std::string& dump) {
  const RunConfig cfg = config_for_checkpoint(config_path, checkpoint);
  HeightNet net = HeightNet::create(cfg.model, cfg.seed);
  load_checkpoint(net.params(), checkpoint);
  const RasterPatch image = read_raster(input);
  write_raster(predict_raster(net, image), out);
  spdlog::info("infer: wrote {}", out);
  if (pixel) {
    const nlohmann::json j = pixel_bin_dump(net, image, pixel->first, pixel->second);
    if (dump.empty()) std::cout << j.dump() << '\n';
    else write_json(dump, j);
  }
  return ok;
}

int cmd_gradcheck(const std::string& config_path, const std::string& json_out) {
  GradCheckOptions opt;
  if (!config_path.empty()) {
    const RunConfig cfg = load_run_config(config_path);
    opt.loss = cfg.loss;
    opt.seed = cfg.seed;
  }
  const GradCheckReport rep = run_gradcheck(opt);
  for (const auto& c : rep.cases) {
    spdlog::debug("gradcheck {} entries={} max_rel_error={:.3e}", c.name, c.entries, c.max_rel_error);
    if (!c.passed) spdlog::error("gradcheck {} failed: max_rel_error={:.3e}", c.name, c.max_rel_error);
  }
  const nlohmann::json j = rep.to_json();
  if (!json_out.empty()) write_json(json_out, j);
  std::cout << "gradcheck " << (rep.passed() ? "passed" : "failed") << " cases=" << rep.cases.size()
            << " seconds=" << rep.seconds << '\n';
  if (!rep.passed()) {
    for (const auto& c : rep.cases)
      if (!c.passed) return fail(gradcheck, "gradcheck", c.name + " relative error " + std::to_string(c.max_rel_error));
  }
  return ok;
}

int cmd_ablate(const std::string& config_path, const std::string& grid_name, std::size_t seeds, std::uint64_t first_seed,
               const std::string& eval_split, const std::string& json_out) {
  const auto grid = parse_grid(grid_name);
  if (!grid) throw ConfigError("--grid must be dc, htc or levels, got '" + grid_name + "'");
  const RunConfig base = load_run_config(config_path);
  const Manifest m = read_manifest(base.manifest);
  const auto train_set = load_split(m, base.train_split, base.model);
  const auto val_set = load_split(m, base.val_split, base.model);
  const auto eval_set = load_split(m, eval_split, base.model);
  if (eval_set.empty()) throw DataError("ablate: split '" + eval_split + "' holds no patches");
  std::vector<std::uint64_t> seed_list;
  for (std::size_t i = 0; i < seeds; ++i) seed_list.push_back(first_seed + i);
  const AblationTable table = run_ablation(
      base, grid_name, ablation_settings(*grid), seed_list, {&train_set, &val_set, &eval_set},
      [](const AblationRow& r) { spdlog::info("ablate: {} rmse_m {:.4f}", r.label, r.median.rmse_m.value_or(-1.0)); });
  std::cout << table.to_text();
  if (!json_out.empty()) write_json(json_out, table.to_json());
  return ok;
}

std::optional<std::pair<std::size_t, std::size_t>> parse_pixel(const std::string& s) {
  if (s.empty()) return std::nullopt;
  const auto comma = s.find(',');
  try {
    if (comma == std::string::npos) throw std::invalid_argument(s);
    std::size_t used = 0;
    const auto x = std::stoul(s.substr(0, comma), &used);
    if (used != comma) throw std::invalid_argument(s);
    const std::string rest = s.substr(comma + 1);
    const auto y = std::stoul(rest, &used);
    if (used != rest.size()) throw std::invalid_argument(s);
    return std::make_pair(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
  } catch (const std::logic_error&) {
    throw ConfigError("--pixel expects x,y with nonnegative integers, got '" + s + "'");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Height estimation with adaptive bins, head-tail cut and distribution constraints"};
  app.require_subcommand(1);

  std::string spec_path, out_dir;
  std::size_t count = 64;
  double val_fraction = 0.1, test_fraction = 0.1;
  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus and manifest");
  synth->add_option("--spec", spec_path, "scene spec JSON (defaults when omitted)");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--count", count, "number of patches");
  synth->add_option("--val", val_fraction, "fraction assigned to the val split");
  synth->add_option("--test", test_fraction, "fraction assigned to the test split");

  std::string config_path, checkpoint, split = "test", json_out;
  auto* train_cmd = app.add_subcommand("train", "train with early stopping");
  train_cmd->add_option("--config", config_path, "run config JSON")->required();

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  eval_cmd->add_option("--config", config_path, "run config JSON")->required();
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--split", split, "manifest split");
  eval_cmd->add_option("--json", json_out, "write the JSON report here instead of stdout");

  std::string input, out, pixel, dump;
  auto* infer = app.add_subcommand("infer", "predict a height raster");
  infer->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  infer->add_option("--input", input, "image raster")->required();
  infer->add_option("--out", out, "output height raster")->required();
  infer->add_option("--config", config_path, "run config (default: run_config.json next to the checkpoint)");
  infer->add_option("--pixel", pixel, "x,y pixel for a bin-probability dump");
  infer->add_option("--dump", dump, "write the pixel dump here instead of stdout");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  grad->add_option("--config", config_path, "run config supplying loss settings and seed");
  grad->add_option("--json", json_out, "write the per-case report here");

  std::string grid;
  std::size_t seeds = 5;
  std::uint64_t first_seed = 0;
  auto* ablate = app.add_subcommand("ablate", "train an ablation grid and print the table");
  ablate->add_option("--config", config_path, "base run config")->required();
  ablate->add_option("--grid", grid, "dc, htc or levels")->required();
  ablate->add_option("--seeds", seeds, "number of seeds per setting");
  ablate->add_option("--first-seed", first_seed, "first seed");
  ablate->add_option("--split", split, "evaluation split");
  ablate->add_option("--json", json_out, "write the table as JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(config, "usage", e.what());
  }

  try {
    setup_logging();
    configure_backend();
    spdlog::debug("matrix backend: {}", backend_name());
    if (*synth) return cmd_synth(spec_path, out_dir, count, val_fraction, test_fraction);
    if (*train_cmd) return cmd_train(config_path);
    if (*eval_cmd) return cmd_eval(config_path, checkpoint, split, json_out);
    if (*infer) return cmd_infer(checkpoint, input, out, config_path, parse_pixel(pixel), dump);
    if (*grad) return cmd_gradcheck(config_path, json_out);
    if (*ablate) return cmd_ablate(config_path, grid, seeds, first_seed, split, json_out);
  } catch (const ConfigError& e) {
    return fail(config, "config", e.what());
  } catch (const RasterParseError& e) {
    return fail(data, to_string(e.code), e.what());
  } catch (const DataError& e) {
    return fail(data, "data", e.what());
  } catch (const ContractViolation& e) {
    return fail(data, "contract", e.what());
  } catch (const NumericError& e) {
    return fail(numeric, "numeric", e.what());
  } catch (const DomainError& e) {
    return fail(numeric, "domain", e.what());
  } catch (const std::exception& e) {
    return fail(internal, "internal", e.what());
  }
  return internal;
}
