// Command-line front end: synth, train, eval, ablate, serve.

#include "wsisam/eval.hpp"
#include "wsisam/image_io.hpp"
#include "wsisam/service.hpp"

#include <CLI11.hpp>
#include <httplib.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace wsisam;

namespace {

json read_json(const fs::path& p) {
  try {
    return json::parse(read_file(p));
  } catch (const json::exception& e) {
    throw InvalidArgument(p.string() + ": " + e.what());
  }
}

// Experiment file: {"model": {...}, "train": {...}, "loss": {...},
//                   "eval": {"protocol": "box", "seed": 0}}; every key optional.
struct Experiment {
  ModelConfig model;
  TrainConfig train;
  LossConfig loss;
  Protocol protocol;
  uint64_t eval_seed = 0;
};

Experiment load_experiment(const std::string& path) {
  Experiment e;
  if (path.empty()) return e;
  const json j = read_json(path);
  if (j.contains("model")) e.model = ModelConfig::from_json(j["model"]);
  if (j.contains("train")) e.train = TrainConfig::from_json(j["train"]);
  if (j.contains("loss")) e.loss = LossConfig::from_json(j["loss"]);
  if (j.contains("eval")) {
    e.protocol = Protocol::parse(j["eval"].value("protocol", std::string("box")));
    e.eval_seed = j["eval"].value("seed", e.eval_seed);
  }
  e.model.decoder.mode = e.train.aggregation_mode;
  return e;
}

int cmd_synth(const std::string& config, const std::string& out, std::optional<uint64_t> seed) {
  SynthConfig sc;
  if (!config.empty()) sc = synth_config_from_json(read_file(config));
  if (seed) sc.seed = *seed;
  const auto data = synth_dataset(sc);
  save_dataset(out, data);
  spdlog::info("wrote {} pyramids to {}", data.size(), out);
  return 0;
}

int cmd_train(const std::string& data_dir, const std::string& config, const std::string& out,
              const std::string& curve_path) {
  Experiment e = load_experiment(config);
  if (e.train.log_every == 0) e.train.log_every = std::max(1, e.train.steps / 20);
  const auto data = load_dataset(data_dir);
  WsiSam model(e.model);
  spdlog::info("training {} steps on {} pyramids", e.train.steps, data.size());
  const TrainResult r = train(model, data, e.train, e.loss);
  model.save(out);
  const std::string csv = curve_path.empty() ? out + ".loss.csv" : curve_path;
  write_loss_curve_csv(csv, r.curve);
  spdlog::info("checkpoint {} (loss curve {})", out, csv);
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& protocol, uint64_t seed,
             const std::string& out) {
  const WsiSam model = WsiSam::load(ckpt);
  const auto pairs = eval_pairs(load_dataset(data_dir), model.config().patch_size());
  const EvalReport rep = evaluate(model, pairs, Protocol::parse(protocol), seed);
  const std::string text = rep.to_json().dump(2);
  if (out.empty()) {
    std::cout << text << '\n';
  } else {
    write_file(out, text + "\n");
  }
  spdlog::info("{}: mean Dice {:.4f} over {} samples", rep.protocol, rep.mean_dice, rep.per_sample_dice.size());
  return 0;
}

int cmd_ablate(const std::string& data_dir, const std::string& eval_dir, const std::string& config,
               const std::string& axes_text, const std::string& out) {
  const Experiment e = load_experiment(config);
  auto data = load_dataset(data_dir);
  std::vector<PyramidImage> eval_data;
  if (eval_dir.empty()) {
    // Hold out the last fifth of the images.
    const size_t n_eval = std::max<size_t>(1, data.size() / 5);
    if (data.size() < 2) throw InvalidArgument("ablate: need at least two images to split train/eval");
    eval_data.assign(data.end() - static_cast<std::ptrdiff_t>(n_eval), data.end());
    data.resize(data.size() - n_eval);
  } else {
    eval_data = load_dataset(eval_dir);
  }
  AblationSetup setup{e.model, e.train, e.loss, e.protocol, e.eval_seed};
  SamplerConfig sc = e.train.sampler;
  sc.patch_size = e.model.patch_size();
  const auto train_pairs = sample_pairs(data, sc, e.train.seed);
  const auto eval_set = eval_pairs(eval_data, e.model.patch_size());
  const AblationAxes axes = axes_text.empty() ? AblationAxes::full() : AblationAxes::parse(axes_text);
  const auto rows = run_ablation_grid(setup, train_pairs, eval_set, axes);
  write_ablation_csv(out, rows);
  std::cout << ablation_csv(rows);
  return 0;
}

int cmd_serve(const std::string& ckpt, const std::string& host, int port, long long max_image_px) {
  auto model = std::make_shared<const WsiSam>(ckpt.empty() ? WsiSam(ModelConfig{}) : WsiSam::load(ckpt));
  if (ckpt.empty()) spdlog::warn("no --ckpt given; serving an untrained model");
  ServiceConfig cfg;
  cfg.max_image_px = max_image_px;
  SegmentationService service(model, cfg);
  httplib::Server server;
  register_routes(server, service);
  spdlog::info("listening on {}:{} (checkpoint {})", host, port, service.ckpt_id());
  if (!server.listen(host, port)) {
    spdlog::error("cannot listen on {}:{}", host, port);
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-resolution promptable segmentation toolkit"};
  app.require_subcommand(1);

  std::string synth_config, synth_out;
  std::optional<uint64_t> synth_seed;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic pyramid dataset");
  synth->add_option("--config", synth_config, "Generator config (JSON)");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", synth_seed, "Overrides the config seed");

  std::string train_data, train_config, train_out, train_curve;
  auto* tr = app.add_subcommand("train", "Train the learnable additions on a dataset");
  tr->add_option("--data", train_data, "Dataset directory")->required();
  tr->add_option("--config", train_config, "Experiment config (JSON)");
  tr->add_option("--out", train_out, "Checkpoint path")->required();
  tr->add_option("--curve", train_curve, "Loss curve CSV (default <out>.loss.csv)");

  std::string ev_ckpt, ev_data, ev_protocol = "box", ev_out;
  uint64_t ev_seed = 0;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--protocol", ev_protocol, "box | points:K | coarse");
  ev->add_option("--seed", ev_seed, "Prompt simulation seed");
  ev->add_option("--out", ev_out, "Report JSON (stdout if omitted)");

  std::string ab_data, ab_eval, ab_config, ab_axes, ab_out;
  auto* ab = app.add_subcommand("ablate", "Run the aggregation mode / target / lambda grid");
  ab->add_option("--data", ab_data, "Training dataset directory")->required();
  ab->add_option("--eval-data", ab_eval, "Evaluation dataset (default: hold out 20% of --data)");
  ab->add_option("--config", ab_config, "Experiment config (JSON) fixing budget and seed");
  ab->add_option("--axes", ab_axes, "e.g. \"modes=concat_fc,max,avg;targets=tokens;lambdas=0.25,0.5,0.75\"");
  ab->add_option("--out", ab_out, "Grid CSV")->required();

  std::string sv_ckpt, sv_host = "127.0.0.1";
  int sv_port = 8080;
  long long sv_max_px = 4096LL * 4096LL;
  auto* sv = app.add_subcommand("serve", "Run the HTTP inference service");
  sv->add_option("--ckpt", sv_ckpt, "Checkpoint");
  sv->add_option("--host", sv_host, "Bind address");
  sv->add_option("--port", sv_port, "Port");
  sv->add_option("--max-image-px", sv_max_px, "Largest accepted image, in pixels");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth) return cmd_synth(synth_config, synth_out, synth_seed);
    if (*tr) return cmd_train(train_data, train_config, train_out, train_curve);
    if (*ev) return cmd_eval(ev_ckpt, ev_data, ev_protocol, ev_seed, ev_out);
    if (*ab) return cmd_ablate(ab_data, ab_eval, ab_config, ab_axes, ab_out);
    if (*sv) return cmd_serve(sv_ckpt, sv_host, sv_port, sv_max_px);
  } catch (const TrainingDiverged& e) {
    spdlog::error("{}", e.what());
    std::cerr << e.diagnostic_json << '\n';
    return 3;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 0;
}
