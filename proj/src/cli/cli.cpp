#include "ltn/cli/cli.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "ltn/synthbench/checkpoint.hpp"
#include "ltn/synthbench/config_json.hpp"
#include "ltn/synthbench/dataset_io.hpp"

namespace ltn::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ltn::synth;

json default_run_config() {
  return json{{"schema_version", kRunConfigSchemaVersion},
              {"seed", std::uint64_t{0}},
              {"paths", {{"dataset", ""}, {"checkpoint", ""}}},
              {"ablate", {{"include_extras", false}}},
              {"render", {{"count", 4}, {"scale", 4}}},
              {"benchmark", BenchmarkConfig{}}};
}

RunConfig resolve_run_config(const std::optional<fs::path>& config_path, const std::vector<std::string>& overrides,
                             std::optional<std::uint64_t> seed) {
  json doc = default_run_config();
  if (config_path) {
    if (!fs::exists(*config_path)) throw ConfigError("configuration file " + config_path->string() + " does not exist");
    json file;
    try {
      file = json::parse(read_text_file(*config_path));
    } catch (const json::exception& e) {
      throw ConfigError("configuration file " + config_path->string() + " is not valid JSON: " + e.what());
    }
    if (!file.is_object() || !file.contains("schema_version")) {
      throw ConfigError("configuration file " + config_path->string() + " has no schema_version");
    }
    merge_strict(doc, file);
  }
  for (const auto& o : overrides) apply_override(doc, o);
  if (seed) doc["seed"] = *seed;

  if (doc["schema_version"].get<int>() != kRunConfigSchemaVersion) {
    throw ConfigError(fmt::format("configuration schema version {} is not supported (expected {})",
                                  doc["schema_version"].dump(), kRunConfigSchemaVersion));
  }
  if (!doc["seed"].is_number_unsigned()) throw ConfigError("seed must be a non-negative integer");
  RunConfig rc;
  try {
    rc.seed = doc["seed"].get<std::uint64_t>();
    rc.dataset = doc["paths"]["dataset"].get<std::string>();
    rc.checkpoint = doc["paths"]["checkpoint"].get<std::string>();
    rc.ablate_extras = doc["ablate"]["include_extras"].get<bool>();
    rc.render_count = doc["render"]["count"].get<int>();
    rc.render_scale = doc["render"]["scale"].get<int>();
    rc.benchmark = doc["benchmark"].get<BenchmarkConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid configuration: ") + e.what());
  }
  if (rc.render_count < 0) throw ConfigError("render.count must be non-negative");
  if (rc.render_scale < 1 || rc.render_scale > 64) throw ConfigError("render.scale must lie in [1, 64]");
  rc.benchmark.validate();
  rc.document = std::move(doc);
  return rc;
}

GrayImage render_panels(const std::vector<const Tensor<float>*>& panels, int channel, int scale) {
  if (panels.empty() || scale < 1) throw ContractViolation("render_panels needs panels and a positive scale");
  const int h = panels.front()->dim(0);
  const int w = panels.front()->dim(1);
  for (const auto* p : panels) {
    if (p->rank() != 3 || p->dim(0) != h || p->dim(1) != w || channel < 0 || channel >= p->dim(2)) {
      throw ContractViolation("render_panels: panels must share extents and hold the channel");
    }
  }
  GrayImage out(h * scale, w * scale * static_cast<int>(panels.size()));
  for (std::size_t k = 0; k < panels.size(); ++k) {
    const auto& t = *panels[k];
    float peak = 0.0f;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) peak = std::max(peak, t.at(y, x, channel));
    }
    if (!(peak > 0.0f)) continue;
    for (int y = 0; y < h * scale; ++y) {
      for (int x = 0; x < w * scale; ++x) {
        const float v = std::clamp(t.at(y / scale, x / scale, channel) / peak, 0.0f, 1.0f);
        out.pixels[static_cast<std::size_t>(y) * out.width + static_cast<std::size_t>(k) * w * scale + x] =
            static_cast<std::uint8_t>(std::lround(255.0f * v));
      }
    }
  }
  return out;
}

namespace {

void write_json(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

json ap_json(const ApTriple& ap) { return {{"AP50", ap.ap50}, {"AP70", ap.ap70}, {"AP75", ap.ap75}}; }

fs::path require_dir(const std::string& value, const std::string& key) {
  if (value.empty()) throw ConfigError(key + " is not set");
  if (!fs::is_directory(value)) throw ConfigError(key + " '" + value + "' is not a directory");
  return value;
}

SyntheticDataset input_dataset(const RunConfig& rc) {
  return load_dataset(require_dir(rc.dataset, "paths.dataset")).dataset;
}

void cmd_synth(const RunConfig& rc, const fs::path& out) {
  const auto dataset = generate_dataset(rc.benchmark.synth, rc.seed);
  save_dataset(dataset, rc.benchmark.synth, rc.seed, out);
  spdlog::info("wrote {} train and {} val scenes to {}", dataset.train.size(), dataset.val.size(), out.string());
}

void cmd_codebook(const RunConfig& rc, const fs::path& out) {
  const auto dataset = input_dataset(rc);
  const auto codebook =
      build_scene_codebook(dataset.train, rc.benchmark, rc.benchmark.clusters, schedule_codebook_seed(rc.seed));
  save_codebook(codebook, out / "codebook.ltnc");
  json sizes = codebook.cluster_sizes();
  write_json(out / "codebook.json", {{"clusters", codebook.size()}, {"cluster_sizes", sizes}});
}

void cmd_train(const RunConfig& rc, const fs::path& out) {
  auto system = train_schedule(input_dataset(rc), rc.benchmark, rc.seed);
  save_system(system, out / "checkpoint");
  write_text_file(out / "train_log.jsonl", encode_training_log(system.log));
  write_json(out / "metrics.json", {{"fusion", to_string(system.config.fusion.mode)},
                                    {"alpha", system.config.fusion.alpha},
                                    {"step1", ap_json(system.step1_metrics)},
                                    {"final", ap_json(system.final_metrics)},
                                    {"classifier_val_accuracy", system.retrieval.val_accuracy},
                                    {"layout", system.layout_report}});
}

std::vector<SceneData> prepare_split(const std::vector<SyntheticScene>& scenes, const TrainedSystem& system,
                                     std::size_t limit) {
  std::vector<SceneData> out;
  for (std::size_t i = 0; i < std::min(limit, scenes.size()); ++i) {
    out.push_back(prepare_scene(scenes[i], system.normalizers, system.config));
  }
  return out;
}

void cmd_eval(const RunConfig& rc, const fs::path& out) {
  const auto system = load_system(require_dir(rc.checkpoint, "paths.checkpoint"));
  const auto dataset = input_dataset(rc);
  if (dataset.val.empty()) throw DataError("dataset has no validation scenes");
  const auto scenes = prepare_split(dataset.val, system, dataset.val.size());
  const auto ap =
      evaluate_detections(system_detect(system, scenes), scenes, system.config.mixture.num_categories);
  write_json(out / "metrics.json", {{"split", "val"},
                                    {"scenes", scenes.size()},
                                    {"fusion", to_string(system.config.fusion.mode)},
                                    {"metrics", ap_json(ap)}});
  spdlog::info("val AP50 {:.2f} AP70 {:.2f} AP75 {:.2f}", ap.ap50, ap.ap70, ap.ap75);
}

void cmd_ablate(const RunConfig& rc, const fs::path& out) {
  const auto report = ablation_suite(input_dataset(rc), rc.benchmark, rc.seed, rc.ablate_extras);
  json variants = json::object();
  for (const auto& [name, v] : report.variants) {
    json entry = ap_json(v.ap);
    if (v.mean_theta_distance) entry["mean_theta_distance"] = *v.mean_theta_distance;
    if (v.alpha) entry["alpha"] = *v.alpha;
    variants[name] = entry;
  }
  write_json(out / "ablation.json", {{"variants", variants},
                                     {"classifier_val_accuracy", report.classifier_accuracy},
                                     {"full_layout", report.full_layout}});
}

void cmd_render(const RunConfig& rc, const fs::path& out) {
  const auto system = load_system(require_dir(rc.checkpoint, "paths.checkpoint"));
  const auto dataset = input_dataset(rc);
  const auto scenes = prepare_split(dataset.val, system, static_cast<std::size_t>(rc.render_count));
  json index = json::array();
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const int id = dataset.val[i].id;
    const int cluster = argmax_cluster<float>(system.retrieval.classifier->classify(scenes[i].features.c5).data());
    const auto s_c = system.retrieval.coarse_layout(cluster);
    const auto p = system.layout.predict(scenes[i], s_c);
    write_pgm(out / "render" / fmt::format("{:06d}_image.pgm", id), dataset.val[i].image);
    for (int c = 0; c < s_c.dim(2); ++c) {
      write_pgm(out / "render" / fmt::format("{:06d}_k{}.pgm", id, c),
                render_panels({&s_c, &p.warped, &p.layout}, c, rc.render_scale));
    }
    json entry{{"id", id}, {"cluster", cluster}};
    if (p.theta) entry["theta"] = p.theta->theta;
    index.push_back(entry);
  }
  write_json(out / "render" / "index.json", index);
}

void configure_logging(bool quiet) {
  auto logger = spdlog::get("ltn");
  if (!logger) logger = spdlog::stderr_color_mt("ltn");
  spdlog::set_default_logger(logger);
  spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Synthetic layout-transfer benchmark", "ltn"};
  app.require_subcommand(1);
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::string out;
  bool quiet = false;

  struct Command {
    std::string name;
    std::string help;
    void (*fn)(const RunConfig&, const fs::path&);
    bool needs_dataset;
    bool needs_checkpoint;
  };
  const std::vector<Command> commands{
      {"synth", "Generate a synthetic dataset", cmd_synth, false, false},
      {"codebook", "Build the scene codebook of a dataset", cmd_codebook, true, false},
      {"train", "Run the three-step training schedule", cmd_train, true, false},
      {"eval", "Evaluate a checkpoint on the validation split", cmd_eval, true, true},
      {"ablate", "Train and evaluate every ablation variant", cmd_ablate, true, false},
      {"render", "Render S_c, warped and S_l heatmaps", cmd_render, true, true}};
  std::vector<CLI::App*> subs;
  for (const auto& c : commands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", config_path, "JSON configuration file");
    sub->add_option("--seed", seed, "Seed, overriding the configuration");
    sub->add_option("--override", overrides, "KEY=VALUE, dotted key; repeatable")->allow_extra_args(false);
    sub->add_option("--out", out, "Output directory")->required();
    sub->add_flag("--quiet", quiet, "Only log warnings and errors");
    subs.push_back(sub);
  }

  std::vector<std::string> reversed;
  for (std::size_t i = args.size(); i > 1; --i) reversed.push_back(args[i - 1]);
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, std::cout, std::cerr);
    return code == 0 ? kExitOk : kExitConfig;
  }

  configure_logging(quiet);
  try {
    const RunConfig rc = resolve_run_config(config_path ? std::optional<fs::path>(*config_path) : std::nullopt,
                                            overrides, seed);
    for (std::size_t i = 0; i < subs.size(); ++i) {
      if (!subs[i]->parsed()) continue;
      if (commands[i].needs_dataset) require_dir(rc.dataset, "paths.dataset");
      if (commands[i].needs_checkpoint) require_dir(rc.checkpoint, "paths.checkpoint");
      fs::create_directories(out);
      write_json(fs::path(out) / "config.json", rc.document);
      commands[i].fn(rc, out);
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const FileError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const DivergenceError& e) {
    std::cerr << "numeric divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace ltn::cli
