#include "ltn/synthbench/checkpoint.hpp"

#include <fmt/format.h>

#include "ltn/numerics/weights_io.hpp"
#include "ltn/synthbench/config_json.hpp"
#include "ltn/synthbench/dataset_io.hpp"

namespace ltn::synth {

namespace fs = std::filesystem;

void save_system(TrainedSystem& system, const fs::path& dir) {
  if (system.layout.kind != LayoutKind::transform_net) throw ContractViolation("checkpoints hold the full model only");
  fs::create_directories(dir);
  nlohmann::json model{{"schema_version", kCheckpointSchemaVersion},
                       {"config", system.config},
                       {"normalizers", system.normalizers},
                       {"layout_scale", system.layout_scale},
                       {"early_fusion", system.fusion != nullptr},
                       {"metrics",
                        {{"step1", system.step1_metrics},
                         {"step3_start", system.step3_start_metrics},
                         {"final", system.final_metrics}}},
                       {"layout_report", system.layout_report}};
  write_text_file(dir / "model.json", model.dump(2) + "\n");
  save_codebook(system.retrieval.codebook, dir / "codebook.ltnc");
  save_weights(dir / "detector.ltnw", snapshot(system.detector.parameters()));
  save_weights(dir / "classifier.ltnw", snapshot(system.retrieval.classifier->parameters()));
  save_weights(dir / "layout.ltnw", snapshot(system.layout.parameters()));
  if (system.fusion) save_weights(dir / "fusion.ltnw", snapshot(system.fusion->parameters()));
}

TrainedSystem load_system(const fs::path& dir) {
  const auto model_path = dir / "model.json";
  if (!fs::exists(model_path)) throw DataError("no model.json in checkpoint " + dir.string());
  BenchmarkConfig config;
  FeatureNormalizers normalizers;
  ChannelNormalizer layout_scale;
  ApTriple step1, step3_start, final_metrics;
  LayoutTrainingReport report;
  bool early = false;
  try {
    const auto model = nlohmann::json::parse(read_text_file(model_path));
    const int version = model.at("schema_version").get<int>();
    if (version != kCheckpointSchemaVersion) {
      throw DataError(fmt::format("checkpoint schema version {} is not supported (expected {})", version,
                                  kCheckpointSchemaVersion));
    }
    config = model.at("config").get<BenchmarkConfig>();
    normalizers = model.at("normalizers").get<FeatureNormalizers>();
    layout_scale = model.at("layout_scale").get<ChannelNormalizer>();
    early = model.at("early_fusion").get<bool>();
    const auto& metrics = model.at("metrics");
    step1 = metrics.at("step1").get<ApTriple>();
    step3_start = metrics.at("step3_start").get<ApTriple>();
    final_metrics = metrics.at("final").get<ApTriple>();
    report = model.at("layout_report").get<LayoutTrainingReport>();
    config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint model.json: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint model.json: ") + e.what());
  }
  if (early != (config.fusion.mode == FusionMode::early)) {
    throw DataError("checkpoint fusion weights disagree with its fusion mode");
  }

  TrainedSystem sys{config, normalizers, {}, {}, make_detector(config), nullptr, layout_scale, step1, step3_start,
                    final_metrics, report, {}};

  sys.retrieval.codebook = load_codebook(dir / "codebook.ltnc");
  Rng init(0);
  sys.retrieval.classifier =
      std::make_unique<ClassifierHead<float>>(classifier_config(config, sys.retrieval.codebook.size()), init);
  sys.layout = make_layout_model(LayoutKind::transform_net, config.transform.use_transform,
                                 config.transform.use_refine, config, init);
  restore(load_weights(dir / "detector.ltnw"), sys.detector.parameters());
  restore(load_weights(dir / "classifier.ltnw"), sys.retrieval.classifier->parameters());
  restore(load_weights(dir / "layout.ltnw"), sys.layout.parameters());
  if (early) {
    sys.fusion = std::make_unique<EarlyFusion<float>>(kBackboneChannels, config.mixture.num_channels(),
                                                      config.fusion.method);
    restore(load_weights(dir / "fusion.ltnw"), sys.fusion->parameters());
  }
  return sys;
}

std::string encode_training_log(const TrainingLog& log) {
  std::string out;
  for (const auto& e : log) {
    out += nlohmann::json{{"phase", e.phase}, {"epoch", e.epoch}, {"metric", e.metric}, {"value", e.value}}.dump();
    out += '\n';
  }
  return out;
}

}  // namespace ltn::synth
