#include "ltn/synthbench/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <numeric>

#include "ltn/numerics/optim.hpp"

namespace ltn::synth {

void TrainConfig::validate() const {
  if (detector_epochs < 0 || classifier_epochs < 0 || layout_epochs < 0 || finetune_epochs < 0) {
    throw ConfigError("train: epoch counts must be >= 0");
  }
  if (!(detector_lr > 0) || !(step2_lr > 0) || !(step3_lr > 0)) throw ConfigError("train: learning rates must be > 0");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train: momentum must lie in [0, 1)");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
}

void BenchmarkConfig::validate() const {
  synth.validate();
  try {
    mixture.validate();
    kernel.validate();
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  detector.validate(mixture);
  fusion.validate();
  train.validate();
  if (clusters < 1) throw ConfigError("codebook.clusters must be >= 1");
  if (clusters > synth.train_size) throw ConfigError("codebook.clusters exceeds the training split size");
  if (!(beta >= 0)) throw ConfigError("beta must be >= 0");
  if (grid.width * grid.stride_px != synth.image_w || grid.height * grid.stride_px != synth.image_h) {
    throw ConfigError("layout grid must cover the image exactly");
  }
  if (synth.image_h != 128 || synth.image_w != 192) {
    throw ConfigError("the network shapes are fixed to 128 x 192 images");
  }
  for (double a : alpha_grid) {
    if (!(a >= 0)) throw ConfigError("alpha grid values must be >= 0");
  }
}

ChannelNormalizer ChannelNormalizer::fit(const std::vector<const Tensor<float>*>& maps) {
  if (maps.empty()) throw ContractViolation("normalizer needs at least one feature map");
  const int C = maps.front()->dim(2);
  std::vector<double> sum(static_cast<std::size_t>(C), 0.0), sq(static_cast<std::size_t>(C), 0.0);
  double count = 0.0;
  for (const auto* m : maps) {
    const auto& d = m->data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double v = d[i];
      sum[i % static_cast<std::size_t>(C)] += v;
      sq[i % static_cast<std::size_t>(C)] += v * v;
    }
    count += static_cast<double>(d.size() / static_cast<std::size_t>(C));
  }
  ChannelNormalizer n;
  for (int c = 0; c < C; ++c) {
    const double mean = sum[static_cast<std::size_t>(c)] / count;
    const double var = std::max(0.0, sq[static_cast<std::size_t>(c)] / count - mean * mean);
    const double sd = std::sqrt(var);
    n.mean.push_back(static_cast<float>(mean));
    n.scale.push_back(sd > 1e-8 ? static_cast<float>(sd) : 1.0f);
  }
  return n;
}

void ChannelNormalizer::apply(Tensor<float>& t) const {
  const std::size_t C = mean.size();
  if (t.rank() != 3 || static_cast<std::size_t>(t.dim(2)) != C) {
    throw ContractViolation("normalizer channel count does not match " + to_string(t.shape()));
  }
  auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = (d[i] - mean[i % C]) / scale[i % C];
}

ChannelNormalizer fit_layout_scale(const std::vector<Tensor<float>>& layouts) {
  if (layouts.empty()) throw ContractViolation("layout scale needs at least one layout");
  const std::size_t C = static_cast<std::size_t>(layouts.front().dim(2));
  std::vector<double> sq(C, 0.0);
  double count = 0.0;
  for (const auto& l : layouts) {
    const auto d = l.data();
    for (std::size_t i = 0; i < d.size(); ++i) sq[i % C] += static_cast<double>(d[i]) * d[i];
    count += static_cast<double>(d.size() / C);
  }
  ChannelNormalizer n;
  for (std::size_t c = 0; c < C; ++c) {
    const double rms = std::sqrt(sq[c] / count);
    n.mean.push_back(0.0f);
    n.scale.push_back(rms > 1e-8 ? static_cast<float>(rms) : 1.0f);
  }
  return n;
}

std::vector<Tensor<float>> scale_layouts(const ChannelNormalizer& scale, std::vector<Tensor<float>> layouts) {
  for (auto& l : layouts) scale.apply(l);
  return layouts;
}

namespace {

std::vector<int> permutation(int n, Rng& rng) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i)))]);
  }
  return order;
}

void check_finite(double loss, const std::string& phase, int epoch, int step) {
  if (!std::isfinite(loss)) {
    throw DivergenceError(phase + ": loss is " + std::to_string(loss) + " at epoch " + std::to_string(epoch) +
                          ", step " + std::to_string(step));
  }
}

/// Scales each scene's loss by 1 / batch and steps once per batch.
template <typename Fn>
double run_epoch(Sgd<float>& opt, int n, int batch, Rng& rng, const std::string& phase, int epoch, Fn&& scene_loss) {
  const auto order = permutation(n, rng);
  double total = 0.0;
  int pending = 0;
  for (int step = 0; step < n; ++step) {
    const double loss = scene_loss(order[static_cast<std::size_t>(step)], 1.0f / static_cast<float>(batch));
    check_finite(loss, phase, epoch, step);
    total += loss;
    if (++pending == batch) {
      opt.step();
      pending = 0;
    }
  }
  if (pending > 0) opt.step();
  return n > 0 ? total / n : 0.0;
}

Tensor<float> to_float(const Tensor<double>& t) { return t.cast<float>(); }

}  // namespace

SceneData prepare_scene(const SyntheticScene& scene, const FeatureNormalizers& normalizers,
                        const BenchmarkConfig& config) {
  SceneData d;
  d.features = compute_backbone(scene.image);
  normalizers.c2.apply(d.features.c2);
  normalizers.c3.apply(d.features.c3);
  normalizers.c5.apply(d.features.c5);
  normalizers.c6.apply(d.features.c6);
  d.descriptor = appearance_descriptor(scene.image);
  d.target = to_float(rasterize_target_layout(scene.annotations, config.mixture, config.grid, config.kernel).values);
  d.truth = scene.annotations;
  return d;
}

PreparedData prepare_data(const SyntheticDataset& dataset, const BenchmarkConfig& config) {
  if (dataset.train.empty() || dataset.val.empty()) throw DataError("dataset needs non-empty train and val splits");
  std::vector<BackboneFeatures> raw;
  raw.reserve(dataset.train.size());
  for (const auto& s : dataset.train) raw.push_back(compute_backbone(s.image));
  auto fit = [&](Tensor<float> BackboneFeatures::*level) {
    std::vector<const Tensor<float>*> maps;
    for (const auto& f : raw) maps.push_back(&(f.*level));
    return ChannelNormalizer::fit(maps);
  };
  PreparedData out;
  out.normalizers = {fit(&BackboneFeatures::c2), fit(&BackboneFeatures::c3), fit(&BackboneFeatures::c5),
                     fit(&BackboneFeatures::c6)};
  raw.clear();
  for (const auto& s : dataset.train) out.train.push_back(prepare_scene(s, out.normalizers, config));
  for (const auto& s : dataset.val) out.val.push_back(prepare_scene(s, out.normalizers, config));
  return out;
}

ToyDetector<float> make_detector(const BenchmarkConfig& config) {
  return ToyDetector<float>(config.detector, config.mixture, kBackboneChannels, 4.0);
}

void train_detector(ToyDetector<float>& detector, EarlyFusion<float>* fusion, const std::vector<SceneData>& scenes,
                    const std::vector<Tensor<float>>* layouts, double learning_rate, int epochs,
                    const TrainConfig& train, Rng rng, TrainingLog& log, const std::string& phase) {
  if ((fusion == nullptr) != (layouts == nullptr)) throw ContractViolation("fusion and layouts go together");
  if (layouts && layouts->size() != scenes.size()) throw ContractViolation("one layout per scene required");
  auto params = detector.parameters();
  if (fusion) {
    for (auto* p : fusion->parameters()) params.push_back(p);
  }
  Sgd<float> opt(params, learning_rate, train.momentum);
  std::vector<std::vector<signed char>> labels;
  labels.reserve(scenes.size());
  for (const auto& s : scenes) {
    labels.push_back(label_anchors(detector.anchors(), s.features.c2.dim(0), s.features.c2.dim(1), detector.stride(),
                                   s.truth, detector.config()));
  }
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const double mean = run_epoch(opt, static_cast<int>(scenes.size()), train.batch_size, rng, phase, epoch,
                                  [&](int i, float weight) {
                                    const auto& s = scenes[static_cast<std::size_t>(i)];
                                    Tape<float> tape;
                                    Var x = tape.constant(s.features.c2);
                                    if (fusion) {
                                      x = fusion->fuse(tape, x, tape.constant((*layouts)[static_cast<std::size_t>(i)]));
                                    }
                                    const Var z = detector.logits(tape, x);
                                    const auto sample = sample_anchors(labels[static_cast<std::size_t>(i)],
                                                                       tape.value(z).data(), detector.config(), rng);
                                    const std::vector<float> targets(sample.targets.begin(), sample.targets.end());
                                    const Var loss = nn::sigmoid_cross_entropy<float>(tape, z, sample.indices, targets);
                                    const double value = tape.value(loss)[0];
                                    if (std::isfinite(value)) tape.backward(nn::scale(tape, loss, weight));
                                    return value;
                                  });
    log.push_back({phase, epoch, "detector_loss", mean});
    spdlog::info("{} epoch {}: detector loss {:.4f}", phase, epoch, mean);
  }
}

std::vector<std::vector<Detection>> run_detector(const ToyDetector<float>& detector, const EarlyFusion<float>* fusion,
                                                 const std::vector<SceneData>& scenes,
                                                 const std::vector<Tensor<float>>* layouts,
                                                 std::optional<double> late_alpha, const BenchmarkConfig& config) {
  if ((fusion || late_alpha) && !layouts) throw ContractViolation("fusion needs layouts");
  std::vector<std::vector<Detection>> out;
  out.reserve(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto& s = scenes[i];
    Tensor<float> logits;
    if (fusion) {
      Tape<float> tape;
      const Var x = fusion->fuse(tape, tape.constant(s.features.c2), tape.constant((*layouts)[i]));
      logits = tape.value(detector.logits(tape, x));
    } else {
      logits = detector.logit_values(s.features.c2);
    }
    if (late_alpha) {
      LayoutGrid grid(config.grid, config.mixture.num_channels());
      grid.values = (*layouts)[i].cast<double>();
      out.push_back(decode_detections(detector, logits, LateLayout{&grid, &config.mixture, *late_alpha}));
    } else {
      out.push_back(decode_detections(detector, logits));
    }
  }
  return out;
}

ApTriple evaluate_detections(const std::vector<std::vector<Detection>>& detections,
                             const std::vector<SceneData>& scenes, int num_categories) {
  std::vector<std::vector<BoxSpec>> truth;
  truth.reserve(scenes.size());
  for (const auto& s : scenes) truth.push_back(s.truth);
  return {100.0 * evaluate_ap(detections, truth, 0.5, num_categories).mean,
          100.0 * evaluate_ap(detections, truth, 0.7, num_categories).mean,
          100.0 * evaluate_ap(detections, truth, 0.75, num_categories).mean};
}

Tensor<float> RetrievalStage::coarse_layout(int cluster) const {
  Tensor<float> out = retrieve(codebook, cluster).values.cast<float>();
  float peak = 0.0f;
  for (float v : out.data()) peak = std::max(peak, v);
  if (peak > 0.0f) {
    for (auto& v : out.data()) v /= peak;
  }
  return out;
}

Codebook build_scene_codebook(const std::vector<SyntheticScene>& scenes, const BenchmarkConfig& config, int clusters,
                              std::uint64_t seed) {
  FeatureMatrix features(static_cast<int>(scenes.size()), kDescriptorRows * kDescriptorCols);
  std::vector<std::vector<BoxSpec>> annotations;
  annotations.reserve(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto d = appearance_descriptor(scenes[i].image);
    std::copy(d.begin(), d.end(), features.row(static_cast<int>(i)).begin());
    annotations.push_back(scenes[i].annotations);
  }
  return Codebook::build(features, annotations, clusters, seed, config.mixture, config.kernel, config.grid,
                         config.kmeans);
}

std::uint64_t schedule_codebook_seed(std::uint64_t seed) { return Rng(Rng(seed).fork(2).next()).fork(1).next(); }

ClassifierConfig classifier_config(const BenchmarkConfig& config, int clusters) {
  return {4, 6, kBackboneChannels, config.classifier_width, clusters};
}

RetrievalStage train_retrieval(const SyntheticDataset& dataset, const PreparedData& data, const BenchmarkConfig& config,
                               int clusters, std::uint64_t seed, TrainingLog& log) {
  const Rng root(seed);
  RetrievalStage r;
  r.codebook = build_scene_codebook(dataset.train, config, clusters, root.fork(1).next());

  Rng init = root.fork(2);
  r.classifier = std::make_unique<ClassifierHead<float>>(classifier_config(config, clusters), init);
  Sgd<float> opt(r.classifier->parameters(), config.train.step2_lr, config.train.momentum);
  Rng order = root.fork(3);
  const std::string phase = "step2.classifier";
  for (int epoch = 0; epoch < config.train.classifier_epochs; ++epoch) {
    const double mean = run_epoch(opt, static_cast<int>(data.train.size()), config.train.batch_size, order, phase,
                                  epoch, [&](int i, float weight) {
                                    Tape<float> tape;
                                    const Var p = r.classifier->probabilities(
                                        tape, tape.constant(data.train[static_cast<std::size_t>(i)].features.c5));
                                    const Var loss = cls_loss(tape, p, r.codebook.entries()[static_cast<std::size_t>(i)].cluster);
                                    const double value = tape.value(loss)[0];
                                    if (std::isfinite(value)) tape.backward(nn::scale(tape, loss, weight));
                                    return value;
                                  });
    log.push_back({phase, epoch, "cls_loss", mean});
    spdlog::info("{} epoch {}: cls loss {:.4f}", phase, epoch, mean);
  }

  auto predict = [&](const SceneData& s) {
    const auto p = r.classifier->classify(s.features.c5);
    return std::make_pair(argmax_cluster<float>(p.data()), p);
  };
  for (const auto& s : data.train) r.train_clusters.push_back(predict(s).first);
  int correct = 0;
  double loss = 0.0;
  for (const auto& s : data.val) {
    const auto [cluster, p] = predict(s);
    const int label = r.codebook.nearest_cluster(s.descriptor);
    correct += cluster == label ? 1 : 0;
    loss -= std::log(std::max(1e-12, static_cast<double>(p[static_cast<std::size_t>(label)])));
    r.val_clusters.push_back(cluster);
  }
  r.val_accuracy = static_cast<double>(correct) / static_cast<double>(data.val.size());
  r.val_loss = loss / static_cast<double>(data.val.size());
  log.push_back({phase, config.train.classifier_epochs, "val_accuracy", r.val_accuracy});
  log.push_back({phase, config.train.classifier_epochs, "val_cls_loss", r.val_loss});
  spdlog::info("{}: validation accuracy {:.4f}, loss {:.4f}", phase, r.val_accuracy, r.val_loss);
  return r;
}

std::vector<Tensor<float>> retrieved_layouts(const RetrievalStage& retrieval, const std::vector<int>& clusters) {
  std::vector<Tensor<float>> per_cluster;
  for (int c = 0; c < retrieval.codebook.size(); ++c) per_cluster.push_back(retrieval.coarse_layout(c));
  std::vector<Tensor<float>> out;
  out.reserve(clusters.size());
  for (int c : clusters) out.push_back(per_cluster.at(static_cast<std::size_t>(c)));
  return out;
}

LayoutModel make_layout_model(LayoutKind kind, bool use_transform, bool use_refine, const BenchmarkConfig& config,
                              Rng& rng) {
  LayoutModel m;
  m.kind = kind;
  if (kind == LayoutKind::transform_net) {
    TransformConfig tc = config.transform;
    tc.layout_channels = config.mixture.num_channels();
    tc.grid_h = config.grid.height;
    tc.grid_w = config.grid.width;
    tc.c3_channels = kBackboneChannels;
    tc.c6_channels = kBackboneChannels;
    tc.use_transform = use_transform;
    tc.use_refine = use_refine;
    m.stn = std::make_unique<TransformNet<float>>(tc, rng);
  } else if (kind == LayoutKind::fcn) {
    FcnConfig fc = config.fcn;
    fc.layout_channels = config.mixture.num_channels();
    fc.grid_h = config.grid.height;
    fc.grid_w = config.grid.width;
    fc.c3_channels = kBackboneChannels;
    fc.c6_channels = kBackboneChannels;
    m.fcn = std::make_unique<FcnLayoutNet<float>>(fc, rng);
  }
  return m;
}

LayoutModel::Prediction LayoutModel::predict(const SceneData& scene, const Tensor<float>& s_c) const {
  Prediction p;
  if (kind == LayoutKind::transform_net) {
    Tape<float> tape;
    const auto out = stn->forward(tape, tape.constant(s_c), tape.constant(scene.features.c6),
                                  tape.constant(scene.features.c3));
    if (out.theta.valid()) p.theta = AffineParams::from(tape.value(out.theta));
    p.warped = tape.value(out.warped);
    p.layout = tape.value(out.layout);
  } else if (kind == LayoutKind::fcn) {
    Tape<float> tape;
    p.layout = tape.value(fcn->forward(tape, tape.constant(scene.features.c3), tape.constant(scene.features.c6)));
    p.warped = p.layout;
  } else {
    p.warped = s_c;
    p.layout = s_c;
  }
  return p;
}

ParameterList<float> LayoutModel::parameters() {
  if (stn) return stn->parameters();
  if (fcn) return fcn->parameters();
  return {};
}

namespace {

Var layout_objective(const LayoutModel& m, Tape<float>& tape, const SceneData& s, const Tensor<float>& s_c,
                     double beta) {
  const Var target = tape.constant(s.target);
  if (m.kind == LayoutKind::transform_net) {
    const auto out = m.stn->forward(tape, tape.constant(s_c), tape.constant(s.features.c6),
                                    tape.constant(s.features.c3));
    return stn_loss(tape, out.layout, target, out.theta, beta);
  }
  if (m.kind == LayoutKind::fcn) {
    return layout_loss(tape, m.fcn->forward(tape, tape.constant(s.features.c3), tape.constant(s.features.c6)), target);
  }
  return layout_loss(tape, tape.constant(s_c), target);
}

std::pair<double, double> validation_layout_stats(const LayoutModel& m, const std::vector<SceneData>& val,
                                                  const std::vector<Tensor<float>>& val_sc, double beta) {
  double loss = 0.0, theta = 0.0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    Tape<float> tape;
    loss += tape.value(layout_objective(m, tape, val[i], val_sc[i], beta))[0];
    if (m.kind == LayoutKind::transform_net && m.stn->config().use_transform) {
      theta += m.predict(val[i], val_sc[i]).theta->distance_to_identity();
    }
  }
  const double n = static_cast<double>(val.size());
  return {loss / n, theta / n};
}

}  // namespace

LayoutTrainingReport train_layout_model(LayoutModel& model, const PreparedData& data,
                                        const std::vector<Tensor<float>>& train_sc,
                                        const std::vector<Tensor<float>>& val_sc, double beta,
                                        const BenchmarkConfig& config, Rng rng, TrainingLog& log,
                                        const std::string& phase) {
  LayoutTrainingReport report;
  report.initial_loss = validation_layout_stats(model, data.val, val_sc, beta).first;
  log.push_back({phase, 0, "val_stn_loss_initial", report.initial_loss});
  const auto params = model.parameters();
  if (!params.empty()) {
    Sgd<float> opt(params, config.train.step2_lr, config.train.momentum);
    for (int epoch = 0; epoch < config.train.layout_epochs; ++epoch) {
      const double mean = run_epoch(opt, static_cast<int>(data.train.size()), config.train.batch_size, rng, phase,
                                    epoch, [&](int i, float weight) {
                                      Tape<float> tape;
                                      const Var loss = layout_objective(model, tape, data.train[static_cast<std::size_t>(i)],
                                                                        train_sc[static_cast<std::size_t>(i)], beta);
                                      const double value = tape.value(loss)[0];
                                      if (std::isfinite(value)) tape.backward(nn::scale(tape, loss, weight));
                                      return value;
                                    });
      log.push_back({phase, epoch, "stn_loss", mean});
      spdlog::info("{} epoch {}: stn loss {:.6f}", phase, epoch, mean);
    }
  }
  const auto [loss, theta] = validation_layout_stats(model, data.val, val_sc, beta);
  report.final_loss = loss;
  report.mean_theta_distance = theta;
  log.push_back({phase, config.train.layout_epochs, "val_stn_loss", loss});
  log.push_back({phase, config.train.layout_epochs, "val_theta_distance", theta});
  spdlog::info("{}: validation stn loss {:.6f} -> {:.6f}, mean |theta - id| {:.4f}", phase, report.initial_loss, loss,
               theta);
  return report;
}

std::vector<Tensor<float>> predict_layouts(const LayoutModel& model, const std::vector<SceneData>& scenes,
                                           const std::vector<Tensor<float>>& s_c) {
  std::vector<Tensor<float>> out;
  out.reserve(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) out.push_back(model.predict(scenes[i], s_c[i]).layout);
  return out;
}

namespace {

double best_alpha(const ToyDetector<float>& detector, const std::vector<SceneData>& val,
                  const std::vector<Tensor<float>>& layouts, const BenchmarkConfig& config) {
  double best = config.fusion.alpha, best_ap = -1.0;
  for (double a : config.alpha_grid) {
    const double ap =
        evaluate_detections(run_detector(detector, nullptr, val, &layouts, a, config), val, config.mixture.num_categories)
            .ap50;
    spdlog::info("late fusion alpha {}: AP50 {:.2f}", a, ap);
    if (ap > best_ap) {
      best_ap = ap;
      best = a;
    }
  }
  return best;
}

}  // namespace

TrainedSystem train_schedule(const SyntheticDataset& dataset, const BenchmarkConfig& config, std::uint64_t seed) {
  config.validate();
  const Rng root(seed);
  const auto data = prepare_data(dataset, config);
  const int categories = config.mixture.num_categories;

  TrainedSystem sys{config, data.normalizers, {}, {}, make_detector(config), nullptr, {}, {}, {}, {}, {}, {}};
  train_detector(sys.detector, nullptr, data.train, nullptr, config.train.detector_lr, config.train.detector_epochs,
                 config.train, root.fork(1), sys.log, "step1.detector");
  sys.step1_metrics = evaluate_detections(run_detector(sys.detector, nullptr, data.val, nullptr, std::nullopt, config),
                                          data.val, categories);
  sys.log.push_back({"step1.detector", config.train.detector_epochs, "val_ap50", sys.step1_metrics.ap50});

  sys.retrieval = train_retrieval(dataset, data, config, config.clusters, root.fork(2).next(), sys.log);
  const auto train_sc = retrieved_layouts(sys.retrieval, sys.retrieval.train_clusters);
  const auto val_sc = retrieved_layouts(sys.retrieval, sys.retrieval.val_clusters);
  Rng init = root.fork(3);
  sys.layout = make_layout_model(LayoutKind::transform_net, config.transform.use_transform,
                                 config.transform.use_refine, config, init);
  sys.layout_report = train_layout_model(sys.layout, data, train_sc, val_sc, config.beta, config, root.fork(4),
                                         sys.log, "step2.transform");

  const auto train_sl = predict_layouts(sys.layout, data.train, train_sc);
  const auto val_sl = predict_layouts(sys.layout, data.val, val_sc);
  const std::string phase = "step3.finetune";
  switch (config.fusion.mode) {
    case FusionMode::early: {
      sys.fusion = std::make_unique<EarlyFusion<float>>(kBackboneChannels, config.mixture.num_channels(),
                                                        config.fusion.method);
      sys.layout_scale = fit_layout_scale(train_sl);
      const auto train_in = scale_layouts(sys.layout_scale, train_sl);
      const auto val_in = scale_layouts(sys.layout_scale, val_sl);
      sys.step3_start_metrics = evaluate_detections(
          run_detector(sys.detector, sys.fusion.get(), data.val, &val_in, std::nullopt, config), data.val, categories);
      train_detector(sys.detector, sys.fusion.get(), data.train, &train_in, config.train.step3_lr,
                     config.train.finetune_epochs, config.train, root.fork(5), sys.log, phase);
      sys.final_metrics = evaluate_detections(
          run_detector(sys.detector, sys.fusion.get(), data.val, &val_in, std::nullopt, config), data.val, categories);
      break;
    }
    case FusionMode::late:
    case FusionMode::none: {
      sys.step3_start_metrics = sys.step1_metrics;
      train_detector(sys.detector, nullptr, data.train, nullptr, config.train.step3_lr, config.train.finetune_epochs,
                     config.train, root.fork(5), sys.log, phase);
      if (config.fusion.mode == FusionMode::late) {
        if (!config.alpha_grid.empty()) sys.config.fusion.alpha = best_alpha(sys.detector, data.val, val_sl, config);
        sys.final_metrics = evaluate_detections(
            run_detector(sys.detector, nullptr, data.val, &val_sl, sys.config.fusion.alpha, config), data.val,
            categories);
      } else {
        sys.final_metrics = evaluate_detections(
            run_detector(sys.detector, nullptr, data.val, nullptr, std::nullopt, config), data.val, categories);
      }
      break;
    }
  }
  sys.log.push_back({phase, config.train.finetune_epochs, "val_ap50", sys.final_metrics.ap50});
  sys.log.push_back({phase, config.train.finetune_epochs, "val_ap70", sys.final_metrics.ap70});
  sys.log.push_back({phase, config.train.finetune_epochs, "val_ap75", sys.final_metrics.ap75});
  return sys;
}

std::vector<Tensor<float>> system_layouts(const TrainedSystem& system, const std::vector<SceneData>& scenes) {
  std::vector<Tensor<float>> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) {
    const auto p = system.retrieval.classifier->classify(s.features.c5);
    const int cluster = argmax_cluster<float>(p.data());
    out.push_back(system.layout.predict(s, system.retrieval.coarse_layout(cluster)).layout);
  }
  return out;
}

std::vector<std::vector<Detection>> system_detect(const TrainedSystem& system, const std::vector<SceneData>& scenes) {
  const auto& cfg = system.config;
  if (cfg.fusion.mode == FusionMode::none) {
    return run_detector(system.detector, nullptr, scenes, nullptr, std::nullopt, cfg);
  }
  const auto layouts = system_layouts(system, scenes);
  if (cfg.fusion.mode == FusionMode::late) {
    return run_detector(system.detector, nullptr, scenes, &layouts, cfg.fusion.alpha, cfg);
  }
  const auto scaled = scale_layouts(system.layout_scale, layouts);
  return run_detector(system.detector, system.fusion.get(), scenes, &scaled, std::nullopt, cfg);
}

const std::vector<std::string>& required_variants() {
  static const std::vector<std::string> names{"baseline", "retrieval_only", "transform", "refine",
                                              "full",     "fcn",            "beta0"};
  return names;
}

LayoutTrainingReport train_full_layout_only(const SyntheticDataset&, const PreparedData& data,
                                            const RetrievalStage& retrieval, const BenchmarkConfig& config,
                                            double beta, std::uint64_t seed) {
  const Rng root(seed);
  Rng init = root.fork(3);
  auto model = make_layout_model(LayoutKind::transform_net, true, true, config, init);
  TrainingLog log;
  return train_layout_model(model, data, retrieved_layouts(retrieval, retrieval.train_clusters),
                            retrieved_layouts(retrieval, retrieval.val_clusters), beta, config, root.fork(4), log,
                            "step2.transform.beta" + std::to_string(beta));
}

AblationReport ablation_suite(const SyntheticDataset& dataset, const BenchmarkConfig& config, std::uint64_t seed,
                              bool include_extras) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const Rng root(seed);
  const auto data = prepare_data(dataset, config);
  const int categories = config.mixture.num_categories;
  TrainingLog log;
  AblationReport report;

  auto step1 = make_detector(config);
  train_detector(step1, nullptr, data.train, nullptr, config.train.detector_lr, config.train.detector_epochs,
                 config.train, root.fork(1), log, "step1.detector");
  const auto retrieval = train_retrieval(dataset, data, config, config.clusters, root.fork(2).next(), log);
  report.classifier_accuracy = retrieval.val_accuracy;
  const auto train_sc = retrieved_layouts(retrieval, retrieval.train_clusters);
  const auto val_sc = retrieved_layouts(retrieval, retrieval.val_clusters);

  const Rng step3_stream = root.fork(5);
  auto early = [&](const std::string& name, const std::vector<Tensor<float>>& train_l,
                   const std::vector<Tensor<float>>& val_l, EarlyFusionMethod method) {
    auto det = step1;
    EarlyFusion<float> fusion(kBackboneChannels, config.mixture.num_channels(), method);
    const auto scale = fit_layout_scale(train_l);
    const auto train_in = scale_layouts(scale, train_l);
    const auto val_in = scale_layouts(scale, val_l);
    train_detector(det, &fusion, data.train, &train_in, config.train.step3_lr, config.train.finetune_epochs,
                   config.train, step3_stream, log, "step3." + name);
    const auto ap = evaluate_detections(run_detector(det, &fusion, data.val, &val_in, std::nullopt, config), data.val,
                                        categories);
    spdlog::info("variant {}: AP50 {:.2f} AP70 {:.2f} AP75 {:.2f}", name, ap.ap50, ap.ap70, ap.ap75);
    return ap;
  };
  auto layout_variant = [&](LayoutKind kind, bool use_transform, bool use_refine, double beta,
                            const std::string& name) {
    Rng init = root.fork(3);
    auto model = make_layout_model(kind, use_transform, use_refine, config, init);
    const auto rep = train_layout_model(model, data, train_sc, val_sc, beta, config, root.fork(4), log,
                                        "step2." + name);
    auto train_l = predict_layouts(model, data.train, train_sc);
    auto val_l = predict_layouts(model, data.val, val_sc);
    return std::make_tuple(std::move(model), rep, std::move(train_l), std::move(val_l));
  };

  auto baseline = step1;
  train_detector(baseline, nullptr, data.train, nullptr, config.train.step3_lr, config.train.finetune_epochs,
                 config.train, step3_stream, log, "step3.baseline");
  report.variants["baseline"].ap = evaluate_detections(
      run_detector(baseline, nullptr, data.val, nullptr, std::nullopt, config), data.val, categories);
  spdlog::info("variant baseline: AP50 {:.2f}", report.variants["baseline"].ap.ap50);

  report.variants["retrieval_only"].ap = early("retrieval_only", train_sc, val_sc, config.fusion.method);
  {
    auto [m, rep, tl, vl] = layout_variant(LayoutKind::transform_net, true, false, config.beta, "transform");
    report.variants["transform"] = {early("transform", tl, vl, config.fusion.method), rep.mean_theta_distance, {}};
  }
  {
    auto [m, rep, tl, vl] = layout_variant(LayoutKind::transform_net, false, true, config.beta, "refine");
    report.variants["refine"].ap = early("refine", tl, vl, config.fusion.method);
  }
  {
    auto [m, rep, tl, vl] = layout_variant(LayoutKind::transform_net, true, true, config.beta, "full");
    report.full_layout = rep;
    report.variants["full"] = {early("full", tl, vl, config.fusion.method), rep.mean_theta_distance, {}};
    const double alpha = best_alpha(baseline, data.val, vl, config);
    report.variants["full_late"] = {
        evaluate_detections(run_detector(baseline, nullptr, data.val, &vl, alpha, config), data.val, categories),
        rep.mean_theta_distance, alpha};
    if (include_extras) {
      for (auto method : {EarlyFusionMethod::eltwise_sum, EarlyFusionMethod::eltwise_mul}) {
        const auto name = "full_" + to_string(method);
        report.variants[name] = {early(name, tl, vl, method), rep.mean_theta_distance, {}};
      }
    }
  }
  {
    auto [m, rep, tl, vl] = layout_variant(LayoutKind::fcn, false, false, config.beta, "fcn");
    report.variants["fcn"].ap = early("fcn", tl, vl, config.fusion.method);
  }
  {
    auto [m, rep, tl, vl] = layout_variant(LayoutKind::transform_net, true, true, 0.0, "beta0");
    report.variants["beta0"] = {early("beta0", tl, vl, config.fusion.method), rep.mean_theta_distance, {}};
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace ltn::synth
