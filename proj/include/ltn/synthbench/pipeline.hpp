#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ltn/codebook.hpp"
#include "ltn/fusion.hpp"
#include "ltn/layout_net.hpp"
#include "ltn/synthbench/backbone.hpp"
#include "ltn/synthbench/detector.hpp"
#include "ltn/synthbench/evaluation.hpp"
#include "ltn/synthbench/generator.hpp"

namespace ltn::synth {

struct TrainConfig {
  int detector_epochs = 4;
  double detector_lr = 0.01;
  int classifier_epochs = 8;
  int layout_epochs = 6;
  double step2_lr = 0.0025;
  int finetune_epochs = 3;
  double step3_lr = 0.001;
  double momentum = 0.9;
  int batch_size = 1;

  void validate() const;
};

struct BenchmarkConfig {
  SynthConfig synth;
  MixtureSpec mixture;
  VoteKernel kernel{2.0, 0.25};  // unit peak: z = 1 / sigma^2
  GridGeometry grid{24, 16, 8.0};
  int clusters = 8;
  KMeansOptions kmeans;
  DetectorConfig detector;
  int classifier_width = 32;
  TransformConfig transform;
  FcnConfig fcn;
  double beta = 0.1;
  FusionConfig fusion;
  std::vector<double> alpha_grid{0.1, 0.3, 1.0};
  TrainConfig train;

  void validate() const;
};

/// Per-channel affine normalization of one feature level, fit on training scenes.
struct ChannelNormalizer {
  std::vector<float> mean;
  std::vector<float> scale;

  static ChannelNormalizer fit(const std::vector<const Tensor<float>*>& maps);
  void apply(Tensor<float>& t) const;
  bool operator==(const ChannelNormalizer&) const = default;
};

/// Per-channel RMS scaling of layout stacks fed to early fusion; no mean
/// shift, so an all-zero layout stays all-zero.
ChannelNormalizer fit_layout_scale(const std::vector<Tensor<float>>& layouts);
std::vector<Tensor<float>> scale_layouts(const ChannelNormalizer& scale, std::vector<Tensor<float>> layouts);

struct FeatureNormalizers {
  ChannelNormalizer c2, c3, c5, c6;
  bool operator==(const FeatureNormalizers&) const = default;
};

/// Everything the networks consume for one scene.
struct SceneData {
  BackboneFeatures features;  // normalized
  std::vector<double> descriptor;
  Tensor<float> target;  // rasterized target layout, grid_h x grid_w x K
  std::vector<BoxSpec> truth;
};

struct PreparedData {
  FeatureNormalizers normalizers;
  std::vector<SceneData> train;
  std::vector<SceneData> val;
};

/// Backbone features (normalized with training statistics), descriptors and target layouts.
PreparedData prepare_data(const SyntheticDataset& dataset, const BenchmarkConfig& config);
SceneData prepare_scene(const SyntheticScene& scene, const FeatureNormalizers& normalizers,
                        const BenchmarkConfig& config);

/// One line of the training log.
struct LogEntry {
  std::string phase;
  int epoch = 0;
  std::string metric;
  double value = 0.0;
};
using TrainingLog = std::vector<LogEntry>;

struct ApTriple {
  double ap50 = 0.0;
  double ap70 = 0.0;
  double ap75 = 0.0;
  bool operator==(const ApTriple&) const = default;
};

/// Layout source for one pipeline variant.
enum class LayoutKind { none, retrieval, transform_net, fcn };

struct LayoutModel {
  LayoutKind kind = LayoutKind::none;
  std::unique_ptr<TransformNet<float>> stn;
  std::unique_ptr<FcnLayoutNet<float>> fcn;

  struct Prediction {
    std::optional<AffineParams> theta;
    Tensor<float> warped;
    Tensor<float> layout;
  };
  Prediction predict(const SceneData& scene, const Tensor<float>& s_c) const;
  ParameterList<float> parameters();
};

struct LayoutTrainingReport {
  double initial_loss = 0.0;  // mean validation stn loss before training
  double final_loss = 0.0;
  double mean_theta_distance = 0.0;  // mean validation ||theta - identity||
};

/// The scene-layout components shared by every variant: codebook plus classifier.
struct RetrievalStage {
  Codebook codebook;
  std::unique_ptr<ClassifierHead<float>> classifier;
  std::vector<int> train_clusters;  // predicted
  std::vector<int> val_clusters;    // predicted
  double val_accuracy = 0.0;
  double val_loss = 0.0;

  /// S_c of the cluster scaled to a unit maximum over all channels.
  Tensor<float> coarse_layout(int cluster) const;
};

ToyDetector<float> make_detector(const BenchmarkConfig& config);

/// Minimize the anchor logistic loss over `scenes`; `fusion` and `layouts`
/// are either both present (early fusion) or both absent.
void train_detector(ToyDetector<float>& detector, EarlyFusion<float>* fusion, const std::vector<SceneData>& scenes,
                    const std::vector<Tensor<float>>* layouts, double learning_rate, int epochs,
                    const TrainConfig& train, Rng rng, TrainingLog& log, const std::string& phase);

/// Detections per scene; layouts feed early fusion, or late fusion when `late_alpha` is set.
std::vector<std::vector<Detection>> run_detector(const ToyDetector<float>& detector, const EarlyFusion<float>* fusion,
                                                 const std::vector<SceneData>& scenes,
                                                 const std::vector<Tensor<float>>* layouts,
                                                 std::optional<double> late_alpha, const BenchmarkConfig& config);

ApTriple evaluate_detections(const std::vector<std::vector<Detection>>& detections,
                             const std::vector<SceneData>& scenes, int num_categories);

/// Codebook over the appearance descriptors and annotations of `scenes`.
Codebook build_scene_codebook(const std::vector<SyntheticScene>& scenes, const BenchmarkConfig& config, int clusters,
                              std::uint64_t seed);

/// The k-means seed train_schedule uses for its codebook under `seed`.
std::uint64_t schedule_codebook_seed(std::uint64_t seed);

ClassifierConfig classifier_config(const BenchmarkConfig& config, int clusters);

/// Codebook over the training split, then the classifier trained on its cluster ids.
RetrievalStage train_retrieval(const SyntheticDataset& dataset, const PreparedData& data, const BenchmarkConfig& config,
                               int clusters, std::uint64_t seed, TrainingLog& log);

/// Retrieved coarse layouts (peak-normalized S_c) for a split.
std::vector<Tensor<float>> retrieved_layouts(const RetrievalStage& retrieval, const std::vector<int>& clusters);

LayoutModel make_layout_model(LayoutKind kind, bool use_transform, bool use_refine, const BenchmarkConfig& config,
                              Rng& rng);

LayoutTrainingReport train_layout_model(LayoutModel& model, const PreparedData& data,
                                        const std::vector<Tensor<float>>& train_sc,
                                        const std::vector<Tensor<float>>& val_sc, double beta,
                                        const BenchmarkConfig& config, Rng rng, TrainingLog& log,
                                        const std::string& phase);

std::vector<Tensor<float>> predict_layouts(const LayoutModel& model, const std::vector<SceneData>& scenes,
                                           const std::vector<Tensor<float>>& s_c);

/// A fully trained system in the default configuration (full model, early or late fusion).
struct TrainedSystem {
  BenchmarkConfig config;
  FeatureNormalizers normalizers;
  RetrievalStage retrieval;
  LayoutModel layout;
  ToyDetector<float> detector;
  std::unique_ptr<EarlyFusion<float>> fusion;
  ChannelNormalizer layout_scale;
  ApTriple step1_metrics;
  ApTriple step3_start_metrics;
  ApTriple final_metrics;
  LayoutTrainingReport layout_report;
  TrainingLog log;
};

/// Step 1: detector alone and the offline codebook. Step 2: classifier, then
/// the transform net. Step 3: detector and fusion fine-tuned with the layout nets fixed.
TrainedSystem train_schedule(const SyntheticDataset& dataset, const BenchmarkConfig& config, std::uint64_t seed);

/// S_l for every scene of a split through the trained system.
std::vector<Tensor<float>> system_layouts(const TrainedSystem& system, const std::vector<SceneData>& scenes);

/// Detections of the trained system on prepared scenes.
std::vector<std::vector<Detection>> system_detect(const TrainedSystem& system, const std::vector<SceneData>& scenes);

struct VariantResult {
  ApTriple ap;
  std::optional<double> mean_theta_distance;
  std::optional<double> alpha;
};

struct AblationReport {
  std::map<std::string, VariantResult> variants;
  double classifier_accuracy = 0.0;
  LayoutTrainingReport full_layout;
  double seconds = 0.0;
};

/// Names of the required variants, in report order.
const std::vector<std::string>& required_variants();

/// Trains every variant on the same data and step-1 detector and reports AP per
/// variant, plus late fusion of the full layout; extras add the element-wise
/// fusion methods.
AblationReport ablation_suite(const SyntheticDataset& dataset, const BenchmarkConfig& config, std::uint64_t seed,
                              bool include_extras = true);

/// Mean validation ||theta - identity|| of the full model trained with the given beta.
LayoutTrainingReport train_full_layout_only(const SyntheticDataset& dataset, const PreparedData& data,
                                            const RetrievalStage& retrieval, const BenchmarkConfig& config,
                                            double beta, std::uint64_t seed);

}  // namespace ltn::synth
