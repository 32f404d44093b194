#include "ltn/synthbench/evaluation.hpp"

#include <algorithm>

namespace ltn::synth {

ApReport evaluate_ap(const std::vector<std::vector<Detection>>& detections,
                     const std::vector<std::vector<BoxSpec>>& ground_truth, double iou_threshold,
                     int num_categories) {
  if (detections.size() != ground_truth.size()) {
    throw ContractViolation("evaluate_ap: detections and ground truth cover different image counts");
  }
  ApReport report;
  int counted = 0;
  for (int c = 0; c < num_categories; ++c) {
    struct Entry {
      double score;
      std::size_t image;
      const BoxSpec* box;
    };
    std::vector<Entry> entries;
    std::vector<std::vector<char>> matched(ground_truth.size());
    int positives = 0;
    for (std::size_t i = 0; i < ground_truth.size(); ++i) {
      matched[i].assign(ground_truth[i].size(), 0);
      for (const auto& g : ground_truth[i]) positives += g.category == c ? 1 : 0;
      for (const auto& d : detections[i]) {
        if (d.box.category == c) entries.push_back({d.score, i, &d.box});
      }
    }
    std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.score > b.score; });

    std::vector<double> precision, recall;
    int tp = 0;
    for (std::size_t k = 0; k < entries.size(); ++k) {
      const auto& e = entries[k];
      const auto& truth = ground_truth[e.image];
      double best = -1.0;
      int best_g = -1;
      for (std::size_t g = 0; g < truth.size(); ++g) {
        if (truth[g].category != c || matched[e.image][g]) continue;
        const double v = iou(*e.box, truth[g]);
        if (v > best) {
          best = v;
          best_g = static_cast<int>(g);
        }
      }
      if (best_g >= 0 && best >= iou_threshold) {
        matched[e.image][static_cast<std::size_t>(best_g)] = 1;
        ++tp;
      }
      precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
      recall.push_back(positives > 0 ? static_cast<double>(tp) / positives : 0.0);
    }
    double ap = 0.0;
    if (positives > 0) {
      for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
      double previous = 0.0;
      for (std::size_t k = 0; k < precision.size(); ++k) {
        ap += (recall[k] - previous) * precision[k];
        previous = recall[k];
      }
      report.mean += ap;
      ++counted;
    }
    report.per_category.push_back(ap);
  }
  if (counted > 0) report.mean /= counted;
  return report;
}

}  // namespace ltn::synth
