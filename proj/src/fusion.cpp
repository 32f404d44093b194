#include "ltn/fusion.hpp"

namespace ltn {

FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "none") return FusionMode::none;
  if (s == "late") return FusionMode::late;
  if (s == "early") return FusionMode::early;
  throw ConfigError("unknown fusion mode '" + s + "' (expected none, late or early)");
}

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::none: return "none";
    case FusionMode::late: return "late";
    case FusionMode::early: return "early";
  }
  return "?";
}

EarlyFusionMethod fusion_method_from_string(const std::string& s) {
  if (s == "conv1x1") return EarlyFusionMethod::conv1x1;
  if (s == "eltwise_sum") return EarlyFusionMethod::eltwise_sum;
  if (s == "eltwise_mul") return EarlyFusionMethod::eltwise_mul;
  throw ConfigError("unknown early fusion method '" + s + "' (expected conv1x1, eltwise_sum or eltwise_mul)");
}

std::string to_string(EarlyFusionMethod method) {
  switch (method) {
    case EarlyFusionMethod::conv1x1: return "conv1x1";
    case EarlyFusionMethod::eltwise_sum: return "eltwise_sum";
    case EarlyFusionMethod::eltwise_mul: return "eltwise_mul";
  }
  return "?";
}

void FusionConfig::validate() const {
  if (!(alpha >= 0.0)) throw ConfigError("fusion.alpha must be non-negative");
}

namespace {

template <typename T>
Tensor<T> pass_through_weight(int c, int k, EarlyFusionMethod method) {
  if (method != EarlyFusionMethod::conv1x1) return Tensor<T>({1, 1, k, c});
  Tensor<T> w({1, 1, c + k, c});
  for (int i = 0; i < c; ++i) w[static_cast<std::size_t>(i) * c + i] = T(1);
  return w;
}

}  // namespace

template <typename T>
EarlyFusion<T>::EarlyFusion(int feature_channels, int layout_channels, EarlyFusionMethod method)
    : channels_(feature_channels),
      layout_channels_(layout_channels),
      method_(method),
      weight_("fusion.w", pass_through_weight<T>(feature_channels, layout_channels, method)),
      bias_("fusion.b", Tensor<T>({feature_channels}, method == EarlyFusionMethod::eltwise_mul ? T(1) : T(0))) {}

template <typename T>
Var EarlyFusion<T>::fuse(Tape<T>& tape, Var features, Var layout) const {
  const auto& f = tape.value(features);
  const auto& l = tape.value(layout);
  if (f.rank() != 3 || f.dim(2) != channels_) {
    throw ContractViolation("early fusion: features " + to_string(f.shape()) + " do not have " +
                            std::to_string(channels_) + " channels");
  }
  if (l.rank() != 3 || l.dim(2) != layout_channels_) {
    throw ContractViolation("early fusion: layout " + to_string(l.shape()) + " does not have " +
                            std::to_string(layout_channels_) + " channels");
  }
  auto resized = nn::bilinear_resize(tape, layout, f.dim(0), f.dim(1));
  auto w = tape.param(weight_);
  auto b = tape.param(bias_);
  switch (method_) {
    case EarlyFusionMethod::conv1x1:
      return nn::conv2d(tape, nn::concat_channels(tape, features, resized), w, b);
    case EarlyFusionMethod::eltwise_sum:
      return nn::add(tape, features, nn::conv2d(tape, resized, w, b));
    case EarlyFusionMethod::eltwise_mul:
      return nn::multiply(tape, features, nn::conv2d(tape, resized, w, b));
  }
  throw ContractViolation("early fusion: unknown method");
}

template <typename T>
ParameterList<T> EarlyFusion<T>::parameters() {
  return {&weight_, &bias_};
}

template class EarlyFusion<float>;
template class EarlyFusion<double>;

}  // namespace ltn
