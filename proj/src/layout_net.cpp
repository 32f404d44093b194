#include "ltn/layout_net.hpp"

#include <cmath>

#include "ltn/numerics/optim.hpp"

namespace ltn {

double AffineParams::distance_to_identity() const {
  const auto id = identity();
  double s = 0.0;
  for (std::size_t i = 0; i < 6; ++i) s += (theta[i] - id[i]) * (theta[i] - id[i]);
  return std::sqrt(s);
}

namespace {

template <typename T>
Parameter<T> conv_weight(const std::string& name, int kh, int kw, int cin, int cout, Rng& rng) {
  return Parameter<T>(name, he_normal<T>({kh, kw, cin, cout}, kh * kw * cin, rng));
}

template <typename T>
Parameter<T> zeros(const std::string& name, Shape shape) {
  return Parameter<T>(name, Tensor<T>(std::move(shape)));
}

template <typename T>
Var conv_relu(Tape<T>& tape, Var x, Parameter<T>& w, Parameter<T>& b) {
  return nn::relu(tape, nn::conv2d(tape, x, tape.param(w), tape.param(b), 1, 1));
}

template <typename T>
void require_shape(const Tensor<T>& t, const Shape& expected, const char* what) {
  if (t.shape() != expected) {
    throw ContractViolation(std::string(what) + ": expected shape " + to_string(expected) + ", got " +
                            to_string(t.shape()));
  }
}

template <typename T>
Tensor<T> identity_theta() {
  const auto id = AffineParams::identity();
  return Tensor<T>({6}, std::vector<T>(id.begin(), id.end()));
}

}  // namespace

template <typename T>
ClassifierHead<T>::ClassifierHead(const ClassifierConfig& c, Rng& rng)
    : config_(c),
      conv_w_(conv_weight<T>("cls.conv.w", 3, 3, c.in_channels, c.conv_channels, rng)),
      conv_b_(zeros<T>("cls.conv.b", {c.conv_channels})),
      fc_w_("cls.fc.w",
            he_normal<T>({(c.in_h / 2) * (c.in_w / 2) * c.conv_channels, c.clusters},
                         (c.in_h / 2) * (c.in_w / 2) * c.conv_channels, rng)),
      fc_b_(zeros<T>("cls.fc.b", {c.clusters})) {
  if (c.in_h % 2 != 0 || c.in_w % 2 != 0) throw ContractViolation("classifier input extents must be even");
  if (c.clusters < 1) throw ContractViolation("classifier needs at least one cluster");
}

template <typename T>
Var ClassifierHead<T>::logits(Tape<T>& tape, Var c5) const {
  require_shape(tape.value(c5), {config_.in_h, config_.in_w, config_.in_channels}, "classifier input");
  auto x = nn::max_pool2d(tape, c5);
  x = conv_relu(tape, x, conv_w_, conv_b_);
  return nn::fully_connected(tape, x, tape.param(fc_w_), tape.param(fc_b_));
}

template <typename T>
Tensor<T> ClassifierHead<T>::classify(const Tensor<T>& c5) const {
  Tape<T> tape;
  return tape.value(probabilities(tape, tape.constant(c5)));
}

template <typename T>
ParameterList<T> ClassifierHead<T>::parameters() {
  return {&conv_w_, &conv_b_, &fc_w_, &fc_b_};
}

template <typename T>
int argmax_cluster(std::span<const T> p) {
  if (p.empty()) throw ContractViolation("argmax over an empty distribution");
  int best = 0;
  for (std::size_t i = 1; i < p.size(); ++i) {
    if (p[i] > p[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

template <typename T>
TransformNet<T>::TransformNet(const TransformConfig& c, Rng& rng)
    : config_(c),
      conv1_w_(conv_weight<T>("stn.conv1.w", 3, 3, c.layout_channels, c.conv1, rng)),
      conv1_b_(zeros<T>("stn.conv1.b", {c.conv1})),
      conv2_w_(conv_weight<T>("stn.conv2.w", 3, 3, c.c6_channels, c.conv2, rng)),
      conv2_b_(zeros<T>("stn.conv2.b", {c.conv2})),
      conv3_w_(conv_weight<T>("stn.conv3.w", 3, 3, c.conv1 + c.conv2, c.conv3, rng)),
      conv3_b_(zeros<T>("stn.conv3.b", {c.conv3})),
      fc1_w_("stn.fc1.w", he_normal<T>({c.c6_h * c.c6_w * c.conv3, c.fc1}, c.c6_h * c.c6_w * c.conv3, rng)),
      fc1_b_(zeros<T>("stn.fc1.b", {c.fc1})),
      fc2_w_(zeros<T>("stn.fc2.w", {c.fc1, 6})),
      fc2_b_(zeros<T>("stn.fc2.b", {6})),
      conv4_w_(conv_weight<T>("stn.conv4.w", 3, 3, c.layout_channels + c.c3_channels, c.conv4, rng)),
      conv4_b_(zeros<T>("stn.conv4.b", {c.conv4})),
      conv5_w_(zeros<T>("stn.conv5.w", {3, 3, c.conv4, c.layout_channels})),
      conv5_b_(zeros<T>("stn.conv5.b", {c.layout_channels})) {}

template <typename T>
Var TransformNet<T>::localize(Tape<T>& tape, Var s_c_small, Var c6) const {
  require_shape(tape.value(s_c_small), {config_.c6_h, config_.c6_w, config_.layout_channels}, "localize layout");
  require_shape(tape.value(c6), {config_.c6_h, config_.c6_w, config_.c6_channels}, "localize appearance");
  auto a = conv_relu(tape, s_c_small, conv1_w_, conv1_b_);
  auto b = conv_relu(tape, c6, conv2_w_, conv2_b_);
  auto x = conv_relu(tape, nn::concat_channels(tape, a, b), conv3_w_, conv3_b_);
  x = nn::relu(tape, nn::fully_connected(tape, x, tape.param(fc1_w_), tape.param(fc1_b_)));
  auto offset = nn::fully_connected(tape, x, tape.param(fc2_w_), tape.param(fc2_b_));
  return nn::add(tape, offset, tape.constant(identity_theta<T>()));
}

template <typename T>
Var TransformNet<T>::transform(Tape<T>& tape, Var s_c, Var theta) const {
  require_shape(tape.value(s_c), {config_.grid_h, config_.grid_w, config_.layout_channels}, "transform layout");
  return nn::grid_sample(tape, s_c, nn::affine_grid(tape, theta, config_.grid_h, config_.grid_w));
}

template <typename T>
Var TransformNet<T>::refine(Tape<T>& tape, Var warped, Var c3) const {
  require_shape(tape.value(warped), {config_.grid_h, config_.grid_w, config_.layout_channels}, "refine layout");
  require_shape(tape.value(c3), {config_.grid_h, config_.grid_w, config_.c3_channels}, "refine appearance");
  auto x = conv_relu(tape, nn::concat_channels(tape, warped, c3), conv4_w_, conv4_b_);
  return nn::conv2d(tape, x, tape.param(conv5_w_), tape.param(conv5_b_), 1, 1);
}

template <typename T>
typename TransformNet<T>::Output TransformNet<T>::forward(Tape<T>& tape, Var s_c, Var c6, Var c3) const {
  Output out{};
  out.warped = s_c;
  if (config_.use_transform) {
    auto small = nn::bilinear_resize(tape, s_c, config_.c6_h, config_.c6_w);
    out.theta = localize(tape, small, c6);
    out.warped = transform(tape, s_c, out.theta);
  }
  out.layout = config_.use_refine ? refine(tape, out.warped, c3) : out.warped;
  return out;
}

template <typename T>
ParameterList<T> TransformNet<T>::localization_parameters() {
  return {&conv1_w_, &conv1_b_, &conv2_w_, &conv2_b_, &conv3_w_, &conv3_b_, &fc1_w_, &fc1_b_, &fc2_w_, &fc2_b_};
}

template <typename T>
ParameterList<T> TransformNet<T>::refinement_parameters() {
  return {&conv4_w_, &conv4_b_, &conv5_w_, &conv5_b_};
}

template <typename T>
ParameterList<T> TransformNet<T>::parameters() {
  auto p = localization_parameters();
  for (auto* q : refinement_parameters()) p.push_back(q);
  return p;
}

template <typename T>
FcnLayoutNet<T>::FcnLayoutNet(const FcnConfig& c, Rng& rng)
    : config_(c),
      conv_a_w_(conv_weight<T>("fcn.conv4.w", 3, 3, c.c3_channels + c.c6_channels, c.width, rng)),
      conv_a_b_(zeros<T>("fcn.conv4.b", {c.width})),
      conv_b_w_(zeros<T>("fcn.conv5.w", {3, 3, c.width, c.layout_channels})),
      conv_b_b_(zeros<T>("fcn.conv5.b", {c.layout_channels})) {}

template <typename T>
Var FcnLayoutNet<T>::forward(Tape<T>& tape, Var c3, Var c6) const {
  require_shape(tape.value(c3), {config_.grid_h, config_.grid_w, config_.c3_channels}, "fcn appearance");
  if (tape.value(c6).rank() != 3 || tape.value(c6).dim(2) != config_.c6_channels) {
    throw ContractViolation("fcn: coarse appearance has shape " + to_string(tape.value(c6).shape()));
  }
  auto up = nn::bilinear_resize(tape, c6, config_.grid_h, config_.grid_w);
  auto x = conv_relu(tape, nn::concat_channels(tape, c3, up), conv_a_w_, conv_a_b_);
  return nn::conv2d(tape, x, tape.param(conv_b_w_), tape.param(conv_b_b_), 1, 1);
}

template <typename T>
ParameterList<T> FcnLayoutNet<T>::parameters() {
  return {&conv_a_w_, &conv_a_b_, &conv_b_w_, &conv_b_b_};
}

template <typename T>
Var cls_loss(Tape<T>& tape, Var probabilities, int label) {
  const int n = static_cast<int>(tape.value(probabilities).size());
  if (label < 0 || label >= n) {
    throw ContractViolation("label " + std::to_string(label) + " outside [0, " + std::to_string(n) + ")");
  }
  return nn::negative_log_likelihood(tape, probabilities, label, T(1e-12));
}

template <typename T>
Var layout_loss(Tape<T>& tape, Var layout, Var target) {
  return nn::mean_squared_error(tape, layout, target);
}

template <typename T>
Var reg_loss(Tape<T>& tape, Var theta) {
  if (tape.value(theta).size() != 6) {
    throw ContractViolation("reg_loss needs 6 affine parameters, got " + to_string(tape.value(theta).shape()));
  }
  return nn::mean_squared_error(tape, theta, tape.constant(identity_theta<T>().reshaped(tape.value(theta).shape())));
}

template <typename T>
Var stn_loss(Tape<T>& tape, Var layout, Var target, Var theta, double beta) {
  if (!(beta >= 0.0)) throw ContractViolation("beta must be non-negative");
  auto l = layout_loss(tape, layout, target);
  if (!theta.valid()) return l;
  return nn::add(tape, l, nn::scale(tape, reg_loss(tape, theta), static_cast<T>(beta)));
}

#define LTN_INSTANTIATE(T)                                                   \
  template class ClassifierHead<T>;                                          \
  template class TransformNet<T>;                                            \
  template class FcnLayoutNet<T>;                                            \
  template int argmax_cluster<T>(std::span<const T>);                        \
  template Var cls_loss<T>(Tape<T>&, Var, int);                              \
  template Var layout_loss<T>(Tape<T>&, Var, Var);                           \
  template Var reg_loss<T>(Tape<T>&, Var);                                   \
  template Var stn_loss<T>(Tape<T>&, Var, Var, Var, double);

LTN_INSTANTIATE(float)
LTN_INSTANTIATE(double)

#undef LTN_INSTANTIATE

}  // namespace ltn
