#include "mixmo/network.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mixmo {

void NetConfig::validate() const {
  if (M < 2) throw std::invalid_argument("net config: M must be >= 2");
  if (width < 1) throw std::invalid_argument("net config: width must be >= 1");
  if (num_classes < 2) throw std::invalid_argument("net config: num_classes must be >= 2");
  if (base_channels < 1) throw std::invalid_argument("net config: base_channels must be >= 1");
  if (input_channels < 1) throw std::invalid_argument("net config: input_channels must be >= 1");
  if (depth_blocks.size() != 3) throw std::invalid_argument("net config: depth_blocks needs 3 stages");
  for (int d : depth_blocks)
    if (d < 1) throw std::invalid_argument("net config: every stage needs >= 1 block");
}

std::size_t NetConfig::feature_channels() const { return encoder_channels() * 4; }

// --- PreActBlock --------------------------------------------------------------

template <std::floating_point T>
PreActBlock<T>::PreActBlock(const std::string& name, std::size_t in, std::size_t out,
                            std::size_t stride)
    : name_(name),
      bn1_(name + ".bn1", in),
      conv1_(name + ".conv1", {in, out, 3, stride, 1, false}),
      bn2_(name + ".bn2", out),
      conv2_(name + ".conv2", {out, out, 3, 1, 1, false}) {
  if (in != out || stride != 1) shortcut_.emplace(name + ".shortcut", Conv2dOptions{in, out, 1, stride, 0, false});
}

template <std::floating_point T>
void PreActBlock<T>::init(Rng& rng) {
  conv1_.init(rng);
  conv2_.init(rng);
  if (shortcut_) shortcut_->init(rng);
}

template <std::floating_point T>
Tensor<T> PreActBlock<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> a = relu1_.forward(bn1_.forward(x, mode), mode);
  Tensor<T> residual = conv2_.forward(relu2_.forward(bn2_.forward(conv1_.forward(a, mode), mode), mode), mode);
  if (shortcut_) return Add<T>::forward(residual, shortcut_->forward(a, mode));
  return Add<T>::forward(residual, x);
}

template <std::floating_point T>
Tensor<T> PreActBlock<T>::backward(const Tensor<T>& grad_out) {
  auto [d_res, d_skip] = Add<T>::backward(grad_out);
  Tensor<T> da = conv1_.backward(bn2_.backward(relu2_.backward(conv2_.backward(d_res))));
  if (shortcut_) {
    da += shortcut_->backward(d_skip);
    return bn1_.backward(relu1_.backward(da));
  }
  Tensor<T> dx = bn1_.backward(relu1_.backward(da));
  dx += d_skip;
  return dx;
}

template <std::floating_point T>
std::vector<Param<T>*> PreActBlock<T>::params() {
  std::vector<Param<T>*> out;
  for (Layer<T>* l : std::initializer_list<Layer<T>*>{&bn1_, &conv1_, &bn2_, &conv2_}) {
    auto p = l->params();
    out.insert(out.end(), p.begin(), p.end());
  }
  if (shortcut_) out.push_back(&shortcut_->weight());
  return out;
}

template <std::floating_point T>
std::vector<Buffer<T>> PreActBlock<T>::buffers() {
  auto out = bn1_.buffers();
  auto b2 = bn2_.buffers();
  out.insert(out.end(), b2.begin(), b2.end());
  return out;
}

template <std::floating_point T>
std::vector<Conv2d<T>*> PreActBlock<T>::convs() {
  std::vector<Conv2d<T>*> out{&conv1_, &conv2_};
  if (shortcut_) out.push_back(&*shortcut_);
  return out;
}

template <std::floating_point T>
std::vector<std::string> PreActBlock<T>::conv_names() const {
  std::vector<std::string> out{name_ + ".conv1", name_ + ".conv2"};
  if (shortcut_) out.push_back(name_ + ".shortcut");
  return out;
}

// --- CoreNetwork ------------------------------------------------------------------

template <std::floating_point T>
CoreNetwork<T>::CoreNetwork(const NetConfig& cfg)
    : final_bn_("core.final_bn", cfg.feature_channels()) {
  std::size_t in = cfg.encoder_channels();
  std::size_t total = 0;
  for (int d : cfg.depth_blocks) total += static_cast<std::size_t>(d);
  blocks_.reserve(total);
  for (std::size_t s = 0; s < 3; ++s) {
    const std::size_t out = cfg.encoder_channels() << s;
    for (int b = 0; b < cfg.depth_blocks[s]; ++b) {
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      blocks_.emplace_back("core.stage" + std::to_string(s + 1) + ".block" + std::to_string(b), in,
                           out, stride);
      in = out;
    }
  }
}

template <std::floating_point T>
void CoreNetwork<T>::init(Rng& rng) {
  for (auto& b : blocks_) b.init(rng);
}

template <std::floating_point T>
Tensor<T> CoreNetwork<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> h = x;
  for (auto& b : blocks_) h = b.forward(h, mode);
  return pool_.forward(final_relu_.forward(final_bn_.forward(h, mode), mode), mode);
}

template <std::floating_point T>
Tensor<T> CoreNetwork<T>::backward(const Tensor<T>& grad_out) {
  Tensor<T> g = final_bn_.backward(final_relu_.backward(pool_.backward(grad_out)));
  for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) g = it->backward(g);
  return g;
}

template <std::floating_point T>
std::vector<Param<T>*> CoreNetwork<T>::params() {
  std::vector<Param<T>*> out;
  for (auto& b : blocks_) {
    auto p = b.params();
    out.insert(out.end(), p.begin(), p.end());
  }
  auto p = final_bn_.params();
  out.insert(out.end(), p.begin(), p.end());
  return out;
}

template <std::floating_point T>
std::vector<Buffer<T>> CoreNetwork<T>::buffers() {
  std::vector<Buffer<T>> out;
  for (auto& b : blocks_) {
    auto p = b.buffers();
    out.insert(out.end(), p.begin(), p.end());
  }
  auto p = final_bn_.buffers();
  out.insert(out.end(), p.begin(), p.end());
  return out;
}

template <std::floating_point T>
std::vector<std::pair<std::string, Conv2d<T>*>> CoreNetwork<T>::convs() {
  std::vector<std::pair<std::string, Conv2d<T>*>> out;
  for (auto& b : blocks_) {
    auto names = b.conv_names();
    auto cs = b.convs();
    for (std::size_t i = 0; i < cs.size(); ++i) out.emplace_back(names[i], cs[i]);
  }
  return out;
}

// --- MixMoNet ----------------------------------------------------------------------

template <std::floating_point T>
MixMoNet<T>::MixMoNet(const NetConfig& cfg, std::uint64_t seed) : cfg_(cfg), core_((cfg.validate(), cfg)) {
  const auto m = static_cast<std::size_t>(cfg.M);
  const auto cin = static_cast<std::size_t>(cfg.input_channels);
  encoders_.reserve(m);
  heads_.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    encoders_.emplace_back("encoder" + std::to_string(i), Conv2dOptions{cin, cfg.encoder_channels(), 3, 1, 1, false});
    heads_.emplace_back("head" + std::to_string(i), cfg.feature_channels(),
                        static_cast<std::size_t>(cfg.num_classes));
  }
  mixers_.resize(m);
  Rng rng(seed);
  Rng enc_rng = rng.split(1), core_rng = rng.split(2), head_rng = rng.split(3);
  for (auto& e : encoders_) e.init(enc_rng);
  core_.init(core_rng);
  for (auto& h : heads_) h.init(head_rng);
}

template <std::floating_point T>
std::vector<Tensor<T>> MixMoNet<T>::forward_train(std::span<const Tensor<T>> inputs,
                                                  std::span<const MixPlan> plans, Mode mode) {
  const auto m = static_cast<std::size_t>(cfg_.M);
  if (inputs.size() != m) {
    throw std::invalid_argument("forward_train: expected " + std::to_string(m) + " inputs, got " +
                                std::to_string(inputs.size()));
  }
  for (const auto& x : inputs) {
    require_rank(x, 4, "forward_train input");
    inputs[0].require_same_shape(x, "forward_train inputs");
  }
  const std::size_t n = inputs[0].dim(0);
  if (plans.size() != n) {
    throw std::invalid_argument("forward_train: " + std::to_string(plans.size()) +
                                " plans for a batch of " + std::to_string(n));
  }
  std::vector<Tensor<T>> encoded;
  encoded.reserve(m);
  for (std::size_t i = 0; i < m; ++i) encoded.push_back(encoders_[i].forward(inputs[i], mode));
  const std::size_t h = encoded[0].dim(2), w = encoded[0].dim(3), hw = h * w;

  std::vector<Tensor<T>> coef(m, Tensor<T>({n, 1, h, w}));
  for (std::size_t s = 0; s < n; ++s) {
    const auto maps = mixing_coefficients(plans[s], m, h, w);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < hw; ++j) coef[i][s * hw + j] = static_cast<T>(maps[i][j]);
  }
  Tensor<T> mixed;
  for (std::size_t i = 0; i < m; ++i) {
    mixers_[i].set_mask(std::move(coef[i]));
    Tensor<T> part = mixers_[i].forward(encoded[i], mode);
    mixed = (i == 0) ? std::move(part) : Add<T>::forward(mixed, part);
  }

  const Tensor<T> features = core_.forward(mixed, mode);
  std::vector<Tensor<T>> logits;
  logits.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    logits.push_back(heads_[i].forward(features, mode));
    require_finite(logits.back(), "forward_train head " + std::to_string(i));
  }
  return logits;
}

template <std::floating_point T>
void MixMoNet<T>::backward_train(std::span<const Tensor<T>> head_grads) {
  const auto m = static_cast<std::size_t>(cfg_.M);
  if (head_grads.size() != m) throw std::invalid_argument("backward_train: one gradient per head");
  Tensor<T> d_features = heads_[0].backward(head_grads[0]);
  for (std::size_t i = 1; i < m; ++i) d_features += heads_[i].backward(head_grads[i]);
  const Tensor<T> d_mixed = core_.backward(d_features);
  for (std::size_t i = 0; i < m; ++i) encoders_[i].backward(mixers_[i].backward(d_mixed));
}

template <std::floating_point T>
InferenceOutput<T> MixMoNet<T>::forward_infer(const Tensor<T>& x) {
  const auto m = static_cast<std::size_t>(cfg_.M);
  Tensor<T> summed = encoders_[0].forward(x, Mode::Eval);
  for (std::size_t i = 1; i < m; ++i) summed = Add<T>::forward(summed, encoders_[i].forward(x, Mode::Eval));
  const Tensor<T> features = core_.forward(summed, Mode::Eval);
  InferenceOutput<T> out;
  for (std::size_t i = 0; i < m; ++i) {
    out.head_logits.push_back(heads_[i].forward(features, Mode::Eval));
    require_finite(out.head_logits.back(), "forward_infer head " + std::to_string(i));
    out.head_probs.push_back(softmax(out.head_logits.back()));
  }
  out.ensemble_probs = Tensor<T>(out.head_probs[0].shape());
  for (std::size_t j = 0; j < out.ensemble_probs.size(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += out.head_probs[i][j];
    out.ensemble_probs[j] = static_cast<T>(s / static_cast<double>(m));
  }
  return out;
}

template <std::floating_point T>
std::vector<Param<T>*> MixMoNet<T>::params() {
  std::vector<Param<T>*> out;
  for (auto& e : encoders_) out.push_back(&e.weight());
  auto core = core_.params();
  out.insert(out.end(), core.begin(), core.end());
  for (auto& h : heads_) {
    out.push_back(&h.weight());
    out.push_back(&h.bias());
  }
  return out;
}

template <std::floating_point T>
std::vector<Buffer<T>> MixMoNet<T>::buffers() {
  return core_.buffers();
}

template <std::floating_point T>
void MixMoNet<T>::zero_grad() {
  for (auto* p : params()) p->zero_grad();
}

template <std::floating_point T>
std::size_t MixMoNet<T>::num_params() {
  std::size_t n = 0;
  for (auto* p : params()) n += p->value.size();
  return n;
}

template <std::floating_point T>
std::size_t MixMoNet<T>::baseline_num_params() {
  const std::size_t extra_encoder = encoders_[0].weight().value.size();
  const std::size_t extra_head = heads_[0].weight().value.size() + heads_[0].bias().value.size();
  return num_params() - (encoders_.size() - 1) * (extra_encoder + extra_head);
}

// --- analysis ----------------------------------------------------------------------

template <std::floating_point T>
double mimo_equivalence_check(MixMoNet<T>& net, std::uint64_t seed) {
  if (net.config().M != 2) throw std::invalid_argument("mimo_equivalence_check: requires M = 2");
  const Tensor<T>& w0 = net.encoder(0).weight().value;
  const Tensor<T>& w1 = net.encoder(1).weight().value;
  const std::size_t cout = w0.dim(0), cin = w0.dim(1), k = w0.dim(2), kk = k * k;
  Tensor<T> wcat({cout, 2 * cin, k, k});
  for (std::size_t o = 0; o < cout; ++o) {
    std::copy_n(w0.ptr() + o * cin * kk, cin * kk, wcat.ptr() + o * 2 * cin * kk);
    std::copy_n(w1.ptr() + o * cin * kk, cin * kk, wcat.ptr() + o * 2 * cin * kk + cin * kk);
  }
  Rng rng(seed);
  const std::size_t n = 2, h = 8, w = 8;
  Tensor<T> x0({n, cin, h, w}), x1({n, cin, h, w}), xcat({n, 2 * cin, h, w});
  for (auto& v : x0.data()) v = static_cast<T>(rng.normal());
  for (auto& v : x1.data()) v = static_cast<T>(rng.normal());
  const std::size_t plane = cin * h * w;
  for (std::size_t s = 0; s < n; ++s) {
    std::copy_n(x0.ptr() + s * plane, plane, xcat.ptr() + s * 2 * plane);
    std::copy_n(x1.ptr() + s * plane, plane, xcat.ptr() + s * 2 * plane + plane);
  }
  const std::size_t stride = net.encoder(0).options().stride, pad = net.encoder(0).options().pad;
  const Tensor<T> joint = conv2d_forward(xcat, wcat, stride, pad);
  const Tensor<T> summed =
      Add<T>::forward(conv2d_forward(x0, w0, stride, pad), conv2d_forward(x1, w1, stride, pad));
  double max_diff = 0.0, max_ref = 0.0;
  for (std::size_t i = 0; i < joint.size(); ++i) {
    max_diff = std::max(max_diff, std::abs(static_cast<double>(joint[i]) - summed[i]));
    max_ref = std::max(max_ref, std::abs(static_cast<double>(summed[i])));
  }
  return max_ref > 0.0 ? max_diff / max_ref : max_diff;
}

template <std::floating_point T>
std::vector<double> filter_l1_norms(const Tensor<T>& weight) {
  require_rank(weight, 4, "filter weights");
  const std::size_t cout = weight.dim(0), per = weight.size() / cout;
  std::vector<double> norms(cout, 0.0);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t j = 0; j < per; ++j) norms[o] += std::abs(static_cast<double>(weight[o * per + j]));
  return norms;
}

template <std::floating_point T>
ActivityReport filter_activity_report(MixMoNet<T>& net, double t_a) {
  if (!(t_a > 0.0 && t_a < 1.0)) throw std::invalid_argument("activity threshold must lie in (0,1)");
  ActivityReport report;
  report.threshold = t_a;
  for (auto& [name, conv] : net.core().convs()) {
    LayerActivity layer;
    layer.name = name;
    layer.l1_norms = filter_l1_norms(conv->weight().value);
    const double mx = *std::max_element(layer.l1_norms.begin(), layer.l1_norms.end());
    const auto active = std::count_if(layer.l1_norms.begin(), layer.l1_norms.end(),
                                      [&](double v) { return v >= t_a * mx; });
    layer.proportion = static_cast<double>(active) / static_cast<double>(layer.l1_norms.size());
    report.layers.push_back(std::move(layer));
  }
  for (int i = 0; i < net.config().M; ++i) {
    report.encoder_norms.push_back(filter_l1_norms(net.encoder(static_cast<std::size_t>(i)).weight().value));
  }
  return report;
}

template class PreActBlock<float>;
template class PreActBlock<double>;
template class CoreNetwork<float>;
template class CoreNetwork<double>;
template class MixMoNet<float>;
template class MixMoNet<double>;
template double mimo_equivalence_check(MixMoNet<float>&, std::uint64_t);
template double mimo_equivalence_check(MixMoNet<double>&, std::uint64_t);
template ActivityReport filter_activity_report(MixMoNet<float>&, double);
template ActivityReport filter_activity_report(MixMoNet<double>&, double);
template std::vector<double> filter_l1_norms(const Tensor<float>&);
template std::vector<double> filter_l1_norms(const Tensor<double>&);

}  // namespace mixmo
