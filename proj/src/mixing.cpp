#include "mixmo/mixing.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace mixmo {

namespace {

constexpr std::string_view kKindNames[] = {"linear", "cutmix", "hconcat", "vconcat",
                                           "patchup2d", "fmix", "cow"};

void check_kappa(double kappa) {
  if (!(kappa > 0.0 && kappa < 1.0)) {
    throw std::invalid_argument("mask ratio must lie in (0,1), got " + std::to_string(kappa));
  }
}

/// Sets the round(kappa * H * W) largest entries of `field` to 1.
BinaryMask threshold_top(const std::vector<double>& field, std::size_t h, std::size_t w,
                         double kappa) {
  const std::size_t n = h * w;
  const auto keep = static_cast<std::size_t>(std::llround(kappa * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return field[a] > field[b]; });
  BinaryMask mask(h, w);
  for (std::size_t i = 0; i < keep; ++i) mask.values[order[i]] = 1;
  return mask;
}

BinaryMask cutmix_mask(std::size_t h, std::size_t w, double kappa, Rng& rng) {
  auto draw = [&] {
    const auto cy = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(h) - 1));
    const auto cx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(w) - 1));
    return cutmix_rectangle(h, w, kappa, cy, cx);
  };
  BinaryMask mask = draw();
  const std::size_t c = mask.count();
  if (c == 0 || c == h * w) mask = draw();
  return mask;
}

BinaryMask concat_mask(std::size_t h, std::size_t w, double kappa, bool columns) {
  BinaryMask mask(h, w);
  if (columns) {
    const auto cut = static_cast<std::size_t>(std::llround(static_cast<double>(w) * kappa));
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < cut; ++x) mask(y, x) = 1;
  } else {
    const auto cut = static_cast<std::size_t>(std::llround(static_cast<double>(h) * kappa));
    for (std::size_t y = 0; y < cut; ++y)
      for (std::size_t x = 0; x < w; ++x) mask(y, x) = 1;
  }
  return mask;
}

// Seeds live on a canvas padded by block-1 so every pixel has block^2 candidate seeds.
BinaryMask patchup_mask(std::size_t h, std::size_t w, double kappa, Rng& rng) {
  const std::size_t k = kPatchUpBlock;
  const double rate = patchup_seed_rate(kappa, k);
  const std::size_t ch = h + k - 1, cw = w + k - 1;
  std::vector<std::uint8_t> seeds(ch * cw);
  for (auto& s : seeds) s = rng.bernoulli(rate) ? 1 : 0;
  BinaryMask mask(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      std::uint8_t hit = 0;
      for (std::size_t dy = 0; dy < k && !hit; ++dy)
        for (std::size_t dx = 0; dx < k && !hit; ++dx) hit = seeds[(y + dy) * cw + (x + dx)];
      mask(y, x) = hit;
    }
  }
  return mask;
}

double fftfreq(std::size_t i, std::size_t n) {
  const auto si = static_cast<double>(i);
  const auto sn = static_cast<double>(n);
  return (i < (n + 1) / 2) ? si / sn : (si - sn) / sn;
}

// Low-pass Gaussian field: complex white noise scaled by 1/f^decay, inverse DFT, real part.
BinaryMask fmix_mask(std::size_t h, std::size_t w, double kappa, Rng& rng) {
  using C = std::complex<double>;
  const double min_freq = 1.0 / static_cast<double>(std::max(h, w));
  std::vector<C> spec(h * w);
  for (std::size_t u = 0; u < h; ++u) {
    for (std::size_t v = 0; v < w; ++v) {
      const double fy = fftfreq(u, h), fx = fftfreq(v, w);
      const double f = std::max(std::sqrt(fy * fy + fx * fx), min_freq);
      const double scale = 1.0 / std::pow(f, kFMixDecayPower);
      const double re = rng.normal(), im = rng.normal();
      spec[u * w + v] = scale * C(re, im);
    }
  }
  const double two_pi = 2.0 * std::numbers::pi;
  std::vector<C> rows(h * w);  // inverse transform along the first axis
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t v = 0; v < w; ++v) {
      C acc(0.0, 0.0);
      for (std::size_t u = 0; u < h; ++u) {
        acc += spec[u * w + v] * std::polar(1.0, two_pi * static_cast<double>(u * y % h) / static_cast<double>(h));
      }
      rows[y * w + v] = acc;
    }
  }
  std::vector<double> field(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      C acc(0.0, 0.0);
      for (std::size_t v = 0; v < w; ++v) {
        acc += rows[y * w + v] * std::polar(1.0, two_pi * static_cast<double>(v * x % w) / static_cast<double>(w));
      }
      field[y * w + x] = acc.real();
    }
  }
  return threshold_top(field, h, w, kappa);
}

// Gaussian-smoothed white noise. The noise canvas extends 3 sigma past each border
// so the smoothing sees no boundary.
BinaryMask cow_mask(std::size_t h, std::size_t w, double kappa, Rng& rng) {
  const double sigma = kCowSigmaFraction * static_cast<double>(std::min(h, w));
  const auto radius = static_cast<std::size_t>(std::ceil(3.0 * sigma));
  const std::size_t taps = 2 * radius + 1;
  std::vector<double> kernel(taps);
  for (std::size_t i = 0; i < taps; ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(radius);
    kernel[i] = std::exp(-0.5 * d * d / (sigma * sigma));
  }
  const std::size_t nh = h + 2 * radius, nw = w + 2 * radius;
  std::vector<double> noise(nh * nw);
  for (auto& v : noise) v = rng.normal();
  std::vector<double> horiz(nh * w, 0.0);
  for (std::size_t y = 0; y < nh; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::size_t t = 0; t < taps; ++t) acc += kernel[t] * noise[y * nw + x + t];
      horiz[y * w + x] = acc;
    }
  std::vector<double> field(h * w, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::size_t t = 0; t < taps; ++t) acc += kernel[t] * horiz[(y + t) * w + x];
      field[y * w + x] = acc;
    }
  return threshold_top(field, h, w, kappa);
}

}  // namespace

std::string_view to_string(MaskKind kind) { return kKindNames[static_cast<int>(kind)]; }

std::optional<MaskKind> parse_mask_kind(std::string_view name) {
  for (std::size_t i = 0; i < std::size(kKindNames); ++i) {
    if (kKindNames[i] == name) return static_cast<MaskKind>(i);
  }
  return std::nullopt;
}

std::string valid_mask_kinds() {
  std::string out;
  for (auto n : kKindNames) {
    if (!out.empty()) out += ", ";
    out += n;
  }
  return out;
}

// --- BinaryMask ---------------------------------------------------------------

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{1}));
}

double BinaryMask::mean() const {
  return static_cast<double>(count()) / static_cast<double>(height * width);
}

BinaryMask BinaryMask::complement() const {
  BinaryMask out = *this;
  for (auto& v : out.values) v = static_cast<std::uint8_t>(1 - v);
  return out;
}

BinaryMask BinaryMask::resized(std::size_t h, std::size_t w) const {
  if (h == height && w == width) return *this;
  BinaryMask out(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t sy = y * height / h;
    for (std::size_t x = 0; x < w; ++x) out(y, x) = (*this)(sy, x * width / w);
  }
  return out;
}

// --- config / sampling -------------------------------------------------------

void MixConfig::validate() const {
  if (!(alpha > 0.0)) throw std::invalid_argument("mix config: alpha must be > 0");
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("mix config: p must lie in [0,1]");
  if (M < 2) throw std::invalid_argument("mix config: M must be >= 2");
}

double sample_kappa(double alpha, Rng& rng) {
  if (!(alpha > 0.0)) throw std::invalid_argument("sample_kappa: alpha must be > 0");
  for (;;) {
    const double g0 = rng.gamma(alpha);
    const double g1 = rng.gamma(alpha);
    const double k = g0 / (g0 + g1);
    if (k > 0.0 && k < 1.0) return k;
  }
}

std::vector<double> sample_dirichlet(double alpha, int M, Rng& rng) {
  if (!(alpha > 0.0)) throw std::invalid_argument("sample_dirichlet: alpha must be > 0");
  if (M < 2) throw std::invalid_argument("sample_dirichlet: M must be >= 2");
  std::vector<double> g(static_cast<std::size_t>(M));
  for (;;) {
    double sum = 0.0;
    for (auto& v : g) {
      v = rng.gamma(alpha);
      sum += v;
    }
    if (sum > 0.0) {
      for (auto& v : g) v /= sum;
      return g;
    }
  }
}

BinaryMask cutmix_rectangle(std::size_t height, std::size_t width, double kappa, std::size_t cy,
                            std::size_t cx) {
  const double side = std::sqrt(kappa);
  const auto cut_h = static_cast<std::int64_t>(std::llround(static_cast<double>(height) * side));
  const auto cut_w = static_cast<std::int64_t>(std::llround(static_cast<double>(width) * side));
  const auto y1 = std::clamp<std::int64_t>(static_cast<std::int64_t>(cy) - cut_h / 2, 0,
                                           static_cast<std::int64_t>(height));
  const auto y2 = std::clamp<std::int64_t>(static_cast<std::int64_t>(cy) - cut_h / 2 + cut_h, 0,
                                           static_cast<std::int64_t>(height));
  const auto x1 = std::clamp<std::int64_t>(static_cast<std::int64_t>(cx) - cut_w / 2, 0,
                                           static_cast<std::int64_t>(width));
  const auto x2 = std::clamp<std::int64_t>(static_cast<std::int64_t>(cx) - cut_w / 2 + cut_w, 0,
                                           static_cast<std::int64_t>(width));
  BinaryMask mask(height, width);
  for (auto y = y1; y < y2; ++y)
    for (auto x = x1; x < x2; ++x) mask(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1;
  return mask;
}

double patchup_seed_rate(double kappa, std::size_t block) {
  return 1.0 - std::pow(1.0 - kappa, 1.0 / static_cast<double>(block * block));
}

MaskDraw make_mask(MaskKind kind, std::size_t height, std::size_t width, double kappa_target,
                   Rng& rng) {
  check_kappa(kappa_target);
  if (height < 2 || width < 2) throw std::invalid_argument("make_mask: H and W must be >= 2");
  MaskDraw out;
  out.ratio.target = kappa_target;
  switch (kind) {
    case MaskKind::Linear:
      out.ratio.effective = kappa_target;
      return out;
    case MaskKind::CutMix:
      out.mask = cutmix_mask(height, width, kappa_target, rng);
      break;
    case MaskKind::HConcat:
      out.mask = concat_mask(height, width, kappa_target, true);
      break;
    case MaskKind::VConcat:
      out.mask = concat_mask(height, width, kappa_target, false);
      break;
    case MaskKind::PatchUp2D:
      out.mask = patchup_mask(height, width, kappa_target, rng);
      break;
    case MaskKind::FMix:
      out.mask = fmix_mask(height, width, kappa_target, rng);
      break;
    case MaskKind::Cow:
      out.mask = cow_mask(height, width, kappa_target, rng);
      break;
  }
  out.ratio.effective = out.mask->mean();
  return out;
}

double schedule_p(double p, int epoch, int total_epochs) {
  if (total_epochs <= 0 || epoch < 1 || epoch > total_epochs) {
    throw std::invalid_argument("schedule_p: epoch " + std::to_string(epoch) + " outside [1, " +
                                std::to_string(total_epochs) + "]");
  }
  if (12LL * epoch <= 11LL * total_epochs) return p;
  return p * static_cast<double>(total_epochs - epoch) / (static_cast<double>(total_epochs) / 12.0);
}

MixPlan sample_plan(const MixConfig& cfg, bool binary, bool outside, std::size_t height,
                    std::size_t width, Rng& rng) {
  cfg.validate();
  const auto m = static_cast<std::size_t>(cfg.M);
  MixPlan plan;
  plan.kind = cfg.kind;
  plan.binary_applied = binary && cfg.kind != MaskKind::Linear;

  if (m == 2) {
    const double kappa = sample_kappa(cfg.alpha, rng);
    if (!plan.binary_applied) {
      plan.ratio = {kappa, kappa};
    } else {
      MaskDraw draw = make_mask(cfg.kind, height, width, kappa, rng);
      plan.outside = outside;
      plan.ratio = draw.ratio;
      plan.mask = std::move(draw.mask);
      if (outside) {
        plan.mask = plan.mask->complement();
        plan.ratio = {1.0 - plan.ratio.target, plan.mask->mean()};
      }
    }
    plan.target_kappas = {plan.ratio.target, 1.0 - plan.ratio.target};
    plan.kappas = {plan.ratio.effective, 1.0 - plan.ratio.effective};
    return plan;
  }

  plan.target_kappas = sample_dirichlet(cfg.alpha, cfg.M, rng);
  plan.kappas = plan.target_kappas;
  if (plan.binary_applied) {
    plan.patched = static_cast<std::size_t>(rng.uniform_int(0, cfg.M - 1));
    const double kk = plan.target_kappas[plan.patched];
    MaskDraw draw = make_mask(cfg.kind, height, width, std::clamp(kk, 1e-12, 1.0 - 1e-12), rng);
    const double e = draw.ratio.effective;
    plan.mask = std::move(draw.mask);
    for (std::size_t i = 0; i < m; ++i) {
      plan.kappas[i] = (i == plan.patched) ? e : (1.0 - e) * plan.target_kappas[i] / (1.0 - kk);
    }
  }
  plan.ratio = {plan.target_kappas[0], plan.kappas[0]};
  return plan;
}

std::vector<std::vector<double>> mixing_coefficients(const MixPlan& plan, std::size_t M,
                                                     std::size_t height, std::size_t width) {
  const std::size_t hw = height * width;
  const auto scale = static_cast<double>(M);
  if (plan.target_kappas.size() != M) {
    throw std::invalid_argument("mixing_coefficients: plan has " +
                                std::to_string(plan.target_kappas.size()) + " ratios for M=" +
                                std::to_string(M));
  }
  std::vector<std::vector<double>> coef(M, std::vector<double>(hw, 0.0));
  if (!plan.binary_applied) {
    for (std::size_t i = 0; i < M; ++i) std::fill(coef[i].begin(), coef[i].end(), scale * plan.target_kappas[i]);
    return coef;
  }
  if (!plan.mask) throw std::invalid_argument("mixing_coefficients: binary plan without mask");
  const BinaryMask mask = plan.mask->resized(height, width);
  if (M == 2) {
    for (std::size_t j = 0; j < hw; ++j) {
      coef[0][j] = scale * mask.values[j];
      coef[1][j] = scale * (1.0 - mask.values[j]);
    }
    return coef;
  }
  const std::size_t k = plan.patched;
  const double rest = 1.0 - plan.target_kappas[k];
  for (std::size_t j = 0; j < hw; ++j) {
    const double mv = mask.values[j];
    coef[k][j] = scale * mv;
    for (std::size_t i = 0; i < M; ++i) {
      if (i == k) continue;
      coef[i][j] = rest > 0.0 ? scale * (1.0 - mv) * plan.target_kappas[i] / rest : 0.0;
    }
  }
  return coef;
}

// --- mixing block -------------------------------------------------------------

namespace {
template <typename T>
void check_features(std::span<const Tensor<T>> features, const BinaryMask* mask) {
  if (features.empty()) throw std::invalid_argument("mix: no features");
  for (const auto& f : features) {
    require_rank(f, 3, "mix feature");
    features[0].require_same_shape(f, "mix features");
  }
  if (mask && (mask->height != features[0].dim(1) || mask->width != features[0].dim(2))) {
    throw ShapeError("mix: mask " + std::to_string(mask->height) + "x" + std::to_string(mask->width) +
                     " does not match feature spatial dims " + shape_str(features[0].shape()));
  }
}
}  // namespace

template <std::floating_point T>
Tensor<T> mix_features(const MixPlan& plan, std::span<const Tensor<T>> features) {
  if (features.size() != 2) throw std::invalid_argument("mix_features: expects exactly 2 inputs");
  const BinaryMask* mask = plan.binary_applied ? &plan.mask.value() : nullptr;
  check_features(features, mask);
  const auto& l0 = features[0];
  const auto& l1 = features[1];
  const std::size_t c = l0.dim(0), hw = l0.dim(1) * l0.dim(2);
  Tensor<T> out(l0.shape());
  if (mask) {
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < hw; ++j) {
        const T m = static_cast<T>(mask->values[j]);
        const std::size_t i = ch * hw + j;
        out[i] = T(2) * (m * l0[i] + (T(1) - m) * l1[i]);
      }
  } else {
    const T kappa = static_cast<T>(plan.ratio.target);
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = T(2) * (kappa * l0[i] + (T(1) - kappa) * l1[i]);
    }
  }
  return out;
}

template <std::floating_point T>
Tensor<T> mix_features_multi(std::span<const double> kappas, std::size_t k, const BinaryMask& mask,
                             std::span<const Tensor<T>> features) {
  const std::size_t m = features.size();
  if (m < 2 || kappas.size() != m || k >= m) {
    throw std::invalid_argument("mix_features_multi: need M >= 2 features, M ratios and k < M");
  }
  check_features(features, &mask);
  const std::size_t c = features[0].dim(0), hw = features[0].dim(1) * features[0].dim(2);
  const double rest = 1.0 - kappas[k];
  const T scale = static_cast<T>(m);
  std::vector<T> share(m, T(0));
  if (rest > 0.0) {
    for (std::size_t i = 0; i < m; ++i) share[i] = (i == k) ? T(0) : static_cast<T>(kappas[i] / rest);
  }
  Tensor<T> out(features[0].shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t j = 0; j < hw; ++j) {
      const std::size_t idx = ch * hw + j;
      const T mv = static_cast<T>(mask.values[j]);
      T acc = T(0);
      bool first = true;
      for (std::size_t i = 0; i < m; ++i) {
        if (i == k) continue;
        const T term = share[i] * features[i][idx];
        acc = first ? term : acc + term;
        first = false;
      }
      out[idx] = scale * (mv * features[k][idx] + (T(1) - mv) * acc);
    }
  return out;
}

template Tensor<float> mix_features(const MixPlan&, std::span<const Tensor<float>>);
template Tensor<double> mix_features(const MixPlan&, std::span<const Tensor<double>>);
template Tensor<float> mix_features_multi(std::span<const double>, std::size_t, const BinaryMask&,
                                          std::span<const Tensor<float>>);
template Tensor<double> mix_features_multi(std::span<const double>, std::size_t, const BinaryMask&,
                                           std::span<const Tensor<double>>);

void write_pgm(const BinaryMask& mask, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "P5\n" << mask.width << ' ' << mask.height << "\n255\n";
  for (auto v : mask.values) os.put(static_cast<char>(v ? 255 : 0));
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace mixmo
