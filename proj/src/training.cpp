#include "mixmo/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "mixmo/weighting.hpp"

namespace mixmo {

void TrainConfig::validate() const {
  mix_config().validate();
  if (r < 1.0) throw std::invalid_argument("train config: r must be >= 1");
  if (b < 1) throw std::invalid_argument("train config: b must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (batch_size % b != 0) {
    throw std::invalid_argument("train config: batch_size " + std::to_string(batch_size) +
                                " is not divisible by b=" + std::to_string(b));
  }
  if (epochs < 0) throw std::invalid_argument("train config: epochs must be >= 0");
  if (!(lr_base > 0.0)) throw std::invalid_argument("train config: lr_base must be > 0");
  if (warmup_epochs < 0) throw std::invalid_argument("train config: warmup_epochs must be >= 0");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("train config: momentum must lie in [0,1)");
  if (weight_decay < 0.0) throw std::invalid_argument("train config: weight_decay must be >= 0");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (i > 0 && milestones[i] <= milestones[i - 1]) {
      throw std::invalid_argument("train config: milestones must be strictly increasing");
    }
    if (milestones[i] < 1 || milestones[i] >= epochs) {
      throw std::invalid_argument("train config: milestone " + std::to_string(milestones[i]) +
                                  " must lie in [1, epochs)");
    }
  }
}

BatchPlan build_batch(std::size_t dataset_size, const TrainConfig& cfg, int epoch, std::size_t height,
                      std::size_t width, Rng& rng) {
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const auto reps = static_cast<std::size_t>(cfg.b);
  const std::size_t unique = bs / reps;
  if (dataset_size < unique) {
    throw std::invalid_argument("build_batch: dataset of " + std::to_string(dataset_size) +
                                " examples is smaller than batch_size / b = " + std::to_string(unique));
  }
  BatchPlan bp;
  // Partial Fisher-Yates: the first `unique` entries are a sample without replacement.
  std::vector<std::size_t> pool(dataset_size);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < unique; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                            static_cast<std::int64_t>(dataset_size - 1)));
    std::swap(pool[i], pool[j]);
  }
  bp.indices.reserve(bs);
  for (std::size_t rep = 0; rep < reps; ++rep) bp.indices.insert(bp.indices.end(), pool.begin(), pool.begin() + unique);

  const auto M = static_cast<std::size_t>(cfg.M);
  bp.pairings.resize(M);
  bp.pairings[0].resize(bs);
  std::iota(bp.pairings[0].begin(), bp.pairings[0].end(), std::size_t{0});
  for (std::size_t i = 1; i < M; ++i) {
    bp.pairings[i] = bp.pairings[0];
    std::shuffle(bp.pairings[i].begin(), bp.pairings[i].end(), rng.engine());
  }

  bp.p_e = schedule_p(cfg.p, epoch, cfg.epochs);
  bp.binary = rng.bernoulli(bp.p_e);
  bp.outside = rng.bernoulli(0.5);
  const MixConfig mc = cfg.mix_config();
  bp.plans.reserve(bs);
  for (std::size_t n = 0; n < bs; ++n) bp.plans.push_back(sample_plan(mc, bp.binary, bp.outside, height, width, rng));
  return bp;
}

MixMoLoss mixmo_loss(std::span<const Tensor<float>> logits, std::span<const Tensor<float>> targets,
                     const std::vector<std::vector<double>>& ratios, double r) {
  const std::size_t M = logits.size();
  if (M == 0 || targets.size() != M) throw std::invalid_argument("mixmo_loss: need one target per head");
  const std::size_t n = logits[0].dim(0), k = logits[0].dim(1);
  if (ratios.size() != n) throw std::invalid_argument("mixmo_loss: need one ratio vector per sample");
  for (std::size_t i = 0; i < M; ++i) {
    logits[0].require_same_shape(logits[i], "mixmo_loss logits");
    logits[0].require_same_shape(targets[i], "mixmo_loss targets");
  }
  MixMoLoss out;
  out.weights.resize(n);
  for (std::size_t s = 0; s < n; ++s) {
    const auto& kap = ratios[s];
    if (kap.size() != M) throw std::invalid_argument("mixmo_loss: ratio vector of sample " + std::to_string(s) + " has wrong length");
    for (double v : kap) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw std::invalid_argument("mixmo_loss: ratio " + std::to_string(v) + " of sample " + std::to_string(s) +
                                    " outside [0,1]");
      }
    }
    if (std::abs(std::accumulate(kap.begin(), kap.end(), 0.0) - 1.0) > 1e-9) {
      throw std::invalid_argument("mixmo_loss: ratios of sample " + std::to_string(s) + " do not sum to 1");
    }
    if (M == 2) {
      const double w = weight2(kap[0], r);
      out.weights[s] = {w, 2.0 - w};
    } else {
      out.weights[s] = weightM(kap, r);
    }
    const double total = std::accumulate(out.weights[s].begin(), out.weights[s].end(), 0.0);
    if (std::abs(total - static_cast<double>(M)) > 1e-9) {
      throw std::logic_error("mixmo_loss: weights of sample " + std::to_string(s) + " sum to " +
                             std::to_string(total));
    }
  }
  const auto inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < M; ++i) {
    const auto ce = cross_entropy_rows(logits[i], targets[i]);
    const Tensor<float> p = softmax(logits[i]);
    Tensor<float> g({n, k});
    for (std::size_t s = 0; s < n; ++s) {
      const double w = out.weights[s][i];
      out.loss += w * ce[s] * inv_n;
      for (std::size_t j = 0; j < k; ++j) {
        g[s * k + j] = static_cast<float>(w * inv_n * (static_cast<double>(p[s * k + j]) - targets[i][s * k + j]));
      }
    }
    out.grads.push_back(std::move(g));
  }
  return out;
}

double visible_fraction(const BinaryMask& pixel_mask, const BinaryMask& visible) {
  const BinaryMask v = visible.resized(pixel_mask.height, pixel_mask.width);
  std::size_t seen = 0, kept = 0;
  for (std::size_t j = 0; j < v.values.size(); ++j) {
    seen += v.values[j];
    kept += v.values[j] & pixel_mask.values[j];
  }
  if (seen == 0) return pixel_mask.mean();
  return static_cast<double>(kept) / static_cast<double>(seen);
}

PixelCutMixResult pixel_cutmix_with(std::span<const float> x_i, int y_i, std::span<const float> x_k, int y_k,
                                    const BinaryMask& pixel_mask, const BinaryMask& visible,
                                    std::size_t channels, int num_classes) {
  const std::size_t plane = pixel_mask.height * pixel_mask.width;
  if (x_i.size() != channels * plane || x_k.size() != x_i.size()) {
    throw ShapeError("pixel_cutmix: image size does not match the mask");
  }
  PixelCutMixResult res;
  res.lambda = pixel_mask.mean();
  res.lambda_prime = visible_fraction(pixel_mask, visible);
  res.swapped = res.lambda_prime < 0.5;
  // After a swap the partner's pixels fill the mask region and x_i the rest.
  const BinaryMask m = res.swapped ? pixel_mask.complement() : pixel_mask;
  const double lam = res.swapped ? 1.0 - res.lambda_prime : res.lambda_prime;
  res.image.resize(x_i.size());
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t j = 0; j < plane; ++j) {
      const std::size_t at = c * plane + j;
      res.image[at] = m.values[j] ? x_i[at] : x_k[at];
    }
  res.target.assign(static_cast<std::size_t>(num_classes), 0.0);
  res.target[static_cast<std::size_t>(y_i)] += lam;
  res.target[static_cast<std::size_t>(y_k)] += 1.0 - lam;
  return res;
}

PixelCutMixResult apply_pixel_cutmix(std::span<const float> x_i, int y_i, std::span<const float> x_k,
                                     int y_k, const BinaryMask& visible, std::size_t channels,
                                     std::size_t height, std::size_t width, int num_classes, Rng& rng) {
  const double lambda = rng.uniform();
  const auto cy = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(height) - 1));
  const auto cx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(width) - 1));
  const BinaryMask box = cutmix_rectangle(height, width, 1.0 - lambda, cy, cx);
  return pixel_cutmix_with(x_i, y_i, x_k, y_k, box.complement(), visible, channels, num_classes);
}

BinaryMask visible_region(const MixPlan& plan, std::size_t input, std::size_t M, std::size_t height,
                          std::size_t width) {
  const auto coef = mixing_coefficients(plan, M, height, width);
  BinaryMask v(height, width);
  for (std::size_t j = 0; j < v.values.size(); ++j) v.values[j] = coef.at(input)[j] != 0.0 ? 1 : 0;
  return v;
}

std::size_t steps_per_epoch(std::size_t dataset_size, const TrainConfig& cfg) {
  const std::size_t s = dataset_size * static_cast<std::size_t>(cfg.b) / static_cast<std::size_t>(cfg.batch_size);
  return std::max<std::size_t>(s, 1);
}

double lr_at(const TrainConfig& cfg, int epoch, std::size_t step_in_epoch, std::size_t spe) {
  const double base = cfg.lr_base / cfg.b * cfg.batch_size / 128.0;
  if (epoch <= cfg.warmup_epochs) {
    const double done = static_cast<double>(static_cast<std::size_t>(epoch - 1) * spe + step_in_epoch);
    return base * done / static_cast<double>(static_cast<std::size_t>(cfg.warmup_epochs) * spe);
  }
  double lr = base;
  for (int m : cfg.milestones)
    if (epoch > m) lr *= cfg.decay;
  return lr;
}

Sgd::Sgd(std::vector<Param<float>*> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  for (auto* p : params_) state_.momentum.emplace_back(p->value.shape());
}

void Sgd::step(double lr) {
  const auto mu = static_cast<float>(momentum_), wd = static_cast<float>(weight_decay_);
  const auto flr = static_cast<float>(lr);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Param<float>& p = *params_[i];
    float* v = state_.momentum[i].ptr();
    float* w = p.value.ptr();
    const float* g = p.grad.ptr();
    const float d = p.decay ? wd : 0.0f;
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      v[j] = mu * v[j] + g[j] + d * w[j];
      w[j] -= flr * v[j];
    }
  }
  state_.lr = lr;
  ++state_.step;
}

PredictionLog predict(MixMoNet<float>& net, const ImageDataset& ds, const AugmentConfig& aug) {
  const std::size_t M = static_cast<std::size_t>(net.config().M);
  const std::size_t n = ds.size(), k = static_cast<std::size_t>(net.config().num_classes);
  PredictionLog log;
  log.split = ds.split;
  log.labels = ds.labels;
  log.logits.assign(M, Tensor<double>({n, k}));
  for (std::size_t start = 0; start < n; start += kEvalBatch) {
    const std::size_t end = std::min(n, start + kEvalBatch);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor<float> x = to_tensor(ds, idx, aug);
    const auto out = net.forward_infer(x);
    for (std::size_t h = 0; h < M; ++h)
      for (std::size_t j = 0; j < idx.size() * k; ++j) log.logits[h][start * k + j] = out.head_logits[h][j];
  }
  return log;
}

std::vector<EpochRecord> train(MixMoNet<float>& net, const ImageDataset& train_set, const ImageDataset* test,
                               const TrainConfig& cfg, const AugmentConfig& aug, const EpochSink& sink) {
  cfg.validate();
  if (cfg.M != net.config().M) throw std::invalid_argument("train: config M differs from the network's M");
  if (train_set.num_classes != net.config().num_classes) {
    throw std::invalid_argument("train: dataset has " + std::to_string(train_set.num_classes) +
                                " classes, network " + std::to_string(net.config().num_classes));
  }
  std::vector<EpochRecord> records;
  if (cfg.epochs == 0) return records;

  const auto M = static_cast<std::size_t>(cfg.M);
  const std::size_t C = train_set.channels, H = train_set.height, W = train_set.width;
  const auto K = static_cast<std::size_t>(train_set.num_classes);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t spe = steps_per_epoch(train_set.size(), cfg);
  Sgd opt(net.params(), cfg.momentum, cfg.weight_decay);
  // Keyed away from the network initialization streams of the same seed.
  const Rng root = Rng(cfg.seed).split(0x747261696eULL);
  std::size_t global = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0.0;
    for (std::size_t step = 1; step <= spe; ++step, ++global) {
      const Rng step_rng = root.split(global);
      Rng plan_rng = step_rng.split(0);
      BatchPlan bp = build_batch(train_set.size(), cfg, epoch, H, W, plan_rng);

      // One augmentation per batch position; input i reads position pairings[i][n].
      std::vector<std::vector<float>> augmented(bs);
      for (std::size_t n = 0; n < bs; ++n) {
        Rng arng = step_rng.split(1 + n);
        augmented[n] = augment(train_set.image(bp.indices[n]), C, H, W, aug, arng);
      }
      std::vector<Tensor<float>> inputs(M, Tensor<float>({bs, C, H, W}));
      std::vector<Tensor<float>> targets(M, Tensor<float>({bs, K}));
      std::vector<std::vector<double>> ratios(bs);
      for (std::size_t n = 0; n < bs; ++n) ratios[n] = bp.plans[n].kappas;
      for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t n = 0; n < bs; ++n) {
          const std::size_t src = bp.pairings[i][n];
          const int y = train_set.labels[bp.indices[src]];
          auto dst = inputs[i].slice(n);
          if (cfg.pixel_cutmix) {
            Rng prng = step_rng.split(1 + bs + i * bs + n);
            const auto partner = static_cast<std::size_t>(
                prng.uniform_int(0, static_cast<std::int64_t>(train_set.size()) - 1));
            const auto xk = augment(train_set.image(partner), C, H, W, aug, prng);
            const BinaryMask vis = visible_region(bp.plans[n], i, M, H, W);
            const auto mixed = apply_pixel_cutmix(augmented[src], y, xk, train_set.labels[partner], vis, C, H, W,
                                                  train_set.num_classes, prng);
            std::copy(mixed.image.begin(), mixed.image.end(), dst.begin());
            for (std::size_t j = 0; j < K; ++j) targets[i][n * K + j] = static_cast<float>(mixed.target[j]);
          } else {
            std::copy(augmented[src].begin(), augmented[src].end(), dst.begin());
            targets[i][n * K + static_cast<std::size_t>(y)] = 1.0f;
          }
        }
      }

      const auto diverged = [&] {
        return TrainingDiverged("training diverged: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                std::to_string(global + 1));
      };
      net.zero_grad();
      std::vector<Tensor<float>> logits;
      try {
        logits = net.forward_train(inputs, bp.plans, Mode::Train);
      } catch (const NonFiniteError&) {
        throw diverged();
      }
      const MixMoLoss loss = mixmo_loss(logits, targets, ratios, cfg.r);
      if (!std::isfinite(loss.loss)) throw diverged();
      net.backward_train(loss.grads);
      const double lr = lr_at(cfg, epoch, step, spe);
      opt.step(lr);
      loss_sum += loss.loss;
      rec.lr = lr;
      rec.p_e = bp.p_e;
    }
    rec.loss = loss_sum / static_cast<double>(spe);
    if (test) rec.metrics = evaluate(predict(net, *test, aug));
    if (sink) sink(rec);
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace mixmo
