#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "mixmo/autodiff.hpp"
#include "mixmo/data.hpp"

using namespace mixmo;

namespace {

ImageDataset random_cifar(std::size_t n, int classes, Rng& rng) {
  ImageDataset ds;
  ds.num_classes = classes;
  ds.labels.resize(n);
  ds.images.resize(n * kCifarPixels);
  for (auto& y : ds.labels) y = static_cast<int>(rng.uniform_int(0, classes - 1));
  for (auto& p : ds.images) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  return ds;
}

}  // namespace

TEST_CASE("CIFAR record arithmetic") {
  CHECK(cifar_record_size(CifarVariant::Cifar10) == 3073);
  CHECK(cifar_record_size(CifarVariant::Cifar100) == 3074);
  std::vector<std::uint8_t> bytes(30730, 0);
  for (std::size_t i = 0; i < 10; ++i) bytes[i * 3073] = static_cast<std::uint8_t>(i);
  const auto ds = parse_cifar_binary(bytes, CifarVariant::Cifar10);
  CHECK(ds.size() == 10);
  CHECK(ds.labels[7] == 7);
  bytes.pop_back();
  try {
    parse_cifar_binary(bytes, CifarVariant::Cifar10);
    FAIL("truncated file accepted");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("3073") != std::string::npos);
  }
  std::vector<std::uint8_t> bad(3073, 0);
  bad[0] = 10;
  CHECK_THROWS(parse_cifar_binary(bad, CifarVariant::Cifar10));
}

TEST_CASE("CIFAR-100 uses the fine label") {
  std::vector<std::uint8_t> rec(3074, 9);
  rec[0] = 3;
  rec[1] = 42;
  const auto ds = parse_cifar_binary(rec, CifarVariant::Cifar100);
  CHECK(ds.labels[0] == 42);
  CHECK(ds.coarse_labels[0] == 3);
  CHECK(ds.num_classes == 100);
}

TEST_CASE("CIFAR round trip is bit-identical") {
  Rng rng(1);
  const auto ds = random_cifar(7, 10, rng);
  const auto bytes = encode_cifar_binary(ds, CifarVariant::Cifar10);
  CHECK(bytes.size() == 7 * 3073);
  const auto back = parse_cifar_binary(bytes, CifarVariant::Cifar10);
  CHECK(back.images == ds.images);
  CHECK(back.labels == ds.labels);
  CHECK(encode_cifar_binary(back, CifarVariant::Cifar10) == bytes);
  const auto path = std::filesystem::temp_directory_path() / "mixmo_test_cifar.bin";
  write_cifar_binary(ds, path, CifarVariant::Cifar10);
  CHECK(std::filesystem::file_size(path) == bytes.size());
  CHECK(load_cifar_binary(path, CifarVariant::Cifar10).images == ds.images);
  std::filesystem::remove(path);
}

TEST_CASE("synthetic dataset") {
  const auto a = synth_dataset(400, 4, 32, 9);
  std::array<int, 4> counts{};
  for (int y : a.labels) ++counts[static_cast<std::size_t>(y)];
  for (int c : counts) CHECK(c == 100);
  const auto b = synth_dataset(400, 4, 32, 9);
  CHECK(a.images == b.images);
  CHECK(synth_dataset(400, 4, 32, 10).images != a.images);
  const auto odd = synth_dataset(10, 3, 16, 1);
  std::array<int, 3> oc{};
  for (int y : odd.labels) ++oc[static_cast<std::size_t>(y)];
  CHECK(*std::max_element(oc.begin(), oc.end()) - *std::min_element(oc.begin(), oc.end()) <= 1);
  CHECK_THROWS(synth_dataset(10, 9, 32, 1));
}

TEST_CASE("augmentation geometry") {
  Rng rng(2);
  std::vector<std::uint8_t> img(3 * 6 * 5);
  for (auto& v : img) v = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  SUBCASE("no padding and no flip leaves geometry unchanged") {
    AugmentConfig cfg;
    cfg.pad = 0;
    cfg.hflip = false;
    const auto out = augment(img, 3, 6, 5, cfg, rng);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 30; ++i) {
        const double expect = (img[c * 30 + i] / 255.0 - cfg.mean[c]) / cfg.stddev[c];
        CHECK(out[c * 30 + i] == doctest::Approx(expect).epsilon(1e-6));
      }
  }
  SUBCASE("double flip is the identity") {
    AugmentConfig cfg;
    AugmentDraw d{cfg.pad, cfg.pad, true};
    const auto once = augment_geometry(img, 3, 6, 5, cfg, d);
    CHECK(once != img);
    CHECK(augment_geometry(once, 3, 6, 5, cfg, d) == img);
  }
  SUBCASE("reflection padding") {
    AugmentConfig cfg;
    cfg.pad = 2;
    const auto out = augment_geometry(img, 3, 6, 5, cfg, AugmentDraw{0, 0, false});
    // Output (0,0) reads padded (0,0) = source (2,2) under reflection.
    CHECK(out[0] == img[2 * 5 + 2]);
    CHECK(out[1 * 5 + 3] == img[1 * 5 + 1]);
  }
  SUBCASE("values stay in range and shape is preserved") {
    AugmentConfig cfg;
    const auto d = draw_augment(cfg, rng);
    CHECK(augment_geometry(img, 3, 6, 5, cfg, d).size() == img.size());
  }
}

TEST_CASE("crop offsets are uniform") {
  AugmentConfig cfg;
  Rng rng(3);
  const std::size_t cells = (2 * cfg.pad + 1) * (2 * cfg.pad + 1);
  std::vector<double> counts(cells, 0.0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto d = draw_augment(cfg, rng);
    counts[d.offset_y * (2 * cfg.pad + 1) + d.offset_x] += 1.0;
  }
  const double e = static_cast<double>(n) / static_cast<double>(cells);
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - e) * (c - e) / e;
  // 99th percentile of chi-square with 80 degrees of freedom.
  CHECK(chi2 < 112.33);
}

TEST_CASE("a two-layer dense network separates the synthetic classes") {
  const auto train = synth_dataset(2000, 4, 32, 1);
  const auto test = synth_dataset(400, 4, 32, 2);
  AugmentConfig cfg;
  const std::size_t d = 3 * 32 * 32;
  Rng rng(4);
  Dense<float> fc1("fc1", d, 64), fc2("fc2", 64, 4);
  fc1.init(rng);
  fc2.init(rng);
  Relu<float> relu;
  std::vector<Param<float>*> params{&fc1.weight(), &fc1.bias(), &fc2.weight(), &fc2.bias()};
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = 50;
  for (int epoch = 0; epoch < 5; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t s = 0; s + bs <= order.size(); s += bs) {
      const std::span<const std::size_t> idx(order.data() + s, bs);
      const auto x = to_tensor(train, idx, cfg).reshaped({bs, d});
      Tensor<float> t({bs, 4});
      for (std::size_t i = 0; i < bs; ++i) t.at(i, static_cast<std::size_t>(train.labels[idx[i]])) = 1.0f;
      for (auto* p : params) p->zero_grad();
      const auto ce = softmax_cross_entropy(fc2.forward(relu.forward(fc1.forward(x, Mode::Train), Mode::Train), Mode::Train), t);
      fc1.backward(relu.backward(fc2.backward(ce.grad)));
      for (auto* p : params)
        for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] -= 0.01f * p->grad[i];
    }
  }
  std::vector<std::size_t> all(test.size());
  std::iota(all.begin(), all.end(), 0);
  const auto logits = fc2.forward(relu.forward(fc1.forward(to_tensor(test, all, cfg).reshaped({all.size(), d}), Mode::Eval), Mode::Eval), Mode::Eval);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    std::size_t arg = 0;
    for (std::size_t k = 1; k < 4; ++k)
      if (logits.at(i, k) > logits.at(i, arg)) arg = k;
    hits += static_cast<int>(arg) == test.labels[i];
  }
  const double acc = 100.0 * static_cast<double>(hits) / static_cast<double>(all.size());
  MESSAGE("dense baseline top-1 " << acc);
  CHECK(acc > 60.0);
}
