#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "doctest.h"
#include "dap/error.hpp"
#include "dap/metrics.hpp"
#include "support.hpp"

using namespace dap;

namespace {

// 3x3 patch grid of 2x2-pixel patches; the object covers patches {1, 4, 7}.
// Confidence is the fraction of object patches still visible, read from the
// first channel: a patch counts as visible when its top-left pixel is nonzero.
constexpr std::size_t kGrid = 3;
constexpr std::size_t kPatch = 2;
const std::set<std::size_t> kObject = {1, 4, 7};

Image toy_image() {
  Image img(1, kGrid * kPatch, kGrid * kPatch, 0.5f);
  return img;
}

double visible_object_fraction(const Image& img, std::size_t /*target*/) {
  double visible = 0;
  for (std::size_t p : kObject)
    if (img.at(0, (p / kGrid) * kPatch, (p % kGrid) * kPatch) != 0.0f) visible += 1;
  return visible / static_cast<double>(kObject.size());
}

// Heatmap realizing a given deletion order: the first patch gets the top score.
Heatmap heatmap_for_order(const std::vector<std::size_t>& order) {
  std::vector<double> values(order.size());
  for (std::size_t r = 0; r < order.size(); ++r) values[order[r]] = static_cast<double>(order.size() - r);
  return Heatmap(std::move(values), kGrid);
}

Heatmap map_of(std::vector<double> v) {
  const std::size_t side = square_side(v.size());
  return Heatmap(std::move(v), side);
}

}  // namespace

TEST_CASE("top-k count rounding") {
  CHECK(topk_count(64, 0.1) == 6);
  CHECK(topk_count(64, 1.0) == 64);
  CHECK(topk_count(9, 0.01) == 1);
  CHECK(topk_count(196, 0.1) == 20);
  CHECK_THROWS_AS(topk_count(64, 0.0), InputError);
  CHECK_THROWS_AS(topk_count(64, 1.5), InputError);
}

TEST_CASE("saliency order breaks ties by index") {
  const std::vector<double> s{0.5, 0.9, 0.5, 0.9, 0.1};
  CHECK(saliency_order(s) == std::vector<std::size_t>{1, 3, 0, 2, 4});
}

TEST_CASE("top-k selection examples") {
  std::vector<double> v(64, 0.0);
  for (std::size_t i = 0; i < 64; ++i) v[i] = static_cast<double>((i * 37) % 64);
  const Heatmap h(v, 8);
  const auto all = topk_select(h, 1.0, 32);
  CHECK(all.selected.size() == 64);
  CHECK(std::all_of(all.pixel_mask.begin(), all.pixel_mask.end(), [](auto b) { return b == 1; }));

  const auto ten = topk_select(h, 0.1, 32);
  CHECK(ten.selected.size() == 6);
  CHECK(static_cast<std::size_t>(std::count(ten.pixel_mask.begin(), ten.pixel_mask.end(), 1)) == 6 * 16);

  std::vector<double> hot(64, 0.2);
  hot[17] = 3.0;
  const auto one = topk_select(Heatmap(hot, 8), 1.0 / 64.0, 32);
  CHECK(one.selected == std::vector<std::size_t>{17});
  // Patch 17 sits at grid row 2, column 1: pixels y 8..11, x 4..7.
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x)
      CHECK(one.pixel_mask[y * 32 + x] == ((y >= 8 && y < 12 && x >= 4 && x < 8) ? 1 : 0));
}

TEST_CASE("top-k mask coverage equals k patches of pixels") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(16);
    for (double& x : v) x = std::floor(rng.uniform() * 4.0);
    const double k = rng.uniform(0.01, 1.0);
    const auto mask = topk_select(Heatmap(v, 4), k, 12);
    CHECK(mask.selected.size() == topk_count(16, k));
    CHECK(static_cast<std::size_t>(std::count(mask.pixel_mask.begin(), mask.pixel_mask.end(), 1)) ==
          mask.selected.size() * 9);
  }
}

TEST_CASE("flat heatmaps delete in index order") {
  std::vector<std::size_t> seen;
  const ConfidenceFn spy = [&](const Image& img, std::size_t) {
    std::size_t zeros = 0;
    for (std::size_t p = 0; p < 9; ++p)
      if (img.at(0, (p / 3) * 2, (p % 3) * 2) == 0.0f) zeros = p + 1;
    seen.push_back(zeros);
    return 0.5;
  };
  const auto curve = deletion_curve(spy, toy_image(), map_of(std::vector<double>(9, 1.0)), 0);
  CHECK(seen == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  CHECK(curve.fractions.size() == 10);
  CHECK(curve.fractions.front() == 0.0);
  CHECK(curve.fractions.back() == 1.0);
}

TEST_CASE("flat heatmaps insert in index order") {
  std::vector<std::size_t> revealed;
  const ConfidenceFn spy = [&](const Image& img, std::size_t) {
    std::size_t count = 0;
    for (std::size_t p = 0; p < 9; ++p)
      if (img.at(0, (p / 3) * 2, (p % 3) * 2) != 0.0f) count = p + 1;
    revealed.push_back(count);
    return 0.5;
  };
  insertion_curve(spy, toy_image(), map_of(std::vector<double>(9, 1.0)), 0);
  CHECK(revealed == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
}

TEST_CASE("perturbation endpoints") {
  const Image img = toy_image();
  const Image blank(1, 6, 6, 0.0f);
  const ConfidenceFn model = [](const Image& x, std::size_t) {
    double s = 0;
    for (float v : x.pixels) s += v;
    return 0.1 + 0.8 * s / static_cast<double>(x.pixels.size());
  };
  Rng rng(4);
  std::vector<double> v(9);
  for (double& x : v) x = rng.uniform();
  const auto h = map_of(v);
  const auto del = deletion_curve(model, img, h, 0);
  const auto ins = insertion_curve(model, img, h, 0);
  CHECK(del.confidences.back() == model(blank, 0));
  CHECK(ins.confidences.front() == model(blank, 0));
  CHECK(ins.confidences.back() == model(img, 0));
  CHECK(std::abs(ins.confidences.back() - del.confidences.front()) <= 1e-6);
}

TEST_CASE("coarser steps sample fewer points") {
  const ConfidenceFn half = [](const Image&, std::size_t) { return 0.5; };
  const auto c = deletion_curve(half, toy_image(), map_of(std::vector<double>(9, 1.0)), 0, 4);
  CHECK(c.fractions == std::vector<double>{0.0, 4.0 / 9.0, 8.0 / 9.0, 1.0});
  CHECK(c.auc == doctest::Approx(0.5));
  CHECK_THROWS_AS(deletion_curve(half, toy_image(), map_of(std::vector<double>(9, 1.0)), 0, 0), InputError);
}

TEST_CASE("oracle failures surface as evaluation errors") {
  const ConfidenceFn broken = [](const Image&, std::size_t) -> double { throw std::runtime_error("down"); };
  CHECK_THROWS_AS(deletion_curve(broken, toy_image(), map_of(std::vector<double>(9, 1.0)), 0), EvaluationError);
  const ConfidenceFn out_of_range = [](const Image&, std::size_t) { return 1.5; };
  CHECK_THROWS_AS(insertion_curve(out_of_range, toy_image(), map_of(std::vector<double>(9, 1.0)), 0),
                  EvaluationError);
}

TEST_CASE("ground-truth ordering is extremal among all orderings") {
  const Image img = toy_image();
  const ConfidenceFn model = visible_object_fraction;
  // Ground truth: object patches first, the rest by index.
  const Heatmap truth = heatmap_for_order({1, 4, 7, 0, 2, 3, 5, 6, 8});
  const double truth_del = deletion_curve(model, img, truth, 0).auc;
  const double truth_ins = insertion_curve(model, img, truth, 0).auc;

  std::vector<std::size_t> order(9);
  std::iota(order.begin(), order.end(), std::size_t{0});
  double min_del = 1e9, max_ins = -1e9;
  std::size_t permutations = 0;
  do {
    const Heatmap h = heatmap_for_order(order);
    min_del = std::min(min_del, deletion_curve(model, img, h, 0).auc);
    max_ins = std::max(max_ins, insertion_curve(model, img, h, 0).auc);
    ++permutations;
  } while (std::next_permutation(order.begin(), order.end()));
  CHECK(permutations == 362880);
  CHECK(truth_del == doctest::Approx(min_del).epsilon(1e-12));
  CHECK(truth_ins == doctest::Approx(max_ins).epsilon(1e-12));
  CHECK(truth_del < truth_ins);
}

TEST_CASE("trapezoid area") {
  const std::vector<double> x{0, 0.5, 1};
  const std::vector<double> y{1, 1, 0};
  CHECK(trapezoid_auc(x, y) == doctest::Approx(0.75));
  CHECK_THROWS_AS(trapezoid_auc(x, std::vector<double>{1}), ShapeError);
}

TEST_CASE("class sensitivity fixed points") {
  const auto a = map_of({0.1, 0.4, 0.3, 0.9});
  CHECK(std::abs(class_sensitivity(a, a) - 0.5) <= 1e-9);
  CHECK(std::abs(class_sensitivity(map_of({1, 2, 3, 4}), map_of({4, 3, 2, 1})) - 1.5) <= 1e-9);
  CHECK(class_sensitivity(map_of({1, 1, 1, 1}), a) == 1.0);
  CHECK_THROWS_AS(class_sensitivity(a, map_of({1})), ShapeError);
}

TEST_CASE("rank metrics ignore monotone rescaling") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(16), b(16), a2(16), b2(16);
    for (std::size_t i = 0; i < 16; ++i) {
      a[i] = rng.uniform();
      b[i] = std::floor(rng.uniform() * 5);
      a2[i] = std::log(a[i] + 1e-3) * 4.0 + 2.0;
      b2[i] = std::sqrt(b[i]);
    }
    CHECK(std::abs(class_sensitivity(map_of(a), map_of(b)) - class_sensitivity(map_of(a2), map_of(b2))) <= 1e-12);
    const std::vector<std::vector<double>> layers{a, b};
    const auto l1 = layer_decision_alignment(layers, b);
    const std::vector<std::vector<double>> layers2{a2, b2};
    const auto l2 = layer_decision_alignment(layers2, b2);
    CHECK(std::abs(l1[0] - l2[0]) <= 1e-12);
    CHECK(std::abs(l1[1] - l2[1]) <= 1e-12);
  }
}

TEST_CASE("TCC examples") {
  const Image img = toy_image();
  const ConfidenceFn model = visible_object_fraction;
  Rng rng(6);
  std::vector<double> v(9);
  for (double& x : v) x = rng.uniform();
  CHECK(token_contribution_consistency(model, img, map_of(v), 0, 1.0) == 1.0);

  const ConfidenceFn blind = [](const Image&, std::size_t) { return 0.7; };
  CHECK(token_contribution_consistency(blind, img, map_of(v), 0, 0.3) == 1.0);

  // Keep the top 3 of {4: 0.9, 0: 0.8, 7: 0.7, ...}: object patches 4 and 7
  // survive, so the ratio is (2/3) / 1.
  const auto h = map_of({0.8, 0.1, 0.2, 0.3, 0.9, 0.05, 0.15, 0.7, 0.25});
  CHECK(token_contribution_consistency(model, img, h, 0, 3.0 / 9.0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  const ConfidenceFn zero = [](const Image&, std::size_t) { return 0.0; };
  CHECK_THROWS_AS(token_contribution_consistency(zero, img, h, 0, 0.5), EvaluationError);
}

TEST_CASE("TCC with every patch kept is exactly one") {
  Rng rng(7);
  const ConfidenceFn noisy = [](const Image& x, std::size_t t) {
    double s = 0;
    for (float v : x.pixels) s += std::sin(v * 13.0 + static_cast<double>(t));
    return 0.5 + 0.4 * std::tanh(s);
  };
  for (int trial = 0; trial < 20; ++trial) {
    Image img(3, 12, 12);
    for (float& p : img.pixels) p = static_cast<float>(rng.uniform());
    std::vector<double> v(16);
    for (double& x : v) x = rng.uniform();
    CHECK(token_contribution_consistency(noisy, img, Heatmap(v, 4), trial % 3, 1.0) == 1.0);
  }
}

TEST_CASE("AFS examples") {
  CHECK(std::abs(attention_flow_sparsity(Heatmap(std::vector<double>(64, 0.3), 8), 0.1) - 0.09375) <= 1e-9);
  std::vector<double> hot(64, 0.0);
  hot[5] = 2.0;
  CHECK(attention_flow_sparsity(Heatmap(hot, 8), 0.1) == 1.0);
  CHECK(attention_flow_sparsity(map_of({4, 3, 2, 1}), 0.25) == doctest::Approx(0.4));
  CHECK(attention_flow_sparsity(Heatmap(std::vector<double>(64, 0.0), 8), 0.1) == doctest::Approx(6.0 / 64.0));
  CHECK_THROWS_AS(attention_flow_sparsity(map_of({1, -1, 0, 0}), 0.5), InputError);
}

TEST_CASE("AFS is scale invariant and bounded") {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(64), w(64);
    const double c = rng.uniform(0.01, 100.0);
    for (std::size_t i = 0; i < 64; ++i) w[i] = c * (v[i] = rng.uniform());
    const double a = attention_flow_sparsity(Heatmap(v, 8), 0.1);
    CHECK(a == doctest::Approx(attention_flow_sparsity(Heatmap(w, 8), 0.1)).epsilon(1e-12));
    CHECK(a >= 6.0 / 64.0 - 1e-12);
    CHECK(a <= 1.0);
  }
}

TEST_CASE("LDA examples") {
  const std::vector<double> ref{0.3, 0.1, 0.8, 0.5, 0.2, 0.9, 0.4, 0.6};
  std::vector<double> rev(ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) rev[i] = -ref[i];
  const std::vector<std::vector<double>> maps{ref, rev};
  const auto lda = layer_decision_alignment(maps, ref);
  CHECK(lda[0] == doctest::Approx(1.0));
  CHECK(lda[1] == doctest::Approx(-1.0));

  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(8), b(8);
    for (std::size_t i = 0; i < 8; ++i) {
      a[i] = rng.uniform();
      b[i] = rng.uniform();
    }
    const std::vector<std::vector<double>> one{a};
    CHECK(std::abs(layer_decision_alignment(one, b)[0] - testing::brute_spearman(a, b)) <= 1e-9);
  }
  const std::vector<std::vector<double>> bad{{1, 2}};
  CHECK_THROWS_AS(layer_decision_alignment(bad, ref), ShapeError);
}

TEST_CASE("cumulative mass curve") {
  const auto c = cumulative_mass_curve(std::vector<double>{1, 3, 0, 4});
  CHECK(c.size() == 4);
  CHECK(c[0] == doctest::Approx(0.5));
  CHECK(c[1] == doctest::Approx(7.0 / 8.0));
  CHECK(c.back() == 1.0);
  const auto flat = cumulative_mass_curve(std::vector<double>(4, 0.0));
  CHECK(flat == std::vector<double>{0.25, 0.5, 0.75, 1.0});
}

TEST_CASE("pointing uses the first maximum") {
  const PatchBox box{1, 1, 2, 2};
  CHECK(pointing_hit(map_of({0, 0, 0, 0, 1, 0, 0, 0, 0}), box));
  CHECK_FALSE(pointing_hit(map_of({1, 0, 0, 0, 1, 0, 0, 0, 0}), box));
}

TEST_CASE("report serialization rounds to six decimals") {
  MetricReport r;
  r.image_id = "eval-00001";
  r.method = "dap";
  r.del_auc = 0.12345678;
  r.lda_per_layer = {0.1234564, 1.0};
  const nlohmann::json j = r;
  CHECK(j.at("del_auc").get<double>() == 0.123457);
  CHECK(j.at("lda_per_layer")[0].get<double>() == 0.123456);
  CHECK(j.at("method") == "dap");
  PerturbationCurve c{{0.0, 0.5, 1.0}, {0.9, 0.4, 0.1}, 0.45};
  CHECK(curve_csv(c, "seed=3") == "# seed=3\nstep,fraction,confidence\n0,0.000000,0.900000\n1,0.500000,0.400000\n"
                                  "2,1.000000,0.100000\n");
}
