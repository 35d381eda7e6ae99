// One PASS/FAIL line per acceptance criterion. Usage: dap_acceptance [work_dir]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "dap/fileio.hpp"
#include "dap/harness.hpp"
#include "dap/metrics.hpp"
#include "dap/prior.hpp"
#include "dap/propagation.hpp"
#include "dap/tensor.hpp"
#include "support.hpp"

using namespace dap;
namespace fs = std::filesystem;

namespace {

constexpr InjectionVariant kAllVariants[] = {InjectionVariant::kUniform, InjectionVariant::kTargetOnly,
                                             InjectionVariant::kSourceOnly, InjectionVariant::kFinalOnly,
                                             InjectionVariant::kPairwise};

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

double max_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

double max_diff(const PropagationResult& a, const PropagationResult& b) {
  double worst = max_diff(a.final_heatmap.values, b.final_heatmap.values);
  if (a.layer_maps.size() != b.layer_maps.size()) return INFINITY;
  for (std::size_t l = 0; l < a.layer_maps.size(); ++l) worst = std::max(worst, max_diff(a.layer_maps[l], b.layer_maps[l]));
  return worst;
}

// 50 stacks cycling through L in {1..4}, H in {1,2,4}, P in {4,16,64}.
template <typename F>
void for_random_stacks(F&& body) {
  Rng rng(20240601);
  const std::size_t heads[] = {1, 2, 4};
  const std::size_t patches[] = {4, 16, 64};
  for (std::size_t i = 0; i < 50; ++i) {
    const std::size_t l = 1 + i % 4;
    const std::size_t h = heads[(i / 4) % 3];
    const std::size_t p = patches[(i / 12) % 3];
    const auto stack = testing::random_stack(rng, l, h, p, 1.0 + rng.uniform() * 2.0);
    body(rng, stack);
  }
}

Outcome uniform_prior_reduction() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for_random_stacks([&](Rng&, const AttentionStack& stack) {
    const auto rollout = attention_rollout(stack);
    const auto ones = uniform_prior(stack.num_patches());
    for (auto v : kAllVariants) worst = std::max(worst, max_diff(propagate(stack, ones, v), rollout));
  });
  const double secs = seconds_since(t0);
  return {worst <= 1e-9 && secs < 5.0, "max |DAP(ones) - rollout| = " + fmt("%.3e", worst) + ", " + fmt("%.2f s", secs)};
}

Outcome source_only_equivalence() {
  double worst = 0.0;
  for_random_stacks([&](Rng& rng, const AttentionStack& stack) {
    const auto prior = testing::random_prior(rng, stack.num_patches());
    worst = std::max(worst, max_diff(propagate(stack, prior, InjectionVariant::kSourceOnly),
                                     propagate(stack, prior, InjectionVariant::kPairwise)));
  });
  return {worst <= 1e-9, "max final/layer difference = " + fmt("%.3e", worst)};
}

double worst_row_error(const PropagationTrace& trace) {
  double worst = 0.0;
  const auto check = [&](const MatrixD& m) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m.cols(); ++j) s += m(i, j);
      worst = std::max(worst, std::abs(s - 1.0));
    }
  };
  for (const auto& t : trace.transitions) check(t);
  for (const auto& r : trace.relevance) check(r);
  return worst;
}

Outcome row_stochasticity() {
  double worst = 0.0;
  std::size_t matrices = 0;
  for_random_stacks([&](Rng& rng, const AttentionStack& stack) {
    auto prior = testing::random_prior(rng, stack.num_patches());
    // Exercise the degenerate-row path as well.
    for (std::size_t j = 1; j < prior.values.size(); j += 3) prior.values[j] = 0.0;
    for (auto v : kAllVariants) {
      PropagationTrace trace;
      propagate(stack, prior, v, &trace);
      worst = std::max(worst, worst_row_error(trace));
      matrices += trace.transitions.size() + trace.relevance.size();
    }
    PropagationTrace trace;
    attention_rollout(stack, &trace);
    worst = std::max(worst, worst_row_error(trace));
    matrices += trace.transitions.size() + trace.relevance.size();
  });
  return {worst <= 1e-5, std::to_string(matrices) + " matrices, max |row sum - 1| = " + fmt("%.3e", worst)};
}

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  ViTConfig cfg;
  cfg.image_size = 16;
  cfg.embed_dim = 32;
  cfg.num_layers = 2;
  cfg.num_heads = 4;
  cfg.mlp_hidden = 64;
  cfg.seed = 9;
  const ViTParams params = testing::jittered_model(cfg, 5);
  Rng rng(11);
  const Image image = testing::random_image(rng, cfg.channels, cfg.image_size);
  // Classifier, one attention projection, and the Grad-CAM activation site.
  const auto head = testing::gradient_check(params, image, 2, {"head_weight"}, 33, 0, rng);
  const auto attn = testing::gradient_check(params, image, 2, {"blocks.1.qkv_weight"}, 33, 0, rng);
  const auto act = testing::gradient_check(params, image, 2, {}, 0, 34, rng);
  const std::size_t n = head.coordinates + attn.coordinates + act.coordinates;
  double worst = head.worst_relative;
  std::string at = head.worst_at;
  for (const auto* r : {&attn, &act})
    if (r->worst_relative > worst) {
      worst = r->worst_relative;
      at = r->worst_at;
    }
  const double secs = seconds_since(t0);
  return {n == 100 && worst <= 1e-3 && secs < 30.0,
          std::to_string(n) + " coordinates, worst relative error " + fmt("%.3e", worst) + " at " + at + ", " +
              fmt("%.2f s", secs)};
}

Outcome metric_fixed_points() {
  Rng rng(3);
  std::vector<double> v(64);
  for (double& x : v) x = rng.normal();
  const Heatmap map(v, 8);
  const double cs_same = class_sensitivity(map, map);
  std::vector<double> up(64), down(64);
  std::iota(up.begin(), up.end(), 1.0);
  std::reverse_copy(up.begin(), up.end(), down.begin());
  const double cs_rev = class_sensitivity(Heatmap(up, 8), Heatmap(down, 8));
  const double afs = attention_flow_sparsity(Heatmap(std::vector<double>(64, 0.25), 8), 6.0 / 64.0);

  ViTConfig cfg;
  cfg.image_size = 16;
  cfg.embed_dim = 16;
  cfg.num_layers = 2;
  cfg.num_heads = 2;
  cfg.mlp_hidden = 32;
  const ViTParams params = testing::jittered_model(cfg, 1);
  const ConfidenceFn model = [&](const Image& x, std::size_t t) { return predict_probabilities(params, x)[t]; };
  const Image image = testing::random_image(rng, cfg.channels, cfg.image_size);
  std::vector<double> scores(16);
  for (double& x : scores) x = rng.uniform();
  const double tcc = token_contribution_consistency(model, image, Heatmap(scores, 4), 1, 1.0);

  double spearman_worst = 0.0;
  for (std::size_t pair = 0; pair < 1000; ++pair) {
    const std::size_t n = 2 + rng.below(40);
    std::vector<double> a(n), b(n);
    // Small integer ranges force ties.
    for (double& x : a) x = static_cast<double>(rng.below(1 + n / 3));
    for (double& x : b) x = static_cast<double>(rng.below(1 + n / 2));
    spearman_worst = std::max(spearman_worst, std::abs(spearman(a, b) - testing::brute_spearman(a, b)));
  }
  const bool ok = std::abs(cs_same - 0.5) <= 1e-9 && std::abs(cs_rev - 1.0) <= 1e-9 &&
                  std::abs(afs - 0.09375) <= 1e-9 && tcc == 1.0 && spearman_worst <= 1e-9;
  return {ok, "CS(same)=" + fmt("%.12f", cs_same) + " CS(reversed)=" + fmt("%.12f", cs_rev) + " AFS=" +
                  fmt("%.12f", afs) + " TCC(k=1)=" + fmt("%.17g", tcc) + " spearman max err=" +
                  fmt("%.3e", spearman_worst)};
}

Outcome extremal_ordering() {
  constexpr std::size_t grid = 3, patch = 2;
  const std::vector<std::size_t> object = {1, 4, 7};
  const Image image(1, grid * patch, grid * patch, 0.5f);
  const ConfidenceFn model = [&](const Image& x, std::size_t) {
    double visible = 0;
    for (std::size_t p : object)
      if (x.at(0, (p / grid) * patch, (p % grid) * patch) != 0.0f) visible += 1;
    return visible / static_cast<double>(object.size());
  };
  const auto map_for = [&](const std::vector<std::size_t>& order) {
    std::vector<double> values(order.size());
    for (std::size_t r = 0; r < order.size(); ++r) values[order[r]] = static_cast<double>(order.size() - r);
    return Heatmap(values, grid);
  };
  const Heatmap truth = map_for({1, 4, 7, 0, 2, 3, 5, 6, 8});
  const double truth_del = deletion_curve(model, image, truth, 0).auc;
  const double truth_ins = insertion_curve(model, image, truth, 0).auc;
  std::vector<std::size_t> order(9);
  std::iota(order.begin(), order.end(), std::size_t{0});
  double min_del = INFINITY, max_ins = -INFINITY;
  std::size_t n = 0;
  do {
    const Heatmap h = map_for(order);
    min_del = std::min(min_del, deletion_curve(model, image, h, 0).auc);
    max_ins = std::max(max_ins, insertion_curve(model, image, h, 0).auc);
    ++n;
  } while (std::next_permutation(order.begin(), order.end()));
  const bool ok = n == 362880 && truth_del <= min_del && truth_ins >= max_ins;
  return {ok, std::to_string(n) + " orderings, truth del=" + fmt("%.6f", truth_del) + " (min " + fmt("%.6f", min_del) +
                  "), ins=" + fmt("%.6f", truth_ins) + " (max " + fmt("%.6f", max_ins) + ")"};
}

struct DeskResults {
  Outcome directional;
  Outcome final_only;
  fs::path checkpoint;
};

DeskResults desk_scale(const fs::path& work) {
  DeskResults out;
  const auto t0 = Clock::now();
  RunConfig base;
  base.out_dir = work / "desk";
  fs::remove_all(base.out_dir);

  RunConfig train = base;
  train.command = "train";
  const auto trained = cmd_train(train);
  const double val_acc = trained.summary.at("val_acc").get<double>();
  out.checkpoint = train.checkpoint_path();

  RunConfig eval = base;
  eval.command = "evaluate";
  eval.checkpoint = out.checkpoint;
  eval.explainers = {"dap", "random"};
  const auto evaluated = cmd_evaluate(eval);

  RunConfig ablate = base;
  ablate.command = "ablate";
  ablate.checkpoint = out.checkpoint;
  const auto ablated = cmd_ablate(ablate);
  const double secs = seconds_since(t0);

  const auto& m = evaluated.summary.at("methods");
  const double dap_ins = m.at("dap").at("ins_auc").get<double>();
  const double dap_del = m.at("dap").at("del_auc").get<double>();
  const double rnd_ins = m.at("random").at("ins_auc").get<double>();
  const double rnd_del = m.at("random").at("del_auc").get<double>();
  const double pointing = m.at("dap").at("pointing_accuracy").get<double>();
  const std::size_t n = m.at("dap").at("n").get<std::size_t>();
  double lda[4] = {0, 0, 0, 0};  // uniform, target_only, final_only, pairwise
  const auto& rows = ablated.summary.at("rows");
  for (std::size_t i = 0; i < rows.size() && i < 4; ++i) lda[i] = rows[i].at("lda_mean").get<double>();

  const bool trained_ok = val_acc >= 0.90;
  const bool a = dap_ins > rnd_ins && dap_del < rnd_del;
  const bool b = pointing > 0.5;
  const bool c = lda[3] > lda[1] && lda[1] > lda[0];
  const bool count_ok = n == 200 && evaluated.failures.empty() && ablated.failures.empty();
  const bool fast = secs < 600.0;
  out.directional.pass = trained_ok && a && b && c && count_ok && fast;
  out.directional.detail =
      std::string(trained_ok ? "" : "[val<0.90] ") + (a ? "" : "[a] ") + (b ? "" : "[b] ") + (c ? "" : "[c] ") +
      (count_ok ? "" : "[n/failures] ") + (fast ? "" : "[runtime] ") + "val_acc=" + fmt("%.4f", val_acc) +
      " n=" + std::to_string(n) + " ins dap/random=" + fmt("%.4f", dap_ins) + "/" + fmt("%.4f", rnd_ins) +
      " del dap/random=" + fmt("%.4f", dap_del) + "/" + fmt("%.4f", rnd_del) + " pointing=" + fmt("%.3f", pointing) +
      " LDA pairwise/target/uniform=" + fmt("%.4f", lda[3]) + "/" + fmt("%.4f", lda[1]) + "/" + fmt("%.4f", lda[0]) +
      " runtime=" + fmt("%.1f s", secs);

  // FinalOnly layers vs Uniform layers, on every evaluated image.
  const double layer_diff = ablated.summary.at("final_only_max_layer_diff").get<double>();
  double stack_worst = 0.0;
  for_random_stacks([&](Rng& rng, const AttentionStack& stack) {
    const auto prior = testing::random_prior(rng, stack.num_patches());
    const auto f = propagate(stack, prior, InjectionVariant::kFinalOnly);
    const auto u = propagate(stack, prior, InjectionVariant::kUniform);
    for (std::size_t l = 0; l < f.layer_maps.size(); ++l) stack_worst = std::max(stack_worst, max_diff(f.layer_maps[l], u.layer_maps[l]));
  });
  const std::size_t images = ablated.summary.at("num_images").get<std::size_t>();
  out.final_only.pass = images == 200 && ablated.failures.empty() && layer_diff <= 1e-9 && stack_worst <= 1e-9;
  out.final_only.detail = std::to_string(images) + " images, max layer difference " + fmt("%.3e", layer_diff) +
                          "; 50 random stacks " + fmt("%.3e", stack_worst);
  return out;
}

std::vector<std::string> files_under(const fs::path& root) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root).string());
  std::sort(out.begin(), out.end());
  return out;
}

Outcome reproducibility(const fs::path& work, const fs::path& trained_checkpoint) {
  const auto run_all = [&](const fs::path& out, std::size_t threads) {
    fs::remove_all(out);
    RunConfig cfg;
    cfg.out_dir = out;
    cfg.threads = threads;
    cfg.dataset.image_size = 16;
    cfg.dataset.min_object = 6;
    cfg.dataset.max_object = 8;
    cfg.dataset.train_size = 64;
    cfg.dataset.val_size = 16;
    cfg.dataset.eval_size = 16;
    cfg.model.image_size = 16;
    cfg.model.embed_dim = 16;
    cfg.model.num_layers = 2;
    cfg.model.num_heads = 2;
    cfg.model.mlp_hidden = 32;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg.num_images = 8;
    cfg.explainers = {"dap", "rollout", "gmar", "gradcam", "random", "oracle"};
    for (const char* command : {"train", "explain", "evaluate", "ablate", "curves"}) {
      cfg.command = command;
      run_command(cfg);
    }
  };
  run_all(work / "repro_a", 1);
  run_all(work / "repro_b", 3);
  const auto fa = files_under(work / "repro_a");
  const auto fb = files_under(work / "repro_b");
  std::size_t identical = 0;
  std::string mismatch;
  if (fa == fb)
    for (const auto& f : fa) {
      if (read_file(work / "repro_a" / f) == read_file(work / "repro_b" / f)) ++identical;
      else if (mismatch.empty()) mismatch = f;
    }
  else
    mismatch = "file sets differ";

  const std::string bytes = read_file(trained_checkpoint);
  const ViTParams params = load_checkpoint(trained_checkpoint);
  const bool round_trip = serialize_checkpoint(params) == bytes &&
                          params_checksum(deserialize_checkpoint(serialize_checkpoint(params))) == params_checksum(params);
  const bool ok = mismatch.empty() && identical == fa.size() && !fa.empty() && round_trip;
  return {ok, std::to_string(identical) + "/" + std::to_string(fa.size()) + " artifacts byte-identical" +
                  (mismatch.empty() ? "" : " (first mismatch: " + mismatch + ")") +
                  ", checkpoint round trip " + (round_trip ? "bit-exact" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "dap_acceptance";
  fs::create_directories(work);
  int failed = 0;
  const auto report = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  };
  report(1, "uniform-prior reduction", uniform_prior_reduction);
  report(2, "source-only equals pairwise", source_only_equivalence);
  report(3, "row-stochasticity", row_stochasticity);
  report(4, "gradient correctness", gradient_correctness);
  report(5, "metric fixed points", metric_fixed_points);
  report(6, "extremal ordering", extremal_ordering);

  DeskResults desk;
  std::string desk_error;
  try {
    desk = desk_scale(work);
  } catch (const std::exception& e) {
    desk_error = std::string("exception: ") + e.what();
  }
  report(7, "desk-scale directional results", [&] {
    return desk_error.empty() ? desk.directional : Outcome{false, desk_error};
  });
  report(8, "final-only structural identity", [&] {
    return desk_error.empty() ? desk.final_only : Outcome{false, desk_error};
  });
  report(9, "reproducibility", [&] {
    if (!desk_error.empty()) return Outcome{false, desk_error};
    return reproducibility(work, desk.checkpoint);
  });
  std::printf("%d of 9 criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
