#include "dap/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <optional>
#include <thread>

#include "dap/error.hpp"
#include "dap/fileio.hpp"
#include "dap/metrics.hpp"
#include "dap/pnm.hpp"
#include "dap/prior.hpp"
#include "dap/random.hpp"

namespace dap {

namespace {

constexpr InjectionVariant kAblationRows[] = {InjectionVariant::kUniform, InjectionVariant::kTargetOnly,
                                              InjectionVariant::kFinalOnly, InjectionVariant::kPairwise};

template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
}

std::string artifact_comment(const RunConfig& cfg) {
  return "config_hash=" + config_hash(cfg) + " seed=" + std::to_string(cfg.seed);
}

std::string csv_header(const RunConfig& cfg, std::string_view columns) {
  return "# " + artifact_comment(cfg) + "\n" + std::string(columns) + "\n";
}

nlohmann::json base_summary(const RunConfig& cfg) {
  return nlohmann::json{{"command", cfg.command}, {"config_hash", config_hash(cfg)}, {"seed", cfg.seed}};
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j, CommandResult& result) {
  write_file_atomic(path, j.dump(2) + "\n");
  result.artifacts.push_back(path);
}

void write_text(const std::filesystem::path& path, const std::string& text, CommandResult& result) {
  write_file_atomic(path, text);
  result.artifacts.push_back(path);
}

ViTParams load_model(const RunConfig& cfg) {
  ViTParams params = load_checkpoint(cfg.checkpoint_path());
  const ViTConfig& m = params.config;
  if (m.image_size != cfg.dataset.image_size || m.channels != cfg.dataset.channels ||
      m.num_classes != cfg.dataset.num_classes)
    throw ConfigError("checkpoint geometry does not match the dataset");
  return params;
}

ConfidenceFn confidence_fn(const ViTParams& params) {
  return [&params](const Image& image, std::size_t target) { return predict_probabilities(params, image)[target]; };
}

ExplainOptions explain_options(const RunConfig& cfg) {
  ExplainOptions o;
  o.variant = cfg.variant;
  o.uniform_prior = cfg.uniform_prior;
  o.seed = cfg.seed;
  return o;
}

double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::vector<double> rounded(std::span<const double> v) {
  std::vector<double> out;
  out.reserve(v.size());
  for (double x : v) out.push_back(round6(x));
  return out;
}

double max_abs_diff_maps(const PropagationResult& a, const PropagationResult& b) {
  double worst = max_abs_diff(std::span<const double>(a.final_heatmap.values),
                              std::span<const double>(b.final_heatmap.values));
  for (std::size_t l = 0; l < a.layer_maps.size(); ++l)
    worst = std::max(worst, max_abs_diff(std::span<const double>(a.layer_maps[l]),
                                         std::span<const double>(b.layer_maps[l])));
  return worst;
}

double max_abs_diff_layers(const PropagationResult& a, const PropagationResult& b) {
  double worst = 0.0;
  for (std::size_t l = 0; l < a.layer_maps.size(); ++l)
    worst = std::max(worst, max_abs_diff(std::span<const double>(a.layer_maps[l]),
                                         std::span<const double>(b.layer_maps[l])));
  return worst;
}

// Running means of one method's metrics; the single-writer reduction target.
struct MethodAccumulator {
  std::size_t n = 0;
  double del = 0, ins = 0, cs = 0, cs_rho = 0, tcc = 0, afs = 0, pointing = 0;
  std::vector<double> lda;
  std::size_t lda_n = 0;

  void add(const MetricReport& r) {
    ++n;
    del += r.del_auc;
    ins += r.ins_auc;
    cs += r.cs;
    cs_rho += r.cs_rho;
    tcc += r.tcc;
    afs += r.afs;
    pointing += r.pointing ? 1.0 : 0.0;
    if (!r.lda_per_layer.empty()) {
      if (lda.empty()) lda.assign(r.lda_per_layer.size(), 0.0);
      for (std::size_t l = 0; l < lda.size(); ++l) lda[l] += r.lda_per_layer[l];
      ++lda_n;
    }
  }

  double avg(double total) const { return n == 0 ? 0.0 : total / static_cast<double>(n); }

  std::vector<double> lda_means() const {
    std::vector<double> out(lda.size());
    for (std::size_t l = 0; l < lda.size(); ++l) out[l] = lda[l] / static_cast<double>(lda_n);
    return out;
  }

  nlohmann::json to_json() const {
    const auto lda_m = lda_means();
    nlohmann::json j{{"n", n},
                     {"del_auc", round6(avg(del))},
                     {"ins_auc", round6(avg(ins))},
                     {"cs", round6(avg(cs))},
                     {"cs_rho", round6(avg(cs_rho))},
                     {"tcc", round6(avg(tcc))},
                     {"afs", round6(avg(afs))},
                     {"pointing_accuracy", round6(avg(pointing))},
                     {"lda_per_layer", rounded(lda_m)}};
    j["lda_mean"] = lda_m.empty() ? nlohmann::json(nullptr) : nlohmann::json(round6(mean_of(lda_m)));
    return j;
  }
};

std::vector<std::size_t> class_counts(const RunConfig& cfg, std::span<const std::size_t> indices) {
  const auto labels = split_labels(cfg.dataset, Split::kEval);
  std::vector<std::size_t> counts(cfg.dataset.num_classes, 0);
  for (std::size_t i : indices) ++counts[labels[i]];
  return counts;
}

MetricReport evaluate_method(const RunConfig& cfg, const ViTParams& params, ImageContext& ctx, const Sample& sample,
                             std::string_view method) {
  const ExplainOptions opts = explain_options(cfg);
  const std::size_t target = ctx.predicted_class();
  const std::size_t alt = ctx.runner_up(target);
  const Explanation main = ctx.explain(method, target, opts);
  const Explanation other = ctx.explain(method, alt, opts);
  const auto conf = confidence_fn(params);

  MetricReport r;
  r.image_id = image_id(sample.index);
  r.method = std::string(method);
  r.target_class = target;
  r.alt_class = alt;
  r.del_auc = deletion_curve(conf, sample.image, main.heatmap, target, cfg.steps).auc;
  r.ins_auc = insertion_curve(conf, sample.image, main.heatmap, target, cfg.steps).auc;
  r.cs_rho = spearman(main.heatmap.values, other.heatmap.values);
  r.cs = class_sensitivity(main.heatmap, other.heatmap);
  r.tcc = token_contribution_consistency(conf, sample.image, main.heatmap, target, cfg.k_fraction);
  r.afs = attention_flow_sparsity(main.heatmap, cfg.k_fraction);
  if (!main.layer_maps.empty()) r.lda_per_layer = layer_decision_alignment(main.layer_maps, main.heatmap.values);
  r.pointing = pointing_hit(main.heatmap, sample.object_box);
  return r;
}

void finish(CommandResult& result, const RunConfig& cfg) {
  result.summary["failures"] = result.failures;
  if (!result.failures.empty()) {
    result.exit_code = 1;
    write_json(cfg.out_dir / cfg.command / "failures.json",
               nlohmann::json{{"config_hash", config_hash(cfg)}, {"seed", cfg.seed}, {"failures", result.failures}},
               result);
  }
}

}  // namespace

void RunConfig::validate() const {
  static const std::vector<std::string> commands = {"train", "explain", "evaluate", "ablate", "curves"};
  if (std::find(commands.begin(), commands.end(), command) == commands.end())
    throw ConfigError("unknown command '" + command + "'");
  dataset.validate();
  model.validate();
  if (!(k_fraction > 0.0 && k_fraction <= 1.0)) throw ConfigError("k must lie in (0, 1]");
  if (steps == 0) throw ConfigError("steps must be at least 1");
  if (explainers.empty()) throw ConfigError("at least one explainer is required");
  for (const auto& e : explainers)
    if (!is_explainer(e)) throw ConfigError("unknown explainer '" + e + "'");
  if (num_images > dataset.eval_size)
    throw ConfigError("requested " + std::to_string(num_images) + " images but the eval split has " +
                      std::to_string(dataset.eval_size));
  if (balanced && num_images % dataset.num_classes != 0)
    throw ConfigError("balanced selection needs an image count divisible by the class count");
}

std::filesystem::path RunConfig::checkpoint_path() const {
  return checkpoint.empty() ? out_dir / "model.ckpt" : checkpoint;
}

void to_json(nlohmann::json& j, const RunConfig& cfg) {
  j = nlohmann::json{{"command", cfg.command},
                     {"dataset", cfg.dataset},
                     {"model", cfg.model},
                     {"train", cfg.train},
                     {"explainers", cfg.explainers},
                     {"variant", std::string(variant_name(cfg.variant))},
                     {"k", cfg.k_fraction},
                     {"images", cfg.num_images},
                     {"balanced", cfg.balanced},
                     {"seed", cfg.seed},
                     {"steps", cfg.steps},
                     {"uniform_prior", cfg.uniform_prior}};
}

void from_json(const nlohmann::json& j, RunConfig& cfg) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  try {
    if (j.contains("command")) cfg.command = j.at("command").get<std::string>();
    if (j.contains("checkpoint")) cfg.checkpoint = j.at("checkpoint").get<std::string>();
    if (j.contains("out")) cfg.out_dir = j.at("out").get<std::string>();
    if (j.contains("dataset")) cfg.dataset = j.at("dataset").get<DatasetSpec>();
    if (j.contains("model")) cfg.model = j.at("model").get<ViTConfig>();
    if (j.contains("train")) cfg.train = j.at("train").get<TrainOptions>();
    if (j.contains("explainers")) cfg.explainers = j.at("explainers").get<std::vector<std::string>>();
    if (j.contains("variant")) cfg.variant = parse_variant(j.at("variant").get<std::string>());
    cfg.k_fraction = j.value("k", cfg.k_fraction);
    cfg.num_images = j.value("images", cfg.num_images);
    cfg.balanced = j.value("balanced", cfg.balanced);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.steps = j.value("steps", cfg.steps);
    cfg.uniform_prior = j.value("uniform_prior", cfg.uniform_prior);
    cfg.threads = j.value("threads", cfg.threads);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config: ") + e.what());
  }
}

std::string config_hash(const RunConfig& cfg) {
  const std::string canonical = nlohmann::json(cfg).dump();
  return hex64(fnv1a(canonical.data(), canonical.size()));
}

std::size_t worker_count(const RunConfig& cfg) {
  if (cfg.threads > 0) return cfg.threads;
  if (const char* env = std::getenv("DAP_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError("DAP_THREADS must be a positive integer");
    return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<std::size_t> select_images(const RunConfig& cfg) {
  cfg.validate();
  std::vector<std::size_t> order(cfg.dataset.eval_size);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(cfg.seed, 0x53454c454354ULL));
  rng.shuffle(order.begin(), order.end());
  std::vector<std::size_t> picked;
  if (!cfg.balanced) {
    picked.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cfg.num_images));
  } else {
    const auto labels = split_labels(cfg.dataset, Split::kEval);
    const std::size_t per_class = cfg.num_images / cfg.dataset.num_classes;
    std::vector<std::size_t> taken(cfg.dataset.num_classes, 0);
    for (std::size_t i : order) {
      if (taken[labels[i]] < per_class) {
        ++taken[labels[i]];
        picked.push_back(i);
      }
    }
    if (picked.size() != cfg.num_images) throw ConfigError("eval split cannot supply a balanced selection");
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

std::string image_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "eval-%05zu", index);
  return buf;
}

void to_json(nlohmann::json& j, const Failure& f) {
  j = nlohmann::json{{"image_id", f.image_id}, {"method", f.method}, {"reason", f.reason}};
}

std::string format3(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  std::string s(buf);
  if (s == "-0.000") s = "0.000";
  return s;
}

CommandResult cmd_train(const RunConfig& cfg) {
  cfg.validate();
  CommandResult result;
  const TrainResult trained = train(cfg.model, cfg.dataset, cfg.train);
  save_checkpoint(trained.params, cfg.checkpoint_path());
  result.artifacts.push_back(cfg.checkpoint_path());

  std::string log = csv_header(cfg, "epoch,loss,val_acc");
  char buf[96];
  for (const auto& e : trained.log) {
    std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f\n", e.epoch, e.loss, e.val_acc);
    log += buf;
  }
  write_text(cfg.out_dir / "training_log.csv", log, result);

  result.summary = base_summary(cfg);
  result.summary["train_acc"] = round6(trained.train_acc);
  result.summary["val_acc"] = round6(trained.val_acc);
  result.summary["epochs"] = cfg.train.epochs;
  result.summary["model_checksum"] = hex64(params_checksum(trained.params));
  result.summary["parameter_count"] = trained.params.parameter_count();
  result.summary["dataset"] = dataset_manifest(cfg.dataset);
  write_json(cfg.out_dir / "train_summary.json", result.summary, result);
  return result;
}

CommandResult cmd_explain(const RunConfig& cfg) {
  cfg.validate();
  CommandResult result;
  const ViTParams params = load_model(cfg);
  const auto indices = select_images(cfg);
  const auto dir = cfg.out_dir / "explain";
  const std::string comment = artifact_comment(cfg);
  const ExplainOptions opts = explain_options(cfg);

  struct Item {
    std::vector<std::pair<std::filesystem::path, std::string>> files;
    std::vector<Failure> failures;
  };
  std::vector<Item> items(indices.size());
  parallel_for(indices.size(), worker_count(cfg), [&](std::size_t i) {
    Item& item = items[i];
    const std::string id = image_id(indices[i]);
    try {
      const Sample sample = generate_sample(cfg.dataset, Split::kEval, indices[i]);
      ImageContext ctx(params, sample.image, sample.index, sample.object_box);
      item.files.emplace_back(dir / (id + "_input.ppm"), encode_pnm(to_pnm(sample.image), comment));
      const std::size_t target = ctx.predicted_class();
      const std::size_t alt = ctx.runner_up(target);
      for (const auto& method : cfg.explainers) {
        try {
          const Explanation e = ctx.explain(method, target, opts);
          const std::string stem = id + "_" + method;
          item.files.emplace_back(dir / (stem + ".pgm"),
                                  encode_pnm(render_heatmap(e.heatmap, cfg.dataset.image_size), comment));
          if (!e.layer_maps.empty()) {
            PropagationResult pr{e.heatmap, e.layer_maps};
            item.files.emplace_back(dir / (stem + "_layers.csv"), layer_maps_csv(pr, comment));
          }
          nlohmann::json side{{"image_id", id},
                              {"method", method},
                              {"label", sample.label},
                              {"target_class", target},
                              {"runner_up_class", alt},
                              {"config_hash", config_hash(cfg)},
                              {"seed", cfg.seed},
                              {"heatmap", rounded(e.heatmap.values)},
                              {"grid_side", e.heatmap.grid_side}};
          if (method == "dap") {
            side["variant"] = std::string(variant_name(cfg.variant));
            side["uniform_prior"] = cfg.uniform_prior;
            side["prior"] = rounded(e.prior);
          }
          item.files.emplace_back(dir / (stem + ".json"), side.dump(2) + "\n");
        } catch (const std::exception& ex) {
          item.failures.push_back({id, method, ex.what()});
        }
      }
    } catch (const std::exception& ex) {
      item.failures.push_back({id, "*", ex.what()});
    }
  });

  for (const auto& item : items) {
    for (const auto& [path, bytes] : item.files) write_text(path, bytes, result);
    result.failures.insert(result.failures.end(), item.failures.begin(), item.failures.end());
  }
  result.summary = base_summary(cfg);
  result.summary["model_checksum"] = hex64(params_checksum(params));
  result.summary["images"] = indices.size();
  result.summary["explainers"] = cfg.explainers;
  result.summary["files"] = result.artifacts.size();
  finish(result, cfg);
  write_json(dir / "summary.json", result.summary, result);
  return result;
}

CommandResult cmd_evaluate(const RunConfig& cfg) {
  cfg.validate();
  CommandResult result;
  const ViTParams params = load_model(cfg);
  const auto indices = select_images(cfg);
  const auto dir = cfg.out_dir / "evaluate";

  struct Item {
    std::vector<std::optional<MetricReport>> reports;
    std::vector<Failure> failures;
  };
  std::vector<Item> items(indices.size());
  parallel_for(indices.size(), worker_count(cfg), [&](std::size_t i) {
    Item& item = items[i];
    item.reports.resize(cfg.explainers.size());
    const std::string id = image_id(indices[i]);
    try {
      const Sample sample = generate_sample(cfg.dataset, Split::kEval, indices[i]);
      ImageContext ctx(params, sample.image, sample.index, sample.object_box);
      for (std::size_t m = 0; m < cfg.explainers.size(); ++m) {
        try {
          item.reports[m] = evaluate_method(cfg, params, ctx, sample, cfg.explainers[m]);
        } catch (const std::exception& ex) {
          item.failures.push_back({id, cfg.explainers[m], ex.what()});
        }
      }
    } catch (const std::exception& ex) {
      item.failures.push_back({id, "*", ex.what()});
    }
  });

  std::vector<MethodAccumulator> acc(cfg.explainers.size());
  nlohmann::json per_image = nlohmann::json::array();
  for (const auto& item : items) {
    for (std::size_t m = 0; m < cfg.explainers.size(); ++m) {
      if (!item.reports[m]) continue;
      acc[m].add(*item.reports[m]);
      per_image.push_back(*item.reports[m]);
    }
    result.failures.insert(result.failures.end(), item.failures.begin(), item.failures.end());
  }

  result.summary = base_summary(cfg);
  result.summary["model_checksum"] = hex64(params_checksum(params));
  result.summary["num_images"] = indices.size();
  result.summary["no_samples"] = indices.empty();
  result.summary["balanced"] = cfg.balanced;
  result.summary["class_counts"] = class_counts(cfg, indices);
  result.summary["k"] = cfg.k_fraction;
  result.summary["steps"] = cfg.steps;
  result.summary["pointing_note"] = "harness-only localization check against the synthetic object box";
  nlohmann::json methods = nlohmann::json::object();
  std::string table = csv_header(cfg, "method,deletion,insertion,cs,tcc,afs,lda,pointing,n");
  for (std::size_t m = 0; m < cfg.explainers.size(); ++m) {
    const auto& a = acc[m];
    methods[cfg.explainers[m]] = a.to_json();
    const auto lda = a.lda_means();
    table += cfg.explainers[m] + "," + format3(a.avg(a.del)) + "," + format3(a.avg(a.ins)) + "," +
             format3(a.avg(a.cs)) + "," + format3(a.avg(a.tcc)) + "," + format3(a.avg(a.afs)) + "," +
             (lda.empty() ? std::string("-") : format3(mean_of(lda))) + "," + format3(a.avg(a.pointing)) + "," +
             std::to_string(a.n) + "\n";
  }
  result.summary["methods"] = methods;
  finish(result, cfg);
  nlohmann::json report = result.summary;
  report["per_image"] = per_image;
  write_json(dir / "report.json", report, result);
  write_text(dir / "table.csv", table, result);
  return result;
}

CommandResult cmd_ablate(const RunConfig& cfg) {
  cfg.validate();
  CommandResult result;
  const ViTParams params = load_model(cfg);
  const auto indices = select_images(cfg);
  const auto dir = cfg.out_dir / "ablate";
  constexpr std::size_t kRows = std::size(kAblationRows);

  struct Item {
    bool ok = false;
    std::array<MetricReport, kRows> reports;
    double source_diff = 0.0;
    double final_only_layer_diff = 0.0;
    std::vector<Failure> failures;
  };
  std::vector<Item> items(indices.size());
  parallel_for(indices.size(), worker_count(cfg), [&](std::size_t i) {
    Item& item = items[i];
    const std::string id = image_id(indices[i]);
    try {
      const Sample sample = generate_sample(cfg.dataset, Split::kEval, indices[i]);
      ImageContext ctx(params, sample.image, sample.index, sample.object_box);
      const auto conf = confidence_fn(params);
      const std::size_t target = ctx.predicted_class();
      const std::size_t alt = ctx.runner_up(target);
      const DecisionPrior prior_t = build_prior(gradcam_token_importance(ctx.trace(), ctx.gradients(target)), target);
      const DecisionPrior prior_a = build_prior(gradcam_token_importance(ctx.trace(), ctx.gradients(alt)), alt);
      const auto& stack = ctx.trace().attention;
      std::array<PropagationResult, kRows> main;
      for (std::size_t v = 0; v < kRows; ++v) {
        main[v] = propagate(stack, prior_t, kAblationRows[v]);
        const auto other = propagate(stack, prior_a, kAblationRows[v]);
        MetricReport& r = item.reports[v];
        r.image_id = id;
        r.method = std::string(variant_name(kAblationRows[v]));
        r.target_class = target;
        r.alt_class = alt;
        r.cs_rho = spearman(main[v].final_heatmap.values, other.final_heatmap.values);
        r.cs = class_sensitivity(main[v].final_heatmap, other.final_heatmap);
        r.tcc = token_contribution_consistency(conf, sample.image, main[v].final_heatmap, target, cfg.k_fraction);
        r.afs = attention_flow_sparsity(main[v].final_heatmap, cfg.k_fraction);
        r.lda_per_layer = layer_decision_alignment(main[v].layer_maps, main[v].final_heatmap.values);
        r.pointing = pointing_hit(main[v].final_heatmap, sample.object_box);
      }
      const auto source_t = propagate(stack, prior_t, InjectionVariant::kSourceOnly);
      const auto source_a = propagate(stack, prior_a, InjectionVariant::kSourceOnly);
      const auto pair_a = propagate(stack, prior_a, InjectionVariant::kPairwise);
      item.source_diff = std::max(max_abs_diff_maps(source_t, main[3]), max_abs_diff_maps(source_a, pair_a));
      item.final_only_layer_diff = max_abs_diff_layers(main[2], main[0]);
      item.ok = true;
    } catch (const std::exception& ex) {
      item.failures.push_back({id, "*", ex.what()});
    }
  });

  std::array<MethodAccumulator, kRows> acc;
  double source_diff = 0.0;
  double final_only_diff = 0.0;
  for (const auto& item : items) {
    result.failures.insert(result.failures.end(), item.failures.begin(), item.failures.end());
    if (!item.ok) continue;
    for (std::size_t v = 0; v < kRows; ++v) acc[v].add(item.reports[v]);
    source_diff = std::max(source_diff, item.source_diff);
    final_only_diff = std::max(final_only_diff, item.final_only_layer_diff);
  }
  const bool gating_posthoc = final_only_diff <= 1e-9;

  result.summary = base_summary(cfg);
  result.summary["model_checksum"] = hex64(params_checksum(params));
  result.summary["num_images"] = indices.size();
  result.summary["no_samples"] = indices.empty();
  result.summary["class_counts"] = class_counts(cfg, indices);
  result.summary["k"] = cfg.k_fraction;
  nlohmann::json rows = nlohmann::json::array();
  std::string table = csv_header(cfg, "variant,cs,tcc,lda,afs,source_only_max_abs_diff,gating_posthoc");
  char diff_buf[32];
  std::snprintf(diff_buf, sizeof(diff_buf), "%.3e", source_diff);
  for (std::size_t v = 0; v < kRows; ++v) {
    const auto& a = acc[v];
    const auto lda = a.lda_means();
    const std::string name(variant_name(kAblationRows[v]));
    nlohmann::json row{{"variant", name},
                       {"n", a.n},
                       {"cs", round6(a.avg(a.cs))},
                       {"cs_rho", round6(a.avg(a.cs_rho))},
                       {"tcc", round6(a.avg(a.tcc))},
                       {"afs", round6(a.avg(a.afs))},
                       {"lda_mean", round6(mean_of(lda))},
                       {"lda_per_layer", rounded(lda)},
                       {"pointing_accuracy", round6(a.avg(a.pointing))}};
    const bool pairwise = kAblationRows[v] == InjectionVariant::kPairwise;
    const bool final_only = kAblationRows[v] == InjectionVariant::kFinalOnly;
    if (pairwise) row["source_only_max_abs_diff"] = source_diff;
    if (final_only) row["gating_posthoc"] = gating_posthoc;
    rows.push_back(row);
    table += name + "," + format3(a.avg(a.cs)) + "," + format3(a.avg(a.tcc)) + "," + format3(mean_of(lda)) + "," +
             format3(a.avg(a.afs)) + "," + (pairwise ? std::string(diff_buf) : std::string("-")) + "," +
             (final_only ? std::string(gating_posthoc ? "true" : "false") : std::string("-")) + "\n";
  }
  result.summary["rows"] = rows;
  result.summary["source_only_max_abs_diff"] = source_diff;
  result.summary["final_only_max_layer_diff"] = final_only_diff;
  result.summary["gating_posthoc"] = gating_posthoc;
  finish(result, cfg);
  write_json(dir / "ablation.json", result.summary, result);
  write_text(dir / "ablation.csv", table, result);
  return result;
}

CommandResult cmd_curves(const RunConfig& cfg) {
  cfg.validate();
  CommandResult result;
  const ViTParams params = load_model(cfg);
  const auto indices = select_images(cfg);
  const auto dir = cfg.out_dir / "curves";
  const ExplainOptions opts = explain_options(cfg);
  const std::size_t methods = cfg.explainers.size();

  struct Item {
    std::vector<std::optional<PerturbationCurve>> deletion;
    std::vector<std::vector<double>> mass;
    std::vector<std::vector<double>> alignment;
    std::vector<Failure> failures;
  };
  std::vector<Item> items(indices.size());
  parallel_for(indices.size(), worker_count(cfg), [&](std::size_t i) {
    Item& item = items[i];
    item.deletion.resize(methods);
    item.mass.resize(methods);
    item.alignment.resize(methods);
    const std::string id = image_id(indices[i]);
    try {
      const Sample sample = generate_sample(cfg.dataset, Split::kEval, indices[i]);
      ImageContext ctx(params, sample.image, sample.index, sample.object_box);
      const auto conf = confidence_fn(params);
      const std::size_t target = ctx.predicted_class();
      for (std::size_t m = 0; m < methods; ++m) {
        try {
          const Explanation e = ctx.explain(cfg.explainers[m], target, opts);
          item.deletion[m] = deletion_curve(conf, sample.image, e.heatmap, target, cfg.steps);
          item.mass[m] = cumulative_mass_curve(e.heatmap.values);
          if (!e.layer_maps.empty()) item.alignment[m] = layer_decision_alignment(e.layer_maps, e.heatmap.values);
        } catch (const std::exception& ex) {
          item.failures.push_back({id, cfg.explainers[m], ex.what()});
        }
      }
    } catch (const std::exception& ex) {
      item.failures.push_back({id, "*", ex.what()});
    }
  });

  std::string deletion_csv = csv_header(cfg, "method,step,fraction,confidence");
  std::string mass_csv = csv_header(cfg, "method,rank,patch_fraction,cumulative_mass");
  std::string alignment_csv = csv_header(cfg, "method,layer,lda");
  nlohmann::json per_method = nlohmann::json::object();
  char buf[160];
  for (const auto& item : items)
    result.failures.insert(result.failures.end(), item.failures.begin(), item.failures.end());
  for (std::size_t m = 0; m < methods; ++m) {
    const std::string& name = cfg.explainers[m];
    std::size_t n = 0;
    std::vector<double> fractions, del, mass, align;
    std::size_t align_n = 0;
    for (const auto& item : items) {
      if (!item.deletion[m]) continue;
      const auto& c = *item.deletion[m];
      if (n == 0) {
        fractions = c.fractions;
        del.assign(c.confidences.size(), 0.0);
        mass.assign(item.mass[m].size(), 0.0);
      }
      ++n;
      for (std::size_t s = 0; s < del.size(); ++s) del[s] += c.confidences[s];
      for (std::size_t s = 0; s < mass.size(); ++s) mass[s] += item.mass[m][s];
      if (!item.alignment[m].empty()) {
        if (align.empty()) align.assign(item.alignment[m].size(), 0.0);
        for (std::size_t l = 0; l < align.size(); ++l) align[l] += item.alignment[m][l];
        ++align_n;
      }
    }
    if (n > 0) {
      for (double& v : del) v /= static_cast<double>(n);
      for (double& v : mass) v /= static_cast<double>(n);
    }
    if (align_n > 0)
      for (double& v : align) v /= static_cast<double>(align_n);
    for (std::size_t s = 0; s < del.size(); ++s) {
      std::snprintf(buf, sizeof(buf), "%s,%zu,%.6f,%.6f\n", name.c_str(), s, fractions[s], del[s]);
      deletion_csv += buf;
    }
    for (std::size_t r = 0; r < mass.size(); ++r) {
      std::snprintf(buf, sizeof(buf), "%s,%zu,%.6f,%.6f\n", name.c_str(), r + 1,
                    static_cast<double>(r + 1) / static_cast<double>(mass.size()), mass[r]);
      mass_csv += buf;
    }
    for (std::size_t l = 0; l < align.size(); ++l) {
      std::snprintf(buf, sizeof(buf), "%s,%zu,%.6f\n", name.c_str(), l + 1, align[l]);
      alignment_csv += buf;
    }
    per_method[name] = nlohmann::json{{"n", n},
                                      {"mean_deletion_auc", round6(trapezoid_auc(fractions, del))},
                                      {"deletion_start", del.empty() ? 0.0 : round6(del.front())},
                                      {"mass_end", mass.empty() ? 0.0 : round6(mass.back())},
                                      {"alignment", rounded(align)}};
  }
  result.summary = base_summary(cfg);
  result.summary["model_checksum"] = hex64(params_checksum(params));
  result.summary["num_images"] = indices.size();
  result.summary["no_samples"] = indices.empty();
  result.summary["methods"] = per_method;
  finish(result, cfg);
  write_text(dir / "deletion.csv", deletion_csv, result);
  write_text(dir / "mass.csv", mass_csv, result);
  write_text(dir / "alignment.csv", alignment_csv, result);
  write_json(dir / "summary.json", result.summary, result);
  return result;
}

CommandResult run_command(const RunConfig& cfg) {
  if (cfg.command == "train") return cmd_train(cfg);
  if (cfg.command == "explain") return cmd_explain(cfg);
  if (cfg.command == "evaluate") return cmd_evaluate(cfg);
  if (cfg.command == "ablate") return cmd_ablate(cfg);
  if (cfg.command == "curves") return cmd_curves(cfg);
  throw ConfigError("unknown command '" + cfg.command + "'");
}

}  // namespace dap
