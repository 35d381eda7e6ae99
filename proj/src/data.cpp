#include "dap/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "dap/error.hpp"
#include "dap/random.hpp"

namespace dap {

std::string_view shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kDisk: return "disk";
    case ShapeKind::kCross: return "cross";
    case ShapeKind::kTriangle: return "triangle";
    case ShapeKind::kRing: return "ring";
    case ShapeKind::kDiamond: return "diamond";
  }
  return "unknown";
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kEval: return "eval";
  }
  return "unknown";
}

std::size_t DatasetSpec::split_size(Split split) const {
  switch (split) {
    case Split::kTrain: return train_size;
    case Split::kVal: return val_size;
    case Split::kEval: return eval_size;
  }
  return 0;
}

void DatasetSpec::validate() const {
  if (num_classes < 1 || num_classes > kMaxShapeClasses)
    throw ConfigError("num_classes must be in [1, " + std::to_string(kMaxShapeClasses) + "]");
  if (channels != 1 && channels != 3) throw ConfigError("channels must be 1 or 3");
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
    throw ConfigError("image_size must be a positive multiple of patch_size");
  if (min_object < 3 || min_object > max_object)
    throw ConfigError("object size range must satisfy 3 <= min <= max");
  if (max_object > image_size)
    throw ConfigError("object size " + std::to_string(max_object) + " exceeds image size " +
                      std::to_string(image_size));
  if (!(noise_std >= 0.0) || !(background >= 0.0 && background <= 1.0))
    throw ConfigError("noise_std must be >= 0 and background in [0, 1]");
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = nlohmann::json{{"num_classes", s.num_classes}, {"image_size", s.image_size},
                     {"channels", s.channels},       {"patch_size", s.patch_size},
                     {"min_object", s.min_object},   {"max_object", s.max_object},
                     {"background", s.background},   {"noise_std", s.noise_std},
                     {"seed", s.seed},               {"train_size", s.train_size},
                     {"val_size", s.val_size},       {"eval_size", s.eval_size}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  DatasetSpec d;
  s.num_classes = j.value("num_classes", d.num_classes);
  s.image_size = j.value("image_size", d.image_size);
  s.channels = j.value("channels", d.channels);
  s.patch_size = j.value("patch_size", d.patch_size);
  s.min_object = j.value("min_object", d.min_object);
  s.max_object = j.value("max_object", d.max_object);
  s.background = j.value("background", d.background);
  s.noise_std = j.value("noise_std", d.noise_std);
  s.seed = j.value("seed", d.seed);
  s.train_size = j.value("train_size", d.train_size);
  s.val_size = j.value("val_size", d.val_size);
  s.eval_size = j.value("eval_size", d.eval_size);
}

std::vector<std::size_t> split_labels(const DatasetSpec& spec, Split split) {
  spec.validate();
  const std::size_t n = spec.split_size(split);
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i % spec.num_classes;
  Rng rng(derive_seed(spec.seed, 0x4c4142454cULL, static_cast<std::uint64_t>(split)));
  rng.shuffle(labels.begin(), labels.end());
  return labels;
}

namespace {

// u, v are pixel-center offsets from the shape center, s the side length.
bool inside_shape(ShapeKind kind, double u, double v, double s) {
  const double half = 0.5 * s;
  switch (kind) {
    case ShapeKind::kSquare: return true;
    case ShapeKind::kDisk: return u * u + v * v <= half * half;
    case ShapeKind::kCross: return std::abs(u) <= s / 6.0 || std::abs(v) <= s / 6.0;
    case ShapeKind::kTriangle: {
      const double t = (v + half) / s;  // 0 at the apex row, 1 at the base
      return std::abs(u) <= t * half;
    }
    case ShapeKind::kRing: {
      const double r2 = u * u + v * v;
      return r2 <= half * half && r2 >= 0.25 * half * half;
    }
    case ShapeKind::kDiamond: return std::abs(u) + std::abs(v) <= half;
  }
  return false;
}

Sample render_sample(const DatasetSpec& spec, Split split, std::size_t index, std::size_t label) {
  Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(split) + 1, index));
  const std::size_t n = spec.image_size;
  const std::size_t size =
      spec.min_object + static_cast<std::size_t>(rng.below(spec.max_object - spec.min_object + 1));
  const std::size_t ox = static_cast<std::size_t>(rng.below(n - size + 1));
  const std::size_t oy = static_cast<std::size_t>(rng.below(n - size + 1));
  std::vector<double> color(spec.channels);
  for (double& c : color) c = rng.uniform(0.6, 1.0);

  Sample s;
  s.index = index;
  s.label = label;
  s.image = Image(spec.channels, n, n);
  s.object_mask.assign(n * n, 0);
  const auto kind = static_cast<ShapeKind>(label);
  const double sd = static_cast<double>(size);
  std::size_t min_x = n, min_y = n, max_x = 0, max_y = 0;
  for (std::size_t y = oy; y < oy + size; ++y) {
    for (std::size_t x = ox; x < ox + size; ++x) {
      const double u = static_cast<double>(x - ox) + 0.5 - 0.5 * sd;
      const double v = static_cast<double>(y - oy) + 0.5 - 0.5 * sd;
      if (!inside_shape(kind, u, v, sd)) continue;
      s.object_mask[y * n + x] = 1;
      min_x = std::min(min_x, x);
      min_y = std::min(min_y, y);
      max_x = std::max(max_x, x);
      max_y = std::max(max_y, y);
    }
  }
  for (std::size_t c = 0; c < spec.channels; ++c) {
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        const double base = s.object_mask[y * n + x] ? color[c] : spec.background;
        const double v = base + spec.noise_std * rng.normal();
        s.image.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  const std::size_t p = spec.patch_size;
  s.object_box = PatchBox{min_x / p, min_y / p, max_x / p, max_y / p};
  return s;
}

}  // namespace

Sample generate_sample(const DatasetSpec& spec, Split split, std::size_t index) {
  const auto labels = split_labels(spec, split);
  if (index >= labels.size()) throw InputError("sample index out of range");
  return render_sample(spec, split, index, labels[index]);
}

std::vector<Sample> generate_split(const DatasetSpec& spec, Split split) {
  const auto labels = split_labels(spec, split);
  std::vector<Sample> out;
  out.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out.push_back(render_sample(spec, split, i, labels[i]));
  return out;
}

SampleStream::SampleStream(DatasetSpec spec, Split split)
    : spec_(std::move(spec)), split_(split), labels_(split_labels(spec_, split)) {}

Sample SampleStream::next() {
  if (!has_next()) throw StateError("sample stream exhausted");
  const std::size_t i = next_++;
  return render_sample(spec_, split_, i, labels_[i]);
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t split_checksum(const std::vector<Sample>& samples) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& s : samples) {
    h = fnv1a(s.image.pixels.data(), s.image.pixels.size() * sizeof(float), h);
    const auto label = static_cast<std::uint64_t>(s.label);
    h = fnv1a(&label, sizeof(label), h);
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

nlohmann::json dataset_manifest(const DatasetSpec& spec) {
  nlohmann::json j;
  j["spec"] = spec;
  nlohmann::json splits = nlohmann::json::object();
  for (Split split : {Split::kTrain, Split::kVal, Split::kEval}) {
    const auto samples = generate_split(spec, split);
    std::vector<std::size_t> counts(spec.num_classes, 0);
    for (const auto& s : samples) ++counts[s.label];
    splits[std::string(split_name(split))] = {
        {"size", samples.size()}, {"checksum", hex64(split_checksum(samples))}, {"class_counts", counts}};
  }
  j["splits"] = splits;
  std::vector<std::string> names;
  for (std::size_t c = 0; c < spec.num_classes; ++c)
    names.emplace_back(shape_name(static_cast<ShapeKind>(c)));
  j["classes"] = names;
  return j;
}

}  // namespace dap
