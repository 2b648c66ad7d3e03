// Copyright 2026 The Sherlock Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "sherlock/cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

namespace sherlock {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(trim(part));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw std::invalid_argument("config key '" + key + "': cannot parse '" + value + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "': cannot parse '" + value + "' as a number");
  }
}

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

/// Config file, then --preset, then every other --<key> flag.
struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> values;

  void attach(CLI::App* sub, bool conversion_aliases = false) {
    sub->add_option("--config", config_file, "key=value configuration file")->check(CLI::ExistingFile);
    for (const auto& key : RunConfig::keys()) {
      std::string names = "--" + key;
      if (conversion_aliases && key == "fixed_width") names += ",--width";
      if (conversion_aliases && key == "canonical_size") names += ",--size";
      sub->add_option(names, values[key], "override config key " + key);
    }
  }

  RunConfig resolve(CLI::App* sub) const {
    RunConfig cfg;
    if (!config_file.empty()) cfg.load_file(config_file);
    for (const auto& key : RunConfig::keys()) {
      if (sub->count("--" + key) > 0) cfg.set(key, values.at(key));
    }
    cfg.validate();
    return cfg;
  }
};

std::vector<ByteImage> load_images(const std::vector<const ManifestRow*>& rows, const ViTConfig& cfg) {
  std::vector<ByteImage> out;
  out.reserve(rows.size());
  for (const auto* r : rows) out.push_back(load_model_image(*r, cfg));
  return out;
}

std::vector<std::string> task_labels(Task task, const std::optional<LabelHierarchy>& hierarchy) {
  if (task == Task::Binary) return {kBenignLabel, kMaliciousLabel};
  if (!hierarchy) throw std::invalid_argument("task '" + std::string(to_string(task)) + "' needs --hierarchy");
  return hierarchy->labels(task);
}

Index label_index(const std::vector<std::string>& labels, const std::string& label) {
  const auto it = std::find(labels.begin(), labels.end(), label);
  if (it == labels.end()) throw std::invalid_argument("label '" + label + "' is not a class of this model");
  return static_cast<Index>(it - labels.begin());
}

void write_loss_csv(const fs::path& path, const std::vector<LossRecord>& trace) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "epoch,step,loss\n" << std::setprecision(9);
  for (const auto& r : trace) os << r.epoch << ',' << r.step << ',' << r.loss << '\n';
}

std::vector<LossRecord> read_loss_csv(const fs::path& path) {
  std::vector<LossRecord> out;
  std::ifstream is(path);
  std::string line;
  if (!is || !std::getline(is, line)) return out;
  while (std::getline(is, line)) {
    const auto f = split_fields(line);
    if (f.size() != 3) continue;
    out.push_back({std::stoll(f[0]), std::stoll(f[1]), std::stod(f[2])});
  }
  return out;
}

// ---------------------------------------------------------------------------

struct ConvertArgs {
  std::string input, output;
  bool strict = false;
};

int cmd_convert(const ConvertArgs& a, const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const fs::path input(a.input);
  std::vector<fs::path> files;
  if (fs::is_directory(input)) {
    for (const auto& e : fs::recursive_directory_iterator(input)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else if (fs::exists(input)) {
    files.push_back(input);
  } else {
    throw std::invalid_argument("input " + a.input + " does not exist");
  }
  const fs::path root = fs::is_directory(input) ? input : input.parent_path();
  const fs::path output(a.output);
  fs::create_directories(output);

  const auto t0 = Clock::now();
  const auto results = convert_batch(files, cfg.conversion, static_cast<unsigned>(cfg.workers));
  const double total_ms = ms_since(t0);

  std::ofstream log(output / "conversion.log");
  Index converted = 0, skipped = 0;
  for (const auto& r : results) {
    const fs::path rel = fs::relative(r.path, root);
    if (!r.image) {
      ++skipped;
      log << "skip " << rel.string() << ": " << r.error << '\n';
      err << "skip " << rel.string() << ": " << r.error << '\n';
      continue;
    }
    fs::path dst = output / rel;
    dst += ".png";
    fs::create_directories(dst.parent_path());
    write_png(*r.image, dst);
    log << "ok " << rel.string() << " -> " << fs::relative(dst, output).string() << '\n';
    ++converted;
  }
  out << "converted " << converted << ", skipped " << skipped << '\n';
  if (!results.empty()) {
    err << std::fixed << std::setprecision(3) << "convert time per file: "
        << total_ms / 1000.0 / static_cast<double>(results.size()) << " s\n";
  }
  return (a.strict && skipped > 0) ? kExitError : kExitOk;
}

struct PretrainArgs {
  std::string manifest, output, resume;
};

int cmd_pretrain(const PretrainArgs& a, const RunConfig& cfg, std::ostream& out, std::ostream&) {
  const auto manifest = DatasetManifest::load(a.manifest);
  const auto rows = manifest.split("train");
  if (rows.empty()) throw std::invalid_argument("manifest has no train rows");
  std::optional<PretrainState<float>> resume;
  if (!a.resume.empty()) {
    const auto header = read_checkpoint(a.resume);
    if (std::stoull(header.get("seed")) != cfg.seed) {
      throw std::invalid_argument("--resume: checkpoint was trained with seed " + header.get("seed"));
    }
    resume = load_mae_checkpoint<float>(a.resume);
    ViTConfig expected = cfg.model;
    expected.use_class_token = false;
    if (!(resume->params.cfg == expected)) throw std::invalid_argument("--resume: checkpoint model config differs");
  }
  const auto images = load_images(rows, cfg.model);

  PretrainOptions opts;
  opts.adamw = cfg.pretrain_adamw();
  opts.batch_size = cfg.batch_size;
  opts.epochs = cfg.epochs;
  opts.max_steps = cfg.max_steps;
  opts.keep_ratio = cfg.keep_ratio;
  opts.seed = cfg.seed;
  opts.checkpoint_dir = a.output;
  opts.on_step = [&out](const LossRecord& r) {
    out << "epoch " << r.epoch << " step " << r.step << " loss " << std::setprecision(6) << r.loss << '\n';
  };

  std::vector<LossRecord> trace;
  const fs::path loss_path = fs::path(a.output) / "loss.csv";
  if (resume) {
    const auto done = resume->optimizer.step;
    for (const auto& r : read_loss_csv(loss_path)) {
      if (r.step <= done) trace.push_back(r);
    }
  }
  fs::create_directories(a.output);
  const auto state = pretrain<float>(images, cfg.model, opts, std::move(resume));
  trace.insert(trace.end(), state.trace.begin(), state.trace.end());
  write_loss_csv(loss_path, trace);
  out << "pretrained " << state.epochs_done << " epochs, " << state.optimizer.step << " steps\n";
  return kExitOk;
}

struct FinetuneArgs {
  std::string manifest, from, hierarchy, output;
  bool scratch = false;
  bool until_fit = false;
};

int cmd_finetune(const FinetuneArgs& a, const RunConfig& cfg, std::ostream& out, std::ostream&) {
  if (a.from.empty() == !a.scratch) throw std::invalid_argument("give exactly one of --from <ckpt> or --scratch");
  const auto manifest = DatasetManifest::load(a.manifest);
  std::optional<LabelHierarchy> hierarchy;
  if (!a.hierarchy.empty()) {
    hierarchy = LabelHierarchy::load_csv(a.hierarchy);
    manifest.check_labels(*hierarchy);
  }
  const auto labels = task_labels(cfg.task, hierarchy);
  std::optional<PretrainState<float>> pretrained;
  if (!a.from.empty()) {
    pretrained = load_mae_checkpoint<float>(a.from);
    ViTConfig expected = cfg.model;
    expected.use_class_token = false;
    if (!(pretrained->params.cfg == expected)) {
      throw std::invalid_argument("--from: checkpoint model config does not match the run config");
    }
  }
  const auto rows = manifest.split("train");
  if (rows.empty()) throw std::invalid_argument("manifest has no train rows");
  LabeledSet data;
  data.images = load_images(rows, cfg.model);
  for (const auto* r : rows) data.labels.push_back(label_index(labels, r->label(cfg.task)));

  FinetuneOptions opts;
  opts.adamw = cfg.finetune_adamw();
  opts.batch_size = cfg.batch_size;
  opts.epochs = cfg.epochs;
  opts.max_steps = cfg.max_steps;
  opts.seed = cfg.seed;
  opts.stop_at_full_accuracy = a.until_fit;
  const auto result =
      finetune<float>(pretrained ? &pretrained->params : nullptr, cfg.model, data, cfg.task, labels, opts);

  const fs::path model_path(a.output);
  if (model_path.has_parent_path()) fs::create_directories(model_path.parent_path());
  save_classifier(model_path, result.model);
  fs::path loss_path = model_path;
  loss_path.replace_filename(model_path.stem().string() + "_loss.csv");
  write_loss_csv(loss_path, result.trace);
  out << "finetuned " << result.trace.size() << " steps, train accuracy " << std::setprecision(4)
      << training_accuracy(result.model, data) << '\n';
  if (result.steps_to_full_accuracy) out << "full training accuracy after " << *result.steps_to_full_accuracy << " steps\n";
  return kExitOk;
}

struct EvaluateArgs {
  std::string manifest, model, hierarchy, output, split = "test";
  bool infer_coarse = false;
};

int cmd_evaluate(const EvaluateArgs& a, const RunConfig&, std::ostream& out, std::ostream& err) {
  const auto manifest = DatasetManifest::load(a.manifest);
  std::optional<LabelHierarchy> hierarchy;
  if (!a.hierarchy.empty()) {
    hierarchy = LabelHierarchy::load_csv(a.hierarchy);
    manifest.check_labels(*hierarchy);
  }
  if (a.infer_coarse && !hierarchy) throw std::invalid_argument("--infer-coarse needs --hierarchy");
  const auto model = load_classifier<float>(a.model);
  if (a.infer_coarse && model.task == Task::Binary) {
    throw std::invalid_argument("--infer-coarse needs a type or family model");
  }
  const auto rows = manifest.split(a.split);
  if (rows.empty()) throw std::invalid_argument("manifest has no rows in split '" + a.split + "'");
  std::vector<Index> actual;
  for (const auto* r : rows) actual.push_back(label_index(model.labels, r->label(model.task)));
  const auto images = load_images(rows, model.cfg);

  std::vector<const ByteImage*> ptrs;
  for (const auto& img : images) ptrs.push_back(&img);
  const auto t0 = Clock::now();
  const Eigen::MatrixXd probs = predict_batch(model, ptrs);
  const double infer_ms = ms_since(t0);
  std::vector<Index> predicted;
  for (Index i = 0; i < probs.rows(); ++i) {
    Index arg = 0;
    probs.row(i).maxCoeff(&arg);
    predicted.push_back(arg);
  }

  const fs::path dir(a.output);
  fs::create_directories(dir);
  const auto cm = confusion(predicted, actual, model.labels);
  const auto metrics = macro_metrics(cm);
  write_confusion_csv(dir / "confusion.csv", cm);
  write_confusion_png(dir / "confusion.png", cm);

  std::optional<double> auc;
  if (model.task == Task::Binary) {
    std::vector<double> scores;
    std::vector<std::uint8_t> positive;
    for (Index i = 0; i < probs.rows(); ++i) {
      scores.push_back(probs(i, 1));
      positive.push_back(actual[i] == 1 ? 1 : 0);
    }
    if (std::count(positive.begin(), positive.end(), 1) > 0 && std::count(positive.begin(), positive.end(), 0) > 0) {
      const auto roc = roc_auc(scores, positive);
      write_roc_csv(dir / "roc.csv", roc);
      write_roc_png(dir / "roc.png", roc);
      auc = roc.auc;
    } else {
      err << "ROC skipped: split '" << a.split << "' holds only one class\n";
    }
  }

  std::optional<MetricsReport> collapsed;
  if (a.infer_coarse) {
    std::vector<Index> mapping;
    for (const auto& l : model.labels) {
      mapping.push_back(infer_coarse(l, *hierarchy, model.task) == Verdict::Malicious ? 1 : 0);
    }
    const auto binary_cm = collapse(cm, mapping, {kBenignLabel, kMaliciousLabel});
    write_confusion_csv(dir / "confusion_binary.csv", binary_cm);
    collapsed = macro_metrics(binary_cm);
  }
  write_metrics_json(dir / "metrics.json", metrics, collapsed, auc);

  out << std::setprecision(4) << "accuracy " << metrics.accuracy << " macro_f1 " << metrics.macro_f1_harmonic
      << " (classwise " << metrics.macro_f1_classwise << ")";
  if (auc) out << " auc " << *auc;
  if (collapsed) out << "; collapsed binary macro_f1 " << collapsed->macro_f1_harmonic;
  out << '\n';
  err << std::fixed << std::setprecision(4) << "infer time per image: "
      << infer_ms / 1000.0 / static_cast<double>(rows.size()) << " s\n";
  return kExitOk;
}

struct DetectArgs {
  std::string file, model, hierarchy;
};

int cmd_detect(const DetectArgs& a, const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const auto model = load_classifier<float>(a.model);
  std::optional<LabelHierarchy> hierarchy;
  if (!a.hierarchy.empty()) hierarchy = LabelHierarchy::load_csv(a.hierarchy);
  if (model.task != Task::Binary && !hierarchy) {
    throw std::invalid_argument("a " + std::string(to_string(model.task)) + " model needs --hierarchy to detect");
  }

  const auto t0 = Clock::now();
  const auto raw = read_file_bytes(a.file);
  const ByteImage img = prepare_image(convert_bytes(raw, cfg.conversion, fs::path(a.file).filename().string()),
                                      model.cfg);
  const double convert_ms = ms_since(t0);
  const auto t1 = Clock::now();
  const Eigen::VectorXd probs = predict(model, img);
  const double infer_ms = ms_since(t1);

  Verdict verdict;
  double p_malicious = 0.0;
  if (model.task == Task::Binary) {
    p_malicious = probs[1];
    verdict = detect_from_probability(p_malicious);
  } else {
    Index arg = 0;
    probs.maxCoeff(&arg);
    verdict = infer_coarse(model.labels[arg], *hierarchy, model.task);
    for (Index c = 0; c < probs.size(); ++c) {
      if (infer_coarse(model.labels[c], *hierarchy, model.task) == Verdict::Malicious) p_malicious += probs[c];
    }
  }
  out << (verdict == Verdict::Malicious ? "MALICIOUS " : "BENIGN ") << std::fixed << std::setprecision(6)
      << p_malicious << '\n';
  err << std::fixed << std::setprecision(4) << "convert " << convert_ms / 1000.0 << " s, infer "
      << infer_ms / 1000.0 << " s\n";
  return verdict == Verdict::Malicious ? kExitMalicious : kExitOk;
}

struct ReconArgs {
  std::string manifest, checkpoint, output, split = "test", by = "family";
};

int cmd_recon_eval(const ReconArgs& a, const RunConfig& cfg, std::ostream& out, std::ostream&) {
  const Task by = parse_task(a.by);
  const auto manifest = DatasetManifest::load(a.manifest);
  const auto state = load_mae_checkpoint<float>(a.checkpoint);
  const auto rows = manifest.split(a.split);
  if (rows.empty()) throw std::invalid_argument("manifest has no rows in split '" + a.split + "'");

  std::vector<ReconClass> classes;
  for (const auto* r : rows) {
    const auto& label = r->label(by);
    auto it = std::find_if(classes.begin(), classes.end(), [&](const auto& c) { return c.label == label; });
    if (it == classes.end()) {
      classes.push_back({label, {}});
      it = classes.end() - 1;
    }
    it->images.push_back(load_model_image(*r, state.params.cfg));
  }
  ReconOptions opts;
  opts.n_masks = cfg.n_masks_eval;
  opts.mask_ratio = cfg.mask_ratio_eval;
  opts.seed = cfg.seed;
  opts.workers = cfg.workers;
  const auto report = recon_error_eval(mae_compositor(state.params), classes, state.params.cfg, opts);
  const fs::path dir(a.output);
  fs::create_directories(dir);
  write_recon_csv(dir / "recon_by_class.csv", report);
  out << "overall mean absolute error " << std::setprecision(6) << report.overall << " over " << classes.size()
      << " classes\n";
  return kExitOk;
}

}  // namespace

// ---------------------------------------------------------------------------

const std::string& ManifestRow::label(Task task) const {
  switch (task) {
    case Task::Binary: return binary_label;
    case Task::Type: return type_label;
    case Task::Family: return family_label;
  }
  return binary_label;
}

DatasetManifest DatasetManifest::load(const fs::path& path, bool check_paths) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open manifest " + path.string());
  std::string line;
  const std::vector<std::string> header{"image_path", "binary_label", "type_label", "family_label", "split"};
  if (!std::getline(is, line) || split_fields(line) != header) {
    throw std::invalid_argument(path.string() + ": expected header 'image_path,binary_label,type_label,family_label,split'");
  }
  DatasetManifest m;
  std::map<std::string, std::string> split_of;
  Index lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto f = split_fields(line);
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    if (f.size() != 5) throw std::invalid_argument(where + "expected 5 fields");
    if (f[4] != "train" && f[4] != "val" && f[4] != "test") throw std::invalid_argument(where + "bad split " + f[4]);
    parse_verdict(f[1]);
    ManifestRow row{f[0], path.parent_path() / f[0], f[1], f[2], f[3], f[4]};
    const auto key = row.image_path.lexically_normal().string();
    auto [it, fresh] = split_of.emplace(key, row.split);
    if (!fresh && it->second != row.split) {
      throw std::invalid_argument(where + f[0] + " appears in both " + it->second + " and " + row.split);
    }
    if (check_paths && !fs::exists(row.image_path)) throw std::invalid_argument(where + f[0] + " does not exist");
    m.rows.push_back(std::move(row));
  }
  return m;
}

std::vector<const ManifestRow*> DatasetManifest::split(const std::string& name) const {
  std::vector<const ManifestRow*> out;
  for (const auto& r : rows) {
    if (r.split == name) out.push_back(&r);
  }
  return out;
}

void DatasetManifest::check_labels(const LabelHierarchy& hierarchy) const {
  for (const auto& r : rows) {
    if (!hierarchy.type_to_binary.count(r.type_label)) {
      throw std::invalid_argument("manifest type '" + r.type_label + "' is not in the hierarchy");
    }
    if (!hierarchy.family_to_binary.count(r.family_label)) {
      throw std::invalid_argument("manifest family '" + r.family_label + "' is not in the hierarchy");
    }
  }
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k{
      "preset",         "image_size", "patch_size", "in_channels", "encoder_dim",     "encoder_blocks",
      "heads",          "mlp_ratio",  "decoder_dim", "decoder_blocks", "fixed_width",  "canonical_size",
      "color",          "lr",         "beta1",      "beta2",       "weight_decay",    "batch_size",
      "epochs",         "max_steps",  "keep_ratio", "mask_ratio_eval", "n_masks_eval", "seed",
      "task",           "workers"};
  return k;
}

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::string value = trim(raw);
  auto idx = [&] { return parse_number<Index>(key, value); };
  if (key == "preset") {
    if (value == "tiny") {
      model = ViTConfig::tiny();
    } else if (value == "paper") {
      model = ViTConfig::base();
    } else {
      throw std::invalid_argument("preset must be tiny or paper, got '" + value + "'");
    }
  } else if (key == "image_size") {
    model.image_size = idx();
  } else if (key == "patch_size") {
    model.patch_size = idx();
  } else if (key == "in_channels") {
    model.in_channels = idx();
  } else if (key == "encoder_dim") {
    model.encoder_dim = idx();
  } else if (key == "encoder_blocks") {
    model.encoder_blocks = idx();
  } else if (key == "heads") {
    model.heads = idx();
  } else if (key == "mlp_ratio") {
    model.mlp_ratio = idx();
  } else if (key == "decoder_dim") {
    model.decoder_dim = idx();
  } else if (key == "decoder_blocks") {
    model.decoder_blocks = idx();
  } else if (key == "fixed_width") {
    conversion.fixed_width = idx();
  } else if (key == "canonical_size") {
    conversion.canonical_size = idx();
  } else if (key == "color") {
    conversion.color_mode = parse_color_mode(value);
  } else if (key == "lr") {
    lr = parse_double(key, value);
  } else if (key == "beta1") {
    beta1 = parse_double(key, value);
  } else if (key == "beta2") {
    beta2 = parse_double(key, value);
  } else if (key == "weight_decay") {
    weight_decay = parse_double(key, value);
  } else if (key == "batch_size") {
    batch_size = idx();
  } else if (key == "epochs") {
    epochs = idx();
  } else if (key == "max_steps") {
    max_steps = idx();
  } else if (key == "keep_ratio") {
    keep_ratio = parse_double(key, value);
  } else if (key == "mask_ratio_eval") {
    mask_ratio_eval = parse_double(key, value);
  } else if (key == "n_masks_eval") {
    n_masks_eval = idx();
  } else if (key == "seed") {
    seed = parse_number<std::uint64_t>(key, value);
  } else if (key == "task") {
    task = parse_task(value);
  } else if (key == "workers") {
    workers = idx();
  } else {
    throw std::invalid_argument("unknown config key '" + key + "'");
  }
}

void RunConfig::load_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open config " + path.string());
  std::string line;
  std::vector<std::pair<std::string, std::string>> entries;
  Index lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    }
    entries.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  // The preset is a base layer; explicit keys in the same file win.
  std::stable_partition(entries.begin(), entries.end(), [](const auto& e) { return e.first == "preset"; });
  for (const auto& [k, v] : entries) set(k, v);
}

void RunConfig::validate() const {
  model.validate();
  conversion.validate();
  auto positive = [](const char* name, double v) {
    if (!(v > 0.0)) throw std::invalid_argument(std::string(name) + " must be positive");
  };
  if (lr) positive("lr", *lr);
  for (const auto& [name, b] : {std::pair{"beta1", beta1}, std::pair{"beta2", beta2}}) {
    if (b && !(*b >= 0.0 && *b < 1.0)) throw std::invalid_argument(std::string(name) + " must lie in [0, 1)");
  }
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (max_steps < -1) throw std::invalid_argument("max_steps must be -1 (no limit) or >= 0");
  if (!(keep_ratio > 0.0 && keep_ratio < 1.0)) throw std::invalid_argument("keep_ratio must lie in (0, 1)");
  const Index keep = std::llround(keep_ratio * static_cast<double>(model.num_patches()));
  if (keep < 1 || keep >= model.num_patches()) {
    throw std::invalid_argument("keep_ratio leaves no visible or no masked patch at this patch grid");
  }
  if (!(mask_ratio_eval > 0.0 && mask_ratio_eval < 1.0)) {
    throw std::invalid_argument("mask_ratio_eval must lie in (0, 1)");
  }
  if (n_masks_eval < 1) throw std::invalid_argument("n_masks_eval must be >= 1");
  if (workers < 1) throw std::invalid_argument("workers must be >= 1");
}

AdamWOptions RunConfig::pretrain_adamw() const {
  return {lr.value_or(1.5e-4), beta1.value_or(0.9), beta2.value_or(0.95), 1e-8, weight_decay};
}

AdamWOptions RunConfig::finetune_adamw() const {
  return {lr.value_or(1e-4), beta1.value_or(0.9), beta2.value_or(0.999), 1e-8, weight_decay};
}

ByteImage load_model_image(const ManifestRow& row, const ViTConfig& cfg) {
  ByteImage img = prepare_image(read_png(row.image_path), cfg);
  img.source_id = row.id;
  return img;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Byteplot malware detection with masked-autoencoder pretraining", "sherlock"};
  app.require_subcommand(1);

  ConvertArgs convert_args;
  ConfigFlags convert_cfg;
  auto* convert = app.add_subcommand("convert", "Convert binaries to byteplot PNGs");
  convert->add_option("--input", convert_args.input, "file or directory of binaries")->required();
  convert->add_option("--output", convert_args.output, "output directory")->required();
  convert->add_flag("--strict", convert_args.strict, "exit 1 if any file was skipped");
  convert_cfg.attach(convert, true);

  PretrainArgs pretrain_args;
  ConfigFlags pretrain_cfg;
  auto* pre = app.add_subcommand("pretrain", "Masked-autoencoder pretraining on the train split");
  pre->add_option("--manifest", pretrain_args.manifest)->required();
  pre->add_option("--output", pretrain_args.output, "checkpoint directory")->required();
  pre->add_option("--resume", pretrain_args.resume, "continue from a pretraining checkpoint")
      ->check(CLI::ExistingFile);
  pretrain_cfg.attach(pre);

  FinetuneArgs finetune_args;
  ConfigFlags finetune_cfg;
  auto* fine = app.add_subcommand("finetune", "Fine-tune a classifier on the train split");
  fine->add_option("--manifest", finetune_args.manifest)->required();
  fine->add_option("--from", finetune_args.from, "pretraining checkpoint")->check(CLI::ExistingFile);
  fine->add_flag("--scratch", finetune_args.scratch, "random encoder initialization");
  fine->add_option("--hierarchy", finetune_args.hierarchy)->check(CLI::ExistingFile);
  fine->add_option("--output", finetune_args.output, "classifier checkpoint path")->required();
  fine->add_flag("--until-fit", finetune_args.until_fit, "stop once every training image is classified correctly");
  finetune_cfg.attach(fine);

  EvaluateArgs eval_args;
  ConfigFlags eval_cfg;
  auto* evaluate = app.add_subcommand("evaluate", "Metrics and reports for a classifier");
  evaluate->add_option("--manifest", eval_args.manifest)->required();
  evaluate->add_option("--model", eval_args.model)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--hierarchy", eval_args.hierarchy)->check(CLI::ExistingFile);
  evaluate->add_option("--split", eval_args.split)->check(CLI::IsMember({"train", "val", "test"}));
  evaluate->add_option("--output", eval_args.output, "report directory")->required();
  evaluate->add_flag("--infer-coarse", eval_args.infer_coarse, "also report binary metrics via the hierarchy");
  eval_cfg.attach(evaluate);

  DetectArgs detect_args;
  ConfigFlags detect_cfg;
  auto* detect_cmd = app.add_subcommand("detect", "Classify one binary as MALICIOUS or BENIGN");
  detect_cmd->add_option("file", detect_args.file, "binary to inspect")->required();
  detect_cmd->add_option("--model", detect_args.model)->required()->check(CLI::ExistingFile);
  detect_cmd->add_option("--hierarchy", detect_args.hierarchy)->check(CLI::ExistingFile);
  detect_cfg.attach(detect_cmd, true);

  ReconArgs recon_args;
  ConfigFlags recon_cfg;
  auto* recon = app.add_subcommand("recon-eval", "Masked reconstruction error per class");
  recon->add_option("--manifest", recon_args.manifest)->required();
  recon->add_option("--checkpoint", recon_args.checkpoint)->required()->check(CLI::ExistingFile);
  recon->add_option("--split", recon_args.split)->check(CLI::IsMember({"train", "val", "test"}));
  recon->add_option("--by", recon_args.by, "grouping: binary, type or family")
      ->check(CLI::IsMember({"binary", "type", "family"}));
  recon->add_option("--output", recon_args.output, "report directory")->required();
  recon_cfg.attach(recon);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitError;
  }

  try {
    if (convert->parsed()) return cmd_convert(convert_args, convert_cfg.resolve(convert), out, err);
    if (pre->parsed()) return cmd_pretrain(pretrain_args, pretrain_cfg.resolve(pre), out, err);
    if (fine->parsed()) return cmd_finetune(finetune_args, finetune_cfg.resolve(fine), out, err);
    if (evaluate->parsed()) return cmd_evaluate(eval_args, eval_cfg.resolve(evaluate), out, err);
    if (detect_cmd->parsed()) return cmd_detect(detect_args, detect_cfg.resolve(detect_cmd), out, err);
    if (recon->parsed()) return cmd_recon_eval(recon_args, recon_cfg.resolve(recon), out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitError;
}

}  // namespace sherlock
