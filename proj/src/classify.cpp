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

#include "sherlock/classify.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace sherlock {

namespace {

constexpr std::uint64_t kHeadStream = 0x68656164;     // "head"
constexpr std::uint64_t kScratchStream = 0x73637261;  // "scra"
constexpr std::uint64_t kShuffleStream = 0x73687566;  // "shuf"
constexpr double kClassBeta = 0.999;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(trim(part));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::vector<Index> shuffled_order(Index n, std::uint64_t seed) {
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng(seed);
  for (Index i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i) + 1)]);
  return order;
}

ViTConfig with_class_token(ViTConfig cfg) {
  cfg.use_class_token = true;
  return cfg;
}

template <typename Scalar>
void check_geometry(const ByteImage& img, const ViTConfig& cfg) {
  if (img.width != cfg.image_size || img.height != cfg.image_size || img.channels != cfg.in_channels) {
    throw ShapeError("image " + img.source_id + " is " + std::to_string(img.width) + "x" +
                     std::to_string(img.height) + "x" + std::to_string(img.channels) + ", model expects " +
                     std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) + "x" +
                     std::to_string(cfg.in_channels));
  }
}

}  // namespace

Task parse_task(std::string_view s) {
  if (s == "binary") return Task::Binary;
  if (s == "type") return Task::Type;
  if (s == "family") return Task::Family;
  throw std::invalid_argument("unknown task '" + std::string(s) + "' (expected binary, type or family)");
}

std::string_view to_string(Task t) {
  switch (t) {
    case Task::Binary: return "binary";
    case Task::Type: return "type";
    case Task::Family: return "family";
  }
  return "?";
}

std::string_view to_string(Verdict v) { return v == Verdict::Malicious ? kMaliciousLabel : kBenignLabel; }

Verdict parse_verdict(std::string_view s) {
  if (s == kMaliciousLabel) return Verdict::Malicious;
  if (s == kBenignLabel) return Verdict::Benign;
  throw std::invalid_argument("binary label must be 'malicious' or 'benign', got '" + std::string(s) + "'");
}

LabelHierarchy LabelHierarchy::from_rows(const std::vector<HierarchyRow>& rows) {
  LabelHierarchy h;
  for (const auto& r : rows) {
    if (r.family.empty() || r.type.empty()) throw std::invalid_argument("hierarchy row with an empty label");
    const Verdict v = parse_verdict(r.binary);
    if (!h.family_to_binary.emplace(r.family, v).second) {
      throw std::invalid_argument("family '" + r.family + "' appears more than once in the hierarchy");
    }
    h.families.push_back(r.family);
    auto [it, fresh] = h.type_to_binary.emplace(r.type, v);
    if (fresh) {
      h.types.push_back(r.type);
    } else if (it->second != v) {
      throw std::invalid_argument("type '" + r.type + "' maps to both malicious and benign");
    }
  }
  auto benign = [](const std::map<std::string, Verdict>& m) {
    return std::count_if(m.begin(), m.end(), [](const auto& kv) { return kv.second == Verdict::Benign; });
  };
  if (benign(h.family_to_binary) != 1) throw std::invalid_argument("hierarchy needs exactly one benign family");
  if (benign(h.type_to_binary) != 1) throw std::invalid_argument("hierarchy needs exactly one benign type");
  return h;
}

LabelHierarchy LabelHierarchy::load_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open hierarchy file " + path.string());
  std::string line;
  if (!std::getline(is, line) || split_csv(line) != std::vector<std::string>{"family", "type", "binary"}) {
    throw std::invalid_argument(path.string() + ": expected header 'family,type,binary'");
  }
  std::vector<HierarchyRow> rows;
  Index lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 3) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": expected 3 fields");
    }
    rows.push_back({f[0], f[1], f[2]});
  }
  return from_rows(rows);
}

std::vector<std::string> LabelHierarchy::labels(Task task) const {
  switch (task) {
    case Task::Binary: return {kBenignLabel, kMaliciousLabel};
    case Task::Type: return types;
    case Task::Family: return families;
  }
  return {};
}

Verdict infer_coarse(const std::string& fine_label, const LabelHierarchy& hierarchy, Task fine_task) {
  switch (fine_task) {
    case Task::Binary: return parse_verdict(fine_label);
    case Task::Type: {
      const auto it = hierarchy.type_to_binary.find(fine_label);
      if (it == hierarchy.type_to_binary.end()) throw std::out_of_range("unknown type label '" + fine_label + "'");
      return it->second;
    }
    case Task::Family: {
      const auto it = hierarchy.family_to_binary.find(fine_label);
      if (it == hierarchy.family_to_binary.end()) {
        throw std::out_of_range("unknown family label '" + fine_label + "'");
      }
      return it->second;
    }
  }
  throw std::out_of_range("bad task");
}

Verdict infer_coarse(const std::string& fine_label, const LabelHierarchy& hierarchy) {
  const auto t = hierarchy.type_to_binary.find(fine_label);
  const auto f = hierarchy.family_to_binary.find(fine_label);
  const bool in_t = t != hierarchy.type_to_binary.end(), in_f = f != hierarchy.family_to_binary.end();
  if (in_t && in_f && t->second != f->second) {
    throw std::invalid_argument("label '" + fine_label + "' is a type and a family with different verdicts");
  }
  if (in_t) return t->second;
  if (in_f) return f->second;
  throw std::out_of_range("unknown label '" + fine_label + "'");
}

double class_weight(std::int64_t count) {
  if (count < 1) throw std::invalid_argument("class_weight: class has " + std::to_string(count) + " images");
  // 1 - beta^n as -expm1(n log beta) avoids the cancellation in 1 - pow().
  const double log_beta = std::log1p(-(1.0 - kClassBeta));
  return std::expm1(log_beta) / std::expm1(static_cast<double>(count) * log_beta);
}

std::vector<double> class_weights(std::span<const std::int64_t> counts) {
  std::vector<double> out;
  out.reserve(counts.size());
  for (auto n : counts) out.push_back(class_weight(n));
  return out;
}

std::map<std::string, double> class_weights(const std::map<std::string, std::int64_t>& counts) {
  std::map<std::string, double> out;
  for (const auto& [label, n] : counts) {
    if (n < 1) throw std::invalid_argument("class '" + label + "' has no training images");
    out[label] = class_weight(n);
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> weighted_cross_entropy(const Tensor<Scalar>& logits, std::span<const Index> labels,
                                      std::span<const double> weights) {
  if (logits.rank() != 2) throw ShapeError("weighted_cross_entropy: logits must be [B, C]");
  const Index B = logits.dim(0), C = logits.dim(1);
  if (static_cast<Index>(labels.size()) != B) throw ShapeError("weighted_cross_entropy: label count != batch");
  if (static_cast<Index>(weights.size()) != C) throw ShapeError("weighted_cross_entropy: weight count != classes");
  for (Index y : labels) {
    if (y < 0 || y >= C) throw std::out_of_range("weighted_cross_entropy: label " + std::to_string(y));
  }
  using Array = typename Tensor<Scalar>::Array;
  const auto z = logits.matrix().template cast<double>().eval();
  Eigen::MatrixXd prob(B, C);
  double total = 0.0;
  for (Index i = 0; i < B; ++i) {
    const double m = z.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (z.row(i).array() - m).exp().matrix();
    const double s = e.sum();
    prob.row(i) = e / s;
    const double log_p = z(i, labels[i]) - m - std::log(s);
    total += weights[labels[i]] * -log_p;
  }
  Array value(1);
  value[0] = static_cast<Scalar>(total / static_cast<double>(B));
  std::vector<Index> ys(labels.begin(), labels.end());
  std::vector<double> ws(weights.begin(), weights.end());
  return make_result<Scalar>("weighted_cross_entropy", {}, std::move(value), {logits},
                             [logits, prob, ys, ws, B, C](const Array& g) {
                               Array dz(B * C);
                               for (Index i = 0; i < B; ++i) {
                                 const double k = static_cast<double>(g[0]) * ws[ys[i]] / static_cast<double>(B);
                                 for (Index c = 0; c < C; ++c) {
                                   const double d = prob(i, c) - (c == ys[i] ? 1.0 : 0.0);
                                   dz[i * C + c] = static_cast<Scalar>(k * d);
                                 }
                               }
                               logits.accumulate_grad(dz);
                             });
}

template <typename Scalar>
ParameterList<Scalar> ClassifierModel<Scalar>::parameters() const {
  auto out = encoder.parameters();
  head.collect(out, "head");
  return out;
}

template <typename Scalar>
ClassifierModel<Scalar> ClassifierModel<Scalar>::init(const ViTConfig& cfg, Task task, std::vector<std::string> labels,
                                                      std::uint64_t seed) {
  if (labels.size() < 2) throw std::invalid_argument("classifier needs at least two classes");
  ClassifierModel m;
  m.cfg = with_class_token(cfg);
  m.cfg.validate();
  Rng enc_rng(derive_seed(seed, kScratchStream));
  m.encoder = EncoderParams<Scalar>::init(m.cfg, enc_rng);
  Rng head_rng(derive_seed(seed, kHeadStream));
  m.head = Linear<Scalar>::init(m.cfg.encoder_dim, static_cast<Index>(labels.size()), head_rng);
  m.task = task;
  m.labels = std::move(labels);
  return m;
}

template <typename Scalar>
ClassifierModel<Scalar> ClassifierModel<Scalar>::from_pretrained(const MaeParams<Scalar>& pretrained, Task task,
                                                                 std::vector<std::string> labels,
                                                                 std::uint64_t seed) {
  ClassifierModel m = init(pretrained.cfg, task, std::move(labels), seed);
  auto dst = m.encoder.parameters();
  const auto src = pretrained.encoder.parameters();
  for (const auto& s : src) {
    auto it = std::find_if(dst.begin(), dst.end(), [&](const auto& d) { return d.name == s.name; });
    if (it == dst.end() || it->tensor.shape() != s.tensor.shape()) {
      throw std::invalid_argument("pretrained encoder tensor '" + s.name + "' does not fit the classifier");
    }
    it->tensor.mutable_data() = s.tensor.data();
  }
  return m;
}

template <typename Scalar>
Tensor<Scalar> classifier_logits(const ClassifierModel<Scalar>& model, const std::vector<const ByteImage*>& images) {
  const ViTConfig& cfg = model.cfg;
  if (images.empty()) throw std::invalid_argument("classifier_logits: empty batch");
  for (const auto* img : images) check_geometry<Scalar>(*img, cfg);
  const Index B = static_cast<Index>(images.size()), D = cfg.encoder_dim;
  const auto patches = patchify_batch<Scalar>(images, cfg);
  auto x = add(linear(patches, model.encoder.patch_embed), model.encoder.pos_table);
  const auto cls = add(Tensor<Scalar>::zeros({B, 1, D}), model.encoder.class_token);
  x = concat<Scalar>({cls, x}, 1);
  x = encoder_forward(x, model.encoder, cfg);
  const auto token = reshape(index_select(x, 1, {0}), {B, D});
  return linear(token, model.head);
}

template <typename Scalar>
double training_accuracy(const ClassifierModel<Scalar>& model, const LabeledSet& data) {
  if (data.images.empty()) return 0.0;
  std::vector<const ByteImage*> ptrs;
  for (const auto& img : data.images) ptrs.push_back(&img);
  const Eigen::MatrixXd probs = predict_batch(model, ptrs);
  Index correct = 0;
  for (Index i = 0; i < probs.rows(); ++i) {
    Index arg = 0;
    probs.row(i).maxCoeff(&arg);
    if (arg == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(probs.rows());
}

template <typename Scalar>
FinetuneResult<Scalar> finetune(const MaeParams<Scalar>* pretrained, const ViTConfig& cfg, const LabeledSet& data,
                                Task task, std::vector<std::string> labels, const FinetuneOptions& options) {
  if (data.images.empty()) throw std::invalid_argument("finetune: empty dataset");
  if (data.images.size() != data.labels.size()) throw std::invalid_argument("finetune: one label per image");
  if (options.batch_size < 1) throw std::invalid_argument("finetune: batch_size must be >= 1");
  if (task == Task::Binary && labels != std::vector<std::string>{kBenignLabel, kMaliciousLabel}) {
    throw std::invalid_argument("finetune: binary task labels must be {benign, malicious}");
  }
  const Index C = static_cast<Index>(labels.size());
  std::vector<std::int64_t> counts(labels.size(), 0);
  for (Index y : data.labels) {
    if (y < 0 || y >= C) throw std::invalid_argument("finetune: label index " + std::to_string(y) + " not in task");
    ++counts[y];
  }
  if (pretrained) {
    ViTConfig expected = cfg;
    expected.use_class_token = false;
    if (!(pretrained->cfg == expected)) {
      throw std::invalid_argument("finetune: checkpoint config does not match the requested model config");
    }
  }

  FinetuneResult<Scalar> result{
      pretrained ? ClassifierModel<Scalar>::from_pretrained(*pretrained, task, std::move(labels), options.seed)
                 : ClassifierModel<Scalar>::init(cfg, task, std::move(labels), options.seed),
      {},
      {},
      std::nullopt};
  // Classes absent from the training split never index the table.
  for (auto n : counts) result.class_weights.push_back(n > 0 ? class_weight(n) : 1.0);

  auto params = result.model.parameters();
  AdamWState<Scalar> opt;
  const Index n = static_cast<Index>(data.images.size());
  for (Index epoch = 0; epoch < options.epochs; ++epoch) {
    const auto order = shuffled_order(n, derive_seed(options.seed, kShuffleStream, epoch));
    for (Index start = 0; start < n; start += options.batch_size) {
      if (options.max_steps >= 0 && opt.step >= options.max_steps) return result;
      const Index stop = std::min(n, start + options.batch_size);
      std::vector<const ByteImage*> batch;
      std::vector<Index> ys;
      for (Index k = start; k < stop; ++k) {
        batch.push_back(&data.images[order[k]]);
        ys.push_back(data.labels[order[k]]);
      }
      zero_grad(params);
      const auto loss = weighted_cross_entropy(classifier_logits(result.model, batch), ys, result.class_weights);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        throw std::runtime_error("finetune: non-finite loss at step " + std::to_string(opt.step + 1));
      }
      backward(loss);
      adamw_step(params, opt, options.adamw);
      result.trace.push_back({epoch + 1, static_cast<Index>(opt.step), value});
      if (options.stop_at_full_accuracy && training_accuracy(result.model, data) == 1.0) {
        result.steps_to_full_accuracy = static_cast<Index>(opt.step);
        return result;
      }
    }
  }
  return result;
}

ByteImage prepare_image(const ByteImage& img, const ViTConfig& cfg) {
  ByteImage out = img;
  if (out.width != cfg.image_size || out.height != cfg.image_size) {
    out = lanczos_resize(out, cfg.image_size, cfg.image_size);
  }
  if (out.channels != cfg.in_channels) out = to_channels(out, cfg.in_channels);
  return out;
}

template <typename Scalar>
Eigen::MatrixXd predict_batch(const ClassifierModel<Scalar>& model, const std::vector<const ByteImage*>& images,
                              Index chunk) {
  NoGradGuard no_grad;
  const Index n = static_cast<Index>(images.size()), C = model.num_classes();
  Eigen::MatrixXd out(n, C);
  for (Index start = 0; start < n; start += chunk) {
    const Index stop = std::min(n, start + chunk);
    std::vector<const ByteImage*> part(images.begin() + start, images.begin() + stop);
    const auto logits = classifier_logits(model, part).matrix().template cast<double>().eval();
    for (Index i = 0; i < logits.rows(); ++i) {
      const Eigen::RowVectorXd e = (logits.row(i).array() - logits.row(i).maxCoeff()).exp().matrix();
      out.row(start + i) = e / e.sum();
    }
  }
  return out;
}

template <typename Scalar>
Eigen::VectorXd predict(const ClassifierModel<Scalar>& model, const ByteImage& img) {
  return predict_batch(model, {&img}).row(0).transpose();
}

Verdict detect_from_probability(double p_malicious) {
  return p_malicious > 0.5 ? Verdict::Malicious : Verdict::Benign;
}

template <typename Scalar>
Verdict detect(const ClassifierModel<Scalar>& model, const ByteImage& img) {
  if (model.task != Task::Binary) throw std::invalid_argument("detect needs a binary classifier");
  return detect_from_probability(predict(model, img)[1]);
}

template <typename Scalar>
void save_classifier(const std::filesystem::path& path, const ClassifierModel<Scalar>& model) {
  Checkpoint ckpt;
  ckpt.set("kind", "classifier");
  put_config(ckpt, model.cfg);
  ckpt.set("task", std::string(to_string(model.task)));
  std::string joined;
  for (const auto& l : model.labels) {
    if (l.find_first_of(",\n") != std::string::npos) throw CheckpointError("label '" + l + "' contains a comma");
    joined += (joined.empty() ? "" : ",") + l;
  }
  ckpt.set("labels", joined);
  put_parameters(ckpt, model.parameters());
  write_checkpoint(path, ckpt);
}

template <typename Scalar>
ClassifierModel<Scalar> load_classifier(const std::filesystem::path& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  if (ckpt.get("kind") != "classifier") throw CheckpointError(path.string() + " is not a classifier checkpoint");
  std::vector<std::string> labels;
  std::stringstream ss(ckpt.get("labels"));
  std::string l;
  while (std::getline(ss, l, ',')) labels.push_back(l);
  auto model = ClassifierModel<Scalar>::init(get_config(ckpt), parse_task(ckpt.get("task")), labels, 0);
  auto params = model.parameters();
  load_parameters(ckpt, params);
  return model;
}

#define SHERLOCK_INSTANTIATE_CLASSIFY(S)                                                                       \
  template Tensor<S> weighted_cross_entropy<S>(const Tensor<S>&, std::span<const Index>,                      \
                                               std::span<const double>);                                      \
  template struct ClassifierModel<S>;                                                                          \
  template Tensor<S> classifier_logits<S>(const ClassifierModel<S>&, const std::vector<const ByteImage*>&);    \
  template FinetuneResult<S> finetune<S>(const MaeParams<S>*, const ViTConfig&, const LabeledSet&, Task,       \
                                         std::vector<std::string>, const FinetuneOptions&);                    \
  template Eigen::VectorXd predict<S>(const ClassifierModel<S>&, const ByteImage&);                            \
  template Eigen::MatrixXd predict_batch<S>(const ClassifierModel<S>&, const std::vector<const ByteImage*>&,   \
                                            Index);                                                            \
  template Verdict detect<S>(const ClassifierModel<S>&, const ByteImage&);                                     \
  template double training_accuracy<S>(const ClassifierModel<S>&, const LabeledSet&);                          \
  template void save_classifier<S>(const std::filesystem::path&, const ClassifierModel<S>&);                   \
  template ClassifierModel<S> load_classifier<S>(const std::filesystem::path&);

SHERLOCK_INSTANTIATE_CLASSIFY(float)
SHERLOCK_INSTANTIATE_CLASSIFY(double)

}  // namespace sherlock
