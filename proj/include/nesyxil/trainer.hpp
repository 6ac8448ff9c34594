#pragma once

// Training loops (cross-entropy and explanation-regularized), Adam with cosine
// annealing, evaluation metrics, checkpoints, and the multi-seed experiment
// suite.

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nesyxil/autodiff.hpp"
#include "nesyxil/dataset.hpp"
#include "nesyxil/explainer.hpp"
#include "nesyxil/set_transformer.hpp"
#include "nesyxil/xil.hpp"

namespace nesyxil {

enum class TrainMode { kDefault, kXilMse, kXilRrr, kXilBoth };

inline std::string_view mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::kDefault: return "default";
    case TrainMode::kXilMse: return "xil_mse";
    case TrainMode::kXilRrr: return "xil_rrr";
    case TrainMode::kXilBoth: return "xil_both";
  }
  return "";
}

inline TrainMode parse_mode(std::string_view s) {
  if (s == "default") return TrainMode::kDefault;
  if (s == "xil_mse") return TrainMode::kXilMse;
  if (s == "xil_rrr") return TrainMode::kXilRrr;
  if (s == "xil_both") return TrainMode::kXilBoth;
  throw FormatError("unknown training mode '" + std::string(s) + "'");
}

// Where the positive masks of the MSE term come from.
enum class MaskSource { kFeedback, kGroundTruth };

// How the explanation penalties are reduced before weighting. kSum keeps the
// plain sums (MSE summed per sample, RRR summed over the batch); kMean
// divides the MSE by the K*D mask entries and the RRR by the batch size.
enum class Reduction { kSum, kMean };

inline std::string_view reduction_name(Reduction r) { return r == Reduction::kSum ? "sum" : "mean"; }

inline Reduction parse_reduction(std::string_view s) {
  if (s == "sum") return Reduction::kSum;
  if (s == "mean") return Reduction::kMean;
  throw FormatError("unknown reduction '" + std::string(s) + "'");
}

struct TrainConfig {
  TrainMode mode = TrainMode::kDefault;
  std::size_t epochs = 50;
  std::size_t batch_size = 128;
  double lr_init = 1e-4;
  double lr_min = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double lambda_mse = 1000.0;
  double lambda_rrr = 20.0;
  std::uint64_t seed = 0;
  std::size_t ig_steps_train = kTrainIgSteps;
  // Samples per batch that receive the MSE term (0: all). The IG graph costs
  // ig_steps forward passes per sample, so this bounds the step cost.
  std::size_t expl_samples = 0;
  // Validation samples used for the explanation part of the validation loss
  // (0: all), taken in a fixed order.
  std::size_t val_expl_samples = 0;
  MaskSource mask_source = MaskSource::kFeedback;
  Reduction mse_reduction = Reduction::kMean;
  Reduction rrr_reduction = Reduction::kMean;
  std::uint64_t encode_seed = 0;
  ModelConfig model;

  bool uses_mse() const { return mode == TrainMode::kXilMse || mode == TrainMode::kXilBoth; }
  bool uses_rrr() const { return mode == TrainMode::kXilRrr || mode == TrainMode::kXilBoth; }

  void validate() const {
    if (epochs < 1) throw FormatError("epochs must be >= 1");
    if (batch_size < 1) throw FormatError("batch size must be >= 1");
    if (!(lr_min <= lr_init)) throw FormatError("lr_min must not exceed lr_init");
    if (lambda_mse < 0.0 || lambda_rrr < 0.0) throw FormatError("lambdas must be nonnegative");
    if (ig_steps_train < 1) throw FormatError("ig steps must be >= 1");
    model.validate();
  }

  ordered_json to_json() const {
    ordered_json j;
    j["mode"] = mode_name(mode);
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["lr_init"] = lr_init;
    j["lr_min"] = lr_min;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["eps"] = eps;
    j["weight_decay"] = weight_decay;
    j["lambda_mse"] = lambda_mse;
    j["lambda_rrr"] = lambda_rrr;
    j["seed"] = seed;
    j["ig_steps_train"] = ig_steps_train;
    j["expl_samples"] = expl_samples;
    j["val_expl_samples"] = val_expl_samples;
    j["mask_source"] = mask_source == MaskSource::kFeedback ? "feedback" : "ground_truth";
    j["mse_reduction"] = reduction_name(mse_reduction);
    j["rrr_reduction"] = reduction_name(rrr_reduction);
    j["encode_seed"] = encode_seed;
    j["model"] = {{"d_in", model.d_in},       {"d_hidden", model.d_hidden},   {"n_heads", model.n_heads},
                  {"n_sab", model.n_sab},     {"dropout_p", model.dropout_p}, {"n_classes", model.n_classes},
                  {"n_pma_seeds", model.n_pma_seeds}};
    return j;
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.mode = parse_mode(j.at("mode").get<std::string>());
    c.epochs = j.at("epochs").get<std::size_t>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.lr_init = j.at("lr_init").get<double>();
    c.lr_min = j.at("lr_min").get<double>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.eps = j.at("eps").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.lambda_mse = j.at("lambda_mse").get<double>();
    c.lambda_rrr = j.at("lambda_rrr").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.ig_steps_train = j.at("ig_steps_train").get<std::size_t>();
    c.expl_samples = j.at("expl_samples").get<std::size_t>();
    c.val_expl_samples = j.at("val_expl_samples").get<std::size_t>();
    c.mask_source = j.at("mask_source").get<std::string>() == "ground_truth" ? MaskSource::kGroundTruth
                                                                              : MaskSource::kFeedback;
    c.mse_reduction = parse_reduction(j.at("mse_reduction").get<std::string>());
    c.rrr_reduction = parse_reduction(j.at("rrr_reduction").get<std::string>());
    c.encode_seed = j.at("encode_seed").get<std::uint64_t>();
    const auto& m = j.at("model");
    c.model.d_in = m.at("d_in").get<std::size_t>();
    c.model.d_hidden = m.at("d_hidden").get<std::size_t>();
    c.model.n_heads = m.at("n_heads").get<std::size_t>();
    c.model.n_sab = m.at("n_sab").get<std::size_t>();
    c.model.dropout_p = m.at("dropout_p").get<double>();
    c.model.n_classes = m.at("n_classes").get<std::size_t>();
    c.model.n_pma_seeds = m.at("n_pma_seeds").get<std::size_t>();
    return c;
  }

  std::uint64_t hash() const { return fnv1a(to_json().dump()); }
};

/// Per-mode defaults: lr 1e-3 for explanation-regularized runs, MSE weight
/// 1000 on CLEVR-Hans3 and 10 on CLEVR-Hans7.
inline TrainConfig default_train_config(TrainMode mode, std::string_view spec_name, std::size_t n_classes,
                                        std::uint64_t seed) {
  TrainConfig c;
  c.mode = mode;
  c.seed = seed;
  c.model.n_classes = n_classes;
  if (mode != TrainMode::kDefault) c.lr_init = 1e-3;
  c.lambda_mse = spec_name == "ch7" ? 10.0 : 1000.0;
  c.lambda_rrr = 20.0;
  return c;
}

inline double cosine_lr(std::size_t epoch, const TrainConfig& cfg) {
  const double t = static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
  return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  static AdamState zeros_like(const ModelParams& p) {
    AdamState s;
    for (const auto& t : p.tensors()) {
      s.m.emplace_back(t.shape(), 0.0);
      s.v.emplace_back(t.shape(), 0.0);
    }
    return s;
  }

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

inline void adam_step(ModelParams& params, std::span<const Tensor> grads, AdamState& state, double lr,
                      const TrainConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw ShapeMismatch("gradient/parameter count mismatch");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = params.tensors()[i];
    if (grads[i].shape() != w.shape()) {
      throw ShapeMismatch(params.names()[i] + ": gradient " + shape_str(grads[i].shape()) + " vs " +
                          shape_str(w.shape()));
    }
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t j = 0; j < w.numel(); ++j) {
      const double g = grads[i][j] + cfg.weight_decay * w[j];
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
  std::vector<std::vector<std::size_t>> confusion;  // rows: true class
  std::vector<double> per_class_accuracy;
  double balanced_accuracy = 0.0;
  double accuracy = 0.0;
  double loss = 0.0;  // mean cross-entropy

  ordered_json to_json() const {
    ordered_json j;
    j["balanced_accuracy"] = balanced_accuracy;
    j["accuracy"] = accuracy;
    j["per_class_accuracy"] = per_class_accuracy;
    j["confusion"] = confusion;
    j["loss"] = loss;
    return j;
  }
};

inline Metrics metrics_from_predictions(std::span<const std::size_t> labels, std::span<const std::size_t> preds,
                                        std::size_t n_classes) {
  Metrics m;
  m.confusion.assign(n_classes, std::vector<std::size_t>(n_classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ++m.confusion.at(labels[i]).at(preds[i]);
    correct += labels[i] == preds[i];
  }
  m.per_class_accuracy.assign(n_classes, 0.0);
  std::size_t present = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::size_t row = 0;
    for (auto v : m.confusion[c]) row += v;
    if (row == 0) continue;
    m.per_class_accuracy[c] = static_cast<double>(m.confusion[c][c]) / static_cast<double>(row);
    m.balanced_accuracy += m.per_class_accuracy[c];
    ++present;
  }
  if (present) m.balanced_accuracy /= static_cast<double>(present);
  if (!labels.empty()) m.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  return m;
}

// Encoded split held in memory.
struct EncodedSplit {
  std::vector<const SymbolicScene*> scenes;
  std::vector<SlotMatrix> slots;
  std::vector<std::size_t> labels;

  std::size_t size() const { return scenes.size(); }

  Tensor batch(std::span<const std::size_t> idx) const {
    std::vector<SlotMatrix> zs;
    zs.reserve(idx.size());
    for (std::size_t i : idx) zs.push_back(slots[i]);
    return stack_slots(zs);
  }
};

inline EncodedSplit encode_split(const Dataset& ds, Split split, std::uint64_t encode_seed) {
  EncodedSplit out;
  out.scenes = ds.split(split);
  for (const auto* s : out.scenes) {
    out.slots.push_back(encode_for_model(*s, encode_seed));
    out.labels.push_back(static_cast<std::size_t>(s->class_label));
  }
  return out;
}

namespace detail {

inline Tensor one_hot(std::span<const std::size_t> labels, std::size_t n_classes) {
  Tensor t(Shape{labels.size(), n_classes});
  for (std::size_t i = 0; i < labels.size(); ++i) t[i * n_classes + labels[i]] = 1.0;
  return t;
}

// Mean cross-entropy from log-probabilities [B, C].
inline ad::Var cross_entropy(const ad::Var& log_probs, std::span<const std::size_t> labels) {
  const std::size_t nc = log_probs.shape()[1];
  ad::Var picked = ad::sum_all(ad::mul(log_probs, ad::Var::constant(one_hot(labels, nc))));
  return ad::scale(picked, -1.0 / static_cast<double>(labels.size()));
}

inline std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

inline std::uint32_t lo(std::uint64_t v) { return static_cast<std::uint32_t>(v); }
inline std::uint32_t hi(std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); }

}  // namespace detail

/// Eval-mode metrics over an encoded split.
inline Metrics evaluate(const SetTransformer& model, const ModelParams& params, const EncodedSplit& split,
                        std::size_t chunk = 256) {
  ad::NoGrad no_grad;
  ParamVars p = bind(params, false);
  const std::size_t nc = model.config().n_classes;
  std::vector<std::size_t> preds;
  double loss = 0.0;
  for (std::size_t begin = 0; begin < split.size(); begin += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = begin; i < std::min(split.size(), begin + chunk); ++i) idx.push_back(i);
    ForwardResult f = model.forward(p, ad::Var::constant(split.batch(idx)));
    ad::Var lp = ad::log_softmax(f.logits, -1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const double* row = f.logits.value().data() + b * nc;
      preds.push_back(argmax(std::span<const double>(row, nc)));
      loss -= lp.value()[b * nc + split.labels[idx[b]]];
    }
  }
  Metrics m = metrics_from_predictions(split.labels, preds, nc);
  if (split.size()) m.loss = loss / static_cast<double>(split.size());
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  ModelParams params;
  AdamState adam;
  std::size_t epoch = 0;  // completed epochs
  std::uint64_t config_hash = 0;
  bool best_val = false;
  double val_loss = 0.0;
};

namespace detail {

inline void put_f64le(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

inline double get_f64le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

/// Writes `manifest.json` and `params.bin` into `dir`. Adam moments follow
/// the parameters as "adam.m/<name>" and "adam.v/<name>".
inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck) {
  std::filesystem::create_directories(dir);
  std::string bin;
  ordered_json tensors = ordered_json::array();
  auto put = [&](const std::string& name, const Tensor& t) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "f64le"}, {"offset", bin.size()}});
    for (double v : t.vec()) detail::put_f64le(bin, v);
  };
  const auto& names = ck.params.names();
  for (std::size_t i = 0; i < names.size(); ++i) put(names[i], ck.params.tensors()[i]);
  for (std::size_t i = 0; i < ck.adam.m.size(); ++i) put("adam.m/" + names[i], ck.adam.m[i]);
  for (std::size_t i = 0; i < ck.adam.v.size(); ++i) put("adam.v/" + names[i], ck.adam.v[i]);
  ordered_json man;
  man["format_version"] = kFormatVersion;
  man["epoch"] = ck.epoch;
  man["config_hash"] = ck.config_hash;
  man["best_val"] = ck.best_val;
  man["val_loss"] = ck.val_loss;
  man["adam_step"] = ck.adam.step;
  man["n_params"] = names.size();
  man["tensors"] = tensors;
  write_text_atomic(dir / "params.bin", bin);
  write_text_atomic(dir / "manifest.json", man.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.json")) throw NotFound("no checkpoint at " + dir.string());
  auto man = nlohmann::json::parse(read_text(dir / "manifest.json"));
  const std::string bin = read_text(dir / "params.bin");
  Checkpoint ck;
  ck.epoch = man.at("epoch").get<std::size_t>();
  ck.config_hash = man.at("config_hash").get<std::uint64_t>();
  ck.best_val = man.at("best_val").get<bool>();
  ck.val_loss = man.at("val_loss").get<double>();
  ck.adam.step = man.at("adam_step").get<std::uint64_t>();
  const std::size_t n_params = man.at("n_params").get<std::size_t>();
  const auto& ts = man.at("tensors");
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const auto& e = ts[i];
    if (e.at("dtype").get<std::string>() != "f64le") throw FormatError("unsupported tensor dtype");
    Shape shape = e.at("shape").get<Shape>();
    const std::size_t offset = e.at("offset").get<std::size_t>();
    const std::size_t n = shape_numel(shape);
    if (offset + 8 * n > bin.size()) throw FormatError("params.bin is truncated");
    std::vector<double> data(n);
    const auto* p = reinterpret_cast<const unsigned char*>(bin.data()) + offset;
    for (std::size_t j = 0; j < n; ++j) data[j] = detail::get_f64le(p + 8 * j);
    Tensor t(shape, std::move(data));
    if (i < n_params) ck.params.add(e.at("name").get<std::string>(), std::move(t));
    else if (i < 2 * n_params) ck.adam.m.push_back(std::move(t));
    else ck.adam.v.push_back(std::move(t));
  }
  if (ck.adam.m.size() != n_params || ck.adam.v.size() != n_params) {
    throw FormatError("checkpoint optimizer state is incomplete");
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_ce = 0.0;
  double train_mse = 0.0;
  double train_rrr = 0.0;
  double val_loss = 0.0;
  double val_ce = 0.0;
  double val_mse = 0.0;
  double val_rrr = 0.0;
  double val_balanced_accuracy = 0.0;
  bool best = false;

  ordered_json to_json() const {
    ordered_json j;
    j["epoch"] = epoch;
    j["lr"] = lr;
    j["train_loss"] = train_loss;
    j["train_ce"] = train_ce;
    j["train_mse"] = train_mse;
    j["train_rrr"] = train_rrr;
    j["val_loss"] = val_loss;
    j["val_ce"] = val_ce;
    j["val_mse"] = val_mse;
    j["val_rrr"] = val_rrr;
    j["val_balanced_accuracy"] = val_balanced_accuracy;
    j["best"] = best;
    return j;
  }
};

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  std::vector<EpochRecord> history;
};

// Feedback masks for every sample of a split, [N, K, D] each.
struct SplitMasks {
  std::vector<SlotMatrix> pos;
  std::vector<SlotMatrix> neg;
  std::size_t unmatched = 0;

  Tensor pos_batch(std::span<const std::size_t> idx) const { return gather(pos, idx); }
  Tensor neg_batch(std::span<const std::size_t> idx) const { return gather(neg, idx); }

 private:
  static Tensor gather(const std::vector<SlotMatrix>& v, std::span<const std::size_t> idx) {
    std::vector<SlotMatrix> zs;
    for (std::size_t i : idx) zs.push_back(v[i]);
    return stack_slots(zs);
  }
};

inline SplitMasks split_masks(const EncodedSplit& split, const FeedbackSet* fs, MaskSource source,
                              const DatasetSpec* spec) {
  SplitMasks out;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const SlotMatrix zb = binarize(split.slots[i]);
    CompiledMasks m{SlotMatrix(zb.slots(), zb.width()), SlotMatrix(zb.slots(), zb.width()), {}};
    if (fs) m = compile_feedback(*fs, split.scenes[i]->id, split.scenes[i]->class_label, zb);
    if (source == MaskSource::kGroundTruth) {
      if (!spec) throw FeedbackMissing("ground-truth masks need the dataset spec");
      m.pos = ground_truth_explanation(zb, spec->classes.at(split.labels[i]).true_rule);
    }
    out.unmatched += m.unmatched.size();
    out.pos.push_back(std::move(m.pos));
    out.neg.push_back(std::move(m.neg));
  }
  return out;
}

struct TrainHooks {
  // Called after every epoch with its record.
  std::function<void(const EpochRecord&)> on_epoch;
  // Called after every epoch with the state to persist.
  std::function<void(const TrainResult&)> on_checkpoint;
};

namespace detail {

struct LossParts {
  ad::Var total;
  double ce = 0.0, mse = 0.0, rrr = 0.0;
};

// Loss on one batch. Dropout follows `opts`; the MSE term is computed in
// eval mode on the first `expl_samples` rows.
inline LossParts batch_loss(const SetTransformer& model, const ParamVars& p, const TrainConfig& cfg,
                            const EncodedSplit& data, const SplitMasks& masks, std::span<const std::size_t> idx,
                            const ForwardOptions& opts) {
  Tensor z = data.batch(idx);
  std::vector<std::size_t> labels;
  for (std::size_t i : idx) labels.push_back(data.labels[i]);
  ad::Var x = cfg.uses_rrr() ? ad::Var::leaf(z) : ad::Var::constant(z);
  ForwardResult f = model.forward(p, x, opts);
  ad::Var lp = ad::log_softmax(f.logits, -1);
  LossParts parts;
  ad::Var ce = cross_entropy(lp, labels);
  parts.ce = ce.item();
  parts.total = ce;
  if (cfg.uses_rrr()) {
    ad::Var r = rrr_penalty(x, lp, masks.neg_batch(idx));
    if (cfg.rrr_reduction == Reduction::kMean) r = ad::scale(r, 1.0 / static_cast<double>(idx.size()));
    parts.rrr = r.item();
    parts.total = total_loss(parts.total, r, cfg.lambda_rrr);
  }
  if (cfg.uses_mse()) {
    const std::size_t n = cfg.expl_samples ? std::min(cfg.expl_samples, idx.size()) : idx.size();
    std::span<const std::size_t> sub = idx.subspan(0, n);
    std::vector<std::size_t> sub_labels(labels.begin(), labels.begin() + static_cast<long>(n));
    ad::Var ig = integrated_gradients_graph(model, p, data.batch(sub), sub_labels, cfg.ig_steps_train);
    Tensor a = masks.pos_batch(sub);
    ad::Var m = hint_mse_loss(a, normalize_positive_graph(ig));
    if (cfg.mse_reduction == Reduction::kMean) m = ad::scale(m, 1.0 / static_cast<double>(a.shape()[1] * a.shape()[2]));
    parts.mse = m.item();
    parts.total = total_loss(parts.total, m, cfg.lambda_mse);
  }
  return parts;
}

// Validation loss: eval-mode cross-entropy over the whole split plus the
// explanation terms over the first val_expl_samples samples.
inline LossParts validation_loss(const SetTransformer& model, const ModelParams& params, const TrainConfig& cfg,
                                 const EncodedSplit& val, const SplitMasks& masks, Metrics& metrics) {
  metrics = evaluate(model, params, val);
  LossParts parts;
  parts.ce = metrics.loss;
  if (!cfg.uses_mse() && !cfg.uses_rrr()) return parts;
  const std::size_t n = cfg.val_expl_samples ? std::min(cfg.val_expl_samples, val.size()) : val.size();
  const std::size_t chunk = 32;
  double mse = 0.0, rrr = 0.0;
  std::size_t entries = 1;
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = begin; i < std::min(n, begin + chunk); ++i) idx.push_back(i);
    if (cfg.uses_mse()) {
      std::vector<std::size_t> labels;
      for (std::size_t i : idx) labels.push_back(val.labels[i]);
      Tensor ig = integrated_gradients(model, params, val.batch(idx), labels, cfg.ig_steps_train);
      Tensor a = masks.pos_batch(idx);
      for (std::size_t b = 0; b < idx.size(); ++b) {
        SlotMatrix e = normalize_positive(unstack_slot(ig, b));
        entries = e.values().size();
        for (std::size_t j = 0; j < e.values().size(); ++j) {
          const double d = a[b * e.values().size() + j] - e.values()[j];
          mse += d * d;
        }
      }
    }
    if (cfg.uses_rrr()) {
      ParamVars p = bind(params, false);
      ad::Var r = rrr_loss(model, p, val.batch(idx), masks.neg_batch(idx));
      rrr += r.item();
    }
  }
  // Both terms on their training scale. A summed RRR is rescaled to the size
  // of a training batch.
  parts.mse = n ? mse / static_cast<double>(n) : 0.0;
  if (cfg.mse_reduction == Reduction::kMean) parts.mse /= static_cast<double>(entries);
  const double rrr_n = cfg.rrr_reduction == Reduction::kMean ? 1.0 : static_cast<double>(cfg.batch_size);
  parts.rrr = n ? rrr * rrr_n / static_cast<double>(n) : 0.0;
  return parts;
}

}  // namespace detail

/// Trains from `init` (fresh parameters when absent) until cfg.epochs. The
/// best checkpoint is the epoch with the lowest validation loss, which in
/// explanation modes includes the weighted explanation terms.
inline TrainResult train(const Dataset& ds, const TrainConfig& cfg, const FeedbackSet* feedback,
                         const DatasetSpec* spec = nullptr, const TrainHooks& hooks = {},
                         const TrainResult* resume = nullptr) {
  cfg.validate();
  const bool xil = cfg.mode != TrainMode::kDefault;
  const bool needs_feedback = cfg.uses_rrr() || (cfg.uses_mse() && cfg.mask_source == MaskSource::kFeedback);
  if (xil && needs_feedback && (!feedback || feedback->empty())) {
    throw FeedbackMissing(std::string(mode_name(cfg.mode)) + " needs a feedback set");
  }
  SetTransformer model(cfg.model);
  EncodedSplit train_split = encode_split(ds, Split::kTrain, cfg.encode_seed);
  EncodedSplit val_split = encode_split(ds, Split::kVal, cfg.encode_seed);
  if (train_split.size() == 0 || val_split.size() == 0) throw FormatError("dataset has an empty train or val split");
  SplitMasks train_masks, val_masks;
  if (xil) {
    train_masks = split_masks(train_split, feedback, cfg.mask_source, spec);
    val_masks = split_masks(val_split, feedback, cfg.mask_source, spec);
  }

  TrainResult res;
  if (resume) {
    res = *resume;
    if (res.last.config_hash != cfg.hash()) throw FormatError("checkpoint was written with a different config");
  } else {
    res.last.params = init_params(cfg.model, cfg.seed);
    res.last.adam = AdamState::zeros_like(res.last.params);
    res.last.config_hash = cfg.hash();
    res.best.val_loss = std::numeric_limits<double>::infinity();
  }

  for (std::size_t epoch = res.last.epoch; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg);
    std::vector<std::size_t> order = detail::iota(train_split.size());
    {
      std::seed_seq seq{detail::lo(cfg.seed), detail::hi(cfg.seed), static_cast<std::uint32_t>(epoch), 0x5eedu};
      Rng rng(seq);
      std::shuffle(order.begin(), order.end(), rng);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    std::size_t n_batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      std::span<const std::size_t> idx(order.data() + begin, std::min(cfg.batch_size, order.size() - begin));
      ParamVars p = bind(res.last.params, true);
      ForwardOptions opts{.train = true, .dropout_seed = (cfg.seed << 32) ^ (epoch << 16) ^ n_batches};
      detail::LossParts parts = detail::batch_loss(model, p, cfg, train_split, train_masks, idx, opts);
      std::vector<Tensor> grads = ad::grad_values(parts.total, p.vars);
      adam_step(res.last.params, grads, res.last.adam, lr, cfg);
      rec.train_loss += parts.total.item();
      rec.train_ce += parts.ce;
      rec.train_mse += parts.mse;
      rec.train_rrr += parts.rrr;
      ++n_batches;
    }
    const double nb = static_cast<double>(n_batches);
    rec.train_loss /= nb;
    rec.train_ce /= nb;
    rec.train_mse /= nb;
    rec.train_rrr /= nb;

    Metrics vm;
    detail::LossParts vp = detail::validation_loss(model, res.last.params, cfg, val_split, val_masks, vm);
    rec.val_ce = vp.ce;
    rec.val_mse = vp.mse;
    rec.val_rrr = vp.rrr;
    rec.val_loss = vp.ce + (cfg.uses_mse() ? cfg.lambda_mse * vp.mse : 0.0) +
                   (cfg.uses_rrr() ? cfg.lambda_rrr * vp.rrr : 0.0);
    rec.val_balanced_accuracy = vm.balanced_accuracy;

    res.last.epoch = epoch + 1;
    res.last.val_loss = rec.val_loss;
    res.last.best_val = false;
    if (rec.val_loss < res.best.val_loss) {
      rec.best = true;
      res.best = res.last;
      res.best.best_val = true;
    }
    res.history.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (hooks.on_checkpoint) hooks.on_checkpoint(res);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Run directories

inline std::string history_jsonl(const std::vector<EpochRecord>& history) {
  std::string out;
  for (const auto& r : history) out += r.to_json().dump() + "\n";
  return out;
}

inline std::vector<EpochRecord> read_history(const std::filesystem::path& path) {
  std::vector<EpochRecord> out;
  std::istringstream in(read_text(path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    EpochRecord r;
    r.epoch = j.at("epoch").get<std::size_t>();
    r.lr = j.at("lr").get<double>();
    r.train_loss = j.at("train_loss").get<double>();
    r.train_ce = j.at("train_ce").get<double>();
    r.train_mse = j.at("train_mse").get<double>();
    r.train_rrr = j.at("train_rrr").get<double>();
    r.val_loss = j.at("val_loss").get<double>();
    r.val_ce = j.at("val_ce").get<double>();
    r.val_mse = j.at("val_mse").get<double>();
    r.val_rrr = j.at("val_rrr").get<double>();
    r.val_balanced_accuracy = j.at("val_balanced_accuracy").get<double>();
    r.best = j.at("best").get<bool>();
    out.push_back(r);
  }
  return out;
}

/// Persists a finished or in-progress training result under `run_dir`:
/// config.json, history.jsonl, checkpoints/{best,last}/.
inline void save_run(const std::filesystem::path& run_dir, const TrainConfig& cfg, const TrainResult& res,
                     const std::string& dataset_dir) {
  std::filesystem::create_directories(run_dir);
  ordered_json c;
  c["dataset"] = dataset_dir;
  c["train"] = cfg.to_json();
  write_text_atomic(run_dir / "config.json", c.dump(2) + "\n");
  write_text_atomic(run_dir / "history.jsonl", history_jsonl(res.history));
  save_checkpoint(run_dir / "checkpoints" / "last", res.last);
  if (!res.history.empty()) save_checkpoint(run_dir / "checkpoints" / "best", res.best);
}

/// Reloads a run for resumption.
inline TrainResult load_run(const std::filesystem::path& run_dir) {
  TrainResult res;
  res.last = load_checkpoint(run_dir / "checkpoints" / "last");
  res.best = load_checkpoint(run_dir / "checkpoints" / "best");
  res.history = read_history(run_dir / "history.jsonl");
  return res;
}

/// Test/val metrics plus L1 aggregates of a trained model.
struct RunMetrics {
  Metrics val;
  Metrics test;
  L1Report l1;

  ordered_json to_json() const {
    ordered_json j;
    j["val"] = val.to_json();
    j["test"] = test.to_json();
    auto agg = [](const L1Aggregate& a) {
      return ordered_json{{"global", a.global}, {"per_class", a.per_class}, {"counts", a.counts}};
    };
    j["l1"] = {{"all", agg(l1.all)}, {"true_positive", agg(l1.true_positive)}};
    return j;
  }
};

inline RunMetrics run_metrics(const Dataset& ds, const DatasetSpec& spec, const TrainConfig& cfg,
                              const ModelParams& params, std::size_t l1_steps) {
  SetTransformer model(cfg.model);
  RunMetrics m;
  m.val = evaluate(model, params, encode_split(ds, Split::kVal, cfg.encode_seed));
  m.test = evaluate(model, params, encode_split(ds, Split::kTest, cfg.encode_seed));
  m.l1 = aggregate_l1(ds, spec, model, params, Split::kTest, cfg.encode_seed, l1_steps);
  return m;
}

// ---------------------------------------------------------------------------
// Experiment suite

struct SuiteOptions {
  Scale scale = Scale::kDesk;
  std::uint64_t data_seed = 0;
  std::optional<std::size_t> epochs;  // overrides every row's epoch count
  std::size_t ig_steps_train = kTrainIgSteps;
  std::size_t expl_samples = 0;
  std::size_t val_expl_samples = 0;
  std::size_t l1_steps = kMetricIgSteps;
  // Checkpoints of every (row, seed) go below this directory when set.
  std::optional<std::filesystem::path> out_dir;
  std::function<void(const std::string&)> log;
};

struct SuiteCell {
  std::vector<double> values;
  double mean() const {
    if (values.empty()) return 0.0;
    double s = 0.0;
    for (double v : values) s += v;
    return s / static_cast<double>(values.size());
  }
  // Population standard deviation; zero for a single seed.
  double stddev() const {
    if (values.size() < 2) return 0.0;
    const double mu = mean();
    double s = 0.0;
    for (double v : values) s += (v - mu) * (v - mu);
    return std::sqrt(s / static_cast<double>(values.size()));
  }
};

struct SuiteRow {
  std::string name;
  SuiteCell val, test;
  std::vector<SuiteCell> test_per_class;
  SuiteCell l1_all;
  std::vector<SuiteCell> l1_all_per_class;
  SuiteCell l1_tp;
};

struct SuiteReport {
  std::string spec_name;
  std::vector<std::uint64_t> seeds;
  std::vector<SuiteRow> rows;

  ordered_json to_json() const {
    auto cell = [](const SuiteCell& c) {
      return ordered_json{{"mean", c.mean()}, {"std", c.stddev()}, {"values", c.values}};
    };
    ordered_json j;
    j["spec"] = spec_name;
    j["seeds"] = seeds;
    ordered_json rows_j = ordered_json::array();
    for (const auto& r : rows) {
      ordered_json rj;
      rj["name"] = r.name;
      rj["val"] = cell(r.val);
      rj["test"] = cell(r.test);
      ordered_json pc = ordered_json::array();
      for (const auto& c : r.test_per_class) pc.push_back(cell(c));
      rj["test_per_class"] = pc;
      rj["l1_all"] = cell(r.l1_all);
      ordered_json lpc = ordered_json::array();
      for (const auto& c : r.l1_all_per_class) lpc.push_back(cell(c));
      rj["l1_all_per_class"] = lpc;
      rj["l1_true_positive"] = cell(r.l1_tp);
      rows_j.push_back(rj);
    }
    j["rows"] = rows_j;
    return j;
  }

  /// Fixed-width text table: balanced accuracies in percent (mean +- std),
  /// then the L1 explanation errors.
  std::string to_text() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << "spec " << spec_name << ", seeds";
    for (auto s : seeds) os << " " << s;
    os << "\n\n";
    os << std::left << std::setw(22) << "model" << std::setw(20) << "val" << std::setw(20) << "test"
       << "test per class\n";
    for (const auto& r : rows) {
      auto pm = [](const SuiteCell& c, double k) {
        std::ostringstream s;
        s << std::fixed << std::setprecision(2) << k * c.mean() << " +- " << k * c.stddev();
        return s.str();
      };
      os << std::setw(22) << r.name << std::setw(20) << pm(r.val, 100) << std::setw(20) << pm(r.test, 100);
      for (std::size_t c = 0; c < r.test_per_class.size(); ++c) os << (c ? " " : "") << 100 * r.test_per_class[c].mean();
      os << "\n";
    }
    os << "\n" << std::setw(22) << "L1 (test)" << std::setw(20) << "all" << std::setw(20) << "true positive"
       << "all per class\n";
    for (const auto& r : rows) {
      auto pm = [](const SuiteCell& c) {
        std::ostringstream s;
        s << std::fixed << std::setprecision(2) << c.mean() << " +- " << c.stddev();
        return s.str();
      };
      os << std::setw(22) << r.name << std::setw(20) << pm(r.l1_all) << std::setw(20) << pm(r.l1_tp);
      for (std::size_t c = 0; c < r.l1_all_per_class.size(); ++c) os << (c ? " " : "") << r.l1_all_per_class[c].mean();
      os << "\n";
    }
    return os.str();
  }
};

struct SuiteVariant {
  std::string name;
  TrainMode mode;
  MaskSource source;
  bool not_gray_only;
};

inline std::vector<SuiteVariant> suite_variants() {
  return {{"Default", TrainMode::kDefault, MaskSource::kFeedback, false},
          {"XIL-MSE", TrainMode::kXilMse, MaskSource::kFeedback, false},
          {"XIL-RRR-global", TrainMode::kXilRrr, MaskSource::kFeedback, true},
          {"XIL-GT-symbols", TrainMode::kXilMse, MaskSource::kGroundTruth, false}};
}

/// Default and XIL variants over `seeds` on a freshly generated dataset.
inline SuiteReport run_experiment_suite(const std::string& spec_name, const std::vector<std::uint64_t>& seeds,
                                        const SuiteOptions& opt = {}) {
  DatasetSpec spec = spec_by_name(spec_name, opt.scale, opt.data_seed);
  Dataset ds = generate_dataset(spec);
  SuiteReport report;
  report.spec_name = spec_name;
  report.seeds = seeds;
  const std::size_t nc = spec.classes.size();
  const FeedbackSet class_fb = class_rule_feedback(spec);
  const FeedbackSet gray_fb = not_gray_feedback();
  for (const auto& v : suite_variants()) {
    SuiteRow row;
    row.name = v.name;
    row.test_per_class.resize(nc);
    row.l1_all_per_class.resize(nc);
    for (auto seed : seeds) {
      TrainConfig cfg = default_train_config(v.mode, spec_name, nc, seed);
      cfg.mask_source = v.source;
      cfg.ig_steps_train = opt.ig_steps_train;
      cfg.expl_samples = opt.expl_samples;
      cfg.val_expl_samples = opt.val_expl_samples;
      if (opt.epochs) cfg.epochs = *opt.epochs;
      const FeedbackSet* fb = v.mode == TrainMode::kDefault ? nullptr : (v.not_gray_only ? &gray_fb : &class_fb);
      if (opt.log) opt.log(v.name + " seed " + std::to_string(seed));
      TrainResult res = train(ds, cfg, fb, &spec);
      RunMetrics m = run_metrics(ds, spec, cfg, res.best.params, opt.l1_steps);
      if (opt.out_dir) {
        save_run(*opt.out_dir / v.name / ("seed" + std::to_string(seed)), cfg, res, spec_name);
      }
      row.val.values.push_back(m.val.balanced_accuracy);
      row.test.values.push_back(m.test.balanced_accuracy);
      for (std::size_t c = 0; c < nc; ++c) {
        row.test_per_class[c].values.push_back(m.test.per_class_accuracy[c]);
        row.l1_all_per_class[c].values.push_back(m.l1.all.per_class[c]);
      }
      row.l1_all.values.push_back(m.l1.all.global);
      row.l1_tp.values.push_back(m.l1.true_positive.global);
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace nesyxil
