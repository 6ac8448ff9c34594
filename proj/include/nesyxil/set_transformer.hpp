#pragma once

// Set Transformer classifier over slot matrices:
//
//   input Linear(D -> 128) -> SAB -> SAB -> Dropout -> PMA(1 seed) -> Dropout
//   -> Linear(128 -> n_classes)
//
// Each attention block is a multihead attention block with a residual on the
// projected queries, layer norm, and a row-wise ReLU feed-forward with a
// second residual and layer norm.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "nesyxil/attributes.hpp"
#include "nesyxil/autodiff.hpp"
#include "nesyxil/errors.hpp"
#include "nesyxil/tensor.hpp"

namespace nesyxil {

struct ModelConfig {
  std::size_t d_in = kObjectWidth;
  std::size_t d_hidden = 128;
  std::size_t n_heads = 4;
  std::size_t n_sab = 2;
  double dropout_p = 0.5;
  std::size_t n_classes = 3;
  std::size_t n_pma_seeds = 1;

  void validate() const {
    if (n_heads == 0 || d_hidden % n_heads != 0) throw ShapeMismatch("d_hidden must be divisible by n_heads");
    if (n_classes < 2) throw ShapeMismatch("need at least two classes");
    if (n_pma_seeds != 1) throw ShapeMismatch("only a single PMA seed is supported");
  }
};

// Named parameter tensors in a fixed order; the order is the checkpoint
// layout.
class ModelParams {
 public:
  void add(std::string name, Tensor t) {
    index_[name] = tensors_.size();
    names_.push_back(std::move(name));
    tensors_.push_back(std::move(t));
  }

  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  std::size_t size() const { return tensors_.size(); }

  const Tensor& get(const std::string& name) const { return tensors_.at(index_.at(name)); }
  Tensor& get(const std::string& name) { return tensors_.at(index_.at(name)); }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    return a.names_ == b.names_ && a.tensors_ == b.tensors_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::map<std::string, std::size_t> index_;
};

inline std::vector<std::string> attention_block_names(std::size_t n_sab) {
  std::vector<std::string> blocks;
  for (std::size_t i = 0; i < n_sab; ++i) blocks.push_back("sab" + std::to_string(i));
  blocks.push_back("pma");
  return blocks;
}

/// Deterministic initialization: weights N(0,1)/sqrt(fan_in), biases zero,
/// layer-norm gains one, PMA seed standard normal.
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ModelParams p;
  auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    Tensor w(Shape{in, out});
    const double s = 1.0 / std::sqrt(static_cast<double>(in));
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = s * normal(rng);
    p.add(name + ".w", std::move(w));
    p.add(name + ".b", Tensor(Shape{out}, 0.0));
  };
  const std::size_t d = cfg.d_hidden;
  linear("input", cfg.d_in, d);
  for (const auto& blk : attention_block_names(cfg.n_sab)) {
    if (blk == "pma") {
      Tensor seed_vec(Shape{cfg.n_pma_seeds, d});
      for (std::size_t i = 0; i < seed_vec.numel(); ++i) seed_vec[i] = normal(rng);
      p.add("pma.seed", std::move(seed_vec));
    }
    linear(blk + ".q", d, d);
    linear(blk + ".k", d, d);
    linear(blk + ".v", d, d);
    linear(blk + ".ff", d, d);
    p.add(blk + ".ln0.g", Tensor(Shape{d}, 1.0));
    p.add(blk + ".ln0.b", Tensor(Shape{d}, 0.0));
    p.add(blk + ".ln1.g", Tensor(Shape{d}, 1.0));
    p.add(blk + ".ln1.b", Tensor(Shape{d}, 0.0));
  }
  linear("out", d, cfg.n_classes);
  return p;
}

// Parameters bound into a graph as leaves.
struct ParamVars {
  std::vector<std::string> names;
  std::vector<ad::Var> vars;
  std::map<std::string, std::size_t> index;

  const ad::Var& operator[](const std::string& name) const { return vars.at(index.at(name)); }
};

inline ParamVars bind(const ModelParams& p, bool requires_grad) {
  ParamVars out;
  out.names = p.names();
  for (std::size_t i = 0; i < p.size(); ++i) {
    out.index[p.names()[i]] = i;
    out.vars.push_back(ad::Var::leaf(p.tensors()[i], requires_grad));
  }
  return out;
}

struct ForwardOptions {
  bool train = false;
  // Dropout sites draw from streams derived from (dropout_seed, site).
  std::uint64_t dropout_seed = 0;
};

struct ForwardResult {
  ad::Var logits;  // [B, n_classes]
  ad::Var probs;   // [B, n_classes]
};

class SetTransformer {
 public:
  explicit SetTransformer(ModelConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const ModelConfig& config() const { return cfg_; }

  /// z: [B, K, D] batch of slot matrices.
  ForwardResult forward(const ParamVars& p, const ad::Var& z, const ForwardOptions& opts = {}) const {
    using namespace ad;
    const Shape& zs = z.shape();
    if (zs.size() != 3 || zs[2] != cfg_.d_in) {
      throw ShapeMismatch("expected [B,K," + std::to_string(cfg_.d_in) + "] input, got " + shape_str(zs));
    }
    const std::size_t batch = zs[0];
    Var x = linear(p, "input", z);
    for (std::size_t i = 0; i < cfg_.n_sab; ++i) {
      const std::string blk = "sab" + std::to_string(i);
      x = attention_block(p, blk, x, x);
    }
    x = dropout_site(x, 0, opts);
    Var seed = broadcast_to(reshape(p["pma.seed"], {1, cfg_.n_pma_seeds, cfg_.d_hidden}),
                            {batch, cfg_.n_pma_seeds, cfg_.d_hidden});
    Var pooled = reshape(attention_block(p, "pma", seed, x), {batch, cfg_.d_hidden});
    pooled = dropout_site(pooled, 1, opts);
    Var logits = linear(p, "out", pooled);
    return {logits, softmax(logits, -1)};
  }

 private:
  static ad::Var linear(const ParamVars& p, const std::string& name, const ad::Var& x) {
    return ad::add(ad::matmul(x, p[name + ".w"]), p[name + ".b"]);
  }

  ad::Var dropout_site(const ad::Var& x, std::uint64_t site, const ForwardOptions& opts) const {
    if (!opts.train) return x;
    std::seed_seq seq{static_cast<std::uint32_t>(opts.dropout_seed), static_cast<std::uint32_t>(opts.dropout_seed >> 32),
                      static_cast<std::uint32_t>(site)};
    std::mt19937_64 rng(seq);
    return ad::dropout(x, cfg_.dropout_p, true, rng);
  }

  // [B, n, d] -> [B*h, n, d/h]
  ad::Var split_heads(const ad::Var& x) const {
    const Shape& s = x.shape();
    const std::size_t h = cfg_.n_heads, dh = cfg_.d_hidden / h;
    ad::Var r = ad::reshape(x, {s[0], s[1], h, dh});
    r = ad::permute(r, {0, 2, 1, 3});
    return ad::reshape(r, {s[0] * h, s[1], dh});
  }

  // [B*h, n, d/h] -> [B, n, d]
  ad::Var merge_heads(const ad::Var& x, std::size_t batch) const {
    const Shape& s = x.shape();
    const std::size_t h = cfg_.n_heads;
    ad::Var r = ad::reshape(x, {batch, h, s[1], s[2]});
    r = ad::permute(r, {0, 2, 1, 3});
    return ad::reshape(r, {batch, s[1], h * s[2]});
  }

  ad::Var attention_block(const ParamVars& p, const std::string& blk, const ad::Var& queries,
                          const ad::Var& keys) const {
    using namespace ad;
    const std::size_t batch = queries.shape()[0];
    Var q = split_heads(linear(p, blk + ".q", queries));
    Var k = split_heads(linear(p, blk + ".k", keys));
    Var v = split_heads(linear(p, blk + ".v", keys));
    Var scores = scale(bmm(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(cfg_.d_hidden)));
    Var attn = softmax(scores, -1);
    Var o = merge_heads(add(q, bmm(attn, v)), batch);
    Var h = layer_norm(o, p[blk + ".ln0.g"], p[blk + ".ln0.b"]);
    Var ff = relu(linear(p, blk + ".ff", h));
    return layer_norm(add(h, ff), p[blk + ".ln1.g"], p[blk + ".ln1.b"]);
  }

  ModelConfig cfg_;
};

/// Argmax with ties toward the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

/// Eval-mode predictions for a [B, K, D] batch.
inline std::vector<std::size_t> predict(const SetTransformer& model, const ModelParams& params, const Tensor& z) {
  ad::NoGrad no_grad;
  ParamVars p = bind(params, false);
  ForwardResult f = model.forward(p, ad::Var::constant(z));
  const std::size_t nc = model.config().n_classes;
  std::vector<std::size_t> out;
  for (std::size_t b = 0; b < z.shape()[0]; ++b) {
    out.push_back(argmax(std::span<const double>(f.logits.value().data() + b * nc, nc)));
  }
  return out;
}

}  // namespace nesyxil
