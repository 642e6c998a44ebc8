#pragma once

// GPT-style decoder: learned positional embeddings, pre-norm blocks, weight
// tied output head, optional feature projection that takes the place of the
// bos embedding.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "deeptrails/autodiff.hpp"
#include "deeptrails/dataset.hpp"
#include "deeptrails/errors.hpp"
#include "deeptrails/rng.hpp"
#include "deeptrails/sequence_model.hpp"

namespace deeptrails {

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 16;
  int vocab_size = 0;
  int context = 24;
  double dropout = 0.0;
  int feature_dim = 0;  // width of the encoded feature vector; 0 = unconditioned

  void validate() const {
    if (n_layers < 1) throw ConfigError("model.n_layers must be positive");
    if (n_heads < 1) throw ConfigError("model.n_heads must be positive");
    if (d_model < 1) throw ConfigError("model.d_model must be positive");
    if (d_model % n_heads != 0) throw ConfigError("model.d_model must be divisible by model.n_heads");
    if (vocab_size < 3) throw ConfigError("model.vocab_size must cover at least one state plus bos/eos");
    if (context < 2) throw ConfigError("model.context must be at least 2");
    if (dropout != 0.0) throw ConfigError("model.dropout other than 0 is not supported");
    if (feature_dim < 0) throw ConfigError("model.feature_dim must be non-negative");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
  double learning_rate = 3e-3;
  int batch_size = 256;
  int max_epochs = 50;
  int patience = 5;
  double validation_fraction = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("train.learning_rate must be positive");
    if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
    if (max_epochs < 1) throw ConfigError("train.max_epochs must be positive");
    if (patience < 1) throw ConfigError("train.patience must be positive");
    if (!(validation_fraction > 0 && validation_fraction <= 0.5)) {
      throw ConfigError("train.validation_fraction must lie in (0, 0.5]");
    }
  }
};

struct ParameterSpec {
  std::string name;
  std::vector<std::size_t> shape;
};

/// Named parameter shapes in storage order.
inline std::vector<ParameterSpec> transformer_layout(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.d_model);
  std::vector<ParameterSpec> out{{"wte", {static_cast<std::size_t>(c.vocab_size), d}},
                                 {"wpe", {static_cast<std::size_t>(c.context), d}}};
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    out.push_back({p + "ln1.g", {d}});
    out.push_back({p + "ln1.b", {d}});
    out.push_back({p + "attn.w", {d, 3 * d}});
    out.push_back({p + "attn.b", {3 * d}});
    out.push_back({p + "proj.w", {d, d}});
    out.push_back({p + "proj.b", {d}});
    out.push_back({p + "ln2.g", {d}});
    out.push_back({p + "ln2.b", {d}});
    out.push_back({p + "fc.w", {d, 4 * d}});
    out.push_back({p + "fc.b", {4 * d}});
    out.push_back({p + "out.w", {4 * d, d}});
    out.push_back({p + "out.b", {d}});
  }
  out.push_back({"lnf.g", {d}});
  out.push_back({"lnf.b", {d}});
  if (c.feature_dim > 0) {
    out.push_back({"feat.w", {static_cast<std::size_t>(c.feature_dim), d}});
    out.push_back({"feat.b", {d}});
  }
  return out;
}

class TransformerModel : public SequenceModel {
 public:
  TransformerModel() = default;
  TransformerModel(ModelConfig config, FeatureSchema schema, std::vector<ad::Tensor> params)
      : config_(config), schema_(std::move(schema)), params_(std::move(params)) {
    config_.validate();
    const auto layout = transformer_layout(config_);
    if (layout.size() != params_.size()) throw FormatError("parameter count does not match the model layout");
    for (std::size_t i = 0; i < layout.size(); ++i) {
      if (layout[i].shape != params_[i].shape()) throw FormatError("shape mismatch for parameter " + layout[i].name);
    }
    if (!schema_.empty() && schema_.encoded_width() != static_cast<std::size_t>(config_.feature_dim)) {
      throw ConfigError("feature schema width does not match model.feature_dim");
    }
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<ad::Tensor>& parameters() const { return params_; }
  std::vector<ad::Tensor>& mutable_parameters() {
    if (frozen_) throw UsageError("frozen model parameters are immutable");
    return params_;
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }
  const ad::Tensor& token_embeddings() const { return params_[0]; }

  void freeze() { frozen_ = true; }

  int vocab_size() const override { return config_.vocab_size; }
  bool frozen() const override { return frozen_; }
  bool uses_features() const override { return config_.feature_dim > 0; }
  const FeatureSchema& feature_schema() const override { return schema_; }
  std::size_t context_length() const override { return static_cast<std::size_t>(config_.context); }

  std::uint64_t parameter_hash() const override {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : params_) h = hash_doubles(h, p.values());
    return h;
  }

  /// Logits for a padded batch. `tokens` holds batch * seq ids; `features`
  /// (batch x feature_dim, encoded) is required iff the model is conditioned.
  /// Returns the logits variable ([batch*seq x V]) and the parameter leaves.
  struct Forward {
    ad::Var logits;
    std::vector<ad::Var> params;
  };

  Forward forward(ad::Tape& tape, const std::vector<int>& tokens, std::size_t batch, std::size_t seq,
                  const ad::Tensor* features, bool requires_grad) const {
    if (seq > context_length()) throw DomainError("prefix longer than the model context");
    if (tokens.size() != batch * seq) throw ShapeError("token batch size mismatch");
    if (features && !uses_features()) throw UsageError("features supplied to a model trained without features");
    if (!features && uses_features()) throw UsageError("feature-conditioned model needs a feature vector");

    Forward f;
    f.params.reserve(params_.size());
    for (const auto& p : params_) f.params.push_back(tape.leaf(p, requires_grad));
    std::size_t k = 0;
    auto next = [&] { return f.params[k++]; };

    const ad::Var wte = next();
    const ad::Var wpe = next();
    ad::Var x = ad::gather_rows(tape, wte, tokens);
    std::vector<int> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % seq);
    ad::Var pos = ad::gather_rows(tape, wpe, std::move(positions));

    const std::size_t d = static_cast<std::size_t>(config_.d_model);
    std::vector<std::tuple<ad::Var, ad::Var, ad::Var, ad::Var, ad::Var, ad::Var, ad::Var, ad::Var, ad::Var,
                           ad::Var, ad::Var, ad::Var>>
        blocks;
    for (int l = 0; l < config_.n_layers; ++l) {
      auto a = next(), b = next(), c = next(), e = next(), g = next(), h = next();
      auto i = next(), j = next(), m = next(), n = next(), o = next(), p = next();
      blocks.emplace_back(a, b, c, e, g, h, i, j, m, n, o, p);
    }
    const ad::Var lnf_g = next();
    const ad::Var lnf_b = next();
    if (uses_features()) {
      const ad::Var fw = next();
      const ad::Var fb = next();
      if (features->rows() != batch || features->cols() != static_cast<std::size_t>(config_.feature_dim)) {
        throw ShapeError("feature batch has the wrong shape");
      }
      const ad::Var fin = tape.leaf(*features, false);
      const ad::Var femb = ad::linear(tape, fin, fw, fb);
      std::vector<std::size_t> rows(batch);
      for (std::size_t b = 0; b < batch; ++b) rows[b] = b * seq;
      x = ad::replace_rows(tape, x, std::move(rows), femb);
    }
    x = ad::add(tape, x, pos);
    (void)d;
    for (const auto& [ln1g, ln1b, aw, ab, pw, pb, ln2g, ln2b, fcw, fcb, ow, ob] : blocks) {
      ad::Var h = ad::layer_norm(tape, x, ln1g, ln1b);
      h = ad::linear(tape, h, aw, ab);
      h = ad::causal_attention(tape, h, batch, seq, static_cast<std::size_t>(config_.n_heads));
      x = ad::add(tape, x, ad::linear(tape, h, pw, pb));
      h = ad::layer_norm(tape, x, ln2g, ln2b);
      h = ad::gelu(tape, ad::linear(tape, h, fcw, fcb));
      x = ad::add(tape, x, ad::linear(tape, h, ow, ob));
    }
    x = ad::layer_norm(tape, x, lnf_g, lnf_b);
    f.logits = ad::matmul(tape, x, ad::transpose(tape, wte));
    return f;
  }

  ad::Tensor next_token_log_probs(std::span<const int> tokens, const FeatureVector* features) const override {
    return batch_log_probs({tokens}, {features}).front();
  }

  std::vector<ad::Tensor> batch_log_probs(const std::vector<std::span<const int>>& inputs,
                                          const std::vector<const FeatureVector*>& features) const override {
    if (inputs.empty()) return {};
    std::size_t seq = 0;
    for (const auto& in : inputs) {
      if (in.empty()) throw DomainError("empty prefix");
      seq = std::max(seq, in.size());
    }
    const std::size_t batch = inputs.size();
    const int pad = config_.vocab_size - 1;
    std::vector<int> tokens(batch * seq, pad);
    for (std::size_t b = 0; b < batch; ++b) std::copy(inputs[b].begin(), inputs[b].end(), tokens.begin() + b * seq);
    std::optional<ad::Tensor> feat;
    if (uses_features()) {
      feat = ad::Tensor::matrix(batch, static_cast<std::size_t>(config_.feature_dim));
      for (std::size_t b = 0; b < batch; ++b) {
        if (!features[b]) throw UsageError("feature-conditioned model needs a feature vector");
        const auto enc = encode_feature_vector(schema_, *features[b]);
        std::copy(enc.begin(), enc.end(), feat->data() + b * enc.size());
      }
    } else {
      for (const auto* f : features) {
        if (f) throw UsageError("features supplied to a model trained without features");
      }
    }
    ad::Tape tape;
    const auto fwd = forward(tape, tokens, batch, seq, feat ? &*feat : nullptr, false);
    const auto& logits = tape.value(fwd.logits);
    const std::size_t v = logits.cols();
    std::vector<ad::Tensor> out;
    out.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      ad::Tensor lp = ad::Tensor::matrix(inputs[b].size(), v);
      for (std::size_t t = 0; t < inputs[b].size(); ++t) {
        const auto row = ad::log_softmax_row({logits.data() + (b * seq + t) * v, v});
        std::copy(row.begin(), row.end(), lp.data() + t * v);
      }
      out.push_back(std::move(lp));
    }
    return out;
  }

 private:
  ModelConfig config_;
  FeatureSchema schema_;
  std::vector<ad::Tensor> params_;
  bool frozen_ = false;
};

/// Weights ~ N(0, 0.02^2), biases 0, layer-norm gains 1.
inline TransformerModel init_model(const ModelConfig& config, std::uint64_t seed, FeatureSchema schema = {}) {
  config.validate();
  Rng rng(derive_seed(seed, 0x1a17));
  std::vector<ad::Tensor> params;
  for (const auto& spec : transformer_layout(config)) {
    ad::Tensor t(spec.shape, 0.0);
    const bool is_gain = spec.name.ends_with(".g");
    if (is_gain) {
      std::fill(t.values().begin(), t.values().end(), 1.0);
    } else if (spec.shape.size() == 2) {
      for (double& x : t.values()) x = 0.02 * rng.normal();
    }
    params.push_back(std::move(t));
  }
  return TransformerModel(config, std::move(schema), std::move(params));
}

// ---------------------------------------------------------------------------
// Training

struct TrainReport {
  std::vector<double> train_loss;
  std::vector<double> validation_loss;
  int best_epoch = -1;
  double best_validation_loss = std::numeric_limits<double>::infinity();
};

namespace detail {

struct Batch {
  std::vector<int> inputs;
  std::vector<int> targets;
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::optional<ad::Tensor> features;
};

inline Batch make_batch(const SequenceDataset& data, const std::vector<std::size_t>& idx, std::size_t begin,
                        std::size_t end, const FeatureSchema& schema, int feature_dim) {
  Batch b;
  b.batch = end - begin;
  for (std::size_t i = begin; i < end; ++i) b.seq = std::max(b.seq, data.records[idx[i]].tokens.size() - 1);
  const int pad = data.vocab.eos();
  b.inputs.assign(b.batch * b.seq, pad);
  b.targets.assign(b.batch * b.seq, ad::kIgnoreTarget);
  if (feature_dim > 0) b.features = ad::Tensor::matrix(b.batch, static_cast<std::size_t>(feature_dim));
  for (std::size_t r = 0; r < b.batch; ++r) {
    const auto& rec = data.records[idx[begin + r]];
    const auto& tok = rec.tokens;
    for (std::size_t t = 0; t + 1 < tok.size(); ++t) {
      b.inputs[r * b.seq + t] = tok[t];
      b.targets[r * b.seq + t] = tok[t + 1];
    }
    if (feature_dim > 0) {
      const auto enc = encode_feature_vector(schema, *rec.features);
      std::copy(enc.begin(), enc.end(), b.features->data() + r * enc.size());
    }
  }
  return b;
}

inline double mean_loss(const TransformerModel& model, const SequenceDataset& data, const std::vector<std::size_t>& idx,
                        std::size_t batch_size) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < idx.size(); s += batch_size) {
    const auto e = std::min(idx.size(), s + batch_size);
    const auto b = make_batch(data, idx, s, e, model.feature_schema(), model.config().feature_dim);
    ad::Tape tape;
    const auto fwd = model.forward(tape, b.inputs, b.batch, b.seq, b.features ? &*b.features : nullptr, false);
    const auto ce = ad::softmax_cross_entropy(tape.value(fwd.logits), b.targets);
    for (std::size_t i = 0; i < b.targets.size(); ++i) {
      if (b.targets[i] == ad::kIgnoreTarget) continue;
      total += ce.per_position[i];
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

}  // namespace detail

using EpochCallback = std::function<void(int epoch, double train_loss, double validation_loss)>;

/// Teacher-forced next-token training with Adam and early stopping on the
/// validation loss. Returns the best-validation parameters, frozen.
inline TransformerModel train(TransformerModel model, SequenceDataset data, const TrainConfig& config,
                              TrainReport* report = nullptr, const EpochCallback& on_epoch = {}) {
  config.validate();
  if (data.records.empty()) throw DataError("cannot train on an empty dataset");
  data.validate();
  if (model.frozen()) throw UsageError("model is already frozen");
  if (data.vocab.size() != model.vocab_size()) throw DataError("dataset vocabulary does not match the model");
  if (data.has_features() != model.uses_features()) throw DataError("dataset features do not match the model");
  for (const auto& r : data.records) {
    if (r.tokens.size() - 1 > model.context_length()) {
      throw DataError("walk of " + std::to_string(r.tokens.size()) + " tokens exceeds the model context");
    }
  }

  Rng rng(derive_seed(config.seed, 0x7a1));
  std::vector<std::size_t> order(data.records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order.begin(), order.end());
  auto n_val = static_cast<std::size_t>(std::floor(config.validation_fraction * static_cast<double>(order.size())));
  if (order.size() >= 2) n_val = std::clamp<std::size_t>(n_val, 1, order.size() - 1);
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  if (val.empty()) val = train_idx;

  if (data.has_features()) {
    std::vector<FeatureVector> train_features;
    for (auto i : train_idx) train_features.push_back(*data.records[i].features);
    FeatureSchema schema = data.schema;
    fit_normalization(schema, train_features);
    model = TransformerModel(model.config(), schema, model.parameters());
  }

  auto params = model.parameters();
  auto adam = ad::make_adam(ad::AdamConfig{config.learning_rate}, params);
  TrainReport local;
  TrainReport& rep = report ? *report : local;
  std::vector<ad::Tensor> best = params;
  int since_best = 0;
  const auto bs = static_cast<std::size_t>(config.batch_size);

  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    rng.shuffle(train_idx.begin(), train_idx.end());
    double epoch_loss = 0.0;
    std::size_t steps = 0;
    for (std::size_t s = 0; s < train_idx.size(); s += bs) {
      const auto e = std::min(train_idx.size(), s + bs);
      const auto b = detail::make_batch(data, train_idx, s, e, model.feature_schema(), model.config().feature_dim);
      ad::Tape tape;
      TransformerModel current(model.config(), model.feature_schema(), params);
      const auto fwd = current.forward(tape, b.inputs, b.batch, b.seq, b.features ? &*b.features : nullptr, true);
      const auto loss = ad::cross_entropy(tape, fwd.logits, b.targets);
      tape.backward(loss);
      std::vector<ad::Tensor> grads;
      grads.reserve(params.size());
      for (auto v : fwd.params) grads.push_back(tape.grad(v));
      ad::adam_step(adam, params, grads);
      epoch_loss += tape.value(loss)[0];
      ++steps;
    }
    model = TransformerModel(model.config(), model.feature_schema(), params);
    const double vloss = detail::mean_loss(model, data, val, bs);
    rep.train_loss.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(steps, 1)));
    rep.validation_loss.push_back(vloss);
    if (on_epoch) on_epoch(epoch, rep.train_loss.back(), vloss);
    if (vloss < rep.best_validation_loss) {
      rep.best_validation_loss = vloss;
      rep.best_epoch = epoch;
      best = params;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  TransformerModel result(model.config(), model.feature_schema(), std::move(best));
  result.freeze();
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kTransformerCheckpointVersion = 1;

inline Json transformer_to_json(const TransformerModel& model) {
  const auto& c = model.config();
  Json j{{"format", "deeptrails-transformer"},
         {"version", kTransformerCheckpointVersion},
         {"frozen", model.frozen()},
         {"config",
          {{"n_layers", c.n_layers},
           {"n_heads", c.n_heads},
           {"d_model", c.d_model},
           {"vocab_size", c.vocab_size},
           {"context", c.context},
           {"dropout", c.dropout},
           {"feature_dim", c.feature_dim}}},
         {"schema", detail::schema_to_json(model.feature_schema())}};
  Json params = Json::array();
  const auto layout = transformer_layout(c);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    params.push_back({{"name", layout[i].name}, {"shape", layout[i].shape}, {"values", model.parameters()[i].values()}});
  }
  j["parameters"] = std::move(params);
  return j;
}

/// `expected_vocab` > 0 rejects checkpoints built for another vocabulary.
inline TransformerModel transformer_from_json(const Json& j, int expected_vocab = 0) {
  try {
    if (j.at("format").get<std::string>() != "deeptrails-transformer") throw FormatError("not a transformer checkpoint");
    if (j.at("version").get<int>() != kTransformerCheckpointVersion) throw FormatError("unsupported checkpoint version");
    const auto& jc = j.at("config");
    ModelConfig c;
    c.n_layers = jc.at("n_layers").get<int>();
    c.n_heads = jc.at("n_heads").get<int>();
    c.d_model = jc.at("d_model").get<int>();
    c.vocab_size = jc.at("vocab_size").get<int>();
    c.context = jc.at("context").get<int>();
    c.dropout = jc.at("dropout").get<double>();
    c.feature_dim = jc.at("feature_dim").get<int>();
    if (expected_vocab > 0 && c.vocab_size != expected_vocab) {
      throw FormatError("checkpoint vocabulary " + std::to_string(c.vocab_size) + " does not match expected " +
                        std::to_string(expected_vocab));
    }
    std::vector<ad::Tensor> params;
    for (const auto& p : j.at("parameters")) {
      params.emplace_back(p.at("shape").get<std::vector<std::size_t>>(), p.at("values").get<std::vector<double>>());
    }
    TransformerModel model(c, detail::schema_from_json(j.at("schema")), std::move(params));
    if (j.value("frozen", false)) model.freeze();
    return model;
  } catch (const Json::exception& e) {
    throw FormatError(std::string("malformed transformer checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(std::string("checkpoint parameters invalid: ") + e.what());
  }
}

inline void save_checkpoint(const std::string& path, const TransformerModel& model) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << transformer_to_json(model).dump() << '\n';
}

inline TransformerModel load_checkpoint(const std::string& path, int expected_vocab = 0) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    throw FormatError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  return transformer_from_json(j, expected_vocab);
}

}  // namespace deeptrails
