#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <vector>

#include "deeptrails/autodiff.hpp"
#include "deeptrails/dataset.hpp"

namespace deeptrails {

/// Contract shared by the transformer and forest language models: next-token
/// log-probabilities for every prefix of a token walk.
class SequenceModel {
 public:
  virtual ~SequenceModel() = default;

  virtual int vocab_size() const = 0;
  virtual bool frozen() const = 0;
  virtual bool uses_features() const = 0;
  virtual const FeatureSchema& feature_schema() const = 0;
  /// Longest token prefix the model accepts.
  virtual std::size_t context_length() const = 0;

  /// Row t holds log P(next | tokens[0..t]); shape [tokens.size() x V].
  virtual ad::Tensor next_token_log_probs(std::span<const int> tokens, const FeatureVector* features) const = 0;

  /// Batched variant; models with a vectorized forward pass override it.
  virtual std::vector<ad::Tensor> batch_log_probs(const std::vector<std::span<const int>>& inputs,
                                                  const std::vector<const FeatureVector*>& features) const {
    std::vector<ad::Tensor> out;
    out.reserve(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) out.push_back(next_token_log_probs(inputs[i], features[i]));
    return out;
  }

  /// Hash over all parameters; evaluation must leave it unchanged.
  virtual std::uint64_t parameter_hash() const = 0;

  /// Distribution over the next token after `prefix`.
  std::vector<double> predict_distribution(std::span<const int> prefix, const FeatureVector* features = nullptr) const {
    const auto lp = next_token_log_probs(prefix, features);
    const std::size_t v = lp.cols();
    std::vector<double> p(v);
    for (std::size_t j = 0; j < v; ++j) p[j] = std::exp(lp.at(lp.rows() - 1, j));
    return p;
  }
};

inline std::uint64_t hash_doubles(std::uint64_t h, std::span<const double> values) {
  for (double x : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &x, sizeof bits);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace deeptrails
