#pragma once

// A small decoder-only transformer that reads a prefix of continuous visual
// embeddings followed by text tokens. Everything is float64 and the backward
// pass is written by hand for this one architecture (pre-norm blocks, learned
// positions, untied unembedding).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "astra/types.hpp"

namespace astra {

class ConfigError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

struct ModelConfig {
  std::uint32_t vocab_size = 32;
  std::uint32_t d_model = 24;
  std::uint32_t n_layers = 4;
  std::uint32_t n_heads = 2;
  std::uint32_t n_visual_slots = 16;
  std::uint32_t d_visual = 24;
  std::uint32_t max_seq_len = 24;
  std::uint64_t seed = 1;

  std::uint32_t d_ff() const { return 4 * d_model; }
  /// Throws ConfigError naming the first violated constraint.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct PromptBundle {
  Matrix visual_embeddings;     // m x d_visual
  TokenSequence textual_tokens;  // x_t (or the bare chat template)
  bool is_template_only = false;

  void validate(const ModelConfig& config) const;
};

struct TargetResponse {
  TokenSequence tokens;

  static TargetResponse sure() { return {{tok::SURE}}; }
};

enum class PositionRole { last_input_token, generated_step };

struct ActivationVector {
  std::size_t layer = 0;
  Vector values;
  PositionRole role = PositionRole::last_input_token;
  std::size_t step = 0;  // meaningful for generated_step
};

using VisualGradient = Matrix;

/// Rewrites the residual stream at the output of block `layer` for every
/// position that emits a generated token. `pullback` is the vector-Jacobian
/// product of `rewrite` and is only needed when differentiating through it.
struct ActivationHook {
  std::size_t layer = 0;
  std::function<Vector(const Vector&)> rewrite;
  std::function<Vector(const Vector& h, const Vector& grad_out)> pullback;
};

struct QueryOptions {
  const ActivationHook* hook = nullptr;
  /// Visual slots that no other position may attend to.
  std::vector<std::size_t> isolated_slots;
};

struct GreedyDecode {};
struct SampledDecode {
  std::uint64_t seed = 0;
  double temperature = 1.0;
  double top_p = 1.0;
};
using DecodeMode = std::variant<GreedyDecode, SampledDecode>;

struct GenerateOptions {
  std::size_t max_tokens = 1;
  const ActivationHook* hook = nullptr;
  DecodeMode decode = GreedyDecode{};
  /// Layer whose per-step activation is recorded. Defaults to the hook's
  /// layer, or the last block when there is no hook.
  std::optional<std::size_t> record_layer;
};

struct GenerationResult {
  TokenSequence tokens;
  /// One entry per generated token: the residual at the emitting position,
  /// as observed before any rewrite at that layer.
  std::vector<ActivationVector> activations;
  /// Whether the hook changed the activation at each step.
  std::vector<bool> rewritten;

  std::size_t rewritten_steps() const;
};

struct LogprobWithGradient {
  double logprob = 0.0;
  VisualGradient visual_grad;
};

struct BlockWeights {
  Vector ln1_gain, ln1_bias;
  Matrix wq, wk, wv, wo;
  Vector ln2_gain, ln2_bias;
  Matrix w1;
  Vector b1;
  Matrix w2;
  Vector b2;
};

struct Weights {
  Matrix token_embedding;     // vocab x d
  Matrix position_embedding;  // max_seq_len x d
  std::vector<BlockWeights> blocks;
  Vector lnf_gain, lnf_bias;
  Matrix unembedding;  // d x vocab
  Vector unembedding_bias;

  /// All-zero weights with the shapes implied by `config`.
  static Weights zeros(const ModelConfig& config);

  struct TensorView {
    double* data;
    std::vector<std::uint32_t> dims;
    std::size_t size() const;
  };
  /// Every tensor in declaration order; the checkpoint format follows it.
  std::vector<TensorView> tensors();
  std::vector<std::span<const double>> tensors() const;
};

class ToyVLM {
 public:
  explicit ToyVLM(ModelConfig config);  // zero weights; see init_model
  ToyVLM(ModelConfig config, Weights weights);

  const ModelConfig& config() const { return config_; }
  const Weights& weights() const { return weights_; }
  Weights& mutable_weights() { return weights_; }
  /// FNV-1a over the raw bytes of every weight tensor.
  std::uint64_t checksum() const;

  /// Log-softmax of the next-token distribution after prompt + continuation.
  Vector next_token_logprobs(const PromptBundle& bundle, std::span<const TokenId> continuation,
                             const QueryOptions& options = {}) const;

  /// Teacher-forced sum of log P(r_i | prompt, r_<i).
  double response_logprob(const PromptBundle& bundle, const TargetResponse& response,
                          const QueryOptions& options = {}) const;

  LogprobWithGradient logprob_and_visual_grad(const PromptBundle& bundle, const TargetResponse& response,
                                              const QueryOptions& options = {}) const;

  /// Exact reverse-mode gradient of response_logprob w.r.t. the visual embeddings.
  VisualGradient grad_wrt_visual(const PromptBundle& bundle, const TargetResponse& response,
                                 const QueryOptions& options = {}) const;

  /// Adds d(response_logprob)/d(weights) into `grads`; returns the log-prob.
  double accumulate_weight_gradient(const PromptBundle& bundle, const TargetResponse& response,
                                    Weights& grads) const;

  /// Residual stream at the output of block `layer`, final input position.
  ActivationVector read_activation(const PromptBundle& bundle, std::size_t layer) const;

  /// Residual stream after every block for every position (layer-major).
  std::vector<Matrix> residual_stream(const PromptBundle& bundle, std::span<const TokenId> continuation,
                                      const QueryOptions& options = {}) const;

  GenerationResult generate(const PromptBundle& bundle, const GenerateOptions& options) const;

  void save(const std::filesystem::path& path) const;
  static ToyVLM load(const std::filesystem::path& path);

 private:
  ModelConfig config_;
  Weights weights_;
};

/// Deterministic initialization from config.seed.
ToyVLM init_model(const ModelConfig& config);

inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace astra
