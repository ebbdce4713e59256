#pragma once

// Visual-token attribution: random ablations of the visual tokens are scored by
// the jailbreak log-probability, a Lasso surrogate is fit to (g, f(g)) pairs,
// and the tokens with the largest signed weights are selected for masking.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "astra/model.hpp"

namespace astra {

/// g: 1 keeps a visual token, 0 replaces it with the zero embedding.
using AblationVector = std::vector<std::uint8_t>;

struct AblationSample {
  AblationVector g;
  double score = 0.0;  // f(g), a log-probability
};

struct SurrogateModel {
  Vector weights;
  double intercept = 0.0;
  double lambda = 0.0;
  bool converged = false;
  std::size_t n_samples = 0;
  std::size_t iterations = 0;
};

struct AttributionResult {
  SurrogateModel surrogate;
  std::vector<std::size_t> topk_indices;  // ascending
  AblationVector mask;                    // zeros exactly at topk_indices
  std::uint64_t seed = 0;
  std::size_t n_ablations = 0;
  std::size_t repetitions = 1;
};

/// Sample 0 is all ones; samples 1..N are i.i.d. Bernoulli(0.5) bits.
std::vector<AblationVector> sample_ablations(std::size_t m, std::size_t n, std::uint64_t seed);

Matrix ablate(const Matrix& visual_embeddings, const AblationVector& g);

double score_ablation(const ToyVLM& model, const Matrix& visual_embeddings, const AblationVector& g,
                      const TokenSequence& text, const TargetResponse& response);

/// Design matrix with one row per ablation vector.
Matrix design_matrix(std::span<const AblationVector> samples);

/// max_j |(1/N) G_j^T (y - mean(y))|: the smallest lambda with all-zero weights.
double lasso_lambda_max(const Matrix& design, const Vector& y);

/// Minimizes (1/2N)||y - b - G w||^2 + lambda ||w||_1 by cyclic coordinate
/// descent; b is unpenalized. Constant columns get weight 0.
SurrogateModel fit_lasso(const Matrix& design, const Vector& y, double lambda, double tol = 1e-10,
                         std::size_t max_iters = 100000);

double lasso_objective(const Matrix& design, const Vector& y, const SurrogateModel& model);

/// Largest KKT violation: |c_j| - lambda for zero weights, |c_j - lambda sign(w_j)|
/// otherwise, where c_j = (1/N) G_j^T residual.
double lasso_kkt_residual(const Matrix& design, const Vector& y, const SurrogateModel& model);

/// Soft-thresholding S(rho, lambda).
double soft_threshold(double rho, double lambda);

/// Largest signed weights first, ties to the lower index.
AttributionResult top_k_mask(const SurrogateModel& surrogate, std::size_t k);

struct AttributionParams {
  std::size_t n_ablations = 96;
  std::size_t top_k = 4;
  /// Negative: use lambda_fraction * lambda_max.
  double lambda = -1.0;
  double lambda_fraction = 0.01;
  std::uint64_t seed = 0;
};

/// sample_ablations -> score_ablation (N + 1 forwards) -> fit_lasso -> top_k_mask.
AttributionResult attribute(const ToyVLM& model, const Matrix& visual_embeddings, const TokenSequence& text,
                            const TargetResponse& response, const AttributionParams& params);

/// One attribution per instruction (with distinct ablation seeds); the
/// surrogate weights are averaged before top-k selection.
AttributionResult attribute_repeated(const ToyVLM& model, const Matrix& visual_embeddings,
                                     const std::vector<TokenSequence>& instructions, const TargetResponse& response,
                                     const AttributionParams& params);

/// {m, k, lambda, weights[], intercept, topk_indices[], seed, n_ablations}
std::string attribution_to_json(const AttributionResult& result);
AttributionResult attribution_from_json(const std::string& text);

}  // namespace astra
