#include "astra/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "astra/parallel.hpp"
#include "json.hpp"

namespace astra {

std::vector<AblationVector> sample_ablations(std::size_t m, std::size_t n, std::uint64_t seed) {
  if (m < 1) throw InvalidArgument("m must be at least 1");
  if (n < 1) throw InvalidArgument("N must be at least 1");
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(0.5);
  std::vector<AblationVector> out;
  out.reserve(n + 1);
  out.emplace_back(m, 1);
  for (std::size_t i = 0; i < n; ++i) {
    AblationVector g(m);
    for (auto& bit : g) bit = keep(rng) ? 1 : 0;
    out.push_back(std::move(g));
  }
  return out;
}

Matrix ablate(const Matrix& visual_embeddings, const AblationVector& g) {
  if (static_cast<Eigen::Index>(g.size()) != visual_embeddings.rows()) {
    throw InvalidArgument("ablation vector length " + std::to_string(g.size()) + " does not match " +
                          std::to_string(visual_embeddings.rows()) + " visual tokens");
  }
  Matrix out = visual_embeddings;
  for (std::size_t j = 0; j < g.size(); ++j) {
    if (g[j] > 1) throw InvalidArgument("ablation vector entries must be 0 or 1");
    if (g[j] == 0) out.row(static_cast<Eigen::Index>(j)).setZero();
  }
  return out;
}

double score_ablation(const ToyVLM& model, const Matrix& visual_embeddings, const AblationVector& g,
                      const TokenSequence& text, const TargetResponse& response) {
  PromptBundle bundle{ablate(visual_embeddings, g), text, false};
  return model.response_logprob(bundle, response);
}

Matrix design_matrix(std::span<const AblationVector> samples) {
  if (samples.empty()) return {};
  Matrix g(samples.size(), samples.front().size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].size() != samples.front().size()) throw InvalidArgument("ragged ablation samples");
    for (std::size_t j = 0; j < samples[i].size(); ++j) g(i, j) = samples[i][j];
  }
  return g;
}

double soft_threshold(double rho, double lambda) {
  if (rho > lambda) return rho - lambda;
  if (rho < -lambda) return rho + lambda;
  return 0.0;
}

namespace {

void check_problem(const Matrix& design, const Vector& y) {
  if (design.rows() < 2) throw InvalidArgument("Lasso needs at least 2 samples");
  if (design.rows() != y.size()) throw InvalidArgument("design rows and targets disagree");
  if (!design.allFinite() || !y.allFinite()) throw InvalidArgument("non-finite Lasso input");
}

Vector residual(const Matrix& design, const Vector& y, const SurrogateModel& s) {
  Vector r = y - design * s.weights;
  r.array() -= s.intercept;
  return r;
}

// Column-centred problem shared by the solver and lambda_max so that both
// evaluate the same correlations bit for bit.
struct Centered {
  Matrix xc;
  Vector yc;
  Eigen::RowVectorXd col_mean;
  double y_mean = 0.0;
  std::vector<char> constant;
  double inv_n = 0.0;
};

Centered center(const Matrix& design, const Vector& y) {
  Centered c;
  c.inv_n = 1.0 / static_cast<double>(design.rows());
  c.col_mean = design.colwise().mean();
  c.y_mean = y.mean();
  c.xc = design.rowwise() - c.col_mean;
  c.yc = y.array() - c.y_mean;
  c.constant.resize(static_cast<std::size_t>(design.cols()));
  for (Eigen::Index j = 0; j < design.cols(); ++j) {
    c.constant[j] = design.col(j).maxCoeff() == design.col(j).minCoeff();
    if (c.constant[j]) c.xc.col(j).setZero();
  }
  return c;
}

}  // namespace

double lasso_lambda_max(const Matrix& design, const Vector& y) {
  check_problem(design, y);
  const Centered c = center(design, y);
  double out = 0.0;
  for (Eigen::Index j = 0; j < design.cols(); ++j) out = std::max(out, std::abs(c.xc.col(j).dot(c.yc) * c.inv_n));
  return out;
}

SurrogateModel fit_lasso(const Matrix& design, const Vector& y, double lambda, double tol, std::size_t max_iters) {
  check_problem(design, y);
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw InvalidArgument("lambda must be a finite nonnegative number");
  if (!(tol > 0.0)) throw InvalidArgument("tol must be positive");

  const Eigen::Index n = design.rows(), m = design.cols();
  const Centered c = center(design, y);
  const auto& xc = c.xc;
  const auto& yc = c.yc;
  const auto& constant = c.constant;
  const double inv_n = c.inv_n;
  Vector z(m);
  for (Eigen::Index j = 0; j < m; ++j) z(j) = xc.col(j).squaredNorm() * inv_n;

  SurrogateModel s;
  s.weights = Vector::Zero(m);
  s.lambda = lambda;
  s.n_samples = static_cast<std::size_t>(n);
  Vector r = yc;
  for (std::size_t it = 0; it < max_iters; ++it) {
    double max_delta = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) {
      if (constant[j]) continue;
      const double rho = xc.col(j).dot(r) * inv_n + z(j) * s.weights(j);
      const double updated = soft_threshold(rho, lambda) / z(j);
      const double delta = updated - s.weights(j);
      if (delta != 0.0) {
        r.noalias() -= delta * xc.col(j);
        s.weights(j) = updated;
        max_delta = std::max(max_delta, std::abs(delta));
      }
    }
    r = yc - xc * s.weights;  // refresh to keep rounding drift out of long runs
    s.iterations = it + 1;
    if (max_delta < tol) {
      s.converged = true;
      break;
    }
  }
  s.intercept = c.y_mean - c.col_mean.dot(s.weights);
  return s;
}

double lasso_objective(const Matrix& design, const Vector& y, const SurrogateModel& model) {
  const Vector r = residual(design, y, model);
  return 0.5 * r.squaredNorm() / static_cast<double>(design.rows()) + model.lambda * model.weights.lpNorm<1>();
}

double lasso_kkt_residual(const Matrix& design, const Vector& y, const SurrogateModel& model) {
  const Vector r = residual(design, y, model);
  const Vector c = design.transpose() * r / static_cast<double>(design.rows());
  double worst = 0.0;
  for (Eigen::Index j = 0; j < c.size(); ++j) {
    const double w = model.weights(j);
    const double v = w == 0.0 ? std::max(0.0, std::abs(c(j)) - model.lambda)
                              : std::abs(c(j) - model.lambda * (w > 0.0 ? 1.0 : -1.0));
    worst = std::max(worst, v);
  }
  return worst;
}

AttributionResult top_k_mask(const SurrogateModel& surrogate, std::size_t k) {
  const auto m = static_cast<std::size_t>(surrogate.weights.size());
  if (k < 1 || k > m) throw InvalidArgument("k must be in [1, " + std::to_string(m) + "], got " + std::to_string(k));
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return surrogate.weights(a) > surrogate.weights(b); });
  AttributionResult out;
  out.surrogate = surrogate;
  out.topk_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(out.topk_indices.begin(), out.topk_indices.end());
  out.mask.assign(m, 1);
  for (auto j : out.topk_indices) out.mask[j] = 0;
  return out;
}

namespace {

SurrogateModel fit_one(const ToyVLM& model, const Matrix& visual, const TokenSequence& text,
                       const TargetResponse& response, const AttributionParams& params, std::uint64_t seed) {
  const auto samples = sample_ablations(static_cast<std::size_t>(visual.rows()), params.n_ablations, seed);
  Vector y(static_cast<Eigen::Index>(samples.size()));
  parallel_for(samples.size(), [&](std::size_t i) {
    y(static_cast<Eigen::Index>(i)) = score_ablation(model, visual, samples[i], text, response);
  });
  const Matrix g = design_matrix(samples);
  const double lambda = params.lambda >= 0.0 ? params.lambda : params.lambda_fraction * lasso_lambda_max(g, y);
  return fit_lasso(g, y, lambda);
}

}  // namespace

AttributionResult attribute(const ToyVLM& model, const Matrix& visual_embeddings, const TokenSequence& text,
                            const TargetResponse& response, const AttributionParams& params) {
  auto result = top_k_mask(fit_one(model, visual_embeddings, text, response, params, params.seed), params.top_k);
  result.seed = params.seed;
  result.n_ablations = params.n_ablations;
  return result;
}

AttributionResult attribute_repeated(const ToyVLM& model, const Matrix& visual_embeddings,
                                     const std::vector<TokenSequence>& instructions, const TargetResponse& response,
                                     const AttributionParams& params) {
  if (instructions.empty()) throw InvalidArgument("at least one instruction is required");
  if (instructions.size() == 1) return attribute(model, visual_embeddings, instructions.front(), response, params);
  SurrogateModel mean;
  mean.weights = Vector::Zero(visual_embeddings.rows());
  mean.converged = true;
  for (std::size_t r = 0; r < instructions.size(); ++r) {
    const auto s = fit_one(model, visual_embeddings, instructions[r], response, params, mix_seed(params.seed, r));
    mean.weights += s.weights;
    mean.intercept += s.intercept;
    mean.lambda += s.lambda;
    mean.converged = mean.converged && s.converged;
    mean.n_samples += s.n_samples;
    mean.iterations = std::max(mean.iterations, s.iterations);
  }
  const double reps = static_cast<double>(instructions.size());
  mean.weights /= reps;
  mean.intercept /= reps;
  mean.lambda /= reps;
  auto result = top_k_mask(mean, params.top_k);
  result.seed = params.seed;
  result.n_ablations = params.n_ablations;
  result.repetitions = instructions.size();
  return result;
}

std::string attribution_to_json(const AttributionResult& r) {
  nlohmann::json j;
  j["m"] = r.surrogate.weights.size();
  j["k"] = r.topk_indices.size();
  j["lambda"] = r.surrogate.lambda;
  j["weights"] = std::vector<double>(r.surrogate.weights.data(), r.surrogate.weights.data() + r.surrogate.weights.size());
  j["intercept"] = r.surrogate.intercept;
  j["topk_indices"] = r.topk_indices;
  j["seed"] = r.seed;
  j["n_ablations"] = r.n_ablations;
  j["converged"] = r.surrogate.converged;
  j["repetitions"] = r.repetitions;
  return j.dump(2);
}

AttributionResult attribution_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  AttributionResult r;
  const auto w = j.at("weights").get<std::vector<double>>();
  if (w.size() != j.at("m").get<std::size_t>()) throw InvalidArgument("attribution JSON: weights length != m");
  r.surrogate.weights = Eigen::Map<const Vector>(w.data(), static_cast<Eigen::Index>(w.size()));
  r.surrogate.intercept = j.at("intercept").get<double>();
  r.surrogate.lambda = j.at("lambda").get<double>();
  r.surrogate.converged = j.value("converged", true);
  r.topk_indices = j.at("topk_indices").get<std::vector<std::size_t>>();
  if (r.topk_indices.size() != j.at("k").get<std::size_t>()) throw InvalidArgument("attribution JSON: k mismatch");
  r.seed = j.at("seed").get<std::uint64_t>();
  r.n_ablations = j.at("n_ablations").get<std::size_t>();
  r.repetitions = j.value("repetitions", std::size_t{1});
  r.mask.assign(w.size(), 1);
  for (auto idx : r.topk_indices) {
    if (idx >= w.size()) throw InvalidArgument("attribution JSON: index out of range");
    r.mask[idx] = 0;
  }
  return r;
}

}  // namespace astra
