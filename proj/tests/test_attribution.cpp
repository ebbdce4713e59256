#include <cmath>
#include <random>

#include "astra/attribution.hpp"
#include "json.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "support.hpp"

using namespace astra;

namespace {

SurrogateModel with_weights(std::initializer_list<double> w) {
  SurrogateModel s;
  s.weights = Vector(static_cast<Eigen::Index>(w.size()));
  Eigen::Index i = 0;
  for (double x : w) s.weights(i++) = x;
  return s;
}

}  // namespace

TEST_CASE("sample_ablations: prepended all-ones sample, determinism, keep rate") {
  const auto small = sample_ablations(4, 1, 123);
  REQUIRE(small.size() == 2);
  CHECK(small[0] == AblationVector{1, 1, 1, 1});

  const auto a = sample_ablations(16, 96, 7);
  const auto b = sample_ablations(16, 96, 7);
  CHECK(a == b);
  REQUIRE(a.size() == 97);
  CHECK(sample_ablations(16, 96, 8) != a);
  for (std::size_t j = 0; j < 16; ++j) {
    std::size_t kept = 0;
    for (std::size_t i = 1; i < a.size(); ++i) kept += a[i][j];
    const double rate = static_cast<double>(kept) / 96.0;
    CHECK(rate >= 0.35);
    CHECK(rate <= 0.65);
  }
  CHECK_THROWS_AS(sample_ablations(0, 5, 1), InvalidArgument);
  CHECK_THROWS_AS(sample_ablations(5, 0, 1), InvalidArgument);
}

TEST_CASE("ablate zeroes masked rows") {
  std::mt19937_64 rng(1);
  const Matrix x = astra::testing::random_matrix(rng, 2, 5);
  CHECK(ablate(x, {1, 1}) == x);
  CHECK(ablate(x, {0, 0}).isZero(0.0));
  const Matrix y = ablate(x, {1, 0});
  CHECK(y.row(0) == x.row(0));
  CHECK(y.row(1).isZero(0.0));
  CHECK(y.rows() == x.rows());
  CHECK_THROWS_AS(ablate(x, {1, 0, 1}), InvalidArgument);

  const Matrix big = astra::testing::random_matrix(rng, 16, 4);
  for (const auto& g : sample_ablations(16, 20, 3)) CHECK(ablate(ablate(big, g), g) == ablate(big, g));
}

TEST_CASE("soft_threshold") {
  CHECK(soft_threshold(3.0, 1.0) == 2.0);
  CHECK(soft_threshold(-3.0, 1.0) == -2.0);
  CHECK(soft_threshold(0.5, 1.0) == 0.0);
  CHECK(soft_threshold(-1.0, 1.0) == 0.0);
}

TEST_CASE("single-feature fit equals the soft-threshold closed form") {
  // g = (1,0,1,0), y = (3,1,2,0): rho = 0.5, z = 0.25
  Matrix G(4, 1);
  G << 1, 0, 1, 0;
  Vector y(4);
  y << 3, 1, 2, 0;
  const auto f = fit_lasso(G, y, 0.1);
  CHECK(f.converged);
  CHECK(f.weights(0) == doctest::Approx(1.6).epsilon(1e-14));
  CHECK(f.intercept == doctest::Approx(0.7).epsilon(1e-14));
  const auto g = fit_lasso(G, y, 0.6);
  CHECK(g.weights(0) == 0.0);
  CHECK(g.intercept == 1.5);
  CHECK(lasso_lambda_max(G, y) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("full shrinkage at lambda_max") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix G = oracle::bernoulli_design(rng, 40, 7);
    const Vector y = astra::testing::random_vector(rng, 40);
    const double lmax = lasso_lambda_max(G, y);
    for (double scale : {1.0, 1.5, 10.0}) {
      const auto f = fit_lasso(G, y, lmax * scale);
      CHECK(f.converged);
      CHECK(f.weights.isZero(0.0));
      CHECK(f.intercept == doctest::Approx(y.mean()).epsilon(1e-14));
    }
    // just below the threshold something enters
    CHECK_FALSE(fit_lasso(G, y, lmax * 0.99).weights.isZero(0.0));
  }
}

TEST_CASE("lambda = 0 matches the least-squares normal equations") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix G = oracle::bernoulli_design(rng, 60, 6);
    const Vector y = astra::testing::random_vector(rng, 60);
    const Vector ls = oracle::least_squares_weights(G, y);
    const auto f = fit_lasso(G, y, 0.0, 1e-13, 1000000);
    REQUIRE(f.converged);
    CHECK((f.weights - ls).cwiseAbs().maxCoeff() <= 1e-8);
  }
}

TEST_CASE("coordinate descent agrees with the raw-problem oracle and satisfies KKT") {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> frac(0.001, 0.8);
  for (int trial = 0; trial < 30; ++trial) {
    const Matrix G = oracle::bernoulli_design(rng, 60, 6);
    const Vector y = astra::testing::random_vector(rng, 60);
    const double lambda = frac(rng) * lasso_lambda_max(G, y);
    const auto f = fit_lasso(G, y, lambda);
    REQUIRE(f.converged);
    const auto ref = oracle::lasso_raw_cd(G, y, lambda);
    const double ours = oracle::lasso_objective(G, y, f.weights, f.intercept, lambda);
    const double theirs = oracle::lasso_objective(G, y, ref.w, ref.b, lambda);
    CHECK(ours <= theirs + 1e-9);
    CHECK(lasso_objective(G, y, f) == doctest::Approx(ours).epsilon(1e-12));
    CHECK(lasso_kkt_residual(G, y, f) <= 1e-8);
  }
}

TEST_CASE("constant columns get weight zero; bad input is rejected") {
  std::mt19937_64 rng(3);
  Matrix G = oracle::bernoulli_design(rng, 30, 4);
  G.col(1).setOnes();
  G.col(2).setZero();
  const Vector y = astra::testing::random_vector(rng, 30);
  const auto f = fit_lasso(G, y, 0.0);
  CHECK(f.weights(1) == 0.0);
  CHECK(f.weights(2) == 0.0);

  Vector bad = y;
  bad(3) = std::nan("");
  CHECK_THROWS_AS(fit_lasso(G, bad, 0.1), InvalidArgument);
  CHECK_THROWS_AS(fit_lasso(G, y, -1.0), InvalidArgument);
  CHECK_THROWS_AS(fit_lasso(G.topRows(1), y.head(1), 0.1), InvalidArgument);
}

TEST_CASE("noiseless sparse data: support is recovered") {
  std::mt19937_64 rng(9);
  const Matrix G = oracle::bernoulli_design(rng, 97, 16);
  Vector truth = Vector::Zero(16);
  truth(0) = 1.5;
  truth(3) = -0.8;
  truth(11) = 2.0;
  const Vector y = (G * truth).array() + 2.0;
  const auto f = fit_lasso(G, y, 1e-4 * lasso_lambda_max(G, y));
  REQUIRE(f.converged);
  for (Eigen::Index j = 0; j < 16; ++j) {
    CHECK((std::abs(f.weights(j)) > 1e-6) == (truth(j) != 0.0));
  }
  CHECK(top_k_mask(f, 1).topk_indices == std::vector<std::size_t>{11});
}

TEST_CASE("top_k_mask ranks by signed weight with low-index tie-break") {
  const auto a = top_k_mask(with_weights({0.9, -0.2, 0.5, 0.0}), 2);
  CHECK(a.topk_indices == std::vector<std::size_t>{0, 2});
  CHECK(a.mask == AblationVector{0, 1, 0, 1});

  CHECK(top_k_mask(with_weights({0.5, 0.5, 0.1}), 1).topk_indices == std::vector<std::size_t>{0});
  CHECK(top_k_mask(with_weights({-3.0, -1.0, -2.0}), 1).topk_indices == std::vector<std::size_t>{1});

  const auto all = top_k_mask(with_weights({0.3, -1.0, 2.0}), 3);
  CHECK(all.mask == AblationVector{0, 0, 0});
  CHECK_THROWS_AS(top_k_mask(with_weights({1.0, 2.0}), 0), InvalidArgument);
  CHECK_THROWS_AS(top_k_mask(with_weights({1.0, 2.0}), 3), InvalidArgument);
}

TEST_CASE("score_ablation and attribute on a small model") {
  ModelConfig c;
  c.d_model = 12;
  c.d_visual = 12;
  c.n_layers = 2;
  c.n_visual_slots = 8;
  c.max_seq_len = 14;
  const auto model = init_model(c);
  std::mt19937_64 rng(4);
  const Matrix x = astra::testing::random_matrix(rng, 8, 12);
  const TokenSequence text{tok::USR, tok::H0, tok::AST};
  const auto r = TargetResponse::sure();

  const AblationVector ones(8, 1);
  CHECK(score_ablation(model, x, ones, text, r) == model.response_logprob({x, text, false}, r));
  for (const auto& g : sample_ablations(8, 10, 2)) CHECK(score_ablation(model, x, g, text, r) <= 0.0);

  AttributionParams p;
  p.n_ablations = 32;
  p.top_k = 3;
  p.seed = 99;
  const auto a = attribute(model, x, text, r, p);
  const auto b = attribute(model, x, text, r, p);
  CHECK(a.surrogate.weights == b.surrogate.weights);
  CHECK(a.topk_indices == b.topk_indices);
  CHECK(a.topk_indices.size() == 3);
  CHECK(a.surrogate.n_samples == 33);
  std::size_t zeros = 0;
  for (std::size_t j = 0; j < 8; ++j) {
    const bool in = std::find(a.topk_indices.begin(), a.topk_indices.end(), j) != a.topk_indices.end();
    CHECK((a.mask[j] == 0) == in);
    zeros += a.mask[j] == 0;
  }
  CHECK(zeros == 3);

  p.top_k = 8;
  CHECK(attribute(model, x, text, r, p).mask == AblationVector(8, 0));

  // repeated attribution averages surrogate weights across instructions
  p.top_k = 3;
  const std::vector<TokenSequence> instr{text, {tok::USR, tok::H0 + 1, tok::AST}};
  const auto rep = attribute_repeated(model, x, instr, r, p);
  CHECK(rep.repetitions == 2);
  CHECK(rep.topk_indices.size() == 3);
}

TEST_CASE("attribution JSON round trip") {
  auto s = with_weights({0.25, -1.5, 3.0, 0.0});
  s.intercept = -2.5;
  s.lambda = 0.01;
  s.converged = true;
  auto res = top_k_mask(s, 2);
  res.seed = 42;
  res.n_ablations = 96;
  const auto text = attribution_to_json(res);
  const auto back = attribution_from_json(text);
  CHECK(back.surrogate.weights == res.surrogate.weights);
  CHECK(back.surrogate.intercept == res.surrogate.intercept);
  CHECK(back.topk_indices == res.topk_indices);
  CHECK(back.mask == res.mask);
  CHECK(back.seed == 42);
  CHECK(back.n_ablations == 96);
  const auto j = nlohmann::json::parse(text);
  for (const char* key : {"m", "k", "lambda", "weights", "intercept", "topk_indices", "seed", "n_ablations"}) {
    CHECK(j.contains(key));
  }
}
