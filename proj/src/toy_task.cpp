#include "astra/toy_task.hpp"

#include <cmath>

#include "astra/parallel.hpp"

namespace astra {

ToyTask::ToyTask(const ModelConfig& model_config, TaskConfig config)
    : model_config_(model_config), config_(config) {
  model_config_.validate();
  if (config_.n_classes == 0 || config_.n_classes > tok::kNumAnswers) {
    throw InvalidArgument("n_classes must be in [1, " + std::to_string(tok::kNumAnswers) + "]");
  }
  std::mt19937_64 rng(config_.seed);
  std::normal_distribution<double> dist(0.0, config_.prototype_scale);
  for (std::uint32_t c = 0; c < config_.n_classes; ++c) {
    Matrix p(model_config_.n_visual_slots, model_config_.d_visual);
    for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = dist(rng);
    prototypes_.push_back(std::move(p));
  }
}

Matrix ToyTask::random_image(std::uint32_t cls, std::mt19937_64& rng) const {
  std::normal_distribution<double> dist(0.0, config_.noise);
  Matrix img = prototypes_.at(cls);
  for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] += dist(rng);
  return img;
}

Matrix ToyTask::clean_image(std::uint64_t image_id) const {
  std::mt19937_64 rng(mix_seed(config_.seed, image_id));
  return random_image(image_class(image_id), rng);
}

PromptBundle ToyTask::bundle(const Matrix& image, TokenSequence text) const {
  PromptBundle b{image, std::move(text), false};
  b.is_template_only = b.textual_tokens == template_query();
  return b;
}

std::vector<TokenSequence> ToyTask::harmful_instructions() {
  std::vector<TokenSequence> out;
  for (std::uint32_t i = 0; i < tok::kNumHarmful; ++i) out.push_back(harmful_instruction(i));
  return out;
}

Example ToyTask::sample_training_example(std::mt19937_64& rng) const {
  const auto cls = static_cast<std::uint32_t>(std::uniform_int_distribution<std::uint32_t>(0, n_classes() - 1)(rng));
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  Example ex;
  ex.label = cls;
  Matrix img = random_image(cls, rng);
  if (u < 0.40) {
    ex.kind = ExampleKind::benign_query;
    ex.prompt = bundle(img, benign_query());
    ex.response = {{answer_token(cls), tok::EOS}};
  } else if (u < 0.55) {
    ex.kind = ExampleKind::template_query;
    ex.prompt = bundle(img, template_query());
    ex.response = {{answer_token(cls), tok::EOS}};
  } else if (u < 0.85) {
    ex.kind = ExampleKind::harmful;
    const auto i = std::uniform_int_distribution<std::uint32_t>(0, tok::kNumHarmful - 1)(rng);
    ex.prompt = bundle(img, harmful_instruction(i));
    ex.response = {{tok::REFUSE, tok::EOS}};
  } else {
    ex.kind = ExampleKind::harmless_request;
    const auto i = std::uniform_int_distribution<std::uint32_t>(0, tok::kNumHarmless - 1)(rng);
    ex.prompt = bundle(img, harmless_request(i));
    ex.response = {{tok::SURE, tok::EOS}};
  }
  return ex;
}

TrainingDivergence::TrainingDivergence(std::size_t step)
    : std::runtime_error("training diverged (non-finite loss) at step " + std::to_string(step)), step_(step) {}

TrainReport train_toy(ToyVLM& model, const ToyTask& task, const TrainConfig& config) {
  if (config.steps < 1) throw InvalidArgument("steps must be at least 1");
  if (config.batch_size < 1) throw InvalidArgument("batch_size must be at least 1");
  if (!(config.lr > 0.0)) throw InvalidArgument("lr must be positive");

  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8, clip = 1.0;
  const ModelConfig& mc = model.config();
  Weights m1 = Weights::zeros(mc), m2 = Weights::zeros(mc);
  auto params = model.mutable_weights().tensors();
  auto mom1 = m1.tensors(), mom2 = m2.tensors();

  std::mt19937_64 rng(config.seed);
  TrainReport report;
  report.losses.reserve(config.steps);
  for (std::size_t step = 0; step < config.steps; ++step) {
    Weights grads = Weights::zeros(mc);
    double total = 0.0;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const Example ex = task.sample_training_example(rng);
      total += model.accumulate_weight_gradient(ex.prompt, ex.response, grads);
    }
    const double loss = -total / static_cast<double>(config.batch_size);
    if (!std::isfinite(loss)) throw TrainingDivergence(step);
    report.losses.push_back(loss);

    // grads hold d(sum logprob); descend on the mean NLL.
    auto g = grads.tensors();
    double sq = 0.0;
    for (auto& t : g) {
      for (std::size_t i = 0; i < t.size(); ++i) {
        t.data[i] = -t.data[i] / static_cast<double>(config.batch_size);
        sq += t.data[i] * t.data[i];
      }
    }
    const double norm = std::sqrt(sq);
    const double gscale = norm > clip ? clip / norm : 1.0;
    const double progress = static_cast<double>(step) / static_cast<double>(config.steps);
    const double lr = config.lr * 0.5 * (1.0 + std::cos(M_PI * progress));
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step + 1));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step + 1));
    for (std::size_t ti = 0; ti < params.size(); ++ti) {
      for (std::size_t i = 0; i < params[ti].size(); ++i) {
        const double gi = g[ti].data[i] * gscale;
        double& a = mom1[ti].data[i];
        double& v = mom2[ti].data[i];
        a = beta1 * a + (1.0 - beta1) * gi;
        v = beta2 * v + (1.0 - beta2) * gi * gi;
        params[ti].data[i] -= lr * (a / bc1) / (std::sqrt(v / bc2) + adam_eps);
      }
    }
  }
  return report;
}

}  // namespace astra
