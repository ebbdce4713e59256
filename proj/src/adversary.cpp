#include "astra/adversary.hpp"

#include <cmath>
#include <random>

#include "astra/tensor_io.hpp"

namespace astra {

void AttackConfig::validate() const {
  if (steps < 1) throw InvalidArgument("attack steps must be at least 1");
  if (!(step_size > 0.0) || !std::isfinite(step_size)) throw InvalidArgument("step_size must be positive");
  if (epsilon && (!(*epsilon > 0.0) || !std::isfinite(*epsilon))) {
    throw InvalidArgument("epsilon must be positive unless unconstrained");
  }
  if (instructions.empty()) throw InvalidArgument("attack needs at least one instruction");
  if (target.tokens.empty()) throw InvalidArgument("attack target must be nonempty");
}

nlohmann::json AttackConfig::to_json() const {
  nlohmann::json j;
  j["epsilon"] = epsilon ? nlohmann::json(*epsilon) : nlohmann::json("unconstrained");
  j["steps"] = steps;
  j["step_size"] = step_size;
  j["seed"] = seed;
  j["target"] = target.tokens;
  j["instructions"] = instructions;
  j["random_start"] = random_start;
  j["perturbable_slots"] = perturbable_slots;
  return j;
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j) {
  AttackConfig c;
  const auto& eps = j.at("epsilon");
  if (eps.is_string()) {
    if (eps.get<std::string>() != "unconstrained") throw InvalidArgument("epsilon must be a number or 'unconstrained'");
  } else {
    c.epsilon = eps.get<double>();
  }
  c.steps = j.at("steps").get<std::size_t>();
  c.step_size = j.at("step_size").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.target.tokens = j.at("target").get<TokenSequence>();
  c.instructions = j.at("instructions").get<std::vector<TokenSequence>>();
  c.random_start = j.value("random_start", false);
  c.perturbable_slots = j.value("perturbable_slots", std::vector<std::size_t>{});
  return c;
}

AttackAborted::AttackAborted(std::size_t step)
    : std::runtime_error("attack aborted: non-finite gradient at step " + std::to_string(step)), step_(step) {}

Matrix project_linf(const Matrix& perturbed, const Matrix& base, std::optional<double> epsilon) {
  if (perturbed.rows() != base.rows() || perturbed.cols() != base.cols()) {
    throw InvalidArgument("project_linf: shape mismatch");
  }
  if (!epsilon) return perturbed;
  const double e = *epsilon;
  return base + (perturbed - base).cwiseMax(-e).cwiseMin(e);
}

LogprobWithGradient attack_objective(const ToyVLM& model, const Matrix& visual, const AttackConfig& config,
                                     const ActivationHook* hook) {
  QueryOptions opts;
  opts.hook = hook;
  LogprobWithGradient total;
  total.visual_grad = Matrix::Zero(visual.rows(), visual.cols());
  for (const auto& text : config.instructions) {
    const PromptBundle bundle{visual, text, false};
    const auto r = model.logprob_and_visual_grad(bundle, config.target, opts);
    total.logprob += r.logprob;
    total.visual_grad += r.visual_grad;
  }
  return total;
}

namespace {

AdversarialImage run_pgd(const ToyVLM& model, const Matrix& base, const AttackConfig& config,
                         const ActivationHook* hook) {
  config.validate();
  const auto& mc = model.config();
  if (base.rows() != static_cast<Eigen::Index>(mc.n_visual_slots) ||
      base.cols() != static_cast<Eigen::Index>(mc.d_visual)) {
    throw InvalidArgument("base image has the wrong shape");
  }
  Eigen::VectorXd slot_mask = Eigen::VectorXd::Ones(base.rows());
  if (!config.perturbable_slots.empty()) {
    slot_mask.setZero();
    for (auto s : config.perturbable_slots) {
      if (s >= mc.n_visual_slots) throw InvalidArgument("perturbable slot out of range");
      slot_mask(static_cast<Eigen::Index>(s)) = 1.0;
    }
  }

  Matrix x = base;
  if (config.random_start && config.epsilon) {
    std::mt19937_64 rng(config.seed);
    std::uniform_real_distribution<double> u(-*config.epsilon, *config.epsilon);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      if (slot_mask(r) == 0.0) continue;
      for (Eigen::Index c = 0; c < x.cols(); ++c) x(r, c) += u(rng);
    }
  }

  AdversarialImage out;
  out.base = base;
  out.config_used = config;
  double best = -std::numeric_limits<double>::infinity();
  Matrix best_x = x;
  for (std::size_t step = 0; step <= config.steps; ++step) {
    const auto obj = attack_objective(model, x, config, hook);
    if (!std::isfinite(obj.logprob) || !obj.visual_grad.allFinite()) throw AttackAborted(step);
    if (step == 0) out.initial_loss = obj.logprob;
    if (obj.logprob > best) {
      best = obj.logprob;
      best_x = x;
    }
    if (step == config.steps) break;
    Matrix move = obj.visual_grad.unaryExpr([](double g) { return static_cast<double>((g > 0.0) - (g < 0.0)); });
    move.array().colwise() *= slot_mask.array();
    x = project_linf(x + config.step_size * move, base, config.epsilon);
  }
  out.perturbed = std::move(best_x);
  out.final_loss = best;
  return out;
}

}  // namespace

AdversarialImage pgd_attack(const ToyVLM& model, const Matrix& base, const AttackConfig& config) {
  return run_pgd(model, base, config, nullptr);
}

AdversarialImage adaptive_attack(const ToyVLM& model, const SteeringPolicy& policy, const Matrix& base,
                                 const AttackConfig& config) {
  const ActivationHook hook = make_defense_hook(policy);
  return run_pgd(model, base, config, &hook);
}

namespace {
constexpr io::Magic kAdversarialMagic{'A', 'S', 'T', 'A'};
}

void save_adversarial(const std::filesystem::path& path, const AdversarialImage& image) {
  io::ByteWriter w;
  w.magic(kAdversarialMagic);
  w.u32(kAdversarialFileVersion);
  w.matrix(image.base);
  w.matrix(image.perturbed);
  nlohmann::json meta;
  meta["config"] = image.config_used.to_json();
  meta["initial_loss"] = image.initial_loss;
  meta["final_loss"] = image.final_loss;
  w.blob(meta.dump());
  w.write_file(path);
}

AdversarialImage load_adversarial(const std::filesystem::path& path) {
  auto r = io::ByteReader::from_file(path);
  r.expect_magic(kAdversarialMagic);
  r.expect_version(kAdversarialFileVersion);
  AdversarialImage img;
  img.base = r.matrix();
  img.perturbed = r.matrix();
  if (img.base.rows() != img.perturbed.rows() || img.base.cols() != img.perturbed.cols()) {
    throw io::FormatError(io::FormatErrorKind::malformed, "base and perturbed shapes differ");
  }
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.blob());
    img.config_used = AttackConfig::from_json(meta.at("config"));
    img.initial_loss = meta.at("initial_loss").get<double>();
    img.final_loss = meta.at("final_loss").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw io::FormatError(io::FormatErrorKind::malformed, std::string("attack metadata: ") + e.what());
  }
  if (!r.at_end()) throw io::FormatError(io::FormatErrorKind::malformed, "trailing bytes");
  return img;
}

}  // namespace astra
