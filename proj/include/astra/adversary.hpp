#pragma once

// L-infinity PGD on the visual embeddings, maximizing the summed target
// log-probability over a set of harmful instructions. The adaptive variant
// runs the same loop through the defended forward pass.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <vector>

#include "astra/model.hpp"
#include "astra/steering.hpp"
#include "json.hpp"

namespace astra {

struct AttackConfig {
  std::optional<double> epsilon;  // nullopt: unconstrained
  std::size_t steps = 300;
  double step_size = 0.01;
  std::uint64_t seed = 0;
  TargetResponse target = TargetResponse::sure();
  std::vector<TokenSequence> instructions;
  /// Start from a uniform point in the ball instead of the clean image.
  bool random_start = false;
  /// Only these slots may be perturbed; empty means all of them.
  std::vector<std::size_t> perturbable_slots;

  void validate() const;
  nlohmann::json to_json() const;
  static AttackConfig from_json(const nlohmann::json& j);
};

struct AdversarialImage {
  Matrix base;
  Matrix perturbed;
  AttackConfig config_used;
  double initial_loss = 0.0;
  double final_loss = 0.0;  // best objective over all iterates
};

class AttackAborted : public std::runtime_error {
 public:
  explicit AttackAborted(std::size_t step);
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// Clamps (perturbed - base) elementwise into [-eps, eps]; identity when unconstrained.
Matrix project_linf(const Matrix& perturbed, const Matrix& base, std::optional<double> epsilon);

/// Summed target log-probability over the configured instructions (and its gradient).
LogprobWithGradient attack_objective(const ToyVLM& model, const Matrix& visual, const AttackConfig& config,
                                     const ActivationHook* hook = nullptr);

AdversarialImage pgd_attack(const ToyVLM& model, const Matrix& base, const AttackConfig& config);

/// Full-knowledge attack: gradients flow through the steering transform.
AdversarialImage adaptive_attack(const ToyVLM& model, const SteeringPolicy& policy, const Matrix& base,
                                 const AttackConfig& config);

inline constexpr std::uint32_t kAdversarialFileVersion = 1;

void save_adversarial(const std::filesystem::path& path, const AdversarialImage& image);
AdversarialImage load_adversarial(const std::filesystem::path& path);

}  // namespace astra
