#pragma once

// Harmful-direction steering vectors, the calibration activation, and the
// three decode-time steering transforms (linear, adaptive, calibrated adaptive).

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "astra/attribution.hpp"
#include "astra/model.hpp"
#include "json.hpp"

namespace astra {

struct SteeringVector {
  std::size_t layer = 0;
  Vector values;
  nlohmann::json source_meta = nlohmann::json::object();

  /// A zero vector has no direction and cannot back a policy.
  bool usable() const { return values.size() > 0 && values.norm() > 0.0; }
};

struct CalibrationActivation {
  std::size_t layer = 0;
  Vector values;
  std::size_t n_tokens_averaged = 0;
  nlohmann::json source_meta = nlohmann::json::object();
};

enum class SteeringVariant { linear, adaptive, adaptive_calibrated };

std::string to_string(SteeringVariant variant);
SteeringVariant parse_variant(const std::string& name);

/// Steering coefficients reported for full-size VLMs; kept for reference only, since
/// toy activations live on a different scale.
inline constexpr std::array<double, 4> kReferenceAlphaGrid{5.0, 7.0, 10.0, 15.0};

class SteeringPolicy {
 public:
  /// Throws InvalidArgument on a zero-norm vector, negative alpha, a missing
  /// calibration for the calibrated variant, or mismatched layers/dims.
  SteeringPolicy(SteeringVariant variant, double alpha, SteeringVector vector,
                 std::optional<CalibrationActivation> calibration = std::nullopt);

  SteeringVariant variant() const { return variant_; }
  double alpha() const { return alpha_; }
  std::size_t layer() const { return vector_.layer; }
  const SteeringVector& vector() const { return vector_; }
  const std::optional<CalibrationActivation>& calibration() const { return calibration_; }

  SteeringPolicy with_alpha(double alpha) const;
  SteeringPolicy with_variant(SteeringVariant variant) const;

  Vector apply(const Vector& h) const;
  Vector pullback(const Vector& h, const Vector& grad_out) const;

 private:
  SteeringVariant variant_;
  double alpha_;
  SteeringVector vector_;
  std::optional<CalibrationActivation> calibration_;
};

/// h - alpha v/|v|.
Vector steer_linear(const Vector& h, const Vector& v, double alpha);
/// h - alpha max(cos(h, v), 0) v/|v|; returns h untouched when |h| = 0.
Vector steer_adaptive(const Vector& h, const Vector& v, double alpha);
/// h - alpha max(cos(h - h0, v) |h|, 0) v/|v|; untouched when |h - h0| = 0.
Vector steer_adaptive_calibrated(const Vector& h, const Vector& h0, const Vector& v, double alpha);

// Vector-Jacobian products of the transforms above. On the clamped branch
// (including a cosine of exactly zero) the transform is the identity.
Vector steer_adaptive_pullback(const Vector& h, const Vector& v, double alpha, const Vector& grad_out);
Vector steer_adaptive_calibrated_pullback(const Vector& h, const Vector& h0, const Vector& v, double alpha,
                                          const Vector& grad_out);

/// Hook for ToyVLM::generate / QueryOptions. Holds a copy of the policy.
ActivationHook make_defense_hook(const SteeringPolicy& policy);

/// Reads a^l(bundle): the activation at the final input position.
using ActivationReader = std::function<Vector(const PromptBundle&, std::size_t layer)>;

struct MaskedImage {
  Matrix visual;
  AblationVector mask;
};

/// Mean over images of a^l(x, template) - a^l(Mask(x), template).
SteeringVector build_steering_vector(const ActivationReader& reader, std::span<const MaskedImage> pairs,
                                     const TokenSequence& template_tokens, std::size_t layer);
SteeringVector build_steering_vector(const ToyVLM& model, std::span<const MaskedImage> pairs, std::size_t layer);

SteeringVector average_steering_vectors(std::span<const SteeringVector> vectors);

/// Mean generated-token activation at `layer` over greedy, unsteered decodes.
CalibrationActivation build_calibration(const ToyVLM& model, std::span<const PromptBundle> prompts, std::size_t layer,
                                        std::size_t max_tokens);

inline constexpr std::uint32_t kVectorFileVersion = 1;

void save_vector(const std::filesystem::path& path, const SteeringVector& v);
SteeringVector load_vector(const std::filesystem::path& path);
void save_calibration(const std::filesystem::path& path, const CalibrationActivation& c);
CalibrationActivation load_calibration(const std::filesystem::path& path);

}  // namespace astra
