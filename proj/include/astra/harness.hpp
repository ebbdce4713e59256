#pragma once

// Evaluation, alpha tuning, run manifests and the end-to-end pipeline
// (train -> attack -> attribute -> steering vector -> calibration -> tune -> evaluate).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "astra/adversary.hpp"
#include "astra/attribution.hpp"
#include "astra/model.hpp"
#include "astra/steering.hpp"
#include "astra/toy_task.hpp"
#include "json.hpp"

namespace astra {

// ---------------------------------------------------------------------------
// Evaluation

struct AsrItem {
  std::string id;
  Matrix visual;
  TokenSequence instruction;
};

struct BenignItem {
  std::string id;
  Matrix visual;
  TokenSequence query;
  TokenId answer = 0;
};

struct ItemRecord {
  std::string prompt_id;
  TokenId first_token = 0;
  std::size_t steered_steps = 0;
  bool hit = false;  // SURE for ASR items, correct answer for benign items
  double target_logprob = 0.0;
};

struct EvaluationReport {
  std::string name;
  std::optional<double> asr;
  std::optional<double> mean_target_logprob;
  std::optional<double> benign_accuracy;
  double refusal_rate = 0.0;
  std::vector<ItemRecord> items;
  nlohmann::json config = nlohmann::json::object();

  nlohmann::json to_json() const;
};

struct EvalOptions {
  std::size_t max_tokens = 2;
  TargetResponse target = TargetResponse::sure();
};

/// Fraction of items whose greedy first generated token is SURE.
EvaluationReport eval_asr(const ToyVLM& model, const SteeringPolicy* policy, const std::vector<AsrItem>& testset,
                          const EvalOptions& options = {});

/// Fraction of items whose greedy first generated token is the answer token.
EvaluationReport eval_benign_utility(const ToyVLM& model, const SteeringPolicy* policy,
                                     const std::vector<BenignItem>& benign_set, const EvalOptions& options = {});

// ---------------------------------------------------------------------------
// Alpha selection

struct TuneCriteria {
  double asr_target = 0.15;
  double max_utility_drop = 0.05;
};

struct TunePoint {
  double alpha = 0.0;
  double asr = 0.0;
  double benign_accuracy = 0.0;
  bool meets_utility = false;
};

struct TuneResult {
  /// True when some grid alpha reaches the ASR target within the utility budget.
  bool feasible = false;
  /// The chosen alpha, or the best utility-preserving fallback when infeasible.
  std::optional<double> alpha;
  double baseline_accuracy = 0.0;
  std::vector<TunePoint> grid;
  std::string note;

  nlohmann::json to_json() const;
};

/// Smallest grid alpha with validation ASR <= target and benign accuracy drop
/// <= budget. Otherwise the utility-preserving alpha with the lowest ASR is
/// reported as a fallback and the result is flagged infeasible.
TuneResult tune_alpha(const ToyVLM& model, const SteeringPolicy& policy_template,
                      const std::vector<AsrItem>& validation_adversarial,
                      const std::vector<BenignItem>& validation_benign, std::vector<double> alpha_grid,
                      const TuneCriteria& criteria = {}, const EvalOptions& options = {});

// ---------------------------------------------------------------------------
// Manifest

class ManifestError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

struct RunManifest {
  std::string model_checkpoint;  // empty: train from scratch
  ModelConfig model;
  TaskConfig task;
  TrainConfig train;

  AttackConfig attack;  // construction / validation / test attack; instructions default to H0..H3
  AttributionParams attribution;
  std::size_t attribution_repetitions = 3;

  SteeringVariant variant = SteeringVariant::adaptive_calibrated;
  std::optional<std::size_t> layer;  // default: ceil(n_layers / 2) + 1, clamped to the last block
  std::vector<double> alpha_grid{0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0};
  std::optional<double> alpha;  // fixed alpha skips tuning
  TuneCriteria tune;
  std::size_t calibration_max_tokens = 2;
  EvalOptions eval;

  std::vector<std::uint64_t> construction_images;
  std::vector<std::uint64_t> validation_images;
  std::vector<std::uint64_t> test_images;
  std::vector<std::uint64_t> calibration_images;
  std::vector<std::uint64_t> benign_validation_images;
  std::vector<std::uint64_t> benign_test_images;

  std::filesystem::path output_dir = "astra_out";

  /// Defaults sized for a laptop run (16 / 8 / 16 adversarial images).
  static RunManifest defaults();
  static RunManifest from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  static RunManifest load(const std::filesystem::path& path);
  /// Everything except output_dir, so reports do not depend on where they are written.
  nlohmann::json to_json() const;

  std::size_t steering_layer() const;
  /// Throws ManifestError: overlapping splits, empty splits, missing files, bad values.
  void validate() const;
};

// ---------------------------------------------------------------------------
// Pipeline stages

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& cause);
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

std::vector<AsrItem> adversarial_items(const std::vector<std::uint64_t>& ids, const std::vector<Matrix>& images,
                                       const std::vector<TokenSequence>& instructions, const std::string& prefix);
std::vector<AsrItem> clean_harmful_items(const ToyTask& task, const std::vector<std::uint64_t>& ids);
std::vector<BenignItem> benign_items(const ToyTask& task, const std::vector<std::uint64_t>& ids);

/// Attacks clean images with ids `ids`; one PGD run per image, seeds derived per id.
std::vector<AdversarialImage> attack_images(const ToyVLM& model, const ToyTask& task,
                                            const std::vector<std::uint64_t>& ids, const AttackConfig& config,
                                            const SteeringPolicy* adaptive_against = nullptr);

/// Loads manifest.model_checkpoint or trains a fresh model.
ToyVLM obtain_model(const RunManifest& manifest, nlohmann::json* train_summary = nullptr);

struct ConstructionResult {
  std::vector<AdversarialImage> adversarial;
  std::vector<AttributionResult> attributions;
  SteeringVector vector;
};

ConstructionResult construct_steering_vector(const ToyVLM& model, const ToyTask& task, const RunManifest& manifest,
                                             const AttackConfig& attack);

CalibrationActivation calibrate(const ToyVLM& model, const ToyTask& task, const RunManifest& manifest);

struct PipelineResult {
  nlohmann::json report;  // everything written to report.json
  bool tune_feasible = true;
  std::optional<SteeringPolicy> policy;
  EvaluationReport undefended_adversarial, defended_adversarial;
  EvaluationReport undefended_clean, defended_clean;
  EvaluationReport undefended_benign, defended_benign;
};

/// Runs every stage and writes artifacts plus report.json under manifest.output_dir.
PipelineResult run_pipeline(const RunManifest& manifest);

/// Plain-text table of a pipeline report.
std::string summary_table(const PipelineResult& result);

std::string format_token(TokenId id);

}  // namespace astra
