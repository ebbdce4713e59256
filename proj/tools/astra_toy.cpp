// Command-line front end for the toy steering pipeline.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "astra/harness.hpp"
#include "astra/parallel.hpp"

using namespace astra;
using nlohmann::json;

namespace {

struct Common {
  std::string manifest;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string epsilon;
  std::optional<double> alpha;
  std::string variant;
  std::optional<std::size_t> layer;
  std::optional<std::size_t> n_ablations;
  std::optional<std::size_t> top_k;
  std::string model;
  std::string vector;
  std::string calibration;
  std::vector<std::string> inputs;
  std::vector<std::uint64_t> image_ids;
  bool adaptive = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--manifest", c.manifest, "run manifest (JSON)");
  app->add_option("--seed", c.seed, "seed for the stage's stochastic choices");
  app->add_option("--out", c.out, "output directory");
  app->add_option("--epsilon", c.epsilon, "L-inf budget: a real number or 'unconstrained'");
  app->add_option("--alpha", c.alpha, "steering coefficient");
  app->add_option("--variant", c.variant, "linear | adaptive | adaptive-calibrated");
  app->add_option("--layer", c.layer, "steering layer (0-based block index)");
  app->add_option("--n-ablations", c.n_ablations, "random ablations per attribution (default 96)");
  app->add_option("--top-k", c.top_k,
                  "visual tokens masked per image (15 at full scale; the manifest default scales it to the slot count)");
}

RunManifest resolve(const Common& c) {
  RunManifest m = c.manifest.empty() ? RunManifest::defaults() : RunManifest::load(c.manifest);
  if (!c.model.empty()) m.model_checkpoint = c.model;
  if (!c.out.empty()) m.output_dir = c.out;
  if (!c.epsilon.empty()) {
    if (c.epsilon == "unconstrained") {
      m.attack.epsilon.reset();
    } else {
      try {
        m.attack.epsilon = std::stod(c.epsilon);
      } catch (const std::exception&) {
        throw ManifestError("--epsilon must be a number or 'unconstrained'");
      }
    }
  }
  if (c.alpha) m.alpha = *c.alpha;
  if (!c.variant.empty()) m.variant = parse_variant(c.variant);
  if (c.layer) m.layer = *c.layer;
  if (c.n_ablations) m.attribution.n_ablations = *c.n_ablations;
  if (c.top_k) m.attribution.top_k = *c.top_k;
  return m;
}

std::filesystem::path out_dir(const RunManifest& m) {
  std::filesystem::create_directories(m.output_dir);
  return m.output_dir;
}

ToyVLM need_model(const RunManifest& m) {
  if (m.model_checkpoint.empty()) throw ManifestError("--model (or model.checkpoint in the manifest) is required");
  return ToyVLM::load(m.model_checkpoint);
}

std::vector<AdversarialImage> load_inputs(const std::vector<std::string>& paths) {
  if (paths.empty()) throw ManifestError("--inputs needs at least one adversarial image file");
  std::vector<AdversarialImage> v;
  for (const auto& p : paths) v.push_back(load_adversarial(p));
  return v;
}

std::vector<AsrItem> items_from(const std::vector<AdversarialImage>& advs, const std::vector<std::string>& paths,
                                const std::vector<TokenSequence>& instructions) {
  std::vector<AsrItem> items;
  for (std::size_t i = 0; i < advs.size(); ++i) {
    const auto stem = std::filesystem::path(paths[i]).stem().string();
    for (std::size_t t = 0; t < instructions.size(); ++t) {
      items.push_back({stem + "/i" + std::to_string(t), advs[i].perturbed, instructions[t]});
    }
  }
  return items;
}

SteeringPolicy load_policy(const Common& c, const RunManifest& m, double alpha) {
  if (c.vector.empty()) throw ManifestError("--vector is required");
  auto v = load_vector(c.vector);
  std::optional<CalibrationActivation> cal;
  if (!c.calibration.empty()) cal = load_calibration(c.calibration);
  return SteeringPolicy(m.variant, alpha, std::move(v), std::move(cal));
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

int cmd_train(const Common& c) {
  RunManifest m = resolve(c);
  m.model_checkpoint.clear();
  if (c.seed) m.model.seed = *c.seed;
  m.validate();
  json summary;
  const ToyVLM model = obtain_model(m, &summary);
  const auto dir = out_dir(m);
  model.save(dir / "model.astm");
  const ToyTask task(model.config(), m.task);
  const auto ben = eval_benign_utility(model, nullptr, benign_items(task, m.benign_test_images));
  const auto harm = eval_asr(model, nullptr, clean_harmful_items(task, m.test_images));
  summary["benign_accuracy"] = *ben.benign_accuracy;
  summary["refusal_rate"] = harm.refusal_rate;
  summary["clean_asr"] = *harm.asr;
  summary["checksum"] = model.checksum();
  write_json(dir / "train.json", summary);
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_attack(const Common& c) {
  RunManifest m = resolve(c);
  if (c.seed) m.attack.seed = *c.seed;
  const ToyVLM model = need_model(m);
  const ToyTask task(model.config(), m.task);
  const auto ids = c.image_ids.empty() ? m.test_images : c.image_ids;
  std::optional<SteeringPolicy> policy;
  if (c.adaptive) {
    if (!m.alpha) throw ManifestError("--adaptive needs --alpha");
    policy = load_policy(c, m, *m.alpha);
  }
  const auto advs = attack_images(model, task, ids, m.attack, policy ? &*policy : nullptr);
  const auto dir = out_dir(m);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto path = dir / ((c.adaptive ? "adaptive_" : "adv_") + std::to_string(ids[i]) + ".asta");
    save_adversarial(path, advs[i]);
    std::cout << path.string() << "  logp " << advs[i].initial_loss << " -> " << advs[i].final_loss << "\n";
  }
  return 0;
}

int cmd_attribute(const Common& c) {
  RunManifest m = resolve(c);
  if (c.seed) m.attribution.seed = *c.seed;
  const ToyVLM model = need_model(m);
  const auto advs = load_inputs(c.inputs);
  const auto dir = out_dir(m);
  const std::vector<TokenSequence> instr(m.attack.instructions.begin(),
                                         m.attack.instructions.begin() +
                                             static_cast<std::ptrdiff_t>(m.attribution_repetitions));
  for (std::size_t i = 0; i < advs.size(); ++i) {
    AttributionParams p = m.attribution;
    p.seed = mix_seed(m.attribution.seed, i);
    const auto r = attribute_repeated(model, advs[i].perturbed, instr, m.attack.target, p);
    const auto path = dir / (std::filesystem::path(c.inputs[i]).stem().string() + ".attribution.json");
    std::ofstream(path, std::ios::binary) << attribution_to_json(r) << "\n";
    std::cout << path.string() << "  top-k";
    for (auto j : r.topk_indices) std::cout << " " << j;
    std::cout << "\n";
  }
  return 0;
}

int cmd_build_vector(const Common& c, const std::vector<std::string>& attributions) {
  RunManifest m = resolve(c);
  if (c.seed) m.attribution.seed = *c.seed;
  const ToyVLM model = need_model(m);
  const auto advs = load_inputs(c.inputs);
  if (!attributions.empty() && attributions.size() != advs.size()) {
    throw ManifestError("--attributions must match --inputs one to one");
  }
  const std::vector<TokenSequence> instr(m.attack.instructions.begin(),
                                         m.attack.instructions.begin() +
                                             static_cast<std::ptrdiff_t>(m.attribution_repetitions));
  std::vector<MaskedImage> pairs;
  for (std::size_t i = 0; i < advs.size(); ++i) {
    AttributionResult r;
    if (!attributions.empty()) {
      std::ifstream in(attributions[i]);
      std::stringstream ss;
      ss << in.rdbuf();
      r = attribution_from_json(ss.str());
    } else {
      AttributionParams p = m.attribution;
      p.seed = mix_seed(m.attribution.seed, i);
      r = attribute_repeated(model, advs[i].perturbed, instr, m.attack.target, p);
    }
    pairs.push_back({advs[i].perturbed, r.mask});
  }
  auto v = build_steering_vector(model, pairs, m.steering_layer());
  v.source_meta["inputs"] = c.inputs;
  const auto path = out_dir(m) / "steering.astv";
  save_vector(path, v);
  std::cout << path.string() << "  layer " << v.layer << "  norm " << v.values.norm() << "\n";
  return 0;
}

int cmd_calibrate(const Common& c) {
  RunManifest m = resolve(c);
  const ToyVLM model = need_model(m);
  const ToyTask task(model.config(), m.task);
  if (!c.image_ids.empty()) m.calibration_images = c.image_ids;
  const auto cal = calibrate(model, task, m);
  const auto path = out_dir(m) / "calibration.astc";
  save_calibration(path, cal);
  std::cout << path.string() << "  tokens " << cal.n_tokens_averaged << "  norm " << cal.values.norm() << "\n";
  return 0;
}

int cmd_tune(const Common& c) {
  RunManifest m = resolve(c);
  const ToyVLM model = need_model(m);
  const ToyTask task(model.config(), m.task);
  const auto advs = load_inputs(c.inputs);
  const auto tmpl = load_policy(c, m, 0.0);
  const auto res = tune_alpha(model, tmpl, items_from(advs, c.inputs, m.attack.instructions),
                              benign_items(task, m.benign_validation_images), m.alpha_grid, m.tune, m.eval);
  write_json(out_dir(m) / "tune.json", res.to_json());
  std::cout << res.to_json().dump(2) << "\n";
  if (!res.feasible) {
    std::cerr << "tune: " << res.note << "\n";
    return 3;
  }
  return 0;
}

int cmd_defend_eval(const Common& c) {
  RunManifest m = resolve(c);
  if (!m.alpha) throw ManifestError("defend-eval needs --alpha");
  const ToyVLM model = need_model(m);
  const ToyTask task(model.config(), m.task);
  const auto advs = load_inputs(c.inputs);
  const auto policy = load_policy(c, m, *m.alpha);
  const auto items = items_from(advs, c.inputs, m.attack.instructions);
  const auto benign = benign_items(task, m.benign_test_images);
  PipelineResult r;
  r.policy = policy;
  r.undefended_adversarial = eval_asr(model, nullptr, items, m.eval);
  r.defended_adversarial = eval_asr(model, &policy, items, m.eval);
  r.undefended_clean = eval_asr(model, nullptr, clean_harmful_items(task, m.test_images), m.eval);
  r.defended_clean = eval_asr(model, &policy, clean_harmful_items(task, m.test_images), m.eval);
  r.undefended_benign = eval_benign_utility(model, nullptr, benign, m.eval);
  r.defended_benign = eval_benign_utility(model, &policy, benign, m.eval);
  const std::pair<EvaluationReport*, const char*> named[] = {
      {&r.undefended_adversarial, "undefended_adversarial"},
      {&r.defended_adversarial, "defended_adversarial"},
      {&r.undefended_clean, "undefended_clean"},
      {&r.defended_clean, "defended_clean"},
      {&r.undefended_benign, "undefended_benign"},
      {&r.defended_benign, "defended_benign"},
  };
  json rep;
  for (const auto& [e, name] : named) {
    e->name = name;
    rep[name] = e->to_json();
  }
  write_json(out_dir(m) / "defend_eval.json", rep);
  std::cout << summary_table(r);
  return 0;
}

int cmd_pipeline(const Common& c) {
  RunManifest m = resolve(c);
  if (c.seed) {
    m.attack.seed = mix_seed(*c.seed, 1);
    m.attribution.seed = mix_seed(*c.seed, 2);
  }
  const auto res = run_pipeline(m);
  std::cout << summary_table(res);
  std::cout << "report: " << (m.output_dir / "report.json").string() << "\n";
  if (!res.tune_feasible) {
    std::cerr << "tune: no alpha met the ASR target within the utility budget\n";
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"astra_toy: adversarial images, visual-token attribution and activation steering on a toy VLM"};
  app.require_subcommand(1);

  Common c;
  std::vector<std::string> attributions;

  auto* train = app.add_subcommand("train", "train the toy model and save model.astm");
  add_common(train, c);

  auto* attack = app.add_subcommand("attack", "PGD-attack clean images");
  add_common(attack, c);
  attack->add_option("--model", c.model, "model checkpoint");
  attack->add_option("--ids", c.image_ids, "image ids (default: the manifest test split)");
  attack->add_flag("--adaptive", c.adaptive, "attack through the steering defense");
  attack->add_option("--vector", c.vector, "steering vector (.astv), for --adaptive");
  attack->add_option("--calibration", c.calibration, "calibration activation (.astc), for --adaptive");

  auto* attribute = app.add_subcommand("attribute", "Lasso attribution of visual tokens");
  add_common(attribute, c);
  attribute->add_option("--model", c.model, "model checkpoint");
  attribute->add_option("--inputs", c.inputs, "adversarial images (.asta)")->required();

  auto* build = app.add_subcommand("build-vector", "build a steering vector from adversarial images");
  add_common(build, c);
  build->add_option("--model", c.model, "model checkpoint");
  build->add_option("--inputs", c.inputs, "adversarial images (.asta)")->required();
  build->add_option("--attributions", attributions, "attribution JSON per input (otherwise recomputed)");

  auto* calib = app.add_subcommand("calibrate", "mean benign activation at the steering layer");
  add_common(calib, c);
  calib->add_option("--model", c.model, "model checkpoint");
  calib->add_option("--ids", c.image_ids, "calibration image ids (default: the manifest split)");

  auto* tune = app.add_subcommand("tune", "choose alpha on validation adversarial and benign sets");
  add_common(tune, c);
  tune->add_option("--model", c.model, "model checkpoint");
  tune->add_option("--vector", c.vector, "steering vector (.astv)")->required();
  tune->add_option("--calibration", c.calibration, "calibration activation (.astc)");
  tune->add_option("--inputs", c.inputs, "validation adversarial images (.asta)")->required();

  auto* defend = app.add_subcommand("defend-eval", "evaluate undefended vs steered model");
  add_common(defend, c);
  defend->add_option("--model", c.model, "model checkpoint");
  defend->add_option("--vector", c.vector, "steering vector (.astv)")->required();
  defend->add_option("--calibration", c.calibration, "calibration activation (.astc)");
  defend->add_option("--inputs", c.inputs, "test adversarial images (.asta)")->required();

  auto* pipeline = app.add_subcommand("pipeline", "run every stage from a manifest");
  add_common(pipeline, c);
  pipeline->add_option("--model", c.model, "reuse a checkpoint instead of training");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(c);
    if (*attack) return cmd_attack(c);
    if (*attribute) return cmd_attribute(c);
    if (*build) return cmd_build_vector(c, attributions);
    if (*calib) return cmd_calibrate(c);
    if (*tune) return cmd_tune(c);
    if (*defend) return cmd_defend_eval(c);
    if (*pipeline) return cmd_pipeline(c);
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
