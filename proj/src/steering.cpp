#include "astra/steering.hpp"

#include <cmath>

#include "astra/tensor_io.hpp"
#include "astra/toy_task.hpp"

namespace astra {

std::string to_string(SteeringVariant variant) {
  switch (variant) {
    case SteeringVariant::linear: return "linear";
    case SteeringVariant::adaptive: return "adaptive";
    case SteeringVariant::adaptive_calibrated: return "adaptive-calibrated";
  }
  return "unknown";
}

SteeringVariant parse_variant(const std::string& name) {
  if (name == "linear") return SteeringVariant::linear;
  if (name == "adaptive") return SteeringVariant::adaptive;
  if (name == "adaptive-calibrated" || name == "adaptive_calibrated") return SteeringVariant::adaptive_calibrated;
  throw InvalidArgument("unknown steering variant '" + name + "'");
}

// ---------------------------------------------------------------------------
// Transforms

Vector steer_linear(const Vector& h, const Vector& v, double alpha) {
  const double vn = v.norm();
  if (!(vn > 0.0)) throw InvalidArgument("steering vector has zero norm");
  return h - alpha * (v / vn);
}

Vector steer_adaptive(const Vector& h, const Vector& v, double alpha) {
  const double vn = v.norm();
  if (!(vn > 0.0)) throw InvalidArgument("steering vector has zero norm");
  const double hn = h.norm();
  if (hn == 0.0) return h;
  const double cosine = h.dot(v) / (hn * vn);
  if (!(cosine > 0.0)) return h;
  return h - (alpha * cosine) * (v / vn);
}

Vector steer_adaptive_calibrated(const Vector& h, const Vector& h0, const Vector& v, double alpha) {
  const double vn = v.norm();
  if (!(vn > 0.0)) throw InvalidArgument("steering vector has zero norm");
  const Vector centered = h - h0;
  const double cn = centered.norm();
  if (cn == 0.0) return h;
  const double coef = centered.dot(v) / (cn * vn) * h.norm();
  if (!(coef > 0.0)) return h;
  return h - (alpha * coef) * (v / vn);
}

Vector steer_adaptive_pullback(const Vector& h, const Vector& v, double alpha, const Vector& grad_out) {
  const double vn = v.norm();
  const double hn = h.norm();
  if (hn == 0.0) return grad_out;
  const Vector u = v / vn;
  const double proj = h.dot(u);
  if (!(proj / hn > 0.0)) return grad_out;
  // d cos / dh = u/|h| - (h.u) h/|h|^3
  const Vector dcos = u / hn - (proj / (hn * hn * hn)) * h;
  return grad_out - (alpha * grad_out.dot(u)) * dcos;
}

Vector steer_adaptive_calibrated_pullback(const Vector& h, const Vector& h0, const Vector& v, double alpha,
                                          const Vector& grad_out) {
  const double vn = v.norm();
  const Vector centered = h - h0;
  const double cn = centered.norm();
  if (cn == 0.0) return grad_out;
  const Vector u = v / vn;
  const double hn = h.norm();
  const double proj = centered.dot(u);
  const double cosine = proj / cn;
  if (!(cosine * hn > 0.0)) return grad_out;
  // coef = cos(h - h0, v) |h|
  const Vector dcos = u / cn - (proj / (cn * cn * cn)) * centered;
  const Vector dcoef = hn * dcos + (cosine / hn) * h;
  return grad_out - (alpha * grad_out.dot(u)) * dcoef;
}

// ---------------------------------------------------------------------------
// Policy

SteeringPolicy::SteeringPolicy(SteeringVariant variant, double alpha, SteeringVector vector,
                               std::optional<CalibrationActivation> calibration)
    : variant_(variant), alpha_(alpha), vector_(std::move(vector)), calibration_(std::move(calibration)) {
  if (!(alpha_ >= 0.0) || !std::isfinite(alpha_)) throw InvalidArgument("alpha must be finite and nonnegative");
  if (!vector_.values.allFinite()) throw InvalidArgument("steering vector has non-finite entries");
  if (!vector_.usable()) throw InvalidArgument("steering vector has zero norm and is unusable");
  if (variant_ == SteeringVariant::adaptive_calibrated && !calibration_) {
    throw InvalidArgument("adaptive-calibrated steering requires a calibration activation");
  }
  if (calibration_) {
    if (calibration_->layer != vector_.layer) throw InvalidArgument("calibration layer differs from vector layer");
    if (calibration_->values.size() != vector_.values.size()) {
      throw InvalidArgument("calibration dimension differs from vector dimension");
    }
  }
}

SteeringPolicy SteeringPolicy::with_alpha(double alpha) const {
  return SteeringPolicy(variant_, alpha, vector_, calibration_);
}

SteeringPolicy SteeringPolicy::with_variant(SteeringVariant variant) const {
  return SteeringPolicy(variant, alpha_, vector_, calibration_);
}

Vector SteeringPolicy::apply(const Vector& h) const {
  switch (variant_) {
    case SteeringVariant::linear: return steer_linear(h, vector_.values, alpha_);
    case SteeringVariant::adaptive: return steer_adaptive(h, vector_.values, alpha_);
    case SteeringVariant::adaptive_calibrated:
      return steer_adaptive_calibrated(h, calibration_->values, vector_.values, alpha_);
  }
  return h;
}

Vector SteeringPolicy::pullback(const Vector& h, const Vector& grad_out) const {
  switch (variant_) {
    case SteeringVariant::linear: return grad_out;
    case SteeringVariant::adaptive: return steer_adaptive_pullback(h, vector_.values, alpha_, grad_out);
    case SteeringVariant::adaptive_calibrated:
      return steer_adaptive_calibrated_pullback(h, calibration_->values, vector_.values, alpha_, grad_out);
  }
  return grad_out;
}

ActivationHook make_defense_hook(const SteeringPolicy& policy) {
  ActivationHook hook;
  hook.layer = policy.layer();
  hook.rewrite = [policy](const Vector& h) { return policy.apply(h); };
  hook.pullback = [policy](const Vector& h, const Vector& g) { return policy.pullback(h, g); };
  return hook;
}

// ---------------------------------------------------------------------------
// Construction

SteeringVector build_steering_vector(const ActivationReader& reader, std::span<const MaskedImage> pairs,
                                     const TokenSequence& template_tokens, std::size_t layer) {
  if (pairs.empty()) throw InvalidArgument("steering vector needs at least one image");
  Vector sum;
  for (const auto& p : pairs) {
    if (static_cast<Eigen::Index>(p.mask.size()) != p.visual.rows()) {
      throw InvalidArgument("mask length does not match the number of visual tokens");
    }
    const PromptBundle full{p.visual, template_tokens, true};
    const PromptBundle masked{ablate(p.visual, p.mask), template_tokens, true};
    const Vector diff = reader(full, layer) - reader(masked, layer);
    if (sum.size() == 0) {
      sum = diff;
    } else {
      if (diff.size() != sum.size()) throw InvalidArgument("activation dimensions disagree across images");
      sum += diff;
    }
  }
  SteeringVector out;
  out.layer = layer;
  out.values = sum / static_cast<double>(pairs.size());
  out.source_meta = {{"n_images", pairs.size()}};
  return out;
}

SteeringVector build_steering_vector(const ToyVLM& model, std::span<const MaskedImage> pairs, std::size_t layer) {
  const ActivationReader reader = [&model](const PromptBundle& b, std::size_t l) {
    return model.read_activation(b, l).values;
  };
  return build_steering_vector(reader, pairs, ToyTask::template_query(), layer);
}

SteeringVector average_steering_vectors(std::span<const SteeringVector> vectors) {
  if (vectors.empty()) throw InvalidArgument("nothing to average");
  SteeringVector out;
  out.layer = vectors.front().layer;
  out.values = Vector::Zero(vectors.front().values.size());
  out.source_meta = nlohmann::json::array();
  for (const auto& v : vectors) {
    if (v.layer != out.layer) throw InvalidArgument("cannot average steering vectors from different layers");
    if (v.values.size() != out.values.size()) throw InvalidArgument("steering vector dimensions differ");
    out.values += v.values;
    out.source_meta.push_back(v.source_meta);
  }
  out.values /= static_cast<double>(vectors.size());
  return out;
}

CalibrationActivation build_calibration(const ToyVLM& model, std::span<const PromptBundle> prompts, std::size_t layer,
                                        std::size_t max_tokens) {
  if (prompts.empty()) throw InvalidArgument("calibration needs at least one prompt");
  if (layer >= model.config().n_layers) throw InvalidArgument("calibration layer out of range");
  GenerateOptions opts;
  opts.max_tokens = max_tokens;
  opts.record_layer = layer;
  Vector sum = Vector::Zero(model.config().d_model);
  std::size_t count = 0;
  for (const auto& p : prompts) {
    const auto gen = model.generate(p, opts);
    for (const auto& a : gen.activations) sum += a.values;
    count += gen.activations.size();
  }
  if (count == 0) throw InvalidArgument("no prompt generated any token");
  CalibrationActivation out;
  out.layer = layer;
  out.values = sum / static_cast<double>(count);
  out.n_tokens_averaged = count;
  out.source_meta = {{"n_prompts", prompts.size()}, {"max_tokens", max_tokens}};
  return out;
}

// ---------------------------------------------------------------------------
// Files

namespace {

constexpr io::Magic kVectorMagic{'A', 'S', 'T', 'V'};
constexpr io::Magic kCalibrationMagic{'A', 'S', 'T', 'C'};

void write_direction(const std::filesystem::path& path, const io::Magic& magic, std::size_t layer,
                     const Vector& values, const nlohmann::json& meta) {
  io::ByteWriter w;
  w.magic(magic);
  w.u32(kVectorFileVersion);
  w.u32(static_cast<std::uint32_t>(layer));
  w.u32(static_cast<std::uint32_t>(values.size()));
  for (Eigen::Index i = 0; i < values.size(); ++i) w.f64(values(i));
  w.blob(meta.dump());
  w.write_file(path);
}

struct RawDirection {
  std::size_t layer;
  Vector values;
  nlohmann::json meta;
};

RawDirection read_direction(const std::filesystem::path& path, const io::Magic& magic) {
  auto r = io::ByteReader::from_file(path);
  r.expect_magic(magic);
  r.expect_version(kVectorFileVersion);
  RawDirection out;
  out.layer = r.u32();
  const auto dim = r.u32();
  out.values.resize(dim);
  for (std::uint32_t i = 0; i < dim; ++i) out.values(i) = r.f64();
  const std::string blob = r.blob();
  try {
    out.meta = nlohmann::json::parse(blob);
  } catch (const nlohmann::json::exception& e) {
    throw io::FormatError(io::FormatErrorKind::malformed, std::string("metadata is not JSON: ") + e.what());
  }
  if (!r.at_end()) throw io::FormatError(io::FormatErrorKind::malformed, "trailing bytes");
  return out;
}

}  // namespace

void save_vector(const std::filesystem::path& path, const SteeringVector& v) {
  write_direction(path, kVectorMagic, v.layer, v.values, v.source_meta);
}

SteeringVector load_vector(const std::filesystem::path& path) {
  auto raw = read_direction(path, kVectorMagic);
  return {raw.layer, std::move(raw.values), std::move(raw.meta)};
}

void save_calibration(const std::filesystem::path& path, const CalibrationActivation& c) {
  nlohmann::json meta = c.source_meta;
  meta["n_tokens_averaged"] = c.n_tokens_averaged;
  write_direction(path, kCalibrationMagic, c.layer, c.values, meta);
}

CalibrationActivation load_calibration(const std::filesystem::path& path) {
  auto raw = read_direction(path, kCalibrationMagic);
  CalibrationActivation c;
  c.layer = raw.layer;
  c.values = std::move(raw.values);
  c.n_tokens_averaged = raw.meta.value("n_tokens_averaged", std::size_t{0});
  raw.meta.erase("n_tokens_averaged");
  c.source_meta = std::move(raw.meta);
  return c;
}

}  // namespace astra
