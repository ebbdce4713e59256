#include "astra/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <random>

#include "astra/tensor_io.hpp"

namespace astra {

void ModelConfig::validate() const {
  if (vocab_size < tok::kFirstFreeToken) {
    throw ConfigError("vocab_size must be at least " + std::to_string(tok::kFirstFreeToken) +
                      " to hold the reserved tokens");
  }
  if (d_model == 0) throw ConfigError("d_model must be positive");
  if (n_heads == 0) throw ConfigError("n_heads must be positive");
  if (d_model % n_heads != 0) throw ConfigError("d_model not divisible by n_heads");
  if (n_layers == 0) throw ConfigError("n_layers must be positive");
  if (n_visual_slots == 0) throw ConfigError("n_visual_slots must be at least 1");
  if (d_visual != d_model) throw ConfigError("d_visual must equal d_model");
  if (max_seq_len <= n_visual_slots) throw ConfigError("max_seq_len must exceed n_visual_slots");
}

void PromptBundle::validate(const ModelConfig& config) const {
  if (visual_embeddings.rows() != static_cast<Eigen::Index>(config.n_visual_slots) ||
      visual_embeddings.cols() != static_cast<Eigen::Index>(config.d_visual)) {
    throw InvalidArgument("visual_embeddings must be " + std::to_string(config.n_visual_slots) + "x" +
                          std::to_string(config.d_visual));
  }
  if (textual_tokens.empty()) throw InvalidArgument("textual_tokens must be nonempty");
  for (auto t : textual_tokens) {
    if (t >= config.vocab_size) throw InvalidArgument("token id " + std::to_string(t) + " out of vocabulary");
  }
  if (!visual_embeddings.allFinite()) throw InvalidArgument("visual_embeddings contain non-finite values");
}

std::size_t GenerationResult::rewritten_steps() const {
  return static_cast<std::size_t>(std::count(rewritten.begin(), rewritten.end(), true));
}

std::size_t Weights::TensorView::size() const {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

Weights Weights::zeros(const ModelConfig& c) {
  const Eigen::Index d = c.d_model, f = c.d_ff(), v = c.vocab_size;
  Weights w;
  w.token_embedding = Matrix::Zero(v, d);
  w.position_embedding = Matrix::Zero(c.max_seq_len, d);
  w.blocks.resize(c.n_layers);
  for (auto& b : w.blocks) {
    b.ln1_gain = Vector::Zero(d);
    b.ln1_bias = Vector::Zero(d);
    b.wq = Matrix::Zero(d, d);
    b.wk = Matrix::Zero(d, d);
    b.wv = Matrix::Zero(d, d);
    b.wo = Matrix::Zero(d, d);
    b.ln2_gain = Vector::Zero(d);
    b.ln2_bias = Vector::Zero(d);
    b.w1 = Matrix::Zero(d, f);
    b.b1 = Vector::Zero(f);
    b.w2 = Matrix::Zero(f, d);
    b.b2 = Vector::Zero(d);
  }
  w.lnf_gain = Vector::Zero(d);
  w.lnf_bias = Vector::Zero(d);
  w.unembedding = Matrix::Zero(d, v);
  w.unembedding_bias = Vector::Zero(v);
  return w;
}

namespace {

Weights::TensorView view(Matrix& m) {
  return {m.data(), {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())}};
}
Weights::TensorView view(Vector& v) { return {v.data(), {static_cast<std::uint32_t>(v.size())}}; }

}  // namespace

std::vector<Weights::TensorView> Weights::tensors() {
  std::vector<TensorView> out;
  out.push_back(view(token_embedding));
  out.push_back(view(position_embedding));
  for (auto& b : blocks) {
    for (auto* v : {&b.ln1_gain, &b.ln1_bias}) out.push_back(view(*v));
    for (auto* m : {&b.wq, &b.wk, &b.wv, &b.wo}) out.push_back(view(*m));
    for (auto* v : {&b.ln2_gain, &b.ln2_bias}) out.push_back(view(*v));
    out.push_back(view(b.w1));
    out.push_back(view(b.b1));
    out.push_back(view(b.w2));
    out.push_back(view(b.b2));
  }
  out.push_back(view(lnf_gain));
  out.push_back(view(lnf_bias));
  out.push_back(view(unembedding));
  out.push_back(view(unembedding_bias));
  return out;
}

std::vector<std::span<const double>> Weights::tensors() const {
  std::vector<std::span<const double>> out;
  for (const auto& t : const_cast<Weights*>(this)->tensors()) out.emplace_back(t.data, t.size());
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

struct LnCache {
  Matrix xhat;
  Vector rstd;
};

Matrix layer_norm(const Matrix& x, const Vector& gain, const Vector& bias, LnCache& cache) {
  const auto rows = x.rows(), d = x.cols();
  cache.xhat.resize(rows, d);
  cache.rstd.resize(rows);
  Matrix out(rows, d);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    cache.rstd(r) = rstd;
    cache.xhat.row(r) = (x.row(r).array() - mu) * rstd;
    out.row(r) = cache.xhat.row(r).array() * gain.transpose().array() + bias.transpose().array();
  }
  return out;
}

Matrix layer_norm_backward(const Matrix& dout, const LnCache& cache, const Vector& gain, Vector* dgain,
                           Vector* dbias) {
  const auto rows = dout.rows();
  Matrix dx(rows, dout.cols());
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Eigen::RowVectorXd dxhat = dout.row(r).array() * gain.transpose().array();
    const double m1 = dxhat.mean();
    const double m2 = (dxhat.array() * cache.xhat.row(r).array()).mean();
    dx.row(r) = cache.rstd(r) * (dxhat.array() - m1 - cache.xhat.row(r).array() * m2);
  }
  if (dgain) *dgain += (dout.array() * cache.xhat.array()).colwise().sum().transpose().matrix();
  if (dbias) *dbias += dout.colwise().sum().transpose();
  return dx;
}

double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u))); }

double gelu_grad(double u) {
  const double t = std::tanh(kGeluC * (u + 0.044715 * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
}

struct BlockCache {
  LnCache ln1;
  Matrix a1, q, k, v;
  std::vector<Matrix> probs;  // per head, T x T
  Matrix attn;                 // concatenated head outputs
  Matrix x1;
  LnCache ln2;
  Matrix a2, u, z;
  Matrix y_pre;  // block output before the hook
  Matrix y;      // block output after the hook
};

struct Trace {
  std::vector<BlockCache> blocks;
  std::vector<std::size_t> logit_positions;
  LnCache lnf;
  Matrix final_normed;  // rows = logit positions
  Matrix logprobs;      // rows = logit positions, log-softmax
};

struct ForwardPlan {
  std::size_t hook_start = std::numeric_limits<std::size_t>::max();
  std::size_t stop_after_layer = std::numeric_limits<std::size_t>::max();
};

class Runner {
 public:
  Runner(const ModelConfig& config, const Weights& weights) : c_(config), w_(weights) {}

  void forward(const Matrix& visual, std::span<const TokenId> text, std::span<const std::size_t> logit_positions,
               const QueryOptions& opts, const ForwardPlan& plan, Trace& tr) const {
    const std::size_t m = c_.n_visual_slots;
    const std::size_t T = m + text.size();
    const Eigen::Index d = c_.d_model;
    Matrix x(T, d);
    x.topRows(m) = visual;
    for (std::size_t i = 0; i < text.size(); ++i) x.row(m + i) = w_.token_embedding.row(text[i]);
    x += w_.position_embedding.topRows(T);

    build_mask(T, opts);
    const std::size_t n_blocks = plan.stop_after_layer < c_.n_layers ? plan.stop_after_layer + 1 : c_.n_layers;
    tr.blocks.resize(n_blocks);
    const std::size_t H = c_.n_heads, dh = c_.d_model / c_.n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    for (std::size_t b = 0; b < n_blocks; ++b) {
      const auto& bw = w_.blocks[b];
      auto& bc = tr.blocks[b];
      bc.a1 = layer_norm(x, bw.ln1_gain, bw.ln1_bias, bc.ln1);
      bc.q.noalias() = bc.a1 * bw.wq;
      bc.k.noalias() = bc.a1 * bw.wk;
      bc.v.noalias() = bc.a1 * bw.wv;
      bc.probs.resize(H);
      bc.attn.resize(T, d);
      for (std::size_t h = 0; h < H; ++h) {
        const auto off = static_cast<Eigen::Index>(h * dh);
        const auto w = static_cast<Eigen::Index>(dh);
        Matrix s = (bc.q.middleCols(off, w) * bc.k.middleCols(off, w).transpose()) * scale;
        masked_softmax(s);
        bc.attn.middleCols(off, w).noalias() = s * bc.v.middleCols(off, w);
        bc.probs[h] = std::move(s);
      }
      bc.x1 = x;
      bc.x1.noalias() += bc.attn * bw.wo;
      bc.a2 = layer_norm(bc.x1, bw.ln2_gain, bw.ln2_bias, bc.ln2);
      bc.u = bc.a2 * bw.w1;
      bc.u.rowwise() += bw.b1.transpose();
      bc.z = bc.u.unaryExpr([](double t) { return gelu(t); });
      bc.y_pre = bc.x1;
      bc.y_pre.noalias() += bc.z * bw.w2;
      bc.y_pre.rowwise() += bw.b2.transpose();
      bc.y = bc.y_pre;
      if (opts.hook && opts.hook->layer == b) {
        for (std::size_t p = plan.hook_start; p < T; ++p) {
          const Vector h = bc.y_pre.row(static_cast<Eigen::Index>(p)).transpose();
          bc.y.row(static_cast<Eigen::Index>(p)) = opts.hook->rewrite(h).transpose();
        }
      }
      x = bc.y;
    }

    tr.logit_positions.assign(logit_positions.begin(), logit_positions.end());
    if (logit_positions.empty()) return;
    Matrix sel(logit_positions.size(), d);
    for (std::size_t i = 0; i < logit_positions.size(); ++i) {
      sel.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(logit_positions[i]));
    }
    tr.final_normed = layer_norm(sel, w_.lnf_gain, w_.lnf_bias, tr.lnf);
    Matrix logits = tr.final_normed * w_.unembedding;
    logits.rowwise() += w_.unembedding_bias.transpose();
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      const double mx = logits.row(r).maxCoeff();
      const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
      logits.row(r).array() -= lse;
    }
    tr.logprobs = std::move(logits);
  }

  /// `dlogits` holds d(objective)/d(logits) for each logit position.
  void backward(const Matrix& visual, std::span<const TokenId> text, const Trace& tr, const Matrix& dlogits,
                const QueryOptions& opts, const ForwardPlan& plan, Weights* grads, Matrix* dvisual) const {
    const std::size_t m = c_.n_visual_slots;
    const std::size_t T = m + text.size();
    const Eigen::Index d = c_.d_model;
    const std::size_t H = c_.n_heads, dh = c_.d_model / c_.n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    (void)visual;

    if (grads) {
      grads->unembedding.noalias() += tr.final_normed.transpose() * dlogits;
      grads->unembedding_bias += dlogits.colwise().sum().transpose();
    }
    const Matrix dnormed = dlogits * w_.unembedding.transpose();
    const Matrix dsel = layer_norm_backward(dnormed, tr.lnf, w_.lnf_gain, grads ? &grads->lnf_gain : nullptr,
                                            grads ? &grads->lnf_bias : nullptr);
    Matrix dx = Matrix::Zero(T, d);
    for (std::size_t i = 0; i < tr.logit_positions.size(); ++i) {
      dx.row(static_cast<Eigen::Index>(tr.logit_positions[i])) += dsel.row(static_cast<Eigen::Index>(i));
    }

    for (std::size_t bi = c_.n_layers; bi-- > 0;) {
      const auto& bw = w_.blocks[bi];
      const auto& bc = tr.blocks[bi];
      BlockWeights* bg = grads ? &grads->blocks[bi] : nullptr;

      Matrix dy = std::move(dx);
      if (opts.hook && opts.hook->layer == bi) {
        if (!opts.hook->pullback) throw InvalidArgument("hook has no pullback; cannot differentiate through it");
        for (std::size_t p = plan.hook_start; p < T; ++p) {
          const auto r = static_cast<Eigen::Index>(p);
          const Vector h = bc.y_pre.row(r).transpose();
          const Vector g = dy.row(r).transpose();
          dy.row(r) = opts.hook->pullback(h, g).transpose();
        }
      }
      // y_pre = x1 + gelu(a2 W1 + b1) W2 + b2
      Matrix dx1 = dy;
      Matrix dz = dy * bw.w2.transpose();
      if (bg) {
        bg->w2.noalias() += bc.z.transpose() * dy;
        bg->b2 += dy.colwise().sum().transpose();
      }
      const Matrix du = dz.array() * bc.u.unaryExpr([](double t) { return gelu_grad(t); }).array();
      if (bg) {
        bg->w1.noalias() += bc.a2.transpose() * du;
        bg->b1 += du.colwise().sum().transpose();
      }
      const Matrix da2 = du * bw.w1.transpose();
      dx1 += layer_norm_backward(da2, bc.ln2, bw.ln2_gain, bg ? &bg->ln2_gain : nullptr,
                                 bg ? &bg->ln2_bias : nullptr);

      // x1 = x + attn Wo
      const Matrix dattn = dx1 * bw.wo.transpose();
      if (bg) bg->wo.noalias() += bc.attn.transpose() * dx1;
      Matrix dq(T, d), dk(T, d), dv(T, d);
      for (std::size_t h = 0; h < H; ++h) {
        const auto off = static_cast<Eigen::Index>(h * dh);
        const auto w = static_cast<Eigen::Index>(dh);
        const Matrix& P = bc.probs[h];
        const auto dout = dattn.middleCols(off, w);
        const Matrix dP = dout * bc.v.middleCols(off, w).transpose();
        dv.middleCols(off, w).noalias() = P.transpose() * dout;
        Matrix dS = P.array() * dP.array();
        const Eigen::VectorXd rowdot = dS.rowwise().sum();
        dS -= (P.array().colwise() * rowdot.array()).matrix();
        dq.middleCols(off, w).noalias() = (dS * bc.k.middleCols(off, w)) * scale;
        dk.middleCols(off, w).noalias() = (dS.transpose() * bc.q.middleCols(off, w)) * scale;
      }
      if (bg) {
        bg->wq.noalias() += bc.a1.transpose() * dq;
        bg->wk.noalias() += bc.a1.transpose() * dk;
        bg->wv.noalias() += bc.a1.transpose() * dv;
      }
      Matrix da1 = dq * bw.wq.transpose();
      da1.noalias() += dk * bw.wk.transpose();
      da1.noalias() += dv * bw.wv.transpose();
      dx = std::move(dx1);
      dx += layer_norm_backward(da1, bc.ln1, bw.ln1_gain, bg ? &bg->ln1_gain : nullptr,
                                bg ? &bg->ln1_bias : nullptr);
    }

    if (dvisual) *dvisual = dx.topRows(m);
    if (grads) {
      for (std::size_t i = 0; i < text.size(); ++i) {
        grads->token_embedding.row(text[i]) += dx.row(static_cast<Eigen::Index>(m + i));
      }
      grads->position_embedding.topRows(T) += dx;
    }
  }

 private:
  void build_mask(std::size_t T, const QueryOptions& opts) const {
    allowed_.assign(T * T, 0);
    std::vector<char> isolated(T, 0);
    for (auto s : opts.isolated_slots) {
      if (s >= c_.n_visual_slots) throw InvalidArgument("isolated slot out of range");
      isolated[s] = 1;
    }
    for (std::size_t i = 0; i < T; ++i) {
      for (std::size_t j = 0; j <= i; ++j) allowed_[i * T + j] = (j == i || !isolated[j]) ? 1 : 0;
    }
    T_ = T;
  }

  void masked_softmax(Matrix& s) const {
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < s.cols(); ++j) {
        if (allowed_[i * T_ + j]) mx = std::max(mx, s(i, j));
      }
      double sum = 0.0;
      for (Eigen::Index j = 0; j < s.cols(); ++j) {
        if (allowed_[i * T_ + j]) {
          s(i, j) = std::exp(s(i, j) - mx);
          sum += s(i, j);
        } else {
          s(i, j) = 0.0;
        }
      }
      s.row(i) /= sum;
    }
  }

  const ModelConfig& c_;
  const Weights& w_;
  mutable std::vector<char> allowed_;
  mutable std::size_t T_ = 0;
};

TokenSequence concat(std::span<const TokenId> a, std::span<const TokenId> b) {
  TokenSequence out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

void check_length(const ModelConfig& c, std::size_t text_len) {
  if (c.n_visual_slots + text_len > c.max_seq_len) {
    throw InvalidArgument("sequence too long: " + std::to_string(c.n_visual_slots + text_len) + " > max_seq_len " +
                          std::to_string(c.max_seq_len));
  }
}

void check_response(const ModelConfig& c, const TargetResponse& r) {
  if (r.tokens.empty()) throw InvalidArgument("response must be nonempty");
  for (auto t : r.tokens) {
    if (t >= c.vocab_size) throw InvalidArgument("response token out of vocabulary");
  }
}

struct TeacherForced {
  TokenSequence text;  // prompt text + response[0..R-2]
  std::vector<std::size_t> positions;
  ForwardPlan plan;
};

TeacherForced teacher_forced(const ModelConfig& c, const PromptBundle& bundle, const TargetResponse& r) {
  bundle.validate(c);
  check_response(c, r);
  TeacherForced tf;
  tf.text = bundle.textual_tokens;
  tf.text.insert(tf.text.end(), r.tokens.begin(), r.tokens.end() - 1);
  check_length(c, tf.text.size());
  const std::size_t P = c.n_visual_slots + bundle.textual_tokens.size();
  for (std::size_t i = 0; i < r.tokens.size(); ++i) tf.positions.push_back(P - 1 + i);
  tf.plan.hook_start = P - 1;
  return tf;
}

}  // namespace

// ---------------------------------------------------------------------------

ToyVLM::ToyVLM(ModelConfig config) : config_(config) {
  config_.validate();
  weights_ = Weights::zeros(config_);
}

ToyVLM::ToyVLM(ModelConfig config, Weights weights) : config_(config), weights_(std::move(weights)) {
  config_.validate();
}

std::uint64_t ToyVLM::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (auto t : weights_.tensors()) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
    for (std::size_t i = 0; i < t.size_bytes(); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

Vector ToyVLM::next_token_logprobs(const PromptBundle& bundle, std::span<const TokenId> continuation,
                                   const QueryOptions& options) const {
  bundle.validate(config_);
  const TokenSequence text = concat(bundle.textual_tokens, continuation);
  check_length(config_, text.size());
  const std::size_t P = config_.n_visual_slots + bundle.textual_tokens.size();
  const std::size_t last = config_.n_visual_slots + text.size() - 1;
  ForwardPlan plan;
  plan.hook_start = P - 1;
  Trace tr;
  const std::array<std::size_t, 1> pos{last};
  Runner(config_, weights_).forward(bundle.visual_embeddings, text, pos, options, plan, tr);
  return tr.logprobs.row(0).transpose();
}

double ToyVLM::response_logprob(const PromptBundle& bundle, const TargetResponse& response,
                                const QueryOptions& options) const {
  const auto tf = teacher_forced(config_, bundle, response);
  Trace tr;
  Runner(config_, weights_).forward(bundle.visual_embeddings, tf.text, tf.positions, options, tf.plan, tr);
  double total = 0.0;
  for (std::size_t i = 0; i < response.tokens.size(); ++i) {
    total += tr.logprobs(static_cast<Eigen::Index>(i), response.tokens[i]);
  }
  return total;
}

LogprobWithGradient ToyVLM::logprob_and_visual_grad(const PromptBundle& bundle, const TargetResponse& response,
                                                    const QueryOptions& options) const {
  const auto tf = teacher_forced(config_, bundle, response);
  Runner runner(config_, weights_);
  Trace tr;
  runner.forward(bundle.visual_embeddings, tf.text, tf.positions, options, tf.plan, tr);
  LogprobWithGradient out;
  Matrix dlogits = -tr.logprobs.array().exp().matrix();
  for (std::size_t i = 0; i < response.tokens.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out.logprob += tr.logprobs(r, response.tokens[i]);
    dlogits(r, response.tokens[i]) += 1.0;
  }
  runner.backward(bundle.visual_embeddings, tf.text, tr, dlogits, options, tf.plan, nullptr, &out.visual_grad);
  return out;
}

VisualGradient ToyVLM::grad_wrt_visual(const PromptBundle& bundle, const TargetResponse& response,
                                       const QueryOptions& options) const {
  return logprob_and_visual_grad(bundle, response, options).visual_grad;
}

double ToyVLM::accumulate_weight_gradient(const PromptBundle& bundle, const TargetResponse& response,
                                          Weights& grads) const {
  const auto tf = teacher_forced(config_, bundle, response);
  Runner runner(config_, weights_);
  Trace tr;
  const QueryOptions none;
  runner.forward(bundle.visual_embeddings, tf.text, tf.positions, none, tf.plan, tr);
  double total = 0.0;
  Matrix dlogits = -tr.logprobs.array().exp().matrix();
  for (std::size_t i = 0; i < response.tokens.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    total += tr.logprobs(r, response.tokens[i]);
    dlogits(r, response.tokens[i]) += 1.0;
  }
  runner.backward(bundle.visual_embeddings, tf.text, tr, dlogits, none, tf.plan, &grads, nullptr);
  return total;
}

ActivationVector ToyVLM::read_activation(const PromptBundle& bundle, std::size_t layer) const {
  if (layer >= config_.n_layers) {
    throw InvalidArgument("layer " + std::to_string(layer) + " out of range for " +
                          std::to_string(config_.n_layers) + " layers");
  }
  bundle.validate(config_);
  check_length(config_, bundle.textual_tokens.size());
  ForwardPlan plan;
  plan.stop_after_layer = layer;
  Trace tr;
  Runner(config_, weights_).forward(bundle.visual_embeddings, bundle.textual_tokens, {}, {}, plan, tr);
  const auto last = static_cast<Eigen::Index>(config_.n_visual_slots + bundle.textual_tokens.size() - 1);
  return {layer, tr.blocks[layer].y.row(last).transpose(), PositionRole::last_input_token, 0};
}

std::vector<Matrix> ToyVLM::residual_stream(const PromptBundle& bundle, std::span<const TokenId> continuation,
                                            const QueryOptions& options) const {
  bundle.validate(config_);
  const TokenSequence text = concat(bundle.textual_tokens, continuation);
  check_length(config_, text.size());
  ForwardPlan plan;
  plan.hook_start = config_.n_visual_slots + bundle.textual_tokens.size() - 1;
  Trace tr;
  Runner(config_, weights_).forward(bundle.visual_embeddings, text, {}, options, plan, tr);
  std::vector<Matrix> out;
  out.reserve(tr.blocks.size());
  for (auto& b : tr.blocks) out.push_back(std::move(b.y));
  return out;
}

namespace {

TokenId pick_token(const Vector& logprobs, const DecodeMode& mode, std::mt19937_64* rng) {
  if (std::holds_alternative<GreedyDecode>(mode)) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < logprobs.size(); ++i) {
      if (logprobs(i) > logprobs(best)) best = i;
    }
    return static_cast<TokenId>(best);
  }
  const auto& s = std::get<SampledDecode>(mode);
  if (!(s.temperature > 0.0)) throw InvalidArgument("temperature must be positive");
  if (!(s.top_p > 0.0 && s.top_p <= 1.0)) throw InvalidArgument("top_p must be in (0, 1]");
  Vector scaled = logprobs / s.temperature;
  scaled.array() -= scaled.maxCoeff();
  Vector probs = scaled.array().exp();
  probs /= probs.sum();
  std::vector<std::size_t> order(static_cast<std::size_t>(probs.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return probs(a) > probs(b); });
  double cum = 0.0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    cum += probs(order[keep++]);
    if (cum >= s.top_p) break;
  }
  double u = std::uniform_real_distribution<double>(0.0, cum)(*rng);
  for (std::size_t i = 0; i < keep; ++i) {
    u -= probs(order[i]);
    if (u <= 0.0) return static_cast<TokenId>(order[i]);
  }
  return static_cast<TokenId>(order[keep - 1]);
}

}  // namespace

GenerationResult ToyVLM::generate(const PromptBundle& bundle, const GenerateOptions& options) const {
  if (options.max_tokens < 1) throw InvalidArgument("max_tokens must be at least 1");
  bundle.validate(config_);
  check_length(config_, bundle.textual_tokens.size());
  const std::size_t record = options.record_layer.value_or(options.hook ? options.hook->layer : config_.n_layers - 1);
  if (record >= config_.n_layers) throw InvalidArgument("record_layer out of range");
  if (options.hook && options.hook->layer >= config_.n_layers) throw InvalidArgument("hook layer out of range");

  std::optional<std::mt19937_64> rng;
  if (const auto* s = std::get_if<SampledDecode>(&options.decode)) rng.emplace(s->seed);

  const std::size_t m = config_.n_visual_slots;
  const std::size_t P = m + bundle.textual_tokens.size();
  QueryOptions q;
  q.hook = options.hook;
  ForwardPlan plan;
  plan.hook_start = P - 1;
  Runner runner(config_, weights_);

  GenerationResult out;
  TokenSequence text = bundle.textual_tokens;
  for (std::size_t step = 0; step < options.max_tokens; ++step) {
    if (m + text.size() > config_.max_seq_len) break;
    const std::size_t emit = m + text.size() - 1;
    const std::array<std::size_t, 1> pos{emit};
    Trace tr;
    runner.forward(bundle.visual_embeddings, text, pos, q, plan, tr);
    const auto& bc = tr.blocks[record];
    const auto r = static_cast<Eigen::Index>(emit);
    out.activations.push_back({record, bc.y_pre.row(r).transpose(), PositionRole::generated_step, step});
    bool changed = false;
    if (options.hook) {
      const auto& hb = tr.blocks[options.hook->layer];
      changed = hb.y.row(r) != hb.y_pre.row(r);
    }
    out.rewritten.push_back(changed);
    const TokenId next = pick_token(tr.logprobs.row(0).transpose(), options.decode, rng ? &*rng : nullptr);
    out.tokens.push_back(next);
    text.push_back(next);
    if (next == tok::EOS) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Initialization and checkpoints

ToyVLM init_model(const ModelConfig& config) {
  ToyVLM model(config);
  auto& w = model.mutable_weights();
  std::mt19937_64 rng(config.seed);
  const double d = config.d_model;
  const double depth = std::sqrt(2.0 * config.n_layers);
  auto fill = [&](auto& t, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = dist(rng);
  };
  fill(w.token_embedding, 1.0);
  fill(w.position_embedding, 0.2);
  for (auto& b : w.blocks) {
    b.ln1_gain.setOnes();
    fill(b.wq, 1.0 / std::sqrt(d));
    fill(b.wk, 1.0 / std::sqrt(d));
    fill(b.wv, 1.0 / std::sqrt(d));
    fill(b.wo, 1.0 / std::sqrt(d) / depth);
    b.ln2_gain.setOnes();
    fill(b.w1, 1.0 / std::sqrt(d));
    fill(b.w2, 1.0 / std::sqrt(static_cast<double>(config.d_ff())) / depth);
  }
  w.lnf_gain.setOnes();
  fill(w.unembedding, 1.0 / std::sqrt(d));
  return model;
}

namespace {
constexpr io::Magic kModelMagic{'A', 'S', 'T', 'M'};
}

void ToyVLM::save(const std::filesystem::path& path) const {
  io::ByteWriter w;
  w.magic(kModelMagic);
  w.u32(kCheckpointVersion);
  w.u32(config_.vocab_size);
  w.u32(config_.d_model);
  w.u32(config_.n_layers);
  w.u32(config_.n_heads);
  w.u32(config_.n_visual_slots);
  w.u32(config_.d_visual);
  w.u32(config_.max_seq_len);
  w.u64(config_.seed);
  for (auto& t : const_cast<Weights&>(weights_).tensors()) {
    w.tensor(t.dims, std::span<const double>(t.data, t.size()));
  }
  w.write_file(path);
}

ToyVLM ToyVLM::load(const std::filesystem::path& path) {
  auto r = io::ByteReader::from_file(path);
  r.expect_magic(kModelMagic);
  r.expect_version(kCheckpointVersion);
  ModelConfig c;
  c.vocab_size = r.u32();
  c.d_model = r.u32();
  c.n_layers = r.u32();
  c.n_heads = r.u32();
  c.n_visual_slots = r.u32();
  c.d_visual = r.u32();
  c.max_seq_len = r.u32();
  c.seed = r.u64();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw io::FormatError(io::FormatErrorKind::malformed, std::string("checkpoint config: ") + e.what());
  }
  ToyVLM model(c);
  for (auto& t : model.mutable_weights().tensors()) {
    const auto values = r.tensor(t.dims);
    std::copy(values.begin(), values.end(), t.data);
  }
  if (!r.at_end()) throw io::FormatError(io::FormatErrorKind::malformed, "trailing bytes after last tensor");
  return model;
}

}  // namespace astra
