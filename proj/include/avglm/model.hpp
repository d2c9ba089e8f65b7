#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "avglm/batch.hpp"
#include "avglm/lstm.hpp"
#include "avglm/tensor.hpp"

namespace avglm {

enum class Mode { train, eval };

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t dim = 0;  // embedding width == hidden width (forced by weight tying)
  std::size_t layers = 2;
  double dropout_rate = 0.0;
  std::size_t sequence_length = 35;
  // When false the context vector is pinned to zero: an identically sized,
  // identically shaped LSTM-LM with no working memory, for ablations.
  bool use_memory = true;

  void validate() const {
    if (vocab_size == 0 || dim == 0 || layers == 0 || sequence_length == 0)
      throw ContractError("model config: all dimensions must be positive");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
      throw ContractError("model config: dropout_rate must lie in [0, 1)");
  }
};

// Exact learned-parameter count: tied embedding/softmax matrix, the LSTM
// stack, the concatenation layer, and the softmax bias.
inline std::size_t param_count(const ModelConfig& cfg) {
  const std::size_t v = cfg.vocab_size, d = cfg.dim;
  std::size_t total = v * d;  // embedding, shared with the softmax projection
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::size_t in = d;  // tying forces in_dim == dim on every layer
    total += 4 * (in * d) + 4 * d * d + 4 * d;
  }
  total += d * 2 * d + d;  // concat layer
  total += v;              // softmax bias
  return total;
}

template <typename S>
struct ModelParams {
  ModelConfig config;
  Tensor<S> embedding;  // vocab × dim; the same storage is the softmax weight
  std::vector<LstmLayerParams<S>> lstm;
  Tensor<S> w_concat;   // 2*dim × dim
  Tensor<S> b_concat;   // dim
  Tensor<S> b_softmax;  // vocab

  static ModelParams init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    p.embedding = Tensor<S>::uniform({cfg.vocab_size, cfg.dim}, rng, S(-0.05), S(0.05), true);
    p.lstm = init_lstm<S>(cfg.dim, cfg.dim, cfg.layers, rng);
    p.w_concat = Tensor<S>::uniform({2 * cfg.dim, cfg.dim}, rng, S(-0.05), S(0.05), true);
    p.b_concat = Tensor<S>::zeros({cfg.dim}, true);
    p.b_softmax = Tensor<S>::zeros({cfg.vocab_size}, true);
    return p;
  }

  // Deterministic order; drives the optimizer, clipping, checkpoints and
  // gradient checks.
  std::vector<NamedTensor<S>> parameters() const {
    std::vector<NamedTensor<S>> out;
    out.push_back({"embedding", embedding});
    for (std::size_t l = 0; l < lstm.size(); ++l)
      lstm[l].append_params("lstm" + std::to_string(l), out);
    out.push_back({"w_concat", w_concat});
    out.push_back({"b_concat", b_concat});
    out.push_back({"b_softmax", b_softmax});
    return out;
  }

  std::size_t count() const {
    std::size_t total = 0;
    for (const auto& nt : parameters()) total += nt.tensor.size();
    return total;
  }

  void zero_grads() const {
    for (auto& nt : parameters()) {
      Tensor<S> t = nt.tensor;
      t.zero_grad();
    }
  }
};

// Running sum of stored last-layer hidden states plus a member count. The
// zero initial state is a counted member, so a fresh buffer has count 1.
template <typename S>
struct MemoryBuffer {
  Tensor<S> running_sum;  // batch × dim
  std::size_t count = 0;
};

template <typename S>
MemoryBuffer<S> reset_memory(std::size_t batch, std::size_t dim) {
  return {Tensor<S>::zeros({batch, dim}), 1};
}

// Mean over every stored state: running_sum / count. At step t the buffer
// holds exactly {h_0, ..., h_(t-1)}, so count == t.
template <typename S>
Tensor<S> context_vector(Graph<S>& g, const MemoryBuffer<S>& mem) {
  if (mem.count == 0) throw ContractError("context_vector: empty memory buffer");
  return scale(g, mem.running_sum, S(1) / static_cast<S>(mem.count));
}

template <typename S>
MemoryBuffer<S> store(Graph<S>& g, const MemoryBuffer<S>& mem, const Tensor<S>& h) {
  if (h.shape() != mem.running_sum.shape())
    throw DimensionError("store: state " + shape_str(h.shape()) + " does not match buffer " +
                         shape_str(mem.running_sum.shape()));
  return {add(g, mem.running_sum, h), mem.count + 1};
}

// Per-sequence dropout masks: one per layer input plus one on the last
// layer's output where it feeds the memory/concat head.
template <typename S>
struct SequenceMasks {
  bool active = false;
  std::vector<Tensor<S>> layer_inputs;
  Tensor<S> head;
};

template <typename S>
SequenceMasks<S> sample_masks(const ModelParams<S>& p, std::size_t batch, Mode mode, Rng* rng) {
  SequenceMasks<S> masks;
  if (mode != Mode::train || p.config.dropout_rate <= 0.0) return masks;
  if (rng == nullptr) throw ContractError("dropout in train mode needs an rng");
  masks.active = true;
  masks.layer_inputs = layer_input_masks(p.lstm, batch, p.config.dropout_rate, *rng);
  masks.head = dropout_mask<S>(*rng, batch, p.config.dim, p.config.dropout_rate);
  return masks;
}

// Row-wise log softmax, detached (diagnostic output only).
template <typename S>
Tensor<S> log_softmax_values(const Tensor<S>& logits) {
  const std::size_t m = logits.rows(), v = logits.cols();
  Tensor<S> out = Tensor<S>::zeros({m, v});
  for (std::size_t i = 0; i < m; ++i) {
    const S* row = logits.data().data() + i * v;
    S* lp = out.data().data() + i * v;
    S mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    S denom = S(0);
    for (std::size_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
    const S lse = mx + std::log(denom);
    for (std::size_t j = 0; j < v; ++j) lp[j] = row[j] - lse;
  }
  return out;
}

template <typename S>
struct StepOutput {
  Tensor<S> logits;     // batch × vocab
  Tensor<S> log_probs;  // batch × vocab, filled when requested
  Tensor<S> h;          // last-layer hidden as fed to head/memory
  Tensor<S> context;
  Tensor<S> combined;  // h'
  std::size_t memory_count_before_store = 0;
};

template <typename S>
struct ForwardStep {
  StepOutput<S> out;
  LstmState<S> state;
  MemoryBuffer<S> memory;
  std::vector<GateActivations<S>> gates;
};

struct StepOptions {
  bool record_gates = false;
  bool want_log_probs = true;
};

// One model timestep: embed, run the stack, average the memory, combine,
// project through the tied softmax, then store h_t. h_t enters memory only
// after the prediction, so it never contributes to its own context.
template <typename S>
ForwardStep<S> forward_step(Graph<S>& g, const ModelParams<S>& p, const MemoryBuffer<S>& mem,
                            const std::vector<int>& token_ids, const LstmState<S>& state,
                            const SequenceMasks<S>* masks = nullptr, StepOptions opt = {}) {
  const std::size_t batch = token_ids.size();
  if (mem.running_sum.rows() != batch)
    throw ContractError("forward_step: memory batch " + std::to_string(mem.running_sum.rows()) +
                        " does not match token batch " + std::to_string(batch));
  if (state.empty() || state[0].h.rows() != batch)
    throw ContractError("forward_step: state batch does not match token batch");

  ForwardStep<S> result;
  result.out.memory_count_before_store = mem.count;

  Tensor<S> x = gather_rows(g, p.embedding, token_ids);
  const bool masked = masks != nullptr && masks->active;
  auto step = stack_step(g, p.lstm, x, state, masked ? &masks->layer_inputs : nullptr,
                         opt.record_gates);
  result.state = std::move(step.state);
  result.gates = std::move(step.gates);

  Tensor<S> h = masked ? mul(g, step.h_last, masks->head) : step.h_last;
  Tensor<S> context = p.config.use_memory
                          ? context_vector(g, mem)
                          : Tensor<S>::zeros({batch, p.config.dim});
  Tensor<S> combined =
      tanh(g, add_row_bias(g, matmul(g, concat_cols(g, h, context), p.w_concat), p.b_concat));
  Tensor<S> logits = add_row_bias(g, matmul_nt(g, combined, p.embedding), p.b_softmax);

  result.out.logits = logits;
  if (opt.want_log_probs) result.out.log_probs = log_softmax_values(logits);
  result.out.h = h;
  result.out.context = context;
  result.out.combined = combined;

  result.memory = p.config.use_memory ? store(g, mem, h)
                                      : MemoryBuffer<S>{mem.running_sum, mem.count + 1};
  return result;
}

struct ForwardOptions {
  Mode mode = Mode::eval;
  bool collect_steps = false;
  bool record_gates = false;
};

template <typename S>
struct SequenceResult {
  Tensor<S> loss;  // scalar: masked mean NLL in nats
  double mean_nll = 0.0;
  std::size_t target_count = 0;
  std::vector<StepOutput<S>> steps;  // when collect_steps
  GateTrace<S> trace;                // when record_gates
};

// Next-token objective over a fixed-length batch: inputs are positions
// 0..T-2, targets positions 1..T-1, padding targets masked out. State and
// memory start from zero for every sequence.
template <typename S>
SequenceResult<S> forward_sequence(Graph<S>& g, const ModelParams<S>& p, const EncodedBatch& batch,
                                   const ForwardOptions& opt = {}, Rng* rng = nullptr) {
  p.config.validate();
  if (batch.length != p.config.sequence_length)
    throw ContractError("forward_sequence: batch length " + std::to_string(batch.length) +
                        " does not match configured sequence length " +
                        std::to_string(p.config.sequence_length));
  if (batch.length < 2)
    throw ContractError("forward_sequence: need at least 2 positions to form a target");
  if (batch.rows == 0) throw ContractError("forward_sequence: empty batch");

  SequenceMasks<S> masks = sample_masks(p, batch.rows, opt.mode, rng);

  LstmState<S> state = zero_state<S>(p.config.layers, batch.rows, p.config.dim);
  MemoryBuffer<S> mem = reset_memory<S>(batch.rows, p.config.dim);

  SequenceResult<S> result;
  result.trace.recording = opt.record_gates;
  result.trace.zero_init = true;
  result.trace.layers = p.config.layers;
  result.trace.batch = batch.rows;
  result.trace.hidden = p.config.dim;

  const std::size_t steps = batch.length - 1;
  std::vector<Tensor<S>> step_logits;
  step_logits.reserve(steps);
  std::vector<int> targets;
  std::vector<std::uint8_t> target_mask;
  targets.reserve(steps * batch.rows);
  target_mask.reserve(steps * batch.rows);

  StepOptions step_opt;
  step_opt.record_gates = opt.record_gates;
  step_opt.want_log_probs = opt.collect_steps;

  std::vector<int> ids(batch.rows);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t r = 0; r < batch.rows; ++r) ids[r] = batch.token(r, t);
    auto fs = forward_step(g, p, mem, ids, state, &masks, step_opt);
    state = std::move(fs.state);
    mem = fs.memory;
    step_logits.push_back(fs.out.logits);
    if (opt.collect_steps) result.steps.push_back(std::move(fs.out));
    if (opt.record_gates) result.trace.steps.push_back(std::move(fs.gates));
    for (std::size_t r = 0; r < batch.rows; ++r) {
      targets.push_back(batch.token(r, t + 1));
      target_mask.push_back(batch.mask[r * batch.length + t + 1]);
    }
  }

  Tensor<S> all_logits = concat_rows(g, step_logits);
  auto ce = softmax_cross_entropy(g, all_logits, targets, target_mask);
  result.loss = ce.loss;
  result.mean_nll = static_cast<double>(ce.loss.data()[0]);
  result.target_count = 0;
  for (auto m : target_mask) result.target_count += m ? 1 : 0;
  return result;
}

}  // namespace avglm
