#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "avglm/tensor.hpp"

namespace avglm {

template <typename S>
struct NamedTensor {
  std::string name;
  Tensor<S> tensor;
};

// One gate: input projection, recurrent projection, bias.
template <typename S>
struct GateParams {
  Tensor<S> w_x;   // in × hidden
  Tensor<S> w_h;   // hidden × hidden
  Tensor<S> bias;  // hidden
};

template <typename S>
struct LstmLayerParams {
  GateParams<S> candidate;
  GateParams<S> input_gate;
  GateParams<S> forget_gate;
  GateParams<S> output_gate;

  std::size_t in_dim() const { return candidate.w_x.rows(); }
  std::size_t hidden() const { return candidate.w_x.cols(); }

  void append_params(const std::string& prefix, std::vector<NamedTensor<S>>& out) const {
    auto one = [&](const char* name, const GateParams<S>& gp) {
      out.push_back({prefix + "." + name + ".w_x", gp.w_x});
      out.push_back({prefix + "." + name + ".w_h", gp.w_h});
      out.push_back({prefix + "." + name + ".bias", gp.bias});
    };
    one("candidate", candidate);
    one("input_gate", input_gate);
    one("forget_gate", forget_gate);
    one("output_gate", output_gate);
  }
};

template <typename S>
struct LayerState {
  Tensor<S> c;  // batch × hidden, unbounded
  Tensor<S> h;  // batch × hidden, in (-1, 1)
};

template <typename S>
using LstmState = std::vector<LayerState<S>>;

template <typename S>
LstmState<S> zero_state(std::size_t layers, std::size_t batch, std::size_t hidden) {
  LstmState<S> st(layers);
  for (auto& s : st) {
    s.c = Tensor<S>::zeros({batch, hidden});
    s.h = Tensor<S>::zeros({batch, hidden});
  }
  return st;
}

template <typename S>
bool state_is_zero(const LstmState<S>& st) {
  for (const auto& s : st) {
    for (S v : s.c.data())
      if (v != S(0)) return false;
    for (S v : s.h.data())
      if (v != S(0)) return false;
  }
  return true;
}

// Gate activations of a single layer step, kept as live tensor handles so
// the analyzer can read them after the graph is gone.
template <typename S>
struct GateActivations {
  Tensor<S> input;      // i_t in (0,1)
  Tensor<S> forget;     // f_t in (0,1)
  Tensor<S> output;     // o_t in (0,1)
  Tensor<S> candidate;  // in (-1,1)
  Tensor<S> cell;       // c_t
};

template <typename S>
struct GateTrace {
  bool recording = false;
  bool zero_init = false;  // true when the traced run started from an all-zero state
  std::size_t layers = 0;
  std::size_t batch = 0;
  std::size_t hidden = 0;
  std::vector<std::vector<GateActivations<S>>> steps;  // [t][layer]

  std::size_t length() const { return steps.size(); }
};

template <typename S>
struct LstmStepResult {
  Tensor<S> h;
  Tensor<S> c;
  GateActivations<S> gates;
};

// One cell update. The dropout mask, when given, applies to the layer input
// x only; the recurrent h/c paths are never masked.
template <typename S>
LstmStepResult<S> lstm_step(Graph<S>& g, const LstmLayerParams<S>& p, const Tensor<S>& x_in,
                            const LayerState<S>& prev, const Tensor<S>* dropout_mask = nullptr) {
  if (x_in.rank() != 2 || x_in.cols() != p.in_dim())
    throw DimensionError("lstm_step: input " + shape_str(x_in.shape()) + " does not match in_dim " +
                         std::to_string(p.in_dim()));
  if (prev.h.rows() != x_in.rows() || prev.h.cols() != p.hidden())
    throw DimensionError("lstm_step: state " + shape_str(prev.h.shape()) +
                         " does not match batch/hidden " + shape_str(x_in.shape()));

  Tensor<S> x = dropout_mask ? mul(g, x_in, *dropout_mask) : x_in;
  auto preact = [&](const GateParams<S>& gp) {
    return add_row_bias(g, add(g, matmul(g, x, gp.w_x), matmul(g, prev.h, gp.w_h)), gp.bias);
  };
  Tensor<S> cand = tanh(g, preact(p.candidate));
  Tensor<S> i = sigmoid(g, preact(p.input_gate));
  Tensor<S> f = sigmoid(g, preact(p.forget_gate));
  Tensor<S> o = sigmoid(g, preact(p.output_gate));
  Tensor<S> c = add(g, mul(g, f, prev.c), mul(g, i, cand));
  Tensor<S> h = mul(g, o, tanh(g, c));
  return {h, c, {i, f, o, cand, c}};
}

// Inverted dropout: kept entries are scaled by 1/keep so eval needs no
// rescaling. Masks are constants in the graph.
template <typename S>
Tensor<S> dropout_mask(Rng& rng, std::size_t rows, std::size_t cols, double rate) {
  Tensor<S> m = Tensor<S>::zeros({rows, cols});
  const double keep = 1.0 - rate;
  const S scaled = static_cast<S>(1.0 / keep);
  for (auto& v : m.data()) v = rng.uniform() < keep ? scaled : S(0);
  return m;
}

// One mask per layer input, sampled once per sequence.
template <typename S>
std::vector<Tensor<S>> layer_input_masks(const std::vector<LstmLayerParams<S>>& stack,
                                         std::size_t batch, double rate, Rng& rng) {
  std::vector<Tensor<S>> masks;
  masks.reserve(stack.size());
  for (const auto& layer : stack)
    masks.push_back(dropout_mask<S>(rng, batch, layer.in_dim(), rate));
  return masks;
}

template <typename S>
struct StackStepResult {
  Tensor<S> h_last;
  LstmState<S> state;
  std::vector<GateActivations<S>> gates;  // per layer, filled when record_gates
};

// Vertical pass through all layers for a single timestep.
template <typename S>
StackStepResult<S> stack_step(Graph<S>& g, const std::vector<LstmLayerParams<S>>& stack,
                              const Tensor<S>& x, const LstmState<S>& prev,
                              const std::vector<Tensor<S>>* masks, bool record_gates) {
  if (stack.empty()) throw ContractError("stack_step: empty layer stack");
  if (prev.size() != stack.size())
    throw ContractError("stack_step: state has " + std::to_string(prev.size()) + " layers, stack " +
                        std::to_string(stack.size()));
  StackStepResult<S> res;
  res.state.resize(stack.size());
  Tensor<S> input = x;
  for (std::size_t l = 0; l < stack.size(); ++l) {
    const Tensor<S>* mask = masks ? &(*masks)[l] : nullptr;
    auto step = lstm_step(g, stack[l], input, prev[l], mask);
    res.state[l] = {step.c, step.h};
    if (record_gates) res.gates.push_back(step.gates);
    input = step.h;
  }
  res.h_last = input;
  return res;
}

struct UnrollOptions {
  double dropout_rate = 0.0;
  bool train = false;  // masks are sampled only in train mode with rate > 0
  bool record_gates = false;
};

template <typename S>
struct UnrollResult {
  std::vector<Tensor<S>> outputs;  // last-layer h_t for t = 1..T
  LstmState<S> state;
  GateTrace<S> trace;
};

template <typename S>
UnrollResult<S> unroll(Graph<S>& g, const std::vector<LstmLayerParams<S>>& stack,
                       const std::vector<Tensor<S>>& inputs, const LstmState<S>& init,
                       const UnrollOptions& opt, Rng* rng = nullptr) {
  if (inputs.empty()) throw ContractError("unroll: empty input sequence");
  if (stack.empty()) throw ContractError("unroll: empty layer stack");

  const bool use_dropout = opt.train && opt.dropout_rate > 0.0;
  if (use_dropout && rng == nullptr)
    throw ContractError("unroll: dropout in train mode needs an rng");
  std::vector<Tensor<S>> masks;
  if (use_dropout)
    masks = layer_input_masks(stack, inputs.front().rows(), opt.dropout_rate, *rng);

  UnrollResult<S> res;
  res.trace.recording = opt.record_gates;
  res.trace.zero_init = state_is_zero(init);
  res.trace.layers = stack.size();
  res.trace.batch = inputs.front().rows();
  res.trace.hidden = stack.back().hidden();
  res.outputs.reserve(inputs.size());

  LstmState<S> state = init;
  for (const auto& x : inputs) {
    auto step = stack_step(g, stack, x, state, use_dropout ? &masks : nullptr, opt.record_gates);
    state = std::move(step.state);
    res.outputs.push_back(step.h_last);
    if (opt.record_gates) res.trace.steps.push_back(std::move(step.gates));
  }
  res.state = std::move(state);
  return res;
}

// Uniform weights in [-0.05, 0.05]; biases zero except the forget gate,
// which starts at 1.0.
template <typename S>
std::vector<LstmLayerParams<S>> init_lstm(std::size_t in_dim, std::size_t hidden,
                                          std::size_t layers, Rng& rng) {
  if (in_dim == 0 || hidden == 0 || layers == 0)
    throw ContractError("init_lstm: dimensions must be positive");
  const S lo = S(-0.05), hi = S(0.05);
  std::vector<LstmLayerParams<S>> stack;
  stack.reserve(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = l == 0 ? in_dim : hidden;
    auto gate = [&](S bias_value) {
      GateParams<S> gp;
      gp.w_x = Tensor<S>::uniform({in, hidden}, rng, lo, hi, true);
      gp.w_h = Tensor<S>::uniform({hidden, hidden}, rng, lo, hi, true);
      gp.bias = Tensor<S>::full({hidden}, bias_value, true);
      return gp;
    };
    LstmLayerParams<S> layer;
    layer.candidate = gate(S(0));
    layer.input_gate = gate(S(0));
    layer.forget_gate = gate(S(1));
    layer.output_gate = gate(S(0));
    stack.push_back(std::move(layer));
  }
  return stack;
}

}  // namespace avglm
