#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "avglm/checkpoint.hpp"
#include "avglm/model.hpp"

namespace avglm {

struct TrainConfig {
  double initial_lr = 1.0;
  // lr = initial_lr * decay_factor^max(0, epoch - decay_after_epoch)
  std::size_t decay_after_epoch = 12;
  double decay_factor = 0.5;
  double clip_norm = 5.0;
  std::size_t batch_size = 32;
  std::size_t patience = 10;  // epochs without validation improvement
  std::size_t max_epochs = 100;
  std::uint64_t seed = 0;
  // Optional early exit once validation perplexity drops below this; 0 off.
  double stop_below_valid_ppl = 0.0;
  // The seconds column is wall time; turned off it writes 0.000 so two runs
  // of the same seed produce byte-identical metrics files.
  bool record_wall_time = true;

  void validate() const {
    if (initial_lr <= 0 || decay_factor <= 0 || clip_norm <= 0 || batch_size == 0 ||
        patience == 0 || max_epochs == 0)
      throw ContractError("train config: all fields must be positive");
  }
};

inline double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch) {
  if (epoch == 0) throw ContractError("lr_at_epoch: epochs are numbered from 1");
  if (epoch <= cfg.decay_after_epoch) return cfg.initial_lr;
  return cfg.initial_lr * std::pow(cfg.decay_factor, double(epoch - cfg.decay_after_epoch));
}

// Global-norm clip over every parameter gradient; returns the scale applied.
// The loss is already a per-token mean, so no batch-size division happens
// here.
template <typename S>
double clip_gradients(const std::vector<NamedTensor<S>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& nt : params) {
    Tensor<S> t = nt.tensor;
    for (S g : t.grad()) sq += double(g) * double(g);
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm))
    throw DivergenceError("gradient norm is not finite; training aborted");
  if (norm <= max_norm || norm == 0.0) return 1.0;
  const double factor = max_norm / norm;
  for (const auto& nt : params) {
    Tensor<S> t = nt.tensor;
    for (S& g : t.grad()) g = static_cast<S>(double(g) * factor);
  }
  return factor;
}

// In-place p -= lr * g, then zero the grads. Only legal between graphs.
template <typename S>
void sgd_step(const std::vector<NamedTensor<S>>& params, double lr) {
  if (lr < 0) throw ContractError("sgd_step: negative learning rate");
  for (const auto& nt : params) {
    Tensor<S> t = nt.tensor;
    auto& v = t.data();
    const auto& g = t.grad();
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = static_cast<S>(double(v[i]) - lr * double(g[i]));
    t.zero_grad();
  }
}

inline double perplexity_from_totals(double nll_sum, std::size_t token_count) {
  if (token_count == 0) throw DegenerateBatchError("perplexity over zero target tokens");
  return std::exp(nll_sum / double(token_count));
}

// Token-weighted perplexity over a batch list: exp(total NLL / total target
// tokens), invariant to how the rows were partitioned into batches.
template <typename S>
double perplexity(const ModelParams<S>& params, const std::vector<EncodedBatch>& batch_list) {
  double nll_sum = 0.0;
  std::size_t tokens = 0;
  for (const auto& batch : batch_list) {
    Graph<S> g;
    g.set_recording(false);
    auto res = forward_sequence(g, params, batch);
    if (!std::isfinite(res.mean_nll))
      throw DivergenceError("non-finite loss during evaluation");
    nll_sum += res.mean_nll * double(res.target_count);
    tokens += res.target_count;
  }
  return perplexity_from_totals(nll_sum, tokens);
}

struct MetricsRow {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double valid_ppl = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct TrainState {
  std::size_t epochs_run = 0;
  double best_valid_ppl = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t epochs_since_improvement = 0;
  std::vector<MetricsRow> history;
  std::string best_checkpoint_path;
};

namespace detail {

inline void append_metrics_row(const std::string& path, const MetricsRow& row,
                               std::uint64_t seed, bool first) {
  std::ofstream f(path, std::ios::binary | std::ios::app);
  if (!f) throw IoError("cannot open metrics file: " + path);
  if (first) {
    f << "# seed=" << seed << "\n";
    f << "epoch,train_loss,valid_ppl,lr,seconds\n";
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f,%.10g,%.3f\n", row.epoch, row.train_loss,
                row.valid_ppl, row.lr, row.seconds);
  f << buf;
  if (!f) throw IoError("write failed: " + path);
}

}  // namespace detail

// SGD loop with the epoch-indexed decay schedule, global-norm clipping,
// checkpoint-on-best and early stopping. On return the parameters are
// restored from the best checkpoint so evaluation matches what was saved.
template <typename S>
TrainState train(ModelParams<S>& params, const std::vector<EncodedBatch>& train_batches,
                 const std::vector<EncodedBatch>& valid_batches, const TrainConfig& cfg,
                 const std::string& checkpoint_dir, const std::string& metrics_path,
                 std::uint64_t vocab_hash,
                 const std::function<void(const MetricsRow&)>& on_epoch = nullptr) {
  cfg.validate();
  params.config.validate();
  if (train_batches.empty()) throw ContractError("train: no training batches");
  if (valid_batches.empty()) throw ContractError("train: no validation batches");

  std::filesystem::create_directories(checkpoint_dir);
  const std::string best_path = checkpoint_dir + "/best.ckpt";

  Rng rng(cfg.seed);
  auto named = params.parameters();
  for (auto& nt : named) {
    Tensor<S> t = nt.tensor;
    t.zero_grad();
  }

  TrainState state;
  state.best_checkpoint_path = best_path;
  bool wrote_metrics = false;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at_epoch(cfg, epoch);

    double nll_sum = 0.0;
    std::size_t token_sum = 0;
    for (const auto& batch : train_batches) {
      Graph<S> g;
      ForwardOptions opt;
      opt.mode = Mode::train;
      auto res = forward_sequence(g, params, batch, opt, &rng);
      if (!std::isfinite(res.mean_nll))
        throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch) +
                              "; last good checkpoint retained at " + best_path);
      g.backward(res.loss);
      clip_gradients(named, cfg.clip_norm);
      sgd_step(named, lr);
      nll_sum += res.mean_nll * double(res.target_count);
      token_sum += res.target_count;
    }

    const double valid_ppl = perplexity(params, valid_batches);
    const auto t1 = std::chrono::steady_clock::now();

    MetricsRow row;
    row.epoch = epoch;
    row.train_loss = nll_sum / double(token_sum);
    row.valid_ppl = valid_ppl;
    row.lr = lr;
    row.seconds = cfg.record_wall_time
                      ? std::chrono::duration<double>(t1 - t0).count()
                      : 0.0;
    detail::append_metrics_row(metrics_path, row, cfg.seed, !wrote_metrics);
    wrote_metrics = true;
    state.history.push_back(row);
    state.epochs_run = epoch;
    if (on_epoch) on_epoch(row);

    if (valid_ppl < state.best_valid_ppl) {
      state.best_valid_ppl = valid_ppl;
      state.best_epoch = epoch;
      state.epochs_since_improvement = 0;
      CheckpointMeta meta;
      meta.seed = cfg.seed;
      meta.epoch = epoch;
      meta.valid_ppl = valid_ppl;
      meta.vocab_hash = vocab_hash;
      save_checkpoint(best_path, params, meta);
    } else {
      ++state.epochs_since_improvement;
    }

    if (state.epochs_since_improvement >= cfg.patience) break;
    if (cfg.stop_below_valid_ppl > 0 && valid_ppl < cfg.stop_below_valid_ppl) break;
  }

  // best-restore so downstream evaluation sees the reported model
  auto loaded = load_checkpoint<S>(best_path);
  auto src = loaded.params.parameters();
  auto dst = params.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    Tensor<S> d = dst[i].tensor;
    d.data() = src[i].tensor.data();
  }
  return state;
}

}  // namespace avglm
