// avglm: averaging-memory LSTM language model pipeline.
// Subcommands: vocab, train, eval, analyze, inspect.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "avglm/analysis.hpp"
#include "avglm/checkpoint.hpp"
#include "avglm/corpus.hpp"
#include "avglm/model.hpp"
#include "avglm/trainer.hpp"

namespace fs = std::filesystem;
using namespace avglm;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitDivergence = 3;

// Paths that do not exist as given are retried under $AVGLM_DATA_ROOT.
std::string resolve_path(const std::string& path) {
  if (path.empty() || fs::exists(path)) return path;
  const char* root = std::getenv("AVGLM_DATA_ROOT");
  if (root != nullptr) {
    const fs::path candidate = fs::path(root) / path;
    if (fs::exists(candidate)) return candidate.string();
  }
  return path;
}

std::string with_thousands(std::size_t n) {
  std::string digits = std::to_string(n);
  std::string out;
  int c = 0;
  for (auto it = digits.rbegin(); it != digits.rend(); ++it) {
    if (c && c % 3 == 0) out.push_back(',');
    out.push_back(*it);
    ++c;
  }
  return std::string(out.rbegin(), out.rend());
}

struct RunConfig {
  std::string preset = "custom";
  ModelConfig model;
  TrainConfig trainer;
  std::size_t vocab_cap = 10000;
  bool strict_paper = false;
  std::string train_path, valid_path, test_path, vocab_path;
  std::string checkpoint_dir = "checkpoints";
  std::string metrics_path = "metrics.csv";
};

void apply_preset(RunConfig& cfg) {
  cfg.model.layers = 2;
  cfg.model.sequence_length = 35;
  cfg.trainer.initial_lr = 1.0;
  cfg.trainer.clip_norm = 5.0;
  cfg.trainer.batch_size = 32;
  cfg.trainer.patience = 10;
  if (cfg.preset == "ptb") {
    cfg.vocab_cap = 10000;
    cfg.model.dim = 650;
    cfg.model.dropout_rate = 0.5;
    cfg.trainer.decay_after_epoch = 12;
    cfg.trainer.decay_factor = 0.5;
  } else if (cfg.preset == "wiki") {
    cfg.vocab_cap = 33278;
    cfg.model.dim = 1000;
    cfg.model.dropout_rate = 0.65;
    cfg.trainer.decay_after_epoch = 14;
    cfg.trainer.decay_factor = 1.0 / 1.15;
  } else {
    cfg.vocab_cap = 10000;
    cfg.model.dim = 128;
    cfg.model.dropout_rate = 0.0;
    cfg.trainer.decay_after_epoch = 12;
    cfg.trainer.decay_factor = 0.5;
  }
}

void echo_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write effective config: " + path);
  f << "preset " << cfg.preset << "\n";
  f << "train " << cfg.train_path << "\n";
  f << "valid " << cfg.valid_path << "\n";
  f << "test " << cfg.test_path << "\n";
  f << "vocab " << cfg.vocab_path << "\n";
  f << "checkpoint_dir " << cfg.checkpoint_dir << "\n";
  f << "metrics " << cfg.metrics_path << "\n";
  f << "vocab_cap " << cfg.vocab_cap << "\n";
  f << "dim " << cfg.model.dim << "\n";
  f << "layers " << cfg.model.layers << "\n";
  f << "dropout " << cfg.model.dropout_rate << "\n";
  f << "sequence_length " << cfg.model.sequence_length << "\n";
  f << "use_memory " << (cfg.model.use_memory ? 1 : 0) << "\n";
  f << "strict_paper " << (cfg.strict_paper ? 1 : 0) << "\n";
  f << "initial_lr " << cfg.trainer.initial_lr << "\n";
  f << "decay_after_epoch " << cfg.trainer.decay_after_epoch << "\n";
  f << "decay_factor " << cfg.trainer.decay_factor << "\n";
  f << "clip_norm " << cfg.trainer.clip_norm << "\n";
  f << "batch_size " << cfg.trainer.batch_size << "\n";
  f << "patience " << cfg.trainer.patience << "\n";
  f << "max_epochs " << cfg.trainer.max_epochs << "\n";
  f << "seed " << cfg.trainer.seed << "\n";
}

int cmd_vocab(const std::string& corpus, std::size_t cap, const std::string& out) {
  if (cap < 4) {
    std::cerr << "error: --cap must be at least 4 (reserved tokens need room)\n";
    return kExitUsage;
  }
  const std::string path = resolve_path(corpus);
  if (!fs::exists(path)) {
    std::cerr << "error: corpus file not found: " << corpus << "\n";
    return kExitUsage;
  }
  auto vocab = Vocabulary::build(read_lines(path), cap);
  vocab.save(out);
  std::cout << "vocabulary: " << vocab.size() << " tokens -> " << out << "\n";
  return 0;
}

int cmd_train(RunConfig cfg) {
  cfg.train_path = resolve_path(cfg.train_path);
  cfg.valid_path = resolve_path(cfg.valid_path);
  cfg.test_path = resolve_path(cfg.test_path);
  cfg.vocab_path = resolve_path(cfg.vocab_path);
  for (const auto& [label, path] :
       {std::pair<const char*, std::string>{"--train", cfg.train_path},
        {"--valid", cfg.valid_path},
        {"--vocab", cfg.vocab_path}}) {
    if (path.empty() || !fs::exists(path)) {
      std::cerr << "error: missing required file for " << label << ": " << path << "\n";
      return kExitUsage;
    }
  }

  auto vocab = Vocabulary::load(cfg.vocab_path);
  cfg.model.vocab_size = vocab.size();
  cfg.model.validate();
  cfg.trainer.validate();

  fs::create_directories(cfg.checkpoint_dir);
  echo_config(cfg, cfg.checkpoint_dir + "/config.txt");

  const bool eos = !cfg.strict_paper;
  auto train_enc = encode_corpus(vocab, read_lines(cfg.train_path), cfg.model.sequence_length, eos);
  auto valid_enc = encode_corpus(vocab, read_lines(cfg.valid_path), cfg.model.sequence_length, eos);
  if (train_enc.skipped_empty)
    std::cerr << "warning: skipped " << train_enc.skipped_empty << " empty training sentences\n";
  auto train_b = batches(train_enc, cfg.trainer.batch_size, true);
  auto valid_b = batches(valid_enc, cfg.trainer.batch_size, false);

  Rng rng(cfg.trainer.seed);
  auto params = ModelParams<float>::init(cfg.model, rng);
  std::cout << "model: " << with_thousands(params.count()) << " parameters\n";

  CheckpointMeta init_meta;
  init_meta.seed = cfg.trainer.seed;
  init_meta.vocab_hash = vocab.hash();
  save_checkpoint(cfg.checkpoint_dir + "/init.ckpt", params, init_meta);

  auto state = train<float>(params, train_b, valid_b, cfg.trainer, cfg.checkpoint_dir,
                            cfg.metrics_path, vocab.hash(), [](const MetricsRow& row) {
                              std::printf("epoch %zu: train_loss %.6f valid_ppl %.3f lr %.6g\n",
                                          row.epoch, row.train_loss, row.valid_ppl, row.lr);
                              std::fflush(stdout);
                            });
  std::printf("best: epoch %zu valid_ppl %.3f -> %s\n", state.best_epoch, state.best_valid_ppl,
              state.best_checkpoint_path.c_str());

  if (!cfg.test_path.empty()) {
    if (!fs::exists(cfg.test_path)) {
      std::cerr << "error: test corpus not found: " << cfg.test_path << "\n";
      return kExitUsage;
    }
    auto test_enc = encode_corpus(vocab, read_lines(cfg.test_path), cfg.model.sequence_length, eos);
    const double test_ppl = perplexity(params, batches(test_enc, cfg.trainer.batch_size, false));
    std::printf("test_ppl %.3f\n", test_ppl);
  }
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& corpus,
             const std::string& vocab_path, const std::string& metrics, std::size_t batch_size) {
  auto loaded = load_checkpoint<float>(resolve_path(checkpoint));
  auto vocab = Vocabulary::load(resolve_path(vocab_path));
  if (vocab.hash() != loaded.meta.vocab_hash)
    throw DataError("vocabulary file does not match the checkpoint (hash mismatch)");
  if (vocab.size() != loaded.params.config.vocab_size)
    throw DataError("vocabulary size does not match the checkpoint");

  auto enc = encode_corpus(vocab, read_lines(resolve_path(corpus)),
                           loaded.params.config.sequence_length);
  auto batch_list = batches(enc, batch_size, false);
  double nll_sum = 0.0;
  std::size_t tokens = 0;
  for (const auto& b : batch_list) {
    Graph<float> g;
    g.set_recording(false);
    auto res = forward_sequence(g, loaded.params, b);
    nll_sum += res.mean_nll * double(res.target_count);
    tokens += res.target_count;
  }
  const double ppl = perplexity_from_totals(nll_sum, tokens);
  std::printf("perplexity: %.1f (%zu tokens)\n", ppl, tokens);
  if (!metrics.empty()) {
    std::ofstream f(metrics, std::ios::app);
    if (!f) throw IoError("cannot append to metrics file: " + metrics);
    char buf[512];
    std::snprintf(buf, sizeof(buf), "# eval corpus=%s ppl=%.6f tokens=%zu\n", corpus.c_str(), ppl,
                  tokens);
    f << buf;
  }
  return 0;
}

int cmd_analyze(const std::string& checkpoint, const std::string& corpus,
                const std::string& vocab_path, double theta, const std::string& out_dir,
                std::size_t line_index, std::size_t trace_cap) {
  auto loaded = load_checkpoint<float>(resolve_path(checkpoint));
  const auto& cfg = loaded.params.config;

  Vocabulary vocab;
  if (!vocab_path.empty()) {
    vocab = Vocabulary::load(resolve_path(vocab_path));
    if (vocab.hash() != loaded.meta.vocab_hash)
      throw DataError("vocabulary file does not match the checkpoint (hash mismatch)");
  } else {
    std::cerr << "warning: no --vocab given; sample words are encoded as <unk>\n";
  }

  auto lines = read_lines(resolve_path(corpus));
  std::vector<std::string> usable;
  for (auto& l : lines)
    if (!l.empty()) usable.push_back(l);
  if (usable.empty()) throw DataError("analysis sample has no sentences: " + corpus);
  if (line_index >= usable.size()) {
    std::cerr << "error: --line " << line_index << " out of range (sample has " << usable.size()
              << " sentences)\n";
    return kExitUsage;
  }

  const std::size_t steps = cfg.sequence_length - 1;
  const std::size_t estimated = cfg.layers * (steps * (steps + 1) / 2) * cfg.dim;
  if (estimated > trace_cap) {
    std::cerr << "error: decomposition would emit " << estimated << " rows, above --trace-cap "
              << trace_cap << "; analyze a smaller model/sequence or raise the cap\n";
    return kExitUsage;
  }

  auto ids = encode_tokens(vocab, usable[line_index]);
  for (auto& id : ids)
    if (id >= int(cfg.vocab_size)) id = Vocabulary::unk_id;
  auto [row, mask] = pad_truncate(ids, cfg.sequence_length);
  EncodedBatch batch;
  batch.rows = 1;
  batch.length = cfg.sequence_length;
  batch.tokens = row;
  batch.mask = mask;

  Graph<float> g;
  g.set_recording(false);
  ForwardOptions opt;
  opt.record_gates = true;
  auto res = forward_sequence(g, loaded.params, batch, opt);

  fs::create_directories(out_dir);
  std::vector<ContributionTensor> tensors;
  std::vector<PersistenceStats> stats;
  double residual = 0.0;
  for (std::size_t layer = 0; layer < cfg.layers; ++layer) {
    tensors.push_back(decompose(res.trace, layer));
    residual = std::max(residual, decomposition_residual(tensors.back(), res.trace));
    stats.push_back(persistence_lengths(res.trace, layer, theta));
  }
  export_decomposition_csv(tensors, out_dir + "/decomposition.csv");
  export_persistence_csv(stats, out_dir + "/persistence.csv");
  std::printf("analyzed sentence %zu of %zu (T=%zu, %zu layers, %zu units)\n", line_index,
              usable.size(), steps, cfg.layers, cfg.dim);
  std::printf("decomposition identity max residual: %.3e\n", residual);
  std::printf("wrote %s and %s\n", (out_dir + "/decomposition.csv").c_str(),
              (out_dir + "/persistence.csv").c_str());
  return 0;
}

int cmd_inspect(const std::string& checkpoint) {
  auto loaded = load_checkpoint<float>(resolve_path(checkpoint));
  const auto& cfg = loaded.params.config;
  const std::size_t count = param_count(cfg);
  std::printf("config: vocab_size=%zu dim=%zu layers=%zu dropout=%g seq_len=%zu memory=%s\n",
              cfg.vocab_size, cfg.dim, cfg.layers, cfg.dropout_rate, cfg.sequence_length,
              cfg.use_memory ? "on" : "off");
  std::printf("params: %s (%.1fM)\n", with_thousands(count).c_str(), double(count) / 1e6);
  std::printf("seed: %llu\n", static_cast<unsigned long long>(loaded.meta.seed));
  std::printf("epoch: %zu\n", loaded.meta.epoch);
  if (loaded.meta.valid_ppl)
    std::printf("valid_ppl: %.3f\n", *loaded.meta.valid_ppl);
  else
    std::printf("valid_ppl: (none)\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Averaging-memory LSTM language model"};
  app.require_subcommand(1);

  auto* vocab_cmd = app.add_subcommand("vocab", "Build a frequency-ranked vocabulary file");
  std::string v_corpus, v_out = "vocab.txt", v_preset = "custom";
  std::size_t v_cap = 10000;
  vocab_cmd->add_option("--corpus", v_corpus, "training corpus, one sentence per line")->required();
  vocab_cmd->add_option("--cap", v_cap, "vocabulary size cap (including reserved tokens)");
  vocab_cmd->add_option("--out", v_out, "output vocabulary file");
  vocab_cmd->add_option("--preset", v_preset, "ptb|wiki|custom (sets the cap)")
      ->check(CLI::IsMember({"ptb", "wiki", "custom"}));

  auto* train_cmd = app.add_subcommand("train", "Train a model");
  RunConfig rc;
  bool no_memory = false, det_timing = false;
  train_cmd->add_option("--preset", rc.preset, "ptb|wiki|custom")
      ->check(CLI::IsMember({"ptb", "wiki", "custom"}));
  train_cmd->add_option("--train", rc.train_path, "training corpus")->required();
  train_cmd->add_option("--valid", rc.valid_path, "validation corpus")->required();
  train_cmd->add_option("--test", rc.test_path, "optional test corpus evaluated at the end");
  train_cmd->add_option("--vocab", rc.vocab_path, "vocabulary file")->required();
  train_cmd->add_option("--checkpoint-dir", rc.checkpoint_dir, "checkpoint directory");
  train_cmd->add_option("--metrics", rc.metrics_path, "metrics CSV path");
  train_cmd->add_option("--seed", rc.trainer.seed, "seed for init, dropout, everything");
  std::optional<std::size_t> o_dim, o_layers, o_seq, o_batch, o_patience, o_max_epochs,
      o_decay_after;
  std::optional<double> o_dropout, o_lr, o_clip, o_decay_factor, o_stop_below;
  train_cmd->add_option("--dim", o_dim, "embedding/hidden width override");
  train_cmd->add_option("--layers", o_layers, "LSTM layer count override");
  train_cmd->add_option("--seq-len", o_seq, "sequence length override");
  train_cmd->add_option("--batch-size", o_batch, "mini-batch size override");
  train_cmd->add_option("--patience", o_patience, "early-stop patience override");
  train_cmd->add_option("--max-epochs", o_max_epochs, "hard epoch cap");
  train_cmd->add_option("--decay-after", o_decay_after, "epoch after which lr decays");
  train_cmd->add_option("--dropout", o_dropout, "dropout rate override");
  train_cmd->add_option("--lr", o_lr, "initial learning rate override");
  train_cmd->add_option("--clip", o_clip, "gradient-norm clip override");
  train_cmd->add_option("--decay-factor", o_decay_factor, "per-epoch lr decay factor");
  train_cmd->add_option("--stop-below-ppl", o_stop_below,
                        "stop once validation perplexity drops below this");
  train_cmd->add_flag("--no-memory", no_memory,
                      "pin the context vector to zero (plain LSTM-LM ablation)");
  train_cmd->add_flag("--strict-paper", rc.strict_paper, "disable the eos-append extension");
  train_cmd->add_flag("--det-timing", det_timing,
                      "write 0.000 in the seconds column for byte-reproducible metrics");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate perplexity of a checkpoint");
  std::string e_ckpt, e_corpus, e_vocab, e_metrics;
  std::size_t e_batch = 32;
  eval_cmd->add_option("--checkpoint", e_ckpt)->required();
  eval_cmd->add_option("--corpus", e_corpus)->required();
  eval_cmd->add_option("--vocab", e_vocab)->required();
  eval_cmd->add_option("--metrics", e_metrics, "append the result to this metrics file");
  eval_cmd->add_option("--batch-size", e_batch);

  auto* an_cmd = app.add_subcommand("analyze", "Cell-state decomposition and persistence stats");
  std::string a_ckpt, a_corpus, a_vocab, a_out = "analysis";
  double a_theta = 0.9;
  std::size_t a_line = 0, a_cap = 2000000;
  an_cmd->add_option("--checkpoint", a_ckpt)->required();
  an_cmd->add_option("--corpus", a_corpus, "sample corpus; one sentence is analyzed")->required();
  an_cmd->add_option("--vocab", a_vocab, "vocabulary file (recommended)");
  an_cmd->add_option("--theta", a_theta, "forget-gate persistence threshold");
  an_cmd->add_option("--out-dir", a_out, "output directory for the CSVs");
  an_cmd->add_option("--line", a_line, "which sentence of the sample to analyze");
  an_cmd->add_option("--trace-cap", a_cap, "maximum decomposition rows");

  auto* in_cmd = app.add_subcommand("inspect", "Print checkpoint metadata and parameter count");
  std::string i_ckpt;
  in_cmd->add_option("--checkpoint", i_ckpt)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*vocab_cmd) {
      if (v_preset == "ptb") v_cap = 10000;
      if (v_preset == "wiki") v_cap = 33278;
      return cmd_vocab(v_corpus, v_cap, v_out);
    }
    if (*train_cmd) {
      apply_preset(rc);
      if (o_dim) rc.model.dim = *o_dim;
      if (o_layers) rc.model.layers = *o_layers;
      if (o_seq) rc.model.sequence_length = *o_seq;
      if (o_dropout) rc.model.dropout_rate = *o_dropout;
      if (o_batch) rc.trainer.batch_size = *o_batch;
      if (o_patience) rc.trainer.patience = *o_patience;
      if (o_max_epochs) rc.trainer.max_epochs = *o_max_epochs;
      if (o_decay_after) rc.trainer.decay_after_epoch = *o_decay_after;
      if (o_lr) rc.trainer.initial_lr = *o_lr;
      if (o_clip) rc.trainer.clip_norm = *o_clip;
      if (o_decay_factor) rc.trainer.decay_factor = *o_decay_factor;
      if (o_stop_below) rc.trainer.stop_below_valid_ppl = *o_stop_below;
      rc.model.use_memory = !no_memory;
      rc.trainer.record_wall_time = !det_timing;
      return cmd_train(std::move(rc));
    }
    if (*eval_cmd) return cmd_eval(e_ckpt, e_corpus, e_vocab, e_metrics, e_batch);
    if (*an_cmd) return cmd_analyze(a_ckpt, a_corpus, a_vocab, a_theta, a_out, a_line, a_cap);
    if (*in_cmd) return cmd_inspect(i_ckpt);
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return 0;
}
