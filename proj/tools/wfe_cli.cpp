// wfe: data generation, training, decoding and evaluation from the shell.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "wfe/beam.hpp"
#include "wfe/checkpoint.hpp"
#include "wfe/corpus.hpp"
#include "wfe/metrics.hpp"
#include "wfe/training.hpp"
#include "wfe/vocab.hpp"

namespace fs = std::filesystem;
using namespace wfe;

namespace {

// ---------------------------------------------------------------------------
// key=value configuration files
// ---------------------------------------------------------------------------

struct ConfigEntry {
  std::string key, value;
};

std::vector<ConfigEntry> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read config file " + path);
  std::vector<ConfigEntry> out;
  std::string line;
  std::size_t lineno = 0;
  const auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
    }
    ConfigEntry e{trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
    if (e.key.empty()) throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
    out.push_back(std::move(e));
  }
  return out;
}

/// Pulls `--config FILE` out of argv and splices the file's entries in as
/// `--key=value` right after the subcommand name, so explicit flags (which
/// come later and win under TakeLast) override the file.
std::vector<std::string> expand_config(int argc, char** argv,
                                       const std::vector<std::string>& subcommands) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::optional<std::string> path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i),
                 args.begin() + static_cast<std::ptrdiff_t>(i + 2));
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  if (!path) return args;
  auto sub = args.begin();
  while (sub != args.end() &&
         std::find(subcommands.begin(), subcommands.end(), *sub) == subcommands.end())
    ++sub;
  if (sub == args.end()) throw ConfigError("--config needs a subcommand to apply to");
  std::vector<std::string> injected;
  for (const auto& e : read_config_file(*path)) injected.push_back("--" + e.key + "=" + e.value);
  args.insert(sub + 1, injected.begin(), injected.end());
  return args;
}

// ---------------------------------------------------------------------------
// helpers
// ---------------------------------------------------------------------------

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream file;
  std::istream* in = &std::cin;
  if (path != "-") {
    file.open(path, std::ios::binary);
    if (!file) throw InputError("cannot read " + path);
    in = &file;
  }
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(*in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

/// Plain token lines; for corpus files the target side after the tab is used.
std::vector<Tokens> read_token_lines(const std::string& path) {
  std::vector<Tokens> out;
  for (const auto& line : read_lines(path)) {
    const auto tab = line.find('\t');
    out.push_back(split_tokens(tab == std::string::npos ? std::string_view(line)
                                                        : std::string_view(line).substr(tab + 1)));
  }
  return out;
}

void check_vocab_fits(const ModelConfig& cfg, const Vocabulary& src, const Vocabulary& tgt) {
  if (src.size() != cfg.src_vocab || tgt.size() != cfg.tgt_vocab) {
    throw ConfigError("vocabulary files (" + std::to_string(src.size()) + " source, " +
                      std::to_string(tgt.size()) + " target tokens) do not match the checkpoint (" +
                      std::to_string(cfg.src_vocab) + ", " + std::to_string(cfg.tgt_vocab) + ")");
  }
}

std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  return out;
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

struct DataGenArgs {
  std::size_t pairs = 2500;
  std::size_t vocab_size = 60;
  std::size_t max_vocab = 200;
  std::uint64_t seed = 1;
  std::string out_dir = "data";
};

int run_data_gen(const DataGenArgs& a) {
  SyntheticConfig sc;
  sc.pairs = a.pairs;
  sc.vocab_size = a.vocab_size;
  const auto splits = split_corpus(gen_synthetic(sc, a.seed));
  fs::create_directories(a.out_dir);
  const fs::path dir(a.out_dir);
  write_corpus((dir / "train.tsv").string(), splits.train);
  write_corpus((dir / "val.tsv").string(), splits.val);
  write_corpus((dir / "test.tsv").string(), splits.test);
  std::vector<std::vector<std::string>> src, tgt;
  for (const auto& p : splits.train) {
    src.push_back(p.source);
    tgt.push_back(p.target);
  }
  Vocabulary::build(src, a.max_vocab).save((dir / "src.vocab").string());
  Vocabulary::build(tgt, a.max_vocab).save((dir / "tgt.vocab").string());
  std::cout << "train\t" << splits.train.size() << "\nval\t" << splits.val.size() << "\ntest\t"
            << splits.test.size() << '\n';
  return 0;
}

struct TrainArgs {
  std::string train = "data/train.tsv";
  std::string val = "data/val.tsv";
  std::string src_vocab = "data/src.vocab";
  std::string tgt_vocab = "data/tgt.vocab";
  std::string out = "model.ckpt";
  std::string log;
  ModelConfig model;
  WfeLossConfig loss;
  TrainConfig train_cfg;
  double init_scale = 0.08;
  bool no_wfe = false;
  bool f32 = false;
};

int run_train(TrainArgs a) {
  const auto src = Vocabulary::load(a.src_vocab);
  const auto tgt = Vocabulary::load(a.tgt_vocab);
  const auto train_set = encode_corpus(read_corpus(a.train), src, tgt);
  const auto val_set = encode_corpus(read_corpus(a.val), src, tgt);
  a.model.src_vocab = src.size();
  a.model.tgt_vocab = tgt.size();
  a.model.dropout = a.train_cfg.dropout;
  if (a.no_wfe) {
    a.model.with_wfe = false;
    a.train_cfg.wfe_weight = 0.0;
  }
  a.model.validate();
  a.loss.validate();
  a.train_cfg.validate();

  Rng init(a.train_cfg.seed);
  Seq2Seq model(a.model, init, a.init_scale);
  std::ofstream log_file;
  std::ostream* log = &std::cout;
  if (!a.log.empty()) {
    log_file = open_output(a.log);
    log = &log_file;
  }
  const auto result = train(model, train_set, val_set, a.train_cfg, a.loss, log);
  const Checkpoint ck = make_checkpoint(model, a.loss, a.f32 ? DType::f32 : DType::f64);
  save_checkpoint(a.out, ck);
  std::cerr << "best epoch " << result.best_epoch << " of " << result.log.size() << ", saved "
            << a.out << '\n';
  return 0;
}

struct DecodeArgs {
  std::string model = "model.ckpt";
  std::string input = "-";
  std::string output;
  std::string src_vocab = "data/src.vocab";
  std::string tgt_vocab = "data/tgt.vocab";
  std::string mode = "baseline";
  std::size_t beam = 5;
  std::size_t max_len = 0;
  std::string trace;
};

int run_decode(const DecodeArgs& a) {
  const Checkpoint ck = load_checkpoint(a.model);
  const Seq2Seq model = model_from_checkpoint(ck);
  const auto src = Vocabulary::load(a.src_vocab);
  const auto tgt = Vocabulary::load(a.tgt_vocab);
  check_vocab_fits(model.config(), src, tgt);

  DecodeOptions opts;
  opts.beam = a.beam;
  opts.max_len = a.max_len;
  opts.mode = a.mode == "wfe" ? DecodeMode::wfe : DecodeMode::baseline;
  if (opts.mode == DecodeMode::wfe && !model.has_wfe()) {
    throw StateError("--mode wfe needs WFE parameters, but " + a.model +
                     " is a baseline checkpoint (trained with --no-wfe)");
  }
  std::ofstream trace_file;
  if (!a.trace.empty()) {
    trace_file = open_output(a.trace);
    opts.trace = &trace_file;
  }
  std::ofstream out_file;
  std::ostream* out = &std::cout;
  if (!a.output.empty()) {
    out_file = open_output(a.output);
    out = &out_file;
  }

  const auto lines = read_lines(a.input);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto words = split_tokens(lines[i]);
    if (words.empty()) {
      std::cerr << "warning: input line " << i + 1 << " is empty; writing an empty output line\n";
      *out << '\n';
      continue;
    }
    if (opts.trace) *opts.trace << "{\"line\":" << i + 1 << "}\n";
    const auto result = beam_search(model, src.encode(words), opts);
    if (result.length_capped) {
      std::cerr << "warning: input line " << i + 1 << " hit the length cap\n";
    }
    *out << join_tokens(tgt.decode(result.best().output())) << '\n';
  }
  return 0;
}

struct EvalArgs {
  std::string candidates;
  std::string references;
  std::string basis = "f1";
  std::optional<std::size_t> byte_limit;
};

int run_eval(const EvalArgs& a) {
  const auto cands = read_token_lines(a.candidates);
  const auto refs = read_token_lines(a.references);
  if (cands.size() != refs.size()) {
    throw InputError("line count mismatch: " + std::to_string(cands.size()) + " candidates in " +
                     a.candidates + " vs " + std::to_string(refs.size()) + " references in " +
                     a.references);
  }
  const RougeBasis basis = a.basis == "recall"      ? RougeBasis::recall
                           : a.basis == "precision" ? RougeBasis::precision
                                                    : RougeBasis::f1;
  std::vector<std::string> warnings;
  const double r1 = rouge(cands, refs, RougeVariant::rouge1, basis, a.byte_limit, &warnings);
  const double r2 = rouge(cands, refs, RougeVariant::rouge2, basis, a.byte_limit);
  const double rl = rouge(cands, refs, RougeVariant::rougeL, basis, a.byte_limit);
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
  char buf[64];
  const auto line = [&](const char* name, double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    std::cout << name << '\t' << buf << '\n';
  };
  line("rouge1", r1);
  line("rouge2", r2);
  line("rougeL", rl);
  line("repeat_rate", repeat_rate(cands));
  return 0;
}

struct WfeEvalArgs {
  std::string model = "model.ckpt";
  std::string data = "data/test.tsv";
  std::string src_vocab = "data/src.vocab";
  std::string tgt_vocab = "data/tgt.vocab";
};

int run_wfe_eval(const WfeEvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.model);
  const Seq2Seq model = model_from_checkpoint(ck);
  if (!model.has_wfe()) {
    throw StateError(a.model + " is a baseline checkpoint without WFE parameters; nothing to evaluate");
  }
  const auto src = Vocabulary::load(a.src_vocab);
  const auto tgt = Vocabulary::load(a.tgt_vocab);
  check_vocab_fits(model.config(), src, tgt);
  const auto corpus = encode_corpus(read_corpus(a.data), src, tgt);
  const ConfusionMatrix cm = wfe_confusion(model, corpus);
  std::cout << cm.render() << "pairs\t" << cm.total() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Seq2seq with word-frequency estimation"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");
  std::string config_note;
  app.add_option("--config", config_note, "key=value file; keys are long flag names")
      ->type_name("FILE");

  DataGenArgs gen;
  auto* cmd_gen = app.add_subcommand("data-gen", "Write a seeded synthetic corpus and vocabularies");
  cmd_gen->add_option("--pairs", gen.pairs, "Number of sentence pairs")
      ->check(CLI::PositiveNumber)->capture_default_str();
  cmd_gen->add_option("--vocab-size", gen.vocab_size, "Distinct synthetic words (>= 20)")
      ->check(CLI::Range(std::size_t{20}, std::size_t{100000}))->capture_default_str();
  cmd_gen->add_option("--max-vocab", gen.max_vocab, "Vocabulary cap including reserved tokens")
      ->capture_default_str();
  cmd_gen->add_option("--seed", gen.seed, "Random seed")->envname("WFE_SEED")->capture_default_str();
  cmd_gen->add_option("--out-dir", gen.out_dir, "Output directory")->capture_default_str();

  TrainArgs tr;
  auto* cmd_train = app.add_subcommand("train", "Train a model and write a checkpoint");
  cmd_train->add_option("--train", tr.train, "Training corpus")->capture_default_str();
  cmd_train->add_option("--val", tr.val, "Validation corpus")->capture_default_str();
  cmd_train->add_option("--src-vocab", tr.src_vocab)->capture_default_str();
  cmd_train->add_option("--tgt-vocab", tr.tgt_vocab)->capture_default_str();
  cmd_train->add_option("--out", tr.out, "Checkpoint path")->capture_default_str();
  cmd_train->add_option("--log", tr.log, "Write the epoch log here instead of stdout");
  cmd_train->add_option("--emb-dim", tr.model.emb_dim)->capture_default_str();
  cmd_train->add_option("--hidden", tr.model.hidden, "Hidden size (even)")->capture_default_str();
  auto* opt_bias = cmd_train->add_flag("--wfe-bias", tr.model.wfe_bias, "Bias terms in the WFE maps");
  cmd_train->add_option("--init-scale", tr.init_scale)->capture_default_str();
  cmd_train->add_option("--epsilon", tr.loss.epsilon, "WFE loss margin")->capture_default_str();
  cmd_train->add_option("--b", tr.loss.b, "WFE loss exponent")->capture_default_str();
  cmd_train->add_option("--c1", tr.loss.c1, "Over-estimation weight")->capture_default_str();
  cmd_train->add_option("--c2", tr.loss.c2, "Under-estimation weight")->capture_default_str();
  cmd_train->add_option("--epochs", tr.train_cfg.max_epochs, "Maximum epochs")->capture_default_str();
  cmd_train->add_option("--adam-epochs", tr.train_cfg.adam_epochs)->capture_default_str();
  cmd_train->add_option("--lr-adam", tr.train_cfg.lr_adam)->capture_default_str();
  cmd_train->add_option("--lr-sgd", tr.train_cfg.lr_sgd)->capture_default_str();
  cmd_train->add_option("--clip-adam", tr.train_cfg.clip_adam)->capture_default_str();
  cmd_train->add_option("--clip-sgd", tr.train_cfg.clip_sgd)->capture_default_str();
  cmd_train->add_option("--batch-size", tr.train_cfg.batch_size)->capture_default_str();
  cmd_train->add_option("--patience", tr.train_cfg.patience)->capture_default_str();
  cmd_train->add_option("--dropout", tr.train_cfg.dropout)->capture_default_str();
  auto* opt_weight = cmd_train->add_option("--wfe-weight", tr.train_cfg.wfe_weight, "λ for the WFE loss")
                         ->capture_default_str();
  cmd_train->add_option("--seed", tr.train_cfg.seed)->envname("WFE_SEED")->capture_default_str();
  cmd_train->add_flag("--f32", tr.f32, "Store parameters as 32-bit floats");
  cmd_train->add_flag("--no-wfe", tr.no_wfe, "Train the pure baseline (λ = 0, no WFE parameters)")
      ->excludes(opt_weight)
      ->excludes(opt_bias);

  DecodeArgs dec;
  auto* cmd_dec = app.add_subcommand("decode", "Beam-search decode one input per line");
  cmd_dec->add_option("--model", dec.model)->capture_default_str();
  cmd_dec->add_option("--input", dec.input, "Source lines ('-' for stdin)")->capture_default_str();
  cmd_dec->add_option("--output", dec.output, "Write outputs here instead of stdout");
  cmd_dec->add_option("--src-vocab", dec.src_vocab)->capture_default_str();
  cmd_dec->add_option("--tgt-vocab", dec.tgt_vocab)->capture_default_str();
  cmd_dec->add_option("--mode", dec.mode)
      ->check(CLI::IsMember({"baseline", "wfe"}))->capture_default_str();
  cmd_dec->add_option("--beam", dec.beam, "Beam width K")->check(CLI::PositiveNumber)->capture_default_str();
  cmd_dec->add_option("--max-len", dec.max_len, "Output cap including EOS (0: 2|X|+5)")
      ->capture_default_str();
  cmd_dec->add_option("--trace", dec.trace, "Write per-step JSON lines to this file");

  EvalArgs ev;
  auto* cmd_eval = app.add_subcommand("eval", "ROUGE and repetition metrics");
  cmd_eval->add_option("--candidates", ev.candidates)->required();
  cmd_eval->add_option("--references", ev.references)->required();
  cmd_eval->add_option("--basis", ev.basis)
      ->check(CLI::IsMember({"recall", "precision", "f1"}))->capture_default_str();
  cmd_eval->add_option("--byte-limit", ev.byte_limit, "Truncate candidates to this many bytes");

  WfeEvalArgs we;
  auto* cmd_we = app.add_subcommand("wfe-eval", "Confusion matrix of quantized WFE estimates");
  cmd_we->add_option("--model", we.model)->capture_default_str();
  cmd_we->add_option("--data", we.data, "Corpus file")->capture_default_str();
  cmd_we->add_option("--src-vocab", we.src_vocab)->capture_default_str();
  cmd_we->add_option("--tgt-vocab", we.tgt_vocab)->capture_default_str();

  try {
    auto args = expand_config(argc, argv, {"data-gen", "train", "decode", "eval", "wfe-eval"});
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*cmd_gen) return run_data_gen(gen);
    if (*cmd_train) return run_train(tr);
    if (*cmd_dec) return run_decode(dec);
    if (*cmd_eval) return run_eval(ev);
    if (*cmd_we) return run_wfe_eval(we);
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << " (byte offset " << e.offset() << ")\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
