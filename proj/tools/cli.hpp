// SPDX-License-Identifier: Apache-2.0
//
// `msc` command-line verbs. Exit codes: 0 success, 1 usage or failed check,
// 2 missing/unreadable file, 3 configuration violation.
#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "msc/analysis.hpp"
#include "msc/decoding.hpp"
#include "msc/training.hpp"

namespace msc::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitMissingFile = 2;
inline constexpr int kExitConfig = 3;

namespace fs = std::filesystem;

struct Context {
  std::ostream& out;
  std::ostream& err;
};

/// Reads a dataset and checks its vocabulary fits the model.
struct LoadedData {
  Vocab vocab;
  std::vector<TextPair> text;
  std::vector<Pair> pairs;
};

inline LoadedData load_training_data(const std::string& path, const MscConfig& cfg) {
  LoadedData d;
  d.text = read_tsv(path);
  if (d.text.empty()) throw ConfigError("data", "dataset " + path + " is empty");
  d.vocab = Vocab::from_corpus(d.text);
  if (d.vocab.size() > cfg.vocab_size) {
    throw ConfigError("vocab_size", "dataset has " + std::to_string(d.vocab.size()) + " types but vocab_size=" +
                                        std::to_string(cfg.vocab_size));
  }
  d.pairs = encode_pairs(d.text, d.vocab);
  return d;
}

inline std::vector<std::string> source_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open input");
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto tab = line.find('\t');
    out.push_back(tab == std::string::npos ? line : line.substr(0, tab));
  }
  return out;
}

/// Checkpoint files of a directory in name (= step) order.
inline std::vector<std::string> list_checkpoints(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError(dir, "not a checkpoint directory");
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".msck") out.push_back(e.path().string());
  std::sort(out.begin(), out.end());
  return out;
}

inline std::string fixed(double x, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << x;
  return os.str();
}

inline Accuracy corpus_accuracy(const MscModel& model, const std::vector<Pair>& data) {
  NoGradScope no_grad;
  Accuracy acc;
  for (std::size_t start = 0; start < data.size(); start += 32) {
    std::vector<std::size_t> rows;
    for (std::size_t i = start; i < std::min(data.size(), start + 32); ++i) rows.push_back(i);
    Batch b = make_batch(data, rows);
    Accuracy a = token_accuracy(model.forward(b.src, b.tgt_in), b.tgt_out);
    acc.correct += a.correct;
    acc.total += a.total;
  }
  return acc;
}

inline double corpus_bleu_of(const MscModel& model, const std::vector<Pair>& data, std::size_t beam, double lenpen,
                             std::size_t max_len) {
  std::vector<TokenIds> hyps, refs;
  for (const auto& p : data) {
    hyps.push_back(beam_search(model, p.src, beam, lenpen, max_len).best.translation());
    refs.push_back(p.tgt);
  }
  return corpus_bleu(hyps, refs);
}

// ---------------------------------------------------------------------------
// verbs

inline int cmd_train(Context& c, const std::string& config, const std::string& data, const std::string& out_dir,
                     std::optional<std::size_t> steps, std::optional<std::uint64_t> seed) {
  RunConfig rc = load_run_config(config);
  if (steps) rc.train.max_steps = *steps;
  if (seed) rc.train.seed = *seed;
  LoadedData d = load_training_data(data, rc.model);
  MscModel model(rc.model, rc.train.seed);
  TrainOptions opt;
  opt.out_dir = out_dir;
  opt.vocab = d.vocab;
  TrainResult res = train_loop(model, rc.train, d.pairs, opt);
  c.out << "steps " << res.steps << '\n';
  if (!res.metrics.empty()) c.out << "final_loss " << format_double(res.metrics.back().loss) << '\n';
  for (const auto& p : res.checkpoints) c.out << "checkpoint " << p << '\n';
  return kExitOk;
}

inline int cmd_decode(Context& c, const std::string& ckpt, const std::string& input, std::size_t beam, double lenpen,
                      std::size_t max_len) {
  Checkpoint ck = load_checkpoint(ckpt);
  MscModel model = model_from_checkpoint(ck);
  Vocab vocab = checkpoint_vocab(ck);
  for (const auto& line : source_lines(input)) {
    TokenIds src = vocab.encode(split_words(line));
    if (src.empty()) {
      c.out << '\n';
      continue;
    }
    Hypothesis h = beam_search(model, src, beam, lenpen, max_len).best;
    c.out << join_words(vocab.decode(h.translation())) << '\n';
  }
  return kExitOk;
}

inline int cmd_eval(Context& c, const std::string& ckpt, const std::string& data, std::size_t beam, double lenpen,
                    std::size_t max_len) {
  Checkpoint ck = load_checkpoint(ckpt);
  MscModel model = model_from_checkpoint(ck);
  Vocab vocab = checkpoint_vocab(ck);
  auto pairs = encode_pairs(read_tsv(data), vocab);
  if (pairs.empty()) throw ConfigError("data", "dataset " + data + " is empty");
  c.out << "token_accuracy " << fixed(corpus_accuracy(model, pairs).rate(), 6) << '\n'
        << "bleu " << fixed(corpus_bleu_of(model, pairs, beam, lenpen, max_len), 2) << '\n';
  return kExitOk;
}

inline int cmd_difficulty(Context& c, const std::string& dir, std::size_t k, const std::string& data,
                          const std::string& out) {
  auto files = list_checkpoints(dir);
  if (k == 0) throw ConfigError("k", "must be at least 1");
  if (files.size() < k) {
    throw ConfigError("k", "asked for " + std::to_string(k) + " checkpoints, " + dir + " has " +
                               std::to_string(files.size()));
  }
  files.erase(files.begin(), files.end() - static_cast<std::ptrdiff_t>(k));
  std::vector<Checkpoint> cks;
  for (const auto& f : files) cks.push_back(load_checkpoint(f));
  std::vector<MscModel> models;
  for (const auto& ck : cks) models.push_back(model_from_checkpoint(ck));
  std::vector<const MscModel*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  Vocab vocab = checkpoint_vocab(cks.front());
  auto text = read_tsv(data);
  auto pairs = encode_pairs(text, vocab);
  auto records = score_corpus(ptrs, pairs);
  auto parts = split_by_difficulty(records);
  for (const auto& part : parts)
    for (const auto& r : part) records[r.id].label = r.label;
  write_difficulty_tsv(out, records);
  const char* suffix[] = {".simple", ".ordinary", ".difficult", ".challenging"};
  for (std::size_t g = 0; g < parts.size(); ++g) {
    std::ofstream f(out + suffix[g], std::ios::binary);
    if (!f) throw IoError(out + suffix[g], "cannot write split");
    for (const auto& r : parts[g]) f << join_words(text[r.id].first) << '\t' << join_words(text[r.id].second) << '\n';
    c.out << difficulty_labels()[g] << ' ' << parts[g].size() << '\n';
  }
  return kExitOk;
}

inline int cmd_gradnorms(Context& c, const std::string& config, const std::string& data, std::size_t steps,
                         const std::string& out, std::optional<std::uint64_t> seed) {
  RunConfig rc = load_run_config(config);
  if (seed) rc.train.seed = *seed;
  rc.train.max_steps = steps;
  LoadedData d = load_training_data(data, rc.model);
  MscModel model(rc.model, rc.train.seed);
  auto batches = batch_by_tokens(d.pairs, rc.train.tokens_per_batch, derive_seed(rc.train.seed, "epoch0"));
  std::vector<GradNormRecord> rows = grad_norms_at(model, batches.front(), rc.train.label_smoothing, 0);
  if (steps > 0) {
    TrainOptions opt;
    opt.keep_trace = true;
    opt.on_backward = [&](const StepView& v) {
      auto r = record_grad_norms(v.model, v.tape, v.trace, v.step);
      rows.insert(rows.end(), r.begin(), r.end());
    };
    train_loop(model, rc.train, d.pairs, opt);
  }
  write_grad_norms_csv(out, rows);
  c.out << "records " << rows.size() << '\n';
  return kExitOk;
}

inline int cmd_gradcheck(Context& c, const std::string& config, std::uint64_t seed) {
  RunConfig rc = load_run_config(config);
  bool ok = true;
  for (const auto& r : gradcheck_suite(rc.model, seed)) {
    ok = ok && r.passed;
    c.out << (r.passed ? "PASS " : "FAIL ") << r.name << " max_rel_error=" << format_double(r.max_rel_error)
          << " entries=" << r.entries << '\n';
  }
  return ok ? kExitOk : kExitFailure;
}

inline int cmd_decompose(Context& c, const std::string& ckpt, const std::string& data, std::size_t block) {
  Checkpoint ck = load_checkpoint(ckpt);
  MscModel model = model_from_checkpoint(ck);
  auto pairs = encode_pairs(read_tsv(data), checkpoint_vocab(ck));
  if (pairs.empty()) throw ConfigError("data", "dataset " + data + " is empty");
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < std::min<std::size_t>(8, pairs.size()); ++i) rows.push_back(i);
  Decomposition d = grad_path_decompose(model, make_batch(pairs, rows), block);
  c.out << "block " << d.block << '\n' << "full_norm " << format_double(l2_norm(d.full)) << '\n';
  for (const auto& [name, g] : d.by_consumer) c.out << name << "_norm " << format_double(l2_norm(g)) << '\n';
  c.out << "relative_residual " << format_double(d.relative_residual) << '\n';
  return kExitOk;
}

inline int cmd_average(Context& c, const std::vector<std::string>& paths, const std::string& out) {
  std::vector<Checkpoint> cks;
  for (const auto& p : paths) cks.push_back(load_checkpoint(p));
  save_checkpoint(out, average_checkpoints(cks));
  c.out << "averaged " << cks.size() << " checkpoints into " << out << '\n';
  return kExitOk;
}

inline int cmd_ablate(Context& c, const std::string& config, const std::string& flag, const std::string& data,
                      std::optional<std::size_t> steps, std::optional<std::uint64_t> seed) {
  RunConfig rc = load_run_config(config);
  if (steps) rc.train.max_steps = *steps;
  if (seed) rc.train.seed = *seed;
  rc.model.ablation(flag);  // rejects unknown names
  LoadedData d = load_training_data(data, rc.model);
  c.out << std::left << std::setw(34) << "variant" << std::setw(14) << "final_loss" << "token_accuracy\n";
  for (bool on : {false, true}) {
    MscConfig mc = rc.model;
    mc.ablation(flag) = on;
    MscModel model(mc, rc.train.seed);
    TrainResult res = train_loop(model, rc.train, d.pairs, {});
    const double acc = corpus_accuracy(model, d.pairs).rate();
    const std::string name = flag + (on ? "=true" : "=false");
    const double loss = res.metrics.empty() ? std::nan("") : res.metrics.back().loss;
    c.out << std::left << std::setw(34) << name << std::setw(14) << fixed(loss) << fixed(acc) << '\n';
  }
  return kExitOk;
}

inline int cmd_generate(Context& c, const std::string& task, std::size_t vocab, std::size_t min_len,
                        std::size_t max_len, std::size_t train, std::size_t valid, std::size_t test,
                        std::uint64_t seed, const std::string& out_dir) {
  TaskSpec spec{parse_task_kind(task), vocab, min_len, max_len, train, valid, test, seed};
  TaskData data = generate_task(spec);
  fs::create_directories(out_dir);
  Vocab v = Vocab::toy(vocab);
  write_tsv((fs::path(out_dir) / "train.tsv").string(), data.train, v);
  write_tsv((fs::path(out_dir) / "valid.tsv").string(), data.valid, v);
  write_tsv((fs::path(out_dir) / "test.tsv").string(), data.test, v);
  c.out << "train " << data.train.size() << " valid " << data.valid.size() << " test " << data.test.size() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Context ctx{out, err};
  CLI::App app{"Deep encoder-decoder Transformer toolkit for toy sequence tasks", "msc"};
  app.require_subcommand(1);

  std::string config, data, out_path, ckpt, input, ckpt_dir, flag, task = "substitution_translation";
  std::vector<std::string> ckpts;
  std::size_t steps = 0, beam = 5, max_len = 64, k = 1, block = 1;
  std::size_t vocab = 64, min_len = 4, gen_max_len = 16, n_train = 20000, n_valid = 500, n_test = 500;
  double lenpen = 1.0;
  std::uint64_t seed = 1;

  auto* train = app.add_subcommand("train", "train a model and write checkpoints");
  train->add_option("--config", config)->required();
  train->add_option("--data", data)->required();
  train->add_option("--out", out_path)->required();
  auto* train_steps = train->add_option("--steps", steps);
  auto* train_seed = train->add_option("--seed", seed);

  auto* decode = app.add_subcommand("decode", "translate one source per line");
  decode->add_option("--ckpt", ckpt)->required();
  decode->add_option("--input", input)->required();
  decode->add_option("--beam", beam);
  decode->add_option("--lenpen", lenpen);
  decode->add_option("--max-len", max_len);

  auto* eval = app.add_subcommand("eval", "token accuracy and corpus BLEU");
  eval->add_option("--ckpt", ckpt)->required();
  eval->add_option("--data", data)->required();
  eval->add_option("--beam", beam);
  eval->add_option("--lenpen", lenpen);
  eval->add_option("--max-len", max_len);

  auto* difficulty = app.add_subcommand("difficulty", "score and split a corpus by difficulty");
  difficulty->add_option("--ckpt-dir", ckpt_dir)->required();
  difficulty->add_option("--k", k)->required();
  difficulty->add_option("--data", data)->required();
  difficulty->add_option("--out", out_path)->required();

  auto* gradnorms = app.add_subcommand("gradnorms", "per-layer gradient norms while training");
  gradnorms->add_option("--config", config)->required();
  gradnorms->add_option("--data", data)->required();
  gradnorms->add_option("--steps", steps)->required();
  gradnorms->add_option("--out", out_path)->required();
  auto* gn_seed = gradnorms->add_option("--seed", seed);

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gradcheck->add_option("--config", config)->required();
  gradcheck->add_option("--seed", seed);

  auto* decompose = app.add_subcommand("decompose", "split dL/dB_e^n by consumer");
  decompose->add_option("--ckpt", ckpt)->required();
  decompose->add_option("--data", data)->required();
  decompose->add_option("--block", block)->required();

  auto* average = app.add_subcommand("average", "average checkpoints");
  average->add_option("--ckpts", ckpts)->required();
  average->add_option("--out", out_path)->required();

  auto* ablate = app.add_subcommand("ablate", "train with an ablation flag off and on");
  ablate->add_option("--config", config)->required();
  ablate->add_option("--flag", flag)->required();
  ablate->add_option("--data", data)->required();
  auto* ab_steps = ablate->add_option("--steps", steps);
  auto* ab_seed = ablate->add_option("--seed", seed);

  auto* generate = app.add_subcommand("generate", "write a toy task as train/valid/test TSV files");
  generate->add_option("--task", task);
  generate->add_option("--vocab", vocab);
  generate->add_option("--min-len", min_len);
  generate->add_option("--max-len", gen_max_len);
  generate->add_option("--train", n_train);
  generate->add_option("--valid", n_valid);
  generate->add_option("--test", n_test);
  generate->add_option("--seed", seed);
  generate->add_option("--out", out_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitFailure;
  }

  auto opt_size = [](CLI::Option* o, std::size_t v) { return o->count() ? std::optional<std::size_t>(v) : std::nullopt; };
  auto opt_seed = [&](CLI::Option* o) { return o->count() ? std::optional<std::uint64_t>(seed) : std::nullopt; };
  try {
    if (*train) return cmd_train(ctx, config, data, out_path, opt_size(train_steps, steps), opt_seed(train_seed));
    if (*decode) return cmd_decode(ctx, ckpt, input, beam, lenpen, max_len);
    if (*eval) return cmd_eval(ctx, ckpt, data, beam, lenpen, max_len);
    if (*difficulty) return cmd_difficulty(ctx, ckpt_dir, k, data, out_path);
    if (*gradnorms) return cmd_gradnorms(ctx, config, data, steps, out_path, opt_seed(gn_seed));
    if (*gradcheck) return cmd_gradcheck(ctx, config, seed);
    if (*decompose) return cmd_decompose(ctx, ckpt, data, block);
    if (*average) return cmd_average(ctx, ckpts, out_path);
    if (*ablate) return cmd_ablate(ctx, config, flag, data, opt_size(ab_steps, steps), opt_seed(ab_seed));
    if (*generate) {
      return cmd_generate(ctx, task, vocab, min_len, gen_max_len, n_train, n_valid, n_test, seed, out_path);
    }
  } catch (const IoError& e) {
    err << "error: " << e.path() << ": " << e.what() << '\n';
    return kExitMissingFile;
  } catch (const ConfigError& e) {
    err << "config error: " << e.field() << ": " << e.what() << '\n';
    return kExitConfig;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace msc::cli
