// tempogen: corpus synthesis, training, generation, evaluation, benchmarks.
//
// Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 I/O error.

#include "tempogen/bench.hpp"
#include "tempogen/checkpoint.hpp"
#include "tempogen/config.hpp"
#include "tempogen/evaluate.hpp"
#include "tempogen/generation.hpp"
#include "tempogen/image_io.hpp"
#include "tempogen/synth.hpp"
#include "tempogen/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace tempogen;

namespace {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

void make_out_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

// ---- synth -----------------------------------------------------------------

struct SynthArgs {
  std::uint64_t seed = 0;
  std::size_t patients = 800;
  std::optional<std::size_t> val_patients, test_patients;
  double fraction = 0.76;
  std::size_t labels = synth::kMaxLabels;
  std::string out;
};

int run_synth(const SynthArgs& a) {
  make_out_dir(a.out);
  synth::SplitSizes sizes{a.patients, a.val_patients.value_or(a.patients / 8), a.test_patients.value_or(a.patients / 8)};
  const auto corpora = synth::generate_splits(a.seed, sizes, a.fraction, a.labels);
  for (const auto& c : corpora) {
    const fs::path path = fs::path(a.out) / (c.manifest.split + ".jsonl");
    synth::save_corpus(c, path);
    const auto& m = c.manifest;
    std::cout << m.split << ": " << m.n_patients << " patients (" << m.one_study_patients << " one-study, "
              << m.two_study_patients << " two-study), " << m.n_records << " records -> " << path.string() << '\n';
  }
  return 0;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string corpus, config, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, batch_size, keep_last;
  std::optional<double> lr, lambda, dropout, weight_decay;
  bool force = false;
};

RunConfig resolve_config(const std::string& file) {
  RunConfig rc;
  if (!file.empty()) {
    if (!fs::exists(file)) throw IoError("config file not found: " + file);
    apply_key_values(read_key_values(file), rc);
  }
  return rc;
}

int run_train(const TrainArgs& a) {
  RunConfig rc = resolve_config(a.config);
  if (a.seed) rc.train.seed = *a.seed;
  if (a.epochs) rc.train.epochs = *a.epochs;
  if (a.batch_size) rc.train.batch_size = *a.batch_size;
  if (a.keep_last) rc.train.keep_last = *a.keep_last;
  if (a.lr) rc.train.optim.lr = *a.lr;
  if (a.lambda) rc.model.lambda = *a.lambda;
  if (a.dropout) rc.model.dropout = *a.dropout;
  if (a.weight_decay) rc.train.optim.weight_decay = *a.weight_decay;

  fs::path train_path = a.corpus, val_path;
  if (fs::is_directory(train_path)) {
    val_path = train_path / "val.jsonl";
    train_path /= "train.jsonl";
  }
  if (!fs::exists(train_path)) throw IoError("corpus not found: " + train_path.string());
  const auto train = synth::load_corpus(train_path);
  std::optional<synth::Corpus> val;
  if (!val_path.empty() && fs::exists(val_path)) val = synth::load_corpus(val_path);

  const fs::path out = a.out;
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!a.force) throw UsageError("output directory " + out.string() + " is not empty (use --force to overwrite)");
    for (const auto& e : fs::directory_iterator(out)) {
      const auto name = e.path().filename().string();
      if (name == "loss.csv" || name == "run_config.txt" || (name.rfind("epoch_", 0) == 0 && e.path().extension() == ".ckpt")) {
        fs::remove(e.path());
      }
    }
  }
  make_out_dir(out);
  std::string resolved;
  for (const auto& [k, v] : to_key_values(rc)) resolved += k + " = " + v + "\n";
  write_text(out / "run_config.txt", resolved);

  const auto result = train_pipeline(train, val ? &*val : nullptr, rc.model, rc.train, out);
  std::cout << "initial loss " << result.initial_loss << '\n';
  for (const auto& e : result.log) {
    std::cout << "epoch " << e.epoch << ' ' << e.split << " gen_ce " << e.gen_ce << " cls_bce " << e.cls_bce
              << " total " << e.total << '\n';
  }
  for (const auto& p : result.checkpoints) std::cout << "checkpoint " << p.string() << '\n';
  return 0;
}

// ---- generate --------------------------------------------------------------

struct SamplerArgs {
  std::uint64_t seed = 0;
  bool greedy = false;
  std::optional<double> top_p, temperature;

  SamplerConfig build() const {
    SamplerConfig s;
    s.seed = seed;
    s.greedy = greedy;
    if (top_p) s.p = *top_p;
    if (temperature) s.temperature = *temperature;
    s.validate();
    return s;
  }
};

struct GenerateArgs {
  std::string task, inputs, out;
  std::vector<std::string> ensemble;
  SamplerArgs sampler;
};

ToyImage load_image(const fs::path& base, const nlohmann::json& j, const char* key) {
  fs::path p = j.at(key).get<std::string>();
  if (p.is_relative()) p = base / p;
  return read_pgm(p);
}

int run_generate(const GenerateArgs& a) {
  const auto sampler = a.sampler.build();
  std::ifstream is(a.inputs);
  if (!is) throw IoError("cannot open inputs " + a.inputs);
  nlohmann::json in;
  try {
    in = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("malformed inputs JSON: " + std::string(e.what()));
  }
  const fs::path base = fs::path(a.inputs).parent_path();
  std::optional<ToyImage> prev;
  std::optional<double> delta;
  if (in.contains("previous_image")) prev = load_image(base, in, "previous_image");
  if (in.contains("delta_days") && !in.at("delta_days").is_null()) delta = in.at("delta_days").get<double>();
  if (prev.has_value() != delta.has_value()) {
    throw UsageError("previous_image and delta_days must be given together");
  }
  const fs::path out = a.out;

  if (a.task == "report") {
    if (!in.contains("current_image")) throw UsageError("report task needs current_image in the inputs");
    if (in.contains("report")) throw UsageError("report task must not be given a report");
    const auto ck = load_checkpoint(a.ensemble.back());
    const auto cur = vq_encode(load_image(base, in, "current_image"), ck.codebook, ck.config.patch);
    std::optional<std::vector<int>> prev_tokens;
    if (prev) prev_tokens = vq_encode(*prev, ck.codebook, ck.config.patch);
    std::mt19937_64 rng(member_seed(sampler.seed, 0));
    const auto res = generate_report(ck.model, prev_tokens ? std::optional<std::span<const int>>(*prev_tokens) : std::nullopt,
                                     cur, delta, sampler, rng);
    const auto text = text_decode(res.tokens, ck.vocab);
    make_out_dir(out);
    write_text(out / "report.txt", text + "\n");
    nlohmann::json j{{"task", "report"}, {"tokens", res.tokens}, {"text", text}, {"truncated", res.truncated},
                     {"checkpoint", a.ensemble.back()}};
    std::vector<double> probs;
    for (double z : res.cls_logits) probs.push_back(1.0 / (1.0 + std::exp(-z)));
    j["cls_probabilities"] = probs;
    write_text(out / "report.json", j.dump(2) + "\n");
    if (res.truncated) std::cerr << "warning: report reached the length limit without STOP\n";
    std::cout << text << '\n';
    return 0;
  }
  if (a.task == "image") {
    if (!in.contains("report")) throw UsageError("image task needs report in the inputs");
    if (in.contains("current_image")) throw UsageError("image task must not be given current_image");
    ImageRequest req{in.at("report").get<std::string>(), prev, delta};
    std::vector<fs::path> paths(a.ensemble.begin(), a.ensemble.end());
    const auto res = ensemble_generate_image(req, paths, sampler);
    for (const auto& w : res.warnings) std::cerr << "warning: " << w << '\n';
    make_out_dir(out);
    write_pgm(out / "image.pgm", res.image);
    std::vector<std::string> members;
    for (const auto& m : res.members) members.push_back(m.string());
    nlohmann::json j{{"task", "image"},       {"tokens", res.tokens},        {"selected", res.selected},
                     {"members", members},    {"entropies", res.entropies}, {"warnings", res.warnings}};
    write_text(out / "image.json", j.dump(2) + "\n");
    std::cout << "selected member " << res.selected << " (" << members[res.selected] << "), pixel entropy "
              << res.entropies[res.selected] << '\n';
    return 0;
  }
  throw UsageError("unknown task '" + a.task + "' (report|image)");
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string corpus, subset = "all", out;
  std::vector<std::string> checkpoints;
  SamplerArgs sampler;
  bool reports_only = false, images_only = false;
};

int run_eval(const EvalArgs& a) {
  EvalOptions opt;
  opt.subset = parse_subset(a.subset);
  opt.sampler = a.sampler.build();
  opt.reports = !a.images_only;
  opt.images = !a.reports_only;
  if (!fs::exists(a.corpus)) throw IoError("corpus not found: " + a.corpus);
  const auto corpus = synth::load_corpus(a.corpus);
  std::vector<Checkpoint> loaded;
  for (const auto& p : a.checkpoints) {
    try {
      loaded.push_back(load_checkpoint(p));
    } catch (const std::exception& e) {
      std::cerr << "warning: skipping checkpoint " << p << ": " << e.what() << '\n';
    }
  }
  if (loaded.empty()) throw IoError("no checkpoint could be loaded");
  std::vector<const Checkpoint*> ptrs;
  for (const auto& c : loaded) ptrs.push_back(&c);
  const auto report = evaluate_corpus(corpus.records, ptrs, opt);
  make_out_dir(a.out);
  write_text(fs::path(a.out) / "metrics.json", report.dump(2) + "\n");
  std::cout << report.at("rows").dump(2) << '\n';
  return 0;
}

// ---- bench -----------------------------------------------------------------

struct BenchArgs {
  std::vector<std::string> kernels{"favor", "exact"};
  std::vector<std::size_t> n{1024, 2048, 4096};
  std::size_t m = 256, d = 16, repeats = 5;
  std::string precision = "fp64", out;
  std::uint64_t seed = 0;
};

int run_bench(const BenchArgs& a) {
  favor::BenchSettings s;
  s.n_values = a.n;
  s.m = a.m;
  s.d = a.d;
  s.repeats = a.repeats;
  s.seed = a.seed;
  s.precision = a.precision == "fp32" ? favor::BenchPrecision::fp32 : favor::BenchPrecision::fp64;
  s.kernels.clear();
  for (const auto& k : a.kernels) s.kernels.push_back(k == "favor" ? favor::BenchKernel::favor : favor::BenchKernel::exact);
  std::cout << "n:";
  for (auto n : a.n) std::cout << ' ' << n;
  std::cout << '\n';
  const auto rows = favor::bench_scaling(s);
  make_out_dir(a.out);
  const fs::path path = fs::path(a.out) / "bench.csv";
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  favor::write_bench_csv(os, rows);
  favor::write_bench_csv(std::cout, rows);
  return 0;
}

void add_sampler_flags(CLI::App* cmd, SamplerArgs& s) {
  cmd->add_option("--seed", s.seed, "Sampling seed");
  cmd->add_flag("--greedy", s.greedy, "Argmax decoding");
  cmd->add_option("--top-p", s.top_p, "Nucleus mass (default 0.9)");
  cmd->add_option("--temperature", s.temperature, "Softmax temperature (default 0.7)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bidirectional longitudinal report/image generation with FAVOR+ attention"};
  app.require_subcommand(1);

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("synth", "Generate the synthetic train/val/test corpus");
  synth_cmd->add_option("--seed", synth_args.seed, "Generator seed");
  synth_cmd->add_option("--patients", synth_args.patients, "Training patients");
  synth_cmd->add_option("--val-patients", synth_args.val_patients, "Validation patients (default patients/8)");
  synth_cmd->add_option("--test-patients", synth_args.test_patients, "Test patients (default patients/8)");
  synth_cmd->add_option("--two-study-frac", synth_args.fraction, "Fraction of patients with two studies")
      ->check(CLI::Range(0.0, 1.0));
  synth_cmd->add_option("--labels", synth_args.labels, "Glyph pathologies")->check(CLI::Range(1, 4));
  synth_cmd->add_option("--out", synth_args.out, "Output directory")->required();

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write checkpoints and loss.csv");
  train_cmd->add_option("--corpus", train_args.corpus, "Corpus directory (train.jsonl, val.jsonl) or .jsonl file")
      ->required();
  train_cmd->add_option("--config", train_args.config, "key = value config file");
  train_cmd->add_option("--seed", train_args.seed, "Training seed");
  train_cmd->add_option("--epochs", train_args.epochs);
  train_cmd->add_option("--batch-size", train_args.batch_size);
  train_cmd->add_option("--keep-last", train_args.keep_last, "Checkpoints kept for the final epochs");
  train_cmd->add_option("--lr", train_args.lr);
  train_cmd->add_option("--lambda", train_args.lambda, "Weight of the classification loss");
  train_cmd->add_option("--dropout", train_args.dropout);
  train_cmd->add_option("--weight-decay", train_args.weight_decay);
  train_cmd->add_option("--out", train_args.out, "Output directory")->required();
  train_cmd->add_flag("--force", train_args.force, "Overwrite an existing run in --out");

  GenerateArgs gen_args;
  auto* gen_cmd = app.add_subcommand("generate", "Generate a report or an image");
  gen_cmd->add_option("--task", gen_args.task, "report | image")->required()->check(CLI::IsMember({"report", "image"}));
  gen_cmd->add_option("--inputs", gen_args.inputs, "JSON with current_image / previous_image / delta_days / report")
      ->required();
  gen_cmd->add_option("--ensemble", gen_args.ensemble, "Checkpoint paths (reports use the last)")->required();
  gen_cmd->add_option("--out", gen_args.out, "Output directory")->required();
  add_sampler_flags(gen_cmd, gen_args.sampler);

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate generation on a corpus");
  eval_cmd->add_option("--corpus", eval_args.corpus, "Corpus .jsonl")->required();
  eval_cmd->add_option("--checkpoints", eval_args.checkpoints, "Checkpoint paths")->required();
  eval_cmd->add_option("--subset", eval_args.subset, "with-prior | without-prior | all")
      ->check(CLI::IsMember({"with-prior", "without-prior", "all"}));
  eval_cmd->add_option("--out", eval_args.out, "Output directory")->required();
  eval_cmd->add_flag("--reports-only", eval_args.reports_only);
  eval_cmd->add_flag("--images-only", eval_args.images_only);
  add_sampler_flags(eval_cmd, eval_args.sampler);

  BenchArgs bench_args;
  auto* bench_cmd = app.add_subcommand("bench", "Time FAVOR+ against exact causal attention");
  bench_cmd->add_option("--kernel", bench_args.kernels, "favor and/or exact")
      ->check(CLI::IsMember({"favor", "exact"}));
  bench_cmd->add_option("--n", bench_args.n, "Sequence lengths");
  bench_cmd->add_option("--m", bench_args.m, "Random features");
  bench_cmd->add_option("--d", bench_args.d, "Head dimension");
  bench_cmd->add_option("--repeats", bench_args.repeats, "Timed repeats (>= 3)")->check(CLI::Range(3, 1000000));
  bench_cmd->add_option("--precision", bench_args.precision)->check(CLI::IsMember({"fp64", "fp32"}));
  bench_cmd->add_option("--seed", bench_args.seed);
  bench_cmd->add_option("--out", bench_args.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth_cmd) return run_synth(synth_args);
    if (*train_cmd) return run_train(train_args);
    if (*gen_cmd) return run_generate(gen_args);
    if (*eval_cmd) {
      if (eval_args.reports_only && eval_args.images_only) throw UsageError("--reports-only and --images-only conflict");
      return run_eval(eval_args);
    }
    if (*bench_cmd) return run_bench(bench_args);
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  } catch (const synth::CorpusError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  } catch (const EnsembleError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  }
  return 2;
}
