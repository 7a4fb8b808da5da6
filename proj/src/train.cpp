#include "tempogen/train.hpp"

#include "tempogen/checkpoint.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

namespace tempogen {

namespace {

bool decays(const std::string& name) {
  // Weight matrices only; embeddings, norms, biases and positional tables are exempt.
  const auto dot = name.rfind('.');
  const std::string last = dot == std::string::npos ? name : name.substr(dot + 1);
  if (name.rfind("pos.", 0) == 0 || name == "tok_emb") return false;
  return !last.empty() && last[0] == 'w' && last.find("_b") == std::string::npos;
}

std::vector<const layout::AssembledSequence*> pointers(const std::vector<layout::AssembledSequence>& seqs) {
  std::vector<const layout::AssembledSequence*> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(&s);
  return out;
}

std::string epoch_name(std::size_t epoch) {
  std::ostringstream os;
  os << "epoch_" << std::setw(3) << std::setfill('0') << epoch << ".ckpt";
  return os.str();
}

}  // namespace

void TrainSettings::validate() const {
  if (epochs == 0) throw std::invalid_argument("epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (!(optim.lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (optim.weight_decay < 0.0) throw std::invalid_argument("weight decay must be non-negative");
}

NumericalError::NumericalError(long s, double l, double g)
    : std::runtime_error([&] {
        std::ostringstream os;
        os << "non-finite loss at step " << s << " (lr " << l << ", grad norm " << g << ")";
        return os.str();
      }()),
      step(s),
      lr(l),
      grad_norm(g) {}

// ---- checkpoints -----------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  Container c;
  c.config = ckpt.config.to_json();
  c.metadata = ckpt.metadata;
  c.metadata["vocab"] = ckpt.vocab.tokens();
  c.arrays = ckpt.model.to_arrays();
  c.arrays.push_back({"codebook", {ckpt.codebook.size, ckpt.codebook.dim}, ckpt.codebook.entries});
  write_container(path, c);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Container c = read_container(path);
  Checkpoint ckpt;
  try {
    ckpt.config = ModelConfig::from_json(c.config);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint config is malformed: " + std::string(e.what()));
  }
  ckpt.model = Model::from_arrays(ckpt.config, c.arrays);
  const auto& cb = c.array("codebook");
  if (cb.shape.size() != 2) throw CheckpointError("codebook array must be 2-D");
  ckpt.codebook = {cb.shape[0], cb.shape[1], cb.values};
  if (ckpt.codebook.size != ckpt.config.codebook_size ||
      ckpt.codebook.dim != ckpt.config.patch * ckpt.config.patch) {
    throw ConfigMismatch("checkpoint codebook does not match its config");
  }
  if (!c.metadata.contains("vocab")) throw CheckpointError("checkpoint has no vocabulary");
  const auto words = c.metadata.at("vocab").get<std::vector<std::string>>();
  if (words.empty() || words.front() != ReportVocab::kPadToken) {
    throw CheckpointError("checkpoint vocabulary must start with the padding token");
  }
  ckpt.vocab = ReportVocab::from_words(std::span<const std::string>(words).subspan(1));
  if (ckpt.vocab.size() != ckpt.config.text_vocab) throw ConfigMismatch("checkpoint vocabulary size mismatch");
  c.metadata.erase("vocab");
  ckpt.metadata = c.metadata;
  return ckpt;
}

// ---- tokenisation ----------------------------------------------------------

ReportVocab vocab_from_corpus(std::span<const synth::StudyRecord> records) {
  std::set<std::string> words;
  for (const auto& r : records)
    for (auto& w : synth::split_words(r.report)) words.insert(w);
  words.erase(std::string(ReportVocab::kPadToken));
  std::vector<std::string> sorted(words.begin(), words.end());
  return ReportVocab::from_words(sorted);
}

Sample make_sample(std::span<const synth::StudyRecord> records, std::size_t index, const Codebook& codebook,
                   const ReportVocab& vocab, std::size_t patch, bool use_prior) {
  const auto& r = records[index];
  Sample s;
  s.record = index;
  s.labels = r.labels;
  s.inputs.report = text_encode(r.report, vocab);
  s.inputs.current_image = vq_encode(r.image, codebook, patch);
  if (use_prior) {
    if (auto p = synth::prior_index(records, index)) {
      s.inputs.previous_image = vq_encode(records[*p].image, codebook, patch);
      s.inputs.delta_days = r.delta;
    }
  }
  return s;
}

std::vector<Sample> tokenize(std::span<const synth::StudyRecord> records, const Codebook& codebook,
                             const ReportVocab& vocab, std::size_t patch) {
  std::vector<Sample> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) out.push_back(make_sample(records, i, codebook, vocab, patch));
  return out;
}

// ---- training --------------------------------------------------------------

EpochLoss evaluate_loss(const Model& model, std::span<const Sample> samples, std::uint64_t order_seed,
                        std::size_t batch_size) {
  NoGradGuard guard;
  EpochLoss out;
  if (samples.empty()) return out;
  const auto& cfg = model.config();
  std::mt19937_64 rng(order_seed);
  double gen = 0.0, cls = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + batch_size);
    std::vector<layout::AssembledSequence> seqs;
    std::vector<int> labels;
    for (std::size_t i = start; i < end; ++i) {
      seqs.push_back(layout::assemble(samples[i].inputs, layout::LayoutMode::train, rng, cfg.token_space(),
                                      cfg.geometry()));
      labels.insert(labels.end(), samples[i].labels.begin(), samples[i].labels.end());
    }
    const auto ptrs = pointers(seqs);
    const auto lb = model.loss(ptrs, labels);
    const double w = static_cast<double>(end - start);
    gen += lb.gen_ce * w;
    cls += lb.cls_bce * w;
  }
  const double n = static_cast<double>(samples.size());
  out.gen_ce = gen / n;
  out.cls_bce = cls / n;
  out.total = out.gen_ce + cfg.lambda * out.cls_bce;
  return out;
}

TrainResult train_model(const ModelConfig& config, std::span<const Sample> train, std::span<const Sample> val,
                        const TrainSettings& settings, const EpochCallback& on_epoch) {
  settings.validate();
  if (train.empty()) throw std::invalid_argument("training set is empty");
  TrainResult result{Model::init(config, settings.seed), {}, 0.0, 0};
  Model& model = result.model;

  std::vector<Tensor> params;
  std::vector<bool> decay;
  for (const auto& p : model.params()) {
    params.push_back(p.tensor);
    decay.push_back(decays(p.name));
  }
  AdamW opt(params, settings.optim, decay);

  // Independent streams for epoch order, segment order and dropout.
  std::mt19937_64 order_rng(settings.seed * 4 + 1);
  std::mt19937_64 layout_rng(settings.seed * 4 + 2);
  std::mt19937_64 dropout_rng(settings.seed * 4 + 3);
  const std::uint64_t eval_seed = settings.seed * 4 + 4;

  result.initial_loss =
      evaluate_loss(model, train.first(std::min<std::size_t>(train.size(), kInitialLossSamples)), eval_seed,
                    settings.batch_size)
          .total;

  const std::size_t per_epoch = (train.size() + settings.batch_size - 1) / settings.batch_size;
  const long total_steps = static_cast<long>(per_epoch * settings.epochs);
  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 1; epoch <= settings.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[std::uniform_int_distribution<std::size_t>(0, i - 1)(order_rng)]);
    }
    double gen = 0.0, cls = 0.0;
    for (std::size_t start = 0; start < order.size(); start += settings.batch_size) {
      const std::size_t end = std::min(order.size(), start + settings.batch_size);
      std::vector<layout::AssembledSequence> seqs;
      std::vector<int> labels;
      for (std::size_t i = start; i < end; ++i) {
        const Sample& s = train[order[i]];
        seqs.push_back(layout::assemble(s.inputs, layout::LayoutMode::train, layout_rng, config.token_space(),
                                        config.geometry()));
        labels.insert(labels.end(), s.labels.begin(), s.labels.end());
      }
      const auto ptrs = pointers(seqs);
      const double mult = cosine_multiplier(opt.steps_taken(), total_steps);
      auto lb = model.loss(ptrs, labels, config.dropout > 0.0 ? &dropout_rng : nullptr);
      const double loss_value = lb.total.item();
      if (!std::isfinite(loss_value)) {
        throw NumericalError(opt.steps_taken(), settings.optim.lr * mult, std::nan(""));
      }
      backward(lb.total);
      const double norm = settings.clip_norm > 0.0 ? clip_grad_norm(params, settings.clip_norm) : grad_norm(params);
      if (!std::isfinite(norm)) throw NumericalError(opt.steps_taken(), settings.optim.lr * mult, norm);
      opt.step(mult);
      opt.zero_grad();
      const double w = static_cast<double>(end - start);
      gen += lb.gen_ce * w;
      cls += lb.cls_bce * w;
    }
    const double n = static_cast<double>(train.size());
    result.log.push_back({epoch, "train", gen / n, cls / n, gen / n + config.lambda * cls / n});
    if (!val.empty()) {
      auto v = evaluate_loss(model, val, eval_seed, settings.batch_size);
      v.epoch = epoch;
      v.split = "val";
      result.log.push_back(v);
    }
    if (on_epoch) on_epoch(epoch, model);
  }
  result.steps = opt.steps_taken();
  return result;
}

void write_loss_csv(const std::filesystem::path& path, std::span<const EpochLoss> log) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "epoch,split,gen_ce,cls_bce,total\n";
  os << std::setprecision(17);
  for (const auto& e : log) os << e.epoch << ',' << e.split << ',' << e.gen_ce << ',' << e.cls_bce << ',' << e.total << '\n';
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

PipelineResult train_pipeline(const synth::Corpus& train, const synth::Corpus* val, ModelConfig config,
                              const TrainSettings& settings, const std::filesystem::path& out_dir) {
  settings.validate();
  if (train.records.empty()) throw std::invalid_argument("training corpus is empty");
  std::vector<ToyImage> images;
  for (const auto& r : train.records) images.push_back(r.image);
  KMeansOptions km;
  km.max_iterations = settings.kmeans_iterations;
  Checkpoint proto;
  proto.codebook = fit_codebook(images, config.codebook_size, config.patch, settings.seed, km);
  proto.vocab = vocab_from_corpus(train.records);
  config.text_vocab = proto.vocab.size();
  config.image_side = train.records.front().image.height;
  config.labels = train.records.front().labels.size();
  config.validate();
  proto.config = config;

  const auto train_samples = tokenize(train.records, proto.codebook, proto.vocab, config.patch);
  std::vector<Sample> val_samples;
  if (val) val_samples = tokenize(val->records, proto.codebook, proto.vocab, config.patch);

  std::filesystem::create_directories(out_dir);
  PipelineResult out;
  const std::size_t first_kept = settings.epochs > settings.keep_last ? settings.epochs - settings.keep_last + 1 : 1;
  auto on_epoch = [&](std::size_t epoch, const Model& model) {
    if (epoch < first_kept || settings.keep_last == 0) return;
    Checkpoint ck = proto;
    ck.model = model;
    ck.metadata = {{"epoch", epoch}, {"seed", settings.seed}, {"epochs", settings.epochs}};
    const auto path = out_dir / epoch_name(epoch);
    save_checkpoint(path, ck);
    out.checkpoints.push_back(path);
  };
  auto result = train_model(config, train_samples, val_samples, settings, on_epoch);
  write_loss_csv(out_dir / "loss.csv", result.log);
  out.log = result.log;
  out.initial_loss = result.initial_loss;
  return out;
}

}  // namespace tempogen
