#pragma once

// Corpus tokenisation, the training loop, and checkpoint bundles (model +
// codebook + vocabulary in one container file).

#include "tempogen/layout.hpp"
#include "tempogen/model.hpp"
#include "tempogen/optim.hpp"
#include "tempogen/synth.hpp"
#include "tempogen/tokenizers.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tempogen {

struct TrainSettings {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  AdamWSettings optim;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::uint64_t seed = 0;
  std::size_t keep_last = 5;  // checkpoints written for the final epochs
  std::size_t kmeans_iterations = 50;

  void validate() const;
};

// One training / evaluation example: a study plus its prior, tokenised.
struct Sample {
  layout::SegmentInputs inputs;  // report, current image, optional prior + delta
  std::vector<int> labels;
  std::size_t record = 0;  // index into the source corpus
};

struct Checkpoint {
  ModelConfig config;
  Model model;
  Codebook codebook;
  ReportVocab vocab;
  nlohmann::json metadata = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Sorted distinct words of every report in the corpora.
ReportVocab vocab_from_corpus(std::span<const synth::StudyRecord> records);

Sample make_sample(std::span<const synth::StudyRecord> records, std::size_t index, const Codebook& codebook,
                   const ReportVocab& vocab, std::size_t patch, bool use_prior = true);
std::vector<Sample> tokenize(std::span<const synth::StudyRecord> records, const Codebook& codebook,
                             const ReportVocab& vocab, std::size_t patch);

struct EpochLoss {
  std::size_t epoch = 0;
  std::string split;
  double gen_ce = 0.0;
  double cls_bce = 0.0;
  double total = 0.0;
};

class NumericalError : public std::runtime_error {
 public:
  NumericalError(long step, double lr, double grad_norm);
  long step;
  double lr;
  double grad_norm;
};

// Mean loss over samples in eval mode (no dropout). Segment orders are drawn
// from a fixed stream seeded by `order_seed`, so repeated calls agree.
EpochLoss evaluate_loss(const Model& model, std::span<const Sample> samples, std::uint64_t order_seed,
                        std::size_t batch_size = 8);

inline constexpr std::size_t kInitialLossSamples = 64;

struct TrainResult {
  Model model;
  std::vector<EpochLoss> log;
  double initial_loss = 0.0;  // eval loss on the first kInitialLossSamples training samples, before any update
  long steps = 0;
};

// Called after every epoch with the 1-based epoch number.
using EpochCallback = std::function<void(std::size_t epoch, const Model& model)>;

TrainResult train_model(const ModelConfig& config, std::span<const Sample> train, std::span<const Sample> val,
                        const TrainSettings& settings, const EpochCallback& on_epoch = {});

// The full recipe: fit the codebook on training images, tokenise, train, and
// write checkpoints (epoch_XXX.ckpt for the last keep_last epochs) and
// loss.csv into `out_dir`. Returns the paths of the written checkpoints.
struct PipelineResult {
  std::vector<std::filesystem::path> checkpoints;
  std::vector<EpochLoss> log;
  double initial_loss = 0.0;
};

PipelineResult train_pipeline(const synth::Corpus& train, const synth::Corpus* val, ModelConfig config,
                              const TrainSettings& settings, const std::filesystem::path& out_dir);

void write_loss_csv(const std::filesystem::path& path, std::span<const EpochLoss> log);

}  // namespace tempogen
