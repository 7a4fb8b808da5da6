#pragma once

// Autoregressive decoding in both directions: report from image(s) and image
// from report (+ prior image), with nucleus sampling and pixel-entropy
// selection across an ensemble of checkpoints.

#include "tempogen/model.hpp"
#include "tempogen/tokenizers.hpp"
#include "tempogen/train.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace tempogen {

struct SamplerConfig {
  double p = 0.9;
  double temperature = 0.7;
  bool greedy = false;
  std::uint64_t seed = 0;

  void validate() const;
};

// Kept, renormalised distribution over the vocabulary (zeros outside the
// nucleus). `legal`, when non-empty, zeroes every id with legal[id] == 0
// before the nucleus is formed. Greedy mode puts all mass on the argmax.
std::vector<double> nucleus_distribution(std::span<const double> logits, const SamplerConfig& cfg,
                                         std::span<const std::uint8_t> legal = {});

int top_p_sample(std::span<const double> logits, const SamplerConfig& cfg, std::mt19937_64& rng,
                 std::span<const std::uint8_t> legal = {});

struct GenerationResult {
  std::vector<int> tokens;  // word ids (report) or codebook ids (image)
  bool truncated = false;   // report hit the length limit without STOP
  std::vector<double> cls_logits;
  // Full sequence after decoding and the logits used at each sampled step
  // (recorded when requested).
  layout::AssembledSequence sequence;
  std::vector<std::vector<double>> step_logits;
};

struct DecodeOptions {
  bool record_logits = false;
};

// Inputs are tokenised; `previous_image` requires `delta_days`.
GenerationResult generate_report(const Model& model, std::optional<std::span<const int>> previous_image,
                                 std::span<const int> current_image, std::optional<double> delta_days,
                                 const SamplerConfig& sampler, std::mt19937_64& rng, DecodeOptions options = {});

GenerationResult generate_image(const Model& model, std::span<const int> report,
                                std::optional<std::span<const int>> previous_image, std::optional<double> delta_days,
                                const SamplerConfig& sampler, std::mt19937_64& rng, DecodeOptions options = {});

// Shannon entropy in nats of the histogram of pixels over `bins` uniform bins
// covering [0, 1].
double pixel_entropy(const ToyImage& img, std::size_t bins = 256);

// Raw (untokenised) inputs for the image direction.
struct ImageRequest {
  std::string report;
  std::optional<ToyImage> previous_image;
  std::optional<double> delta_days;
};

struct EnsembleResult {
  ToyImage image;
  std::vector<int> tokens;
  std::size_t selected = 0;            // index into the loaded members
  std::vector<double> entropies;       // one per loaded member
  std::vector<std::string> warnings;   // checkpoints that failed to load
  std::vector<std::filesystem::path> members;
};

// Index of the first maximum.
std::size_t select_max_entropy(std::span<const double> entropies);

// Member i samples with seed derived from (sampler.seed, i).
std::uint64_t member_seed(std::uint64_t seed, std::size_t member);

EnsembleResult ensemble_generate_image(const ImageRequest& request, std::span<const Checkpoint* const> members,
                                       const SamplerConfig& sampler);
// Loads each path; unloadable checkpoints are skipped with a warning and an
// error is raised when none load.
EnsembleResult ensemble_generate_image(const ImageRequest& request, std::span<const std::filesystem::path> paths,
                                       const SamplerConfig& sampler);

class EnsembleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tempogen
