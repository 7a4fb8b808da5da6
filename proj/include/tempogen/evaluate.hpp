#pragma once

// Corpus-level evaluation of both generation directions, with and without
// the prior scan. Rows are keyed "CR|CX", "CR|(PX,CX)", "CX|CR", "CX|(CR,PX)".

#include "tempogen/generation.hpp"
#include "tempogen/synth.hpp"
#include "tempogen/train.hpp"

#include <json.hpp>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tempogen {

enum class Subset { with_prior, without_prior, all };

Subset parse_subset(const std::string& name);  // with-prior | without-prior | all
const char* to_string(Subset s);

// Record indices of `records` belonging to the subset, in corpus order.
std::vector<std::size_t> subset_indices(std::span<const synth::StudyRecord> records, Subset subset);

struct EvalOptions {
  Subset subset = Subset::all;
  SamplerConfig sampler;
  bool reports = true;
  bool images = true;
};

class EmptySubset : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Reports are generated by the last member; images by the whole ensemble.
// The prior-conditioned rows use the prior whenever the record has one and
// are emitted only if the subset contains such records.
nlohmann::json evaluate_corpus(std::span<const synth::StudyRecord> records,
                               std::span<const Checkpoint* const> ensemble, const EvalOptions& options);

}  // namespace tempogen
