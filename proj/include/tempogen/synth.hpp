#pragma once

// Synthetic longitudinal corpus with a known image <-> report <-> label rule.
//
// Each "pathology" is a bright glyph at a fixed quadrant (disc top-left, bar
// top-right, cross bottom-left, ring bottom-right) drawn over a patient-level
// background intensity plus per-study noise. Reports list the visible glyphs
// and, for a second study, a temporal clause derived from the label change:
// "new <glyph>" / "resolved <glyph>" per changed glyph, or "unchanged".

#include "tempogen/tokenizers.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tempogen::synth {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kRuleVersion = "glyph-quadrant-v1";
inline constexpr std::size_t kImageSide = 32;
inline constexpr std::size_t kMaxLabels = 4;
inline constexpr double kFlipProbability = 0.2;
inline constexpr double kGlyphIntensity = 0.95;
inline constexpr double kNoiseSigma = 0.03;

const std::vector<std::string>& glyph_names();  // disc, bar, cross, ring
// Report vocabulary of the grammar, in a fixed order.
const std::vector<std::string>& grammar_words();
ReportVocab report_vocabulary();

struct StudyRecord {
  std::string patient_id;
  int timestep = 0;
  ToyImage image;
  std::string report;
  std::vector<int> labels;
  std::optional<double> delta;  // days since the prior study

  bool operator==(const StudyRecord&) const = default;
};

struct CorpusManifest {
  int schema_version = kSchemaVersion;
  std::string split = "train";
  std::size_t n_patients = 0;
  std::size_t one_study_patients = 0;
  std::size_t two_study_patients = 0;
  std::size_t n_records = 0;
  std::uint64_t seed = 0;
  std::size_t labels = kMaxLabels;
  std::string rule_version = kRuleVersion;

  bool operator==(const CorpusManifest&) const = default;
};

struct Corpus {
  std::vector<StudyRecord> records;
  CorpusManifest manifest;
};

struct CorpusOptions {
  std::uint64_t seed = 0;
  std::size_t n_patients = 0;
  double two_study_fraction = 0.76;
  std::size_t labels = kMaxLabels;
  std::string split = "train";
  std::size_t first_patient = 0;  // global index offset, keeps ids disjoint across splits
};

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Exactly round(fraction * n_patients) patients receive two studies. Pure
// function of the options.
Corpus generate_corpus(const CorpusOptions& options);

struct SplitSizes {
  std::size_t train = 800;
  std::size_t val = 100;
  std::size_t test = 100;
};

// train / val / test corpora with disjoint patient ids.
std::vector<Corpus> generate_splits(std::uint64_t seed, SplitSizes sizes, double two_study_fraction,
                                    std::size_t labels = kMaxLabels);

// Renders a study image; labels[i] toggles glyph i.
ToyImage render_study(std::span<const int> labels, double background, std::uint64_t noise_seed);
// Pixel mask of glyph g in full-image coordinates.
std::vector<std::uint8_t> glyph_mask(std::size_t glyph);

std::string compose_report(std::span<const int> labels, std::optional<std::span<const int>> prior_labels);

// Inverse of the report grammar: glyph presence named in the findings part.
std::vector<int> labels_from_report(std::span<const std::string> words, std::size_t labels = kMaxLabels);
// Findings vector of a report: glyph presence (c), "new <glyph>" (c),
// "resolved <glyph>" (c), then "unchanged" (1).
std::vector<int> report_findings(std::span<const std::string> words, std::size_t labels = kMaxLabels);
// Words of the temporal clause (from the first new/resolved/unchanged).
std::vector<std::string> temporal_clause(std::span<const std::string> words);
std::vector<std::string> split_words(const std::string& text);

// Index of the record holding the previous study of records[i], if any.
std::optional<std::size_t> prior_index(std::span<const StudyRecord> records, std::size_t i);

// Manifest recount from records.
CorpusManifest recount(std::span<const StudyRecord> records, const CorpusManifest& base);

std::filesystem::path manifest_path(const std::filesystem::path& corpus_path);
// JSONL, one record per line, plus the sidecar manifest.
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);

}  // namespace tempogen::synth
