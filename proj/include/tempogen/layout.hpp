#pragma once

// Input-sequence assembly: temporal token first, three framed modality
// segments in the middle, cls token last.
//
//   [TT] [seg A: START ... STOP] [seg B: ...] [seg C: ...] [cls]
//
// Training draws a uniform random order of the three segments on every call;
// inference places the segment to be generated last. A missing previous scan
// is replaced by a padding segment of the same length, so the total length
// 1 + (N_r + 2) + 2 (N_x + 2) + 1 never varies.

#include "tempogen/tensor.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

namespace tempogen::layout {

inline constexpr int kTemporalBuckets = 9;

struct Geometry {
  std::size_t image_tokens = 64;   // N_x, a perfect square
  std::size_t report_tokens = 16;  // N_r, report words padded to this length

  std::size_t grid_side() const;  // throws unless image_tokens is a perfect square
  std::size_t image_segment_length() const { return image_tokens + 2; }
  std::size_t report_segment_length() const { return report_tokens + 2; }
  std::size_t total_length() const { return 1 + report_segment_length() + 2 * image_segment_length() + 1; }
};

enum class Modality : std::uint8_t { report = 0, current_image = 1, previous_image = 2 };
enum class SegmentKind : std::uint8_t { current_report = 0, current_image = 1, previous_image = 2, previous_pad = 3 };
enum class PositionalScheme : std::uint8_t { sinusoidal_text, axial_image, learned_pad };
enum class LayoutMode : std::uint8_t { train, infer_report, infer_image };

const char* to_string(SegmentKind kind);
PositionalScheme scheme_of(SegmentKind kind);

// Unified id space shared by the embedding table and the output softmax:
//   [words | image codes | TT buckets | START/STOP x3 | segment pad | cls]
struct TokenSpace {
  std::size_t text_size = 0;
  std::size_t image_size = 0;

  int text(int word) const;
  int image(int code) const;
  int temporal(int bucket) const;
  int start(Modality m) const;
  int stop(Modality m) const;
  int segment_pad() const;
  int cls() const;
  std::size_t total() const;

  bool is_text(int id) const { return id >= 0 && id < static_cast<int>(text_size); }
  bool is_image(int id) const;
  int image_code(int id) const;  // inverse of image(); throws if not an image id
};

struct ModalitySegment {
  SegmentKind kind;
  std::vector<int> ids;  // unified ids including framing
  PositionalScheme scheme;
};

struct SegmentSpan {
  SegmentKind kind;
  std::size_t begin = 0;  // position of the START token
  std::size_t length = 0;
};

// Which part of the sequence a position belongs to.
enum class Region : std::uint8_t { temporal, report, current_image, previous_image, previous_pad, cls };

struct PositionTag {
  Region region;
  std::uint16_t offset;  // index within the segment; 0 is the START token
};

struct AssembledSequence {
  std::vector<int> ids;
  std::vector<PositionTag> tags;
  // 1 where the token at this position is scored as a next-token target.
  std::vector<std::uint8_t> loss_mask;
  std::array<SegmentSpan, 3> order{};
  std::optional<SegmentSpan> target;  // the segment to generate (inference modes)
  int temporal_bucket = 0;

  std::size_t length() const { return ids.size(); }
  const SegmentSpan& span_of(SegmentKind kind) const;
  bool has_prior() const;
};

struct SegmentInputs {
  std::optional<std::vector<int>> report;          // word ids, unpadded
  std::optional<std::vector<int>> current_image;   // codebook ids
  std::optional<std::vector<int>> previous_image;  // codebook ids
  std::optional<double> delta_days;                // required iff previous_image is given
};

class LayoutError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// none -> 0; otherwise 1 for delta <= 1 day, 2 for <= 2, 3 for <= 4, ...,
// capped at 8 for delta > 64 days.
int bucketize_delta(std::optional<double> delta_days);

ModalitySegment make_segment(SegmentKind kind, std::span<const int> content, const TokenSpace& space,
                             const Geometry& geometry);

AssembledSequence assemble(const SegmentInputs& inputs, LayoutMode mode, std::mt19937_64& rng,
                           const TokenSpace& space, const Geometry& geometry);

// Standard transformer sinusoid: sin at even dims, cos at odd dims. [n, d].
std::vector<double> sinusoid_table(std::size_t positions, std::size_t d_model);

// Learned positional parameters.
struct PositionalTables {
  Tensor axial_row;  // [side, d]
  Tensor axial_col;  // [side, d]
  Tensor pad_slots;  // [N_x + 2, d]
  Tensor kind;       // [4, d], one row per SegmentKind
};

// Row indices into each learned table (-1 = no contribution) plus the fixed
// sinusoid part, for a batch of sequences laid out back to back.
struct PositionalPlan {
  std::vector<int> axial_row;
  std::vector<int> axial_col;
  std::vector<int> pad_slot;
  std::vector<int> kind;
  std::vector<double> fixed;  // text sinusoid over segment offset + global sinusoid over absolute position
};

PositionalPlan plan_positions(std::span<const AssembledSequence* const> batch, const Geometry& geometry,
                              std::size_t d_model);

// Per-position embeddings for the batch: [sum of lengths, d_model].
Tensor positional_embed(std::span<const AssembledSequence* const> batch, const PositionalTables& tables,
                        const Geometry& geometry);
Tensor positional_embed(const AssembledSequence& seq, const PositionalTables& tables, const Geometry& geometry);

}  // namespace tempogen::layout
