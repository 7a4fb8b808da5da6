#include "tempogen/layout.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace tempogen::layout {

std::size_t Geometry::grid_side() const {
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(image_tokens))));
  if (side * side != image_tokens || side == 0) {
    throw LayoutError("image token count " + std::to_string(image_tokens) + " is not a perfect square");
  }
  return side;
}

const char* to_string(SegmentKind kind) {
  switch (kind) {
    case SegmentKind::current_report: return "current_report";
    case SegmentKind::current_image: return "current_image";
    case SegmentKind::previous_image: return "previous_image";
    case SegmentKind::previous_pad: return "previous_pad";
  }
  return "?";
}

PositionalScheme scheme_of(SegmentKind kind) {
  switch (kind) {
    case SegmentKind::current_report: return PositionalScheme::sinusoidal_text;
    case SegmentKind::previous_pad: return PositionalScheme::learned_pad;
    default: return PositionalScheme::axial_image;
  }
}

// ---- token space -----------------------------------------------------------

int TokenSpace::text(int word) const {
  if (word < 0 || word >= static_cast<int>(text_size)) throw std::out_of_range("word id outside text vocabulary");
  return word;
}

int TokenSpace::image(int code) const {
  if (code < 0 || code >= static_cast<int>(image_size)) throw std::out_of_range("image code outside codebook");
  return static_cast<int>(text_size) + code;
}

int TokenSpace::temporal(int bucket) const {
  if (bucket < 0 || bucket >= kTemporalBuckets) throw std::out_of_range("temporal bucket out of range");
  return static_cast<int>(text_size + image_size) + bucket;
}

int TokenSpace::start(Modality m) const {
  return static_cast<int>(text_size + image_size) + kTemporalBuckets + 2 * static_cast<int>(m);
}
int TokenSpace::stop(Modality m) const { return start(m) + 1; }
int TokenSpace::segment_pad() const { return static_cast<int>(text_size + image_size) + kTemporalBuckets + 6; }
int TokenSpace::cls() const { return segment_pad() + 1; }
std::size_t TokenSpace::total() const { return static_cast<std::size_t>(cls()) + 1; }

bool TokenSpace::is_image(int id) const {
  return id >= static_cast<int>(text_size) && id < static_cast<int>(text_size + image_size);
}

int TokenSpace::image_code(int id) const {
  if (!is_image(id)) throw std::out_of_range("id " + std::to_string(id) + " is not an image token");
  return id - static_cast<int>(text_size);
}

// ---- sequences -------------------------------------------------------------

namespace {

Modality framing_of(SegmentKind kind) {
  switch (kind) {
    case SegmentKind::current_report: return Modality::report;
    case SegmentKind::current_image: return Modality::current_image;
    default: return Modality::previous_image;
  }
}

Region region_of(SegmentKind kind) {
  switch (kind) {
    case SegmentKind::current_report: return Region::report;
    case SegmentKind::current_image: return Region::current_image;
    case SegmentKind::previous_image: return Region::previous_image;
    case SegmentKind::previous_pad: return Region::previous_pad;
  }
  return Region::report;
}

}  // namespace

const SegmentSpan& AssembledSequence::span_of(SegmentKind kind) const {
  for (const auto& s : order) {
    if (s.kind == kind) return s;
  }
  throw LayoutError(std::string("sequence has no ") + to_string(kind) + " segment");
}

bool AssembledSequence::has_prior() const {
  for (const auto& s : order) {
    if (s.kind == SegmentKind::previous_image) return true;
  }
  return false;
}

int bucketize_delta(std::optional<double> delta_days) {
  if (!delta_days) return 0;
  const double d = *delta_days;
  if (!(d > 0.0)) throw LayoutError("time interval must be positive, got " + std::to_string(d));
  int bucket = 1;
  double edge = 1.0;
  while (d > edge && bucket < kTemporalBuckets - 1) {
    edge *= 2.0;
    ++bucket;
  }
  return bucket;
}

ModalitySegment make_segment(SegmentKind kind, std::span<const int> content, const TokenSpace& space,
                             const Geometry& geometry) {
  ModalitySegment seg{kind, {}, scheme_of(kind)};
  const Modality framing = framing_of(kind);
  seg.ids.push_back(space.start(framing));
  switch (kind) {
    case SegmentKind::current_report:
      if (content.size() > geometry.report_tokens) {
        throw LayoutError("report has " + std::to_string(content.size()) + " words; the layout holds " +
                          std::to_string(geometry.report_tokens));
      }
      for (int w : content) seg.ids.push_back(space.text(w));
      seg.ids.resize(1 + geometry.report_tokens, space.text(0));
      break;
    case SegmentKind::current_image:
    case SegmentKind::previous_image:
      if (content.size() != geometry.image_tokens) {
        throw LayoutError("image segment needs " + std::to_string(geometry.image_tokens) + " tokens, got " +
                          std::to_string(content.size()));
      }
      for (int c : content) seg.ids.push_back(space.image(c));
      break;
    case SegmentKind::previous_pad:
      seg.ids.resize(1 + geometry.image_tokens, space.segment_pad());
      break;
  }
  seg.ids.push_back(space.stop(framing));
  return seg;
}

AssembledSequence assemble(const SegmentInputs& in, LayoutMode mode, std::mt19937_64& rng, const TokenSpace& space,
                           const Geometry& geometry) {
  geometry.grid_side();
  if (in.previous_image.has_value() != in.delta_days.has_value()) {
    throw LayoutError("a time interval must accompany the previous image (and only then)");
  }
  if (mode == LayoutMode::infer_report && in.report) {
    throw LayoutError("infer_report: the report is the generation target and must not be provided");
  }
  if (mode == LayoutMode::infer_image && in.current_image) {
    throw LayoutError("infer_image: the current image is the generation target and must not be provided");
  }
  if (mode != LayoutMode::infer_report && !in.report) throw LayoutError("report segment is required");
  if (mode != LayoutMode::infer_image && !in.current_image) throw LayoutError("current image segment is required");

  const std::vector<int> report_placeholder;
  const std::vector<int> image_placeholder(geometry.image_tokens, 0);
  auto report = make_segment(SegmentKind::current_report, in.report ? *in.report : report_placeholder, space,
                             geometry);
  auto current = make_segment(SegmentKind::current_image,
                              in.current_image ? *in.current_image : image_placeholder, space, geometry);
  auto previous = in.previous_image
                      ? make_segment(SegmentKind::previous_image, *in.previous_image, space, geometry)
                      : make_segment(SegmentKind::previous_pad, {}, space, geometry);

  std::array<const ModalitySegment*, 3> segs{};
  switch (mode) {
    case LayoutMode::train: {
      segs = {&report, &current, &previous};
      for (std::size_t i = segs.size() - 1; i > 0; --i) {
        const auto j = std::uniform_int_distribution<std::size_t>(0, i)(rng);
        std::swap(segs[i], segs[j]);
      }
      break;
    }
    case LayoutMode::infer_report: segs = {&previous, &current, &report}; break;
    case LayoutMode::infer_image: segs = {&previous, &report, &current}; break;
  }

  AssembledSequence seq;
  seq.temporal_bucket = bucketize_delta(in.delta_days);
  const std::size_t L = geometry.total_length();
  seq.ids.reserve(L);
  seq.ids.push_back(space.temporal(seq.temporal_bucket));
  seq.tags.push_back({Region::temporal, 0});
  seq.loss_mask.push_back(0);
  for (std::size_t s = 0; s < segs.size(); ++s) {
    const auto& seg = *segs[s];
    seq.order[s] = {seg.kind, seq.ids.size(), seg.ids.size()};
    const Region region = region_of(seg.kind);
    const std::uint8_t scored = seg.kind == SegmentKind::previous_pad ? 0 : 1;
    for (std::size_t i = 0; i < seg.ids.size(); ++i) {
      seq.ids.push_back(seg.ids[i]);
      seq.tags.push_back({region, static_cast<std::uint16_t>(i)});
      seq.loss_mask.push_back(scored);
    }
  }
  seq.ids.push_back(space.cls());
  seq.tags.push_back({Region::cls, 0});
  seq.loss_mask.push_back(0);
  if (mode != LayoutMode::train) seq.target = seq.order[2];
  if (seq.ids.size() != L) throw std::logic_error("assembled sequence has unexpected length");
  return seq;
}

// ---- positional embeddings -------------------------------------------------

std::vector<double> sinusoid_table(std::size_t positions, std::size_t d_model) {
  std::vector<double> t(positions * d_model);
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t i = 0; i < d_model; ++i) {
      const double freq = std::pow(10000.0, static_cast<double>(i - i % 2) / static_cast<double>(d_model));
      const double a = static_cast<double>(p) / freq;
      t[p * d_model + i] = (i % 2 == 0) ? std::sin(a) : std::cos(a);
    }
  }
  return t;
}

PositionalPlan plan_positions(std::span<const AssembledSequence* const> batch, const Geometry& geometry,
                              std::size_t d_model) {
  const std::size_t side = geometry.grid_side();
  const std::size_t L = geometry.total_length();
  const auto text_sin = sinusoid_table(geometry.report_segment_length(), d_model);
  const auto global_sin = sinusoid_table(L, d_model);
  PositionalPlan plan;
  const std::size_t rows = batch.size() * L;
  plan.axial_row.assign(rows, -1);
  plan.axial_col.assign(rows, -1);
  plan.pad_slot.assign(rows, -1);
  plan.kind.assign(rows, -1);
  plan.fixed.assign(rows * d_model, 0.0);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& seq = *batch[b];
    if (seq.length() != L) throw LayoutError("sequence length does not match the layout geometry");
    for (std::size_t p = 0; p < L; ++p) {
      const std::size_t row = b * L + p;
      const auto tag = seq.tags[p];
      double* fixed = plan.fixed.data() + row * d_model;
      for (std::size_t j = 0; j < d_model; ++j) fixed[j] = global_sin[p * d_model + j];
      switch (tag.region) {
        case Region::report:
          plan.kind[row] = static_cast<int>(SegmentKind::current_report);
          for (std::size_t j = 0; j < d_model; ++j) fixed[j] += text_sin[tag.offset * d_model + j];
          break;
        case Region::current_image:
        case Region::previous_image:
          plan.kind[row] = static_cast<int>(tag.region == Region::current_image ? SegmentKind::current_image
                                                                                : SegmentKind::previous_image);
          if (tag.offset >= 1 && tag.offset <= geometry.image_tokens) {
            const std::size_t cell = tag.offset - 1u;
            plan.axial_row[row] = static_cast<int>(cell / side);
            plan.axial_col[row] = static_cast<int>(cell % side);
          }
          break;
        case Region::previous_pad:
          plan.kind[row] = static_cast<int>(SegmentKind::previous_pad);
          plan.pad_slot[row] = tag.offset;
          break;
        case Region::temporal:
        case Region::cls:
          break;
      }
    }
  }
  return plan;
}

Tensor positional_embed(std::span<const AssembledSequence* const> batch, const PositionalTables& tables,
                        const Geometry& geometry) {
  const std::size_t d = tables.axial_row.dim(1);
  if (tables.axial_row.dim(0) != geometry.grid_side() || tables.axial_col.shape() != tables.axial_row.shape()) {
    throw LayoutError("axial tables do not match the image grid");
  }
  auto plan = plan_positions(batch, geometry, d);
  const std::size_t rows = plan.kind.size();
  Tensor out = gather_rows(tables.axial_row, plan.axial_row);
  out = add(out, gather_rows(tables.axial_col, plan.axial_col));
  out = add(out, gather_rows(tables.pad_slots, plan.pad_slot));
  out = add(out, gather_rows(tables.kind, plan.kind));
  return add(out, Tensor::from({rows, d}, std::move(plan.fixed)));
}

Tensor positional_embed(const AssembledSequence& seq, const PositionalTables& tables, const Geometry& geometry) {
  const AssembledSequence* one[] = {&seq};
  return positional_embed(std::span<const AssembledSequence* const>(one), tables, geometry);
}

}  // namespace tempogen::layout
