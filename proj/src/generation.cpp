#include "tempogen/generation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace tempogen {

namespace {

std::vector<double> cls_from_hidden(const Model& model, std::span<const double> hidden) {
  const Tensor& w = model.param("cls_head.w");
  const Tensor& b = model.param("cls_head.w_b");
  const std::size_t d = w.dim(0), c = w.dim(1);
  std::vector<double> out(b.data().begin(), b.data().end());
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += hidden[i] * w.data()[i * c + j];
  return out;
}

// Feeds ids[0..target START] and returns the logits for the first target slot.
std::vector<double> prime(IncrementalDecoder& dec, const layout::AssembledSequence& seq) {
  std::vector<double> logits;
  for (std::size_t p = 0; p <= seq.target->begin; ++p) logits = dec.step(seq.ids[p]);
  return logits;
}

// Feeds the positions after `from` (exclusive) up to the end; returns cls logits.
std::vector<double> finish(const Model& model, IncrementalDecoder& dec, const layout::AssembledSequence& seq) {
  while (dec.position() < seq.length()) dec.step(seq.ids[dec.position()]);
  return cls_from_hidden(model, dec.last_hidden());
}

}  // namespace

void SamplerConfig::validate() const {
  if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("top-p mass must lie in (0, 1]");
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
}

std::vector<double> nucleus_distribution(std::span<const double> logits, const SamplerConfig& cfg,
                                         std::span<const std::uint8_t> legal) {
  cfg.validate();
  const std::size_t V = logits.size();
  if (!legal.empty() && legal.size() != V) throw std::invalid_argument("legal mask size mismatch");
  std::vector<int> ids;
  for (std::size_t i = 0; i < V; ++i) {
    if (legal.empty() || legal[i]) {
      if (!std::isfinite(logits[i])) throw std::invalid_argument("non-finite logit");
      ids.push_back(static_cast<int>(i));
    }
  }
  if (ids.empty()) throw std::invalid_argument("no legal token to sample");
  std::vector<double> out(V, 0.0);
  if (cfg.greedy) {
    int best = ids.front();
    for (int i : ids)
      if (logits[i] > logits[best]) best = i;
    out[best] = 1.0;
    return out;
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (int i : ids) mx = std::max(mx, logits[i] / cfg.temperature);
  double z = 0.0;
  std::vector<double> prob(V, 0.0);
  for (int i : ids) z += prob[i] = std::exp(logits[i] / cfg.temperature - mx);
  for (int i : ids) prob[i] /= z;
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return prob[a] > prob[b]; });
  double cum = 0.0;
  std::size_t keep = 0;
  while (keep < ids.size()) {
    cum += prob[ids[keep++]];
    if (cum >= cfg.p) break;
  }
  double kept = 0.0;
  for (std::size_t k = 0; k < keep; ++k) kept += prob[ids[k]];
  for (std::size_t k = 0; k < keep; ++k) out[ids[k]] = prob[ids[k]] / kept;
  return out;
}

int top_p_sample(std::span<const double> logits, const SamplerConfig& cfg, std::mt19937_64& rng,
                 std::span<const std::uint8_t> legal) {
  const auto dist = nucleus_distribution(logits, cfg, legal);
  if (cfg.greedy) return static_cast<int>(std::max_element(dist.begin(), dist.end()) - dist.begin());
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double cum = 0.0;
  int last = -1;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] <= 0.0) continue;
    cum += dist[i];
    last = static_cast<int>(i);
    if (u < cum) return last;
  }
  return last;
}

GenerationResult generate_report(const Model& model, std::optional<std::span<const int>> previous_image,
                                 std::span<const int> current_image, std::optional<double> delta_days,
                                 const SamplerConfig& sampler, std::mt19937_64& rng, DecodeOptions options) {
  const auto& cfg = model.config();
  const auto space = cfg.token_space();
  const auto geometry = cfg.geometry();
  layout::SegmentInputs in;
  in.current_image.emplace(current_image.begin(), current_image.end());
  if (previous_image) in.previous_image.emplace(previous_image->begin(), previous_image->end());
  in.delta_days = delta_days;
  GenerationResult res;
  res.sequence = layout::assemble(in, layout::LayoutMode::infer_report, rng, space, geometry);
  auto& seq = res.sequence;

  const int stop = space.stop(layout::Modality::report);
  std::vector<std::uint8_t> legal(space.total(), 0);
  for (std::size_t w = 0; w < space.text_size; ++w) legal[w] = 1;
  legal[static_cast<std::size_t>(stop)] = 1;

  IncrementalDecoder dec(model, seq);
  auto logits = prime(dec, seq);
  const std::size_t first = seq.target->begin + 1;
  const std::size_t N_r = geometry.report_tokens;
  bool ended = false;
  for (std::size_t j = 0; j <= N_r && !ended; ++j) {
    if (options.record_logits) res.step_logits.push_back(logits);
    const int tok = top_p_sample(logits, sampler, rng, legal);
    if (j == N_r) {
      res.truncated = tok != stop;
      break;
    }
    if (tok == stop || tok == ReportVocab::kPad) {
      ended = true;
      break;
    }
    res.tokens.push_back(tok);
    seq.ids[first + j] = space.text(tok);
    logits = dec.step(seq.ids[first + j]);
  }
  // The rest of the segment is padding, then STOP, as laid out in training.
  for (std::size_t j = res.tokens.size(); j < N_r; ++j) seq.ids[first + j] = space.text(ReportVocab::kPad);
  seq.ids[first + N_r] = stop;
  res.cls_logits = finish(model, dec, seq);
  return res;
}

GenerationResult generate_image(const Model& model, std::span<const int> report,
                                std::optional<std::span<const int>> previous_image, std::optional<double> delta_days,
                                const SamplerConfig& sampler, std::mt19937_64& rng, DecodeOptions options) {
  const auto& cfg = model.config();
  const auto space = cfg.token_space();
  const auto geometry = cfg.geometry();
  layout::SegmentInputs in;
  in.report.emplace(report.begin(), report.end());
  if (previous_image) in.previous_image.emplace(previous_image->begin(), previous_image->end());
  in.delta_days = delta_days;
  GenerationResult res;
  res.sequence = layout::assemble(in, layout::LayoutMode::infer_image, rng, space, geometry);
  auto& seq = res.sequence;

  std::vector<std::uint8_t> legal(space.total(), 0);
  for (std::size_t k = 0; k < space.image_size; ++k) legal[static_cast<std::size_t>(space.image(static_cast<int>(k)))] = 1;

  IncrementalDecoder dec(model, seq);
  auto logits = prime(dec, seq);
  const std::size_t first = seq.target->begin + 1;
  for (std::size_t j = 0; j < geometry.image_tokens; ++j) {
    if (options.record_logits) res.step_logits.push_back(logits);
    const int tok = top_p_sample(logits, sampler, rng, legal);
    res.tokens.push_back(space.image_code(tok));
    seq.ids[first + j] = tok;
    logits = dec.step(tok);
  }
  seq.ids[first + geometry.image_tokens] = space.stop(layout::Modality::current_image);
  res.cls_logits = finish(model, dec, seq);
  return res;
}

double pixel_entropy(const ToyImage& img, std::size_t bins) {
  if (bins < 2) throw std::invalid_argument("pixel_entropy needs at least 2 bins");
  if (img.pixels.empty()) return 0.0;
  std::vector<std::size_t> hist(bins, 0);
  for (double p : img.pixels) {
    const double c = std::clamp(p, 0.0, 1.0);
    ++hist[std::min(bins - 1, static_cast<std::size_t>(c * static_cast<double>(bins)))];
  }
  const double n = static_cast<double>(img.pixels.size());
  double h = 0.0;
  for (auto count : hist) {
    if (count == 0) continue;
    const double q = static_cast<double>(count) / n;
    h -= q * std::log(q);
  }
  return std::max(0.0, h);
}

std::size_t select_max_entropy(std::span<const double> entropies) {
  if (entropies.empty()) throw EnsembleError("no ensemble member produced an image");
  std::size_t best = 0;
  for (std::size_t i = 1; i < entropies.size(); ++i)
    if (entropies[i] > entropies[best]) best = i;
  return best;
}

std::uint64_t member_seed(std::uint64_t seed, std::size_t member) {
  // splitmix64 finaliser over (seed, member)
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(member) + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

EnsembleResult ensemble_generate_image(const ImageRequest& request, std::span<const Checkpoint* const> members,
                                       const SamplerConfig& sampler) {
  if (members.empty()) throw EnsembleError("ensemble needs at least one checkpoint");
  EnsembleResult out;
  std::vector<ToyImage> images;
  std::vector<std::vector<int>> tokens;
  for (std::size_t i = 0; i < members.size(); ++i) {
    const Checkpoint& ck = *members[i];
    const auto& cfg = ck.config;
    const auto report = text_encode(request.report, ck.vocab);
    std::optional<std::vector<int>> prior;
    if (request.previous_image) prior = vq_encode(*request.previous_image, ck.codebook, cfg.patch);
    std::mt19937_64 rng(member_seed(sampler.seed, i));
    auto res = generate_image(ck.model, report,
                              prior ? std::optional<std::span<const int>>(*prior) : std::nullopt,
                              request.delta_days, sampler, rng);
    images.push_back(vq_decode(res.tokens, ck.codebook, cfg.patch, cfg.image_side, cfg.image_side));
    out.entropies.push_back(pixel_entropy(images.back()));
    tokens.push_back(std::move(res.tokens));
  }
  out.selected = select_max_entropy(out.entropies);
  out.image = images[out.selected];
  out.tokens = tokens[out.selected];
  return out;
}

EnsembleResult ensemble_generate_image(const ImageRequest& request, std::span<const std::filesystem::path> paths,
                                       const SamplerConfig& sampler) {
  std::vector<Checkpoint> loaded;
  std::vector<std::filesystem::path> kept;
  std::vector<std::string> warnings;
  for (const auto& p : paths) {
    try {
      loaded.push_back(load_checkpoint(p));
      kept.push_back(p);
    } catch (const std::exception& e) {
      warnings.push_back("skipping checkpoint " + p.string() + ": " + e.what());
    }
  }
  if (loaded.empty()) throw EnsembleError("no ensemble checkpoint could be loaded");
  std::vector<const Checkpoint*> ptrs;
  for (const auto& c : loaded) ptrs.push_back(&c);
  auto out = ensemble_generate_image(request, ptrs, sampler);
  out.warnings = std::move(warnings);
  out.members = std::move(kept);
  return out;
}

}  // namespace tempogen
