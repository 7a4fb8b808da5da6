#include "tempogen/evaluate.hpp"

#include "tempogen/metrics.hpp"

namespace tempogen {

namespace {

struct ReportRow {
  std::vector<metrics::Tokens> cands, refs;
  std::vector<int> pred_findings, true_findings;
  std::vector<int> pred_cls, true_cls;
  metrics::TokenMatch clause;
  std::size_t clause_records = 0;
  double rouge_sum = 0.0;
  std::size_t truncated = 0;
};

struct ImageRow {
  double ssim_sum = 0.0;
  double entropy_sum = 0.0;
  std::size_t n = 0;
};

nlohmann::json finish(const ReportRow& r) {
  nlohmann::json j;
  const auto n = r.cands.size();
  j["n"] = n;
  for (int k = 1; k <= 4; ++k) j["bleu" + std::to_string(k)] = metrics::corpus_bleu(r.cands, r.refs, k);
  j["rouge_l"] = r.rouge_sum / static_cast<double>(n);
  const auto lm = metrics::label_metrics(r.pred_findings, r.true_findings);
  j["label_precision"] = lm.precision;
  j["label_recall"] = lm.recall;
  j["label_f1"] = lm.f1;
  j["label_zero_division"] = lm.zero_division;
  const auto cm = metrics::label_metrics(r.pred_cls, r.true_cls);
  j["cls_precision"] = cm.precision;
  j["cls_recall"] = cm.recall;
  j["cls_f1"] = cm.f1;
  j["cls_zero_division"] = cm.zero_division;
  j["clause_records"] = r.clause_records;
  j["clause_accuracy"] = r.clause_records ? nlohmann::json(r.clause.accuracy()) : nlohmann::json(nullptr);
  j["truncated"] = r.truncated;
  return j;
}

std::uint64_t stream_seed(std::uint64_t seed, std::size_t record, std::size_t condition) {
  return member_seed(member_seed(seed, record), condition);
}

}  // namespace

Subset parse_subset(const std::string& name) {
  if (name == "with-prior") return Subset::with_prior;
  if (name == "without-prior") return Subset::without_prior;
  if (name == "all") return Subset::all;
  throw std::invalid_argument("unknown subset '" + name + "' (with-prior|without-prior|all)");
}

const char* to_string(Subset s) {
  switch (s) {
    case Subset::with_prior: return "with-prior";
    case Subset::without_prior: return "without-prior";
    case Subset::all: return "all";
  }
  return "?";
}

std::vector<std::size_t> subset_indices(std::span<const synth::StudyRecord> records, Subset subset) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const bool prior = synth::prior_index(records, i).has_value();
    if (subset == Subset::all || (subset == Subset::with_prior) == prior) out.push_back(i);
  }
  return out;
}

nlohmann::json evaluate_corpus(std::span<const synth::StudyRecord> records,
                               std::span<const Checkpoint* const> ensemble, const EvalOptions& options) {
  if (ensemble.empty()) throw std::invalid_argument("evaluation needs at least one checkpoint");
  options.sampler.validate();
  const auto indices = subset_indices(records, options.subset);
  if (indices.empty()) throw EmptySubset(std::string("subset '") + to_string(options.subset) + "' is empty");
  const Checkpoint& ck = *ensemble.back();
  const auto& cfg = ck.config;

  std::size_t with_prior = 0;
  for (auto i : indices) with_prior += synth::prior_index(records, i).has_value();

  // Conditions: 0 = without prior, 1 = with prior where available.
  ReportRow report_rows[2];
  ImageRow image_rows[2];
  for (auto i : indices) {
    const auto& rec = records[i];
    const auto p = synth::prior_index(records, i);
    const auto ref = synth::split_words(rec.report);
    const auto ref_clause = synth::temporal_clause(ref);
    const auto cur = vq_encode(rec.image, ck.codebook, cfg.patch);
    for (int cond = 0; cond < 2; ++cond) {
      if (cond == 1 && with_prior == 0) continue;
      const bool use_prior = cond == 1 && p.has_value();
      std::optional<std::vector<int>> prev;
      std::optional<double> delta;
      if (use_prior) {
        prev = vq_encode(records[*p].image, ck.codebook, cfg.patch);
        delta = rec.delta;
      }
      if (options.reports) {
        std::mt19937_64 rng(stream_seed(options.sampler.seed, i, 2 * static_cast<std::size_t>(cond)));
        const auto res = generate_report(ck.model, prev ? std::optional<std::span<const int>>(*prev) : std::nullopt,
                                         cur, delta, options.sampler, rng);
        const auto words = synth::split_words(text_decode(res.tokens, ck.vocab));
        auto& row = report_rows[cond];
        row.cands.push_back(words);
        row.refs.push_back(ref);
        row.rouge_sum += metrics::rouge_l(words, ref).f;
        const auto pf = synth::report_findings(words, rec.labels.size());
        const auto tf = synth::report_findings(ref, rec.labels.size());
        row.pred_findings.insert(row.pred_findings.end(), pf.begin(), pf.end());
        row.true_findings.insert(row.true_findings.end(), tf.begin(), tf.end());
        for (std::size_t l = 0; l < rec.labels.size(); ++l) {
          row.pred_cls.push_back(res.cls_logits[l] > 0.0 ? 1 : 0);
          row.true_cls.push_back(rec.labels[l]);
        }
        if (!ref_clause.empty()) {
          const auto m = metrics::token_match(synth::temporal_clause(words), ref_clause);
          row.clause.matched += m.matched;
          row.clause.total += m.total;
          ++row.clause_records;
        }
        row.truncated += res.truncated;
      }
      if (options.images) {
        ImageRequest req{rec.report, use_prior ? std::optional<ToyImage>(records[*p].image) : std::nullopt, delta};
        SamplerConfig s = options.sampler;
        s.seed = stream_seed(options.sampler.seed, i, 2 * static_cast<std::size_t>(cond) + 1);
        const auto res = ensemble_generate_image(req, ensemble, s);
        auto& row = image_rows[cond];
        row.ssim_sum += metrics::ssim(res.image, rec.image);
        row.entropy_sum += res.entropies[res.selected];
        ++row.n;
      }
    }
  }

  nlohmann::json out;
  out["subset"] = to_string(options.subset);
  out["n_records"] = indices.size();
  out["n_with_prior"] = with_prior;
  out["ensemble_size"] = ensemble.size();
  out["sampler"] = {{"p", options.sampler.p},
                    {"temperature", options.sampler.temperature},
                    {"greedy", options.sampler.greedy},
                    {"seed", options.sampler.seed}};
  nlohmann::json rows = nlohmann::json::object();
  const char* report_keys[2] = {"CR|CX", "CR|(PX,CX)"};
  const char* image_keys[2] = {"CX|CR", "CX|(CR,PX)"};
  for (int cond = 0; cond < 2; ++cond) {
    if (options.reports && !report_rows[cond].cands.empty()) rows[report_keys[cond]] = finish(report_rows[cond]);
    if (options.images && image_rows[cond].n > 0) {
      const double n = static_cast<double>(image_rows[cond].n);
      rows[image_keys[cond]] = {{"n", image_rows[cond].n},
                                {"ssim", image_rows[cond].ssim_sum / n},
                                {"pixel_entropy", image_rows[cond].entropy_sum / n}};
    }
  }
  out["rows"] = rows;
  return out;
}

}  // namespace tempogen
