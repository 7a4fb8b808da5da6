#include "tempogen/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace tempogen::metrics {

namespace {

using Gram = std::vector<std::string>;

std::map<Gram, std::size_t> ngram_counts(std::span<const std::string> toks, int n) {
  std::map<Gram, std::size_t> out;
  const auto len = static_cast<std::size_t>(n);
  for (std::size_t i = 0; i + len <= toks.size(); ++i) ++out[Gram(toks.begin() + i, toks.begin() + i + len)];
  return out;
}

// Clipped matches and candidate n-gram total for one order.
std::pair<std::size_t, std::size_t> clipped(std::span<const std::string> cand, std::span<const std::string> ref,
                                            int n) {
  const auto c = ngram_counts(cand, n);
  const auto r = ngram_counts(ref, n);
  std::size_t match = 0, total = 0;
  for (const auto& [g, k] : c) {
    total += k;
    auto it = r.find(g);
    if (it != r.end()) match += std::min(k, it->second);
  }
  return {match, total};
}

double combine(const std::vector<std::size_t>& match, const std::vector<std::size_t>& total, std::size_t c_len,
               std::size_t r_len) {
  if (c_len == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t i = 0; i < match.size(); ++i) {
    if (match[i] == 0 || total[i] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(match[i]) / static_cast<double>(total[i]));
  }
  const double bp = c_len >= r_len ? 1.0 : std::exp(1.0 - static_cast<double>(r_len) / static_cast<double>(c_len));
  return bp * std::exp(log_sum / static_cast<double>(match.size()));
}

void check_order(int n) {
  if (n < 1 || n > 4) throw std::invalid_argument("BLEU order must be in 1..4");
}

}  // namespace

double bleu_n(std::span<const std::string> candidate, std::span<const std::string> reference, int n) {
  check_order(n);
  if (reference.empty()) throw std::invalid_argument("BLEU reference must not be empty");
  std::vector<std::size_t> match, total;
  for (int k = 1; k <= n; ++k) {
    auto [m, t] = clipped(candidate, reference, k);
    match.push_back(m);
    total.push_back(t);
  }
  return combine(match, total, candidate.size(), reference.size());
}

double corpus_bleu(std::span<const Tokens> candidates, std::span<const Tokens> references, int n) {
  check_order(n);
  if (candidates.size() != references.size()) throw std::invalid_argument("corpus_bleu: size mismatch");
  std::vector<std::size_t> match(static_cast<std::size_t>(n), 0), total(static_cast<std::size_t>(n), 0);
  std::size_t c_len = 0, r_len = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (references[i].empty()) throw std::invalid_argument("BLEU reference must not be empty");
    for (int k = 1; k <= n; ++k) {
      auto [m, t] = clipped(candidates[i], references[i], k);
      match[static_cast<std::size_t>(k - 1)] += m;
      total[static_cast<std::size_t>(k - 1)] += t;
    }
    c_len += candidates[i].size();
    r_len += references[i].size();
  }
  return combine(match, total, c_len, r_len);
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeL rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference, double beta) {
  RougeL out;
  if (candidate.empty() || reference.empty()) return out;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return out;
  out.precision = lcs / static_cast<double>(candidate.size());
  out.recall = lcs / static_cast<double>(reference.size());
  const double b2 = beta * beta;
  out.f = (1.0 + b2) * out.precision * out.recall / (out.recall + b2 * out.precision);
  return out;
}

LabelScores label_metrics(std::span<const int> pred, std::span<const int> truth) {
  if (pred.size() != truth.size()) throw std::invalid_argument("label_metrics: size mismatch");
  LabelScores s;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, t = truth[i] != 0;
    s.tp += p && t;
    s.fp += p && !t;
    s.fn += !p && t;
  }
  auto ratio = [&](double num, double den) {
    if (den == 0.0) {
      s.zero_division = true;
      return 0.0;
    }
    return num / den;
  };
  s.precision = ratio(static_cast<double>(s.tp), static_cast<double>(s.tp + s.fp));
  s.recall = ratio(static_cast<double>(s.tp), static_cast<double>(s.tp + s.fn));
  s.f1 = ratio(2.0 * s.precision * s.recall, s.precision + s.recall);
  return s;
}

double ssim(const ToyImage& a, const ToyImage& b, std::size_t window) {
  if (a.height != b.height || a.width != b.width) throw std::invalid_argument("ssim: image dimensions differ");
  if (window == 0 || window > a.height || window > a.width) throw std::invalid_argument("ssim: bad window size");
  const double n = static_cast<double>(window * window);
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r + window <= a.height; ++r) {
    for (std::size_t c = 0; c + window <= a.width; ++c) {
      double sa = 0, sb = 0;
      for (std::size_t i = 0; i < window; ++i)
        for (std::size_t j = 0; j < window; ++j) {
          sa += a.at(r + i, c + j);
          sb += b.at(r + i, c + j);
        }
      const double ma = sa / n, mb = sb / n;
      double va = 0, vb = 0, cov = 0;
      for (std::size_t i = 0; i < window; ++i)
        for (std::size_t j = 0; j < window; ++j) {
          const double da = a.at(r + i, c + j) - ma, db = b.at(r + i, c + j) - mb;
          va += da * da;
          vb += db * db;
          cov += da * db;
        }
      va /= n;
      vb /= n;
      cov /= n;
      acc += ((2 * ma * mb + kSsimC1) * (2 * cov + kSsimC2)) /
             ((ma * ma + mb * mb + kSsimC1) * (va + vb + kSsimC2));
      ++count;
    }
  }
  return acc / static_cast<double>(count);
}

TokenMatch token_match(std::span<const std::string> candidate, std::span<const std::string> reference) {
  TokenMatch m;
  m.total = std::max(candidate.size(), reference.size());
  for (std::size_t i = 0; i < std::min(candidate.size(), reference.size()); ++i) m.matched += candidate[i] == reference[i];
  return m;
}

}  // namespace tempogen::metrics
