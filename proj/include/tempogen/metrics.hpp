#pragma once

// Text, label and image metrics: BLEU-n, ROUGE-L, micro precision/recall/F1,
// SSIM, token accuracy.

#include "tempogen/tokenizers.hpp"

#include <span>
#include <string>
#include <vector>

namespace tempogen::metrics {

using Tokens = std::vector<std::string>;

// Single-reference sentence BLEU with uniform weights over 1..n and brevity
// penalty exp(1 - r/c) when c < r. No smoothing: any zero precision gives 0.
double bleu_n(std::span<const std::string> candidate, std::span<const std::string> reference, int n);

// Corpus BLEU: clipped n-gram counts and lengths pooled over all pairs before
// the geometric mean and brevity penalty.
double corpus_bleu(std::span<const Tokens> candidates, std::span<const Tokens> references, int n);

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

inline constexpr double kRougeBeta = 1.2;

struct RougeL {
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
};

// F = (1 + b^2) P R / (R + b^2 P) with P = LCS / |candidate|, R = LCS / |reference|.
RougeL rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference,
               double beta = kRougeBeta);

struct LabelScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;
  bool zero_division = false;  // some ratio had a zero denominator and was set to 0
};

// Micro-averaged over every (sample, label) pair; pred and truth hold the
// same number of entries laid out back to back.
LabelScores label_metrics(std::span<const int> pred, std::span<const int> truth);

inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

// Mean SSIM over all window x window patches at stride 1, uniform weights,
// population (1/N) variances and covariance.
double ssim(const ToyImage& a, const ToyImage& b, std::size_t window = 8);

// Fraction of reference positions whose token matches the candidate at the
// same index; the denominator is max(|candidate|, |reference|).
struct TokenMatch {
  std::size_t matched = 0;
  std::size_t total = 0;
  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(matched) / static_cast<double>(total); }
};
TokenMatch token_match(std::span<const std::string> candidate, std::span<const std::string> reference);

}  // namespace tempogen::metrics
