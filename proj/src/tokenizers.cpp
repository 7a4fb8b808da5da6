#include "tempogen/tokenizers.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace tempogen {

namespace {

double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

std::size_t nearest(const double* x, const Codebook& cb) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < cb.size; ++k) {
    const double dd = sq_dist(x, cb.entries.data() + k * cb.dim, cb.dim);
    if (dd < best_d) {
      best_d = dd;
      best = k;
    }
  }
  return best;
}

void check_geometry(std::size_t height, std::size_t width, std::size_t patch, const Codebook& cb) {
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw std::invalid_argument("image " + std::to_string(height) + "x" + std::to_string(width) +
                                " is not divisible by patch " + std::to_string(patch));
  }
  if (cb.dim != patch * patch) {
    throw std::invalid_argument("codebook dim " + std::to_string(cb.dim) + " != patch^2 = " +
                                std::to_string(patch * patch));
  }
}

}  // namespace

void ToyImage::validate() const {
  if (pixels.size() != height * width) throw std::invalid_argument("image pixel count does not match its size");
  for (double p : pixels) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("image pixel outside [0,1]");
  }
}

void Codebook::validate() const {
  if (entries.size() != size * dim || size == 0) throw std::invalid_argument("codebook has inconsistent size");
  for (double v : entries) {
    if (!std::isfinite(v)) throw std::invalid_argument("codebook entry is not finite");
  }
  std::set<std::vector<double>> seen;
  for (std::size_t k = 0; k < size; ++k) {
    auto e = entry(k);
    if (!seen.emplace(e.begin(), e.end()).second) {
      throw std::invalid_argument("codebook entries " + std::to_string(k) + " duplicates an earlier entry");
    }
  }
}

double Codebook::min_entry_gap() const {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < size; ++a)
    for (std::size_t b = a + 1; b < size; ++b)
      best = std::min(best, std::sqrt(sq_dist(entries.data() + a * dim, entries.data() + b * dim, dim)));
  return best;
}

std::vector<std::vector<double>> extract_patches(const ToyImage& img, std::size_t patch) {
  if (patch == 0 || img.height % patch != 0 || img.width % patch != 0) {
    throw std::invalid_argument("image is not divisible by patch size");
  }
  std::vector<std::vector<double>> out;
  out.reserve((img.height / patch) * (img.width / patch));
  for (std::size_t pr = 0; pr < img.height / patch; ++pr) {
    for (std::size_t pc = 0; pc < img.width / patch; ++pc) {
      std::vector<double> v;
      v.reserve(patch * patch);
      for (std::size_t r = 0; r < patch; ++r)
        for (std::size_t c = 0; c < patch; ++c) v.push_back(img.at(pr * patch + r, pc * patch + c));
      out.push_back(std::move(v));
    }
  }
  return out;
}

std::vector<int> vq_encode(const ToyImage& img, const Codebook& cb, std::size_t patch) {
  check_geometry(img.height, img.width, patch, cb);
  std::vector<int> tokens;
  for (const auto& p : extract_patches(img, patch)) tokens.push_back(static_cast<int>(nearest(p.data(), cb)));
  return tokens;
}

ToyImage vq_decode(std::span<const int> tokens, const Codebook& cb, std::size_t patch, std::size_t height,
                   std::size_t width) {
  check_geometry(height, width, patch, cb);
  const std::size_t gw = width / patch;
  if (tokens.size() != (height / patch) * gw) {
    throw std::invalid_argument("vq_decode: expected " + std::to_string((height / patch) * gw) + " tokens, got " +
                                std::to_string(tokens.size()));
  }
  ToyImage img(height, width);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] < 0 || static_cast<std::size_t>(tokens[t]) >= cb.size) {
      throw std::out_of_range("vq_decode: token id " + std::to_string(tokens[t]) + " outside codebook of " +
                              std::to_string(cb.size));
    }
    const auto e = cb.entry(static_cast<std::size_t>(tokens[t]));
    const std::size_t pr = t / gw, pc = t % gw;
    for (std::size_t r = 0; r < patch; ++r)
      for (std::size_t c = 0; c < patch; ++c)
        img.at(pr * patch + r, pc * patch + c) = std::clamp(e[r * patch + c], 0.0, 1.0);
  }
  return img;
}

Codebook fit_codebook(std::span<const ToyImage> images, std::size_t K, std::size_t patch, std::uint64_t seed,
                      KMeansOptions options) {
  if (K == 0) throw std::invalid_argument("fit_codebook: K must be >= 1");
  const std::size_t D = patch * patch;
  std::vector<double> pts;
  for (const auto& img : images) {
    for (const auto& p : extract_patches(img, patch)) pts.insert(pts.end(), p.begin(), p.end());
  }
  const std::size_t n = pts.size() / (D ? D : 1);
  {
    std::set<std::vector<double>> distinct;
    for (std::size_t i = 0; i < n && distinct.size() < K; ++i)
      distinct.emplace(pts.begin() + static_cast<std::ptrdiff_t>(i * D),
                       pts.begin() + static_cast<std::ptrdiff_t>((i + 1) * D));
    if (distinct.size() < K) {
      throw std::invalid_argument("fit_codebook: need " + std::to_string(K) + " distinct patches, found " +
                                  std::to_string(distinct.size()));
    }
  }

  std::mt19937_64 rng(seed);
  Codebook cb;
  cb.size = K;
  cb.dim = D;
  cb.entries.assign(K * D, 0.0);
  // k-means++ seeding.
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  std::copy_n(pts.data() + first * D, D, cb.entries.data());
  for (std::size_t k = 1; k < K; ++k) {
    double total = 0.0;
    const double* last = cb.entries.data() + (k - 1) * D;
    for (std::size_t i = 0; i < n; ++i) {
      dist[i] = std::min(dist[i], sq_dist(pts.data() + i * D, last, D));
      total += dist[i];
    }
    double target = std::uniform_real_distribution<double>(0.0, total)(rng);
    std::size_t pick = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (dist[i] <= 0.0) continue;
      target -= dist[i];
      pick = i;
      if (target <= 0.0) break;
    }
    std::copy_n(pts.data() + pick * D, D, cb.entries.data() + k * D);
  }

  std::vector<std::size_t> assign(n, K);
  std::vector<double> sums(K * D);
  std::vector<std::size_t> counts(K);
  for (std::size_t iter = 0; iter < options.max_iterations; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t a = nearest(pts.data() + i * D, cb);
      if (a != assign[i]) {
        assign[i] = a;
        changed = true;
      }
    }
    if (!changed) break;
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[assign[i]];
      for (std::size_t j = 0; j < D; ++j) sums[assign[i] * D + j] += pts[i * D + j];
    }
    for (std::size_t k = 0; k < K; ++k) {
      if (counts[k] == 0) {
        // Re-seed an empty cluster at the point farthest from its centre.
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double dd = sq_dist(pts.data() + i * D, cb.entries.data() + assign[i] * D, D);
          if (dd > far_d) {
            far_d = dd;
            far = i;
          }
        }
        std::copy_n(pts.data() + far * D, D, cb.entries.data() + k * D);
        assign[far] = k;
        continue;
      }
      for (std::size_t j = 0; j < D; ++j) cb.entries[k * D + j] = sums[k * D + j] / static_cast<double>(counts[k]);
    }
  }
  cb.validate();
  return cb;
}

// ---- report vocabulary -----------------------------------------------------

ReportVocab ReportVocab::from_words(std::span<const std::string> words) {
  ReportVocab v;
  v.tokens_.emplace_back(kPadToken);
  v.tokens_.insert(v.tokens_.end(), words.begin(), words.end());
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    const auto& t = v.tokens_[i];
    if (t.empty() || t.find_first_of(" \t\n") != std::string::npos) {
      throw VocabularyError("vocabulary token must be a non-empty single word: '" + t + "'");
    }
    if (!v.ids_.emplace(t, static_cast<int>(i)).second) throw VocabularyError("duplicate vocabulary token: " + t);
  }
  return v;
}

ReportVocab ReportVocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary file " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  if (lines.empty() || lines.front() != kPadToken) {
    throw VocabularyError("vocabulary file must start with " + std::string(kPadToken));
  }
  return from_words(std::span<const std::string>(lines).subspan(1));
}

void ReportVocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocabulary file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

const std::string& ReportVocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

int ReportVocab::id(std::string_view word) const {
  auto it = ids_.find(std::string(word));
  if (it == ids_.end()) throw VocabularyError("out-of-vocabulary word: '" + std::string(word) + "'");
  return it->second;
}

bool ReportVocab::contains(std::string_view word) const { return ids_.count(std::string(word)) > 0; }

std::vector<int> text_encode(std::string_view report, const ReportVocab& vocab) {
  std::vector<int> ids;
  std::istringstream in{std::string(report)};
  std::string w;
  while (in >> w) ids.push_back(vocab.id(w));
  return ids;
}

std::string text_decode(std::span<const int> ids, const ReportVocab& vocab) {
  std::string out;
  for (int id : ids) {
    if (id == ReportVocab::kPad) continue;
    const auto& t = vocab.token(id);
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

}  // namespace tempogen
