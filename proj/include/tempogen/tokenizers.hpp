#pragma once

// Toy image and report tokenizers: a patch-grid vector quantizer over a
// k-means codebook, and a closed word vocabulary.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tempogen {

// Grayscale image with pixels in [0, 1], row-major.
struct ToyImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  ToyImage() = default;
  ToyImage(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(h * w, fill) {}

  double& at(std::size_t r, std::size_t c) { return pixels[r * width + c]; }
  double at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }
  void validate() const;
  bool operator==(const ToyImage&) const = default;
};

// K x D matrix of quantization vectors, D = patch * patch.
struct Codebook {
  std::size_t size = 0;  // K
  std::size_t dim = 0;   // D
  std::vector<double> entries;

  std::span<const double> entry(std::size_t k) const { return {entries.data() + k * dim, dim}; }
  // Finite values and pairwise-distinct entries.
  void validate() const;
  // Smallest pairwise L2 distance between entries.
  double min_entry_gap() const;
};

// Patch vectors in row-major patch order; each patch is flattened row-major.
std::vector<std::vector<double>> extract_patches(const ToyImage& img, std::size_t patch);

std::vector<int> vq_encode(const ToyImage& img, const Codebook& cb, std::size_t patch);
ToyImage vq_decode(std::span<const int> tokens, const Codebook& cb, std::size_t patch, std::size_t height,
                   std::size_t width);

struct KMeansOptions {
  std::size_t max_iterations = 50;
};

// Seeded k-means (k-means++ initialisation, Lloyd iterations) over every
// patch of every image. Throws if fewer than K distinct patches exist.
Codebook fit_codebook(std::span<const ToyImage> images, std::size_t K, std::size_t patch, std::uint64_t seed,
                      KMeansOptions options = {});

// Word vocabulary; id 0 is the reserved padding token "<pad>".
class ReportVocab {
 public:
  static constexpr int kPad = 0;
  static constexpr std::string_view kPadToken = "<pad>";

  // Words are appended after the reserved padding token, in the given order.
  static ReportVocab from_words(std::span<const std::string> words);
  static ReportVocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const;
  int id(std::string_view word) const;  // throws on unknown word
  bool contains(std::string_view word) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool operator==(const ReportVocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

class VocabularyError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Whitespace tokenisation of lowercase, punctuation-free text.
std::vector<int> text_encode(std::string_view report, const ReportVocab& vocab);
// Joins words with single spaces; padding ids are dropped.
std::string text_decode(std::span<const int> ids, const ReportVocab& vocab);

}  // namespace tempogen
