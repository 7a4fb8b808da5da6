#include "tempogen/synth.hpp"
#include "tempogen/tokenizers.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

using namespace tempogen;

namespace {

constexpr std::size_t kPatch = 4;

Codebook random_codebook(std::size_t K, std::size_t dim, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Codebook cb{K, dim, std::vector<double>(K * dim)};
  for (auto& v : cb.entries) v = u(rng);
  return cb;
}

ToyImage random_image(std::size_t side, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ToyImage img(side, side);
  for (auto& p : img.pixels) p = u(rng);
  return img;
}

// Image whose patch t is codebook entry ids[t].
ToyImage tile(const Codebook& cb, const std::vector<int>& ids, std::size_t side) {
  ToyImage img(side, side);
  const std::size_t gw = side / kPatch;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const auto e = cb.entry(static_cast<std::size_t>(ids[t]));
    for (std::size_t r = 0; r < kPatch; ++r)
      for (std::size_t c = 0; c < kPatch; ++c) img.at((t / gw) * kPatch + r, (t % gw) * kPatch + c) = e[r * kPatch + c];
  }
  return img;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("tempogen_tok_" + name);
}

}  // namespace

TEST(VectorQuantizer, TiledEntryEncodesToItsIndex) {
  std::mt19937_64 rng(1);
  const auto cb = random_codebook(16, kPatch * kPatch, rng);
  for (int k : {0, 7, 15}) {
    const auto img = tile(cb, std::vector<int>(64, k), 32);
    const auto ids = vq_encode(img, cb, kPatch);
    ASSERT_EQ(ids.size(), 64u);
    for (int id : ids) EXPECT_EQ(id, k);
  }
}

TEST(VectorQuantizer, HalfBlackHalfWhite) {
  Codebook cb{2, 16, std::vector<double>(32, 0.0)};
  std::fill(cb.entries.begin() + 16, cb.entries.end(), 1.0);
  ToyImage img(32, 32);
  for (std::size_t r = 16; r < 32; ++r)
    for (std::size_t c = 0; c < 32; ++c) img.at(r, c) = 1.0;
  const auto ids = vq_encode(img, cb, kPatch);
  for (std::size_t t = 0; t < ids.size(); ++t) EXPECT_EQ(ids[t], t < 32 ? 0 : 1) << t;
}

TEST(VectorQuantizer, MatchesBruteForceNearestNeighbour) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const auto cb = random_codebook(32, 16, rng);
    const auto img = random_image(32, rng);
    const auto ids = vq_encode(img, cb, kPatch);
    const auto patches = extract_patches(img, kPatch);
    for (std::size_t t = 0; t < patches.size(); ++t) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < cb.size; ++k) {
        double d = 0.0;
        for (std::size_t j = 0; j < 16; ++j) d += (patches[t][j] - cb.entries[k * 16 + j]) * (patches[t][j] - cb.entries[k * 16 + j]);
        if (d < best_d) best_d = d, best = k;
      }
      EXPECT_EQ(ids[t], static_cast<int>(best));
    }
  }
}

TEST(VectorQuantizer, RejectsDimensionMismatch) {
  std::mt19937_64 rng(3);
  const auto cb = random_codebook(4, 16, rng);
  EXPECT_THROW(vq_encode(ToyImage(30, 32), cb, kPatch), std::invalid_argument);
  EXPECT_THROW(vq_encode(ToyImage(32, 32), cb, 3), std::invalid_argument);
}

TEST(VectorQuantizer, DecodeOfEncodeOnGridIsIdentity) {
  std::mt19937_64 rng(4);
  const auto cb = random_codebook(8, 16, rng);
  std::vector<int> ids(64);
  for (auto& i : ids) i = static_cast<int>(rng() % 8);
  const auto img = tile(cb, ids, 32);
  EXPECT_EQ(vq_decode(vq_encode(img, cb, kPatch), cb, kPatch, 32, 32), img);
}

TEST(VectorQuantizer, ConstantTokensTileOneEntry) {
  std::mt19937_64 rng(5);
  const auto cb = random_codebook(8, 16, rng);
  const auto img = vq_decode(std::vector<int>(64, 3), cb, kPatch, 32, 32);
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t c = 0; c < 32; ++c) EXPECT_EQ(img.at(r, c), cb.entries[3 * 16 + (r % 4) * 4 + c % 4]);
}

TEST(VectorQuantizer, EncodeOfDecodeIsIdentity) {
  std::mt19937_64 rng(6);
  const auto cb = random_codebook(64, 16, rng);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> ids(64);
    for (auto& i : ids) i = static_cast<int>(rng() % 64);
    EXPECT_EQ(vq_encode(vq_decode(ids, cb, kPatch, 32, 32), cb, kPatch), ids);
  }
}

TEST(VectorQuantizer, DecodeClampsAndRejectsBadIds) {
  Codebook cb{2, 16, std::vector<double>(32, -0.5)};
  std::fill(cb.entries.begin() + 16, cb.entries.end(), 1.5);
  const auto img = vq_decode(std::vector<int>(64, 1), cb, kPatch, 32, 32);
  for (double p : img.pixels) EXPECT_EQ(p, 1.0);
  EXPECT_THROW(vq_decode(std::vector<int>(64, 2), cb, kPatch, 32, 32), std::out_of_range);
  EXPECT_THROW(vq_decode(std::vector<int>(63, 0), cb, kPatch, 32, 32), std::invalid_argument);
}

TEST(VectorQuantizer, DecodeEncodeIsAProjection) {
  std::mt19937_64 rng(7);
  const auto cb = random_codebook(32, 16, rng);
  const auto img = random_image(32, rng);
  const auto once = vq_decode(vq_encode(img, cb, kPatch), cb, kPatch, 32, 32);
  const auto twice = vq_decode(vq_encode(once, cb, kPatch), cb, kPatch, 32, 32);
  EXPECT_EQ(once, twice);
}

TEST(VectorQuantizer, StableUnderSmallPerturbation) {
  std::mt19937_64 rng(8);
  const auto cb = random_codebook(32, 16, rng);
  std::vector<int> ids(64);
  for (auto& i : ids) i = static_cast<int>(rng() % 32);
  const auto img = tile(cb, ids, 32);
  // Per-patch L2 norm of the perturbation stays below half the smallest gap.
  const double radius = 0.49 * cb.min_entry_gap();
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    ToyImage noisy = img;
    for (std::size_t t = 0; t < 64; ++t) {
      std::vector<double> dir(16);
      double norm = 0.0;
      for (auto& x : dir) norm += (x = nd(rng)) * x;
      norm = std::sqrt(norm);
      for (std::size_t j = 0; j < 16; ++j) noisy.at((t / 8) * 4 + j / 4, (t % 8) * 4 + j % 4) += radius * dir[j] / norm;
    }
    EXPECT_EQ(vq_encode(noisy, cb, kPatch), ids);
  }
}

TEST(Codebook, ValidateRejectsDuplicatesAndNonFinite) {
  Codebook dup{2, 16, std::vector<double>(32, 0.25)};
  EXPECT_THROW(dup.validate(), std::invalid_argument);
  Codebook bad{1, 16, std::vector<double>(16, 0.0)};
  bad.entries[3] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(FitCodebook, RecoversDistinctPatchValues) {
  std::mt19937_64 rng(9);
  const std::size_t K = 6;
  auto truth = random_codebook(K, 16, rng);
  std::vector<ToyImage> images;
  for (int i = 0; i < 10; ++i) {
    std::vector<int> ids(64);
    for (std::size_t t = 0; t < 64; ++t) ids[t] = static_cast<int>((t + static_cast<std::size_t>(i)) % K);
    images.push_back(tile(truth, ids, 32));
  }
  const auto cb = fit_codebook(images, K, kPatch, 11);
  ASSERT_EQ(cb.size, K);
  for (std::size_t k = 0; k < K; ++k) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < K; ++j) {
      double d = 0.0;
      for (std::size_t i = 0; i < 16; ++i) d = std::max(d, std::abs(truth.entries[k * 16 + i] - cb.entries[j * 16 + i]));
      best = std::min(best, d);
    }
    EXPECT_LT(best, 1e-9) << "entry " << k;
  }
  for (const auto& img : images) {
    const auto rec = vq_decode(vq_encode(img, cb, kPatch), cb, kPatch, 32, 32);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_NEAR(rec.pixels[i], img.pixels[i], 1e-9);
  }
}

TEST(FitCodebook, SingleClusterIsTheMeanPatch) {
  std::mt19937_64 rng(10);
  std::vector<ToyImage> images{random_image(32, rng), random_image(32, rng)};
  std::vector<double> mean(16, 0.0);
  std::size_t count = 0;
  for (const auto& img : images) {
    for (const auto& p : extract_patches(img, kPatch)) {
      for (std::size_t j = 0; j < 16; ++j) mean[j] += p[j];
      ++count;
    }
  }
  const auto cb = fit_codebook(images, 1, kPatch, 3);
  for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(cb.entries[j], mean[j] / static_cast<double>(count), 1e-12);
}

TEST(FitCodebook, DeterministicPerSeed) {
  std::mt19937_64 rng(12);
  std::vector<ToyImage> images{random_image(32, rng), random_image(32, rng), random_image(32, rng)};
  const auto a = fit_codebook(images, 16, kPatch, 5);
  const auto b = fit_codebook(images, 16, kPatch, 5);
  EXPECT_EQ(a.entries, b.entries);
  a.validate();
}

TEST(FitCodebook, RejectsTooFewDistinctPatches) {
  std::vector<ToyImage> images{ToyImage(32, 32, 0.5)};
  EXPECT_THROW(fit_codebook(images, 2, kPatch, 0), std::invalid_argument);
}

TEST(TextTokenizer, EmptyReport) {
  const auto vocab = synth::report_vocabulary();
  EXPECT_TRUE(text_encode("", vocab).empty());
  EXPECT_EQ(text_decode({}, vocab), "");
}

TEST(TextTokenizer, FiveWordReportUsesVocabularyFileIds) {
  const auto vocab = synth::report_vocabulary();
  const auto path = temp_path("vocab.txt");
  vocab.save(path);
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  auto line_of = [&](const std::string& w) {
    return static_cast<int>(std::find(lines.begin(), lines.end(), w) - lines.begin());
  };
  const std::vector<int> expected{line_of("disc"), line_of("seen"), line_of("bar"), line_of("seen"),
                                  line_of("unchanged")};
  EXPECT_EQ(text_encode("disc seen bar seen unchanged", vocab), expected);
  EXPECT_EQ(expected, (std::vector<int>{4, 8, 5, 8, 11}));
  std::filesystem::remove(path);
}

TEST(TextTokenizer, RoundTripsGrammarReports) {
  const auto vocab = synth::report_vocabulary();
  for (int mask = 0; mask < 16; ++mask) {
    std::vector<int> labels{mask & 1, (mask >> 1) & 1, (mask >> 2) & 1, (mask >> 3) & 1};
    for (int prior_mask = -1; prior_mask < 16; ++prior_mask) {
      std::string report;
      if (prior_mask < 0) {
        report = synth::compose_report(labels, std::nullopt);
      } else {
        std::vector<int> prior{prior_mask & 1, (prior_mask >> 1) & 1, (prior_mask >> 2) & 1, (prior_mask >> 3) & 1};
        report = synth::compose_report(labels, std::span<const int>(prior));
      }
      EXPECT_EQ(text_decode(text_encode(report, vocab), vocab), report);
    }
  }
}

TEST(TextTokenizer, OutOfVocabularyNamesTheWord) {
  const auto vocab = synth::report_vocabulary();
  try {
    text_encode("disc seen pneumothorax", vocab);
    FAIL() << "expected VocabularyError";
  } catch (const VocabularyError& e) {
    EXPECT_NE(std::string(e.what()).find("pneumothorax"), std::string::npos);
  }
}

TEST(TextTokenizer, DecodeDropsPadding) {
  const auto vocab = synth::report_vocabulary();
  const std::vector<int> ids{4, 8, ReportVocab::kPad, ReportVocab::kPad};
  EXPECT_EQ(text_decode(ids, vocab), "disc seen");
}

TEST(ReportVocabulary, SaveLoadRoundTrip) {
  const auto vocab = synth::report_vocabulary();
  const auto path = temp_path("vocab_rt.txt");
  vocab.save(path);
  EXPECT_EQ(ReportVocab::load(path), vocab);
  EXPECT_EQ(vocab.token(0), std::string(ReportVocab::kPadToken));
  std::filesystem::remove(path);
}

TEST(ReportVocabulary, RejectsDuplicates) {
  const std::vector<std::string> words{"a", "b", "a"};
  EXPECT_THROW(ReportVocab::from_words(words), VocabularyError);
}
