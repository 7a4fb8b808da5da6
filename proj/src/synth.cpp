#include "tempogen/synth.hpp"

#include "tempogen/image_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace tempogen::synth {

namespace {

constexpr std::size_t kQuadrant = kImageSide / 2;
constexpr double kBackgroundLevels[] = {0.15, 0.30, 0.45};
constexpr double kFirstStudyPositiveRate = 0.35;

std::mt19937_64 patient_rng(std::uint64_t seed, std::size_t patient, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(patient), static_cast<std::uint32_t>(patient >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

bool in_glyph(std::size_t glyph, double r, double c) {
  // Local coordinates inside the 16x16 quadrant, measured at pixel centres.
  const double dr = r - 7.5, dc = c - 7.5;
  const double dist = std::sqrt(dr * dr + dc * dc);
  switch (glyph) {
    case 0: return dist <= 5.5;                                           // disc
    case 1: return r >= 6 && r < 10 && c >= 1 && c < 15;                  // bar
    case 2: return (r >= 6 && r < 10 && c >= 2 && c < 14) ||              // cross
                   (c >= 6 && c < 10 && r >= 2 && r < 14);
    case 3: return dist >= 3.5 && dist <= 6.5;                            // ring
  }
  return false;
}

std::string patient_id(std::size_t index) {
  std::ostringstream os;
  os << 'p';
  os.width(6);
  os.fill('0');
  os << index;
  return os.str();
}

}  // namespace

const std::vector<std::string>& glyph_names() {
  static const std::vector<std::string> names{"disc", "bar", "cross", "ring"};
  return names;
}

const std::vector<std::string>& grammar_words() {
  static const std::vector<std::string> words{"no",   "acute", "findings", "disc",     "bar",      "cross",
                                              "ring", "seen",  "new",      "resolved", "unchanged"};
  return words;
}

ReportVocab report_vocabulary() { return ReportVocab::from_words(grammar_words()); }

std::vector<std::uint8_t> glyph_mask(std::size_t glyph) {
  if (glyph >= kMaxLabels) throw std::out_of_range("glyph index out of range");
  std::vector<std::uint8_t> mask(kImageSide * kImageSide, 0);
  const std::size_t r0 = (glyph / 2) * kQuadrant, c0 = (glyph % 2) * kQuadrant;
  for (std::size_t r = 0; r < kQuadrant; ++r)
    for (std::size_t c = 0; c < kQuadrant; ++c)
      if (in_glyph(glyph, static_cast<double>(r), static_cast<double>(c))) mask[(r0 + r) * kImageSide + c0 + c] = 1;
  return mask;
}

ToyImage render_study(std::span<const int> labels, double background, std::uint64_t noise_seed) {
  if (labels.size() > kMaxLabels) throw std::invalid_argument("at most 4 glyph labels are supported");
  ToyImage img(kImageSide, kImageSide, background);
  for (std::size_t g = 0; g < labels.size(); ++g) {
    if (!labels[g]) continue;
    const auto mask = glyph_mask(g);
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) img.pixels[i] = kGlyphIntensity;
  }
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> noise(0.0, kNoiseSigma);
  for (auto& p : img.pixels) p = std::clamp(p + noise(rng), 0.0, 1.0);
  return quantize_8bit(img);
}

std::string compose_report(std::span<const int> labels, std::optional<std::span<const int>> prior) {
  const auto& names = glyph_names();
  std::vector<std::string> words;
  for (std::size_t g = 0; g < labels.size(); ++g) {
    if (labels[g]) {
      words.push_back(names[g]);
      words.emplace_back("seen");
    }
  }
  if (words.empty()) words = {"no", "acute", "findings"};
  if (prior) {
    if (prior->size() != labels.size()) throw std::invalid_argument("prior label count mismatch");
    bool changed = false;
    for (std::size_t g = 0; g < labels.size(); ++g) {
      if (labels[g] == (*prior)[g]) continue;
      changed = true;
      words.emplace_back(labels[g] ? "new" : "resolved");
      words.push_back(names[g]);
    }
    if (!changed) words.emplace_back("unchanged");
  }
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

std::vector<int> labels_from_report(std::span<const std::string> words, std::size_t labels) {
  std::vector<int> out(labels, 0);
  const auto& names = glyph_names();
  for (std::size_t i = 0; i + 1 < words.size(); ++i) {
    if (words[i + 1] != "seen") continue;
    for (std::size_t g = 0; g < labels; ++g)
      if (words[i] == names[g]) out[g] = 1;
  }
  return out;
}

std::vector<int> report_findings(std::span<const std::string> words, std::size_t labels) {
  auto out = labels_from_report(words, labels);
  out.resize(3 * labels + 1, 0);
  const auto& names = glyph_names();
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (words[i] == "unchanged") out[3 * labels] = 1;
    if (i + 1 >= words.size()) continue;
    const std::size_t base = words[i] == "new" ? labels : words[i] == "resolved" ? 2 * labels : 0;
    if (base == 0) continue;
    for (std::size_t g = 0; g < labels; ++g)
      if (words[i + 1] == names[g]) out[base + g] = 1;
  }
  return out;
}

std::vector<std::string> temporal_clause(std::span<const std::string> words) {
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (words[i] == "new" || words[i] == "resolved" || words[i] == "unchanged") {
      return {words.begin() + static_cast<std::ptrdiff_t>(i), words.end()};
    }
  }
  return {};
}

Corpus generate_corpus(const CorpusOptions& o) {
  if (o.two_study_fraction < 0.0 || o.two_study_fraction > 1.0) {
    throw std::invalid_argument("two_study_fraction must lie in [0,1]");
  }
  if (o.labels < 1 || o.labels > kMaxLabels) throw std::invalid_argument("label count must be in [1,4]");
  Corpus corpus;
  auto& m = corpus.manifest;
  m.split = o.split;
  m.seed = o.seed;
  m.labels = o.labels;
  m.n_patients = o.n_patients;

  const auto n_two = static_cast<std::size_t>(std::llround(o.two_study_fraction * static_cast<double>(o.n_patients)));
  std::vector<std::size_t> order(o.n_patients);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 split_rng = patient_rng(o.seed, o.first_patient, 0xC0FFEE);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[std::uniform_int_distribution<std::size_t>(0, i - 1)(split_rng)]);
  }
  std::vector<bool> two(o.n_patients, false);
  for (std::size_t i = 0; i < n_two; ++i) two[order[i]] = true;

  for (std::size_t p = 0; p < o.n_patients; ++p) {
    const std::size_t global = o.first_patient + p;
    auto rng = patient_rng(o.seed, global, 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double background = kBackgroundLevels[std::uniform_int_distribution<int>(0, 2)(rng)];
    std::vector<int> labels(o.labels);
    for (auto& l : labels) l = unit(rng) < kFirstStudyPositiveRate ? 1 : 0;
    StudyRecord first;
    first.patient_id = patient_id(global);
    first.timestep = 0;
    first.labels = labels;
    first.image = render_study(labels, background, rng());
    first.report = compose_report(labels, std::nullopt);
    corpus.records.push_back(first);
    if (!two[p]) {
      ++m.one_study_patients;
      continue;
    }
    ++m.two_study_patients;
    StudyRecord second;
    second.patient_id = first.patient_id;
    second.timestep = 1;
    second.labels = labels;
    for (auto& l : second.labels) {
      if (unit(rng) < kFlipProbability) l = 1 - l;
    }
    second.delta = std::exp(unit(rng) * std::log(128.0));
    second.delta = std::clamp(*second.delta, 1.0, 128.0);
    second.image = render_study(second.labels, background, rng());
    second.report = compose_report(second.labels, std::span<const int>(first.labels));
    corpus.records.push_back(std::move(second));
  }
  m.n_records = corpus.records.size();
  return corpus;
}

std::vector<Corpus> generate_splits(std::uint64_t seed, SplitSizes sizes, double fraction, std::size_t labels) {
  std::vector<Corpus> out;
  std::size_t offset = 0;
  const std::pair<const char*, std::size_t> splits[] = {{"train", sizes.train}, {"val", sizes.val}, {"test", sizes.test}};
  for (const auto& [name, n] : splits) {
    out.push_back(generate_corpus({seed, n, fraction, labels, name, offset}));
    offset += n;
  }
  return out;
}

std::optional<std::size_t> prior_index(std::span<const StudyRecord> records, std::size_t i) {
  const auto& r = records[i];
  if (r.timestep == 0) return std::nullopt;
  // Studies of one patient are stored consecutively; fall back to a scan.
  if (i > 0 && records[i - 1].patient_id == r.patient_id && records[i - 1].timestep == r.timestep - 1) return i - 1;
  for (std::size_t j = 0; j < records.size(); ++j) {
    if (records[j].patient_id == r.patient_id && records[j].timestep == r.timestep - 1) return j;
  }
  return std::nullopt;
}

CorpusManifest recount(std::span<const StudyRecord> records, const CorpusManifest& base) {
  CorpusManifest m = base;
  std::map<std::string, int> studies;
  for (const auto& r : records) ++studies[r.patient_id];
  m.n_patients = studies.size();
  m.one_study_patients = 0;
  m.two_study_patients = 0;
  for (const auto& [id, n] : studies) (n >= 2 ? m.two_study_patients : m.one_study_patients)++;
  m.n_records = records.size();
  return m;
}

// ---- persistence -----------------------------------------------------------

std::filesystem::path manifest_path(const std::filesystem::path& corpus_path) {
  auto p = corpus_path;
  p.replace_extension(".manifest.json");
  return p;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw CorpusError("cannot write corpus " + path.string());
  for (const auto& r : corpus.records) {
    nlohmann::json j;
    j["schema_version"] = kSchemaVersion;
    j["patient_id"] = r.patient_id;
    j["timestep"] = r.timestep;
    j["height"] = r.image.height;
    j["width"] = r.image.width;
    j["image"] = base64_encode(to_bytes(r.image));
    j["report"] = r.report;
    j["labels"] = r.labels;
    j["delta"] = r.delta ? nlohmann::json(*r.delta) : nlohmann::json(nullptr);
    os << j.dump() << '\n';
  }
  const auto& m = corpus.manifest;
  nlohmann::json mj{{"schema_version", m.schema_version},
                    {"split", m.split},
                    {"n_patients", m.n_patients},
                    {"one_study_patients", m.one_study_patients},
                    {"two_study_patients", m.two_study_patients},
                    {"n_records", m.n_records},
                    {"seed", m.seed},
                    {"labels", m.labels},
                    {"rule_version", m.rule_version}};
  std::ofstream ms(manifest_path(path), std::ios::trunc);
  if (!ms) throw CorpusError("cannot write manifest for " + path.string());
  ms << mj.dump(2) << '\n';
  if (!os || !ms) throw CorpusError("failed writing corpus " + path.string());
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw CorpusError("cannot open corpus " + path.string());
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.at("schema_version").get<int>() != kSchemaVersion) throw CorpusError("unsupported schema version");
      StudyRecord r;
      r.patient_id = j.at("patient_id").get<std::string>();
      r.timestep = j.at("timestep").get<int>();
      const auto h = j.at("height").get<std::size_t>();
      const auto w = j.at("width").get<std::size_t>();
      r.image = from_bytes(base64_decode(j.at("image").get<std::string>()), h, w);
      r.report = j.at("report").get<std::string>();
      r.labels = j.at("labels").get<std::vector<int>>();
      if (!j.at("delta").is_null()) {
        r.delta = j.at("delta").get<double>();
        if (!(*r.delta > 0.0)) throw CorpusError("delta must be positive");
      }
      corpus.records.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw CorpusError(path.string() + ":" + std::to_string(line_no) + ": malformed record: " + e.what());
    }
  }
  const auto mpath = manifest_path(path);
  std::ifstream ms(mpath);
  if (!ms) throw CorpusError("missing manifest " + mpath.string());
  try {
    const auto mj = nlohmann::json::parse(ms);
    auto& m = corpus.manifest;
    m.schema_version = mj.at("schema_version");
    if (m.schema_version != kSchemaVersion) throw CorpusError("unsupported manifest schema version");
    m.split = mj.at("split");
    m.n_patients = mj.at("n_patients");
    m.one_study_patients = mj.at("one_study_patients");
    m.two_study_patients = mj.at("two_study_patients");
    m.n_records = mj.at("n_records");
    m.seed = mj.at("seed");
    m.labels = mj.at("labels");
    m.rule_version = mj.at("rule_version");
  } catch (const nlohmann::json::exception& e) {
    throw CorpusError("malformed manifest " + mpath.string() + ": " + e.what());
  }
  return corpus;
}

}  // namespace tempogen::synth
