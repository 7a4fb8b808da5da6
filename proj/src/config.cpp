#include "tempogen/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <type_traits>

namespace tempogen {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

// Shortest text that parses back to the same value.
template <typename T>
std::string show(const T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
  }
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define TG_SIZE(key, expr)                                                                              \
  {key, {[](RunConfig& c, const std::string& k, const std::string& v) { c.expr = parse_number<std::size_t>(k, v); }, \
         [](const RunConfig& c) { return show(c.expr); }}}
#define TG_U64(key, expr)                                                                                  \
  {key, {[](RunConfig& c, const std::string& k, const std::string& v) { c.expr = parse_number<std::uint64_t>(k, v); }, \
         [](const RunConfig& c) { return show(c.expr); }}}
#define TG_DOUBLE(key, expr)                                                                          \
  {key, {[](RunConfig& c, const std::string& k, const std::string& v) { c.expr = parse_number<double>(k, v); }, \
         [](const RunConfig& c) { return show(c.expr); }}}
#define TG_BOOL(key, expr)                                                                      \
  {key, {[](RunConfig& c, const std::string& k, const std::string& v) { c.expr = parse_bool(k, v); }, \
         [](const RunConfig& c) { return show(c.expr); }}}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table{
      TG_SIZE("d_model", model.d_model),
      TG_SIZE("n_layers", model.n_layers),
      TG_SIZE("n_heads", model.n_heads),
      TG_SIZE("m_features", model.m_features),
      TG_SIZE("mlp_ratio", model.mlp_ratio),
      TG_SIZE("codebook_size", model.codebook_size),
      TG_SIZE("patch", model.patch),
      TG_SIZE("report_tokens", model.report_tokens),
      TG_DOUBLE("lambda", model.lambda),
      TG_DOUBLE("dropout", model.dropout),
      TG_DOUBLE("stabilizer", model.stabilizer),
      TG_BOOL("orthogonal_features", model.orthogonal_features),
      TG_U64("feature_seed", model.feature_seed),
      TG_SIZE("epochs", train.epochs),
      TG_SIZE("batch_size", train.batch_size),
      TG_DOUBLE("lr", train.optim.lr),
      TG_DOUBLE("beta1", train.optim.beta1),
      TG_DOUBLE("beta2", train.optim.beta2),
      TG_DOUBLE("adam_eps", train.optim.eps),
      TG_DOUBLE("weight_decay", train.optim.weight_decay),
      TG_DOUBLE("clip_norm", train.clip_norm),
      TG_SIZE("keep_last", train.keep_last),
      TG_SIZE("kmeans_iterations", train.kmeans_iterations),
      TG_U64("seed", train.seed),
      TG_DOUBLE("top_p", sampler.p),
      TG_DOUBLE("temperature", sampler.temperature),
      TG_BOOL("greedy", sampler.greedy),
  };
  return table;
}

#undef TG_SIZE
#undef TG_U64
#undef TG_DOUBLE
#undef TG_BOOL

}  // namespace

KeyValues parse_key_values(const std::string& text) {
  KeyValues out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const auto key = trim(t.substr(0, eq));
    const auto value = trim(t.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    if (out.count(key)) throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    out[key] = value;
  }
  return out;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_key_values(ss.str());
}

void apply_key_values(const KeyValues& values, RunConfig& config) {
  const auto& table = fields();
  for (const auto& [k, v] : values) {
    auto it = table.find(k);
    if (it == table.end()) throw ConfigError("unknown config key '" + k + "'");
    it->second.set(config, k, v);
  }
}

KeyValues to_key_values(const RunConfig& config) {
  KeyValues out;
  for (const auto& [k, f] : fields()) out[k] = f.get(config);
  return out;
}

}  // namespace tempogen
