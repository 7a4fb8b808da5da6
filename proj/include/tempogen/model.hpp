#pragma once

// Causal FAVOR+ transformer over the unified token space, with a next-token
// head and a multi-label classification head read from the cls position.

#include "tempogen/checkpoint.hpp"
#include "tempogen/favor.hpp"
#include "tempogen/layout.hpp"
#include "tempogen/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace tempogen {

struct ModelConfig {
  std::size_t d_model = 128;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t m_features = 64;
  std::size_t mlp_ratio = 4;
  std::size_t text_vocab = 0;       // report words incl. padding
  std::size_t codebook_size = 64;   // K
  std::size_t image_side = 32;      // toy images are image_side x image_side
  std::size_t patch = 4;
  std::size_t report_tokens = 16;   // N_r
  std::size_t labels = 4;           // c
  double lambda = 1.0;
  double dropout = 0.1;
  double stabilizer = favor::kDefaultStabilizer;
  bool orthogonal_features = true;
  std::uint64_t feature_seed = 0;

  std::size_t image_tokens() const { return (image_side / patch) * (image_side / patch); }
  std::size_t head_dim() const { return d_model / n_heads; }
  layout::Geometry geometry() const { return {image_tokens(), report_tokens}; }
  layout::TokenSpace token_space() const { return {text_vocab, codebook_size}; }
  std::size_t vocab_total() const { return token_space().total(); }

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

// Closed-form trainable parameter count for a config.
std::size_t expected_parameter_count(const ModelConfig& config);

struct ForwardOutput {
  Tensor logits;      // [B * L, V_total]
  Tensor cls_logits;  // [B, c]
};

struct LossBreakdown {
  Tensor total;
  double gen_ce = 0.0;
  double cls_bce = 0.0;
};

class ConfigMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Model {
 public:
  struct NamedParam {
    std::string name;
    Tensor tensor;
  };

  // Fresh parameters drawn from `seed`; feature maps from config.feature_seed.
  static Model init(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::vector<NamedParam>& params() { return params_; }
  const std::vector<NamedParam>& params() const { return params_; }
  std::vector<Tensor> param_tensors() const;
  const Tensor& param(const std::string& name) const;
  Tensor& param(const std::string& name);
  std::size_t parameter_count() const;

  const std::vector<favor::RandomFeatureMap>& feature_maps() const { return feature_maps_; }
  void redraw_feature_maps(std::uint64_t seed);

  // Dropout is applied only when `dropout_rng` is given.
  ForwardOutput forward(std::span<const layout::AssembledSequence* const> batch,
                        std::mt19937_64* dropout_rng = nullptr) const;
  ForwardOutput forward(const layout::AssembledSequence& seq) const;

  // gen CE over scored next-token targets + lambda * multi-label BCE on cls.
  // `labels` holds c entries per sequence, back to back.
  LossBreakdown loss(std::span<const layout::AssembledSequence* const> batch, std::span<const int> labels,
                     std::mt19937_64* dropout_rng = nullptr) const;

  // Converts to / from named arrays ("param/<name>", "omega/<layer>").
  std::vector<NamedArray> to_arrays() const;
  static Model from_arrays(const ModelConfig& config, std::span<const NamedArray> arrays);

 private:
  friend class IncrementalDecoder;
  ModelConfig config_;
  std::vector<NamedParam> params_;
  std::vector<favor::RandomFeatureMap> feature_maps_;
};

// Next-token targets (ids shifted left) and their mask for a batch.
void next_token_targets(std::span<const layout::AssembledSequence* const> batch, std::vector<int>& targets,
                        std::vector<std::uint8_t>& mask);

// Token-by-token evaluation reusing per-head prefix states; logits for a
// position match Model::forward on the same prefix.
class IncrementalDecoder {
 public:
  // `seq` fixes the positional layout; its ids are not read.
  IncrementalDecoder(const Model& model, const layout::AssembledSequence& seq);

  // Feeds the token at the next position and returns next-token logits.
  std::vector<double> step(int token_id);
  // Final hidden state of the last fed position (after the last norm).
  const std::vector<double>& last_hidden() const { return hidden_; }
  std::size_t position() const { return position_; }

 private:
  const Model* model_;
  std::vector<double> positional_;  // [L, d]
  std::vector<favor::PrefixState> states_;  // n_layers * n_heads
  std::vector<double> hidden_;
  std::size_t position_ = 0;
  std::size_t length_ = 0;
};

}  // namespace tempogen
