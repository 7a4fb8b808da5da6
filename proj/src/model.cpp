#include "tempogen/model.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace tempogen {

namespace {

constexpr double kNormEps = 1e-5;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMapMat = Eigen::Map<const RowMat>;
using Vec = Eigen::VectorXd;
using ConstMapVec = Eigen::Map<const Vec>;

std::string layer_name(std::size_t i, const char* suffix) { return "layers." + std::to_string(i) + "." + suffix; }

}  // namespace

// ---- config ----------------------------------------------------------------

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigMismatch("d_model must be a positive multiple of n_heads");
  }
  if (n_layers == 0 || m_features == 0 || mlp_ratio == 0) throw ConfigMismatch("layer/feature counts must be >= 1");
  if (text_vocab < 1 || codebook_size < 1 || labels < 1) throw ConfigMismatch("vocabulary sizes must be >= 1");
  if (patch == 0 || image_side % patch != 0) throw ConfigMismatch("image side must be divisible by patch");
  if (!(lambda >= 0.0)) throw ConfigMismatch("lambda must be >= 0");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigMismatch("dropout must lie in [0, 1)");
  if (!(stabilizer > 0.0)) throw ConfigMismatch("stabilizer must be positive");
  geometry().grid_side();
}

nlohmann::json ModelConfig::to_json() const {
  return {{"d_model", d_model},
          {"n_layers", n_layers},
          {"n_heads", n_heads},
          {"m_features", m_features},
          {"mlp_ratio", mlp_ratio},
          {"text_vocab", text_vocab},
          {"codebook_size", codebook_size},
          {"image_side", image_side},
          {"patch", patch},
          {"report_tokens", report_tokens},
          {"labels", labels},
          {"lambda", lambda},
          {"dropout", dropout},
          {"stabilizer", stabilizer},
          {"orthogonal_features", orthogonal_features},
          {"feature_seed", feature_seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model");
  c.n_layers = j.at("n_layers");
  c.n_heads = j.at("n_heads");
  c.m_features = j.at("m_features");
  c.mlp_ratio = j.at("mlp_ratio");
  c.text_vocab = j.at("text_vocab");
  c.codebook_size = j.at("codebook_size");
  c.image_side = j.at("image_side");
  c.patch = j.at("patch");
  c.report_tokens = j.at("report_tokens");
  c.labels = j.at("labels");
  c.lambda = j.at("lambda");
  c.dropout = j.at("dropout");
  c.stabilizer = j.at("stabilizer");
  c.orthogonal_features = j.at("orthogonal_features");
  c.feature_seed = j.at("feature_seed");
  c.validate();
  return c;
}

std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, V = c.vocab_total(), side = c.geometry().grid_side();
  const std::size_t hidden = c.mlp_ratio * d;
  const std::size_t embeddings = V * d + 2 * side * d + (c.image_tokens() + 2) * d + 4 * d;
  const std::size_t per_layer = 2 * d                 // ln1
                                + 4 * (d * d + d)     // q, k, v, o
                                + 2 * d               // ln2
                                + d * hidden + hidden // mlp up
                                + hidden * d + d;     // mlp down
  const std::size_t heads = 2 * d + (d * V + V) + (d * c.labels + c.labels);
  return embeddings + c.n_layers * per_layer + heads;
}

// ---- model -----------------------------------------------------------------

Model Model::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model model;
  model.config_ = config;
  std::mt19937_64 rng(seed);
  const std::size_t d = config.d_model, V = config.vocab_total(), side = config.geometry().grid_side();
  const std::size_t hidden = config.mlp_ratio * d;
  const double w_std = 0.02;
  const double resid_std = w_std / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  auto add = [&](std::string name, Tensor t) {
    t.set_requires_grad(true);
    model.params_.push_back({std::move(name), std::move(t)});
  };
  add("tok_emb", Tensor::randn({V, d}, 1.0, rng));
  add("pos.axial_row", Tensor::randn({side, d}, 0.5, rng));
  add("pos.axial_col", Tensor::randn({side, d}, 0.5, rng));
  add("pos.pad_slots", Tensor::randn({config.image_tokens() + 2, d}, 1.0, rng));
  add("pos.kind", Tensor::randn({4, d}, 1.0, rng));
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    add(layer_name(i, "ln1.gamma"), Tensor::full({d}, 1.0));
    add(layer_name(i, "ln1.beta"), Tensor::zeros({d}));
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv"}) {
      add(layer_name(i, w), Tensor::randn({d, d}, w_std, rng));
      add(layer_name(i, (std::string(w) + "_b").c_str()), Tensor::zeros({d}));
    }
    add(layer_name(i, "attn.wo"), Tensor::randn({d, d}, resid_std, rng));
    add(layer_name(i, "attn.wo_b"), Tensor::zeros({d}));
    add(layer_name(i, "ln2.gamma"), Tensor::full({d}, 1.0));
    add(layer_name(i, "ln2.beta"), Tensor::zeros({d}));
    add(layer_name(i, "mlp.w1"), Tensor::randn({d, hidden}, w_std, rng));
    add(layer_name(i, "mlp.w1_b"), Tensor::zeros({hidden}));
    add(layer_name(i, "mlp.w2"), Tensor::randn({hidden, d}, resid_std, rng));
    add(layer_name(i, "mlp.w2_b"), Tensor::zeros({d}));
  }
  add("ln_f.gamma", Tensor::full({d}, 1.0));
  add("ln_f.beta", Tensor::zeros({d}));
  add("head.w", Tensor::randn({d, V}, w_std, rng));
  add("head.w_b", Tensor::zeros({V}));
  add("cls_head.w", Tensor::randn({d, config.labels}, w_std, rng));
  add("cls_head.w_b", Tensor::zeros({config.labels}));
  model.redraw_feature_maps(config.feature_seed);
  return model;
}

void Model::redraw_feature_maps(std::uint64_t seed) {
  feature_maps_.clear();
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    feature_maps_.push_back(favor::RandomFeatureMap::draw(config_.m_features, config_.head_dim(),
                                                          seed * 1000003ULL + i, config_.orthogonal_features));
  }
}

std::vector<Tensor> Model::param_tensors() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

const Tensor& Model::param(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw ConfigMismatch("model has no parameter '" + name + "'");
}

Tensor& Model::param(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const Model&>(*this).param(name));
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

ForwardOutput Model::forward(const layout::AssembledSequence& seq) const {
  const layout::AssembledSequence* one[] = {&seq};
  return forward(std::span<const layout::AssembledSequence* const>(one));
}

ForwardOutput Model::forward(std::span<const layout::AssembledSequence* const> batch,
                             std::mt19937_64* dropout_rng) const {
  const auto geometry = config_.geometry();
  const std::size_t B = batch.size(), L = geometry.total_length(), d = config_.d_model;
  if (B == 0) throw std::invalid_argument("forward: empty batch");
  const auto V = static_cast<int>(config_.vocab_total());
  std::vector<int> ids;
  ids.reserve(B * L);
  for (const auto* seq : batch) {
    if (seq->length() != L) throw ConfigMismatch("sequence length does not match the model geometry");
    for (int id : seq->ids) {
      if (id < 0 || id >= V) throw ConfigMismatch("token id " + std::to_string(id) + " outside model vocabulary");
      ids.push_back(id);
    }
  }
  const double p = dropout_rng ? config_.dropout : 0.0;
  auto drop = [&](const Tensor& t) { return p > 0.0 ? dropout(t, p, *dropout_rng) : t; };

  layout::PositionalTables tables{param("pos.axial_row"), param("pos.axial_col"), param("pos.pad_slots"),
                                  param("pos.kind")};
  Tensor x = add(gather_rows(param("tok_emb"), ids), layout::positional_embed(batch, tables, geometry));
  x = drop(x);
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    auto w = [&](const char* s) -> const Tensor& { return param(layer_name(i, s)); };
    Tensor h = layer_norm(x, w("ln1.gamma"), w("ln1.beta"), kNormEps);
    auto heads = [&](const char* wn, const char* bn) {
      return split_heads(reshape(linear(h, w(wn), w(bn)), {B, L, d}), config_.n_heads);
    };
    Tensor q = heads("attn.wq", "attn.wq_b");
    Tensor k = heads("attn.wk", "attn.wk_b");
    Tensor v = heads("attn.wv", "attn.wv_b");
    Tensor a = favor::causal_linear_attention(q, k, v, feature_maps_[i], config_.stabilizer);
    a = reshape(merge_heads(a), {B * L, d});
    x = add(x, drop(linear(a, w("attn.wo"), w("attn.wo_b"))));
    h = layer_norm(x, w("ln2.gamma"), w("ln2.beta"), kNormEps);
    h = relu(linear(h, w("mlp.w1"), w("mlp.w1_b")));
    x = add(x, drop(linear(h, w("mlp.w2"), w("mlp.w2_b"))));
  }
  x = layer_norm(x, param("ln_f.gamma"), param("ln_f.beta"), kNormEps);
  ForwardOutput out;
  out.logits = linear(x, param("head.w"), param("head.w_b"));
  std::vector<int> cls_rows(B);
  for (std::size_t b = 0; b < B; ++b) cls_rows[b] = static_cast<int>(b * L + L - 1);
  out.cls_logits = linear(gather_rows(x, cls_rows), param("cls_head.w"), param("cls_head.w_b"));
  return out;
}

void next_token_targets(std::span<const layout::AssembledSequence* const> batch, std::vector<int>& targets,
                        std::vector<std::uint8_t>& mask) {
  targets.clear();
  mask.clear();
  for (const auto* seq : batch) {
    const std::size_t L = seq->length();
    for (std::size_t i = 0; i < L; ++i) {
      const bool has_next = i + 1 < L;
      targets.push_back(has_next ? seq->ids[i + 1] : 0);
      mask.push_back(has_next ? seq->loss_mask[i + 1] : 0);
    }
  }
}

LossBreakdown Model::loss(std::span<const layout::AssembledSequence* const> batch, std::span<const int> labels,
                          std::mt19937_64* dropout_rng) const {
  if (labels.size() != batch.size() * config_.labels) {
    throw ConfigMismatch("loss: expected " + std::to_string(batch.size() * config_.labels) + " labels, got " +
                         std::to_string(labels.size()));
  }
  auto out = forward(batch, dropout_rng);
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
  next_token_targets(batch, targets, mask);
  Tensor gen = cross_entropy_logits(out.logits, targets, mask);
  Tensor cls = binary_cross_entropy_logits(out.cls_logits, labels);
  LossBreakdown lb;
  lb.gen_ce = gen.item();
  lb.cls_bce = cls.item();
  lb.total = config_.lambda == 0.0 ? gen : add(gen, scale(cls, config_.lambda));
  return lb;
}

std::vector<NamedArray> Model::to_arrays() const {
  std::vector<NamedArray> arrays;
  for (const auto& p : params_) {
    arrays.push_back({"param/" + p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  }
  for (std::size_t i = 0; i < feature_maps_.size(); ++i) {
    const auto& fm = feature_maps_[i];
    arrays.push_back({"omega/" + std::to_string(i), {fm.m, fm.d}, fm.omega});
  }
  return arrays;
}

Model Model::from_arrays(const ModelConfig& config, std::span<const NamedArray> arrays) {
  Model model = init(config, 0);
  auto find = [&](const std::string& name) -> const NamedArray& {
    for (const auto& a : arrays) {
      if (a.name == name) return a;
    }
    throw ConfigMismatch("missing array '" + name + "'");
  };
  for (auto& p : model.params_) {
    const auto& a = find("param/" + p.name);
    if (a.shape != p.tensor.shape()) {
      throw ConfigMismatch("parameter '" + p.name + "' has shape " + to_string(a.shape) + ", config expects " +
                           to_string(p.tensor.shape()));
    }
    p.tensor = Tensor::from(a.shape, a.values, true);
  }
  for (std::size_t i = 0; i < model.feature_maps_.size(); ++i) {
    const auto& a = find("omega/" + std::to_string(i));
    auto& fm = model.feature_maps_[i];
    if (a.shape != Shape{fm.m, fm.d}) throw ConfigMismatch("feature map shape mismatch");
    fm.omega = a.values;
  }
  return model;
}

// ---- incremental decoding --------------------------------------------------

IncrementalDecoder::IncrementalDecoder(const Model& model, const layout::AssembledSequence& seq)
    : model_(&model), length_(seq.length()) {
  const auto& c = model.config();
  layout::PositionalTables tables{model.param("pos.axial_row"), model.param("pos.axial_col"),
                                  model.param("pos.pad_slots"), model.param("pos.kind")};
  NoGradGuard guard;
  const Tensor pos = layout::positional_embed(seq, tables, c.geometry());
  positional_.assign(pos.data().begin(), pos.data().end());
  for (std::size_t i = 0; i < c.n_layers; ++i)
    for (std::size_t h = 0; h < c.n_heads; ++h)
      states_.emplace_back(model.feature_maps_[i], c.head_dim(), c.stabilizer);
}

std::vector<double> IncrementalDecoder::step(int token_id) {
  const auto& m = *model_;
  const auto& c = m.config();
  if (position_ >= length_) throw std::out_of_range("IncrementalDecoder: sequence already complete");
  if (token_id < 0 || token_id >= static_cast<int>(c.vocab_total())) {
    throw std::out_of_range("IncrementalDecoder: token id outside vocabulary");
  }
  const auto d = static_cast<Eigen::Index>(c.d_model);
  const auto dh = c.head_dim();
  auto mat = [&](const std::string& name) {
    const Tensor& t = m.param(name);
    return ConstMapMat(t.data().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
  };
  auto vec = [&](const std::string& name) {
    const Tensor& t = m.param(name);
    return ConstMapVec(t.data().data(), static_cast<Eigen::Index>(t.numel()));
  };
  auto norm = [&](const Vec& x, const std::string& prefix) {
    const double mu = x.mean();
    const double var = (x.array() - mu).square().mean();
    Vec h = (x.array() - mu) / std::sqrt(var + kNormEps);
    return Vec(h.cwiseProduct(vec(prefix + ".gamma")) + vec(prefix + ".beta"));
  };

  Vec x = mat("tok_emb").row(token_id).transpose() +
          ConstMapVec(positional_.data() + position_ * c.d_model, d);
  Vec attn(d);
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    Vec h = norm(x, layer_name(i, "ln1"));
    Vec q = mat(layer_name(i, "attn.wq")).transpose() * h + vec(layer_name(i, "attn.wq_b"));
    Vec k = mat(layer_name(i, "attn.wk")).transpose() * h + vec(layer_name(i, "attn.wk_b"));
    Vec v = mat(layer_name(i, "attn.wv")).transpose() * h + vec(layer_name(i, "attn.wv_b"));
    for (std::size_t hd = 0; hd < c.n_heads; ++hd) {
      const auto off = static_cast<Eigen::Index>(hd * dh);
      states_[i * c.n_heads + hd].step({q.data() + off, dh}, {k.data() + off, dh}, {v.data() + off, dh},
                                       {attn.data() + off, dh});
    }
    x += mat(layer_name(i, "attn.wo")).transpose() * attn + vec(layer_name(i, "attn.wo_b"));
    h = norm(x, layer_name(i, "ln2"));
    Vec u = (mat(layer_name(i, "mlp.w1")).transpose() * h + vec(layer_name(i, "mlp.w1_b"))).cwiseMax(0.0);
    x += mat(layer_name(i, "mlp.w2")).transpose() * u + vec(layer_name(i, "mlp.w2_b"));
  }
  Vec hf = norm(x, "ln_f");
  hidden_.assign(hf.data(), hf.data() + d);
  Vec logits = mat("head.w").transpose() * hf + vec("head.w_b");
  ++position_;
  return {logits.data(), logits.data() + logits.size()};
}

}  // namespace tempogen
