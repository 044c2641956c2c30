#include "negsteer/text_encoder.hpp"

#include <cmath>
#include <limits>

#include "negsteer/errors.hpp"
#include "negsteer/parallel.hpp"

namespace negsteer {
namespace {

constexpr float kLayerNormEps = 1e-5f;

std::string block_prefix(int l) { return "transformer.resblocks." + std::to_string(l) + "."; }

std::string shape_string(const std::vector<int64_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? ", " : "") + std::to_string(shape[i]);
  return s + "]";
}

const Tensor& checked(const TensorFile& file, const std::string& name, const std::vector<int64_t>& shape) {
  const Tensor& t = file.at(name);
  if (t.shape != shape)
    throw LoadError(name + ": shape " + shape_string(t.shape) + " does not match expected " + shape_string(shape));
  for (const float v : t.data)
    if (!std::isfinite(v)) throw LoadError(name + ": non-finite value");
  return t;
}

RowMatrixXf to_matrix(const Tensor& t) {
  return Eigen::Map<const RowMatrixXf>(t.data.data(), t.shape[0], t.shape[1]);
}

Eigen::VectorXf to_vector(const Tensor& t) {
  return Eigen::Map<const Eigen::VectorXf>(t.data.data(), static_cast<Eigen::Index>(t.data.size()));
}

int int_metadata(const std::map<std::string, std::string>& metadata, const std::string& key) {
  const auto it = metadata.find(key);
  if (it == metadata.end()) throw ConfigError("container metadata lacks " + key);
  try {
    return std::stoi(it->second);
  } catch (const std::exception&) {
    throw ConfigError("container metadata " + key + " is not an integer");
  }
}

void layer_norm_rows(const RowMatrixXf& x, const Eigen::VectorXf& gain, const Eigen::VectorXf& bias,
                     RowMatrixXf& out) {
  out.resize(x.rows(), x.cols());
  const auto d = static_cast<float>(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    const float mean = row.sum() / d;
    const float var = (row.array() - mean).square().sum() / d;
    const float inv = 1.0f / std::sqrt(var + kLayerNormEps);
    out.row(r) = (((row.array() - mean) * inv).transpose() * gain.array() + bias.array()).transpose();
  }
}

void apply_hook(const ResidualHook& hook, int layer, RowMatrixXf& x, Eigen::Index eos) {
  if (!hook.transform) return;
  const auto d = static_cast<std::size_t>(x.cols());
  if (hook.scope == ResidualHook::Scope::Eos) {
    hook.transform(layer, std::span<float>(x.row(eos).data(), d));
  } else {
    for (Eigen::Index r = 0; r <= eos; ++r) hook.transform(layer, std::span<float>(x.row(r).data(), d));
  }
}

}  // namespace

void EncoderConfig::validate() const {
  if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
  if (hidden_width < 1 || num_heads < 1 || embed_dim < 1 || context_length < 3)
    throw ConfigError("encoder dimensions must be positive (context_length >= 3)");
  if (hidden_width % num_heads != 0) throw ConfigError("hidden_width must be divisible by num_heads");
}

EncoderConfig EncoderConfig::from_metadata(const std::map<std::string, std::string>& metadata) {
  EncoderConfig c;
  c.num_layers = int_metadata(metadata, "num_layers");
  c.hidden_width = int_metadata(metadata, "hidden_width");
  c.num_heads = int_metadata(metadata, "num_heads");
  c.context_length = int_metadata(metadata, "context_length");
  c.embed_dim = int_metadata(metadata, "embed_dim");
  c.validate();
  return c;
}

std::vector<std::pair<std::string, std::vector<int64_t>>> required_tensors(const EncoderConfig& c,
                                                                           int64_t vocab_size) {
  const int64_t d = c.hidden_width;
  std::vector<std::pair<std::string, std::vector<int64_t>>> out = {
      {"token_embedding.weight", {vocab_size, d}},
      {"positional_embedding", {c.context_length, d}},
  };
  for (int l = 0; l < c.num_layers; ++l) {
    const auto p = block_prefix(l);
    out.push_back({p + "ln_1.weight", {d}});
    out.push_back({p + "ln_1.bias", {d}});
    out.push_back({p + "attn.in_proj_weight", {3 * d, d}});
    out.push_back({p + "attn.in_proj_bias", {3 * d}});
    out.push_back({p + "attn.out_proj.weight", {d, d}});
    out.push_back({p + "attn.out_proj.bias", {d}});
    out.push_back({p + "ln_2.weight", {d}});
    out.push_back({p + "ln_2.bias", {d}});
    out.push_back({p + "mlp.c_fc.weight", {4 * d, d}});
    out.push_back({p + "mlp.c_fc.bias", {4 * d}});
    out.push_back({p + "mlp.c_proj.weight", {d, 4 * d}});
    out.push_back({p + "mlp.c_proj.bias", {d}});
  }
  out.push_back({"ln_final.weight", {d}});
  out.push_back({"ln_final.bias", {d}});
  out.push_back({"text_projection", {d, c.embed_dim}});
  return out;
}

EncoderWeights load_weights(const TensorFile& file, const EncoderConfig& config) {
  config.validate();
  const Tensor& tok = file.at("token_embedding.weight");
  if (tok.shape.size() != 2) throw LoadError("token_embedding.weight: expected a 2-D tensor");
  const int64_t vocab = tok.shape[0];

  // Validate every tensor before materializing anything.
  std::map<std::string, const Tensor*> t;
  for (const auto& [name, shape] : required_tensors(config, vocab)) t[name] = &checked(file, name, shape);

  EncoderWeights w;
  w.config = config;
  w.vocab_size = static_cast<int>(vocab);
  w.identity = file.source_sha256();
  w.token_embedding = to_matrix(*t["token_embedding.weight"]);
  w.positional_embedding = to_matrix(*t["positional_embedding"]);
  for (int l = 0; l < config.num_layers; ++l) {
    const auto p = block_prefix(l);
    BlockWeights b;
    b.ln1_weight = to_vector(*t[p + "ln_1.weight"]);
    b.ln1_bias = to_vector(*t[p + "ln_1.bias"]);
    b.in_proj_weight = to_matrix(*t[p + "attn.in_proj_weight"]);
    b.in_proj_bias = to_vector(*t[p + "attn.in_proj_bias"]);
    b.out_proj_weight = to_matrix(*t[p + "attn.out_proj.weight"]);
    b.out_proj_bias = to_vector(*t[p + "attn.out_proj.bias"]);
    b.ln2_weight = to_vector(*t[p + "ln_2.weight"]);
    b.ln2_bias = to_vector(*t[p + "ln_2.bias"]);
    b.fc_weight = to_matrix(*t[p + "mlp.c_fc.weight"]);
    b.fc_bias = to_vector(*t[p + "mlp.c_fc.bias"]);
    b.proj_weight = to_matrix(*t[p + "mlp.c_proj.weight"]);
    b.proj_bias = to_vector(*t[p + "mlp.c_proj.bias"]);
    w.blocks.push_back(std::move(b));
  }
  w.final_ln_weight = to_vector(*t["ln_final.weight"]);
  w.final_ln_bias = to_vector(*t["ln_final.bias"]);
  w.text_projection = to_matrix(*t["text_projection"]);
  return w;
}

EncoderWeights load_weights(const std::filesystem::path& container, const EncoderConfig& config) {
  return load_weights(TensorFile::read(container), config);
}

EncoderWeights load_weights(const std::filesystem::path& container) {
  const auto file = TensorFile::read(container);
  return load_weights(file, EncoderConfig::from_metadata(file.metadata()));
}

ForwardResult forward(const TokenSequence& tokens, const EncoderWeights& w, const ForwardOptions& options) {
  const auto& cfg = w.config;
  const Eigen::Index d = cfg.hidden_width;
  const Eigen::Index eos = tokens.eos_index;
  if (tokens.eos_index <= 0 || static_cast<std::size_t>(tokens.eos_index) >= tokens.ids.size() ||
      tokens.ids.size() > static_cast<std::size_t>(cfg.context_length))
    throw InputError("token sequence does not fit the encoder context");
  const Eigen::Index n = eos + 1;

  RowMatrixXf x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto id = tokens.ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= w.vocab_size) throw InputError("token id " + std::to_string(id) + " outside vocabulary");
    x.row(i) = w.token_embedding.row(id) + w.positional_embedding.row(i);
  }

  const int heads = cfg.num_heads;
  const Eigen::Index hd = d / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

  ForwardResult result;
  result.captures.reserve(static_cast<std::size_t>(cfg.num_layers));
  RowMatrixXf y, qkv, attn_out(n, d), scores, hidden;
  for (int l = 0; l < cfg.num_layers; ++l) {
    const BlockWeights& b = w.blocks[static_cast<std::size_t>(l)];

    layer_norm_rows(x, b.ln1_weight, b.ln1_bias, y);
    qkv = y * b.in_proj_weight.transpose();
    qkv.rowwise() += b.in_proj_bias.transpose();
    for (int h = 0; h < heads; ++h) {
      const auto q = qkv.middleCols(h * hd, hd);
      const auto k = qkv.middleCols(d + h * hd, hd);
      const auto v = qkv.middleCols(2 * d + h * hd, hd);
      scores = (q * k.transpose()) * scale;
      for (Eigen::Index i = 0; i < n; ++i) {
        const float mx = scores.row(i).head(i + 1).maxCoeff();
        float sum = 0.0f;
        for (Eigen::Index j = 0; j <= i; ++j) {
          const float e = std::exp(scores(i, j) - mx);
          scores(i, j) = e;
          sum += e;
        }
        scores.row(i).head(i + 1) /= sum;
        scores.row(i).tail(n - i - 1).setZero();
      }
      attn_out.middleCols(h * hd, hd) = scores * v;
    }
    x.noalias() += attn_out * b.out_proj_weight.transpose();
    x.rowwise() += b.out_proj_bias.transpose();

    layer_norm_rows(x, b.ln2_weight, b.ln2_bias, y);
    hidden = y * b.fc_weight.transpose();
    hidden.rowwise() += b.fc_bias.transpose();
    hidden = hidden.array() * (1.0f / (1.0f + (-1.702f * hidden.array()).exp()));
    x.noalias() += hidden * b.proj_weight.transpose();
    x.rowwise() += b.proj_bias.transpose();

    if (options.hook) apply_hook(*options.hook, l + 1, x, eos);
    const auto row = x.row(eos);
    result.captures.push_back({l + 1, std::vector<float>(row.data(), row.data() + d)});
    if (options.capture_sequence) result.sequence_states.push_back(x);
  }

  RowMatrixXf last = x.row(eos);
  RowMatrixXf normed;
  layer_norm_rows(last, w.final_ln_weight, w.final_ln_bias, normed);
  Eigen::RowVectorXf z = normed * w.text_projection;
  const float norm = z.norm();
  if (norm > 0.0f) z /= norm;
  result.embedding.vector.assign(z.data(), z.data() + z.size());
  result.embedding.normalized = norm > 0.0f;
  return result;
}

ForwardResult forward(const TokenSequence& tokens, const EncoderWeights& weights, const ResidualHook* hook) {
  ForwardOptions options;
  options.hook = hook;
  return forward(tokens, weights, options);
}

std::vector<TextEmbedding> embed_batch(std::span<const std::string> texts, const EncoderWeights& weights,
                                       const Tokenizer& tokenizer, const ResidualHook* hook, std::size_t threads) {
  std::vector<TextEmbedding> out(texts.size());
  parallel_for(texts.size(), threads, [&](std::size_t i) {
    out[i] = forward(tokenizer.encode(texts[i]), weights, hook).embedding;
  });
  return out;
}

}  // namespace negsteer
