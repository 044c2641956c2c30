#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "negsteer/tensor_file.hpp"
#include "negsteer/tokenizer.hpp"

namespace negsteer {

using RowMatrixXf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct EncoderConfig {
  int num_layers = 12;
  int hidden_width = 512;
  int num_heads = 8;
  int context_length = 77;
  int embed_dim = 512;

  void validate() const;
  /// Reads num_layers, hidden_width, num_heads, context_length, embed_dim from
  /// container metadata. Throws ConfigError when a key is missing.
  static EncoderConfig from_metadata(const std::map<std::string, std::string>& metadata);

  bool operator==(const EncoderConfig&) const = default;
};

/// One pre-norm residual block. Linear weights use the (out, in) layout.
struct BlockWeights {
  Eigen::VectorXf ln1_weight, ln1_bias;
  RowMatrixXf in_proj_weight;  // 3d x d, rows ordered q, k, v
  Eigen::VectorXf in_proj_bias;
  RowMatrixXf out_proj_weight;  // d x d
  Eigen::VectorXf out_proj_bias;
  Eigen::VectorXf ln2_weight, ln2_bias;
  RowMatrixXf fc_weight;  // 4d x d
  Eigen::VectorXf fc_bias;
  RowMatrixXf proj_weight;  // d x 4d
  Eigen::VectorXf proj_bias;
};

struct EncoderWeights {
  EncoderConfig config;
  int vocab_size = 0;
  /// SHA-256 of the container the weights were loaded from.
  std::string identity;
  RowMatrixXf token_embedding;       // vocab x d
  RowMatrixXf positional_embedding;  // context x d
  std::vector<BlockWeights> blocks;
  Eigen::VectorXf final_ln_weight, final_ln_bias;
  RowMatrixXf text_projection;  // d x embed_dim
};

/// Tensor names and shapes the loader requires, in manifest order.
std::vector<std::pair<std::string, std::vector<int64_t>>> required_tensors(const EncoderConfig& config,
                                                                           int64_t vocab_size);

/// Throws LoadError naming the offending tensor (absent, wrong shape, non-finite).
EncoderWeights load_weights(const std::filesystem::path& container, const EncoderConfig& config);
EncoderWeights load_weights(const TensorFile& file, const EncoderConfig& config);
/// Loads with the configuration stored in the container metadata.
EncoderWeights load_weights(const std::filesystem::path& container);

/// Residual-stream state at the eos position after block `layer` (1-based).
struct LayerCapture {
  int layer = 0;
  std::vector<float> h;
};

struct TextEmbedding {
  std::vector<float> vector;
  bool normalized = false;
};

/// Per-layer in-place transform of block outputs. With Scope::Eos only the eos
/// row is passed; with Scope::AllPositions every row up to and including eos.
struct ResidualHook {
  enum class Scope { Eos, AllPositions };
  Scope scope = Scope::Eos;
  std::function<void(int layer, std::span<float> state)> transform;
};

struct ForwardOptions {
  const ResidualHook* hook = nullptr;
  /// Debug: keep the full (eos_index + 1) x d residual state after every block.
  bool capture_sequence = false;
};

struct ForwardResult {
  TextEmbedding embedding;
  std::vector<LayerCapture> captures;        // layers 1..L, post-hook
  std::vector<RowMatrixXf> sequence_states;  // only with capture_sequence
};

/// Causal forward pass. Positions after eos_index are not computed: under the
/// causal mask they cannot influence the eos state.
ForwardResult forward(const TokenSequence& tokens, const EncoderWeights& weights, const ForwardOptions& options = {});
ForwardResult forward(const TokenSequence& tokens, const EncoderWeights& weights, const ResidualHook* hook);

std::vector<TextEmbedding> embed_batch(std::span<const std::string> texts, const EncoderWeights& weights,
                                       const Tokenizer& tokenizer, const ResidualHook* hook = nullptr,
                                       std::size_t threads = 1);

}  // namespace negsteer
