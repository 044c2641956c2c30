#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "negsteer/text_encoder.hpp"
#include "negsteer/tokenizer.hpp"

namespace negsteer {

/// An affirmative caption (label 0) and its negated counterpart (label 1).
struct CaptionPair {
  std::string original;
  std::string negated;
  std::string cue;
};

/// JSON Lines, one {"original", "negated", "cue"} object per line.
std::vector<CaptionPair> read_caption_pairs(const std::filesystem::path& path);
void write_caption_pairs(std::span<const CaptionPair> pairs, const std::filesystem::path& path);
std::string caption_pairs_hash(std::span<const CaptionPair> pairs);

struct LabeledCaption {
  std::string text;
  int label = 0;
  std::size_t pair_index = 0;
};

struct ProbeDataset {
  std::vector<LabeledCaption> train;
  std::vector<LabeledCaption> test;
  std::size_t train_pairs = 0;
  std::size_t test_pairs = 0;
  double split_ratio = 0.0;
  uint64_t seed = 0;
  std::string dataset_hash;
};

/// Pair-level split: a caption and its negation always land on the same side.
/// Pairs that share any caption text are kept together as one group, so no
/// text appears in both splits. Deterministic for a given seed on any platform.
ProbeDataset build_dataset(std::span<const CaptionPair> pairs, double split_ratio, uint64_t seed);

struct ProbeOptions {
  /// Inverse L2 strength: loss = 0.5|w|^2 + C * sum log-loss.
  double inverse_regularization = 1.0;
  int max_iterations = 1000;
  double gradient_tolerance = 1e-4;
};

struct ProbeWeights {
  int layer = 0;
  std::vector<float> w;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  int iterations_used = 0;
  bool converged = false;
  /// Set when training failed for this layer during a sweep.
  std::string error;

  bool ok() const { return error.empty(); }
};

/// Predicted label for a single state: 1 iff w . h > 0.
int predict_label(std::span<const float> w, std::span<const float> h);
double probe_accuracy(std::span<const float> w, const RowMatrixXf& features, std::span<const int> labels);

/// No-intercept logistic regression fit with L-BFGS. Throws TrainingError for
/// fewer than two rows or a single class. Non-convergence is reported through
/// `converged`, never thrown.
ProbeWeights train_probe(const RowMatrixXf& features, std::span<const int> labels, const ProbeOptions& options = {});
ProbeWeights train_probe(const RowMatrixXf& train_features, std::span<const int> train_labels,
                         const RowMatrixXf& test_features, std::span<const int> test_labels,
                         const ProbeOptions& options = {});

struct LayerSweepResult {
  std::vector<ProbeWeights> probes;  // index l-1 holds layer l
  ProbeDataset dataset;
};

/// Extracts eos captures for every caption once, then trains one probe per
/// layer (optionally in parallel). A failing layer records its error and the
/// sweep continues.
LayerSweepResult layer_sweep(std::span<const CaptionPair> pairs, const Tokenizer& tokenizer,
                             const EncoderWeights& weights, double split_ratio, uint64_t seed,
                             const ProbeOptions& options = {}, std::size_t threads = 1);

struct DirectionProvenance {
  std::string dataset_hash;
  uint64_t split_seed = 0;
  double split_ratio = 0.0;
  std::string encoder_identity;
  double inverse_regularization = 1.0;
  int max_iterations = 1000;
};

/// Per-layer unit negation directions, layers 1..L.
struct NegationDirection {
  std::vector<std::vector<float>> layers;
  std::vector<double> train_accuracy;
  std::vector<double> test_accuracy;
  DirectionProvenance provenance;

  int num_layers() const { return static_cast<int>(layers.size()); }
  int hidden_width() const { return layers.empty() ? 0 : static_cast<int>(layers.front().size()); }
  /// 1-based.
  std::span<const float> layer(int l) const;
};

/// Unit-normalizes W^l for every layer 1..num_layers. Throws TrainingError
/// naming the layer when one is missing, failed, or has zero weights.
NegationDirection extract_direction(std::span<const ProbeWeights> probes, int num_layers,
                                    DirectionProvenance provenance);

/// Writes "<path>" (tensors "w_dir.layer.{l}") and "<path>.json" (provenance,
/// accuracies, container hash, plus any annotations).
void save_direction(const NegationDirection& direction, const std::filesystem::path& path,
                    const std::map<std::string, std::string>& annotations = {});
NegationDirection load_direction(const std::filesystem::path& path);

/// Raw probe weights ("probe.layer.{l}") with the same sidecar convention.
void save_probes(std::span<const ProbeWeights> probes, const DirectionProvenance& provenance,
                 const std::filesystem::path& path, const std::map<std::string, std::string>& annotations = {});
std::vector<ProbeWeights> load_probes(const std::filesystem::path& path, DirectionProvenance* provenance = nullptr);

std::filesystem::path sidecar_path(const std::filesystem::path& container);

/// Prompt for an external LLM that turns affirmative captions into negated ones.
std::string negation_prompt_template();

}  // namespace negsteer
