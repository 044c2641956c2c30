#pragma once

#include <cmath>
#include <concepts>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "negsteer/errors.hpp"
#include "negsteer/probe.hpp"
#include "negsteer/text_encoder.hpp"
#include "negsteer/tokenizer.hpp"

namespace negsteer {

enum class SteerPositions { Eos, All };
enum class Gating { Auto, Always, Never };

std::string to_string(SteerPositions p);
std::string to_string(Gating g);
SteerPositions parse_positions(std::string_view s);
Gating parse_gating(std::string_view s);

struct SteeringConfig {
  double alpha = 0.13;
  /// 1-based layers to steer; empty means all layers.
  std::vector<int> layers;
  SteerPositions positions = SteerPositions::Eos;
  Gating gating = Gating::Auto;
  bool enabled = true;

  /// Throws ConfigError for alpha outside [0, 1] or layers outside [1, num_layers].
  void validate(int num_layers) const;
  bool steers_layer(int layer) const;
};

inline constexpr double kUnitTolerance = 1e-6;

/// h <- (1 - alpha) h + alpha |h| w_dir, written as h + alpha (|h| w_dir - h)
/// and evaluated in double so alpha = 0 and h parallel to an exactly-unit
/// w_dir return h unchanged. Throws InputError if |w_dir| deviates from 1 by
/// more than kUnitTolerance or alpha is outside [0, 1].
template <std::floating_point T>
void steer_in_place(std::span<T> h, std::span<const T> w_dir, double alpha) {
  if (h.size() != w_dir.size()) throw InputError("steering direction width does not match state width");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InputError("alpha must be in [0, 1]");
  double w_sq = 0.0, h_sq = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    w_sq += static_cast<double>(w_dir[i]) * w_dir[i];
    h_sq += static_cast<double>(h[i]) * h[i];
  }
  if (std::abs(std::sqrt(w_sq) - 1.0) > kUnitTolerance) throw InputError("steering direction is not unit norm");
  const double h_norm = std::sqrt(h_sq);
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double hi = h[i];
    h[i] = static_cast<T>(hi + alpha * (h_norm * static_cast<double>(w_dir[i]) - hi));
  }
}

template <std::floating_point T>
std::vector<T> steer_vector(std::span<const T> h, std::span<const T> w_dir, double alpha) {
  std::vector<T> out(h.begin(), h.end());
  steer_in_place<T>(std::span<T>(out), w_dir, alpha);
  return out;
}

/// Hook that steers the configured layers with the per-layer directions.
ResidualHook make_steering_hook(const NegationDirection& direction, const SteeringConfig& config);

/// Throws ProvenanceError unless the direction was trained on these weights.
void check_provenance(const NegationDirection& direction, const EncoderWeights& weights);

/// Forward pass with the steering hook. With config.enabled == false this is
/// exactly the unsteered forward.
TextEmbedding steered_forward(const TokenSequence& tokens, const EncoderWeights& weights,
                              const NegationDirection& direction, const SteeringConfig& config);

/// Word-level cue matcher. Cues may be single words or multi-word phrases.
class NegationLexicon {
 public:
  NegationLexicon();  // built-in default cues
  explicit NegationLexicon(std::vector<std::string> cues);
  /// One cue per line; blank lines and "#" comments are skipped.
  static NegationLexicon load(const std::filesystem::path& path);

  bool matches(std::string_view query) const;
  const std::vector<std::string>& cues() const { return cues_; }

 private:
  std::vector<std::string> cues_;
  std::vector<std::vector<std::string>> phrases_;
};

bool detect_negation(std::string_view query, const NegationLexicon& lexicon = NegationLexicon());

/// Embeds queries, steering only when the gating policy says so.
class QueryEmbedder {
 public:
  QueryEmbedder(const Tokenizer& tokenizer, const EncoderWeights& weights, const NegationDirection* direction,
                SteeringConfig config, NegationLexicon lexicon = NegationLexicon());

  bool should_steer(std::string_view query) const;
  TextEmbedding embed(std::string_view query) const;
  const SteeringConfig& config() const { return config_; }

 private:
  const Tokenizer& tokenizer_;
  const EncoderWeights& weights_;
  const NegationDirection* direction_;
  SteeringConfig config_;
  NegationLexicon lexicon_;
};

}  // namespace negsteer
