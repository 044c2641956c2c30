#include "negsteer/steering.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

namespace negsteer {
namespace {

std::vector<std::string> words(std::string_view text) {
  const std::string s = normalize_text(text);
  std::vector<std::string> out;
  std::string cur;
  for (const char c : s) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isalnum(u) || c == '\'' || u >= 0x80) {
      cur += c;
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

const std::vector<std::string>& default_cues() {
  static const std::vector<std::string> cues = {"no",      "not",     "without", "excluding", "lacking",
                                                "free of", "never",   "neither", "nor"};
  return cues;
}

}  // namespace

std::string to_string(SteerPositions p) { return p == SteerPositions::Eos ? "eos" : "all"; }

std::string to_string(Gating g) {
  switch (g) {
    case Gating::Auto: return "auto";
    case Gating::Always: return "always";
    case Gating::Never: return "never";
  }
  return "auto";
}

SteerPositions parse_positions(std::string_view s) {
  if (s == "eos") return SteerPositions::Eos;
  if (s == "all") return SteerPositions::All;
  throw ConfigError("positions must be eos or all, got " + std::string(s));
}

Gating parse_gating(std::string_view s) {
  if (s == "auto") return Gating::Auto;
  if (s == "always") return Gating::Always;
  if (s == "never") return Gating::Never;
  throw ConfigError("gating must be auto, always or never, got " + std::string(s));
}

void SteeringConfig::validate(int num_layers) const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in [0, 1]");
  for (const int l : layers)
    if (l < 1 || l > num_layers)
      throw ConfigError("steering layer " + std::to_string(l) + " outside [1, " + std::to_string(num_layers) + "]");
}

bool SteeringConfig::steers_layer(int layer) const {
  return layers.empty() || std::find(layers.begin(), layers.end(), layer) != layers.end();
}

ResidualHook make_steering_hook(const NegationDirection& direction, const SteeringConfig& config) {
  ResidualHook hook;
  hook.scope = config.positions == SteerPositions::Eos ? ResidualHook::Scope::Eos : ResidualHook::Scope::AllPositions;
  hook.transform = [&direction, config](int layer, std::span<float> state) {
    if (!config.steers_layer(layer)) return;
    steer_in_place<float>(state, direction.layer(layer), config.alpha);
  };
  return hook;
}

void check_provenance(const NegationDirection& direction, const EncoderWeights& weights) {
  if (direction.provenance.encoder_identity != weights.identity)
    throw ProvenanceError("direction was trained on encoder " + direction.provenance.encoder_identity.substr(0, 12) +
                          ", loaded weights are " + weights.identity.substr(0, 12));
  if (direction.num_layers() != weights.config.num_layers || direction.hidden_width() != weights.config.hidden_width)
    throw ProvenanceError("direction shape does not match the encoder");
}

TextEmbedding steered_forward(const TokenSequence& tokens, const EncoderWeights& weights,
                              const NegationDirection& direction, const SteeringConfig& config) {
  check_provenance(direction, weights);
  config.validate(weights.config.num_layers);
  if (!config.enabled) return forward(tokens, weights, nullptr).embedding;
  const auto hook = make_steering_hook(direction, config);
  return forward(tokens, weights, &hook).embedding;
}

NegationLexicon::NegationLexicon() : NegationLexicon(default_cues()) {}

NegationLexicon::NegationLexicon(std::vector<std::string> cues) : cues_(std::move(cues)) {
  for (const auto& cue : cues_) {
    auto w = words(cue);
    if (!w.empty()) phrases_.push_back(std::move(w));
  }
}

NegationLexicon NegationLexicon::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cue lexicon not found: " + path.string());
  std::vector<std::string> cues;
  std::string line;
  while (std::getline(in, line)) {
    const auto start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;
    cues.push_back(line.substr(start));
  }
  if (cues.empty()) throw ConfigError("cue lexicon is empty: " + path.string());
  return NegationLexicon(std::move(cues));
}

bool NegationLexicon::matches(std::string_view query) const {
  const auto w = words(query);
  for (const auto& phrase : phrases_) {
    if (phrase.size() > w.size()) continue;
    for (std::size_t i = 0; i + phrase.size() <= w.size(); ++i)
      if (std::equal(phrase.begin(), phrase.end(), w.begin() + static_cast<long>(i))) return true;
  }
  return false;
}

bool detect_negation(std::string_view query, const NegationLexicon& lexicon) { return lexicon.matches(query); }

QueryEmbedder::QueryEmbedder(const Tokenizer& tokenizer, const EncoderWeights& weights,
                             const NegationDirection* direction, SteeringConfig config, NegationLexicon lexicon)
    : tokenizer_(tokenizer), weights_(weights), direction_(direction), config_(std::move(config)),
      lexicon_(std::move(lexicon)) {
  config_.validate(weights.config.num_layers);
  if (direction_) check_provenance(*direction_, weights_);
  if (!direction_ && config_.enabled && config_.gating != Gating::Never)
    throw ConfigError("steering requested without a direction artifact");
}

bool QueryEmbedder::should_steer(std::string_view query) const {
  if (!config_.enabled || !direction_) return false;
  switch (config_.gating) {
    case Gating::Never: return false;
    case Gating::Always: return true;
    case Gating::Auto: return lexicon_.matches(query);
  }
  return false;
}

TextEmbedding QueryEmbedder::embed(std::string_view query) const {
  const auto tokens = tokenizer_.encode(query);
  if (!should_steer(query)) return forward(tokens, weights_, nullptr).embedding;
  const auto hook = make_steering_hook(*direction_, config_);
  return forward(tokens, weights_, &hook).embedding;
}

}  // namespace negsteer
