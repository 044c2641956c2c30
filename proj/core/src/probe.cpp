#include "negsteer/probe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <fstream>
#include <numeric>
#include <random>
#include <unordered_map>

#include <json.hpp>

#include "negsteer/errors.hpp"
#include "negsteer/hashing.hpp"
#include "negsteer/lbfgs.hpp"
#include "negsteer/parallel.hpp"

namespace negsteer {
namespace {

using nlohmann::json;

// Uniform integer in [0, n) from a standardized engine; std::uniform_int_distribution
// is implementation-defined, which would break cross-platform determinism.
uint64_t bounded(std::mt19937_64& rng, uint64_t n) {
  const uint64_t limit = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % n;
  uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return r % n;
}

struct DisjointSets {
  std::vector<std::size_t> parent;
  explicit DisjointSets(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

double log1p_exp_neg(double z) {
  // log(1 + exp(-z)), stable for both signs
  return z > 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

json provenance_json(const DirectionProvenance& p) {
  return {{"dataset_hash", p.dataset_hash},
          {"split_seed", p.split_seed},
          {"split_ratio", p.split_ratio},
          {"encoder_identity", p.encoder_identity},
          {"inverse_regularization", p.inverse_regularization},
          {"max_iterations", p.max_iterations}};
}

DirectionProvenance provenance_from_json(const json& j) {
  DirectionProvenance p;
  p.dataset_hash = j.at("dataset_hash").get<std::string>();
  p.split_seed = j.at("split_seed").get<uint64_t>();
  p.split_ratio = j.at("split_ratio").get<double>();
  p.encoder_identity = j.at("encoder_identity").get<std::string>();
  p.inverse_regularization = j.at("inverse_regularization").get<double>();
  p.max_iterations = j.at("max_iterations").get<int>();
  return p;
}

void write_json(const std::filesystem::path& path, const json& doc) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

json read_sidecar(const std::filesystem::path& container) {
  const auto path = sidecar_path(container);
  std::ifstream in(path);
  if (!in) throw LoadError("sidecar not found: " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

void check_container_hash(const TensorFile& file, const json& sidecar, const std::filesystem::path& path) {
  if (sidecar.value("container_sha256", "") != file.source_sha256())
    throw LoadError(path.string() + ": container hash does not match its sidecar");
}

}  // namespace

std::filesystem::path sidecar_path(const std::filesystem::path& container) {
  auto p = container;
  p += ".json";
  return p;
}

std::vector<CaptionPair> read_caption_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("caption-pair file not found: " + path.string());
  std::vector<CaptionPair> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      pairs.push_back({j.at("original").get<std::string>(), j.at("negated").get<std::string>(),
                       j.value("cue", std::string())});
    } catch (const json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return pairs;
}

void write_caption_pairs(std::span<const CaptionPair> pairs, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  for (const auto& p : pairs) out << json{{"original", p.original}, {"negated", p.negated}, {"cue", p.cue}}.dump() << '\n';
}

std::string caption_pairs_hash(std::span<const CaptionPair> pairs) {
  Sha256 h;
  for (const auto& p : pairs) {
    h.update(p.original);
    h.update(std::string_view("\0", 1));
    h.update(p.negated);
    h.update(std::string_view("\0", 1));
    h.update(p.cue);
    h.update("\n");
  }
  return h.hex_digest();
}

ProbeDataset build_dataset(std::span<const CaptionPair> pairs, double split_ratio, uint64_t seed) {
  if (pairs.size() < 2) throw InputError("need at least 2 caption pairs, got " + std::to_string(pairs.size()));
  if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw InputError("split_ratio must be in (0, 1)");
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].original.empty() || pairs[i].negated.empty())
      throw InputError("caption pair " + std::to_string(i) + " has an empty caption");
    if (pairs[i].original == pairs[i].negated)
      throw InputError("caption pair " + std::to_string(i) + " has identical captions");
  }

  DisjointSets sets(pairs.size());
  std::unordered_map<std::string, std::size_t> owner;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    for (const auto* text : {&pairs[i].original, &pairs[i].negated}) {
      const auto [it, inserted] = owner.emplace(*text, i);
      if (!inserted) sets.unite(i, it->second);
    }
  }
  std::vector<std::vector<std::size_t>> groups;
  std::unordered_map<std::size_t, std::size_t> group_of_root;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto root = sets.find(i);
    const auto [it, inserted] = group_of_root.emplace(root, groups.size());
    if (inserted) groups.emplace_back();
    groups[it->second].push_back(i);
  }

  std::mt19937_64 rng(seed);
  for (std::size_t i = groups.size(); i > 1; --i) std::swap(groups[i - 1], groups[bounded(rng, i)]);

  const auto n = pairs.size();
  const auto target =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(split_ratio * static_cast<double>(n))), 1, n - 1);

  ProbeDataset ds;
  ds.split_ratio = split_ratio;
  ds.seed = seed;
  ds.dataset_hash = caption_pairs_hash(pairs);
  for (const auto& group : groups) {
    const bool to_train = ds.train_pairs < target;
    auto& side = to_train ? ds.train : ds.test;
    for (const auto i : group) {
      side.push_back({pairs[i].original, 0, i});
      side.push_back({pairs[i].negated, 1, i});
    }
    (to_train ? ds.train_pairs : ds.test_pairs) += group.size();
  }
  if (ds.test.empty()) throw InputError("caption pairs collapse into a single text group; cannot split");
  return ds;
}

int predict_label(std::span<const float> w, std::span<const float> h) {
  double dot = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) dot += static_cast<double>(w[i]) * h[i];
  return dot > 0.0 ? 1 : 0;
}

double probe_accuracy(std::span<const float> w, const RowMatrixXf& features, std::span<const int> labels) {
  if (labels.empty()) return 0.0;
  const auto d = static_cast<std::size_t>(features.cols());
  std::size_t correct = 0;
  for (Eigen::Index r = 0; r < features.rows(); ++r)
    correct += predict_label(w, std::span<const float>(features.row(r).data(), d)) == labels[static_cast<std::size_t>(r)];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

ProbeWeights train_probe(const RowMatrixXf& features, std::span<const int> labels, const ProbeOptions& options) {
  const auto n = features.rows();
  if (static_cast<std::size_t>(n) != labels.size()) throw InputError("feature/label count mismatch");
  if (n < 2) throw TrainingError("need at least 2 training rows");
  const auto positives = std::count(labels.begin(), labels.end(), 1);
  if (positives == 0 || positives == n) throw TrainingError("single class in training labels");
  if (!features.allFinite()) throw TrainingError("non-finite features");

  const Eigen::MatrixXd x = features.cast<double>();
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = labels[static_cast<std::size_t>(i)] == 1 ? 1.0 : -1.0;
  const double c = options.inverse_regularization;

  Eigen::VectorXd margin(n), weight(n);
  auto objective = [&](const Eigen::VectorXd& w, Eigen::VectorXd& grad) {
    margin.noalias() = (x * w).cwiseProduct(y);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      loss += log1p_exp_neg(margin[i]);
      weight[i] = -y[i] * sigmoid(-margin[i]);
    }
    grad.noalias() = w + c * (x.transpose() * weight);
    return 0.5 * w.squaredNorm() + c * loss;
  };

  LbfgsOptions lb;
  lb.max_iterations = options.max_iterations;
  lb.gradient_tolerance = options.gradient_tolerance;
  const auto res = minimize_lbfgs(objective, Eigen::VectorXd::Zero(features.cols()), lb);

  ProbeWeights out;
  out.w.resize(static_cast<std::size_t>(features.cols()));
  for (Eigen::Index i = 0; i < res.x.size(); ++i) out.w[static_cast<std::size_t>(i)] = static_cast<float>(res.x[i]);
  out.iterations_used = res.iterations;
  out.converged = res.converged;
  out.train_accuracy = probe_accuracy(out.w, features, labels);
  return out;
}

ProbeWeights train_probe(const RowMatrixXf& train_features, std::span<const int> train_labels,
                         const RowMatrixXf& test_features, std::span<const int> test_labels,
                         const ProbeOptions& options) {
  auto out = train_probe(train_features, train_labels, options);
  out.test_accuracy = probe_accuracy(out.w, test_features, test_labels);
  return out;
}

LayerSweepResult layer_sweep(std::span<const CaptionPair> pairs, const Tokenizer& tokenizer,
                             const EncoderWeights& weights, double split_ratio, uint64_t seed,
                             const ProbeOptions& options, std::size_t threads) {
  LayerSweepResult result;
  result.dataset = build_dataset(pairs, split_ratio, seed);
  const int layers = weights.config.num_layers;
  const auto d = weights.config.hidden_width;

  auto extract = [&](const std::vector<LabeledCaption>& items) {
    std::vector<RowMatrixXf> per_layer(static_cast<std::size_t>(layers),
                                       RowMatrixXf(static_cast<Eigen::Index>(items.size()), d));
    parallel_for(items.size(), threads, [&](std::size_t i) {
      const auto fwd = forward(tokenizer.encode(items[i].text), weights, nullptr);
      for (int l = 0; l < layers; ++l)
        per_layer[static_cast<std::size_t>(l)].row(static_cast<Eigen::Index>(i)) =
            Eigen::Map<const Eigen::RowVectorXf>(fwd.captures[static_cast<std::size_t>(l)].h.data(), d);
    });
    return per_layer;
  };
  const auto train_x = extract(result.dataset.train);
  const auto test_x = extract(result.dataset.test);
  std::vector<int> train_y, test_y;
  for (const auto& c : result.dataset.train) train_y.push_back(c.label);
  for (const auto& c : result.dataset.test) test_y.push_back(c.label);

  result.probes.resize(static_cast<std::size_t>(layers));
  parallel_for(static_cast<std::size_t>(layers), threads, [&](std::size_t l) {
    ProbeWeights p;
    try {
      p = train_probe(train_x[l], train_y, test_x[l], test_y, options);
    } catch (const Error& e) {
      p.error = e.what();
    }
    p.layer = static_cast<int>(l) + 1;
    result.probes[l] = std::move(p);
  });
  return result;
}

std::span<const float> NegationDirection::layer(int l) const {
  if (l < 1 || l > num_layers()) throw InputError("direction has no layer " + std::to_string(l));
  return layers[static_cast<std::size_t>(l - 1)];
}

NegationDirection extract_direction(std::span<const ProbeWeights> probes, int num_layers,
                                    DirectionProvenance provenance) {
  NegationDirection dir;
  dir.provenance = std::move(provenance);
  std::size_t width = 0;
  for (int l = 1; l <= num_layers; ++l) {
    const auto it = std::find_if(probes.begin(), probes.end(), [&](const ProbeWeights& p) { return p.layer == l; });
    if (it == probes.end()) throw TrainingError("probe for layer " + std::to_string(l) + " missing");
    if (!it->ok()) throw TrainingError("probe for layer " + std::to_string(l) + " failed: " + it->error);
    if (width == 0) width = it->w.size();
    if (it->w.size() != width) throw TrainingError("probe for layer " + std::to_string(l) + " has a different width");
    double sq = 0.0;
    for (const float v : it->w) sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(sq);
    if (!(norm > 0.0) || !std::isfinite(norm))
      throw TrainingError("probe for layer " + std::to_string(l) + " has zero weights");
    std::vector<float> unit(width);
    for (std::size_t i = 0; i < width; ++i) unit[i] = static_cast<float>(it->w[i] / norm);
    dir.layers.push_back(std::move(unit));
    dir.train_accuracy.push_back(it->train_accuracy);
    dir.test_accuracy.push_back(it->test_accuracy);
  }
  return dir;
}

void save_direction(const NegationDirection& direction, const std::filesystem::path& path,
                    const std::map<std::string, std::string>& annotations) {
  TensorFile file;
  for (int l = 1; l <= direction.num_layers(); ++l) {
    const auto v = direction.layer(l);
    file.add("w_dir.layer." + std::to_string(l), {static_cast<int64_t>(v.size())}, {v.begin(), v.end()});
  }
  file.metadata()["format"] = "negsteer.direction/1";
  file.metadata()["encoder_identity"] = direction.provenance.encoder_identity;
  const auto bytes = file.serialize();
  file.write(path);

  json layers = json::array();
  for (int l = 1; l <= direction.num_layers(); ++l)
    layers.push_back({{"layer", l},
                      {"train_accuracy", direction.train_accuracy[static_cast<std::size_t>(l - 1)]},
                      {"test_accuracy", direction.test_accuracy[static_cast<std::size_t>(l - 1)]}});
  json doc = {{"format", "negsteer.direction/1"},
              {"num_layers", direction.num_layers()},
              {"hidden_width", direction.hidden_width()},
              {"provenance", provenance_json(direction.provenance)},
              {"layers", layers},
              {"annotations", annotations},
              {"container_sha256", sha256_hex(bytes)}};
  write_json(sidecar_path(path), doc);
}

NegationDirection load_direction(const std::filesystem::path& path) {
  const auto file = TensorFile::read(path);
  const auto side = read_sidecar(path);
  check_container_hash(file, side, path);
  NegationDirection dir;
  try {
    dir.provenance = provenance_from_json(side.at("provenance"));
    const int layers = side.at("num_layers").get<int>();
    for (int l = 1; l <= layers; ++l) {
      const auto& t = file.at("w_dir.layer." + std::to_string(l));
      double sq = 0.0;
      for (const float v : t.data) sq += static_cast<double>(v) * v;
      if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) throw LoadError("w_dir.layer." + std::to_string(l) + " is not unit norm");
      dir.layers.push_back(t.data);
      const auto& meta = side.at("layers").at(static_cast<std::size_t>(l - 1));
      dir.train_accuracy.push_back(meta.at("train_accuracy").get<double>());
      dir.test_accuracy.push_back(meta.at("test_accuracy").get<double>());
    }
  } catch (const json::exception& e) {
    throw LoadError(sidecar_path(path).string() + ": " + e.what());
  }
  return dir;
}

void save_probes(std::span<const ProbeWeights> probes, const DirectionProvenance& provenance,
                 const std::filesystem::path& path, const std::map<std::string, std::string>& annotations) {
  TensorFile file;
  json layers = json::array();
  for (const auto& p : probes) {
    if (p.ok()) file.add("probe.layer." + std::to_string(p.layer), {static_cast<int64_t>(p.w.size())}, p.w);
    layers.push_back({{"layer", p.layer},
                      {"train_accuracy", p.train_accuracy},
                      {"test_accuracy", p.test_accuracy},
                      {"iterations_used", p.iterations_used},
                      {"converged", p.converged},
                      {"error", p.error}});
  }
  file.metadata()["format"] = "negsteer.probes/1";
  const auto bytes = file.serialize();
  file.write(path);
  write_json(sidecar_path(path), {{"format", "negsteer.probes/1"},
                                  {"provenance", provenance_json(provenance)},
                                  {"layers", layers},
                                  {"annotations", annotations},
                                  {"container_sha256", sha256_hex(bytes)}});
}

std::vector<ProbeWeights> load_probes(const std::filesystem::path& path, DirectionProvenance* provenance) {
  const auto file = TensorFile::read(path);
  const auto side = read_sidecar(path);
  check_container_hash(file, side, path);
  std::vector<ProbeWeights> out;
  try {
    if (provenance) *provenance = provenance_from_json(side.at("provenance"));
    for (const auto& m : side.at("layers")) {
      ProbeWeights p;
      p.layer = m.at("layer").get<int>();
      p.train_accuracy = m.at("train_accuracy").get<double>();
      p.test_accuracy = m.at("test_accuracy").get<double>();
      p.iterations_used = m.at("iterations_used").get<int>();
      p.converged = m.at("converged").get<bool>();
      p.error = m.at("error").get<std::string>();
      if (p.ok()) p.w = file.at("probe.layer." + std::to_string(p.layer)).data;
      out.push_back(std::move(p));
    }
  } catch (const json::exception& e) {
    throw LoadError(sidecar_path(path).string() + ": " + e.what());
  }
  return out;
}

std::string negation_prompt_template() {
  return R"(You rewrite image captions so that they contain a negation.

For each input caption, produce one negated caption that keeps the scene but
states that some object, attribute or relation is absent. Vary the negation
cues across captions ("no", "not", "without", "lacking", "free of",
"never", "neither ... nor", "excluding") instead of reusing a single style.

Return one JSON object per line, exactly:
{"original": "<input caption>", "negated": "<negated caption>", "cue": "<negation cue used>"}

Captions:
{captions})";
}

}  // namespace negsteer
