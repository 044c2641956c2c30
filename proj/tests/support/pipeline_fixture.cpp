#include "pipeline_fixture.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "negsteer/errors.hpp"

namespace negsteer::testing {

using nlohmann::json;

std::vector<CaptionPair> planted_caption_pairs(std::size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> letter(0, 25), len(2, 4), words(2, 4);
  // Words ending in "no" or "not" tokenize to a cue token.
  auto word = [&] {
    std::string w;
    do {
      w.clear();
      for (int i = len(rng); i > 0; --i) w += static_cast<char>('a' + letter(rng));
    } while (w.ends_with("no") || w.ends_with("not"));
    return w;
  };
  const char* cues[] = {"no", "not", "without"};
  std::vector<CaptionPair> pairs;
  for (std::size_t i = 0; i < n; ++i) {
    std::string s = word();
    for (int k = words(rng); k > 0; --k) s += " " + word();
    const char* cue = cues[i % 3];
    pairs.push_back({s, s + " " + cue + " " + word(), cue});
  }
  return pairs;
}

std::vector<std::string> planted_queries() {
  return {"a dog without a leash",   "a street with no cars",   "a bowl of fruit without apples",
          "a kitchen with no people", "a cat not on a mat",      "a shirt with no logo",
          "a beach without umbrellas", "a room with no windows", "a table without chairs",
          "a park with no dogs"};
}

void write_planted_index(const std::filesystem::path& dir, const Tokenizer& tokenizer, const EncoderWeights& weights,
                         const NegationDirection& direction, const SteeringConfig& steering) {
  auto steer_on = steering;
  steer_on.gating = Gating::Always;
  auto steer_off = steering;
  steer_off.enabled = false;
  const QueryEmbedder steered(tokenizer, weights, &direction, steer_on);
  const QueryEmbedder plain(tokenizer, weights, &direction, steer_off);

  std::filesystem::create_directories(dir / "images");
  std::ofstream records(dir / "records.jsonl");
  std::ofstream bench(dir / "benchmark.jsonl");
  auto image = [&](const std::string& id, const std::string& label) {
    const auto p = dir / "images" / (id + ".png");
    std::ofstream(p, std::ios::binary) << label << "#" << id;
    return p.string();
  };
  std::size_t written = 0;
  const auto queries = planted_queries();
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto sat = "sat_" + std::to_string(q), vio = "vio_" + std::to_string(q);
    records << json{{"image_id", sat}, {"vector", steered.embed(queries[q]).vector}, {"source", image(sat, "sat")}}.dump()
            << "\n";
    records << json{{"image_id", vio}, {"vector", plain.embed(queries[q]).vector}, {"source", image(vio, "vio")}}.dump()
            << "\n";
    bench << json{{"id", "planted:" + std::to_string(q)}, {"query", queries[q]}, {"positives", {sat}},
                  {"benchmark", "planted"}}
                 .dump()
          << "\n";
    written += 2;
  }
  std::mt19937_64 rng(77);
  std::normal_distribution<double> g;
  const auto e = static_cast<std::size_t>(weights.config.embed_dim);
  for (std::size_t i = 0; written < 200; ++i, ++written) {
    std::vector<float> v(e);
    double n = 0;
    std::vector<double> raw(e);
    for (auto& x : raw) {
      x = g(rng);
      n += x * x;
    }
    for (std::size_t j = 0; j < e; ++j) v[j] = static_cast<float>(raw[j] / std::sqrt(n));
    const auto id = "dis_" + std::to_string(i);
    records << json{{"image_id", id}, {"vector", v}, {"source", image(id, "dis")}}.dump() << "\n";
  }
}

MockReply planted_judge(const MockRequest& request) {
  if (request.prompt.find("retrieval_question") != std::string::npos)
    return {200, R"({"retrieval_question": "Does the image match the described scene?", )"
                 R"("negation_question": "Is the excluded object visible?"})"};
  const auto bytes = decode_data_url(request.image_url);
  const auto label = bytes.substr(0, bytes.find('#'));
  const bool negation_q = request.prompt.find("excluded object") != std::string::npos;
  if (negation_q) return {200, label == "vio" ? "Yes" : "No"};
  return {200, label == "dis" ? "No." : "Yes."};
}

}  // namespace negsteer::testing
