#include <gtest/gtest.h>

#include <fstream>
#include <json.hpp>
#include <map>
#include <sstream>

#include "mock_chat_server.hpp"
#include "negsteer/cli.hpp"
#include "negsteer/errors.hpp"
#include "negsteer/judge.hpp"
#include "negsteer/probe.hpp"
#include "negsteer/retrieval_index.hpp"
#include "pipeline_fixture.hpp"
#include "test_util.hpp"

using namespace negsteer;
using negsteer::testing::fixture;
using negsteer::testing::MockChatServer;
using negsteer::testing::MockReply;
using negsteer::testing::MockRequest;
using negsteer::testing::read_file;
using negsteer::testing::TempDir;
using negsteer::testing::write_file;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> encoder_flags() {
  return {"--weights", fixture("tiny_clip/tiny_clip.safetensors").string(), "--vocab",
          fixture("tiny_clip/vocab.json").string(), "--merges", fixture("tiny_clip/merges.txt").string()};
}

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

json read_json(const std::filesystem::path& p) { return json::parse(read_file(p)); }

// Trains a direction on planted pairs and returns the output directory.
std::filesystem::path trained(const TempDir& dir, const std::string& name = "probe") {
  write_caption_pairs(negsteer::testing::planted_caption_pairs(120, 5), dir / "pairs.jsonl");
  const auto out = dir / name;
  const auto r = run(with({"probe", "--pairs", (dir / "pairs.jsonl").string(), "--out", out.string()}, encoder_flags()));
  EXPECT_EQ(r.code, 0) << r.err;
  return out;
}

}  // namespace

TEST(Cli, MissingWeightsIsExit2) {
  const auto r = run({"probe", "--weights", "/no/such/weights.safetensors", "--pairs", "/no/pairs"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("not found"), std::string::npos) << r.err;
  TempDir dir;
  write_file(dir / "p.jsonl", "");
  const auto r2 = run({"probe", "--pairs", (dir / "p.jsonl").string(), "--weights", "/no/such/w"});
  EXPECT_NE(r2.err.find("weights not found"), std::string::npos) << r2.err;
}

TEST(Cli, UnknownCommandOrKeyIsExit2) {
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"show-config", "--set", "steering.bogus=1"}).code, 2);
  EXPECT_EQ(run({"show-config", "--set", "noequals"}).code, 2);
}

TEST(Cli, ConfigPrecedenceFlagsOverFileOverDefaults) {
  TempDir dir;
  EXPECT_EQ(json::parse(run({"show-config"}).out)["steering"]["alpha"], 0.13);
  write_file(dir / "c.json", R"({"steering": {"alpha": 0.2}, "seed": 9})");
  auto r = run({"show-config", "--config", (dir / "c.json").string()});
  EXPECT_EQ(json::parse(r.out)["steering"]["alpha"], 0.2);
  EXPECT_EQ(json::parse(r.out)["seed"], 9);
  r = run({"show-config", "--config", (dir / "c.json").string(), "--alpha", "0.3"});
  EXPECT_EQ(json::parse(r.out)["steering"]["alpha"], 0.3);
  EXPECT_NE(r.err.find("config "), std::string::npos);
  r = run({"show-config", "--config", (dir / "c.json").string(), "--set", "steering.alpha=0.4"});
  EXPECT_EQ(json::parse(r.out)["steering"]["alpha"], 0.4);
  write_file(dir / "bad.json", R"({"stearing": {}})");
  EXPECT_EQ(run({"show-config", "--config", (dir / "bad.json").string()}).code, 2);
}

TEST(Cli, ProbeFlatCurveAndDeterministicArtifacts) {
  TempDir dir;
  const auto a = trained(dir);
  const auto acc = read_json(a / "layer_accuracy.json");
  for (const auto& l : acc["layers"]) EXPECT_EQ(l["test_accuracy"], 1.0) << l.dump();
  const char* files[] = {"layer_accuracy.json", "layer_accuracy.svg", "direction.safetensors",
                         "direction.safetensors.json", "probes.safetensors", "probes.safetensors.json"};
  std::map<std::string, std::string> first;
  for (const auto* f : files) first[f] = read_file(a / f);
  std::filesystem::remove_all(a);
  trained(dir);
  for (const auto* f : files) EXPECT_EQ(read_file(a / f), first[f]) << f;
  const auto side = read_json(a / "direction.safetensors.json");
  EXPECT_EQ(side["annotations"]["seed"], "0");
  EXPECT_FALSE(side["annotations"]["config_hash"].get<std::string>().empty());
  EXPECT_NE(read_file(a / "layer_accuracy.svg").find("<svg"), std::string::npos);
}

TEST(Cli, DirectionExportMatchesProbeOutput) {
  TempDir dir;
  const auto p = trained(dir);
  const auto r = run({"direction-export", "--probes", (p / "probes.safetensors").string(), "--out", (dir / "x").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(load_direction(dir / "x" / "direction.safetensors").layers, load_direction(p / "direction.safetensors").layers);
}

TEST(Cli, RetrieveMatchesCommittedRanking) {
  TempDir dir;
  auto r = run({"ingest-index", "--records", fixture("retrieval/records.jsonl").string(), "--out", dir.path().string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto expected = read_json(fixture("retrieval/expected_ranked.json"));
  r = run(with({"retrieve", "--index", (dir / "index.safetensors").string(), "--gating", "never", "--query",
                expected["query"].get<std::string>(), "--k", "10", "--out", dir.path().string()},
               encoder_flags()));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto line = json::parse(read_file(dir / "ranked.jsonl"));
  ASSERT_EQ(line["results"].size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(line["results"][i]["image_id"], expected["results"][i]["image_id"]) << i;
    EXPECT_NEAR(line["results"][i]["score"].get<double>(), expected["results"][i]["score"].get<double>(), 1e-5);
  }
  EXPECT_FALSE(line["steered"].get<bool>());
}

TEST(Cli, RetrieveKBeyondIndexIsError) {
  TempDir dir;
  run({"ingest-index", "--records", fixture("retrieval/records.jsonl").string(), "--out", dir.path().string()});
  const auto r = run(with({"retrieve", "--index", (dir / "index.safetensors").string(), "--gating", "never", "--query",
                           "the cat", "--k", "61", "--out", dir.path().string()},
                          encoder_flags()));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("exceeds index size"), std::string::npos) << r.err;
}

TEST(Cli, SteerFlagIsGatedForAffirmativeQueries) {
  TempDir dir;
  const auto p = trained(dir);
  run({"ingest-index", "--records", fixture("retrieval/records.jsonl").string(), "--out", dir.path().string()});
  auto common = with({"retrieve", "--index", (dir / "index.safetensors").string(), "--direction",
                      (p / "direction.safetensors").string(), "--k", "10"},
                     encoder_flags());
  const auto on = run(with(common, {"--steer", "always", "--query", "the cat sat", "--out", (dir / "on").string()}));
  const auto off = run(with(common, {"--steer", "never", "--query", "the cat sat", "--out", (dir / "off").string()}));
  ASSERT_EQ(on.code, 0) << on.err;
  ASSERT_EQ(off.code, 0) << off.err;
  EXPECT_EQ(on.out, off.out);
  EXPECT_EQ(read_file(dir / "on" / "ranked.jsonl"), read_file(dir / "off" / "ranked.jsonl"));
  const auto neg_on = run(with(common, {"--steer", "always", "--query", "the cat not sat", "--out", (dir / "n").string()}));
  EXPECT_NE(neg_on.out.find("\tsteered\t"), std::string::npos);
}

TEST(Cli, ProvenanceMismatchRefused) {
  TempDir dir;
  const auto p = trained(dir);
  // Same tensors, different container bytes.
  auto f = TensorFile::read(fixture("tiny_clip/tiny_clip.safetensors"));
  f.metadata()["model"] = "another-build";
  f.write(dir / "other.safetensors");
  run({"ingest-index", "--records", fixture("retrieval/records.jsonl").string(), "--out", dir.path().string()});
  const auto r = run({"retrieve", "--weights", (dir / "other.safetensors").string(), "--vocab",
                      fixture("tiny_clip/vocab.json").string(), "--merges", fixture("tiny_clip/merges.txt").string(),
                      "--index", (dir / "index.safetensors").string(), "--direction",
                      (p / "direction.safetensors").string(), "--query", "a cat with no dog", "--out",
                      dir.path().string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("encoder"), std::string::npos) << r.err;
}

TEST(Cli, JudgeScriptedReportAndWarmCache) {
  TempDir dir;
  // Two queries; images carry "<q_r>-<q_n>" answers.
  auto img = [&](const std::string& name, const std::string& label) {
    write_file(dir / name, label + "#" + name);
    return (dir / name).string();
  };
  const char* q1[] = {"yes-no", "no-no", "yes-yes", "yes-no", "no-no"};  // indicators r: 1 0 1 1 0, joint: 1 0 0 1 0
  const char* q2[] = {"no-no", "no-no", "no-no", "no-no", "yes-no"};     // r: 0 0 0 0 1, joint: 0 0 0 0 1
  std::ofstream res(dir / "ranked.jsonl");
  for (int q = 0; q < 2; ++q) {
    json items = json::array();
    for (int i = 0; i < 5; ++i) {
      const auto id = "q" + std::to_string(q) + "_" + std::to_string(i);
      items.push_back({{"image_id", id}, {"score", 1.0 - i * 0.1}, {"source", img(id + ".png", q ? q2[i] : q1[i])}});
    }
    res << json{{"query_id", "case" + std::to_string(q)}, {"query", "a road with no cars " + std::to_string(q)},
                {"steered", true}, {"benchmark", "scripted"}, {"positives", json::array()}, {"results", items}}
               .dump()
        << "\n";
  }
  res.close();
  auto handler = [](const MockRequest& r) -> MockReply {
    if (r.prompt.find("retrieval_question") != std::string::npos)
      return {200, R"({"retrieval_question": "Is it a road?", "negation_question": "Are cars visible?"})"};
    const auto bytes = negsteer::testing::decode_data_url(r.image_url);
    const auto label = bytes.substr(0, bytes.find('#'));
    const auto dash = label.find('-');
    return {200, r.prompt.find("cars") != std::string::npos ? label.substr(dash + 1) : label.substr(0, dash)};
  };
  std::string cold_report;
  {
    MockChatServer server(handler);
    const auto r = run({"judge", "--results", (dir / "ranked.jsonl").string(), "--judge-url", server.base_url(),
                        "--judge-model", "mock-judge", "--cache-dir", (dir / "cache").string(), "--out",
                        (dir / "cold").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto report = read_json(dir / "cold" / "report.json");
    EXPECT_EQ(report["cases"], 2);
    EXPECT_DOUBLE_EQ(report["retrieval"]["top1"].get<double>(), 0.5);
    EXPECT_DOUBLE_EQ(report["retrieval"]["avg5"].get<double>(), (0.6 + 0.2) / 2);
    EXPECT_DOUBLE_EQ(report["retrieval"]["top5"].get<double>(), 1.0);
    EXPECT_DOUBLE_EQ(report["retrieval_and_negation"]["top1"].get<double>(), 0.5);
    EXPECT_DOUBLE_EQ(report["retrieval_and_negation"]["avg5"].get<double>(), (0.4 + 0.2) / 2);
    EXPECT_DOUBLE_EQ(report["retrieval_and_negation"]["top5"].get<double>(), 1.0);
    EXPECT_FALSE(report["incomplete"].get<bool>());
    cold_report = read_file(dir / "cold" / "report.json");
    EXPECT_NE(r.out.find("Top-1"), std::string::npos);
  }
  const auto warm = run({"judge", "--results", (dir / "ranked.jsonl").string(), "--judge-url", "http://127.0.0.1:9/v1",
                         "--judge-model", "mock-judge", "--cache-dir", (dir / "cache").string(), "--out",
                         (dir / "warm").string()});
  ASSERT_EQ(warm.code, 0) << warm.err;
  // Only the provenance differs: the judge URL is part of the configuration.
  auto strip = [](json j) {
    j.erase("provenance");
    j.erase("content_sha256");
    return j;
  };
  EXPECT_EQ(strip(read_json(dir / "warm" / "report.json")), strip(json::parse(cold_report)));
  const auto cold_v = read_verdicts(dir / "cold" / "verdicts.jsonl");
  const auto warm_v = read_verdicts(dir / "warm" / "verdicts.jsonl");
  ASSERT_EQ(warm_v.size(), cold_v.size());
  for (std::size_t i = 0; i < warm_v.size(); ++i) {
    EXPECT_EQ(warm_v[i].answer_r, cold_v[i].answer_r);
    EXPECT_EQ(warm_v[i].answer_n, cold_v[i].answer_n);
    EXPECT_TRUE(warm_v[i].cached);
  }
}

TEST(Cli, JudgePartialFailureFlagsIncomplete) {
  TempDir dir;
  std::ofstream res(dir / "ranked.jsonl");
  json items = json::array();
  for (int i = 0; i < 5; ++i) items.push_back({{"image_id", "x"}, {"score", 0.5}, {"source", "/missing.png"}});
  res << json{{"query_id", "bad"}, {"query", "a dog with no hat"}, {"results", items}}.dump() << "\n";
  res.close();
  MockChatServer server([](const MockRequest&) {
    return MockReply{200, R"({"retrieval_question": "Is there a dog?", "negation_question": "Is there a hat?"})"};
  });
  const auto r = run({"judge", "--results", (dir / "ranked.jsonl").string(), "--judge-url", server.base_url(),
                      "--judge-model", "m", "--cache-dir", (dir / "c").string(), "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, 1);
  const auto report = read_json(dir / "o" / "report.json");
  EXPECT_TRUE(report["incomplete"].get<bool>());
  EXPECT_EQ(report["failed_queries"][0], "bad");
}

TEST(Cli, JudgeEmptyResultsIsError) {
  TempDir dir;
  write_file(dir / "empty.jsonl", "");
  const auto r = run({"judge", "--results", (dir / "empty.jsonl").string(), "--judge-url", "http://127.0.0.1:9/v1",
                      "--judge-model", "m", "--out", dir.path().string()});
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, AlphaGridParsing) {
  EXPECT_EQ(cli::parse_alpha_grid("0:0.5:0.25"), (std::vector<double>{0, 0.25, 0.5}));
  EXPECT_EQ(cli::parse_alpha_grid("0,0.13,0.9"), (std::vector<double>{0, 0.13, 0.9}));
  EXPECT_EQ(cli::parse_alpha_grid("0"), (std::vector<double>{0}));
  EXPECT_THROW(cli::parse_alpha_grid("0:1.5:0.5"), ConfigError);
  EXPECT_THROW(cli::parse_alpha_grid("-0.1"), ConfigError);
  EXPECT_THROW(cli::parse_alpha_grid("a,b"), ConfigError);
  EXPECT_THROW(cli::parse_alpha_grid("0:1:0"), ConfigError);
}

TEST(Cli, AblationAtZeroEqualsUnsteeredBaseline) {
  TempDir dir;
  const auto p = trained(dir);
  const auto weights = load_weights(fixture("tiny_clip/tiny_clip.safetensors"));
  const auto tok = Tokenizer::load(fixture("tiny_clip/vocab.json"), fixture("tiny_clip/merges.txt"), 32);
  negsteer::testing::write_planted_index(dir.path(), tok, weights, load_direction(p / "direction.safetensors"), {});
  ASSERT_EQ(run({"ingest-index", "--records", (dir / "records.jsonl").string(), "--out", dir.path().string()}).code, 0);
  const auto common = with({"--index", (dir / "index.safetensors").string(), "--benchmark",
                            (dir / "benchmark.jsonl").string(), "--direction", (p / "direction.safetensors").string()},
                           encoder_flags());
  const auto ab = run(with(with({"ablate-alpha", "--grid", "0,0.13", "--out", (dir / "ab").string()}, common), {}));
  ASSERT_EQ(ab.code, 0) << ab.err;
  const auto base = run(with({"retrieve", "--steer", "never", "--out", (dir / "base").string()}, common));
  ASSERT_EQ(base.code, 0) << base.err;
  const auto rows = read_json(dir / "ab" / "ablation.json")["rows"];
  const auto r1 = base.out.find("Recall@1 = ");
  ASSERT_NE(r1, std::string::npos);
  const double baseline = std::stod(base.out.substr(r1 + 11));
  EXPECT_DOUBLE_EQ(rows[0]["recall"]["R@1"].get<double>(), baseline);
  EXPECT_EQ(baseline, 0.0);
  EXPECT_EQ(rows[1]["recall"]["R@1"].get<double>(), 1.0);
  EXPECT_EQ(run(with({"ablate-alpha", "--grid", "0:2:1", "--out", (dir / "x").string()}, common)).code, 2);
}

TEST(Cli, PcaPlotPointCounts) {
  TempDir dir;
  const auto p = trained(dir);
  write_caption_pairs(negsteer::testing::planted_caption_pairs(197, 8), dir / "pca_pairs.jsonl");
  const auto r = run(with({"pca-plot", "--pairs", (dir / "pca_pairs.jsonl").string(), "--direction",
                           (p / "direction.safetensors").string(), "--out", (dir / "pca").string()},
                          encoder_flags()));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto doc = read_json(dir / "pca" / "pca.json");
  EXPECT_EQ(doc["points"].size(), 3u * 197u);
  EXPECT_EQ(doc["explained_variance"].size(), 3u);
  write_caption_pairs(negsteer::testing::planted_caption_pairs(3, 8), dir / "few.jsonl");
  EXPECT_EQ(run(with({"pca-plot", "--pairs", (dir / "few.jsonl").string(), "--direction",
                      (p / "direction.safetensors").string(), "--out", (dir / "pca2").string()},
                     encoder_flags()))
                .code,
            2);
}

TEST(Cli, VerifyDetectsTampering) {
  TempDir dir;
  const auto p = trained(dir);
  auto r = run({"verify", (p / "direction.safetensors").string(), (p / "layer_accuracy.json").string(),
                (p / "layer_accuracy.svg").string(), (p / "probes.safetensors").string()});
  EXPECT_EQ(r.code, 0) << r.out;
  auto text = read_file(p / "layer_accuracy.json");
  const auto at = text.find("\"train_pairs\": ");
  ASSERT_NE(at, std::string::npos);
  text[at + 15] = text[at + 15] == '7' ? '8' : '7';
  write_file(p / "layer_accuracy.json", text);
  r = run({"verify", (p / "layer_accuracy.json").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("FAIL"), std::string::npos);
  write_file(p / "layer_accuracy.svg", "<svg/>");
  EXPECT_EQ(run({"verify", (p / "layer_accuracy.svg").string()}).code, 2);
}
