#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "json.hpp"
#include "regvit/report.hpp"
#include "regvit/train.hpp"
#include "regvit/vit.hpp"
#include "test_util.hpp"

using regvit::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = regvit::cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

// The run directory is printed last.
std::string last_line(const std::string& s) {
  const std::string body = s.substr(0, s.size() - 1);
  return body.substr(body.rfind('\n') + 1);
}

bool single_line(const std::string& s) { return !s.empty() && s.find('\n') == s.size() - 1; }

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::stringstream in(regvit::read_text(path));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> row;
    std::stringstream fields(line);
    std::string f;
    while (std::getline(fields, f, ',')) row.push_back(f);
    rows.push_back(row);
  }
  return rows;
}

const std::vector<std::string> kTiny = {"--image-size", "16", "--patch-size", "4", "--embed-dim", "16",
                                        "--depth", "2", "--heads", "2"};

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("help exits zero") {
  const Outcome o = run({"--help"});
  CHECK(o.code == 0);
  CHECK(o.out.find("complexity") != std::string::npos);
}

TEST_CASE("usage errors are single lines with exit code 2") {
  TempDir tmp("cli_usage");
  for (const auto& args : std::vector<std::vector<std::string>>{
           {},
           {"complexity", "--embed-dim", "abc"},
           {"lost", "--features", "x.tns"},
           {"lost", "--features", "x.tns", "--bias", "maybe"},
           {"interp-analysis", "--antialias", "sometimes"},
           {"complexity", "--no-such-flag"},
       }) {
    const Outcome o = run(args);
    CHECK(o.code == 2);
    CHECK(single_line(o.err));
    CHECK(o.err.rfind("error: usage: ", 0) == 0);
  }
}

TEST_CASE("config files reject unknown keys and conflicting flags") {
  TempDir tmp("cli_config");
  const fs::path cfg = tmp.path() / "c.json";

  regvit::write_text(cfg, R"({"model": {"embed_dim": 32, "embedd_dim": 4}})");
  Outcome o = run({"complexity", "--config", cfg.string(), "--out-root", tmp.path().string()});
  CHECK(o.code == 2);
  CHECK(o.err.find("model.embedd_dim") != std::string::npos);

  regvit::write_text(cfg, R"({"model": {"embed_dim": 32}})");
  o = run({"complexity", "--config", cfg.string(), "--embed-dim", "64", "--out-root", tmp.path().string()});
  CHECK(o.code == 2);
  CHECK(o.err.find("conflicting values for 'model.embed_dim'") != std::string::npos);
  CHECK(single_line(o.err));

  // Agreeing values are accepted.
  o = run({"complexity", "--config", cfg.string(), "--embed-dim", "32", "--out-root", tmp.path().string()});
  CHECK(o.code == 0);

  regvit::write_text(cfg, R"({"model": {"embed_dim": "wide"}})");
  o = run({"complexity", "--config", cfg.string(), "--out-root", tmp.path().string()});
  CHECK(o.code == 2);
  CHECK(o.err.find("model.embed_dim") != std::string::npos);

  regvit::write_text(cfg, "{not json");
  o = run({"complexity", "--config", cfg.string(), "--out-root", tmp.path().string()});
  CHECK(o.code == 2);
  CHECK(single_line(o.err));
}

TEST_CASE("complexity deltas grow by d per register") {
  TempDir tmp("cli_complexity");
  for (bool reg_pos : {false, true}) {
    std::vector<std::string> args = {"complexity", "--image-size", "64", "--patch-size", "8", "--embed-dim", "48", "--heads", "4",
                                     "--register-counts", "0,1,4,16",
                                     "--run-dir", (tmp.path() / (reg_pos ? "a" : "b")).string()};
    if (reg_pos) args.push_back("--reg-posembed");
    const Outcome o = run(args);
    REQUIRE(o.code == 0);
    const auto rows = read_csv(tmp.path() / (reg_pos ? "a" : "b") / "complexity.csv");
    REQUIRE(rows.size() == 5);
    CHECK(rows[0] == std::vector<std::string>{"registers", "seq_len", "output_tokens", "params", "param_delta", "flops",
                                              "flop_increase"});
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const long r = std::stol(rows[i][0]);
      CHECK(std::stol(rows[i][4]) == r * 48 * (reg_pos ? 2 : 1));
      CHECK(std::stol(rows[i][2]) == 1 + 64);
    }
    CHECK(fs::exists(tmp.path() / (reg_pos ? "a" : "b") / "flops_formula.txt"));
  }
}

TEST_CASE("hashed run directories are deterministic") {
  TempDir tmp("cli_hash");
  const std::vector<std::string> args = {"interp-analysis", "--src", "12", "--dst", "5", "--out-root",
                                         tmp.path().string()};
  const Outcome a = run(args);
  REQUIRE(a.code == 0);
  const std::string manifest_a = regvit::read_text(fs::path(last_line(a.out)) / "manifest.json");
  const Outcome b = run(args);
  REQUIRE(b.code == 0);
  CHECK(a.out == b.out);
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(tmp.path())) dirs.push_back(e.path());
  REQUIRE(dirs.size() == 1);
  CHECK(dirs[0].filename().string().rfind("interp-analysis-", 0) == 0);
  CHECK(dirs[0].filename().string().size() == std::string("interp-analysis-").size() + 12);
  CHECK(regvit::read_text(dirs[0] / "manifest.json") == manifest_a);

  // A different value lands in a different directory.
  REQUIRE(run({"interp-analysis", "--src", "12", "--dst", "6", "--out-root", tmp.path().string()}).code == 0);
  CHECK(std::distance(fs::directory_iterator(tmp.path()), fs::directory_iterator()) == 2);
}

TEST_CASE("foreign non-empty run directories are refused") {
  TempDir tmp("cli_foreign");
  regvit::write_text(tmp.path() / "keep.txt", "mine");
  const Outcome o = run({"interp-analysis", "--run-dir", tmp.path().string()});
  CHECK(o.code == 2);
  CHECK(fs::exists(tmp.path() / "keep.txt"));
}

TEST_CASE("train, extract, probe, lost and viz on a tiny model") {
  TempDir tmp("cli_pipeline");
  const auto p = [&](const char* name) { return (tmp.path() / name).string(); };
  REQUIRE(run(cat({"train", "--steps", "20", "--n-train", "16", "--batch-size", "8", "--registers", "2",
                   "--checkpoint-every", "10", "--run-dir", p("train")},
                  kTiny))
              .code == 0);
  CHECK(fs::exists(tmp.path() / "train" / "checkpoints" / regvit::checkpoint_dir_name(20) / "config.json"));
  const auto log = read_csv(tmp.path() / "train" / "metrics.csv");
  CHECK(log.size() == 21);

  REQUIRE(run({"extract", "--checkpoint", p("train"), "--n-images", "10", "--run-dir", p("plain")}).code == 0);
  CHECK_FALSE(fs::exists(tmp.path() / "plain" / "registers.tns"));
  const auto meta = nlohmann::json::parse(regvit::read_text(tmp.path() / "plain" / "features.json"));
  CHECK(meta["n_registers"] == 2);
  CHECK(meta["registers_exported"] == false);

  // Register selectors need the opt-in export.
  Outcome o = run({"probe", "--trace-dir", p("plain"), "--tasks", "classification", "--selectors", "register:0",
                   "--run-dir", p("probe_fail")});
  CHECK(o.code == 1);
  CHECK(o.err.find("error: contract: ") == 0);
  CHECK(o.err.find("--include-registers") != std::string::npos);
  CHECK(fs::exists(tmp.path() / "probe_fail" / "manifest.json"));

  REQUIRE(run({"extract", "--checkpoint", p("train"), "--n-images", "10", "--include-registers", "--run-dir",
               p("trace")})
              .code == 0);
  CHECK(regvit::load_tensor(tmp.path() / "trace" / "registers.tns").shape() == regvit::Shape{10, 2, 16});
  CHECK(regvit::load_tensor(tmp.path() / "trace" / "features.tns").shape() == regvit::Shape{10, 2, 4, 16, 16});

  o = run({"probe", "--trace-dir", p("trace"), "--tasks", "position,classification", "--selectors",
           "cls,register:1,random_normal_patch", "--tau", "1e9", "--run-dir", p("probe")});
  CHECK(o.code == 0);
  const auto results = read_csv(tmp.path() / "probe" / "probe_results.csv");
  CHECK(results.size() == 1 + 2 + 3);

  o = run({"probe", "--trace-dir", p("trace"), "--tasks", "classification", "--selectors", "random_outlier_patch",
           "--tau", "1e9", "--run-dir", p("probe_empty")});
  CHECK(o.code == 1);
  CHECK(o.err.find("error: empty_mask: ") == 0);

  o = run({"lost", "--features", p("trace") + "/features.tns", "--bias", "auto", "--dump", "1", "--run-dir",
           p("lost")});
  CHECK(o.code == 0);
  CHECK(read_csv(tmp.path() / "lost" / "boxes.csv").size() == 11);
  CHECK(fs::exists(tmp.path() / "lost" / "lost_0_mask.pgm"));
  CHECK(fs::exists(tmp.path() / "lost" / "corloc.csv"));

  o = run({"lost", "--features", p("trace") + "/features.tns", "--bias", "0", "--out", "/tmp/boxes.csv",
           "--run-dir", p("lost_abs")});
  CHECK(o.code == 2);
  o = run({"lost", "--features", p("trace") + "/features.tns", "--bias", "0", "--layer", "5", "--run-dir",
           p("lost_range")});
  CHECK(o.code == 1);
  CHECK(o.err.find("error: range: ") == 0);

  o = run({"viz", "--trace-dir", p("trace"), "--maps", "0:1:3,-1:mean:0", "--run-dir", p("viz")});
  CHECK(o.code == 0);
  CHECK(fs::exists(tmp.path() / "viz" / "attn_img0_l0_h1_q3.pgm"));
  CHECK(fs::exists(tmp.path() / "viz" / "attn_img0_l1_hmean_q0.pgm"));
  o = run({"viz", "--trace-dir", p("trace"), "--maps", "0:x:0", "--run-dir", p("viz_bad")});
  CHECK(o.code == 2);

  o = run({"analyze", "--trace-dir", p("trace"), "--train-dir", p("train"), "--run-dir", p("analyze")});
  CHECK(o.code == 0);
  for (const char* f : {"tau.json", "outliers.csv", "layer_norms.csv", "neighbor_cosine.csv", "heatmap.csv",
                        "heatmap.pgm", "norms_by_checkpoint.csv"})
    CHECK(fs::exists(tmp.path() / "analyze" / f));
  CHECK(read_csv(tmp.path() / "analyze" / "norms_by_checkpoint.csv").size() == 1 + 3);
}

TEST_CASE("training runs are bitwise reproducible") {
  TempDir tmp("cli_repro");
  for (const char* name : {"a", "b"}) {
    REQUIRE(run(cat({"train", "--steps", "15", "--n-train", "12", "--batch-size", "4", "--seed", "7", "--run-dir",
                     (tmp.path() / name).string()},
                    kTiny))
                .code == 0);
  }
  CHECK(regvit::read_text(tmp.path() / "a" / "metrics.csv") == regvit::read_text(tmp.path() / "b" / "metrics.csv"));
  CHECK(regvit::read_text(tmp.path() / "a" / "manifest.json") == regvit::read_text(tmp.path() / "b" / "manifest.json"));
}
