// Copyright 2026 The KStar Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// End-to-end checks of the kstar binary. Every subcommand runs as a child
// process on temporary files.

#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "kstar/urdf_model.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "kstar_cli_tests";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static Outcome run(const std::string& args) {
    const fs::path err = dir_ / "stderr.txt";
    const std::string cmd = std::string(KSTAR_BIN) + " " + args + " 2>" + err.string();
    Outcome r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    std::array<char, 4096> buf{};
    while (const std::size_t n = fread(buf.data(), 1, buf.size(), pipe)) r.out.append(buf.data(), n);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = slurp(err);
    return r;
  }

  static fs::path path(const std::string& name) { return dir_ / name; }

  // Shared trained checkpoint for rollout/eval/plot-data.
  static const fs::path& checkpoint() {
    static const fs::path ck = [] {
      std::ofstream(path("cfg.json")) << json{{"task", "lift_plate_2d"},
                                               {"demos", 4},
                                               {"demo_seed", 1000},
                                               {"diffusion", {{"reverse_steps", 5}}},
                                               {"optimizer", {{"total_steps", 10}, {"warmup_steps", 2}, {"batch_size", 8}}}}
                                               .dump();
      const Outcome r = run("train --config " + path("cfg.json").string() + " --out " + path("ck").string());
      EXPECT_EQ(r.code, 0) << r.err;
      return path("ck");
    }();
    return ck;
  }

  static inline fs::path dir_;
};

void expect_domain_error(const Outcome& r, const std::string& code) {
  EXPECT_EQ(r.code, 1);
  const auto line_end = r.err.find('\n');
  ASSERT_NE(line_end, std::string::npos);
  EXPECT_EQ(line_end, r.err.size() - 1) << "single line expected: " << r.err;
  const json e = json::parse(r.err);
  EXPECT_EQ(e.at("error"), code);
  EXPECT_TRUE(e.at("message").is_string());
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("no-such-command").code, 2);
  EXPECT_EQ(run("fk").code, 2);
  EXPECT_EQ(run("fk planar_bimanual_3dof --theta 1,2,3,4,5,6 --bogus").code, 2);
  const Outcome r = run("gen-demos --task lift_plate_2d --num x --out /dev/null");
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(json::parse(r.err).at("error"), "UsageError");
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, ParseUrdf) {
  std::ofstream(path("robot.urdf")) << kstar::builtin_urdf(kstar::BuiltinModel::SpatialBimanual7Dof);
  const Outcome text = run("parse-urdf " + path("robot.urdf").string());
  ASSERT_EQ(text.code, 0) << text.err;
  EXPECT_NE(text.out.find("14 movable"), std::string::npos);
  EXPECT_NE(text.out.find("validation: ok"), std::string::npos);

  const Outcome j = run("parse-urdf " + path("robot.urdf").string() + " --json");
  ASSERT_EQ(j.code, 0) << j.err;
  const json m = json::parse(j.out);
  EXPECT_EQ(m.at("schema"), "kstar-model/1");
  EXPECT_EQ(m.at("arms").at("left").size(), 7u);
  for (const auto& joint : m.at("joints")) {
    for (const char* key : {"name", "type", "parent", "child", "origin", "axis", "limits", "arm"})
      EXPECT_TRUE(joint.contains(key)) << key;
  }

  std::ofstream(path("bad.urdf")) << "<robot name='x'><link name='a'>";
  expect_domain_error(run("parse-urdf " + path("bad.urdf").string()), "MalformedXml");
  expect_domain_error(run("parse-urdf " + path("missing.urdf").string()), "IoError");
}

TEST_F(Cli, ForwardAndInverseKinematics) {
  const Outcome fk = run("fk planar_bimanual_3dof --theta 0,0,0,0,0,0");
  ASSERT_EQ(fk.code, 0) << fk.err;
  const json poses = json::parse(fk.out);
  EXPECT_NEAR(poses["left"]["position"][0].get<double>(), 0.45, 1e-12);
  EXPECT_NEAR(poses["right"]["position"][0].get<double>(), 0.95, 1e-12);
  expect_domain_error(run("fk planar_bimanual_3dof --theta 0,0"), "LengthMismatch");

  const Outcome ik = run("ik planar_bimanual_3dof --arm left --target 0.1,0.3,0,1,0,0,0 --init 1,-0.5,-0.5");
  ASSERT_EQ(ik.code, 0) << ik.err;
  const json sol = json::parse(ik.out);
  EXPECT_EQ(sol["theta"].size(), 3u);
  EXPECT_LT(sol["position_error"].get<double>(), 1e-4);
  expect_domain_error(run("ik planar_bimanual_3dof --target 5,0,0,1,0,0,0"), "Unreachable");
}

TEST_F(Cli, GraphDumpAndGradcheck) {
  const Outcome g = run("graph-dump spatial_bimanual_7dof --history 3");
  ASSERT_EQ(g.code, 0) << g.err;
  const json graph = json::parse(g.out);
  EXPECT_EQ(graph["nodes"], 42);
  EXPECT_EQ(graph["feature_width"], 19);
  EXPECT_EQ(graph["edges"].size(), 64u);
  EXPECT_EQ(graph["adjacency"].size(), 42u);
  EXPECT_EQ(graph["features"].size(), 42u);
  expect_domain_error(run("graph-dump planar_bimanual_3dof --theta 0,0,0,0,0,0 --theta 1,1,1,1,1,1 --history 3"),
                      "HistoryLengthMismatch");

  const Outcome c = run("gradcheck --seed 4");
  ASSERT_EQ(c.code, 0) << c.err;
  const json report = json::parse(c.out);
  EXPECT_TRUE(report["pass"].get<bool>());
  EXPECT_TRUE(report["max_relative_error"].contains("matmul"));
  EXPECT_TRUE(report["max_relative_error"].contains("dfk"));
}

TEST_F(Cli, DemosAndKeyframes) {
  const std::string out = path("demos.jsonl").string();
  const Outcome g = run("gen-demos --task handover_2d --num 3 --seed 1000 --out " + out);
  ASSERT_EQ(g.code, 0) << g.err;
  EXPECT_EQ(json::parse(g.out)["demos"], 3);
  std::ifstream in(out);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(json::parse(header), json({{"schema", "kstar-demo/1"}}));

  const Outcome k = run("keyframes --in " + out);
  ASSERT_EQ(k.code, 0) << k.err;
  std::istringstream lines(k.out);
  int n = 0;
  for (std::string l; std::getline(lines, l); ++n) EXPECT_EQ(json::parse(l)["task"], "handover_2d");
  EXPECT_EQ(n, 3);
  const Outcome s = run("keyframes --in " + out + " --stats");
  ASSERT_EQ(s.code, 0) << s.err;
  EXPECT_GT(json::parse(s.out)["mean_keyframes"].get<double>(), 3.0);

  const Outcome bad_task = run("gen-demos --task juggling --num 1 --out " + out);
  EXPECT_EQ(bad_task.code, 2);
  EXPECT_EQ(json::parse(bad_task.err).at("error"), "UsageError");
  std::ofstream(path("trunc.jsonl")) << header << "\n{\"task\": \"lift";
  expect_domain_error(run("keyframes --in " + path("trunc.jsonl").string()), "SchemaViolation");
}

TEST_F(Cli, TrainWritesCheckpoint) {
  const fs::path& ck = checkpoint();
  for (const char* f : {"config.json", "manifest.json", "params.bin", "train_log.csv"}) EXPECT_TRUE(fs::exists(ck / f)) << f;
  const json manifest = json::parse(slurp(ck / "manifest.json"));
  EXPECT_EQ(manifest["format"], "kstar-checkpoint/1");
  std::size_t total = 0;
  for (const auto& p : manifest["params"]) {
    EXPECT_EQ(p["offset"].get<std::size_t>(), total);
    std::size_t n = 1;
    for (const auto& d : p["shape"]) n *= d.get<std::size_t>();
    total += n;
  }
  EXPECT_EQ(fs::file_size(ck / "params.bin"), total * sizeof(double));

  std::ofstream(path("badcfg.json")) << R"({"lambda": 2})";
  expect_domain_error(run("train --config " + path("badcfg.json").string() + " --out " + path("x").string()),
                      "BadLambda");
}

// Keys and types of the eval report, as documented.
void validate_report(const json& r) {
  ASSERT_EQ(r.at("schema"), "kstar-report/1");
  ASSERT_TRUE(r.at("config").is_object());
  ASSERT_TRUE(r.at("first_seed").is_number_unsigned());
  const json& s = r.at("summary");
  for (const char* k : {"success_rate", "mean_collisions", "mean_ik_failures", "feasibility_rate"})
    ASSERT_TRUE(s.at(k).is_number()) << k;
  ASSERT_EQ(s.at("episodes").get<std::size_t>(), r.at("episodes").size());
  double success = 0, collisions = 0, ik = 0, predictions = 0, feasible = 0;
  for (const auto& e : r.at("episodes")) {
    ASSERT_TRUE(e.at("success").is_boolean());
    for (const char* k : {"seed", "steps", "env_steps", "collisions", "ik_failures", "predictions", "feasible"})
      ASSERT_TRUE(e.at(k).is_number_unsigned()) << k;
    success += e["success"].get<bool>();
    collisions += e["collisions"].get<double>();
    ik += e["ik_failures"].get<double>();
    predictions += e["predictions"].get<double>();
    feasible += e["feasible"].get<double>();
  }
  const double n = static_cast<double>(r["episodes"].size());
  EXPECT_DOUBLE_EQ(s["success_rate"].get<double>(), success / n);
  EXPECT_DOUBLE_EQ(s["mean_collisions"].get<double>(), collisions / n);
  EXPECT_DOUBLE_EQ(s["mean_ik_failures"].get<double>(), ik / n);
  EXPECT_DOUBLE_EQ(s["feasibility_rate"].get<double>(), predictions > 0 ? feasible / predictions : 0.0);
}

TEST_F(Cli, EvalIsDeterministicAndValid) {
  const std::string ck = checkpoint().string();
  const std::string a = path("r1.json").string(), b = path("r2.json").string();
  const Outcome r1 = run("eval --ckpt " + ck + " --episodes 4 --seed 7 --report " + a);
  ASSERT_EQ(r1.code, 0) << r1.err;
  const Outcome r2 = run("eval --ckpt " + ck + " --episodes 4 --seed 7 --workers 3 --report " + b);
  ASSERT_EQ(r2.code, 0) << r2.err;
  EXPECT_EQ(slurp(a), slurp(b));
  validate_report(json::parse(slurp(a)));
  EXPECT_TRUE(json::parse(r1.out).contains("seconds"));
  expect_domain_error(run("eval --ckpt " + path("nothing").string() + " --report " + a), "IoError");
}

TEST_F(Cli, EvalReverseStepsOverride) {
  const std::string ck = checkpoint().string();
  const std::string a = path("r_jump.json").string();
  const Outcome r = run("eval --ckpt " + ck + " --episodes 2 --reverse-steps 1 --report " + a);
  ASSERT_EQ(r.code, 0) << r.err;
  const json report = json::parse(slurp(a));
  validate_report(report);
  EXPECT_EQ(report["config"]["diffusion"]["reverse_steps"], 1);
  expect_domain_error(run("eval --ckpt " + ck + " --reverse-steps 0 --report " + a), "BadRange");
  expect_domain_error(run("rollout --ckpt " + ck + " --episodes 1 --reverse-steps 101"), "BadRange");
}

TEST_F(Cli, RolloutPrintsEpisodes) {
  const Outcome r = run("rollout --ckpt " + checkpoint().string() + " --episodes 2 --seed 3");
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream lines(r.out);
  std::vector<json> rows;
  for (std::string l; std::getline(lines, l);) rows.push_back(json::parse(l));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0]["seed"], 3);
  EXPECT_EQ(rows[1]["seed"], 4);
  EXPECT_EQ(rows[2]["summary"]["episodes"], 2);
}

TEST_F(Cli, PlotData) {
  const Outcome loss = run("plot-data loss --ckpt " + checkpoint().string());
  ASSERT_EQ(loss.code, 0) << loss.err;
  EXPECT_EQ(loss.out.substr(0, loss.out.find('\n')), "step,lr,loss,loss_ee,loss_joint");
  EXPECT_EQ(std::count(loss.out.begin(), loss.out.end(), '\n'), 11);

  const std::string report = path("r3.json").string();
  ASSERT_EQ(run("eval --ckpt " + checkpoint().string() + " --episodes 2 --report " + report).code, 0);
  const std::string csv = path("scaling.csv").string();
  const Outcome s = run("plot-data success-vs-demos --report " + report + " --report " + report + " --out " + csv);
  ASSERT_EQ(s.code, 0) << s.err;
  const std::string text = slurp(csv);
  EXPECT_EQ(text.substr(0, text.find('\n')), "task,demos,seed,episodes,success_rate,feasibility_rate,mean_collisions");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
  EXPECT_NE(text.find("lift_plate_2d,4,0,2,"), std::string::npos);
  expect_domain_error(run("plot-data success-vs-demos --report " + path("cfg.json").string()), "SchemaViolation");
}

}  // namespace
