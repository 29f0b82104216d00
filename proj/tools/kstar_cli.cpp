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

// kstar: command-line front end for the kstar library.
//
// Exit codes: 0 success, 1 domain error, 2 usage error. Errors are reported
// as one JSON line on stderr: {"error": "<Code>", "message": "..."}.

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "kstar/autodiff.hpp"
#include "kstar/error.hpp"
#include "kstar/kinematics.hpp"
#include "kstar/policy.hpp"
#include "kstar/st_graph.hpp"
#include "kstar/tasks.hpp"
#include "kstar/urdf_model.hpp"

namespace {

using nlohmann::json;
using namespace kstar;

std::vector<double> parse_list(const std::string& text, const char* flag) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      fail(ErrorCode::UsageError, std::string(flag) + ": '" + item + "' is not a number");
    }
  }
  return out;
}

JointVector joint_vector(const std::string& text, std::size_t expected, const char* flag) {
  const auto v = parse_list(text, flag);
  if (v.size() != expected) {
    fail(ErrorCode::LengthMismatch,
         std::string(flag) + " needs " + std::to_string(expected) + " values, got " + std::to_string(v.size()));
  }
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Built-in name or path to a URDF file.
RobotModel load_model(const std::string& spec, const ParseOptions& options = {}) {
  if (builtin_from_name(spec)) return builtin_model(spec);
  return parse_urdf(read_file(spec), options);
}

json pose_json(const Pose& p) {
  const auto& q = p.orientation();
  return {{"position", {p.position().x(), p.position().y(), p.position().z()}},
          {"quaternion_wxyz", {q.w(), q.x(), q.y(), q.z()}}};
}

void print(const json& j) { std::cout << j.dump(2) << '\n'; }

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out || !(out << j.dump(2) << '\n')) fail(ErrorCode::IoError, "cannot write " + path);
}

// ---------------------------------------------------------------------------

struct ParseUrdfArgs {
  std::string model;
  std::string left_prefix = "left_";
  std::string right_prefix = "right_";
  bool json_out = false;
};

json model_json(const RobotModel& m) {
  json joints = json::array();
  for (const auto& j : m.joints) {
    json e = {{"name", j.name},
              {"type", std::string(to_string(j.kind))},
              {"parent", j.parent_link},
              {"child", j.child_link},
              {"origin", pose_json(j.origin)},
              {"axis", {j.axis.x(), j.axis.y(), j.axis.z()}},
              {"limits", {{"lower", j.limits.lower}, {"upper", j.limits.upper}}},
              {"arm", j.arm ? json(std::string(to_string(*j.arm))) : json(nullptr)}};
    if (j.limits.max_velocity) e["limits"]["velocity"] = *j.limits.max_velocity;
    joints.push_back(e);
  }
  return {{"schema", "kstar-model/1"},
          {"name", m.name},
          {"root", m.root_link},
          {"links", m.links},
          {"joints", joints},
          {"arms", {{"left", m.arms.left}, {"right", m.arms.right}}}};
}

void run_parse_urdf(const ParseUrdfArgs& a) {
  ParseOptions opts;
  opts.left_prefix = a.left_prefix;
  opts.right_prefix = a.right_prefix;
  const RobotModel m = load_model(a.model, opts);
  if (a.json_out) {
    print(model_json(m));
    return;
  }
  const ValidationReport report = validate_model(m);
  std::cout << "model " << m.name << ": " << m.links.size() << " links, " << m.joints.size() << " joints ("
            << m.movable_count() << " movable), root " << m.root_link << '\n';
  std::cout << "left arm:";
  for (const auto& n : m.arms.left) std::cout << ' ' << n;
  std::cout << "\nright arm:";
  for (const auto& n : m.arms.right) std::cout << ' ' << n;
  std::cout << '\n';
  if (report.ok()) std::cout << "validation: ok\n";
  for (const auto& f : report.findings) std::cout << "finding " << f.code << ": " << f.message << '\n';
}

struct FkArgs {
  std::string model;
  std::string theta;
};

void run_fk(const FkArgs& a) {
  const RobotModel m = load_model(a.model);
  const JointVector theta = joint_vector(a.theta, m.movable_count(), "--theta");
  const BimanualChains chains = BimanualChains::of(m);
  print({{"left", pose_json(fk_pose(chains.left, arm_values(chains.left, theta)))},
         {"right", pose_json(fk_pose(chains.right, arm_values(chains.right, theta)))}});
}

struct IkArgs {
  std::string model;
  std::string arm = "left";
  std::string target;
  std::string init;
};

void run_ik(const IkArgs& a) {
  const RobotModel m = load_model(a.model);
  if (a.arm != "left" && a.arm != "right") fail(ErrorCode::UsageError, "--arm must be left or right");
  const KinematicChain chain = arm_chain(m, a.arm == "left" ? Arm::Left : Arm::Right);
  const auto t = parse_list(a.target, "--target");
  if (t.size() != 7) fail(ErrorCode::LengthMismatch, "--target needs x,y,z,qw,qx,qy,qz");
  const Pose target({t[0], t[1], t[2]}, Eigen::Quaterniond(t[3], t[4], t[5], t[6]));
  const JointVector init =
      a.init.empty() ? JointVector::Zero(static_cast<Eigen::Index>(chain.size())) : joint_vector(a.init, chain.size(), "--init");
  const JointVector theta = ik_solve(chain, target, init);
  const PoseError err = pose_error(fk_pose(chain, theta), target);
  print({{"theta", std::vector<double>(theta.data(), theta.data() + theta.size())},
         {"position_error", err.position},
         {"rotation_error", err.rotation}});
}

struct GraphArgs {
  std::string model;
  std::vector<std::string> thetas;
  std::size_t history = 0;
  std::string temporal = "consecutive";
};

json matrix_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

void run_graph_dump(const GraphArgs& a) {
  const RobotModel m = load_model(a.model);
  if (a.temporal != "consecutive" && a.temporal != "all_pairs") {
    fail(ErrorCode::UsageError, "--temporal must be consecutive or all_pairs");
  }
  // One --theta is repeated over the history; several must match it.
  std::vector<JointVector> configs;
  for (const auto& t : a.thetas) configs.push_back(joint_vector(t, m.movable_count(), "--theta"));
  if (configs.empty()) configs.push_back(JointVector::Zero(static_cast<Eigen::Index>(m.movable_count())));
  const std::size_t k = a.history == 0 ? configs.size() : a.history;
  if (configs.size() != 1 && configs.size() != k) {
    fail(ErrorCode::HistoryLengthMismatch,
         "--history " + std::to_string(k) + " with " + std::to_string(configs.size()) + " --theta values");
  }
  std::vector<SpatialGraph> slices;
  for (std::size_t t = 0; t < k; ++t) slices.push_back(build_spatial_graph(m, configs[configs.size() == 1 ? 0 : t], {}));
  const STGraph g =
      build_st_graph(slices, a.temporal == "all_pairs" ? TemporalRule::AllPairs : TemporalRule::Consecutive);
  json edges = json::array();
  for (const auto& [i, j] : g.edges) edges.push_back({i, j});
  Eigen::MatrixXd adjacency = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(g.nodes()), static_cast<Eigen::Index>(g.nodes()));
  for (const auto& [i, j] : g.edges) {
    adjacency(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = 1.0;
    adjacency(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = 1.0;
  }
  print({{"timesteps", g.timesteps},
         {"joints", g.joints},
         {"nodes", g.nodes()},
         {"feature_width", g.features.cols()},
         {"spatial_edges", g.spatial_edge_count},
         {"temporal_edges", g.temporal_edge_count},
         {"edges", edges},
         {"features", matrix_json(g.features)},
         {"adjacency", matrix_json(adjacency)}});
}

struct GradcheckArgs {
  std::string model = "planar_bimanual_3dof";
  std::uint64_t seed = 0;
};

using ad::Tape;
using ad::Tensor;
using ad::Var;

Tensor random_tensor(const ad::Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(shape);
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.data()) v = u(rng);
  return t;
}

/// Reduces an arbitrary output to a scalar through fixed random weights so
/// every output coordinate contributes to the checked gradient.
Var project(Tape& tape, const Var& y, std::mt19937_64& rng) {
  return ad::sum(ad::mul(y, tape.leaf(random_tensor(y.shape(), rng))));
}

void run_gradcheck(const GradcheckArgs& a) {
  std::mt19937_64 rng(a.seed);
  const Tensor x = random_tensor({3, 4}, rng);
  const Tensor other = random_tensor({3, 4}, rng);
  const Tensor positive = random_tensor({3, 4}, rng, 0.5, 2.0);
  const Tensor right = random_tensor({4, 2}, rng);
  const Tensor row = random_tensor({4}, rng);
  const Tensor square = random_tensor({3, 3}, rng);
  const std::uint64_t proj_seed = rng();
  using Unary = std::function<Var(Tape&, const Var&)>;
  const std::vector<std::pair<std::string, Unary>> ops = {
      {"add", [&](Tape& t, const Var& v) { return v + t.leaf(other); }},
      {"sub", [&](Tape& t, const Var& v) { return t.leaf(other) - v; }},
      {"mul", [&](Tape& t, const Var& v) { return v * t.leaf(other); }},
      {"div", [&](Tape& t, const Var& v) { return t.leaf(other) / ad::add(ad::square(v), t.leaf(positive)); }},
      {"matmul", [&](Tape& t, const Var& v) { return ad::matmul(v, t.leaf(right)); }},
      {"sin", [&](Tape&, const Var& v) { return ad::sin(v); }},
      {"cos", [&](Tape&, const Var& v) { return ad::cos(v); }},
      {"sqrt", [&](Tape& t, const Var& v) { return ad::sqrt(ad::add(ad::square(v), t.leaf(positive))); }},
      {"neg", [&](Tape&, const Var& v) { return -v; }},
      {"sum", [&](Tape&, const Var& v) { return ad::reshape(ad::sum(v), {1}); }},
      {"mean", [&](Tape&, const Var& v) { return ad::reshape(ad::mean(v), {1}); }},
      {"concat", [&](Tape& t, const Var& v) { return ad::concat({v, t.leaf(other), v}, 1); }},
      {"slice", [&](Tape&, const Var& v) { return ad::slice(v, 1, 1, 2); }},
      {"relu", [&](Tape&, const Var& v) { return ad::relu(v); }},
      {"leaky_relu", [&](Tape&, const Var& v) { return ad::leaky_relu(v); }},
      {"tanh", [&](Tape&, const Var& v) { return ad::tanh(v); }},
      {"square", [&](Tape&, const Var& v) { return ad::square(v); }},
      {"scale", [&](Tape&, const Var& v) { return 2.5 * v; }},
      {"add_row", [&](Tape& t, const Var& v) { return ad::add_row(v, t.leaf(row)); }},
      {"block_matmul",
       [&](Tape& t, const Var& v) { return ad::block_matmul(t.leaf(square), ad::reshape(v, {3, 4})); }},
      {"group_mean_rows", [&](Tape&, const Var& v) { return ad::group_mean_rows(ad::reshape(v, {6, 2}), 3); }},
      {"reshape", [&](Tape&, const Var& v) { return ad::reshape(v, {4, 3}); }},
  };
  json report = json::object();
  double worst = 0.0;
  for (const auto& [name, op] : ops) {
    const auto f = [&, op = op](Tape& tape, const Var& v) {
      std::mt19937_64 proj(proj_seed);
      return project(tape, op(tape, v), proj);
    };
    // relu and leaky_relu kinks are avoided by keeping inputs off zero.
    Tensor input = x;
    for (double& v : input.data()) v = v < 0 ? v - 0.1 : v + 0.1;
    const double err = ad::check_gradient(f, input);
    report[name] = err;
    worst = std::max(worst, err);
  }
  const RobotModel m = load_model(a.model);
  const BimanualChains chains = BimanualChains::of(m);
  std::vector<double> theta;
  for (std::size_t i : m.movable_indices()) {
    const auto& lim = m.joints[i].limits;
    theta.push_back(std::uniform_real_distribution<double>(lim.lower, lim.upper)(rng));
  }
  const auto dfk_f = [&](Tape& tape, const Var& v) {
    std::mt19937_64 proj(proj_seed);
    return project(tape, dfk(v, chains, m.movable_count()), proj);
  };
  report["dfk"] = ad::check_gradient(dfk_f, Tensor::vector(theta));
  worst = std::max(worst, report["dfk"].get<double>());
  print({{"seed", a.seed}, {"max_relative_error", report}, {"worst", worst}, {"pass", worst < 1e-5}});
}

struct GenDemosArgs {
  std::string task;
  std::size_t num = 10;
  std::uint64_t seed = 0;
  std::string out;
};

void run_gen_demos(const GenDemosArgs& a) {
  const Env env(TaskSpec::make(task_from_name(a.task)));
  const DemoGenReport r = generate_demos(env, a.num, a.seed);
  save_demos(a.out, r.demos);
  for (auto s : r.skipped_seeds) std::cerr << "skipped seed " << s << '\n';
  print({{"task", a.task}, {"demos", r.demos.size()}, {"skipped_seeds", r.skipped_seeds}, {"out", a.out}});
}

struct KeyframesArgs {
  std::string in;
  bool stats = false;
};

void run_keyframes(const KeyframesArgs& a) {
  const auto demos = load_demos(a.in);
  if (!a.stats) {
    for (const auto& d : demos) {
      std::cout << json{{"task", d.task}, {"seed", d.seed}, {"steps", d.steps.size()}, {"keyframes", d.keyframes}}.dump()
                << '\n';
    }
    return;
  }
  std::size_t lo = demos.empty() ? 0 : SIZE_MAX, hi = 0, total = 0, steps = 0;
  for (const auto& d : demos) {
    lo = std::min(lo, d.keyframes.size());
    hi = std::max(hi, d.keyframes.size());
    total += d.keyframes.size();
    steps += d.steps.size();
  }
  const double n = demos.empty() ? 1.0 : static_cast<double>(demos.size());
  print({{"demos", demos.size()},
         {"mean_keyframes", static_cast<double>(total) / n},
         {"min_keyframes", lo},
         {"max_keyframes", hi},
         {"mean_steps", static_cast<double>(steps) / n}});
}

struct TrainArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::size_t log_every = 100;
};

void run_train(const TrainArgs& a) {
  json raw;
  try {
    raw = json::parse(read_file(a.config));
  } catch (const json::exception& e) {
    fail(ErrorCode::SchemaViolation, a.config + ": " + e.what());
  }
  PolicyConfig cfg = PolicyConfig::from_json(raw);
  if (a.seed) cfg.seed = *a.seed;
  if (a.steps) cfg.optimizer.total_steps = *a.steps;
  const auto start = std::chrono::steady_clock::now();
  bool announced = false;
  const TrainResult r = train_policy(cfg, [&](const TrainLogRow& row) {
    if (!announced) {
      announced = true;
      std::cerr << "training " << cfg.task << ", seed " << cfg.seed << '\n';
    }
    if (a.log_every > 0 && (row.step % a.log_every == 0 || row.step == 1)) {
      std::cerr << "step " << row.step << " loss " << row.loss.total << " (ee " << row.loss.ee << ", joint "
                << row.loss.joint << ")\n";
    }
  });
  save_checkpoint(a.out, r.policy, r.log);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  print({{"out", a.out},
         {"parameters", r.policy.params().scalar_count()},
         {"demos", r.demo_count},
         {"examples", r.example_count},
         {"steps", r.log.size()},
         {"final_loss", r.log.empty() ? 0.0 : r.log.back().loss.total},
         {"seconds", seconds}});
}

struct EvalArgs {
  std::string ckpt;
  std::size_t episodes = 50;
  std::uint64_t seed = 1000000;
  std::size_t workers = 1;
  std::optional<std::size_t> reverse_steps;
  std::string report;
};

Policy load_for_eval(const EvalArgs& a) {
  Policy policy = load_checkpoint(a.ckpt);
  if (a.reverse_steps) policy.set_reverse_steps(*a.reverse_steps);
  return policy;
}

json eval_report(const EvalArgs& a, const Policy& policy, const std::vector<EpisodeResult>& eps) {
  json rows = json::array();
  for (const auto& e : eps) rows.push_back(episode_json(e));
  return {{"schema", "kstar-report/1"},
          {"config", policy.config().to_json()},
          {"first_seed", a.seed},
          {"episodes", rows},
          {"summary", summary_json(summarize(eps))}};
}

void run_rollout(const EvalArgs& a) {
  const Policy policy = load_for_eval(a);
  const Env env(TaskSpec::make(task_from_name(policy.config().task)));
  const auto eps = evaluate(env, policy, a.episodes, a.seed, a.workers);
  for (const auto& e : eps) std::cout << episode_json(e).dump() << '\n';
  std::cout << json{{"summary", summary_json(summarize(eps))}}.dump() << '\n';
}

void run_eval(const EvalArgs& a) {
  const auto start = std::chrono::steady_clock::now();
  const Policy policy = load_for_eval(a);
  const Env env(TaskSpec::make(task_from_name(policy.config().task)));
  const auto eps = evaluate(env, policy, a.episodes, a.seed, a.workers);
  const json report = eval_report(a, policy, eps);
  write_json(a.report, report);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  print({{"report", a.report}, {"summary", report["summary"]}, {"seconds", seconds}});
}

struct PlotArgs {
  std::string ckpt;
  std::vector<std::string> reports;
  std::string out;
};

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  if (!out || !(out << text)) fail(ErrorCode::IoError, "cannot write " + path);
}

void run_plot_loss(const PlotArgs& a) {
  // The checkpoint already stores the curve; copy it through so the command
  // also validates the checkpoint.
  const Policy policy = load_checkpoint(a.ckpt);
  (void)policy;
  write_text(a.out, read_file((std::filesystem::path(a.ckpt) / "train_log.csv").string()));
}

void run_plot_scaling(const PlotArgs& a) {
  std::ostringstream csv;
  csv.precision(17);
  csv << "task,demos,seed,episodes,success_rate,feasibility_rate,mean_collisions\n";
  for (const auto& path : a.reports) {
    json r;
    try {
      r = json::parse(read_file(path));
      if (r.value("schema", "") != "kstar-report/1") throw std::runtime_error("not a kstar-report/1 file");
      const json& c = r.at("config");
      const json& s = r.at("summary");
      csv << c.at("task").get<std::string>() << ',' << c.at("demos").get<std::size_t>() << ','
          << c.at("seed").get<std::uint64_t>() << ',' << s.at("episodes").get<std::size_t>() << ','
          << s.at("success_rate").get<double>() << ',' << s.at("feasibility_rate").get<double>() << ','
          << s.at("mean_collisions").get<double>() << '\n';
    } catch (const Error&) {
      throw;
    } catch (const std::exception& e) {
      fail(ErrorCode::SchemaViolation, path + ": " + e.what());
    }
  }
  write_text(a.out, csv.str());
}

int report_error(ErrorCode code, const std::string& message) {
  std::cerr << json{{"error", std::string(to_string(code))}, {"message", message}}.dump() << '\n';
  return code == ErrorCode::UsageError ? 2 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kstar: kinematics, graphs and diffusion policies for bimanual arms"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "kstar 0.1.0");

  ParseUrdfArgs parse_args;
  auto* parse = app.add_subcommand("parse-urdf", "Parse and validate a URDF file or built-in model");
  parse->add_option("model", parse_args.model, "URDF path or built-in model name")->required();
  parse->add_option("--left-prefix", parse_args.left_prefix, "Joint name prefix of the left arm");
  parse->add_option("--right-prefix", parse_args.right_prefix, "Joint name prefix of the right arm");
  parse->add_flag("--json", parse_args.json_out, "Emit the parsed model as JSON");

  FkArgs fk_args;
  auto* fk = app.add_subcommand("fk", "Forward kinematics of both arms");
  fk->add_option("model", fk_args.model, "URDF path or built-in model name")->required();
  fk->add_option("--theta", fk_args.theta, "Comma-separated joint values in model order")->required();

  IkArgs ik_args;
  auto* ik = app.add_subcommand("ik", "Inverse kinematics for one arm");
  ik->add_option("model", ik_args.model, "URDF path or built-in model name")->required();
  ik->add_option("--arm", ik_args.arm, "left or right");
  ik->add_option("--target", ik_args.target, "x,y,z,qw,qx,qy,qz")->required();
  ik->add_option("--init", ik_args.init, "Initial chain configuration (default zeros)");

  GraphArgs graph_args;
  auto* graph = app.add_subcommand("graph-dump", "Print the spatial-temporal graph for a configuration history");
  graph->add_option("model", graph_args.model, "URDF path or built-in model name")->required();
  graph->add_option("--theta", graph_args.thetas, "Configuration per timestep, oldest first (repeatable)");
  graph->add_option("--history", graph_args.history, "Timesteps in the graph (default: number of --theta)");
  graph->add_option("--temporal", graph_args.temporal, "consecutive or all_pairs");

  GradcheckArgs grad_args;
  auto* grad = app.add_subcommand("gradcheck", "Check primitive-op and dfk gradients against finite differences");
  grad->add_option("--model", grad_args.model, "Model for the dfk check");
  grad->add_option("--seed", grad_args.seed, "Random seed");

  GenDemosArgs gen_args;
  auto* gen = app.add_subcommand("gen-demos", "Record scripted expert demonstrations");
  gen->add_option("--task", gen_args.task, "lift_plate_2d, handover_2d or push_box_2d")->required();
  gen->add_option("--num", gen_args.num, "Number of demonstrations");
  gen->add_option("--seed", gen_args.seed, "First environment seed");
  gen->add_option("--out", gen_args.out, "Output JSONL file")->required();

  KeyframesArgs kf_args;
  auto* kf = app.add_subcommand("keyframes", "List keyframes of recorded demonstrations");
  kf->add_option("--in", kf_args.in, "Demonstration JSONL file")->required();
  kf->add_flag("--stats", kf_args.stats, "Print aggregate statistics instead of per-demo lists");

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train a policy and write a checkpoint");
  train->add_option("--config", train_args.config, "Training config JSON")->required();
  train->add_option("--out", train_args.out, "Checkpoint directory")->required();
  train->add_option("--seed", train_args.seed, "Override the config seed");
  train->add_option("--steps", train_args.steps, "Override optimizer.total_steps");
  train->add_option("--log-every", train_args.log_every, "Progress interval on stderr (0 disables)");

  EvalArgs rollout_args;
  auto* roll = app.add_subcommand("rollout", "Run policy episodes and print per-episode results");
  roll->add_option("--ckpt", rollout_args.ckpt, "Checkpoint directory")->required();
  roll->add_option("--episodes", rollout_args.episodes, "Number of episodes");
  roll->add_option("--seed", rollout_args.seed, "First episode seed");
  roll->add_option("--workers", rollout_args.workers, "Parallel episode workers");
  roll->add_option("--reverse-steps", rollout_args.reverse_steps, "Override diffusion.reverse_steps");

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "Evaluate a policy and write a JSON report");
  eval->add_option("--ckpt", eval_args.ckpt, "Checkpoint directory")->required();
  eval->add_option("--episodes", eval_args.episodes, "Number of episodes");
  eval->add_option("--seed", eval_args.seed, "First episode seed");
  eval->add_option("--workers", eval_args.workers, "Parallel episode workers");
  eval->add_option("--reverse-steps", eval_args.reverse_steps, "Override diffusion.reverse_steps");
  eval->add_option("--report", eval_args.report, "Report path")->required();

  PlotArgs plot_args;
  auto* plot = app.add_subcommand("plot-data", "Emit CSV series for plotting");
  plot->require_subcommand(1);
  auto* plot_loss = plot->add_subcommand("loss", "Training loss curve of a checkpoint");
  plot_loss->add_option("--ckpt", plot_args.ckpt, "Checkpoint directory")->required();
  plot_loss->add_option("--out", plot_args.out, "CSV path (default stdout)");
  auto* plot_scaling = plot->add_subcommand("success-vs-demos", "Success rate per eval report");
  plot_scaling->add_option("--report", plot_args.reports, "Eval report (repeatable)")->required();
  plot_scaling->add_option("--out", plot_args.out, "CSV path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error(ErrorCode::UsageError, e.what());
  }

  try {
    if (*parse) run_parse_urdf(parse_args);
    else if (*fk) run_fk(fk_args);
    else if (*ik) run_ik(ik_args);
    else if (*graph) run_graph_dump(graph_args);
    else if (*grad) run_gradcheck(grad_args);
    else if (*gen) run_gen_demos(gen_args);
    else if (*kf) run_keyframes(kf_args);
    else if (*train) run_train(train_args);
    else if (*roll) run_rollout(rollout_args);
    else if (*eval) run_eval(eval_args);
    else if (*plot_loss) run_plot_loss(plot_args);
    else if (*plot_scaling) run_plot_scaling(plot_args);
  } catch (const Error& e) {
    return report_error(e.code(), e.what());
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "Internal"}, {"message", e.what()}}.dump() << '\n';
    return 1;
  }
  return 0;
}
