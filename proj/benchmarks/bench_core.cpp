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

#include <random>

#include <benchmark/benchmark.h>

#include "kstar/kinematics.hpp"
#include "kstar/policy.hpp"
#include "kstar/st_graph.hpp"
#include "kstar/tasks.hpp"
#include "kstar/urdf_model.hpp"

namespace {

using namespace kstar;

JointVector random_config(const RobotModel& m, std::mt19937_64& rng) {
  JointVector theta(static_cast<Eigen::Index>(m.movable_count()));
  Eigen::Index k = 0;
  for (std::size_t i : m.movable_indices()) {
    const auto& lim = m.joints[i].limits;
    theta[k++] = std::uniform_real_distribution<double>(lim.lower, lim.upper)(rng);
  }
  return theta;
}

void BM_FkPose(benchmark::State& state) {
  const RobotModel m = builtin_model("spatial_bimanual_7dof");
  const KinematicChain chain = arm_chain(m, Arm::Left);
  std::mt19937_64 rng(0);
  const JointVector theta = arm_values(chain, random_config(m, rng));
  for (auto _ : state) benchmark::DoNotOptimize(fk_pose(chain, theta));
}
BENCHMARK(BM_FkPose);

void BM_DfkForwardBackward(benchmark::State& state) {
  const RobotModel m = builtin_model("spatial_bimanual_7dof");
  const BimanualChains chains = BimanualChains::of(m);
  std::mt19937_64 rng(0);
  const JointVector theta = random_config(m, rng);
  const ad::Tensor x = ad::Tensor::vector(std::vector<double>(theta.data(), theta.data() + theta.size()));
  for (auto _ : state) {
    ad::Tape tape;
    const ad::Var v = tape.leaf(x);
    benchmark::DoNotOptimize(tape.backward(ad::sum(dfk(v, chains, m.movable_count()))));
  }
}
BENCHMARK(BM_DfkForwardBackward);

void BM_IkSolve(benchmark::State& state) {
  const RobotModel m = builtin_model("spatial_bimanual_7dof");
  const KinematicChain chain = arm_chain(m, Arm::Left);
  std::mt19937_64 rng(0);
  const JointVector goal = arm_values(chain, random_config(m, rng));
  const Pose target = fk_pose(chain, goal);
  const JointVector init = JointVector::Zero(static_cast<Eigen::Index>(chain.size()));
  for (auto _ : state) benchmark::DoNotOptimize(try_ik_solve(chain, target, init));
}
BENCHMARK(BM_IkSolve);

void BM_GcnForward(benchmark::State& state) {
  const RobotModel m = builtin_model("spatial_bimanual_7dof");
  std::mt19937_64 rng(0);
  std::vector<SpatialGraph> slices;
  for (int t = 0; t < 3; ++t) slices.push_back(build_spatial_graph(m, random_config(m, rng), {}));
  const STGraph graph = build_st_graph(slices);
  ParamSet params;
  add_gcn_params(params, "gcn", static_cast<std::size_t>(graph.features.cols()), {}, rng);
  for (auto _ : state) {
    ad::Tape tape;
    const BoundParams bound(tape, params);
    benchmark::DoNotOptimize(gcn_forward(tape, graph, gcn_weights(bound, "gcn", 4)));
  }
}
BENCHMARK(BM_GcnForward);

void BM_TrainStep(benchmark::State& state) {
  PolicyConfig cfg;
  cfg.task = "lift_plate_2d";
  cfg.demos = 10;
  const Env env(TaskSpec::make(TaskKind::LiftPlate));
  const auto demos = generate_demos(env, cfg.demos, cfg.demo_seed).demos;
  const auto examples = build_training_set(demos, cfg);
  Policy policy = make_policy(cfg, examples);
  Trainer trainer(policy, examples);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step());
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
