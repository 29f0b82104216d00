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

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "kstar/kinematics.hpp"
#include "kstar/st_graph.hpp"
#include "kstar/urdf_model.hpp"

namespace kstar {

enum class TaskKind { LiftPlate, Handover, PushBox };

std::string_view to_string(TaskKind kind);
/// Throws UsageError for unknown names.
TaskKind task_from_name(std::string_view name);

struct TaskSpec {
  TaskKind kind = TaskKind::LiftPlate;
  Workspace workspace{{-1.0, -1.0, -0.1}, {1.0, 1.0, 0.1}};
  double success_pos_tol = 0.02;
  int step_budget = 50;

  static TaskSpec make(TaskKind kind);
  std::size_t object_width() const;
  int instruction_id() const { return static_cast<int>(kind); }
};

inline constexpr int kInstructionVocabulary = 3;
inline constexpr double kMaxJointStep = 0.15;  // rad per env step
inline constexpr double kGraspRadius = 0.03;
inline constexpr double kCollisionClearance = 0.01;
/// Handover: steps both grippers must hold the item before the giver lets go.
inline constexpr int kHandoverSettleSteps = 16;

struct Observation {
  std::size_t timestep = 0;
  JointVector joint_config;
  PoseVector ee_poses;
  std::vector<double> object_state;
  int instruction_id = 0;

  /// joint_config | ee_poses.flat() | object_state
  std::vector<double> flat() const;
};

/// Planar world: x horizontal, y up. Object fields are interpreted per task.
///   lift_plate_2d  points = left/right handle
///   handover_2d    points = bar end A (left grasp) / end B (right grasp)
///   push_box_2d    points[0] = box center
struct EnvState {
  JointVector theta;
  std::array<double, 2> gripper{0.0, 0.0};  // 0 open, 1 closed
  std::array<Eigen::Vector2d, 2> points{Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero()};
  Eigen::Vector2d target = Eigen::Vector2d::Zero();  // lift: initial plate centroid
  std::array<bool, 2> held{false, false};
  int holder = -1;  // handover: arm index carrying the bar
  /// Object coordinates in each gripper's frame, captured on grasp.
  std::array<std::array<Eigen::Vector2d, 2>, 2> grasp_local{};
  double plate_width = 0.0;
  int settle = 0;
  int streak = 0;
  bool dropped = false;
  bool success = false;
  std::size_t time = 0;

  bool terminal() const { return success || dropped; }
};

struct Segment {
  Eigen::Vector3d a;
  Eigen::Vector3d b;
};

double segment_distance(const Segment& s, const Segment& t);

struct CollisionReport {
  double min_distance = 0.0;
  bool colliding = false;
};

/// Minimum distance between the link segments of the two arms. Segments run
/// from the first movable joint of each arm to its end-effector.
CollisionReport self_collision_check(const RobotModel& model, const JointVector& theta);

/// Planar bimanual environment; immutable and shareable across threads.
class Env {
 public:
  explicit Env(TaskSpec spec);

  const TaskSpec& spec() const { return spec_; }
  const RobotModel& model() const { return model_; }
  const BimanualChains& chains() const { return chains_; }
  const JointVector& home() const { return home_; }

  EnvState reset(std::uint64_t seed) const;
  /// Joint targets are clamped to limits; each joint moves at most
  /// kMaxJointStep toward its target. Commands above 0.5 close a gripper.
  EnvState step(const EnvState& state, const JointVector& targets, const std::array<double, 2>& gripper_cmds) const;
  Observation observe(const EnvState& state) const;
  PoseVector ee_poses(const EnvState& state) const;

 private:
  void update_objects(EnvState& s, const std::array<double, 2>& previous_gripper) const;

  TaskSpec spec_;
  RobotModel model_;
  BimanualChains chains_;
  JointVector home_;
};

/// Planar end-effector pose at (x, y) with heading `yaw`.
Pose planar_pose(double x, double y, double yaw);

struct ExecOptions {
  std::size_t substeps = 10;
  /// IK runs to the strict defaults and is accepted if it ends within these.
  double pos_tol = 0.01;
  double rot_tol = 0.05;
};

enum class ExecStatus { Done, IkFailed, Terminal };

struct ExecResult {
  ExecStatus status = ExecStatus::Done;
  std::size_t env_steps = 0;
  std::size_t collision_steps = 0;
};

/// IK for one arm from `init`, accepted under the executor tolerances.
std::optional<JointVector> executor_ik(const KinematicChain& chain, const Pose& target, const JointVector& init,
                                       const ExecOptions& options = {});

/// Both arms; model-order configuration or nullopt if either arm fails.
std::optional<JointVector> solve_bimanual(const Env& env, const PoseVector& action, const JointVector& init,
                                          const ExecOptions& options = {});

/// Moves to `action` by linear joint interpolation over max(substeps,
/// needed) steps, then one hold step applying the gripper commands. Stops
/// early when the state turns terminal. Every visited state is appended to
/// `trace` when given.
ExecResult execute_action(const Env& env, EnvState& state, const PoseVector& action, const ExecOptions& options = {},
                          std::vector<EnvState>* trace = nullptr);

struct DemoStep {
  Observation observation;
  JointVector joint_targets;
  std::array<double, 2> gripper_cmds{0.0, 0.0};
};

struct Demonstration {
  std::string task;
  std::uint64_t seed = 0;
  std::vector<DemoStep> steps;
  std::vector<std::size_t> keyframes;
};

struct KeyframeOptions {
  double speed_eps = 1e-3;  // rad per step
  /// A continued stop yields another keyframe every this many steps.
  std::size_t dwell_period = 11;
};

/// Keyframes: gripper command changes, stop onsets, periodic points inside
/// long stops, and the final index. Throws EmptyTrajectory.
std::vector<std::size_t> keyframe_discovery(const std::vector<JointVector>& joints,
                                            const std::vector<std::array<double, 2>>& gripper_cmds,
                                            const KeyframeOptions& options = {});
std::vector<std::size_t> keyframe_discovery(const std::vector<DemoStep>& steps, const KeyframeOptions& options = {});

/// Hand-authored waypoint script executed through execute_action. Throws
/// ExpertFailed when IK fails, a collision occurs or the task is not solved.
Demonstration scripted_expert(const Env& env, std::uint64_t seed);

/// Waypoint the scripted expert would send next from `state`, given the
/// number of actions already executed. Empty once the script is exhausted.
std::optional<PoseVector> expert_waypoint(const Env& env, const EnvState& state, std::size_t phase);

struct DemoGenReport {
  std::vector<Demonstration> demos;
  std::vector<std::uint64_t> skipped_seeds;
};

/// Collects `count` successful demos from consecutive seeds starting at
/// `first_seed`, skipping seeds the expert fails on.
DemoGenReport generate_demos(const Env& env, std::size_t count, std::uint64_t first_seed);

void save_demos(const std::filesystem::path& path, const std::vector<Demonstration>& demos);
/// Throws IoError or SchemaViolation (with the offending line number).
std::vector<Demonstration> load_demos(const std::filesystem::path& path);

}  // namespace kstar
