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
#include <span>
#include <vector>

#include <Eigen/Core>

#include "kstar/autodiff.hpp"
#include "kstar/pose.hpp"
#include "kstar/urdf_model.hpp"

namespace kstar {

/// Joint values in model (or chain) order: radians for revolute joints,
/// meters for prismatic ones.
using JointVector = Eigen::VectorXd;

/// Flat width of one arm's action: position (3), quaternion wxyz (4), gripper (1).
inline constexpr std::size_t kArmActionWidth = 8;
inline constexpr std::size_t kBimanualActionWidth = 2 * kArmActionWidth;
/// Width of the differentiable reference: per arm position (3) + quaternion (4).
inline constexpr std::size_t kReferenceWidth = 14;

struct ArmAction {
  Pose pose;
  double gripper = 0.0;  // 0 open, 1 closed
};

/// End-effector target for both arms. `flat()` lays out left then right,
/// each as [px py pz qw qx qy qz gripper].
struct PoseVector {
  ArmAction left;
  ArmAction right;

  const ArmAction& arm(Arm a) const { return a == Arm::Left ? left : right; }
  ArmAction& arm(Arm a) { return a == Arm::Left ? left : right; }
  std::array<double, kBimanualActionWidth> flat() const;
};

struct NormalizedAction {
  PoseVector action;
  /// Set for an arm whose quaternion block was near zero and replaced by identity.
  std::array<bool, 2> identity_fallback{false, false};
};

/// Projects an unconstrained 16-vector onto valid poses: unit quaternions
/// (identity when the block norm is below 1e-8) and grippers clamped to [0, 1].
NormalizedAction normalize_action(std::span<const double> raw);

Pose fk_pose(const KinematicChain& chain, const JointVector& theta);

/// World origin of every movable joint frame, in model movable order.
std::vector<Eigen::Vector3d> fk_joint_positions(const RobotModel& model, const JointVector& theta);

/// World pose of every link, keyed by index into model.links.
std::vector<Pose> fk_link_poses(const RobotModel& model, const JointVector& theta);

/// 6 x n geometric Jacobian; rows are linear then angular velocity.
Eigen::MatrixXd jacobian(const KinematicChain& chain, const JointVector& theta);

struct PoseError {
  double position = 0.0;  // meters
  double rotation = 0.0;  // radians in [0, pi]
};

PoseError pose_error(const Pose& a, const Pose& b);

/// Rotation vector (axis * angle) taking `from` to `to`, expressed in the
/// world frame.
Eigen::Vector3d rotation_log(const Eigen::Quaterniond& from, const Eigen::Quaterniond& to);

struct IkOptions {
  int max_iters = 200;
  double damping = 1e-2;
  double pos_tol = 1e-4;
  double rot_tol = 1e-3;
  double max_step = 0.5;  // radians (or meters) per joint per iteration
};

enum class IkStatus { Converged, Unreachable, NoConvergence };

struct IkResult {
  IkStatus status = IkStatus::NoConvergence;
  JointVector theta;
  int iterations = 0;
  PoseError error;

  bool ok() const { return status == IkStatus::Converged; }
};

/// Largest distance from the chain base the tip can attain.
double reach_radius(const KinematicChain& chain);

/// Damped least squares from `theta_init`, clamping each iterate to the joint
/// limits. Failures are reported in the result; see ik_solve for a throwing
/// variant.
IkResult try_ik_solve(const KinematicChain& chain, const Pose& target, const JointVector& theta_init,
                      const IkOptions& options = {});

/// Throws Unreachable or NoConvergence on failure.
JointVector ik_solve(const KinematicChain& chain, const Pose& target, const JointVector& theta_init,
                     const IkOptions& options = {});

JointVector clamp_to_limits(const KinematicChain& chain, const JointVector& theta);
JointVector clamp_to_limits(const RobotModel& model, const JointVector& theta);

/// Per-arm end-effector chains of a bimanual model.
struct BimanualChains {
  KinematicChain left;
  KinematicChain right;

  static BimanualChains of(const RobotModel& model);
  const KinematicChain& arm(Arm a) const { return a == Arm::Left ? left : right; }
};

/// Splits a model-order configuration into one arm's chain-order values.
JointVector arm_values(const KinematicChain& chain, const JointVector& model_theta);

/// Differentiable bimanual forward kinematics. `joints` is (m,) or (batch, m)
/// in model movable order; the result is (14,) or (batch, 14) laid out as
/// left [p q] then right [p q]. Quaternions come from a max-trace branch
/// rotation-to-quaternion conversion and are sign-canonicalized (w >= 0).
ad::Var dfk(const ad::Var& joints, const BimanualChains& chains, std::size_t movable_count);
ad::Var dfk(const ad::Var& joints, const RobotModel& model);

}  // namespace kstar
