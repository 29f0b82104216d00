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

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "kstar/pose.hpp"

namespace kstar {

enum class JointKind { Revolute, Prismatic, Fixed };
enum class Arm { Left, Right };

std::string_view to_string(JointKind kind);
std::string_view to_string(Arm arm);

struct JointLimits {
  double lower = 0.0;
  double upper = 0.0;
  std::optional<double> max_velocity;
};

struct JointSpec {
  std::string name;
  JointKind kind = JointKind::Fixed;
  std::string parent_link;
  std::string child_link;
  Pose origin;
  Eigen::Vector3d axis = Eigen::Vector3d::UnitX();
  JointLimits limits;
  std::optional<Arm> arm;  // set for movable joints only

  bool movable() const { return kind != JointKind::Fixed; }
};

struct ArmGroups {
  std::vector<std::string> left;
  std::vector<std::string> right;
};

/// Kinematic tree parsed from URDF. Plain data so that validate_model can
/// inspect arbitrary (including broken) instances; use parse_urdf or
/// builtin_model to obtain a valid one.
struct RobotModel {
  std::string name;
  std::vector<std::string> links;
  std::vector<JointSpec> joints;
  std::string root_link;
  ArmGroups arms;

  /// Indices into `joints` of the movable joints, in model order. This order
  /// defines the layout of every joint configuration vector.
  std::vector<std::size_t> movable_indices() const;
  std::size_t movable_count() const;
  const JointSpec* find_joint(std::string_view joint_name) const;
  /// Joint whose child is `link`, or nullptr for the root.
  const JointSpec* parent_joint(std::string_view link) const;
  bool has_link(std::string_view link) const;
};

/// Serial sub-chain of a model. Fixed joints are folded into the origin of the
/// next movable joint; trailing fixed joints end up in `tip_offset`.
struct KinematicChain {
  std::string base_link;
  std::string tip_link;
  Pose base_pose;  // world pose of base_link at the zero configuration
  std::vector<JointSpec> joints;
  Pose tip_offset;
  /// Position of each chain joint in the model's movable ordering.
  std::vector<std::size_t> model_indices;

  std::size_t size() const { return joints.size(); }
};

struct ParseOptions {
  std::string left_prefix = "left_";
  std::string right_prefix = "right_";
  /// When set, overrides prefix matching.
  std::optional<ArmGroups> explicit_arms;
  std::function<void(std::string_view)> on_warning;  // defaults to std::clog
};

RobotModel parse_urdf(std::string_view text, const ParseOptions& options = {});

/// Emits URDF text that parse_urdf maps back to an equal model.
std::string to_urdf(const RobotModel& model);

struct Finding {
  std::string code;
  std::string message;
};

struct ValidationReport {
  std::vector<Finding> findings;
  bool ok() const { return findings.empty(); }
};

ValidationReport validate_model(const RobotModel& model);

KinematicChain extract_chain(const RobotModel& model, std::string_view base, std::string_view tip);

/// Chain from the root to the end-effector link of one arm: the deepest link
/// below the arm's last movable joint.
KinematicChain arm_chain(const RobotModel& model, Arm arm);

enum class BuiltinModel { PlanarBimanual3Dof, SpatialBimanual7Dof };

std::optional<BuiltinModel> builtin_from_name(std::string_view name);
std::string builtin_urdf(BuiltinModel which);
RobotModel builtin_model(BuiltinModel which);
/// Throws UnknownModel for names outside the documented set.
RobotModel builtin_model(std::string_view name);

}  // namespace kstar
