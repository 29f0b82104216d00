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

// Independent reference implementations used only by tests. They avoid the
// library's Pose/quaternion code paths on purpose.

#pragma once

#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "kstar/urdf_model.hpp"

namespace kstar::testing {

inline Eigen::Matrix4d homogeneous(const Eigen::Matrix3d& r, const Eigen::Vector3d& p) {
  Eigen::Matrix4d t = Eigen::Matrix4d::Identity();
  t.topLeftCorner<3, 3>() = r;
  t.topRightCorner<3, 1>() = p;
  return t;
}

// Rodrigues' formula written out by hand.
inline Eigen::Matrix3d axis_angle_matrix(const Eigen::Vector3d& axis, double angle) {
  const double c = std::cos(angle), s = std::sin(angle), v = 1.0 - c;
  const double x = axis.x(), y = axis.y(), z = axis.z();
  Eigen::Matrix3d r;
  r << c + x * x * v, x * y * v - z * s, x * z * v + y * s,
       y * x * v + z * s, c + y * y * v, y * z * v - x * s,
       z * x * v - y * s, z * y * v + x * s, c + z * z * v;
  return r;
}

inline Eigen::Matrix3d rpy_matrix(double roll, double pitch, double yaw) {
  return axis_angle_matrix(Eigen::Vector3d::UnitZ(), yaw) * axis_angle_matrix(Eigen::Vector3d::UnitY(), pitch) *
         axis_angle_matrix(Eigen::Vector3d::UnitX(), roll);
}

inline Eigen::Matrix4d pose_matrix(const Pose& p) {
  const double w = p.orientation().w(), x = p.orientation().x(), y = p.orientation().y(), z = p.orientation().z();
  Eigen::Matrix3d r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return homogeneous(r, p.position());
}

// Walks the raw joint list of the model from the root to `tip`, multiplying
// 4x4 matrices. `theta` is in model movable order.
inline Eigen::Matrix4d oracle_fk(const RobotModel& model, const std::string& tip, const Eigen::VectorXd& theta) {
  std::vector<const JointSpec*> path;
  std::string link = tip;
  while (const JointSpec* j = model.parent_joint(link)) {
    path.insert(path.begin(), j);
    link = j->parent_link;
  }
  std::vector<double> value(model.joints.size(), 0.0);
  const auto movable = model.movable_indices();
  for (std::size_t k = 0; k < movable.size(); ++k) value[movable[k]] = theta[static_cast<Eigen::Index>(k)];
  Eigen::Matrix4d t = Eigen::Matrix4d::Identity();
  for (const JointSpec* j : path) {
    t = t * pose_matrix(j->origin);
    const double q = value[static_cast<std::size_t>(j - model.joints.data())];
    if (j->kind == JointKind::Revolute) t = t * homogeneous(axis_angle_matrix(j->axis, q), Eigen::Vector3d::Zero());
    if (j->kind == JointKind::Prismatic) t = t * homogeneous(Eigen::Matrix3d::Identity(), j->axis * q);
  }
  return t;
}

inline Eigen::VectorXd random_config(const RobotModel& model, std::mt19937_64& rng, double margin = 0.0) {
  const auto movable = model.movable_indices();
  Eigen::VectorXd theta(static_cast<Eigen::Index>(movable.size()));
  for (std::size_t k = 0; k < movable.size(); ++k) {
    const auto& l = model.joints[movable[k]].limits;
    std::uniform_real_distribution<double> u(l.lower + margin, l.upper - margin);
    theta[static_cast<Eigen::Index>(k)] = u(rng);
  }
  return theta;
}

// Quaternion distance up to sign.
inline double quaternion_distance(const Eigen::Quaterniond& a, const Eigen::Quaterniond& b) {
  return std::min((a.coeffs() - b.coeffs()).norm(), (a.coeffs() + b.coeffs()).norm());
}

inline Eigen::Quaterniond matrix_quaternion(const Eigen::Matrix4d& t) {
  return Eigen::Quaterniond(Eigen::Matrix3d(t.topLeftCorner<3, 3>())).normalized();
}

}  // namespace kstar::testing
