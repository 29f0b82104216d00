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

#include "kstar/pose.hpp"

#include <algorithm>
#include <cmath>

namespace kstar {

Eigen::Quaterniond canonical(const Eigen::Quaterniond& q) {
  Eigen::Quaterniond out = q.normalized();
  if (out.w() < 0.0) out.coeffs() = -out.coeffs();
  return out;
}

Pose::Pose(const Eigen::Vector3d& position, const Eigen::Quaterniond& orientation)
    : position_(position), orientation_(canonical(orientation)) {}

Pose Pose::from_xyz_rpy(const Eigen::Vector3d& xyz, const Eigen::Vector3d& rpy) {
  const Eigen::Quaterniond q = Eigen::AngleAxisd(rpy.z(), Eigen::Vector3d::UnitZ()) *
                               Eigen::AngleAxisd(rpy.y(), Eigen::Vector3d::UnitY()) *
                               Eigen::AngleAxisd(rpy.x(), Eigen::Vector3d::UnitX());
  return {xyz, q};
}

Pose Pose::from_matrix(const Eigen::Matrix4d& m) {
  const Eigen::Matrix3d r = m.topLeftCorner<3, 3>();
  return {m.topRightCorner<3, 1>(), Eigen::Quaterniond(r)};
}

Eigen::Matrix4d Pose::to_matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rotation();
  m.topRightCorner<3, 1>() = position_;
  return m;
}

Eigen::Vector3d Pose::rpy() const {
  const Eigen::Matrix3d r = rotation();
  const double pitch = std::asin(std::clamp(-r(2, 0), -1.0, 1.0));
  if (std::abs(std::cos(pitch)) < 1e-12) {
    // Gimbal lock: fold roll into yaw.
    return {0.0, pitch, std::atan2(-r(0, 1), r(1, 1))};
  }
  return {std::atan2(r(2, 1), r(2, 2)), pitch, std::atan2(r(1, 0), r(0, 0))};
}

Pose Pose::operator*(const Pose& rhs) const {
  return {position_ + orientation_ * rhs.position_, orientation_ * rhs.orientation_};
}

Pose Pose::inverse() const {
  const Eigen::Quaterniond inv = orientation_.conjugate();
  return {-(inv * position_), inv};
}

}  // namespace kstar
