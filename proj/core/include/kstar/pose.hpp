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

#include <Eigen/Geometry>

namespace kstar {

/// Rigid transform in SE(3): position in meters plus a unit quaternion.
/// The quaternion is normalized and sign-canonicalized (w >= 0) on
/// construction.
class Pose {
 public:
  Pose() : position_(Eigen::Vector3d::Zero()), orientation_(Eigen::Quaterniond::Identity()) {}
  Pose(const Eigen::Vector3d& position, const Eigen::Quaterniond& orientation);

  /// Fixed-axis XYZ roll-pitch-yaw, i.e. R = Rz(yaw) * Ry(pitch) * Rx(roll).
  static Pose from_xyz_rpy(const Eigen::Vector3d& xyz, const Eigen::Vector3d& rpy);
  static Pose from_matrix(const Eigen::Matrix4d& m);

  const Eigen::Vector3d& position() const { return position_; }
  const Eigen::Quaterniond& orientation() const { return orientation_; }

  Eigen::Matrix3d rotation() const { return orientation_.toRotationMatrix(); }
  Eigen::Matrix4d to_matrix() const;
  Eigen::Vector3d rpy() const;

  Pose operator*(const Pose& rhs) const;
  Eigen::Vector3d operator*(const Eigen::Vector3d& point) const {
    return position_ + orientation_ * point;
  }
  Pose inverse() const;

 private:
  Eigen::Vector3d position_;
  Eigen::Quaterniond orientation_;
};

/// Normalizes and flips the quaternion so that w >= 0.
Eigen::Quaterniond canonical(const Eigen::Quaterniond& q);

}  // namespace kstar
