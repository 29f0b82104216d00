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

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "kstar/error.hpp"
#include "kstar/kinematics.hpp"
#include "support/oracles.hpp"

namespace kstar {
namespace {

constexpr double kPi = std::numbers::pi;

std::string two_link_urdf(const char* type = "revolute", const char* axis = "0 0 1") {
  return std::string(R"(<robot name="two"><link name="a"/><link name="b"/><link name="c"/><link name="tip"/>
    <joint name="left_1" type=")") + type + R"("><parent link="a"/><child link="b"/>
      <axis xyz=")" + axis + R"("/><limit lower="-3.2" upper="3.2"/></joint>
    <joint name="left_2" type=")" + type + R"("><parent link="b"/><child link="c"/>
      <origin xyz="1 0 0"/><axis xyz=")" + axis + R"("/><limit lower="-3.2" upper="3.2"/></joint>
    <joint name="left_tool" type="fixed"><parent link="c"/><child link="tip"/><origin xyz="1 0 0"/></joint>
    </robot>)";
}

KinematicChain two_link() {
  ParseOptions quiet;
  quiet.on_warning = [](std::string_view) {};
  const RobotModel m = parse_urdf(two_link_urdf(), quiet);
  return extract_chain(m, "a", "tip");
}

TEST(FkPose, TwoLinkExamples) {
  const KinematicChain c = two_link();
  const Pose p0 = fk_pose(c, Eigen::Vector2d(0, 0));
  EXPECT_LT((p0.position() - Eigen::Vector3d(2, 0, 0)).norm(), 1e-15);
  EXPECT_NEAR(p0.orientation().w(), 1.0, 1e-15);
  const Pose p1 = fk_pose(c, Eigen::Vector2d(kPi / 2, 0));
  EXPECT_LT((p1.position() - Eigen::Vector3d(0, 2, 0)).norm(), 1e-15);
  EXPECT_NEAR(p1.rpy().z(), kPi / 2, 1e-15);
  // Closed form for a generic configuration.
  const double a = 0.4, b = -1.1;
  const Pose p2 = fk_pose(c, Eigen::Vector2d(a, b));
  EXPECT_NEAR(p2.position().x(), std::cos(a) + std::cos(a + b), 1e-15);
  EXPECT_NEAR(p2.position().y(), std::sin(a) + std::sin(a + b), 1e-15);
  try {
    fk_pose(c, Eigen::Vector3d::Zero());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::LengthMismatch);
  }
}

TEST(FkPose, Prismatic) {
  const RobotModel m = parse_urdf(R"(<robot name="p"><link name="a"/><link name="b"/>
    <joint name="left_p" type="prismatic"><parent link="a"/><child link="b"/>
    <axis xyz="0 0 1"/><limit lower="0" upper="1"/></joint></robot>)");
  const Pose p = fk_pose(extract_chain(m, "a", "b"), Eigen::VectorXd::Constant(1, 0.3));
  EXPECT_LT((p.position() - Eigen::Vector3d(0, 0, 0.3)).norm(), 1e-15);
}

TEST(FkPose, MatchesMatrixOracle) {
  std::mt19937_64 rng(1);
  for (auto which : {BuiltinModel::PlanarBimanual3Dof, BuiltinModel::SpatialBimanual7Dof}) {
    const RobotModel m = builtin_model(which);
    const BimanualChains chains = BimanualChains::of(m);
    for (int i = 0; i < 50; ++i) {
      const Eigen::VectorXd theta = testing::random_config(m, rng);
      for (Arm arm : {Arm::Left, Arm::Right}) {
        const KinematicChain& c = chains.arm(arm);
        const Pose got = fk_pose(c, arm_values(c, theta));
        const Eigen::Matrix4d want = testing::oracle_fk(m, c.tip_link, theta);
        EXPECT_LT((got.position() - want.topRightCorner<3, 1>()).norm(), 1e-12);
        EXPECT_LT(testing::quaternion_distance(got.orientation(), testing::matrix_quaternion(want)), 1e-12);
      }
    }
  }
}

TEST(FkPose, CompositionAtSplitPoints) {
  std::mt19937_64 rng(2);
  const RobotModel m = builtin_model(BuiltinModel::SpatialBimanual7Dof);
  const KinematicChain full = arm_chain(m, Arm::Left);
  for (int rep = 0; rep < 20; ++rep) {
    const Eigen::VectorXd theta = arm_values(full, testing::random_config(m, rng));
    for (std::size_t k = 0; k <= full.size(); ++k) {
      KinematicChain head = full, tail = full;
      head.joints.resize(k);
      head.tip_offset = Pose();
      tail.joints.erase(tail.joints.begin(), tail.joints.begin() + static_cast<std::ptrdiff_t>(k));
      tail.base_pose = fk_pose(head, theta.head(static_cast<Eigen::Index>(k)));
      const Pose whole = fk_pose(full, theta);
      const Pose split = fk_pose(tail, theta.tail(static_cast<Eigen::Index>(full.size() - k)));
      EXPECT_LT((whole.position() - split.position()).norm(), 1e-12);
      EXPECT_LT(testing::quaternion_distance(whole.orientation(), split.orientation()), 1e-12);
    }
  }
}

TEST(FkJointPositions, PlanarZeroConfig) {
  const RobotModel m = builtin_model(BuiltinModel::PlanarBimanual3Dof);
  const auto p = fk_joint_positions(m, Eigen::VectorXd::Zero(6));
  ASSERT_EQ(p.size(), 6u);
  EXPECT_LT((p[0] - Eigen::Vector3d(-0.25, 0, 0)).norm(), 1e-15);
  EXPECT_LT((p[1] - Eigen::Vector3d(0.05, 0, 0)).norm(), 1e-15);
  EXPECT_LT((p[3] - Eigen::Vector3d(0.25, 0, 0)).norm(), 1e-15);
}

TEST(Jacobian, TwoLinkAtZero) {
  const Eigen::MatrixXd j = jacobian(two_link(), Eigen::Vector2d(0, 0));
  EXPECT_NEAR(j(0, 0), 0, 1e-15);
  EXPECT_NEAR(j(0, 1), 0, 1e-15);
  EXPECT_NEAR(j(1, 0), 2, 1e-15);
  EXPECT_NEAR(j(1, 1), 1, 1e-15);
}

TEST(Jacobian, PrismaticChainHasNoAngularPart) {
  ParseOptions quiet;
  quiet.on_warning = [](std::string_view) {};
  const RobotModel m = parse_urdf(two_link_urdf("prismatic", "0.6 0 0.8"), quiet);
  const Eigen::MatrixXd j = jacobian(extract_chain(m, "a", "tip"), Eigen::Vector2d(0.2, -0.4));
  EXPECT_EQ(j.bottomRows(3).norm(), 0.0);
}

TEST(Jacobian, MatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const RobotModel m = builtin_model(BuiltinModel::SpatialBimanual7Dof);
  const KinematicChain c = arm_chain(m, Arm::Right);
  const double h = 1e-6;
  for (int rep = 0; rep < 50; ++rep) {
    const Eigen::VectorXd theta = arm_values(c, testing::random_config(m, rng, 0.01));
    const Eigen::MatrixXd j = jacobian(c, theta);
    const Pose at = fk_pose(c, theta);
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      Eigen::VectorXd hi = theta, lo = theta;
      hi[i] += h;
      lo[i] -= h;
      const Pose ph = fk_pose(c, hi), pl = fk_pose(c, lo);
      Eigen::Matrix<double, 6, 1> fd;
      fd.head<3>() = (ph.position() - pl.position()) / (2 * h);
      fd.tail<3>() = (rotation_log(at.orientation(), ph.orientation()) -
                      rotation_log(at.orientation(), pl.orientation())) / (2 * h);
      for (int r = 0; r < 6; ++r) {
        EXPECT_LT(std::abs(j(r, i) - fd[r]) / std::max(1.0, std::abs(j(r, i))), 1e-5);
      }
    }
  }
}

TEST(PoseError, Properties) {
  const Pose a({0, 0, 0}, Eigen::Quaterniond(Eigen::AngleAxisd(0.3, Eigen::Vector3d::UnitY())));
  EXPECT_EQ(pose_error(a, a).position, 0.0);
  EXPECT_NEAR(pose_error(a, a).rotation, 0.0, 1e-7);
  const Pose b({3, 4, 0}, a.orientation());
  EXPECT_DOUBLE_EQ(pose_error(a, b).position, 5.0);
  const Pose c({1, 1, 1}, Eigen::Quaterniond(Eigen::AngleAxisd(-1.2, Eigen::Vector3d::UnitX())));
  EXPECT_DOUBLE_EQ(pose_error(a, c).rotation, pose_error(c, a).rotation);
  EXPECT_LE(pose_error(a, c).position, pose_error(a, b).position + pose_error(b, c).position);
  // Double cover: the rotation error ignores the quaternion sign.
  const Eigen::Quaterniond q = a.orientation();
  Eigen::Quaterniond neg(-q.w(), -q.x(), -q.y(), -q.z());
  const double dot = std::abs(q.dot(neg));
  EXPECT_NEAR(2.0 * std::acos(std::min(1.0, dot)), 0.0, 1e-7);
}

TEST(NormalizeAction, Examples) {
  std::array<double, 16> raw{};
  raw[3] = 2.0;    // left quaternion (2,0,0,0)
  raw[7] = 1.7;    // left gripper
  raw[15] = -0.2;  // right gripper; right quaternion all zero
  const NormalizedAction n = normalize_action(raw);
  EXPECT_EQ(n.action.left.pose.orientation().w(), 1.0);
  EXPECT_EQ(n.action.left.gripper, 1.0);
  EXPECT_EQ(n.action.right.gripper, 0.0);
  EXPECT_FALSE(n.identity_fallback[0]);
  EXPECT_TRUE(n.identity_fallback[1]);
  EXPECT_EQ(n.action.right.pose.orientation().w(), 1.0);
  EXPECT_THROW(normalize_action(std::span<const double>(raw.data(), 15)), Error);
}

TEST(IkSolve, ExamplesAndErrors) {
  const KinematicChain c = two_link();
  try {
    ik_solve(c, Pose({3, 0, 0}, Eigen::Quaterniond::Identity()), Eigen::Vector2d::Zero());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Unreachable);
  }
  const IkResult r = try_ik_solve(c, fk_pose(c, Eigen::Vector2d::Zero()), Eigen::Vector2d::Zero());
  EXPECT_TRUE(r.ok());
  EXPECT_LE(r.iterations, 1);
  EXPECT_EQ(r.theta, Eigen::Vector2d::Zero());
}

TEST(IkSolve, PlanarRoundTrip) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> noise(0.0, 0.1);
  const RobotModel m = builtin_model(BuiltinModel::PlanarBimanual3Dof);
  const BimanualChains chains = BimanualChains::of(m);
  int ok = 0;
  const int total = 200;
  for (int i = 0; i < total; ++i) {
    const KinematicChain& c = chains.arm(i % 2 ? Arm::Right : Arm::Left);
    const Eigen::VectorXd star = arm_values(c, testing::random_config(m, rng));
    Eigen::VectorXd init = star;
    for (auto& v : init) v += noise(rng);
    const Pose target = fk_pose(c, star);
    const IkResult r = try_ik_solve(c, target, init);
    for (std::size_t k = 0; k < c.size(); ++k) {
      EXPECT_GE(r.theta[static_cast<Eigen::Index>(k)], c.joints[k].limits.lower);
      EXPECT_LE(r.theta[static_cast<Eigen::Index>(k)], c.joints[k].limits.upper);
    }
    if (r.ok()) {
      const PoseError e = pose_error(fk_pose(c, r.theta), target);
      EXPECT_LE(e.position, 1e-4);
      EXPECT_LE(e.rotation, 1e-3);
      ++ok;
    }
  }
  EXPECT_GE(ok, 190);
}

TEST(Dfk, MatchesFkPoseBatched) {
  std::mt19937_64 rng(5);
  for (auto which : {BuiltinModel::PlanarBimanual3Dof, BuiltinModel::SpatialBimanual7Dof}) {
    const RobotModel m = builtin_model(which);
    const BimanualChains chains = BimanualChains::of(m);
    const std::size_t n = m.movable_count(), batch = 100;
    std::vector<Eigen::VectorXd> configs;
    std::vector<double> flat;
    for (std::size_t b = 0; b < batch; ++b) {
      configs.push_back(testing::random_config(m, rng));
      flat.insert(flat.end(), configs.back().data(), configs.back().data() + n);
    }
    ad::Tape t;
    const ad::Var out = dfk(t.leaf(ad::Tensor({batch, n}, flat)), chains, n);
    ASSERT_EQ(out.shape(), (ad::Shape{batch, kReferenceWidth}));
    for (std::size_t b = 0; b < batch; ++b) {
      for (Arm arm : {Arm::Left, Arm::Right}) {
        const KinematicChain& c = chains.arm(arm);
        const Pose p = fk_pose(c, arm_values(c, configs[b]));
        const std::size_t o = arm == Arm::Left ? 0 : 7;
        const double* row = out.value().data().data() + b * kReferenceWidth + o;
        for (int k = 0; k < 3; ++k) EXPECT_NEAR(row[k], p.position()[k], 1e-12);
        EXPECT_GE(row[3], 0.0);
        EXPECT_NEAR(row[3], p.orientation().w(), 1e-12);
        EXPECT_NEAR(row[4], p.orientation().x(), 1e-12);
        EXPECT_NEAR(row[5], p.orientation().y(), 1e-12);
        EXPECT_NEAR(row[6], p.orientation().z(), 1e-12);
      }
    }
  }
}

TEST(Dfk, ZeroConfigAndArmIndependence) {
  const RobotModel m = builtin_model(BuiltinModel::PlanarBimanual3Dof);
  ad::Tape t;
  const ad::Tensor zero = ad::Tensor::zeros({6});
  const ad::Tensor out0 = dfk(t.leaf(zero), m).value();
  EXPECT_NEAR(out0[0], -0.25 + 0.70, 1e-15);
  EXPECT_NEAR(out0[7], 0.25 + 0.70, 1e-15);
  EXPECT_NEAR(out0[3], 1.0, 1e-15);
  ad::Tensor bumped = zero;
  bumped[1] = 0.4;
  const ad::Tensor out1 = dfk(t.leaf(bumped), m).value();
  for (std::size_t i = 7; i < 14; ++i) EXPECT_EQ(out0[i], out1[i]);
  EXPECT_NE(out0[1], out1[1]);
}

TEST(Dfk, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  for (auto which : {BuiltinModel::PlanarBimanual3Dof, BuiltinModel::SpatialBimanual7Dof}) {
    const RobotModel m = builtin_model(which);
    const BimanualChains chains = BimanualChains::of(m);
    for (int rep = 0; rep < 10; ++rep) {
      const Eigen::VectorXd theta = testing::random_config(m, rng, 0.05);
      const ad::Tensor x(ad::Shape{m.movable_count()}, std::vector<double>(theta.data(), theta.data() + theta.size()));
      for (std::size_t out = 0; out < kReferenceWidth; ++out) {
        const double err = ad::check_gradient(
            [&](ad::Tape&, const ad::Var& v) { return ad::slice(dfk(v, chains, m.movable_count()), 0, out, 1); },
            x);
        EXPECT_LT(err, 1e-5) << "output " << out;
      }
    }
  }
}

TEST(Dfk, LengthMismatch) {
  const RobotModel m = builtin_model(BuiltinModel::PlanarBimanual3Dof);
  ad::Tape t;
  try {
    dfk(t.leaf(ad::Tensor::zeros({5})), m);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::LengthMismatch);
  }
}

}  // namespace
}  // namespace kstar
