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

#include "kstar/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "kstar/error.hpp"

namespace kstar {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kDeg = kPi / 180.0;

// Planar arm geometry of the built-in model.
constexpr double kLink1 = 0.30;
constexpr double kLink2 = 0.25;
constexpr double kTool = 0.15;
const Eigen::Vector2d kBase[2] = {{-0.25, 0.0}, {0.25, 0.0}};

// Handover script constants.
const Eigen::Vector2d kHandoverPoint{-0.12, 0.24};
constexpr double kHandoverYaw = 30.0 * kDeg;
constexpr double kReceiverYaw = -150.0 * kDeg;
constexpr double kBarLength = 0.10;

// Push box half extents.
constexpr double kBoxHalfW = 0.15;
constexpr double kBoxHalfH = 0.04;

Eigen::Vector2d heading(double yaw) { return {std::cos(yaw), std::sin(yaw)}; }

Eigen::Matrix2d rot2(double yaw) {
  Eigen::Matrix2d r;
  r << std::cos(yaw), -std::sin(yaw), std::sin(yaw), std::cos(yaw);
  return r;
}

struct Tip {
  Eigen::Vector2d p;
  double yaw;
};

Tip planar_tip(const Pose& pose) {
  const Eigen::Matrix3d r = pose.rotation();
  return {pose.position().head<2>(), std::atan2(r(1, 0), r(0, 0))};
}

// Closed-form planar IK for the home pose; `elbow` picks the branch.
JointVector planar_ik(const Eigen::Vector2d& base, const Eigen::Vector2d& tip, double yaw, double elbow) {
  const Eigen::Vector2d w = tip - kTool * heading(yaw) - base;
  const double c2 = (w.squaredNorm() - kLink1 * kLink1 - kLink2 * kLink2) / (2 * kLink1 * kLink2);
  const double t2 = elbow * std::acos(std::clamp(c2, -1.0, 1.0));
  const double t1 = std::atan2(w.y(), w.x()) - std::atan2(kLink2 * std::sin(t2), kLink1 + kLink2 * std::cos(t2));
  double t3 = yaw - t1 - t2;
  while (t3 > kPi) t3 -= 2 * kPi;
  while (t3 < -kPi) t3 += 2 * kPi;
  return Eigen::Vector3d(t1, t2, t3);
}

Eigen::Vector2d to_local(const Tip& tip, const Eigen::Vector2d& p) { return rot2(tip.yaw).transpose() * (p - tip.p); }
Eigen::Vector2d to_world(const Tip& tip, const Eigen::Vector2d& local) { return tip.p + rot2(tip.yaw) * local; }

// Bar center in the receiver's frame under the nominal handover geometry.
Eigen::Vector2d nominal_receiver_center() {
  const Eigen::Vector2d b = kHandoverPoint + kBarLength * heading(kHandoverYaw);
  const Eigen::Vector2d center = kHandoverPoint + 0.5 * kBarLength * heading(kHandoverYaw);
  return to_local({b, kReceiverYaw}, center);
}

}  // namespace

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::LiftPlate: return "lift_plate_2d";
    case TaskKind::Handover: return "handover_2d";
    case TaskKind::PushBox: return "push_box_2d";
  }
  return "?";
}

TaskKind task_from_name(std::string_view name) {
  for (auto k : {TaskKind::LiftPlate, TaskKind::Handover, TaskKind::PushBox}) {
    if (to_string(k) == name) return k;
  }
  fail(ErrorCode::UsageError, "unknown task '" + std::string(name) + "'");
}

TaskSpec TaskSpec::make(TaskKind kind) {
  TaskSpec s;
  s.kind = kind;
  return s;
}

std::size_t TaskSpec::object_width() const {
  switch (kind) {
    case TaskKind::LiftPlate: return 6;
    case TaskKind::Handover: return 8;
    case TaskKind::PushBox: return 4;
  }
  return 0;
}

std::vector<double> Observation::flat() const {
  std::vector<double> out(joint_config.data(), joint_config.data() + joint_config.size());
  const auto ee = ee_poses.flat();
  out.insert(out.end(), ee.begin(), ee.end());
  out.insert(out.end(), object_state.begin(), object_state.end());
  return out;
}

double segment_distance(const Segment& s, const Segment& t) {
  const Eigen::Vector3d d1 = s.b - s.a, d2 = t.b - t.a, r = s.a - t.a;
  const double a = d1.squaredNorm(), e = d2.squaredNorm(), f = d2.dot(r);
  constexpr double tiny = 1e-18;
  double u = 0.0, v = 0.0;
  if (a <= tiny && e <= tiny) return r.norm();
  if (a <= tiny) {
    v = std::clamp(f / e, 0.0, 1.0);
  } else {
    const double c = d1.dot(r);
    if (e <= tiny) {
      u = std::clamp(-c / a, 0.0, 1.0);
    } else {
      const double b = d1.dot(d2), denom = a * e - b * b;
      u = denom > tiny ? std::clamp((b * f - c * e) / denom, 0.0, 1.0) : 0.0;
      v = (b * u + f) / e;
      if (v < 0.0) {
        v = 0.0;
        u = std::clamp(-c / a, 0.0, 1.0);
      } else if (v > 1.0) {
        v = 1.0;
        u = std::clamp((b - c) / a, 0.0, 1.0);
      }
    }
  }
  return ((s.a + d1 * u) - (t.a + d2 * v)).norm();
}

namespace {

std::vector<Eigen::Vector3d> arm_points(const KinematicChain& chain, const JointVector& theta) {
  std::vector<Eigen::Vector3d> pts;
  Pose t = chain.base_pose;
  for (std::size_t i = 0; i < chain.size(); ++i) {
    t = t * chain.joints[i].origin;
    pts.push_back(t.position());
    const double q = theta[static_cast<Eigen::Index>(i)];
    const JointSpec& j = chain.joints[i];
    t = t * (j.kind == JointKind::Revolute
                 ? Pose(Eigen::Vector3d::Zero(), Eigen::Quaterniond(Eigen::AngleAxisd(q, j.axis)))
                 : Pose(j.axis * q, Eigen::Quaterniond::Identity()));
  }
  pts.push_back((t * chain.tip_offset).position());
  return pts;
}

}  // namespace

CollisionReport self_collision_check(const RobotModel& model, const JointVector& theta) {
  const BimanualChains chains = BimanualChains::of(model);
  const auto left = arm_points(chains.left, arm_values(chains.left, theta));
  const auto right = arm_points(chains.right, arm_values(chains.right, theta));
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < left.size(); ++i) {
    for (std::size_t j = 0; j + 1 < right.size(); ++j) {
      best = std::min(best, segment_distance({left[i], left[i + 1]}, {right[j], right[j + 1]}));
    }
  }
  return {best, best < kCollisionClearance};
}

Pose planar_pose(double x, double y, double yaw) {
  return Pose({x, y, 0.0}, Eigen::Quaterniond(Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ())));
}

Env::Env(TaskSpec spec)
    : spec_(spec), model_(builtin_model(BuiltinModel::PlanarBimanual3Dof)), chains_(BimanualChains::of(model_)) {
  // Mirrored home poses with the elbows pointing outward.
  const double home_yaw = -45.0 * kDeg;
  const JointVector left = planar_ik(kBase[0], {-0.30, 0.35}, home_yaw, -1.0);
  const JointVector right = planar_ik(kBase[1], {0.30, 0.35}, kPi - home_yaw, 1.0);
  home_.resize(6);
  home_ << left, right;
}

EnvState Env::reset(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  auto uniform = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  EnvState s;
  s.theta = home_;
  switch (spec_.kind) {
    case TaskKind::LiftPlate: {
      const double width = uniform(0.30, 0.40), cx = uniform(-0.03, 0.03), cy = uniform(0.15, 0.25);
      s.points = {Eigen::Vector2d(cx - width / 2, cy), Eigen::Vector2d(cx + width / 2, cy)};
      s.target = {cx, cy};
      s.plate_width = width;
      break;
    }
    case TaskKind::Handover: {
      const double beta = uniform(95.0, 120.0) * kDeg, reach = uniform(0.665, 0.69);
      const Eigen::Vector2d a = kBase[0] + reach * heading(beta);
      s.points = {a, a + kBarLength * heading(beta)};
      const double alpha = uniform(60.0, 85.0) * kDeg, place = uniform(0.665, 0.69);
      const Tip tip{kBase[1] + place * heading(alpha), alpha};
      s.target = to_world(tip, nominal_receiver_center());
      break;
    }
    case TaskKind::PushBox: {
      const double bx = uniform(-0.03, 0.03), by = uniform(0.32, 0.40), lift = uniform(0.08, 0.14);
      s.points = {Eigen::Vector2d(bx, by), Eigen::Vector2d::Zero()};
      s.target = {bx, by + lift};
      break;
    }
  }
  return s;
}

PoseVector Env::ee_poses(const EnvState& s) const {
  PoseVector pv;
  for (Arm arm : {Arm::Left, Arm::Right}) {
    const KinematicChain& c = chains_.arm(arm);
    pv.arm(arm).pose = fk_pose(c, arm_values(c, s.theta));
    pv.arm(arm).gripper = s.gripper[arm == Arm::Left ? 0 : 1];
  }
  return pv;
}

Observation Env::observe(const EnvState& s) const {
  Observation o;
  o.timestep = s.time;
  o.joint_config = s.theta;
  o.ee_poses = ee_poses(s);
  o.instruction_id = spec_.instruction_id();
  auto push = [&o](const Eigen::Vector2d& p) {
    o.object_state.push_back(p.x());
    o.object_state.push_back(p.y());
  };
  switch (spec_.kind) {
    case TaskKind::LiftPlate:
      push(s.points[0]);
      push(s.points[1]);
      o.object_state.push_back(s.held[0] ? 1.0 : 0.0);
      o.object_state.push_back(s.held[1] ? 1.0 : 0.0);
      break;
    case TaskKind::Handover:
      push(s.points[0]);
      push(s.points[1]);
      o.object_state.push_back(s.held[0] ? 1.0 : 0.0);
      o.object_state.push_back(s.held[1] ? 1.0 : 0.0);
      push(s.target);
      break;
    case TaskKind::PushBox:
      push(s.points[0]);
      push(s.target);
      break;
  }
  return o;
}

EnvState Env::step(const EnvState& state, const JointVector& targets, const std::array<double, 2>& gripper_cmds) const {
  if (static_cast<std::size_t>(targets.size()) != model_.movable_count()) {
    fail(ErrorCode::LengthMismatch, "env_step expects " + std::to_string(model_.movable_count()) + " joint targets");
  }
  EnvState s = state;
  if (s.terminal()) return s;
  const JointVector goal = clamp_to_limits(model_, targets);
  for (Eigen::Index i = 0; i < goal.size(); ++i) {
    s.theta[i] += std::clamp(goal[i] - s.theta[i], -kMaxJointStep, kMaxJointStep);
  }
  const auto previous = s.gripper;
  for (int a = 0; a < 2; ++a) s.gripper[static_cast<std::size_t>(a)] = gripper_cmds[static_cast<std::size_t>(a)] > 0.5 ? 1.0 : 0.0;
  ++s.time;
  update_objects(s, previous);
  return s;
}

void Env::update_objects(EnvState& s, const std::array<double, 2>& previous) const {
  const PoseVector ee = ee_poses(s);
  const Tip tip[2] = {planar_tip(ee.left.pose), planar_tip(ee.right.pose)};
  bool closing[2], opening[2];
  for (int a = 0; a < 2; ++a) {
    closing[a] = previous[a] < 0.5 && s.gripper[a] > 0.5;
    opening[a] = previous[a] > 0.5 && s.gripper[a] < 0.5;
  }
  const double tol = spec_.success_pos_tol;

  switch (spec_.kind) {
    case TaskKind::LiftPlate: {
      for (int a = 0; a < 2; ++a) {
        if (opening[a]) s.held[a] = false;
        if (closing[a] && !s.held[a] && (tip[a].p - s.points[a]).norm() <= kGraspRadius) {
          s.held[a] = true;
          s.grasp_local[a][0] = s.points[a] - tip[a].p;
        }
      }
      if (s.held[0] && s.held[1]) {
        const Eigen::Vector2d h0 = tip[0].p + s.grasp_local[0][0], h1 = tip[1].p + s.grasp_local[1][0];
        if (std::abs((h1 - h0).norm() - s.plate_width) > kGraspRadius) {
          s.dropped = true;  // the hands pulled the plate apart
        } else {
          s.points = {h0, h1};
        }
      } else {
        // A single hand cannot move the plate; it slips once the hand leaves.
        for (int a = 0; a < 2; ++a) {
          if (s.held[a] && (tip[a].p + s.grasp_local[a][0] - s.points[a]).norm() > kGraspRadius) s.held[a] = false;
        }
      }
      const double raised = 0.5 * (s.points[0].y() + s.points[1].y()) - s.target.y();
      s.streak = (s.held[0] && s.held[1] && !s.dropped && raised >= 0.10) ? s.streak + 1 : 0;
      if (s.streak >= 3) s.success = true;
      break;
    }
    case TaskKind::Handover: {
      if (opening[0]) {
        if (s.holder == 0) {
          if (s.held[1] && s.settle >= kHandoverSettleSteps) {
            s.holder = 1;
          } else {
            s.dropped = true;
            s.holder = -1;
          }
        }
        s.held[0] = false;
      }
      if (opening[1]) {
        if (s.holder == 1) s.holder = -1;
        s.held[1] = false;
        s.settle = 0;
      }
      auto grasp = [&](int a) {
        s.held[a] = true;
        s.grasp_local[a] = {to_local(tip[a], s.points[0]), to_local(tip[a], s.points[1])};
      };
      if (closing[0] && s.holder == -1 && (tip[0].p - s.points[0]).norm() <= kGraspRadius) {
        grasp(0);
        s.holder = 0;
      }
      if (closing[1] && !s.held[1] && s.holder != 1 && (tip[1].p - s.points[1]).norm() <= kGraspRadius) {
        grasp(1);
        s.settle = 0;
        if (s.holder == -1) s.holder = 1;
      }
      if (s.holder >= 0) {
        const auto& local = s.grasp_local[s.holder];
        s.points = {to_world(tip[s.holder], local[0]), to_world(tip[s.holder], local[1])};
      }
      if (s.holder == 0 && s.held[1]) {
        if ((tip[1].p - s.points[1]).norm() > kGraspRadius) {
          s.held[1] = false;
          s.settle = 0;
        } else {
          ++s.settle;
        }
      }
      const Eigen::Vector2d center = 0.5 * (s.points[0] + s.points[1]);
      if (s.holder == -1 && !s.dropped && (center - s.target).norm() <= tol) s.success = true;
      break;
    }
    case TaskKind::PushBox: {
      Eigen::Vector2d& c = s.points[0];
      const double bottom = c.y() - kBoxHalfH;
      bool inside[2];
      for (int a = 0; a < 2; ++a) inside[a] = std::abs(tip[a].p.x() - c.x()) <= kBoxHalfW;
      // held[] records contact from below at the previous step.
      if (s.held[0] && s.held[1] && inside[0] && inside[1]) {
        const double push_to = std::min(tip[0].p.y(), tip[1].p.y());
        if (push_to > bottom) c.y() = push_to + kBoxHalfH;
      }
      const double new_bottom = c.y() - kBoxHalfH;
      for (int a = 0; a < 2; ++a) s.held[a] = inside[a] && tip[a].p.y() <= new_bottom + 0.005;
      if ((c - s.target).norm() <= tol) s.success = true;
      break;
    }
  }
}

std::optional<JointVector> executor_ik(const KinematicChain& chain, const Pose& target, const JointVector& init,
                                       const ExecOptions& options) {
  const IkResult r = try_ik_solve(chain, target, init);
  if (r.status == IkStatus::Unreachable) return std::nullopt;
  if (r.ok() || (r.error.position <= options.pos_tol && r.error.rotation <= options.rot_tol)) return r.theta;
  return std::nullopt;
}

std::optional<JointVector> solve_bimanual(const Env& env, const PoseVector& action, const JointVector& init,
                                          const ExecOptions& options) {
  JointVector out = init;
  for (Arm arm : {Arm::Left, Arm::Right}) {
    const KinematicChain& c = env.chains().arm(arm);
    const auto sol = executor_ik(c, action.arm(arm).pose, arm_values(c, init), options);
    if (!sol) return std::nullopt;
    for (std::size_t i = 0; i < c.size(); ++i) out[static_cast<Eigen::Index>(c.model_indices[i])] = (*sol)[static_cast<Eigen::Index>(i)];
  }
  return out;
}

ExecResult execute_action(const Env& env, EnvState& state, const PoseVector& action, const ExecOptions& options,
                          std::vector<EnvState>* trace) {
  ExecResult result;
  if (state.terminal()) {
    result.status = ExecStatus::Terminal;
    return result;
  }
  const auto goal = solve_bimanual(env, action, state.theta, options);
  if (!goal) {
    result.status = ExecStatus::IkFailed;
    return result;
  }
  const JointVector start = state.theta;
  const double span = (*goal - start).cwiseAbs().maxCoeff();
  const auto needed = static_cast<std::size_t>(std::ceil(span / kMaxJointStep - 1e-9));
  const std::size_t n = std::max(options.substeps, needed);
  auto advance = [&](const JointVector& target, const std::array<double, 2>& grip) {
    state = env.step(state, target, grip);
    ++result.env_steps;
    if (self_collision_check(env.model(), state.theta).colliding) ++result.collision_steps;
    if (trace) trace->push_back(state);
    return !state.terminal();
  };
  for (std::size_t k = 1; k <= n; ++k) {
    const double f = static_cast<double>(k) / static_cast<double>(n);
    if (!advance(start + f * (*goal - start), state.gripper)) {
      result.status = ExecStatus::Terminal;
      return result;
    }
  }
  if (!advance(*goal, {action.left.gripper, action.right.gripper})) result.status = ExecStatus::Terminal;
  return result;
}

std::vector<std::size_t> keyframe_discovery(const std::vector<JointVector>& joints,
                                            const std::vector<std::array<double, 2>>& gripper_cmds,
                                            const KeyframeOptions& options) {
  if (joints.empty()) fail(ErrorCode::EmptyTrajectory, "keyframe discovery needs at least one step");
  if (gripper_cmds.size() != joints.size()) {
    fail(ErrorCode::LengthMismatch, "joint and gripper sequences differ in length");
  }
  const std::size_t n = joints.size();
  std::vector<double> speed(n, 0.0);
  for (std::size_t i = 1; i < n; ++i) speed[i] = (joints[i] - joints[i - 1]).cwiseAbs().maxCoeff();
  auto closed = [&](std::size_t i, int a) { return gripper_cmds[i][static_cast<std::size_t>(a)] > 0.5; };

  std::vector<std::size_t> out;
  std::size_t last = 0;
  bool have_last = false;
  for (std::size_t i = 1; i < n; ++i) {
    const bool toggled = closed(i, 0) != closed(i - 1, 0) || closed(i, 1) != closed(i - 1, 1);
    const bool stopped = speed[i] < options.speed_eps;
    const bool onset = stopped && speed[i - 1] >= options.speed_eps;
    const bool dwell = stopped && have_last && options.dwell_period > 0 && i - last >= options.dwell_period &&
                       speed[last] < options.speed_eps;
    if (toggled || onset || dwell) {
      out.push_back(i);
      last = i;
      have_last = true;
    }
  }
  if (out.empty() || out.back() != n - 1) out.push_back(n - 1);
  return out;
}

std::vector<std::size_t> keyframe_discovery(const std::vector<DemoStep>& steps, const KeyframeOptions& options) {
  std::vector<JointVector> joints;
  std::vector<std::array<double, 2>> grip;
  for (const auto& s : steps) {
    joints.push_back(s.observation.joint_config);
    grip.push_back(s.gripper_cmds);
  }
  return keyframe_discovery(joints, grip, options);
}

std::optional<PoseVector> expert_waypoint(const Env& env, const EnvState& s, std::size_t phase) {
  const PoseVector now = env.ee_poses(s);
  PoseVector w = now;
  auto set = [&w](Arm arm, const Eigen::Vector2d& p, double yaw, double grip) {
    w.arm(arm) = {planar_pose(p.x(), p.y(), yaw), grip};
  };
  const Eigen::Vector2d up(0.0, 1.0);
  switch (env.spec().kind) {
    case TaskKind::LiftPlate: {
      const double down = -kPi / 2;
      if (phase == 0) {
        set(Arm::Left, s.points[0] + 0.06 * up, down, 0.0);
        set(Arm::Right, s.points[1] + 0.06 * up, down, 0.0);
      } else if (phase == 1) {
        set(Arm::Left, s.points[0], down, 1.0);
        set(Arm::Right, s.points[1], down, 1.0);
      } else if (phase == 2) {
        set(Arm::Left, s.points[0] + 0.12 * up, down, 1.0);
        set(Arm::Right, s.points[1] + 0.12 * up, down, 1.0);
      } else {
        return std::nullopt;
      }
      return w;
    }
    case TaskKind::Handover: {
      const Eigen::Vector2d bar = s.points[1] - s.points[0];
      const double bar_yaw = std::atan2(bar.y(), bar.x());
      switch (phase) {
        case 0: set(Arm::Left, s.points[0] - 0.06 * heading(bar_yaw), bar_yaw, 0.0); break;
        case 1: set(Arm::Left, s.points[0], bar_yaw, 1.0); break;
        case 2: set(Arm::Left, kHandoverPoint, kHandoverYaw, 1.0); break;
        case 3: set(Arm::Right, s.points[1] - 0.06 * heading(kReceiverYaw), kReceiverYaw, 0.0); break;
        case 4: set(Arm::Right, s.points[1], kReceiverYaw, 1.0); break;
        case 5: break;  // let the receiving grip settle
        case 6: w.left.gripper = 0.0; break;
        case 7: {
          const Pose home = fk_pose(env.chains().left, arm_values(env.chains().left, env.home()));
          w.left = {home, 0.0};
          const Eigen::Vector2d rel = s.target - kBase[1];
          const double alpha = std::atan2(rel.y(), rel.x());
          // Solve tip = target - R(yaw) c for the yaw that points the tool along alpha.
          const Tip grip = planar_tip(now.right.pose);
          const Eigen::Vector2d c_local = to_local(grip, 0.5 * (s.points[0] + s.points[1]));
          set(Arm::Right, s.target - rot2(alpha) * c_local, alpha, 0.0);
          break;
        }
        default: return std::nullopt;
      }
      return w;
    }
    case TaskKind::PushBox: {
      const double yaw = kPi / 2, tilt = 25.0 * kDeg;
      const Eigen::Vector2d c = s.points[0];
      const double offset = 0.12;
      if (phase == 0) {
        const double y = c.y() - kBoxHalfH - 0.04;
        set(Arm::Left, {c.x() - offset, y}, yaw - tilt, 0.0);
        set(Arm::Right, {c.x() + offset, y}, yaw + tilt, 0.0);
      } else if (phase == 1) {
        const double y = s.target.y() - kBoxHalfH;
        set(Arm::Left, {c.x() - offset, y}, yaw - tilt, 0.0);
        set(Arm::Right, {c.x() + offset, y}, yaw + tilt, 0.0);
      } else {
        return std::nullopt;
      }
      return w;
    }
  }
  return std::nullopt;
}

Demonstration scripted_expert(const Env& env, std::uint64_t seed) {
  EnvState state = env.reset(seed);
  std::vector<EnvState> trace{state};
  std::vector<JointVector> targets{state.theta};
  std::vector<std::array<double, 2>> grips{state.gripper};
  const std::string where = std::string(to_string(env.spec().kind)) + " seed " + std::to_string(seed);
  for (std::size_t phase = 0; !state.terminal(); ++phase) {
    const auto waypoint = expert_waypoint(env, state, phase);
    if (!waypoint) break;
    const auto goal = solve_bimanual(env, *waypoint, state.theta);
    if (!goal) fail(ErrorCode::ExpertFailed, where + ": IK failed in phase " + std::to_string(phase));
    const std::size_t before = trace.size();
    const ExecResult r = execute_action(env, state, *waypoint, {}, &trace);
    if (r.collision_steps > 0) fail(ErrorCode::ExpertFailed, where + ": collision in phase " + std::to_string(phase));
    // Record the commands that produced each visited state.
    for (std::size_t i = before; i < trace.size(); ++i) {
      const bool hold = i + 1 == trace.size() && r.status == ExecStatus::Done;
      targets.push_back(*goal);
      grips.push_back(hold ? std::array<double, 2>{waypoint->left.gripper, waypoint->right.gripper}
                           : trace[i].gripper);
    }
  }
  if (!state.success) fail(ErrorCode::ExpertFailed, where + ": task not solved");

  Demonstration demo;
  demo.task = std::string(to_string(env.spec().kind));
  demo.seed = seed;
  for (std::size_t i = 0; i < trace.size(); ++i) demo.steps.push_back({env.observe(trace[i]), targets[i], grips[i]});
  demo.keyframes = keyframe_discovery(demo.steps);
  return demo;
}

DemoGenReport generate_demos(const Env& env, std::size_t count, std::uint64_t first_seed) {
  DemoGenReport report;
  // Bounded so a broken expert cannot loop forever.
  for (std::uint64_t seed = first_seed; report.demos.size() < count && seed < first_seed + 4 * count + 16; ++seed) {
    try {
      report.demos.push_back(scripted_expert(env, seed));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::ExpertFailed) throw;
      report.skipped_seeds.push_back(seed);
    }
  }
  if (report.demos.size() < count) {
    fail(ErrorCode::ExpertFailed, "expert produced only " + std::to_string(report.demos.size()) + " of " +
                                      std::to_string(count) + " demonstrations");
  }
  return report;
}

// ---------------------------------------------------------------------------
// Line-delimited JSON persistence.

namespace {

constexpr const char* kDemoSchema = "kstar-demo/1";

nlohmann::json vec_json(const double* p, std::size_t n) { return std::vector<double>(p, p + n); }

nlohmann::json step_json(const DemoStep& s) {
  const auto ee = s.observation.ee_poses.flat();
  return {
      {"t", s.observation.timestep},
      {"joint_config", vec_json(s.observation.joint_config.data(), static_cast<std::size_t>(s.observation.joint_config.size()))},
      {"ee", vec_json(ee.data(), ee.size())},
      {"object_state", s.observation.object_state},
      {"instruction_id", s.observation.instruction_id},
      {"joint_targets", vec_json(s.joint_targets.data(), static_cast<std::size_t>(s.joint_targets.size()))},
      {"gripper_cmds", {s.gripper_cmds[0], s.gripper_cmds[1]}},
  };
}

JointVector joint_vector(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

PoseVector pose_vector(const std::vector<double>& v) {
  if (v.size() != kBimanualActionWidth) throw std::runtime_error("ee must hold 16 values");
  PoseVector pv;
  for (int a = 0; a < 2; ++a) {
    const double* b = v.data() + a * kArmActionWidth;
    pv.arm(a == 0 ? Arm::Left : Arm::Right) = {Pose({b[0], b[1], b[2]}, Eigen::Quaterniond(b[3], b[4], b[5], b[6])),
                                               b[7]};
  }
  return pv;
}

DemoStep step_from_json(const nlohmann::json& j) {
  DemoStep s;
  s.observation.timestep = j.at("t").get<std::size_t>();
  s.observation.joint_config = joint_vector(j.at("joint_config"));
  s.observation.ee_poses = pose_vector(j.at("ee").get<std::vector<double>>());
  s.observation.object_state = j.at("object_state").get<std::vector<double>>();
  s.observation.instruction_id = j.at("instruction_id").get<int>();
  s.joint_targets = joint_vector(j.at("joint_targets"));
  const auto g = j.at("gripper_cmds").get<std::vector<double>>();
  if (g.size() != 2) throw std::runtime_error("gripper_cmds must hold 2 values");
  s.gripper_cmds = {g[0], g[1]};
  return s;
}

}  // namespace

void save_demos(const std::filesystem::path& path, const std::vector<Demonstration>& demos) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out << nlohmann::json{{"schema", kDemoSchema}}.dump() << '\n';
  for (const auto& d : demos) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : d.steps) steps.push_back(step_json(s));
    out << nlohmann::json{{"task", d.task}, {"seed", d.seed}, {"keyframes", d.keyframes}, {"steps", steps}}.dump()
        << '\n';
  }
  if (!out) fail(ErrorCode::IoError, "write failed for " + path.string());
}

std::vector<Demonstration> load_demos(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot read " + path.string());
  std::vector<Demonstration> demos;
  std::string line;
  std::size_t number = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(number);
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      if (!header) {
        if (j.value("schema", "") != kDemoSchema) {
          fail(ErrorCode::SchemaViolation, where + ": expected schema header " + kDemoSchema);
        }
        header = true;
        continue;
      }
      Demonstration d;
      d.task = j.at("task").get<std::string>();
      d.seed = j.at("seed").get<std::uint64_t>();
      d.keyframes = j.at("keyframes").get<std::vector<std::size_t>>();
      for (const auto& s : j.at("steps")) d.steps.push_back(step_from_json(s));
      if (d.steps.empty()) throw std::runtime_error("demonstration has no steps");
      if (d.keyframes.empty() || d.keyframes.back() != d.steps.size() - 1 ||
          !std::is_sorted(d.keyframes.begin(), d.keyframes.end())) {
        throw std::runtime_error("keyframes must be sorted and end at the last step");
      }
      demos.push_back(std::move(d));
    } catch (const Error&) {
      throw;
    } catch (const std::exception& e) {
      fail(ErrorCode::SchemaViolation, where + ": " + e.what());
    }
  }
  return demos;
}

}  // namespace kstar
