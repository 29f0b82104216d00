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

#include "kstar/kinematics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>

#include <Eigen/Dense>

#include "kstar/error.hpp"

namespace kstar {

std::array<double, kBimanualActionWidth> PoseVector::flat() const {
  std::array<double, kBimanualActionWidth> out{};
  std::size_t i = 0;
  for (const ArmAction* a : {&left, &right}) {
    const auto& p = a->pose.position();
    const auto& q = a->pose.orientation();
    for (double v : {p.x(), p.y(), p.z(), q.w(), q.x(), q.y(), q.z(), a->gripper}) out[i++] = v;
  }
  return out;
}

NormalizedAction normalize_action(std::span<const double> raw) {
  if (raw.size() != kBimanualActionWidth) {
    fail(ErrorCode::LengthMismatch, "normalize_action expects 16 values, got " + std::to_string(raw.size()));
  }
  NormalizedAction out;
  for (int arm = 0; arm < 2; ++arm) {
    const double* b = raw.data() + arm * kArmActionWidth;
    Eigen::Quaterniond q(b[3], b[4], b[5], b[6]);
    if (q.norm() < 1e-8) {
      q = Eigen::Quaterniond::Identity();
      out.identity_fallback[arm] = true;
    }
    ArmAction& a = out.action.arm(arm == 0 ? Arm::Left : Arm::Right);
    a.pose = Pose({b[0], b[1], b[2]}, q);
    a.gripper = std::clamp(b[7], 0.0, 1.0);
  }
  return out;
}

namespace {

Pose joint_motion(const JointSpec& j, double value) {
  if (j.kind == JointKind::Revolute) return Pose(Eigen::Vector3d::Zero(), Eigen::Quaterniond(Eigen::AngleAxisd(value, j.axis)));
  if (j.kind == JointKind::Prismatic) return Pose(j.axis * value, Eigen::Quaterniond::Identity());
  return Pose();
}

void require_length(std::size_t got, std::size_t want, const char* what) {
  if (got != want) {
    fail(ErrorCode::LengthMismatch,
         std::string(what) + ": expected " + std::to_string(want) + " joint values, got " + std::to_string(got));
  }
}

}  // namespace

Pose fk_pose(const KinematicChain& chain, const JointVector& theta) {
  require_length(static_cast<std::size_t>(theta.size()), chain.size(), "fk_pose");
  Pose t = chain.base_pose;
  for (std::size_t i = 0; i < chain.size(); ++i) {
    t = t * chain.joints[i].origin * joint_motion(chain.joints[i], theta[static_cast<Eigen::Index>(i)]);
  }
  return t * chain.tip_offset;
}

std::vector<Pose> fk_link_poses(const RobotModel& model, const JointVector& theta) {
  const auto movable = model.movable_indices();
  require_length(static_cast<std::size_t>(theta.size()), movable.size(), "fk_link_poses");
  std::map<std::string, std::size_t> link_index;
  for (std::size_t i = 0; i < model.links.size(); ++i) link_index[model.links[i]] = i;
  std::vector<double> joint_value(model.joints.size(), 0.0);
  for (std::size_t k = 0; k < movable.size(); ++k) joint_value[movable[k]] = theta[static_cast<Eigen::Index>(k)];

  std::vector<std::optional<Pose>> poses(model.links.size());
  poses[link_index.at(model.root_link)] = Pose();
  // Joints may be listed in any order; sweep until every reachable link is placed.
  for (bool progress = true; progress;) {
    progress = false;
    for (std::size_t i = 0; i < model.joints.size(); ++i) {
      const JointSpec& j = model.joints[i];
      const auto& parent = poses[link_index.at(j.parent_link)];
      auto& child = poses[link_index.at(j.child_link)];
      if (parent && !child) {
        child = *parent * j.origin * joint_motion(j, joint_value[i]);
        progress = true;
      }
    }
  }
  std::vector<Pose> out;
  out.reserve(poses.size());
  for (const auto& p : poses) out.push_back(p.value_or(Pose()));
  return out;
}

std::vector<Eigen::Vector3d> fk_joint_positions(const RobotModel& model, const JointVector& theta) {
  const auto links = fk_link_poses(model, theta);
  std::map<std::string, std::size_t> link_index;
  for (std::size_t i = 0; i < model.links.size(); ++i) link_index[model.links[i]] = i;
  std::vector<Eigen::Vector3d> out;
  for (std::size_t idx : model.movable_indices()) {
    const JointSpec& j = model.joints[idx];
    out.push_back((links[link_index.at(j.parent_link)] * j.origin).position());
  }
  return out;
}

Eigen::MatrixXd jacobian(const KinematicChain& chain, const JointVector& theta) {
  require_length(static_cast<std::size_t>(theta.size()), chain.size(), "jacobian");
  const std::size_t n = chain.size();
  std::vector<Eigen::Vector3d> axes(n), origins(n);
  Pose t = chain.base_pose;
  for (std::size_t i = 0; i < n; ++i) {
    t = t * chain.joints[i].origin;
    axes[i] = t.orientation() * chain.joints[i].axis;
    origins[i] = t.position();
    t = t * joint_motion(chain.joints[i], theta[static_cast<Eigen::Index>(i)]);
  }
  const Eigen::Vector3d tip = (t * chain.tip_offset).position();
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(6, static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    if (chain.joints[i].kind == JointKind::Revolute) {
      j.block<3, 1>(0, c) = axes[i].cross(tip - origins[i]);
      j.block<3, 1>(3, c) = axes[i];
    } else {
      j.block<3, 1>(0, c) = axes[i];
    }
  }
  return j;
}

PoseError pose_error(const Pose& a, const Pose& b) {
  const double dot = std::min(1.0, std::abs(a.orientation().dot(b.orientation())));
  return {(a.position() - b.position()).norm(), 2.0 * std::acos(dot)};
}

Eigen::Vector3d rotation_log(const Eigen::Quaterniond& from, const Eigen::Quaterniond& to) {
  const Eigen::Quaterniond rel = canonical(to * from.conjugate());
  const Eigen::Vector3d v = rel.vec();
  const double s = v.norm();
  if (s < 1e-12) return 2.0 * v;
  return (2.0 * std::atan2(s, rel.w()) / s) * v;
}

double reach_radius(const KinematicChain& chain) {
  double r = chain.tip_offset.position().norm();
  for (const auto& j : chain.joints) {
    r += j.origin.position().norm();
    if (j.kind == JointKind::Prismatic) r += std::max(std::abs(j.limits.lower), std::abs(j.limits.upper));
  }
  return r;
}

JointVector clamp_to_limits(const KinematicChain& chain, const JointVector& theta) {
  JointVector out = theta;
  for (std::size_t i = 0; i < chain.size(); ++i) {
    const auto& l = chain.joints[i].limits;
    out[static_cast<Eigen::Index>(i)] = std::clamp(out[static_cast<Eigen::Index>(i)], l.lower, l.upper);
  }
  return out;
}

JointVector clamp_to_limits(const RobotModel& model, const JointVector& theta) {
  JointVector out = theta;
  const auto movable = model.movable_indices();
  for (std::size_t k = 0; k < movable.size(); ++k) {
    const auto& l = model.joints[movable[k]].limits;
    out[static_cast<Eigen::Index>(k)] = std::clamp(out[static_cast<Eigen::Index>(k)], l.lower, l.upper);
  }
  return out;
}

IkResult try_ik_solve(const KinematicChain& chain, const Pose& target, const JointVector& theta_init,
                      const IkOptions& options) {
  require_length(static_cast<std::size_t>(theta_init.size()), chain.size(), "ik_solve");
  IkResult result;
  result.theta = clamp_to_limits(chain, theta_init);
  if ((target.position() - chain.base_pose.position()).norm() > reach_radius(chain) + 1e-12) {
    result.status = IkStatus::Unreachable;
    result.error = pose_error(fk_pose(chain, result.theta), target);
    return result;
  }
  const Eigen::Index n = static_cast<Eigen::Index>(chain.size());
  const double lambda2 = options.damping * options.damping;
  for (int it = 0;; ++it) {
    const Pose current = fk_pose(chain, result.theta);
    result.error = pose_error(current, target);
    result.iterations = it;
    if (result.error.position <= options.pos_tol && result.error.rotation <= options.rot_tol) {
      result.status = IkStatus::Converged;
      return result;
    }
    if (it == options.max_iters) break;
    Eigen::Matrix<double, 6, 1> e;
    e.head<3>() = target.position() - current.position();
    e.tail<3>() = rotation_log(current.orientation(), target.orientation());
    const Eigen::MatrixXd j = jacobian(chain, result.theta);
    const Eigen::Matrix<double, 6, 6> jjt = j * j.transpose() + lambda2 * Eigen::Matrix<double, 6, 6>::Identity();
    Eigen::VectorXd step = j.transpose() * jjt.ldlt().solve(e);
    const double largest = step.cwiseAbs().maxCoeff();
    if (largest > options.max_step) step *= options.max_step / largest;
    if (n > 0) result.theta = clamp_to_limits(chain, result.theta + step);
  }
  result.status = IkStatus::NoConvergence;
  return result;
}

JointVector ik_solve(const KinematicChain& chain, const Pose& target, const JointVector& theta_init,
                     const IkOptions& options) {
  IkResult r = try_ik_solve(chain, target, theta_init, options);
  if (r.status == IkStatus::Unreachable) fail(ErrorCode::Unreachable, "target lies outside the chain's reach");
  if (r.status == IkStatus::NoConvergence) {
    fail(ErrorCode::NoConvergence, "no convergence after " + std::to_string(r.iterations) +
                                       " iterations (pos " + std::to_string(r.error.position) + " m, rot " +
                                       std::to_string(r.error.rotation) + " rad)");
  }
  return r.theta;
}

BimanualChains BimanualChains::of(const RobotModel& model) {
  return {arm_chain(model, Arm::Left), arm_chain(model, Arm::Right)};
}

JointVector arm_values(const KinematicChain& chain, const JointVector& model_theta) {
  JointVector out(static_cast<Eigen::Index>(chain.size()));
  for (std::size_t i = 0; i < chain.size(); ++i) {
    out[static_cast<Eigen::Index>(i)] = model_theta[static_cast<Eigen::Index>(chain.model_indices[i])];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable FK. Each matrix entry is either a compile-time constant or a
// (batch, 1) column on the tape; constants are folded so the planar model
// records only the entries that actually vary.

namespace {

class Sym {
 public:
  Sym(double c = 0.0) : c_(c) {}  // NOLINT(google-explicit-constructor)
  explicit Sym(ad::Var v) : v_(v) {}

  bool is_const() const { return !v_.has_value(); }
  double c() const { return c_; }
  const ad::Var& var() const { return *v_; }
  double at(std::size_t row) const { return is_const() ? c_ : (*v_).value()[row]; }

 private:
  double c_ = 0.0;
  std::optional<ad::Var> v_;
};

struct SymOps {
  ad::Tape* tape;
  std::size_t batch;

  ad::Var materialize(const Sym& s) const {
    return s.is_const() ? tape->leaf(ad::Tensor::filled({batch, 1}, s.c())) : s.var();
  }
  ad::Var column(const ad::Tensor& values) const { return tape->leaf(values); }

  Sym add(const Sym& a, const Sym& b) const {
    if (a.is_const() && b.is_const()) return a.c() + b.c();
    if (a.is_const() && a.c() == 0.0) return b;
    if (b.is_const() && b.c() == 0.0) return a;
    return Sym(ad::add(materialize(a), materialize(b)));
  }
  Sym sub(const Sym& a, const Sym& b) const {
    if (a.is_const() && b.is_const()) return a.c() - b.c();
    if (b.is_const() && b.c() == 0.0) return a;
    if (a.is_const() && a.c() == 0.0) return Sym(ad::neg(b.var()));
    return Sym(ad::sub(materialize(a), materialize(b)));
  }
  Sym mul(const Sym& a, const Sym& b) const {
    if (a.is_const() && b.is_const()) return a.c() * b.c();
    if (a.is_const()) return scaled(b, a.c());
    if (b.is_const()) return scaled(a, b.c());
    return Sym(ad::mul(a.var(), b.var()));
  }
  Sym scaled(const Sym& a, double k) const {
    if (a.is_const()) return a.c() * k;
    if (k == 0.0) return 0.0;
    if (k == 1.0) return a;
    if (k == -1.0) return Sym(ad::neg(a.var()));
    return Sym(ad::scale(a.var(), k));
  }
  Sym div(const Sym& a, const Sym& b) const {
    if (a.is_const() && b.is_const()) return a.c() / b.c();
    if (a.is_const() && a.c() == 0.0) return 0.0;
    if (b.is_const()) return scaled(a, 1.0 / b.c());
    return Sym(ad::div(materialize(a), b.var()));
  }
  Sym sqrt(const Sym& a) const {
    if (a.is_const()) return std::sqrt(a.c());
    return Sym(ad::sqrt(a.var()));
  }
  Sym mask(const Sym& a, const ad::Tensor& m) const {
    if (a.is_const() && a.c() == 0.0) return 0.0;
    return Sym(ad::mul(materialize(a), column(m)));
  }
};

struct SymFrame {
  std::array<Sym, 9> r;  // row-major rotation
  std::array<Sym, 3> p;

  const Sym& rot(int i, int j) const { return r[static_cast<std::size_t>(3 * i + j)]; }
};

SymFrame constant_frame(const Pose& pose) {
  SymFrame f;
  const Eigen::Matrix3d r = pose.rotation();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) f.r[static_cast<std::size_t>(3 * i + j)] = r(i, j);
    f.p[static_cast<std::size_t>(i)] = pose.position()[i];
  }
  return f;
}

// frame * [m | t]
SymFrame compose(const SymOps& ops, const SymFrame& f, const std::array<Sym, 9>& m, const std::array<Sym, 3>& t) {
  SymFrame out;
  for (int i = 0; i < 3; ++i) {
    Sym pi = f.p[static_cast<std::size_t>(i)];
    for (int k = 0; k < 3; ++k) pi = ops.add(pi, ops.mul(f.rot(i, k), t[static_cast<std::size_t>(k)]));
    out.p[static_cast<std::size_t>(i)] = pi;
    for (int j = 0; j < 3; ++j) {
      Sym acc = 0.0;
      for (int k = 0; k < 3; ++k) acc = ops.add(acc, ops.mul(f.rot(i, k), m[static_cast<std::size_t>(3 * k + j)]));
      out.r[static_cast<std::size_t>(3 * i + j)] = acc;
    }
  }
  return out;
}

SymFrame compose_const(const SymOps& ops, const SymFrame& f, const Pose& pose) {
  const SymFrame c = constant_frame(pose);
  return compose(ops, f, c.r, c.p);
}

// Rodrigues: R = (I + K^2) + sin(q) K - cos(q) K^2.
SymFrame rotate_about(const SymOps& ops, const SymFrame& f, const Eigen::Vector3d& axis, const ad::Var& q) {
  Eigen::Matrix3d k;
  k << 0, -axis.z(), axis.y(), axis.z(), 0, -axis.x(), -axis.y(), axis.x(), 0;
  const Eigen::Matrix3d k2 = k * k;
  const Eigen::Matrix3d base = Eigen::Matrix3d::Identity() + k2;
  const Sym s(ad::sin(q)), c(ad::cos(q));
  std::array<Sym, 9> m;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      Sym e = base(i, j);
      e = ops.add(e, ops.scaled(s, k(i, j)));
      e = ops.add(e, ops.scaled(c, -k2(i, j)));
      m[static_cast<std::size_t>(3 * i + j)] = e;
    }
  }
  return compose(ops, f, m, {0.0, 0.0, 0.0});
}

SymFrame translate_along(const SymOps& ops, const SymFrame& f, const Eigen::Vector3d& axis, const ad::Var& q) {
  const Sym d(q);
  return compose(ops, f, {1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0},
                 {ops.scaled(d, axis.x()), ops.scaled(d, axis.y()), ops.scaled(d, axis.z())});
}

// Branch b selects the largest of (trace, r00, r11, r22).
std::array<Sym, 4> branch_quaternion(const SymOps& ops, const SymFrame& f, int b, const Sym& s) {
  auto r = [&](int i, int j) { return f.rot(i, j); };
  const Sym quarter = ops.scaled(s, 0.25);
  switch (b) {
    case 0:
      return {quarter, ops.div(ops.sub(r(2, 1), r(1, 2)), s), ops.div(ops.sub(r(0, 2), r(2, 0)), s),
              ops.div(ops.sub(r(1, 0), r(0, 1)), s)};
    case 1:
      return {ops.div(ops.sub(r(2, 1), r(1, 2)), s), quarter, ops.div(ops.add(r(0, 1), r(1, 0)), s),
              ops.div(ops.add(r(0, 2), r(2, 0)), s)};
    case 2:
      return {ops.div(ops.sub(r(0, 2), r(2, 0)), s), ops.div(ops.add(r(0, 1), r(1, 0)), s), quarter,
              ops.div(ops.add(r(1, 2), r(2, 1)), s)};
    default:
      return {ops.div(ops.sub(r(1, 0), r(0, 1)), s), ops.div(ops.add(r(0, 2), r(2, 0)), s),
              ops.div(ops.add(r(1, 2), r(2, 1)), s), quarter};
  }
}

Sym branch_argument(const SymOps& ops, const SymFrame& f, int b) {
  const Sym& a = f.rot(0, 0);
  const Sym& d = f.rot(1, 1);
  const Sym& e = f.rot(2, 2);
  switch (b) {
    case 0: return ops.add(1.0, ops.add(a, ops.add(d, e)));
    case 1: return ops.add(1.0, ops.sub(a, ops.add(d, e)));
    case 2: return ops.add(1.0, ops.sub(d, ops.add(a, e)));
    default: return ops.add(1.0, ops.sub(e, ops.add(a, d)));
  }
}

std::array<Sym, 4> rotation_to_quaternion(const SymOps& ops, const SymFrame& f) {
  const std::size_t batch = ops.batch;
  std::vector<int> branch(batch);
  std::vector<double> sign(batch);
  for (std::size_t row = 0; row < batch; ++row) {
    Eigen::Matrix3d m;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) m(i, j) = f.rot(i, j).at(row);
    }
    const double cand[4] = {m.trace(), m(0, 0), m(1, 1), m(2, 2)};
    branch[row] = static_cast<int>(std::max_element(cand, cand + 4) - cand);
    // Sign of w for the chosen branch.
    double w = 0.0;
    switch (branch[row]) {
      case 0: w = 1.0; break;
      case 1: w = m(2, 1) - m(1, 2); break;
      case 2: w = m(0, 2) - m(2, 0); break;
      default: w = m(1, 0) - m(0, 1); break;
    }
    sign[row] = w < 0.0 ? -1.0 : 1.0;
  }

  std::array<Sym, 4> q{0.0, 0.0, 0.0, 0.0};
  for (int b = 0; b < 4; ++b) {
    const auto rows_in = static_cast<std::size_t>(std::count(branch.begin(), branch.end(), b));
    if (rows_in == 0) continue;
    const bool whole = rows_in == batch;
    const bool all_positive = std::all_of(sign.begin(), sign.end(), [](double v) { return v > 0.0; });
    ad::Tensor mask({batch, 1}, std::vector<double>(batch, 0.0));
    ad::Tensor signed_mask = mask, complement = mask;
    for (std::size_t row = 0; row < batch; ++row) {
      const bool in = branch[row] == b;
      mask[row] = in ? 1.0 : 0.0;
      signed_mask[row] = in ? sign[row] : 0.0;
      complement[row] = in ? 0.0 : 1.0;
    }
    Sym arg = branch_argument(ops, f, b);
    // Rows outside this branch see sqrt(1) so every value and gradient stays finite.
    if (!whole) arg = ops.add(ops.mask(arg, mask), Sym(ops.column(complement)));
    const Sym s = ops.scaled(ops.sqrt(arg), 2.0);
    const auto qb = branch_quaternion(ops, f, b, s);
    for (std::size_t i = 0; i < 4; ++i) {
      const Sym term = (whole && all_positive) ? qb[i] : ops.mask(qb[i], signed_mask);
      q[i] = ops.add(q[i], term);
    }
  }
  return q;
}

}  // namespace

ad::Var dfk(const ad::Var& joints, const BimanualChains& chains, std::size_t movable_count) {
  const ad::Shape& shape = joints.shape();
  const bool batched = shape.size() == 2;
  if (!(shape.size() == 1 || batched) || shape.back() != movable_count) {
    fail(ErrorCode::LengthMismatch,
         "dfk expects " + std::to_string(movable_count) + " joint values per row, got shape " + ad::shape_string(shape));
  }
  const ad::Var rows = batched ? joints : ad::reshape(joints, {1, movable_count});
  const SymOps ops{joints.tape(), rows.shape()[0]};

  std::vector<ad::Var> columns;
  columns.reserve(kReferenceWidth);
  for (const KinematicChain* chain : {&chains.left, &chains.right}) {
    SymFrame f = constant_frame(chain->base_pose);
    for (std::size_t i = 0; i < chain->size(); ++i) {
      const JointSpec& j = chain->joints[i];
      f = compose_const(ops, f, j.origin);
      const ad::Var q = ad::slice(rows, 1, chain->model_indices[i], 1);
      f = j.kind == JointKind::Revolute ? rotate_about(ops, f, j.axis, q) : translate_along(ops, f, j.axis, q);
    }
    f = compose_const(ops, f, chain->tip_offset);
    for (const Sym& p : f.p) columns.push_back(ops.materialize(p));
    for (const Sym& c : rotation_to_quaternion(ops, f)) columns.push_back(ops.materialize(c));
  }
  const ad::Var out = ad::concat(std::span<const ad::Var>(columns), 1);
  return batched ? out : ad::reshape(out, {kReferenceWidth});
}

ad::Var dfk(const ad::Var& joints, const RobotModel& model) {
  return dfk(joints, BimanualChains::of(model), model.movable_count());
}

}  // namespace kstar
