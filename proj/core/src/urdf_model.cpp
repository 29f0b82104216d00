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

#include "kstar/urdf_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

#include "kstar/error.hpp"

namespace kstar {

namespace pt = boost::property_tree;

std::string_view to_string(JointKind kind) {
  switch (kind) {
    case JointKind::Revolute: return "revolute";
    case JointKind::Prismatic: return "prismatic";
    case JointKind::Fixed: return "fixed";
  }
  return "fixed";
}

std::string_view to_string(Arm arm) { return arm == Arm::Left ? "left" : "right"; }

std::vector<std::size_t> RobotModel::movable_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < joints.size(); ++i) {
    if (joints[i].movable()) out.push_back(i);
  }
  return out;
}

std::size_t RobotModel::movable_count() const { return movable_indices().size(); }

const JointSpec* RobotModel::find_joint(std::string_view joint_name) const {
  for (const auto& j : joints) {
    if (j.name == joint_name) return &j;
  }
  return nullptr;
}

const JointSpec* RobotModel::parent_joint(std::string_view link) const {
  for (const auto& j : joints) {
    if (j.child_link == link) return &j;
  }
  return nullptr;
}

bool RobotModel::has_link(std::string_view link) const {
  for (const auto& l : links) {
    if (l == link) return true;
  }
  return false;
}

namespace {

void default_warning(std::string_view msg) { std::clog << "warning: " << msg << '\n'; }

Eigen::Vector3d parse_vec3(const std::string& text, const std::string& what) {
  std::istringstream in(text);
  Eigen::Vector3d v;
  for (int i = 0; i < 3; ++i) {
    if (!(in >> v[i])) fail(ErrorCode::MalformedXml, "expected three numbers in " + what + ": '" + text + "'");
  }
  std::string rest;
  if (in >> rest) fail(ErrorCode::MalformedXml, "trailing data in " + what + ": '" + text + "'");
  return v;
}

std::string attr(const pt::ptree& node, const std::string& key, const std::string& what) {
  auto v = node.get_optional<std::string>("<xmlattr>." + key);
  if (!v) fail(ErrorCode::MalformedXml, what + " lacks attribute '" + key + "'");
  return *v;
}

double parse_number(const std::string& text, const std::string& what) {
  std::size_t used = 0;
  double value = 0.0;
  try {
    value = std::stod(text, &used);
  } catch (const std::exception&) {
    fail(ErrorCode::MalformedXml, "bad number in " + what + ": '" + text + "'");
  }
  if (used != text.size()) fail(ErrorCode::MalformedXml, "bad number in " + what + ": '" + text + "'");
  return value;
}

bool is_ignored_element(const std::string& tag) {
  return tag == "visual" || tag == "collision" || tag == "inertial" || tag == "mimic" ||
         tag == "transmission" || tag == "dynamics" || tag == "calibration" ||
         tag == "safety_controller" || tag == "material" || tag == "gazebo";
}

JointSpec parse_joint(const pt::ptree& node, const std::function<void(std::string_view)>& warn) {
  JointSpec j;
  j.name = attr(node, "name", "<joint>");
  const std::string type = attr(node, "type", "joint '" + j.name + "'");
  if (type == "revolute") {
    j.kind = JointKind::Revolute;
  } else if (type == "prismatic") {
    j.kind = JointKind::Prismatic;
  } else if (type == "fixed") {
    j.kind = JointKind::Fixed;
  } else {
    fail(ErrorCode::UnsupportedJointKind, "joint '" + j.name + "' has unsupported type '" + type + "'");
  }

  bool has_parent = false, has_child = false, has_limit = false;
  Eigen::Vector3d xyz = Eigen::Vector3d::Zero(), rpy = Eigen::Vector3d::Zero();
  for (const auto& [tag, child] : node) {
    const std::string where = "joint '" + j.name + "' <" + tag + ">";
    if (tag == "<xmlattr>" || tag == "<xmlcomment>") continue;
    if (tag == "parent") {
      j.parent_link = attr(child, "link", where);
      has_parent = true;
    } else if (tag == "child") {
      j.child_link = attr(child, "link", where);
      has_child = true;
    } else if (tag == "origin") {
      if (auto v = child.get_optional<std::string>("<xmlattr>.xyz")) xyz = parse_vec3(*v, where);
      if (auto v = child.get_optional<std::string>("<xmlattr>.rpy")) rpy = parse_vec3(*v, where);
    } else if (tag == "axis") {
      j.axis = parse_vec3(attr(child, "xyz", where), where);
    } else if (tag == "limit") {
      has_limit = true;
      if (auto v = child.get_optional<std::string>("<xmlattr>.lower")) j.limits.lower = parse_number(*v, where);
      if (auto v = child.get_optional<std::string>("<xmlattr>.upper")) j.limits.upper = parse_number(*v, where);
      if (auto v = child.get_optional<std::string>("<xmlattr>.velocity")) {
        j.limits.max_velocity = parse_number(*v, where);
      }
    } else if (is_ignored_element(tag)) {
      warn("ignoring <" + tag + "> in joint '" + j.name + "'");
    } else {
      warn("unknown element <" + tag + "> in joint '" + j.name + "'");
    }
  }
  if (!has_parent || !has_child) {
    fail(ErrorCode::MalformedXml, "joint '" + j.name + "' needs both <parent> and <child>");
  }
  j.origin = Pose::from_xyz_rpy(xyz, rpy);
  if (j.movable()) {
    if (!has_limit) fail(ErrorCode::MalformedXml, "movable joint '" + j.name + "' lacks <limit>");
    const double n = j.axis.norm();
    if (!(n > 0.0) || !std::isfinite(n)) fail(ErrorCode::MalformedXml, "joint '" + j.name + "' has a zero axis");
    j.axis /= n;
  } else {
    j.limits = {};
  }
  return j;
}

void check_tree(RobotModel& model) {
  std::set<std::string> link_set(model.links.begin(), model.links.end());
  std::map<std::string, int> parent_count;
  for (const auto& j : model.joints) {
    if (!link_set.count(j.parent_link)) {
      fail(ErrorCode::MissingLink, "joint '" + j.name + "' references undeclared parent link '" + j.parent_link + "'");
    }
    if (!link_set.count(j.child_link)) {
      fail(ErrorCode::MissingLink, "joint '" + j.name + "' references undeclared child link '" + j.child_link + "'");
    }
    if (++parent_count[j.child_link] > 1) {
      fail(ErrorCode::CycleDetected, "link '" + j.child_link + "' has more than one parent joint");
    }
  }
  std::vector<std::string> roots;
  for (const auto& l : model.links) {
    if (!parent_count.count(l)) roots.push_back(l);
  }
  if (roots.size() != 1) {
    fail(ErrorCode::CycleDetected,
         "link graph is not a tree (" + std::to_string(roots.size()) + " candidate roots)");
  }
  model.root_link = roots.front();

  // Every link must be reachable from the root; anything left over sits on a cycle.
  std::set<std::string> seen{model.root_link};
  std::vector<std::string> stack{model.root_link};
  while (!stack.empty()) {
    const std::string link = stack.back();
    stack.pop_back();
    for (const auto& j : model.joints) {
      if (j.parent_link == link && seen.insert(j.child_link).second) stack.push_back(j.child_link);
    }
  }
  if (seen.size() != model.links.size()) fail(ErrorCode::CycleDetected, "link graph contains a cycle");
}

void assign_arms(RobotModel& model, const ParseOptions& options) {
  model.arms = {};
  if (options.explicit_arms) {
    std::map<std::string, Arm> label;
    for (const auto& n : options.explicit_arms->left) label[n] = Arm::Left;
    for (const auto& n : options.explicit_arms->right) {
      if (label.count(n)) fail(ErrorCode::ArmAssignment, "joint '" + n + "' listed for both arms");
      label[n] = Arm::Right;
    }
    for (const auto& [n, _] : label) {
      const JointSpec* j = model.find_joint(n);
      if (!j || !j->movable()) fail(ErrorCode::ArmAssignment, "arm list names unknown or fixed joint '" + n + "'");
    }
    for (auto& j : model.joints) {
      if (!j.movable()) continue;
      auto it = label.find(j.name);
      if (it == label.end()) fail(ErrorCode::ArmAssignment, "movable joint '" + j.name + "' is in no arm list");
      j.arm = it->second;
    }
  } else {
    for (auto& j : model.joints) {
      if (!j.movable()) continue;
      if (j.name.starts_with(options.left_prefix)) {
        j.arm = Arm::Left;
      } else if (j.name.starts_with(options.right_prefix)) {
        j.arm = Arm::Right;
      } else {
        fail(ErrorCode::ArmAssignment, "movable joint '" + j.name + "' matches neither arm prefix ('" +
                                           options.left_prefix + "', '" + options.right_prefix + "')");
      }
    }
  }
  for (const auto& j : model.joints) {
    if (!j.movable()) continue;
    (*j.arm == Arm::Left ? model.arms.left : model.arms.right).push_back(j.name);
  }
}

}  // namespace

RobotModel parse_urdf(std::string_view text, const ParseOptions& options) {
  const auto warn = options.on_warning ? options.on_warning : std::function<void(std::string_view)>(default_warning);
  pt::ptree tree;
  std::istringstream in{std::string(text)};
  try {
    pt::read_xml(in, tree, pt::xml_parser::trim_whitespace);
  } catch (const pt::xml_parser_error& e) {
    fail(ErrorCode::MalformedXml, e.what());
  }
  auto robot = tree.get_child_optional("robot");
  if (!robot) fail(ErrorCode::MalformedXml, "document has no <robot> element");

  RobotModel model;
  model.name = robot->get<std::string>("<xmlattr>.name", "");
  std::set<std::string> link_names, joint_names;
  for (const auto& [tag, node] : *robot) {
    if (tag == "<xmlattr>" || tag == "<xmlcomment>") continue;
    if (tag == "link") {
      const std::string name = attr(node, "name", "<link>");
      if (!link_names.insert(name).second) fail(ErrorCode::MalformedXml, "duplicate link '" + name + "'");
      model.links.push_back(name);
      for (const auto& [child_tag, _] : node) {
        if (child_tag == "<xmlattr>" || child_tag == "<xmlcomment>") continue;
        warn("ignoring <" + child_tag + "> in link '" + name + "'");
      }
    } else if (tag == "joint") {
      JointSpec j = parse_joint(node, warn);
      if (!joint_names.insert(j.name).second) fail(ErrorCode::MalformedXml, "duplicate joint '" + j.name + "'");
      model.joints.push_back(std::move(j));
    } else {
      warn("ignoring top-level <" + tag + ">");
    }
  }
  if (model.links.empty()) fail(ErrorCode::MalformedXml, "robot declares no links");
  check_tree(model);
  assign_arms(model, options);
  return model;
}

namespace {

std::string fmt_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_vec(const Eigen::Vector3d& v) {
  return fmt_num(v.x()) + " " + fmt_num(v.y()) + " " + fmt_num(v.z());
}

}  // namespace

std::string to_urdf(const RobotModel& model) {
  std::ostringstream out;
  out << "<?xml version=\"1.0\"?>\n<robot name=\"" << model.name << "\">\n";
  for (const auto& l : model.links) out << "  <link name=\"" << l << "\"/>\n";
  for (const auto& j : model.joints) {
    out << "  <joint name=\"" << j.name << "\" type=\"" << to_string(j.kind) << "\">\n"
        << "    <parent link=\"" << j.parent_link << "\"/>\n"
        << "    <child link=\"" << j.child_link << "\"/>\n"
        << "    <origin xyz=\"" << fmt_vec(j.origin.position()) << "\" rpy=\"" << fmt_vec(j.origin.rpy())
        << "\"/>\n";
    if (j.movable()) {
      out << "    <axis xyz=\"" << fmt_vec(j.axis) << "\"/>\n"
          << "    <limit lower=\"" << fmt_num(j.limits.lower) << "\" upper=\"" << fmt_num(j.limits.upper) << "\"";
      if (j.limits.max_velocity) out << " velocity=\"" << fmt_num(*j.limits.max_velocity) << "\"";
      out << "/>\n";
    }
    out << "  </joint>\n";
  }
  out << "</robot>\n";
  return out.str();
}

ValidationReport validate_model(const RobotModel& model) {
  ValidationReport report;
  auto add = [&](std::string code, std::string msg) { report.findings.push_back({std::move(code), std::move(msg)}); };

  std::set<std::string> links;
  for (const auto& l : model.links) {
    if (!links.insert(l).second) add("DUPLICATE_LINK", "link '" + l + "' declared twice");
  }
  std::set<std::string> joint_names;
  std::map<std::string, int> parents;
  for (const auto& j : model.joints) {
    if (!joint_names.insert(j.name).second) add("DUPLICATE_JOINT", "joint '" + j.name + "' declared twice");
    for (const auto* l : {&j.parent_link, &j.child_link}) {
      if (!links.count(*l)) add("MISSING_LINK", "joint '" + j.name + "' references undeclared link '" + *l + "'");
    }
    if (++parents[j.child_link] == 2) add("MULTIPLE_PARENTS", "link '" + j.child_link + "' has several parents");
    if (j.movable()) {
      if (std::abs(j.axis.norm() - 1.0) > 1e-9) add("AXIS_NOT_UNIT", "joint '" + j.name + "' axis is not unit length");
      if (!std::isfinite(j.limits.lower) || !std::isfinite(j.limits.upper)) {
        add("LIMITS_NONFINITE", "joint '" + j.name + "' has non-finite limits");
      } else if (j.limits.lower > j.limits.upper) {
        add("LIMITS_INVERTED", "joint '" + j.name + "' has lower > upper");
      }
    }
  }

  if (!links.count(model.root_link)) {
    add("ROOT_INVALID", "root link '" + model.root_link + "' is not declared");
  } else if (parents.count(model.root_link)) {
    add("ROOT_INVALID", "root link '" + model.root_link + "' has a parent joint");
  } else {
    std::set<std::string> seen{model.root_link};
    std::vector<std::string> stack{model.root_link};
    while (!stack.empty()) {
      const std::string link = stack.back();
      stack.pop_back();
      for (const auto& j : model.joints) {
        if (j.parent_link == link && seen.insert(j.child_link).second) stack.push_back(j.child_link);
      }
    }
    for (const auto& l : links) {
      if (!seen.count(l)) add("NOT_A_TREE", "link '" + l + "' is not reachable from the root");
    }
  }

  std::map<std::string, int> membership;
  for (const auto* list : {&model.arms.left, &model.arms.right}) {
    for (const auto& n : *list) {
      const JointSpec* j = model.find_joint(n);
      if (!j || !j->movable()) {
        add("ARM_INVALID_JOINT", "arm list names unknown or fixed joint '" + n + "'");
        continue;
      }
      if (++membership[n] == 2) add("ARM_OVERLAP", "joint '" + n + "' appears in more than one arm slot");
    }
  }
  for (const auto& j : model.joints) {
    if (!j.movable()) continue;
    if (!membership.count(j.name)) {
      add("ARM_UNASSIGNED", "movable joint '" + j.name + "' is in no arm list");
      continue;
    }
    if (membership[j.name] != 1) continue;
    const bool in_left =
        std::find(model.arms.left.begin(), model.arms.left.end(), j.name) != model.arms.left.end();
    if (j.arm && (*j.arm == Arm::Left) != in_left) {
      add("ARM_LABEL_MISMATCH", "joint '" + j.name + "' label disagrees with its arm list");
    }
  }
  return report;
}

KinematicChain extract_chain(const RobotModel& model, std::string_view base, std::string_view tip) {
  for (auto l : {base, tip}) {
    if (!model.has_link(l)) fail(ErrorCode::MissingLink, "unknown link '" + std::string(l) + "'");
  }
  std::vector<const JointSpec*> path;
  std::string_view cursor = tip;
  while (cursor != base) {
    const JointSpec* j = model.parent_joint(cursor);
    if (!j) {
      fail(ErrorCode::NotConnected,
           "link '" + std::string(tip) + "' is not a descendant of '" + std::string(base) + "'");
    }
    path.push_back(j);
    cursor = j->parent_link;
  }
  std::reverse(path.begin(), path.end());

  KinematicChain chain;
  chain.base_link = std::string(base);
  chain.tip_link = std::string(tip);
  for (const JointSpec* j = model.parent_joint(base); j; j = model.parent_joint(j->parent_link)) {
    chain.base_pose = j->origin * chain.base_pose;
  }

  std::map<std::string, std::size_t> movable_slot;
  const auto movable = model.movable_indices();
  for (std::size_t i = 0; i < movable.size(); ++i) movable_slot[model.joints[movable[i]].name] = i;

  Pose pending;
  for (const JointSpec* j : path) {
    if (!j->movable()) {
      pending = pending * j->origin;
      continue;
    }
    JointSpec folded = *j;
    folded.origin = pending * j->origin;
    pending = Pose();
    chain.joints.push_back(std::move(folded));
    chain.model_indices.push_back(movable_slot.at(j->name));
  }
  chain.tip_offset = pending;
  return chain;
}

KinematicChain arm_chain(const RobotModel& model, Arm arm) {
  const auto& names = arm == Arm::Left ? model.arms.left : model.arms.right;
  if (names.empty()) fail(ErrorCode::ArmAssignment, std::string(to_string(arm)) + " arm has no joints");
  const JointSpec* last = model.find_joint(names.back());
  std::string tip = last->child_link;
  // Follow fixed joints down to the end-effector frame.
  for (bool descended = true; descended;) {
    descended = false;
    for (const auto& j : model.joints) {
      if (j.parent_link == tip && !j.movable()) {
        tip = j.child_link;
        descended = true;
        break;
      }
    }
  }
  return extract_chain(model, model.root_link, tip);
}

std::optional<BuiltinModel> builtin_from_name(std::string_view name) {
  if (name == "planar_bimanual_3dof") return BuiltinModel::PlanarBimanual3Dof;
  if (name == "spatial_bimanual_7dof") return BuiltinModel::SpatialBimanual7Dof;
  return std::nullopt;
}

namespace {

struct UrdfWriter {
  std::ostringstream out;

  void link(const std::string& name) { out << "  <link name=\"" << name << "\"/>\n"; }

  void joint(const std::string& name, const std::string& type, const std::string& parent, const std::string& child,
             const Eigen::Vector3d& xyz, const Eigen::Vector3d& rpy, const Eigen::Vector3d& axis = {0, 0, 1},
             double lower = 0.0, double upper = 0.0) {
    out << "  <joint name=\"" << name << "\" type=\"" << type << "\">\n"
        << "    <parent link=\"" << parent << "\"/>\n"
        << "    <child link=\"" << child << "\"/>\n"
        << "    <origin xyz=\"" << fmt_vec(xyz) << "\" rpy=\"" << fmt_vec(rpy) << "\"/>\n";
    if (type != "fixed") {
      out << "    <axis xyz=\"" << fmt_vec(axis) << "\"/>\n"
          << "    <limit lower=\"" << fmt_num(lower) << "\" upper=\"" << fmt_num(upper) << "\"/>\n";
    }
    out << "  </joint>\n";
  }
};

std::string planar_urdf() {
  constexpr double pi = std::numbers::pi;
  const double lengths[3] = {0.30, 0.25, 0.15};
  UrdfWriter w;
  w.out << "<?xml version=\"1.0\"?>\n<robot name=\"planar_bimanual_3dof\">\n";
  w.link("world");
  for (const std::string side : {"left", "right"}) {
    const double x = side == "left" ? -0.25 : 0.25;
    w.link(side + "_base");
    for (int i = 1; i <= 3; ++i) w.link(side + "_link" + std::to_string(i));
    w.link(side + "_gripper");
    w.joint(side + "_mount", "fixed", "world", side + "_base", {x, 0, 0}, {0, 0, 0});
    w.joint(side + "_joint1", "revolute", side + "_base", side + "_link1", {0, 0, 0}, {0, 0, 0}, {0, 0, 1}, -pi, pi);
    w.joint(side + "_joint2", "revolute", side + "_link1", side + "_link2", {lengths[0], 0, 0}, {0, 0, 0}, {0, 0, 1},
            -pi, pi);
    w.joint(side + "_joint3", "revolute", side + "_link2", side + "_link3", {lengths[1], 0, 0}, {0, 0, 0}, {0, 0, 1},
            -pi, pi);
    w.joint(side + "_tool", "fixed", side + "_link3", side + "_gripper", {lengths[2], 0, 0}, {0, 0, 0});
  }
  w.out << "</robot>\n";
  return w.out.str();
}

// Seven-joint arms with the joint frames of a common collaborative arm.
std::string spatial_urdf() {
  constexpr double h = std::numbers::pi / 2;
  struct Row {
    Eigen::Vector3d xyz, rpy;
    double lower, upper;
  };
  const Row rows[7] = {
      {{0, 0, 0.333}, {0, 0, 0}, -2.8973, 2.8973},    {{0, 0, 0}, {-h, 0, 0}, -1.7628, 1.7628},
      {{0, -0.316, 0}, {h, 0, 0}, -2.8973, 2.8973},   {{0.0825, 0, 0}, {h, 0, 0}, -3.0718, -0.0698},
      {{-0.0825, 0.384, 0}, {-h, 0, 0}, -2.8973, 2.8973}, {{0, 0, 0}, {h, 0, 0}, -0.0175, 3.7525},
      {{0.088, 0, 0}, {h, 0, 0}, -2.8973, 2.8973},
  };
  UrdfWriter w;
  w.out << "<?xml version=\"1.0\"?>\n<robot name=\"spatial_bimanual_7dof\">\n";
  w.link("world");
  for (const std::string side : {"left", "right"}) {
    const double y = side == "left" ? 0.35 : -0.35;
    for (int i = 0; i <= 8; ++i) w.link(side + "_link" + std::to_string(i));
    w.link(side + "_hand");
    w.link(side + "_gripper");
    w.joint(side + "_mount", "fixed", "world", side + "_link0", {0, y, 0}, {0, 0, 0});
    for (int i = 0; i < 7; ++i) {
      w.joint(side + "_joint" + std::to_string(i + 1), "revolute", side + "_link" + std::to_string(i),
              side + "_link" + std::to_string(i + 1), rows[i].xyz, rows[i].rpy, {0, 0, 1}, rows[i].lower,
              rows[i].upper);
    }
    w.joint(side + "_flange", "fixed", side + "_link7", side + "_link8", {0, 0, 0.107}, {0, 0, 0});
    w.joint(side + "_hand_joint", "fixed", side + "_link8", side + "_hand", {0, 0, 0}, {0, 0, -h / 2});
    w.joint(side + "_tcp", "fixed", side + "_hand", side + "_gripper", {0, 0, 0.1034}, {0, 0, 0});
  }
  w.out << "</robot>\n";
  return w.out.str();
}

}  // namespace

std::string builtin_urdf(BuiltinModel which) {
  return which == BuiltinModel::PlanarBimanual3Dof ? planar_urdf() : spatial_urdf();
}

RobotModel builtin_model(BuiltinModel which) { return parse_urdf(builtin_urdf(which)); }

RobotModel builtin_model(std::string_view name) {
  auto which = builtin_from_name(name);
  if (!which) fail(ErrorCode::UnknownModel, "unknown built-in model '" + std::string(name) + "'");
  return builtin_model(*which);
}

}  // namespace kstar
