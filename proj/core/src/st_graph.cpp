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

#include "kstar/st_graph.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "kstar/error.hpp"

namespace kstar {

Eigen::MatrixXd node_features(const RobotModel& model, const JointVector& theta, const Workspace& workspace) {
  const std::size_t m = model.movable_count();
  if (static_cast<std::size_t>(theta.size()) != m) {
    fail(ErrorCode::LengthMismatch,
         "node_features expects " + std::to_string(m) + " joint values, got " + std::to_string(theta.size()));
  }
  const Eigen::Vector3d extent = workspace.upper - workspace.lower;
  if ((extent.array() <= 0.0).any()) fail(ErrorCode::BadRange, "workspace box must have positive extent");
  const Eigen::Vector3d center = 0.5 * (workspace.upper + workspace.lower);

  const auto positions = fk_joint_positions(model, theta);
  const auto movable = model.movable_indices();
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(feature_width(m)));
  for (std::size_t i = 0; i < m; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    f.block<1, 3>(r, 0) = (2.0 * (positions[i] - center).array() / extent.array()).matrix().transpose();
    for (std::size_t j = 0; j < m; ++j) f(r, static_cast<Eigen::Index>(3 + j)) = (positions[i] - positions[j]).norm();
    const bool left = model.joints[movable[i]].arm.value_or(Arm::Left) == Arm::Left;
    f(r, static_cast<Eigen::Index>(3 + m + (left ? 0 : 1))) = 1.0;
  }
  return f;
}

std::vector<Edge> joint_adjacency(const RobotModel& model) {
  const auto movable = model.movable_indices();
  std::map<std::string, std::size_t> slot;
  for (std::size_t k = 0; k < movable.size(); ++k) slot[model.joints[movable[k]].name] = k;
  std::vector<Edge> edges;
  for (std::size_t k = 0; k < movable.size(); ++k) {
    // Nearest movable ancestor joint, skipping fixed joints.
    const JointSpec* j = model.parent_joint(model.joints[movable[k]].parent_link);
    while (j && !j->movable()) j = model.parent_joint(j->parent_link);
    if (j) {
      const std::size_t p = slot.at(j->name);
      edges.emplace_back(std::min(p, k), std::max(p, k));
    }
  }
  std::sort(edges.begin(), edges.end());
  return edges;
}

SpatialGraph build_spatial_graph(const RobotModel& model, const JointVector& theta, const Workspace& workspace) {
  return {model.movable_count(), joint_adjacency(model), node_features(model, theta, workspace)};
}

std::vector<Edge> st_edges(const std::vector<Edge>& spatial, std::size_t joints, std::size_t timesteps,
                           TemporalRule rule) {
  std::vector<Edge> edges;
  for (std::size_t t = 0; t < timesteps; ++t) {
    for (const auto& [a, b] : spatial) edges.emplace_back(t * joints + a, t * joints + b);
  }
  for (std::size_t t = 0; t + 1 < timesteps; ++t) {
    const std::size_t last = rule == TemporalRule::Consecutive ? t + 1 : timesteps - 1;
    for (std::size_t u = t + 1; u <= last; ++u) {
      for (std::size_t i = 0; i < joints; ++i) edges.emplace_back(t * joints + i, u * joints + i);
    }
  }
  return edges;
}

STGraph build_st_graph(std::span<const SpatialGraph> history, TemporalRule rule) {
  if (history.empty()) fail(ErrorCode::InconsistentSlices, "spatial-temporal graph needs at least one slice");
  const SpatialGraph& first = history.front();
  for (const auto& g : history) {
    if (g.nodes != first.nodes || g.edges != first.edges || g.features.cols() != first.features.cols() ||
        static_cast<std::size_t>(g.features.rows()) != g.nodes) {
      fail(ErrorCode::InconsistentSlices, "history slices differ in nodes, edges or feature width");
    }
  }
  STGraph st;
  st.timesteps = history.size();
  st.joints = first.nodes;
  st.edges = st_edges(first.edges, st.joints, st.timesteps, rule);
  st.spatial_edge_count = first.edges.size() * st.timesteps;
  st.temporal_edge_count = st.edges.size() - st.spatial_edge_count;
  st.features.resize(static_cast<Eigen::Index>(st.nodes()), first.features.cols());
  for (std::size_t t = 0; t < st.timesteps; ++t) {
    st.features.middleRows(static_cast<Eigen::Index>(t * st.joints), static_cast<Eigen::Index>(st.joints)) =
        history[t].features;
  }
  return st;
}

Eigen::MatrixXd normalized_adjacency(std::size_t nodes, const std::vector<Edge>& edges) {
  const auto n = static_cast<Eigen::Index>(nodes);
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n);
  for (const auto& [i, j] : edges) {
    if (i >= nodes || j >= nodes || i == j) fail(ErrorCode::ShapeMismatch, "edge references an invalid node");
    a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = 1.0;
    a(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = 1.0;
  }
  const Eigen::VectorXd inv_sqrt = a.rowwise().sum().cwiseSqrt().cwiseInverse();
  return inv_sqrt.asDiagonal() * a * inv_sqrt.asDiagonal();
}

void add_gcn_params(ParamSet& params, const std::string& prefix, std::size_t input_width, const GcnConfig& config,
                    std::mt19937_64& rng) {
  std::size_t in = input_width;
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string base = prefix + "." + std::to_string(l);
    params.add(base + ".w", glorot(in, config.hidden, rng));
    params.add(base + ".b", ad::Tensor::zeros({config.hidden}));
    in = config.hidden;
  }
}

GcnWeights gcn_weights(const BoundParams& bound, const std::string& prefix, std::size_t layers) {
  GcnWeights w;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string base = prefix + "." + std::to_string(l);
    w.weights.push_back(bound.get(base + ".w"));
    w.biases.push_back(bound.get(base + ".b"));
  }
  return w;
}

ad::Var gcn_forward(const ad::Var& features, const ad::Var& adjacency, const GcnWeights& weights) {
  if (weights.weights.empty() || weights.weights.size() != weights.biases.size()) {
    fail(ErrorCode::ShapeMismatch, "GCN needs matching, non-empty weight and bias lists");
  }
  std::size_t width = features.shape().at(1);
  for (std::size_t l = 0; l < weights.weights.size(); ++l) {
    const ad::Shape& ws = weights.weights[l].shape();
    if (ws.size() != 2 || ws[0] != width || weights.biases[l].shape() != ad::Shape{ws[1]}) {
      fail(ErrorCode::ShapeMismatch, "GCN layer " + std::to_string(l) + " expects input width " +
                                         std::to_string(width) + ", weight is " + ad::shape_string(ws));
    }
    width = ws[1];
  }
  ad::Var h = features;
  for (std::size_t l = 0; l < weights.weights.size(); ++l) {
    h = ad::leaky_relu(ad::add_row(ad::matmul(ad::block_matmul(adjacency, h), weights.weights[l]), weights.biases[l]));
  }
  return ad::group_mean_rows(h, adjacency.shape()[0]);
}

ad::Var gcn_forward(ad::Tape& tape, const STGraph& graph, const GcnWeights& weights) {
  const Eigen::MatrixXd a = normalized_adjacency(graph.nodes(), graph.edges);
  const auto n = static_cast<std::size_t>(a.rows());
  std::vector<double> adata(n * n), fdata(graph.features.size());
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(adata.data(), a.rows(),
                                                                                      a.cols()) = a;
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      fdata.data(), graph.features.rows(), graph.features.cols()) = graph.features;
  const ad::Var adj = tape.leaf(ad::Tensor({n, n}, std::move(adata)));
  const ad::Var feats = tape.leaf(
      ad::Tensor({static_cast<std::size_t>(graph.features.rows()), static_cast<std::size_t>(graph.features.cols())},
                 std::move(fdata)));
  return ad::reshape(gcn_forward(feats, adj, weights), {weights.weights.back().shape()[1]});
}

}  // namespace kstar
