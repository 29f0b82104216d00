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
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "kstar/autodiff.hpp"
#include "kstar/kinematics.hpp"
#include "kstar/params.hpp"
#include "kstar/urdf_model.hpp"

namespace kstar {

/// Axis-aligned box used to normalize joint coordinates to [-1, 1].
struct Workspace {
  Eigen::Vector3d lower = Eigen::Vector3d::Constant(-1.0);
  Eigen::Vector3d upper = Eigen::Vector3d::Constant(1.0);
};

using Edge = std::pair<std::size_t, std::size_t>;

/// Node feature width for a model with m movable joints: coordinates (3),
/// distances to every joint (m), arm one-hot (2).
constexpr std::size_t feature_width(std::size_t m) { return 3 + m + 2; }

/// Row i: [normalized xyz | distances in meters to all joints | one-hot arm].
/// Left arm is [1, 0], right [0, 1].
Eigen::MatrixXd node_features(const RobotModel& model, const JointVector& theta, const Workspace& workspace);

/// Pairs of movable joints connected through the link tree once fixed
/// joints are collapsed, as indices in model movable order with i < j.
std::vector<Edge> joint_adjacency(const RobotModel& model);

struct SpatialGraph {
  std::size_t nodes = 0;
  std::vector<Edge> edges;
  Eigen::MatrixXd features;
};

SpatialGraph build_spatial_graph(const RobotModel& model, const JointVector& theta, const Workspace& workspace);

enum class TemporalRule { Consecutive, AllPairs };

/// Node (i, t) has index t * joints + i, with t = 0 the oldest slice.
struct STGraph {
  std::size_t timesteps = 0;
  std::size_t joints = 0;
  std::vector<Edge> edges;
  Eigen::MatrixXd features;
  std::size_t spatial_edge_count = 0;
  std::size_t temporal_edge_count = 0;

  std::size_t nodes() const { return timesteps * joints; }
};

/// Stacks `history` oldest first. Throws InconsistentSlices when the slices
/// disagree in node count, edge set or feature width.
STGraph build_st_graph(std::span<const SpatialGraph> history, TemporalRule rule = TemporalRule::Consecutive);

/// Spatial-temporal edge list for `joints` nodes per slice, without features.
std::vector<Edge> st_edges(const std::vector<Edge>& spatial, std::size_t joints, std::size_t timesteps,
                           TemporalRule rule = TemporalRule::Consecutive);

/// D^-1/2 (A + I) D^-1/2 for an undirected edge list.
Eigen::MatrixXd normalized_adjacency(std::size_t nodes, const std::vector<Edge>& edges);

struct GcnConfig {
  std::size_t layers = 4;
  std::size_t hidden = 128;
};

/// Registers "<prefix>.<l>.w" (in x out) and "<prefix>.<l>.b" (out) for every layer.
void add_gcn_params(ParamSet& params, const std::string& prefix, std::size_t input_width, const GcnConfig& config,
                    std::mt19937_64& rng);

struct GcnWeights {
  std::vector<ad::Var> weights;
  std::vector<ad::Var> biases;
};

GcnWeights gcn_weights(const BoundParams& bound, const std::string& prefix, std::size_t layers);

/// Batched encoder. `features` stacks `batch` graphs of `adjacency.rows()`
/// nodes each; returns (batch, hidden) mean-pooled final-layer features.
ad::Var gcn_forward(const ad::Var& features, const ad::Var& adjacency, const GcnWeights& weights);

/// Single-graph convenience: returns H_G with shape (hidden,).
ad::Var gcn_forward(ad::Tape& tape, const STGraph& graph, const GcnWeights& weights);

}  // namespace kstar
