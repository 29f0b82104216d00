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

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kstar/autodiff.hpp"
#include "kstar/diffusion.hpp"
#include "kstar/kinematics.hpp"
#include "kstar/params.hpp"
#include "kstar/st_graph.hpp"
#include "kstar/tasks.hpp"

namespace kstar {

struct DiffusionConfig {
  std::size_t steps = 100;  // K
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  std::size_t reverse_steps = 100;
};

struct OptimizerConfig {
  double lr = 1e-3;
  double weight_decay = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t warmup_steps = 200;
  std::size_t total_steps = 3000;
  std::size_t batch_size = 64;
};

struct ArchitectureConfig {
  std::size_t embed_width = 512;
  std::size_t obs_hidden = 64;
  std::size_t film_layers = 3;
  GcnConfig gcn;
  std::size_t denoiser_hidden = 256;
  std::size_t denoiser_layers = 3;
  std::size_t step_embed = 32;
};

/// Everything needed to reproduce a training run. Serialized as the
/// training config file and echoed into checkpoints and reports.
struct PolicyConfig {
  std::string model = "planar_bimanual_3dof";
  std::string task = "lift_plate_2d";
  std::uint64_t seed = 0;
  std::size_t demos = 100;
  std::uint64_t demo_seed = 1000;
  /// Optional demonstration file; generated from demo_seed when empty.
  std::string demos_path;
  DiffusionConfig diffusion;
  OptimizerConfig optimizer;
  ArchitectureConfig arch;
  double lambda = 0.9;
  std::size_t chunk = 2;    // m_chunk
  std::size_t history = 2;  // n; the encoder sees n + 1 observations
  bool use_reference = true;
  bool use_graph = true;
  TemporalRule temporal = TemporalRule::Consecutive;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults. Throws SchemaViolation on bad values.
  static PolicyConfig from_json(const nlohmann::json& j);
};

/// Per-coordinate affine map x -> (x - center) / scale. A zero scale marks a
/// coordinate that was constant when fitted: it normalizes to 0 and
/// inverts to its center.
struct AffineNormalizer {
  std::vector<double> center;
  std::vector<double> scale;

  /// Maps the per-coordinate range onto [-1, 1].
  static AffineNormalizer fit_range(const std::vector<std::vector<double>>& rows);
  /// Zero mean, unit variance.
  static AffineNormalizer fit_standard(const std::vector<std::vector<double>>& rows);

  std::size_t width() const { return center.size(); }
  /// `values` may hold several consecutive blocks of width().
  std::vector<double> apply(std::span<const double> values) const;
  std::vector<double> invert(std::span<const double> values) const;

  nlohmann::json to_json() const;
  static AffineNormalizer from_json(const nlohmann::json& j);
};

/// One supervised sample taken at a decision point of a demonstration.
struct TrainingExample {
  std::vector<Observation> history;  // n + 1, oldest first
  std::vector<double> action;        // chunk x 16, raw pose coordinates
  JointVector joints;                // joint configuration at the next keyframe
};

/// Decision points are step 0 and every keyframe. Targets are the next
/// `chunk` keyframes strictly after the decision point, repeating the last
/// one when the demonstration runs out.
std::vector<TrainingExample> build_training_set(const std::vector<Demonstration>& demos, const PolicyConfig& config);

/// History window ending at `index`: n + 1 observations, clamped at 0.
std::vector<Observation> history_window(const std::vector<Observation>& trajectory, std::size_t index,
                                        std::size_t n);

/// Network inputs for a batch, preprocessed once.
struct PolicyBatch {
  std::size_t size = 0;
  ad::Tensor observations;  // (B, observation width), normalized
  ad::Tensor instructions;  // (B, vocabulary) one-hot
  ad::Tensor graph;         // (B * nodes, feature width)
};

/// Conditioning produced for one batch.
struct Condition {
  ad::Var h_b;    // (B, obs_hidden)
  ad::Var h_g;    // (B, gcn hidden)
  ad::Var h_r;    // (B, 14)
  ad::Var joint;  // (B, m) joint head output
};

struct LossValues {
  double total = 0.0;
  double ee = 0.0;
  double joint = 0.0;
};

struct Normalizers {
  AffineNormalizer action;       // width 16, shared by every chunk slot
  AffineNormalizer observation;  // width (n + 1) x per-step observation width
};

class Policy {
 public:
  /// Initializes parameters from config.seed.
  Policy(PolicyConfig config, Normalizers normalizers);

  const PolicyConfig& config() const { return config_; }
  const RobotModel& model() const { return model_; }
  const Normalizers& normalizers() const { return normalizers_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  /// Reverse evaluations used by predict. Throws BadRange outside [1, K].
  void set_reverse_steps(std::size_t steps);
  std::size_t joint_count() const { return model_.movable_count(); }
  std::size_t step_observation_width() const;
  std::size_t action_width() const { return kBimanualActionWidth * config_.chunk; }

  /// Throws HistoryLengthMismatch unless every history holds n + 1 entries.
  PolicyBatch make_batch(std::span<const std::vector<Observation>> histories) const;

  /// H_B: encoder perceptron followed by FiLM layers driven by the
  /// instruction embedding.
  ad::Var encode_observation(ad::Tape& tape, const BoundParams& bound, const PolicyBatch& batch) const;
  /// H_G: GCN over the spatial-temporal graph, mean-pooled. Zeros when the
  /// graph is ablated.
  ad::Var encode_graph(ad::Tape& tape, const BoundParams& bound, const PolicyBatch& batch) const;
  /// Affine map of [H_B, H_G] to m joint values. Throws ShapeMismatch.
  ad::Var joint_head(const BoundParams& bound, const ad::Var& h_b, const ad::Var& h_g) const;
  /// H_R = dfk(joint); zeros when the reference is ablated.
  ad::Var reference(const ad::Var& joint) const;
  Condition condition(ad::Tape& tape, const BoundParams& bound, const PolicyBatch& batch) const;
  /// Predicts normalized a_0 from normalized a_k. Throws ShapeMismatch.
  ad::Var denoise(ad::Tape& tape, const BoundParams& bound, const ad::Var& a_k, std::span<const std::size_t> steps,
                  const Condition& c) const;

  /// Records the training objective. `a0` is the normalized action chunk
  /// (B, action width), `joints` the true next joint configuration (B, m).
  ad::Var loss(ad::Tape& tape, const BoundParams& bound, const PolicyBatch& batch, const ad::Tensor& a0,
               const ad::Tensor& joints, std::span<const std::size_t> steps, const ad::Tensor& noise,
               LossValues* values = nullptr) const;

  /// Reverse diffusion from standard-normal noise, denormalized and
  /// projected onto valid poses; returns `chunk` actions.
  std::vector<PoseVector> predict(const std::vector<Observation>& history, std::mt19937_64& rng) const;

 private:
  void init_params();

  PolicyConfig config_;
  Normalizers normalizers_;
  RobotModel model_;
  BimanualChains chains_;
  TaskSpec task_;
  NoiseSchedule schedule_;
  ad::Tensor adjacency_;
  ParamSet params_;
};

/// 1-D sinusoidal embedding of diffusion steps, (B, width).
ad::Tensor step_embedding(std::span<const std::size_t> steps, std::size_t width);

/// Fits normalizers on the training set and initializes a policy.
Policy make_policy(const PolicyConfig& config, const std::vector<TrainingExample>& examples);

struct TrainLogRow {
  std::size_t step = 0;
  double lr = 0.0;
  LossValues loss;
};

/// Decoupled-weight-decay Adam with linear warmup and cosine decay.
class AdamW {
 public:
  AdamW(const ParamSet& params, OptimizerConfig config);
  double learning_rate(std::size_t step) const;
  /// Applies one update; `step` counts from 1.
  void update(ParamSet& params, const std::vector<ad::Tensor>& grads, std::size_t step);

 private:
  OptimizerConfig config_;
  std::vector<ad::Tensor> m_;
  std::vector<ad::Tensor> v_;
};

class Trainer {
 public:
  Trainer(Policy& policy, std::vector<TrainingExample> examples);

  /// One minibatch update. Throws NonFiniteLoss.
  TrainLogRow step();
  std::size_t steps_done() const { return step_; }

 private:
  Policy& policy_;
  AdamW optimizer_;
  std::vector<TrainingExample> examples_;
  PolicyBatch all_;
  ad::Tensor actions_;  // (N, action width), normalized
  ad::Tensor joints_;   // (N, m)
  std::mt19937_64 rng_;
  std::size_t step_ = 0;
};

struct TrainResult {
  Policy policy;
  std::vector<TrainLogRow> log;
  std::size_t demo_count = 0;
  std::size_t example_count = 0;
};

using ProgressFn = std::function<void(const TrainLogRow&)>;

/// Loads or generates demonstrations, then trains for total_steps.
TrainResult train_policy(const PolicyConfig& config, const ProgressFn& progress = {});

struct EpisodeResult {
  std::uint64_t seed = 0;
  bool success = false;
  std::size_t steps = 0;      // executed actions
  std::size_t env_steps = 0;
  std::size_t collisions = 0;  // env steps in collision
  std::size_t ik_failures = 0;
  std::size_t predictions = 0;  // predicted keyposes checked for feasibility
  std::size_t feasible = 0;
};

/// Maps a history (oldest first) to an action chunk.
using ChunkPredictor = std::function<std::vector<PoseVector>(const std::vector<Observation>&, std::mt19937_64&)>;

struct RolloutOptions {
  std::size_t max_retries = 3;
  /// Executed actions; defaults to the task's step budget.
  std::optional<std::size_t> budget;
  ExecOptions exec;
};

/// Receding horizon: predict a chunk, check IK for every slot, execute the
/// first. An IK failure triggers re-prediction, up to max_retries in a row.
EpisodeResult rollout(const Env& env, const ChunkPredictor& predictor, std::size_t history, std::uint64_t seed,
                      const RolloutOptions& options = {});
EpisodeResult rollout(const Env& env, const Policy& policy, std::uint64_t seed, const RolloutOptions& options = {});

struct EvalSummary {
  std::size_t episodes = 0;
  double success_rate = 0.0;
  double mean_collisions = 0.0;
  double mean_ik_failures = 0.0;
  double feasibility_rate = 0.0;
};

EvalSummary summarize(const std::vector<EpisodeResult>& episodes);

/// Episodes use seeds first_seed .. first_seed + count - 1 and are
/// distributed over `workers` threads; results do not depend on `workers`.
std::vector<EpisodeResult> evaluate(const Env& env, const Policy& policy, std::size_t count, std::uint64_t first_seed,
                                    std::size_t workers = 1, const RolloutOptions& options = {});

nlohmann::json episode_json(const EpisodeResult& e);
nlohmann::json summary_json(const EvalSummary& s);

/// Writes config.json, manifest.json, params.bin and train_log.csv.
void save_checkpoint(const std::filesystem::path& dir, const Policy& policy, const std::vector<TrainLogRow>& log = {});
/// Throws IoError or SchemaViolation.
Policy load_checkpoint(const std::filesystem::path& dir);

}  // namespace kstar
