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

#include "kstar/policy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>
#include <thread>

#include "kstar/error.hpp"

namespace kstar {

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration.

namespace {

std::string_view to_string(TemporalRule rule) {
  return rule == TemporalRule::AllPairs ? "all_pairs" : "consecutive";
}

TemporalRule temporal_from(const std::string& s) {
  if (s == "consecutive") return TemporalRule::Consecutive;
  if (s == "all_pairs") return TemporalRule::AllPairs;
  fail(ErrorCode::SchemaViolation, "temporal must be consecutive or all_pairs, got '" + s + "'");
}

// Reads `key` into `out` when present, rejecting wrong types.
template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorCode::SchemaViolation, where + key + ": " + e.what());
  }
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) fail(ErrorCode::SchemaViolation, where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(known.begin(), known.end(), [&](const char* k) { return key == k; }) == known.end()) {
      fail(ErrorCode::SchemaViolation, "unknown config key '" + where + key + "'");
    }
  }
}

}  // namespace

json PolicyConfig::to_json() const {
  return {
      {"model", model},
      {"task", task},
      {"seed", seed},
      {"demos", demos},
      {"demo_seed", demo_seed},
      {"demos_path", demos_path},
      {"diffusion",
       {{"K", diffusion.steps},
        {"beta_start", diffusion.beta_start},
        {"beta_end", diffusion.beta_end},
        {"reverse_steps", diffusion.reverse_steps}}},
      {"optimizer",
       {{"lr", optimizer.lr},
        {"weight_decay", optimizer.weight_decay},
        {"beta1", optimizer.beta1},
        {"beta2", optimizer.beta2},
        {"eps", optimizer.eps},
        {"warmup_steps", optimizer.warmup_steps},
        {"total_steps", optimizer.total_steps},
        {"batch_size", optimizer.batch_size}}},
      {"architecture",
       {{"embed_width", arch.embed_width},
        {"obs_hidden", arch.obs_hidden},
        {"film_layers", arch.film_layers},
        {"gcn_layers", arch.gcn.layers},
        {"gcn_hidden", arch.gcn.hidden},
        {"denoiser_hidden", arch.denoiser_hidden},
        {"denoiser_layers", arch.denoiser_layers},
        {"step_embed", arch.step_embed}}},
      {"lambda", lambda},
      {"chunk", chunk},
      {"history", history},
      {"use_reference", use_reference},
      {"use_graph", use_graph},
      {"temporal", std::string(to_string(temporal))},
  };
}

PolicyConfig PolicyConfig::from_json(const json& j) {
  PolicyConfig c;
  reject_unknown(j,
                 {"model", "task", "seed", "demos", "demo_seed", "demos_path", "diffusion", "optimizer", "architecture",
                  "lambda", "chunk", "history", "use_reference", "use_graph", "temporal"},
                 "");
  read(j, "model", c.model, "");
  read(j, "task", c.task, "");
  read(j, "seed", c.seed, "");
  read(j, "demos", c.demos, "");
  read(j, "demo_seed", c.demo_seed, "");
  read(j, "demos_path", c.demos_path, "");
  if (j.contains("diffusion")) {
    const json& d = j["diffusion"];
    reject_unknown(d, {"K", "beta_start", "beta_end", "reverse_steps"}, "diffusion.");
    read(d, "K", c.diffusion.steps, "diffusion.");
    read(d, "beta_start", c.diffusion.beta_start, "diffusion.");
    read(d, "beta_end", c.diffusion.beta_end, "diffusion.");
    read(d, "reverse_steps", c.diffusion.reverse_steps, "diffusion.");
  }
  if (j.contains("optimizer")) {
    const json& o = j["optimizer"];
    reject_unknown(o, {"lr", "weight_decay", "beta1", "beta2", "eps", "warmup_steps", "total_steps", "batch_size"},
                   "optimizer.");
    read(o, "lr", c.optimizer.lr, "optimizer.");
    read(o, "weight_decay", c.optimizer.weight_decay, "optimizer.");
    read(o, "beta1", c.optimizer.beta1, "optimizer.");
    read(o, "beta2", c.optimizer.beta2, "optimizer.");
    read(o, "eps", c.optimizer.eps, "optimizer.");
    read(o, "warmup_steps", c.optimizer.warmup_steps, "optimizer.");
    read(o, "total_steps", c.optimizer.total_steps, "optimizer.");
    read(o, "batch_size", c.optimizer.batch_size, "optimizer.");
  }
  if (j.contains("architecture")) {
    const json& a = j["architecture"];
    reject_unknown(a,
                   {"embed_width", "obs_hidden", "film_layers", "gcn_layers", "gcn_hidden", "denoiser_hidden",
                    "denoiser_layers", "step_embed"},
                   "architecture.");
    read(a, "embed_width", c.arch.embed_width, "architecture.");
    read(a, "obs_hidden", c.arch.obs_hidden, "architecture.");
    read(a, "film_layers", c.arch.film_layers, "architecture.");
    read(a, "gcn_layers", c.arch.gcn.layers, "architecture.");
    read(a, "gcn_hidden", c.arch.gcn.hidden, "architecture.");
    read(a, "denoiser_hidden", c.arch.denoiser_hidden, "architecture.");
    read(a, "denoiser_layers", c.arch.denoiser_layers, "architecture.");
    read(a, "step_embed", c.arch.step_embed, "architecture.");
  }
  read(j, "lambda", c.lambda, "");
  read(j, "chunk", c.chunk, "");
  read(j, "history", c.history, "");
  read(j, "use_reference", c.use_reference, "");
  read(j, "use_graph", c.use_graph, "");
  if (j.contains("temporal")) {
    std::string t;
    read(j, "temporal", t, "");
    c.temporal = temporal_from(t);
  }

  if (!(c.lambda >= 0.0 && c.lambda <= 1.0)) fail(ErrorCode::BadLambda, "lambda must lie in [0, 1]");
  if (c.diffusion.reverse_steps == 0 || c.diffusion.reverse_steps > c.diffusion.steps) {
    fail(ErrorCode::BadRange, "diffusion.reverse_steps must lie in [1, K]");
  }
  if (c.chunk == 0 || c.optimizer.batch_size == 0 || c.optimizer.total_steps == 0 || c.arch.gcn.layers == 0 ||
      c.arch.denoiser_layers == 0 || c.arch.step_embed % 2 != 0 || c.optimizer.lr <= 0.0) {
    fail(ErrorCode::BadRange, "chunk, batch_size, total_steps and layer counts must be positive; step_embed even");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Normalization.

namespace {

constexpr double kFlatRange = 1e-6;

std::size_t common_width(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) fail(ErrorCode::BadRange, "cannot fit a normalizer on zero rows");
  for (const auto& r : rows) {
    if (r.size() != rows.front().size()) fail(ErrorCode::LengthMismatch, "normalizer rows differ in width");
  }
  return rows.front().size();
}

}  // namespace

AffineNormalizer AffineNormalizer::fit_range(const std::vector<std::vector<double>>& rows) {
  const std::size_t w = common_width(rows);
  AffineNormalizer n{std::vector<double>(w), std::vector<double>(w)};
  for (std::size_t i = 0; i < w; ++i) {
    double lo = rows.front()[i], hi = lo;
    for (const auto& r : rows) {
      lo = std::min(lo, r[i]);
      hi = std::max(hi, r[i]);
    }
    n.center[i] = 0.5 * (lo + hi);
    n.scale[i] = hi - lo > kFlatRange ? 0.5 * (hi - lo) : 0.0;
  }
  return n;
}

AffineNormalizer AffineNormalizer::fit_standard(const std::vector<std::vector<double>>& rows) {
  const std::size_t w = common_width(rows);
  AffineNormalizer n{std::vector<double>(w, 0.0), std::vector<double>(w, 0.0)};
  const double count = static_cast<double>(rows.size());
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < w; ++i) n.center[i] += r[i] / count;
  }
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < w; ++i) n.scale[i] += (r[i] - n.center[i]) * (r[i] - n.center[i]) / count;
  }
  for (double& s : n.scale) s = std::sqrt(s) > kFlatRange ? std::sqrt(s) : 0.0;
  return n;
}

std::vector<double> AffineNormalizer::apply(std::span<const double> values) const {
  if (width() == 0 || values.size() % width() != 0) {
    fail(ErrorCode::LengthMismatch, "normalizer width " + std::to_string(width()) + " does not divide " +
                                        std::to_string(values.size()));
  }
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double s = scale[i % width()];
    out[i] = s > 0.0 ? (values[i] - center[i % width()]) / s : 0.0;
  }
  return out;
}

std::vector<double> AffineNormalizer::invert(std::span<const double> values) const {
  if (width() == 0 || values.size() % width() != 0) {
    fail(ErrorCode::LengthMismatch, "normalizer width " + std::to_string(width()) + " does not divide " +
                                        std::to_string(values.size()));
  }
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = values[i] * scale[i % width()] + center[i % width()];
  return out;
}

json AffineNormalizer::to_json() const { return {{"center", center}, {"scale", scale}}; }

AffineNormalizer AffineNormalizer::from_json(const json& j) {
  try {
    AffineNormalizer n{j.at("center").get<std::vector<double>>(), j.at("scale").get<std::vector<double>>()};
    if (n.center.size() != n.scale.size()) throw std::runtime_error("center and scale differ in length");
    return n;
  } catch (const std::exception& e) {
    fail(ErrorCode::SchemaViolation, std::string("normalizer: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Training data.

std::vector<Observation> history_window(const std::vector<Observation>& trajectory, std::size_t index,
                                        std::size_t n) {
  if (trajectory.empty() || index >= trajectory.size()) {
    fail(ErrorCode::BadRange, "history index outside the trajectory");
  }
  std::vector<Observation> out;
  out.reserve(n + 1);
  for (std::size_t i = 0; i <= n; ++i) {
    const std::size_t back = n - i;
    out.push_back(trajectory[index >= back ? index - back : 0]);
  }
  return out;
}

std::vector<TrainingExample> build_training_set(const std::vector<Demonstration>& demos, const PolicyConfig& config) {
  std::vector<TrainingExample> out;
  for (const auto& demo : demos) {
    std::vector<Observation> trajectory;
    trajectory.reserve(demo.steps.size());
    for (const auto& s : demo.steps) trajectory.push_back(s.observation);
    std::vector<std::size_t> decisions{0};
    decisions.insert(decisions.end(), demo.keyframes.begin(), demo.keyframes.end());
    std::sort(decisions.begin(), decisions.end());
    decisions.erase(std::unique(decisions.begin(), decisions.end()), decisions.end());

    for (std::size_t t : decisions) {
      std::vector<std::size_t> targets;
      for (std::size_t k : demo.keyframes) {
        if (k > t && targets.size() < config.chunk) targets.push_back(k);
      }
      if (targets.empty()) targets.push_back(t);
      while (targets.size() < config.chunk) targets.push_back(targets.back());

      TrainingExample ex;
      ex.history = history_window(trajectory, t, config.history);
      for (std::size_t k : targets) {
        const auto flat = demo.steps[k].observation.ee_poses.flat();
        ex.action.insert(ex.action.end(), flat.begin(), flat.end());
      }
      ex.joints = demo.steps[targets.front()].observation.joint_config;
      out.push_back(std::move(ex));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Network.

namespace {

ad::Var linear(const ad::Var& x, const ad::Var& w, const ad::Var& b) { return ad::add_row(ad::matmul(x, w), b); }

std::string layer(const char* prefix, std::size_t l, const char* part) {
  return std::string(prefix) + "." + std::to_string(l) + "." + part;
}

ad::Tensor to_tensor(const Eigen::MatrixXd& m) {
  ad::Tensor t = ad::Tensor::zeros({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = m(r, c);
  }
  return t;
}

void require_shape(const ad::Var& v, const ad::Shape& shape, const char* what) {
  if (v.shape() != shape) {
    fail(ErrorCode::ShapeMismatch,
         std::string(what) + " expects shape " + ad::shape_string(shape) + ", got " + ad::shape_string(v.shape()));
  }
}

}  // namespace

ad::Tensor step_embedding(std::span<const std::size_t> steps, std::size_t width) {
  ad::Tensor out = ad::Tensor::zeros({steps.size(), width});
  const std::size_t half = width / 2;
  for (std::size_t r = 0; r < steps.size(); ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      out.at(r, i) = std::sin(static_cast<double>(steps[r]) * freq);
      out.at(r, half + i) = std::cos(static_cast<double>(steps[r]) * freq);
    }
  }
  return out;
}

void Policy::set_reverse_steps(std::size_t steps) {
  if (steps == 0 || steps > config_.diffusion.steps) fail(ErrorCode::BadRange, "reverse steps must lie in [1, K]");
  config_.diffusion.reverse_steps = steps;
}

Policy::Policy(PolicyConfig config, Normalizers normalizers)
    : config_(std::move(config)),
      normalizers_(std::move(normalizers)),
      model_(builtin_model(config_.model)),
      chains_(BimanualChains::of(model_)),
      task_(TaskSpec::make(task_from_name(config_.task))),
      schedule_(config_.diffusion.steps, config_.diffusion.beta_start, config_.diffusion.beta_end) {
  if (normalizers_.action.width() != kBimanualActionWidth) {
    fail(ErrorCode::SchemaViolation, "action normalizer must have width 16");
  }
  if (normalizers_.observation.width() != (config_.history + 1) * step_observation_width()) {
    fail(ErrorCode::SchemaViolation, "observation normalizer width does not match the history layout");
  }
  const std::size_t m = model_.movable_count();
  const std::size_t t = config_.history + 1;
  adjacency_ = to_tensor(normalized_adjacency(m * t, st_edges(joint_adjacency(model_), m, t, config_.temporal)));
  init_params();
}

std::size_t Policy::step_observation_width() const {
  return model_.movable_count() + kBimanualActionWidth + task_.object_width();
}

void Policy::init_params() {
  std::mt19937_64 rng(config_.seed);
  const ArchitectureConfig& a = config_.arch;
  const std::size_t m = model_.movable_count();
  const auto zeros = [](std::size_t n) { return ad::Tensor::zeros({n}); };

  params_.add("embed.table", glorot(kInstructionVocabulary, a.embed_width, rng));
  params_.add("obs.0.w", glorot((config_.history + 1) * step_observation_width(), a.obs_hidden, rng));
  params_.add("obs.0.b", zeros(a.obs_hidden));
  params_.add("obs.1.w", glorot(a.obs_hidden, a.obs_hidden, rng));
  params_.add("obs.1.b", zeros(a.obs_hidden));
  for (std::size_t l = 0; l < a.film_layers; ++l) {
    params_.add(layer("film", l, "gamma.w"), glorot(a.embed_width, a.obs_hidden, rng));
    params_.add(layer("film", l, "gamma.b"), ad::Tensor::filled({a.obs_hidden}, 1.0));
    params_.add(layer("film", l, "beta.w"), glorot(a.embed_width, a.obs_hidden, rng));
    params_.add(layer("film", l, "beta.b"), zeros(a.obs_hidden));
  }
  add_gcn_params(params_, "gcn", feature_width(m), a.gcn, rng);
  params_.add("head.w", glorot(a.obs_hidden + a.gcn.hidden, m, rng));
  params_.add("head.b", zeros(m));
  std::size_t in = action_width() + a.step_embed + a.obs_hidden + a.gcn.hidden + kReferenceWidth;
  for (std::size_t l = 0; l <= a.denoiser_layers; ++l) {
    const std::size_t out = l == a.denoiser_layers ? action_width() : a.denoiser_hidden;
    params_.add(layer("denoise", l, "w"), glorot(in, out, rng));
    params_.add(layer("denoise", l, "b"), zeros(out));
    in = out;
  }
}

PolicyBatch Policy::make_batch(std::span<const std::vector<Observation>> histories) const {
  const std::size_t n = config_.history + 1;
  const std::size_t m = model_.movable_count();
  const std::size_t obs_width = n * step_observation_width();
  const std::size_t fw = feature_width(m);
  PolicyBatch b;
  b.size = histories.size();
  b.observations = ad::Tensor::zeros({b.size, obs_width});
  b.instructions = ad::Tensor::zeros({b.size, static_cast<std::size_t>(kInstructionVocabulary)});
  b.graph = ad::Tensor::zeros({b.size * n * m, fw});
  for (std::size_t r = 0; r < b.size; ++r) {
    const auto& h = histories[r];
    if (h.size() != n) {
      fail(ErrorCode::HistoryLengthMismatch,
           "expected " + std::to_string(n) + " observations, got " + std::to_string(h.size()));
    }
    std::vector<double> flat;
    flat.reserve(obs_width);
    for (const auto& o : h) {
      const auto f = o.flat();
      if (f.size() != step_observation_width()) {
        fail(ErrorCode::LengthMismatch, "observation width " + std::to_string(f.size()) + ", expected " +
                                            std::to_string(step_observation_width()));
      }
      flat.insert(flat.end(), f.begin(), f.end());
    }
    const auto norm = normalizers_.observation.apply(flat);
    std::copy(norm.begin(), norm.end(), b.observations.data().begin() + static_cast<std::ptrdiff_t>(r * obs_width));
    const int id = h.back().instruction_id;
    if (id < 0 || id >= kInstructionVocabulary) fail(ErrorCode::BadRange, "instruction id outside the vocabulary");
    b.instructions.at(r, static_cast<std::size_t>(id)) = 1.0;
    for (std::size_t t = 0; t < n; ++t) {
      const Eigen::MatrixXd f = node_features(model_, h[t].joint_config, task_.workspace);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t c = 0; c < fw; ++c) {
          b.graph.at((r * n + t) * m + i, c) = f(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
        }
      }
    }
  }
  return b;
}

ad::Var Policy::encode_observation(ad::Tape& tape, const BoundParams& bound, const PolicyBatch& batch) const {
  const ad::Var obs = tape.leaf(batch.observations);
  ad::Var h = ad::leaky_relu(linear(obs, bound.get("obs.0.w"), bound.get("obs.0.b")));
  h = linear(h, bound.get("obs.1.w"), bound.get("obs.1.b"));
  const ad::Var e = ad::matmul(tape.leaf(batch.instructions), bound.get("embed.table"));
  for (std::size_t l = 0; l < config_.arch.film_layers; ++l) {
    const ad::Var gamma = linear(e, bound.get(layer("film", l, "gamma.w")), bound.get(layer("film", l, "gamma.b")));
    const ad::Var beta = linear(e, bound.get(layer("film", l, "beta.w")), bound.get(layer("film", l, "beta.b")));
    h = ad::leaky_relu(ad::add(ad::mul(gamma, h), beta));
  }
  return h;
}

ad::Var Policy::encode_graph(ad::Tape& tape, const BoundParams& bound, const PolicyBatch& batch) const {
  if (!config_.use_graph) return tape.leaf(ad::Tensor::zeros({batch.size, config_.arch.gcn.hidden}));
  return gcn_forward(tape.leaf(batch.graph), tape.leaf(adjacency_), gcn_weights(bound, "gcn", config_.arch.gcn.layers));
}

ad::Var Policy::joint_head(const BoundParams& bound, const ad::Var& h_b, const ad::Var& h_g) const {
  const std::size_t b = h_b.shape().empty() ? 0 : h_b.shape()[0];
  require_shape(h_b, {b, config_.arch.obs_hidden}, "joint_head H_B");
  require_shape(h_g, {b, config_.arch.gcn.hidden}, "joint_head H_G");
  return linear(ad::concat({h_b, h_g}, 1), bound.get("head.w"), bound.get("head.b"));
}

ad::Var Policy::reference(const ad::Var& joint) const {
  if (!config_.use_reference) return joint.tape()->leaf(ad::Tensor::zeros({joint.shape().at(0), kReferenceWidth}));
  return dfk(joint, chains_, model_.movable_count());
}

Condition Policy::condition(ad::Tape& tape, const BoundParams& bound, const PolicyBatch& batch) const {
  Condition c;
  c.h_b = encode_observation(tape, bound, batch);
  c.h_g = encode_graph(tape, bound, batch);
  c.joint = joint_head(bound, c.h_b, c.h_g);
  c.h_r = reference(c.joint);
  return c;
}

ad::Var Policy::denoise(ad::Tape& tape, const BoundParams& bound, const ad::Var& a_k,
                        std::span<const std::size_t> steps, const Condition& c) const {
  const std::size_t b = steps.size();
  require_shape(a_k, {b, action_width()}, "denoise a_k");
  require_shape(c.h_b, {b, config_.arch.obs_hidden}, "denoise H_B");
  require_shape(c.h_g, {b, config_.arch.gcn.hidden}, "denoise H_G");
  require_shape(c.h_r, {b, kReferenceWidth}, "denoise H_R");
  const ad::Var k = tape.leaf(step_embedding(steps, config_.arch.step_embed));
  ad::Var h = ad::concat({a_k, k, c.h_b, c.h_g, c.h_r}, 1);
  const std::size_t layers = config_.arch.denoiser_layers;
  for (std::size_t l = 0; l <= layers; ++l) {
    h = linear(h, bound.get(layer("denoise", l, "w")), bound.get(layer("denoise", l, "b")));
    if (l < layers) h = ad::leaky_relu(h);
  }
  return h;
}

ad::Var Policy::loss(ad::Tape& tape, const BoundParams& bound, const PolicyBatch& batch, const ad::Tensor& a0,
                     const ad::Tensor& joints, std::span<const std::size_t> steps, const ad::Tensor& noise,
                     LossValues* values) const {
  const Condition c = condition(tape, bound, batch);
  const ad::Var a_k = tape.leaf(add_noise_rows(a0, steps, noise, schedule_));
  const ad::Var pred = denoise(tape, bound, a_k, steps, c);
  const ad::Var l_ee = loss_ee(pred, tape.leaf(a0));
  const ad::Var l_joint = loss_joint(tape.leaf(joints), c.joint);
  const ad::Var total = loss_total(l_ee, l_joint, config_.lambda);
  if (values) *values = {total.value().item(), l_ee.value().item(), l_joint.value().item()};
  return total;
}

std::vector<PoseVector> Policy::predict(const std::vector<Observation>& history, std::mt19937_64& rng) const {
  ad::Tape tape;
  const BoundParams bound(tape, params_);
  const PolicyBatch batch = make_batch(std::span<const std::vector<Observation>>(&history, 1));
  const Condition c = condition(tape, bound, batch);
  const Denoiser denoiser = [&](const ad::Tensor& a_k, std::size_t k) {
    const std::size_t steps[1] = {k};
    return denoise(tape, bound, tape.leaf(a_k), steps, c).value();
  };
  const ad::Tensor a0 = sample(denoiser, {1, action_width()}, schedule_, config_.diffusion.reverse_steps, rng);
  const std::vector<double> raw = normalizers_.action.invert(a0.data());
  std::vector<PoseVector> chunk;
  for (std::size_t s = 0; s < config_.chunk; ++s) {
    chunk.push_back(
        normalize_action(std::span<const double>(raw).subspan(s * kBimanualActionWidth, kBimanualActionWidth)).action);
  }
  return chunk;
}

Policy make_policy(const PolicyConfig& config, const std::vector<TrainingExample>& examples) {
  if (examples.empty()) fail(ErrorCode::BadRange, "no training examples");
  std::vector<std::vector<double>> actions, observations;
  for (const auto& ex : examples) {
    for (std::size_t s = 0; s + kBimanualActionWidth <= ex.action.size(); s += kBimanualActionWidth) {
      actions.emplace_back(ex.action.begin() + static_cast<std::ptrdiff_t>(s),
                           ex.action.begin() + static_cast<std::ptrdiff_t>(s + kBimanualActionWidth));
    }
    std::vector<double> flat;
    for (const auto& o : ex.history) {
      const auto f = o.flat();
      flat.insert(flat.end(), f.begin(), f.end());
    }
    observations.push_back(std::move(flat));
  }
  Policy policy(config, {AffineNormalizer::fit_range(actions), AffineNormalizer::fit_standard(observations)});
  // Start the joint head at the mean target configuration.
  ad::Tensor& bias = policy.params().value(policy.params().index("head.b"));
  for (const auto& ex : examples) {
    for (std::size_t i = 0; i < bias.size(); ++i) {
      bias[i] += ex.joints[static_cast<Eigen::Index>(i)] / static_cast<double>(examples.size());
    }
  }
  return policy;
}

// ---------------------------------------------------------------------------
// Optimization.

AdamW::AdamW(const ParamSet& params, OptimizerConfig config) : config_(config) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_.push_back(ad::Tensor::zeros(params.value(i).shape()));
    v_.push_back(ad::Tensor::zeros(params.value(i).shape()));
  }
}

double AdamW::learning_rate(std::size_t step) const {
  const double s = static_cast<double>(step);
  if (step <= config_.warmup_steps && config_.warmup_steps > 0) {
    return config_.lr * s / static_cast<double>(config_.warmup_steps);
  }
  const double span = static_cast<double>(std::max<std::size_t>(1, config_.total_steps - std::min(config_.total_steps, config_.warmup_steps)));
  const double progress = std::min(1.0, (s - static_cast<double>(config_.warmup_steps)) / span);
  return config_.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void AdamW::update(ParamSet& params, const std::vector<ad::Tensor>& grads, std::size_t step) {
  const double lr = learning_rate(step);
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params.value(i).data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    const auto g = grads[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
      p[j] -= lr * ((m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps) + config_.weight_decay * p[j]);
    }
  }
}

namespace {

ad::Tensor gather_rows(const ad::Tensor& src, std::span<const std::size_t> rows, std::size_t block = 1) {
  const std::size_t w = src.cols() * block;
  ad::Tensor out = ad::Tensor::zeros({rows.size() * block, src.cols()});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy_n(src.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * w), w,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * w));
  }
  return out;
}

}  // namespace

Trainer::Trainer(Policy& policy, std::vector<TrainingExample> examples)
    : policy_(policy),
      optimizer_(policy.params(), policy.config().optimizer),
      examples_(std::move(examples)),
      rng_(policy.config().seed ^ 0x5DEECE66DULL) {
  if (examples_.empty()) fail(ErrorCode::BadRange, "no training examples");
  std::vector<std::vector<Observation>> histories;
  for (const auto& ex : examples_) histories.push_back(ex.history);
  all_ = policy_.make_batch(histories);
  const std::size_t m = policy_.joint_count();
  actions_ = ad::Tensor::zeros({examples_.size(), policy_.action_width()});
  joints_ = ad::Tensor::zeros({examples_.size(), m});
  for (std::size_t r = 0; r < examples_.size(); ++r) {
    if (examples_[r].action.size() != policy_.action_width() || static_cast<std::size_t>(examples_[r].joints.size()) != m) {
      fail(ErrorCode::LengthMismatch, "training example widths do not match the policy");
    }
    const auto a = policy_.normalizers().action.apply(examples_[r].action);
    std::copy(a.begin(), a.end(), actions_.data().begin() + static_cast<std::ptrdiff_t>(r * a.size()));
    for (std::size_t i = 0; i < m; ++i) joints_.at(r, i) = examples_[r].joints[static_cast<Eigen::Index>(i)];
  }
}

TrainLogRow Trainer::step() {
  const PolicyConfig& cfg = policy_.config();
  const std::size_t b = cfg.optimizer.batch_size;
  std::uniform_int_distribution<std::size_t> pick(0, examples_.size() - 1);
  std::uniform_int_distribution<std::size_t> step_k(1, cfg.diffusion.steps);
  std::vector<std::size_t> rows(b), ks(b);
  for (auto& r : rows) r = pick(rng_);
  for (auto& k : ks) k = step_k(rng_);
  const ad::Tensor noise = standard_normal({b, policy_.action_width()}, rng_);

  PolicyBatch batch;
  batch.size = b;
  batch.observations = gather_rows(all_.observations, rows);
  batch.instructions = gather_rows(all_.instructions, rows);
  batch.graph = gather_rows(all_.graph, rows, (cfg.history + 1) * policy_.joint_count());

  ad::Tape tape;
  const BoundParams bound(tape, policy_.params());
  LossValues values;
  const ad::Var loss =
      policy_.loss(tape, bound, batch, gather_rows(actions_, rows), gather_rows(joints_, rows), ks, noise, &values);
  if (!std::isfinite(values.total)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << step_ + 1 << " (ee " << values.ee << ", joint " << values.joint << ")";
    fail(ErrorCode::NonFiniteLoss, msg.str());
  }
  const ad::Gradients grads = tape.backward(loss);
  std::vector<ad::Tensor> g;
  g.reserve(bound.vars().size());
  for (const auto& v : bound.vars()) g.push_back(grads.wrt(v));
  ++step_;
  optimizer_.update(policy_.params(), g, step_);
  return {step_, optimizer_.learning_rate(step_), values};
}

TrainResult train_policy(const PolicyConfig& config, const ProgressFn& progress) {
  if (config.model != "planar_bimanual_3dof") {
    fail(ErrorCode::UsageError, "tasks run on planar_bimanual_3dof, not '" + config.model + "'");
  }
  const Env env(TaskSpec::make(task_from_name(config.task)));
  std::vector<Demonstration> demos;
  if (!config.demos_path.empty()) {
    for (auto& d : load_demos(config.demos_path)) {
      if (d.task == config.task && demos.size() < config.demos) demos.push_back(std::move(d));
    }
    if (demos.size() < config.demos) {
      fail(ErrorCode::BadRange, config.demos_path + " holds only " + std::to_string(demos.size()) + " " +
                                    config.task + " demonstrations");
    }
  } else {
    demos = generate_demos(env, config.demos, config.demo_seed).demos;
  }
  auto examples = build_training_set(demos, config);
  TrainResult result{make_policy(config, examples), {}, demos.size(), examples.size()};
  Trainer trainer(result.policy, std::move(examples));
  for (std::size_t s = 0; s < config.optimizer.total_steps; ++s) {
    result.log.push_back(trainer.step());
    if (progress) progress(result.log.back());
  }
  return result;
}

// ---------------------------------------------------------------------------
// Rollout and evaluation.

EpisodeResult rollout(const Env& env, const ChunkPredictor& predictor, std::size_t history, std::uint64_t seed,
                      const RolloutOptions& options) {
  EpisodeResult r;
  r.seed = seed;
  EnvState state = env.reset(seed);
  std::vector<Observation> trajectory{env.observe(state)};
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL);
  const std::size_t budget = options.budget.value_or(static_cast<std::size_t>(env.spec().step_budget));
  std::size_t retries = 0;
  while (!state.terminal() && r.steps < budget) {
    const auto chunk = predictor(history_window(trajectory, trajectory.size() - 1, history), rng);
    if (chunk.empty()) break;
    JointVector init = state.theta;
    bool first_ok = false;
    for (std::size_t s = 0; s < chunk.size(); ++s) {
      const auto sol = solve_bimanual(env, chunk[s], init, options.exec);
      ++r.predictions;
      if (sol) {
        ++r.feasible;
        init = *sol;
      }
      if (s == 0) first_ok = sol.has_value();
    }
    if (!first_ok) {
      ++r.ik_failures;
      if (++retries > options.max_retries) break;
      continue;
    }
    retries = 0;
    std::vector<EnvState> trace;
    const ExecResult ex = execute_action(env, state, chunk.front(), options.exec, &trace);
    for (const auto& s : trace) trajectory.push_back(env.observe(s));
    ++r.steps;
    r.env_steps += ex.env_steps;
    r.collisions += ex.collision_steps;
  }
  r.success = state.success;
  return r;
}

EpisodeResult rollout(const Env& env, const Policy& policy, std::uint64_t seed, const RolloutOptions& options) {
  const ChunkPredictor predictor = [&policy](const std::vector<Observation>& h, std::mt19937_64& rng) {
    return policy.predict(h, rng);
  };
  return rollout(env, predictor, policy.config().history, seed, options);
}

EvalSummary summarize(const std::vector<EpisodeResult>& episodes) {
  EvalSummary s;
  s.episodes = episodes.size();
  if (episodes.empty()) return s;
  double predictions = 0.0, feasible = 0.0;
  for (const auto& e : episodes) {
    s.success_rate += e.success ? 1.0 : 0.0;
    s.mean_collisions += static_cast<double>(e.collisions);
    s.mean_ik_failures += static_cast<double>(e.ik_failures);
    predictions += static_cast<double>(e.predictions);
    feasible += static_cast<double>(e.feasible);
  }
  const double n = static_cast<double>(episodes.size());
  s.success_rate /= n;
  s.mean_collisions /= n;
  s.mean_ik_failures /= n;
  s.feasibility_rate = predictions > 0.0 ? feasible / predictions : 0.0;
  return s;
}

std::vector<EpisodeResult> evaluate(const Env& env, const Policy& policy, std::size_t count, std::uint64_t first_seed,
                                    std::size_t workers, const RolloutOptions& options) {
  std::vector<EpisodeResult> results(count);
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(count, 1));
  auto run = [&](std::size_t w) {
    for (std::size_t i = w; i < count; i += workers) results[i] = rollout(env, policy, first_seed + i, options);
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
  }
  return results;
}

json episode_json(const EpisodeResult& e) {
  return {{"seed", e.seed},
          {"success", e.success},
          {"steps", e.steps},
          {"env_steps", e.env_steps},
          {"collisions", e.collisions},
          {"ik_failures", e.ik_failures},
          {"predictions", e.predictions},
          {"feasible", e.feasible}};
}

json summary_json(const EvalSummary& s) {
  return {{"episodes", s.episodes},
          {"success_rate", s.success_rate},
          {"mean_collisions", s.mean_collisions},
          {"mean_ik_failures", s.mean_ik_failures},
          {"feasibility_rate", s.feasibility_rate}};
}

// ---------------------------------------------------------------------------
// Checkpoints.

namespace {

constexpr const char* kCheckpointFormat = "kstar-checkpoint/1";

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::SchemaViolation, path.string() + ": " + e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out || !(out << text)) fail(ErrorCode::IoError, "cannot write " + path.string());
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Policy& policy, const std::vector<TrainLogRow>& log) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());

  const ParamSet& params = policy.params();
  json entries = json::array();
  std::size_t offset = 0;
  std::ofstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) fail(ErrorCode::IoError, "cannot write " + (dir / "params.bin").string());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ad::Tensor& v = params.value(i);
    entries.push_back({{"name", params.name(i)}, {"shape", v.shape()}, {"offset", offset}});
    bin.write(reinterpret_cast<const char*>(v.data().data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    offset += v.size();
  }
  if (!bin) fail(ErrorCode::IoError, "write failed for params.bin");

  const json manifest = {{"format", kCheckpointFormat},
                         {"dtype", "float64-le"},
                         {"scalars", offset},
                         {"params", entries},
                         {"normalizers",
                          {{"action", policy.normalizers().action.to_json()},
                           {"observation", policy.normalizers().observation.to_json()}}}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  write_text(dir / "config.json", policy.config().to_json().dump(2) + "\n");

  std::ostringstream csv;
  csv.precision(17);
  csv << "step,lr,loss,loss_ee,loss_joint\n";
  for (const auto& row : log) {
    csv << row.step << ',' << row.lr << ',' << row.loss.total << ',' << row.loss.ee << ',' << row.loss.joint << '\n';
  }
  write_text(dir / "train_log.csv", csv.str());
}

Policy load_checkpoint(const std::filesystem::path& dir) {
  const PolicyConfig config = PolicyConfig::from_json(read_json(dir / "config.json"));
  const json manifest = read_json(dir / "manifest.json");
  if (manifest.value("format", "") != kCheckpointFormat) {
    fail(ErrorCode::SchemaViolation, "manifest.json: expected format " + std::string(kCheckpointFormat));
  }
  Normalizers norms;
  try {
    norms.action = AffineNormalizer::from_json(manifest.at("normalizers").at("action"));
    norms.observation = AffineNormalizer::from_json(manifest.at("normalizers").at("observation"));
  } catch (const json::exception& e) {
    fail(ErrorCode::SchemaViolation, std::string("manifest.json: ") + e.what());
  }
  Policy policy(config, std::move(norms));

  std::ifstream bin(dir / "params.bin", std::ios::binary | std::ios::ate);
  if (!bin) fail(ErrorCode::IoError, "cannot read " + (dir / "params.bin").string());
  const auto bytes = static_cast<std::size_t>(bin.tellg());
  std::vector<double> blob(bytes / sizeof(double));
  bin.seekg(0);
  bin.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(blob.size() * sizeof(double)));

  ParamSet& params = policy.params();
  std::vector<bool> seen(params.size(), false);
  try {
    for (const auto& e : manifest.at("params")) {
      const std::size_t i = params.index(e.at("name").get<std::string>());
      const auto shape = e.at("shape").get<ad::Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      ad::Tensor& v = params.value(i);
      if (shape != v.shape()) {
        fail(ErrorCode::SchemaViolation, "parameter " + params.name(i) + " has shape " + ad::shape_string(shape) +
                                             ", config implies " + ad::shape_string(v.shape()));
      }
      if (offset + v.size() > blob.size() || bytes % sizeof(double) != 0) {
        fail(ErrorCode::SchemaViolation, "params.bin is too short for " + params.name(i));
      }
      std::copy_n(blob.begin() + static_cast<std::ptrdiff_t>(offset), v.size(), v.data().begin());
      seen[i] = true;
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::SchemaViolation, std::string("manifest.json: ") + e.what());
  }
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) fail(ErrorCode::SchemaViolation, "manifest.json lacks parameter " + params.name(i));
  }
  return policy;
}

}  // namespace kstar
