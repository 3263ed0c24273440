#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "hamobe/checkpoint.hpp"
#include "hamobe/feature_store.hpp"
#include "hamobe/grad_check.hpp"
#include "hamobe/losses.hpp"
#include "hamobe/model.hpp"

namespace hamobe {

enum class Mode { Single, Dual };

std::string_view to_string(Mode mode) noexcept;

// Train-split subjects in ascending id order; a subject's label is its position.
struct TrainIndex {
  std::vector<int> subjects;
  std::vector<std::vector<std::size_t>> tracklets;  // dataset volume indices per label

  static TrainIndex build(const Dataset& dataset);
};

struct BatchItem {
  std::size_t first = 0;   // dataset volume index
  std::size_t second = 0;  // dataset volume index, distinct from first
  int subject = 0;
  std::size_t label = 0;
};

// P identities, two distinct tracklets each.
struct Batch {
  std::vector<BatchItem> items;
};

// Uniform in [0, n) without modulo bias.
std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n);

// Draws P identities without replacement and two distinct tracklets for each.
// ErrorKind::Sampling when fewer than P identities have two tracklets.
Batch sample_batch(const TrainIndex& index, std::size_t P, std::mt19937_64& rng);

// Loss graph of one batch. Pairs are the P positives (first_i, second_i) and,
// for P >= 2, the P negatives (first_i, second_{i+1 mod P}).
//   single: every tracklet is embedded on its own; CE over the 2P embeddings
//   dual:   every pair is embedded with pair-conditioned gates; CE over all
//           pair outputs
// Consistency terms average over positive pairs; contrastive over all pairs.
struct Objective {
  LossTerms terms;
  Var total;
};

Objective batch_objective(const BoundModel& m, const Dataset& dataset, const Batch& batch, Mode mode);

struct LogEntry {
  std::size_t step = 0;
  Mode mode = Mode::Single;
  double loss = 0.0;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainState {
  Model model;
  std::map<std::string, Tensor> adam_m;
  std::map<std::string, Tensor> adam_v;
  std::size_t step = 0;
  std::mt19937_64 rng;
  std::vector<LogEntry> history;
  std::vector<int> identities;  // label -> subject id
};

// Fresh state for a dataset: num_identities follows the train split and
// T, K, d are taken from the volumes, which must all share one shape.
TrainState init_train_state(const ModelConfig& config, const Dataset& dataset);

struct TrainOptions {
  std::size_t steps = 200;          // total steps; resuming continues up to this count
  std::size_t batch_identities = 0; // P; 0 uses every train identity
  bool dual_training = true;
  std::size_t single_per_dual = 1;  // single steps before each dual step
  std::size_t checkpoint_every = 0; // 0 writes only the final checkpoint
  std::filesystem::path out_dir;    // empty: no files are written
  AdamConfig adam;
  std::function<void(const TrainState&)> on_step;
};

Mode mode_for_step(std::size_t step, const TrainOptions& options);

// One sampled batch, forward, backward, and Adam update. Returns the loss.
// ErrorKind::Divergence (with the step index) if the loss or any parameter
// becomes non-finite.
double train_step(TrainState& state, const Dataset& dataset, const Batch& batch, Mode mode,
                  const AdamConfig& adam = {});

// Runs until state.step == options.steps, writing <out_dir>/ckpt.hpk1 every
// checkpoint_every steps and at the end, and <out_dir>/train_log.csv.
void fit(TrainState& state, const Dataset& dataset, const TrainOptions& options);
TrainState fit(const ModelConfig& config, const Dataset& dataset, const TrainOptions& options);

Checkpoint to_checkpoint(const TrainState& state);
TrainState from_checkpoint(const Checkpoint& ckpt);

// CSV with header step,mode,loss; losses printed with %.17g.
void write_train_log(const std::vector<LogEntry>& history, const std::filesystem::path& path);

// Gradient check of the batch objective with respect to every model parameter
// at the model's current values.
GradCheckReport check_objective_gradient(const Model& model, const Dataset& dataset, const Batch& batch, Mode mode,
                                         double eps, double tol);

// Top-1 accuracy of the classifier over the given split.
double classification_accuracy(const Model& model, const Dataset& dataset, const std::vector<int>& identities,
                               Split split);

}  // namespace hamobe
