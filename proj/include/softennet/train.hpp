#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include <torch/torch.h>

#include "softennet/camera.hpp"
#include "softennet/data.hpp"
#include "softennet/losses.hpp"
#include "softennet/model.hpp"

namespace softennet::train {

enum class WeightingMode { learned, fixed };

struct TrainConfig {
  double learning_rate = 1e-4;
  int lr_decay_epoch = 30;     // rate is multiplied by lr_decay_factor from this epoch on
  double lr_decay_factor = 0.5;
  int epochs = 40;
  int batch_size = 4;
  losses::LossWeights weights;
  WeightingMode weighting = WeightingMode::learned;
  double fixed_depth_weight = 1.0;
  double fixed_lumen_weight = 1.0;
  uint64_t seed = 0;
  int stride = 1;
  double flip_probability = 0.5;
  double alpha_initial = 1e-4;
  int alpha_period = 5;        // epochs per PAC-alpha doubling
  double grad_clip = 10.0;     // global norm; <= 0 disables
  bool double_precision = false;
  int keep_checkpoints = 3;    // per-epoch archives retained besides last.pt; 0 keeps all
  model::SoftEnNetConfig model;

  void validate() const;

  /// "full": batch 20, standard encoder, 40 epochs.
  /// "desk": batch 4, small encoder, 40 epochs.
  /// "overfit": the short single-sequence schedule used by the acceptance run.
  static TrainConfig preset(const std::string& name);

  // Flat key-value text. Model keys carry a "model." prefix.
  std::string to_text() const;
  static TrainConfig from_text(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);
};

std::string to_string(WeightingMode mode);

/// Everything that changes during training. Resuming from a saved state
/// reproduces the uninterrupted run exactly.
struct TrainState {
  TrainConfig config;
  model::SoftEnNet model{nullptr};
  losses::TaskUncertainty uncertainty{nullptr};
  std::unique_ptr<torch::optim::Adam> optimizer;
  std::optional<camera::CameraModel> camera;  // camera of the training data, once known
  int epoch = 0;      // next epoch to run
  int64_t step = 0;   // optimizer steps taken
  double epoch_loss_sum = 0.0;
  int64_t epoch_loss_count = 0;

  static TrainState create(const TrainConfig& config);

  torch::Dtype dtype() const;
  double learning_rate() const;  // for the current epoch
  double alpha() const;          // PAC-alpha for the current epoch
  double inference_alpha() const;  // PAC-alpha of the last completed epoch
};

double scheduled_learning_rate(const TrainConfig& config, int epoch);

/// Loss of one batch of pairs without touching any parameter. Pixels of the
/// batch must be in the state's dtype.
struct LossResult {
  torch::Tensor total;
  losses::LossBundle bundle;
};

LossResult compute_losses(TrainState& state, const data::PairBatch& batch, const camera::CameraModel& cam,
                          double alpha);

/// One optimizer update. Throws NonFiniteLoss (after writing the bundle to
/// `dump_path` when given) if any loss is not finite; parameters are then
/// left unchanged.
losses::LossBundle train_step(TrainState& state, const data::PairBatch& batch, const camera::CameraModel& cam,
                              const std::filesystem::path& dump_path = {});

struct NonFiniteLoss : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Converts a batch to the training dtype.
data::PairBatch to_dtype(const data::PairBatch& batch, torch::Dtype dtype);

// Checkpoint archive: torch serialize archive with sub-archives "model",
// "uncertainty", "optimizer" and scalar entries "train_config" (text),
// "model_config" (text), "camera" (text, empty when unknown), "epoch", "step".
void save_checkpoint(const std::filesystem::path& path, TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& path);

struct FitOptions {
  bool resume = true;          // continue from out_dir/last.pt when present
  int stop_after_epochs = 0;   // stop once this many epochs ran in this call (0 = run to the end)
};

/// Trains on adjacent pairs of `sequence`, writing out_dir/log.jsonl (one
/// record per step), out_dir/checkpoints/epoch_NNNN.pt and out_dir/last.pt.
TrainState fit(const data::Sequence& sequence, const TrainConfig& config, const std::filesystem::path& out_dir,
               const FitOptions& options = {});

/// One JSON log record for a step.
std::string log_record(const TrainState& state, const losses::LossBundle& bundle, double lr, double alpha);

}  // namespace softennet::train
