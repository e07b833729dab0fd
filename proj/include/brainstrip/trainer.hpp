#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "brainstrip/densevnet.hpp"
#include "brainstrip/volume.hpp"

namespace brainstrip {

enum class InputMode { T1Gd, Flair, Both };

const char* input_mode_name(InputMode mode);
InputMode parse_input_mode(const std::string& name);

struct TrainConfig {
    std::size_t max_iter = 500;
    std::size_t save_every_n = 20;
    std::size_t batch_size = 6;
    double learning_rate = 0.001;
    std::size_t samples_per_volume = 1;
    InputMode input_mode = InputMode::Both;
    std::uint64_t seed = 0;
    DenseVnetConfig network{};

    void validate() const;  // throws ValueError
};

/// Flat key=value config file (max_iter, save_every_n, batch_size,
/// spatial_window_size, num_classes, lr, seed, input_mode, growth,
/// units_per_stack, samples_per_volume). '#' starts a comment. Unknown keys
/// are rejected. in_channels follows input_mode.
TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::string& path);
std::string serialize_train_config(const TrainConfig& cfg);

struct TrainingCase {
    std::string case_id;
    std::optional<Volume3D> t1gd;
    std::optional<Volume3D> flair;
    /// Training target for train/validation cases; ground truth for eval sets.
    std::optional<Volume3D> label;
};

struct Checkpoint {
    std::size_t iteration = 0;
    DenseVnetConfig config;
    InputMode input_mode = InputMode::Both;
    std::vector<autodiff::NamedTensor> parameters;
    std::vector<autodiff::NamedTensor> adam_m;
    std::vector<autodiff::NamedTensor> adam_v;
    std::size_t adam_step = 0;
};

/// Atomic write (temp file + rename). The .ckpt layout is the autodiff
/// tensor container followed by a length-prefixed text config record.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Fresh network carrying the checkpoint's parameter values.
Network network_from_checkpoint(const Checkpoint& ckpt);

struct CohortSplit {
    std::vector<std::string> train;
    std::vector<std::string> validation;
    std::vector<std::string> test;
};

/// Deterministic seeded shuffle; validation/test sizes are the rounded
/// fractions, the remainder goes to train. Fractions must sum to 1.
CohortSplit split_dataset(const std::vector<std::string>& cohort,
                          double train_fraction, double validation_fraction,
                          double test_fraction, std::uint64_t seed);

struct TrainResult {
    Network network;
    std::vector<Checkpoint> checkpoints;
    std::vector<double> loss_trace;  // dice loss per optimizer step
};

/// Runs cfg.max_iter Adam steps of dice-loss training. Each step draws
/// batch_size cases in a deterministic seeded order (with replacement when
/// the dataset is smaller than the batch), whitens and resamples each
/// channel to the network window, and applies one update. Checkpoints are
/// recorded every save_every_n steps plus a final one when max_iter is not
/// a multiple. No data augmentation. Throws TrainingError (with the step
/// index) on a non-finite loss; ValueError on a case missing a required
/// channel or label.
TrainResult train(const std::vector<TrainingCase>& dataset, Network net,
                  const TrainConfig& cfg);

/// Mean validation dice loss per checkpoint (computed at the network
/// window); returns the argmin index, ties resolving to the earliest.
std::size_t select_checkpoint(const std::vector<Checkpoint>& checkpoints,
                              const std::vector<TrainingCase>& validation,
                              const TrainConfig& cfg);

struct EfficiencyRow {
    std::size_t train_size = 0;
    double mean_dice = 0.0;
    double std_dice = 0.0;
};

/// Data-efficiency sweep: for each size (strictly descending) train a fresh
/// seed-identical network on a nested deterministic subsample, select the
/// best checkpoint on `validation`, and report mean/std dice of whole-volume
/// predictions against the labels of `eval_set`.
std::vector<EfficiencyRow> run_data_efficiency(
    const std::vector<TrainingCase>& dataset,
    const std::vector<TrainingCase>& validation,
    const std::vector<std::size_t>& sizes, const TrainConfig& cfg,
    const std::vector<TrainingCase>& eval_set);

}  // namespace brainstrip
