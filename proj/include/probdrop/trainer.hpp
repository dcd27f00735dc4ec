#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "probdrop/dropout.hpp"
#include "probdrop/rng.hpp"
#include "probdrop/tensor.hpp"

namespace probdrop::toy {

inline constexpr std::size_t kImageSize = 16;
inline constexpr std::size_t kFilters = 8;
inline constexpr std::size_t kClasses = 2;

/// Class 0: noisy horizontal stripes. Class 1: noisy vertical stripes.
struct SyntheticDataset {
  FeatureMap train_images;
  std::vector<int> train_labels;
  FeatureMap val_images;
  std::vector<int> val_labels;
};

SyntheticDataset make_dataset(std::uint64_t seed, std::size_t n_train = 256, std::size_t n_val = 2048);

/// conv3x3(1->8) + relu -> drop site -> conv3x3(8->8) + relu -> global mean pool -> linear(8->2).
/// Convolutions use zero padding so every feature map stays 16x16.
struct TinyNet {
  std::vector<double> conv1_w;  // [8][1][3][3]
  std::vector<double> conv1_b;  // [8]
  std::vector<double> conv2_w;  // [8][8][3][3]
  std::vector<double> conv2_b;  // [8]
  std::vector<double> fc_w;     // [2][8]
  std::vector<double> fc_b;     // [2]

  /// He-style initialization, deterministic in `seed`.
  static TinyNet init(std::uint64_t seed);
  /// All zeros, shaped like the parameters (gradient accumulator).
  static TinyNet zeros();

  std::vector<std::span<double>> tensors();
  std::vector<std::span<const double>> tensors() const;
  std::size_t parameter_count() const;
};

/// Mask and per-slice scale applied at the drop site.
struct DropSite {
  DropMask mask;
  std::vector<double> scales;
};

struct ForwardCache {
  FeatureMap input;
  FeatureMap conv1_out;   // pre-activation
  FeatureMap dropped;     // relu(conv1_out) * mask * scale
  std::optional<DropSite> site;
  FeatureMap conv2_out;   // pre-activation
  std::vector<double> pooled;  // [batch][8]
  std::vector<double> logits;  // [batch][2]
};

/// Forward pass with an explicit drop site (nullopt = no dropout).
ForwardCache forward_fixed(const TinyNet& net, const FeatureMap& images, std::optional<DropSite> site);

/// Forward pass that samples the drop site from `spec` with alpha taken from
/// `sched`. A missing spec or Inference mode leaves the site empty.
ForwardCache forward(const TinyNet& net, const FeatureMap& images, const std::optional<DropSpec>& spec,
                     const ScheduleState& sched, const RngStream& rng);

/// Mean softmax cross-entropy of cached logits.
double loss(const ForwardCache& cache, std::span<const int> labels);

/// Gradients of loss() with respect to every parameter, replaying the cached drop site.
TinyNet backward(const TinyNet& net, const ForwardCache& cache, std::span<const int> labels);

/// Fraction of images classified correctly with no dropout applied.
double accuracy(const TinyNet& net, const FeatureMap& images, std::span<const int> labels);

/// Gathers the given batch items, in order.
FeatureMap take_rows(const FeatureMap& images, std::span<const std::size_t> rows);

struct TrainConfig {
  /// nullopt trains without any drop site.
  std::optional<DropSpec> spec;
  /// Ramp alpha from 0 to spec.alpha over all optimizer steps; otherwise constant.
  bool linear_schedule = true;
  std::size_t epochs = 60;
  std::size_t batch_size = 16;
  double learning_rate = 0.05;
  std::uint64_t seed = 1;
  std::size_t n_train = 256;
  std::size_t n_val = 2048;
};

void validate(const TrainConfig& config);

struct EpochMetrics {
  std::size_t epoch = 0;
  /// Mean training loss over the epoch's optimizer steps (dropout active).
  double train_loss = 0.0;
  /// Accuracy on the training split, evaluated without dropout.
  double train_acc = 0.0;
  double val_acc = 0.0;
};

struct Metrics {
  std::vector<EpochMetrics> epochs;
  double final_gap() const;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Plain SGD on softmax cross-entropy. Trains on make_dataset(config.seed, ...).
Metrics train(const TrainConfig& config);
/// Same as train(), returning the final weights as well.
Metrics train(const TrainConfig& config, TinyNet& trained);

std::string metrics_csv(const Metrics& m);
void write_metrics_csv(const Metrics& m, const std::filesystem::path& path);

}  // namespace probdrop::toy
