#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "selat/attacks.hpp"
#include "selat/data_io.hpp"
#include "selat/models.hpp"
#include "selat/rng.hpp"
#include "selat/selection.hpp"

namespace selat::train {

enum class Method { Clean, FullPgd, RandomSubset, Margin, GradMatch };

std::string to_string(Method m);
Method parse_method(const std::string& text);
select::Strategy strategy_for(Method m);

enum class LrSchedule { Constant, Step };

struct EvalSchedule {
  attack::AttackConfig attack{8.0 / 255.0, 2.0 / 255.0, 40, true, 0.0, 1.0};
  int every = 0;  // robust evaluation every N epochs; 0 = never during training
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
};

struct TrainConfig {
  Method method = Method::Margin;
  attack::AttackConfig attack;
  select::SelectionConfig selection;  // strategy is derived from `method`
  double lambda = 1.0;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int epochs = 10;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  LrSchedule schedule = LrSchedule::Constant;
  unsigned workers = 1;
  bool augment = false;
  EvalSchedule eval;

  void validate() const;
  select::SelectionConfig effective_selection() const;
  double lr_at(int epoch) const;
};

struct EpochMetrics {
  int epoch = 0;
  double clean_loss = 0;
  double adv_loss = 0;
  double clean_acc = 0;
  std::optional<double> robust_acc;
  std::uint64_t attack_passes_cum = 0;
  double seconds = 0;
};

struct TrainRecord {
  std::vector<EpochMetrics> epochs;
  std::string checkpoint_path;

  /// Columns: epoch,clean_loss,adv_loss,clean_acc,robust_acc,attack_passes_cum,seconds.
  std::string to_csv() const;
};

/// Per-parameter velocity buffers.
class SgdMomentum {
 public:
  explicit SgdMomentum(const nn::Model<float>& model);

  /// v ← momentum·v + (grad + weight_decay·param); param ← param − lr·v.
  void step(nn::Model<float>& model, double lr, double momentum, double weight_decay);

  const std::vector<std::vector<float>>& velocity() const { return velocity_; }

 private:
  std::vector<std::vector<float>> velocity_;
};

template <typename T>
void sgd_momentum_step(std::span<T> param, std::span<const T> grad, std::span<T> velocity, double lr,
                       double momentum, double weight_decay);

template <typename T>
struct MixedLoss {
  ad::Tensor<T> total;
  double clean = 0;
  double adv = 0;
  std::size_t clean_count = 0;
  std::size_t adv_count = 0;
};

/// L = mean_{S} CE(adv) + λ·mean_{all} CE(clean). `adv_logits` may be
/// undefined when S is empty, in which case the adversarial term is 0.
template <typename T>
MixedLoss<T> combine_losses(const ad::Tensor<T>& clean_logits, std::span<const int> labels,
                            const ad::Tensor<T>& adv_logits, std::span<const int> adv_labels, double lambda);

/// Runs both forwards. `x_adv_rows` holds one row per entry of `subset`, in order.
template <typename T>
MixedLoss<T> mixed_loss(const nn::Model<T>& model, const ad::Tensor<T>& batch, std::span<const int> labels,
                        std::span<const std::size_t> subset, const ad::Tensor<T>& x_adv_rows, double lambda);

struct EpochStats {
  double clean_loss = 0;
  double adv_loss = 0;
  std::size_t batches = 0;
  std::size_t samples = 0;
  std::size_t attacked = 0;
};

using SelectionSink = std::function<void(std::size_t batch_index, const select::SelectionDecision&)>;

EpochStats train_epoch(nn::Model<float>& model, SgdMomentum& optimizer, const data::Dataset& dataset,
                       const TrainConfig& cfg, int epoch, Rng& rng, attack::AttackCounter& counter,
                       const SelectionSink& on_selection = {});

struct TrainResult {
  nn::Model<float> model;
  TrainRecord record;
  double train_seconds = 0;
  std::uint64_t attack_passes = 0;
};

/// Builds the model from `spec` (seeded with cfg.seed), trains for
/// cfg.epochs and evaluates on `test` after every epoch.
TrainResult train(const TrainConfig& cfg, const nn::ModelSpec& spec, const data::Dataset& train_set,
                  const data::Dataset& test_set, const SelectionSink& on_selection = {});

/// Writes checkpoint.bin and train_record.csv into `dir` and records the
/// checkpoint path in the result.
void write_artifacts(const std::filesystem::path& dir, TrainResult& result);

}  // namespace selat::train
