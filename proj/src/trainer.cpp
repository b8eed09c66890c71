#include "selat/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "selat/checkpoint.hpp"
#include "selat/errors.hpp"
#include "selat/evaluation.hpp"
#include "selat/log.hpp"

namespace selat::train {

namespace {

std::string format_real(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::Clean: return "clean";
    case Method::FullPgd: return "full_pgd";
    case Method::RandomSubset: return "random_subset";
    case Method::Margin: return "margin";
    case Method::GradMatch: return "grad_match";
  }
  return "?";
}

Method parse_method(const std::string& text) {
  for (auto m : {Method::Clean, Method::FullPgd, Method::RandomSubset, Method::Margin, Method::GradMatch}) {
    if (to_string(m) == text) return m;
  }
  throw ConfigError("unknown method '" + text + "' (expected clean, full_pgd, random_subset, margin, grad_match)");
}

select::Strategy strategy_for(Method m) {
  switch (m) {
    case Method::Clean: return select::Strategy::None;
    case Method::FullPgd: return select::Strategy::Full;
    case Method::RandomSubset: return select::Strategy::Random;
    case Method::Margin: return select::Strategy::Margin;
    case Method::GradMatch: return select::Strategy::GradMatch;
  }
  return select::Strategy::None;
}

void TrainConfig::validate() const {
  attack.validate();
  eval.attack.validate();
  effective_selection().validate();
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (method == Method::Clean && lambda == 0.0) {
    throw ConfigError("method=clean with lambda=0 has no learning signal (no adversarial rows and no clean term)");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (eval.every < 0) throw ConfigError("eval.every must be >= 0");
  if (eval.batch_size < 1) throw ConfigError("eval.batch_size must be >= 1");
}

select::SelectionConfig TrainConfig::effective_selection() const {
  auto s = selection;
  s.strategy = strategy_for(method);
  return s;
}

double TrainConfig::lr_at(int epoch) const {
  if (schedule == LrSchedule::Constant) return lr;
  double rate = lr;
  if (epoch >= epochs / 2) rate *= 0.1;
  if (epoch >= (3 * epochs) / 4) rate *= 0.1;
  return rate;
}

std::string TrainRecord::to_csv() const {
  std::ostringstream os;
  os << "epoch,clean_loss,adv_loss,clean_acc,robust_acc,attack_passes_cum,seconds\n";
  for (const auto& e : epochs) {
    os << e.epoch << ',' << format_real(e.clean_loss) << ',' << format_real(e.adv_loss) << ','
       << format_real(e.clean_acc) << ',' << (e.robust_acc ? format_real(*e.robust_acc) : std::string()) << ','
       << e.attack_passes_cum << ',' << format_real(e.seconds) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------- optimizer

template <typename T>
void sgd_momentum_step(std::span<T> param, std::span<const T> grad, std::span<T> velocity, double lr,
                       double momentum, double weight_decay) {
  if (param.size() != velocity.size() || (!grad.empty() && grad.size() != param.size())) {
    throw DimensionError("sgd_momentum_step: parameter, gradient and velocity sizes differ");
  }
  const T m = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad.empty() ? T(0) : grad[i];
    velocity[i] = m * velocity[i] + (g + wd * param[i]);
    param[i] -= rate * velocity[i];
  }
}

template void sgd_momentum_step<float>(std::span<float>, std::span<const float>, std::span<float>, double, double,
                                       double);
template void sgd_momentum_step<double>(std::span<double>, std::span<const double>, std::span<double>, double,
                                        double, double);

SgdMomentum::SgdMomentum(const nn::Model<float>& model) {
  for (const auto& p : model.params()) velocity_.emplace_back(p.value.numel(), 0.0f);
}

void SgdMomentum::step(nn::Model<float>& model, double lr, double momentum, double weight_decay) {
  auto& params = model.params();
  if (params.size() != velocity_.size()) throw DimensionError("SgdMomentum: model has a different parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].value.numel() != velocity_[i].size()) {
      throw DimensionError("SgdMomentum: velocity shape differs for '" + params[i].name + "'");
    }
    sgd_momentum_step<float>(params[i].value.mutable_data(), params[i].value.grad(), velocity_[i], lr, momentum,
                             weight_decay);
  }
}

// ---------------------------------------------------------------- loss

template <typename T>
MixedLoss<T> combine_losses(const ad::Tensor<T>& clean_logits, std::span<const int> labels,
                            const ad::Tensor<T>& adv_logits, std::span<const int> adv_labels, double lambda) {
  MixedLoss<T> out;
  const auto clean = ad::cross_entropy(clean_logits, labels);
  out.clean = clean.item();
  out.clean_count = clean_logits.dim(0);
  auto total = ad::scale(clean, static_cast<T>(lambda));
  if (adv_logits.defined() && !adv_labels.empty()) {
    const auto adv = ad::cross_entropy(adv_logits, adv_labels);
    out.adv = adv.item();
    out.adv_count = adv_logits.dim(0);
    total = ad::add(adv, total);
  }
  out.total = total;
  return out;
}

template <typename T>
MixedLoss<T> mixed_loss(const nn::Model<T>& model, const ad::Tensor<T>& batch, std::span<const int> labels,
                        std::span<const std::size_t> subset, const ad::Tensor<T>& x_adv_rows, double lambda) {
  const auto clean_logits = model.forward(batch);
  if (subset.empty()) return combine_losses<T>(clean_logits, labels, ad::Tensor<T>(), {}, lambda);
  if (!x_adv_rows.defined() || x_adv_rows.dim(0) != subset.size()) {
    throw ContractError("mixed_loss: need exactly one adversarial row per subset index");
  }
  std::vector<int> adv_labels;
  for (auto i : subset) adv_labels.push_back(labels[i]);
  return combine_losses<T>(clean_logits, labels, model.forward(x_adv_rows), adv_labels, lambda);
}

template MixedLoss<float> combine_losses<float>(const ad::Tensor<float>&, std::span<const int>,
                                                const ad::Tensor<float>&, std::span<const int>, double);
template MixedLoss<double> combine_losses<double>(const ad::Tensor<double>&, std::span<const int>,
                                                  const ad::Tensor<double>&, std::span<const int>, double);
template MixedLoss<float> mixed_loss<float>(const nn::Model<float>&, const ad::Tensor<float>&, std::span<const int>,
                                            std::span<const std::size_t>, const ad::Tensor<float>&, double);
template MixedLoss<double> mixed_loss<double>(const nn::Model<double>&, const ad::Tensor<double>&,
                                              std::span<const int>, std::span<const std::size_t>,
                                              const ad::Tensor<double>&, double);

// ---------------------------------------------------------------- loop

EpochStats train_epoch(nn::Model<float>& model, SgdMomentum& optimizer, const data::Dataset& dataset,
                       const TrainConfig& cfg, int epoch, Rng& rng, attack::AttackCounter& counter,
                       const SelectionSink& on_selection) {
  const auto selection = cfg.effective_selection();
  const bool wants_logits = selection.strategy == select::Strategy::Margin && epoch >= selection.warmup_epochs;
  const bool wants_grads = selection.strategy == select::Strategy::GradMatch && epoch >= selection.warmup_epochs;
  const double lr = cfg.lr_at(epoch);

  EpochStats stats;
  double clean_sum = 0, adv_sum = 0;
  data::BatchIterator it(dataset, cfg.batch_size, true, cfg.seed, static_cast<std::uint64_t>(epoch));
  while (auto batch = it.next()) {
    if (cfg.augment && batch->inputs.rank() == 4) data::augment_crop_flip(*batch, rng);
    const std::size_t rows = batch->labels.size();

    // (1) clean forward, reused for the clean loss term.
    const auto clean_logits = model.forward(batch->inputs);

    // (2)-(3) selection.
    select::BatchState state;
    state.batch_size = rows;
    state.classes = model.classes();
    state.labels = batch->labels;
    if (wants_logits) {
      state.logits = std::vector<double>(clean_logits.data().begin(), clean_logits.data().end());
    }
    if (wants_grads) {
      const auto grads = select::per_sample_gradients(model, batch->inputs, batch->labels, selection.grad_scope);
      std::vector<std::vector<double>> as_double;
      as_double.reserve(grads.size());
      for (const auto& g : grads) as_double.emplace_back(g.begin(), g.end());
      state.gradients = std::move(as_double);
    }
    auto decision = select::select(selection, state, epoch, rng);
    if (on_selection) on_selection(stats.batches, decision);

    std::vector<std::size_t> subset = decision.chosen;
    std::sort(subset.begin(), subset.end());
    subset.erase(std::unique(subset.begin(), subset.end()), subset.end());

    // (4) partial PGD; the adversarial rows enter the loss as constants.
    ad::Tensor<float> adv_logits;
    std::vector<int> adv_labels;
    if (!subset.empty()) {
      const auto attacked =
          attack::attack_subset(model, batch->inputs, batch->labels, subset, cfg.attack, rng, counter, cfg.workers);
      for (auto i : subset) adv_labels.push_back(batch->labels[i]);
      adv_logits = model.forward(attack::take_rows(attacked, subset));
    }

    // (5)-(6) mixed loss, backward, update.
    const auto loss = combine_losses<float>(clean_logits, batch->labels, adv_logits, adv_labels, cfg.lambda);
    if (loss.clean_count != rows) throw ContractError("train_epoch: clean term must cover the whole batch");
    model.zero_grad();
    loss.total.backward();
    optimizer.step(model, lr, cfg.momentum, cfg.weight_decay);

    clean_sum += loss.clean * static_cast<double>(rows);
    adv_sum += loss.adv * static_cast<double>(loss.adv_count);
    stats.samples += rows;
    stats.attacked += loss.adv_count;
    ++stats.batches;
  }
  stats.clean_loss = stats.samples ? clean_sum / static_cast<double>(stats.samples) : 0.0;
  stats.adv_loss = stats.attacked ? adv_sum / static_cast<double>(stats.attacked) : 0.0;
  return stats;
}

TrainResult train(const TrainConfig& cfg, const nn::ModelSpec& spec, const data::Dataset& train_set,
                  const data::Dataset& test_set, const SelectionSink& on_selection) {
  cfg.validate();
  if (train_set.size() == 0) throw ContractError("train: empty training set");
  if (spec.classes != train_set.meta.classes) {
    throw ConfigError("train: model has " + std::to_string(spec.classes) + " classes, dataset has " +
                      std::to_string(train_set.meta.classes));
  }
  TrainResult result{nn::build_model<float>(spec, cfg.seed), {}, 0.0, 0};
  SgdMomentum optimizer(result.model);
  attack::AttackCounter counter;
  Rng rng = Rng(cfg.seed).split(1);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const auto stats = train_epoch(result.model, optimizer, train_set, cfg, epoch, rng, counter, on_selection);
    EpochMetrics m;
    m.epoch = epoch;
    m.seconds = seconds_since(start);
    m.clean_loss = stats.clean_loss;
    m.adv_loss = stats.adv_loss;
    m.attack_passes_cum = counter.passes;
    m.clean_acc = eval::clean_accuracy(result.model, test_set, cfg.eval.batch_size);
    if (cfg.eval.every > 0 && (epoch + 1) % cfg.eval.every == 0) {
      m.robust_acc = eval::robust_accuracy(result.model, test_set, cfg.eval.attack, cfg.eval.batch_size,
                                           cfg.eval.seed, cfg.workers);
    }
    result.train_seconds += m.seconds;
    log_info("epoch " + std::to_string(epoch) + " clean_loss=" + format_real(m.clean_loss) +
             " adv_loss=" + format_real(m.adv_loss) + " clean_acc=" + format_real(m.clean_acc) +
             " passes=" + std::to_string(m.attack_passes_cum));
    result.record.epochs.push_back(m);
  }
  result.attack_passes = counter.passes;
  return result;
}

void write_artifacts(const std::filesystem::path& dir, TrainResult& result) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
  const auto ckpt = dir / "checkpoint.bin";
  io::save_checkpoint(ckpt, result.model);
  result.record.checkpoint_path = ckpt.string();
  std::ofstream csv(dir / "train_record.csv", std::ios::trunc);
  if (!csv) throw IoError("cannot write '" + (dir / "train_record.csv").string() + "'");
  csv << result.record.to_csv();
}

}  // namespace selat::train
