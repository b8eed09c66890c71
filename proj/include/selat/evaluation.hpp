#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "selat/attacks.hpp"
#include "selat/data_io.hpp"
#include "selat/models.hpp"

namespace selat::eval {

/// Rows whose lowest-index argmax equals the label.
template <typename T>
std::size_t count_correct(std::span<const T> logits, std::size_t classes, std::span<const int> labels);

/// Percent of argmax-correct predictions. Batches are taken in dataset order.
double clean_accuracy(const nn::Model<float>& model, const data::Dataset& dataset, std::size_t batch_size = 256);

/// Percent correct on PGD inputs. The attack's random start draws from a
/// single stream seeded with `seed`, consumed batch by batch in dataset order.
double robust_accuracy(const nn::Model<float>& model, const data::Dataset& dataset, const attack::AttackConfig& cfg,
                       std::size_t batch_size = 256, std::uint64_t seed = 0, unsigned workers = 1);

/// "PGD-K"
std::string attack_label(const attack::AttackConfig& cfg);

struct EvalReport {
  std::string method;
  double clean_acc = 0;
  std::map<std::string, double> robust_acc;  // attack label -> percent
  std::uint64_t attack_passes_train = 0;
  double train_seconds = 0;

  bool operator==(const EvalReport&) const = default;
};

/// Header: method,clean_acc,<one column per attack label>,attack_passes_train,train_seconds.
/// Rows sorted by method; reals in shortest round-trip form.
std::string reports_to_csv(std::vector<EvalReport> reports);
std::vector<EvalReport> reports_from_csv(const std::string& csv);

struct ReportTable {
  std::string text;
  std::string csv;
};

ReportTable compare_report(std::vector<EvalReport> reports);

}  // namespace selat::eval
