#include "selat/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <iomanip>
#include <set>
#include <sstream>

#include "selat/errors.hpp"

namespace selat::eval {

namespace {

std::string format_real(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

double parse_real(const std::string& text, std::size_t line) {
  double v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw FormatError("report CSV line " + std::to_string(line) + ": bad number '" + text + "'");
  }
  return v;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

template <typename T>
std::size_t count_correct(std::span<const T> logits, std::size_t classes, std::span<const int> labels) {
  if (logits.size() != classes * labels.size()) throw DimensionError("count_correct: logits do not match B×C");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const T* row = logits.data() + i * classes;
    const auto best = static_cast<int>(std::max_element(row, row + classes) - row);
    if (best == labels[i]) ++correct;
  }
  return correct;
}

template std::size_t count_correct<float>(std::span<const float>, std::size_t, std::span<const int>);
template std::size_t count_correct<double>(std::span<const double>, std::size_t, std::span<const int>);

double clean_accuracy(const nn::Model<float>& model, const data::Dataset& dataset, std::size_t batch_size) {
  if (dataset.size() == 0) throw ContractError("clean_accuracy: empty dataset");
  data::BatchIterator it(dataset, batch_size, false, 0, 0);
  std::size_t correct = 0;
  while (auto batch = it.next()) {
    const auto logits = model.forward_frozen(batch->inputs);
    correct += count_correct<float>(logits.data(), model.classes(), batch->labels);
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(dataset.size());
}

double robust_accuracy(const nn::Model<float>& model, const data::Dataset& dataset, const attack::AttackConfig& cfg,
                       std::size_t batch_size, std::uint64_t seed, unsigned workers) {
  if (dataset.size() == 0) throw ContractError("robust_accuracy: empty dataset");
  cfg.validate();
  data::BatchIterator it(dataset, batch_size, false, 0, 0);
  Rng rng(seed);
  attack::AttackCounter unused;
  std::size_t correct = 0;
  while (auto batch = it.next()) {
    std::vector<std::size_t> all(batch->labels.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const auto adv = attack::attack_subset(model, batch->inputs, batch->labels, all, cfg, rng, unused, workers);
    const auto logits = model.forward_frozen(adv);
    correct += count_correct<float>(logits.data(), model.classes(), batch->labels);
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(dataset.size());
}

std::string attack_label(const attack::AttackConfig& cfg) { return "PGD-" + std::to_string(cfg.steps); }

std::string reports_to_csv(std::vector<EvalReport> reports) {
  std::sort(reports.begin(), reports.end(), [](const auto& a, const auto& b) { return a.method < b.method; });
  std::set<std::string> labels;
  for (const auto& r : reports) {
    for (const auto& [label, _] : r.robust_acc) labels.insert(label);
  }
  std::ostringstream os;
  os << "method,clean_acc";
  for (const auto& l : labels) os << ',' << l;
  os << ",attack_passes_train,train_seconds\n";
  for (const auto& r : reports) {
    if (r.method.find(',') != std::string::npos) throw ContractError("report method names cannot contain commas");
    os << r.method << ',' << format_real(r.clean_acc);
    for (const auto& l : labels) {
      os << ',';
      if (auto it = r.robust_acc.find(l); it != r.robust_acc.end()) os << format_real(it->second);
    }
    os << ',' << r.attack_passes_train << ',' << format_real(r.train_seconds) << '\n';
  }
  return os.str();
}

std::vector<EvalReport> reports_from_csv(const std::string& csv) {
  std::istringstream is(csv);
  std::string line;
  if (!std::getline(is, line)) throw FormatError("report CSV: missing header");
  const auto header = split_csv_line(line);
  if (header.size() < 4 || header[0] != "method" || header[1] != "clean_acc" ||
      header[header.size() - 2] != "attack_passes_train" || header.back() != "train_seconds") {
    throw FormatError("report CSV: unexpected header '" + line + "'");
  }
  std::vector<EvalReport> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw FormatError("report CSV line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                        " cells, got " + std::to_string(cells.size()));
    }
    EvalReport r;
    r.method = cells[0];
    r.clean_acc = parse_real(cells[1], lineno);
    for (std::size_t c = 2; c + 2 < cells.size(); ++c) {
      if (!cells[c].empty()) r.robust_acc[header[c]] = parse_real(cells[c], lineno);
    }
    const auto& passes = cells[cells.size() - 2];
    auto [ptr, ec] = std::from_chars(passes.data(), passes.data() + passes.size(), r.attack_passes_train);
    if (ec != std::errc() || ptr != passes.data() + passes.size()) {
      throw FormatError("report CSV line " + std::to_string(lineno) + ": bad pass count '" + passes + "'");
    }
    r.train_seconds = parse_real(cells.back(), lineno);
    out.push_back(std::move(r));
  }
  return out;
}

ReportTable compare_report(std::vector<EvalReport> reports) {
  std::sort(reports.begin(), reports.end(), [](const auto& a, const auto& b) { return a.method < b.method; });
  std::set<std::string> labels;
  for (const auto& r : reports) {
    for (const auto& [label, _] : r.robust_acc) labels.insert(label);
  }
  std::size_t name_width = 6;
  for (const auto& r : reports) name_width = std::max(name_width, r.method.size());

  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(name_width)) << "Method" << std::right << "  " << std::setw(10)
     << "Clean Acc.";
  for (const auto& l : labels) os << "  " << std::setw(12) << (l + " Acc.");
  os << "  " << std::setw(14) << "Attack passes" << "  " << std::setw(10) << "Train s" << '\n';
  os << std::fixed;
  for (const auto& r : reports) {
    os << std::left << std::setw(static_cast<int>(name_width)) << r.method << std::right << "  " << std::setw(10)
       << std::setprecision(2) << r.clean_acc;
    for (const auto& l : labels) {
      os << "  " << std::setw(12);
      if (auto it = r.robust_acc.find(l); it != r.robust_acc.end()) {
        os << std::setprecision(2) << it->second;
      } else {
        os << "-";
      }
    }
    os << "  " << std::setw(14) << r.attack_passes_train << "  " << std::setw(10) << std::setprecision(1)
       << r.train_seconds << '\n';
  }
  return {os.str(), reports_to_csv(std::move(reports))};
}

}  // namespace selat::eval
