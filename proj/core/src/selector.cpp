#include "gear/selector.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gear/error.hpp"
#include "text.hpp"

namespace gear {

namespace {

constexpr std::size_t kMaxCapacityUnits = 1'000'000;
constexpr std::size_t kBruteForceLimit = 24;

struct Item {
  std::size_t layer_index;
  std::size_t weight;
  double value;
};

std::vector<Item> items_of(const SensitivityReport& report) {
  std::vector<Item> items;
  for (const auto& l : report.per_layer) {
    if (!(l.value >= 0.0) || !std::isfinite(l.value)) {
      throw InvalidArgument("selection: sensitivity of layer " + std::to_string(l.layer_index) + " is not >= 0");
    }
    items.push_back({l.layer_index, l.param_count, l.value});
  }
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.layer_index < b.layer_index; });
  for (std::size_t i = 1; i < items.size(); ++i) {
    if (items[i].layer_index == items[i - 1].layer_index) {
      throw InvalidArgument("selection: duplicate layer " + std::to_string(items[i].layer_index));
    }
  }
  return items;
}

// Sums that differ only by rounding count as equal.
double tie_slack(double best) { return 1e-12 * std::max(1.0, std::fabs(best)); }

SelectionResult finish(const SensitivityReport& report, std::size_t budget, const std::vector<Item>& items,
                       const std::vector<std::size_t>& picked) {
  SelectionResult r{report.level, {}, 0, 0.0, budget};
  for (std::size_t k : picked) {
    r.selected.push_back(items[k].layer_index);
    r.total_params += items[k].weight;
    r.total_value += items[k].value;
  }
  return r;
}

}  // namespace

std::size_t budget_from_fraction(std::size_t param_count, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidArgument("budget fraction must be in (0, 1]");
  // Exact floor even when fraction * count is not representable.
  auto m = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(param_count)));
  while (m > 0 && static_cast<double>(m) > fraction * static_cast<double>(param_count)) --m;
  return std::min(m, param_count);
}

std::size_t budget_from_fraction(const Model& model, double fraction) {
  return budget_from_fraction(model.param_count(), fraction);
}

SelectionResult select_layers(const SensitivityReport& report, std::size_t budget) {
  const auto items = items_of(report);
  const std::size_t unit = budget <= kMaxCapacityUnits ? 1 : (budget + kMaxCapacityUnits - 1) / kMaxCapacityUnits;
  const std::size_t cap = budget / unit;
  const std::size_t k = items.size();

  // best[i][c]: optimal value using items i.. with capacity c. Row k is zero.
  std::vector<std::vector<double>> best(k + 1, std::vector<double>(cap + 1, 0.0));
  std::vector<std::size_t> w(k);
  for (std::size_t i = k; i-- > 0;) {
    w[i] = (items[i].weight + unit - 1) / unit;
    const auto& next = best[i + 1];
    auto& row = best[i];
    row = next;
    if (items[i].value <= 0.0 || w[i] > cap) continue;
    for (std::size_t c = w[i]; c <= cap; ++c) row[c] = std::max(next[c], items[i].value + next[c - w[i]]);
  }

  // Walking forward and taking every item that still admits an optimal
  // completion yields the lexicographically smallest optimal index list.
  std::vector<std::size_t> picked;
  std::size_t c = cap;
  const double slack = tie_slack(best[0][cap]);
  for (std::size_t i = 0; i < k; ++i) {
    if (items[i].value <= 0.0 || w[i] > c) continue;
    if (items[i].value + best[i + 1][c - w[i]] >= best[i][c] - slack) {
      picked.push_back(i);
      c -= w[i];
    }
  }
  return finish(report, budget, items, picked);
}

SelectionResult brute_force_select(const SensitivityReport& report, std::size_t budget) {
  const auto items = items_of(report);
  const std::size_t k = items.size();
  if (k > kBruteForceLimit) throw InvalidArgument("brute_force_select: more than 24 layers");

  std::vector<double> value(std::size_t{1} << k);
  double top = 0.0;
  for (std::size_t mask = 0; mask < value.size(); ++mask) {
    std::size_t weight = 0;
    double v = 0.0;
    bool ok = true;
    for (std::size_t i = 0; i < k && ok; ++i) {
      if (!(mask >> i & 1)) continue;
      ok = items[i].value > 0.0;
      weight += items[i].weight;
      v += items[i].value;
    }
    value[mask] = ok && weight <= budget ? v : -1.0;
    top = std::max(top, value[mask]);
  }
  const double slack = tie_slack(top);
  std::vector<std::size_t> best_set;
  bool found = false;
  for (std::size_t mask = 0; mask < value.size(); ++mask) {
    if (value[mask] < top - slack) continue;
    std::vector<std::size_t> set;
    for (std::size_t i = 0; i < k; ++i) {
      if (mask >> i & 1) set.push_back(i);
    }
    if (!found || std::lexicographical_compare(set.begin(), set.end(), best_set.begin(), best_set.end())) {
      best_set = std::move(set);
      found = true;
    }
  }
  return finish(report, budget, items, best_set);
}

std::string selection_csv(const SelectionResult& s, const SensitivityReport& report) {
  std::ostringstream os;
  os << "kind,level,layer_index,layer_name,param_count,sensitivity\n";
  for (std::size_t idx : s.selected) {
    const auto it = std::find_if(report.per_layer.begin(), report.per_layer.end(),
                                 [&](const LayerSensitivity& l) { return l.layer_index == idx; });
    if (it == report.per_layer.end()) throw InvalidArgument("selection_csv: layer missing from report");
    os << to_string(s.level.kind) << ',' << text::num(s.level.level) << ',' << idx << ',' << it->layer_name << ','
       << it->param_count << ',' << text::num(it->value) << '\n';
  }
  return os.str();
}

std::string selection_json(const SelectionResult& s) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(s.level.kind);
  j["level"] = s.level.level;
  j["budget"] = s.budget;
  j["total_params"] = s.total_params;
  j["total_value"] = s.total_value;
  j["selected"] = s.selected;
  return j.dump(2) + "\n";
}

}  // namespace gear
