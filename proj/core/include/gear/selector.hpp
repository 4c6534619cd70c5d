#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gear/net.hpp"
#include "gear/sensitivity.hpp"

namespace gear {

struct SelectionResult {
  DistortionLevel level;
  /// Layer indices, unique and ascending.
  std::vector<std::size_t> selected;
  std::size_t total_params = 0;
  /// Sum of the selected sensitivities in ascending layer order.
  double total_value = 0.0;
  std::size_t budget = 0;

  bool operator==(const SelectionResult&) const = default;
};

/// floor(fraction * model.param_count()) for fraction in (0, 1].
std::size_t budget_from_fraction(const Model& model, double fraction);
std::size_t budget_from_fraction(std::size_t param_count, double fraction);

/// Exact 0/1 knapsack over the report's layers: maximize the summed
/// sensitivity with total parameter count <= budget. Among optimal sets the
/// lexicographically smallest ascending index list wins, and layers with
/// zero sensitivity are never taken.
///
/// Capacity is counted in single parameters up to a budget of 10^6. Beyond
/// that, parameters are bucketed into ceil(budget / 10^6) units with layer
/// sizes rounded up, which keeps the result feasible.
SelectionResult select_layers(const SensitivityReport& report, std::size_t budget);

/// Exhaustive reference for select_layers; at most 24 layers.
SelectionResult brute_force_select(const SensitivityReport& report, std::size_t budget);

/// Rows `kind,level,layer_index,layer_name,param_count,sensitivity` for the
/// selected layers.
std::string selection_csv(const SelectionResult& selection, const SensitivityReport& report);
/// {"kind", "level", "budget", "total_params", "total_value", "selected"}.
std::string selection_json(const SelectionResult& selection);

}  // namespace gear
