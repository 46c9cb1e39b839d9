#pragma once

#include <cstddef>
#include <vector>

namespace mmfs {

enum class StopAction { Continue, Stop };

struct StopDecision {
  StopAction action = StopAction::Continue;
  std::size_t best_epoch = 0;
};

// Stops once `patience` consecutive epochs fail to improve on the best
// validation loss (patience 0 behaves like 1: the first non-improving epoch
// stops). best_epoch is the argmin, lowest epoch on ties.
StopDecision early_stop(const std::vector<double>& history, int patience);

}  // namespace mmfs
