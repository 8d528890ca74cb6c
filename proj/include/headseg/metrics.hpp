#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace headseg::metrics {

/// counts[truth][predicted] for the two classes.
using Confusion = std::array<std::array<long long, 2>, 2>;

Confusion confusion(const std::vector<std::uint8_t>& predicted, const std::vector<std::uint8_t>& truth);

/// Per-class intersection over union. A class absent from both prediction and
/// truth scores 1.
std::array<double, 2> class_iou(const Confusion& c);

double miou(const Confusion& c);
double miou(const std::vector<std::uint8_t>& predicted, const std::vector<std::uint8_t>& truth);

} // namespace headseg::metrics
