#include "headseg/metrics.hpp"

#include <string>

#include "headseg/common.hpp"

namespace headseg::metrics {

Confusion confusion(const std::vector<std::uint8_t>& predicted, const std::vector<std::uint8_t>& truth)
{
    if (predicted.size() != truth.size()) {
        throw ArgumentError("confusion: " + std::to_string(predicted.size()) + " predictions for " +
                            std::to_string(truth.size()) + " labels");
    }
    Confusion c{};
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (predicted[i] > 1 || truth[i] > 1) throw ArgumentError("confusion: label values must be 0 or 1");
        ++c[truth[i]][predicted[i]];
    }
    return c;
}

std::array<double, 2> class_iou(const Confusion& c)
{
    std::array<double, 2> iou{};
    for (int k = 0; k < 2; ++k) {
        const long long tp = c[k][k];
        const long long fn = c[k][1 - k];
        const long long fp = c[1 - k][k];
        const long long denom = tp + fn + fp;
        iou[k] = denom == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(denom);
    }
    return iou;
}

double miou(const Confusion& c)
{
    const auto iou = class_iou(c);
    return 0.5 * (iou[0] + iou[1]);
}

double miou(const std::vector<std::uint8_t>& predicted, const std::vector<std::uint8_t>& truth)
{
    return miou(confusion(predicted, truth));
}

} // namespace headseg::metrics
