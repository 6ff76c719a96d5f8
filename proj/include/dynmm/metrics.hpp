#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace dynmm {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// One emitted results row.
struct MetricsRecord {
    std::string variant = "dynamic";
    double lambda = 0.0;
    std::uint64_t seed = 0;
    double accuracy = kNaN;
    double f1_micro = kNaN;
    double f1_macro = kNaN;
    double mae = kNaN;
    double mean_madds = 0.0;
    double madds_reduction_vs_static = 0.0;
    std::vector<std::vector<double>> selection_ratio;  // [slot][branch]
    double gate_entropy = 0.0;                         // minimum over slots, nats
    double easy_cheap_ratio = kNaN;                    // share of easy samples on branch 0
    double hard_cheap_ratio = kNaN;                    // share of hard samples on branch 0
    double wall_time_s = 0.0;
    bool degenerate_gate = false;
};

inline constexpr double kDegenerateEntropy = 0.05;

inline double accuracy(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& truth) {
    if (pred.empty()) return kNaN;
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
    return static_cast<double>(hit) / static_cast<double>(pred.size());
}

struct F1Scores {
    double micro = kNaN;
    double macro = kNaN;
};

// Single-label F1 over `classes` classes. Macro averages per-class F1
// over classes that occur in either predictions or truth.
inline F1Scores f1_scores(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& truth,
                          std::size_t classes) {
    std::vector<double> tp(classes, 0), fp(classes, 0), fn(classes, 0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] == truth[i]) {
            tp[pred[i]] += 1;
        } else {
            fp[pred[i]] += 1;
            fn[truth[i]] += 1;
        }
    }
    double stp = 0, sfp = 0, sfn = 0, macro = 0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        stp += tp[c];
        sfp += fp[c];
        sfn += fn[c];
        if (tp[c] + fp[c] + fn[c] == 0) continue;
        ++present;
        macro += 2 * tp[c] / (2 * tp[c] + fp[c] + fn[c]);
    }
    F1Scores s;
    if (stp + sfp + sfn > 0) s.micro = 2 * stp / (2 * stp + sfp + sfn);
    if (present > 0) s.macro = macro / static_cast<double>(present);
    return s;
}

inline double mean_absolute_error(const std::vector<double>& pred, const std::vector<double>& truth) {
    if (pred.empty()) return kNaN;
    double total = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) total += std::abs(pred[i] - truth[i]);
    return total / static_cast<double>(pred.size());
}

// Share of samples whose prediction and target have the same sign.
inline double sign_accuracy(const std::vector<double>& pred, const std::vector<double>& truth) {
    if (pred.empty()) return kNaN;
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += (pred[i] >= 0.0) == (truth[i] >= 0.0);
    return static_cast<double>(hit) / static_cast<double>(pred.size());
}

}  // namespace dynmm
