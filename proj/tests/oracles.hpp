#pragma once

// Independent reference computations used by the unit and acceptance suites.
// Nothing here calls the implementation path it is used to check.

#include "citypulse/datagen.hpp"
#include "citypulse/features.hpp"
#include "citypulse/learner.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace citypulse::oracle {

// Per-regime counts from a fresh run of the seeded regime sampler.
std::array<std::size_t, 3> regime_counts(std::uint64_t seed, std::size_t n, const std::array<double, 3>& weights);

// Indices a seeded shuffle selects, re-drawn from scratch.
std::vector<std::size_t> noise_indices(std::size_t n, double intensity, std::uint64_t seed);

struct PartitionOptimum {
    double sse;
    std::vector<int> assignment;
};

// Minimum within-cluster SSE over every assignment of the points to k
// nonempty clusters (k^n enumeration; keep n <= 10).
PartitionOptimum best_partition(const std::vector<FeatureVector>& points, std::size_t k);

struct StumpOptimum {
    double threshold;
    double weighted_gini;  // n_left * gini_left + n_right * gini_right
};

// Tries every midpoint between adjacent distinct values with an O(n^2) scan.
StumpOptimum best_gini_threshold(const std::vector<double>& values, const std::vector<int>& labels);

// Vote tally computed tree by tree, ties to the more congested label.
CongestionLabel tally_votes(const RandomForestModel& model, const FeatureVector& x);

struct LaneReference {
    std::size_t count = 0;
    double mean_v_vel = 0.0;
    double mean_space_headway = 0.0;
};

struct WarehouseScan {
    std::map<int, LaneReference> lanes;
    std::map<std::pair<int, int>, std::array<std::size_t, 4>> road_labels;  // Low, Medium, High, unlabeled
    std::array<std::size_t, 4> labels{};
    std::size_t rows = 0;
};

// Reads warehouse.csv with a plain comma split and recomputes aggregates.
WarehouseScan scan_warehouse_csv(const std::filesystem::path& csv);

// Precision/recall/F1 straight from the definitions over the label pairs.
struct HandMetrics {
    double accuracy;
    std::array<double, 3> precision, recall, f1;
    double macro_f1;
};
HandMetrics hand_metrics(const std::vector<CongestionLabel>& pred, const std::vector<CongestionLabel>& truth);

} // namespace citypulse::oracle
