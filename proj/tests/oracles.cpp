#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace citypulse::oracle {

std::array<std::size_t, 3> regime_counts(std::uint64_t seed, std::size_t n, const std::array<double, 3>& weights) {
    std::mt19937_64 rng(regime_stream_seed(seed));
    std::discrete_distribution<int> dist(weights.begin(), weights.end());
    std::array<std::size_t, 3> counts{};
    for (std::size_t i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(dist(rng))];
    return counts;
}

std::vector<std::size_t> noise_indices(std::size_t n, double intensity, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(std::floor(intensity * static_cast<double>(n))));
    std::sort(idx.begin(), idx.end());
    return idx;
}

PartitionOptimum best_partition(const std::vector<FeatureVector>& points, std::size_t k) {
    const std::size_t n = points.size();
    std::vector<int> assign(n, 0);
    PartitionOptimum best{std::numeric_limits<double>::infinity(), {}};
    std::size_t total = 1;
    for (std::size_t i = 0; i < n; ++i) total *= k;
    for (std::size_t code = 0; code < total; ++code) {
        std::size_t c = code;
        for (std::size_t i = 0; i < n; ++i) {
            assign[i] = static_cast<int>(c % k);
            c /= k;
        }
        std::vector<FeatureVector> sums(k, FeatureVector{});
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            ++counts[static_cast<std::size_t>(assign[i])];
            for (std::size_t j = 0; j < kNumFeatures; ++j) sums[static_cast<std::size_t>(assign[i])][j] += points[i][j];
        }
        if (std::any_of(counts.begin(), counts.end(), [](std::size_t v) { return v == 0; })) continue;
        double sse = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto a = static_cast<std::size_t>(assign[i]);
            for (std::size_t j = 0; j < kNumFeatures; ++j) {
                const double mean = sums[a][j] / static_cast<double>(counts[a]);
                sse += (points[i][j] - mean) * (points[i][j] - mean);
            }
        }
        if (sse < best.sse) best = {sse, assign};
    }
    return best;
}

StumpOptimum best_gini_threshold(const std::vector<double>& values, const std::vector<int>& labels) {
    std::vector<double> distinct = values;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

    auto weighted_gini = [&](double thr) {
        std::map<int, double> left, right;
        double nl = 0, nr = 0;
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (values[i] <= thr) {
                left[labels[i]] += 1;
                nl += 1;
            } else {
                right[labels[i]] += 1;
                nr += 1;
            }
        }
        auto g = [](const std::map<int, double>& m, double n) {
            if (n == 0) return 0.0;
            double s = 1.0;
            for (const auto& [k, v] : m) s -= (v / n) * (v / n);
            return s;
        };
        return nl * g(left, nl) + nr * g(right, nr);
    };

    StumpOptimum best{0.0, std::numeric_limits<double>::infinity()};
    for (std::size_t i = 0; i + 1 < distinct.size(); ++i) {
        const double thr = (distinct[i] + distinct[i + 1]) / 2.0;
        const double g = weighted_gini(thr);
        if (g < best.weighted_gini) best = {thr, g};
    }
    return best;
}

CongestionLabel tally_votes(const RandomForestModel& model, const FeatureVector& x) {
    int low = 0, medium = 0, high = 0;
    for (const auto& tree : model.trees) {
        // Walk the tree by hand rather than through DecisionTree::predict.
        const auto& nodes = tree.nodes();
        std::size_t i = 0;
        while (nodes[i].feature >= 0)
            i = static_cast<std::size_t>(x[static_cast<std::size_t>(nodes[i].feature)] <= nodes[i].threshold ? nodes[i].left
                                                                                                           : nodes[i].right);
        switch (nodes[i].label) {
        case CongestionLabel::Low: ++low; break;
        case CongestionLabel::Medium: ++medium; break;
        case CongestionLabel::High: ++high; break;
        }
    }
    if (high >= medium && high >= low) return CongestionLabel::High;
    if (medium >= low) return CongestionLabel::Medium;
    return CongestionLabel::Low;
}

WarehouseScan scan_warehouse_csv(const std::filesystem::path& csv) {
    std::ifstream in(csv);
    std::string line;
    std::getline(in, line);  // header
    WarehouseScan scan;
    std::map<int, std::vector<double>> vel, sh;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (line.back() == ',') cells.emplace_back();
        const int lane = std::stoi(cells[3]);
        const int section = std::stoi(cells[4]);
        vel[lane].push_back(std::stod(cells[7]));
        sh[lane].push_back(std::stod(cells[9]));
        const std::string& label = cells[14];
        const std::size_t li = label == "Low" ? 0 : label == "Medium" ? 1 : label == "High" ? 2 : 3;
        ++scan.labels[li];
        ++scan.road_labels[{lane, section}][li];
        ++scan.rows;
    }
    for (const auto& [lane, v] : vel) {
        auto& ref = scan.lanes[lane];
        ref.count = v.size();
        ref.mean_v_vel = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        ref.mean_space_headway = std::accumulate(sh[lane].begin(), sh[lane].end(), 0.0) / static_cast<double>(v.size());
    }
    return scan;
}

HandMetrics hand_metrics(const std::vector<CongestionLabel>& pred, const std::vector<CongestionLabel>& truth) {
    HandMetrics m{};
    double correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i)
        if (pred[i] == truth[i]) correct += 1;
    m.accuracy = correct / static_cast<double>(truth.size());
    double f1_sum = 0;
    for (std::size_t c = 0; c < 3; ++c) {
        const auto label = static_cast<CongestionLabel>(c);
        double tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            if (pred[i] == label && truth[i] == label) tp += 1;
            if (pred[i] == label && truth[i] != label) fp += 1;
            if (pred[i] != label && truth[i] == label) fn += 1;
        }
        m.precision[c] = tp + fp > 0 ? tp / (tp + fp) : 0.0;
        m.recall[c] = tp + fn > 0 ? tp / (tp + fn) : 0.0;
        m.f1[c] = m.precision[c] + m.recall[c] > 0 ? 2 * m.precision[c] * m.recall[c] / (m.precision[c] + m.recall[c]) : 0.0;
        f1_sum += m.f1[c];
    }
    m.macro_f1 = f1_sum / 3.0;
    return m;
}

} // namespace citypulse::oracle
