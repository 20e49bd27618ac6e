#include "citypulse/error.hpp"
#include "citypulse/learner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace citypulse {

FeatureVector StandardizationStats::apply(const FeatureVector& x) const {
    FeatureVector z;
    for (std::size_t j = 0; j < kNumFeatures; ++j) z[j] = (x[j] - mean[j]) / scale[j];
    return z;
}

FeatureVector StandardizationStats::invert(const FeatureVector& z) const {
    FeatureVector x;
    for (std::size_t j = 0; j < kNumFeatures; ++j) x[j] = z[j] * scale[j] + mean[j];
    return x;
}

Standardized standardize_fit(const FeatureMatrix& x) {
    if (x.size() < 2) throw InsufficientDataError("standardization needs at least 2 rows");
    const auto n = static_cast<double>(x.size());
    StandardizationStats stats;
    for (std::size_t j = 0; j < kNumFeatures; ++j) {
        double sum = 0.0;
        for (const auto& row : x) sum += row[j];
        const double mean = sum / n;
        double ss = 0.0;
        for (const auto& row : x) ss += (row[j] - mean) * (row[j] - mean);
        const double sd = std::sqrt(ss / n);
        stats.mean[j] = mean;
        stats.scale[j] = sd >= 1e-12 ? sd : 1.0;
    }
    return {standardize_apply(x, stats), stats};
}

FeatureMatrix standardize_apply(const FeatureMatrix& x, const StandardizationStats& stats) {
    FeatureMatrix out;
    out.reserve(x.size());
    for (const auto& row : x) out.push_back(stats.apply(row));
    return out;
}

double squared_distance(const FeatureVector& a, const FeatureVector& b) {
    double d = 0.0;
    for (std::size_t j = 0; j < kNumFeatures; ++j) d += (a[j] - b[j]) * (a[j] - b[j]);
    return d;
}

std::size_t KMeansModel::nearest(const FeatureVector& z) const {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.size(); ++c) {
        const double d = squared_distance(z, centroids[c]);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

namespace {

std::vector<FeatureVector> plus_plus_init(const FeatureMatrix& x, std::size_t k, std::mt19937_64& rng) {
    std::vector<FeatureVector> centroids;
    centroids.reserve(k);
    std::uniform_int_distribution<std::size_t> first(0, x.size() - 1);
    centroids.push_back(x[first(rng)]);

    std::vector<double> d2(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) d2[i] = squared_distance(x[i], centroids[0]);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    while (centroids.size() < k) {
        const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
        if (!(total > 0.0)) throw DegenerateClusteringError("fewer distinct points than clusters");
        const double target = unit(rng) * total;
        double run = 0.0;
        std::size_t pick = x.size() - 1;
        for (std::size_t i = 0; i < x.size(); ++i) {
            run += d2[i];
            if (run > target && d2[i] > 0.0) {
                pick = i;
                break;
            }
        }
        while (d2[pick] == 0.0) --pick;  // rounding at the tail
        centroids.push_back(x[pick]);
        for (std::size_t i = 0; i < x.size(); ++i) d2[i] = std::min(d2[i], squared_distance(x[i], centroids.back()));
    }
    return centroids;
}

// Single-point transfers (Hartigan): moving x from a to b changes the SSE by
// nb/(nb+1)*|x-cb|^2 - na/(na-1)*|x-ca|^2. Lloyd fixed points can still admit
// such moves, so this escapes some of the poor local minima Lloyd stops in.
// Returns true if any point moved; centroids are left as exact cluster means.
bool hartigan_pass(const FeatureMatrix& x, std::vector<std::size_t>& assign, std::vector<FeatureVector>& centroids) {
    const std::size_t k = centroids.size();
    std::vector<std::size_t> counts(k, 0);
    std::vector<FeatureVector> sums(k, FeatureVector{});
    for (std::size_t i = 0; i < x.size(); ++i) {
        ++counts[assign[i]];
        for (std::size_t j = 0; j < kNumFeatures; ++j) sums[assign[i]][j] += x[i][j];
    }
    auto mean_of = [&](std::size_t c) {
        FeatureVector m{};
        for (std::size_t j = 0; j < kNumFeatures; ++j) m[j] = sums[c][j] / static_cast<double>(counts[c]);
        return m;
    };
    for (std::size_t c = 0; c < k; ++c)
        if (counts[c] > 0) centroids[c] = mean_of(c);

    bool any = false;
    for (bool moved = true; moved;) {
        moved = false;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const std::size_t a = assign[i];
            if (counts[a] <= 1) continue;
            const double na = static_cast<double>(counts[a]);
            const double cost_out = na / (na - 1.0) * squared_distance(x[i], centroids[a]);
            std::size_t best = a;
            double best_delta = -1e-12 * (1.0 + cost_out);
            for (std::size_t b = 0; b < k; ++b) {
                if (b == a || counts[b] == 0) continue;
                const double nb = static_cast<double>(counts[b]);
                const double delta = nb / (nb + 1.0) * squared_distance(x[i], centroids[b]) - cost_out;
                if (delta < best_delta) {
                    best_delta = delta;
                    best = b;
                }
            }
            if (best == a) continue;
            for (std::size_t j = 0; j < kNumFeatures; ++j) {
                sums[a][j] -= x[i][j];
                sums[best][j] += x[i][j];
            }
            --counts[a];
            ++counts[best];
            assign[i] = best;
            centroids[a] = mean_of(a);
            centroids[best] = mean_of(best);
            moved = any = true;
        }
    }
    return any;
}

KMeansModel lloyd(const FeatureMatrix& x, const KMeansOptions& options, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    KMeansModel model;
    model.centroids = plus_plus_init(x, options.k, rng);

    std::vector<std::size_t> assign(x.size());
    auto assign_all = [&] {
        double inertia = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            assign[i] = model.nearest(x[i]);
            inertia += squared_distance(x[i], model.centroids[assign[i]]);
        }
        return inertia;
    };

    // Lloyd to convergence, then transfer moves; repeat while transfers help.
    // Each round strictly lowers the SSE, so this terminates.
    constexpr int kMaxRounds = 50;
    for (int round = 0; round < kMaxRounds; ++round) {
        for (int iter = 0; iter < options.max_iter; ++iter) {
            model.inertia_history.push_back(assign_all());

            std::vector<FeatureVector> sums(options.k, FeatureVector{});
            std::vector<std::size_t> counts(options.k, 0);
            for (std::size_t i = 0; i < x.size(); ++i) {
                ++counts[assign[i]];
                for (std::size_t j = 0; j < kNumFeatures; ++j) sums[assign[i]][j] += x[i][j];
            }

            double max_shift = 0.0;
            for (std::size_t c = 0; c < options.k; ++c) {
                FeatureVector next;
                if (counts[c] == 0) {
                    // Re-seed an empty cluster at the point farthest from its centroid.
                    std::size_t far = 0;
                    double far_d = -1.0;
                    for (std::size_t i = 0; i < x.size(); ++i) {
                        const double d = squared_distance(x[i], model.centroids[assign[i]]);
                        if (d > far_d) {
                            far_d = d;
                            far = i;
                        }
                    }
                    next = x[far];
                } else {
                    for (std::size_t j = 0; j < kNumFeatures; ++j) next[j] = sums[c][j] / static_cast<double>(counts[c]);
                }
                max_shift = std::max(max_shift, std::sqrt(squared_distance(next, model.centroids[c])));
                model.centroids[c] = next;
            }
            ++model.iterations;
            if (max_shift < options.tol) break;
        }
        assign_all();
        if (!options.transfer_moves || !hartigan_pass(x, assign, model.centroids)) break;
    }
    model.inertia = assign_all();
    model.inertia_history.push_back(model.inertia);
    return model;
}

} // namespace

KMeansModel kmeans_fit(const FeatureMatrix& x, const KMeansOptions& options) {
    if (options.k < 1) throw ConfigError("k must be positive");
    if (options.max_iter < 1) throw ConfigError("max_iter must be positive");
    if (options.restarts < 1) throw ConfigError("restarts must be positive");
    if (x.size() < options.k) throw InsufficientDataError("kmeans needs at least k rows");

    std::optional<KMeansModel> best;
    for (int r = 0; r < options.restarts; ++r) {
        auto candidate = lloyd(x, options, options.seed + static_cast<std::uint64_t>(r) * 0x9E3779B97F4A7C15ULL);
        if (!best || candidate.inertia < best->inertia) best = std::move(candidate);
    }
    return std::move(*best);
}

std::vector<CongestionLabel> map_clusters_to_labels(const KMeansModel& model) {
    const std::size_t k = model.centroids.size();
    if (k != kNumClasses) throw ConfigError("label mapping needs exactly 3 clusters");
    std::vector<FeatureVector> raw;
    for (const auto& c : model.centroids) raw.push_back(model.stats.invert(c));

    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), std::size_t{0});
    // Most congested first.
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (raw[a][kVVel] != raw[b][kVVel]) return raw[a][kVVel] < raw[b][kVVel];
        return raw[a][kSpaceHeadway] < raw[b][kSpaceHeadway];
    });
    std::vector<CongestionLabel> map(k);
    map[order[0]] = CongestionLabel::High;
    map[order[1]] = CongestionLabel::Medium;
    map[order[2]] = CongestionLabel::Low;
    return map;
}

CongestionLabeler::CongestionLabeler(KMeansModel model, std::vector<CongestionLabel> label_map)
    : model_(std::move(model)), label_map_(std::move(label_map)) {
    if (label_map_.size() != model_.centroids.size()) throw ConfigError("label map size must match cluster count");
}

CongestionLabeler CongestionLabeler::fit(const FeatureMatrix& raw, const KMeansOptions& options) {
    auto standardized = standardize_fit(raw);
    auto model = kmeans_fit(standardized.values, options);
    model.stats = standardized.stats;
    auto map = map_clusters_to_labels(model);
    return CongestionLabeler(std::move(model), std::move(map));
}

CongestionLabel CongestionLabeler::label(const FeatureVector& raw) const {
    return label_map_[model_.nearest(model_.stats.apply(raw))];
}

LabelVector CongestionLabeler::label_all(const FeatureMatrix& raw) const {
    LabelVector out;
    out.reserve(raw.size());
    for (const auto& x : raw) out.push_back(label(x));
    return out;
}

} // namespace citypulse
