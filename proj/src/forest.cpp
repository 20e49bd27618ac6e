#include "citypulse/error.hpp"
#include "citypulse/learner.hpp"

#include <algorithm>
#include <atomic>
#include <limits>
#include <numeric>
#include <thread>

namespace citypulse {

namespace {

using ClassCounts = std::array<std::uint32_t, kNumClasses>;

double gini_sum(const ClassCounts& c, double n) {
    // n * gini(c), which is what the split search compares.
    if (n <= 0.0) return 0.0;
    double sq = 0.0;
    for (auto v : c) sq += static_cast<double>(v) * static_cast<double>(v);
    return n - sq / n;
}

CongestionLabel majority(const ClassCounts& c) {
    std::array<std::size_t, kNumClasses> v{};
    for (std::size_t i = 0; i < kNumClasses; ++i) v[i] = c[i];
    return plurality(v);
}

struct SplitCandidate {
    int feature = -1;
    double threshold = 0.0;
    double child_impurity = 0.0;  // n_left * gini_left + n_right * gini_right
};

class TreeBuilder {
public:
    TreeBuilder(const FeatureMatrix& x, const LabelVector& y, const TreeOptions& options, std::mt19937_64& rng)
        : x_(x), y_(y), options_(options), rng_(rng) {}

    std::vector<TreeNode> build(std::vector<std::uint32_t> sample) {
        sample_ = std::move(sample);
        nodes_.clear();
        grow(0, sample_.size(), 0);
        return std::move(nodes_);
    }

private:
    int grow(std::size_t begin, std::size_t end, int depth) {
        const int id = static_cast<int>(nodes_.size());
        nodes_.emplace_back();
        ClassCounts counts{};
        for (std::size_t i = begin; i < end; ++i) ++counts[index_of(y_[sample_[i]])];
        nodes_[id].counts = counts;
        nodes_[id].label = majority(counts);

        const std::size_t n = end - begin;
        const bool pure = std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; }) <= 1;
        if (pure || depth >= options_.max_depth || n < 2 * options_.min_leaf) return id;

        const auto split = best_split(begin, end, counts);
        if (split.feature < 0) return id;

        const auto f = static_cast<std::size_t>(split.feature);
        const auto mid_it = std::partition(sample_.begin() + static_cast<std::ptrdiff_t>(begin),
                                           sample_.begin() + static_cast<std::ptrdiff_t>(end),
                                           [&](std::uint32_t i) { return x_[i][f] <= split.threshold; });
        const auto mid = static_cast<std::size_t>(mid_it - sample_.begin());

        nodes_[id].feature = split.feature;
        nodes_[id].threshold = split.threshold;
        nodes_[id].impurity_decrease = std::max(0.0, gini_sum(counts, static_cast<double>(n)) - split.child_impurity);
        const int left = grow(begin, mid, depth + 1);
        const int right = grow(mid, end, depth + 1);
        nodes_[id].left = left;
        nodes_[id].right = right;
        return id;
    }

    SplitCandidate best_split(std::size_t begin, std::size_t end, const ClassCounts& total) {
        std::array<int, kNumFeatures> order{0, 1, 2, 3};
        std::shuffle(order.begin(), order.end(), rng_);

        SplitCandidate best;
        double best_impurity = std::numeric_limits<double>::infinity();
        int evaluated = 0;
        const std::size_t n = end - begin;
        for (int f : order) {
            if (evaluated >= options_.features_per_split) break;
            scratch_.clear();
            for (std::size_t i = begin; i < end; ++i) {
                const auto row = sample_[i];
                scratch_.push_back({x_[row][static_cast<std::size_t>(f)], static_cast<std::uint8_t>(index_of(y_[row]))});
            }
            std::sort(scratch_.begin(), scratch_.end(),
                      [](const auto& a, const auto& b) { return a.first < b.first; });
            // Constant features do not count toward features_per_split.
            if (scratch_.front().first == scratch_.back().first) continue;
            ++evaluated;

            ClassCounts left{};
            for (std::size_t i = 0; i + 1 < n; ++i) {
                ++left[scratch_[i].second];
                if (scratch_[i].first == scratch_[i + 1].first) continue;
                const std::size_t nl = i + 1;
                const std::size_t nr = n - nl;
                if (nl < options_.min_leaf || nr < options_.min_leaf) continue;
                ClassCounts right;
                for (std::size_t c = 0; c < kNumClasses; ++c) right[c] = total[c] - left[c];
                const double impurity =
                    gini_sum(left, static_cast<double>(nl)) + gini_sum(right, static_cast<double>(nr));
                if (impurity < best_impurity) {
                    best_impurity = impurity;
                    double thr = 0.5 * (scratch_[i].first + scratch_[i + 1].first);
                    if (!(thr < scratch_[i + 1].first)) thr = scratch_[i].first;
                    best = {f, thr, impurity};
                }
            }
        }
        return best;
    }

    const FeatureMatrix& x_;
    const LabelVector& y_;
    const TreeOptions& options_;
    std::mt19937_64& rng_;
    std::vector<std::uint32_t> sample_;
    std::vector<TreeNode> nodes_;
    std::vector<std::pair<double, std::uint8_t>> scratch_;
};

std::uint64_t mix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

} // namespace

CongestionLabel plurality(const std::array<std::size_t, kNumClasses>& votes) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < kNumClasses; ++c)
        if (votes[c] >= votes[best]) best = c;  // later index = more congested wins ties
    return label_at(best);
}

const TreeNode& DecisionTree::leaf_for(const FeatureVector& x) const {
    if (nodes_.empty()) throw Error("decision tree is empty");
    const TreeNode* node = &nodes_[0];
    while (node->feature >= 0)
        node = &nodes_[static_cast<std::size_t>(x[static_cast<std::size_t>(node->feature)] <= node->threshold ? node->left
                                                                                                            : node->right)];
    return *node;
}

CongestionLabel DecisionTree::predict(const FeatureVector& x) const { return leaf_for(x).label; }

FeatureVector DecisionTree::raw_importances() const {
    FeatureVector imp{};
    for (const auto& n : nodes_)
        if (n.feature >= 0) imp[static_cast<std::size_t>(n.feature)] += n.impurity_decrease;
    return imp;
}

int DecisionTree::depth() const {
    if (nodes_.empty()) return 0;
    std::vector<int> d(nodes_.size(), 0);
    int best = 0;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {  // children always follow parents
        best = std::max(best, d[i]);
        if (nodes_[i].feature >= 0) {
            d[static_cast<std::size_t>(nodes_[i].left)] = d[i] + 1;
            d[static_cast<std::size_t>(nodes_[i].right)] = d[i] + 1;
        }
    }
    return best;
}

DecisionTree fit_tree(const FeatureMatrix& x, const LabelVector& y, std::vector<std::uint32_t> sample,
                      const TreeOptions& options, std::mt19937_64& rng) {
    if (sample.empty()) throw InsufficientDataError("cannot fit a tree on an empty sample");
    if (options.max_depth < 0 || options.min_leaf < 1 || options.features_per_split < 1)
        throw ConfigError("invalid tree options");
    TreeBuilder builder(x, y, options, rng);
    return DecisionTree(builder.build(std::move(sample)));
}

std::array<std::size_t, kNumClasses> RandomForestModel::votes(const FeatureVector& x) const {
    std::array<std::size_t, kNumClasses> v{};
    for (const auto& t : trees) ++v[index_of(t.predict(x))];
    return v;
}

std::uint64_t tree_seed(std::uint64_t forest_seed, std::size_t tree_index) {
    return mix(forest_seed ^ mix(static_cast<std::uint64_t>(tree_index) + 1));
}

RandomForestModel rf_fit(const FeatureMatrix& x, const LabelVector& y, const ForestOptions& options) {
    if (x.size() != y.size()) throw RangeError("feature and label counts differ");
    if (x.empty()) throw InsufficientDataError("cannot fit a forest on empty input");
    if (options.n_trees < 1) throw ConfigError("n_trees must be positive");
    if (x.size() > std::numeric_limits<std::uint32_t>::max()) throw RangeError("too many rows");

    RandomForestModel model;
    model.trees.resize(static_cast<std::size_t>(options.n_trees));
    const auto n = x.size();

    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t t = next++; t < model.trees.size(); t = next++) {
            std::mt19937_64 rng(tree_seed(options.seed, t));
            std::uniform_int_distribution<std::uint32_t> pick(0, static_cast<std::uint32_t>(n - 1));
            std::vector<std::uint32_t> sample(n);
            for (auto& s : sample) s = pick(rng);
            model.trees[t] = fit_tree(x, y, std::move(sample), options.tree, rng);
        }
    };

    unsigned threads = options.threads ? options.threads : std::max(1u, std::thread::hardware_concurrency());
    threads = std::min<unsigned>(threads, static_cast<unsigned>(model.trees.size()));
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (unsigned i = 0; i < threads; ++i) pool.emplace_back(worker);
    }
    return model;
}

CongestionLabel rf_predict(const RandomForestModel& model, const FeatureVector& x) {
    if (model.trees.empty()) throw Error("random forest has no trees");
    return plurality(model.votes(x));
}

LabelVector rf_predict_all(const RandomForestModel& model, const FeatureMatrix& x) {
    LabelVector out;
    out.reserve(x.size());
    for (const auto& row : x) out.push_back(rf_predict(model, row));
    return out;
}

FeatureVector feature_importances(const RandomForestModel& model) {
    FeatureVector sum{};
    std::size_t contributing = 0;
    for (const auto& t : model.trees) {
        const auto raw = t.raw_importances();
        const double total = std::accumulate(raw.begin(), raw.end(), 0.0);
        if (!(total > 0.0)) continue;
        for (std::size_t j = 0; j < kNumFeatures; ++j) sum[j] += raw[j] / total;
        ++contributing;
    }
    if (contributing == 0) return {0.25, 0.25, 0.25, 0.25};
    const double total = std::accumulate(sum.begin(), sum.end(), 0.0);
    for (auto& v : sum) v /= total;
    return sum;
}

} // namespace citypulse
