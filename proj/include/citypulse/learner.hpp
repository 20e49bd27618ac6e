#pragma once

#include "citypulse/features.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace citypulse {

using FeatureMatrix = std::vector<FeatureVector>;
using LabelVector = std::vector<CongestionLabel>;

// ---- Standardization ----

struct StandardizationStats {
    FeatureVector mean{};
    // Population std, guarded at >= 1e-12. Zero-variance columns keep
    // scale 1 so they are only shifted.
    FeatureVector scale{1.0, 1.0, 1.0, 1.0};

    FeatureVector apply(const FeatureVector& x) const;
    FeatureVector invert(const FeatureVector& z) const;
};

struct Standardized {
    FeatureMatrix values;
    StandardizationStats stats;
};

Standardized standardize_fit(const FeatureMatrix& x);
FeatureMatrix standardize_apply(const FeatureMatrix& x, const StandardizationStats& stats);

// ---- KMeans ----

struct KMeansOptions {
    std::size_t k = 3;
    std::uint64_t seed = 0;
    int max_iter = 100;
    double tol = 1e-4;
    int restarts = 1;
    // Follow Lloyd convergence with single-point transfer moves.
    bool transfer_moves = true;
};

struct KMeansModel {
    std::vector<FeatureVector> centroids;  // standardized space
    StandardizationStats stats;
    int iterations = 0;
    double inertia = 0.0;
    // Inertia after each assignment step of the winning restart.
    std::vector<double> inertia_history;

    std::size_t nearest(const FeatureVector& standardized) const;
};

double squared_distance(const FeatureVector& a, const FeatureVector& b);

// Lloyd's algorithm with k-means++ seeding. Throws InsufficientDataError when
// rows < k and DegenerateClusteringError when fewer than k distinct points
// exist.
KMeansModel kmeans_fit(const FeatureMatrix& standardized, const KMeansOptions& options = {});

// Cluster id -> label: fastest de-standardized centroid is Low, slowest is
// High; equal velocities fall back to smaller space headway = more congested.
std::vector<CongestionLabel> map_clusters_to_labels(const KMeansModel& model);

// Standardization + KMeans + label map, used to label raw feature vectors.
class CongestionLabeler {
public:
    CongestionLabeler() = default;
    CongestionLabeler(KMeansModel model, std::vector<CongestionLabel> label_map);

    static CongestionLabeler fit(const FeatureMatrix& raw, const KMeansOptions& options = {});

    CongestionLabel label(const FeatureVector& raw) const;
    LabelVector label_all(const FeatureMatrix& raw) const;

    const KMeansModel& model() const noexcept { return model_; }
    const std::vector<CongestionLabel>& label_map() const noexcept { return label_map_; }
    bool fitted() const noexcept { return !model_.centroids.empty(); }

private:
    KMeansModel model_;
    std::vector<CongestionLabel> label_map_;
};

// ---- Random forest ----

struct TreeNode {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;  // x[feature] <= threshold goes left
    int left = -1;
    int right = -1;
    CongestionLabel label = CongestionLabel::Low;
    std::array<std::uint32_t, kNumClasses> counts{};
    // Sample-weighted Gini decrease of this split (0 for leaves).
    double impurity_decrease = 0.0;
};

struct TreeOptions {
    int max_depth = 16;
    std::size_t min_leaf = 1;
    int features_per_split = 2;
};

class DecisionTree {
public:
    DecisionTree() = default;
    explicit DecisionTree(std::vector<TreeNode> nodes) : nodes_(std::move(nodes)) {}

    CongestionLabel predict(const FeatureVector& x) const;
    const TreeNode& leaf_for(const FeatureVector& x) const;
    // Unnormalized per-feature sum of impurity decreases.
    FeatureVector raw_importances() const;
    int depth() const;

    const std::vector<TreeNode>& nodes() const noexcept { return nodes_; }

private:
    std::vector<TreeNode> nodes_;
};

// CART with Gini impurity on the rows named by `sample` (duplicates allowed).
DecisionTree fit_tree(const FeatureMatrix& x, const LabelVector& y, std::vector<std::uint32_t> sample,
                      const TreeOptions& options, std::mt19937_64& rng);

// Plurality with ties going to the more congested label.
CongestionLabel plurality(const std::array<std::size_t, kNumClasses>& votes);

struct ForestOptions {
    int n_trees = 100;
    std::uint64_t seed = 0;
    TreeOptions tree;
    // 0 = std::thread::hardware_concurrency().
    unsigned threads = 0;
};

struct RandomForestModel {
    std::vector<DecisionTree> trees;

    std::array<std::size_t, kNumClasses> votes(const FeatureVector& x) const;
};

std::uint64_t tree_seed(std::uint64_t forest_seed, std::size_t tree_index);

RandomForestModel rf_fit(const FeatureMatrix& x, const LabelVector& y, const ForestOptions& options = {});
CongestionLabel rf_predict(const RandomForestModel& model, const FeatureVector& x);
LabelVector rf_predict_all(const RandomForestModel& model, const FeatureMatrix& x);
FeatureVector feature_importances(const RandomForestModel& model);

// ---- Evaluation ----

using ConfusionMatrix = std::array<std::array<std::size_t, kNumClasses>, kNumClasses>;  // [truth][pred]

struct ClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;
};

struct EvalReport {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::array<ClassMetrics, kNumClasses> per_class{};
    ConfusionMatrix confusion{};
    std::optional<FeatureVector> feature_importances;

    std::size_t total() const;
};

EvalReport evaluate(const LabelVector& predicted, const LabelVector& truth);
EvalReport report_from_confusion(const ConfusionMatrix& confusion);

std::string format_report_text(const EvalReport& report);
std::string format_report_csv(const EvalReport& report);

struct LabeledBatch {
    FeatureMatrix features;
    LabelVector labels;
};

struct BatchScore {
    std::size_t batch_number;  // 1-based
    bool skipped = false;
    EvalReport report;
};

struct StabilitySeries {
    std::vector<BatchScore> batches;
    ConfusionMatrix combined{};
};

StabilitySeries sequential_batch_eval(const std::vector<LabeledBatch>& batches, const RandomForestModel& model);
std::string format_stability_csv(const StabilitySeries& series);

struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

// Per-class shuffle, then the first round(test_fraction * class size) go to test.
SplitIndices stratified_split(const LabelVector& y, double test_fraction, std::uint64_t seed);

// ---- Model artifact ----

struct ModelArtifact {
    CongestionLabeler labeler;
    RandomForestModel forest;
};

inline constexpr std::string_view kModelMagic = "citypulse-model";
inline constexpr int kModelVersion = 1;

void write_model(std::ostream& out, const ModelArtifact& model);
ModelArtifact read_model(std::istream& in);
void save_model(const std::filesystem::path& path, const ModelArtifact& model);
ModelArtifact load_model(const std::filesystem::path& path);

} // namespace citypulse
