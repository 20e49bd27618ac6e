#include "citypulse/error.hpp"
#include "citypulse/learner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace citypulse {

std::size_t EvalReport::total() const {
    std::size_t n = 0;
    for (const auto& row : confusion)
        for (auto v : row) n += v;
    return n;
}

EvalReport report_from_confusion(const ConfusionMatrix& confusion) {
    EvalReport r;
    r.confusion = confusion;
    std::size_t total = 0;
    std::size_t correct = 0;
    for (std::size_t t = 0; t < kNumClasses; ++t) {
        for (std::size_t p = 0; p < kNumClasses; ++p) total += confusion[t][p];
        correct += confusion[t][t];
    }
    r.accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;

    double f1_sum = 0.0;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        std::size_t row = 0;
        std::size_t col = 0;
        for (std::size_t k = 0; k < kNumClasses; ++k) {
            row += confusion[c][k];
            col += confusion[k][c];
        }
        const double tp = static_cast<double>(confusion[c][c]);
        auto& m = r.per_class[c];
        m.support = row;
        m.precision = col ? tp / static_cast<double>(col) : 0.0;
        m.recall = row ? tp / static_cast<double>(row) : 0.0;
        m.f1 = (m.precision + m.recall) > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
        f1_sum += m.f1;
    }
    r.macro_f1 = f1_sum / static_cast<double>(kNumClasses);
    return r;
}

EvalReport evaluate(const LabelVector& predicted, const LabelVector& truth) {
    if (predicted.size() != truth.size()) throw RangeError("prediction and truth lengths differ");
    if (truth.empty()) throw InsufficientDataError("cannot evaluate zero samples");
    ConfusionMatrix cm{};
    for (std::size_t i = 0; i < truth.size(); ++i) ++cm[index_of(truth[i])][index_of(predicted[i])];
    return report_from_confusion(cm);
}

std::string format_report_text(const EvalReport& report) {
    std::ostringstream out;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-8s %10s %10s %10s %10s\n", "class", "precision", "recall", "f1-score", "support");
    out << buf;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        const auto& m = report.per_class[c];
        std::snprintf(buf, sizeof buf, "%-8s %10.4f %10.4f %10.4f %10zu\n", std::string(to_string(label_at(c))).c_str(),
                      m.precision, m.recall, m.f1, m.support);
        out << buf;
    }
    std::snprintf(buf, sizeof buf, "\naccuracy %.4f\nmacro_f1 %.4f\nsamples  %zu\n", report.accuracy, report.macro_f1,
                  report.total());
    out << buf;
    out << "\nconfusion (rows = true, columns = predicted)\n";
    std::snprintf(buf, sizeof buf, "%-8s %8s %8s %8s\n", "", "Low", "Medium", "High");
    out << buf;
    for (std::size_t t = 0; t < kNumClasses; ++t) {
        std::snprintf(buf, sizeof buf, "%-8s %8zu %8zu %8zu\n", std::string(to_string(label_at(t))).c_str(),
                      report.confusion[t][0], report.confusion[t][1], report.confusion[t][2]);
        out << buf;
    }
    if (report.feature_importances) {
        out << "\nfeature importances\n";
        for (std::size_t j = 0; j < kNumFeatures; ++j) {
            std::snprintf(buf, sizeof buf, "%-14s %.4f\n", std::string(kFeatureNames[j]).c_str(),
                          (*report.feature_importances)[j]);
            out << buf;
        }
    }
    return out.str();
}

std::string format_report_csv(const EvalReport& report) {
    std::ostringstream out;
    out.precision(17);
    out << "class,precision,recall,f1,support\n";
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        const auto& m = report.per_class[c];
        out << to_string(label_at(c)) << ',' << m.precision << ',' << m.recall << ',' << m.f1 << ',' << m.support << '\n';
    }
    out << "accuracy," << report.accuracy << ",,,\n";
    out << "macro_f1,,,," << report.macro_f1 << '\n';
    out << '\n' << "true\\predicted,Low,Medium,High\n";
    for (std::size_t t = 0; t < kNumClasses; ++t) {
        out << to_string(label_at(t));
        for (std::size_t p = 0; p < kNumClasses; ++p) out << ',' << report.confusion[t][p];
        out << '\n';
    }
    if (report.feature_importances) {
        out << '\n' << "feature,importance\n";
        for (std::size_t j = 0; j < kNumFeatures; ++j)
            out << kFeatureNames[j] << ',' << (*report.feature_importances)[j] << '\n';
    }
    return out.str();
}

StabilitySeries sequential_batch_eval(const std::vector<LabeledBatch>& batches, const RandomForestModel& model) {
    StabilitySeries series;
    for (std::size_t b = 0; b < batches.size(); ++b) {
        const auto& batch = batches[b];
        if (batch.features.size() != batch.labels.size()) throw RangeError("batch feature and label counts differ");
        BatchScore score{b + 1, false, {}};
        if (batch.labels.empty()) {
            score.skipped = true;
        } else {
            score.report = evaluate(rf_predict_all(model, batch.features), batch.labels);
            for (std::size_t t = 0; t < kNumClasses; ++t)
                for (std::size_t p = 0; p < kNumClasses; ++p) series.combined[t][p] += score.report.confusion[t][p];
        }
        series.batches.push_back(std::move(score));
    }
    return series;
}

std::string format_stability_csv(const StabilitySeries& series) {
    std::ostringstream out;
    out.precision(17);
    out << "batch,status,accuracy,macro_f1,samples\n";
    for (const auto& b : series.batches) {
        out << b.batch_number << ',';
        if (b.skipped)
            out << "skipped,,,0\n";
        else
            out << "ok," << b.report.accuracy << ',' << b.report.macro_f1 << ',' << b.report.total() << '\n';
    }
    out << '\n' << "true\\predicted,Low,Medium,High\n";
    for (std::size_t t = 0; t < kNumClasses; ++t) {
        out << to_string(label_at(t));
        for (std::size_t p = 0; p < kNumClasses; ++p) out << ',' << series.combined[t][p];
        out << '\n';
    }
    return out.str();
}

SplitIndices stratified_split(const LabelVector& y, double test_fraction, std::uint64_t seed) {
    if (!(test_fraction >= 0.0 && test_fraction <= 1.0)) throw RangeError("test fraction must be in [0, 1]");
    std::array<std::vector<std::size_t>, kNumClasses> by_class;
    for (std::size_t i = 0; i < y.size(); ++i) by_class[index_of(y[i])].push_back(i);
    std::mt19937_64 rng(seed);
    SplitIndices out;
    for (auto& members : by_class) {
        std::shuffle(members.begin(), members.end(), rng);
        const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(members.size())));
        out.test.insert(out.test.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_test));
        out.train.insert(out.train.end(), members.begin() + static_cast<std::ptrdiff_t>(n_test), members.end());
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

} // namespace citypulse
