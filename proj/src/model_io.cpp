#include "citypulse/datagen.hpp"
#include "citypulse/error.hpp"
#include "citypulse/learner.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace citypulse {

// Text layout, one record per line, doubles in shortest round-trip form:
//
//   citypulse-model 1
//   mean <4 doubles>
//   scale <4 doubles>
//   clusters <k>
//   centroid <label> <4 doubles>          (k lines, standardized space)
//   trees <n>
//   tree <node count>
//   <feature> <threshold> <left> <right> <label> <c0> <c1> <c2> <impurity_decrease>
//
// A model may carry no labeler (clusters 0).

namespace {

void write_vector(std::ostream& out, const FeatureVector& v) {
    for (double d : v) out << ' ' << format_double(d);
}

class LineReader {
public:
    explicit LineReader(std::istream& in) : in_(in) {}

    std::istringstream next(std::string_view expect_tag) {
        std::string line;
        if (!std::getline(in_, line)) throw ParseError(line_ + 1, "unexpected end of model file");
        ++line_;
        std::istringstream ss(line);
        if (!expect_tag.empty()) {
            std::string tag;
            ss >> tag;
            if (tag != expect_tag) throw ParseError(line_, "expected '" + std::string(expect_tag) + "', got '" + tag + "'");
        }
        return ss;
    }

    double read_double(std::istringstream& ss) {
        std::string tok;
        if (!(ss >> tok)) throw ParseError(line_, "missing number");
        double v = 0.0;
        auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (ec != std::errc{} || ptr != tok.data() + tok.size()) throw ParseError(line_, "bad number '" + tok + "'");
        return v;
    }

    template <typename T>
    T read_int(std::istringstream& ss) {
        long long v = 0;
        if (!(ss >> v)) throw ParseError(line_, "missing integer");
        return static_cast<T>(v);
    }

    CongestionLabel read_label(std::istringstream& ss) {
        std::string tok;
        ss >> tok;
        auto l = label_from_string(tok);
        if (!l) throw ParseError(line_, "bad label '" + tok + "'");
        return *l;
    }

    FeatureVector read_vector(std::istringstream& ss) {
        FeatureVector v;
        for (auto& d : v) d = read_double(ss);
        return v;
    }

    std::size_t line() const noexcept { return line_; }

private:
    std::istream& in_;
    std::size_t line_ = 0;
};

} // namespace

void write_model(std::ostream& out, const ModelArtifact& model) {
    const auto& km = model.labeler.model();
    out << kModelMagic << ' ' << kModelVersion << '\n';
    out << "mean";
    write_vector(out, km.stats.mean);
    out << "\nscale";
    write_vector(out, km.stats.scale);
    out << "\nclusters " << km.centroids.size() << '\n';
    for (std::size_t c = 0; c < km.centroids.size(); ++c) {
        out << "centroid " << to_string(model.labeler.label_map()[c]);
        write_vector(out, km.centroids[c]);
        out << '\n';
    }
    out << "trees " << model.forest.trees.size() << '\n';
    for (const auto& tree : model.forest.trees) {
        out << "tree " << tree.nodes().size() << '\n';
        for (const auto& n : tree.nodes()) {
            out << n.feature << ' ' << format_double(n.threshold) << ' ' << n.left << ' ' << n.right << ' '
                << to_string(n.label) << ' ' << n.counts[0] << ' ' << n.counts[1] << ' ' << n.counts[2] << ' '
                << format_double(n.impurity_decrease) << '\n';
        }
    }
}

ModelArtifact read_model(std::istream& in) {
    LineReader reader(in);
    {
        auto ss = reader.next(kModelMagic);
        const int version = reader.read_int<int>(ss);
        if (version != kModelVersion) throw ParseError(1, "unsupported model version " + std::to_string(version));
    }
    KMeansModel km;
    {
        auto ss = reader.next("mean");
        km.stats.mean = reader.read_vector(ss);
    }
    {
        auto ss = reader.next("scale");
        km.stats.scale = reader.read_vector(ss);
    }
    std::vector<CongestionLabel> label_map;
    {
        auto ss = reader.next("clusters");
        const auto k = reader.read_int<std::size_t>(ss);
        for (std::size_t c = 0; c < k; ++c) {
            auto cs = reader.next("centroid");
            label_map.push_back(reader.read_label(cs));
            km.centroids.push_back(reader.read_vector(cs));
        }
    }

    ModelArtifact model;
    if (!km.centroids.empty()) model.labeler = CongestionLabeler(std::move(km), std::move(label_map));

    auto ts = reader.next("trees");
    const auto n_trees = reader.read_int<std::size_t>(ts);
    for (std::size_t t = 0; t < n_trees; ++t) {
        auto hs = reader.next("tree");
        const auto n_nodes = reader.read_int<std::size_t>(hs);
        std::vector<TreeNode> nodes(n_nodes);
        for (auto& n : nodes) {
            auto ns = reader.next("");
            n.feature = reader.read_int<int>(ns);
            n.threshold = reader.read_double(ns);
            n.left = reader.read_int<int>(ns);
            n.right = reader.read_int<int>(ns);
            n.label = reader.read_label(ns);
            for (auto& c : n.counts) c = reader.read_int<std::uint32_t>(ns);
            n.impurity_decrease = reader.read_double(ns);
            const auto limit = static_cast<int>(n_nodes);
            if (n.feature >= static_cast<int>(kNumFeatures) ||
                (n.feature >= 0 && (n.left <= 0 || n.left >= limit || n.right <= 0 || n.right >= limit)))
                throw ParseError(reader.line(), "malformed tree node");
        }
        model.forest.trees.emplace_back(std::move(nodes));
    }
    return model;
}

void save_model(const std::filesystem::path& path, const ModelArtifact& model) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw StorageError("cannot open " + path.string() + " for writing");
    write_model(out, model);
    out.flush();
    if (!out) throw StorageError("write failed for " + path.string());
}

ModelArtifact load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StorageError("cannot open " + path.string());
    return read_model(in);
}

} // namespace citypulse
