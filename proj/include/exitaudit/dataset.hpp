#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "exitaudit/rng.hpp"

namespace exitaudit {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct CsvError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TabularDataset {
    Matrix features;          // n x d
    std::vector<int> labels;  // values in [0, n_classes)
    int n_classes = 0;
    std::string name;

    int n() const { return static_cast<int>(features.rows()); }
    int dim() const { return static_cast<int>(features.cols()); }
};

// Stand-in for the Purchases/Locations/Texas sources: one random binary
// prototype per class, samples are the prototype with bits flipped
// independently at prototype_flip_prob.
struct SynthConfig {
    int n_classes = 100;
    int n_features = 600;
    int samples_per_class = 80;
    double prototype_flip_prob = 0.35;
    std::uint64_t seed = 0;
    std::string name = "synthetic";
};

inline void validate(const SynthConfig& cfg) {
    if (cfg.n_classes < 1 || cfg.n_features < 1 || cfg.samples_per_class < 1)
        throw std::invalid_argument("synth config: dimensions must be positive");
    if (!(cfg.prototype_flip_prob >= 0.0 && cfg.prototype_flip_prob < 0.5))
        throw std::invalid_argument("synth config: flip probability must be in [0, 0.5)");
}

inline TabularDataset synth_generate(const SynthConfig& cfg) {
    validate(cfg);
    Rng rng(cfg.seed);
    Matrix prototypes(cfg.n_classes, cfg.n_features);
    for (int c = 0; c < cfg.n_classes; ++c)
        for (int j = 0; j < cfg.n_features; ++j) prototypes(c, j) = rng.below(2) ? 1.0 : 0.0;

    const int n = cfg.n_classes * cfg.samples_per_class;
    TabularDataset ds;
    ds.features.resize(n, cfg.n_features);
    ds.labels.resize(n);
    ds.n_classes = cfg.n_classes;
    ds.name = cfg.name;
    int row = 0;
    for (int c = 0; c < cfg.n_classes; ++c) {
        for (int s = 0; s < cfg.samples_per_class; ++s, ++row) {
            ds.labels[row] = c;
            for (int j = 0; j < cfg.n_features; ++j) {
                const bool flip = rng.uniform() < cfg.prototype_flip_prob;
                ds.features(row, j) = flip ? 1.0 - prototypes(c, j) : prototypes(c, j);
            }
        }
    }
    return ds;
}

// Distribution-shifted shadow data: fresh prototypes under shift_seed and a
// flip probability raised by 0.05, same shape and class count.
inline TabularDataset shifted_variant(const SynthConfig& cfg, std::uint64_t shift_seed) {
    SynthConfig shifted = cfg;
    shifted.seed = shift_seed;
    shifted.prototype_flip_prob = std::min(cfg.prototype_flip_prob + 0.05, 0.499);
    shifted.name = cfg.name + "-shifted";
    return synth_generate(shifted);
}

struct FourWaySplit {
    std::vector<int> target_train, target_test, shadow_train, shadow_test;
};

// Uniformly random disjoint quarters, sizes equal up to the remainder.
inline FourWaySplit split_four(int n, std::uint64_t seed) {
    if (n < 4) throw std::invalid_argument("split_four: need at least 4 samples");
    Rng rng(seed);
    std::vector<int> idx = rng.permutation(n);
    const int base = n / 4;
    const int rem = n % 4;
    FourWaySplit split;
    std::vector<int>* parts[4] = {&split.target_train, &split.target_test, &split.shadow_train,
                                  &split.shadow_test};
    int pos = 0;
    for (int p = 0; p < 4; ++p) {
        const int size = base + (p < rem ? 1 : 0);
        parts[p]->assign(idx.begin() + pos, idx.begin() + pos + size);
        pos += size;
    }
    return split;
}

inline FourWaySplit split_four(const TabularDataset& ds, std::uint64_t seed) {
    return split_four(ds.n(), seed);
}

inline TabularDataset subset(const TabularDataset& ds, const std::vector<int>& idx) {
    TabularDataset out;
    out.features.resize(static_cast<int>(idx.size()), ds.dim());
    out.labels.resize(idx.size());
    out.n_classes = ds.n_classes;
    out.name = ds.name;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        out.features.row(static_cast<int>(i)) = ds.features.row(idx[i]);
        out.labels[i] = ds.labels[idx[i]];
    }
    return out;
}

inline Matrix rows(const Matrix& m, const std::vector<int>& idx) {
    Matrix out(static_cast<int>(idx.size()), m.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<int>(i)) = m.row(idx[i]);
    return out;
}

inline std::vector<int> gather(const std::vector<int>& values, const std::vector<int>& idx) {
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = values[idx[i]];
    return out;
}

namespace detail {

inline std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    return fields;
}

}  // namespace detail

// CSV with a header row; the label column is selected by name, every other
// column is a numeric feature. n_classes is inferred as max(label)+1.
inline TabularDataset load_csv(const std::string& path, const std::string& label_column = "label") {
    std::ifstream in(path);
    if (!in) throw CsvError("load_csv: cannot open " + path);

    std::string line;
    if (!std::getline(in, line)) throw CsvError("load_csv: " + path + " is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = detail::split_line(line);
    int label_col = -1;
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == label_column) label_col = static_cast<int>(i);
    if (label_col < 0)
        throw CsvError("load_csv: label column '" + label_column + "' not found in header");

    const int width = static_cast<int>(header.size());
    std::vector<std::vector<double>> feat_rows;
    std::vector<int> labels;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = detail::split_line(line);
        if (static_cast<int>(fields.size()) != width)
            throw CsvError("load_csv: line " + std::to_string(line_no) + ": expected " +
                           std::to_string(width) + " fields, got " + std::to_string(fields.size()));
        std::vector<double> feat;
        feat.reserve(width - 1);
        for (int col = 0; col < width; ++col) {
            const std::string& cell = fields[col];
            if (cell.empty())
                throw CsvError("load_csv: line " + std::to_string(line_no) + ", column '" +
                               header[col] + "': missing value");
            std::size_t consumed = 0;
            double value = 0.0;
            try {
                value = std::stod(cell, &consumed);
            } catch (const std::exception&) {
                throw CsvError("load_csv: line " + std::to_string(line_no) + ", column '" +
                               header[col] + "': cannot parse '" + cell + "'");
            }
            if (consumed != cell.size())
                throw CsvError("load_csv: line " + std::to_string(line_no) + ", column '" +
                               header[col] + "': cannot parse '" + cell + "'");
            if (col == label_col) {
                const long long lab = std::llround(value);
                if (static_cast<double>(lab) != value || lab < 0)
                    throw CsvError("load_csv: line " + std::to_string(line_no) +
                                   ": label must be a nonnegative integer, got '" + cell + "'");
                labels.push_back(static_cast<int>(lab));
            } else {
                feat.push_back(value);
            }
        }
        feat_rows.push_back(std::move(feat));
    }
    if (feat_rows.empty()) throw CsvError("load_csv: " + path + " has a header but no rows");

    TabularDataset ds;
    ds.features.resize(static_cast<int>(feat_rows.size()), width - 1);
    for (std::size_t i = 0; i < feat_rows.size(); ++i)
        for (int j = 0; j < width - 1; ++j) ds.features(static_cast<int>(i), j) = feat_rows[i][j];
    ds.labels = std::move(labels);
    ds.n_classes = *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
    ds.name = path;
    return ds;
}

inline void write_csv(const TabularDataset& ds, const std::string& path,
                      const std::string& label_column = "label") {
    std::ofstream out(path);
    if (!out) throw CsvError("write_csv: cannot open " + path);
    for (int j = 0; j < ds.dim(); ++j) out << 'f' << j << ',';
    out << label_column << '\n';
    char buf[64];
    for (int i = 0; i < ds.n(); ++i) {
        for (int j = 0; j < ds.dim(); ++j) {
            // max_digits10 so the text round-trips to the identical double
            std::snprintf(buf, sizeof(buf), "%.17g", ds.features(i, j));
            out << buf << ',';
        }
        out << ds.labels[i] << '\n';
    }
}

}  // namespace exitaudit
