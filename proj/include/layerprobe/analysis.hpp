#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "layerprobe/explain.hpp"

namespace layerprobe {

// ---------------------------------------------------------------------------
// Compromise thresholds (medians of the Gaussian-noise deviations)
// ---------------------------------------------------------------------------

using LayerStrengthKey = std::pair<std::string, float>;

struct CompromiseThresholds {
    std::map<LayerStrengthKey, double> values;

    double at(const std::string& layer, float strength) const {
        auto it = values.find({layer, strength});
        if (it == values.end()) {
            throw DataError("no compromise threshold for layer '" + layer + "' at strength " +
                            std::to_string(strength));
        }
        return it->second;
    }
};

/// Median with the even-count convention: mean of the two middle order
/// statistics.
inline double median_of(std::vector<double> v) {
    if (v.empty()) throw DataError("median of an empty set");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Threshold per (layer, strength) = median of D_g over the corpus. Every
/// layer seen in the corpus must have records at every strength seen.
inline CompromiseThresholds compute_thresholds(const std::vector<DeviationRecord>& records) {
    if (records.empty()) throw DataError("cannot compute thresholds from an empty corpus");
    std::map<LayerStrengthKey, std::vector<double>> groups;
    std::map<std::string, bool> layers;
    std::map<float, bool> strengths;
    for (const DeviationRecord& r : records) {
        strengths[r.strength] = true;
        for (const LayerDeviation& l : r.layers) {
            layers[l.layer] = true;
            groups[{l.layer, r.strength}].push_back(l.d_g);
        }
    }
    for (const auto& [layer, unused_l] : layers) {
        for (const auto& [strength, unused_s] : strengths) {
            if (groups.find({layer, strength}) == groups.end()) {
                throw DataError("no deviation records for layer '" + layer + "' at strength " +
                                std::to_string(strength));
            }
        }
    }
    CompromiseThresholds t;
    for (auto& [key, values] : groups) t.values[key] = median_of(std::move(values));
    return t;
}

// ---------------------------------------------------------------------------
// Compromise marking and statistics
// ---------------------------------------------------------------------------

struct LayerMark {
    std::string layer;
    bool compromised = false;
};

/// A layer is compromised iff its D_a falls strictly below the threshold;
/// equality does not count as "deviating more severely".
inline std::vector<LayerMark> mark_compromised(const DeviationRecord& record,
                                               const CompromiseThresholds& thresholds) {
    std::vector<LayerMark> marks;
    marks.reserve(record.layers.size());
    for (const LayerDeviation& l : record.layers) {
        marks.push_back({l.layer, l.d_a < thresholds.at(l.layer, record.strength)});
    }
    return marks;
}

struct MarkedRecord {
    int seed_id = -1;
    float strength = 1.0f;
    std::vector<LayerMark> marks;
};

inline std::vector<MarkedRecord> mark_corpus(const std::vector<DeviationRecord>& records,
                                             const CompromiseThresholds& thresholds) {
    std::vector<MarkedRecord> out;
    out.reserve(records.size());
    for (const DeviationRecord& r : records) {
        out.push_back({r.seed_id, r.strength, mark_compromised(r, thresholds)});
    }
    return out;
}

/// Fraction of examples that mark each (layer, strength) compromised.
inline std::map<LayerStrengthKey, double> compromise_probability(
    const std::vector<MarkedRecord>& marked) {
    if (marked.empty()) throw DataError("cannot compute compromise probabilities of an empty corpus");
    std::map<LayerStrengthKey, std::pair<long, long>> counts;  // compromised, total
    for (const MarkedRecord& r : marked) {
        for (const LayerMark& m : r.marks) {
            auto& c = counts[{m.layer, r.strength}];
            c.first += m.compromised ? 1 : 0;
            c.second += 1;
        }
    }
    std::map<LayerStrengthKey, double> out;
    for (const auto& [key, c] : counts) {
        out[key] = static_cast<double>(c.first) / static_cast<double>(c.second);
    }
    return out;
}

struct CompromiseHistogram {
    std::vector<long> bins;  // bins[k] = examples with exactly k compromised layers
    long ultimate = 0;       // examples compromising every layer
    long zero = 0;           // examples compromising none

    long total() const {
        long t = 0;
        for (long b : bins) t += b;
        return t;
    }
};

/// Distribution of compromised-layer counts per example at one strength.
inline CompromiseHistogram compromised_count_histogram(const std::vector<MarkedRecord>& marked,
                                                       float strength, int num_layers) {
    if (marked.empty()) throw DataError("cannot build a histogram from an empty corpus");
    CompromiseHistogram h;
    h.bins.assign(static_cast<std::size_t>(num_layers) + 1, 0);
    for (const MarkedRecord& r : marked) {
        if (r.strength != strength) continue;
        int k = 0;
        for (const LayerMark& m : r.marks) k += m.compromised ? 1 : 0;
        h.bins.at(static_cast<std::size_t>(k)) += 1;
    }
    h.zero = h.bins.front();
    h.ultimate = h.bins.back();
    return h;
}

// ---------------------------------------------------------------------------
// Vulnerability ranking and report
// ---------------------------------------------------------------------------

struct VulnerabilityReport {
    std::vector<std::string> layer_order;                    // model conv order
    std::vector<float> strengths;                            // ascending
    CompromiseThresholds thresholds;
    std::map<LayerStrengthKey, double> probabilities;
    std::map<float, CompromiseHistogram> histograms;
    std::map<LayerStrengthKey, double> mean_d_a;
    std::map<LayerStrengthKey, double> mean_d_g;
    std::vector<std::string> ranking;                        // most vulnerable first
    long corpus_size = 0;                                    // successful examples
    long ultimate_examples = 0;                              // at strength 1
    long zero_compromise = 0;                                // at strength 1
};

/// Layers sorted by descending compromise probability at strength 1; ties
/// broken by ascending mean D_a at strength 1, then by layer depth order.
inline std::vector<std::string> rank_vulnerable_layers(
    const std::vector<std::string>& layer_order,
    const std::map<LayerStrengthKey, double>& probabilities,
    const std::map<LayerStrengthKey, double>& mean_d_a, float reference_strength = 1.0f) {
    struct Row {
        std::string layer;
        double prob;
        double mean_da;
        int depth;
    };
    std::vector<Row> rows;
    for (std::size_t i = 0; i < layer_order.size(); ++i) {
        auto p = probabilities.find({layer_order[i], reference_strength});
        auto d = mean_d_a.find({layer_order[i], reference_strength});
        if (p == probabilities.end() || d == mean_d_a.end()) {
            throw DataError("vulnerability ranking requires records at the reference strength for '" +
                            layer_order[i] + "'");
        }
        rows.push_back({layer_order[i], p->second, d->second, static_cast<int>(i)});
    }
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        if (a.prob != b.prob) return a.prob > b.prob;
        if (a.mean_da != b.mean_da) return a.mean_da < b.mean_da;
        return a.depth < b.depth;
    });
    std::vector<std::string> out;
    out.reserve(rows.size());
    for (const Row& r : rows) out.push_back(r.layer);
    return out;
}

/// Aggregates a corpus of deviation records (successful adversarial examples
/// only) into the full per-layer vulnerability statistics.
inline VulnerabilityReport build_vulnerability_report(const std::vector<DeviationRecord>& records,
                                                      float reference_strength = 1.0f) {
    if (records.empty()) throw DataError("cannot analyze an empty corpus");
    VulnerabilityReport rep;
    for (const LayerDeviation& l : records.front().layers) rep.layer_order.push_back(l.layer);

    std::map<float, bool> strengths;
    for (const DeviationRecord& r : records) strengths[r.strength] = true;
    for (const auto& [s, unused] : strengths) rep.strengths.push_back(s);

    rep.thresholds = compute_thresholds(records);
    const std::vector<MarkedRecord> marked = mark_corpus(records, rep.thresholds);
    rep.probabilities = compromise_probability(marked);

    std::map<LayerStrengthKey, std::pair<double, long>> acc_a, acc_g;
    std::map<float, long> per_strength_count;
    for (const DeviationRecord& r : records) {
        per_strength_count[r.strength] += 1;
        for (const LayerDeviation& l : r.layers) {
            auto& a = acc_a[{l.layer, r.strength}];
            a.first += l.d_a;
            a.second += 1;
            auto& g = acc_g[{l.layer, r.strength}];
            g.first += l.d_g;
            g.second += 1;
        }
    }
    for (const auto& [key, a] : acc_a) rep.mean_d_a[key] = a.first / static_cast<double>(a.second);
    for (const auto& [key, g] : acc_g) rep.mean_d_g[key] = g.first / static_cast<double>(g.second);

    const int num_layers = static_cast<int>(rep.layer_order.size());
    for (float s : rep.strengths) {
        rep.histograms[s] = compromised_count_histogram(marked, s, num_layers);
    }

    rep.ranking = rank_vulnerable_layers(rep.layer_order, rep.probabilities, rep.mean_d_a,
                                         reference_strength);
    rep.corpus_size = per_strength_count.count(reference_strength)
                          ? per_strength_count[reference_strength]
                          : static_cast<long>(records.size());
    if (rep.histograms.count(reference_strength)) {
        rep.ultimate_examples = rep.histograms[reference_strength].ultimate;
        rep.zero_compromise = rep.histograms[reference_strength].zero;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Coverage curves
// ---------------------------------------------------------------------------

struct CoverageCurve {
    std::string mode;  // "adversarial" | "random"
    float strength = 1.0f;
    std::vector<std::pair<long, double>> points;  // (iteration, coverage ratio)
};

struct CoverageRun {
    std::string mode;
    float strength = 1.0f;
    std::vector<double> ratios;  // per-iteration coverage
};

/// One curve per (mode, strength); runs with the same key are concatenated in
/// input order. Non-monotone coverage signals a tracking bug upstream.
inline std::vector<CoverageCurve> build_coverage_curves(const std::vector<CoverageRun>& runs) {
    std::vector<CoverageCurve> curves;
    auto find_curve = [&](const std::string& mode, float strength) -> CoverageCurve& {
        for (CoverageCurve& c : curves) {
            if (c.mode == mode && c.strength == strength) return c;
        }
        curves.push_back({mode, strength, {}});
        return curves.back();
    };
    for (const CoverageRun& run : runs) {
        CoverageCurve& c = find_curve(run.mode, run.strength);
        for (double r : run.ratios) {
            if (!c.points.empty() && r < c.points.back().second) {
                throw DataError("coverage curve '" + run.mode + "' decreased from " +
                                std::to_string(c.points.back().second) + " to " + std::to_string(r));
            }
            c.points.emplace_back(static_cast<long>(c.points.size()), r);
        }
    }
    return curves;
}

}  // namespace layerprobe
