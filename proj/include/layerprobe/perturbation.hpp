#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "layerprobe/model.hpp"
#include "layerprobe/rng.hpp"

namespace layerprobe {

inline Tensor clip01(Tensor t) {
    for (float& v : t.data) v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    return t;
}

// ---------------------------------------------------------------------------
// Attack configuration
// ---------------------------------------------------------------------------

enum class NeuronStrategy { Rare, NearThreshold, Random };

inline const char* neuron_strategy_name(NeuronStrategy s) {
    switch (s) {
        case NeuronStrategy::Rare: return "rare";
        case NeuronStrategy::NearThreshold: return "near-threshold";
        case NeuronStrategy::Random: return "random";
    }
    return "?";
}

inline NeuronStrategy neuron_strategy_from_name(const std::string& name) {
    if (name == "rare") return NeuronStrategy::Rare;
    if (name == "near-threshold") return NeuronStrategy::NearThreshold;
    if (name == "random") return NeuronStrategy::Random;
    throw ConfigError("unknown neuron selection strategy '" + name + "'");
}

enum class PerturbationNorm { MaxNorm, L2 };

struct AttackConfig {
    float delta = 0.1f;                 // perturbation budget, pixels in [0,1]
    float lambda = 1.0f;                // coverage term weight
    int top_k = 3;                      // candidate predictions in the objective
    int monitored_neurons = 10;         // m
    float step_size = 0.01f;            // delta / 10
    int max_iterations = 50;
    float activation_threshold = 0.25f; // coverage firing level t
    NeuronStrategy strategy = NeuronStrategy::NearThreshold;
    PerturbationNorm norm = PerturbationNorm::MaxNorm;
    std::vector<float> amplification_ratios = {0.25f, 0.5f, 1.0f, 2.0f, 4.0f};

    void validate() const {
        if (!(delta > 0.0f)) throw ConfigError("attack delta must be positive");
        if (top_k < 1) throw ConfigError("attack top_k must be at least 1");
        if (monitored_neurons < 0) throw ConfigError("attack monitored_neurons must be non-negative");
        if (max_iterations < 1) throw ConfigError("attack max_iterations must be at least 1");
        if (!(step_size > 0.0f)) throw ConfigError("attack step_size must be positive");
        if (amplification_ratios.empty()) throw ConfigError("attack needs at least one amplification ratio");
        for (float r : amplification_ratios) {
            if (!(r > 0.0f)) throw ConfigError("amplification ratios must be positive");
        }
    }
};

// ---------------------------------------------------------------------------
// Matched Gaussian noise and input composition
// ---------------------------------------------------------------------------

struct NoiseStats {
    double mean = 0.0;    // mu_a
    double stddev = 0.0;  // sigma_a, population convention
    std::vector<int> shape;
};

inline NoiseStats noise_stats(const Tensor& n_a) {
    if (n_a.numel() == 0) throw PreconditionError("noise statistics of an empty tensor");
    return {mean_of(n_a), stddev_of(n_a), n_a.shape};
}

/// Draws N_g i.i.d. from Normal(mean(N_a), std(N_a)) with the shape of N_a.
inline Tensor match_gaussian_noise(const Tensor& n_a, std::uint64_t seed) {
    const NoiseStats s = noise_stats(n_a);
    Rng rng(seed);
    Tensor out(n_a.shape);
    for (float& v : out.data) v = static_cast<float>(rng.normal(s.mean, s.stddev));
    return out;
}

/// Scales a pre-clip perturbation by the strength ratio.
inline Tensor amplify(const Tensor& noise, float ratio) {
    if (!(ratio > 0.0f)) throw PreconditionError("amplification ratio must be positive");
    Tensor out = noise;
    for (float& v : out.data) v *= ratio;
    return out;
}

struct InputTriple {
    Tensor seed;         // S, untouched
    Tensor adversarial;  // clip(S + ratio * N_a)
    Tensor noisy;        // clip(S + ratio * N_g)
};

inline InputTriple compose_inputs(const Tensor& seed, const Tensor& n_a, const Tensor& n_g,
                                  float ratio) {
    require_same_shape(seed, n_a, "compose_inputs adversarial noise");
    require_same_shape(seed, n_g, "compose_inputs gaussian noise");
    if (!(ratio > 0.0f)) throw PreconditionError("composition ratio must be positive");
    InputTriple t;
    t.seed = seed;
    t.adversarial = seed;
    t.noisy = seed;
    for (std::size_t i = 0; i < seed.numel(); ++i) {
        t.adversarial.data[i] += ratio * n_a.data[i];
        t.noisy.data[i] += ratio * n_g.data[i];
    }
    t.adversarial = clip01(std::move(t.adversarial));
    t.noisy = clip01(std::move(t.noisy));
    return t;
}

// ---------------------------------------------------------------------------
// Neuron coverage
// ---------------------------------------------------------------------------

/// Tracks which monitored neurons (conv channels, identified by global index
/// in model order) have ever fired. Firing compares the per-layer min-max
/// scaled channel-mean activation against the threshold.
struct CoverageState {
    int total = 0;
    std::vector<char> fired;
    std::vector<long> fire_counts;  // historical firing events, for the "rare" strategy
    float threshold = 0.25f;

    double ratio() const {
        if (total == 0) return 0.0;
        long n = 0;
        for (char f : fired) n += f;
        return static_cast<double>(n) / static_cast<double>(total);
    }

    /// Order-independent merge: OR of fired flags, sum of counts.
    void merge(const CoverageState& other) {
        if (other.total != total) throw IndexError("cannot merge coverage states of different sizes");
        for (int i = 0; i < total; ++i) {
            fired[i] = fired[i] || other.fired[i];
            fire_counts[i] += other.fire_counts[i];
        }
    }
};

inline CoverageState make_coverage_state(const ModelSpec& spec, float threshold) {
    CoverageState s;
    for (const LayerSpec& l : spec.layers) {
        if (l.kind == LayerKind::Conv) s.total += l.out_channels;
    }
    s.fired.assign(s.total, 0);
    s.fire_counts.assign(s.total, 0);
    s.threshold = threshold;
    return s;
}

/// Per-layer min-max scaling of a channel-mean vector; a constant vector
/// scales to all zeros.
inline std::vector<float> scale_layer_activations(const Tensor& channel_means) {
    const auto [mn_it, mx_it] =
        std::minmax_element(channel_means.data.begin(), channel_means.data.end());
    const float mn = *mn_it, mx = *mx_it;
    std::vector<float> out(channel_means.numel());
    if (mx > mn) {
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = (channel_means.data[i] - mn) / (mx - mn);
        }
    }
    return out;
}

/// Sets fired flags where the scaled activation exceeds the threshold.
/// Returns the ids that fired in this update (for curve bookkeeping).
inline std::vector<int> update_coverage(CoverageState& state, const ActivationCapture& capture) {
    int expected = 0;
    for (const LayerActivation& l : capture.layers) expected += l.channel_means.dim(0);
    if (expected != state.total) {
        throw IndexError("capture reports " + std::to_string(expected) + " neurons, coverage tracks " +
                         std::to_string(state.total));
    }
    std::vector<int> fired_now;
    int offset = 0;
    for (const LayerActivation& l : capture.layers) {
        const std::vector<float> scaled = scale_layer_activations(l.channel_means);
        for (std::size_t c = 0; c < scaled.size(); ++c) {
            if (scaled[c] > state.threshold) {
                const int id = offset + static_cast<int>(c);
                fired_now.push_back(id);
                state.fired[id] = 1;
                ++state.fire_counts[id];
            }
        }
        offset += l.channel_means.dim(0);
    }
    return fired_now;
}

/// Picks m distinct monitored neurons. "rare" ranks by lowest historical
/// firing count, "near-threshold" by raw activation closest below the
/// threshold, "random" uniformly; all tie-break by ascending id.
inline std::vector<int> select_neurons(const ActivationCapture& capture, NeuronStrategy strategy,
                                       int m, float threshold, const CoverageState& history,
                                       Rng& rng) {
    const int total = capture.total_neurons();
    if (m > total) {
        throw ConfigError("cannot select " + std::to_string(m) + " neurons from " +
                          std::to_string(total));
    }
    if (m <= 0) return {};

    std::vector<int> ids(total);
    for (int i = 0; i < total; ++i) ids[i] = i;

    switch (strategy) {
        case NeuronStrategy::Rare: {
            if (history.total != total) throw IndexError("coverage history does not match capture");
            std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
                return history.fire_counts[a] < history.fire_counts[b];
            });
            break;
        }
        case NeuronStrategy::NearThreshold: {
            std::vector<float> act(total);
            int offset = 0;
            for (const LayerActivation& l : capture.layers) {
                for (int c = 0; c < l.channel_means.dim(0); ++c) {
                    act[offset + c] = l.channel_means.data[c];
                }
                offset += l.channel_means.dim(0);
            }
            auto key = [&](int id) {
                const float a = act[id];
                // below-threshold neurons first, nearest the threshold
                return a < threshold ? std::make_pair(0, threshold - a)
                                     : std::make_pair(1, a - threshold);
            };
            std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return key(a) < key(b); });
            break;
        }
        case NeuronStrategy::Random: {
            for (int i = 0; i < m; ++i) {
                const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(total - i)));
                std::swap(ids[i], ids[j]);
            }
            break;
        }
    }
    ids.resize(m);
    std::sort(ids.begin(), ids.end());
    return ids;
}

// ---------------------------------------------------------------------------
// Adversarial example generation (coverage-guided projected gradient ascent)
// ---------------------------------------------------------------------------

struct AdversarialExample {
    int seed_id = -1;
    Tensor perturbation;  // N_a at strength 1, pre-clip, max-norm <= delta
    float strength = 1.0f;
    int original_label = -1;
    int adversarial_label = -1;
    bool success = false;
    int iterations = 0;
};

struct AttackRun {
    AdversarialExample example;
    std::vector<double> coverage_curve;            // run-local ratio after each forward pass
    std::vector<std::vector<int>> fired_by_step;   // neuron ids fired at each forward pass
};

namespace detail {

inline ActivationCapture capture_channel_means(GradTape& tape, const TapeForward& f) {
    ActivationCapture cap;
    cap.captured = true;
    for (const TapeForward::ConvNode& c : f.convs) {
        cap.layers.push_back({c.name, Tensor{}, Tensor{}, tape.value(c.channel_mean_id)});
    }
    return cap;
}

}  // namespace detail

/// Maximizes sum(top-K rival logits) - original logit + lambda * sum(selected
/// neuron activations) over the perturbation, projecting onto the norm ball
/// of radius delta after every step and clipping the composed image to [0,1].
/// The ascent direction is the objective gradient normalized by its RMS so
/// the fixed step size is meaningful across scales.
///
/// Coverage is tracked run-locally on top of `history`; the caller merges the
/// returned firing records into campaign-level state, which keeps results
/// identical for any worker count.
inline AttackRun generate_adversarial(const Model& model, const Tensor& seed_image, int true_label,
                                      const AttackConfig& cfg, const CoverageState& history,
                                      std::uint64_t rng_seed, int seed_id = -1) {
    cfg.validate();
    check_model_input(model, seed_image);
    if (history.threshold != cfg.activation_threshold) {
        throw ConfigError("coverage state threshold does not match attack config");
    }

    AttackRun run;
    run.example.seed_id = seed_id;
    run.example.original_label = true_label;
    run.example.adversarial_label = true_label;
    run.example.perturbation = Tensor(seed_image.shape);

    CoverageState local = history;
    Rng rng(rng_seed);
    Tensor perturb(seed_image.shape);

    auto project = [&](Tensor& p) {
        if (cfg.norm == PerturbationNorm::MaxNorm) {
            for (float& v : p.data) {
                v = v < -cfg.delta ? -cfg.delta : (v > cfg.delta ? cfg.delta : v);
            }
        } else {
            double sq = 0.0;
            for (float v : p.data) sq += static_cast<double>(v) * v;
            const double norm = std::sqrt(sq);
            if (norm > cfg.delta) {
                const float s = static_cast<float>(cfg.delta / norm);
                for (float& v : p.data) v *= s;
            }
        }
    };

    std::vector<int> candidates;
    for (int step = 0; step <= cfg.max_iterations; ++step) {
        Tensor x = seed_image;
        if (step > 0) {
            for (std::size_t i = 0; i < x.numel(); ++i) x.data[i] += perturb.data[i];
            x = clip01(std::move(x));
        }

        GradTape tape;
        TapeForward f = model_forward_tape(model, tape, x);
        const Prediction pred = make_prediction(tape.value(f.logits_id));
        const ActivationCapture cap = detail::capture_channel_means(tape, f);
        run.fired_by_step.push_back(update_coverage(local, cap));
        run.coverage_curve.push_back(local.ratio());

        if (step == 0) {
            if (pred.predicted_class != true_label) {
                throw PreconditionError("attack seed is not classified as its true label (" +
                                        std::to_string(pred.predicted_class) + " vs " +
                                        std::to_string(true_label) + ")");
            }
            candidates = pred.top_candidates(cfg.top_k, true_label);
        } else if (pred.predicted_class != true_label) {
            run.example.success = true;
            run.example.adversarial_label = pred.predicted_class;
            run.example.iterations = step;
            run.example.perturbation = perturb;
            return run;
        }
        if (step == cfg.max_iterations) break;

        std::vector<GradTape::GatherTerm> terms;
        for (int c : candidates) terms.push_back({f.logits_id, c, 1.0f});
        terms.push_back({f.logits_id, true_label, -1.0f});
        if (cfg.monitored_neurons > 0) {
            const std::vector<int> selected =
                select_neurons(cap, cfg.strategy, cfg.monitored_neurons, cfg.activation_threshold,
                               local, rng);
            for (int id : selected) {
                int offset = id;
                for (const TapeForward::ConvNode& c : f.convs) {
                    if (offset < c.channels) {
                        terms.push_back({c.channel_mean_id, offset, cfg.lambda});
                        break;
                    }
                    offset -= c.channels;
                }
            }
        }
        GradTape::Id objective = tape.weighted_sum(std::move(terms));
        tape.backward(objective);
        const Tensor& g = tape.grad(f.input_id);

        double sq = 0.0;
        for (float v : g.data) sq += static_cast<double>(v) * v;
        const double rms = std::sqrt(sq / static_cast<double>(g.numel()));
        if (rms == 0.0) {
            run.example.iterations = step;  // flat objective, nothing to ascend
            run.example.perturbation = perturb;
            return run;
        }

        const float scale = static_cast<float>(cfg.step_size / rms);
        for (std::size_t i = 0; i < perturb.numel(); ++i) perturb.data[i] += scale * g.data[i];
        project(perturb);
    }

    run.example.success = false;
    run.example.iterations = cfg.max_iterations;
    run.example.perturbation = perturb;
    return run;
}

/// Control run: the same number of forward passes as a paired attack, each on
/// the seed composed with a fresh matched Gaussian sample.
inline AttackRun random_coverage_run(const Model& model, const Tensor& seed_image,
                                     const NoiseStats& stats, int forward_passes,
                                     const CoverageState& history, std::uint64_t rng_seed) {
    if (forward_passes < 1) throw ConfigError("coverage run needs at least one forward pass");
    AttackRun run;
    CoverageState local = history;
    Rng rng(rng_seed);
    for (int step = 0; step < forward_passes; ++step) {
        Tensor x = seed_image;
        if (step > 0) {
            for (float& v : x.data) v += static_cast<float>(rng.normal(stats.mean, stats.stddev));
            x = clip01(std::move(x));
        }
        const auto [logits, cap] = model_forward_with_activations(model, x);
        run.fired_by_step.push_back(update_coverage(local, cap));
        run.coverage_curve.push_back(local.ratio());
    }
    return run;
}

}  // namespace layerprobe
