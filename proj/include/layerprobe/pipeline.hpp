#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "layerprobe/analysis.hpp"
#include "layerprobe/checkpoint.hpp"
#include "layerprobe/dataset.hpp"
#include "layerprobe/explain.hpp"
#include "layerprobe/io.hpp"
#include "layerprobe/model.hpp"
#include "layerprobe/perturbation.hpp"

namespace layerprobe {

namespace files {
inline constexpr const char* kCheckpoint = "checkpoint.lpc";
inline constexpr const char* kTrainReport = "train_report.json";
inline constexpr const char* kCorpus = "corpus.jsonl";
inline constexpr const char* kAttackStats = "attack_stats.json";
inline constexpr const char* kCoverageAdversarial = "coverage_adversarial.csv";
inline constexpr const char* kCoverageRandom = "coverage_random.csv";
inline constexpr const char* kCoverageStrengths = "coverage_strengths.csv";
inline constexpr const char* kDeviations = "deviations.csv";
inline constexpr const char* kSummary = "summary.json";
inline constexpr const char* kFigProbability = "fig_probability_bars.csv";
inline constexpr const char* kFigHistogram = "fig_histogram_bars.csv";
inline constexpr const char* kFigMeanSimilarity = "fig_mean_similarity.csv";
inline constexpr const char* kFigCoverage = "fig_coverage_curves.csv";
inline constexpr const char* kTextSummary = "summary.txt";
inline constexpr const char* kGalleryDir = "gallery";
}  // namespace files

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                       const std::string& context) {
    if (!j.is_object()) throw ValidationError("config section '" + context + "' must be an object");
    for (const auto& [key, unused] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw ValidationError("unknown key '" + key + "' in config section '" + context + "'");
        }
    }
}

template <typename T>
T get_or(const nlohmann::json& j, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ValidationError("config key '" + key + "' has the wrong type");
    }
}

inline std::string hash_hex(std::uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

}  // namespace detail

struct RunConfig {
    // dataset
    std::string dataset_format;  // "idx" | "png-dir"
    int num_classes = 10;
    std::filesystem::path train_images, train_labels, test_images, test_labels;
    std::filesystem::path train_dir, test_dir;

    // model
    ModelSpec model_spec;

    // training
    int epochs = 5;
    int batch_size = 16;
    float learning_rate = 0.05f;
    std::uint64_t train_seed = 1;

    // attack
    AttackConfig attack;
    int seeds_per_class = 5;
    std::uint64_t attack_seed = 2;

    std::uint64_t noise_seed = 3;
    int gallery_seeds = 3;

    std::filesystem::path output_dir = "out";
    int jobs = 1;

    nlohmann::json canonical;  // effective config (defaults filled, overrides applied)
    std::string config_hash;

    std::filesystem::path out(const char* name) const { return output_dir / name; }

    static RunConfig load(const std::filesystem::path& config_path,
                          const std::optional<std::filesystem::path>& out_override = {},
                          const std::optional<std::uint64_t>& seed_override = {}, int jobs = 1) {
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(read_file(config_path));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("config " + config_path.string() + " is not valid JSON: " + e.what());
        }
        detail::check_keys(doc, {"dataset", "model", "train", "attack", "noise", "report", "output_dir"},
                           "top level");

        RunConfig c;
        c.jobs = jobs;

        if (!doc.contains("dataset")) throw ValidationError("config lacks the 'dataset' section");
        const nlohmann::json& ds = doc.at("dataset");
        detail::check_keys(ds,
                           {"format", "classes", "train_images", "train_labels", "test_images",
                            "test_labels", "train_dir", "test_dir"},
                           "dataset");
        c.dataset_format = detail::get_or<std::string>(ds, "format", "idx");
        c.num_classes = detail::get_or<int>(ds, "classes", 10);
        if (c.num_classes < 2) throw ValidationError("dataset.classes must be at least 2");
        const std::filesystem::path base = config_path.has_parent_path()
                                               ? config_path.parent_path()
                                               : std::filesystem::path(".");
        auto resolve = [&](const std::string& key) -> std::filesystem::path {
            if (!ds.contains(key)) throw ValidationError("dataset section lacks '" + key + "'");
            const std::filesystem::path p = ds.at(key).get<std::string>();
            return p.is_absolute() ? p : base / p;
        };
        if (c.dataset_format == "idx") {
            c.train_images = resolve("train_images");
            c.train_labels = resolve("train_labels");
            c.test_images = resolve("test_images");
            c.test_labels = resolve("test_labels");
        } else if (c.dataset_format == "png-dir") {
            c.train_dir = resolve("train_dir");
            c.test_dir = resolve("test_dir");
        } else {
            throw ValidationError("dataset.format must be 'idx' or 'png-dir'");
        }

        const nlohmann::json model = doc.contains("model") ? doc.at("model") : nlohmann::json::object();
        detail::check_keys(model, {"architecture", "spec"}, "model");
        const std::string arch = detail::get_or<std::string>(model, "architecture", "vgg-mini");
        if (arch == "vgg-mini") {
            c.model_spec = ModelSpec::vgg_mini(c.num_classes);
        } else if (arch == "custom") {
            if (!model.contains("spec")) throw ValidationError("custom model needs a 'spec' object");
            try {
                c.model_spec = model_spec_from_json(model.at("spec"));
            } catch (const nlohmann::json::exception& e) {
                throw ValidationError(std::string("invalid custom model spec: ") + e.what());
            } catch (const FormatError& e) {
                throw ValidationError(std::string("invalid custom model spec: ") + e.what());
            }
        } else {
            throw ValidationError("model.architecture must be 'vgg-mini' or 'custom'");
        }
        if (c.model_spec.num_classes != c.num_classes) {
            throw ValidationError("model class count does not match dataset.classes");
        }
        try {
            c.model_spec.validate();
        } catch (const ConfigError& e) {
            throw ValidationError(std::string("model spec is invalid: ") + e.what());
        }

        const nlohmann::json tr = doc.contains("train") ? doc.at("train") : nlohmann::json::object();
        detail::check_keys(tr, {"epochs", "batch_size", "learning_rate", "seed"}, "train");
        c.epochs = detail::get_or<int>(tr, "epochs", 5);
        c.batch_size = detail::get_or<int>(tr, "batch_size", 16);
        c.learning_rate = static_cast<float>(detail::get_or<double>(tr, "learning_rate", 0.05));
        c.train_seed = detail::get_or<std::uint64_t>(tr, "seed", 1);
        if (c.epochs < 0 || c.batch_size <= 0 || !(c.learning_rate >= 0.0f)) {
            throw ValidationError("train section has invalid values");
        }

        const nlohmann::json at = doc.contains("attack") ? doc.at("attack") : nlohmann::json::object();
        detail::check_keys(at,
                           {"delta", "lambda", "top_k", "monitored_neurons", "step_size",
                            "max_iterations", "activation_threshold", "strategy", "norm",
                            "amplification_ratios", "seeds_per_class", "seed"},
                           "attack");
        c.attack.delta = static_cast<float>(detail::get_or<double>(at, "delta", 0.1));
        c.attack.lambda = static_cast<float>(detail::get_or<double>(at, "lambda", 1.0));
        c.attack.top_k = detail::get_or<int>(at, "top_k", 3);
        c.attack.monitored_neurons = detail::get_or<int>(at, "monitored_neurons", 10);
        c.attack.step_size =
            static_cast<float>(detail::get_or<double>(at, "step_size", c.attack.delta / 10.0));
        c.attack.max_iterations = detail::get_or<int>(at, "max_iterations", 50);
        c.attack.activation_threshold =
            static_cast<float>(detail::get_or<double>(at, "activation_threshold", 0.25));
        c.attack.strategy = neuron_strategy_from_name(
            detail::get_or<std::string>(at, "strategy", "near-threshold"));
        const std::string norm = detail::get_or<std::string>(at, "norm", "max");
        if (norm == "max") {
            c.attack.norm = PerturbationNorm::MaxNorm;
        } else if (norm == "l2") {
            c.attack.norm = PerturbationNorm::L2;
        } else {
            throw ValidationError("attack.norm must be 'max' or 'l2'");
        }
        if (at.contains("amplification_ratios")) {
            c.attack.amplification_ratios.clear();
            for (const auto& r : at.at("amplification_ratios")) {
                c.attack.amplification_ratios.push_back(static_cast<float>(r.get<double>()));
            }
        }
        if (std::find(c.attack.amplification_ratios.begin(), c.attack.amplification_ratios.end(),
                      1.0f) == c.attack.amplification_ratios.end()) {
            throw ValidationError("attack.amplification_ratios must include 1.0 (the reference strength)");
        }
        c.seeds_per_class = detail::get_or<int>(at, "seeds_per_class", 5);
        if (c.seeds_per_class < 1) throw ValidationError("attack.seeds_per_class must be positive");
        c.attack_seed = detail::get_or<std::uint64_t>(at, "seed", 2);
        try {
            c.attack.validate();
        } catch (const ConfigError& e) {
            throw ValidationError(std::string("attack section is invalid: ") + e.what());
        }

        const nlohmann::json no = doc.contains("noise") ? doc.at("noise") : nlohmann::json::object();
        detail::check_keys(no, {"seed"}, "noise");
        c.noise_seed = detail::get_or<std::uint64_t>(no, "seed", 3);

        const nlohmann::json rep = doc.contains("report") ? doc.at("report") : nlohmann::json::object();
        detail::check_keys(rep, {"gallery_seeds"}, "report");
        c.gallery_seeds = detail::get_or<int>(rep, "gallery_seeds", 3);
        if (c.gallery_seeds < 0) throw ValidationError("report.gallery_seeds must be non-negative");

        c.output_dir = detail::get_or<std::string>(doc, "output_dir", "out");
        if (!c.output_dir.is_absolute()) c.output_dir = base / c.output_dir;
        if (out_override) c.output_dir = *out_override;

        if (seed_override) {
            c.train_seed = derive_seed(*seed_override, "train");
            c.attack_seed = derive_seed(*seed_override, "attack");
            c.noise_seed = derive_seed(*seed_override, "noise");
        }

        c.canonical = c.build_canonical();
        c.config_hash = detail::hash_hex(fnv1a64(c.canonical.dump()));
        return c;
    }

    /// Effective configuration document used for hashing and echoing. The
    /// output directory and worker count do not affect artifact content and
    /// stay out of the hash.
    nlohmann::json build_canonical() const {
        nlohmann::json j;
        j["dataset"]["format"] = dataset_format;
        j["dataset"]["classes"] = num_classes;
        if (dataset_format == "idx") {
            j["dataset"]["train_images"] = train_images.filename().string();
            j["dataset"]["train_labels"] = train_labels.filename().string();
            j["dataset"]["test_images"] = test_images.filename().string();
            j["dataset"]["test_labels"] = test_labels.filename().string();
        } else {
            j["dataset"]["train_dir"] = train_dir.filename().string();
            j["dataset"]["test_dir"] = test_dir.filename().string();
        }
        j["model"] = model_spec_to_json(model_spec);
        j["train"] = {{"epochs", epochs},
                      {"batch_size", batch_size},
                      {"learning_rate", learning_rate},
                      {"seed", train_seed}};
        j["attack"] = {{"delta", attack.delta},
                       {"lambda", attack.lambda},
                       {"top_k", attack.top_k},
                       {"monitored_neurons", attack.monitored_neurons},
                       {"step_size", attack.step_size},
                       {"max_iterations", attack.max_iterations},
                       {"activation_threshold", attack.activation_threshold},
                       {"strategy", neuron_strategy_name(attack.strategy)},
                       {"norm", attack.norm == PerturbationNorm::MaxNorm ? "max" : "l2"},
                       {"amplification_ratios", attack.amplification_ratios},
                       {"seeds_per_class", seeds_per_class},
                       {"seed", attack_seed}};
        j["noise"] = {{"seed", noise_seed}};
        j["report"] = {{"gallery_seeds", gallery_seeds}};
        return j;
    }

    DatasetHandle load_split(const std::string& split) const {
        if (dataset_format == "idx") {
            const auto& imgs = split == "train" ? train_images : test_images;
            const auto& labs = split == "train" ? train_labels : test_labels;
            if (!std::filesystem::exists(imgs) || !std::filesystem::exists(labs)) {
                throw ValidationError("dataset files for split '" + split + "' do not exist");
            }
            return load_idx_dataset(imgs, labs, num_classes, split);
        }
        const auto& dir = split == "train" ? train_dir : test_dir;
        if (!std::filesystem::exists(dir)) {
            throw ValidationError("dataset directory for split '" + split + "' does not exist");
        }
        return load_png_dir_dataset(dir, num_classes, split);
    }
};

// ---------------------------------------------------------------------------
// Corpus records (JSON lines)
// ---------------------------------------------------------------------------

struct CorpusRecord {
    AdversarialExample example;
    std::string config_hash;

    std::string to_json_line() const {
        nlohmann::json j;
        j["config_hash"] = config_hash;
        j["seed_id"] = example.seed_id;
        j["original_label"] = example.original_label;
        j["adversarial_label"] = example.adversarial_label;
        j["success"] = example.success;
        j["iterations"] = example.iterations;
        j["strength"] = example.strength;
        j["shape"] = example.perturbation.shape;
        j["n_a_b64"] = tensor_payload_b64(example.perturbation);
        return j.dump();
    }

    static CorpusRecord from_json_line(const std::string& line, std::size_t line_no) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("corpus line " + std::to_string(line_no) + " is not valid JSON: " +
                              e.what());
        }
        CorpusRecord r;
        try {
            r.config_hash = j.at("config_hash").get<std::string>();
            r.example.seed_id = j.at("seed_id").get<int>();
            r.example.original_label = j.at("original_label").get<int>();
            r.example.adversarial_label = j.at("adversarial_label").get<int>();
            r.example.success = j.at("success").get<bool>();
            r.example.iterations = j.at("iterations").get<int>();
            r.example.strength = j.at("strength").get<float>();
            const std::vector<int> shape = j.at("shape").get<std::vector<int>>();
            r.example.perturbation = tensor_from_payload_b64(shape, j.at("n_a_b64").get<std::string>());
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("corpus line " + std::to_string(line_no) + " lacks required fields: " +
                              e.what());
        }
        return r;
    }
};

inline std::vector<CorpusRecord> read_corpus(const std::filesystem::path& path) {
    const std::string content = read_file(path);
    std::vector<CorpusRecord> records;
    std::size_t start = 0, line_no = 1;
    while (start < content.size()) {
        std::size_t end = content.find('\n', start);
        if (end == std::string::npos) end = content.size();
        const std::string line = content.substr(start, end - start);
        if (!line.empty()) records.push_back(CorpusRecord::from_json_line(line, line_no));
        start = end + 1;
        ++line_no;
    }
    if (records.empty()) throw DataError("corpus " + path.string() + " is empty");
    return records;
}

// ---------------------------------------------------------------------------
// Stage: train
// ---------------------------------------------------------------------------

inline TrainReport cmd_train(const RunConfig& cfg) {
    const DatasetHandle train_split = cfg.load_split("train");
    const DatasetHandle test_split = cfg.load_split("test");

    LabeledImages train_data, test_data;
    for (std::size_t i = 0; i < train_split.size(); ++i) {
        train_data.images.push_back(fit_to_input(train_split.images[i], cfg.model_spec.input_shape));
        train_data.labels.push_back(train_split.labels[i]);
    }
    for (std::size_t i = 0; i < test_split.size(); ++i) {
        test_data.images.push_back(fit_to_input(test_split.images[i], cfg.model_spec.input_shape));
        test_data.labels.push_back(test_split.labels[i]);
    }

    Model model = build_model(cfg.model_spec, cfg.train_seed);
    TrainReport report = train(model, train_data, test_data, cfg.epochs, cfg.batch_size,
                               cfg.learning_rate, cfg.train_seed, cfg.jobs);

    save_checkpoint(model, cfg.out(files::kCheckpoint), cfg.config_hash);
    nlohmann::json j;
    j["config_hash"] = cfg.config_hash;
    j["epochs"] = report.epochs;
    j["epoch_losses"] = report.epoch_losses;
    j["final_train_accuracy"] = report.final_train_accuracy;
    j["final_heldout_accuracy"] = report.final_heldout_accuracy;
    j["seed"] = report.seed;
    write_file_atomic(cfg.out(files::kTrainReport), j.dump(2) + "\n");
    return report;
}

// ---------------------------------------------------------------------------
// Stage: attack
// ---------------------------------------------------------------------------

struct AttackStageResult {
    long attempted = 0;
    long succeeded = 0;
    double yield_rate = 0.0;
    std::vector<double> final_coverage_adversarial;  // per seed, run-local
    std::vector<double> final_coverage_random;
};

namespace detail {

inline std::string coverage_csv(const std::string& config_hash,
                                const std::vector<CoverageCurve>& curves) {
    std::string out = "# config_hash=" + config_hash + "\n";
    out += "mode,strength,iteration,coverage\n";
    for (const CoverageCurve& c : curves) {
        for (const auto& [it, ratio] : c.points) {
            out += c.mode + "," + fmt_float(static_cast<double>(c.strength)) + "," +
                   std::to_string(it) + "," + fmt_float(ratio) + "\n";
        }
    }
    return out;
}

inline Model load_matching_checkpoint(const RunConfig& cfg) {
    const std::filesystem::path path = cfg.out(files::kCheckpoint);
    if (!std::filesystem::exists(path)) {
        throw ValidationError("checkpoint " + path.string() + " does not exist; run 'train' first");
    }
    Model model = load_checkpoint(path);
    if (model_spec_to_json(model.spec) != model_spec_to_json(cfg.model_spec)) {
        throw ValidationError("checkpoint model spec does not match the configuration");
    }
    return model;
}

}  // namespace detail

inline AttackStageResult cmd_attack(const RunConfig& cfg) {
    const Model model = detail::load_matching_checkpoint(cfg);
    const DatasetHandle test_split = cfg.load_split("test");

    // Draw up to seeds_per_class correctly classified seeds per class, from a
    // seeded shuffle of the test split; process them in ascending id order.
    std::vector<std::size_t> order(test_split.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng sel_rng(derive_seed(cfg.attack_seed, "seed-selection"));
    for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[sel_rng.below(i)]);
    }
    std::vector<int> per_class(cfg.num_classes, 0);
    std::vector<int> selected;
    std::vector<Tensor> seed_images(test_split.size());
    for (std::size_t idx : order) {
        const int label = test_split.labels[idx];
        if (per_class[label] >= cfg.seeds_per_class) continue;
        Tensor fitted = fit_to_input(test_split.images[idx], cfg.model_spec.input_shape);
        const Prediction p = make_prediction(model_forward(model, fitted));
        if (p.predicted_class != label) continue;
        per_class[label] += 1;
        selected.push_back(static_cast<int>(idx));
        seed_images[idx] = std::move(fitted);
    }
    if (selected.empty()) {
        throw DataError("no correctly classified seeds available for the attack");
    }
    std::sort(selected.begin(), selected.end());

    const CoverageState initial = make_coverage_state(cfg.model_spec, cfg.attack.activation_threshold);
    struct SeedWork {
        AttackRun attack;
        AttackRun random;
    };
    std::vector<SeedWork> work(selected.size());
    parallel_for(selected.size(), cfg.jobs, [&](std::size_t i) {
        const int seed_id = selected[i];
        const Tensor& image = seed_images[static_cast<std::size_t>(seed_id)];
        const int label = test_split.labels[static_cast<std::size_t>(seed_id)];
        work[i].attack = generate_adversarial(
            model, image, label, cfg.attack, initial,
            derive_seed(cfg.attack_seed, "attack-run", static_cast<std::uint64_t>(seed_id)), seed_id);
        const NoiseStats stats = noise_stats(work[i].attack.example.perturbation);
        work[i].random = random_coverage_run(
            model, image, stats, static_cast<int>(work[i].attack.fired_by_step.size()), initial,
            derive_seed(cfg.attack_seed, "coverage-random", static_cast<std::uint64_t>(seed_id)));
    });

    // Campaign coverage curves: replay per-seed firing events in seed order.
    auto campaign_curve = [&](auto&& step_lists) {
        CoverageState state = initial;
        CoverageRun run;
        run.strength = 1.0f;
        for (const auto& steps : step_lists) {
            for (const std::vector<int>& ids : steps) {
                for (int id : ids) state.fired[id] = 1;
                run.ratios.push_back(state.ratio());
            }
        }
        return run;
    };
    std::vector<std::vector<std::vector<int>>> adv_steps, rnd_steps;
    for (const SeedWork& w : work) {
        adv_steps.push_back(w.attack.fired_by_step);
        rnd_steps.push_back(w.random.fired_by_step);
    }
    CoverageRun adv_run = campaign_curve(adv_steps);
    adv_run.mode = "adversarial";
    CoverageRun rnd_run = campaign_curve(rnd_steps);
    rnd_run.mode = "random";

    // Per-strength curves: one point per successful seed, perturbation
    // amplified before composition.
    std::vector<CoverageRun> strength_runs;
    for (float ratio : cfg.attack.amplification_ratios) {
        CoverageState state = initial;
        CoverageRun run;
        run.mode = "adversarial";
        run.strength = ratio;
        for (std::size_t i = 0; i < work.size(); ++i) {
            const AdversarialExample& ex = work[i].attack.example;
            if (!ex.success) continue;
            Tensor x = seed_images[static_cast<std::size_t>(ex.seed_id)];
            const Tensor amplified = amplify(ex.perturbation, ratio);
            for (std::size_t k = 0; k < x.numel(); ++k) x.data[k] += amplified.data[k];
            x = clip01(std::move(x));
            const auto [logits, cap] = model_forward_with_activations(model, x);
            update_coverage(state, cap);
            run.ratios.push_back(state.ratio());
        }
        strength_runs.push_back(std::move(run));
    }

    AttackStageResult result;
    std::string corpus;
    nlohmann::json per_seed = nlohmann::json::array();
    for (const SeedWork& w : work) {
        const AdversarialExample& ex = w.attack.example;
        result.attempted += 1;
        result.succeeded += ex.success ? 1 : 0;
        corpus += CorpusRecord{ex, cfg.config_hash}.to_json_line() + "\n";
        result.final_coverage_adversarial.push_back(w.attack.coverage_curve.back());
        result.final_coverage_random.push_back(w.random.coverage_curve.back());
        per_seed.push_back({{"seed_id", ex.seed_id},
                            {"success", ex.success},
                            {"iterations", ex.iterations},
                            {"final_coverage_adversarial", w.attack.coverage_curve.back()},
                            {"final_coverage_random", w.random.coverage_curve.back()}});
    }
    result.yield_rate = static_cast<double>(result.succeeded) / static_cast<double>(result.attempted);

    write_file_atomic(cfg.out(files::kCorpus), corpus);
    write_file_atomic(cfg.out(files::kCoverageAdversarial),
                      detail::coverage_csv(cfg.config_hash, build_coverage_curves({adv_run})));
    write_file_atomic(cfg.out(files::kCoverageRandom),
                      detail::coverage_csv(cfg.config_hash, build_coverage_curves({rnd_run})));
    write_file_atomic(cfg.out(files::kCoverageStrengths),
                      detail::coverage_csv(cfg.config_hash, build_coverage_curves(strength_runs)));

    nlohmann::json stats;
    stats["config_hash"] = cfg.config_hash;
    stats["attempted"] = result.attempted;
    stats["succeeded"] = result.succeeded;
    stats["yield_rate"] = result.yield_rate;
    stats["per_seed"] = per_seed;
    write_file_atomic(cfg.out(files::kAttackStats), stats.dump(2) + "\n");
    return result;
}

// ---------------------------------------------------------------------------
// Stage: analyze
// ---------------------------------------------------------------------------

inline VulnerabilityReport cmd_analyze(const RunConfig& cfg) {
    const Model model = detail::load_matching_checkpoint(cfg);
    const DatasetHandle test_split = cfg.load_split("test");
    const std::vector<CorpusRecord> corpus = read_corpus(cfg.out(files::kCorpus));
    for (const CorpusRecord& r : corpus) {
        if (r.config_hash != cfg.config_hash) {
            throw ValidationError("corpus was produced by config " + r.config_hash +
                                  ", current config is " + cfg.config_hash);
        }
    }

    std::vector<const CorpusRecord*> successful;
    for (const CorpusRecord& r : corpus) {
        if (r.example.success) successful.push_back(&r);
    }
    if (successful.empty()) throw DataError("corpus contains no successful adversarial examples");

    const std::vector<float>& ratios = cfg.attack.amplification_ratios;
    std::vector<std::vector<DeviationRecord>> per_seed(successful.size());
    parallel_for(successful.size(), cfg.jobs, [&](std::size_t i) {
        const CorpusRecord& r = *successful[i];
        const int seed_id = r.example.seed_id;
        if (seed_id < 0 || static_cast<std::size_t>(seed_id) >= test_split.size()) {
            throw ValidationError("corpus seed id " + std::to_string(seed_id) +
                                  " is outside the test split");
        }
        const Tensor seed =
            fit_to_input(test_split.images[static_cast<std::size_t>(seed_id)], cfg.model_spec.input_shape);
        const Tensor noise = match_gaussian_noise(
            r.example.perturbation,
            derive_seed(cfg.noise_seed, "matched-noise", static_cast<std::uint64_t>(seed_id)));
        for (float ratio : ratios) {
            const InputTriple triple = compose_inputs(seed, r.example.perturbation, noise, ratio);
            per_seed[i].push_back(layer_deviations(model, triple, ratio, seed_id));
        }
    });

    std::vector<DeviationRecord> records;
    for (auto& group : per_seed) {
        for (DeviationRecord& r : group) records.push_back(std::move(r));
    }

    VulnerabilityReport report = build_vulnerability_report(records, 1.0f);
    const std::vector<MarkedRecord> marked = mark_corpus(records, report.thresholds);

    std::string csv = "# config_hash=" + cfg.config_hash + "\n";
    csv += "seed_id,strength,layer,d_a,d_g,compromised\n";
    for (std::size_t i = 0; i < records.size(); ++i) {
        for (std::size_t li = 0; li < records[i].layers.size(); ++li) {
            const LayerDeviation& l = records[i].layers[li];
            csv += std::to_string(records[i].seed_id) + "," +
                   fmt_float(static_cast<double>(records[i].strength)) + "," + l.layer + "," +
                   fmt_float(l.d_a) + "," + fmt_float(l.d_g) + "," +
                   (marked[i].marks[li].compromised ? "1" : "0") + "\n";
        }
    }
    write_file_atomic(cfg.out(files::kDeviations), csv);

    // yield statistics from the attack stage
    nlohmann::json attack_stats;
    try {
        attack_stats = nlohmann::json::parse(read_file(cfg.out(files::kAttackStats)));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("attack stats file is not valid JSON: ") + e.what());
    }
    if (attack_stats.at("config_hash").get<std::string>() != cfg.config_hash) {
        throw ValidationError("attack stats were produced by a different config");
    }

    auto strength_key = [](float s) { return fmt_float(static_cast<double>(s)); };
    nlohmann::json j;
    j["config_hash"] = cfg.config_hash;
    j["yield"] = {{"attempted", attack_stats.at("attempted")},
                  {"succeeded", attack_stats.at("succeeded")},
                  {"rate", attack_stats.at("yield_rate")}};
    j["layers"] = report.layer_order;
    j["strengths"] = report.strengths;
    for (const auto& [key, v] : report.thresholds.values) {
        j["thresholds"][key.first][strength_key(key.second)] = v;
    }
    for (const auto& [key, v] : report.probabilities) {
        j["compromise_probability"][key.first][strength_key(key.second)] = v;
    }
    for (const auto& [key, v] : report.mean_d_a) {
        j["mean_d_a"][key.first][strength_key(key.second)] = v;
    }
    for (const auto& [key, v] : report.mean_d_g) {
        j["mean_d_g"][key.first][strength_key(key.second)] = v;
    }
    for (const auto& [s, h] : report.histograms) {
        j["histograms"][strength_key(s)] = h.bins;
        j["ultimate_examples"][strength_key(s)] = h.ultimate;
        j["zero_compromise"][strength_key(s)] = h.zero;
    }
    j["ranking"] = report.ranking;
    j["corpus_size"] = report.corpus_size;
    j["seeds"] = {{"train", cfg.train_seed}, {"attack", cfg.attack_seed}, {"noise", cfg.noise_seed}};
    write_file_atomic(cfg.out(files::kSummary), j.dump(2) + "\n");
    return report;
}

// ---------------------------------------------------------------------------
// Stage: report
// ---------------------------------------------------------------------------

inline void cmd_report(const RunConfig& cfg) {
    for (const char* name : {files::kSummary, files::kDeviations, files::kCorpus}) {
        if (!std::filesystem::exists(cfg.out(name))) {
            throw ValidationError(std::string("analysis output ") + name +
                                  " is missing; run 'analyze' first");
        }
    }
    nlohmann::json summary;
    try {
        summary = nlohmann::json::parse(read_file(cfg.out(files::kSummary)));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("summary file is not valid JSON: ") + e.what());
    }
    if (summary.at("config_hash").get<std::string>() != cfg.config_hash) {
        throw ValidationError("analysis outputs were produced by a different config");
    }

    const std::vector<std::string> layers = summary.at("layers").get<std::vector<std::string>>();
    const std::vector<float> strengths = summary.at("strengths").get<std::vector<float>>();
    auto strength_key = [](float s) { return fmt_float(static_cast<double>(s)); };

    std::string prob_csv = "# config_hash=" + cfg.config_hash + "\n";
    prob_csv += "layer,strength,probability\n";
    for (const std::string& layer : layers) {
        for (float s : strengths) {
            prob_csv += layer + "," + strength_key(s) + "," +
                        fmt_float(summary.at("compromise_probability").at(layer).at(strength_key(s))
                                      .get<double>()) +
                        "\n";
        }
    }
    write_file_atomic(cfg.out(files::kFigProbability), prob_csv);

    std::string hist_csv = "# config_hash=" + cfg.config_hash + "\n";
    hist_csv += "strength,compromised_layers,count\n";
    for (float s : strengths) {
        const auto bins = summary.at("histograms").at(strength_key(s)).get<std::vector<long>>();
        for (std::size_t k = 0; k < bins.size(); ++k) {
            hist_csv += strength_key(s) + "," + std::to_string(k) + "," + std::to_string(bins[k]) + "\n";
        }
    }
    write_file_atomic(cfg.out(files::kFigHistogram), hist_csv);

    std::string mean_csv = "# config_hash=" + cfg.config_hash + "\n";
    mean_csv += "layer,strength,mean_d_a,mean_d_g\n";
    for (const std::string& layer : layers) {
        for (float s : strengths) {
            mean_csv += layer + "," + strength_key(s) + "," +
                        fmt_float(summary.at("mean_d_a").at(layer).at(strength_key(s)).get<double>()) +
                        "," +
                        fmt_float(summary.at("mean_d_g").at(layer).at(strength_key(s)).get<double>()) +
                        "\n";
        }
    }
    write_file_atomic(cfg.out(files::kFigMeanSimilarity), mean_csv);

    // merged plot-ready coverage file from the attack stage outputs
    std::string cov_csv = "# config_hash=" + cfg.config_hash + "\n";
    cov_csv += "mode,strength,iteration,coverage\n";
    for (const char* name :
         {files::kCoverageAdversarial, files::kCoverageRandom, files::kCoverageStrengths}) {
        const std::filesystem::path path = cfg.out(name);
        if (!std::filesystem::exists(path)) {
            throw ValidationError(std::string("coverage output ") + name +
                                  " is missing; run 'attack' first");
        }
        const std::string content = read_file(path);
        std::size_t start = 0;
        int line_no = 0;
        while (start < content.size()) {
            std::size_t end = content.find('\n', start);
            if (end == std::string::npos) end = content.size();
            const std::string line = content.substr(start, end - start);
            if (line_no >= 2 && !line.empty()) cov_csv += line + "\n";  // skip comment + header
            start = end + 1;
            ++line_no;
        }
    }
    write_file_atomic(cfg.out(files::kFigCoverage), cov_csv);

    // Heatmap gallery: the most deviant successful seeds at strength 1
    // (lowest mean D_a), three PGMs per (seed, conv layer).
    const Model model = detail::load_matching_checkpoint(cfg);
    const DatasetHandle test_split = cfg.load_split("test");
    const std::vector<CorpusRecord> corpus = read_corpus(cfg.out(files::kCorpus));

    std::map<int, const CorpusRecord*> by_id;
    for (const CorpusRecord& r : corpus) {
        if (r.example.success) by_id[r.example.seed_id] = &r;
    }
    struct Ranked {
        int seed_id;
        double mean_da;
    };
    std::vector<Ranked> ranked;
    {
        const std::string dev = read_file(cfg.out(files::kDeviations));
        std::map<int, std::pair<double, long>> acc;
        std::size_t start = 0;
        int line_no = 0;
        while (start < dev.size()) {
            std::size_t end = dev.find('\n', start);
            if (end == std::string::npos) end = dev.size();
            const std::string line = dev.substr(start, end - start);
            start = end + 1;
            ++line_no;
            if (line_no <= 2 || line.empty()) continue;
            std::istringstream row(line);
            std::string seed_s, strength_s, layer_s, da_s;
            std::getline(row, seed_s, ',');
            std::getline(row, strength_s, ',');
            std::getline(row, layer_s, ',');
            std::getline(row, da_s, ',');
            if (strength_s != "1") continue;
            auto& a = acc[std::stoi(seed_s)];
            a.first += std::stod(da_s);
            a.second += 1;
        }
        for (const auto& [seed_id, a] : acc) {
            ranked.push_back({seed_id, a.first / static_cast<double>(a.second)});
        }
    }
    std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
        if (a.mean_da != b.mean_da) return a.mean_da < b.mean_da;
        return a.seed_id < b.seed_id;
    });
    if (static_cast<int>(ranked.size()) > cfg.gallery_seeds) ranked.resize(cfg.gallery_seeds);

    const std::filesystem::path gallery = cfg.out(files::kGalleryDir);
    std::filesystem::create_directories(gallery);
    for (const Ranked& r : ranked) {
        const CorpusRecord* rec = by_id.count(r.seed_id) ? by_id.at(r.seed_id) : nullptr;
        if (!rec) continue;
        const Tensor seed = fit_to_input(test_split.images[static_cast<std::size_t>(r.seed_id)],
                                         cfg.model_spec.input_shape);
        const Tensor noise = match_gaussian_noise(
            rec->example.perturbation,
            derive_seed(cfg.noise_seed, "matched-noise", static_cast<std::uint64_t>(r.seed_id)));
        const InputTriple triple = compose_inputs(seed, rec->example.perturbation, noise, 1.0f);
        const auto [pred, cap_s] = predict_with_capture(model, triple.seed, true);
        const auto [pa, cap_a] = predict_with_capture(model, triple.adversarial, true, pred.predicted_class);
        const auto [pg, cap_g] = predict_with_capture(model, triple.noisy, true, pred.predicted_class);
        const int ih = cfg.model_spec.input_shape[1], iw = cfg.model_spec.input_shape[2];
        const std::string comment = "config_hash=" + cfg.config_hash;
        for (std::size_t li = 0; li < cap_s.layers.size(); ++li) {
            const std::string stem =
                "seed" + std::to_string(r.seed_id) + "_" + cap_s.layers[li].layer;
            write_file_atomic(gallery / (stem + "_seed.pgm"),
                              pgm_bytes(heatmap_from_activation(cap_s.layers[li], ih, iw).grid, comment));
            write_file_atomic(gallery / (stem + "_adversarial.pgm"),
                              pgm_bytes(heatmap_from_activation(cap_a.layers[li], ih, iw).grid, comment));
            write_file_atomic(gallery / (stem + "_noisy.pgm"),
                              pgm_bytes(heatmap_from_activation(cap_g.layers[li], ih, iw).grid, comment));
        }
    }

    const std::vector<std::string> ranking = summary.at("ranking").get<std::vector<std::string>>();
    std::ostringstream text;
    text << "layerprobe report (config " << cfg.config_hash << ")\n\n";
    text << "corpus: " << summary.at("yield").at("attempted").get<long>() << " seeds attempted, "
         << summary.at("yield").at("succeeded").get<long>() << " adversarial examples found (yield "
         << fmt_float(summary.at("yield").at("rate").get<double>()) << ")\n";
    text << "most vulnerable layers: " << ranking.at(0) << ", " << ranking.at(1) << "\n";
    text << "ultimate examples at strength 1: "
         << summary.at("ultimate_examples").at("1").get<long>() << "\n";
    text << "zero-compromise examples at strength 1: "
         << summary.at("zero_compromise").at("1").get<long>() << "\n";
    write_file_atomic(cfg.out(files::kTextSummary), text.str());
}

// ---------------------------------------------------------------------------
// Command-line entry point
// ---------------------------------------------------------------------------

inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const NumericError*>(&e)) return 3;
    if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const FormatError*>(&e)) return 2;
    return 1;
}

}  // namespace layerprobe
