#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "csimae/datagen.hpp"
#include "csimae/masking.hpp"
#include "csimae/metrics.hpp"
#include "csimae/model.hpp"
#include "csimae/scheduler.hpp"

namespace csimae {

struct SplitFractions {
    double train = 0.75;
    double val = 0.125;
    double test = 0.125;
};

struct ScheduleConfig {
    Strategy strategy = Strategy::proposed;
    std::size_t buckets = 4;
    std::size_t batch_size = 16;
    double epsilon = 0.1;            // diversity entropy floor (nats)
    bool enforce_diversity = false;  // abort training on any violation
};

struct TrainConfig {
    std::size_t steps = 0;  // T_total
    double learning_rate = 1e-3;
    std::string lr_schedule = "cosine";  // or "constant"
    std::size_t warmup_steps = 0;
};

struct EvalConfig {
    std::vector<Task> tasks{Task::reconstruction, Task::time, Task::frequency};
    std::vector<std::string> splits{"test"};
    std::size_t max_samples = 0;  // per dataset and split; 0 = all
    std::vector<DatasetSpec> zero_shot;  // evaluated in full, never trained on
};

struct ConflictConfig {
    std::size_t n_pairs = 2000;
    std::size_t snapshot_steps = 10;
    std::vector<std::uint64_t> seeds{1, 2, 3};
};

struct StudyConfig {
    std::vector<Strategy> strategies{Strategy::proposed, Strategy::sequential, Strategy::alternating,
                                     Strategy::global};
    std::vector<std::size_t> bucket_sweep{1, 2, 4, 8, 16};
    ConflictConfig conflict;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::filesystem::path presets_path = CSIMAE_DEFAULT_PRESETS;
    std::vector<DatasetSpec> datasets;
    PatchSpec patch;
    SplitFractions split;
    double snr_db = 20.0;
    ScheduleConfig schedule;
    MaskPolicy mask;
    ModelConfig model;
    TrainConfig train;
    EvalConfig eval;
    StudyConfig study;
    std::filesystem::path out_dir = "out";

    /// Every field, defaults included.
    nlohmann::json to_json() const;
    /// Relative paths resolve against base_dir. Throws ConfigError.
    static ExperimentConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
    void validate() const;
};

ExperimentConfig load_config(const std::filesystem::path& path);

/// Noisy samples of every dataset, split by sample index into train/val/test.
struct Corpus {
    std::vector<DatasetSpec> specs;
    std::vector<std::vector<CsiSample>> train, val, test;  // indexed by position in specs

    const std::vector<std::vector<CsiSample>>& split(const std::string& name) const;
};

/// Deterministic in-memory build (no files): generate, add noise, split.
Corpus build_corpus(const ExperimentConfig& cfg);
/// Same from already generated clean samples, one vector per spec.
Corpus make_corpus(const ExperimentConfig& cfg, std::vector<DatasetSpec> specs,
                   std::vector<std::vector<CsiSample>> clean);

struct StepRecord {
    std::size_t step = 0;
    std::size_t epoch = 0;
    std::uint32_t group = 0;
    std::size_t batch_size = 0;
    std::uint32_t padded_len = 0;
    std::uint64_t valid_tokens = 0;
    std::uint64_t padding_tokens = 0;
    MaskKind mask_kind = MaskKind::random;
    double loss = 0.0;
};

struct EpochRecord {
    std::size_t epoch = 0;
    BatchPlan plan;
    DiversityReport diversity;
    CostReport cost;
};

struct TrainRun {
    TrainState state;
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
};

/// Runs `steps` optimizer steps on the train split. Sequential training visits
/// the datasets one after another, each for its share of the epochs.
TrainRun train_model(const ExperimentConfig& cfg, const Corpus& corpus, Strategy strategy, std::size_t buckets,
                     std::size_t steps);

SamplePool make_pool(const std::vector<std::vector<CsiSample>>& split, const PatchSpec& patch);
SequenceTable make_sequences(const std::vector<std::vector<CsiSample>>& split, const PatchSpec& patch);

struct EvalRow {
    std::string dataset;
    std::string split;
    Task task = Task::reconstruction;
    std::size_t samples = 0;
    double nmse_linear = 0.0;  // mean over samples
    double nmse_db = 0.0;      // 10 log10 of nmse_linear
};

std::vector<EvalRow> evaluate(const ToyMaeModel& model, const ExperimentConfig& cfg, const Corpus& corpus,
                              const std::vector<std::string>& splits, const std::vector<Task>& tasks);

/// Mean of per-dataset dB values for one task and split.
double average_db(const std::vector<EvalRow>& rows, Task task, const std::string& split);

struct ConflictRun {
    std::uint64_t seed = 0;
    ConflictStats mixed;
    ConflictStats homogeneous;
};

/// Trains snapshot_steps on mixed batches, then probes co-batched gradient
/// pairs under the global plan (mixed) and the proposed plan with one bucket
/// per distinct token length (homogeneous).
ConflictRun run_conflict(const ExperimentConfig& cfg, const Corpus& corpus, std::uint64_t seed);

// Subcommands. Each writes below cfg.out_dir.
void cmd_generate(const ExperimentConfig& cfg);
void cmd_train(const ExperimentConfig& cfg);
void cmd_eval(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& checkpoint, bool untrained);
void cmd_study(const std::string& name, const ExperimentConfig& cfg);

/// Reads datasets written by cmd_generate, verifying manifest hashes, and
/// applies the configured noise and split.
Corpus load_corpus(const ExperimentConfig& cfg);

}  // namespace csimae
