#include "csimae/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "csimae/error.hpp"
#include "csimae/rng.hpp"

namespace csimae {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Seed stream tags for derive_seed.
constexpr std::uint64_t kDatasetStream = 1;
constexpr std::uint64_t kNoiseStream = 2;
constexpr std::uint64_t kModelStream = 3;
constexpr std::uint64_t kPlanStream = 4;
constexpr std::uint64_t kMaskKindStream = 5;
constexpr std::uint64_t kMaskStream = 6;
constexpr std::uint64_t kEvalStream = 7;
constexpr std::uint64_t kConflictStream = 8;
constexpr std::uint64_t kZeroShotStream = 9;

constexpr int kFormatVersion = 1;

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json scale_json(const ScaleSpec& s) { return json::array({s.T, s.K, s.A}); }

json preset_json(const ScenarioPreset& p) {
    return {{"name", p.name},
            {"num_paths", p.num_paths},
            {"delay_spread", p.delay_spread},
            {"doppler_spread", p.doppler_spread},
            {"angle_spread", p.angle_spread},
            {"power_decay_db", p.power_decay_db}};
}

json dataset_json(const DatasetSpec& d) {
    return {{"name", d.name},
            {"dataset_id", d.dataset_id},
            {"scenario", d.scenario.name},
            {"scenario_id", d.scenario_id},
            {"scenario_params", preset_json(d.scenario)},
            {"scale", scale_json(d.scale)},
            {"carrier_spacing", d.carrier_spacing},
            {"time_step", d.time_step},
            {"n_samples", d.n_samples},
            {"seed", d.seed}};
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    return j.contains(key) ? j.at(key).get<T>() : fallback;
}

ScaleSpec parse_scale(const json& j) {
    if (!j.is_array() || j.size() != 3)
        throw ConfigError("scale must be [T, K, A]");
    ScaleSpec s{j[0].get<std::uint32_t>(), j[1].get<std::uint32_t>(), j[2].get<std::uint32_t>()};
    try {
        s.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return s;
}

std::vector<DatasetSpec> parse_datasets(const json& list, const std::vector<ScenarioPreset>& presets,
                                        std::uint64_t seed, std::uint32_t first_id, std::uint64_t stream) {
    if (!list.is_array())
        throw ConfigError("dataset list must be an array");
    std::vector<DatasetSpec> out;
    std::set<std::string> names;
    for (std::size_t i = 0; i < list.size(); ++i) {
        const json& d = list[i];
        DatasetSpec s;
        s.dataset_id = first_id + static_cast<std::uint32_t>(i);
        s.name = d.at("name").get<std::string>();
        if (!names.insert(s.name).second)
            throw ConfigError("duplicate dataset name '" + s.name + "'");
        const auto scenario = d.at("scenario").get<std::string>();
        s.scenario = find_preset(presets, scenario);
        s.scenario_id = static_cast<std::uint32_t>(
            std::find_if(presets.begin(), presets.end(), [&](const auto& p) { return p.name == scenario; }) -
            presets.begin());
        s.scale = parse_scale(d.at("scale"));
        s.carrier_spacing = get_or(d, "carrier_spacing", s.carrier_spacing);
        s.time_step = get_or(d, "time_step", s.time_step);
        s.n_samples = d.at("n_samples").get<std::uint32_t>();
        s.seed = get_or(d, "seed", derive_seed(seed, stream, s.dataset_id));
        s.validate();
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<Task> parse_tasks(const json& j) {
    std::vector<Task> out;
    for (const auto& t : j) out.push_back(parse_task(t.get<std::string>()));
    return out;
}

std::vector<Strategy> parse_strategies(const json& j) {
    std::vector<Strategy> out;
    for (const auto& s : j) out.push_back(parse_strategy(s.get<std::string>()));
    return out;
}

}  // namespace

// ---- config -----------------------------------------------------------------

nlohmann::json ExperimentConfig::to_json() const {
    json datasets_j = json::array();
    for (const auto& d : datasets) datasets_j.push_back(dataset_json(d));
    json zero_shot_j = json::array();
    for (const auto& d : eval.zero_shot) zero_shot_j.push_back(dataset_json(d));
    json tasks = json::array();
    for (Task t : eval.tasks) tasks.push_back(to_string(t));
    json strategies = json::array();
    for (Strategy s : study.strategies) strategies.push_back(to_string(s));
    return {
        {"format_version", kFormatVersion},
        {"seed", seed},
        {"presets", presets_path.string()},
        {"datasets", datasets_j},
        {"patch", json::array({patch.t, patch.k, patch.a})},
        {"split", {{"train", split.train}, {"val", split.val}, {"test", split.test}}},
        {"snr_db", snr_db},
        {"schedule",
         {{"strategy", to_string(schedule.strategy)},
          {"buckets", schedule.buckets},
          {"batch_size", schedule.batch_size},
          {"epsilon", schedule.epsilon},
          {"enforce_diversity", schedule.enforce_diversity}}},
        {"mask",
         {{"random_ratio", mask.random_ratio},
          {"time_keep", mask.time_keep},
          {"freq_keep", mask.freq_keep},
          {"kind_weights", mask.kind_weights}}},
        {"model",
         {{"token_dim", model.token_dim},
          {"embed_dim", model.embed_dim},
          {"heads", model.heads},
          {"encoder_depth", model.encoder_depth},
          {"decoder_depth", model.decoder_depth},
          {"mlp_ratio", model.mlp_ratio},
          {"max_grid", json::array({model.max_grid.T, model.max_grid.K, model.max_grid.A})},
          {"max_seq_len", model.max_seq_len}}},
        {"train",
         {{"steps", train.steps},
          {"learning_rate", train.learning_rate},
          {"lr_schedule", train.lr_schedule},
          {"warmup_steps", train.warmup_steps}}},
        {"eval",
         {{"tasks", tasks}, {"splits", eval.splits}, {"max_samples", eval.max_samples}, {"zero_shot", zero_shot_j}}},
        {"study",
         {{"strategies", strategies},
          {"bucket_sweep", study.bucket_sweep},
          {"conflict",
           {{"n_pairs", study.conflict.n_pairs},
            {"snapshot_steps", study.conflict.snapshot_steps},
            {"seeds", study.conflict.seeds}}}}},
    };
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j, const fs::path& base_dir) {
    ExperimentConfig c;
    try {
        if (get_or(j, "format_version", kFormatVersion) != kFormatVersion)
            throw ConfigError("unsupported config format_version");
        c.seed = get_or<std::uint64_t>(j, "seed", 0);
        if (j.contains("presets")) {
            fs::path p = j.at("presets").get<std::string>();
            c.presets_path = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
        }
        const auto presets = load_presets(c.presets_path);
        if (j.contains("patch")) {
            const auto& p = j.at("patch");
            if (!p.is_array() || p.size() != 3) throw ConfigError("patch must be [t, k, a]");
            c.patch = {p[0].get<std::uint32_t>(), p[1].get<std::uint32_t>(), p[2].get<std::uint32_t>()};
        }
        c.datasets = parse_datasets(j.at("datasets"), presets, c.seed, 0, kDatasetStream);
        if (j.contains("split")) {
            const auto& s = j.at("split");
            c.split = {get_or(s, "train", c.split.train), get_or(s, "val", c.split.val),
                       get_or(s, "test", c.split.test)};
        }
        c.snr_db = get_or(j, "snr_db", c.snr_db);
        if (j.contains("schedule")) {
            const auto& s = j.at("schedule");
            if (s.contains("strategy")) c.schedule.strategy = parse_strategy(s.at("strategy").get<std::string>());
            c.schedule.buckets = get_or(s, "buckets", c.schedule.buckets);
            c.schedule.batch_size = get_or(s, "batch_size", c.schedule.batch_size);
            c.schedule.epsilon = get_or(s, "epsilon", c.schedule.epsilon);
            c.schedule.enforce_diversity = get_or(s, "enforce_diversity", c.schedule.enforce_diversity);
        }
        if (j.contains("mask")) {
            const auto& m = j.at("mask");
            c.mask.random_ratio = get_or(m, "random_ratio", c.mask.random_ratio);
            c.mask.time_keep = get_or(m, "time_keep", c.mask.time_keep);
            c.mask.freq_keep = get_or(m, "freq_keep", c.mask.freq_keep);
            c.mask.kind_weights = get_or(m, "kind_weights", c.mask.kind_weights);
        }
        c.model.token_dim = c.patch.token_dim();
        if (j.contains("model")) {
            const auto& m = j.at("model");
            if (get_or(m, "token_dim", c.model.token_dim) != c.model.token_dim)
                throw ConfigError("model.token_dim must equal 2 * t * k * a of the patch");
            c.model.embed_dim = get_or(m, "embed_dim", c.model.embed_dim);
            c.model.heads = get_or(m, "heads", c.model.heads);
            c.model.encoder_depth = get_or(m, "encoder_depth", c.model.encoder_depth);
            c.model.decoder_depth = get_or(m, "decoder_depth", c.model.decoder_depth);
            c.model.mlp_ratio = get_or(m, "mlp_ratio", c.model.mlp_ratio);
            if (m.contains("max_grid")) {
                const auto& g = m.at("max_grid");
                c.model.max_grid = {g.at(0).get<std::uint32_t>(), g.at(1).get<std::uint32_t>(),
                                    g.at(2).get<std::uint32_t>()};
            }
            c.model.max_seq_len = get_or(m, "max_seq_len", c.model.max_seq_len);
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            c.train.steps = get_or(t, "steps", c.train.steps);
            c.train.learning_rate = get_or(t, "learning_rate", c.train.learning_rate);
            c.train.lr_schedule = get_or(t, "lr_schedule", c.train.lr_schedule);
            c.train.warmup_steps = get_or(t, "warmup_steps", c.train.warmup_steps);
        }
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            if (e.contains("tasks")) c.eval.tasks = parse_tasks(e.at("tasks"));
            c.eval.splits = get_or(e, "splits", c.eval.splits);
            c.eval.max_samples = get_or(e, "max_samples", c.eval.max_samples);
            if (e.contains("zero_shot"))
                c.eval.zero_shot = parse_datasets(e.at("zero_shot"), presets, c.seed,
                                                  static_cast<std::uint32_t>(c.datasets.size()), kZeroShotStream);
        }
        if (j.contains("study")) {
            const auto& s = j.at("study");
            if (s.contains("strategies")) c.study.strategies = parse_strategies(s.at("strategies"));
            c.study.bucket_sweep = get_or(s, "bucket_sweep", c.study.bucket_sweep);
            if (s.contains("conflict")) {
                const auto& k = s.at("conflict");
                c.study.conflict.n_pairs = get_or(k, "n_pairs", c.study.conflict.n_pairs);
                c.study.conflict.snapshot_steps = get_or(k, "snapshot_steps", c.study.conflict.snapshot_steps);
                c.study.conflict.seeds = get_or(k, "seeds", c.study.conflict.seeds);
            }
        }
        if (j.contains("out")) {
            fs::path p = j.at("out").get<std::string>();
            c.out_dir = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    } catch (const DataError& e) {
        throw ConfigError(e.what());
    }
    c.validate();
    return c;
}

void ExperimentConfig::validate() const {
    if (datasets.empty()) throw ConfigError("config needs at least one dataset");
    try {
        patch.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    model.validate();
    mask.validate();
    for (double f : {split.train, split.val, split.test})
        if (!(f >= 0.0)) throw ConfigError("split fractions must be >= 0");
    if (std::abs(split.train + split.val + split.test - 1.0) > 1e-9)
        throw ConfigError("split fractions must sum to 1");
    if (!std::isfinite(snr_db)) throw ConfigError("snr_db must be finite");
    if (schedule.buckets < 1 || schedule.batch_size < 1)
        throw ConfigError("buckets and batch_size must be >= 1");
    if (!(schedule.epsilon >= 0.0)) throw ConfigError("epsilon must be >= 0");
    if (!(train.learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
    if (train.lr_schedule != "cosine" && train.lr_schedule != "constant")
        throw ConfigError("lr_schedule must be 'cosine' or 'constant'");
    for (auto b : study.bucket_sweep)
        if (b < 1) throw ConfigError("bucket_sweep entries must be >= 1");
    auto check_fit = [&](const DatasetSpec& d) {
        const GridShape g = grid_shape(d.scale, patch);
        if (g.T > model.max_grid.T || g.K > model.max_grid.K || g.A > model.max_grid.A)
            throw ConfigError("dataset '" + d.name + "' grid exceeds model.max_grid");
        if (g.size() > model.max_seq_len)
            throw ConfigError("dataset '" + d.name + "' exceeds model.max_seq_len");
    };
    for (const auto& d : datasets) check_fit(d);
    for (const auto& d : eval.zero_shot) check_fit(d);
}

ExperimentConfig load_config(const fs::path& path) {
    json j;
    try {
        j = json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw ConfigError("cannot parse " + path.string() + ": " + e.what());
    } catch (const DataError& e) {
        throw ConfigError(e.what());
    }
    return ExperimentConfig::from_json(j, path.parent_path());
}

// ---- corpus -----------------------------------------------------------------

const std::vector<std::vector<CsiSample>>& Corpus::split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "'");
}

Corpus make_corpus(const ExperimentConfig& cfg, std::vector<DatasetSpec> specs,
                   std::vector<std::vector<CsiSample>> clean) {
    Corpus c;
    c.specs = std::move(specs);
    const std::uint64_t noise_seed = derive_seed(cfg.seed, kNoiseStream);
    for (std::size_t d = 0; d < clean.size(); ++d) {
        const std::size_t n = clean[d].size();
        const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * cfg.split.train));
        const auto n_val = std::min(n - n_train,
                                    static_cast<std::size_t>(std::llround(static_cast<double>(n) * cfg.split.val)));
        c.train.emplace_back();
        c.val.emplace_back();
        c.test.emplace_back();
        for (std::size_t i = 0; i < n; ++i) {
            CsiSample s = add_noise(clean[d][i], cfg.snr_db, noise_seed);
            auto& dst = i < n_train ? c.train.back() : i < n_train + n_val ? c.val.back() : c.test.back();
            dst.push_back(std::move(s));
        }
    }
    return c;
}

Corpus build_corpus(const ExperimentConfig& cfg) {
    std::vector<std::vector<CsiSample>> clean;
    for (const auto& d : cfg.datasets) clean.push_back(generate_dataset(d));
    return make_corpus(cfg, cfg.datasets, std::move(clean));
}

SamplePool make_pool(const std::vector<std::vector<CsiSample>>& split, const PatchSpec& patch) {
    std::vector<PoolEntry> entries;
    for (const auto& ds : split)
        for (const auto& s : ds)
            entries.push_back(
                {s.sample_id, s.dataset_id, static_cast<std::uint32_t>(token_length(s.data.scale, patch))});
    return SamplePool(std::move(entries));
}

SequenceTable make_sequences(const std::vector<std::vector<CsiSample>>& split, const PatchSpec& patch) {
    SequenceTable out;
    for (const auto& ds : split)
        for (const auto& s : ds) out.emplace(s.sample_id, patchify(s.data, patch));
    return out;
}

// ---- training -----------------------------------------------------------------

namespace {

double learning_rate_at(const TrainConfig& t, std::size_t step, std::size_t total) {
    if (t.warmup_steps > 0 && step < t.warmup_steps)
        return t.learning_rate * static_cast<double>(step + 1) / static_cast<double>(t.warmup_steps);
    if (t.lr_schedule == "constant" || total <= t.warmup_steps) return t.learning_rate;
    const double progress =
        static_cast<double>(step - t.warmup_steps) / static_cast<double>(total - t.warmup_steps);
    return t.learning_rate * 0.5 * (1.0 + std::cos(M_PI * progress));
}

}  // namespace

TrainRun train_model(const ExperimentConfig& cfg, const Corpus& corpus, Strategy strategy, std::size_t buckets,
                     std::size_t steps) {
    TrainRun run{TrainState(cfg.model, derive_seed(cfg.seed, kModelStream)), {}, {}};
    if (steps == 0) return run;

    const SamplePool pool = make_pool(corpus.train, cfg.patch);
    const SequenceTable seqs = make_sequences(corpus.train, cfg.patch);
    const std::size_t bs = cfg.schedule.batch_size;

    auto make_epoch = [&](std::size_t e) {
        EpochRecord r;
        r.epoch = e;
        r.plan = build_plan(pool, strategy, buckets, bs, derive_seed(cfg.seed, kPlanStream, e));
        validate_plan(r.plan, pool, bs);
        r.diversity = diversity_report(r.plan, pool, cfg.schedule.epsilon);
        if (cfg.schedule.enforce_diversity && r.diversity.violations > 0)
            throw DataError("epoch " + std::to_string(e) + ": " + std::to_string(r.diversity.violations) +
                            " batches below the diversity floor " + std::to_string(cfg.schedule.epsilon));
        r.cost = compute_cost(r.plan, pool);
        return r;
    };
    run.epochs.push_back(make_epoch(0));
    const std::size_t per_epoch = run.epochs[0].plan.batches.size();
    const std::size_t n_epochs = (steps + per_epoch - 1) / per_epoch;
    for (std::size_t e = 1; e < n_epochs; ++e) run.epochs.push_back(make_epoch(e));

    struct Slot {
        std::size_t epoch;
        const MiniBatch* batch;
    };
    std::vector<Slot> stream;
    if (strategy == Strategy::sequential) {
        std::set<std::uint32_t> groups;
        for (const auto& b : run.epochs[0].plan.batches) groups.insert(b.group);
        for (std::uint32_t g : groups)
            for (const auto& ep : run.epochs)
                for (const auto& b : ep.plan.batches)
                    if (b.group == g) stream.push_back({ep.epoch, &b});
    } else {
        for (const auto& ep : run.epochs)
            for (const auto& b : ep.plan.batches) stream.push_back({ep.epoch, &b});
    }
    stream.resize(steps);

    for (std::size_t s = 0; s < steps; ++s) {
        const MiniBatch& mb = *stream[s].batch;
        Philox kind_rng(derive_seed(cfg.seed, kMaskKindStream, s));
        const MaskKind kind = draw_mask_kind(cfg.mask, kind_rng);
        const std::uint64_t mask_seed = derive_seed(cfg.seed, kMaskStream, s);
        std::vector<TokenSequence> batch_seqs;
        std::vector<MaeMask> masks;
        StepRecord rec;
        for (auto id : mb.sample_ids) {
            const TokenSequence& seq = seqs.at(id);
            masks.push_back(mae_mask(seq, kind, mask_param(cfg.mask, kind, seq), derive_seed(mask_seed, id)));
            rec.valid_tokens += seq.valid_len;
            batch_seqs.push_back(seq);
        }
        MaeBatch batch = make_batch(std::move(batch_seqs), std::move(masks), mb.padded_len);
        rec.step = s;
        rec.epoch = stream[s].epoch;
        rec.group = mb.group;
        rec.batch_size = mb.sample_ids.size();
        rec.padded_len = mb.padded_len;
        rec.padding_tokens = rec.batch_size * mb.padded_len - rec.valid_tokens;
        rec.mask_kind = kind;
        rec.loss = train_step(run.state, batch, learning_rate_at(cfg.train, s, steps));
        run.steps.push_back(rec);
    }
    return run;
}

// ---- evaluation ---------------------------------------------------------------

std::vector<EvalRow> evaluate(const ToyMaeModel& model, const ExperimentConfig& cfg, const Corpus& corpus,
                              const std::vector<std::string>& splits, const std::vector<Task>& tasks) {
    std::vector<EvalRow> rows;
    for (const auto& split : splits) {
        const auto& data = corpus.split(split);
        for (std::size_t d = 0; d < data.size(); ++d) {
            std::size_t n = data[d].size();
            if (cfg.eval.max_samples > 0) n = std::min(n, cfg.eval.max_samples);
            for (Task task : tasks) {
                EvalRow row{corpus.specs[d].name, split, task, n, 0.0, 0.0};
                if (n == 0) continue;
                for (std::size_t i = 0; i < n; ++i) {
                    const CsiSample& s = data[d][i];
                    const MaskKind kind = mask_kind_for(task);
                    const double param = mask_param(cfg.mask, kind, patchify(s.data, cfg.patch));
                    ComplexTensor pred = predict_task(model, s.data, cfg.patch, task, param,
                                                      derive_seed(cfg.seed, kEvalStream, s.sample_id));
                    row.nmse_linear += nmse(s.data, pred).linear;
                }
                row.nmse_linear /= static_cast<double>(n);
                row.nmse_db = row.nmse_linear == 0.0 ? -std::numeric_limits<double>::infinity()
                                                     : 10.0 * std::log10(row.nmse_linear);
                rows.push_back(row);
            }
        }
    }
    return rows;
}

double average_db(const std::vector<EvalRow>& rows, Task task, const std::string& split) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows)
        if (r.task == task && r.split == split) {
            sum += r.nmse_db;
            ++n;
        }
    if (n == 0) throw std::invalid_argument("average_db: no rows for task/split");
    return sum / static_cast<double>(n);
}

// ---- conflict -----------------------------------------------------------------

ConflictRun run_conflict(const ExperimentConfig& cfg, const Corpus& corpus, std::uint64_t seed) {
    ExperimentConfig local = cfg;
    local.seed = seed;
    TrainRun warm = train_model(local, corpus, Strategy::global, 1, cfg.study.conflict.snapshot_steps);

    const SamplePool pool = make_pool(corpus.train, cfg.patch);
    std::set<std::uint32_t> lengths;
    for (const auto& e : pool.entries()) lengths.insert(e.length);
    const std::size_t bs = cfg.schedule.batch_size;
    BatchPlan mixed = build_plan(pool, Strategy::global, 1, bs, derive_seed(seed, kConflictStream, 0));
    BatchPlan homogeneous =
        build_plan(pool, Strategy::proposed, lengths.size(), bs, derive_seed(seed, kConflictStream, 1));

    ConflictOptions opt;
    opt.n_pairs = cfg.study.conflict.n_pairs;
    opt.mask_ratio = cfg.mask.random_ratio;
    opt.seed = derive_seed(seed, kConflictStream, 2);
    auto [a, b] = conflict_experiment(warm.state.model, mixed, homogeneous, make_sequences(corpus.train, cfg.patch),
                                      opt);
    return {seed, std::move(a), std::move(b)};
}

// ---- subcommands --------------------------------------------------------------

namespace {

fs::path datasets_dir(const ExperimentConfig& cfg) { return cfg.out_dir / "datasets"; }

json read_json(const fs::path& path) {
    try {
        return json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw DataError("malformed " + path.string() + ": " + e.what());
    }
}

std::string timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

json dataset_hashes(const ExperimentConfig& cfg) {
    const fs::path manifest = datasets_dir(cfg) / "manifest.json";
    if (!fs::exists(manifest)) return json::array();
    json out = json::array();
    const json recorded = read_json(manifest);
    for (const auto& d : recorded.at("datasets"))
        out.push_back({{"name", d.at("name")}, {"hash", d.at("hash")}});
    return out;
}

std::string eval_csv(const std::vector<EvalRow>& rows) {
    std::string out = "dataset,split,task,samples,nmse_linear,nmse_db\n";
    for (const auto& r : rows)
        out += r.dataset + "," + r.split + "," + to_string(r.task) + "," + std::to_string(r.samples) + "," +
               num(r.nmse_linear) + "," + format_db(r.nmse_db) + "\n";
    return out;
}

json eval_summary(const std::vector<EvalRow>& rows) {
    json avg = json::object();
    std::set<std::pair<std::string, std::string>> keys;
    for (const auto& r : rows) keys.insert({r.split, to_string(r.task)});
    for (const auto& [split, task] : keys)
        avg[split][task] = format_db(average_db(rows, parse_task(task), split));
    return avg;
}

json param_layout(const ToyMaeModel& model) {
    json out = json::array();
    for (const Param* p : model.params())
        out.push_back({{"name", p->name},
                       {"block", to_string(block_type(p->name))},
                       {"shape", json::array({p->value.rows(), p->value.cols()})}});
    return out;
}

void write_metadata(const fs::path& dir, const std::string& command, const std::string& started) {
    write_text(dir / "metadata.json",
               json{{"command", command}, {"started", started}, {"finished", timestamp()}}.dump(2) + "\n");
}

json cost_json(const CostReport& c) {
    return {{"cost", c.cost}, {"valid_tokens", c.valid_tokens}, {"jpad", c.jpad}, {"padding_ratio", c.padding_ratio}};
}

double final_reconstruction_db(const ExperimentConfig& cfg, const Corpus& corpus, const ToyMaeModel& model) {
    auto rows = evaluate(model, cfg, corpus, {"test"}, {Task::reconstruction});
    return average_db(rows, Task::reconstruction, "test");
}

}  // namespace

void cmd_generate(const ExperimentConfig& cfg) {
    const std::string started = timestamp();
    const fs::path dir = datasets_dir(cfg);
    fs::create_directories(dir);
    const fs::path manifest_path = dir / "manifest.json";
    std::map<std::string, std::string> recorded;
    if (fs::exists(manifest_path)) {
        const json old = read_json(manifest_path);
        for (const auto& d : old.at("datasets"))
            recorded[d.at("name").get<std::string>()] = d.at("hash").get<std::string>();
    }

    json entries = json::array();
    for (const auto& spec : cfg.datasets) {
        const auto bytes = encode_dataset(generate_dataset(spec));
        const std::string hash = content_hash(bytes);
        const fs::path file = dir / (spec.name + ".bin");
        if (fs::exists(file)) {
            const std::string current = content_hash(read_file_bytes(file));
            auto it = recorded.find(spec.name);
            if (it != recorded.end() && it->second != current)
                throw DataError("dataset file " + file.string() + " does not match its manifest hash");
            if (current != hash)
                throw DataError("existing dataset " + file.string() + " differs from the configured content");
        } else {
            write_file_bytes(file, bytes);
        }
        json e = dataset_json(spec);
        e["file"] = file.filename().string();
        e["hash"] = hash;
        entries.push_back(e);
    }
    json manifest = {{"format_version", kFormatVersion}, {"datasets", entries}, {"config", cfg.to_json()}};
    write_text(manifest_path, manifest.dump(2) + "\n");
    write_metadata(dir, "generate", started);
}

Corpus load_corpus(const ExperimentConfig& cfg) {
    const fs::path dir = datasets_dir(cfg);
    const fs::path manifest_path = dir / "manifest.json";
    if (!fs::exists(manifest_path))
        throw DataError("no dataset manifest at " + manifest_path.string() + "; run generate first");
    const json manifest = read_json(manifest_path);
    std::map<std::string, json> recorded;
    for (const auto& d : manifest.at("datasets")) recorded[d.at("name").get<std::string>()] = d;

    std::vector<std::vector<CsiSample>> clean;
    for (const auto& spec : cfg.datasets) {
        auto it = recorded.find(spec.name);
        if (it == recorded.end())
            throw DataError("dataset '" + spec.name + "' missing from manifest; run generate");
        const fs::path file = dir / it->second.at("file").get<std::string>();
        const auto bytes = read_file_bytes(file);
        if (content_hash(bytes) != it->second.at("hash").get<std::string>())
            throw DataError("dataset file " + file.string() + " does not match its manifest hash");
        auto samples = decode_dataset(bytes);
        if (samples.size() != spec.n_samples || (!samples.empty() && !(samples[0].data.scale == spec.scale)) ||
            (!samples.empty() && samples[0].dataset_id != spec.dataset_id))
            throw DataError("dataset '" + spec.name + "' on disk does not match the config");
        clean.push_back(std::move(samples));
    }
    return make_corpus(cfg, cfg.datasets, std::move(clean));
}

void cmd_train(const ExperimentConfig& cfg) {
    const std::string started = timestamp();
    const Corpus corpus = load_corpus(cfg);
    TrainRun run = train_model(cfg, corpus, cfg.schedule.strategy, cfg.schedule.buckets, cfg.train.steps);

    const fs::path dir = cfg.out_dir / "train";
    fs::create_directories(dir / "plans");
    save_checkpoint(dir / "checkpoint.bin", run.state.model, run.state.step);

    std::string log = "step,epoch,group,batch_size,padded_len,valid_tokens,padding_tokens,padding_ratio,mask_kind,loss\n";
    for (const auto& r : run.steps) {
        const double ratio = static_cast<double>(r.padding_tokens) /
                             static_cast<double>(r.batch_size * static_cast<std::uint64_t>(r.padded_len));
        log += std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + std::to_string(r.group) + "," +
               std::to_string(r.batch_size) + "," + std::to_string(r.padded_len) + "," +
               std::to_string(r.valid_tokens) + "," + std::to_string(r.padding_tokens) + "," + num(ratio) + "," +
               to_string(r.mask_kind) + "," + num(r.loss) + "\n";
    }
    write_text(dir / "train_log.csv", log);

    std::string div = "epoch,batches,violations,min_entropy,mean_entropy,jpad,padding_ratio\n";
    for (const auto& e : run.epochs) {
        const auto& h = e.diversity.entropies;
        const double mn = h.empty() ? 0.0 : *std::min_element(h.begin(), h.end());
        double mean = 0.0;
        for (double v : h) mean += v;
        mean = h.empty() ? 0.0 : mean / static_cast<double>(h.size());
        div += std::to_string(e.epoch) + "," + std::to_string(e.plan.batches.size()) + "," +
               std::to_string(e.diversity.violations) + "," + num(mn) + "," + num(mean) + "," +
               std::to_string(e.cost.jpad) + "," + num(e.cost.padding_ratio) + "\n";
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%04zu.json", e.epoch);
        write_text(dir / "plans" / name, serialize_plan(e.plan));
    }
    write_text(dir / "diversity.csv", div);

    json manifest = {{"format_version", kFormatVersion},
                     {"config", cfg.to_json()},
                     {"datasets", dataset_hashes(cfg)},
                     {"steps", run.state.step},
                     {"final_loss", run.steps.empty() ? 0.0 : run.steps.back().loss},
                     {"parameter_count", run.state.model.parameter_count()},
                     {"parameters", param_layout(run.state.model)}};
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    write_metadata(dir, "train", started);
}

void cmd_eval(const ExperimentConfig& cfg, const std::optional<fs::path>& checkpoint, bool untrained) {
    const std::string started = timestamp();
    ToyMaeModel model;
    std::string source;
    if (untrained) {
        model = ToyMaeModel(cfg.model, derive_seed(cfg.seed, kModelStream));
        source = "untrained";
    } else {
        const fs::path ckpt = checkpoint.value_or(cfg.out_dir / "train" / "checkpoint.bin");
        if (!fs::exists(ckpt)) throw DataError("checkpoint not found: " + ckpt.string());
        model = load_checkpoint(ckpt);
        if (!(model.config() == cfg.model))
            throw ConfigError("checkpoint model shape differs from the config");
        source = ckpt.string();
    }

    const Corpus corpus = load_corpus(cfg);
    auto rows = evaluate(model, cfg, corpus, cfg.eval.splits, cfg.eval.tasks);
    if (!cfg.eval.zero_shot.empty()) {
        std::vector<std::vector<CsiSample>> clean;
        for (const auto& d : cfg.eval.zero_shot) clean.push_back(generate_dataset(d));
        ExperimentConfig zs = cfg;
        zs.split = {0.0, 0.0, 1.0};
        Corpus zc = make_corpus(zs, cfg.eval.zero_shot, std::move(clean));
        for (auto& r : evaluate(model, cfg, zc, {"test"}, cfg.eval.tasks)) {
            r.split = "zero-shot";
            rows.push_back(r);
        }
    }

    const fs::path dir = cfg.out_dir / (untrained ? "eval_untrained" : "eval");
    write_text(dir / "nmse.csv", eval_csv(rows));
    json summary = {{"format_version", kFormatVersion}, {"model", source}, {"average_db", eval_summary(rows)}};
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    write_metadata(dir, "eval", started);
}

void cmd_study(const std::string& name, const ExperimentConfig& cfg) {
    if (name != "strategy-compare" && name != "bucket-sweep" && name != "conflict")
        throw ConfigError("unknown study '" + name + "'");
    const std::string started = timestamp();
    const fs::path dir = cfg.out_dir / "study" / name;
    const Corpus corpus = load_corpus(cfg);
    const SamplePool pool = make_pool(corpus.train, cfg.patch);
    const std::size_t bs = cfg.schedule.batch_size;
    json summary = {{"format_version", kFormatVersion}, {"study", name}, {"config", cfg.to_json()}};

    if (name == "strategy-compare" || name == "bucket-sweep") {
        const bool sweep = name == "bucket-sweep";
        std::string csv = sweep ? "buckets,jpad,padding_ratio,cost,valid_tokens,final_nmse_db\n"
                                : "strategy,jpad,padding_ratio,cost,valid_tokens,final_nmse_db\n";
        json rows = json::array();
        const std::size_t n = sweep ? cfg.study.bucket_sweep.size() : cfg.study.strategies.size();
        for (std::size_t i = 0; i < n; ++i) {
            const Strategy s = sweep ? Strategy::proposed : cfg.study.strategies[i];
            const std::size_t B = sweep ? cfg.study.bucket_sweep[i] : cfg.schedule.buckets;
            const CostReport cost =
                compute_cost(build_plan(pool, s, B, bs, derive_seed(cfg.seed, kPlanStream, 0)), pool);
            TrainRun run = train_model(cfg, corpus, s, B, cfg.train.steps);
            const double db = final_reconstruction_db(cfg, corpus, run.state.model);
            const std::string key = sweep ? std::to_string(B) : to_string(s);
            csv += key + "," + std::to_string(cost.jpad) + "," + num(cost.padding_ratio) + "," +
                   std::to_string(cost.cost) + "," + std::to_string(cost.valid_tokens) + "," + format_db(db) + "\n";
            json row = cost_json(cost);
            row[sweep ? "buckets" : "strategy"] = sweep ? json(B) : json(key);
            row["final_nmse_db"] = format_db(db);
            rows.push_back(row);
        }
        write_text(dir / "results.csv", csv);
        summary["rows"] = rows;
    } else {
        std::string csv = "seed,plan,pairs,fraction_negative,mean_cosine\n";
        std::string hist = "seed,plan,bin_lo,bin_hi,count\n";
        json rows = json::array();
        for (auto seed : cfg.study.conflict.seeds) {
            ConflictRun r = run_conflict(cfg, corpus, seed);
            for (const auto& [label, st] : {std::pair<std::string, const ConflictStats*>{"mixed", &r.mixed},
                                            std::pair<std::string, const ConflictStats*>{"homogeneous",
                                                                                         &r.homogeneous}}) {
                double mean = 0.0;
                for (double c : st->cosines) mean += c;
                mean /= static_cast<double>(std::max<std::size_t>(1, st->cosines.size()));
                csv += std::to_string(seed) + "," + label + "," + std::to_string(st->cosines.size()) + "," +
                       num(st->fraction_negative) + "," + num(mean) + "\n";
                for (std::size_t b = 0; b < st->histogram.size(); ++b) {
                    const double w = 2.0 / static_cast<double>(kConflictBins);
                    hist += std::to_string(seed) + "," + label + "," + num(-1.0 + w * b) + "," +
                            num(-1.0 + w * (b + 1)) + "," + std::to_string(st->histogram[b]) + "\n";
                }
                rows.push_back({{"seed", seed},
                                {"plan", label},
                                {"fraction_negative", st->fraction_negative},
                                {"mean_cosine", mean}});
            }
        }
        write_text(dir / "results.csv", csv);
        write_text(dir / "histogram.csv", hist);
        summary["rows"] = rows;
        summary["gradient_layout"] = param_layout(ToyMaeModel(cfg.model, 0));
    }
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    write_metadata(dir, "study " + name, started);
}

}  // namespace csimae
