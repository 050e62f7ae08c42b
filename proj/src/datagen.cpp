#include "csimae/datagen.hpp"

#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include <json.hpp>

#include "csimae/error.hpp"

namespace csimae {

namespace {

using cd = std::complex<double>;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

}  // namespace

void ScenarioPreset::validate() const {
    if (num_paths < 1)
        throw ConfigError("preset '" + name + "': num_paths must be >= 1");
    if (!(delay_spread > 0) || !(doppler_spread > 0) || !(angle_spread > 0))
        throw ConfigError("preset '" + name + "': spreads must be > 0");
}

std::vector<ScenarioPreset> load_presets(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open scenario presets " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed presets file: " + std::string(e.what()));
    }
    if (j.value("format_version", 0) != 1)
        throw ConfigError("unsupported presets format_version");
    std::vector<ScenarioPreset> out;
    try {
        for (const auto& p : j.at("presets")) {
            ScenarioPreset s;
            s.name = p.at("name").get<std::string>();
            s.num_paths = p.at("num_paths").get<std::uint32_t>();
            s.delay_spread = p.at("delay_spread").get<double>();
            s.doppler_spread = p.at("doppler_spread").get<double>();
            s.angle_spread = p.at("angle_spread").get<double>();
            s.power_decay_db = p.at("power_decay_db").get<double>();
            s.validate();
            out.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed presets file: " + std::string(e.what()));
    }
    return out;
}

const ScenarioPreset& find_preset(const std::vector<ScenarioPreset>& presets, const std::string& name) {
    for (const auto& p : presets)
        if (p.name == name)
            return p;
    throw ConfigError("unknown scenario preset '" + name + "'");
}

void DatasetSpec::validate() const {
    scenario.validate();
    try {
        scale.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("dataset '" + name + "': " + e.what());
    }
    if (n_samples < 1)
        throw ConfigError("dataset '" + name + "': n_samples must be >= 1");
    if (!(carrier_spacing > 0) || !(time_step > 0))
        throw ConfigError("dataset '" + name + "': carrier_spacing and time_step must be > 0");
    if (n_samples >= (1u << 20))
        throw ConfigError("dataset '" + name + "': at most 2^20 - 1 samples per dataset");
}

ComplexTensor synthesize_channel(const std::vector<PathParams>& paths, const ScaleSpec& scale,
                                 double time_step, double carrier_spacing) {
    scale.validate();
    ComplexTensor h(scale);
    std::vector<cd> time_phase(scale.T), freq_phase(scale.K), ant_phase(scale.A);
    for (const PathParams& p : paths) {
        const cd gain(p.gain_re, p.gain_im);
        for (std::uint32_t t = 0; t < scale.T; ++t)
            time_phase[t] = std::polar(1.0, kTwoPi * p.doppler * t * time_step);
        for (std::uint32_t k = 0; k < scale.K; ++k)
            freq_phase[k] = std::polar(1.0, -kTwoPi * p.delay * k * carrier_spacing);
        const double steer = std::numbers::pi * std::sin(p.angle);
        for (std::uint32_t a = 0; a < scale.A; ++a)
            ant_phase[a] = std::polar(1.0, steer * a);

        for (std::uint32_t t = 0; t < scale.T; ++t)
            for (std::uint32_t k = 0; k < scale.K; ++k) {
                const cd tk = gain * time_phase[t] * freq_phase[k];
                for (std::uint32_t a = 0; a < scale.A; ++a) {
                    const cd v = tk * ant_phase[a];
                    std::size_t i = h.index(t, k, a);
                    h.re[i] += v.real();
                    h.im[i] += v.imag();
                }
            }
    }
    return h;
}

std::vector<PathParams> draw_paths(const ScenarioPreset& preset, Philox& rng) {
    std::vector<double> power(preset.num_paths);
    double total = 0.0;
    for (std::uint32_t p = 0; p < preset.num_paths; ++p) {
        power[p] = std::pow(10.0, -preset.power_decay_db * p / 10.0);
        total += power[p];
    }
    const double mean_angle = (rng.uniform() * 2.0 - 1.0) * std::numbers::pi / 3.0;
    std::vector<PathParams> paths(preset.num_paths);
    for (std::uint32_t p = 0; p < preset.num_paths; ++p) {
        const double amp = std::sqrt(power[p] / total / 2.0);
        paths[p].gain_re = amp * rng.normal();
        paths[p].gain_im = amp * rng.normal();
        paths[p].doppler = preset.doppler_spread * std::cos(kTwoPi * rng.uniform());
        paths[p].delay = -preset.delay_spread * std::log(1.0 - rng.uniform());
        paths[p].angle = mean_angle + preset.angle_spread * rng.normal();
    }
    return paths;
}

std::uint32_t make_sample_id(std::uint32_t dataset_id, std::uint32_t index) {
    return (dataset_id << 20) | index;
}

CsiSample generate_sample(const DatasetSpec& spec, std::uint32_t index) {
    Philox rng(spec.seed, index);
    auto paths = draw_paths(spec.scenario, rng);
    CsiSample s;
    s.data = synthesize_channel(paths, spec.scale, spec.time_step, spec.carrier_spacing);
    const double power = s.data.mean_power();
    if (power > 0) {
        const double g = 1.0 / std::sqrt(power);
        for (double& v : s.data.re) v *= g;
        for (double& v : s.data.im) v *= g;
    }
    s.scenario_id = spec.scenario_id;
    s.dataset_id = spec.dataset_id;
    s.sample_id = make_sample_id(spec.dataset_id, index);
    return s;
}

std::vector<CsiSample> generate_dataset(const DatasetSpec& spec) {
    spec.validate();
    std::vector<CsiSample> out;
    out.reserve(spec.n_samples);
    for (std::uint32_t i = 0; i < spec.n_samples; ++i)
        out.push_back(generate_sample(spec, i));
    return out;
}

CsiSample add_noise(const CsiSample& sample, double snr_db, std::uint64_t seed) {
    if (!sample.data.all_finite())
        throw std::invalid_argument("add_noise: sample contains NaN or Inf");
    CsiSample out = sample;
    const double noise_power = sample.data.mean_power() / std::pow(10.0, snr_db / 10.0);
    const double sigma = std::sqrt(noise_power / 2.0);
    Philox rng(seed, sample.sample_id);
    for (std::size_t i = 0; i < out.data.re.size(); ++i) {
        out.data.re[i] += sigma * rng.normal();
        out.data.im[i] += sigma * rng.normal();
    }
    return out;
}

}  // namespace csimae
