#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "csimae/rng.hpp"
#include "csimae/tensor_core.hpp"

namespace csimae {

/// Propagation statistics for one scenario family.
struct ScenarioPreset {
    std::string name;
    std::uint32_t num_paths = 1;
    double delay_spread = 1e-7;    // seconds
    double doppler_spread = 10.0;  // Hz
    double angle_spread = 0.1;     // radians
    double power_decay_db = 1.0;   // dB per path index

    void validate() const;
};

/// Reads the versioned preset table (see configs/scenarios.json).
std::vector<ScenarioPreset> load_presets(const std::filesystem::path& path);
const ScenarioPreset& find_preset(const std::vector<ScenarioPreset>& presets, const std::string& name);

struct DatasetSpec {
    std::string name;
    std::uint32_t dataset_id = 0;
    std::uint32_t scenario_id = 0;
    ScenarioPreset scenario;
    ScaleSpec scale;
    double carrier_spacing = 30e3;  // Hz
    double time_step = 1e-3;        // seconds
    std::uint32_t n_samples = 1;
    std::uint64_t seed = 0;

    void validate() const;
};

/// One propagation path.
struct PathParams {
    double gain_re = 1.0;
    double gain_im = 0.0;
    double doppler = 0.0;  // Hz
    double delay = 0.0;    // seconds
    double angle = 0.0;    // radians
};

/// H[t,k,a] = sum_p g_p exp(j2pi(nu_p t dt - tau_p k df)) exp(j pi a sin(theta_p)).
ComplexTensor synthesize_channel(const std::vector<PathParams>& paths, const ScaleSpec& scale,
                                 double time_step, double carrier_spacing);

std::vector<PathParams> draw_paths(const ScenarioPreset& preset, Philox& rng);

/// Globally unique sample id for index i of a dataset.
std::uint32_t make_sample_id(std::uint32_t dataset_id, std::uint32_t index);

/// Sample i depends only on (spec, i): generation order does not matter.
CsiSample generate_sample(const DatasetSpec& spec, std::uint32_t index);
std::vector<CsiSample> generate_dataset(const DatasetSpec& spec);

/// Adds circular complex Gaussian noise at the given per-sample SNR. The draw
/// stream is keyed by (seed, sample_id).
CsiSample add_noise(const CsiSample& sample, double snr_db, std::uint64_t seed);

}  // namespace csimae
