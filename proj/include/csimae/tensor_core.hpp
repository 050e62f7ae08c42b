#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace csimae {

using Matrix = Eigen::MatrixXd;

/// Tensor extent along time blocks, subcarriers and antenna ports.
struct ScaleSpec {
    std::uint32_t T = 1;
    std::uint32_t K = 1;
    std::uint32_t A = 1;

    void validate() const;
    std::size_t elements() const { return std::size_t{T} * K * A; }
    friend bool operator==(const ScaleSpec&, const ScaleSpec&) = default;
};

/// Patch edge lengths (t, k, a).
struct PatchSpec {
    std::uint32_t t = 2;
    std::uint32_t k = 2;
    std::uint32_t a = 2;

    void validate() const;
    std::size_t volume() const { return std::size_t{t} * k * a; }
    /// Real and imaginary parts of every patch element.
    std::size_t token_dim() const { return 2 * volume(); }
    friend bool operator==(const PatchSpec&, const PatchSpec&) = default;
};

/// Patch counts per axis.
struct GridShape {
    std::uint32_t T = 1;
    std::uint32_t K = 1;
    std::uint32_t A = 1;

    std::size_t size() const { return std::size_t{T} * K * A; }
    /// Row-major (time, frequency, antenna) position of a token.
    std::size_t index(std::uint32_t gt, std::uint32_t gk, std::uint32_t ga) const {
        return (std::size_t{gt} * K + gk) * A + ga;
    }
    friend bool operator==(const GridShape&, const GridShape&) = default;
};

GridShape grid_shape(const ScaleSpec& scale, const PatchSpec& patch);

/// Number of tokens after 3D patching: ceil(T/t) * ceil(K/k) * ceil(A/a).
std::size_t token_length(const ScaleSpec& scale, const PatchSpec& patch);

/// Complex 3D array stored as separate real/imaginary blocks, row-major T->K->A.
struct ComplexTensor {
    ScaleSpec scale;
    std::vector<double> re;
    std::vector<double> im;

    ComplexTensor() = default;
    explicit ComplexTensor(const ScaleSpec& s);

    std::size_t index(std::uint32_t t, std::uint32_t k, std::uint32_t a) const {
        return (std::size_t{t} * scale.K + k) * scale.A + a;
    }
    bool all_finite() const;
    double mean_power() const;
    friend bool operator==(const ComplexTensor&, const ComplexTensor&) = default;
};

struct CsiSample {
    ComplexTensor data;
    std::uint32_t scenario_id = 0;
    std::uint32_t dataset_id = 0;
    std::uint32_t sample_id = 0;

    friend bool operator==(const CsiSample&, const CsiSample&) = default;
};

/// Patched token matrix of one sample. Rows at index >= valid_len are padding.
struct TokenSequence {
    Matrix tokens;  // padded_len x token_dim
    std::size_t valid_len = 0;
    GridShape grid;
    ScaleSpec scale;
    PatchSpec patch;

    std::size_t padded_len() const { return static_cast<std::size_t>(tokens.rows()); }
};

/// Throws std::invalid_argument on non-finite input.
TokenSequence patchify(const CsiSample& sample, const PatchSpec& patch);
TokenSequence patchify(const ComplexTensor& tensor, const PatchSpec& patch);

/// Inverse of patchify over the valid tokens; intra-sample fill is dropped.
ComplexTensor depatchify(const TokenSequence& seq, const ScaleSpec& scale, const PatchSpec& patch);

/// Appends zero rows up to target_len. Never truncates valid tokens.
TokenSequence pad_tokens(const TokenSequence& seq, std::size_t target_len);

// Binary dataset format (little-endian):
//   file   := u32 count, record{count}
//   record := u32 magic, version, T, K, A, scenario_id, dataset_id, sample_id,
//             f64 re[T*K*A], f64 im[T*K*A]
inline constexpr std::uint32_t kSampleMagic = 0x31495343u;  // "CSI1"
inline constexpr std::uint32_t kSampleVersion = 1;

std::vector<std::uint8_t> encode_dataset(std::span<const CsiSample> samples);
std::vector<CsiSample> decode_dataset(std::span<const std::uint8_t> bytes);

void write_dataset(const std::filesystem::path& path, std::span<const CsiSample> samples);
std::vector<CsiSample> read_dataset(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

/// 64-bit FNV-1a, rendered as 16 lowercase hex digits.
std::string content_hash(std::span<const std::uint8_t> bytes);

}  // namespace csimae
