#include "csimae/tensor_core.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>

#include "csimae/error.hpp"

namespace csimae {

static_assert(std::endian::native == std::endian::little,
              "binary dataset IO assumes a little-endian host");

namespace {

std::uint32_t ceil_div(std::uint32_t a, std::uint32_t b) { return (a + b - 1) / b; }

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    out.insert(out.end(), raw, raw + sizeof(T));
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    template <typename T>
    T get() {
        if (pos_ + sizeof(T) > bytes_.size())
            throw DataError("dataset file truncated at byte " + std::to_string(pos_));
        T value;
        std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }

    bool at_end() const { return pos_ == bytes_.size(); }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

void ScaleSpec::validate() const {
    if (T < 1 || K < 1 || A < 1)
        throw std::invalid_argument("ScaleSpec axes must be >= 1");
}

void PatchSpec::validate() const {
    if (t < 1 || k < 1 || a < 1)
        throw std::invalid_argument("PatchSpec edges must be >= 1");
}

GridShape grid_shape(const ScaleSpec& scale, const PatchSpec& patch) {
    scale.validate();
    patch.validate();
    return {ceil_div(scale.T, patch.t), ceil_div(scale.K, patch.k), ceil_div(scale.A, patch.a)};
}

std::size_t token_length(const ScaleSpec& scale, const PatchSpec& patch) {
    return grid_shape(scale, patch).size();
}

ComplexTensor::ComplexTensor(const ScaleSpec& s)
    : scale(s), re(s.elements(), 0.0), im(s.elements(), 0.0) {}

bool ComplexTensor::all_finite() const {
    for (std::size_t i = 0; i < re.size(); ++i)
        if (!std::isfinite(re[i]) || !std::isfinite(im[i]))
            return false;
    return true;
}

double ComplexTensor::mean_power() const {
    double acc = 0.0;
    for (std::size_t i = 0; i < re.size(); ++i)
        acc += re[i] * re[i] + im[i] * im[i];
    return re.empty() ? 0.0 : acc / static_cast<double>(re.size());
}

TokenSequence patchify(const CsiSample& sample, const PatchSpec& patch) {
    return patchify(sample.data, patch);
}

TokenSequence patchify(const ComplexTensor& tensor, const PatchSpec& patch) {
    const ScaleSpec& s = tensor.scale;
    if (tensor.re.size() != s.elements() || tensor.im.size() != s.elements())
        throw std::invalid_argument("tensor storage does not match its scale");
    if (!tensor.all_finite())
        throw std::invalid_argument("patchify: tensor contains NaN or Inf");

    TokenSequence seq;
    seq.grid = grid_shape(s, patch);
    seq.scale = s;
    seq.patch = patch;
    seq.valid_len = seq.grid.size();
    const std::size_t vol = patch.volume();
    seq.tokens = Matrix::Zero(static_cast<Eigen::Index>(seq.valid_len),
                              static_cast<Eigen::Index>(2 * vol));

    for (std::uint32_t gt = 0; gt < seq.grid.T; ++gt)
        for (std::uint32_t gk = 0; gk < seq.grid.K; ++gk)
            for (std::uint32_t ga = 0; ga < seq.grid.A; ++ga) {
                auto row = static_cast<Eigen::Index>(seq.grid.index(gt, gk, ga));
                std::size_t col = 0;
                for (std::uint32_t dt = 0; dt < patch.t; ++dt)
                    for (std::uint32_t dk = 0; dk < patch.k; ++dk)
                        for (std::uint32_t da = 0; da < patch.a; ++da, ++col) {
                            std::uint32_t t = gt * patch.t + dt;
                            std::uint32_t k = gk * patch.k + dk;
                            std::uint32_t a = ga * patch.a + da;
                            if (t >= s.T || k >= s.K || a >= s.A)
                                continue;  // zero fill
                            std::size_t src = tensor.index(t, k, a);
                            seq.tokens(row, static_cast<Eigen::Index>(col)) = tensor.re[src];
                            seq.tokens(row, static_cast<Eigen::Index>(col + vol)) = tensor.im[src];
                        }
            }
    return seq;
}

ComplexTensor depatchify(const TokenSequence& seq, const ScaleSpec& scale, const PatchSpec& patch) {
    GridShape grid = grid_shape(scale, patch);
    if (!(grid == seq.grid) || seq.valid_len != grid.size())
        throw std::invalid_argument("depatchify: token grid does not match scale/patch");
    if (static_cast<std::size_t>(seq.tokens.cols()) != patch.token_dim() ||
        seq.padded_len() < seq.valid_len)
        throw std::invalid_argument("depatchify: token matrix shape mismatch");

    ComplexTensor out(scale);
    const std::size_t vol = patch.volume();
    for (std::uint32_t gt = 0; gt < grid.T; ++gt)
        for (std::uint32_t gk = 0; gk < grid.K; ++gk)
            for (std::uint32_t ga = 0; ga < grid.A; ++ga) {
                auto row = static_cast<Eigen::Index>(grid.index(gt, gk, ga));
                std::size_t col = 0;
                for (std::uint32_t dt = 0; dt < patch.t; ++dt)
                    for (std::uint32_t dk = 0; dk < patch.k; ++dk)
                        for (std::uint32_t da = 0; da < patch.a; ++da, ++col) {
                            std::uint32_t t = gt * patch.t + dt;
                            std::uint32_t k = gk * patch.k + dk;
                            std::uint32_t a = ga * patch.a + da;
                            if (t >= scale.T || k >= scale.K || a >= scale.A)
                                continue;
                            std::size_t dst = out.index(t, k, a);
                            out.re[dst] = seq.tokens(row, static_cast<Eigen::Index>(col));
                            out.im[dst] = seq.tokens(row, static_cast<Eigen::Index>(col + vol));
                        }
            }
    return out;
}

TokenSequence pad_tokens(const TokenSequence& seq, std::size_t target_len) {
    if (target_len < seq.valid_len)
        throw std::invalid_argument("pad_tokens: target length " + std::to_string(target_len) +
                                    " is below valid length " + std::to_string(seq.valid_len));
    TokenSequence out;
    out.valid_len = seq.valid_len;
    out.grid = seq.grid;
    out.scale = seq.scale;
    out.patch = seq.patch;
    out.tokens = Matrix::Zero(static_cast<Eigen::Index>(target_len), seq.tokens.cols());
    out.tokens.topRows(static_cast<Eigen::Index>(seq.valid_len)) =
        seq.tokens.topRows(static_cast<Eigen::Index>(seq.valid_len));
    return out;
}

std::vector<std::uint8_t> encode_dataset(std::span<const CsiSample> samples) {
    std::vector<std::uint8_t> out;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(samples.size()));
    for (const CsiSample& s : samples) {
        const ScaleSpec& sc = s.data.scale;
        for (std::uint32_t v : {kSampleMagic, kSampleVersion, sc.T, sc.K, sc.A, s.scenario_id,
                                s.dataset_id, s.sample_id})
            put(out, v);
        for (double v : s.data.re) put(out, v);
        for (double v : s.data.im) put(out, v);
    }
    return out;
}

std::vector<CsiSample> decode_dataset(std::span<const std::uint8_t> bytes) {
    Reader in(bytes);
    auto count = in.get<std::uint32_t>();
    std::vector<CsiSample> samples;
    samples.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        if (in.get<std::uint32_t>() != kSampleMagic)
            throw DataError("bad sample magic in record " + std::to_string(i));
        if (auto v = in.get<std::uint32_t>(); v != kSampleVersion)
            throw DataError("unsupported sample version " + std::to_string(v));
        CsiSample s;
        ScaleSpec sc{in.get<std::uint32_t>(), in.get<std::uint32_t>(), in.get<std::uint32_t>()};
        if (sc.T < 1 || sc.K < 1 || sc.A < 1)
            throw DataError("record " + std::to_string(i) + " has a zero-length axis");
        s.scenario_id = in.get<std::uint32_t>();
        s.dataset_id = in.get<std::uint32_t>();
        s.sample_id = in.get<std::uint32_t>();
        s.data = ComplexTensor(sc);
        for (double& v : s.data.re) v = in.get<double>();
        for (double& v : s.data.im) v = in.get<double>();
        samples.push_back(std::move(s));
    }
    if (!in.at_end())
        throw DataError("trailing bytes after last record");
    return samples;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_dataset(const std::filesystem::path& path, std::span<const CsiSample> samples) {
    write_file_bytes(path, encode_dataset(samples));
}

std::vector<CsiSample> read_dataset(const std::filesystem::path& path) {
    auto bytes = read_file_bytes(path);
    return decode_dataset(bytes);
}

std::string content_hash(std::span<const std::uint8_t> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i, h >>= 4)
        out[static_cast<std::size_t>(i)] = digits[h & 0xf];
    return out;
}

}  // namespace csimae
