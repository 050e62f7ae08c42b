#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "csimae/masking.hpp"
#include "csimae/tensor_core.hpp"

namespace csimae {

struct ModelConfig {
    std::size_t token_dim = 16;
    std::size_t embed_dim = 32;
    std::size_t heads = 2;
    std::size_t encoder_depth = 2;
    std::size_t decoder_depth = 1;
    std::size_t mlp_ratio = 2;
    GridShape max_grid{16, 16, 16};  // positional table sizes per axis
    std::size_t max_seq_len = 4096;

    void validate() const;
    std::size_t head_dim() const { return embed_dim / heads; }
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// A named parameter tensor and its accumulated gradient.
struct Param {
    std::string name;
    Matrix value;
    Matrix grad;
};

/// Parameter groups probed by the gradient checker.
enum class BlockType { embedding, attention, layer_norm, mlp, mask_token, output_head };
BlockType block_type(const std::string& param_name);
std::string to_string(BlockType t);

struct LinearParams {
    Param W;  // in x out
    Param b;  // 1 x out
};

struct LayerNormParams {
    Param gamma;  // 1 x d
    Param beta;   // 1 x d
};

struct TransformerBlock {
    LayerNormParams ln1;
    LinearParams q, k, v, o;
    LayerNormParams ln2;
    LinearParams fc1, fc2;
};

/// ViT-style masked autoencoder: patch embedding plus factorized 3D
/// positional tables, pre-norm encoder blocks, a mask token, pre-norm decoder
/// blocks and a linear head back to token_dim.
class ToyMaeModel {
public:
    ToyMaeModel() = default;
    ToyMaeModel(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }

    /// Canonical parameter order; also the layout of flat vectors.
    std::vector<Param*> params();
    std::vector<const Param*> params() const;

    std::size_t parameter_count() const;
    void zero_grad();
    Eigen::VectorXd flat_gradient() const;
    Eigen::VectorXd flat_parameters() const;

    LinearParams patch_embed;
    Param pos_time, pos_freq, pos_ant;
    std::vector<TransformerBlock> encoder;
    LayerNormParams enc_norm;
    LinearParams dec_embed;
    Param mask_token;  // 1 x d
    std::vector<TransformerBlock> decoder;
    LayerNormParams dec_norm;
    LinearParams head;

private:
    ModelConfig config_;
};

/// softmax(Q K^T / sqrt(d_k) + M) V for each head, heads concatenated.
/// Q, K, V are L x d; M is L x L. Throws NumericError on NaN input.
Matrix masked_attention(const Matrix& Q, const Matrix& K, const Matrix& V, const Matrix& M,
                        std::size_t heads, std::vector<Matrix>* probs = nullptr);

/// Row-wise softmax with max subtraction; masked logits give exactly 0.
Matrix softmax_rows(const Matrix& S);

/// Mini-batch of equally padded sequences with one MAE mask per sample.
struct MaeBatch {
    std::vector<TokenSequence> seqs;
    std::vector<MaeMask> masks;

    std::size_t size() const { return seqs.size(); }
    std::size_t length() const { return seqs.empty() ? 0 : seqs.front().padded_len(); }
    std::vector<std::size_t> valid_lens() const;
};

/// Pads every sequence to max(valid_len) (or `length` when larger).
MaeBatch make_batch(std::vector<TokenSequence> seqs, std::vector<MaeMask> masks, std::size_t length = 0);

struct ForwardResult {
    std::vector<Matrix> recon;  // per sample, padded_len x token_dim
    double loss = 0.0;
    std::size_t hidden_tokens = 0;
};

/// Masked-MSE forward pass. `pad_bias` must come from build_attn_bias over the
/// batch valid lengths; the encoder additionally hides MAE-masked keys.
ForwardResult forward(const ToyMaeModel& model, const MaeBatch& batch, const AttnBias& pad_bias);
ForwardResult forward(const ToyMaeModel& model, const MaeBatch& batch);

/// Forward plus reverse-mode pass; gradients are accumulated into the
/// model's Param::grad. Returns the loss.
double forward_backward(ToyMaeModel& model, const MaeBatch& batch);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainState {
    ToyMaeModel model;
    std::vector<Matrix> first_moment;
    std::vector<Matrix> second_moment;
    std::uint64_t step = 0;
    std::uint64_t seed = 0;
    AdamConfig adam;

    TrainState() = default;
    TrainState(const ModelConfig& config, std::uint64_t seed);
};

/// One Adam update on the batch loss. Throws NumericError naming the first
/// parameter block whose gradient is not finite.
double train_step(TrainState& state, const MaeBatch& batch, double learning_rate);

enum class Task { reconstruction, time, frequency };
std::string to_string(Task t);
Task parse_task(const std::string& name);
MaskKind mask_kind_for(Task t);

/// Masks the sample per task (random ratio, T_h or K_u), predicts the hidden
/// tokens and splices them into the observed ones.
ComplexTensor predict_task(const ToyMaeModel& model, const ComplexTensor& sample, const PatchSpec& patch,
                           Task task, double param, std::uint64_t seed);

// Checkpoint (little-endian): u32 magic "HMAE", u32 version, u32 config
// fields, u64 step, u32 tensor count, then per tensor: u32 name length, name,
// u32 rows, u32 cols, f64 values row-major.
std::vector<std::uint8_t> encode_checkpoint(const ToyMaeModel& model, std::uint64_t step);
ToyMaeModel decode_checkpoint(std::span<const std::uint8_t> bytes, std::uint64_t* step = nullptr);
void save_checkpoint(const std::filesystem::path& path, const ToyMaeModel& model, std::uint64_t step);
ToyMaeModel load_checkpoint(const std::filesystem::path& path, std::uint64_t* step = nullptr);

}  // namespace csimae
