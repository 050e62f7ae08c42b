#include "csimae/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "csimae/error.hpp"
#include "csimae/rng.hpp"

namespace csimae {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

Param make_param(std::string name, std::size_t rows, std::size_t cols) {
    Param p;
    p.name = std::move(name);
    p.value = Matrix::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
    return p;
}

void fill_normal(Param& p, double stddev, Philox& rng) {
    for (Eigen::Index i = 0; i < p.value.rows(); ++i)
        for (Eigen::Index j = 0; j < p.value.cols(); ++j)
            p.value(i, j) = stddev * rng.normal();
}

LinearParams make_linear(const std::string& name, std::size_t in, std::size_t out, Philox& rng) {
    LinearParams l{make_param(name + ".W", in, out), make_param(name + ".b", 1, out)};
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    for (Eigen::Index i = 0; i < l.W.value.rows(); ++i)
        for (Eigen::Index j = 0; j < l.W.value.cols(); ++j)
            l.W.value(i, j) = (2.0 * rng.uniform() - 1.0) * limit;
    return l;
}

LayerNormParams make_layer_norm(const std::string& name, std::size_t d) {
    LayerNormParams ln{make_param(name + ".gamma", 1, d), make_param(name + ".beta", 1, d)};
    ln.gamma.value.setOnes();
    return ln;
}

TransformerBlock make_block(const std::string& name, const ModelConfig& c, Philox& rng) {
    const std::size_t d = c.embed_dim;
    TransformerBlock b;
    b.ln1 = make_layer_norm(name + ".ln1", d);
    b.q = make_linear(name + ".attn.q", d, d, rng);
    b.k = make_linear(name + ".attn.k", d, d, rng);
    b.v = make_linear(name + ".attn.v", d, d, rng);
    b.o = make_linear(name + ".attn.o", d, d, rng);
    b.ln2 = make_layer_norm(name + ".ln2", d);
    b.fc1 = make_linear(name + ".mlp.fc1", d, c.mlp_ratio * d, rng);
    b.fc2 = make_linear(name + ".mlp.fc2", c.mlp_ratio * d, d, rng);
    return b;
}

template <typename BlockT, typename Out>
void collect_block(BlockT& b, Out& out) {
    for (auto* p : {&b.ln1.gamma, &b.ln1.beta, &b.q.W, &b.q.b, &b.k.W, &b.k.b, &b.v.W, &b.v.b, &b.o.W,
                    &b.o.b, &b.ln2.gamma, &b.ln2.beta, &b.fc1.W, &b.fc1.b, &b.fc2.W, &b.fc2.b})
        out.push_back(p);
}

template <typename ModelT, typename Out>
void collect_params(ModelT& m, Out& out) {
    for (auto* p : {&m.patch_embed.W, &m.patch_embed.b, &m.pos_time, &m.pos_freq, &m.pos_ant})
        out.push_back(p);
    for (auto& b : m.encoder) collect_block(b, out);
    for (auto* p : {&m.enc_norm.gamma, &m.enc_norm.beta, &m.dec_embed.W, &m.dec_embed.b, &m.mask_token})
        out.push_back(p);
    for (auto& b : m.decoder) collect_block(b, out);
    for (auto* p : {&m.dec_norm.gamma, &m.dec_norm.beta, &m.head.W, &m.head.b})
        out.push_back(p);
}

// ---- layers -------------------------------------------------------------

Matrix linear_forward(const LinearParams& l, const Matrix& x) {
    Matrix y = x * l.W.value;
    y.rowwise() += l.b.value.row(0);
    return y;
}

Matrix linear_backward(LinearParams& l, const Matrix& x, const Matrix& dy) {
    l.W.grad.noalias() += x.transpose() * dy;
    l.b.grad.row(0) += dy.colwise().sum();
    return dy * l.W.value.transpose();
}

struct LnCache {
    Matrix xhat;
    Eigen::VectorXd inv_std;
};

Matrix ln_forward(const LayerNormParams& p, const Matrix& x, LnCache& c) {
    Eigen::VectorXd mean = x.rowwise().mean();
    Matrix xc = x.colwise() - mean;
    Eigen::VectorXd var = xc.array().square().rowwise().mean();
    c.inv_std = (var.array() + kLnEps).rsqrt();
    c.xhat = xc.array().colwise() * c.inv_std.array();
    Matrix y = c.xhat.array().rowwise() * p.gamma.value.row(0).array();
    y.rowwise() += p.beta.value.row(0);
    return y;
}

Matrix ln_backward(LayerNormParams& p, const LnCache& c, const Matrix& dy) {
    p.gamma.grad.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    p.beta.grad.row(0) += dy.colwise().sum();
    Matrix dxhat = dy.array().rowwise() * p.gamma.value.row(0).array();
    const double d = static_cast<double>(dxhat.cols());
    Eigen::VectorXd s1 = dxhat.rowwise().sum();
    Eigen::VectorXd s2 = (dxhat.array() * c.xhat.array()).rowwise().sum();
    Matrix t = c.xhat.array().colwise() * s2.array();
    Matrix dx = (dxhat.array() * d).colwise() - s1.array();
    dx -= t;
    return dx.array().colwise() * (c.inv_std.array() / d);
}

Matrix gelu(const Matrix& u) {
    return u.unaryExpr([](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); });
}

Matrix gelu_grad(const Matrix& u) {
    return u.unaryExpr([](double x) {
        const double th = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
        return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
    });
}

struct BlockCache {
    LnCache ln1;
    Matrix h1, Q, K, V, ctx;
    std::vector<Matrix> probs;
    LnCache ln2;
    Matrix h2, u, g;
};

Matrix block_forward(const TransformerBlock& b, const Matrix& x, const Matrix& M, std::size_t heads,
                     BlockCache& c) {
    c.h1 = ln_forward(b.ln1, x, c.ln1);
    c.Q = linear_forward(b.q, c.h1);
    c.K = linear_forward(b.k, c.h1);
    c.V = linear_forward(b.v, c.h1);
    c.ctx = masked_attention(c.Q, c.K, c.V, M, heads, &c.probs);
    Matrix x1 = x + linear_forward(b.o, c.ctx);
    c.h2 = ln_forward(b.ln2, x1, c.ln2);
    c.u = linear_forward(b.fc1, c.h2);
    c.g = gelu(c.u);
    return x1 + linear_forward(b.fc2, c.g);
}

Matrix block_backward(TransformerBlock& b, const BlockCache& c, const Matrix& dy, std::size_t heads) {
    Matrix dg = linear_backward(b.fc2, c.g, dy);
    Matrix du = dg.cwiseProduct(gelu_grad(c.u));
    Matrix dh2 = linear_backward(b.fc1, c.h2, du);
    Matrix dx1 = dy + ln_backward(b.ln2, c.ln2, dh2);

    Matrix dctx = linear_backward(b.o, c.ctx, dx1);
    const auto dk = static_cast<Eigen::Index>(c.Q.cols() / static_cast<Eigen::Index>(heads));
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    Matrix dQ = Matrix::Zero(c.Q.rows(), c.Q.cols());
    Matrix dK = Matrix::Zero(c.K.rows(), c.K.cols());
    Matrix dV = Matrix::Zero(c.V.rows(), c.V.cols());
    for (std::size_t h = 0; h < heads; ++h) {
        const auto off = static_cast<Eigen::Index>(h) * dk;
        const Matrix& P = c.probs[h];
        Matrix dO = dctx.middleCols(off, dk);
        Matrix dP = dO * c.V.middleCols(off, dk).transpose();
        dV.middleCols(off, dk).noalias() += P.transpose() * dO;
        Eigen::VectorXd rowdot = (dP.array() * P.array()).rowwise().sum();
        Matrix dS = P.array() * (dP.array().colwise() - rowdot.array());
        dQ.middleCols(off, dk).noalias() += scale * (dS * c.K.middleCols(off, dk));
        dK.middleCols(off, dk).noalias() += scale * (dS.transpose() * c.Q.middleCols(off, dk));
    }
    Matrix dh1 = linear_backward(b.q, c.h1, dQ);
    dh1 += linear_backward(b.k, c.h1, dK);
    dh1 += linear_backward(b.v, c.h1, dV);
    return dx1 + ln_backward(b.ln1, c.ln1, dh1);
}

// ---- per-sample pass ----------------------------------------------------

struct SampleCache {
    Matrix enc_tokens;
    std::vector<BlockCache> enc;
    LnCache enc_norm;
    Matrix z;
    std::vector<BlockCache> dec;
    LnCache dec_norm;
    Matrix dec_out;
    Matrix recon;
};

struct Coords {
    std::uint32_t t, k, a;
};

Coords coords_of(const GridShape& g, std::size_t row) {
    auto r = static_cast<std::uint32_t>(row);
    return {r / (g.K * g.A), (r / g.A) % g.K, r % g.A};
}

void check_grid(const ModelConfig& c, const TokenSequence& s) {
    if (s.grid.T > c.max_grid.T || s.grid.K > c.max_grid.K || s.grid.A > c.max_grid.A)
        throw std::invalid_argument("token grid exceeds the model's positional tables");
    if (static_cast<std::size_t>(s.tokens.cols()) != c.token_dim)
        throw std::invalid_argument("token dimension does not match the model");
    if (s.padded_len() > c.max_seq_len)
        throw std::invalid_argument("sequence longer than max_seq_len");
}

Eigen::RowVectorXd position(const ToyMaeModel& m, const Coords& p) {
    return m.pos_time.value.row(p.t) + m.pos_freq.value.row(p.k) + m.pos_ant.value.row(p.a);
}

void sample_forward(const ToyMaeModel& m, const TokenSequence& seq, const MaeMask& mask, const Matrix& enc_bias,
                    const Matrix& dec_bias, SampleCache& c) {
    const ModelConfig& cfg = m.config();
    const auto L = static_cast<Eigen::Index>(seq.padded_len());
    const std::size_t valid = seq.valid_len;

    c.enc_tokens = seq.tokens;
    for (std::size_t r = 0; r < valid; ++r)
        if (mask.hidden[r]) c.enc_tokens.row(static_cast<Eigen::Index>(r)).setZero();

    Matrix x = linear_forward(m.patch_embed, c.enc_tokens);
    for (std::size_t r = 0; r < valid; ++r)
        x.row(static_cast<Eigen::Index>(r)) += position(m, coords_of(seq.grid, r));

    c.enc.resize(m.encoder.size());
    for (std::size_t i = 0; i < m.encoder.size(); ++i)
        x = block_forward(m.encoder[i], x, enc_bias, cfg.heads, c.enc[i]);
    c.z = ln_forward(m.enc_norm, x, c.enc_norm);

    Matrix emb = linear_forward(m.dec_embed, c.z);
    Matrix y(L, static_cast<Eigen::Index>(cfg.embed_dim));
    for (Eigen::Index r = 0; r < L; ++r) {
        const auto ur = static_cast<std::size_t>(r);
        if (ur >= valid) {
            y.row(r) = m.mask_token.value.row(0);
        } else if (mask.hidden[ur]) {
            y.row(r) = m.mask_token.value.row(0) + position(m, coords_of(seq.grid, ur));
        } else {
            y.row(r) = emb.row(r) + position(m, coords_of(seq.grid, ur));
        }
    }

    c.dec.resize(m.decoder.size());
    for (std::size_t i = 0; i < m.decoder.size(); ++i)
        y = block_forward(m.decoder[i], y, dec_bias, cfg.heads, c.dec[i]);
    c.dec_out = ln_forward(m.dec_norm, y, c.dec_norm);
    c.recon = linear_forward(m.head, c.dec_out);
}

void add_position_grad(ToyMaeModel& m, const Coords& p, const Eigen::RowVectorXd& g) {
    m.pos_time.grad.row(p.t) += g;
    m.pos_freq.grad.row(p.k) += g;
    m.pos_ant.grad.row(p.a) += g;
}

void sample_backward(ToyMaeModel& m, const TokenSequence& seq, const MaeMask& mask, const SampleCache& c,
                     const Matrix& drecon) {
    const std::size_t heads = m.config().heads;
    const std::size_t valid = seq.valid_len;

    Matrix dy = ln_backward(m.dec_norm, c.dec_norm, linear_backward(m.head, c.dec_out, drecon));
    for (std::size_t i = m.decoder.size(); i-- > 0;)
        dy = block_backward(m.decoder[i], c.dec[i], dy, heads);

    Matrix demb = Matrix::Zero(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const auto ur = static_cast<std::size_t>(r);
        if (ur >= valid) {
            m.mask_token.grad.row(0) += dy.row(r);
            continue;
        }
        add_position_grad(m, coords_of(seq.grid, ur), dy.row(r));
        if (mask.hidden[ur])
            m.mask_token.grad.row(0) += dy.row(r);
        else
            demb.row(r) = dy.row(r);
    }

    Matrix dx = ln_backward(m.enc_norm, c.enc_norm, linear_backward(m.dec_embed, c.z, demb));
    for (std::size_t i = m.encoder.size(); i-- > 0;)
        dx = block_backward(m.encoder[i], c.enc[i], dx, heads);
    for (std::size_t r = 0; r < valid; ++r)
        add_position_grad(m, coords_of(seq.grid, r), dx.row(static_cast<Eigen::Index>(r)));
    linear_backward(m.patch_embed, c.enc_tokens, dx);
}

void check_batch(const ToyMaeModel& m, const MaeBatch& batch, const AttnBias& pad_bias) {
    if (batch.seqs.size() != batch.masks.size())
        throw std::invalid_argument("batch needs one mask per sequence");
    if (pad_bias.M.size() != batch.size() || pad_bias.length != batch.length())
        throw std::invalid_argument("attention bias does not match the batch");
    for (std::size_t b = 0; b < batch.size(); ++b) {
        check_grid(m.config(), batch.seqs[b]);
        if (batch.seqs[b].padded_len() != batch.length())
            throw std::invalid_argument("batch sequences are not padded to a common length");
        if (batch.masks[b].hidden.size() != batch.seqs[b].valid_len)
            throw std::invalid_argument("mask length differs from valid length");
        if (pad_bias.valid_lens[b] != batch.seqs[b].valid_len)
            throw std::invalid_argument("attention bias valid length mismatch");
    }
}

AttnBias encoder_bias(const MaeBatch& batch) {
    std::vector<std::vector<std::uint8_t>> visible;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        std::vector<std::uint8_t> v(batch.length(), 0);
        for (std::size_t j = 0; j < batch.seqs[b].valid_len; ++j)
            v[j] = batch.masks[b].hidden[j] ? 0 : 1;
        visible.push_back(std::move(v));
    }
    return build_key_bias(visible);
}

std::size_t count_hidden(const MaeBatch& batch) {
    std::size_t n = 0;
    for (const auto& m : batch.masks) n += m.hidden_count();
    return n;
}

ForwardResult run(const ToyMaeModel& model, const MaeBatch& batch, const AttnBias& pad_bias,
                  std::vector<SampleCache>& caches) {
    check_batch(model, batch, pad_bias);
    AttnBias enc_bias = encoder_bias(batch);
    ForwardResult out;
    out.hidden_tokens = count_hidden(batch);
    const double norm = static_cast<double>(out.hidden_tokens * model.config().token_dim);
    caches.resize(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        sample_forward(model, batch.seqs[b], batch.masks[b], enc_bias.M[b], pad_bias.M[b], caches[b]);
        const auto& seq = batch.seqs[b];
        for (std::size_t r = 0; r < seq.valid_len; ++r)
            if (batch.masks[b].hidden[r]) {
                const auto ir = static_cast<Eigen::Index>(r);
                out.loss += (caches[b].recon.row(ir) - seq.tokens.row(ir)).squaredNorm();
            }
        out.recon.push_back(caches[b].recon);
    }
    out.loss = out.hidden_tokens == 0 ? 0.0 : out.loss / norm;
    if (!std::isfinite(out.loss))
        throw NumericError("non-finite loss");
    return out;
}

}  // namespace

// ---- config & model -----------------------------------------------------

void ModelConfig::validate() const {
    if (token_dim < 1 || embed_dim < 1 || heads < 1 || mlp_ratio < 1 || max_seq_len < 1)
        throw ConfigError("model dimensions must be >= 1");
    if (embed_dim % heads != 0)
        throw ConfigError("embed_dim must be divisible by the head count");
    if (max_grid.T < 1 || max_grid.K < 1 || max_grid.A < 1)
        throw ConfigError("model max_grid axes must be >= 1");
}

BlockType block_type(const std::string& n) {
    if (n == "mask_token") return BlockType::mask_token;
    if (n.starts_with("head.")) return BlockType::output_head;
    if (n.find(".attn.") != std::string::npos) return BlockType::attention;
    if (n.find(".mlp.") != std::string::npos) return BlockType::mlp;
    if (n.find("ln") != std::string::npos || n.find("norm") != std::string::npos) return BlockType::layer_norm;
    return BlockType::embedding;
}

std::string to_string(BlockType t) {
    switch (t) {
        case BlockType::embedding: return "embedding";
        case BlockType::attention: return "attention";
        case BlockType::layer_norm: return "layer_norm";
        case BlockType::mlp: return "mlp";
        case BlockType::mask_token: return "mask_token";
        case BlockType::output_head: return "output_head";
    }
    return "unknown";
}

ToyMaeModel::ToyMaeModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    const std::size_t d = config_.embed_dim;
    std::uint64_t stream = 0;
    auto next_rng = [&] { return Philox(seed, ++stream); };

    auto rng = next_rng();
    patch_embed = make_linear("patch_embed", config_.token_dim, d, rng);
    pos_time = make_param("pos.time", config_.max_grid.T, d);
    pos_freq = make_param("pos.freq", config_.max_grid.K, d);
    pos_ant = make_param("pos.ant", config_.max_grid.A, d);
    rng = next_rng();
    fill_normal(pos_time, 0.02, rng);
    fill_normal(pos_freq, 0.02, rng);
    fill_normal(pos_ant, 0.02, rng);
    for (std::size_t i = 0; i < config_.encoder_depth; ++i) {
        rng = next_rng();
        encoder.push_back(make_block("enc." + std::to_string(i), config_, rng));
    }
    enc_norm = make_layer_norm("enc_norm", d);
    rng = next_rng();
    dec_embed = make_linear("dec_embed", d, d, rng);
    mask_token = make_param("mask_token", 1, d);
    fill_normal(mask_token, 0.02, rng);
    for (std::size_t i = 0; i < config_.decoder_depth; ++i) {
        rng = next_rng();
        decoder.push_back(make_block("dec." + std::to_string(i), config_, rng));
    }
    dec_norm = make_layer_norm("dec_norm", d);
    rng = next_rng();
    head = make_linear("head", d, config_.token_dim, rng);
}

std::vector<Param*> ToyMaeModel::params() {
    std::vector<Param*> out;
    collect_params(*this, out);
    return out;
}

std::vector<const Param*> ToyMaeModel::params() const {
    std::vector<const Param*> out;
    collect_params(*this, out);
    return out;
}

std::size_t ToyMaeModel::parameter_count() const {
    std::size_t n = 0;
    for (const Param* p : params()) n += static_cast<std::size_t>(p->value.size());
    return n;
}

void ToyMaeModel::zero_grad() {
    for (Param* p : params()) p->grad.setZero();
}

Eigen::VectorXd ToyMaeModel::flat_gradient() const {
    Eigen::VectorXd out(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index off = 0;
    for (const Param* p : params())
        for (Eigen::Index i = 0; i < p->grad.rows(); ++i)
            for (Eigen::Index j = 0; j < p->grad.cols(); ++j) out(off++) = p->grad(i, j);
    return out;
}

Eigen::VectorXd ToyMaeModel::flat_parameters() const {
    Eigen::VectorXd out(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index off = 0;
    for (const Param* p : params())
        for (Eigen::Index i = 0; i < p->value.rows(); ++i)
            for (Eigen::Index j = 0; j < p->value.cols(); ++j) out(off++) = p->value(i, j);
    return out;
}

// ---- attention ------------------------------------------------------------

Matrix softmax_rows(const Matrix& S) {
    Matrix P(S.rows(), S.cols());
    for (Eigen::Index i = 0; i < S.rows(); ++i) {
        const double mx = S.row(i).maxCoeff();
        P.row(i) = (S.row(i).array() - mx).exp();
        P.row(i) /= P.row(i).sum();
    }
    return P;
}

Matrix masked_attention(const Matrix& Q, const Matrix& K, const Matrix& V, const Matrix& M, std::size_t heads,
                        std::vector<Matrix>* probs) {
    if (Q.hasNaN() || K.hasNaN() || V.hasNaN())
        throw NumericError("NaN in attention inputs");
    if (heads < 1 || Q.cols() % static_cast<Eigen::Index>(heads) != 0 || K.cols() != Q.cols() ||
        V.cols() != Q.cols() || K.rows() != V.rows() || M.rows() != Q.rows() || M.cols() != K.rows())
        throw std::invalid_argument("masked_attention: shape mismatch");
    const auto dk = Q.cols() / static_cast<Eigen::Index>(heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    Matrix ctx(Q.rows(), V.cols());
    if (probs) probs->resize(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const auto off = static_cast<Eigen::Index>(h) * dk;
        Matrix S = scale * (Q.middleCols(off, dk) * K.middleCols(off, dk).transpose());
        S += M;
        Matrix P = softmax_rows(S);
        ctx.middleCols(off, dk).noalias() = P * V.middleCols(off, dk);
        if (probs) (*probs)[h] = std::move(P);
    }
    return ctx;
}

// ---- batches & passes -----------------------------------------------------

std::vector<std::size_t> MaeBatch::valid_lens() const {
    std::vector<std::size_t> out;
    for (const auto& s : seqs) out.push_back(s.valid_len);
    return out;
}

MaeBatch make_batch(std::vector<TokenSequence> seqs, std::vector<MaeMask> masks, std::size_t length) {
    if (seqs.size() != masks.size())
        throw std::invalid_argument("make_batch: one mask per sequence required");
    for (const auto& s : seqs) length = std::max(length, s.valid_len);
    MaeBatch batch;
    for (auto& s : seqs) batch.seqs.push_back(pad_tokens(s, length));
    batch.masks = std::move(masks);
    return batch;
}

ForwardResult forward(const ToyMaeModel& model, const MaeBatch& batch, const AttnBias& pad_bias) {
    std::vector<SampleCache> caches;
    return run(model, batch, pad_bias, caches);
}

ForwardResult forward(const ToyMaeModel& model, const MaeBatch& batch) {
    auto lens = batch.valid_lens();
    return forward(model, batch, build_attn_bias(lens, batch.length()));
}

double forward_backward(ToyMaeModel& model, const MaeBatch& batch) {
    auto lens = batch.valid_lens();
    AttnBias pad_bias = build_attn_bias(lens, batch.length());
    std::vector<SampleCache> caches;
    ForwardResult fwd = run(model, batch, pad_bias, caches);
    if (fwd.hidden_tokens == 0)
        return 0.0;
    const double scale = 2.0 / static_cast<double>(fwd.hidden_tokens * model.config().token_dim);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& seq = batch.seqs[b];
        Matrix drecon = Matrix::Zero(caches[b].recon.rows(), caches[b].recon.cols());
        for (std::size_t r = 0; r < seq.valid_len; ++r)
            if (batch.masks[b].hidden[r]) {
                const auto ir = static_cast<Eigen::Index>(r);
                drecon.row(ir) = scale * (caches[b].recon.row(ir) - seq.tokens.row(ir));
            }
        sample_backward(model, seq, batch.masks[b], caches[b], drecon);
    }
    return fwd.loss;
}

// ---- training -------------------------------------------------------------

TrainState::TrainState(const ModelConfig& config, std::uint64_t s) : model(config, s), seed(s) {
    for (const Param* p : model.params()) {
        first_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        second_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
}

double train_step(TrainState& state, const MaeBatch& batch, double learning_rate) {
    state.model.zero_grad();
    auto params = state.model.params();
    const std::string at_step = " at step " + std::to_string(state.step + 1);
    double loss = 0.0;
    try {
        loss = forward_backward(state.model, batch);
    } catch (const NumericError& e) {
        for (const Param* p : params)
            if (!p->value.allFinite())
                throw NumericError("non-finite values in parameter block '" + p->name + "'" + at_step);
        throw NumericError(e.what() + at_step);
    }
    for (const Param* p : params)
        if (!p->grad.allFinite())
            throw NumericError("non-finite gradient in parameter block '" + p->name + "'" + at_step);

    ++state.step;
    const AdamConfig& a = state.adam;
    const double c1 = 1.0 - std::pow(a.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(a.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Matrix& m = state.first_moment[i];
        Matrix& v = state.second_moment[i];
        const Matrix& g = params[i]->grad;
        m = a.beta1 * m + (1.0 - a.beta1) * g;
        v = a.beta2 * v + (1.0 - a.beta2) * g.cwiseProduct(g);
        params[i]->value.array() -=
            learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + a.eps);
    }
    return loss;
}

// ---- tasks ----------------------------------------------------------------

std::string to_string(Task t) {
    switch (t) {
        case Task::reconstruction: return "reconstruction";
        case Task::time: return "time";
        case Task::frequency: return "frequency";
    }
    return "unknown";
}

Task parse_task(const std::string& name) {
    for (Task t : {Task::reconstruction, Task::time, Task::frequency})
        if (to_string(t) == name)
            return t;
    throw ConfigError("unknown task '" + name + "'");
}

MaskKind mask_kind_for(Task t) {
    switch (t) {
        case Task::reconstruction: return MaskKind::random;
        case Task::time: return MaskKind::time;
        case Task::frequency: return MaskKind::frequency;
    }
    return MaskKind::random;
}

ComplexTensor predict_task(const ToyMaeModel& model, const ComplexTensor& sample, const PatchSpec& patch,
                           Task task, double param, std::uint64_t seed) {
    TokenSequence seq = patchify(sample, patch);
    MaeMask mask = mae_mask(seq, mask_kind_for(task), param, seed);
    MaeBatch batch = make_batch({seq}, {mask});
    ForwardResult out = forward(model, batch);
    for (std::size_t r = 0; r < seq.valid_len; ++r)
        if (mask.hidden[r])
            seq.tokens.row(static_cast<Eigen::Index>(r)) = out.recon[0].row(static_cast<Eigen::Index>(r));
    return depatchify(seq, sample.scale, patch);
}

// ---- checkpoints ----------------------------------------------------------

namespace {

constexpr std::uint32_t kCheckpointMagic = 0x45414D48u;  // "HMAE"
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    out.insert(out.end(), raw, raw + sizeof(T));
}

template <typename T>
T take(std::span<const std::uint8_t> bytes, std::size_t& pos) {
    if (pos + sizeof(T) > bytes.size())
        throw DataError("checkpoint truncated");
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ToyMaeModel& model, std::uint64_t step) {
    std::vector<std::uint8_t> out;
    const ModelConfig& c = model.config();
    put(out, kCheckpointMagic);
    put(out, kCheckpointVersion);
    for (std::size_t v : {c.token_dim, c.embed_dim, c.heads, c.encoder_depth, c.decoder_depth, c.mlp_ratio,
                          std::size_t{c.max_grid.T}, std::size_t{c.max_grid.K}, std::size_t{c.max_grid.A},
                          c.max_seq_len})
        put(out, static_cast<std::uint32_t>(v));
    put(out, step);
    auto params = model.params();
    put(out, static_cast<std::uint32_t>(params.size()));
    for (const Param* p : params) {
        put(out, static_cast<std::uint32_t>(p->name.size()));
        out.insert(out.end(), p->name.begin(), p->name.end());
        put(out, static_cast<std::uint32_t>(p->value.rows()));
        put(out, static_cast<std::uint32_t>(p->value.cols()));
        for (Eigen::Index i = 0; i < p->value.rows(); ++i)
            for (Eigen::Index j = 0; j < p->value.cols(); ++j) put(out, p->value(i, j));
    }
    return out;
}

ToyMaeModel decode_checkpoint(std::span<const std::uint8_t> bytes, std::uint64_t* step) {
    std::size_t pos = 0;
    if (take<std::uint32_t>(bytes, pos) != kCheckpointMagic)
        throw DataError("not a checkpoint file");
    if (take<std::uint32_t>(bytes, pos) != kCheckpointVersion)
        throw DataError("unsupported checkpoint version");
    ModelConfig c;
    c.token_dim = take<std::uint32_t>(bytes, pos);
    c.embed_dim = take<std::uint32_t>(bytes, pos);
    c.heads = take<std::uint32_t>(bytes, pos);
    c.encoder_depth = take<std::uint32_t>(bytes, pos);
    c.decoder_depth = take<std::uint32_t>(bytes, pos);
    c.mlp_ratio = take<std::uint32_t>(bytes, pos);
    c.max_grid.T = take<std::uint32_t>(bytes, pos);
    c.max_grid.K = take<std::uint32_t>(bytes, pos);
    c.max_grid.A = take<std::uint32_t>(bytes, pos);
    c.max_seq_len = take<std::uint32_t>(bytes, pos);
    const auto s = take<std::uint64_t>(bytes, pos);
    if (step) *step = s;

    ToyMaeModel model(c, 0);
    auto params = model.params();
    if (take<std::uint32_t>(bytes, pos) != params.size())
        throw DataError("checkpoint tensor count mismatch");
    for (Param* p : params) {
        const auto len = take<std::uint32_t>(bytes, pos);
        if (pos + len > bytes.size())
            throw DataError("checkpoint truncated");
        std::string name(reinterpret_cast<const char*>(bytes.data() + pos), len);
        pos += len;
        const auto rows = take<std::uint32_t>(bytes, pos);
        const auto cols = take<std::uint32_t>(bytes, pos);
        if (name != p->name || rows != p->value.rows() || cols != p->value.cols())
            throw DataError("checkpoint tensor '" + name + "' does not match the model layout");
        for (Eigen::Index i = 0; i < p->value.rows(); ++i)
            for (Eigen::Index j = 0; j < p->value.cols(); ++j) p->value(i, j) = take<double>(bytes, pos);
    }
    if (pos != bytes.size())
        throw DataError("trailing bytes in checkpoint");
    return model;
}

void save_checkpoint(const std::filesystem::path& path, const ToyMaeModel& model, std::uint64_t step) {
    write_file_bytes(path, encode_checkpoint(model, step));
}

ToyMaeModel load_checkpoint(const std::filesystem::path& path, std::uint64_t* step) {
    auto bytes = read_file_bytes(path);
    return decode_checkpoint(bytes, step);
}

}  // namespace csimae
