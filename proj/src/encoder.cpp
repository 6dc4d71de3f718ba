#include "physteer/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace physteer {

namespace {

constexpr double kLayerNormEps = 1e-5;

MatrixXd layerNorm(const MatrixXd& h, const VectorXd& gamma, const VectorXd& beta) {
    const double d = static_cast<double>(h.cols());
    MatrixXd out(h.rows(), h.cols());
    for (Eigen::Index i = 0; i < h.rows(); ++i) {
        const double mu = h.row(i).sum() / d;
        const auto centered = (h.row(i).array() - mu).matrix();
        const double var = centered.squaredNorm() / d;
        out.row(i) = centered / std::sqrt(var + kLayerNormEps);
    }
    out = (out.array().rowwise() * gamma.transpose().array()).rowwise() + beta.transpose().array();
    return out;
}

MatrixXd gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale) {
    MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
            m(i, j) = scale * rng.normal();
        }
    }
    return m;
}

// Columns are contiguous in Eigen's default layout, so scores are kept as
// keys x queries and normalized per column.
void softmaxCols(MatrixXd& s) {
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
        auto col = s.col(j).array();
        col = (col - col.maxCoeff()).exp();
        col /= col.sum();
    }
}

void hashMatrix(std::uint64_t& h, const MatrixXd& m) {
    // Column-major bytes; the layout is fixed by Eigen's default storage.
    h = fnv1a(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double), h);
}

}  // namespace

const Injection* SteeringPlan::at(int layer) const {
    for (const auto& inj : injections) {
        if (inj.layer == layer) {
            return &inj;
        }
    }
    return nullptr;
}

void EncoderConfig::validate() const {
    if (layers < 1 || dim < 1 || heads < 1 || mlp_ratio < 1) {
        throw ValidationError("encoder: layers, dim, heads and mlp_ratio must be positive");
    }
    if (dim % heads != 0) {
        throw ValidationError("encoder: dim " + std::to_string(dim) + " is not divisible by heads " +
                              std::to_string(heads));
    }
    if (!(init_scale >= 0.0) || !std::isfinite(init_scale)) {
        throw ValidationError("encoder: init_scale must be finite and >= 0");
    }
}

const MatrixXd& ForwardTrace::tokensAt(int l) const {
    if (!hasLayer(l)) {
        throw ValidationError("trace has no layer " + std::to_string(l));
    }
    return tokens[static_cast<std::size_t>(l - first_layer)];
}

const VectorXd& ForwardTrace::pooledAt(int l) const {
    if (!hasLayer(l)) {
        throw ValidationError("trace has no layer " + std::to_string(l));
    }
    return pooled[static_cast<std::size_t>(l - first_layer)];
}

Encoder::Encoder(EncoderConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    const Eigen::Index d = cfg_.dim;
    const Eigen::Index hidden = d * cfg_.mlp_ratio;
    const double s = cfg_.init_scale;
    blocks_.reserve(static_cast<std::size_t>(cfg_.layers));
    for (int l = 0; l < cfg_.layers; ++l) {
        Rng rng(deriveSeed(cfg_.init_seed, "encoder/block" + std::to_string(l)));
        BlockWeights b;
        b.wq = gaussian(rng, d, d, s);
        b.wk = gaussian(rng, d, d, s);
        b.wv = gaussian(rng, d, d, s);
        b.wo = gaussian(rng, d, d, s);
        b.w1 = gaussian(rng, d, hidden, s);
        b.w2 = gaussian(rng, hidden, d, s);
        b.bq = b.bk = b.bv = b.bo = b.b2 = VectorXd::Zero(d);
        b.b1 = VectorXd::Zero(hidden);
        b.ln1_gamma = b.ln2_gamma = VectorXd::Ones(d);
        b.ln1_beta = b.ln2_beta = VectorXd::Zero(d);
        blocks_.push_back(std::move(b));
    }
}

std::uint64_t Encoder::weightHash() const {
    std::uint64_t h = fnv1a("physteer-encoder");
    for (const auto& b : blocks_) {
        for (const MatrixXd* m : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2}) {
            hashMatrix(h, *m);
        }
        for (const VectorXd* v : {&b.bq, &b.bk, &b.bv, &b.bo, &b.b1, &b.b2, &b.ln1_gamma, &b.ln1_beta,
                                  &b.ln2_gamma, &b.ln2_beta}) {
            h = fnv1a(v->data(), static_cast<std::size_t>(v->size()) * sizeof(double), h);
        }
    }
    return h;
}

MatrixXd Encoder::applyBlock(int l, const MatrixXd& h) const {
    const BlockWeights& b = block(l);
    const Eigen::Index d = cfg_.dim;
    const Eigen::Index dh = d / cfg_.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    const MatrixXd x = layerNorm(h, b.ln1_gamma, b.ln1_beta);
    MatrixXd q = x * b.wq;
    q.rowwise() += b.bq.transpose();
    MatrixXd k = x * b.wk;
    k.rowwise() += b.bk.transpose();
    MatrixXd v = x * b.wv;
    v.rowwise() += b.bv.transpose();

    MatrixXd heads(h.rows(), d);
    // Reused across calls: an N x N buffer per call costs more in page faults
    // than in arithmetic.
    thread_local MatrixXd scores;
    for (int head = 0; head < cfg_.heads; ++head) {
        const Eigen::Index c0 = head * dh;
        scores.resize(h.rows(), h.rows());
        scores.noalias() = k.middleCols(c0, dh) * q.middleCols(c0, dh).transpose();
        scores *= scale;
        softmaxCols(scores);
        heads.middleCols(c0, dh).noalias() = scores.transpose() * v.middleCols(c0, dh);
    }
    MatrixXd attn = heads * b.wo;
    attn.rowwise() += b.bo.transpose();
    MatrixXd out = h + attn;

    const MatrixXd y = layerNorm(out, b.ln2_gamma, b.ln2_beta);
    MatrixXd hidden = y * b.w1;
    hidden.rowwise() += b.b1.transpose();
    // Exact GELU.
    hidden = hidden.unaryExpr([](double t) { return 0.5 * t * (1.0 + std::erf(t * (1.0 / std::numbers::sqrt2))); });
    MatrixXd mlp = hidden * b.w2;
    mlp.rowwise() += b.b2.transpose();
    out += mlp;
    return out;
}

void validatePlan(const SteeringPlan& plan, int num_layers, int dim) {
    std::vector<int> seen;
    for (const auto& inj : plan.injections) {
        if (inj.layer < 0 || inj.layer >= num_layers) {
            throw ValidationError("steering plan layer " + std::to_string(inj.layer) + " outside [0, " +
                                  std::to_string(num_layers) + ")");
        }
        if (inj.cav.direction.size() != dim) {
            throw ValidationError("CAV dimension " + std::to_string(inj.cav.direction.size()) +
                                  " does not match encoder dim " + std::to_string(dim));
        }
        if (!std::isfinite(inj.alpha) || !inj.cav.direction.allFinite()) {
            throw ValidationError("steering plan has a non-finite alpha or direction");
        }
        if (std::find(seen.begin(), seen.end(), inj.layer) != seen.end()) {
            throw ValidationError("steering plan injects twice at layer " + std::to_string(inj.layer));
        }
        seen.push_back(inj.layer);
    }
}

ForwardTrace Encoder::forward(const MatrixXd& tokens, const SteeringPlan* plan, int last_layer) const {
    return forwardFrom(0, tokens, plan, last_layer);
}

ForwardTrace Encoder::forwardFrom(int start, MatrixXd state, const SteeringPlan* plan, int last_layer) const {
    if (last_layer < 0) {
        last_layer = cfg_.layers - 1;
    }
    if (start < 0 || start > last_layer || last_layer >= cfg_.layers) {
        throw ValidationError("forward: layer range [" + std::to_string(start) + ", " + std::to_string(last_layer) +
                              "] outside the encoder");
    }
    if (state.cols() != cfg_.dim || state.rows() < 1) {
        throw ValidationError("forward: token dim " + std::to_string(state.cols()) + " does not match encoder dim " +
                              std::to_string(cfg_.dim));
    }
    if (plan) {
        validatePlan(*plan, cfg_.layers, cfg_.dim);
    }
    ForwardTrace trace;
    trace.first_layer = start;
    for (int l = start; l <= last_layer; ++l) {
        state = applyBlock(l, state);
        if (const Injection* inj = plan ? plan->at(l) : nullptr; inj && inj->alpha != 0.0) {
            state.rowwise() += (inj->alpha * inj->cav.direction).transpose();
        }
        if (!state.allFinite()) {
            throw ValidationError("non-finite activations at layer " + std::to_string(l));
        }
        trace.pooled.push_back(meanPool(state));
        trace.tokens.push_back(state);
    }
    return trace;
}

Encoder initEncoder(const EncoderConfig& cfg) {
    return Encoder(cfg);
}

ActivationStore encodeStore(const Encoder& enc, const ActivationStore& input, nlohmann::ordered_json extras,
                            int threads) {
    if (!input.hasLayer(-1) || !input.layer(-1).hasTokens()) {
        throw ValidationError("encode: input store has no layer -1 tokens");
    }
    if (input.dim() != enc.dim()) {
        throw ValidationError("encode: store dim " + std::to_string(input.dim()) + " does not match encoder dim " +
                              std::to_string(enc.dim()));
    }
    const auto nv = static_cast<Eigen::Index>(input.numVideos());
    const int num_layers = enc.numLayers();
    std::vector<LayerData> layers(static_cast<std::size_t>(num_layers) + 1);
    layers[0] = input.layer(-1);
    for (int l = 0; l < num_layers; ++l) {
        layers[static_cast<std::size_t>(l) + 1].layer = l;
        layers[static_cast<std::size_t>(l) + 1].pooled.resize(nv, enc.dim());
    }
    parallelFor(input.numVideos(), threads, [&](std::size_t v) {
        const ForwardTrace trace = enc.forward(input.tokens(v, -1));
        for (int l = 0; l < num_layers; ++l) {
            layers[static_cast<std::size_t>(l) + 1].pooled.row(static_cast<Eigen::Index>(v)) =
                trace.pooledAt(l).cast<float>().transpose();
        }
    });
    StoreHeader header;
    header.model_id = "toy-encoder";
    header.num_layers = num_layers;
    header.token_count = input.tokenCount();
    header.dim = input.dim();
    header.extras = std::move(extras);
    return ActivationStore(std::move(header), input.videos(), std::move(layers));
}

}  // namespace physteer
