#pragma once

// Frozen random pre-norm transformer encoder with per-block taps.
// Block l:  h <- h + Attn(LN(h));  h <- h + MLP(LN(h));  h <- h + alpha * v
// The tap H_l is read after the optional injection.

#include "physteer/actstore.hpp"
#include "physteer/plan.hpp"

#include <vector>

namespace physteer {

struct EncoderConfig {
    int layers = 8;
    int dim = 64;
    int heads = 4;
    int mlp_ratio = 4;
    std::uint64_t init_seed = 0;
    double init_scale = 0.02;

    void validate() const;
};

struct BlockWeights {
    MatrixXd wq, wk, wv, wo;  // D x D
    MatrixXd w1;              // D x (mlp_ratio * D)
    MatrixXd w2;              // (mlp_ratio * D) x D
    VectorXd bq, bk, bv, bo, b1, b2;
    VectorXd ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
};

/// Per-layer outputs of one forward pass. Layers before `first_layer` were
/// not recomputed (see Encoder::forwardFrom).
struct ForwardTrace {
    int first_layer = 0;
    std::vector<MatrixXd> tokens;  // N x D, one per computed layer
    std::vector<VectorXd> pooled;  // D

    int lastLayer() const { return first_layer + static_cast<int>(pooled.size()) - 1; }
    bool hasLayer(int l) const { return l >= first_layer && l <= lastLayer(); }
    const MatrixXd& tokensAt(int l) const;
    const VectorXd& pooledAt(int l) const;
};

class Encoder {
  public:
    explicit Encoder(EncoderConfig cfg);

    const EncoderConfig& config() const { return cfg_; }
    int numLayers() const { return cfg_.layers; }
    int dim() const { return cfg_.dim; }
    const BlockWeights& block(int l) const { return blocks_.at(static_cast<std::size_t>(l)); }
    /// FNV-1a over every weight in initialization order.
    std::uint64_t weightHash() const;

    /// One block without injection.
    MatrixXd applyBlock(int l, const MatrixXd& h) const;

    /// Full pass over layers 0..last_layer (default: all).
    ForwardTrace forward(const MatrixXd& tokens, const SteeringPlan* plan = nullptr, int last_layer = -1) const;

    /// Pass over layers start..last_layer given the block input H_{start-1}
    /// (the embedded tokens when start == 0). Used to reuse a cached prefix.
    ForwardTrace forwardFrom(int start, MatrixXd state, const SteeringPlan* plan = nullptr,
                             int last_layer = -1) const;

  private:
    EncoderConfig cfg_;
    std::vector<BlockWeights> blocks_;
};

Encoder initEncoder(const EncoderConfig& cfg);

void validatePlan(const SteeringPlan& plan, int num_layers, int dim);

/// Runs every video's layer -1 tokens through the encoder. The result holds
/// pooled features for layers -1..L-1 and tokens for layer -1 only.
ActivationStore encodeStore(const Encoder& enc, const ActivationStore& input, nlohmann::ordered_json extras,
                            int threads = 1);

}  // namespace physteer
