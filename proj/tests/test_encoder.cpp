#include "physteer/encoder.hpp"
#include "physteer/steer.hpp"
#include "physteer/synthphys.hpp"

#include "fixtures.hpp"

#include <doctest.h>

#include <cmath>

using namespace physteer;

namespace {

// Straightforward reference block: row-wise softmax, explicit loops.
MatrixXd referenceBlock(const BlockWeights& b, int heads, const MatrixXd& h) {
    const auto n = h.rows();
    const auto d = h.cols();
    const auto dh = d / heads;
    auto ln = [&](const MatrixXd& x, const VectorXd& g, const VectorXd& beta) {
        MatrixXd out(n, d);
        for (Eigen::Index i = 0; i < n; ++i) {
            double mu = 0;
            for (Eigen::Index j = 0; j < d; ++j) mu += x(i, j);
            mu /= static_cast<double>(d);
            double var = 0;
            for (Eigen::Index j = 0; j < d; ++j) var += (x(i, j) - mu) * (x(i, j) - mu);
            var /= static_cast<double>(d);
            for (Eigen::Index j = 0; j < d; ++j) out(i, j) = (x(i, j) - mu) / std::sqrt(var + 1e-5) * g(j) + beta(j);
        }
        return out;
    };
    const MatrixXd x = ln(h, b.ln1_gamma, b.ln1_beta);
    const MatrixXd q = (x * b.wq).rowwise() + b.bq.transpose();
    const MatrixXd k = (x * b.wk).rowwise() + b.bk.transpose();
    const MatrixXd v = (x * b.wv).rowwise() + b.bv.transpose();
    MatrixXd cat = MatrixXd::Zero(n, d);
    for (int hd = 0; hd < heads; ++hd) {
        for (Eigen::Index i = 0; i < n; ++i) {
            std::vector<double> s(static_cast<std::size_t>(n));
            double mx = -1e300;
            for (Eigen::Index j = 0; j < n; ++j) {
                double dot = 0;
                for (Eigen::Index c = hd * dh; c < (hd + 1) * dh; ++c) dot += q(i, c) * k(j, c);
                s[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, s[static_cast<std::size_t>(j)]);
            }
            double z = 0;
            for (auto& e : s) {
                e = std::exp(e - mx);
                z += e;
            }
            for (Eigen::Index j = 0; j < n; ++j) {
                for (Eigen::Index c = hd * dh; c < (hd + 1) * dh; ++c) {
                    cat(i, c) += s[static_cast<std::size_t>(j)] / z * v(j, c);
                }
            }
        }
    }
    MatrixXd out = h + ((cat * b.wo).rowwise() + b.bo.transpose());
    const MatrixXd y = ln(out, b.ln2_gamma, b.ln2_beta);
    MatrixXd hid = (y * b.w1).rowwise() + b.b1.transpose();
    for (Eigen::Index i = 0; i < hid.size(); ++i) {
        const double t = hid.data()[i];
        hid.data()[i] = 0.5 * t * (1 + std::erf(t / std::sqrt(2.0)));
    }
    out += (hid * b.w2).rowwise() + b.b2.transpose();
    return out;
}

MatrixXd sampleTokens(std::uint64_t seed = 2) {
    const Dataset d = generateDataset(testing::smallSpec(seed), 1);
    return d.videos[1].tokens;
}

Cav unitCav(int layer, int dim, std::uint64_t seed) {
    Cav c;
    c.layer = layer;
    c.direction = testing::randomUnit(dim, seed);
    return c;
}

}  // namespace

TEST_SUITE("encoder") {

TEST_CASE("block matches the reference implementation") {
    EncoderConfig cfg = testing::smallEncoder();
    cfg.init_scale = 0.3;  // large enough that attention is far from uniform
    const Encoder enc(cfg);
    const MatrixXd h = testing::randomMatrix(12, 16, 8);
    for (int l = 0; l < cfg.layers; ++l) {
        const MatrixXd ours = enc.applyBlock(l, h);
        const MatrixXd ref = referenceBlock(enc.block(l), cfg.heads, h);
        CHECK((ours - ref).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("same seed, same weights") {
    CHECK(Encoder(testing::smallEncoder(5)).weightHash() == Encoder(testing::smallEncoder(5)).weightHash());
    CHECK(Encoder(testing::smallEncoder(5)).weightHash() != Encoder(testing::smallEncoder(6)).weightHash());
}

TEST_CASE("zero init is the identity at every layer") {
    EncoderConfig cfg = testing::smallEncoder();
    cfg.init_scale = 0.0;
    const Encoder enc(cfg);
    const MatrixXd x = sampleTokens();
    const ForwardTrace t = enc.forward(x);
    for (int l = 0; l < cfg.layers; ++l) {
        CHECK(t.tokensAt(l) == x);
    }
}

TEST_CASE("default init changes each layer by less than half its norm") {
    const Encoder enc(testing::smallEncoder());
    const MatrixXd x = sampleTokens();
    const ForwardTrace t = enc.forward(x);
    MatrixXd prev = x;
    for (int l = 0; l < enc.numLayers(); ++l) {
        const double rel = (t.tokensAt(l) - prev).norm() / prev.norm();
        CHECK(rel > 0.0);
        CHECK(rel < 0.5);
        prev = t.tokensAt(l);
    }
}

TEST_CASE("forward is deterministic") {
    const Encoder enc(testing::smallEncoder());
    const MatrixXd x = sampleTokens();
    const ForwardTrace a = enc.forward(x);
    const ForwardTrace b = enc.forward(x);
    for (int l = 0; l < enc.numLayers(); ++l) {
        CHECK(a.tokensAt(l) == b.tokensAt(l));
    }
}

TEST_CASE("alpha zero is bit-identical to no plan") {
    const Encoder enc(testing::smallEncoder());
    const MatrixXd x = sampleTokens();
    const Cav c = unitCav(1, 16, 3);
    const SteeringPlan plan = buildPlan(std::span<const Cav>(&c, 1), 0.0);
    const ForwardTrace a = enc.forward(x);
    const ForwardTrace b = enc.forward(x, &plan);
    for (int l = 0; l < enc.numLayers(); ++l) {
        CHECK(a.tokensAt(l) == b.tokensAt(l));
        CHECK(a.pooledAt(l) == b.pooledAt(l));
    }
}

TEST_CASE("exact shift at the injection layer, untouched layers below") {
    const Encoder enc(testing::smallEncoder());
    const MatrixXd x = sampleTokens();
    const ForwardTrace base = enc.forward(x);
    for (int j = 0; j < enc.numLayers(); ++j) {
        for (double alpha : {-20.0, -3.0, 7.5, 20.0}) {
            const Cav c = unitCav(j, 16, static_cast<std::uint64_t>(j + 10));
            const SteeringPlan plan = buildPlan(std::span<const Cav>(&c, 1), alpha);
            const ForwardTrace t = enc.forward(x, &plan);
            for (int i = 0; i < j; ++i) {
                CHECK(t.tokensAt(i) == base.tokensAt(i));
            }
            const VectorXd delta = t.pooledAt(j) - base.pooledAt(j);
            CHECK((delta - alpha * c.direction).cwiseAbs().maxCoeff() < 1e-9);
            CHECK(std::abs(delta.norm() - std::abs(alpha)) < 1e-9);
        }
    }
}

TEST_CASE("negated alpha negates the shift") {
    const Encoder enc(testing::smallEncoder());
    const MatrixXd x = sampleTokens();
    const ForwardTrace base = enc.forward(x);
    const Cav c = unitCav(2, 16, 4);
    const SteeringPlan pos = buildPlan(std::span<const Cav>(&c, 1), 5.0);
    const SteeringPlan neg = buildPlan(std::span<const Cav>(&c, 1), -5.0);
    const VectorXd dp = enc.forward(x, &pos).pooledAt(2) - base.pooledAt(2);
    const VectorXd dn = enc.forward(x, &neg).pooledAt(2) - base.pooledAt(2);
    CHECK((dp + dn).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("multi-layer plan applies each layer's own CAV") {
    const Encoder enc(testing::smallEncoder());
    const MatrixXd x = sampleTokens();
    const std::vector<Cav> cavs = {unitCav(2, 16, 21), unitCav(0, 16, 20), unitCav(3, 16, 22)};
    const double alpha = 4.0;
    const SteeringPlan plan = buildPlan(cavs, alpha);
    REQUIRE(plan.injections.size() == 3);
    CHECK(plan.injections[0].layer == 0);
    CHECK(plan.injections[2].layer == 3);
    const ForwardTrace t = enc.forward(x, &plan);
    // Replay by hand: block, then add that layer's own direction.
    MatrixXd h = x;
    for (int l = 0; l < enc.numLayers(); ++l) {
        h = enc.applyBlock(l, h);
        for (const auto& c : cavs) {
            if (c.layer == l) {
                h.rowwise() += (alpha * c.direction).transpose();
            }
        }
        CHECK(t.tokensAt(l) == h);
    }
}

TEST_CASE("prefix reuse gives the same trace") {
    const Encoder enc(testing::smallEncoder());
    const MatrixXd x = sampleTokens();
    const ForwardTrace base = enc.forward(x);
    const Cav c = unitCav(2, 16, 4);
    const SteeringPlan plan = buildPlan(std::span<const Cav>(&c, 1), 3.0);
    const ForwardTrace full = enc.forward(x, &plan);
    const ForwardTrace part = enc.forwardFrom(2, base.tokensAt(1), &plan);
    CHECK(part.first_layer == 2);
    for (int l = 2; l < enc.numLayers(); ++l) {
        CHECK(part.tokensAt(l) == full.tokensAt(l));
    }
    CHECK_THROWS_AS(part.pooledAt(1), ValidationError);
}

TEST_CASE("invalid plans and configs") {
    const Encoder enc(testing::smallEncoder());
    const MatrixXd x = sampleTokens();
    Cav bad = unitCav(9, 16, 1);
    SteeringPlan plan = buildPlan(std::span<const Cav>(&bad, 1), 1.0);
    CHECK_THROWS_AS(enc.forward(x, &plan), ValidationError);
    Cav wrong_dim = unitCav(0, 8, 1);
    plan = buildPlan(std::span<const Cav>(&wrong_dim, 1), 1.0);
    CHECK_THROWS_AS(enc.forward(x, &plan), ValidationError);
    const std::vector<Cav> dup = {unitCav(1, 16, 1), unitCav(1, 16, 2)};
    CHECK_THROWS_AS(buildPlan(dup, 1.0), ValidationError);
    EncoderConfig cfg = testing::smallEncoder();
    cfg.heads = 5;
    CHECK_THROWS_AS(Encoder{cfg}, ValidationError);
    CHECK_THROWS_AS(enc.forward(MatrixXd::Zero(4, 8)), ValidationError);
}

TEST_CASE("encodeStore pools every layer and keeps the raw tokens") {
    const Dataset d = generateDataset(testing::smallSpec(), 2);
    const ActivationStore raw = toStore(d);
    const Encoder enc(testing::smallEncoder());
    const ActivationStore a = encodeStore(enc, raw, {{"k", 1}}, 1);
    const ActivationStore b = encodeStore(enc, raw, {{"k", 1}}, 3);
    CHECK(a == b);
    CHECK(a.numLayers() == 4);
    CHECK(a.layerIndices() == std::vector<int>{-1, 0, 1, 2, 3});
    CHECK(a.modelId() == "toy-encoder");
    const ForwardTrace t = enc.forward(raw.tokens(3, -1));
    for (int l = 0; l < 4; ++l) {
        const VectorXd stored = a.pooled(l).row(3).transpose();
        CHECK((stored - t.pooledAt(l)).cwiseAbs().maxCoeff() <= 1e-6 * t.pooledAt(l).cwiseAbs().maxCoeff());
    }
}

}
