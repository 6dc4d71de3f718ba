#include "physteer/evalkit.hpp"

#include "physteer/steer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

namespace physteer {

namespace {

constexpr double kDegrees = 180.0 / std::numbers::pi;

double clampUnit(double c) {
    return std::clamp(c, -1.0, 1.0);
}

std::string exact(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    std::string s = buf;
    if (s == "-0.000000") {
        s = "0.000000";
    }
    return s;
}

double flipRate(const Labels& base, const Labels& steered) {
    if (base.size() != steered.size() || base.empty()) {
        throw ValidationError("flipRate: prediction vectors must be nonempty and of equal length");
    }
    std::size_t changed = 0;
    for (std::size_t i = 0; i < base.size(); ++i) {
        changed += base[i] != steered[i] ? 1 : 0;
    }
    return static_cast<double>(changed) / static_cast<double>(base.size());
}

Purity directionalPurity(const VectorXd& before, const VectorXd& after, const VectorXd& v) {
    if (before.size() != after.size() || before.size() != v.size()) {
        throw ValidationError("directionalPurity: dimension mismatch");
    }
    const VectorXd delta = after - before;
    const double dn = delta.norm();
    const double vn = v.norm();
    if (dn == 0.0 || vn == 0.0) {
        return {0.0, true};
    }
    return {clampUnit(delta.dot(v) / (dn * vn)), false};
}

double representationDrift(const VectorXd& before, const VectorXd& after) {
    if (before.size() != after.size()) {
        throw ValidationError("representationDrift: dimension mismatch");
    }
    return (after - before).norm();
}

double subspaceAngle(const VectorXd& u, const VectorXd& v) {
    if (u.size() != v.size()) {
        throw ValidationError("subspaceAngle: dimension mismatch");
    }
    return std::acos(clampUnit(std::abs(u.dot(v)) / (u.norm() * v.norm()))) * kDegrees;
}

double signedAngle(const VectorXd& u, const VectorXd& v) {
    if (u.size() != v.size()) {
        throw ValidationError("signedAngle: dimension mismatch");
    }
    return std::acos(clampUnit(u.dot(v) / (u.norm() * v.norm()))) * kDegrees;
}

SteeringEvaluator::SteeringEvaluator(const Encoder& enc, const ActivationStore& inputs, std::vector<std::size_t> videos,
                                     Probe probe, int measure_layer, VectorXd reference, int threads)
    : enc_(enc),
      inputs_(inputs),
      videos_(std::move(videos)),
      probe_(std::move(probe)),
      measure_layer_(measure_layer),
      reference_(std::move(reference)),
      threads_(threads) {
    if (videos_.empty()) {
        throw ValidationError("steering: no videos to evaluate (is the test split empty?)");
    }
    if (measure_layer_ < 0 || measure_layer_ >= enc_.numLayers()) {
        throw ValidationError("steering: measurement layer " + std::to_string(measure_layer_) + " outside the encoder");
    }
    if (probe_.weights.size() != enc_.dim() || reference_.size() != enc_.dim()) {
        throw ValidationError("steering: probe or reference dim does not match the encoder");
    }
    if (!inputs_.hasLayer(-1) || !inputs_.layer(-1).hasTokens()) {
        throw ValidationError("steering: input store has no layer -1 tokens");
    }
    baseline_.resize(videos_.size());
    parallelFor(videos_.size(), threads_, [&](std::size_t i) {
        const MatrixXd tokens = inputs_.tokens(videos_[i], -1);
        ForwardTrace trace = enc_.forward(tokens);
        Baseline& b = baseline_[i];
        b.states.reserve(static_cast<std::size_t>(enc_.numLayers()) + 1);
        b.states.push_back(tokens);
        for (auto& t : trace.tokens) {
            b.states.push_back(std::move(t));
        }
        b.pooled = std::move(trace.pooled);
    });
}

const VectorXd& SteeringEvaluator::baselinePooled(std::size_t i, int layer) const {
    return baseline_.at(i).pooled.at(static_cast<std::size_t>(layer));
}

ForwardTrace SteeringEvaluator::steeredTrace(std::size_t i, const SteeringPlan& plan, bool reuse_prefix) const {
    if (!reuse_prefix) {
        return enc_.forward(baseline_[i].states.front(), &plan);
    }
    int start = enc_.numLayers() - 1;
    for (const auto& inj : plan.injections) {
        start = std::min(start, inj.layer);
    }
    start = std::max(start, 0);
    // states[start] is the block input H_{start-1}.
    return enc_.forwardFrom(start, baseline_[i].states[static_cast<std::size_t>(start)], &plan);
}

std::vector<VideoOutcome> SteeringEvaluator::run(const SteeringPlan& plan, bool reuse_prefix) const {
    validatePlan(plan, enc_.numLayers(), enc_.dim());
    const int last = enc_.numLayers() - 1;
    std::vector<VideoOutcome> out(videos_.size());
    parallelFor(videos_.size(), threads_, [&](std::size_t i) {
        const ForwardTrace trace = steeredTrace(i, plan, reuse_prefix);
        auto steered = [&](int l) -> const VectorXd& {
            return trace.hasLayer(l) ? trace.pooledAt(l) : baselinePooled(i, l);
        };
        const VectorXd& f0 = baselinePooled(i, measure_layer_);
        const VectorXd& f1 = steered(measure_layer_);
        VideoOutcome& o = out[i];
        const VideoMeta& meta = inputs_.videos()[videos_[i]];
        o.id = meta.id;
        o.label = static_cast<int>(meta.plausibility);
        o.base_logit = probe_.weights.dot(f0) + probe_.intercept;
        o.steered_logit = probe_.weights.dot(f1) + probe_.intercept;
        o.base_pred = o.base_logit > 0.0 ? 1 : 0;
        o.steered_pred = o.steered_logit > 0.0 ? 1 : 0;
        o.drift = representationDrift(f0, f1);
        o.purity = directionalPurity(f0, f1, reference_);
        o.final_cosine = directionalPurity(baselinePooled(i, last), steered(last), reference_);
    });
    return out;
}

std::vector<VectorXd> SteeringEvaluator::steeredPooled(const SteeringPlan& plan, bool reuse_prefix) const {
    validatePlan(plan, enc_.numLayers(), enc_.dim());
    std::vector<VectorXd> out(videos_.size());
    parallelFor(videos_.size(), threads_, [&](std::size_t i) {
        const ForwardTrace trace = steeredTrace(i, plan, reuse_prefix);
        out[i] = trace.hasLayer(measure_layer_) ? trace.pooledAt(measure_layer_) : baselinePooled(i, measure_layer_);
    });
    return out;
}

SteeringMetrics SteeringEvaluator::aggregate(double alpha, const std::vector<VideoOutcome>& outcomes) {
    if (outcomes.empty()) {
        throw ValidationError("aggregate: no outcomes");
    }
    SteeringMetrics m;
    m.alpha = alpha;
    const double n = static_cast<double>(outcomes.size());
    Labels base;
    Labels steered;
    m.purity_undefined = true;
    m.cosine_undefined = true;
    for (const auto& o : outcomes) {
        base.push_back(o.base_pred);
        steered.push_back(o.steered_pred);
        const double p0 = sigmoid(o.base_logit);
        const double p1 = sigmoid(o.steered_logit);
        m.score_delta += p1 - p0;
        m.mean_score += p1;
        m.baseline_score += p0;
        m.directional_purity += o.purity.value;
        m.purity_undefined = m.purity_undefined && o.purity.undefined;
        m.representation_drift += o.drift;
        m.cosine_shift += o.final_cosine.value;
        m.cosine_undefined = m.cosine_undefined && o.final_cosine.undefined;
    }
    m.flip_rate = flipRate(base, steered);
    m.score_delta /= n;
    m.mean_score /= n;
    m.baseline_score /= n;
    m.directional_purity /= n;
    m.representation_drift /= n;
    m.cosine_shift /= n;
    return m;
}

const std::vector<double>& defaultAlphas() {
    static const std::vector<double> alphas{-20, -15, -10, -5, 0, 5, 10, 15, 20};
    return alphas;
}

AlphaSweepResult alphaSweep(const SteeringEvaluator& ev, const std::vector<Cav>& cavs, const std::vector<double>& alphas,
                            bool reuse_prefix) {
    if (cavs.empty()) {
        throw ValidationError("alphaSweep: no CAVs to inject");
    }
    AlphaSweepResult res;
    for (double alpha : alphas) {
        const SteeringPlan plan = buildPlan(cavs, alpha);
        auto outcomes = ev.run(plan, reuse_prefix);
        SteeringMetrics m = SteeringEvaluator::aggregate(alpha, outcomes);
        m.injection_layer = cavs.size() == 1 ? cavs.front().layer : -1;
        res.rows.push_back(m);
        res.raw.emplace_back(alpha, std::move(outcomes));
    }
    return res;
}

std::vector<AblationRow> layerAblation(const SteeringEvaluator& ev, const Cav& cav, double alpha, bool reuse_prefix) {
    std::vector<AblationRow> rows;
    for (int l = 0; l < ev.numLayers(); ++l) {
        Cav moved = cav;
        moved.layer = l;
        SteeringPlan plan;
        plan.injections.push_back({l, moved, alpha});
        AblationRow row;
        row.layer = l;
        row.metrics = SteeringEvaluator::aggregate(alpha, ev.run(plan, reuse_prefix));
        row.metrics.injection_layer = l;
        rows.push_back(row);
    }
    return rows;
}

std::vector<VectorXd> randomUnitVectors(int dim, int count, std::uint64_t seed) {
    Rng rng(deriveSeed(seed, "random-directions"));
    std::vector<VectorXd> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        VectorXd r(dim);
        for (int j = 0; j < dim; ++j) {
            r[j] = rng.normal();
        }
        out.push_back(r / r.norm());
    }
    return out;
}

AngleReport orthogonalityReport(const Cav& physics, const Cav& motion, const std::map<Block, Cav>& block_cavs,
                                int n_random, std::uint64_t seed) {
    if (physics.direction.size() != motion.direction.size()) {
        throw ValidationError("orthogonalityReport: physics and motion CAV dims differ");
    }
    if (n_random < 2) {
        throw ValidationError("orthogonalityReport: n_random must be >= 2");
    }
    AngleReport r;
    r.pairs.push_back({"physics", "motion", subspaceAngle(physics.direction, motion.direction)});
    for (auto a = block_cavs.begin(); a != block_cavs.end(); ++a) {
        for (auto b = std::next(a); b != block_cavs.end(); ++b) {
            r.pairs.push_back({std::string(toString(a->first)), std::string(toString(b->first)),
                               subspaceAngle(a->second.direction, b->second.direction)});
        }
    }
    for (const auto& [block, cav] : block_cavs) {
        r.pairs.push_back({"physics", std::string(toString(block)), subspaceAngle(physics.direction, cav.direction)});
    }
    r.n_random = n_random;
    std::vector<double> folded;
    std::vector<double> signed_;
    for (const auto& v : randomUnitVectors(static_cast<int>(physics.direction.size()), n_random, seed)) {
        folded.push_back(subspaceAngle(physics.direction, v));
        signed_.push_back(signedAngle(physics.direction, v));
    }
    auto meanStd = [](const std::vector<double>& xs, double& mean, double& sd) {
        mean = 0.0;
        for (double x : xs) {
            mean += x;
        }
        mean /= static_cast<double>(xs.size());
        double ss = 0.0;
        for (double x : xs) {
            ss += (x - mean) * (x - mean);
        }
        sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    };
    meanStd(folded, r.random_mean, r.random_std);
    meanStd(signed_, r.random_signed_mean, r.random_signed_std);
    return r;
}

Projection2d project2d(const SteeringEvaluator& ev, const ActivationStore& inputs, const Cav& cav, double alpha) {
    const auto& vids = ev.videos();
    const int l = ev.measureLayer();
    MatrixXd base(static_cast<Eigen::Index>(vids.size()), ev.reference().size());
    for (std::size_t i = 0; i < vids.size(); ++i) {
        base.row(static_cast<Eigen::Index>(i)) = ev.baselinePooled(i, l).transpose();
    }
    Projection2d p;
    p.pca = fitPca(base, 2);
    Cav at = cav;
    at.layer = l;
    const std::vector<Cav> one{at};
    const auto steered = ev.steeredPooled(buildPlan(one, alpha));
    MatrixXd st(base.rows(), base.cols());
    for (std::size_t i = 0; i < vids.size(); ++i) {
        st.row(static_cast<Eigen::Index>(i)) = steered[i].transpose();
    }
    const MatrixXd zb = p.pca.transform(base);
    const MatrixXd zs = p.pca.transform(st);
    for (std::size_t i = 0; i < vids.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        const VideoMeta& meta = inputs.videos()[vids[i]];
        p.rows.push_back({meta.id, static_cast<int>(meta.plausibility), std::string(toString(meta.block)), zb(r, 0),
                          zb(r, 1), zs(r, 0), zs(r, 1)});
    }
    const VectorXd c = p.pca.basis * cav.direction;
    p.cav_x = c[0];
    p.cav_y = c[1];
    return p;
}

std::string alphaSweepCsv(const std::vector<SteeringMetrics>& rows) {
    std::ostringstream os;
    os << "alpha,flip_rate,mean_p,delta_p,directional_purity,representation_drift,cosine_shift,purity_undefined\n";
    for (const auto& m : rows) {
        os << fmt(m.alpha) << ',' << fmt(m.flip_rate) << ',' << fmt(m.mean_score) << ',' << fmt(m.score_delta) << ','
           << fmt(m.directional_purity) << ',' << fmt(m.representation_drift) << ',' << fmt(m.cosine_shift) << ','
           << (m.purity_undefined ? 1 : 0) << '\n';
    }
    return os.str();
}

std::string rawOutcomesCsv(const std::vector<std::pair<double, std::vector<VideoOutcome>>>& raw) {
    std::ostringstream os;
    os << "alpha,id,label,base_logit,steered_logit,base_pred,steered_pred,drift,purity,purity_undefined,"
          "final_cosine,final_undefined\n";
    for (const auto& [alpha, outcomes] : raw) {
        for (const auto& o : outcomes) {
            os << exact(alpha) << ',' << o.id << ',' << o.label << ',' << exact(o.base_logit) << ','
               << exact(o.steered_logit) << ',' << o.base_pred << ',' << o.steered_pred << ',' << exact(o.drift) << ','
               << exact(o.purity.value) << ',' << (o.purity.undefined ? 1 : 0) << ',' << exact(o.final_cosine.value)
               << ',' << (o.final_cosine.undefined ? 1 : 0) << '\n';
        }
    }
    return os.str();
}

std::string ablationCsv(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "layer,alpha,flip_rate,directional_purity,purity_undefined,representation_drift,delta_p\n";
    for (const auto& r : rows) {
        os << r.layer << ',' << fmt(r.metrics.alpha) << ',' << fmt(r.metrics.flip_rate) << ','
           << fmt(r.metrics.directional_purity) << ',' << (r.metrics.purity_undefined ? 1 : 0) << ','
           << fmt(r.metrics.representation_drift) << ',' << fmt(r.metrics.score_delta) << '\n';
    }
    return os.str();
}

std::string angleCsv(const std::vector<AnglePair>& pairs) {
    std::ostringstream os;
    os << "a,b,angle_deg\n";
    for (const auto& p : pairs) {
        os << p.a << ',' << p.b << ',' << fmt(p.degrees) << '\n';
    }
    return os.str();
}

std::string orthogonalityCsv(const AngleReport& r) {
    std::ostringstream os;
    os << "a,b,angle_deg,std_deg,n\n";
    for (const auto& p : r.pairs) {
        if (p.a == "physics") {
            os << p.a << ',' << p.b << ',' << fmt(p.degrees) << ",,1\n";
        }
    }
    os << "physics,random," << fmt(r.random_mean) << ',' << fmt(r.random_std) << ',' << r.n_random << '\n';
    os << "physics,random_signed," << fmt(r.random_signed_mean) << ',' << fmt(r.random_signed_std) << ','
       << r.n_random << '\n';
    return os.str();
}

std::string projectionCsv(const Projection2d& p) {
    std::ostringstream os;
    os << "id,x,y,label,block,steered_x,steered_y\n";
    for (const auto& r : p.rows) {
        os << r.id << ',' << fmt(r.x) << ',' << fmt(r.y) << ',' << r.plausibility << ',' << r.block << ','
           << fmt(r.steered_x) << ',' << fmt(r.steered_y) << '\n';
    }
    return os.str();
}

nlohmann::ordered_json toJson(const SteeringMetrics& m) {
    nlohmann::ordered_json j;
    j["alpha"] = m.alpha;
    j["injection_layer"] = m.injection_layer;
    j["flip_rate"] = m.flip_rate;
    j["mean_p"] = m.mean_score;
    j["baseline_p"] = m.baseline_score;
    j["delta_p"] = m.score_delta;
    j["directional_purity"] = m.directional_purity;
    j["purity_undefined"] = m.purity_undefined;
    j["representation_drift"] = m.representation_drift;
    j["cosine_shift"] = m.cosine_shift;
    j["cosine_undefined"] = m.cosine_undefined;
    return j;
}

nlohmann::ordered_json toJson(const AngleReport& r) {
    nlohmann::ordered_json j;
    j["pairs"] = nlohmann::ordered_json::array();
    for (const auto& p : r.pairs) {
        j["pairs"].push_back({{"a", p.a}, {"b", p.b}, {"angle_deg", p.degrees}});
    }
    j["random"] = {{"n", r.n_random},
                   {"mean_deg", r.random_mean},
                   {"std_deg", r.random_std},
                   {"signed_mean_deg", r.random_signed_mean},
                   {"signed_std_deg", r.random_signed_std}};
    return j;
}

}  // namespace physteer
