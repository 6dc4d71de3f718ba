#pragma once

#include "physteer/encoder.hpp"
#include "physteer/probekit.hpp"

#include <map>
#include <string>
#include <vector>

namespace physteer {

double flipRate(const Labels& base, const Labels& steered);

struct Purity {
    double value = 0.0;
    bool undefined = false;  // zero shift; value reported as 0
};

/// cos(after - before, v).
Purity directionalPurity(const VectorXd& before, const VectorXd& after, const VectorXd& v);
double representationDrift(const VectorXd& before, const VectorXd& after);

/// arccos(|u.v|) in degrees, within [0, 90].
double subspaceAngle(const VectorXd& u, const VectorXd& v);
/// arccos(u.v) in degrees, within [0, 180].
double signedAngle(const VectorXd& u, const VectorXd& v);

struct SteeringMetrics {
    double alpha = 0.0;
    int injection_layer = -1;       // single-injection runs; -1 for multi-layer plans
    double flip_rate = 0.0;
    double score_delta = 0.0;       // mean P(impossible) change
    double mean_score = 0.0;        // mean steered P(impossible)
    double baseline_score = 0.0;
    double directional_purity = 0.0;
    bool purity_undefined = false;  // every video had a zero shift
    double representation_drift = 0.0;
    double cosine_shift = 0.0;      // purity at the final layer
    bool cosine_undefined = false;
};

/// Per-video outcome; enough to recompute every aggregate.
struct VideoOutcome {
    std::string id;
    int label = 0;
    double base_logit = 0.0;
    double steered_logit = 0.0;
    int base_pred = 0;
    int steered_pred = 0;
    double drift = 0.0;
    Purity purity;
    Purity final_cosine;
};

/// Steering runs over a fixed video set, measured with one probe at one
/// layer against one reference direction. Baseline traces are computed once.
class SteeringEvaluator {
  public:
    SteeringEvaluator(const Encoder& enc, const ActivationStore& inputs, std::vector<std::size_t> videos, Probe probe,
                      int measure_layer, VectorXd reference, int threads = 1);

    int measureLayer() const { return measure_layer_; }
    int numLayers() const { return enc_.numLayers(); }
    const std::vector<std::size_t>& videos() const { return videos_; }
    const Probe& probe() const { return probe_; }
    const VectorXd& reference() const { return reference_; }
    const VectorXd& baselinePooled(std::size_t i, int layer) const;

    /// With reuse_prefix the pass starts from the cached baseline input of the
    /// lowest injected layer; otherwise every layer is recomputed.
    std::vector<VideoOutcome> run(const SteeringPlan& plan, bool reuse_prefix = true) const;
    /// Pooled vectors at the measurement layer for the steered run.
    std::vector<VectorXd> steeredPooled(const SteeringPlan& plan, bool reuse_prefix = true) const;

    static SteeringMetrics aggregate(double alpha, const std::vector<VideoOutcome>& outcomes);

  private:
    struct Baseline {
        std::vector<MatrixXd> states;  // H_{-1} .. H_{L-1}
        std::vector<VectorXd> pooled;  // layers 0 .. L-1
    };
    const Encoder& enc_;
    const ActivationStore& inputs_;
    std::vector<std::size_t> videos_;
    Probe probe_;
    int measure_layer_;
    VectorXd reference_;
    int threads_;
    std::vector<Baseline> baseline_;

    ForwardTrace steeredTrace(std::size_t i, const SteeringPlan& plan, bool reuse_prefix) const;
};

struct AlphaSweepResult {
    std::vector<SteeringMetrics> rows;
    std::vector<std::pair<double, std::vector<VideoOutcome>>> raw;
};

const std::vector<double>& defaultAlphas();

AlphaSweepResult alphaSweep(const SteeringEvaluator& ev, const std::vector<Cav>& cavs, const std::vector<double>& alphas,
                            bool reuse_prefix = true);

struct AblationRow {
    int layer = 0;
    SteeringMetrics metrics;
};

/// The measurement CAV injected at each encoder layer in turn.
std::vector<AblationRow> layerAblation(const SteeringEvaluator& ev, const Cav& cav, double alpha = 10.0,
                                       bool reuse_prefix = true);

struct AnglePair {
    std::string a;
    std::string b;
    double degrees = 0.0;
};

struct AngleReport {
    std::vector<AnglePair> pairs;
    int n_random = 0;
    double random_mean = 0.0;  // folded |cos| angles, [0, 90]
    double random_std = 0.0;
    double random_signed_mean = 0.0;  // arccos(u.r), [0, 180]
    double random_signed_std = 0.0;
};

/// Seeded Gaussian directions, normalized.
std::vector<VectorXd> randomUnitVectors(int dim, int count, std::uint64_t seed);

AngleReport orthogonalityReport(const Cav& physics, const Cav& motion, const std::map<Block, Cav>& block_cavs,
                                int n_random = 1000, std::uint64_t seed = 0);

struct ProjectionRow {
    std::string id;
    int plausibility = 0;
    std::string block;
    double x = 0.0;
    double y = 0.0;
    double steered_x = 0.0;
    double steered_y = 0.0;
};

struct Projection2d {
    PcaModel pca;
    std::vector<ProjectionRow> rows;
    double cav_x = 0.0;  // CAV direction in the 2D plane
    double cav_y = 0.0;
};

/// PCA(2) of the baseline pooled features at the measurement layer; arrows
/// end at the projection of the steered pooled features.
Projection2d project2d(const SteeringEvaluator& ev, const ActivationStore& inputs, const Cav& cav, double alpha = 10.0);

// CSV writers.
std::string alphaSweepCsv(const std::vector<SteeringMetrics>& rows);
std::string rawOutcomesCsv(const std::vector<std::pair<double, std::vector<VideoOutcome>>>& raw);
std::string ablationCsv(const std::vector<AblationRow>& rows);
std::string angleCsv(const std::vector<AnglePair>& pairs);
std::string orthogonalityCsv(const AngleReport& r);
std::string projectionCsv(const Projection2d& p);

nlohmann::ordered_json toJson(const SteeringMetrics& m);
nlohmann::ordered_json toJson(const AngleReport& r);

/// Fixed-precision formatting used by every CSV ("%.6f"; "-0" printed as "0").
std::string fmt(double v);

}  // namespace physteer
