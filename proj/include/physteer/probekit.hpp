#pragma once

#include "physteer/actstore.hpp"

#include <optional>
#include <utility>
#include <vector>

namespace physteer {

using Labels = std::vector<int>;  // 0 / 1

struct PcaModel {
    VectorXd mean;                // D
    MatrixXd basis;               // k x D, orthonormal rows
    VectorXd explained_variance;  // k, descending
    double total_variance = 0.0;

    int k() const { return static_cast<int>(basis.rows()); }
    MatrixXd transform(const MatrixXd& X) const;  // n x k
    MatrixXd inverse(const MatrixXd& Z) const;    // n x D
    VectorXd explainedVarianceRatio() const;
};

/// Principal directions of the centered rows of X (via SVD). Each
/// component's sign is fixed so its largest-magnitude entry is positive.
PcaModel fitPca(const MatrixXd& X, int k);

// L2-regularized logistic objective on (w, b); b is not penalized:
//   f(w, b) = 1/2 |w|^2 + C * sum_i log(1 + exp(-t_i (w.x_i + b))),  t_i = 2 y_i - 1
double logisticObjective(const MatrixXd& X, const Labels& y, const VectorXd& w, double b, double C);
/// Gradient with respect to (w, b), stacked as a (D + 1)-vector.
VectorXd logisticGradient(const MatrixXd& X, const Labels& y, const VectorXd& w, double b, double C);

struct LogisticFit {
    VectorXd w;
    double b = 0.0;
    int iterations = 0;
    double grad_norm = 0.0;
    bool converged = false;
};

/// Damped Newton with Armijo backtracking, from w = 0, b = 0.
LogisticFit fitLogistic(const MatrixXd& X, const Labels& y, double C = 1.0, int max_iter = 1000,
                        double tol = 1e-6);

enum class PcaMode { Auto, Always, Never };

struct ProbeOptions {
    double C = 1.0;
    int max_iter = 1000;
    double tol = 1e-6;
    int pca_k = 64;
    PcaMode pca_mode = PcaMode::Auto;  // Auto: PCA only when n < 2 D
};

struct Probe {
    VectorXd weights;  // full feature space
    double intercept = 0.0;
    std::optional<PcaModel> pca;
    double cv_accuracy = 0.0;
    std::vector<double> fold_accuracies;
    bool flip_corrected = false;
    int iterations = 0;
    bool converged = false;

    VectorXd logits(const MatrixXd& X) const;
    VectorXd probabilities(const MatrixXd& X) const;
    Labels predict(const MatrixXd& X) const;  // 1 when logit > 0
};

double sigmoid(double z);
double accuracy(const Labels& predicted, const Labels& truth);
double majorityRate(const Labels& y);

/// Fits a probe. When `fixed_pca` is given it is used as is; otherwise PCA is
/// fitted on X according to opts.pca_mode. No flip check is applied here.
Probe trainProbe(const MatrixXd& X, const Labels& y, const ProbeOptions& opts = {},
                 const PcaModel* fixed_pca = nullptr);

/// Negates (w, b) when accuracy on the validation data is below 0.5, and
/// returns the (corrected) validation accuracy. Idempotent.
double flipCheck(Probe& probe, const MatrixXd& X_val, const Labels& y_val);

/// Fold index per sample: each class is shuffled with the seed and dealt
/// round-robin over the folds.
std::vector<int> stratifiedFolds(const Labels& y, int folds, std::uint64_t seed);

struct CvResult {
    double mean = 0.0;
    double std = 0.0;  // sample std over folds
    std::vector<double> folds;
};

/// Stratified k-fold CV; each held-out fold doubles as the flip-check set.
CvResult crossValidate(const MatrixXd& X, const Labels& y, int folds, std::uint64_t seed,
                       const ProbeOptions& opts = {}, const PcaModel* fixed_pca = nullptr);

enum class ProbeTask { Plausibility, Motion };

std::string_view toString(ProbeTask t);
ProbeTask parseProbeTask(std::string_view s);
int labelOf(const VideoMeta& v, ProbeTask task);

struct SweepOptions {
    ProbeOptions probe;
    int folds = 5;
    std::uint64_t seed = 0;
    std::optional<Block> block;  // restrict to one block's videos
    int threads = 1;
    /// Per-layer fixed PCA models (block probes reuse the global basis).
    std::vector<std::pair<int, PcaModel>> fixed_pca;
};

struct LayerProbeResult {
    int layer = 0;
    double accuracy = 0.0;  // CV mean on the train split
    double std = 0.0;
    std::vector<double> folds;
    Probe probe;  // refit on train+val, flip-checked on val
};

/// One result per encoder layer (layers >= 0; -1 is the raw input and is
/// included only when the store has no encoder layers).
std::vector<LayerProbeResult> probeSweep(const ActivationStore& store, ProbeTask task, const SweepOptions& opts);

/// Train + val pooled features and labels at one layer.
std::pair<MatrixXd, Labels> trainValData(const ActivationStore& store, int layer, ProbeTask task,
                                         std::optional<Block> block = std::nullopt);

struct PezResult {
    double epsilon = 0.05;
    double max_accuracy = 0.0;
    double threshold = 0.0;
    std::vector<int> pez_layers;  // ascending
    std::vector<int> top_k;       // accuracy descending, ties to the lower layer
};

PezResult findPez(const std::vector<std::pair<int, double>>& accuracies, double eps = 0.05, int k = 3);
PezResult findPez(const std::vector<LayerProbeResult>& results, double eps = 0.05, int k = 3);

struct OrthoStep {
    int iteration = 0;  // 1-based
    double accuracy = 0.0;
    VectorXd direction;  // unit; empty when the step stopped on degenerate data
    bool degenerate = false;
};

struct OrthoResult {
    std::vector<OrthoStep> steps;
    double majority = 0.0;
    double chance_threshold = 0.0;  // majority + 0.05
    int first_near_chance = 0;      // first iteration at or below the threshold, 0 if none
};

/// Fit a probe, record its CV accuracy, project its direction out, repeat.
/// Directions come from the full data; the accuracy at iteration i is
/// cross-validated with the earlier directions refitted inside each fold.
OrthoResult iterativeOrthogonalProbes(const MatrixXd& X, const Labels& y, int max_iters, int folds,
                                      std::uint64_t seed, const ProbeOptions& opts = {});

}  // namespace physteer
