#include "physteer/probekit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace physteer {

namespace {

double softplus(double t) {
    return std::max(t, 0.0) + std::log1p(std::exp(-std::abs(t)));
}

void checkData(const MatrixXd& X, const Labels& y, const char* who) {
    if (static_cast<std::size_t>(X.rows()) != y.size()) {
        throw ValidationError(std::string(who) + ": " + std::to_string(X.rows()) + " rows but " +
                              std::to_string(y.size()) + " labels");
    }
    if (!X.allFinite()) {
        throw ValidationError(std::string(who) + ": non-finite features");
    }
    for (int v : y) {
        if (v != 0 && v != 1) {
            throw ValidationError(std::string(who) + ": labels must be 0 or 1");
        }
    }
}

std::size_t countOnes(const Labels& y) {
    return static_cast<std::size_t>(std::count(y.begin(), y.end(), 1));
}

MatrixXd rowsOf(const MatrixXd& X, const std::vector<std::size_t>& idx) {
    MatrixXd out(static_cast<Eigen::Index>(idx.size()), X.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        out.row(static_cast<Eigen::Index>(i)) = X.row(static_cast<Eigen::Index>(idx[i]));
    }
    return out;
}

Labels labelsOf(const Labels& y, const std::vector<std::size_t>& idx) {
    Labels out;
    out.reserve(idx.size());
    for (std::size_t i : idx) {
        out.push_back(y[i]);
    }
    return out;
}

double sampleStd(const std::vector<double>& v) {
    if (v.size() < 2) {
        return 0.0;
    }
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0.0;
    for (double a : v) {
        ss += (a - mean) * (a - mean);
    }
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace

MatrixXd PcaModel::transform(const MatrixXd& X) const {
    if (X.cols() != mean.size()) {
        throw ValidationError("pca: feature dim mismatch");
    }
    return (X.rowwise() - mean.transpose()) * basis.transpose();
}

MatrixXd PcaModel::inverse(const MatrixXd& Z) const {
    return (Z * basis).rowwise() + mean.transpose();
}

VectorXd PcaModel::explainedVarianceRatio() const {
    if (total_variance <= 0.0) {
        return VectorXd::Zero(explained_variance.size());
    }
    return explained_variance / total_variance;
}

PcaModel fitPca(const MatrixXd& X, int k) {
    const Eigen::Index n = X.rows();
    const Eigen::Index d = X.cols();
    if (n < 2) {
        throw ValidationError("pca: need at least 2 samples");
    }
    if (k < 1 || k > std::min<Eigen::Index>(n - 1, d)) {
        throw ValidationError("pca: k=" + std::to_string(k) + " out of range [1, " +
                              std::to_string(std::min<Eigen::Index>(n - 1, d)) + "]");
    }
    if (!X.allFinite()) {
        throw ValidationError("pca: non-finite features");
    }
    PcaModel m;
    m.mean = X.colwise().mean().transpose();
    const MatrixXd centered = X.rowwise() - m.mean.transpose();
    const Eigen::BDCSVD<MatrixXd> svd(centered, Eigen::ComputeThinV);
    const VectorXd& s = svd.singularValues();
    m.basis = svd.matrixV().leftCols(k).transpose();
    for (Eigen::Index r = 0; r < k; ++r) {
        Eigen::Index arg = 0;
        m.basis.row(r).cwiseAbs().maxCoeff(&arg);
        if (m.basis(r, arg) < 0.0) {
            m.basis.row(r) *= -1.0;
        }
    }
    m.explained_variance = s.head(k).array().square() / static_cast<double>(n - 1);
    m.total_variance = centered.squaredNorm() / static_cast<double>(n - 1);
    return m;
}

double sigmoid(double z) {
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

double logisticObjective(const MatrixXd& X, const Labels& y, const VectorXd& w, double b, double C) {
    const VectorXd z = (X * w).array() + b;
    double loss = 0.0;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        const double t = y[static_cast<std::size_t>(i)] == 1 ? 1.0 : -1.0;
        loss += softplus(-t * z[i]);
    }
    return 0.5 * w.squaredNorm() + C * loss;
}

VectorXd logisticGradient(const MatrixXd& X, const Labels& y, const VectorXd& w, double b, double C) {
    const VectorXd z = (X * w).array() + b;
    // d/dz softplus(-t z) = -t * sigmoid(-t z)
    VectorXd r(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        const double t = y[static_cast<std::size_t>(i)] == 1 ? 1.0 : -1.0;
        r[i] = -t * sigmoid(-t * z[i]);
    }
    VectorXd g(w.size() + 1);
    g.head(w.size()) = w + C * (X.transpose() * r);
    g[w.size()] = C * r.sum();
    return g;
}

LogisticFit fitLogistic(const MatrixXd& X, const Labels& y, double C, int max_iter, double tol) {
    checkData(X, y, "fitLogistic");
    if (!(C > 0.0) || max_iter < 0) {
        throw ValidationError("fitLogistic: C must be > 0 and max_iter >= 0");
    }
    const Eigen::Index n = X.rows();
    const Eigen::Index d = X.cols();
    LogisticFit fit;
    fit.w = VectorXd::Zero(d);
    double f = logisticObjective(X, y, fit.w, fit.b, C);
    VectorXd g = logisticGradient(X, y, fit.w, fit.b, C);
    for (;;) {
        fit.grad_norm = g.norm();
        if (fit.grad_norm <= tol) {
            fit.converged = true;
            break;
        }
        if (fit.iterations >= max_iter) {
            break;
        }
        const VectorXd z = (X * fit.w).array() + fit.b;
        VectorXd s(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double p = sigmoid(z[i]);
            s[i] = p * (1.0 - p);
        }
        MatrixXd H = MatrixXd::Zero(d + 1, d + 1);
        const MatrixXd sx = X.array().colwise() * s.array();
        H.topLeftCorner(d, d) = C * (X.transpose() * sx);
        H.topLeftCorner(d, d).diagonal().array() += 1.0;
        const VectorXd cross = C * sx.colwise().sum().transpose();
        H.topRightCorner(d, 1) = cross;
        H.bottomLeftCorner(1, d) = cross.transpose();
        H(d, d) = C * s.sum() + 1e-12;
        const VectorXd step = -H.ldlt().solve(g);

        const double slope = g.dot(step);
        double t = 1.0;
        VectorXd w_new;
        double b_new = 0.0;
        double f_new = 0.0;
        for (;;) {
            w_new = fit.w + t * step.head(d);
            b_new = fit.b + t * step[d];
            f_new = logisticObjective(X, y, w_new, b_new, C);
            if (f_new <= f + 1e-4 * t * slope || t < 1e-12) {
                break;
            }
            t *= 0.5;
        }
        ++fit.iterations;
        if (!(f_new <= f)) {
            // No descent possible at machine precision.
            fit.grad_norm = g.norm();
            break;
        }
        fit.w = std::move(w_new);
        fit.b = b_new;
        f = f_new;
        g = logisticGradient(X, y, fit.w, fit.b, C);
    }
    return fit;
}

VectorXd Probe::logits(const MatrixXd& X) const {
    if (X.cols() != weights.size()) {
        throw ValidationError("probe: feature dim " + std::to_string(X.cols()) + " does not match probe dim " +
                              std::to_string(weights.size()));
    }
    return (X * weights).array() + intercept;
}

VectorXd Probe::probabilities(const MatrixXd& X) const {
    return logits(X).unaryExpr([](double z) { return sigmoid(z); });
}

Labels Probe::predict(const MatrixXd& X) const {
    const VectorXd z = logits(X);
    Labels out(static_cast<std::size_t>(z.size()));
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        out[static_cast<std::size_t>(i)] = z[i] > 0.0 ? 1 : 0;
    }
    return out;
}

double accuracy(const Labels& predicted, const Labels& truth) {
    if (predicted.size() != truth.size() || truth.empty()) {
        throw ValidationError("accuracy: label vectors must be nonempty and of equal length");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        hits += predicted[i] == truth[i] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(truth.size());
}

double majorityRate(const Labels& y) {
    if (y.empty()) {
        return 0.0;
    }
    const double ones = static_cast<double>(countOnes(y));
    return std::max(ones, static_cast<double>(y.size()) - ones) / static_cast<double>(y.size());
}

Probe trainProbe(const MatrixXd& X, const Labels& y, const ProbeOptions& opts, const PcaModel* fixed_pca) {
    checkData(X, y, "trainProbe");
    const auto n = static_cast<Eigen::Index>(y.size());
    const std::size_t ones = countOnes(y);
    if (ones == 0 || ones == y.size()) {
        throw ValidationError("trainProbe: single-class input");
    }
    if (n < 4) {
        throw ValidationError("trainProbe: need at least 4 samples");
    }
    Probe probe;
    const Eigen::Index d = X.cols();
    if (fixed_pca) {
        probe.pca = *fixed_pca;
    } else if (opts.pca_mode == PcaMode::Always || (opts.pca_mode == PcaMode::Auto && n < 2 * d)) {
        const auto k = std::min<Eigen::Index>({opts.pca_k, n - 1, d});
        probe.pca = fitPca(X, static_cast<int>(k));
    }
    const MatrixXd Z = probe.pca ? probe.pca->transform(X) : X;
    const LogisticFit fit = fitLogistic(Z, y, opts.C, opts.max_iter, opts.tol);
    if (probe.pca) {
        // w.x + b' == w_hat.(V (x - mean)) + b
        probe.weights = probe.pca->basis.transpose() * fit.w;
        probe.intercept = fit.b - probe.weights.dot(probe.pca->mean);
    } else {
        probe.weights = fit.w;
        probe.intercept = fit.b;
    }
    probe.iterations = fit.iterations;
    probe.converged = fit.converged;
    return probe;
}

double flipCheck(Probe& probe, const MatrixXd& X_val, const Labels& y_val) {
    const double acc = accuracy(probe.predict(X_val), y_val);
    if (acc >= 0.5) {
        return acc;
    }
    probe.weights = -probe.weights;
    probe.intercept = -probe.intercept;
    probe.flip_corrected = !probe.flip_corrected;
    return 1.0 - acc;
}

std::vector<int> stratifiedFolds(const Labels& y, int folds, std::uint64_t seed) {
    if (folds < 2) {
        throw ValidationError("cv: folds must be >= 2");
    }
    std::vector<int> assignment(y.size(), -1);
    for (int cls = 0; cls < 2; ++cls) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < y.size(); ++i) {
            if (y[i] == cls) {
                idx.push_back(i);
            }
        }
        if (idx.size() < static_cast<std::size_t>(folds)) {
            throw ValidationError("cv: class " + std::to_string(cls) + " has " + std::to_string(idx.size()) +
                                  " samples, fewer than " + std::to_string(folds) + " folds");
        }
        Rng rng(deriveSeed(seed, "fold/" + std::to_string(cls)));
        rng.shuffle(idx.begin(), idx.end());
        for (std::size_t j = 0; j < idx.size(); ++j) {
            assignment[idx[j]] = static_cast<int>(j % static_cast<std::size_t>(folds));
        }
    }
    return assignment;
}

CvResult crossValidate(const MatrixXd& X, const Labels& y, int folds, std::uint64_t seed, const ProbeOptions& opts,
                       const PcaModel* fixed_pca) {
    checkData(X, y, "crossValidate");
    const std::vector<int> fold_of = stratifiedFolds(y, folds, seed);
    CvResult cv;
    for (int f = 0; f < folds; ++f) {
        std::vector<std::size_t> tr;
        std::vector<std::size_t> te;
        for (std::size_t i = 0; i < y.size(); ++i) {
            (fold_of[i] == f ? te : tr).push_back(i);
        }
        Probe p = trainProbe(rowsOf(X, tr), labelsOf(y, tr), opts, fixed_pca);
        cv.folds.push_back(flipCheck(p, rowsOf(X, te), labelsOf(y, te)));
    }
    cv.mean = std::accumulate(cv.folds.begin(), cv.folds.end(), 0.0) / folds;
    cv.std = sampleStd(cv.folds);
    return cv;
}

std::string_view toString(ProbeTask t) {
    return t == ProbeTask::Plausibility ? "plausibility" : "motion";
}

ProbeTask parseProbeTask(std::string_view s) {
    if (s == "plausibility") {
        return ProbeTask::Plausibility;
    }
    if (s == "motion") {
        return ProbeTask::Motion;
    }
    throw ValidationError("unknown probe task '" + std::string(s) + "' (plausibility|motion)");
}

int labelOf(const VideoMeta& v, ProbeTask task) {
    return task == ProbeTask::Plausibility ? static_cast<int>(v.plausibility) : static_cast<int>(v.motion);
}

namespace {

std::vector<std::size_t> selectRows(const ActivationStore& store, std::initializer_list<Split> splits,
                                    std::optional<Block> block) {
    return store.indicesWhere([&](const VideoMeta& v) {
        const bool in_split = std::find(splits.begin(), splits.end(), v.split) != splits.end();
        return in_split && (!block || v.block == *block);
    });
}

Labels labelsFor(const ActivationStore& store, const std::vector<std::size_t>& rows, ProbeTask task) {
    Labels y;
    y.reserve(rows.size());
    for (std::size_t r : rows) {
        y.push_back(labelOf(store.videos()[r], task));
    }
    return y;
}

}  // namespace

std::pair<MatrixXd, Labels> trainValData(const ActivationStore& store, int layer, ProbeTask task,
                                         std::optional<Block> block) {
    const auto rows = selectRows(store, {Split::Train, Split::Val}, block);
    return {store.pooled(layer, rows), labelsFor(store, rows, task)};
}

std::vector<LayerProbeResult> probeSweep(const ActivationStore& store, ProbeTask task, const SweepOptions& opts) {
    std::vector<int> layers;
    for (int l : store.layerIndices()) {
        if (l >= 0) {
            layers.push_back(l);
        }
    }
    if (layers.empty()) {
        layers.push_back(-1);
    }
    const auto train_rows = selectRows(store, {Split::Train}, opts.block);
    if (train_rows.empty()) {
        throw ValidationError("probe: store has no videos in the train split" +
                              (opts.block ? " for block " + std::string(toString(*opts.block)) : std::string()));
    }
    const auto pool_rows = selectRows(store, {Split::Train, Split::Val}, opts.block);
    const auto val_rows = selectRows(store, {Split::Val}, opts.block);
    const Labels y_train = labelsFor(store, train_rows, task);
    const Labels y_pool = labelsFor(store, pool_rows, task);
    const Labels y_val = labelsFor(store, val_rows, task);
    const std::uint64_t cv_seed = deriveSeed(opts.seed, "cv");

    auto fixedFor = [&](int layer) -> const PcaModel* {
        for (const auto& [l, m] : opts.fixed_pca) {
            if (l == layer) {
                return &m;
            }
        }
        return nullptr;
    };

    std::vector<LayerProbeResult> results(layers.size());
    parallelFor(layers.size(), opts.threads, [&](std::size_t i) {
        const int layer = layers[i];
        const PcaModel* fixed = fixedFor(layer);
        LayerProbeResult r;
        r.layer = layer;
        const CvResult cv = crossValidate(store.pooled(layer, train_rows), y_train, opts.folds, cv_seed, opts.probe, fixed);
        r.accuracy = cv.mean;
        r.std = cv.std;
        r.folds = cv.folds;
        r.probe = trainProbe(store.pooled(layer, pool_rows), y_pool, opts.probe, fixed);
        if (!val_rows.empty()) {
            flipCheck(r.probe, store.pooled(layer, val_rows), y_val);
        }
        r.probe.cv_accuracy = cv.mean;
        r.probe.fold_accuracies = cv.folds;
        results[i] = std::move(r);
    });
    return results;
}

PezResult findPez(const std::vector<std::pair<int, double>>& accuracies, double eps, int k) {
    if (accuracies.empty()) {
        throw ValidationError("findPez: no layer accuracies");
    }
    PezResult r;
    r.epsilon = eps;
    r.max_accuracy = accuracies.front().second;
    for (const auto& [l, a] : accuracies) {
        r.max_accuracy = std::max(r.max_accuracy, a);
    }
    r.threshold = r.max_accuracy - eps;
    std::vector<std::pair<int, double>> members;
    for (const auto& [l, a] : accuracies) {
        // Tolerance absorbs rounding in max - a versus eps.
        if (r.max_accuracy - a <= eps + 1e-12) {
            members.emplace_back(l, a);
        }
    }
    for (const auto& m : members) {
        r.pez_layers.push_back(m.first);
    }
    std::sort(r.pez_layers.begin(), r.pez_layers.end());
    std::sort(members.begin(), members.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    for (std::size_t i = 0; i < members.size() && static_cast<int>(i) < k; ++i) {
        r.top_k.push_back(members[i].first);
    }
    return r;
}

PezResult findPez(const std::vector<LayerProbeResult>& results, double eps, int k) {
    std::vector<std::pair<int, double>> acc;
    acc.reserve(results.size());
    for (const auto& r : results) {
        acc.emplace_back(r.layer, r.accuracy);
    }
    return findPez(acc, eps, k);
}

OrthoResult iterativeOrthogonalProbes(const MatrixXd& X, const Labels& y, int max_iters, int folds,
                                      std::uint64_t seed, const ProbeOptions& opts) {
    checkData(X, y, "iterativeOrthogonalProbes");
    // D + 1 iterations reach the fully projected (all-zero) feature matrix.
    if (max_iters < 1 || max_iters > X.cols() + 1) {
        throw ValidationError("iterativeOrthogonalProbes: max_iters must lie in [1, D + 1]");
    }
    OrthoResult out;
    out.majority = majorityRate(y);
    out.chance_threshold = out.majority + 0.05;
    const double scale = std::max(X.cwiseAbs().maxCoeff(), 1e-300);

    // Accuracy at iteration i is cross-validated with the i - 1 earlier
    // directions fitted inside each training fold, so held-out rows never
    // influence what was projected out of them.
    struct FoldState {
        MatrixXd train, test;
        Labels y_train, y_test;
        std::vector<VectorXd> dirs;
    };
    const std::vector<int> fold_of = stratifiedFolds(y, folds, deriveSeed(seed, "ortho"));
    std::vector<FoldState> fs(static_cast<std::size_t>(folds));
    for (int f = 0; f < folds; ++f) {
        std::vector<std::size_t> tr;
        std::vector<std::size_t> te;
        for (std::size_t i = 0; i < y.size(); ++i) {
            (fold_of[i] == f ? te : tr).push_back(i);
        }
        auto& s = fs[static_cast<std::size_t>(f)];
        s.train = rowsOf(X, tr);
        s.test = rowsOf(X, te);
        s.y_train = labelsOf(y, tr);
        s.y_test = labelsOf(y, te);
    }
    auto removeFrom = [](VectorXd v, const std::vector<VectorXd>& dirs) {
        for (int pass = 0; pass < 2; ++pass) {
            for (const auto& u : dirs) {
                v -= u.dot(v) * u;
            }
        }
        return v;
    };

    MatrixXd work = X;
    std::vector<VectorXd> dirs;
    for (int it = 1; it <= max_iters; ++it) {
        OrthoStep step;
        step.iteration = it;
        const MatrixXd centered = work.rowwise() - work.colwise().mean();
        if (centered.cwiseAbs().maxCoeff() <= 1e-9 * scale) {
            step.accuracy = out.majority;
            step.degenerate = true;
            out.steps.push_back(std::move(step));
            break;
        }
        double acc = 0.0;
        for (auto& s : fs) {
            Probe p = trainProbe(s.train, s.y_train, opts);
            acc += flipCheck(p, s.test, s.y_test);
            VectorXd v = removeFrom(p.weights, s.dirs);
            const double norm = v.norm();
            if (norm > 1e-12) {
                v /= norm;
                s.train -= (s.train * v) * v.transpose();
                s.test -= (s.test * v) * v.transpose();
                s.dirs.push_back(std::move(v));
            }
        }
        step.accuracy = acc / folds;

        VectorXd v = removeFrom(trainProbe(work, y, opts).weights, dirs);
        const double norm = v.norm();
        if (!(norm > 1e-12)) {
            step.degenerate = true;
            out.steps.push_back(std::move(step));
            break;
        }
        v /= norm;
        work -= (work * v) * v.transpose();
        step.direction = v;
        dirs.push_back(std::move(v));
        out.steps.push_back(std::move(step));
    }
    for (const auto& s : out.steps) {
        if (s.accuracy <= out.chance_threshold) {
            out.first_near_chance = s.iteration;
            break;
        }
    }
    return out;
}

}  // namespace physteer
