#include "physteer/steer.hpp"

#include <algorithm>
#include <cmath>

namespace physteer {

Cav makeCav(const Probe& probe, int layer, std::string scope, std::string task) {
    const double norm = probe.weights.norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) {
        throw ValidationError("makeCav: zero weight vector at layer " + std::to_string(layer));
    }
    Cav cav;
    cav.layer = layer;
    cav.direction = probe.weights / norm;
    cav.scope = std::move(scope);
    cav.task = std::move(task);
    cav.norm_before = norm;
    cav.source_accuracy = probe.cv_accuracy;
    return cav;
}

std::optional<PcaModel> globalPca(const ActivationStore& store, int layer, const ProbeOptions& opts) {
    const auto [X, y] = trainValData(store, layer, ProbeTask::Plausibility);
    const Eigen::Index n = X.rows();
    const Eigen::Index d = X.cols();
    const bool use = opts.pca_mode == PcaMode::Always || (opts.pca_mode == PcaMode::Auto && n < 2 * d);
    if (!use) {
        return std::nullopt;
    }
    return fitPca(X, static_cast<int>(std::min<Eigen::Index>({opts.pca_k, n - 1, d})));
}

std::map<Block, Cav> makeBlockCavs(const ActivationStore& store, int layer, const SweepOptions& opts,
                                   std::span<const Block> blocks) {
    const std::optional<PcaModel> pca = globalPca(store, layer, opts.probe);
    const PcaModel* fixed = pca ? &*pca : nullptr;
    std::map<Block, Cav> out;
    for (Block b : blocks) {
        const std::string name(toString(b));
        auto pick = [&](std::initializer_list<Split> splits) {
            return store.indicesWhere([&](const VideoMeta& v) {
                return v.block == b && std::find(splits.begin(), splits.end(), v.split) != splits.end();
            });
        };
        const auto train = pick({Split::Train});
        const auto pool = pick({Split::Train, Split::Val});
        const auto val = pick({Split::Val});
        auto labels = [&](const std::vector<std::size_t>& rows) {
            Labels y;
            for (std::size_t r : rows) {
                y.push_back(labelOf(store.videos()[r], ProbeTask::Plausibility));
            }
            return y;
        };
        const Labels y_train = labels(train);
        if (std::count(y_train.begin(), y_train.end(), 1) == 0 || std::count(y_train.begin(), y_train.end(), 0) == 0) {
            throw ValidationError("block " + name + " lacks one plausibility class in the train split");
        }
        const CvResult cv = crossValidate(store.pooled(layer, train), y_train, opts.folds,
                                          deriveSeed(opts.seed, "cv/" + name), opts.probe, fixed);
        Probe probe = trainProbe(store.pooled(layer, pool), labels(pool), opts.probe, fixed);
        if (!val.empty()) {
            flipCheck(probe, store.pooled(layer, val), labels(val));
        }
        probe.cv_accuracy = cv.mean;
        probe.fold_accuracies = cv.folds;
        out.emplace(b, makeCav(probe, layer, name));
    }
    return out;
}

SteeringPlan buildPlan(std::span<const Cav> cavs, double alpha) {
    if (!std::isfinite(alpha)) {
        throw ValidationError("buildPlan: alpha must be finite");
    }
    SteeringPlan plan;
    for (const auto& cav : cavs) {
        if (plan.at(cav.layer)) {
            throw ValidationError("buildPlan: duplicate layer " + std::to_string(cav.layer));
        }
        plan.injections.push_back({cav.layer, cav, alpha});
    }
    std::sort(plan.injections.begin(), plan.injections.end(),
              [](const Injection& a, const Injection& b) { return a.layer < b.layer; });
    return plan;
}

nlohmann::ordered_json cavMetadata(const Cav& cav) {
    nlohmann::ordered_json j;
    j["layer"] = cav.layer;
    j["dim"] = cav.direction.size();
    j["scope"] = cav.scope;
    j["task"] = cav.task;
    j["norm_before"] = cav.norm_before;
    j["source_accuracy"] = cav.source_accuracy;
    return j;
}

void writeCav(const Cav& cav, const std::filesystem::path& stem, const nlohmann::ordered_json& extras) {
    nlohmann::ordered_json j = cavMetadata(cav);
    if (extras.is_object()) {
        for (const auto& [k, v] : extras.items()) {
            j[k] = v;
        }
    }
    std::filesystem::path bin = stem;
    bin += ".f32";
    std::filesystem::path meta = stem;
    meta += ".json";
    writeVectorF32(bin, cav.direction);
    writeTextFileAtomic(meta, j.dump(2) + "\n");
}

Cav readCav(const std::filesystem::path& stem, int expected_dim) {
    std::filesystem::path bin = stem;
    bin += ".f32";
    std::filesystem::path meta = stem;
    meta += ".json";
    const auto j = readJsonFile(meta);
    Cav cav;
    try {
        cav.layer = j.at("layer").get<int>();
        cav.scope = j.at("scope").get<std::string>();
        cav.task = j.at("task").get<std::string>();
        cav.norm_before = j.at("norm_before").get<double>();
        cav.source_accuracy = j.at("source_accuracy").get<double>();
        if (j.at("dim").get<int>() != expected_dim) {
            throw ValidationError("CAV " + meta.string() + " has dim " + j.at("dim").dump() + ", expected " +
                                  std::to_string(expected_dim));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed CAV metadata " + meta.string() + ": " + e.what());
    }
    // float32 storage loses unit norm; renormalize in double.
    cav.direction = readVectorF32(bin, static_cast<std::size_t>(expected_dim));
    const double norm = cav.direction.norm();
    if (!(norm > 0.0)) {
        throw ValidationError("CAV " + bin.string() + " is the zero vector");
    }
    cav.direction /= norm;
    return cav;
}

}  // namespace physteer
