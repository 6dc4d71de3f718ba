#include "physteer/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>

namespace physteer {

namespace {

using json = nlohmann::ordered_json;

PcaMode parsePcaMode(std::string_view s) {
    if (s == "auto") {
        return PcaMode::Auto;
    }
    if (s == "always") {
        return PcaMode::Always;
    }
    if (s == "never") {
        return PcaMode::Never;
    }
    throw ValidationError("unknown pca_mode '" + std::string(s) + "' (auto|always|never)");
}

template <typename T>
void readKey(const json& section, const char* name, const char* key, T& dst, std::set<std::string>& seen) {
    seen.insert(key);
    if (!section.contains(key)) {
        return;
    }
    try {
        dst = section.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ValidationError(std::string("config: ") + name + "." + key + " has the wrong type");
    }
}

void rejectUnknown(const json& section, const char* name, const std::set<std::string>& known) {
    for (const auto& [k, v] : section.items()) {
        if (!known.count(k)) {
            throw ValidationError(std::string("config: unknown key '") + (name[0] ? std::string(name) + "." : "") + k +
                                  "'");
        }
    }
}

void log(std::string_view msg) {
    std::cerr << "physteer: " << msg << '\n';
}

void requireHash(const std::optional<std::string>& got, const std::string& want, const std::string& what) {
    if (!got) {
        throw ValidationError(what + " carries no config_hash");
    }
    if (*got != want) {
        throw ValidationError(what + " was produced by a different configuration (config_hash " + *got +
                              ", expected " + want + ")");
    }
}

std::optional<std::string> hashOf(const json& j) {
    if (j.contains("config_hash") && j["config_hash"].is_string()) {
        return j["config_hash"].get<std::string>();
    }
    return std::nullopt;
}

json readArtifact(const fs::path& path, const std::string& want) {
    if (!fs::exists(path)) {
        throw IoError("missing artifact " + path.string());
    }
    json j = readJsonFile(path);
    requireHash(hashOf(j), want, path.filename().string());
    return j;
}

void writeJson(const fs::path& path, const json& j) {
    writeTextFileAtomic(path, j.dump(2) + "\n");
}

void ensureDir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
    }
}

// Dumps written outside this toolkit (the exporter) carry no config hash.
// They can be probed and compared, but not steered: steering replays the toy
// encoder.
ActivationStore loadActs(const RunConfig& cfg, const fs::path& path, bool allow_external = true) {
    ActivationStore store = readDump(path);
    if (!store.configHash()) {
        if (!allow_external) {
            throw ValidationError("store " + path.string() + " is an external dump (model_id " + store.modelId() +
                                  "); steering needs a store encoded by this toolkit");
        }
        log("store " + path.string() + " is an external dump (model_id " + store.modelId() + ")");
        return store;
    }
    requireHash(store.configHash(), stageHash(cfg, Stage::Encode), "store " + path.string());
    if (store.dim() != cfg.embed_dim) {
        throw ValidationError("store dim " + std::to_string(store.dim()) + " does not match config embed_dim " +
                              std::to_string(cfg.embed_dim));
    }
    if (store.numLayers() != cfg.layers) {
        throw ValidationError("store has " + std::to_string(store.numLayers()) + " layers, config declares " +
                              std::to_string(cfg.layers));
    }
    return store;
}

const LayerProbeResult& resultAt(const ProbeArtifact& pa, int layer) {
    for (const auto& r : pa.layers) {
        if (r.layer == layer) {
            return r;
        }
    }
    throw ValidationError("probe results have no layer " + std::to_string(layer));
}

std::string cavStem(const std::string& name, int layer) {
    return "cav_" + name + "_l" + std::to_string(layer);
}

std::vector<std::size_t> testRows(const ActivationStore& store) {
    return store.indicesWhere([](const VideoMeta& v) { return v.split == Split::Test; });
}

struct SteerSetup {
    ActivationStore store;
    Encoder enc;
    ProbeArtifact probes;
    CavArtifact cavs;
};

SteerSetup loadSteerSetup(const RunConfig& cfg, const fs::path& store_path, const fs::path& out) {
    ActivationStore store = loadActs(cfg, store_path, false);
    Encoder enc(cfg.encoderConfig());
    const auto& extras = store.header().extras;
    if (extras.contains("encoder_weight_hash") && extras["encoder_weight_hash"] != hexDigest(enc.weightHash())) {
        throw ValidationError("store was encoded with different encoder weights");
    }
    ProbeArtifact probes = readProbeArtifact(cfg, out, store.dim());
    CavArtifact cavs = readCavArtifact(cfg, out, store.dim());
    return {std::move(store), std::move(enc), std::move(probes), std::move(cavs)};
}

SteeringEvaluator makeEvaluator(const RunConfig& cfg, const SteerSetup& s) {
    const int l = s.cavs.primary_layer;
    return SteeringEvaluator(s.enc, s.store, testRows(s.store), resultAt(s.probes, l).probe, l,
                             s.cavs.physics.front().direction, cfg.threads);
}

}  // namespace

json RunConfig::toJson() const {
    json j;
    j["seed"] = seed;
    j["dataset"] = {{"pairs_per_block", pairs_per_block}, {"frames", frames},
                    {"grid", grid},                       {"temporal_stride", temporal_stride},
                    {"noise_sigma", noise_sigma},         {"embed_dim", embed_dim},
                    {"embed_scale", embed_scale}};
    j["encoder"] = {{"layers", layers}, {"heads", heads}, {"mlp_ratio", mlp_ratio}, {"init_scale", init_scale}};
    j["probe"] = {{"task", task},        {"folds", folds},       {"C", C},
                  {"max_iter", max_iter}, {"tol", tol},           {"pca_k", pca_k},
                  {"pca_mode", pca_mode}, {"eps", eps},           {"top_k", top_k}};
    j["steer"] = {{"alphas", alphas},
                  {"inject", inject},
                  {"ablation_alpha", ablation_alpha},
                  {"projection_alpha", projection_alpha},
                  {"n_random", n_random}};
    j["threads"] = threads;
    return j;
}

RunConfig RunConfig::fromJson(const json& j) {
    if (!j.is_object()) {
        throw ValidationError("config: expected a JSON object");
    }
    RunConfig c;
    std::set<std::string> top;
    readKey(j, "", "seed", c.seed, top);
    readKey(j, "", "threads", c.threads, top);
    auto section = [&](const char* name) -> json {
        top.insert(name);
        if (!j.contains(name)) {
            return json::object();
        }
        if (!j[name].is_object()) {
            throw ValidationError(std::string("config: section '") + name + "' must be an object");
        }
        return j[name];
    };
    {
        const json s = section("dataset");
        std::set<std::string> k;
        readKey(s, "dataset", "pairs_per_block", c.pairs_per_block, k);
        readKey(s, "dataset", "frames", c.frames, k);
        readKey(s, "dataset", "grid", c.grid, k);
        readKey(s, "dataset", "temporal_stride", c.temporal_stride, k);
        readKey(s, "dataset", "noise_sigma", c.noise_sigma, k);
        readKey(s, "dataset", "embed_dim", c.embed_dim, k);
        readKey(s, "dataset", "embed_scale", c.embed_scale, k);
        rejectUnknown(s, "dataset", k);
    }
    {
        const json s = section("encoder");
        std::set<std::string> k;
        readKey(s, "encoder", "layers", c.layers, k);
        readKey(s, "encoder", "heads", c.heads, k);
        readKey(s, "encoder", "mlp_ratio", c.mlp_ratio, k);
        readKey(s, "encoder", "init_scale", c.init_scale, k);
        rejectUnknown(s, "encoder", k);
    }
    {
        const json s = section("probe");
        std::set<std::string> k;
        readKey(s, "probe", "task", c.task, k);
        readKey(s, "probe", "folds", c.folds, k);
        readKey(s, "probe", "C", c.C, k);
        readKey(s, "probe", "max_iter", c.max_iter, k);
        readKey(s, "probe", "tol", c.tol, k);
        readKey(s, "probe", "pca_k", c.pca_k, k);
        readKey(s, "probe", "pca_mode", c.pca_mode, k);
        readKey(s, "probe", "eps", c.eps, k);
        readKey(s, "probe", "top_k", c.top_k, k);
        rejectUnknown(s, "probe", k);
    }
    {
        const json s = section("steer");
        std::set<std::string> k;
        readKey(s, "steer", "alphas", c.alphas, k);
        readKey(s, "steer", "inject", c.inject, k);
        readKey(s, "steer", "ablation_alpha", c.ablation_alpha, k);
        readKey(s, "steer", "projection_alpha", c.projection_alpha, k);
        readKey(s, "steer", "n_random", c.n_random, k);
        rejectUnknown(s, "steer", k);
    }
    rejectUnknown(j, "", top);
    c.validate();
    return c;
}

void RunConfig::validate() const {
    sceneSpec().validate();
    encoderConfig().validate();
    if (pairs_per_block < 1) {
        throw ValidationError("config: pairs_per_block must be >= 1");
    }
    parseProbeTask(task);
    parsePcaMode(pca_mode);
    if (folds < 2 || !(C > 0.0) || max_iter < 1 || !(tol > 0.0) || pca_k < 1 || top_k < 1 || !(eps >= 0.0)) {
        throw ValidationError("config: invalid probe parameters");
    }
    if (alphas.empty()) {
        throw ValidationError("config: alphas must not be empty");
    }
    for (double a : alphas) {
        if (!std::isfinite(a)) {
            throw ValidationError("config: alphas must be finite");
        }
    }
    if (inject != "primary" && inject != "topk") {
        throw ValidationError("config: inject must be 'primary' or 'topk'");
    }
    if (n_random < 2 || !std::isfinite(ablation_alpha) || !std::isfinite(projection_alpha)) {
        throw ValidationError("config: invalid steering parameters");
    }
    if (threads < 1) {
        throw ValidationError("config: threads must be >= 1");
    }
}

SceneSpec RunConfig::sceneSpec() const {
    SceneSpec s;
    s.frames = frames;
    s.grid = grid;
    s.temporal_stride = temporal_stride;
    s.seed = deriveSeed(seed, "dataset");
    s.noise_sigma = noise_sigma;
    s.embed_dim = embed_dim;
    s.embed_scale = embed_scale;
    return s;
}

EncoderConfig RunConfig::encoderConfig() const {
    EncoderConfig e;
    e.layers = layers;
    e.dim = embed_dim;
    e.heads = heads;
    e.mlp_ratio = mlp_ratio;
    e.init_seed = deriveSeed(seed, "encoder");
    e.init_scale = init_scale;
    return e;
}

ProbeOptions RunConfig::probeOptions() const {
    ProbeOptions p;
    p.C = C;
    p.max_iter = max_iter;
    p.tol = tol;
    p.pca_k = pca_k;
    p.pca_mode = parsePcaMode(pca_mode);
    return p;
}

SweepOptions RunConfig::sweepOptions() const {
    SweepOptions o;
    o.probe = probeOptions();
    o.folds = folds;
    o.seed = deriveSeed(seed, "probe");
    o.threads = threads;
    return o;
}

std::string stageHash(const RunConfig& cfg, Stage stage) {
    const json full = cfg.toJson();
    json part;
    part["seed"] = full["seed"];
    part["dataset"] = full["dataset"];
    if (stage != Stage::Gen) {
        part["encoder"] = full["encoder"];
    }
    if (stage == Stage::Probe || stage == Stage::Steer) {
        // The task only names the probe output file; both tasks may share a run.
        part["probe"] = full["probe"];
        part["probe"].erase("task");
    }
    if (stage == Stage::Steer) {
        part["steer"] = full["steer"];
    }
    return hexDigest(fnv1a(part.dump()));
}

void runGen(const RunConfig& cfg, const fs::path& out_store) {
    log("gen -> " + out_store.string());
    const Dataset data = generateDataset(cfg.sceneSpec(), cfg.pairs_per_block, cfg.threads);
    json extras;
    extras["config_hash"] = stageHash(cfg, Stage::Gen);
    extras["stage"] = "gen";
    writeDump(toStore(data, extras), out_store);
}

void runEncode(const RunConfig& cfg, const fs::path& in_store, const fs::path& out_store) {
    log("encode " + in_store.string() + " -> " + out_store.string());
    const ActivationStore input = readDump(in_store);
    requireHash(input.configHash(), stageHash(cfg, Stage::Gen), "store " + in_store.string());
    if (input.dim() != cfg.embed_dim) {
        throw ValidationError("store dim " + std::to_string(input.dim()) + " does not match config embed_dim " +
                              std::to_string(cfg.embed_dim));
    }
    const Encoder enc(cfg.encoderConfig());
    json extras;
    extras["config_hash"] = stageHash(cfg, Stage::Encode);
    extras["stage"] = "encode";
    extras["encoder_weight_hash"] = hexDigest(enc.weightHash());
    writeDump(encodeStore(enc, input, extras, cfg.threads), out_store);
}

void runProbe(const RunConfig& cfg, const fs::path& store_path, const fs::path& out) {
    log("probe " + store_path.string() + " -> " + out.string());
    const ActivationStore store = loadActs(cfg, store_path);
    const ProbeTask task = parseProbeTask(cfg.task);
    const auto results = probeSweep(store, task, cfg.sweepOptions());
    const PezResult pez = findPez(results, cfg.eps, cfg.top_k);
    ensureDir(out);
    const std::string name(toString(task));
    json j;
    j["config_hash"] = stageHash(cfg, Stage::Probe);
    j["task"] = name;
    j["folds"] = cfg.folds;
    j["layers"] = json::array();
    for (const auto& r : results) {
        const std::string file = "probe_" + name + "_l" + std::to_string(r.layer) + ".f32";
        writeVectorF32(out / file, r.probe.weights);
        j["layers"].push_back({{"layer", r.layer},
                               {"accuracy", r.accuracy},
                               {"std", r.std},
                               {"folds", r.folds},
                               {"flip_corrected", r.probe.flip_corrected},
                               {"intercept", r.probe.intercept},
                               {"pca_k", r.probe.pca ? json(r.probe.pca->k()) : json(nullptr)},
                               {"iterations", r.probe.iterations},
                               {"converged", r.probe.converged},
                               {"weights", file}});
    }
    j["pez"] = {{"epsilon", pez.epsilon},
                {"max_accuracy", pez.max_accuracy},
                {"threshold", pez.threshold},
                {"layers", pez.pez_layers},
                {"top_k", pez.top_k}};
    writeJson(out / ("probe_" + name + ".json"), j);
}

ProbeArtifact readProbeArtifact(const RunConfig& cfg, const fs::path& out, int dim) {
    const json j = readArtifact(out / "probe_plausibility.json", stageHash(cfg, Stage::Probe));
    ProbeArtifact pa;
    try {
        pa.task = j.at("task").get<std::string>();
        for (const auto& l : j.at("layers")) {
            LayerProbeResult r;
            r.layer = l.at("layer").get<int>();
            r.accuracy = l.at("accuracy").get<double>();
            r.std = l.at("std").get<double>();
            r.folds = l.at("folds").get<std::vector<double>>();
            r.probe.weights = readVectorF32(out / l.at("weights").get<std::string>(), static_cast<std::size_t>(dim));
            r.probe.intercept = l.at("intercept").get<double>();
            r.probe.flip_corrected = l.at("flip_corrected").get<bool>();
            r.probe.cv_accuracy = r.accuracy;
            r.probe.fold_accuracies = r.folds;
            r.probe.iterations = l.at("iterations").get<int>();
            r.probe.converged = l.at("converged").get<bool>();
            pa.layers.push_back(std::move(r));
        }
        const json& p = j.at("pez");
        pa.pez.epsilon = p.at("epsilon").get<double>();
        pa.pez.max_accuracy = p.at("max_accuracy").get<double>();
        pa.pez.threshold = p.at("threshold").get<double>();
        pa.pez.pez_layers = p.at("layers").get<std::vector<int>>();
        pa.pez.top_k = p.at("top_k").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed probe results: ") + e.what());
    }
    if (pa.pez.top_k.empty()) {
        throw ValidationError("probe results have an empty top-k set");
    }
    return pa;
}

void runCav(const RunConfig& cfg, const fs::path& store_path, const fs::path& out) {
    log("cav " + store_path.string() + " -> " + out.string());
    const ActivationStore store = loadActs(cfg, store_path);
    const ProbeArtifact pa = readProbeArtifact(cfg, out, store.dim());
    const std::string hash = stageHash(cfg, Stage::Probe);
    const json hash_extra = {{"config_hash", hash}};
    const int primary = pa.pez.top_k.front();

    json index;
    index["config_hash"] = hash;
    index["primary_layer"] = primary;
    index["physics"] = json::array();
    for (int layer : pa.pez.top_k) {
        const Cav cav = makeCav(resultAt(pa, layer).probe, layer, "all", "plausibility");
        const std::string stem = cavStem("physics", layer);
        writeCav(cav, out / stem, hash_extra);
        index["physics"].push_back(stem);
    }

    // Motion direction at the primary layer, same pipeline as the physics probe.
    const SweepOptions so = cfg.sweepOptions();
    const auto train = store.indicesWhere([](const VideoMeta& v) { return v.split == Split::Train; });
    const auto val = store.indicesWhere([](const VideoMeta& v) { return v.split == Split::Val; });
    auto motionLabels = [&](const std::vector<std::size_t>& rows) {
        Labels y;
        for (std::size_t r : rows) {
            y.push_back(labelOf(store.videos()[r], ProbeTask::Motion));
        }
        return y;
    };
    const CvResult mcv = crossValidate(store.pooled(primary, train), motionLabels(train), cfg.folds,
                                       deriveSeed(so.seed, "cv/motion"), so.probe);
    const auto [Xm, ym] = trainValData(store, primary, ProbeTask::Motion);
    Probe mprobe = trainProbe(Xm, ym, so.probe);
    if (!val.empty()) {
        flipCheck(mprobe, store.pooled(primary, val), motionLabels(val));
    }
    mprobe.cv_accuracy = mcv.mean;
    const std::string mstem = cavStem("motion", primary);
    writeCav(makeCav(mprobe, primary, "all", "motion"), out / mstem, hash_extra);
    index["motion"] = mstem;

    index["blocks"] = json::object();
    for (const auto& [block, cav] : makeBlockCavs(store, primary, so)) {
        const std::string stem = cavStem(std::string(toString(block)), primary);
        writeCav(cav, out / stem, hash_extra);
        index["blocks"][std::string(toString(block))] = stem;
    }
    writeJson(out / "cavs.json", index);
}

CavArtifact readCavArtifact(const RunConfig& cfg, const fs::path& out, int dim) {
    const std::string hash = stageHash(cfg, Stage::Probe);
    const json j = readArtifact(out / "cavs.json", hash);
    auto load = [&](const std::string& stem) {
        readArtifact(out / (stem + ".json"), hash);
        return readCav(out / stem, dim);
    };
    CavArtifact ca;
    try {
        ca.primary_layer = j.at("primary_layer").get<int>();
        for (const auto& s : j.at("physics")) {
            ca.physics.push_back(load(s.get<std::string>()));
        }
        ca.motion = load(j.at("motion").get<std::string>());
        for (const auto& [name, stem] : j.at("blocks").items()) {
            ca.blocks.emplace(parseBlock(name), load(stem.get<std::string>()));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed cavs.json: ") + e.what());
    }
    if (ca.physics.empty() || ca.physics.front().layer != ca.primary_layer) {
        throw ValidationError("cavs.json: first physics CAV must sit at the primary layer");
    }
    return ca;
}

void runSteer(const RunConfig& cfg, const fs::path& store_path, const fs::path& out, std::optional<double> alpha) {
    log("steer " + store_path.string() + " -> " + out.string());
    const SteerSetup s = loadSteerSetup(cfg, store_path, out);
    const SteeringEvaluator ev = makeEvaluator(cfg, s);
    std::vector<Cav> inject;
    if (cfg.inject == "topk") {
        inject = s.cavs.physics;
    } else {
        inject.push_back(s.cavs.physics.front());
    }
    const std::vector<double> alphas = alpha ? std::vector<double>{*alpha} : cfg.alphas;
    const AlphaSweepResult res = alphaSweep(ev, inject, alphas);
    writeTextFileAtomic(out / "alpha_sweep.csv", alphaSweepCsv(res.rows));
    writeTextFileAtomic(out / "alpha_sweep_raw.csv", rawOutcomesCsv(res.raw));
    json j;
    j["config_hash"] = stageHash(cfg, Stage::Steer);
    j["measure_layer"] = ev.measureLayer();
    j["injection_layers"] = json::array();
    for (const auto& c : inject) {
        j["injection_layers"].push_back(c.layer);
    }
    j["test_videos"] = ev.videos().size();
    j["rows"] = json::array();
    for (const auto& m : res.rows) {
        j["rows"].push_back(toJson(m));
    }
    writeJson(out / "steer.json", j);
}

void runAblate(const RunConfig& cfg, const fs::path& store_path, const fs::path& out) {
    log("ablate " + store_path.string() + " -> " + out.string());
    const SteerSetup s = loadSteerSetup(cfg, store_path, out);
    const SteeringEvaluator ev = makeEvaluator(cfg, s);
    const auto rows = layerAblation(ev, s.cavs.physics.front(), cfg.ablation_alpha);
    writeTextFileAtomic(out / "layer_ablation.csv", ablationCsv(rows));
    json j;
    j["config_hash"] = stageHash(cfg, Stage::Steer);
    j["measure_layer"] = ev.measureLayer();
    j["alpha"] = cfg.ablation_alpha;
    j["rows"] = json::array();
    for (const auto& r : rows) {
        json m = toJson(r.metrics);
        j["rows"].push_back(m);
    }
    writeJson(out / "ablation.json", j);
}

void runAngles(const RunConfig& cfg, const fs::path& store_path, const fs::path& out) {
    log("angles -> " + out.string());
    const ActivationStore store = loadActs(cfg, store_path);
    const CavArtifact ca = readCavArtifact(cfg, out, store.dim());
    const AngleReport r =
        orthogonalityReport(ca.physics.front(), ca.motion, ca.blocks, cfg.n_random, deriveSeed(cfg.seed, "random"));
    std::vector<AnglePair> block_pairs;
    for (const auto& p : r.pairs) {
        if (p.a != "physics") {
            block_pairs.push_back(p);
        }
    }
    writeTextFileAtomic(out / "block_angles.csv", angleCsv(block_pairs));
    writeTextFileAtomic(out / "orthogonality.csv", orthogonalityCsv(r));
    json j = toJson(r);
    j["config_hash"] = stageHash(cfg, Stage::Steer);
    j["layer"] = ca.primary_layer;
    writeJson(out / "angles.json", j);
}

void runProject(const RunConfig& cfg, const fs::path& store_path, const fs::path& out) {
    log("project " + store_path.string() + " -> " + out.string());
    const SteerSetup s = loadSteerSetup(cfg, store_path, out);
    const SteeringEvaluator ev = makeEvaluator(cfg, s);
    const Projection2d p = project2d(ev, s.store, s.cavs.physics.front(), cfg.projection_alpha);
    writeTextFileAtomic(out / "projection2d.csv", projectionCsv(p));
    json j;
    j["config_hash"] = stageHash(cfg, Stage::Steer);
    j["layer"] = ev.measureLayer();
    j["alpha"] = cfg.projection_alpha;
    j["rows"] = p.rows.size();
    j["explained_variance_ratio"] = {p.pca.explainedVarianceRatio()[0], p.pca.explainedVarianceRatio()[1]};
    j["cav_xy"] = {p.cav_x, p.cav_y};
    j["file"] = "projection2d.csv";
    writeJson(out / "projection.json", j);
}

void runReport(const RunConfig& cfg, const fs::path& out) {
    log("report -> " + out.string());
    const std::string steer_hash = stageHash(cfg, Stage::Steer);
    const json probe = readArtifact(out / "probe_plausibility.json", stageHash(cfg, Stage::Probe));
    const json cavs = readArtifact(out / "cavs.json", stageHash(cfg, Stage::Probe));
    json steer = readArtifact(out / "steer.json", steer_hash);
    json ablation = readArtifact(out / "ablation.json", steer_hash);
    json angles = readArtifact(out / "angles.json", steer_hash);
    json projection = readArtifact(out / "projection.json", steer_hash);
    for (json* j : {&steer, &ablation, &angles, &projection}) {
        j->erase("config_hash");
    }

    json r;
    r["version"] = 1;
    r["config_hash"] = steer_hash;
    r["config"] = cfg.toJson();
    r["config"].erase("threads");
    r["seeds"] = {{"root", cfg.seed},
                  {"dataset", deriveSeed(cfg.seed, "dataset")},
                  {"encoder", deriveSeed(cfg.seed, "encoder")},
                  {"probe", deriveSeed(cfg.seed, "probe")},
                  {"random", deriveSeed(cfg.seed, "random")}};
    r["stage_hashes"] = {{"gen", stageHash(cfg, Stage::Gen)},
                         {"encode", stageHash(cfg, Stage::Encode)},
                         {"probe", stageHash(cfg, Stage::Probe)},
                         {"steer", steer_hash}};
    json layers = json::array();
    for (const auto& l : probe.at("layers")) {
        layers.push_back({{"layer", l.at("layer")},
                          {"accuracy", l.at("accuracy")},
                          {"std", l.at("std")},
                          {"flip_corrected", l.at("flip_corrected")}});
    }
    r["probe"] = {{"task", probe.at("task")}, {"folds", probe.at("folds")}, {"layers", layers}, {"pez", probe.at("pez")}};
    json cav_meta = json::array();
    auto addCav = [&](const std::string& stem) {
        json m = readJsonFile(out / (stem + ".json"));
        m.erase("config_hash");
        m["file"] = stem + ".f32";
        cav_meta.push_back(m);
    };
    for (const auto& s : cavs.at("physics")) {
        addCav(s.get<std::string>());
    }
    addCav(cavs.at("motion").get<std::string>());
    for (const auto& [name, s] : cavs.at("blocks").items()) {
        addCav(s.get<std::string>());
    }
    r["cavs"] = {{"primary_layer", cavs.at("primary_layer")}, {"vectors", cav_meta}};
    r["alpha_sweep"] = steer;
    r["layer_ablation"] = ablation;
    r["angles"] = angles;
    r["projection"] = projection;
    r["artifacts"] = {"probe_plausibility.json", "cavs.json",         "alpha_sweep.csv",   "alpha_sweep_raw.csv",
                      "layer_ablation.csv",      "block_angles.csv",  "orthogonality.csv", "projection2d.csv"};
    writeJson(out / "report.json", r);
}

void runAll(const RunConfig& cfg, const fs::path& out) {
    ensureDir(out);
    writeJson(out / "config.json", cfg.toJson());
    runGen(cfg, out / "raw");
    runEncode(cfg, out / "raw", out / "acts");
    RunConfig physics = cfg;
    physics.task = "plausibility";
    runProbe(physics, out / "acts", out);
    if (cfg.task != physics.task) {
        runProbe(cfg, out / "acts", out);
    }
    runCav(cfg, out / "acts", out);
    runSteer(cfg, out / "acts", out);
    runAblate(cfg, out / "acts", out);
    runAngles(cfg, out / "acts", out);
    runProject(cfg, out / "acts", out);
    runReport(cfg, out);
}

}  // namespace physteer
