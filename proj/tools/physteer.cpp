#include "physteer/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace physteer;

namespace {

struct Flags {
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string store;
    std::string config;
    std::vector<double> alphas;
    std::optional<double> eps;
    std::optional<int> topk;
    std::optional<int> pca;
    std::optional<int> folds;
    std::optional<int> threads;
    std::optional<int> pairs_per_block;
    std::optional<int> grid;
    std::optional<int> frames;
    std::optional<double> noise;
    std::optional<std::string> task;
    std::optional<std::string> inject;
    std::optional<double> alpha;
};

RunConfig resolveConfig(const Flags& f) {
    RunConfig cfg;
    if (!f.config.empty()) {
        cfg = RunConfig::fromJson(readJsonFile(f.config));
    }
    if (f.seed) cfg.seed = *f.seed;
    if (!f.alphas.empty()) cfg.alphas = f.alphas;
    if (f.eps) cfg.eps = *f.eps;
    if (f.topk) cfg.top_k = *f.topk;
    if (f.pca) {
        if (*f.pca == 0) {
            cfg.pca_mode = "never";
        } else {
            cfg.pca_k = *f.pca;
        }
    }
    if (f.folds) cfg.folds = *f.folds;
    if (f.threads) cfg.threads = *f.threads;
    if (f.pairs_per_block) cfg.pairs_per_block = *f.pairs_per_block;
    if (f.grid) cfg.grid = *f.grid;
    if (f.frames) cfg.frames = *f.frames;
    if (f.noise) cfg.noise_sigma = *f.noise;
    if (f.task) cfg.task = *f.task;
    if (f.inject) cfg.inject = *f.inject;
    cfg.validate();
    return cfg;
}

fs::path need(const std::string& v, const char* flag, const char* cmd) {
    if (v.empty()) {
        throw ValidationError(std::string(cmd) + ": " + flag + " is required");
    }
    return v;
}

// Analysis stages write next to the run: default --out is the store's parent.
fs::path outDir(const Flags& f, const char* cmd) {
    if (!f.out.empty()) {
        return f.out;
    }
    const fs::path store = fs::absolute(need(f.store, "--store", cmd));
    return store.parent_path();
}

// Validates a dump (any producer) and prints its shape.
void inspect(const fs::path& path) {
    const ActivationStore store = readDump(path);
    nlohmann::ordered_json j;
    j["model_id"] = store.modelId();
    j["num_layers"] = store.numLayers();
    j["dim"] = store.dim();
    j["token_count"] = store.tokenCount();
    j["videos"] = store.numVideos();
    j["layers"] = store.layerIndices();
    nlohmann::ordered_json with_tokens = nlohmann::ordered_json::array();
    for (int l : store.layerIndices()) {
        if (store.layer(l).hasTokens()) {
            with_tokens.push_back(l);
        }
    }
    j["token_layers"] = with_tokens;
    for (Split s : {Split::Train, Split::Val, Split::Test}) {
        j["splits"][std::string(toString(s))] =
            store.indicesWhere([s](const VideoMeta& v) { return v.split == s; }).size();
    }
    j["config_hash"] = store.configHash() ? nlohmann::ordered_json(*store.configHash()) : nlohmann::ordered_json();
    std::cout << j.dump(2) << '\n';
}

int dispatch(const std::string& cmd, const Flags& f) {
    const RunConfig cfg = resolveConfig(f);
    if (cmd == "gen") {
        runGen(cfg, need(f.out, "--out", "gen"));
    } else if (cmd == "encode") {
        runEncode(cfg, need(f.store, "--store", "encode"), need(f.out, "--out", "encode"));
    } else if (cmd == "probe") {
        fs::create_directories(outDir(f, "probe"));
        runProbe(cfg, need(f.store, "--store", "probe"), outDir(f, "probe"));
    } else if (cmd == "cav") {
        runCav(cfg, need(f.store, "--store", "cav"), outDir(f, "cav"));
    } else if (cmd == "steer") {
        runSteer(cfg, need(f.store, "--store", "steer"), outDir(f, "steer"), f.alpha);
    } else if (cmd == "ablate") {
        runAblate(cfg, need(f.store, "--store", "ablate"), outDir(f, "ablate"));
    } else if (cmd == "angles") {
        runAngles(cfg, need(f.store, "--store", "angles"), outDir(f, "angles"));
    } else if (cmd == "project") {
        runProject(cfg, need(f.store, "--store", "project"), outDir(f, "project"));
    } else if (cmd == "report") {
        runReport(cfg, need(f.out, "--out", "report"));
    } else if (cmd == "all") {
        runAll(cfg, need(f.out, "--out", "all"));
    } else if (cmd == "inspect") {
        inspect(need(f.store, "--store", "inspect"));
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Probe, steer and evaluate concept directions in a toy video encoder"};
    app.require_subcommand(1, 1);

    Flags f;
    app.add_option("--seed", f.seed, "Root seed");
    app.add_option("--out", f.out, "Output directory");
    app.add_option("--store", f.store, "Input dump directory");
    app.add_option("--config", f.config, "RunConfig JSON; flags override its values");
    app.add_option("--alphas", f.alphas, "Steering strengths, comma separated")->delimiter(',');
    app.add_option("--eps", f.eps, "PEZ tolerance");
    app.add_option("--topk", f.topk, "Number of top layers kept");
    app.add_option("--pca", f.pca, "PCA components before probing (0 disables)");
    app.add_option("--folds", f.folds, "Cross-validation folds");
    app.add_option("--threads", f.threads, "Worker threads")->check(CLI::PositiveNumber);
    app.add_option("--pairs-per-block", f.pairs_per_block, "Matched pairs per block");
    app.add_option("--grid", f.grid, "Spatial grid size");
    app.add_option("--frames", f.frames, "Frames per video");
    app.add_option("--noise", f.noise, "Embedding noise sigma");
    app.add_option("--task", f.task, "Probe task (plausibility|motion)");
    app.add_option("--inject", f.inject, "Alpha sweep injection set (primary|topk)");
    app.add_option("--alpha", f.alpha, "Single steering strength (steer only)");

    const std::vector<std::pair<const char*, const char*>> commands = {
        {"gen", "Generate the synthetic dataset as a raw-token dump"},
        {"encode", "Run the encoder over a raw dump"},
        {"probe", "Layer-wise probe sweep and PEZ"},
        {"cav", "Extract physics, motion and per-block CAVs"},
        {"steer", "Alpha sweep at the primary layer"},
        {"ablate", "Inject at each layer in turn"},
        {"angles", "Pairwise CAV angles and random baseline"},
        {"project", "2D PCA projection with steering arrows"},
        {"report", "Bundle stage outputs into report.json"},
        {"all", "Run every stage into --out"},
        {"inspect", "Validate a dump and print its shape"},
    };
    for (const auto& [name, help] : commands) {
        app.add_subcommand(name, help)->fallthrough();
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        return dispatch(app.get_subcommands().front()->get_name(), f);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
