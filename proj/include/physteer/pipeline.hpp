#pragma once

// Disk-backed pipeline stages. Every stage reads its inputs from artifacts
// written by earlier stages and rejects artifacts whose embedded config hash
// does not match the current RunConfig.
//
// Layout of a run directory R (`all --out R`):
//   R/config.json                  resolved RunConfig
//   R/raw/                         gen: dump with layer -1 tokens
//   R/acts/                        encode: pooled layers -1..L-1, tokens for -1
//   R/probe_<task>.json, R/probe_<task>_l{k}.f32
//   R/cavs.json, R/cav_*.{json,f32}
//   R/*.csv, R/steer.json, ...     steer / ablate / angles / project
//   R/report.json

#include "physteer/encoder.hpp"
#include "physteer/evalkit.hpp"
#include "physteer/probekit.hpp"
#include "physteer/steer.hpp"
#include "physteer/synthphys.hpp"

#include <filesystem>
#include <optional>

namespace physteer {

struct RunConfig {
    std::uint64_t seed = 0;

    // dataset
    int pairs_per_block = 60;
    int frames = 16;
    int grid = 8;
    int temporal_stride = 2;
    double noise_sigma = 0.05;
    int embed_dim = 64;
    double embed_scale = 256.0;

    // encoder
    int layers = 8;
    int heads = 4;
    int mlp_ratio = 4;
    double init_scale = 0.02;

    // probe
    std::string task = "plausibility";
    int folds = 5;
    double C = 1.0;
    int max_iter = 1000;
    double tol = 1e-6;
    int pca_k = 64;
    std::string pca_mode = "auto";  // auto | always | never
    double eps = 0.05;
    int top_k = 3;

    // steering
    std::vector<double> alphas = defaultAlphas();
    std::string inject = "primary";  // primary (l* only) | topk
    double ablation_alpha = 10.0;
    double projection_alpha = 10.0;
    int n_random = 1000;

    int threads = 1;  // not part of any hash: results do not depend on it

    nlohmann::ordered_json toJson() const;
    /// Starts from defaults; unknown keys are rejected.
    static RunConfig fromJson(const nlohmann::ordered_json& j);
    void validate() const;

    SceneSpec sceneSpec() const;
    EncoderConfig encoderConfig() const;
    ProbeOptions probeOptions() const;
    SweepOptions sweepOptions() const;
};

enum class Stage { Gen, Encode, Probe, Steer };

/// Hash of the config sections that determine a stage's artifacts.
std::string stageHash(const RunConfig& cfg, Stage stage);

namespace fs = std::filesystem;

void runGen(const RunConfig& cfg, const fs::path& out_store);
void runEncode(const RunConfig& cfg, const fs::path& in_store, const fs::path& out_store);
void runProbe(const RunConfig& cfg, const fs::path& store, const fs::path& out);
void runCav(const RunConfig& cfg, const fs::path& store, const fs::path& out);
/// `alpha` replaces the configured sweep with a single value.
void runSteer(const RunConfig& cfg, const fs::path& store, const fs::path& out, std::optional<double> alpha = {});
void runAblate(const RunConfig& cfg, const fs::path& store, const fs::path& out);
void runAngles(const RunConfig& cfg, const fs::path& store, const fs::path& out);
void runProject(const RunConfig& cfg, const fs::path& store, const fs::path& out);
void runReport(const RunConfig& cfg, const fs::path& out);
void runAll(const RunConfig& cfg, const fs::path& out);

/// Probe stage artifact, as read back from disk.
struct ProbeArtifact {
    std::string task;
    std::vector<LayerProbeResult> layers;
    PezResult pez;
};

/// Reads the plausibility probe results; CAV extraction always uses them.
ProbeArtifact readProbeArtifact(const RunConfig& cfg, const fs::path& out, int dim);

/// Physics CAVs for the injection set, plus the measurement (l*) CAV.
struct CavArtifact {
    int primary_layer = 0;
    std::vector<Cav> physics;  // top-k layers, accuracy order
    Cav motion;
    std::map<Block, Cav> blocks;
};

CavArtifact readCavArtifact(const RunConfig& cfg, const fs::path& out, int dim);

}  // namespace physteer
