#pragma once

#include "physteer/plan.hpp"
#include "physteer/probekit.hpp"

#include <filesystem>
#include <map>
#include <span>

namespace physteer {

/// v = w / |w|. The probe is expected to be flip-checked already, so v
/// points toward label 1.
Cav makeCav(const Probe& probe, int layer, std::string scope = "all", std::string task = "plausibility");

/// PCA basis shared by every block probe at one layer, fitted on the full
/// train+val pool; empty when the global probe would not use PCA.
std::optional<PcaModel> globalPca(const ActivationStore& store, int layer, const ProbeOptions& opts);

/// One CAV per block, each from a probe trained only on that block's
/// train+val videos (flip-checked on the block's val videos). Accuracy is the
/// block's train-split CV accuracy.
std::map<Block, Cav> makeBlockCavs(const ActivationStore& store, int layer, const SweepOptions& opts,
                                   std::span<const Block> blocks = kAllBlocks);

/// One injection per CAV, all with the same alpha.
SteeringPlan buildPlan(std::span<const Cav> cavs, double alpha);

// <stem>.json (metadata) + <stem>.f32 (direction).
void writeCav(const Cav& cav, const std::filesystem::path& stem, const nlohmann::ordered_json& extras = {});
Cav readCav(const std::filesystem::path& stem, int expected_dim);
nlohmann::ordered_json cavMetadata(const Cav& cav);

}  // namespace physteer
