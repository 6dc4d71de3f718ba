#pragma once

// Per-layer activation store and the v1 dump interchange format.
//
// A dump directory holds
//   manifest.json        video labels, shapes and the list of layers
//   pooled_l{k}.f32      little-endian float32 [num_videos x D], manifest order
//   tokens_l{k}.f32      optional, little-endian float32 [num_videos x N x D]
//
// Layer -1 denotes the raw encoder input (token embeddings).

#include "physteer/common.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace physteer {

enum class Plausibility : int { Possible = 0, Impossible = 1 };
enum class Block : int { O1 = 0, O2 = 1, O3 = 2 };
enum class Motion : int { Left = 0, Right = 1 };
enum class Split : int { Train = 0, Val = 1, Test = 2 };

inline constexpr std::array<Block, 3> kAllBlocks{Block::O1, Block::O2, Block::O3};

std::string_view toString(Block b);
std::string_view toString(Motion m);
std::string_view toString(Split s);
Block parseBlock(std::string_view s);
Motion parseMotion(std::string_view s);
Split parseSplit(std::string_view s);

struct VideoMeta {
    std::string id;
    Plausibility plausibility = Plausibility::Possible;
    Block block = Block::O1;
    Motion motion = Motion::Left;
    Split split = Split::Train;

    bool operator==(const VideoMeta&) const = default;
};

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Activations of one video at one layer, promoted to double.
struct LayerActivations {
    int layer = 0;
    MatrixXd tokens;  // N x D, empty when the store has no token file for the layer
    VectorXd pooled;  // D
};

/// On-disk precision data for one layer, all videos.
struct LayerData {
    int layer = 0;
    RowMatrixF pooled;  // num_videos x D
    RowMatrixF tokens;  // (num_videos * N) x D, or empty

    bool hasTokens() const { return tokens.size() > 0; }
};

struct StoreHeader {
    std::string model_id;
    int num_layers = 0;
    int token_count = 0;
    int dim = 0;
    // Extra manifest keys (e.g. config_hash, notes); preserved verbatim.
    nlohmann::ordered_json extras = nlohmann::ordered_json::object();
};

/// Mean over token rows, accumulated in ascending row order.
VectorXd meanPool(const Eigen::Ref<const MatrixXd>& tokens);

/// Immutable set of labelled activations. The constructor enforces every
/// invariant (unique ids, shapes, finiteness, pooled == mean(tokens)).
class ActivationStore {
  public:
    ActivationStore(StoreHeader header, std::vector<VideoMeta> videos, std::vector<LayerData> layers);

    const StoreHeader& header() const { return header_; }
    const std::string& modelId() const { return header_.model_id; }
    int numLayers() const { return header_.num_layers; }
    int tokenCount() const { return header_.token_count; }
    int dim() const { return header_.dim; }
    std::optional<std::string> configHash() const;

    const std::vector<VideoMeta>& videos() const { return videos_; }
    std::size_t numVideos() const { return videos_.size(); }
    std::vector<int> layerIndices() const;
    bool hasLayer(int layer) const;
    const LayerData& layer(int layer) const;

    std::size_t indexOf(std::string_view id) const;
    std::vector<std::size_t> indicesWhere(const std::function<bool(const VideoMeta&)>& pred) const;

    /// Pooled features (double) for the given video rows at one layer.
    MatrixXd pooled(int layer, std::span<const std::size_t> rows) const;
    MatrixXd pooled(int layer) const;
    MatrixXd tokens(std::size_t video, int layer) const;
    LayerActivations activation(std::size_t video, int layer) const;

    /// Copy of this store with new split labels (stores are never mutated).
    ActivationStore withSplits(std::span<const Split> splits) const;

    bool operator==(const ActivationStore& other) const;

  private:
    StoreHeader header_;
    std::vector<VideoMeta> videos_;
    std::vector<LayerData> layers_;
};

void writeDump(const ActivationStore& store, const std::filesystem::path& dir);
ActivationStore readDump(const std::filesystem::path& dir);

std::string pooledFileName(int layer);
std::string tokensFileName(int layer);

/// Stratified assignment over the six (plausibility, block) strata.
/// Within each stratum the counts per split are fraction * size rounded by
/// largest remainder, so they are within one video of the exact share.
std::vector<Split> splitIndices(std::span<const VideoMeta> videos, std::array<double, 3> fractions,
                                std::uint64_t seed);

// Raw float32 helpers shared by probe/CAV serialization.
void writeF32(const std::filesystem::path& path, std::span<const float> values);
std::vector<float> readF32(const std::filesystem::path& path, std::size_t expected_count);
void writeVectorF32(const std::filesystem::path& path, const VectorXd& v);
VectorXd readVectorF32(const std::filesystem::path& path, std::size_t expected_count);

nlohmann::ordered_json readJsonFile(const std::filesystem::path& path);
void writeTextFileAtomic(const std::filesystem::path& path, std::string_view text);

}  // namespace physteer
