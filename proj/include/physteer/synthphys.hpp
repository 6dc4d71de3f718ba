#pragma once

// Toy intuitive-physics videos: one object moving laterally across a G x G
// patch grid, with a screen occluder and a solid obstacle in every scene.
// Each pair shares its scene, its noise draw, and every frame before the
// violation onset; only the impossible member breaks a principle:
//   O1  the object ceases to exist behind the screen and reappears displaced
//   O2  the object jumps two rows upward in a single frame
//   O3  the object passes through the obstacle instead of stopping at it
//
// Per tubelet (temporal stride 2) and patch the raw features are
//   occupancy  solid matter (object or obstacle) covers the patch, in {0,1}
//   vx, vy     object velocity in grid units per frame (0 away from the object)
//   occluder   a screen or obstacle covers the patch
// Occupancy saturates at 1, so interpenetration (O3) and disappearance (O1)
// both lower the pooled occupancy; the fixed upward jump (O2) shows up in vy.

#include "physteer/actstore.hpp"

#include <optional>
#include <vector>

namespace physteer {

inline constexpr int kFeatureCount = 4;
inline constexpr int kFeatOccupancy = 0;
inline constexpr int kFeatVx = 1;
inline constexpr int kFeatVy = 2;
inline constexpr int kFeatOccluder = 3;

/// Largest per-frame displacement of a physically possible trajectory.
inline constexpr double kMaxSpeed = 0.5;

struct SceneSpec {
    int frames = 16;
    int grid = 8;
    int temporal_stride = 2;
    std::uint64_t seed = 0;
    double noise_sigma = 0.05;
    int embed_dim = 64;
    double embed_scale = 256.0;

    int tokenFrames() const { return frames / temporal_stride; }
    int tokenCount() const { return tokenFrames() * grid * grid; }
    void validate() const;
};

struct Point {
    double x = 0.0;
    double y = 0.0;
};

/// Axis-aligned rectangle in grid units, half-open: [x0, x1) x [y0, y1).
struct Rect {
    double x0 = 0.0;
    double y0 = 0.0;
    double x1 = 0.0;
    double y1 = 0.0;

    bool contains(Point p) const { return p.x >= x0 && p.x < x1 && p.y >= y0 && p.y < y1; }
};

struct Violation {
    Block kind = Block::O1;
    int onset = 0;
};

struct Trajectory {
    int grid = 8;
    std::vector<Point> positions;  // one per frame
    std::vector<bool> present;     // false while the object does not exist (O1)
    int direction = 1;             // +1 moves right, -1 moves left
    double speed = 0.0;
    double start_x = 0.0;
    double track_y = 0.0;
    std::vector<Rect> occluders;  // screens: hide, do not block
    std::vector<Rect> obstacles;  // solid
    std::optional<Violation> violation;

    int frames() const { return static_cast<int>(positions.size()); }
    Motion motion() const { return direction > 0 ? Motion::Right : Motion::Left; }
    /// Position the object would have with uninterrupted lateral motion.
    Point freePosition(int frame) const { return {start_x + direction * speed * frame, track_y}; }
    bool insideObstacle(int frame) const;
    bool occluded(int frame) const;
};

/// A possible scene for one block, and the frame at which that block's
/// violation starts when the pair's impossible twin is built.
struct ScenePlan {
    Trajectory trajectory;
    int onset = 0;
};

ScenePlan planScene(const SceneSpec& spec, Block block, Motion motion, Rng& rng);

/// Turns a possible trajectory into its impossible twin. Frames before
/// `onset` are left untouched.
Trajectory violate(const Trajectory& traj, Block kind, int onset);

/// Raw features, one row per token (token-frame major, then row, then column).
MatrixXd patchFeatures(const SceneSpec& spec, const Trajectory& traj);

/// Seeded affine patch embedding: tokens = features * weights + bias + noise.
/// The rows of `weights` and `bias` are orthogonal with norm embed_scale.
struct TokenEmbedding {
    MatrixXd weights;  // kFeatureCount x D
    VectorXd bias;     // D
};

TokenEmbedding makeEmbedding(const SceneSpec& spec);

struct SyntheticVideo {
    VideoMeta meta;
    std::string pair_id;
    Trajectory trajectory;
    MatrixXd features;  // N x kFeatureCount
    MatrixXd tokens;    // N x D
};

struct Dataset {
    SceneSpec spec;
    TokenEmbedding embedding;
    std::vector<SyntheticVideo> videos;
};

/// 2 * 3 * n_pairs_per_block videos, ordered block, pair, (possible, impossible).
/// Splits are stratified 60/20/20 when every stratum has at least five
/// videos; smaller datasets are all assigned to train.
Dataset generateDataset(const SceneSpec& spec, int n_pairs_per_block, int threads = 1);

/// Dump-format store with the raw tokens as layer -1.
ActivationStore toStore(const Dataset& data, nlohmann::ordered_json extras = nlohmann::ordered_json::object());

}  // namespace physteer
