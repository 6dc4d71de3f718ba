#include "physteer/synthphys.hpp"

#include <algorithm>
#include <cmath>

namespace physteer {

namespace {

constexpr int kFirstTrackRow = 4;  // rows 0-1 hold decorations, the O2 jump lands two rows up
constexpr double kRowJump = 2.0;

std::string pairId(Block b, int p) {
    std::string digits = std::to_string(p);
    if (digits.size() < 3) {
        digits.insert(0, 3 - digits.size(), '0');
    }
    return std::string(toString(b)) + "-p" + digits;
}

int cellIndex(double v, int grid) {
    return std::clamp(static_cast<int>(std::floor(v)), 0, grid - 1);
}

bool coversCell(const Rect& r, int gx, int gy) {
    return r.contains({gx + 0.5, gy + 0.5});
}

void mirror(Trajectory& t) {
    const double g = t.grid;
    for (auto& p : t.positions) {
        p.x = g - p.x;
    }
    auto flip = [g](Rect& r) { r = {g - r.x1, r.y0, g - r.x0, r.y1}; };
    for (auto& r : t.occluders) {
        flip(r);
    }
    for (auto& r : t.obstacles) {
        flip(r);
    }
    t.start_x = g - t.start_x;
    t.direction = -t.direction;
}

// Non-overlapping screen (2 wide) and obstacle (1 wide) in rows [0, 2).
void placeDecorations(Trajectory& t, bool screen, bool obstacle, Rng& rng) {
    const int g = t.grid;
    for (;;) {
        const int sx = static_cast<int>(rng.below(static_cast<std::uint64_t>(g - 1)));
        const int ox = static_cast<int>(rng.below(static_cast<std::uint64_t>(g)));
        if (screen && obstacle && ox >= sx && ox < sx + 2) {
            continue;
        }
        if (screen) {
            t.occluders.push_back({static_cast<double>(sx), 0.0, sx + 2.0, 2.0});
        }
        if (obstacle) {
            t.obstacles.push_back({static_cast<double>(ox), 0.0, ox + 1.0, 2.0});
        }
        return;
    }
}

void checkInsideGrid(const Trajectory& t, std::string_view what) {
    for (int k = 0; k < t.frames(); ++k) {
        const Point p = t.positions[static_cast<std::size_t>(k)];
        if (p.x < 0.0 || p.x >= t.grid || p.y < 0.0 || p.y >= t.grid) {
            throw ValidationError(std::string(what) + ": trajectory leaves the grid at frame " + std::to_string(k));
        }
    }
}

}  // namespace

void SceneSpec::validate() const {
    if (frames < 4 || temporal_stride < 1 || frames % temporal_stride != 0) {
        throw ValidationError("scene: frames must be >= 4 and a multiple of the temporal stride");
    }
    if (grid < 1 || embed_dim < kFeatureCount + 1) {
        throw ValidationError("scene: embed_dim must exceed the feature count");
    }
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma) || !(embed_scale > 0.0)) {
        throw ValidationError("scene: noise_sigma must be >= 0 and embed_scale > 0");
    }
}

bool Trajectory::insideObstacle(int frame) const {
    const auto f = static_cast<std::size_t>(frame);
    if (!present[f]) {
        return false;
    }
    return std::any_of(obstacles.begin(), obstacles.end(), [&](const Rect& r) { return r.contains(positions[f]); });
}

bool Trajectory::occluded(int frame) const {
    const auto f = static_cast<std::size_t>(frame);
    return std::any_of(occluders.begin(), occluders.end(), [&](const Rect& r) { return r.contains(positions[f]); });
}

ScenePlan planScene(const SceneSpec& spec, Block block, Motion motion, Rng& rng) {
    spec.validate();
    const int frames = spec.frames;
    const int grid = spec.grid;
    const double s_hi = std::min(0.45, (grid - 2.0) / (frames - 1));
    const double s_lo = 0.6 * s_hi;
    const int last_track_row = grid - 3;  // O1 reappears two rows below the track
    if (last_track_row < kFirstTrackRow || s_lo < 0.05) {
        throw ValidationError("grid too small to place occluder and trajectory (grid=" + std::to_string(grid) +
                              ", frames=" + std::to_string(frames) + ")");
    }

    Trajectory t;
    t.grid = grid;
    t.direction = 1;
    t.start_x = rng.uniform(0.5, 1.5);
    t.speed = rng.uniform(s_lo, s_hi);
    const int row = kFirstTrackRow + static_cast<int>(rng.below(static_cast<std::uint64_t>(last_track_row - kFirstTrackRow + 1)));
    t.track_y = row + 0.5;
    t.positions.resize(static_cast<std::size_t>(frames));
    t.present.assign(static_cast<std::size_t>(frames), true);
    auto trace = [&t, frames] {
        for (int k = 0; k < frames; ++k) {
            t.positions[static_cast<std::size_t>(k)] = t.freePosition(k);
        }
    };
    trace();
    // On short clips some start/speed draws leave no admissible placement.
    int redraws = 0;
    auto redraw = [&] {
        if (++redraws > 64) {
            return false;
        }
        t.start_x = rng.uniform(0.5, 1.5);
        t.speed = rng.uniform(s_lo, s_hi);
        trace();
        return true;
    };
    const double track_top = row - 1.0;
    const double track_bottom = row + 1.0;

    ScenePlan plan;
    switch (block) {
        case Block::O1: {
            // Screen on the track; the object must be seen before and after it.
            std::vector<std::pair<int, int>> valid;  // (screen x, first occluded frame)
            do {
                valid.clear();
                for (int sx = 0; sx + 2 <= grid; ++sx) {
                    int first = -1;
                    int last = -1;
                    for (int k = 0; k < frames; ++k) {
                        const double x = t.freePosition(k).x;
                        if (x >= sx && x < sx + 2.0) {
                            if (first < 0) {
                                first = k;
                            }
                            last = k;
                        }
                    }
                    // The displaced object must be sampled by at least one tubelet.
                    if (first >= 1 && last <= frames - 1 - spec.temporal_stride) {
                        valid.emplace_back(sx, first);
                    }
                }
            } while (valid.empty() && redraw());
            if (valid.empty()) {
                throw ValidationError("grid too small to place occluder and trajectory");
            }
            const auto [sx, first] = valid[rng.below(valid.size())];
            t.occluders.push_back({static_cast<double>(sx), track_top, sx + 2.0, track_bottom});
            placeDecorations(t, false, true, rng);
            plan.onset = first;
            break;
        }
        case Block::O2: {
            placeDecorations(t, true, true, rng);
            const int lo = std::max(1, frames / 4);
            const int hi = std::min(frames - 2, (3 * frames) / 4);
            plan.onset = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
            break;
        }
        case Block::O3: {
            // Obstacle on the track; the possible object stops in the patch before it.
            std::vector<std::pair<int, int>> valid;  // (obstacle x, contact frame)
            do {
                valid.clear();
                for (int ox = 1; ox < grid; ++ox) {
                    const double stop_x = ox - 0.5;
                    int contact = -1;
                    int inside = 0;
                    for (int k = 0; k < frames; ++k) {
                        const double x = t.freePosition(k).x;
                        if (contact < 0 && x > stop_x) {
                            contact = k;
                        }
                        if (x >= ox && x < ox + 1.0) {
                            ++inside;
                        }
                    }
                    if (contact >= 2 && contact <= frames - 2 && inside >= 2) {
                        valid.emplace_back(ox, contact);
                    }
                }
            } while (valid.empty() && redraw());
            if (valid.empty()) {
                throw ValidationError("grid too small to place obstacle and trajectory");
            }
            const auto [ox, contact] = valid[rng.below(valid.size())];
            t.obstacles.push_back({static_cast<double>(ox), track_top, ox + 1.0, track_bottom});
            const double stop_x = ox - 0.5;
            for (int k = 0; k < frames; ++k) {
                auto& p = t.positions[static_cast<std::size_t>(k)];
                p.x = std::min(p.x, stop_x);
            }
            placeDecorations(t, true, false, rng);
            plan.onset = contact;
            break;
        }
    }

    if (motion == Motion::Left) {
        mirror(t);
    }
    checkInsideGrid(t, "planScene");
    plan.trajectory = std::move(t);
    return plan;
}

Trajectory violate(const Trajectory& traj, Block kind, int onset) {
    const int frames = traj.frames();
    if (traj.violation) {
        throw ValidationError("violate: trajectory already carries a violation");
    }
    if (onset < 1 || onset >= frames - 1) {
        throw ValidationError("violate: onset must lie in [1, T-1)");
    }
    Trajectory out = traj;
    out.violation = Violation{kind, onset};
    auto pos = [&out](int k) -> Point& { return out.positions[static_cast<std::size_t>(k)]; };

    switch (kind) {
        case Block::O1: {
            if (!traj.occluded(onset)) {
                throw ValidationError("violate(O1): onset frame is not inside an occlusion window");
            }
            int last = onset;
            while (last + 1 < frames && traj.occluded(last + 1)) {
                ++last;
            }
            if (last >= frames - 1) {
                throw ValidationError("violate(O1): occlusion lasts until the final frame, no reappearance");
            }
            for (int k = onset; k <= last; ++k) {
                out.present[static_cast<std::size_t>(k)] = false;
            }
            for (int k = last + 1; k < frames; ++k) {
                pos(k).y += kRowJump;
            }
            break;
        }
        case Block::O2: {
            for (int k = onset; k < frames; ++k) {
                pos(k).y -= kRowJump;
            }
            break;
        }
        case Block::O3: {
            for (int k = 0; k < onset; ++k) {
                const Point free = traj.freePosition(k);
                if (std::abs(traj.positions[static_cast<std::size_t>(k)].x - free.x) > 1e-9) {
                    throw ValidationError("violate(O3): onset lies after the object stopped");
                }
            }
            for (int k = onset; k < frames; ++k) {
                pos(k) = traj.freePosition(k);
            }
            int inside = 0;
            for (int k = onset; k < frames; ++k) {
                inside += out.insideObstacle(k) ? 1 : 0;
            }
            if (inside < 2) {
                throw ValidationError("violate(O3): path does not cross an obstacle for two frames");
            }
            break;
        }
    }
    checkInsideGrid(out, "violate");
    if (kind != Block::O3) {
        for (int k = onset; k < frames; ++k) {
            if (out.insideObstacle(k)) {
                throw ValidationError("violate: displaced path runs into an obstacle");
            }
        }
    }
    return out;
}

MatrixXd patchFeatures(const SceneSpec& spec, const Trajectory& traj) {
    spec.validate();
    if (traj.frames() != spec.frames || traj.grid != spec.grid) {
        throw ValidationError("patchFeatures: trajectory does not match the scene spec");
    }
    const int g = spec.grid;
    const int stride = spec.temporal_stride;
    MatrixXd feats = MatrixXd::Zero(spec.tokenCount(), kFeatureCount);

    auto velocity = [&](int k) -> Point {
        const auto f = static_cast<std::size_t>(k);
        if (k >= 1 && traj.present[f - 1]) {
            return {traj.positions[f].x - traj.positions[f - 1].x, traj.positions[f].y - traj.positions[f - 1].y};
        }
        return {traj.direction * traj.speed, 0.0};
    };

    for (int tf = 0; tf < spec.tokenFrames(); ++tf) {
        const int base_frame = tf * stride;
        const Eigen::Index row0 = static_cast<Eigen::Index>(tf) * g * g;
        for (int gy = 0; gy < g; ++gy) {
            for (int gx = 0; gx < g; ++gx) {
                const Eigen::Index r = row0 + gy * g + gx;
                for (const auto& o : traj.obstacles) {
                    if (coversCell(o, gx, gy)) {
                        feats(r, kFeatOccupancy) = 1.0;
                        feats(r, kFeatOccluder) = 1.0;
                    }
                }
                for (const auto& o : traj.occluders) {
                    if (coversCell(o, gx, gy)) {
                        feats(r, kFeatOccluder) = 1.0;
                    }
                }
            }
        }
        if (!traj.present[static_cast<std::size_t>(base_frame)]) {
            continue;
        }
        Point v{0.0, 0.0};
        int samples = 0;
        for (int k = base_frame; k < base_frame + stride; ++k) {
            if (traj.present[static_cast<std::size_t>(k)]) {
                const Point d = velocity(k);
                v.x += d.x;
                v.y += d.y;
                ++samples;
            }
        }
        const Point p = traj.positions[static_cast<std::size_t>(base_frame)];
        const Eigen::Index r = row0 + cellIndex(p.y, g) * g + cellIndex(p.x, g);
        feats(r, kFeatOccupancy) = 1.0;
        feats(r, kFeatVx) = v.x / samples;
        feats(r, kFeatVy) = v.y / samples;
    }
    return feats;
}

TokenEmbedding makeEmbedding(const SceneSpec& spec) {
    spec.validate();
    Rng rng(deriveSeed(spec.seed, "embedding"));
    MatrixXd gauss(spec.embed_dim, kFeatureCount + 1);
    for (Eigen::Index j = 0; j < gauss.cols(); ++j) {
        for (Eigen::Index i = 0; i < gauss.rows(); ++i) {
            gauss(i, j) = rng.normal();
        }
    }
    const Eigen::HouseholderQR<MatrixXd> qr(gauss);
    const MatrixXd q = qr.householderQ() * MatrixXd::Identity(spec.embed_dim, kFeatureCount + 1);
    TokenEmbedding emb;
    emb.weights = spec.embed_scale * q.leftCols(kFeatureCount).transpose();
    emb.bias = spec.embed_scale * q.col(kFeatureCount);
    return emb;
}

Dataset generateDataset(const SceneSpec& spec, int n_pairs_per_block, int threads) {
    spec.validate();
    if (n_pairs_per_block < 1) {
        throw ValidationError("generateDataset: n_pairs_per_block must be >= 1");
    }
    Dataset data;
    data.spec = spec;
    data.embedding = makeEmbedding(spec);

    const auto n_pairs = static_cast<std::size_t>(n_pairs_per_block);
    // Motion labels come from their own stream, balanced within each block,
    // and are shared by both members of a pair: plausibility never enters.
    std::vector<Motion> motions;
    motions.reserve(3 * n_pairs);
    for (Block b : kAllBlocks) {
        Rng rng(deriveSeed(spec.seed, "motion/" + std::string(toString(b))));
        std::vector<Motion> m(n_pairs, Motion::Left);
        for (std::size_t p = 0; p < n_pairs / 2; ++p) {
            m[p] = Motion::Right;
        }
        if (n_pairs % 2 == 1 && rng.below(2) == 1) {
            m[n_pairs / 2] = Motion::Right;
        }
        rng.shuffle(m.begin(), m.end());
        motions.insert(motions.end(), m.begin(), m.end());
    }

    data.videos.resize(6 * n_pairs);
    const Eigen::Index n = spec.tokenCount();
    const Eigen::Index d = spec.embed_dim;
    parallelFor(3 * n_pairs, threads, [&](std::size_t job) {
        const Block block = kAllBlocks[job / n_pairs];
        const int p = static_cast<int>(job % n_pairs);
        const std::string pid = pairId(block, p);
        Rng scene_rng(deriveSeed(spec.seed, pid + "/scene"));
        const ScenePlan plan = planScene(spec, block, motions[job], scene_rng);

        MatrixXd noise(n, d);
        Rng noise_rng(deriveSeed(spec.seed, pid + "/noise"));
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < d; ++j) {
                noise(i, j) = spec.noise_sigma * noise_rng.normal();
            }
        }

        auto make = [&](Trajectory traj, Plausibility plaus) {
            SyntheticVideo v;
            v.meta.id = pid + (plaus == Plausibility::Possible ? "-possible" : "-impossible");
            v.meta.plausibility = plaus;
            v.meta.block = block;
            v.meta.motion = traj.motion();
            v.pair_id = pid;
            v.features = patchFeatures(spec, traj);
            v.tokens = v.features * data.embedding.weights;
            v.tokens.rowwise() += data.embedding.bias.transpose();
            v.tokens += noise;
            v.trajectory = std::move(traj);
            return v;
        };
        data.videos[2 * job] = make(plan.trajectory, Plausibility::Possible);
        data.videos[2 * job + 1] = make(violate(plan.trajectory, block, plan.onset), Plausibility::Impossible);
    });

    if (n_pairs >= 5) {
        std::vector<VideoMeta> metas;
        metas.reserve(data.videos.size());
        for (const auto& v : data.videos) {
            metas.push_back(v.meta);
        }
        const auto splits = splitIndices(metas, {0.6, 0.2, 0.2}, deriveSeed(spec.seed, "split"));
        for (std::size_t i = 0; i < splits.size(); ++i) {
            data.videos[i].meta.split = splits[i];
        }
    }
    return data;
}

ActivationStore toStore(const Dataset& data, nlohmann::ordered_json extras) {
    const Eigen::Index n = data.spec.tokenCount();
    const Eigen::Index d = data.spec.embed_dim;
    const auto nv = static_cast<Eigen::Index>(data.videos.size());
    LayerData ld;
    ld.layer = -1;
    ld.tokens.resize(nv * n, d);
    ld.pooled.resize(nv, d);
    std::vector<VideoMeta> metas;
    metas.reserve(data.videos.size());
    for (Eigen::Index v = 0; v < nv; ++v) {
        const auto& video = data.videos[static_cast<std::size_t>(v)];
        ld.tokens.middleRows(v * n, n) = video.tokens.cast<float>();
        // Pool what is stored, so pooled == mean(tokens) holds on disk.
        const MatrixXd stored = ld.tokens.middleRows(v * n, n).cast<double>();
        ld.pooled.row(v) = meanPool(stored).cast<float>().transpose();
        metas.push_back(video.meta);
    }
    StoreHeader header;
    header.model_id = "synthphys";
    header.num_layers = 0;
    header.token_count = static_cast<int>(n);
    header.dim = static_cast<int>(d);
    header.extras = std::move(extras);
    std::vector<LayerData> layers;
    layers.push_back(std::move(ld));
    return ActivationStore(std::move(header), std::move(metas), std::move(layers));
}

}  // namespace physteer
