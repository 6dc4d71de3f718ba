#include "physteer/actstore.hpp"

#include "fixtures.hpp"

#include <doctest.h>

#include <fstream>
#include <iterator>

using namespace physteer;
using testing::TempDir;

namespace {

std::vector<VideoMeta> makeVideos(int per_stratum) {
    std::vector<VideoMeta> out;
    for (int b = 0; b < 3; ++b) {
        for (int p = 0; p < 2; ++p) {
            for (int i = 0; i < per_stratum; ++i) {
                VideoMeta v;
                v.id = "b" + std::to_string(b) + "p" + std::to_string(p) + "-" + std::to_string(i);
                v.block = static_cast<Block>(b);
                v.plausibility = static_cast<Plausibility>(p);
                v.motion = i % 2 ? Motion::Left : Motion::Right;
                out.push_back(v);
            }
        }
    }
    return out;
}

ActivationStore randomStore(std::uint64_t seed, bool with_tokens) {
    Rng rng(seed);
    StoreHeader h;
    h.model_id = "test";
    h.num_layers = 2;
    h.token_count = 3;
    h.dim = 5;
    auto videos = makeVideos(1);
    const int nv = static_cast<int>(videos.size());
    std::vector<LayerData> layers;
    for (int l = -1; l < 2; ++l) {
        LayerData d;
        d.layer = l;
        d.pooled.resize(nv, h.dim);
        if (with_tokens && l == -1) {
            d.tokens.resize(nv * h.token_count, h.dim);
            for (Eigen::Index i = 0; i < d.tokens.size(); ++i) {
                d.tokens.data()[i] = static_cast<float>(rng.normal());
            }
            for (int v = 0; v < nv; ++v) {
                const MatrixXd t = d.tokens.middleRows(v * h.token_count, h.token_count).cast<double>();
                d.pooled.row(v) = meanPool(t).transpose().cast<float>();
            }
        } else {
            for (Eigen::Index i = 0; i < d.pooled.size(); ++i) {
                d.pooled.data()[i] = static_cast<float>(rng.normal());
            }
        }
        layers.push_back(std::move(d));
    }
    return ActivationStore(h, videos, layers);
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_SUITE("actstore") {

TEST_CASE("meanPool small cases") {
    MatrixXd t(2, 2);
    t << 1, 3, 3, 1;
    CHECK(meanPool(t) == VectorXd::Constant(2, 2.0));
    MatrixXd r(1, 3);
    r << 0.5, -2, 7;
    CHECK(meanPool(r) == r.row(0).transpose());
}

TEST_CASE("meanPool matches a loop re-summation exactly") {
    const MatrixXd t = testing::randomMatrix(7, 5, 3);
    const VectorXd m = meanPool(t);
    for (int j = 0; j < 5; ++j) {
        double s = 0.0;
        for (int i = 0; i < 7; ++i) {
            s += t(i, j);
        }
        CHECK(m(j) == s / 7.0);
    }
}

TEST_CASE("meanPool linearity under a constant row shift") {
    const MatrixXd a = testing::randomMatrix(9, 4, 4);
    const VectorXd v = testing::randomMatrix(4, 1, 5).col(0);
    const double c = 2.5;
    const MatrixXd shifted = a.rowwise() + (c * v).transpose();
    CHECK((meanPool(shifted) - (meanPool(a) + c * v)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("dump round trip is bit exact") {
    TempDir tmp("rt");
    const ActivationStore s = randomStore(1, true);
    writeDump(s, tmp.path() / "a");
    const ActivationStore back = readDump(tmp.path() / "a");
    CHECK(back == s);
    writeDump(back, tmp.path() / "b");
    for (const char* f : {"manifest.json", "pooled_l-1.f32", "tokens_l-1.f32", "pooled_l0.f32", "pooled_l1.f32"}) {
        CAPTURE(f);
        CHECK(slurp(tmp.path() / "a" / f) == slurp(tmp.path() / "b" / f));
    }
}

TEST_CASE("manifest layout") {
    TempDir tmp("manifest");
    writeDump(randomStore(2, false), tmp.path());
    const auto m = readJsonFile(tmp.path() / "manifest.json");
    CHECK(m["version"] == 1);
    CHECK(m["pooling"] == "mean");
    CHECK(m["dim"] == 5);
    CHECK(m["layers"].size() == 3);
    CHECK(m["videos"][0]["block"] == "O1");
    CHECK(m["videos"][0]["motion"] == "right");
    CHECK(m["videos"][0]["split"] == "train");
}

TEST_CASE("wrong file length is rejected") {
    TempDir tmp("short");
    writeDump(randomStore(3, false), tmp.path());
    {
        std::ofstream out(tmp.path() / "pooled_l0.f32", std::ios::binary | std::ios::app);
        out.put('x');
    }
    CHECK_THROWS_WITH_AS(readDump(tmp.path()), doctest::Contains("size"), ValidationError);
}

TEST_CASE("missing manifest is an io error") {
    TempDir tmp("empty");
    CHECK_THROWS_AS(readDump(tmp.path()), IoError);
}

TEST_CASE("token files are checked against pooled") {
    TempDir tmp("tok");
    const ActivationStore s = randomStore(4, true);
    writeDump(s, tmp.path());
    const auto back = readDump(tmp.path());
    for (std::size_t v = 0; v < back.numVideos(); ++v) {
        const VectorXd recomputed = meanPool(back.tokens(v, -1));
        const VectorXd stored = back.pooled(-1).row(static_cast<Eigen::Index>(v)).transpose();
        CHECK((recomputed - stored).cwiseAbs().maxCoeff() <= 1e-6 * std::max(1.0, stored.cwiseAbs().maxCoeff()));
    }
    // Corrupt one pooled value.
    std::vector<float> pooled = readF32(tmp.path() / "pooled_l-1.f32", back.numVideos() * 5);
    pooled[0] += 0.5f;
    writeF32(tmp.path() / "pooled_l-1.f32", pooled);
    CHECK_THROWS_AS(readDump(tmp.path()), ValidationError);
}

TEST_CASE("store invariants") {
    auto videos = makeVideos(1);
    videos[1].id = videos[0].id;
    StoreHeader h;
    h.num_layers = 0;
    h.token_count = 1;
    h.dim = 2;
    LayerData d;
    d.layer = -1;
    d.pooled = RowMatrixF::Zero(static_cast<Eigen::Index>(videos.size()), 2);
    CHECK_THROWS_AS(ActivationStore(h, videos, {d}), ValidationError);
    videos = makeVideos(1);
    d.pooled(0, 0) = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(ActivationStore(h, videos, {d}), ValidationError);
    d.pooled(0, 0) = 0;
    d.layer = 3;
    CHECK_THROWS_AS(ActivationStore(h, videos, {d}), ValidationError);
}

TEST_CASE("split counts for 360 videos") {
    const auto videos = makeVideos(60);
    const auto s = splitIndices(videos, {0.6, 0.2, 0.2}, 7);
    CHECK(std::count(s.begin(), s.end(), Split::Train) == 216);
    CHECK(std::count(s.begin(), s.end(), Split::Val) == 72);
    CHECK(std::count(s.begin(), s.end(), Split::Test) == 72);
}

TEST_CASE("split assignment is stratified and seed dependent") {
    const auto videos = makeVideos(13);
    const std::array<double, 3> fr{0.6, 0.2, 0.2};
    const auto a = splitIndices(videos, fr, 1);
    const auto b = splitIndices(videos, fr, 2);
    CHECK(a != b);
    for (int stratum = 0; stratum < 6; ++stratum) {
        for (int sp = 0; sp < 3; ++sp) {
            int ca = 0;
            int cb = 0;
            for (int i = 0; i < 13; ++i) {
                const std::size_t idx = static_cast<std::size_t>(stratum * 13 + i);
                ca += a[idx] == static_cast<Split>(sp);
                cb += b[idx] == static_cast<Split>(sp);
            }
            CHECK(ca == cb);
            CHECK(std::abs(ca - fr[static_cast<std::size_t>(sp)] * 13) <= 1.0);
        }
    }
}

TEST_CASE("single stratum, all train") {
    auto videos = makeVideos(5);
    videos.resize(5);
    const auto s = splitIndices(videos, {1.0, 0.0, 0.0}, 3);
    CHECK(std::count(s.begin(), s.end(), Split::Train) == 5);
}

TEST_CASE("extras survive the round trip") {
    TempDir tmp("extras");
    const ActivationStore s = randomStore(5, false);
    StoreHeader h = s.header();
    h.extras["config_hash"] = "abc";
    h.extras["notes"] = {{"k", 1}};
    std::vector<LayerData> layers;
    for (int l : s.layerIndices()) {
        layers.push_back(s.layer(l));
    }
    writeDump(ActivationStore(h, s.videos(), layers), tmp.path());
    const auto back = readDump(tmp.path());
    CHECK(back.configHash() == std::optional<std::string>("abc"));
    CHECK(back.header().extras["notes"]["k"] == 1);
}

}
