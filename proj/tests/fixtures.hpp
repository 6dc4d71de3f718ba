#pragma once

#include "physteer/encoder.hpp"
#include "physteer/evalkit.hpp"
#include "physteer/probekit.hpp"
#include "physteer/synthphys.hpp"

#include <filesystem>
#include <string>

#include <unistd.h>

namespace testing {

// Small but complete synthetic setup shared by the module tests.
inline physteer::SceneSpec smallSpec(std::uint64_t seed = 11) {
    physteer::SceneSpec s;
    s.frames = 12;
    s.grid = 8;
    s.seed = seed;
    s.embed_dim = 16;
    return s;
}

inline physteer::EncoderConfig smallEncoder(std::uint64_t seed = 5, int layers = 4) {
    physteer::EncoderConfig c;
    c.layers = layers;
    c.dim = 16;
    c.heads = 4;
    c.init_seed = seed;
    return c;
}

inline physteer::MatrixXd randomMatrix(int rows, int cols, std::uint64_t seed) {
    physteer::Rng rng(seed);
    physteer::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
            m(i, j) = rng.normal();
        }
    }
    return m;
}

inline physteer::VectorXd randomUnit(int dim, std::uint64_t seed) {
    physteer::VectorXd v = randomMatrix(dim, 1, seed).col(0);
    return v / v.norm();
}

// Dataset, raw store, encoder and encoded store for the steering tests.
struct SmallPipeline {
    physteer::Dataset data;
    physteer::ActivationStore raw;
    physteer::Encoder enc;
    physteer::ActivationStore acts;

    explicit SmallPipeline(int pairs = 10, std::uint64_t seed = 11)
        : data(physteer::generateDataset(smallSpec(seed), pairs)),
          raw(physteer::toStore(data)),
          enc(smallEncoder()),
          acts(physteer::encodeStore(enc, raw, {})) {}

    std::vector<std::size_t> rows(physteer::Split s) const {
        return acts.indicesWhere([s](const physteer::VideoMeta& v) { return v.split == s; });
    }

    physteer::Probe probeAt(int layer) const {
        const auto [X, y] = physteer::trainValData(acts, layer, physteer::ProbeTask::Plausibility);
        physteer::Probe p = physteer::trainProbe(X, y);
        return p;
    }
};

class TempDir {
  public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("physteer-test-" + tag + "-" + std::to_string(::getpid()));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

  private:
    std::filesystem::path path_;
};

}  // namespace testing
