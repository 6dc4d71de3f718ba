#include "physteer/actstore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace physteer {

namespace fs = std::filesystem;

namespace {

constexpr int kDumpVersion = 1;
constexpr double kPoolTolerance = 1e-6;

template <typename Enum, std::size_t N>
Enum parseEnum(std::string_view s, const std::array<std::string_view, N>& names, std::string_view what) {
    for (std::size_t i = 0; i < N; ++i) {
        if (names[i] == s) {
            return static_cast<Enum>(i);
        }
    }
    throw ValidationError("unknown " + std::string(what) + " '" + std::string(s) + "'");
}

constexpr std::array<std::string_view, 3> kBlockNames{"O1", "O2", "O3"};
constexpr std::array<std::string_view, 2> kMotionNames{"left", "right"};
constexpr std::array<std::string_view, 3> kSplitNames{"train", "val", "test"};

std::uint32_t byteswap32(std::uint32_t x) {
    return (x >> 24) | ((x >> 8) & 0xff00U) | ((x << 8) & 0xff0000U) | (x << 24);
}

void toLittleEndianInPlace(std::span<float> values) {
    if constexpr (std::endian::native == std::endian::big) {
        for (auto& v : values) {
            v = std::bit_cast<float>(byteswap32(std::bit_cast<std::uint32_t>(v)));
        }
    }
}

std::uintmax_t fileSize(const fs::path& path) {
    std::error_code ec;
    const auto size = fs::file_size(path, ec);
    if (ec) {
        throw IoError("cannot stat " + path.string() + ": " + ec.message());
    }
    return size;
}

void readInto(const fs::path& path, float* dst, std::size_t count) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(count * sizeof(float)));
    if (!in) {
        throw IoError("short read from " + path.string());
    }
    toLittleEndianInPlace(std::span<float>(dst, count));
}

void writeBytes(const fs::path& path, const float* src, std::size_t count) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    if constexpr (std::endian::native == std::endian::big) {
        std::vector<float> tmp(src, src + count);
        toLittleEndianInPlace(tmp);
        out.write(reinterpret_cast<const char*>(tmp.data()), static_cast<std::streamsize>(count * sizeof(float)));
    } else {
        out.write(reinterpret_cast<const char*>(src), static_cast<std::streamsize>(count * sizeof(float)));
    }
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

void checkSize(const fs::path& path, std::uintmax_t expected, std::string_view shape) {
    const auto actual = fileSize(path);
    if (actual != expected) {
        std::ostringstream msg;
        msg << "size mismatch for " << path.filename().string() << ": expected " << expected << " bytes ("
            << shape << " x 4), found " << actual;
        throw ValidationError(msg.str());
    }
}

}  // namespace

std::string_view toString(Block b) { return kBlockNames.at(static_cast<std::size_t>(b)); }
std::string_view toString(Motion m) { return kMotionNames.at(static_cast<std::size_t>(m)); }
std::string_view toString(Split s) { return kSplitNames.at(static_cast<std::size_t>(s)); }
Block parseBlock(std::string_view s) { return parseEnum<Block>(s, kBlockNames, "block"); }
Motion parseMotion(std::string_view s) { return parseEnum<Motion>(s, kMotionNames, "motion"); }
Split parseSplit(std::string_view s) { return parseEnum<Split>(s, kSplitNames, "split"); }

VectorXd meanPool(const Eigen::Ref<const MatrixXd>& tokens) {
    if (tokens.rows() == 0) {
        throw ValidationError("meanPool: empty sequence");
    }
    VectorXd sum = VectorXd::Zero(tokens.cols());
    for (Eigen::Index i = 0; i < tokens.rows(); ++i) {
        for (Eigen::Index j = 0; j < tokens.cols(); ++j) {
            sum[j] += tokens(i, j);
        }
    }
    return sum / static_cast<double>(tokens.rows());
}

ActivationStore::ActivationStore(StoreHeader header, std::vector<VideoMeta> videos, std::vector<LayerData> layers)
    : header_(std::move(header)), videos_(std::move(videos)), layers_(std::move(layers)) {
    if (header_.token_count < 1 || header_.dim < 1 || header_.num_layers < 0) {
        throw ValidationError("store header: token_count and dim must be positive, num_layers non-negative");
    }
    if (header_.extras.is_null()) {
        header_.extras = nlohmann::ordered_json::object();
    }
    if (!header_.extras.is_object()) {
        throw ValidationError("store header: extras must be a JSON object");
    }
    std::set<std::string_view> ids;
    for (const auto& v : videos_) {
        if (v.id.empty()) {
            throw ValidationError("video with empty id");
        }
        if (!ids.insert(v.id).second) {
            throw ValidationError("duplicate video id '" + v.id + "'");
        }
    }
    const auto num_videos = static_cast<Eigen::Index>(videos_.size());
    const Eigen::Index n_tok = header_.token_count;
    const Eigen::Index dim = header_.dim;
    std::set<int> seen;
    for (const auto& ld : layers_) {
        const std::string where = "layer " + std::to_string(ld.layer);
        if (ld.layer < -1 || ld.layer >= header_.num_layers) {
            throw ValidationError(where + " outside [-1, num_layers)");
        }
        if (!seen.insert(ld.layer).second) {
            throw ValidationError("duplicate " + where);
        }
        if (ld.pooled.rows() != num_videos || ld.pooled.cols() != dim) {
            throw ValidationError(where + ": pooled shape does not match num_videos x dim");
        }
        if (ld.hasTokens() && (ld.tokens.rows() != num_videos * n_tok || ld.tokens.cols() != dim)) {
            throw ValidationError(where + ": token shape does not match num_videos x N x dim");
        }
        for (Eigen::Index r = 0; r < ld.pooled.rows(); ++r) {
            for (Eigen::Index c = 0; c < dim; ++c) {
                if (!std::isfinite(ld.pooled(r, c))) {
                    throw ValidationError("non-finite pooled value at " + where + ", video '" +
                                          videos_[static_cast<std::size_t>(r)].id + "', dim " + std::to_string(c));
                }
            }
        }
        if (!ld.hasTokens()) {
            continue;
        }
        for (Eigen::Index v = 0; v < num_videos; ++v) {
            VectorXd sum = VectorXd::Zero(dim);
            for (Eigen::Index i = 0; i < n_tok; ++i) {
                for (Eigen::Index c = 0; c < dim; ++c) {
                    const float x = ld.tokens(v * n_tok + i, c);
                    if (!std::isfinite(x)) {
                        throw ValidationError("non-finite token value at " + where + ", video '" +
                                              videos_[static_cast<std::size_t>(v)].id + "', token " +
                                              std::to_string(i) + ", dim " + std::to_string(c));
                    }
                    sum[c] += x;
                }
            }
            const VectorXd mean = sum / static_cast<double>(n_tok);
            const VectorXd stored = ld.pooled.row(v).cast<double>().transpose();
            const double scale = std::max(mean.lpNorm<Eigen::Infinity>(), 1e-30);
            const double err = (mean - stored).lpNorm<Eigen::Infinity>() / scale;
            if (err > kPoolTolerance) {
                throw ValidationError(where + ", video '" + videos_[static_cast<std::size_t>(v)].id +
                                      "': pooled vector differs from token mean (relative error " +
                                      std::to_string(err) + ")");
            }
        }
    }
    std::sort(layers_.begin(), layers_.end(), [](const LayerData& a, const LayerData& b) { return a.layer < b.layer; });
}

std::optional<std::string> ActivationStore::configHash() const {
    if (header_.extras.contains("config_hash") && header_.extras["config_hash"].is_string()) {
        return header_.extras["config_hash"].get<std::string>();
    }
    return std::nullopt;
}

std::vector<int> ActivationStore::layerIndices() const {
    std::vector<int> out;
    out.reserve(layers_.size());
    for (const auto& ld : layers_) {
        out.push_back(ld.layer);
    }
    return out;
}

bool ActivationStore::hasLayer(int layer) const {
    return std::any_of(layers_.begin(), layers_.end(), [&](const LayerData& ld) { return ld.layer == layer; });
}

const LayerData& ActivationStore::layer(int layer) const {
    for (const auto& ld : layers_) {
        if (ld.layer == layer) {
            return ld;
        }
    }
    throw ValidationError("store has no layer " + std::to_string(layer));
}

std::size_t ActivationStore::indexOf(std::string_view id) const {
    for (std::size_t i = 0; i < videos_.size(); ++i) {
        if (videos_[i].id == id) {
            return i;
        }
    }
    throw ValidationError("unknown video id '" + std::string(id) + "'");
}

std::vector<std::size_t> ActivationStore::indicesWhere(const std::function<bool(const VideoMeta&)>& pred) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < videos_.size(); ++i) {
        if (pred(videos_[i])) {
            out.push_back(i);
        }
    }
    return out;
}

MatrixXd ActivationStore::pooled(int layer_index, std::span<const std::size_t> rows) const {
    const auto& ld = layer(layer_index);
    MatrixXd out(static_cast<Eigen::Index>(rows.size()), header_.dim);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        out.row(static_cast<Eigen::Index>(r)) = ld.pooled.row(static_cast<Eigen::Index>(rows[r])).cast<double>();
    }
    return out;
}

MatrixXd ActivationStore::pooled(int layer_index) const {
    return layer(layer_index).pooled.cast<double>();
}

MatrixXd ActivationStore::tokens(std::size_t video, int layer_index) const {
    const auto& ld = layer(layer_index);
    if (!ld.hasTokens()) {
        throw ValidationError("store has no token file for layer " + std::to_string(layer_index));
    }
    const Eigen::Index n = header_.token_count;
    return ld.tokens.middleRows(static_cast<Eigen::Index>(video) * n, n).cast<double>();
}

LayerActivations ActivationStore::activation(std::size_t video, int layer_index) const {
    const auto& ld = layer(layer_index);
    LayerActivations out;
    out.layer = layer_index;
    out.pooled = ld.pooled.row(static_cast<Eigen::Index>(video)).cast<double>().transpose();
    if (ld.hasTokens()) {
        out.tokens = tokens(video, layer_index);
    }
    return out;
}

ActivationStore ActivationStore::withSplits(std::span<const Split> splits) const {
    if (splits.size() != videos_.size()) {
        throw ValidationError("withSplits: one split per video required");
    }
    auto videos = videos_;
    for (std::size_t i = 0; i < videos.size(); ++i) {
        videos[i].split = splits[i];
    }
    return ActivationStore(header_, std::move(videos), layers_);
}

bool ActivationStore::operator==(const ActivationStore& other) const {
    if (header_.model_id != other.header_.model_id || header_.num_layers != other.header_.num_layers ||
        header_.token_count != other.header_.token_count || header_.dim != other.header_.dim ||
        header_.extras != other.header_.extras || videos_ != other.videos_ || layers_.size() != other.layers_.size()) {
        return false;
    }
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& a = layers_[i];
        const auto& b = other.layers_[i];
        if (a.layer != b.layer || a.pooled.rows() != b.pooled.rows() || a.tokens.rows() != b.tokens.rows()) {
            return false;
        }
        // Bitwise comparison: NaN-free by construction, and -0.0 != 0.0 is intended here.
        if (std::memcmp(a.pooled.data(), b.pooled.data(), sizeof(float) * static_cast<std::size_t>(a.pooled.size())) != 0 ||
            std::memcmp(a.tokens.data(), b.tokens.data(), sizeof(float) * static_cast<std::size_t>(a.tokens.size())) != 0) {
            return false;
        }
    }
    return true;
}

std::string pooledFileName(int layer) { return "pooled_l" + std::to_string(layer) + ".f32"; }
std::string tokensFileName(int layer) { return "tokens_l" + std::to_string(layer) + ".f32"; }

void writeF32(const fs::path& path, std::span<const float> values) {
    writeBytes(path, values.data(), values.size());
}

std::vector<float> readF32(const fs::path& path, std::size_t expected_count) {
    if (!fs::exists(path)) {
        throw IoError("missing file " + path.string());
    }
    checkSize(path, expected_count * sizeof(float), std::to_string(expected_count));
    std::vector<float> out(expected_count);
    readInto(path, out.data(), expected_count);
    return out;
}

void writeVectorF32(const fs::path& path, const VectorXd& v) {
    const Eigen::VectorXf f = v.cast<float>();
    writeF32(path, std::span<const float>(f.data(), static_cast<std::size_t>(f.size())));
}

VectorXd readVectorF32(const fs::path& path, std::size_t expected_count) {
    const auto raw = readF32(path, expected_count);
    VectorXd out(static_cast<Eigen::Index>(expected_count));
    for (std::size_t i = 0; i < expected_count; ++i) {
        if (!std::isfinite(raw[i])) {
            throw ValidationError("non-finite value in " + path.string() + " at index " + std::to_string(i));
        }
        out[static_cast<Eigen::Index>(i)] = raw[i];
    }
    return out;
}

nlohmann::ordered_json readJsonFile(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    try {
        return nlohmann::ordered_json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

void writeTextFileAtomic(const fs::path& path, std::string_view text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot write " + tmp.string());
        }
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!out) {
            throw IoError("write failed for " + tmp.string());
        }
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
    }
}

void writeDump(const ActivationStore& store, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) {
        throw IoError("cannot create dump directory " + dir.string());
    }
    // A stale manifest would describe files we are about to replace.
    fs::remove(dir / "manifest.json", ec);

    nlohmann::ordered_json layers = nlohmann::ordered_json::array();
    for (int l : store.layerIndices()) {
        const auto& ld = store.layer(l);
        writeBytes(dir / pooledFileName(l), ld.pooled.data(), static_cast<std::size_t>(ld.pooled.size()));
        const fs::path tok = dir / tokensFileName(l);
        if (ld.hasTokens()) {
            writeBytes(tok, ld.tokens.data(), static_cast<std::size_t>(ld.tokens.size()));
        } else {
            fs::remove(tok, ec);
        }
        layers.push_back(l);
    }

    nlohmann::ordered_json videos = nlohmann::ordered_json::array();
    for (const auto& v : store.videos()) {
        videos.push_back({{"id", v.id},
                          {"plausibility", static_cast<int>(v.plausibility)},
                          {"block", toString(v.block)},
                          {"motion", toString(v.motion)},
                          {"split", toString(v.split)}});
    }
    nlohmann::ordered_json manifest = {{"version", kDumpVersion},
                                       {"model_id", store.modelId()},
                                       {"num_layers", store.numLayers()},
                                       {"token_count", store.tokenCount()},
                                       {"dim", store.dim()},
                                       {"pooling", "mean"},
                                       {"layers", layers},
                                       {"videos", videos}};
    for (const auto& [key, value] : store.header().extras.items()) {
        manifest[key] = value;
    }
    // Manifest last: a dump without one is incomplete by definition.
    writeTextFileAtomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

namespace {

template <typename T>
T requireField(const nlohmann::ordered_json& j, const char* key) {
    if (!j.contains(key)) {
        throw ValidationError(std::string("manifest: missing field '") + key + "'");
    }
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ValidationError(std::string("manifest: field '") + key + "' has the wrong type");
    }
}

}  // namespace

ActivationStore readDump(const fs::path& dir) {
    const fs::path manifest_path = dir / "manifest.json";
    if (!fs::exists(manifest_path)) {
        throw IoError("no manifest.json in " + dir.string());
    }
    const auto manifest = readJsonFile(manifest_path);
    const int version = requireField<int>(manifest, "version");
    if (version != kDumpVersion) {
        throw ValidationError("unsupported dump version " + std::to_string(version));
    }
    if (manifest.contains("pooling") && manifest["pooling"] != "mean") {
        throw ValidationError("unsupported pooling '" + manifest["pooling"].dump() + "'");
    }
    StoreHeader header;
    header.model_id = requireField<std::string>(manifest, "model_id");
    header.num_layers = requireField<int>(manifest, "num_layers");
    header.token_count = requireField<int>(manifest, "token_count");
    header.dim = requireField<int>(manifest, "dim");
    static const std::set<std::string> known{"version", "model_id", "num_layers", "token_count",
                                             "dim",     "pooling",  "layers",     "videos"};
    for (const auto& [key, value] : manifest.items()) {
        if (!known.contains(key)) {
            header.extras[key] = value;
        }
    }

    std::vector<VideoMeta> videos;
    for (const auto& jv : requireField<nlohmann::ordered_json>(manifest, "videos")) {
        VideoMeta v;
        v.id = requireField<std::string>(jv, "id");
        const int p = requireField<int>(jv, "plausibility");
        if (p != 0 && p != 1) {
            throw ValidationError("video '" + v.id + "': plausibility must be 0 or 1");
        }
        v.plausibility = static_cast<Plausibility>(p);
        v.block = parseBlock(requireField<std::string>(jv, "block"));
        v.motion = parseMotion(requireField<std::string>(jv, "motion"));
        v.split = parseSplit(requireField<std::string>(jv, "split"));
        videos.push_back(std::move(v));
    }
    if (header.token_count < 1 || header.dim < 1) {
        throw ValidationError("manifest: token_count and dim must be positive");
    }

    const auto nv = static_cast<Eigen::Index>(videos.size());
    const Eigen::Index n = header.token_count;
    const Eigen::Index d = header.dim;
    std::vector<LayerData> layers;
    for (int l : requireField<std::vector<int>>(manifest, "layers")) {
        LayerData ld;
        ld.layer = l;
        const fs::path pooled_path = dir / pooledFileName(l);
        if (!fs::exists(pooled_path)) {
            throw IoError("missing layer file " + pooled_path.filename().string());
        }
        checkSize(pooled_path, static_cast<std::uintmax_t>(nv * d) * sizeof(float),
                  std::to_string(nv) + " x " + std::to_string(d));
        ld.pooled.resize(nv, d);
        readInto(pooled_path, ld.pooled.data(), static_cast<std::size_t>(nv * d));
        const fs::path tok_path = dir / tokensFileName(l);
        if (fs::exists(tok_path)) {
            checkSize(tok_path, static_cast<std::uintmax_t>(nv * n * d) * sizeof(float),
                      std::to_string(nv) + " x " + std::to_string(n) + " x " + std::to_string(d));
            ld.tokens.resize(nv * n, d);
            readInto(tok_path, ld.tokens.data(), static_cast<std::size_t>(nv * n * d));
        }
        layers.push_back(std::move(ld));
    }
    return ActivationStore(std::move(header), std::move(videos), std::move(layers));
}

std::vector<Split> splitIndices(std::span<const VideoMeta> videos, std::array<double, 3> fractions,
                                std::uint64_t seed) {
    double total = 0.0;
    for (double f : fractions) {
        if (!(f >= 0.0) || !std::isfinite(f)) {
            throw ValidationError("split fractions must be finite and non-negative");
        }
        total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw ValidationError("split fractions must sum to 1");
    }

    std::map<std::pair<int, int>, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < videos.size(); ++i) {
        strata[{static_cast<int>(videos[i].plausibility), static_cast<int>(videos[i].block)}].push_back(i);
    }

    std::vector<Split> out(videos.size(), Split::Train);
    for (auto& [key, members] : strata) {
        const std::size_t n = members.size();
        if (n < 5) {
            throw ValidationError("cannot stratify: stratum (plausibility=" + std::to_string(key.first) + ", block=" +
                                  std::string(toString(static_cast<Block>(key.second))) + ") has only " +
                                  std::to_string(n) + " videos");
        }
        Rng rng(deriveSeed(seed, "split/" + std::to_string(key.first) + "/" + std::to_string(key.second)));
        rng.shuffle(members.begin(), members.end());

        std::array<std::size_t, 3> counts{};
        std::array<double, 3> remainders{};
        std::size_t assigned = 0;
        for (std::size_t s = 0; s < 3; ++s) {
            const double exact = fractions[s] * static_cast<double>(n);
            counts[s] = static_cast<std::size_t>(std::floor(exact + 1e-9));
            remainders[s] = exact - static_cast<double>(counts[s]);
            assigned += counts[s];
        }
        std::array<std::size_t, 3> order{0, 1, 2};
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return remainders[a] > remainders[b]; });
        for (std::size_t k = 0; assigned < n; ++k, ++assigned) {
            ++counts[order[k % 3]];
        }

        std::size_t pos = 0;
        for (std::size_t s = 0; s < 3; ++s) {
            for (std::size_t c = 0; c < counts[s]; ++c) {
                out[members[pos++]] = static_cast<Split>(s);
            }
        }
    }
    return out;
}

}  // namespace physteer
