// SPDX-License-Identifier: Apache-2.0
#include "tsmoe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "tsmoe/config.hpp"
#include "tsmoe/errors.hpp"

namespace tsmoe {

namespace {

constexpr char kMagic[4] = {'M', 'O', 'E', 'F'};
constexpr std::uint8_t kF32 = 0;
constexpr std::uint8_t kF64 = 1;
const std::string kCentroidPrefix = "gate.centroids.layer";
const std::string kAdamM = "adam.m.";
const std::string kAdamV = "adam.v.";

class Writer {
public:
    explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}
    template <class T>
    void uint(T v) {
        for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(std::uint8_t((std::uint64_t(v) >> (8 * i)) & 0xff));
    }
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }

private:
    std::vector<std::uint8_t>& out_;
};

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}
    void need(std::size_t n) const {
        if (pos_ + n > in_.size()) throw FormatError("truncated file");
    }
    template <class T>
    T uint() {
        need(sizeof(T));
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= std::uint64_t(in_[pos_ + i]) << (8 * i);
        pos_ += sizeof(T);
        return T(v);
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
    float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }
    bool done() const { return pos_ == in_.size(); }

private:
    const std::vector<std::uint8_t>& in_;
    std::size_t pos_ = 0;
};

} // namespace

std::string centroid_tensor_name(std::size_t layer) { return kCentroidPrefix + std::to_string(layer); }

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    std::vector<std::uint8_t> out;
    Writer w(out);
    w.bytes(kMagic, 4);
    w.uint<std::uint32_t>(kCheckpointVersion);
    w.uint<std::uint32_t>(std::uint32_t(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        if (name.size() > 0xffff) throw std::invalid_argument("tensor name too long: " + name);
        if (t.rank() > 0xff) throw std::invalid_argument("tensor rank too large: " + name);
        w.uint<std::uint16_t>(std::uint16_t(name.size()));
        w.bytes(name.data(), name.size());
        w.uint<std::uint8_t>(kF64);
        w.uint<std::uint8_t>(std::uint8_t(t.rank()));
        for (std::size_t d : t.shape()) w.uint<std::uint64_t>(d);
        for (double v : t.values()) w.f64(v);
    }
    const std::string blob = ckpt.meta.dump();
    w.uint<std::uint64_t>(blob.size());
    w.bytes(blob.data(), blob.size());
    return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic");
    r.str(4);
    const auto version = r.uint<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    }
    const auto count = r.uint<std::uint32_t>();
    Checkpoint ckpt;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str(r.uint<std::uint16_t>());
        const auto dtype = r.uint<std::uint8_t>();
        if (dtype != kF32 && dtype != kF64) throw FormatError("unknown dtype code " + std::to_string(dtype) + " for " + name);
        const auto rank = r.uint<std::uint8_t>();
        Shape shape(rank);
        std::size_t n = 1;
        for (auto& d : shape) {
            d = r.uint<std::uint64_t>();
            if (d != 0 && n > (std::size_t(1) << 40) / d) throw FormatError("implausible tensor size for " + name);
            n *= d;
        }
        r.need(n * (dtype == kF64 ? 8 : 4));
        Tensor t(shape, 0.0);
        for (double& v : t.values()) v = dtype == kF64 ? r.f64() : double(r.f32());
        if (!ckpt.tensors.emplace(name, std::move(t)).second) throw FormatError("duplicate tensor " + name);
    }
    const auto blob_size = r.uint<std::uint64_t>();
    const std::string blob = r.str(blob_size);
    if (!r.done()) throw FormatError("trailing bytes after metadata");
    try {
        ckpt.meta = nlohmann::json::parse(blob);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("malformed metadata: ") + e.what());
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const std::vector<std::uint8_t> bytes = encode_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_checkpoint(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

namespace {

nlohmann::json centroid_meta(const std::map<std::size_t, CentroidSet>& centroids) {
    nlohmann::json meta = nlohmann::json::object();
    for (const auto& [layer, cs] : centroids) {
        meta[std::to_string(layer)] = {
            {"checkpoint_id", cs.checkpoint_id}, {"layer", cs.layer}, {"iterations", cs.iterations}, {"seed", cs.seed}};
    }
    return meta;
}

std::map<std::size_t, CentroidSet> read_centroids(const Checkpoint& ckpt) {
    std::map<std::size_t, CentroidSet> out;
    const nlohmann::json meta = ckpt.meta.value("centroids", nlohmann::json::object());
    for (const auto& [name, t] : ckpt.tensors) {
        if (name.rfind(kCentroidPrefix, 0) != 0) continue;
        std::size_t layer = 0;
        try {
            layer = std::stoul(name.substr(kCentroidPrefix.size()));
        } catch (const std::exception&) {
            throw FormatError("bad centroid tensor name " + name);
        }
        if (t.rank() != 2) throw FormatError(name + " must be a matrix");
        CentroidSet cs;
        cs.centroids = t;
        cs.layer = layer;
        const std::string key = std::to_string(layer);
        if (meta.contains(key)) {
            const auto& m = meta.at(key);
            cs.checkpoint_id = m.value("checkpoint_id", std::string());
            cs.iterations = m.value("iterations", std::size_t{0});
            cs.seed = m.value("seed", std::uint64_t{0});
        }
        out.emplace(layer, std::move(cs));
    }
    return out;
}

TrainConfig config_from_meta(const Checkpoint& ckpt) {
    if (!ckpt.meta.contains("train_config")) throw FormatError("checkpoint has no train_config");
    try {
        return train_config_from_json(ckpt.meta.at("train_config"));
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint config: ") + e.what());
    }
}

} // namespace

Checkpoint checkpoint_from_state(const TrainState& state) {
    Checkpoint ckpt;
    for (const auto& [name, t] : state.model.params) ckpt.tensors.emplace(name, t);
    for (const auto& [layer, cs] : state.model.centroids) ckpt.tensors.emplace(centroid_tensor_name(layer), cs.centroids);
    for (const auto& [name, t] : state.optimizer.m) ckpt.tensors.emplace(kAdamM + name, t);
    for (const auto& [name, t] : state.optimizer.v) ckpt.tensors.emplace(kAdamV + name, t);
    ckpt.meta["kind"] = "train-state";
    ckpt.meta["train_config"] = to_json(state.config);
    ckpt.meta["step"] = state.step;
    ckpt.meta["adam_step"] = state.optimizer.step;
    ckpt.meta["rng"] = rng_state(state.rng);
    ckpt.meta["sampler"] = {{"order", state.order}, {"cursor", state.cursor}};
    ckpt.meta["centroids"] = centroid_meta(state.model.centroids);
    return ckpt;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
    Model model;
    model.config = config_from_meta(ckpt).model;
    for (const auto& name : expected_parameter_names(model.config)) {
        auto it = ckpt.tensors.find(name);
        if (it == ckpt.tensors.end()) throw FormatError("checkpoint is missing tensor " + name);
        model.params.emplace(name, it->second);
    }
    model.centroids = read_centroids(ckpt);
    return model;
}

TrainState state_from_checkpoint(const Checkpoint& ckpt) {
    TrainState state;
    state.config = config_from_meta(ckpt);
    state.model = model_from_checkpoint(ckpt);
    for (const auto& [name, t] : ckpt.tensors) {
        if (name.rfind(kAdamM, 0) == 0) state.optimizer.m.emplace(name.substr(kAdamM.size()), t);
        if (name.rfind(kAdamV, 0) == 0) state.optimizer.v.emplace(name.substr(kAdamV.size()), t);
    }
    try {
        state.step = ckpt.meta.at("step").get<std::size_t>();
        state.optimizer.step = ckpt.meta.at("adam_step").get<std::size_t>();
        restore_rng_state(state.rng, ckpt.meta.at("rng").get<std::string>());
        state.order = ckpt.meta.at("sampler").at("order").get<std::vector<std::size_t>>();
        state.cursor = ckpt.meta.at("sampler").at("cursor").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint metadata: ") + e.what());
    }
    return state;
}

Checkpoint checkpoint_from_centroids(const std::map<std::size_t, CentroidSet>& centroids) {
    Checkpoint ckpt;
    for (const auto& [layer, cs] : centroids) ckpt.tensors.emplace(centroid_tensor_name(layer), cs.centroids);
    ckpt.meta["kind"] = "centroids";
    ckpt.meta["centroids"] = centroid_meta(centroids);
    return ckpt;
}

std::map<std::size_t, CentroidSet> centroids_from_checkpoint(const Checkpoint& ckpt) {
    auto out = read_centroids(ckpt);
    if (out.empty()) throw FormatError("file contains no gate.centroids.layer* tensors");
    return out;
}

} // namespace tsmoe
