// SPDX-License-Identifier: Apache-2.0

#pragma once

// Weight persistence: `weights.bin` holds every tensor as little-endian float32,
// concatenated in the order listed by the `weights.json` sidecar.

#include <filesystem>
#include <string>
#include <vector>

#include "sts/binary_io.hpp"
#include "sts/model.hpp"

namespace sts {

inline constexpr int kWeightsFormatVersion = 1;

namespace detail {

struct NamedTensor {
    std::string name;
    std::size_t rows;
    std::size_t cols;
    std::span<float> data;
};

inline std::vector<NamedTensor> weight_views(ModelWeights& w) {
    auto vec = [](std::string name, std::vector<float>& v) { return NamedTensor{std::move(name), 1, v.size(), v}; };
    auto mat = [](std::string name, Tensor2D& t) { return NamedTensor{std::move(name), t.rows(), t.cols(), t.data()}; };
    std::vector<NamedTensor> out;
    out.push_back(mat("token_embedding", w.token_embedding));
    out.push_back(mat("position_embedding", w.position_embedding));
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        auto& lw = w.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        out.push_back(vec(p + "attn_norm", lw.attn_norm));
        out.push_back(mat(p + "wq", lw.wq));
        out.push_back(mat(p + "wk", lw.wk));
        out.push_back(mat(p + "wv", lw.wv));
        out.push_back(mat(p + "wo", lw.wo));
        out.push_back(vec(p + "mlp_norm", lw.mlp_norm));
        out.push_back(mat(p + "w_up", lw.w_up));
        out.push_back(mat(p + "w_down", lw.w_down));
    }
    out.push_back(vec("final_norm", w.final_norm));
    out.push_back(mat("lm_head", w.lm_head));
    return out;
}

}  // namespace detail

inline void save_weights(const ModelWeights& weights, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    ModelWeights copy = weights;
    nlohmann::json tensors = nlohmann::json::array();
    std::vector<unsigned char> blob;
    for (const auto& t : detail::weight_views(copy)) {
        tensors.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"offset", blob.size()}});
        const auto bytes = io::encode_f32le(t.data);
        blob.insert(blob.end(), bytes.begin(), bytes.end());
    }
    nlohmann::json meta{{"format_version", kWeightsFormatVersion},
                        {"config", weights.config},
                        {"dtype", "float32-le"},
                        {"bytes", blob.size()},
                        {"crc32", io::hex32(io::crc32_of(blob))},
                        {"tensors", tensors}};
    io::write_bytes(dir / "weights.bin", blob);
    io::write_text(dir / "weights.json", meta.dump(2) + "\n");
}

inline ModelWeights load_weights(const std::filesystem::path& dir) {
    const auto meta = io::read_json(dir / "weights.json");
    if (meta.value("format_version", -1) != kWeightsFormatVersion)
        throw LoadError(LoadErrorKind::UnsupportedVersion, "unsupported version in " + (dir / "weights.json").string());
    const ModelConfig cfg = meta.at("config").get<ModelConfig>();
    ModelWeights w = init_model(cfg);  // allocates shapes; contents overwritten below
    const auto blob = io::read_bytes(dir / "weights.bin");
    if (blob.size() != meta.at("bytes").get<std::size_t>())
        throw LoadError(LoadErrorKind::TruncatedBlob, "blob size mismatch in " + (dir / "weights.bin").string());
    if (io::hex32(io::crc32_of(blob)) != meta.at("crc32").get<std::string>())
        throw LoadError(LoadErrorKind::ChecksumMismatch, "checksum mismatch in " + (dir / "weights.bin").string());
    std::size_t off = 0;
    for (auto& t : detail::weight_views(w)) {
        const std::size_t n = t.data.size() * 4;
        if (off + n > blob.size())
            throw LoadError(LoadErrorKind::TruncatedBlob, "tensor " + t.name + " runs past end of weights.bin");
        const auto vals = io::decode_f32le(std::span(blob).subspan(off, n));
        std::copy(vals.begin(), vals.end(), t.data.begin());
        off += n;
    }
    return w;
}

}  // namespace sts
