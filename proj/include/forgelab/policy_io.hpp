#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "forgelab/policy.hpp"

namespace forgelab {

// Checkpoint container: magic "TVLA", u16 version, u32 header length, JSON
// header, then per-path little-endian float32 payloads in lexicographic path
// order. The "created" field is left empty so identical runs produce
// byte-identical files.
constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointMeta {
    std::string kind = "model";  // "model" or "adapters"
    std::string method;
    std::string config_hash;
    std::string data_hash;
    std::string created;
    std::uint64_t seed = 0;
};

namespace ckpt_detail {

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
    std::uint32_t bits = 0;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

inline std::uint16_t get_u16(const std::string& in, std::size_t at) {
    return static_cast<std::uint16_t>(static_cast<unsigned char>(in[at]) |
                                      (static_cast<unsigned char>(in[at + 1]) << 8));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + static_cast<std::size_t>(i)])) << (8 * i);
    return v;
}

inline float get_f32(const std::string& in, std::size_t at) {
    const std::uint32_t bits = get_u32(in, at);
    float v = 0.0f;
    std::memcpy(&v, &bits, 4);
    return v;
}

inline nlohmann::json config_to_json(const PolicyConfig& cfg) {
    return nlohmann::json{{"grid_n", cfg.grid_n},
                          {"colors", cfg.colors},
                          {"shapes", cfg.shapes},
                          {"d_model", cfg.d_model},
                          {"n_heads", cfg.n_heads},
                          {"vision_blocks", cfg.vision_blocks},
                          {"lm_blocks", cfg.lm_blocks},
                          {"instr_vocab", cfg.instr_vocab},
                          {"action_vocab", cfg.action_vocab},
                          {"max_action_len", cfg.max_action_len}};
}

inline PolicyConfig config_from_json(const nlohmann::json& j) {
    PolicyConfig cfg;
    cfg.grid_n = j.at("grid_n").get<int>();
    cfg.colors = j.at("colors").get<std::vector<std::string>>();
    cfg.shapes = j.at("shapes").get<std::vector<std::string>>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.vision_blocks = j.at("vision_blocks").get<int>();
    cfg.lm_blocks = j.at("lm_blocks").get<int>();
    cfg.instr_vocab = j.at("instr_vocab").get<int>();
    cfg.action_vocab = j.at("action_vocab").get<int>();
    cfg.max_action_len = j.at("max_action_len").get<int>();
    return cfg;
}

}  // namespace ckpt_detail

template <typename S>
void save_checkpoint(const TinyVlaPolicy<S>& policy, const std::string& path,
                     const CheckpointMeta& meta = {}) {
    using nlohmann::json;
    json tags = json::object();
    for (const auto& [p, e] : policy.params()) {
        tags[p] = {{"component", component_tag(e.component)},
                   {"layer", e.layer},
                   {"weight", e.is_weight},
                   {"embedding", e.is_embedding},
                   {"rows", e.tensor.rows()},
                   {"cols", e.tensor.cols()}};
    }
    json header = {{"config", ckpt_detail::config_to_json(policy.config())},
                   {"seed", policy.seed()},
                   {"tags", tags},
                   {"kind", meta.kind},
                   {"method", meta.method},
                   {"config_hash", meta.config_hash},
                   {"data_hash", meta.data_hash},
                   {"created", meta.created}};
    const std::string header_str = header.dump();

    std::string out;
    out += "TVLA";
    ckpt_detail::put_u16(out, kCheckpointVersion);
    ckpt_detail::put_u32(out, static_cast<std::uint32_t>(header_str.size()));
    out += header_str;
    for (const auto& [p, e] : policy.params()) {
        const auto& m = e.tensor.value();
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j)
                ckpt_detail::put_f32(out, static_cast<float>(m(i, j)));
    }

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint '" + path + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("failed while writing checkpoint '" + path + "'");
}

template <typename S = float>
TinyVlaPolicy<S> load_checkpoint(const std::string& path, CheckpointMeta* meta_out = nullptr) {
    using nlohmann::json;
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (bytes.size() < 10 || bytes.compare(0, 4, "TVLA") != 0)
        throw IoError("corrupt checkpoint magic in '" + path + "'");
    const std::uint16_t version = ckpt_detail::get_u16(bytes, 4);
    if (version != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version) + " in '" + path + "'");
    const std::uint32_t header_len = ckpt_detail::get_u32(bytes, 6);
    if (bytes.size() < 10 + header_len) throw IoError("truncated checkpoint header in '" + path + "'");

    json header;
    try {
        header = json::parse(bytes.substr(10, header_len));
    } catch (const json::exception&) {
        throw IoError("corrupt checkpoint header in '" + path + "'");
    }
    const PolicyConfig cfg = ckpt_detail::config_from_json(header.at("config"));
    const std::uint64_t seed = header.at("seed").get<std::uint64_t>();
    if (meta_out) {
        meta_out->kind = header.value("kind", "model");
        meta_out->method = header.value("method", "");
        meta_out->config_hash = header.value("config_hash", "");
        meta_out->data_hash = header.value("data_hash", "");
        meta_out->created = header.value("created", "");
        meta_out->seed = seed;
    }

    TinyVlaPolicy<S> policy(cfg, seed);
    const json& tags = header.at("tags");

    // Payload order is the lexicographic path order of the tag map.
    std::vector<std::string> paths;
    for (auto it = tags.begin(); it != tags.end(); ++it) paths.push_back(it.key());
    std::sort(paths.begin(), paths.end());

    std::size_t at = 10 + header_len;
    for (const auto& p : paths) {
        const auto& t = tags.at(p);
        const Eigen::Index rows = t.at("rows").get<Eigen::Index>();
        const Eigen::Index cols = t.at("cols").get<Eigen::Index>();
        if (!policy.params().contains(p))
            throw IoError("checkpoint path '" + p + "' does not exist under the stored config");
        Tensor<S>& dst = policy.params().at(p);
        if (dst.rows() != rows || dst.cols() != cols)
            throw IoError("checkpoint shape mismatch for '" + p + "': stored " + shape_str(rows, cols) +
                          ", config expects " + shape_str(dst.rows(), dst.cols()));
        const std::size_t need = static_cast<std::size_t>(rows * cols) * 4;
        if (at + need > bytes.size()) throw IoError("truncated checkpoint payload in '" + path + "'");
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) {
                dst.value()(i, j) = static_cast<S>(ckpt_detail::get_f32(bytes, at));
                at += 4;
            }
    }
    if (at != bytes.size()) throw IoError("trailing bytes after checkpoint payload in '" + path + "'");
    return policy;
}

// Adapter bundle: same container, kind = "adapters"; stores A/B matrices and
// the metadata needed to re-attach them onto a base policy.
template <typename S>
void save_adapter_bundle(const TinyVlaPolicy<S>& policy, const LoraSet<S>& set, const std::string& path,
                         const CheckpointMeta& meta = {}) {
    using nlohmann::json;
    json entries = json::array();
    std::string payload;
    for (const auto& ad : set.adapters) {
        if (ad.merged) throw ValueError("save_adapter_bundle: adapter on '" + ad.target + "' already merged");
        const auto& a = policy.params().at(ad.a_path).value();
        const auto& b = policy.params().at(ad.b_path).value();
        entries.push_back({{"target", ad.target},
                           {"rank", ad.rank},
                           {"alpha", ad.alpha},
                           {"dropout", ad.dropout_p},
                           {"a_rows", a.rows()},
                           {"a_cols", a.cols()},
                           {"b_rows", b.rows()},
                           {"b_cols", b.cols()}});
        for (Eigen::Index i = 0; i < a.rows(); ++i)
            for (Eigen::Index j = 0; j < a.cols(); ++j) ckpt_detail::put_f32(payload, static_cast<float>(a(i, j)));
        for (Eigen::Index i = 0; i < b.rows(); ++i)
            for (Eigen::Index j = 0; j < b.cols(); ++j) ckpt_detail::put_f32(payload, static_cast<float>(b(i, j)));
    }
    json header = {{"config", ckpt_detail::config_to_json(policy.config())},
                   {"seed", policy.seed()},
                   {"kind", "adapters"},
                   {"method", meta.method},
                   {"config_hash", meta.config_hash},
                   {"data_hash", meta.data_hash},
                   {"created", meta.created},
                   {"adapters", entries}};
    const std::string header_str = header.dump();
    std::string out;
    out += "TVLA";
    ckpt_detail::put_u16(out, kCheckpointVersion);
    ckpt_detail::put_u32(out, static_cast<std::uint32_t>(header_str.size()));
    out += header_str;
    out += payload;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write adapter bundle '" + path + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

// Re-attaches a saved bundle onto a base policy, overwriting the fresh A/B
// initialization with the stored matrices.
template <typename S>
LoraSet<S> load_adapter_bundle(TinyVlaPolicy<S>& policy, const std::string& path) {
    using nlohmann::json;
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open adapter bundle '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 10 || bytes.compare(0, 4, "TVLA") != 0)
        throw IoError("corrupt adapter bundle magic in '" + path + "'");
    const std::uint16_t version = ckpt_detail::get_u16(bytes, 4);
    if (version != kCheckpointVersion)
        throw IoError("unsupported adapter bundle version " + std::to_string(version));
    const std::uint32_t header_len = ckpt_detail::get_u32(bytes, 6);
    if (bytes.size() < 10 + header_len) throw IoError("truncated adapter bundle header");
    json header = json::parse(bytes.substr(10, header_len));
    if (header.value("kind", "") != "adapters") throw IoError("'" + path + "' is not an adapter bundle");

    LoraSet<S> set;
    std::size_t at = 10 + header_len;
    for (const auto& e : header.at("adapters")) {
        const std::string target = e.at("target").get<std::string>();
        LoraSet<S> one = policy.attach_lora({target}, e.at("rank").get<int>(), e.at("alpha").get<double>(),
                                            e.at("dropout").get<double>(), 0);
        LoraAdapter<S>& ad = one.adapters.front();
        auto read_into = [&](const std::string& p, Eigen::Index rows, Eigen::Index cols) {
            Mat<S>& dst = policy.params().at(p).value();
            if (dst.rows() != rows || dst.cols() != cols)
                throw IoError("adapter bundle shape mismatch for '" + p + "'");
            const std::size_t need = static_cast<std::size_t>(rows * cols) * 4;
            if (at + need > bytes.size()) throw IoError("truncated adapter bundle payload");
            for (Eigen::Index i = 0; i < rows; ++i)
                for (Eigen::Index j = 0; j < cols; ++j) {
                    dst(i, j) = static_cast<S>(ckpt_detail::get_f32(bytes, at));
                    at += 4;
                }
        };
        read_into(ad.a_path, e.at("a_rows").get<Eigen::Index>(), e.at("a_cols").get<Eigen::Index>());
        read_into(ad.b_path, e.at("b_rows").get<Eigen::Index>(), e.at("b_cols").get<Eigen::Index>());
        set.adapters.push_back(std::move(ad));
    }
    return set;
}

}  // namespace forgelab
