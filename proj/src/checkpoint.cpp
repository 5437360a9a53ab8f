#include "flexmerge/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "json.hpp"

#include "flexmerge/sha256.hpp"

namespace flexmerge {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr int kFormatVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are pinned to little-endian hosts");
static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559,
              "checkpoint blobs require IEEE-754 binary32");

json bias_to_json(double b) {
    if (std::isinf(b) && b < 0) return "-inf";
    return b;
}

double bias_from_json(const json& j) {
    if (j.is_string()) {
        if (j.get<std::string>() == "-inf") return -std::numeric_limits<double>::infinity();
        throw CheckpointError("manifest: unknown bias sentinel '" + j.get<std::string>() + "'");
    }
    return j.get<double>();
}

json config_to_json(const ModelConfig& c) {
    return json{{"n_layers", c.n_layers},       {"hidden_dim", c.hidden_dim},
                {"n_heads", c.n_heads},         {"ffn_dim", c.ffn_dim},
                {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
                {"top_k", c.top_k}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.top_k = j.at("top_k").get<int>();
    return c;
}

// Builds the sorted tensor table + concatenated blob for a set of records.
struct Packed {
    json table = json::array();
    std::string blob;
};

template <typename Container> Packed pack_tensors(const Container& tensors) {
    std::vector<const TensorRecord*> ordered;
    for (const auto& t : tensors) ordered.push_back(&t);
    std::sort(ordered.begin(), ordered.end(),
              [](const TensorRecord* a, const TensorRecord* b) { return a->name < b->name; });
    Packed p;
    size_t offset = 0;
    for (const TensorRecord* t : ordered) {
        size_t bytes = t->values.size() * sizeof(float);
        p.table.push_back(json{{"name", t->name},
                               {"shape", t->shape},
                               {"dtype", "f32"},
                               {"offset", offset},
                               {"bytes", bytes},
                               {"role", tensor_role(t->name)},
                               {"trainable", t->trainable}});
        p.blob.append(reinterpret_cast<const char*>(t->values.data()), bytes);
        offset += bytes;
    }
    return p;
}

// Fingerprint = SHA-256 over the canonical manifest-without-fingerprint JSON
// plus the raw blob bytes. nlohmann::json orders keys, so dump() is canonical.
std::string fingerprint_of(const json& manifest_sans_fp, const std::string& blob) {
    Sha256 h;
    std::string head = manifest_sans_fp.dump();
    h.update(head.data(), head.size());
    h.update(blob.data(), blob.size());
    return h.hex();
}

void write_atomic(const fs::path& path, const std::string& data) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw CheckpointError("cannot write " + tmp.string());
        f.write(data.data(), static_cast<std::streamsize>(data.size()));
        if (!f) throw CheckpointError("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string save_checkpoint(json manifest, const std::string& blob, const fs::path& dir) {
    fs::create_directories(dir);
    std::string fp = fingerprint_of(manifest, blob);
    manifest["fingerprint"] = fp;
    write_atomic(dir / "weights.bin", blob);
    write_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
    return fp;
}

struct Loaded {
    json manifest;
    std::string blob;
};

Loaded load_checkpoint(const fs::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw CheckpointError("missing manifest: " + (dir / "manifest.json").string());
    Loaded out;
    out.manifest = json::parse(mf);
    if (!out.manifest.contains("format_version") ||
        out.manifest.at("format_version").get<int>() != kFormatVersion)
        throw VersionSkew("checkpoint format version is not " + std::to_string(kFormatVersion));

    std::ifstream bf(dir / "weights.bin", std::ios::binary);
    if (!bf) throw CheckpointError("missing blob: " + (dir / "weights.bin").string());
    out.blob.assign(std::istreambuf_iterator<char>(bf), std::istreambuf_iterator<char>());

    // The table must tile the blob exactly.
    size_t expected = 0;
    for (const auto& entry : out.manifest.at("tensors")) {
        if (entry.at("offset").get<size_t>() != expected)
            throw CheckpointError("tensor table offsets are not contiguous");
        if (entry.at("dtype").get<std::string>() != "f32")
            throw CheckpointError("unsupported dtype " + entry.at("dtype").get<std::string>());
        expected += entry.at("bytes").get<size_t>();
    }
    if (out.blob.size() < expected)
        throw TruncatedBlob("blob holds " + std::to_string(out.blob.size()) + " bytes, expected " +
                            std::to_string(expected));
    if (out.blob.size() > expected)
        throw CheckpointError("blob has trailing bytes beyond the tensor table");

    json sans_fp = out.manifest;
    std::string stored = sans_fp.at("fingerprint").get<std::string>();
    sans_fp.erase("fingerprint");
    if (fingerprint_of(sans_fp, out.blob) != stored)
        throw FingerprintMismatch("checkpoint fingerprint does not match its contents");
    return out;
}

TensorRecord unpack_tensor(const json& entry, const std::string& blob) {
    TensorRecord t(entry.at("name").get<std::string>(),
                   entry.at("shape").get<std::vector<int>>(),
                   entry.at("trainable").get<bool>());
    size_t bytes = entry.at("bytes").get<size_t>();
    if (bytes != t.values.size() * sizeof(float))
        throw CheckpointError("tensor '" + t.name + "': shape/byte-length mismatch");
    std::memcpy(t.values.data(), blob.data() + entry.at("offset").get<size_t>(), bytes);
    return t;
}

} // namespace

std::string tensor_role(const std::string& name) {
    if (name.find(".expert.") != std::string::npos) return "expert_ffn";
    if (name.find(".router.") != std::string::npos) return "router_row";
    return "shared";
}

std::string save_model(const MoeModel& m, const std::filesystem::path& dir) {
    Packed p = pack_tensors(m.tensors);
    json biases = json::array();
    for (double b : m.biases) biases.push_back(bias_to_json(b));
    json manifest{{"format_version", kFormatVersion},
                  {"kind", "model"},
                  {"config", config_to_json(m.config)},
                  {"roster", m.roster},
                  {"biases", biases},
                  {"expert_fingerprints", m.fingerprints},
                  {"tensors", p.table}};
    return save_checkpoint(std::move(manifest), p.blob, dir);
}

MoeModel load_model(const std::filesystem::path& dir) {
    Loaded in = load_checkpoint(dir);
    if (in.manifest.at("kind").get<std::string>() != "model")
        throw CheckpointError("checkpoint at " + dir.string() + " is not a model");
    MoeModel m;
    m.config = config_from_json(in.manifest.at("config"));
    m.roster = in.manifest.at("roster").get<std::vector<std::string>>();
    for (const auto& b : in.manifest.at("biases")) m.biases.push_back(bias_from_json(b));
    m.fingerprints = in.manifest.at("expert_fingerprints").get<std::vector<std::string>>();
    if (m.roster.empty() || m.roster[0] != "pub")
        throw CheckpointError("model roster must start with 'pub'");
    if (m.biases.size() != m.roster.size() || m.fingerprints.size() != m.roster.size())
        throw CheckpointError("roster/bias/fingerprint arrays disagree");
    for (const auto& entry : in.manifest.at("tensors"))
        m.tensors.push_back(unpack_tensor(entry, in.blob));
    m.reindex();
    return m;
}

std::string save_bundle(const ExpertBundle& b, const std::filesystem::path& dir) {
    Packed p = pack_tensors(b.tensors);
    json manifest{{"format_version", kFormatVersion},
                  {"kind", "expert_bundle"},
                  {"expert_id", b.expert_id},
                  {"anchor_fingerprint", b.anchor_fingerprint},
                  {"bias", bias_to_json(b.bias)},
                  {"meta", json{{"corpus_id", b.corpus_id}, {"steps", b.steps}, {"seed", b.seed}}},
                  {"tensors", p.table}};
    return save_checkpoint(std::move(manifest), p.blob, dir);
}

ExpertBundle load_bundle(const std::filesystem::path& dir) {
    Loaded in = load_checkpoint(dir);
    if (in.manifest.at("kind").get<std::string>() != "expert_bundle")
        throw CheckpointError("checkpoint at " + dir.string() + " is not an expert bundle");
    ExpertBundle b;
    b.expert_id = in.manifest.at("expert_id").get<std::string>();
    b.anchor_fingerprint = in.manifest.at("anchor_fingerprint").get<std::string>();
    b.bias = bias_from_json(in.manifest.at("bias"));
    b.corpus_id = in.manifest.at("meta").at("corpus_id").get<std::string>();
    b.steps = in.manifest.at("meta").at("steps").get<int>();
    b.seed = in.manifest.at("meta").at("seed").get<uint64_t>();
    for (const auto& entry : in.manifest.at("tensors")) {
        TensorRecord t = unpack_tensor(entry, in.blob);
        if (tensor_role(t.name) == "shared")
            throw CheckpointError("bundle holds a shared tensor: '" + t.name + "'");
        b.tensors.push_back(std::move(t));
    }
    return b;
}

std::string stored_fingerprint(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw CheckpointError("missing manifest: " + (dir / "manifest.json").string());
    return json::parse(mf).at("fingerprint").get<std::string>();
}

} // namespace flexmerge
