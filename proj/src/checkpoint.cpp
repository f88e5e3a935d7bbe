#include "impact/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace impact {

namespace {

constexpr char kMagic[8] = {'I', 'M', 'P', 'A', 'C', 'T', 'A', 'R'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    check(bool(is), "archive: truncated reading " + what);
    return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}

}  // namespace

void save_archive(const std::string& path, const std::map<std::string, Tensor>& tensors,
                  const nlohmann::json& meta) {
    nlohmann::json manifest;
    manifest["meta"] = meta.is_null() ? nlohmann::json::object() : meta;
    nlohmann::json entries = nlohmann::json::object();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        const uint64_t nbytes = uint64_t(t.numel()) * sizeof(float);
        entries[name] = {{"shape", t.shape()},
                         {"dtype", "f32"},
                         {"offset", offset},
                         {"nbytes", nbytes}};
        offset += nbytes;
    }
    manifest["tensors"] = entries;
    const std::string mstr = manifest.dump();
    std::ofstream os(path, std::ios::binary);
    check(bool(os), "archive: cannot write " + path);
    os.write(kMagic, 8);
    write_u32(os, kVersion);
    write_u32(os, static_cast<uint32_t>(mstr.size()));
    os.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
    for (const auto& [name, t] : tensors)
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(float)));
    check(bool(os), "archive: short write to " + path);
}

Archive load_archive(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check(bool(is), "archive: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    check(bool(is) && std::memcmp(magic, kMagic, 8) == 0, "archive: bad magic in " + path);
    const uint32_t version = read_u32(is, "version");
    check(version == kVersion, "archive: unsupported version " + std::to_string(version));
    const uint32_t mlen = read_u32(is, "manifest length");
    std::string mstr(mlen, '\0');
    is.read(mstr.data(), mlen);
    check(is.gcount() == std::streamsize(mlen), "archive: truncated manifest in " + path);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mstr);
    } catch (const std::exception& e) {
        check(false, "archive: manifest parse failure: " + std::string(e.what()));
    }
    std::vector<char> blob((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    Archive ar;
    ar.meta = manifest.value("meta", nlohmann::json::object());
    check(manifest.contains("tensors"), "archive: manifest missing tensors");
    uint64_t expected = 0;
    for (const auto& [name, entry] : manifest["tensors"].items()) {
        check(entry.value("dtype", "") == std::string("f32"),
              "archive: unsupported dtype for " + name);
        const std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
        const uint64_t offset = entry.at("offset").get<uint64_t>();
        const uint64_t nbytes = entry.at("nbytes").get<uint64_t>();
        const int64_t numel = Tensor::checked_numel(shape);
        check(nbytes == uint64_t(numel) * sizeof(float),
              "archive: shape/byte-length mismatch for " + name);
        check(offset + nbytes <= blob.size(), "archive: blob truncated for " + name);
        Tensor t(shape);
        std::memcpy(t.data(), blob.data() + offset, nbytes);
        ar.tensors.emplace(name, std::move(t));
        expected += nbytes;
    }
    check(expected == blob.size(), "archive: blob size does not match manifest totals");
    return ar;
}

nlohmann::json config_to_json(const ModelConfig& cfg) {
    return {{"image_size", cfg.image_size},   {"patch_size", cfg.patch_size},
            {"channels", cfg.channels},       {"embed_dim", cfg.embed_dim},
            {"depth", cfg.depth},             {"heads", cfg.heads},
            {"mlp_ratio", cfg.mlp_ratio},     {"num_classes", cfg.num_classes},
            {"layerscale_init", cfg.layerscale_init}, {"seed", cfg.seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.image_size = j.at("image_size").get<int>();
    cfg.patch_size = j.at("patch_size").get<int>();
    cfg.channels = j.at("channels").get<int>();
    cfg.embed_dim = j.at("embed_dim").get<int>();
    cfg.depth = j.at("depth").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.mlp_ratio = j.at("mlp_ratio").get<int>();
    cfg.num_classes = j.at("num_classes").get<int>();
    cfg.layerscale_init = j.at("layerscale_init").get<float>();
    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.validate();
    return cfg;
}

void save_model(const VitModel& model, const std::string& path) {
    nlohmann::json meta;
    meta["kind"] = "vit";
    meta["config"] = config_to_json(model.config);
    save_archive(path, model.params, meta);
}

VitModel load_model(const std::string& path) {
    Archive ar = load_archive(path);
    check(ar.meta.value("kind", "") == std::string("vit"), "archive: not a model checkpoint");
    VitModel m;
    m.config = config_from_json(ar.meta.at("config"));
    m.params = std::move(ar.tensors);
    // pruned checkpoints carry "mask." tensors next to the weights
    std::erase_if(m.params, [](const auto& kv) { return kv.first.starts_with("mask."); });
    // a freshly initialized model defines the expected parameter set
    VitModel probe = VitModel::init(m.config);
    for (const auto& [name, t] : probe.params) {
        auto it = m.params.find(name);
        check(it != m.params.end(), "archive: missing parameter " + name);
        check(it->second.same_shape(t), "archive: shape mismatch for " + name);
    }
    check(m.params.size() == probe.params.size(), "archive: unexpected extra parameters");
    return m;
}

}  // namespace impact
