#include "mpq/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace mpq {

namespace {

struct TensorRef {
    std::string name;
    int layer_id;       // -1 for tensors outside the quantizable set
    std::string kind;   // qkv/proj/fc1/fc2 or "aux"
    const Matrix* mat;
};

// Names follow collect_params order; the manifest order equals blob order.
std::vector<TensorRef> tensor_refs(const ToyViT& m) {
    std::vector<TensorRef> out;
    out.push_back({"embed", -1, "aux", &m.embed});
    out.push_back({"embed_bias", -1, "aux", &m.embed_bias});
    for (int bi = 0; bi < m.cfg.blocks; ++bi) {
        std::string prefix = "block" + std::to_string(bi) + ".";
        const BlockParams& bp = m.blocks[bi];
        out.push_back({prefix + "ln1_gamma", -1, "aux", &bp.ln1_gamma});
        out.push_back({prefix + "ln1_beta", -1, "aux", &bp.ln1_beta});
        for (LayerKind k : {LayerKind::qkv, LayerKind::proj}) {
            const LayerRecord& l = m.layer(bi, k);
            out.push_back({prefix + kind_name(k) + ".weight", l.layer_id, kind_name(k), &l.weight});
            out.push_back({prefix + kind_name(k) + ".bias", -1, "aux", &l.bias});
        }
        out.push_back({prefix + "ln2_gamma", -1, "aux", &bp.ln2_gamma});
        out.push_back({prefix + "ln2_beta", -1, "aux", &bp.ln2_beta});
        for (LayerKind k : {LayerKind::fc1, LayerKind::fc2}) {
            const LayerRecord& l = m.layer(bi, k);
            out.push_back({prefix + kind_name(k) + ".weight", l.layer_id, kind_name(k), &l.weight});
            out.push_back({prefix + kind_name(k) + ".bias", -1, "aux", &l.bias});
        }
    }
    out.push_back({"final_gamma", -1, "aux", &m.final_gamma});
    out.push_back({"final_beta", -1, "aux", &m.final_beta});
    out.push_back({"head", -1, "aux", &m.head});
    out.push_back({"head_bias", -1, "aux", &m.head_bias});
    return out;
}

void write_f64_le(std::ostream& os, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 8);
}

double read_f64_le(const unsigned char* p) {
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(p[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ToyViT& m,
                     const nlohmann::ordered_json& extra) {
    auto refs = tensor_refs(m);

    nlohmann::ordered_json header;
    header["format"] = "MPQ1";
    header["model"] = {{"blocks", m.cfg.blocks},   {"dim", m.cfg.dim},
                       {"heads", m.cfg.heads},     {"tokens", m.cfg.tokens},
                       {"num_classes", m.cfg.num_classes}, {"in_dim", m.cfg.in_dim}};
    nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
    uint64_t offset = 0;  // bytes from the start of the blob section
    for (const auto& r : refs) {
        manifest.push_back({{"name", r.name},
                            {"layer_id", r.layer_id},
                            {"kind", r.kind},
                            {"rows", r.mat->rows},
                            {"cols", r.mat->cols},
                            {"offset", offset}});
        offset += r.mat->size() * 8;
    }
    header["manifest"] = manifest;
    for (auto it = extra.begin(); it != extra.end(); ++it) header[it.key()] = it.value();

    std::string hs = header.dump();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    os.write("MPQ1", 4);
    uint32_t len = static_cast<uint32_t>(hs.size());
    unsigned char lb[4];
    for (int i = 0; i < 4; ++i) lb[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(lb), 4);
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& r : refs)
        for (double v : r.mat->data) write_f64_le(os, v);
    if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() < 8 || std::memcmp(bytes.data(), "MPQ1", 4) != 0)
        throw std::runtime_error("load_checkpoint: unknown magic in " + path);
    uint32_t len = 0;
    for (int i = 0; i < 4; ++i) len |= static_cast<uint32_t>(bytes[4 + i]) << (8 * i);
    if (bytes.size() < 8ull + len)
        throw std::runtime_error("load_checkpoint: truncated header in " + path);
    nlohmann::json header = nlohmann::json::parse(
        std::string(reinterpret_cast<const char*>(bytes.data()) + 8, len));

    ModelConfig cfg;
    const auto& mj = header.at("model");
    cfg.blocks = mj.at("blocks").get<int>();
    cfg.dim = mj.at("dim").get<int>();
    cfg.heads = mj.at("heads").get<int>();
    cfg.tokens = mj.at("tokens").get<int>();
    cfg.num_classes = mj.at("num_classes").get<int>();
    cfg.in_dim = mj.at("in_dim").get<int>();

    LoadedCheckpoint lc;
    lc.model = model_skeleton(cfg);
    lc.header = header;

    auto refs = tensor_refs(lc.model);
    size_t blob_start = 8ull + len;
    for (const auto& entry : header.at("manifest")) {
        std::string name = entry.at("name").get<std::string>();
        const Matrix* target = nullptr;
        for (const auto& r : refs)
            if (r.name == name) {
                target = r.mat;
                break;
            }
        if (!target) throw std::runtime_error("load_checkpoint: unknown tensor " + name);
        int rows = entry.at("rows").get<int>();
        int cols = entry.at("cols").get<int>();
        if (rows != target->rows || cols != target->cols)
            throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
        uint64_t off = entry.at("offset").get<uint64_t>();
        size_t count = static_cast<size_t>(rows) * cols;
        if (blob_start + off + count * 8 > bytes.size())
            throw std::runtime_error("load_checkpoint: truncated blob for " + name);
        Matrix* mut = const_cast<Matrix*>(target);
        for (size_t i = 0; i < count; ++i)
            mut->data[i] = read_f64_le(bytes.data() + blob_start + off + i * 8);
    }
    return lc;
}

}  // namespace mpq
