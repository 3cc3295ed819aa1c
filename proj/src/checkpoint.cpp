#include "atp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian; byte swapping is not implemented");

namespace atp {

namespace {

constexpr char kMagic[4] = {'A', 'T', 'P', 'C'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}

void put_u64(std::string& out, uint64_t v) {
    char b[8];
    std::memcpy(b, &v, 8);
    out.append(b, 8);
}

struct Reader {
    const std::string& bytes;
    size_t pos = 0;

    void need(size_t n, const char* what) const {
        if (pos + n > bytes.size()) {
            throw FormatError("checkpoint truncated at byte " + std::to_string(pos) +
                              " while reading " + what);
        }
    }
    uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<uint8_t>(bytes[pos++]);
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v;
        std::memcpy(&v, bytes.data() + pos, 4);
        pos += 4;
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v;
        std::memcpy(&v, bytes.data() + pos, 8);
        pos += 8;
        return v;
    }
    std::string str(size_t n, const char* what) {
        need(n, what);
        std::string s = bytes.substr(pos, n);
        pos += n;
        return s;
    }
    bool eof() const { return pos == bytes.size(); }
};

std::string render_config(const Checkpoint& ckpt) {
    std::string out;
    for (const auto& [k, v] : ckpt.config) {
        out += k;
        out += "=";
        out += v;
        out += "\n";
    }
    return out;
}

std::vector<std::pair<std::string, std::string>> parse_config(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> out;
    size_t start = 0;
    while (start < text.size()) {
        size_t nl = text.find('\n', start);
        if (nl == std::string::npos) nl = text.size();
        std::string line = text.substr(start, nl - start);
        start = nl + 1;
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("bad config line in checkpoint: " + line);
        out.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return out;
}

}  // namespace

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    std::string config = render_config(ckpt);
    put_u32(out, static_cast<uint32_t>(config.size()));
    out += config;
    for (const auto& e : ckpt.tensors) {
        put_u32(out, static_cast<uint32_t>(e.name.size()));
        out += e.name;
        out.push_back(static_cast<char>(e.dtype));
        const std::vector<int>& shape = e.dtype == 0 ? e.f32.shape : e.f64.shape;
        put_u32(out, static_cast<uint32_t>(shape.size()));
        for (int d : shape) put_u64(out, static_cast<uint64_t>(d));
        if (e.dtype == 0) {
            if (!e.f32.all_finite()) throw ContractError("tensor " + e.name + " is not finite");
            out.append(reinterpret_cast<const char*>(e.f32.data.data()),
                       e.f32.data.size() * sizeof(float));
        } else if (e.dtype == 1) {
            if (!e.f64.all_finite()) throw ContractError("tensor " + e.name + " is not finite");
            out.append(reinterpret_cast<const char*>(e.f64.data.data()),
                       e.f64.data.size() * sizeof(double));
        } else {
            throw ContractError("unknown dtype code " + std::to_string(e.dtype));
        }
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot write checkpoint " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw InputError("short write to " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open checkpoint " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r{bytes};

    std::string magic = r.str(4, "magic");
    if (std::memcmp(magic.data(), kMagic, 4) != 0) {
        throw FormatError("bad checkpoint magic at byte 0");
    }
    uint32_t version = r.u32("version");
    if (version != kVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version) +
                          " at byte 4");
    }
    uint32_t config_len = r.u32("config length");
    Checkpoint ckpt;
    ckpt.config = parse_config(r.str(config_len, "config block"));

    while (!r.eof()) {
        uint32_t name_len = r.u32("tensor name length");
        TensorEntry e;
        e.name = r.str(name_len, "tensor name");
        e.dtype = r.u8("dtype code");
        if (e.dtype > 1) {
            throw FormatError("unknown dtype code " + std::to_string(e.dtype) + " at byte " +
                              std::to_string(r.pos - 1));
        }
        uint32_t rank = r.u32("rank");
        std::vector<int> shape;
        int64_t numel = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            uint64_t d = r.u64("dimension");
            shape.push_back(static_cast<int>(d));
            numel *= static_cast<int64_t>(d);
        }
        if (e.dtype == 0) {
            size_t n = static_cast<size_t>(numel) * sizeof(float);
            r.need(n, ("payload of " + e.name).c_str());
            e.f32 = Tensor<float>(shape);
            std::memcpy(e.f32.data.data(), bytes.data() + r.pos, n);
            r.pos += n;
        } else {
            size_t n = static_cast<size_t>(numel) * sizeof(double);
            r.need(n, ("payload of " + e.name).c_str());
            e.f64 = Tensor<double>(shape);
            std::memcpy(e.f64.data.data(), bytes.data() + r.pos, n);
            r.pos += n;
        }
        ckpt.tensors.push_back(std::move(e));
    }
    return ckpt;
}

Checkpoint model_to_checkpoint(const Model& model) {
    Checkpoint ckpt;
    ckpt.set("kind", model.is_compact() ? "compact" : "dense");
    ckpt.set("n_layers", std::to_string(model.config.n_layers));
    ckpt.set("d_hidden", std::to_string(model.config.d_hidden));
    ckpt.set("n_heads", std::to_string(model.config.n_heads));
    ckpt.set("d_int", std::to_string(model.config.d_int));
    ckpt.set("vocab", std::to_string(model.config.vocab));
    ckpt.set("seq_max", std::to_string(model.config.seq_max));
    ckpt.set("norm_eps", std::to_string(model.config.norm_eps));
    for (size_t i = 0; i < model.layers.size(); ++i) {
        const auto& s = model.layers[i].shape;
        std::string p = "layers." + std::to_string(i) + ".";
        ckpt.set(p + "k_qk", std::to_string(s.k_qk));
        ckpt.set(p + "k_v", std::to_string(s.k_v));
        ckpt.set(p + "k_gu", std::to_string(s.k_gu));
    }
    const_cast<Model&>(model).visit_params(
        [&](const std::string& name, Tensor<float>& t) { ckpt.add(name, t); });
    return ckpt;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
    ModelConfig cfg;
    cfg.n_layers = std::stoi(ckpt.require("n_layers"));
    cfg.d_hidden = std::stoi(ckpt.require("d_hidden"));
    cfg.n_heads = std::stoi(ckpt.require("n_heads"));
    cfg.d_int = std::stoi(ckpt.require("d_int"));
    cfg.vocab = std::stoi(ckpt.require("vocab"));
    cfg.seq_max = std::stoi(ckpt.require("seq_max"));
    cfg.norm_eps = std::stod(ckpt.require("norm_eps"));
    cfg.validate();

    Model m;
    m.config = cfg;
    m.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (size_t i = 0; i < m.layers.size(); ++i) {
        std::string p = "layers." + std::to_string(i) + ".";
        m.layers[i].shape.k_qk = std::stoi(ckpt.require(p + "k_qk"));
        m.layers[i].shape.k_v = std::stoi(ckpt.require(p + "k_v"));
        m.layers[i].shape.k_gu = std::stoi(ckpt.require(p + "k_gu"));
    }
    m.visit_params([&](const std::string& name, Tensor<float>& t) {
        t = ckpt.require_f32(name);
    });

    // shape consistency
    for (size_t i = 0; i < m.layers.size(); ++i) {
        const auto& l = m.layers[i];
        if (l.wq.cols() != cfg.n_heads * l.shape.k_qk || l.wv.cols() != cfg.n_heads * l.shape.k_v ||
            l.wg.cols() != l.shape.k_gu) {
            throw FormatError("layer " + std::to_string(i) + " tensors disagree with widths");
        }
    }
    return m;
}

Checkpoint adapters_to_checkpoint(const ModelAdapters& adapters) {
    Checkpoint ckpt;
    ckpt.set("kind", "adapters");
    ckpt.set("n_layers", std::to_string(adapters.layers.size()));
    ckpt.set("rank", std::to_string(adapters.rank));
    const_cast<ModelAdapters&>(adapters).visit_params(
        [&](const std::string& name, Tensor<float>& t) { ckpt.add(name, t); });
    return ckpt;
}

ModelAdapters adapters_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.require("kind") != "adapters") throw FormatError("checkpoint is not an adapter set");
    int n_layers = std::stoi(ckpt.require("n_layers"));
    ModelAdapters a;
    a.rank = std::stoi(ckpt.require("rank"));
    a.layers.resize(static_cast<size_t>(n_layers));
    a.visit_params([&](const std::string& name, Tensor<float>& t) {
        t = ckpt.require_f32(name);
    });
    return a;
}

}  // namespace atp
