#pragma once

#include <string>
#include <utility>
#include <vector>

#include "atp/adapters.hpp"
#include "atp/model.hpp"

namespace atp {

// Binary container: magic "ATPC", version u32, a key=value config block, then
// named tensors (name, dtype code 0=f32/1=f64, rank, dims, row-major
// little-endian payload) until end of file.
struct TensorEntry {
    std::string name;
    uint8_t dtype = 0;
    Tensor<float> f32;
    Tensor<double> f64;
};

struct Checkpoint {
    std::vector<std::pair<std::string, std::string>> config;
    std::vector<TensorEntry> tensors;

    void set(const std::string& key, const std::string& value) { config.emplace_back(key, value); }
    const std::string* get(const std::string& key) const {
        for (const auto& [k, v] : config) {
            if (k == key) return &v;
        }
        return nullptr;
    }
    std::string require(const std::string& key) const {
        const std::string* v = get(key);
        if (v == nullptr) throw FormatError("checkpoint config missing key " + key);
        return *v;
    }

    void add(const std::string& name, Tensor<float> t) {
        TensorEntry e;
        e.name = name;
        e.dtype = 0;
        e.f32 = std::move(t);
        tensors.push_back(std::move(e));
    }
    void add(const std::string& name, Tensor<double> t) {
        TensorEntry e;
        e.name = name;
        e.dtype = 1;
        e.f64 = std::move(t);
        tensors.push_back(std::move(e));
    }
    const TensorEntry* find(const std::string& name) const {
        for (const auto& e : tensors) {
            if (e.name == name) return &e;
        }
        return nullptr;
    }
    const Tensor<float>& require_f32(const std::string& name) const {
        const TensorEntry* e = find(name);
        if (e == nullptr) throw FormatError("checkpoint missing tensor " + name);
        if (e->dtype != 0) throw FormatError("tensor " + name + " is not float32");
        return e->f32;
    }
};

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

// Model and adapter packaging on top of the container.
Checkpoint model_to_checkpoint(const Model& model);
Model model_from_checkpoint(const Checkpoint& ckpt);
Checkpoint adapters_to_checkpoint(const ModelAdapters& adapters);
ModelAdapters adapters_from_checkpoint(const Checkpoint& ckpt);

}  // namespace atp
