#pragma once
// TensorRecord: a named dense float array with shape, optional gradient, and a
// trainable flag. Frozen (trainable=false) records are never touched by the
// optimizer; training loops verify that with content hashes.
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "flexmerge/errors.hpp"
#include "flexmerge/sha256.hpp"

namespace flexmerge {

struct TensorRecord {
    std::string name;
    std::vector<int> shape;
    std::vector<float> values;
    std::vector<float> grad; // empty = no gradient populated
    bool trainable = false;

    TensorRecord() = default;
    TensorRecord(std::string n, std::vector<int> s, bool train = false)
        : name(std::move(n)), shape(std::move(s)), trainable(train) {
        values.assign(numel(), 0.f);
    }

    size_t numel() const {
        size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw ConfigError("tensor '" + name + "': non-positive dim");
            n *= static_cast<size_t>(d);
        }
        return n;
    }

    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.f);
    }
    void clear_grad() { grad.clear(); }

    // Hash of raw value bytes; the freeze-contract currency.
    std::string content_hash() const {
        return sha256_hex(values.data(), values.size() * sizeof(float));
    }
};

} // namespace flexmerge
