#pragma once
// Thin SHA-256 wrapper used for corpus digests, tensor freeze hashes, and
// checkpoint fingerprints.
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace flexmerge {

class Sha256 {
  public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    Sha256& update(const void* data, size_t len);
    Sha256& update(const std::string& s) { return update(s.data(), s.size()); }
    template <typename T> Sha256& update_vec(const std::vector<T>& v) {
        return update(v.data(), v.size() * sizeof(T));
    }

    // Finalizes and returns lowercase hex. The object must not be reused.
    std::string hex();

  private:
    void* ctx_;
};

std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);

} // namespace flexmerge
