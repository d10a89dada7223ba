#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace voxgene {

// Streaming FNV-1a (64-bit). Used for reproducibility digests of blobs and
// manifests, not for anything security-sensitive.
class Digest {
public:
    Digest& update(const void* bytes, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(bytes);
        for (std::size_t i = 0; i < n; ++i) {
            h_ ^= static_cast<std::uint64_t>(p[i]);
            h_ *= 0x100000001b3ull;
        }
        return *this;
    }

    Digest& update(const std::string& s) { return update(s.data(), s.size()); }

    Digest& update_u64(std::uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        return update(b, 8);
    }

    Digest& update_double(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        return update_u64(bits);
    }

    Digest& update_doubles(const std::vector<double>& v) {
        for (double x : v) update_double(x);
        return *this;
    }

    std::uint64_t value() const { return h_; }

    std::string hex() const {
        static const char* d = "0123456789abcdef";
        std::string out(16, '0');
        std::uint64_t v = h_;
        for (int i = 15; i >= 0; --i) {
            out[static_cast<std::size_t>(i)] = d[v & 0xf];
            v >>= 4;
        }
        return out;
    }

private:
    std::uint64_t h_ = 0xcbf29ce484222325ull;
};

inline std::uint64_t fnv1a64(const std::string& s) {
    Digest d;
    d.update(s);
    return d.value();
}

}  // namespace voxgene
