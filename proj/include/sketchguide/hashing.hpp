// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <openssl/evp.h>

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include "errors.hpp"

namespace sketchguide {

// Incremental SHA-256 over OpenSSL's EVP interface.
class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new()) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) throw error("sha256 init failed");
    }
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;
    ~Sha256() { EVP_MD_CTX_free(ctx_); }

    Sha256& update(std::span<const std::uint8_t> bytes) {
        EVP_DigestUpdate(ctx_, bytes.data(), bytes.size());
        return *this;
    }
    Sha256& update(std::string_view s) {
        EVP_DigestUpdate(ctx_, s.data(), s.size());
        return *this;
    }
    Sha256& update(std::span<const double> values) {
        EVP_DigestUpdate(ctx_, values.data(), values.size_bytes());
        return *this;
    }

    std::string hex() {
        unsigned char md[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_, md, &len);
        static constexpr char digits[] = "0123456789abcdef";
        std::string out;
        for (unsigned int i = 0; i < len; ++i) {
            out.push_back(digits[md[i] >> 4]);
            out.push_back(digits[md[i] & 15]);
        }
        return out;
    }

private:
    EVP_MD_CTX* ctx_;
};

inline std::string sha256_hex(std::span<const std::uint8_t> bytes) { return Sha256().update(bytes).hex(); }
inline std::string sha256_hex(std::string_view s) { return Sha256().update(s).hex(); }

} // namespace sketchguide
