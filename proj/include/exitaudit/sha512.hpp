#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// SHA-512 (FIPS 180-4), HMAC-SHA-512 (RFC 2104) and HKDF (RFC 5869).
// Self-contained so the library stays header-only; checked against the
// published test vectors in the test suite.

namespace exitaudit {

class Sha512 {
public:
    static constexpr std::size_t kDigestSize = 64;
    using Digest = std::array<std::uint8_t, kDigestSize>;

    Sha512() { reset(); }

    void reset() {
        state_ = {0x6a09e667f3bcc908ULL, 0xbb67ae8584caa73bULL, 0x3c6ef372fe94f82bULL,
                  0xa54ff53a5f1d36f1ULL, 0x510e527fade682d1ULL, 0x9b05688c2b3e6c1fULL,
                  0x1f83d9abfb41bd6bULL, 0x5be0cd19137e2179ULL};
        buffer_len_ = 0;
        total_len_ = 0;
    }

    void update(std::span<const std::uint8_t> data) {
        total_len_ += data.size();
        std::size_t offset = 0;
        if (buffer_len_ > 0) {
            const std::size_t take = std::min(data.size(), kBlockSize - buffer_len_);
            std::memcpy(buffer_.data() + buffer_len_, data.data(), take);
            buffer_len_ += take;
            offset += take;
            if (buffer_len_ == kBlockSize) {
                process_block(buffer_.data());
                buffer_len_ = 0;
            }
        }
        while (offset + kBlockSize <= data.size()) {
            process_block(data.data() + offset);
            offset += kBlockSize;
        }
        if (offset < data.size()) {
            buffer_len_ = data.size() - offset;
            std::memcpy(buffer_.data(), data.data() + offset, buffer_len_);
        }
    }

    Digest finish() {
        const std::uint64_t bit_len_hi = total_len_ >> 61;
        const std::uint64_t bit_len_lo = total_len_ << 3;
        const std::uint8_t pad_byte = 0x80;
        update({&pad_byte, 1});
        static constexpr std::uint8_t zero = 0x00;
        while (buffer_len_ != 112) update({&zero, 1});
        std::array<std::uint8_t, 16> len_bytes{};
        store_be64(len_bytes.data(), bit_len_hi);
        store_be64(len_bytes.data() + 8, bit_len_lo);
        update(len_bytes);
        Digest out;
        for (std::size_t i = 0; i < 8; ++i) store_be64(out.data() + 8 * i, state_[i]);
        return out;
    }

    static Digest hash(std::span<const std::uint8_t> data) {
        Sha512 h;
        h.update(data);
        return h.finish();
    }

    static Digest hash(std::string_view s) {
        return hash({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
    }

private:
    static constexpr std::size_t kBlockSize = 128;

    static void store_be64(std::uint8_t* p, std::uint64_t v) {
        for (int i = 7; i >= 0; --i) {
            p[i] = static_cast<std::uint8_t>(v & 0xff);
            v >>= 8;
        }
    }

    static std::uint64_t load_be64(const std::uint8_t* p) {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v = (v << 8) | p[i];
        return v;
    }

    static std::uint64_t rotr(std::uint64_t x, int n) { return (x >> n) | (x << (64 - n)); }

    void process_block(const std::uint8_t* block) {
        static constexpr std::uint64_t k[80] = {
            0x428a2f98d728ae22ULL, 0x7137449123ef65cdULL, 0xb5c0fbcfec4d3b2fULL, 0xe9b5dba58189dbbcULL,
            0x3956c25bf348b538ULL, 0x59f111f1b605d019ULL, 0x923f82a4af194f9bULL, 0xab1c5ed5da6d8118ULL,
            0xd807aa98a3030242ULL, 0x12835b0145706fbeULL, 0x243185be4ee4b28cULL, 0x550c7dc3d5ffb4e2ULL,
            0x72be5d74f27b896fULL, 0x80deb1fe3b1696b1ULL, 0x9bdc06a725c71235ULL, 0xc19bf174cf692694ULL,
            0xe49b69c19ef14ad2ULL, 0xefbe4786384f25e3ULL, 0x0fc19dc68b8cd5b5ULL, 0x240ca1cc77ac9c65ULL,
            0x2de92c6f592b0275ULL, 0x4a7484aa6ea6e483ULL, 0x5cb0a9dcbd41fbd4ULL, 0x76f988da831153b5ULL,
            0x983e5152ee66dfabULL, 0xa831c66d2db43210ULL, 0xb00327c898fb213fULL, 0xbf597fc7beef0ee4ULL,
            0xc6e00bf33da88fc2ULL, 0xd5a79147930aa725ULL, 0x06ca6351e003826fULL, 0x142929670a0e6e70ULL,
            0x27b70a8546d22ffcULL, 0x2e1b21385c26c926ULL, 0x4d2c6dfc5ac42aedULL, 0x53380d139d95b3dfULL,
            0x650a73548baf63deULL, 0x766a0abb3c77b2a8ULL, 0x81c2c92e47edaee6ULL, 0x92722c851482353bULL,
            0xa2bfe8a14cf10364ULL, 0xa81a664bbc423001ULL, 0xc24b8b70d0f89791ULL, 0xc76c51a30654be30ULL,
            0xd192e819d6ef5218ULL, 0xd69906245565a910ULL, 0xf40e35855771202aULL, 0x106aa07032bbd1b8ULL,
            0x19a4c116b8d2d0c8ULL, 0x1e376c085141ab53ULL, 0x2748774cdf8eeb99ULL, 0x34b0bcb5e19b48a8ULL,
            0x391c0cb3c5c95a63ULL, 0x4ed8aa4ae3418acbULL, 0x5b9cca4f7763e373ULL, 0x682e6ff3d6b2b8a3ULL,
            0x748f82ee5defb2fcULL, 0x78a5636f43172f60ULL, 0x84c87814a1f0ab72ULL, 0x8cc702081a6439ecULL,
            0x90befffa23631e28ULL, 0xa4506cebde82bde9ULL, 0xbef9a3f7b2c67915ULL, 0xc67178f2e372532bULL,
            0xca273eceea26619cULL, 0xd186b8c721c0c207ULL, 0xeada7dd6cde0eb1eULL, 0xf57d4f7fee6ed178ULL,
            0x06f067aa72176fbaULL, 0x0a637dc5a2c898a6ULL, 0x113f9804bef90daeULL, 0x1b710b35131c471bULL,
            0x28db77f523047d84ULL, 0x32caab7b40c72493ULL, 0x3c9ebe0a15c9bebcULL, 0x431d67c49c100d4cULL,
            0x4cc5d4becb3e42b6ULL, 0x597f299cfc657e2aULL, 0x5fcb6fab3ad6faecULL, 0x6c44198c4a475817ULL};

        std::uint64_t w[80];
        for (int i = 0; i < 16; ++i) w[i] = load_be64(block + 8 * i);
        for (int i = 16; i < 80; ++i) {
            const std::uint64_t s0 = rotr(w[i - 15], 1) ^ rotr(w[i - 15], 8) ^ (w[i - 15] >> 7);
            const std::uint64_t s1 = rotr(w[i - 2], 19) ^ rotr(w[i - 2], 61) ^ (w[i - 2] >> 6);
            w[i] = w[i - 16] + s0 + w[i - 7] + s1;
        }

        std::uint64_t a = state_[0], b = state_[1], c = state_[2], d = state_[3];
        std::uint64_t e = state_[4], f = state_[5], g = state_[6], h = state_[7];
        for (int i = 0; i < 80; ++i) {
            const std::uint64_t s1 = rotr(e, 14) ^ rotr(e, 18) ^ rotr(e, 41);
            const std::uint64_t ch = (e & f) ^ (~e & g);
            const std::uint64_t t1 = h + s1 + ch + k[i] + w[i];
            const std::uint64_t s0 = rotr(a, 28) ^ rotr(a, 34) ^ rotr(a, 39);
            const std::uint64_t maj = (a & b) ^ (a & c) ^ (b & c);
            const std::uint64_t t2 = s0 + maj;
            h = g;
            g = f;
            f = e;
            e = d + t1;
            d = c;
            c = b;
            b = a;
            a = t1 + t2;
        }
        state_[0] += a;
        state_[1] += b;
        state_[2] += c;
        state_[3] += d;
        state_[4] += e;
        state_[5] += f;
        state_[6] += g;
        state_[7] += h;
    }

    std::array<std::uint64_t, 8> state_{};
    std::array<std::uint8_t, kBlockSize> buffer_{};
    std::size_t buffer_len_ = 0;
    std::uint64_t total_len_ = 0;
};

inline Sha512::Digest hmac_sha512(std::span<const std::uint8_t> key,
                                  std::span<const std::uint8_t> message) {
    constexpr std::size_t block = 128;
    std::array<std::uint8_t, block> k{};
    if (key.size() > block) {
        const auto d = Sha512::hash(key);
        std::memcpy(k.data(), d.data(), d.size());
    } else {
        std::memcpy(k.data(), key.data(), key.size());
    }
    std::array<std::uint8_t, block> ipad{}, opad{};
    for (std::size_t i = 0; i < block; ++i) {
        ipad[i] = k[i] ^ 0x36;
        opad[i] = k[i] ^ 0x5c;
    }
    Sha512 inner;
    inner.update(ipad);
    inner.update(message);
    const auto inner_digest = inner.finish();
    Sha512 outer;
    outer.update(opad);
    outer.update(inner_digest);
    return outer.finish();
}

// HKDF-SHA512 extract-and-expand.
inline std::vector<std::uint8_t> hkdf_sha512(std::span<const std::uint8_t> ikm,
                                             std::span<const std::uint8_t> salt,
                                             std::span<const std::uint8_t> info,
                                             std::size_t length) {
    if (length > 255 * Sha512::kDigestSize)
        throw std::invalid_argument("hkdf_sha512: output length too large");
    const auto prk = hmac_sha512(salt, ikm);

    std::vector<std::uint8_t> okm;
    okm.reserve(length);
    std::vector<std::uint8_t> t;
    std::uint8_t counter = 1;
    while (okm.size() < length) {
        std::vector<std::uint8_t> block(t);
        block.insert(block.end(), info.begin(), info.end());
        block.push_back(counter++);
        const auto digest = hmac_sha512(prk, block);
        t.assign(digest.begin(), digest.end());
        const std::size_t take = std::min(t.size(), length - okm.size());
        okm.insert(okm.end(), t.begin(), t.begin() + take);
    }
    return okm;
}

inline std::string hex_digest(std::span<const std::uint8_t> bytes) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    out.reserve(bytes.size() * 2);
    for (std::uint8_t b : bytes) {
        out.push_back(digits[b >> 4]);
        out.push_back(digits[b & 0xf]);
    }
    return out;
}

}  // namespace exitaudit
