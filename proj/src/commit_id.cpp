#include "forkscan/commit_id.hpp"

#include "forkscan/error.hpp"

namespace forkscan {
namespace {

constexpr char kHexDigits[] = "0123456789abcdef";

int nibble(char c, bool allow_upper) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (allow_upper && c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
}

std::optional<CommitId> parse_impl(std::string_view hex, bool allow_upper) {
    if (hex.size() != CommitId::kHexLength) return std::nullopt;
    std::array<std::uint8_t, CommitId::kBytes> bytes{};
    for (std::size_t i = 0; i < CommitId::kBytes; ++i) {
        const int hi = nibble(hex[2 * i], allow_upper);
        const int lo = nibble(hex[2 * i + 1], allow_upper);
        if (hi < 0 || lo < 0) return std::nullopt;
        bytes[i] = static_cast<std::uint8_t>((hi << 4) | lo);
    }
    return CommitId(bytes);
}

}  // namespace

std::optional<CommitId> CommitId::parse(std::string_view hex) { return parse_impl(hex, false); }

std::optional<CommitId> CommitId::parse_relaxed(std::string_view hex) {
    return parse_impl(hex, true);
}

CommitId CommitId::from_hex(std::string_view hex) {
    if (auto id = parse(hex)) return *id;
    throw InvalidCommitId("invalid commit id '" + std::string(hex) + "'");
}

std::string CommitId::hex() const {
    std::string out;
    out.reserve(kHexLength);
    append_hex(out);
    return out;
}

void CommitId::append_hex(std::string& out) const {
    for (std::uint8_t b : bytes_) {
        out.push_back(kHexDigits[b >> 4]);
        out.push_back(kHexDigits[b & 0xf]);
    }
}

bool is_commit_hex(std::string_view text) { return CommitId::parse(text).has_value(); }

}  // namespace forkscan
