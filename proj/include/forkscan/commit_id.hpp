#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <optional>
#include <string>
#include <string_view>

namespace forkscan {

/// A commit identifier: the 20-byte SHA-1 of a commit object.
///
/// Stored in binary form so that large graphs keep a compact id table; the
/// textual form is always 40 lowercase hex characters.
class CommitId {
public:
    static constexpr std::size_t kBytes = 20;
    static constexpr std::size_t kHexLength = 40;

    CommitId() = default;
    explicit CommitId(const std::array<std::uint8_t, kBytes>& bytes) : bytes_(bytes) {}

    /// Strict parse: exactly 40 chars in [0-9a-f].
    static std::optional<CommitId> parse(std::string_view hex);

    /// Like parse(), but also accepts uppercase hex (advisories are not always normalized).
    static std::optional<CommitId> parse_relaxed(std::string_view hex);

    /// Parses or throws InvalidCommitId.
    static CommitId from_hex(std::string_view hex);

    std::string hex() const;
    void append_hex(std::string& out) const;

    const std::array<std::uint8_t, kBytes>& bytes() const { return bytes_; }

    friend bool operator==(const CommitId&, const CommitId&) = default;
    friend std::strong_ordering operator<=>(const CommitId& a, const CommitId& b) {
        const int c = std::memcmp(a.bytes_.data(), b.bytes_.data(), kBytes);
        return c < 0 ? std::strong_ordering::less
                     : (c > 0 ? std::strong_ordering::greater : std::strong_ordering::equal);
    }

private:
    std::array<std::uint8_t, kBytes> bytes_{};
};

bool is_commit_hex(std::string_view text);

struct CommitIdHash {
    std::size_t operator()(const CommitId& id) const noexcept {
        // SHA-1 output is already uniformly distributed.
        std::uint64_t h;
        std::memcpy(&h, id.bytes().data(), sizeof h);
        return static_cast<std::size_t>(h);
    }
};

}  // namespace forkscan

template <>
struct std::hash<forkscan::CommitId> : forkscan::CommitIdHash {};
