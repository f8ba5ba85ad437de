#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "forkscan/commit_id.hpp"
#include "forkscan/error.hpp"
#include "forkscan/osv.hpp"
#include "forkscan/propagation.hpp"

namespace forkscan {

class DiffError : public Error {
public:
    using Error::Error;
};

/// SHA-1 of a canonicalized diff.
struct PatchId {
    std::array<std::uint8_t, 20> digest{};

    std::string hex() const;
    friend bool operator==(const PatchId&, const PatchId&) = default;
    friend auto operator<=>(const PatchId&, const PatchId&) = default;
};

/// Canonical form hashed by patch_id: per file the "--- old\n+++ new\n" pair,
/// then the '+'/'-' payload lines in order with horizontal whitespace runs
/// collapsed to one space. Text before the first file header (commit
/// message, "diff --git", index and mode lines) and hunk headers and context
/// lines are dropped. Throws DiffError on malformed hunks or when the input
/// contains no file.
std::string canonical_diff(std::string_view diff);
PatchId patch_id(std::string_view diff);

struct DiffRecord {
    CommitId commit;
    std::string diff;
};

/// Diffs file: repeated "<sha> <byte length>\n<payload>" records. Newlines
/// between records are ignored.
std::vector<DiffRecord> read_diffs(std::istream& in);
void write_diffs(std::ostream& out, std::span<const DiffRecord> records);

/// Every *.diffs file under `dir`, merged. The same commit may appear twice
/// only with the same payload.
std::map<CommitId, std::string> read_diff_corpus(const std::filesystem::path& dir);

struct FixDiff {
    RangeKey range;
    CommitId fix;
    std::string diff;
};

struct EquivalentFix {
    RangeKey range;
    CommitId fix;
    CommitId match;

    friend bool operator==(const EquivalentFix&, const EquivalentFix&) = default;
    friend auto operator<=>(const EquivalentFix&, const EquivalentFix&) = default;
};

/// Diffs of the fixed commits of every range. Ranges with a fixed commit
/// missing from the corpus are skipped and reported in `warnings`.
std::vector<FixDiff> collect_fix_diffs(const std::vector<Vulnerability>& vulns,
                                       const std::map<CommitId, std::string>& corpus,
                                       std::vector<std::string>& warnings);

/// Fork commits whose patch id equals that of a fixed commit of a range.
/// Fork commits that are themselves the fix are not reported. Unparseable
/// fork diffs are skipped with a warning. Sorted output.
std::vector<EquivalentFix> detect_equivalent_fix(std::span<const FixDiff> fixes,
                                                 std::span<const DiffRecord> fork_commits,
                                                 std::vector<std::string>& warnings);

struct InjectionResult {
    std::vector<Vulnerability> vulns;
    std::vector<EquivalentFix> injected;
    /// Matches that already carry another event of the range.
    std::vector<EquivalentFix> conflicting;
};

/// Adds every match as a fixed event of its range.
InjectionResult inject_equivalent_fixes(std::vector<Vulnerability> vulns, std::span<const EquivalentFix> matches);

}  // namespace forkscan
