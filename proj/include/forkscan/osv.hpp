#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "forkscan/graph.hpp"

namespace forkscan {

enum class EventKind { introduced, fixed, limit, last_affected };
inline constexpr EventKind kAllEventKinds[] = {EventKind::introduced, EventKind::fixed,
                                               EventKind::limit, EventKind::last_affected};

std::string_view event_key(EventKind kind);
std::optional<EventKind> parse_event_key(std::string_view key);

/// One advisory event. An empty commit stands for the "0" token, which is
/// only meaningful under `introduced`.
struct VulnEvent {
    EventKind kind;
    std::optional<CommitId> commit;
};

enum class RejectReason {
    bad_sha,
    no_intro,
    dup_event,
    missing_commit,
    no_roots,
    unknown_repo,
    cherry_conflict,
};

std::string_view reason_code(RejectReason reason);
std::optional<RejectReason> parse_reason_code(std::string_view code);

/// A Git range of an advisory. `index` is the position of the range among
/// the advisory's GIT ranges in input order; it survives rejection of
/// sibling ranges so that (vuln_id, index) stays a stable key.
struct VulnRange {
    std::string vuln_id;
    std::string repo_url;
    std::size_t index = 0;
    bool intro_zero = false;
    CommitSet intro;
    CommitSet fixed;
    CommitSet limit;
    CommitSet last;
    /// Formatting problems seen while parsing (bad or misplaced shas).
    std::vector<std::string> defects;

    CommitSet& events(EventKind kind);
    const CommitSet& events(EventKind kind) const;

    friend bool operator==(const VulnRange&, const VulnRange&) = default;
};

struct SeverityEntry {
    std::string type;
    std::string score;
};

struct Vulnerability {
    std::string id;
    std::vector<VulnRange> ranges;
    std::vector<SeverityEntry> severity;
    std::optional<double> severity_score;
    std::string severity_source;
};

struct Rejection {
    std::string vuln_id;
    std::size_t range_index = 0;
    RejectReason reason;
    std::string detail;
};

struct CleaningReport {
    std::size_t accepted = 0;
    std::vector<Rejection> rejected;

    std::size_t total() const { return accepted + rejected.size(); }
    std::size_t count(RejectReason reason) const;
};

struct ParsedAdvisories {
    std::vector<Vulnerability> vulnerabilities;
    std::size_t records = 0;
    std::size_t skipped_records = 0;
    std::size_t dropped_without_git = 0;
    std::vector<std::string> warnings;
};

/// Reads newline-delimited OSV-style records, keeping GIT ranges only.
ParsedAdvisories parse_vulnerabilities(std::istream& in);

/// Whole-range rejection of ranges carrying parse defects, reused commits
/// across event kinds, or commits unknown to the graph.
std::pair<std::vector<Vulnerability>, CleaningReport> clean_ranges(
    std::vector<Vulnerability> vulns, const CommitGraph& graph);

struct RangeOutcome {
    VulnRange range;
    std::optional<RejectReason> rejected;
    std::string detail;

    bool ok() const { return !rejected.has_value(); }
};

/// Replaces the "0" introduction by the parentless commits of the repository.
RangeOutcome expand_zero_intro(VulnRange range, const CommitGraph& graph,
                               const std::vector<bool>& repo_membership);
RangeOutcome expand_zero_intro(VulnRange range, const CommitGraph& graph,
                               const CommitSet& repo_membership);

/// Adds every commit whose trailer cites an event commit to that event's
/// set, transitively.
RangeOutcome augment_cherry_picks(VulnRange range, const CommitGraph& graph);

/// Highest parsable score among the record's severity entries.
std::optional<double> severity_of(const Vulnerability& v);

/// Resolves a repository URL to its commit membership, or nullptr if the
/// URL is not a known origin.
using MembershipLookup = std::function<const std::vector<bool>*(const std::string& url)>;

/// clean_ranges, then zero expansion and cherry-pick augmentation. Every
/// input range is accounted for exactly once in the report.
std::pair<std::vector<Vulnerability>, CleaningReport> prepare_ranges(
    std::vector<Vulnerability> vulns, const CommitGraph& graph, const MembershipLookup& membership);

/// Lowercased URL without trailing slashes or ".git" suffix.
std::string canonical_repo_url(std::string_view url);

/// Prepared-range persistence (one JSON document per vulnerability per line).
void write_vulnerabilities(std::ostream& out, const std::vector<Vulnerability>& vulns);
std::vector<Vulnerability> read_vulnerabilities(std::istream& in);

}  // namespace forkscan
