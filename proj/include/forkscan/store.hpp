#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "forkscan/commit_id.hpp"
#include "forkscan/forks.hpp"
#include "forkscan/graph.hpp"
#include "forkscan/osv.hpp"
#include "forkscan/propagation.hpp"

namespace forkscan {

struct CommitRow {
    CommitId sha;
    std::string vuln_id;
    std::size_t range_index = 0;

    friend bool operator==(const CommitRow&, const CommitRow&) = default;
};

struct OriginRow {
    std::string url;
    std::string branch;
    CommitId head;
    std::string vuln_id;
    std::optional<double> severity;
    /// "stage:pass|stage:fail:reason", empty when the pair was never filtered.
    std::string survived_filters;

    friend bool operator==(const OriginRow&, const OriginRow&) = default;
};

struct OriginBranchRow {
    std::string url;
    std::string branch;
    CommitId head;
    bool is_default = false;
};

/// The exported database. Files in a store directory:
///   commit_vulns.csv     sha,vuln_id,range_index
///   origin_vulns.csv     url,branch,head_sha,vuln_id,severity,survived_filters
///   vulns.csv            vuln_id,severity
///   origins.csv          url,branch,head_sha,is_default
///   indexed_commits.bin  sorted 20-byte ids of every commit the labeling covered
struct VulnStore {
    std::vector<CommitRow> commits;       // sorted by (sha, vuln_id, range_index)
    std::vector<OriginRow> origins;       // sorted by (url, branch, vuln_id)
    std::map<std::string, std::optional<double>> severities;
    std::vector<OriginBranchRow> branches;  // sorted by (url, branch)
    std::vector<CommitId> indexed;          // sorted
};

std::string format_verdicts(const std::vector<Verdict>& verdicts);

/// Builds the tables. Origin rows come from the heads vulnerable under
/// `labeling`; when several ranges of one vulnerability hit the same head the
/// row takes the verdicts of a pair that survived every stage if there is
/// one, else of the lowest range index.
VulnStore build_store(const CommitGraph& graph, const VulnerabilityLabeling& labeling,
                      const std::vector<Vulnerability>& vulns, const std::vector<OriginRecord>& origins,
                      const std::vector<PairRecord>& pairs);

void write_store(const VulnStore& store, const std::filesystem::path& dir);
VulnStore load_store(const std::filesystem::path& dir);

inline void export_store(const std::filesystem::path& dir, const CommitGraph& graph,
                         const VulnerabilityLabeling& labeling, const std::vector<Vulnerability>& vulns,
                         const std::vector<OriginRecord>& origins, const std::vector<PairRecord>& pairs) {
    write_store(build_store(graph, labeling, vulns, origins, pairs), dir);
}

enum class IndexStatus { not_indexed, clean, vulnerable };
const char* status_name(IndexStatus s);

struct VulnHit {
    std::string vuln_id;
    std::optional<double> severity;

    friend bool operator==(const VulnHit&, const VulnHit&) = default;
};

struct CommitLookup {
    IndexStatus status = IndexStatus::not_indexed;
    std::vector<VulnHit> hits;  // one per vulnerability, sorted by id
};

CommitLookup lookup_commit(const VulnStore& store, const CommitId& sha);
/// Throws InvalidCommitId on a malformed sha.
CommitLookup lookup_commit(const VulnStore& store, const std::string& sha);

struct BranchStatus {
    std::string branch;
    CommitId head;
    bool is_default = false;
    std::vector<OriginRow> vulns;
};

struct OriginLookup {
    bool indexed = false;
    std::vector<BranchStatus> branches;  // sorted by name
};

OriginLookup lookup_origin(const VulnStore& store, const std::string& url);

struct ScanEntry {
    std::string locator;
    std::optional<CommitId> commit;  // nullopt: unresolved
    IndexStatus status = IndexStatus::not_indexed;
    std::vector<VulnHit> hits;
};

struct ScanReport {
    std::string manifest;
    std::vector<ScanEntry> entries;

    std::size_t hit_count() const;
    std::size_t unresolved_count() const;
};

void write_scan_report(std::ostream& out, const ScanReport& report);

struct Submodule {
    std::string name;
    std::string path;
    std::string url;
};

/// Parses a .gitmodules file.
std::vector<Submodule> parse_gitmodules(std::istream& in);
/// "path<TAB>sha" lines.
std::map<std::string, CommitId> parse_pins(std::istream& in);

ScanReport scan_gitmodules(const std::string& manifest, const std::vector<Submodule>& modules,
                           const std::map<std::string, CommitId>& pins, const VulnStore& store);

struct GoRequirement {
    std::string module;
    std::string version;
    bool indirect = false;
};

/// Requirements of a go.mod file, single-line and block form. Throws
/// ParseError on a malformed requirement line.
std::vector<GoRequirement> parse_gomod(std::istream& in);

using GoResolution = std::map<std::pair<std::string, std::string>, CommitId>;
/// "module<TAB>version<TAB>sha" lines.
GoResolution parse_resolution(std::istream& in);

ScanReport scan_gomod(const std::string& manifest, const std::vector<GoRequirement>& requirements,
                      const GoResolution& resolution, const VulnStore& store);

}  // namespace forkscan
