#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "forkscan/equivalence.hpp"
#include "forkscan/forks.hpp"
#include "forkscan/graph.hpp"
#include "forkscan/osv.hpp"
#include "forkscan/propagation.hpp"

namespace forkscan {

/// Files of a state directory:
///   commits.tsv, origins.tsv       copies of the inputs
///   vulns.jsonl                    prepared ranges
///   cleaning_report.json
///   labeling.tsv                   vuln_id, range_index, sha (propagate)
///   pairs.tsv, cascade_report.json, impacted.tsv (analyze)
///   final_labeling.tsv, equivalent_fixes.tsv     (analyze, after equivalence)
namespace state_files {
inline constexpr const char* commits = "commits.tsv";
inline constexpr const char* origins = "origins.tsv";
inline constexpr const char* vulns = "vulns.jsonl";
inline constexpr const char* cleaning = "cleaning_report.json";
inline constexpr const char* labeling = "labeling.tsv";
inline constexpr const char* pairs = "pairs.tsv";
inline constexpr const char* cascade = "cascade_report.json";
inline constexpr const char* impacted = "impacted.tsv";
inline constexpr const char* final_labeling = "final_labeling.tsv";
inline constexpr const char* equivalent_fixes = "equivalent_fixes.tsv";
}  // namespace state_files

struct IngestOptions {
    std::filesystem::path commits;
    std::filesystem::path origins;
    std::filesystem::path advisories;
    std::filesystem::path out;
};

struct IngestSummary {
    std::size_t commits = 0;
    std::size_t edges = 0;
    std::size_t origins = 0;
    std::size_t records = 0;
    std::size_t vulnerabilities = 0;
    CleaningReport cleaning;
    std::vector<std::string> warnings;
};

IngestSummary ingest(const IngestOptions& options);

struct PropagateOptions {
    std::filesystem::path state;
    unsigned threads = 1;
    Worklist worklist = Worklist::stack;
    bool reverse_children = false;
};

struct PropagateSummary {
    std::size_t ranges = 0;
    std::size_t labeled_commits = 0;
    std::size_t labels = 0;
};

PropagateSummary propagate(const PropagateOptions& options);

struct AnalyzeOptions {
    std::filesystem::path state;
    std::uint64_t min_stars = kDefaultMinStars;
    std::uint64_t min_forks = kDefaultMinForks;
    ScopeOptions scope;
    std::optional<std::filesystem::path> manifests;
    std::optional<std::filesystem::path> diffs;
    unsigned threads = 1;
};

struct AnalyzeSummary {
    CascadeReport report;
    std::vector<PairRecord> survivors;
    std::vector<EquivalentFix> injected;
    std::vector<std::string> impacted_forks;
    std::vector<std::string> warnings;
};

AnalyzeSummary analyze(const AnalyzeOptions& options);

struct ExportSummary {
    std::size_t commit_rows = 0;
    std::size_t origin_rows = 0;
};

ExportSummary export_state(const std::filesystem::path& state, const std::filesystem::path& out);

/// "YYYY-MM-DD" (UTC midnight) or a plain epoch-seconds integer.
std::int64_t parse_date(const std::string& text);

void write_labeling(std::ostream& out, const CommitGraph& graph, const VulnerabilityLabeling& labeling);
/// Every range of `vulns` gets a slot, listed or not.
VulnerabilityLabeling read_labeling(std::istream& in, const CommitGraph& graph,
                                    const std::vector<Vulnerability>& vulns);

void write_pairs(std::ostream& out, const std::vector<PairRecord>& pairs);
std::vector<PairRecord> read_pairs(std::istream& in);

std::string cascade_report_json(const CascadeReport& report);
std::string cleaning_report_json(const IngestSummary& summary);

/// One line per (upstream, fork, fork-only labeled commit, range).
struct ImpactedCommit {
    std::string upstream_url;
    std::string fork_url;
    CommitId commit;
    RangeKey range;
};

std::vector<ImpactedCommit> impacted_commits(const CommitGraph& graph, const VulnerabilityLabeling& labeling,
                                             const std::vector<Vulnerability>& vulns,
                                             const std::vector<OriginRecord>& origins);

}  // namespace forkscan
