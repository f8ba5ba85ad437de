#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "forkscan/error.hpp"
#include "forkscan/graph.hpp"
#include "forkscan/osv.hpp"
#include "forkscan/propagation.hpp"

namespace forkscan {

struct Branch {
    std::string name;
    CommitId head;
    bool is_default = false;
};

/// A hosted repository and its branch heads. Unknown metadata is nullopt.
struct OriginRecord {
    std::string url;
    std::vector<Branch> branches;
    std::optional<std::uint64_t> stars;
    std::optional<std::uint64_t> forks_count;
    bool archived = false;
    std::optional<std::int64_t> last_commit_date;

    const Branch* default_branch() const;
    const Branch* branch(const std::string& name) const;
};

/// Reads origins.tsv. Lines of the same url are merged into one record; their
/// metadata columns must agree. Records come back sorted by url.
std::vector<OriginRecord> load_origins(std::istream& in);
std::vector<OriginRecord> load_origins_file(const std::filesystem::path& path);
void write_origins(std::ostream& out, const std::vector<OriginRecord>& origins);

/// Throws UnknownCommit if a branch head is missing from the graph.
void validate_origins(const CommitGraph& graph, const std::vector<OriginRecord>& origins);

const OriginRecord* find_origin(const std::vector<OriginRecord>& origins, const std::string& url);

/// Everything reachable from any branch head of the origin.
std::vector<bool> origin_membership(const CommitGraph& graph, const OriginRecord& origin);

struct SharedCommitEvidence {
    std::string first_url;
    std::string second_url;
    CommitId commit;
};

struct EcosystemPartition {
    std::vector<std::vector<std::string>> groups;
    /// One shared commit for every union that joined two groups.
    std::vector<SharedCommitEvidence> evidence;

    std::optional<std::size_t> group_of(const std::string& url) const;
};

EcosystemPartition fork_ecosystems(const CommitGraph& graph, const std::vector<OriginRecord>& origins);

/// Forks of `upstream_url` with at least one labeled commit outside the
/// upstream history. Throws Error if the upstream is not an origin.
std::vector<std::string> impacted_forks(const CommitGraph& graph, const VulnerabilityLabeling& labeling,
                                        const std::vector<OriginRecord>& origins,
                                        const std::string& upstream_url);
std::vector<std::string> impacted_forks(const CommitGraph& graph, const VulnerabilityLabeling& labeling,
                                        const std::vector<OriginRecord>& origins,
                                        const EcosystemPartition& partition,
                                        const std::string& upstream_url);

struct Verdict {
    std::string stage;
    bool passed = true;
    std::string reason;

    friend bool operator==(const Verdict&, const Verdict&) = default;
};

/// A <fork, vulnerability range> candidate and its history through the filters.
struct PairRecord {
    std::string origin_url;
    std::string branch;
    std::string vuln_id;
    std::size_t range_index = 0;
    CommitId head;
    std::vector<Verdict> verdicts;

    bool failed() const;
    RangeKey key() const { return {vuln_id, range_index}; }

    friend bool operator==(const PairRecord&, const PairRecord&) = default;
};

/// Orders by (url, vuln_id, branch, range_index).
void sort_pairs(std::vector<PairRecord>& pairs);

/// One record per (origin, branch, range) whose head is vulnerable under the range.
std::vector<PairRecord> unpatched_heads(const CommitGraph& graph, const VulnerabilityLabeling& labeling,
                                        const std::vector<OriginRecord>& origins);

struct FilterResult {
    std::vector<PairRecord> passed;
    std::vector<PairRecord> failed;
};

inline constexpr std::uint64_t kDefaultMinStars = 100;
inline constexpr std::uint64_t kDefaultMinForks = 10;
inline constexpr double kDefaultMinSeverity = 7.0;
/// 2023-01-01T00:00:00Z
inline constexpr std::int64_t kDefaultDateCutoff = 1672531200;

/// Strictly more than `min_stars` stars and `min_forks` forks.
FilterResult filter_popularity(std::vector<PairRecord> pairs, const std::vector<OriginRecord>& origins,
                               std::uint64_t min_stars = kDefaultMinStars,
                               std::uint64_t min_forks = kDefaultMinForks);

struct ScopeOptions {
    double min_severity = kDefaultMinSeverity;
    std::int64_t date_cutoff = kDefaultDateCutoff;
};

/// Severity, archival, default-branch, recent-activity and cross-reference checks.
FilterResult filter_scope(std::vector<PairRecord> pairs, const std::vector<Vulnerability>& vulns,
                          const std::vector<OriginRecord>& origins, const CommitGraph& graph,
                          const VulnerabilityLabeling& labeling, const ScopeOptions& options = {});

class InspectError : public Error {
public:
    using Error::Error;
};

struct PathChange {
    std::string path;
    /// Previous name when the change is a rename.
    std::optional<std::string> renamed_from;

    friend bool operator==(const PathChange&, const PathChange&) = default;
};

/// Source of file-level facts about commits. Implementations throw
/// InspectError when they cannot answer.
class RepositoryInspector {
public:
    virtual ~RepositoryInspector() = default;

    /// Files modified by `commit` (merges: against the first parent).
    virtual std::vector<PathChange> touched_paths(const CommitId& commit) = 0;
    /// Every file path in the tree of `head` as seen in `origin_url`.
    virtual std::vector<std::string> tree_paths(const std::string& origin_url, const CommitId& head) = 0;
    virtual bool thread_safe() const { return false; }
};

/// Reads pre-exported manifests:
///   <dir>/commits/<sha>.paths  touched paths, "old -> new" (or "old → new") for renames
///   <dir>/trees/<sha>.paths    paths of a head tree
class ManifestInspector : public RepositoryInspector {
public:
    explicit ManifestInspector(std::filesystem::path root) : root_(std::move(root)) {}

    std::vector<PathChange> touched_paths(const CommitId& commit) override;
    std::vector<std::string> tree_paths(const std::string& origin_url, const CommitId& head) override;
    bool thread_safe() const override { return true; }

private:
    std::filesystem::path root_;
};

std::vector<PathChange> parse_touched_paths(std::istream& in);

/// Asks git in local clones. `clones` maps canonical origin urls to working
/// directories; commits are looked up in every clone until one knows them.
class GitInspector : public RepositoryInspector {
public:
    explicit GitInspector(std::map<std::string, std::filesystem::path> clones);

    std::vector<PathChange> touched_paths(const CommitId& commit) override;
    std::vector<std::string> tree_paths(const std::string& origin_url, const CommitId& head) override;

private:
    std::map<std::string, std::filesystem::path> clones_;
};

/// Drops a pair when any path modified by the range's fixed commits is absent
/// from the fork head. Inspection failures keep the pair.
FilterResult filter_divergence(std::vector<PairRecord> pairs, const std::vector<Vulnerability>& vulns,
                               RepositoryInspector& inspector);

struct StageCount {
    std::string stage;
    std::size_t input = 0;
    std::size_t passed = 0;
    std::size_t failed = 0;
    std::map<std::string, std::size_t> reasons;
};

struct CascadeReport {
    std::size_t input = 0;
    std::vector<StageCount> stages;
    std::size_t survivors = 0;

    /// Every input pair is either a survivor or failed exactly one stage.
    bool reconciles() const;
};

struct CascadeOptions {
    std::uint64_t min_stars = kDefaultMinStars;
    std::uint64_t min_forks = kDefaultMinForks;
    ScopeOptions scope;
    /// Divergence stage is skipped when null.
    RepositoryInspector* inspector = nullptr;
};

struct CascadeResult {
    std::vector<PairRecord> survivors;
    /// Every input pair, in stable order, carrying its verdicts.
    std::vector<PairRecord> all;
    CascadeReport report;
};

CascadeResult run_cascade(std::vector<PairRecord> pairs, const std::vector<Vulnerability>& vulns,
                          const std::vector<OriginRecord>& origins, const CommitGraph& graph,
                          const VulnerabilityLabeling& labeling, const CascadeOptions& options);

/// Appends one stage's accounting to `report`.
void account_stage(CascadeReport& report, const std::string& stage, const FilterResult& result);

}  // namespace forkscan
