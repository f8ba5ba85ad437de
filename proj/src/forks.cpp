#include "forkscan/forks.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

namespace forkscan {
namespace {

std::vector<std::string_view> split(std::string_view line, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const auto pos = line.find(sep, start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

std::int64_t parse_int(std::string_view field, const char* what, std::size_t line) {
    std::int64_t value = 0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
    if (ec != std::errc{} || ptr != field.data() + field.size()) {
        throw ParseError(std::string("invalid ") + what + " '" + std::string(field) + "'", line);
    }
    return value;
}

bool parse_flag(std::string_view field, const char* what, std::size_t line) {
    if (field == "0") return false;
    if (field == "1") return true;
    throw ParseError(std::string("invalid ") + what + " flag '" + std::string(field) + "'", line);
}

std::optional<std::uint64_t> optional_count(std::int64_t v, const char* what, std::size_t line) {
    if (v == -1) return std::nullopt;
    if (v < 0) throw ParseError(std::string("negative ") + what, line);
    return static_cast<std::uint64_t>(v);
}

std::string trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return std::string(s);
}

struct DisjointSets {
    std::vector<std::size_t> parent;
    explicit DisjointSets(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    std::size_t find(std::size_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    }
    bool unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a == b) return false;
        if (b < a) std::swap(a, b);
        parent[b] = a;
        return true;
    }
};

std::vector<CommitIndex> head_indices(const CommitGraph& graph, const OriginRecord& origin) {
    std::vector<CommitIndex> heads;
    for (const auto& b : origin.branches) heads.push_back(graph.index_of(b.head));
    return heads;
}

const VulnRange* find_range(const std::vector<Vulnerability>& vulns, const RangeKey& key,
                            const Vulnerability** owner = nullptr) {
    for (const auto& v : vulns) {
        if (v.id != key.vuln_id) continue;
        for (const auto& r : v.ranges) {
            if (r.index == key.range_index) {
                if (owner) *owner = &v;
                return &r;
            }
        }
    }
    return nullptr;
}

void add_verdict(PairRecord& pair, const std::string& stage, bool passed, std::string reason) {
    pair.verdicts.push_back({stage, passed, std::move(reason)});
}

std::string run_command(const std::string& command) {
    std::FILE* pipe = ::popen(command.c_str(), "r");
    if (!pipe) throw InspectError("cannot run: " + command);
    std::string out;
    std::array<char, 4096> buffer{};
    std::size_t n;
    while ((n = std::fread(buffer.data(), 1, buffer.size(), pipe)) > 0) out.append(buffer.data(), n);
    const int status = ::pclose(pipe);
    if (status != 0) throw InspectError("command failed: " + command);
    return out;
}

std::string shell_quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) {
        if (c == '\'') {
            out += "'\\''";
        } else {
            out += c;
        }
    }
    return out + "'";
}

}  // namespace

const Branch* OriginRecord::default_branch() const {
    for (const auto& b : branches) {
        if (b.is_default) return &b;
    }
    return nullptr;
}

const Branch* OriginRecord::branch(const std::string& name) const {
    for (const auto& b : branches) {
        if (b.name == name) return &b;
    }
    return nullptr;
}

std::vector<OriginRecord> load_origins(std::istream& in) {
    std::map<std::string, OriginRecord> by_url;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;
        const auto f = split(line, '\t');
        if (f.size() != 8) {
            throw ParseError("expected 8 tab-separated fields, found " + std::to_string(f.size()), line_no);
        }
        if (f[0].empty()) throw ParseError("empty origin url", line_no);
        if (f[1].empty()) throw ParseError("empty branch name", line_no);
        const auto head = CommitId::parse(f[3]);
        if (!head) throw ParseError("invalid head sha '" + std::string(f[3]) + "'", line_no);

        OriginRecord meta;
        meta.url = std::string(f[0]);
        meta.stars = optional_count(parse_int(f[4], "stars", line_no), "stars", line_no);
        meta.forks_count = optional_count(parse_int(f[5], "forks", line_no), "forks", line_no);
        meta.archived = parse_flag(f[6], "archived", line_no);
        const auto date = parse_int(f[7], "last_commit_date", line_no);
        if (date != -1) meta.last_commit_date = date;

        const std::string key = canonical_repo_url(meta.url);
        auto [it, inserted] = by_url.try_emplace(key, meta);
        OriginRecord& origin = it->second;
        if (!inserted && (origin.stars != meta.stars || origin.forks_count != meta.forks_count ||
                          origin.archived != meta.archived ||
                          origin.last_commit_date != meta.last_commit_date)) {
            throw ParseError("conflicting metadata for origin " + meta.url, line_no);
        }
        Branch b{std::string(f[1]), *head, parse_flag(f[2], "is_default", line_no)};
        if (origin.branch(b.name)) throw ParseError("duplicate branch " + b.name + " for " + meta.url, line_no);
        if (b.is_default && origin.default_branch()) {
            throw ParseError("second default branch for " + meta.url, line_no);
        }
        origin.branches.push_back(std::move(b));
    }
    std::vector<OriginRecord> out;
    for (auto& [url, origin] : by_url) {
        std::sort(origin.branches.begin(), origin.branches.end(),
                  [](const Branch& a, const Branch& b) { return a.name < b.name; });
        out.push_back(std::move(origin));
    }
    return out;
}

std::vector<OriginRecord> load_origins_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    return load_origins(in);
}

void write_origins(std::ostream& out, const std::vector<OriginRecord>& origins) {
    for (const auto& o : origins) {
        for (const auto& b : o.branches) {
            out << o.url << '\t' << b.name << '\t' << (b.is_default ? 1 : 0) << '\t' << b.head.hex() << '\t'
                << (o.stars ? static_cast<std::int64_t>(*o.stars) : -1) << '\t'
                << (o.forks_count ? static_cast<std::int64_t>(*o.forks_count) : -1) << '\t'
                << (o.archived ? 1 : 0) << '\t' << o.last_commit_date.value_or(-1) << '\n';
        }
    }
}

void validate_origins(const CommitGraph& graph, const std::vector<OriginRecord>& origins) {
    for (const auto& o : origins) {
        for (const auto& b : o.branches) {
            if (!graph.contains(b.head)) {
                throw UnknownCommit("head " + b.head.hex() + " of " + o.url + " (" + b.name +
                                    ") is not in the graph");
            }
        }
    }
}

const OriginRecord* find_origin(const std::vector<OriginRecord>& origins, const std::string& url) {
    const std::string key = canonical_repo_url(url);
    for (const auto& o : origins) {
        if (canonical_repo_url(o.url) == key) return &o;
    }
    return nullptr;
}

std::vector<bool> origin_membership(const CommitGraph& graph, const OriginRecord& origin) {
    return reachable_mask(graph, head_indices(graph, origin));
}

std::optional<std::size_t> EcosystemPartition::group_of(const std::string& url) const {
    const std::string key = canonical_repo_url(url);
    for (std::size_t g = 0; g < groups.size(); ++g) {
        for (const auto& u : groups[g]) {
            if (canonical_repo_url(u) == key) return g;
        }
    }
    return std::nullopt;
}

EcosystemPartition fork_ecosystems(const CommitGraph& graph, const std::vector<OriginRecord>& origins) {
    // Each commit remembers the first origin that walked over it. A later
    // origin reaching an owned commit joins the owner's group and stops
    // there: everything behind that commit is already shared with the owner.
    constexpr std::uint32_t kNone = UINT32_MAX;
    std::vector<std::uint32_t> owner(graph.size(), kNone);
    DisjointSets sets(origins.size());
    EcosystemPartition out;
    std::vector<CommitIndex> stack;
    for (std::uint32_t o = 0; o < origins.size(); ++o) {
        stack.clear();
        auto visit = [&](CommitIndex c) {
            if (owner[c] == kNone) {
                owner[c] = o;
                stack.push_back(c);
            } else if (owner[c] != o && sets.unite(owner[c], o)) {
                out.evidence.push_back({origins[owner[c]].url, origins[o].url, graph.id(c)});
            }
        };
        for (CommitIndex h : head_indices(graph, origins[o])) visit(h);
        while (!stack.empty()) {
            const CommitIndex c = stack.back();
            stack.pop_back();
            for (CommitIndex p : graph.parents(c)) visit(p);
        }
    }
    std::map<std::size_t, std::vector<std::string>> groups;
    for (std::size_t o = 0; o < origins.size(); ++o) groups[sets.find(o)].push_back(origins[o].url);
    for (auto& [root, urls] : groups) {
        std::sort(urls.begin(), urls.end());
        out.groups.push_back(std::move(urls));
    }
    std::sort(out.groups.begin(), out.groups.end());
    return out;
}

std::vector<std::string> impacted_forks(const CommitGraph& graph, const VulnerabilityLabeling& labeling,
                                        const std::vector<OriginRecord>& origins,
                                        const std::string& upstream_url) {
    return impacted_forks(graph, labeling, origins, fork_ecosystems(graph, origins), upstream_url);
}

std::vector<std::string> impacted_forks(const CommitGraph& graph, const VulnerabilityLabeling& labeling,
                                        const std::vector<OriginRecord>& origins,
                                        const EcosystemPartition& partition,
                                        const std::string& upstream_url) {
    const OriginRecord* upstream = find_origin(origins, upstream_url);
    if (!upstream) throw Error("upstream " + upstream_url + " is not a known origin");
    const auto group = partition.group_of(upstream->url);
    const auto upstream_mask = origin_membership(graph, *upstream);

    std::vector<std::string> out;
    std::vector<bool> seen(graph.size(), false);
    std::vector<CommitIndex> stack;
    for (const auto& url : partition.groups.at(*group)) {
        if (canonical_repo_url(url) == canonical_repo_url(upstream->url)) continue;
        const OriginRecord* fork = find_origin(origins, url);
        // Walk the fork's history but never descend into upstream commits:
        // their ancestors are upstream commits too.
        std::fill(seen.begin(), seen.end(), false);
        stack.clear();
        bool impacted = false;
        for (CommitIndex h : head_indices(graph, *fork)) {
            if (!upstream_mask[h] && !seen[h]) {
                seen[h] = true;
                stack.push_back(h);
            }
        }
        while (!stack.empty() && !impacted) {
            const CommitIndex c = stack.back();
            stack.pop_back();
            if (labeling.is_labeled(c)) impacted = true;
            for (CommitIndex p : graph.parents(c)) {
                if (!upstream_mask[p] && !seen[p]) {
                    seen[p] = true;
                    stack.push_back(p);
                }
            }
        }
        if (impacted) out.push_back(url);
    }
    return out;
}

bool PairRecord::failed() const {
    return std::any_of(verdicts.begin(), verdicts.end(), [](const Verdict& v) { return !v.passed; });
}

void sort_pairs(std::vector<PairRecord>& pairs) {
    std::stable_sort(pairs.begin(), pairs.end(), [](const PairRecord& a, const PairRecord& b) {
        return std::tie(a.origin_url, a.vuln_id, a.branch, a.range_index) <
               std::tie(b.origin_url, b.vuln_id, b.branch, b.range_index);
    });
}

std::vector<PairRecord> unpatched_heads(const CommitGraph& graph, const VulnerabilityLabeling& labeling,
                                        const std::vector<OriginRecord>& origins) {
    std::vector<PairRecord> out;
    for (const auto& o : origins) {
        for (const auto& b : o.branches) {
            const CommitIndex head = graph.index_of(b.head);
            for (auto slot : labeling.ranges_of(head)) {
                const auto& key = labeling.keys()[slot];
                out.push_back({o.url, b.name, key.vuln_id, key.range_index, b.head, {}});
            }
        }
    }
    sort_pairs(out);
    return out;
}

FilterResult filter_popularity(std::vector<PairRecord> pairs, const std::vector<OriginRecord>& origins,
                               std::uint64_t min_stars, std::uint64_t min_forks) {
    FilterResult out;
    for (auto& pair : pairs) {
        const OriginRecord* o = find_origin(origins, pair.origin_url);
        std::string reason;
        if (!o || !o->stars || !o->forks_count) {
            reason = "no-metadata";
        } else if (!(*o->stars > min_stars)) {
            reason = "low-stars";
        } else if (!(*o->forks_count > min_forks)) {
            reason = "low-forks";
        }
        add_verdict(pair, "popularity", reason.empty(), reason);
        (reason.empty() ? out.passed : out.failed).push_back(std::move(pair));
    }
    return out;
}

FilterResult filter_scope(std::vector<PairRecord> pairs, const std::vector<Vulnerability>& vulns,
                          const std::vector<OriginRecord>& origins, const CommitGraph& graph,
                          const VulnerabilityLabeling& labeling, const ScopeOptions& options) {
    FilterResult out;
    for (auto& pair : pairs) {
        const OriginRecord* o = find_origin(origins, pair.origin_url);
        const Vulnerability* v = nullptr;
        find_range(vulns, pair.key(), &v);
        std::string reason;
        if (!v || !v->severity_score) {
            reason = "no-severity";
        } else if (*v->severity_score < options.min_severity) {
            reason = "low-severity";
        } else if (!o) {
            reason = "no-metadata";
        } else if (o->archived) {
            reason = "archived";
        } else if (!o->default_branch() || o->default_branch()->name != pair.branch) {
            reason = "non-default-branch";
        } else if (!o->last_commit_date) {
            reason = "no-metadata";
        } else if (*o->last_commit_date < options.date_cutoff) {
            reason = "stale";
        } else {
            // Cross-referenced: a sibling range of the same vulnerability
            // covers the head's history and considers the head patched.
            const CommitIndex head = graph.index_of(pair.head);
            std::vector<CommitIndex> self{head};
            std::vector<bool> history;
            for (const auto& sibling : v->ranges) {
                if (sibling.index == pair.range_index) continue;
                const auto slot = labeling.slot_of({v->id, sibling.index});
                if (!slot || labeling.is_vulnerable(head, *slot)) continue;
                if (history.empty()) history = reachable_mask(graph, self);
                const bool covered = std::any_of(sibling.intro.begin(), sibling.intro.end(), [&](const CommitId& c) {
                    const auto idx = graph.find(c);
                    return idx && history[*idx];
                });
                if (covered) {
                    reason = "cross-referenced:" + v->id + "#" + std::to_string(sibling.index);
                    break;
                }
            }
        }
        add_verdict(pair, "scope", reason.empty(), reason);
        (reason.empty() ? out.passed : out.failed).push_back(std::move(pair));
    }
    return out;
}

std::vector<PathChange> parse_touched_paths(std::istream& in) {
    std::vector<PathChange> out;
    std::string line;
    while (std::getline(in, line)) {
        const std::string text = trim(line);
        if (text.empty()) continue;
        std::size_t arrow = std::string::npos;
        std::size_t arrow_len = 0;
        for (std::string_view candidate : {std::string_view(" \xe2\x86\x92 "), std::string_view(" -> ")}) {
            arrow = text.find(candidate);
            if (arrow != std::string::npos) {
                arrow_len = candidate.size();
                break;
            }
        }
        if (arrow == std::string::npos) {
            out.push_back({text, std::nullopt});
        } else {
            out.push_back({trim(std::string_view(text).substr(arrow + arrow_len)),
                           trim(std::string_view(text).substr(0, arrow))});
        }
    }
    return out;
}

std::vector<PathChange> ManifestInspector::touched_paths(const CommitId& commit) {
    const auto path = root_ / "commits" / (commit.hex() + ".paths");
    std::ifstream in(path);
    if (!in) throw InspectError("no touched-path manifest for " + commit.hex());
    return parse_touched_paths(in);
}

std::vector<std::string> ManifestInspector::tree_paths(const std::string& origin_url, const CommitId& head) {
    const auto path = root_ / "trees" / (head.hex() + ".paths");
    std::ifstream in(path);
    if (!in) throw InspectError("no tree manifest for " + origin_url + " at " + head.hex());
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        std::string p = trim(line);
        if (!p.empty()) out.push_back(std::move(p));
    }
    return out;
}

GitInspector::GitInspector(std::map<std::string, std::filesystem::path> clones) {
    for (auto& [url, dir] : clones) clones_[canonical_repo_url(url)] = std::move(dir);
}

std::vector<PathChange> GitInspector::touched_paths(const CommitId& commit) {
    for (const auto& [url, dir] : clones_) {
        std::string listing;
        try {
            listing = run_command("git -C " + shell_quote(dir.string()) +
                                  " diff-tree -r -M --root -m --first-parent --no-commit-id --name-status " +
                                  commit.hex() + " 2>/dev/null");
        } catch (const InspectError&) {
            continue;  // not in this clone
        }
        std::vector<PathChange> out;
        std::istringstream in(listing);
        std::string line;
        while (std::getline(in, line)) {
            const auto f = split(line, '\t');
            if (f.size() < 2 || f[0].empty()) continue;
            switch (f[0][0]) {
                case 'A':  // did not exist before the fix
                    break;
                case 'R':
                case 'C':
                    if (f.size() >= 3) out.push_back({std::string(f[2]), std::string(f[1])});
                    break;
                default:
                    out.push_back({std::string(f[1]), std::nullopt});
            }
        }
        return out;
    }
    throw InspectError("commit " + commit.hex() + " not found in any clone");
}

std::vector<std::string> GitInspector::tree_paths(const std::string& origin_url, const CommitId& head) {
    const auto it = clones_.find(canonical_repo_url(origin_url));
    if (it == clones_.end()) throw InspectError("no clone for " + origin_url);
    const std::string listing = run_command("git -C " + shell_quote(it->second.string()) +
                                            " ls-tree -r --name-only " + head.hex() + " 2>/dev/null");
    std::vector<std::string> out;
    std::istringstream in(listing);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(line);
    }
    return out;
}

FilterResult filter_divergence(std::vector<PairRecord> pairs, const std::vector<Vulnerability>& vulns,
                               RepositoryInspector& inspector) {
    FilterResult out;
    for (auto& pair : pairs) {
        const VulnRange* range = find_range(vulns, pair.key());
        bool keep = true;
        std::string reason;
        try {
            if (!range) throw InspectError("unknown range " + pair.vuln_id);
            // Fix commits the inspector cannot see (typically cherry-picked
            // copies living in other forks) are skipped as long as one is known.
            std::vector<PathChange> touched;
            std::size_t inspected = 0;
            std::optional<InspectError> first_error;
            for (const CommitId& fix : range->fixed) {
                try {
                    auto paths = inspector.touched_paths(fix);
                    touched.insert(touched.end(), paths.begin(), paths.end());
                    ++inspected;
                } catch (const InspectError& e) {
                    if (!first_error) first_error = e;
                }
            }
            if (inspected == 0 && first_error) throw *first_error;
            if (!touched.empty()) {
                const auto tree_list = inspector.tree_paths(pair.origin_url, pair.head);
                const std::set<std::string> tree(tree_list.begin(), tree_list.end());
                for (const auto& change : touched) {
                    const bool present =
                        tree.count(change.path) || (change.renamed_from && tree.count(*change.renamed_from));
                    if (!present) {
                        keep = false;
                        reason = "missing-path:" + change.path;
                        break;
                    }
                }
            }
        } catch (const InspectError& e) {
            keep = true;
            reason = std::string("inspect-error: ") + e.what();
        }
        add_verdict(pair, "divergence", keep, reason);
        (keep ? out.passed : out.failed).push_back(std::move(pair));
    }
    return out;
}

bool CascadeReport::reconciles() const {
    std::size_t expected = input;
    std::size_t failed = 0;
    for (const auto& s : stages) {
        if (s.input != expected || s.passed + s.failed != s.input) return false;
        std::size_t by_reason = 0;
        for (const auto& [reason, n] : s.reasons) by_reason += n;
        if (by_reason != s.failed) return false;
        failed += s.failed;
        expected = s.passed;
    }
    return expected == survivors && failed + survivors == input;
}

void account_stage(CascadeReport& report, const std::string& stage, const FilterResult& result) {
    StageCount s;
    s.stage = stage;
    s.passed = result.passed.size();
    s.failed = result.failed.size();
    s.input = s.passed + s.failed;
    for (const auto& p : result.failed) {
        std::string reason = p.verdicts.back().reason;
        // Group parameterized reasons ("missing-path:x") by their code.
        reason = reason.substr(0, reason.find(':'));
        ++s.reasons[reason];
    }
    report.stages.push_back(std::move(s));
    report.survivors = result.passed.size();
}

CascadeResult run_cascade(std::vector<PairRecord> pairs, const std::vector<Vulnerability>& vulns,
                          const std::vector<OriginRecord>& origins, const CommitGraph& graph,
                          const VulnerabilityLabeling& labeling, const CascadeOptions& options) {
    CascadeResult out;
    out.report.input = pairs.size();
    out.report.survivors = pairs.size();

    auto popularity = filter_popularity(std::move(pairs), origins, options.min_stars, options.min_forks);
    account_stage(out.report, "popularity", popularity);
    auto scope = filter_scope(std::move(popularity.passed), vulns, origins, graph, labeling, options.scope);
    account_stage(out.report, "scope", scope);
    std::vector<PairRecord> survivors = std::move(scope.passed);
    std::vector<std::vector<PairRecord>*> failures{&popularity.failed, &scope.failed};
    FilterResult divergence;
    if (options.inspector) {
        divergence = filter_divergence(std::move(survivors), vulns, *options.inspector);
        account_stage(out.report, "divergence", divergence);
        survivors = std::move(divergence.passed);
        failures.push_back(&divergence.failed);
    }
    out.survivors = survivors;
    out.all = std::move(survivors);
    for (auto* f : failures) out.all.insert(out.all.end(), f->begin(), f->end());
    sort_pairs(out.all);
    sort_pairs(out.survivors);
    return out;
}

}  // namespace forkscan
