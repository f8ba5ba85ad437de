#include "forkscan/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "forkscan/store.hpp"

namespace forkscan {
namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::ifstream open_in(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return in;
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out || !(out << content)) throw Error("cannot write " + path.string());
}

template <typename Fn>
void write_with(const fs::path& path, Fn&& fn) {
    std::ostringstream ss;
    fn(ss);
    write_file(path, ss.str());
}

struct LoadedState {
    CommitGraph graph;
    std::vector<OriginRecord> origins;
    std::vector<Vulnerability> vulns;
};

LoadedState load_state(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw Error("state directory " + dir.string() + " does not exist");
    LoadedState s;
    s.graph = load_graph_file(dir / state_files::commits);
    s.origins = load_origins_file(dir / state_files::origins);
    auto in = open_in(dir / state_files::vulns);
    s.vulns = read_vulnerabilities(in);
    return s;
}

VulnerabilityLabeling load_labeling(const fs::path& path, const LoadedState& s) {
    auto in = open_in(path);
    return read_labeling(in, s.graph, s.vulns);
}

std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const auto pos = line.find('\t', start);
        out.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
        if (pos == std::string_view::npos) return out;
        start = pos + 1;
    }
}

std::size_t parse_size(std::string_view s, std::size_t line) {
    std::size_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) throw ParseError("invalid number '" + std::string(s) + "'", line);
    return v;
}

std::vector<Verdict> parse_verdicts(std::string_view text, std::size_t line) {
    std::vector<Verdict> out;
    if (text.empty()) return out;
    std::size_t start = 0;
    for (;;) {
        const auto bar = text.find('|', start);
        const auto item = text.substr(start, bar == std::string_view::npos ? bar : bar - start);
        const auto c1 = item.find(':');
        if (c1 == std::string_view::npos) throw ParseError("malformed verdict '" + std::string(item) + "'", line);
        const auto c2 = item.find(':', c1 + 1);
        const auto outcome = item.substr(c1 + 1, c2 == std::string_view::npos ? c2 : c2 - c1 - 1);
        if (outcome != "pass" && outcome != "fail") {
            throw ParseError("malformed verdict '" + std::string(item) + "'", line);
        }
        out.push_back({std::string(item.substr(0, c1)), outcome == "pass",
                       c2 == std::string_view::npos ? "" : std::string(item.substr(c2 + 1))});
        if (bar == std::string_view::npos) return out;
        start = bar + 1;
    }
}

std::string verdicts_text(const std::vector<Verdict>& verdicts) {
    // Passing verdicts can carry a note (inspect-error), unlike the store format.
    std::string out;
    for (const auto& v : verdicts) {
        if (!out.empty()) out += '|';
        out += v.stage + (v.passed ? ":pass" : ":fail");
        if (!v.reason.empty()) out += ":" + v.reason;
    }
    return out;
}

const OriginRecord* upstream_of(const std::vector<OriginRecord>& origins, const std::vector<Vulnerability>& vulns,
                                const RangeKey& key) {
    for (const auto& v : vulns) {
        if (v.id != key.vuln_id) continue;
        for (const auto& r : v.ranges) {
            if (r.index == key.range_index) return find_origin(origins, r.repo_url);
        }
    }
    return nullptr;
}

struct EquivalenceStage {
    FilterResult result;
    std::vector<EquivalentFix> injected;
    std::vector<Vulnerability> vulns;
    VulnerabilityLabeling labeling;
};

EquivalenceStage run_equivalence(std::vector<PairRecord> pairs, const LoadedState& s,
                                 const VulnerabilityLabeling& labeling, const fs::path& diffs_dir, unsigned threads,
                                 std::vector<std::string>& warnings) {
    const auto corpus = read_diff_corpus(diffs_dir);

    // Fixed-commit diffs of the ranges that still have candidate pairs.
    std::set<RangeKey> audited;
    for (const auto& p : pairs) audited.insert(p.key());
    std::vector<Vulnerability> audited_vulns;
    for (const auto& v : s.vulns) {
        Vulnerability copy = v;
        copy.ranges.clear();
        for (const auto& r : v.ranges) {
            if (audited.count({v.id, r.index})) copy.ranges.push_back(r);
        }
        if (!copy.ranges.empty()) audited_vulns.push_back(std::move(copy));
    }
    const auto fixes = collect_fix_diffs(audited_vulns, corpus, warnings);

    // Fork-only commits of the surviving pairs that have a diff.
    std::map<CommitId, const std::string*> candidates;
    std::map<std::string, std::vector<bool>> membership_cache;
    auto membership = [&](const OriginRecord& o) -> const std::vector<bool>& {
        const auto key = canonical_repo_url(o.url);
        auto it = membership_cache.find(key);
        if (it == membership_cache.end()) it = membership_cache.emplace(key, origin_membership(s.graph, o)).first;
        return it->second;
    };
    for (const auto& p : pairs) {
        const OriginRecord* up = upstream_of(s.origins, s.vulns, p.key());
        const std::vector<CommitIndex> head{s.graph.index_of(p.head)};
        const auto history = reachable_mask(s.graph, head);
        const std::vector<bool>* upstream = up ? &membership(*up) : nullptr;
        for (CommitIndex c = 0; c < s.graph.size(); ++c) {
            if (!history[c] || (upstream && (*upstream)[c])) continue;
            const auto it = corpus.find(s.graph.id(c));
            if (it != corpus.end()) candidates.emplace(it->first, &it->second);
        }
    }
    std::vector<DiffRecord> fork_diffs;
    for (const auto& [c, d] : candidates) fork_diffs.push_back({c, *d});
    const auto matches = detect_equivalent_fix(fixes, fork_diffs, warnings);

    EquivalenceStage out;
    auto injection = inject_equivalent_fixes(s.vulns, matches);
    for (const auto& m : injection.conflicting) {
        warnings.push_back(m.range.vuln_id + "#" + std::to_string(m.range.range_index) + ": equivalent fix " +
                           m.match.hex() + " already carries another event, not injected");
    }
    out.injected = injection.injected;
    out.vulns = std::move(injection.vulns);
    if (out.injected.empty()) {
        out.labeling = labeling;
    } else {
        LabelOptions lo;
        lo.threads = threads;
        out.labeling = label_graph(s.graph, out.vulns, lo);
    }
    for (auto& p : pairs) {
        const auto slot = out.labeling.slot_of(p.key());
        const bool still = slot && out.labeling.is_vulnerable(s.graph.index_of(p.head), *slot);
        std::string reason;
        if (!still) {
            reason = "equivalent-fix";
            for (const auto& m : out.injected) {
                if (m.range == p.key()) {
                    reason += ":" + m.match.hex();
                    break;
                }
            }
        }
        p.verdicts.push_back({"equivalence", still, reason});
        (still ? out.result.passed : out.result.failed).push_back(std::move(p));
    }
    return out;
}

}  // namespace

std::int64_t parse_date(const std::string& text) {
    std::int64_t epoch = 0;
    const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), epoch);
    if (ec == std::errc{} && p == text.data() + text.size()) return epoch;
    int y = 0;
    unsigned m = 0, d = 0;
    char extra = 0;
    if (std::sscanf(text.c_str(), "%4d-%2u-%2u%c", &y, &m, &d, &extra) != 3 || text.size() != 10) {
        throw Error("invalid date '" + text + "', expected YYYY-MM-DD");
    }
    const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
    if (!ymd.ok()) throw Error("invalid date '" + text + "'");
    return std::chrono::sys_days{ymd}.time_since_epoch().count() * 86400LL;
}

void write_labeling(std::ostream& out, const CommitGraph& graph, const VulnerabilityLabeling& labeling) {
    out << "# vuln_id\trange_index\tsha\n";
    std::vector<std::string> hexes;
    for (VulnerabilityLabeling::Slot slot = 0; slot < labeling.keys().size(); ++slot) {
        const auto& key = labeling.keys()[slot];
        hexes.clear();
        for (CommitIndex c : labeling.vulnerable(slot)) hexes.push_back(graph.id(c).hex());
        std::sort(hexes.begin(), hexes.end());
        for (const auto& h : hexes) out << key.vuln_id << '\t' << key.range_index << '\t' << h << '\n';
    }
}

VulnerabilityLabeling read_labeling(std::istream& in, const CommitGraph& graph,
                                    const std::vector<Vulnerability>& vulns) {
    std::map<RangeKey, std::vector<CommitIndex>> lists;
    for (const auto& v : vulns) {
        for (const auto& r : v.ranges) lists[{v.id, r.index}];
    }
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        const auto f = split_tabs(line);
        if (f.size() != 3) throw ParseError("expected vuln_id<TAB>range_index<TAB>sha", line_no);
        const RangeKey key{std::string(f[0]), parse_size(f[1], line_no)};
        const auto it = lists.find(key);
        if (it == lists.end()) throw ParseError("labeling names unknown range " + key.vuln_id, line_no);
        const auto id = CommitId::parse(f[2]);
        if (!id) throw ParseError("invalid sha '" + std::string(f[2]) + "'", line_no);
        const auto idx = graph.find(*id);
        if (!idx) throw ParseError("labeled commit " + id->hex() + " is not in the graph", line_no);
        it->second.push_back(*idx);
    }
    std::vector<RangeKey> keys;
    std::vector<std::vector<CommitIndex>> vulnerable;
    for (auto& [key, list] : lists) {
        std::sort(list.begin(), list.end());
        list.erase(std::unique(list.begin(), list.end()), list.end());
        keys.push_back(key);
        vulnerable.push_back(std::move(list));
    }
    return VulnerabilityLabeling::from_ranges(graph.size(), std::move(keys), std::move(vulnerable));
}

void write_pairs(std::ostream& out, const std::vector<PairRecord>& pairs) {
    out << "# url\tbranch\tvuln_id\trange_index\thead\tverdicts\n";
    for (const auto& p : pairs) {
        out << p.origin_url << '\t' << p.branch << '\t' << p.vuln_id << '\t' << p.range_index << '\t' << p.head.hex()
            << '\t' << verdicts_text(p.verdicts) << '\n';
    }
}

std::vector<PairRecord> read_pairs(std::istream& in) {
    std::vector<PairRecord> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        const auto f = split_tabs(line);
        if (f.size() != 6) throw ParseError("expected 6 tab-separated fields", line_no);
        const auto head = CommitId::parse(f[4]);
        if (!head) throw ParseError("invalid head sha", line_no);
        out.push_back({std::string(f[0]), std::string(f[1]), std::string(f[2]), parse_size(f[3], line_no), *head,
                       parse_verdicts(f[5], line_no)});
    }
    return out;
}

std::string cascade_report_json(const CascadeReport& report) {
    ordered_json j;
    j["input"] = report.input;
    j["stages"] = ordered_json::array();
    for (const auto& s : report.stages) {
        ordered_json stage;
        stage["stage"] = s.stage;
        stage["input"] = s.input;
        stage["passed"] = s.passed;
        stage["failed"] = s.failed;
        stage["reasons"] = ordered_json::object();
        for (const auto& [reason, n] : s.reasons) stage["reasons"][reason] = n;
        j["stages"].push_back(std::move(stage));
    }
    j["survivors"] = report.survivors;
    j["reconciles"] = report.reconciles();
    return j.dump(2) + "\n";
}

std::string cleaning_report_json(const IngestSummary& summary) {
    ordered_json j;
    j["records"] = summary.records;
    j["vulnerabilities"] = summary.vulnerabilities;
    j["ranges_accepted"] = summary.cleaning.accepted;
    j["ranges_rejected"] = summary.cleaning.rejected.size();
    j["by_reason"] = ordered_json::object();
    for (auto reason : {RejectReason::bad_sha, RejectReason::no_intro, RejectReason::dup_event,
                        RejectReason::missing_commit, RejectReason::no_roots, RejectReason::unknown_repo,
                        RejectReason::cherry_conflict}) {
        j["by_reason"][std::string(reason_code(reason))] = summary.cleaning.count(reason);
    }
    j["rejected"] = ordered_json::array();
    for (const auto& r : summary.cleaning.rejected) {
        j["rejected"].push_back({{"vuln_id", r.vuln_id},
                                 {"range_index", r.range_index},
                                 {"reason", std::string(reason_code(r.reason))},
                                 {"detail", r.detail}});
    }
    j["warnings"] = summary.warnings;
    return j.dump(2) + "\n";
}

std::vector<ImpactedCommit> impacted_commits(const CommitGraph& graph, const VulnerabilityLabeling& labeling,
                                             const std::vector<Vulnerability>& vulns,
                                             const std::vector<OriginRecord>& origins) {
    std::set<std::string> upstream_urls;
    for (const auto& v : vulns) {
        for (const auto& r : v.ranges) {
            if (const auto* o = find_origin(origins, r.repo_url)) upstream_urls.insert(o->url);
        }
    }
    std::vector<ImpactedCommit> out;
    if (upstream_urls.empty()) return out;
    const auto partition = fork_ecosystems(graph, origins);
    for (const auto& up_url : upstream_urls) {
        const auto forks = impacted_forks(graph, labeling, origins, partition, up_url);
        if (forks.empty()) continue;
        const auto upstream = origin_membership(graph, *find_origin(origins, up_url));
        for (const auto& fork_url : forks) {
            const auto fork = origin_membership(graph, *find_origin(origins, fork_url));
            std::vector<ImpactedCommit> rows;
            for (CommitIndex c = 0; c < graph.size(); ++c) {
                if (!fork[c] || upstream[c]) continue;
                for (auto slot : labeling.ranges_of(c)) rows.push_back({up_url, fork_url, graph.id(c), labeling.keys()[slot]});
            }
            std::sort(rows.begin(), rows.end(), [](const ImpactedCommit& a, const ImpactedCommit& b) {
                return std::tie(a.commit, a.range) < std::tie(b.commit, b.range);
            });
            out.insert(out.end(), rows.begin(), rows.end());
        }
    }
    return out;
}

IngestSummary ingest(const IngestOptions& options) {
    IngestSummary summary;
    auto graph = load_graph_file(options.commits);
    auto origins = load_origins_file(options.origins);
    validate_origins(graph, origins);
    auto adv_in = open_in(options.advisories);
    auto parsed = parse_vulnerabilities(adv_in);

    std::map<std::string, std::vector<bool>> cache;
    const MembershipLookup lookup = [&](const std::string& url) -> const std::vector<bool>* {
        const auto* o = find_origin(origins, url);
        if (!o) return nullptr;
        const auto key = canonical_repo_url(o->url);
        auto it = cache.find(key);
        if (it == cache.end()) it = cache.emplace(key, origin_membership(graph, *o)).first;
        return &it->second;
    };
    auto [vulns, report] = prepare_ranges(std::move(parsed.vulnerabilities), graph, lookup);

    summary.commits = graph.size();
    summary.edges = graph.edge_count();
    summary.origins = origins.size();
    summary.records = parsed.records;
    summary.vulnerabilities = vulns.size();
    summary.cleaning = std::move(report);
    summary.warnings = std::move(parsed.warnings);

    fs::create_directories(options.out);
    write_with(options.out / state_files::commits, [&](std::ostream& o) { write_graph(o, graph); });
    write_with(options.out / state_files::origins, [&](std::ostream& o) { write_origins(o, origins); });
    write_with(options.out / state_files::vulns, [&](std::ostream& o) { write_vulnerabilities(o, vulns); });
    write_file(options.out / state_files::cleaning, cleaning_report_json(summary));
    // Outputs of later stages are stale now.
    for (const char* f : {state_files::labeling, state_files::pairs, state_files::cascade, state_files::impacted,
                          state_files::final_labeling, state_files::equivalent_fixes}) {
        fs::remove(options.out / f);
    }
    return summary;
}

PropagateSummary propagate(const PropagateOptions& options) {
    const auto s = load_state(options.state);
    LabelOptions lo;
    lo.threads = std::max(1u, options.threads);
    lo.propagation.worklist = options.worklist;
    lo.propagation.reverse_children = options.reverse_children;
    const auto labeling = label_graph(s.graph, s.vulns, lo);
    write_with(options.state / state_files::labeling, [&](std::ostream& o) { write_labeling(o, s.graph, labeling); });
    for (const char* f : {state_files::pairs, state_files::cascade, state_files::impacted, state_files::final_labeling,
                          state_files::equivalent_fixes}) {
        fs::remove(options.state / f);
    }
    PropagateSummary summary;
    summary.ranges = labeling.keys().size();
    for (CommitIndex c = 0; c < s.graph.size(); ++c) {
        const auto n = labeling.ranges_of(c).size();
        summary.labels += n;
        if (n) ++summary.labeled_commits;
    }
    return summary;
}

AnalyzeSummary analyze(const AnalyzeOptions& options) {
    const auto s = load_state(options.state);
    if (!fs::exists(options.state / state_files::labeling)) throw Error("no labeling in state; run propagate first");
    const auto labeling = load_labeling(options.state / state_files::labeling, s);

    AnalyzeSummary summary;
    std::optional<ManifestInspector> manifests;
    CascadeOptions co;
    co.min_stars = options.min_stars;
    co.min_forks = options.min_forks;
    co.scope = options.scope;
    if (options.manifests) {
        if (!fs::is_directory(*options.manifests)) throw Error("manifest directory " + options.manifests->string() + " does not exist");
        manifests.emplace(*options.manifests);
        co.inspector = &*manifests;
    }
    auto cascade = run_cascade(unpatched_heads(s.graph, labeling, s.origins), s.vulns, s.origins, s.graph, labeling, co);
    summary.report = cascade.report;

    const VulnerabilityLabeling* final_labeling = &labeling;
    const std::vector<Vulnerability>* final_vulns = &s.vulns;
    std::optional<EquivalenceStage> equivalence;
    if (options.diffs) {
        if (!fs::is_directory(*options.diffs)) throw Error("diffs directory " + options.diffs->string() + " does not exist");
        equivalence = run_equivalence(cascade.survivors, s, labeling, *options.diffs, options.threads, summary.warnings);
        account_stage(summary.report, "equivalence", equivalence->result);
        summary.injected = equivalence->injected;
        final_labeling = &equivalence->labeling;
        final_vulns = &equivalence->vulns;

        // Merge the equivalence verdicts into the full pair list.
        std::map<std::tuple<std::string, std::string, std::string, std::size_t>, const PairRecord*> updated;
        for (const auto* part : {&equivalence->result.passed, &equivalence->result.failed}) {
            for (const auto& p : *part) updated[{p.origin_url, p.branch, p.vuln_id, p.range_index}] = &p;
        }
        for (auto& p : cascade.all) {
            const auto it = updated.find({p.origin_url, p.branch, p.vuln_id, p.range_index});
            if (it != updated.end()) p = *it->second;
        }
        cascade.survivors = equivalence->result.passed;
        sort_pairs(cascade.survivors);
    }
    summary.survivors = cascade.survivors;

    const auto impacted = impacted_commits(s.graph, *final_labeling, *final_vulns, s.origins);
    std::set<std::string> forks;
    for (const auto& i : impacted) forks.insert(i.fork_url);
    summary.impacted_forks.assign(forks.begin(), forks.end());

    write_with(options.state / state_files::pairs, [&](std::ostream& o) { write_pairs(o, cascade.all); });
    write_file(options.state / state_files::cascade, cascade_report_json(summary.report));
    write_with(options.state / state_files::impacted, [&](std::ostream& o) {
        o << "# upstream\tfork\tsha\tvuln_id\trange_index\n";
        for (const auto& i : impacted) {
            o << i.upstream_url << '\t' << i.fork_url << '\t' << i.commit.hex() << '\t' << i.range.vuln_id << '\t'
              << i.range.range_index << '\n';
        }
    });
    if (equivalence) {
        write_with(options.state / state_files::final_labeling,
                   [&](std::ostream& o) { write_labeling(o, s.graph, *final_labeling); });
        write_with(options.state / state_files::equivalent_fixes, [&](std::ostream& o) {
            o << "# vuln_id\trange_index\tfixed_sha\tequivalent_sha\n";
            for (const auto& m : summary.injected) {
                o << m.range.vuln_id << '\t' << m.range.range_index << '\t' << m.fix.hex() << '\t' << m.match.hex()
                  << '\n';
            }
        });
    } else {
        fs::remove(options.state / state_files::final_labeling);
        fs::remove(options.state / state_files::equivalent_fixes);
    }
    return summary;
}

ExportSummary export_state(const fs::path& state, const fs::path& out) {
    const auto s = load_state(state);
    const bool has_final = fs::exists(state / state_files::final_labeling);
    if (!has_final && !fs::exists(state / state_files::labeling)) {
        throw Error("no labeling in state; run propagate first");
    }
    const auto labeling = load_labeling(state / (has_final ? state_files::final_labeling : state_files::labeling), s);
    std::vector<PairRecord> pairs;
    if (fs::exists(state / state_files::pairs)) {
        auto in = open_in(state / state_files::pairs);
        pairs = read_pairs(in);
    }
    const auto store = build_store(s.graph, labeling, s.vulns, s.origins, pairs);
    write_store(store, out);
    return {store.commits.size(), store.origins.size()};
}

}  // namespace forkscan
