// Acceptance run: one PASS/FAIL line per criterion. Exit status is the number
// of failed criteria. `acceptance N` runs criterion N alone.

#include <sys/resource.h>
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <thread>

#include "diff_corpus.hpp"
#include "ecosystem.hpp"
#include "forkscan/equivalence.hpp"
#include "forkscan/pipeline.hpp"
#include "forkscan/store.hpp"
#include "test_support.hpp"

using namespace forkscan;
using namespace forkscan::testing;
namespace fs = std::filesystem;

namespace {

// Budgets.
constexpr std::size_t kOracleInstances = 2000;
constexpr double kOracleBudgetSeconds = 60.0;
constexpr std::size_t kScaleCommits = 5'000'000;
constexpr std::size_t kScaleRanges = 500;
constexpr double kScaleBudgetSeconds = 120.0;
constexpr double kScaleBudgetGiB = 8.0;
constexpr std::size_t kPatchCorpus = 50;
constexpr double kExactTolerance = 0.0;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) {
    return std::chrono::duration<double>(Clock::now() - t).count();
}

double peak_rss_gib() {
    rusage u{};
    getrusage(RUSAGE_SELF, &u);
    return static_cast<double>(u.ru_maxrss) / (1024.0 * 1024.0);  // ru_maxrss is KiB on Linux
}

/// Collects failed checks of one criterion.
struct Check {
    std::vector<std::string> failures;
    void expect(bool ok, const std::string& what) {
        if (!ok) failures.push_back(what);
    }
};

struct Variant {
    unsigned threads = 1;
    Worklist worklist = Worklist::stack;
    bool reverse_children = false;
};

const Variant kBaseline{1, Worklist::stack, false};
const Variant kAlternate{4, Worklist::queue, true};

struct Inputs {
    fs::path commits, origins, advisories;
    std::optional<fs::path> manifests;
    std::optional<fs::path> diffs;
};

AnalyzeSummary run_pipeline(const Inputs& in, const fs::path& state, const Variant& v) {
    ingest({in.commits, in.origins, in.advisories, state});
    PropagateOptions po;
    po.state = state;
    po.threads = v.threads;
    po.worklist = v.worklist;
    po.reverse_children = v.reverse_children;
    propagate(po);
    AnalyzeOptions ao;
    ao.state = state;
    ao.manifests = in.manifests;
    ao.diffs = in.diffs;
    ao.threads = v.threads;
    auto summary = analyze(ao);
    export_state(state, state / "store");
    return summary;
}

Inputs event_inputs() {
    return {fixture("events/commits.tsv"), fixture("events/origins.tsv"), fixture("events/advisories.jsonl"), {}, {}};
}

Inputs qp_inputs(const std::string& variant) {
    Inputs in{fixture(variant == "cherry" ? "qemu_panda/commits_cherry.tsv" : "qemu_panda/commits.tsv"),
              fixture("qemu_panda/origins.tsv"), fixture("qemu_panda/advisories.jsonl"), fixture("divergence"), {}};
    if (variant == "diffs") in.diffs = fixture("qemu_panda/diffs");
    return in;
}

Inputs ecosystem_inputs(const Ecosystem& e) { return {e.commits, e.origins, e.advisories, e.manifests, {}}; }

int cli(const std::string& args, std::string* output = nullptr) {
    const std::string cmd = std::string(FORKSCAN_CLI) + " " + args + " 2>&1";
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (!pipe) return -1;
    std::string text;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) text.append(buf, n);
    const int raw = ::pclose(pipe);
    if (output) *output = text;
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

// 1 ---------------------------------------------------------------------------

Check oracle_equivalence(std::string& detail) {
    Check c;
    const auto start = Clock::now();
    std::set<unsigned> profiles;
    std::size_t reintroductions = 0;
    for (std::uint64_t seed = 1; seed <= kOracleInstances; ++seed) {
        const unsigned profile = static_cast<unsigned>(seed % 16);
        const auto inst = random_dag(1 + (seed * 7919) % 300, 1 + seed % 3, profile, seed);
        profiles.insert(profile);
        if (inst.range.intro.size() > 1 && !inst.range.fixed.empty()) ++reintroductions;
        PropagationOptions o;
        o.worklist = seed % 2 ? Worklist::stack : Worklist::queue;
        if (propagate_range(inst.graph, inst.range, o) != oracle_vulnerable_set(inst.graph, inst.range)) {
            c.expect(false, "mismatch at seed " + std::to_string(seed));
        }
    }
    const double t = seconds_since(start);
    c.expect(profiles.size() == 16, "not every event profile was exercised");
    c.expect(reintroductions > 0, "no reintroduction chains generated");
    c.expect(t < kOracleBudgetSeconds, "over the time budget");
    std::ostringstream d;
    d << kOracleInstances << " DAGs, " << profiles.size() << " profiles, " << reintroductions
      << " with reintroduction, " << t << " s (budget " << kOracleBudgetSeconds << " s)";
    detail = d.str();
    return c;
}

// 2 ---------------------------------------------------------------------------

Check event_semantics(std::string& detail) {
    Check c;
    TempDir dir("events");
    run_pipeline(event_inputs(), dir / "state", kBaseline);
    c.expect(read_file(dir / "state" / state_files::labeling) == read_file(fixture("events/expected_labeling.tsv")),
             "labeling differs from the golden file");

    // Per-event view, straight from the propagation module.
    std::map<std::string, CommitId> name;
    std::istringstream names(read_file(fixture("events/names.tsv")));
    for (std::string n, hex; names >> n >> hex;) name[n] = CommitId::from_hex(hex);
    const auto g = load_graph_file(fixture("events/commits.tsv"));
    auto set_of = [&](const std::string& letters) {
        CommitSet s;
        for (char ch : letters) s.insert(name.at(std::string(1, ch)));
        return s;
    };
    const CommitSet intro = set_of("A"), c_only = set_of("C");
    c.expect(propagate_range(g, range(intro, c_only)) == set_of("ABDE"), "fixed");
    c.expect(propagate_range(g, range(intro, {}, c_only)) == set_of("AB"), "limit");
    c.expect(propagate_range(g, range(intro, {}, {}, c_only)) == set_of("ABCDE"), "last_affected");
    detail = "fixed -> {A,B,D,E}, limit -> {A,B}, last_affected -> {A,B,C,D,E}";
    return c;
}

// 3 ---------------------------------------------------------------------------

Check qemu_panda(std::string& detail) {
    Check c;
    TempDir dir("qp");
    for (const std::string v : {"plain", "cherry", "diffs"}) {
        const auto state = dir / v;
        const auto summary = run_pipeline(qp_inputs(v), state, kBaseline);
        for (const auto& entry : fs::directory_iterator(fixture("qemu_panda/golden/" + v))) {
            const auto f = entry.path().filename();
            c.expect(read_file(state / f) == read_file(entry.path()), v + "/" + f.string() + " differs from golden");
        }
        c.expect(std::find(summary.impacted_forks.begin(), summary.impacted_forks.end(), qp::panda_url) !=
                     summary.impacted_forks.end(),
                 v + ": PANDA not reported as an impacted fork");
        c.expect(read_file(state / state_files::impacted).find(qp::panda_first.hex()) != std::string::npos,
                 v + ": 16321d2 not among the new vulnerable commits");

        const auto store = load_store(state / "store");
        const auto panda = lookup_origin(store, qp::panda_url);
        bool head_vulnerable = false;
        for (const auto& b : panda.branches) {
            for (const auto& hit : b.vulns) {
                head_vulnerable |= b.is_default && b.head == qp::panda_head && hit.vuln_id == "CVE-2019-13164";
            }
        }
        c.expect(head_vulnerable == (v == "plain"),
                 v + (v == "plain" ? ": PANDA head not reported" : ": PANDA head still reported"));
    }
    detail = "plain reports the PANDA head; cherry-pick trailer and patch-id match flip it to clean";
    return c;
}

// 4 ---------------------------------------------------------------------------

Check cascade_accounting(std::string& detail) {
    Check c;
    TempDir dir("eco");
    const auto eco = make_ecosystem(dir / "input", 20240417);
    const auto summary = run_pipeline(ecosystem_inputs(eco), dir / "state", kBaseline);

    std::set<std::tuple<std::string, std::string, std::string>> found;
    for (const auto& p : summary.survivors) found.insert({p.origin_url, p.branch, p.vuln_id});
    std::size_t tp = 0;
    for (const auto& f : found) tp += eco.one_day.count(f);
    const double precision = found.empty() ? 0.0 : static_cast<double>(tp) / found.size();
    const double recall = eco.one_day.empty() ? 0.0 : static_cast<double>(tp) / eco.one_day.size();
    c.expect(std::abs(precision - 1.0) <= kExactTolerance, "precision below 1");
    c.expect(std::abs(recall - 1.0) <= kExactTolerance, "recall below 1");

    const auto& r = summary.report;
    c.expect(r.reconciles(), "report does not reconcile");
    c.expect(r.input == eco.candidates, "candidate count differs from the plan");
    std::size_t expected_input = r.input;
    std::map<std::string, std::size_t> failures;
    for (const auto& s : r.stages) {
        c.expect(s.input == expected_input, s.stage + ": input is not the previous stage's output");
        c.expect(s.input == s.passed + s.failed, s.stage + ": passed + failed != input");
        std::size_t by_reason = 0;
        for (const auto& [reason, n] : s.reasons) {
            by_reason += n;
            failures[s.stage + "/" + reason] += n;
        }
        c.expect(by_reason == s.failed, s.stage + ": reasons do not sum to failures");
        expected_input = s.passed;
    }
    c.expect(expected_input == r.survivors, "last stage output != survivors");
    c.expect(failures == eco.failures, "per-reason counts differ from the plan");

    std::ostringstream d;
    d << eco.forks.size() + eco::kUpstreams << " origins, " << r.input << " candidate pairs, " << eco.one_day.size()
      << " planted one-day forks, precision " << precision << ", recall " << recall;
    for (const auto& s : r.stages) d << ", " << s.stage << " " << s.input << "->" << s.passed;
    detail = d.str();
    return c;
}

// 5 ---------------------------------------------------------------------------

Check determinism(std::string& detail) {
    Check c;
    TempDir dir("det");
    const auto eco = make_ecosystem(dir / "eco", 20240417);
    const std::vector<std::pair<std::string, Inputs>> cases{
        {"events", event_inputs()},
        {"qemu_panda", qp_inputs("plain")},
        {"qemu_panda_cherry", qp_inputs("cherry")},
        {"qemu_panda_diffs", qp_inputs("diffs")},
        {"ecosystem", ecosystem_inputs(eco)},
    };
    std::size_t compared = 0;
    for (const auto& [name, in] : cases) {
        const auto a = dir / (name + "-a");
        const auto b = dir / (name + "-b");
        run_pipeline(in, a, kBaseline);
        run_pipeline(in, b, kAlternate);
        for (const auto& entry : fs::directory_iterator(a / "store")) {
            const auto f = entry.path().filename();
            c.expect(read_file(entry.path()) == read_file(b / "store" / f), name + ": " + f.string() + " differs");
            ++compared;
        }
    }
    detail = std::to_string(compared) + " export files compared: stack/1 thread vs queue/4 threads/reversed children";
    return c;
}

// 6 ---------------------------------------------------------------------------

std::uint64_t splitmix(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Ecosystem-shaped graph: many independent projects, each a trunk with short
// side branches and merges.
struct ScaleGraph {
    std::size_t projects = 0;
    std::size_t per_project = 0;
    std::size_t edges = 0;
};

std::string scale_hex(std::size_t project, std::size_t i) {
    std::uint64_t s = (static_cast<std::uint64_t>(project) << 32) | i;
    char buf[41];
    const std::uint64_t a = splitmix(s), b = splitmix(s), d = splitmix(s);
    std::snprintf(buf, sizeof buf, "%016llx%016llx%08llx", static_cast<unsigned long long>(a),
                  static_cast<unsigned long long>(b), static_cast<unsigned long long>(d >> 32));
    return buf;
}

ScaleGraph write_scale_graph(const fs::path& file, std::size_t commits, std::uint64_t seed) {
    ScaleGraph sg;
    sg.per_project = 5000;
    sg.projects = commits / sg.per_project;
    std::mt19937_64 rng(seed);
    std::ofstream out(file);
    out << "# sha\tparents\tepoch\tcherry_sources\n";
    for (std::size_t p = 0; p < sg.projects; ++p) {
        for (std::size_t i = 0; i < sg.per_project; ++i) {
            out << scale_hex(p, i) << '\t';
            if (i > 0) {
                // Mostly extend the trunk, sometimes branch off a recent commit.
                const std::size_t back = rng() % 10 == 0 ? 1 + rng() % std::min<std::size_t>(i, 40) : 1;
                out << scale_hex(p, i - back);
                ++sg.edges;
                if (i > 2 && rng() % 5 == 0) {
                    const std::size_t other = i - 1 - (1 + rng() % std::min<std::size_t>(i - 1, 100));
                    if (other != i - back) {
                        out << ',' << scale_hex(p, other);
                        ++sg.edges;
                    }
                }
            }
            out << '\t' << 1500000000 + i << "\t\n";
        }
    }
    return sg;
}

Check desk_scale(std::string& detail) {
    Check c;
    TempDir dir("scale");
    const auto file = dir / "commits.tsv";
    const auto sg = write_scale_graph(file, kScaleCommits, 7);

    std::mt19937_64 rng(11);
    std::vector<Vulnerability> vulns;
    for (std::size_t k = 0; k < kScaleRanges; ++k) {
        const std::size_t project = rng() % sg.projects;
        const std::size_t intro = rng() % (sg.per_project / 2);
        Vulnerability v;
        v.id = "SCALE-" + std::to_string(k);
        VulnRange r;
        r.vuln_id = v.id;
        r.repo_url = "https://example.invalid/p" + std::to_string(project);
        r.intro.insert(CommitId::from_hex(scale_hex(project, intro)));
        r.fixed.insert(CommitId::from_hex(scale_hex(project, intro + 1 + rng() % 2000)));
        if (k % 10 == 0) r.limit.insert(CommitId::from_hex(scale_hex(project, sg.per_project - 1)));
        if (k % 7 == 0) r.last.insert(CommitId::from_hex(scale_hex(project, intro + 1 + rng() % 500)));
        v.ranges.push_back(std::move(r));
        vulns.push_back(std::move(v));
    }

    const auto start = Clock::now();
    const auto g = load_graph_file(file);
    const double load_s = seconds_since(start);
    LabelOptions lo;
    lo.threads = std::max(1u, std::thread::hardware_concurrency());
    const auto labeling = label_graph(g, vulns, lo);
    const double total_s = seconds_since(start);
    const double rss = peak_rss_gib();
    std::size_t labels = 0;
    for (VulnerabilityLabeling::Slot s = 0; s < labeling.keys().size(); ++s) labels += labeling.vulnerable(s).size();

    c.expect(g.size() == sg.projects * sg.per_project, "commit count");
    c.expect(labels > 0, "nothing labeled");
    c.expect(total_s < kScaleBudgetSeconds, "over the time budget");
    c.expect(rss < kScaleBudgetGiB, "over the memory budget");
    std::ostringstream d;
    d << g.size() << " commits, " << sg.edges << " edges, " << kScaleRanges << " ranges, " << labels
      << " labels; load " << load_s << " s, load+label " << total_s << " s (budget " << kScaleBudgetSeconds
      << " s), peak RSS " << rss << " GiB (budget " << kScaleBudgetGiB << " GiB), " << lo.threads << " thread(s)";
    detail = d.str();
    return c;
}

// 7 ---------------------------------------------------------------------------

Check scanner(std::string& detail) {
    Check c;
    TempDir dir("scan");
    run_pipeline(qp_inputs("plain"), dir / "state", kBaseline);
    const std::string store = (dir / "state/store").string();
    const std::string fx = fixture("scan").string();
    std::string out;

    int rc = cli("scan gitmodules " + fx + "/vulnerable.gitmodules --pins " + fx + "/vulnerable.pins --store " + store,
                 &out);
    c.expect(rc == 1, "vulnerable pin: exit " + std::to_string(rc));
    c.expect(out.find("CVE-2019-13164") != std::string::npos, "vulnerable pin: CVE not reported");
    c.expect(out.find(qp::pinned.hex()) != std::string::npos, "vulnerable pin: commit not reported");

    rc = cli("scan gitmodules " + fx + "/clean.gitmodules --pins " + fx + "/clean.pins --store " + store, &out);
    c.expect(rc == 0, "clean pin: exit " + std::to_string(rc));
    c.expect(out.find("CVE-") == std::string::npos, "clean pin reported a vulnerability");

    rc = cli("scan gitmodules " + fx + "/empty.gitmodules --pins " + fx + "/empty.pins --store " + store, &out);
    c.expect(rc == 0, "empty manifest: exit " + std::to_string(rc));

    rc = cli("scan gomod " + fx + "/go.mod --resolution " + fx + "/go.resolution --store " + store, &out);
    c.expect(rc == 1, "go.mod: exit " + std::to_string(rc));
    c.expect(out.find("CVE-2019-13164") != std::string::npos, "go.mod: CVE not reported");

    rc = cli("scan gomod " + fx + "/empty.go.mod --resolution " + fx + "/go.resolution --store " + store, &out);
    c.expect(rc == 0, "empty go.mod: exit " + std::to_string(rc));

    rc = cli("scan gitmodules " + fx + "/vulnerable.gitmodules --pins " + fx + "/vulnerable.pins --store " +
             (dir / "missing").string(), &out);
    c.expect(rc == 2, "missing store: exit " + std::to_string(rc));
    rc = cli("scan gitmodules", &out);
    c.expect(rc == 2, "usage error: exit " + std::to_string(rc));

    detail = "f052389 pin reports CVE-2019-13164 (exit 1); clean and empty manifests exit 0; errors exit 2";
    return c;
}

// 8 ---------------------------------------------------------------------------

Check patch_id_properties(std::string& detail) {
    Check c;
    const auto corpus = make_diff_corpus(kPatchCorpus, 99);
    std::size_t mutations = 0;
    std::set<PatchId> distinct;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& d = corpus[i];
        const auto id = patch_id(d);
        distinct.insert(id);
        for (long delta : {-3L, 1L, 17L, 250L}) {
            c.expect(patch_id(shift_hunks(d, delta)) == id, "offset invariance, diff " + std::to_string(i));
        }
        c.expect(patch_id(reindent(d)) == id, "whitespace invariance, diff " + std::to_string(i));
        for (std::size_t n = 0; n < payload_lines(d); ++n) {
            ++mutations;
            c.expect(patch_id(mutate_payload(d, n)) != id, "payload sensitivity, diff " + std::to_string(i));
        }
    }
    c.expect(distinct.size() == corpus.size(), "corpus diffs collide");

    std::size_t injected = 0;
    for (std::uint64_t seed = 1; seed <= 500; ++seed) {
        const auto inst = random_dag(20 + seed % 250, 1 + seed % 3, static_cast<unsigned>(seed % 16), seed);
        const auto& g = inst.graph;
        Vulnerability v;
        v.id = inst.range.vuln_id;
        v.ranges.push_back(inst.range);
        std::mt19937_64 rng(seed);
        std::vector<EquivalentFix> matches;
        for (int k = 0; k < 1 + static_cast<int>(seed % 4); ++k) {
            matches.push_back({{v.id, inst.range.index}, CommitId{}, g.id(rng() % g.size())});
        }
        const auto res = inject_equivalent_fixes({v}, matches);
        injected += res.injected.size();
        const auto before = propagate_range(g, inst.range);
        const auto after = propagate_range(g, res.vulns[0].ranges[0]);
        c.expect(std::includes(before.begin(), before.end(), after.begin(), after.end()),
                 "injection enlarged a vulnerable set, seed " + std::to_string(seed));
    }
    std::ostringstream d;
    d << corpus.size() << " diffs, " << mutations << " payload mutations, 500 injection instances (" << injected
      << " injected fixes)";
    detail = d.str();
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    const int only = argc > 1 ? std::atoi(argv[1]) : 0;
    const std::vector<std::pair<std::string, std::function<Check(std::string&)>>> criteria{
        {"1 oracle equivalence", oracle_equivalence},
        {"2 event semantics", event_semantics},
        {"3 QEMU/PANDA", qemu_panda},
        {"4 cascade accounting", cascade_accounting},
        {"5 determinism", determinism},
        {"6 desk-scale performance", desk_scale},
        {"7 scanner end-to-end", scanner},
        {"8 patch-id properties", patch_id_properties},
    };
    int failed = 0;
    int ran = 0;
    for (const auto& [name, run] : criteria) {
        if (only && std::atoi(name.c_str()) != only) continue;
        ++ran;
        std::string detail;
        Check result;
        try {
            result = run(detail);
        } catch (const std::exception& e) {
            result.failures.push_back(std::string("exception: ") + e.what());
        }
        const bool ok = result.failures.empty();
        failed += ok ? 0 : 1;
        std::cout << (ok ? "PASS" : "FAIL") << "  criterion " << name << ": " << detail;
        for (std::size_t i = 0; i < result.failures.size() && i < 5; ++i) std::cout << " | " << result.failures[i];
        if (result.failures.size() > 5) std::cout << " | ... " << result.failures.size() - 5 << " more";
        std::cout << std::endl;
    }
    if (ran == 0) {
        std::cerr << "no criterion " << only << '\n';
        return 2;
    }
    return failed;
}
