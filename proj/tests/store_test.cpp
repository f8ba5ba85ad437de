#include <doctest.h>

#include <fstream>
#include <sstream>

#include "forkscan/pipeline.hpp"
#include "forkscan/store.hpp"
#include "test_support.hpp"

using namespace forkscan;
using namespace forkscan::testing;

namespace {

struct QpRun {
    TempDir dir{"store"};
    CommitGraph graph = qp::load();
    std::vector<OriginRecord> origins = load_origins_file(fixture("qemu_panda/origins.tsv"));
    std::vector<Vulnerability> vulns;
    VulnerabilityLabeling labeling;
    std::vector<PairRecord> pairs;

    QpRun() {
        std::ifstream in(fixture("qemu_panda/advisories.jsonl"));
        vulns = clean_ranges(parse_vulnerabilities(in).vulnerabilities, graph).first;
        labeling = label_graph(graph, vulns);
        pairs = run_cascade(unpatched_heads(graph, labeling, origins), vulns, origins, graph, labeling, {}).all;
    }
    VulnStore exported(const std::string& name = "store") {
        export_store(dir / name, graph, labeling, vulns, origins, pairs);
        return load_store(dir / name);
    }
};

ScanReport scan_modules(const std::string& name) {
    std::ifstream m(fixture("scan/" + name + ".gitmodules"));
    std::ifstream p(fixture("scan/" + name + ".pins"));
    QpRun run;
    return scan_gitmodules(name, parse_gitmodules(m), parse_pins(p), run.exported());
}

}  // namespace

TEST_CASE("export_store") {
    SUBCASE("empty labeling gives header-only tables") {
        QpRun run;
        export_store(run.dir / "empty", run.graph, label_graph(run.graph, {}), {}, run.origins, {});
        CHECK(read_file(run.dir / "empty/commit_vulns.csv") == "sha,vuln_id,range_index\n");
        CHECK(read_file(run.dir / "empty/origin_vulns.csv") == "url,branch,head_sha,vuln_id,severity,survived_filters\n");
    }
    SUBCASE("fixture tables") {
        QpRun run;
        const auto store = run.exported();
        CHECK(store.commits.size() == 11);
        CHECK(std::find(store.commits.begin(), store.commits.end(),
                        CommitRow{qp::panda_head, "CVE-2019-13164", 0}) != store.commits.end());
        REQUIRE(store.origins.size() == 1);
        CHECK(store.origins[0].url == qp::panda_url);
        CHECK(store.origins[0].severity == 8.8);
        CHECK(store.origins[0].survived_filters == "popularity:pass|scope:pass");
        CHECK(store.indexed.size() == run.graph.size());
    }
    SUBCASE("re-export is byte-identical") {
        QpRun run;
        run.exported("a");
        run.exported("b");
        for (const char* f : {"commit_vulns.csv", "origin_vulns.csv", "vulns.csv", "origins.csv", "indexed_commits.bin"}) {
            CHECK(read_file(run.dir / (std::string("a/") + f)) == read_file(run.dir / (std::string("b/") + f)));
        }
    }
    SUBCASE("round trip reproduces by_commit") {
        QpRun run;
        const auto store = run.exported();
        for (const auto& [sha, keys] : run.labeling.by_commit(run.graph)) {
            const auto hit = lookup_commit(store, sha);
            CHECK(hit.status == IndexStatus::vulnerable);
            std::set<std::string> expected;
            for (const auto& k : keys) expected.insert(k.vuln_id);
            std::set<std::string> got;
            for (const auto& h : hit.hits) got.insert(h.vuln_id);
            CHECK(got == expected);
        }
        std::map<CommitId, std::set<RangeKey>> rebuilt;
        for (const auto& r : store.commits) rebuilt[r.sha].insert({r.vuln_id, r.range_index});
        CHECK(rebuilt == run.labeling.by_commit(run.graph));
    }
    SUBCASE("origin rows reconcile with commit rows") {
        QpRun run;
        std::ifstream in(fixture("qemu_panda/advisories_two.jsonl"));
        run.vulns = clean_ranges(parse_vulnerabilities(in).vulnerabilities, run.graph).first;
        run.labeling = label_graph(run.graph, run.vulns);
        run.pairs = unpatched_heads(run.graph, run.labeling, run.origins);
        const auto store = run.exported();
        CHECK(store.origins.size() == 2);
        for (const auto& o : store.origins) {
            bool found = false;
            for (const auto& c : store.commits) found |= c.sha == o.head && c.vuln_id == o.vuln_id;
            CHECK(found);
        }
    }
    SUBCASE("quoted fields survive") {
        VulnStore store;
        store.origins.push_back({"https://example.invalid/a,b", "fix \"x\"", cid("h"), "V-1", std::nullopt, "s:pass"});
        store.branches.push_back({"https://example.invalid/a,b", "fix \"x\"", cid("h"), true});
        TempDir dir("quote");
        write_store(store, dir.path());
        const auto back = load_store(dir.path());
        CHECK(back.origins == store.origins);
        CHECK(back.branches.at(0).branch == "fix \"x\"");
    }
    SUBCASE("damaged stores are rejected") {
        QpRun run;
        run.exported();
        std::ofstream(run.dir / "store/commit_vulns.csv", std::ios::app) << "nothex,V,0\n";
        CHECK_THROWS_AS(load_store(run.dir / "store"), ParseError);
        CHECK_THROWS_AS(load_store(run.dir / "missing"), Error);
    }
}

TEST_CASE("lookups") {
    QpRun run;
    const auto store = run.exported();
    const auto pinned = lookup_commit(store, qp::pinned.hex());
    CHECK(pinned.status == IndexStatus::vulnerable);
    CHECK(pinned.hits == std::vector<VulnHit>{{"CVE-2019-13164", 8.8}});
    CHECK(lookup_commit(store, qp::qemu_head).status == IndexStatus::clean);
    CHECK(lookup_commit(store, qp::qemu_head).hits.empty());
    CHECK(lookup_commit(store, cid("elsewhere")).status == IndexStatus::not_indexed);
    CHECK_THROWS_AS(lookup_commit(store, std::string("f052389")), InvalidCommitId);

    const auto panda = lookup_origin(store, qp::panda_url);
    CHECK(panda.indexed);
    REQUIRE(panda.branches.size() == 1);
    CHECK(panda.branches[0].is_default);
    CHECK(panda.branches[0].vulns.size() == 1);
    const auto qemu = lookup_origin(store, qp::qemu_url + ".git");
    CHECK(qemu.indexed);
    REQUIRE(qemu.branches.size() == 1);
    CHECK(qemu.branches[0].vulns.empty());
    const auto none = lookup_origin(store, "https://example.invalid/nothing");
    CHECK_FALSE(none.indexed);
    CHECK(none.branches.empty());
}

TEST_CASE("gitmodules scanning") {
    SUBCASE("parser") {
        std::istringstream in(
            "; comment\n[core]\n\tbare = false\n[submodule \"a\"]\n\tpath = lib/a\n\tURL = https://x/a\n"
            "[submodule \"b\"]\n  url=https://x/b\n  path=lib/b\n");
        const auto mods = parse_gitmodules(in);
        REQUIRE(mods.size() == 2);
        CHECK(mods[0].name == "a");
        CHECK(mods[0].path == "lib/a");
        CHECK(mods[0].url == "https://x/a");
        CHECK(mods[1].path == "lib/b");
        std::istringstream no_path("[submodule \"a\"]\nurl = x\n");
        CHECK_THROWS_AS(parse_gitmodules(no_path), ParseError);
        std::istringstream junk("[submodule \"a\"]\npath\n");
        CHECK_THROWS_AS(parse_gitmodules(junk), ParseError);
    }
    SUBCASE("pinned at the vulnerable PANDA commit") {
        const auto report = scan_modules("vulnerable");
        REQUIRE(report.entries.size() == 2);
        CHECK(report.entries[0].commit == qp::pinned);
        CHECK(report.entries[0].hits == std::vector<VulnHit>{{"CVE-2019-13164", 8.8}});
        CHECK(report.entries[1].status == IndexStatus::clean);
        CHECK(report.hit_count() == 1);
    }
    SUBCASE("clean pin") {
        const auto report = scan_modules("clean");
        REQUIRE(report.entries.size() == 1);
        CHECK(report.hit_count() == 0);
    }
    SUBCASE("empty manifest") {
        const auto report = scan_modules("empty");
        CHECK(report.entries.empty());
        CHECK(report.hit_count() == 0);
    }
    SUBCASE("submodule without a pin is unresolved") {
        QpRun run;
        std::ifstream m(fixture("scan/vulnerable.gitmodules"));
        const auto report = scan_gitmodules("x", parse_gitmodules(m), {}, run.exported());
        CHECK(report.entries.size() == 2);
        CHECK(report.unresolved_count() == 2);
        std::ostringstream out;
        write_scan_report(out, report);
        CHECK(out.str().find("unresolved") != std::string::npos);
    }
}

TEST_CASE("go.mod scanning") {
    SUBCASE("parser") {
        std::ifstream in(fixture("scan/go.mod"));
        const auto reqs = parse_gomod(in);
        REQUIRE(reqs.size() == 3);
        CHECK(reqs[0].module == "github.com/panda-re/panda");
        CHECK(reqs[0].version == "v3.1.0+incompatible");
        CHECK(reqs[2].module == "golang.org/x/sys");
        CHECK(reqs[2].indirect);
        std::istringstream bad("require (\n\tgithub.com/x\n)\n");
        CHECK_THROWS_AS(parse_gomod(bad), ParseError);
        std::istringstream unterminated("require (\n\tgithub.com/x v1.0.0\n");
        CHECK_THROWS_AS(parse_gomod(unterminated), ParseError);
        std::istringstream quoted("require \"github.com/x\" v1.0.0\n");
        CHECK(parse_gomod(quoted).at(0).module == "github.com/x");
    }
    SUBCASE("resolution and hits") {
        QpRun run;
        std::ifstream in(fixture("scan/go.mod"));
        std::ifstream res(fixture("scan/go.resolution"));
        const auto report = scan_gomod("go.mod", parse_gomod(in), parse_resolution(res), run.exported());
        REQUIRE(report.entries.size() == 3);
        CHECK(report.entries[0].hits == std::vector<VulnHit>{{"CVE-2019-13164", 8.8}});
        CHECK(report.entries[1].status == IndexStatus::clean);
        CHECK_FALSE(report.entries[2].commit.has_value());
        CHECK(report.unresolved_count() == 1);
    }
    SUBCASE("zero requirements") {
        std::ifstream in(fixture("scan/empty.go.mod"));
        QpRun run;
        CHECK(scan_gomod("go.mod", parse_gomod(in), {}, run.exported()).entries.empty());
    }
}
