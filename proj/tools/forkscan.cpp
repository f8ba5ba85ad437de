// forkscan: find one-day vulnerabilities in forks by propagating advisory
// ranges over a shared commit graph.
//
// Exit status: 0 ran with zero hits, 1 hits found, 2 usage or I/O error.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <string>

#include "forkscan/pipeline.hpp"
#include "forkscan/store.hpp"

namespace fs = std::filesystem;
using namespace forkscan;

namespace {

constexpr int kClean = 0;
constexpr int kHits = 1;
constexpr int kFailure = 2;

std::string score_text(const std::optional<double>& s) {
    if (!s) return "?";
    std::ostringstream ss;
    ss << *s;
    return ss.str();
}

std::ifstream open_input(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return in;
}

int print_scan(const ScanReport& report) {
    write_scan_report(std::cout, report);
    return report.hit_count() > 0 ? kHits : kClean;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"forkscan: one-day vulnerability detection across forks"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "forkscan 0.1.0");

    int status = kClean;

    // ingest
    IngestOptions ingest_opts;
    auto* ingest_cmd = app.add_subcommand("ingest", "Load the commit graph, origins and advisories into a state directory");
    ingest_cmd->add_option("--commits", ingest_opts.commits, "commits.tsv")->required()->check(CLI::ExistingFile);
    ingest_cmd->add_option("--origins", ingest_opts.origins, "origins.tsv")->required()->check(CLI::ExistingFile);
    ingest_cmd->add_option("--advisories", ingest_opts.advisories, "OSV records, one JSON document per line")
        ->required()
        ->check(CLI::ExistingFile);
    ingest_cmd->add_option("--out", ingest_opts.out, "State directory")->required();
    ingest_cmd->callback([&] {
        const auto s = ingest(ingest_opts);
        std::cout << "commits: " << s.commits << "\nedges: " << s.edges << "\norigins: " << s.origins
                  << "\nadvisory records: " << s.records << "\nvulnerabilities kept: " << s.vulnerabilities
                  << "\nranges accepted: " << s.cleaning.accepted
                  << "\nranges rejected: " << s.cleaning.rejected.size() << '\n';
        for (const auto& w : s.warnings) std::cerr << "warning: " << w << '\n';
    });

    // propagate
    PropagateOptions prop_opts;
    std::string worklist = "stack";
    auto* prop_cmd = app.add_subcommand("propagate", "Label every commit with the ranges it is vulnerable to");
    prop_cmd->add_option("--state", prop_opts.state, "State directory")->required()->check(CLI::ExistingDirectory);
    prop_cmd->add_option("--threads", prop_opts.threads, "Worker threads")->check(CLI::PositiveNumber);
    prop_cmd->add_option("--worklist", worklist, "Traversal order")->check(CLI::IsMember({"stack", "queue"}));
    prop_cmd->add_flag("--reverse-children", prop_opts.reverse_children, "Visit children in reverse order");
    prop_cmd->callback([&] {
        prop_opts.worklist = worklist == "queue" ? Worklist::queue : Worklist::stack;
        const auto s = propagate(prop_opts);
        std::cout << "ranges: " << s.ranges << "\nlabeled commits: " << s.labeled_commits << "\nlabels: " << s.labels
                  << '\n';
    });

    // analyze
    AnalyzeOptions an_opts;
    std::string date_cutoff = "2023-01-01";
    std::string manifests, diffs;
    auto* an_cmd = app.add_subcommand("analyze", "Find unpatched fork heads and run the filter cascade");
    an_cmd->add_option("--state", an_opts.state, "State directory")->required()->check(CLI::ExistingDirectory);
    an_cmd->add_option("--min-stars", an_opts.min_stars, "Keep origins with more stars than this")->capture_default_str();
    an_cmd->add_option("--min-forks", an_opts.min_forks, "Keep origins with more forks than this")->capture_default_str();
    an_cmd->add_option("--min-severity", an_opts.scope.min_severity, "Lowest CVSS score kept")->capture_default_str();
    an_cmd->add_option("--date-cutoff", date_cutoff, "Drop origins inactive since (YYYY-MM-DD or epoch)")
        ->capture_default_str();
    an_cmd->add_option("--manifests", manifests, "Path manifests for the divergence filter")
        ->check(CLI::ExistingDirectory);
    an_cmd->add_option("--diffs", diffs, "Diff corpus for equivalent-fix detection")->check(CLI::ExistingDirectory);
    an_cmd->add_option("--threads", an_opts.threads, "Worker threads")->check(CLI::PositiveNumber);
    an_cmd->callback([&] {
        an_opts.scope.date_cutoff = parse_date(date_cutoff);
        if (!manifests.empty()) an_opts.manifests = manifests;
        if (!diffs.empty()) an_opts.diffs = diffs;
        const auto s = analyze(an_opts);
        std::cout << "candidate pairs: " << s.report.input << '\n';
        for (const auto& st : s.report.stages) {
            std::cout << "  " << st.stage << ": " << st.passed << " passed, " << st.failed << " failed";
            for (const auto& [reason, n] : st.reasons) std::cout << " [" << reason << ' ' << n << ']';
            std::cout << '\n';
        }
        std::cout << "impacted forks: " << s.impacted_forks.size() << '\n';
        std::cout << "surviving pairs: " << s.survivors.size() << '\n';
        for (const auto& p : s.survivors) {
            std::cout << p.origin_url << '\t' << p.branch << '\t' << p.vuln_id << '\t' << p.head.hex() << '\n';
        }
        for (const auto& w : s.warnings) std::cerr << "warning: " << w << '\n';
        if (!s.report.reconciles()) throw Error("cascade accounting does not reconcile");
        status = s.survivors.empty() ? kClean : kHits;
    });

    // export
    fs::path export_state_dir, export_out;
    auto* ex_cmd = app.add_subcommand("export", "Write the commit and origin vulnerability tables");
    ex_cmd->add_option("--state", export_state_dir, "State directory")->required()->check(CLI::ExistingDirectory);
    ex_cmd->add_option("--out", export_out, "Store directory")->required();
    ex_cmd->callback([&] {
        const auto s = export_state(export_state_dir, export_out);
        std::cout << "commit rows: " << s.commit_rows << "\norigin rows: " << s.origin_rows << '\n';
    });

    // lookup
    auto* lookup_cmd = app.add_subcommand("lookup", "Query an exported store");
    lookup_cmd->require_subcommand(1);
    fs::path store_dir;
    std::string sha, url;
    auto* lc = lookup_cmd->add_subcommand("commit", "Vulnerabilities affecting a commit");
    lc->add_option("sha", sha, "Commit id")->required();
    lc->add_option("--store", store_dir, "Store directory")->required()->check(CLI::ExistingDirectory);
    lc->callback([&] {
        const auto store = load_store(store_dir);
        const auto r = lookup_commit(store, sha);
        std::cout << sha << '\t' << status_name(r.status) << '\n';
        for (const auto& h : r.hits) std::cout << h.vuln_id << '\t' << score_text(h.severity) << '\n';
        status = r.hits.empty() ? kClean : kHits;
    });
    auto* lo = lookup_cmd->add_subcommand("origin", "Per-branch status of an origin");
    lo->add_option("url", url, "Origin URL")->required();
    lo->add_option("--store", store_dir, "Store directory")->required()->check(CLI::ExistingDirectory);
    lo->callback([&] {
        const auto store = load_store(store_dir);
        const auto r = lookup_origin(store, url);
        if (!r.indexed) {
            std::cout << url << "\tnot-indexed\n";
            return;
        }
        bool hits = false;
        for (const auto& b : r.branches) {
            std::cout << b.branch << (b.is_default ? " (default)" : "") << '\t' << b.head.hex() << '\t'
                      << (b.vulns.empty() ? "clean" : "vulnerable") << '\n';
            for (const auto& v : b.vulns) {
                std::cout << "  " << v.vuln_id << '\t' << score_text(v.severity) << '\t' << v.survived_filters << '\n';
                hits = true;
            }
        }
        status = hits ? kHits : kClean;
    });

    // scan
    auto* scan_cmd = app.add_subcommand("scan", "Check a dependency manifest against a store");
    scan_cmd->require_subcommand(1);
    fs::path manifest, pins, resolution;
    auto* sg = scan_cmd->add_subcommand("gitmodules", "Scan a .gitmodules file");
    sg->add_option("file", manifest, ".gitmodules")->required()->check(CLI::ExistingFile);
    sg->add_option("--pins", pins, "path<TAB>sha gitlink pins")->required()->check(CLI::ExistingFile);
    sg->add_option("--store", store_dir, "Store directory")->required()->check(CLI::ExistingDirectory);
    sg->callback([&] {
        const auto store = load_store(store_dir);
        auto min = open_input(manifest);
        auto pin_in = open_input(pins);
        status = print_scan(scan_gitmodules(manifest.string(), parse_gitmodules(min), parse_pins(pin_in), store));
    });
    auto* sm = scan_cmd->add_subcommand("gomod", "Scan a go.mod file");
    sm->add_option("file", manifest, "go.mod")->required()->check(CLI::ExistingFile);
    sm->add_option("--resolution", resolution, "module<TAB>version<TAB>sha map")->required()->check(CLI::ExistingFile);
    sm->add_option("--store", store_dir, "Store directory")->required()->check(CLI::ExistingDirectory);
    sm->callback([&] {
        const auto store = load_store(store_dir);
        auto min = open_input(manifest);
        auto res_in = open_input(resolution);
        status = print_scan(scan_gomod(manifest.string(), parse_gomod(min), parse_resolution(res_in), store));
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kFailure;
    } catch (const std::exception& e) {
        std::cerr << "forkscan: " << e.what() << '\n';
        return kFailure;
    }
    return status;
}
