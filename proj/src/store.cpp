#include "forkscan/store.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <tuple>

namespace forkscan {
namespace {

const char* const kCommitHeader = "sha,vuln_id,range_index";
const char* const kOriginHeader = "url,branch,head_sha,vuln_id,severity,survived_filters";
const char* const kVulnHeader = "vuln_id,severity";
const char* const kBranchHeader = "url,branch,head_sha,is_default";

void csv_field(std::ostream& out, std::string_view s) {
    if (s.find_first_of(",\"\n\r") == std::string_view::npos) {
        out << s;
        return;
    }
    out << '"';
    for (char c : s) {
        if (c == '"') out << '"';
        out << c;
    }
    out << '"';
}

// RFC 4180 style; records never span lines in our files, quoted fields
// only protect commas and quotes.
std::vector<std::string> csv_split(const std::string& line, std::size_t line_no) {
    std::vector<std::string> out(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    out.back() += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                out.back() += c;
            }
        } else if (c == '"' && out.back().empty()) {
            quoted = true;
        } else if (c == ',') {
            out.emplace_back();
        } else {
            out.back() += c;
        }
    }
    if (quoted) throw ParseError("unterminated quoted field", line_no);
    return out;
}

std::string format_score(const std::optional<double>& score) {
    if (!score) return "";
    char buf[32];
    const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, *score);
    return std::string(buf, end);
}

std::optional<double> parse_score(const std::string& s, std::size_t line_no) {
    if (s.empty()) return std::nullopt;
    double v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) throw ParseError("invalid severity '" + s + "'", line_no);
    return v;
}

CommitId parse_sha(const std::string& s, std::size_t line_no) {
    const auto id = CommitId::parse(s);
    if (!id) throw ParseError("invalid sha '" + s + "'", line_no);
    return *id;
}

template <typename Row>
void write_csv(const std::filesystem::path& path, const char* header, const std::vector<Row>& rows,
               void (*write_row)(std::ostream&, const Row&)) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << header << '\n';
    for (const auto& r : rows) {
        write_row(out, r);
        out << '\n';
    }
    if (!out) throw Error("write failed: " + path.string());
}

template <typename Fn>
void read_csv(const std::filesystem::path& path, const char* header, std::size_t fields, Fn&& on_row) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != header) {
        throw ParseError(path.filename().string() + ": expected header '" + header + "'", 1);
    }
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto f = csv_split(line, line_no);
        if (f.size() != fields) {
            throw ParseError(path.filename().string() + ": expected " + std::to_string(fields) + " fields",
                             line_no);
        }
        on_row(f, line_no);
    }
}

std::size_t parse_index(const std::string& s, std::size_t line_no) {
    std::size_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) throw ParseError("invalid range index '" + s + "'", line_no);
    return v;
}

std::string trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return std::string(s);
}

ScanEntry resolve_entry(std::string locator, std::optional<CommitId> commit, const VulnStore& store) {
    ScanEntry e;
    e.locator = std::move(locator);
    e.commit = commit;
    if (commit) {
        auto found = lookup_commit(store, *commit);
        e.status = found.status;
        e.hits = std::move(found.hits);
    }
    return e;
}

}  // namespace

std::string format_verdicts(const std::vector<Verdict>& verdicts) {
    std::string out;
    for (const auto& v : verdicts) {
        if (!out.empty()) out += '|';
        out += v.stage;
        out += v.passed ? ":pass" : ":fail";
        if (!v.passed && !v.reason.empty()) out += ":" + v.reason;
    }
    return out;
}

VulnStore build_store(const CommitGraph& graph, const VulnerabilityLabeling& labeling,
                      const std::vector<Vulnerability>& vulns, const std::vector<OriginRecord>& origins,
                      const std::vector<PairRecord>& pairs) {
    VulnStore store;
    const auto& keys = labeling.keys();
    for (CommitIndex c = 0; c < graph.size(); ++c) {
        for (auto slot : labeling.ranges_of(c)) store.commits.push_back({graph.id(c), keys[slot].vuln_id, keys[slot].range_index});
    }
    std::sort(store.commits.begin(), store.commits.end(), [](const CommitRow& a, const CommitRow& b) {
        return std::tie(a.sha, a.vuln_id, a.range_index) < std::tie(b.sha, b.vuln_id, b.range_index);
    });

    for (const auto& v : vulns) store.severities[v.id] = v.severity_score;

    std::map<std::tuple<std::string, std::string, std::string, std::size_t>, const PairRecord*> by_key;
    for (const auto& p : pairs) by_key[{canonical_repo_url(p.origin_url), p.branch, p.vuln_id, p.range_index}] = &p;

    for (const auto& o : origins) {
        for (const auto& b : o.branches) {
            store.branches.push_back({o.url, b.name, b.head, b.is_default});
            const CommitIndex head = graph.index_of(b.head);
            // vuln_id -> chosen pair (nullptr when never filtered)
            std::map<std::string, const PairRecord*> chosen;
            for (auto slot : labeling.ranges_of(head)) {
                const auto& key = keys[slot];
                const auto it = by_key.find({canonical_repo_url(o.url), b.name, key.vuln_id, key.range_index});
                const PairRecord* pair = it == by_key.end() ? nullptr : it->second;
                const auto [cur, inserted] = chosen.try_emplace(key.vuln_id, pair);
                if (inserted) continue;
                const bool cur_survived = cur->second && !cur->second->failed();
                const bool new_survived = pair && !pair->failed();
                if (!cur_survived && new_survived) cur->second = pair;
                if (!cur->second && pair) cur->second = pair;
            }
            for (const auto& [vuln_id, pair] : chosen) {
                const auto sev = store.severities.find(vuln_id);
                store.origins.push_back({o.url, b.name, b.head, vuln_id,
                                         sev == store.severities.end() ? std::nullopt : sev->second,
                                         pair ? format_verdicts(pair->verdicts) : ""});
            }
        }
    }
    std::sort(store.origins.begin(), store.origins.end(), [](const OriginRow& a, const OriginRow& b) {
        return std::tie(a.url, a.branch, a.vuln_id) < std::tie(b.url, b.branch, b.vuln_id);
    });
    std::sort(store.branches.begin(), store.branches.end(), [](const auto& a, const auto& b) {
        return std::tie(a.url, a.branch) < std::tie(b.url, b.branch);
    });
    store.indexed.reserve(graph.size());
    for (CommitIndex c = 0; c < graph.size(); ++c) store.indexed.push_back(graph.id(c));
    std::sort(store.indexed.begin(), store.indexed.end());
    return store;
}

void write_store(const VulnStore& store, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_csv<CommitRow>(dir / "commit_vulns.csv", kCommitHeader, store.commits, [](std::ostream& out, const CommitRow& r) {
        out << r.sha.hex() << ',';
        csv_field(out, r.vuln_id);
        out << ',' << r.range_index;
    });
    write_csv<OriginRow>(dir / "origin_vulns.csv", kOriginHeader, store.origins, [](std::ostream& out, const OriginRow& r) {
        csv_field(out, r.url);
        out << ',';
        csv_field(out, r.branch);
        out << ',' << r.head.hex() << ',';
        csv_field(out, r.vuln_id);
        out << ',' << format_score(r.severity) << ',';
        csv_field(out, r.survived_filters);
    });
    using VulnEntry = std::pair<std::string, std::optional<double>>;
    const std::vector<VulnEntry> vulns(store.severities.begin(), store.severities.end());
    write_csv<VulnEntry>(dir / "vulns.csv", kVulnHeader, vulns, [](std::ostream& out, const VulnEntry& r) {
        csv_field(out, r.first);
        out << ',' << format_score(r.second);
    });
    write_csv<OriginBranchRow>(dir / "origins.csv", kBranchHeader, store.branches,
                               [](std::ostream& out, const OriginBranchRow& r) {
                                   csv_field(out, r.url);
                                   out << ',';
                                   csv_field(out, r.branch);
                                   out << ',' << r.head.hex() << ',' << (r.is_default ? 1 : 0);
                               });
    std::ofstream bin(dir / "indexed_commits.bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw Error("cannot write " + (dir / "indexed_commits.bin").string());
    for (const auto& id : store.indexed) {
        bin.write(reinterpret_cast<const char*>(id.bytes().data()), CommitId::kBytes);
    }
    if (!bin) throw Error("write failed: indexed_commits.bin");
}

VulnStore load_store(const std::filesystem::path& dir) {
    VulnStore store;
    read_csv(dir / "commit_vulns.csv", kCommitHeader, 3, [&](const auto& f, std::size_t line) {
        store.commits.push_back({parse_sha(f[0], line), f[1], parse_index(f[2], line)});
    });
    read_csv(dir / "origin_vulns.csv", kOriginHeader, 6, [&](const auto& f, std::size_t line) {
        store.origins.push_back({f[0], f[1], parse_sha(f[2], line), f[3], parse_score(f[4], line), f[5]});
    });
    read_csv(dir / "vulns.csv", kVulnHeader, 2,
             [&](const auto& f, std::size_t line) { store.severities[f[0]] = parse_score(f[1], line); });
    read_csv(dir / "origins.csv", kBranchHeader, 4, [&](const auto& f, std::size_t line) {
        if (f[3] != "0" && f[3] != "1") throw ParseError("invalid is_default '" + f[3] + "'", line);
        store.branches.push_back({f[0], f[1], parse_sha(f[2], line), f[3] == "1"});
    });
    const auto bin_path = dir / "indexed_commits.bin";
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw Error("cannot open " + bin_path.string());
    std::array<std::uint8_t, CommitId::kBytes> buf{};
    while (bin.read(reinterpret_cast<char*>(buf.data()), buf.size())) store.indexed.emplace_back(buf);
    if (bin.gcount() != 0) throw Error(bin_path.string() + " has a truncated record");

    auto commit_less = [](const CommitRow& a, const CommitRow& b) {
        return std::tie(a.sha, a.vuln_id, a.range_index) < std::tie(b.sha, b.vuln_id, b.range_index);
    };
    if (!std::is_sorted(store.commits.begin(), store.commits.end(), commit_less) ||
        !std::is_sorted(store.indexed.begin(), store.indexed.end())) {
        throw Error("store at " + dir.string() + " is not sorted");
    }
    return store;
}

const char* status_name(IndexStatus s) {
    switch (s) {
        case IndexStatus::not_indexed: return "not-indexed";
        case IndexStatus::clean: return "indexed-clean";
        case IndexStatus::vulnerable: return "vulnerable";
    }
    return "?";
}

CommitLookup lookup_commit(const VulnStore& store, const CommitId& sha) {
    CommitLookup out;
    auto lo = std::lower_bound(store.commits.begin(), store.commits.end(), sha,
                               [](const CommitRow& r, const CommitId& id) { return r.sha < id; });
    for (; lo != store.commits.end() && lo->sha == sha; ++lo) {
        if (!out.hits.empty() && out.hits.back().vuln_id == lo->vuln_id) continue;
        const auto sev = store.severities.find(lo->vuln_id);
        out.hits.push_back({lo->vuln_id, sev == store.severities.end() ? std::nullopt : sev->second});
    }
    if (!out.hits.empty()) {
        out.status = IndexStatus::vulnerable;
    } else if (std::binary_search(store.indexed.begin(), store.indexed.end(), sha)) {
        out.status = IndexStatus::clean;
    }
    return out;
}

CommitLookup lookup_commit(const VulnStore& store, const std::string& sha) {
    return lookup_commit(store, CommitId::from_hex(sha));
}

OriginLookup lookup_origin(const VulnStore& store, const std::string& url) {
    const std::string key = canonical_repo_url(url);
    OriginLookup out;
    for (const auto& b : store.branches) {
        if (canonical_repo_url(b.url) != key) continue;
        out.indexed = true;
        out.branches.push_back({b.branch, b.head, b.is_default, {}});
    }
    for (const auto& r : store.origins) {
        if (canonical_repo_url(r.url) != key) continue;
        auto it = std::find_if(out.branches.begin(), out.branches.end(),
                               [&](const BranchStatus& s) { return s.branch == r.branch; });
        if (it == out.branches.end()) {
            out.indexed = true;
            out.branches.push_back({r.branch, r.head, false, {}});
            it = std::prev(out.branches.end());
        }
        it->vulns.push_back(r);
    }
    std::sort(out.branches.begin(), out.branches.end(),
              [](const BranchStatus& a, const BranchStatus& b) { return a.branch < b.branch; });
    return out;
}

std::size_t ScanReport::hit_count() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.hits.size();
    return n;
}

std::size_t ScanReport::unresolved_count() const {
    return static_cast<std::size_t>(
        std::count_if(entries.begin(), entries.end(), [](const ScanEntry& e) { return !e.commit; }));
}

void write_scan_report(std::ostream& out, const ScanReport& report) {
    out << "# " << report.manifest << ": " << report.entries.size() << " dependencies, " << report.hit_count()
        << " hits, " << report.unresolved_count() << " unresolved\n";
    for (const auto& e : report.entries) {
        out << e.locator << '\t' << (e.commit ? e.commit->hex() : std::string("-")) << '\t'
            << (e.commit ? status_name(e.status) : "unresolved");
        for (const auto& h : e.hits) out << '\t' << h.vuln_id << ':' << (h.severity ? format_score(h.severity) : "?");
        out << '\n';
    }
}

std::vector<Submodule> parse_gitmodules(std::istream& in) {
    std::vector<Submodule> out;
    std::string line;
    std::size_t line_no = 0;
    bool in_submodule = false;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string text = trim(line);
        if (text.empty() || text[0] == '#' || text[0] == ';') continue;
        if (text.front() == '[') {
            if (text.back() != ']') throw ParseError("malformed section header", line_no);
            const std::string section = trim(std::string_view(text).substr(1, text.size() - 2));
            in_submodule = section.rfind("submodule", 0) == 0;
            if (in_submodule) {
                const auto q1 = section.find('"');
                const auto q2 = section.rfind('"');
                if (q1 == std::string::npos || q2 == q1) throw ParseError("submodule section without a name", line_no);
                out.push_back({section.substr(q1 + 1, q2 - q1 - 1), "", ""});
            }
            continue;
        }
        const auto eq = text.find('=');
        if (eq == std::string::npos) throw ParseError("expected key = value", line_no);
        if (!in_submodule) continue;
        std::string key = trim(std::string_view(text).substr(0, eq));
        std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
        const std::string value = trim(std::string_view(text).substr(eq + 1));
        if (key == "path") out.back().path = value;
        if (key == "url") out.back().url = value;
    }
    for (const auto& s : out) {
        if (s.path.empty()) throw ParseError("submodule '" + s.name + "' has no path", line_no);
    }
    return out;
}

std::map<std::string, CommitId> parse_pins(std::istream& in) {
    std::map<std::string, CommitId> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw ParseError("expected path<TAB>sha", line_no);
        out[line.substr(0, tab)] = parse_sha(line.substr(tab + 1), line_no);
    }
    return out;
}

ScanReport scan_gitmodules(const std::string& manifest, const std::vector<Submodule>& modules,
                           const std::map<std::string, CommitId>& pins, const VulnStore& store) {
    ScanReport report;
    report.manifest = manifest;
    for (const auto& m : modules) {
        const auto it = pins.find(m.path);
        report.entries.push_back(resolve_entry(m.path + " (" + m.url + ")",
                                               it == pins.end() ? std::nullopt : std::optional(it->second), store));
    }
    return report;
}

std::vector<GoRequirement> parse_gomod(std::istream& in) {
    std::vector<GoRequirement> out;
    std::string line;
    std::size_t line_no = 0;
    std::string block;  // directive of the open "( ... )" block
    auto requirement = [&](std::string_view text) {
        bool indirect = false;
        const auto comment = text.find("//");
        if (comment != std::string_view::npos) {
            indirect = trim(text.substr(comment + 2)).rfind("indirect", 0) == 0;
            text = text.substr(0, comment);
        }
        std::istringstream fields{std::string(text)};
        std::string module, version, extra;
        if (!(fields >> module >> version) || (fields >> extra)) {
            throw ParseError("malformed requirement '" + trim(text) + "'", line_no);
        }
        auto unquote = [](std::string& s) {
            if (s.size() >= 2 && (s.front() == '"' || s.front() == '`') && s.back() == s.front()) s = s.substr(1, s.size() - 2);
        };
        unquote(module);
        unquote(version);
        if (version.empty() || version[0] != 'v') {
            throw ParseError("malformed version '" + version + "'", line_no);
        }
        out.push_back({module, version, indirect});
    };
    while (std::getline(in, line)) {
        ++line_no;
        std::string text = trim(line);
        if (text.empty() || text.rfind("//", 0) == 0) continue;
        if (!block.empty()) {
            if (text == ")") {
                block.clear();
            } else if (block == "require") {
                requirement(text);
            }
            continue;
        }
        const auto space = text.find_first_of(" \t(");
        const std::string directive = text.substr(0, space);
        std::string rest = space == std::string::npos ? "" : trim(std::string_view(text).substr(space));
        if (rest.rfind("(", 0) == 0) {
            if (trim(std::string_view(rest).substr(1)) == ")") continue;  // "require ()"
            block = directive;
            continue;
        }
        if (directive == "require") requirement(rest);
    }
    if (!block.empty()) throw ParseError("unterminated " + block + " block", line_no);
    return out;
}

GoResolution parse_resolution(std::istream& in) {
    GoResolution out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto t1 = line.find('\t');
        const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
        if (t2 == std::string::npos) throw ParseError("expected module<TAB>version<TAB>sha", line_no);
        out[{line.substr(0, t1), line.substr(t1 + 1, t2 - t1 - 1)}] = parse_sha(line.substr(t2 + 1), line_no);
    }
    return out;
}

ScanReport scan_gomod(const std::string& manifest, const std::vector<GoRequirement>& requirements,
                      const GoResolution& resolution, const VulnStore& store) {
    ScanReport report;
    report.manifest = manifest;
    for (const auto& r : requirements) {
        const auto it = resolution.find({r.module, r.version});
        report.entries.push_back(resolve_entry(r.module + "@" + r.version,
                                               it == resolution.end() ? std::nullopt : std::optional(it->second),
                                               store));
    }
    return report;
}

}  // namespace forkscan
