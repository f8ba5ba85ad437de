#include "forkscan/osv.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <istream>
#include <ostream>
#include <set>
#include <string>

#include <json.hpp>

#include "forkscan/error.hpp"

namespace forkscan {
namespace {

using nlohmann::json;

std::string lowercase(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::optional<double> parse_score(std::string_view text) {
    while (!text.empty() && std::isspace(static_cast<unsigned char>(text.front()))) text.remove_prefix(1);
    while (!text.empty() && std::isspace(static_cast<unsigned char>(text.back()))) text.remove_suffix(1);
    if (text.empty()) return std::nullopt;
    double value = 0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || ptr != text.data() + text.size()) return std::nullopt;
    if (!(value >= 0.0 && value <= 10.0)) return std::nullopt;
    return value;
}

std::pair<std::optional<double>, std::string> best_severity(const Vulnerability& v) {
    std::optional<double> best;
    std::string source;
    for (std::size_t i = 0; i < v.severity.size(); ++i) {
        const auto score = parse_score(v.severity[i].score);
        if (score && (!best || *score > *best)) {
            best = score;
            source = "severity[" + std::to_string(i) + "]";
            if (!v.severity[i].type.empty()) source += " " + v.severity[i].type;
        }
    }
    return {best, source};
}

void parse_range(const json& range, const std::string& vuln_id, std::size_t index,
                 std::vector<std::string>& warnings, VulnRange& out) {
    out.vuln_id = vuln_id;
    out.index = index;
    if (auto it = range.find("repo"); it != range.end() && it->is_string()) {
        out.repo_url = it->get<std::string>();
    }
    const auto events = range.find("events");
    if (events == range.end() || !events->is_array()) return;
    for (const auto& event : *events) {
        if (!event.is_object()) {
            out.defects.push_back("event is not an object");
            continue;
        }
        for (const auto& [key, value] : event.items()) {
            const auto kind = parse_event_key(key);
            if (!kind) {
                warnings.push_back(vuln_id + ": ignoring unknown event '" + key + "'");
                continue;
            }
            if (!value.is_string()) {
                out.defects.push_back(std::string(key) + " value is not a string");
                continue;
            }
            const std::string commit = lowercase(value.get<std::string>());
            if (commit == "0") {
                if (*kind == EventKind::introduced) {
                    out.intro_zero = true;
                } else {
                    out.defects.push_back("'0' under " + std::string(key));
                }
                continue;
            }
            if (auto id = CommitId::parse(commit)) {
                out.events(*kind).insert(*id);
            } else {
                out.defects.push_back("bad sha '" + commit + "' under " + std::string(key));
            }
        }
    }
}

std::optional<std::pair<EventKind, EventKind>> first_overlap(const VulnRange& r,
                                                             CommitId* where) {
    for (std::size_t a = 0; a < 4; ++a) {
        for (std::size_t b = a + 1; b < 4; ++b) {
            const auto& sa = r.events(kAllEventKinds[a]);
            const auto& sb = r.events(kAllEventKinds[b]);
            for (const CommitId& id : sa) {
                if (sb.count(id)) {
                    if (where) *where = id;
                    return std::pair{kAllEventKinds[a], kAllEventKinds[b]};
                }
            }
        }
    }
    return std::nullopt;
}

std::string overlap_detail(const VulnRange& r, const char* prefix) {
    CommitId where;
    const auto kinds = first_overlap(r, &where);
    return std::string(prefix) + where.hex() + " is both " + std::string(event_key(kinds->first)) +
           " and " + std::string(event_key(kinds->second));
}

std::optional<std::pair<RejectReason, std::string>> check_range(const VulnRange& r,
                                                                const CommitGraph& graph) {
    if (!r.defects.empty()) return std::pair{RejectReason::bad_sha, r.defects.front()};
    if (r.intro.empty() && !r.intro_zero) {
        return std::pair{RejectReason::no_intro, std::string("range has no introduced event")};
    }
    if (first_overlap(r, nullptr)) return std::pair{RejectReason::dup_event, overlap_detail(r, "")};
    for (EventKind kind : kAllEventKinds) {
        for (const CommitId& id : r.events(kind)) {
            if (!graph.contains(id)) {
                return std::pair{RejectReason::missing_commit,
                                 std::string(event_key(kind)) + " commit " + id.hex() +
                                     " is not in the graph"};
            }
        }
    }
    return std::nullopt;
}

json ids_to_json(const CommitSet& ids) {
    json arr = json::array();
    for (const CommitId& id : ids) arr.push_back(id.hex());
    return arr;
}

}  // namespace

std::string_view event_key(EventKind kind) {
    switch (kind) {
        case EventKind::introduced: return "introduced";
        case EventKind::fixed: return "fixed";
        case EventKind::limit: return "limit";
        case EventKind::last_affected: return "last_affected";
    }
    return "?";
}

std::optional<EventKind> parse_event_key(std::string_view key) {
    for (EventKind kind : kAllEventKinds) {
        if (event_key(kind) == key) return kind;
    }
    return std::nullopt;
}

std::string_view reason_code(RejectReason reason) {
    switch (reason) {
        case RejectReason::bad_sha: return "bad-sha";
        case RejectReason::no_intro: return "no-intro";
        case RejectReason::dup_event: return "dup-event";
        case RejectReason::missing_commit: return "missing-commit";
        case RejectReason::no_roots: return "no-roots";
        case RejectReason::unknown_repo: return "unknown-repo";
        case RejectReason::cherry_conflict: return "cherry-conflict";
    }
    return "?";
}

std::optional<RejectReason> parse_reason_code(std::string_view code) {
    for (auto r : {RejectReason::bad_sha, RejectReason::no_intro, RejectReason::dup_event,
                   RejectReason::missing_commit, RejectReason::no_roots, RejectReason::unknown_repo,
                   RejectReason::cherry_conflict}) {
        if (reason_code(r) == code) return r;
    }
    return std::nullopt;
}

CommitSet& VulnRange::events(EventKind kind) {
    return const_cast<CommitSet&>(std::as_const(*this).events(kind));
}

const CommitSet& VulnRange::events(EventKind kind) const {
    switch (kind) {
        case EventKind::introduced: return intro;
        case EventKind::fixed: return fixed;
        case EventKind::limit: return limit;
        case EventKind::last_affected: return last;
    }
    return intro;
}

std::size_t CleaningReport::count(RejectReason reason) const {
    return static_cast<std::size_t>(std::count_if(
        rejected.begin(), rejected.end(), [&](const Rejection& r) { return r.reason == reason; }));
}

ParsedAdvisories parse_vulnerabilities(std::istream& in) {
    ParsedAdvisories out;
    std::set<std::string> seen_ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) {
            continue;
        }
        ++out.records;
        json record;
        try {
            record = json::parse(line);
        } catch (const json::parse_error& e) {
            ++out.skipped_records;
            out.warnings.push_back("line " + std::to_string(line_no) + ": unreadable record");
            continue;
        }
        const auto id = record.find("id");
        if (!record.is_object() || id == record.end() || !id->is_string()) {
            ++out.skipped_records;
            out.warnings.push_back("line " + std::to_string(line_no) + ": record without id");
            continue;
        }

        Vulnerability v;
        v.id = id->get<std::string>();
        if (!seen_ids.insert(v.id).second) {
            ++out.skipped_records;
            out.warnings.push_back("line " + std::to_string(line_no) + ": duplicate record " + v.id);
            continue;
        }
        if (auto affected = record.find("affected"); affected != record.end() && affected->is_array()) {
            for (const auto& entry : *affected) {
                if (!entry.is_object()) continue;
                const auto ranges = entry.find("ranges");
                if (ranges == entry.end() || !ranges->is_array()) continue;
                for (const auto& range : *ranges) {
                    if (!range.is_object()) continue;
                    const auto type = range.find("type");
                    if (type == range.end() || !type->is_string() || type->get<std::string>() != "GIT") {
                        continue;
                    }
                    VulnRange r;
                    parse_range(range, v.id, v.ranges.size(), out.warnings, r);
                    v.ranges.push_back(std::move(r));
                }
            }
        }
        if (auto severity = record.find("severity"); severity != record.end() && severity->is_array()) {
            for (const auto& s : *severity) {
                if (!s.is_object()) continue;
                SeverityEntry entry;
                if (auto t = s.find("type"); t != s.end() && t->is_string()) entry.type = *t;
                if (auto sc = s.find("score"); sc != s.end()) {
                    entry.score = sc->is_string() ? sc->get<std::string>() : sc->dump();
                }
                v.severity.push_back(std::move(entry));
            }
        }
        if (v.ranges.empty()) {
            ++out.dropped_without_git;
            continue;
        }
        std::tie(v.severity_score, v.severity_source) = best_severity(v);
        out.vulnerabilities.push_back(std::move(v));
    }
    return out;
}

std::pair<std::vector<Vulnerability>, CleaningReport> clean_ranges(std::vector<Vulnerability> vulns,
                                                                   const CommitGraph& graph) {
    CleaningReport report;
    std::vector<Vulnerability> kept;
    for (auto& v : vulns) {
        std::vector<VulnRange> ranges;
        for (auto& r : v.ranges) {
            if (auto problem = check_range(r, graph)) {
                report.rejected.push_back({v.id, r.index, problem->first, problem->second});
            } else {
                ++report.accepted;
                ranges.push_back(std::move(r));
            }
        }
        if (!ranges.empty()) {
            v.ranges = std::move(ranges);
            kept.push_back(std::move(v));
        }
    }
    return {std::move(kept), std::move(report)};
}

RangeOutcome expand_zero_intro(VulnRange range, const CommitGraph& graph,
                               const std::vector<bool>& repo_membership) {
    if (!range.intro_zero) return {std::move(range), std::nullopt, {}};
    const auto roots = roots_within(graph, repo_membership);
    if (roots.empty()) {
        return {std::move(range), RejectReason::no_roots, "repository has no parentless commit"};
    }
    range.intro_zero = false;
    for (CommitIndex c : roots) range.intro.insert(graph.id(c));
    if (first_overlap(range, nullptr)) {
        std::string detail = overlap_detail(range, "root ");
        return {std::move(range), RejectReason::dup_event, std::move(detail)};
    }
    return {std::move(range), std::nullopt, {}};
}

RangeOutcome expand_zero_intro(VulnRange range, const CommitGraph& graph,
                               const CommitSet& repo_membership) {
    std::vector<bool> mask(graph.size(), false);
    for (const CommitId& id : repo_membership) mask[graph.index_of(id)] = true;
    return expand_zero_intro(std::move(range), graph, mask);
}

RangeOutcome augment_cherry_picks(VulnRange range, const CommitGraph& graph) {
    for (EventKind kind : kAllEventKinds) {
        CommitSet& set = range.events(kind);
        std::vector<CommitId> pending(set.begin(), set.end());
        while (!pending.empty()) {
            const CommitId source = pending.back();
            pending.pop_back();
            for (CommitIndex pick : graph.cherry_picks_of(source)) {
                if (set.insert(graph.id(pick)).second) pending.push_back(graph.id(pick));
            }
        }
    }
    if (first_overlap(range, nullptr)) {
        std::string detail = overlap_detail(range, "cherry-pick ");
        return {std::move(range), RejectReason::cherry_conflict, std::move(detail)};
    }
    return {std::move(range), std::nullopt, {}};
}

std::optional<double> severity_of(const Vulnerability& v) { return best_severity(v).first; }

std::pair<std::vector<Vulnerability>, CleaningReport> prepare_ranges(
    std::vector<Vulnerability> vulns, const CommitGraph& graph, const MembershipLookup& membership) {
    auto [cleaned, report] = clean_ranges(std::move(vulns), graph);
    std::vector<Vulnerability> kept;
    for (auto& v : cleaned) {
        std::vector<VulnRange> ranges;
        for (auto& r : v.ranges) {
            RangeOutcome outcome{std::move(r), std::nullopt, {}};
            if (outcome.range.intro_zero) {
                const std::vector<bool>* mask = membership ? membership(outcome.range.repo_url) : nullptr;
                if (!mask) {
                    outcome.rejected = RejectReason::unknown_repo;
                    outcome.detail = "repository '" + outcome.range.repo_url + "' is not a known origin";
                } else {
                    outcome = expand_zero_intro(std::move(outcome.range), graph, *mask);
                }
            }
            if (outcome.ok()) outcome = augment_cherry_picks(std::move(outcome.range), graph);
            if (outcome.ok()) {
                ranges.push_back(std::move(outcome.range));
            } else {
                // Moved from the accepted column into the rejected one.
                --report.accepted;
                report.rejected.push_back(
                    {v.id, outcome.range.index, *outcome.rejected, std::move(outcome.detail)});
            }
        }
        if (!ranges.empty()) {
            v.ranges = std::move(ranges);
            kept.push_back(std::move(v));
        }
    }
    return {std::move(kept), std::move(report)};
}

std::string canonical_repo_url(std::string_view url) {
    std::string out = lowercase(url);
    while (!out.empty() && std::isspace(static_cast<unsigned char>(out.back()))) out.pop_back();
    while (!out.empty() && std::isspace(static_cast<unsigned char>(out.front()))) out.erase(out.begin());
    for (;;) {
        if (!out.empty() && out.back() == '/') {
            out.pop_back();
        } else if (out.size() >= 4 && out.compare(out.size() - 4, 4, ".git") == 0) {
            out.resize(out.size() - 4);
        } else {
            break;
        }
    }
    return out;
}

void write_vulnerabilities(std::ostream& out, const std::vector<Vulnerability>& vulns) {
    for (const auto& v : vulns) {
        json doc;
        doc["id"] = v.id;
        if (v.severity_score) {
            doc["severity_score"] = *v.severity_score;
        } else {
            doc["severity_score"] = nullptr;
        }
        doc["severity_source"] = v.severity_source;
        json sev = json::array();
        for (const auto& s : v.severity) sev.push_back({{"type", s.type}, {"score", s.score}});
        doc["severity"] = std::move(sev);
        json ranges = json::array();
        for (const auto& r : v.ranges) {
            json jr;
            jr["index"] = r.index;
            jr["repo"] = r.repo_url;
            jr["intro_zero"] = r.intro_zero;
            for (EventKind kind : kAllEventKinds) jr[std::string(event_key(kind))] = ids_to_json(r.events(kind));
            ranges.push_back(std::move(jr));
        }
        doc["ranges"] = std::move(ranges);
        out << doc.dump() << '\n';
    }
}

std::vector<Vulnerability> read_vulnerabilities(std::istream& in) {
    std::vector<Vulnerability> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const json doc = json::parse(line);
            Vulnerability v;
            v.id = doc.at("id").get<std::string>();
            if (!doc.at("severity_score").is_null()) v.severity_score = doc["severity_score"].get<double>();
            v.severity_source = doc.at("severity_source").get<std::string>();
            for (const auto& s : doc.at("severity")) {
                v.severity.push_back({s.at("type").get<std::string>(), s.at("score").get<std::string>()});
            }
            for (const auto& jr : doc.at("ranges")) {
                VulnRange r;
                r.vuln_id = v.id;
                r.index = jr.at("index").get<std::size_t>();
                r.repo_url = jr.at("repo").get<std::string>();
                r.intro_zero = jr.at("intro_zero").get<bool>();
                for (EventKind kind : kAllEventKinds) {
                    for (const auto& sha : jr.at(std::string(event_key(kind)))) {
                        r.events(kind).insert(CommitId::from_hex(sha.get<std::string>()));
                    }
                }
                v.ranges.push_back(std::move(r));
            }
            out.push_back(std::move(v));
        } catch (const json::exception& e) {
            throw ParseError(std::string("bad vulnerability record: ") + e.what(), line_no);
        } catch (const InvalidCommitId& e) {
            throw ParseError(e.what(), line_no);
        }
    }
    return out;
}

}  // namespace forkscan
