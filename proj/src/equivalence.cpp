#include "forkscan/equivalence.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <iterator>
#include <memory>
#include <ostream>
#include <set>

namespace forkscan {
namespace {

bool starts_with(std::string_view s, std::string_view prefix) { return s.substr(0, prefix.size()) == prefix; }

bool horizontal_space(char c) { return c == ' ' || c == '\t' || c == '\v' || c == '\f' || c == '\r'; }

// Path part of a "--- " / "+++ " line; some tools append a tab and a timestamp.
std::string_view header_path(std::string_view line) {
    line.remove_prefix(4);
    const auto tab = line.find('\t');
    if (tab != std::string_view::npos) line = line.substr(0, tab);
    while (!line.empty() && horizontal_space(line.back())) line.remove_suffix(1);
    return line;
}

void append_payload(std::string& out, std::string_view line) {
    out += line.front();
    bool in_space = false;
    for (char c : line.substr(1)) {
        if (horizontal_space(c)) {
            in_space = true;
            continue;
        }
        if (in_space) out += ' ';
        in_space = false;
        out += c;
    }
    if (in_space) out += ' ';
    out += '\n';
}

// "-a[,b]" or "+c[,d]" -> line count.
std::size_t range_count(std::string_view field, char sign, std::size_t line_no) {
    if (field.empty() || field.front() != sign) throw DiffError("malformed hunk header at line " + std::to_string(line_no));
    field.remove_prefix(1);
    std::size_t start = 0, count = 1;
    const auto comma = field.find(',');
    auto number = [&](std::string_view s, std::size_t& v) {
        const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || p != s.data() + s.size()) {
            throw DiffError("malformed hunk header at line " + std::to_string(line_no));
        }
    };
    number(field.substr(0, comma), start);
    if (comma != std::string_view::npos) number(field.substr(comma + 1), count);
    return count;
}

class Lines {
public:
    explicit Lines(std::string_view text) : text_(text) {}
    bool next(std::string_view& line) {
        if (pos_ >= text_.size()) return false;
        const auto nl = text_.find('\n', pos_);
        const auto end = nl == std::string_view::npos ? text_.size() : nl;
        line = text_.substr(pos_, end - pos_);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        pos_ = end + 1;
        ++number_;
        return true;
    }
    bool peek(std::string_view& line) const {
        Lines copy = *this;
        return copy.next(line);
    }
    std::size_t number() const { return number_; }

private:
    std::string_view text_;
    std::size_t pos_ = 0;
    std::size_t number_ = 0;
};

}  // namespace

std::string PatchId::hex() const {
    return CommitId(digest).hex();
}

std::string canonical_diff(std::string_view diff) {
    std::string out;
    Lines lines(diff);
    std::string_view line;
    std::size_t files = 0;
    while (lines.next(line)) {
        if (starts_with(line, "--- ")) {
            std::string_view next;
            if (!lines.peek(next) || !starts_with(next, "+++ ")) continue;  // a "--- " line inside a message
            lines.next(next);
            ++files;
            out += "--- ";
            out += header_path(line);
            out += "\n+++ ";
            out += header_path(next);
            out += '\n';
            continue;
        }
        if (starts_with(line, "@@ ")) {
            if (files == 0) throw DiffError("hunk before any file header at line " + std::to_string(lines.number()));
            const auto close = line.find(" @@", 3);
            if (close == std::string_view::npos) {
                throw DiffError("malformed hunk header at line " + std::to_string(lines.number()));
            }
            const auto ranges = line.substr(3, close - 3);
            const auto space = ranges.find(' ');
            if (space == std::string_view::npos) {
                throw DiffError("malformed hunk header at line " + std::to_string(lines.number()));
            }
            std::size_t old_left = range_count(ranges.substr(0, space), '-', lines.number());
            std::size_t new_left = range_count(ranges.substr(space + 1), '+', lines.number());
            while (old_left > 0 || new_left > 0) {
                if (!lines.next(line)) throw DiffError("diff ends inside a hunk");
                const char kind = line.empty() ? ' ' : line.front();
                switch (kind) {
                    case ' ':
                        if (old_left == 0 || new_left == 0) throw DiffError("hunk longer than its header");
                        --old_left;
                        --new_left;
                        break;
                    case '-':
                        if (old_left == 0) throw DiffError("hunk longer than its header");
                        --old_left;
                        append_payload(out, line);
                        break;
                    case '+':
                        if (new_left == 0) throw DiffError("hunk longer than its header");
                        --new_left;
                        append_payload(out, line);
                        break;
                    case '\\':  // "\ No newline at end of file"
                        break;
                    default:
                        throw DiffError("unexpected line in hunk at line " + std::to_string(lines.number()));
                }
            }
            continue;
        }
        // Message, "diff --git", index, mode, rename and "\ No newline" lines.
    }
    if (files == 0) throw DiffError("no file changes in diff");
    return out;
}

PatchId patch_id(std::string_view diff) {
    const std::string canonical = canonical_diff(diff);
    PatchId id;
    unsigned int len = 0;
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), canonical.data(), canonical.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), id.digest.data(), &len) != 1 || len != id.digest.size()) {
        throw Error("SHA-1 digest failed");
    }
    return id;
}

std::vector<DiffRecord> read_diffs(std::istream& in) {
    std::vector<DiffRecord> out;
    std::string header;
    while (std::getline(in, header)) {
        if (header.empty()) continue;
        const auto space = header.find(' ');
        const auto sha = CommitId::parse(std::string_view(header).substr(0, space));
        std::size_t length = 0;
        const char* begin = header.data() + (space == std::string::npos ? header.size() : space + 1);
        const char* end = header.data() + header.size();
        const auto [p, ec] = std::from_chars(begin, end, length);
        if (!sha || space == std::string::npos || ec != std::errc{} || p != end) {
            throw DiffError("malformed diff record header '" + header + "'");
        }
        std::string payload(length, '\0');
        if (!in.read(payload.data(), static_cast<std::streamsize>(length))) {
            throw DiffError("diff record for " + sha->hex() + " is truncated");
        }
        out.push_back({*sha, std::move(payload)});
    }
    return out;
}

void write_diffs(std::ostream& out, std::span<const DiffRecord> records) {
    for (const auto& r : records) out << r.commit.hex() << ' ' << r.diff.size() << '\n' << r.diff << '\n';
}

std::map<CommitId, std::string> read_diff_corpus(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".diffs") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    std::map<CommitId, std::string> corpus;
    for (const auto& f : files) {
        std::ifstream in(f, std::ios::binary);
        if (!in) throw Error("cannot open " + f.string());
        for (auto& r : read_diffs(in)) {
            const auto [it, inserted] = corpus.try_emplace(r.commit, std::move(r.diff));
            if (!inserted && it->second != r.diff) {
                throw DiffError("conflicting diffs for " + r.commit.hex() + " in " + f.string());
            }
        }
    }
    return corpus;
}

std::vector<FixDiff> collect_fix_diffs(const std::vector<Vulnerability>& vulns,
                                       const std::map<CommitId, std::string>& corpus,
                                       std::vector<std::string>& warnings) {
    std::vector<FixDiff> out;
    for (const auto& v : vulns) {
        for (const auto& r : v.ranges) {
            std::vector<FixDiff> found;
            for (const auto& fix : r.fixed) {
                const auto it = corpus.find(fix);
                if (it == corpus.end()) {
                    warnings.push_back(v.id + "#" + std::to_string(r.index) + ": no diff for fixed commit " +
                                       fix.hex() + ", range skipped");
                    found.clear();
                    break;
                }
                found.push_back({{v.id, r.index}, fix, it->second});
            }
            std::move(found.begin(), found.end(), std::back_inserter(out));
        }
    }
    return out;
}

std::vector<EquivalentFix> detect_equivalent_fix(std::span<const FixDiff> fixes,
                                                 std::span<const DiffRecord> fork_commits,
                                                 std::vector<std::string>& warnings) {
    std::multimap<PatchId, const FixDiff*> by_id;
    for (const auto& f : fixes) {
        try {
            by_id.emplace(patch_id(f.diff), &f);
        } catch (const DiffError& e) {
            warnings.push_back(f.range.vuln_id + "#" + std::to_string(f.range.range_index) + ": diff of " +
                               f.fix.hex() + " unparseable: " + e.what());
        }
    }
    std::set<EquivalentFix> out;
    for (const auto& c : fork_commits) {
        PatchId id;
        try {
            id = patch_id(c.diff);
        } catch (const DiffError& e) {
            warnings.push_back("diff of " + c.commit.hex() + " unparseable: " + e.what());
            continue;
        }
        const auto [lo, hi] = by_id.equal_range(id);
        for (auto it = lo; it != hi; ++it) {
            if (it->second->fix != c.commit) out.insert({it->second->range, it->second->fix, c.commit});
        }
    }
    return {out.begin(), out.end()};
}

InjectionResult inject_equivalent_fixes(std::vector<Vulnerability> vulns, std::span<const EquivalentFix> matches) {
    InjectionResult out;
    for (const auto& m : matches) {
        VulnRange* range = nullptr;
        for (auto& v : vulns) {
            if (v.id != m.range.vuln_id) continue;
            for (auto& r : v.ranges) {
                if (r.index == m.range.range_index) range = &r;
            }
        }
        if (!range) throw Error("equivalent fix for unknown range " + m.range.vuln_id);
        if (range->fixed.count(m.match)) continue;
        if (range->intro.count(m.match) || range->limit.count(m.match) || range->last.count(m.match)) {
            out.conflicting.push_back(m);
            continue;
        }
        range->fixed.insert(m.match);
        out.injected.push_back(m);
    }
    out.vulns = std::move(vulns);
    return out;
}

}  // namespace forkscan
