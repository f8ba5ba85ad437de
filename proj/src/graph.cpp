#include "forkscan/graph.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <string>

#include "forkscan/error.hpp"

namespace forkscan {
namespace {

constexpr std::int64_t kNoTimestamp = std::numeric_limits<std::int64_t>::min();

template <typename Offsets, typename Targets, typename Pairs, typename Project>
void build_csr(std::size_t n, const Pairs& pairs, Offsets& offsets, Targets& targets,
               Project project) {
    offsets.assign(n + 1, 0);
    for (const auto& p : pairs) ++offsets[p.first + 1];
    for (std::size_t i = 0; i < n; ++i) offsets[i + 1] += offsets[i];
    targets.resize(pairs.size());
    std::vector<std::uint64_t> cursor(offsets.begin(), offsets.end() - 1);
    for (const auto& p : pairs) targets[cursor[p.first]++] = project(p);
}

std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    for (;;) {
        const auto tab = line.find('\t', start);
        if (tab == std::string_view::npos) {
            fields.push_back(line.substr(start));
            return fields;
        }
        fields.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
}

std::vector<CommitId> parse_id_list(std::string_view field, const char* what, std::size_t line) {
    std::vector<CommitId> ids;
    if (field.empty()) return ids;
    std::size_t start = 0;
    for (;;) {
        const auto comma = field.find(',', start);
        const auto token = field.substr(start, comma == std::string_view::npos ? comma : comma - start);
        auto id = CommitId::parse(token);
        if (!id) {
            throw GraphError(std::string("invalid ") + what + " sha '" + std::string(token) + "'",
                             line);
        }
        ids.push_back(*id);
        if (comma == std::string_view::npos) return ids;
        start = comma + 1;
    }
}

}  // namespace

std::optional<CommitIndex> CommitGraph::find(const CommitId& id) const {
    const auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

CommitIndex CommitGraph::index_of(const CommitId& id) const {
    if (auto c = find(id)) return *c;
    throw UnknownCommit("unknown commit " + id.hex());
}

std::optional<std::int64_t> CommitGraph::timestamp(CommitIndex c) const {
    if (timestamps_[c] == kNoTimestamp) return std::nullopt;
    return timestamps_[c];
}

std::span<const CommitIndex> CommitGraph::cherry_picks_of(const CommitId& source) const {
    const auto it = cherry_picks_.find(source);
    if (it == cherry_picks_.end()) return {};
    return it->second;
}

CommitNode CommitGraph::node(CommitIndex c) const {
    CommitNode n;
    n.id = ids_[c];
    for (CommitIndex p : parents(c)) n.parents.push_back(ids_[p]);
    n.timestamp = timestamp(c);
    const auto cherry = cherry_sources(c);
    n.cherry_sources.assign(cherry.begin(), cherry.end());
    return n;
}

void GraphBuilder::reserve(std::size_t commits, std::size_t edges) {
    ids_.reserve(commits);
    index_.reserve(commits);
    defined_.reserve(commits);
    first_reference_line_.reserve(commits);
    timestamps_.reserve(commits);
    edges_.reserve(edges);
}

CommitIndex GraphBuilder::intern(const CommitId& id, std::size_t line) {
    const auto [it, inserted] = index_.try_emplace(id, static_cast<CommitIndex>(ids_.size()));
    if (inserted) {
        if (ids_.size() == std::numeric_limits<CommitIndex>::max()) {
            throw GraphError("commit count exceeds index capacity", line);
        }
        ids_.push_back(id);
        defined_.push_back(0);
        first_reference_line_.push_back(static_cast<std::uint32_t>(line));
        timestamps_.push_back(kNoTimestamp);
    }
    return it->second;
}

void GraphBuilder::add(const CommitId& id, std::span<const CommitId> parents,
                       std::optional<std::int64_t> timestamp,
                       std::span<const CommitId> cherry_sources, std::size_t line) {
    const CommitIndex c = intern(id, line);
    if (defined_[c]) throw GraphError("duplicate commit " + id.hex(), line);
    defined_[c] = 1;
    timestamps_[c] = timestamp.value_or(kNoTimestamp);
    for (std::size_t i = 0; i < parents.size(); ++i) {
        if (parents[i] == id) throw GraphError("commit " + id.hex() + " lists itself as parent", line);
        for (std::size_t j = 0; j < i; ++j) {
            if (parents[j] == parents[i]) {
                throw GraphError("duplicate parent edge " + id.hex() + " -> " + parents[i].hex(), line);
            }
        }
        edges_.emplace_back(c, intern(parents[i], line));
    }
    for (const CommitId& s : cherry_sources) cherries_.emplace_back(c, s);
}

CommitGraph GraphBuilder::build() && {
    const std::size_t n = ids_.size();
    for (std::size_t c = 0; c < n; ++c) {
        if (!defined_[c]) {
            throw GraphError("dangling parent reference " + ids_[c].hex(), first_reference_line_[c]);
        }
    }

    CommitGraph g;
    build_csr(n, edges_, g.parent_offsets_, g.parent_targets_, [](const auto& e) { return e.second; });
    std::vector<std::pair<CommitIndex, CommitIndex>>().swap(edges_);

    // Transpose. Iterating children in index order keeps child lists sorted.
    g.child_offsets_.assign(n + 1, 0);
    for (CommitIndex p : g.parent_targets_) ++g.child_offsets_[p + 1];
    for (std::size_t i = 0; i < n; ++i) g.child_offsets_[i + 1] += g.child_offsets_[i];
    g.child_targets_.resize(g.parent_targets_.size());
    {
        std::vector<std::uint64_t> cursor(g.child_offsets_.begin(), g.child_offsets_.end() - 1);
        for (CommitIndex c = 0; c < n; ++c) {
            for (CommitIndex p : g.parents(c)) g.child_targets_[cursor[p]++] = c;
        }
    }

    // Kahn's algorithm from the roots; whatever is left over sits on or behind a cycle.
    {
        std::vector<std::uint32_t> pending(n);
        std::vector<CommitIndex> ready;
        for (CommitIndex c = 0; c < n; ++c) {
            pending[c] = static_cast<std::uint32_t>(g.parents(c).size());
            if (pending[c] == 0) ready.push_back(c);
        }
        std::size_t done = 0;
        while (!ready.empty()) {
            const CommitIndex c = ready.back();
            ready.pop_back();
            ++done;
            for (CommitIndex child : g.children(c)) {
                if (--pending[child] == 0) ready.push_back(child);
            }
        }
        if (done != n) {
            // Follow unresolved parents until a commit repeats; the closing edge is on the cycle.
            CommitIndex start = 0;
            while (pending[start] == 0) ++start;
            std::vector<std::uint8_t> seen(n, 0);
            CommitIndex c = start;
            for (;;) {
                seen[c] = 1;
                CommitIndex next = c;
                for (CommitIndex p : g.parents(c)) {
                    if (pending[p] != 0) {
                        next = p;
                        break;
                    }
                }
                if (seen[next]) {
                    throw GraphError("cycle detected at edge " + ids_[c].hex() + " -> " +
                                     ids_[next].hex());
                }
                c = next;
            }
        }
    }

    build_csr(n, cherries_, g.cherry_offsets_, g.cherry_targets_,
              [](const auto& e) { return e.second; });
    for (const auto& [child, source] : cherries_) g.cherry_picks_[source].push_back(child);
    for (auto& [source, picks] : g.cherry_picks_) {
        std::sort(picks.begin(), picks.end());
        picks.erase(std::unique(picks.begin(), picks.end()), picks.end());
    }

    g.ids_ = std::move(ids_);
    g.index_ = std::move(index_);
    g.timestamps_ = std::move(timestamps_);
    return g;
}

CommitGraph load_graph(std::istream& in) {
    GraphBuilder builder;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;
        const auto fields = split_tabs(line);
        if (fields.size() != 4) {
            throw GraphError("expected 4 tab-separated fields, found " + std::to_string(fields.size()),
                             line_no);
        }
        const auto id = CommitId::parse(fields[0]);
        if (!id) throw GraphError("invalid commit sha '" + std::string(fields[0]) + "'", line_no);
        const auto parents = parse_id_list(fields[1], "parent", line_no);
        std::optional<std::int64_t> timestamp;
        if (!fields[2].empty()) {
            std::int64_t value = 0;
            const auto* first = fields[2].data();
            const auto* last = first + fields[2].size();
            const auto [ptr, ec] = std::from_chars(first, last, value);
            if (ec != std::errc{} || ptr != last || value == kNoTimestamp) {
                throw GraphError("invalid timestamp '" + std::string(fields[2]) + "'", line_no);
            }
            timestamp = value;
        }
        const auto cherry = parse_id_list(fields[3], "cherry-source", line_no);
        builder.add(*id, parents, timestamp, cherry, line_no);
    }
    if (in.bad()) throw GraphError("read failure");
    return std::move(builder).build();
}

CommitGraph load_graph_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    return load_graph(in);
}

void write_graph(std::ostream& out, const CommitGraph& graph) {
    std::string line;
    for (CommitIndex c = 0; c < graph.size(); ++c) {
        line.clear();
        graph.id(c).append_hex(line);
        line.push_back('\t');
        bool first = true;
        for (CommitIndex p : graph.parents(c)) {
            if (!first) line.push_back(',');
            graph.id(p).append_hex(line);
            first = false;
        }
        line.push_back('\t');
        if (auto ts = graph.timestamp(c)) line += std::to_string(*ts);
        line.push_back('\t');
        first = true;
        for (const CommitId& s : graph.cherry_sources(c)) {
            if (!first) line.push_back(',');
            s.append_hex(line);
            first = false;
        }
        line.push_back('\n');
        out << line;
    }
}

std::vector<CommitIndex> children_of(const CommitGraph& graph, CommitIndex c) {
    const auto kids = graph.children(c);
    return {kids.begin(), kids.end()};
}

CommitSet children_of(const CommitGraph& graph, const CommitId& c) {
    CommitSet out;
    for (CommitIndex child : graph.children(graph.index_of(c))) out.insert(graph.id(child));
    return out;
}

std::vector<CommitIndex> ancestors(const CommitGraph& graph, std::span<const CommitIndex> start,
                                   bool include_start) {
    std::vector<bool> seen(graph.size(), false);
    std::vector<CommitIndex> stack;
    for (CommitIndex s : start) {
        if (include_start) seen[s] = true;
        stack.push_back(s);
    }
    while (!stack.empty()) {
        const CommitIndex c = stack.back();
        stack.pop_back();
        for (CommitIndex p : graph.parents(c)) {
            if (!seen[p]) {
                seen[p] = true;
                stack.push_back(p);
            }
        }
    }
    std::vector<CommitIndex> out;
    for (CommitIndex c = 0; c < graph.size(); ++c) {
        if (seen[c]) out.push_back(c);
    }
    return out;
}

CommitSet ancestors(const CommitGraph& graph, const CommitSet& start, bool include_start) {
    std::vector<CommitIndex> idx;
    for (const CommitId& id : start) idx.push_back(graph.index_of(id));
    CommitSet out;
    for (CommitIndex c : ancestors(graph, idx, include_start)) out.insert(graph.id(c));
    return out;
}

std::vector<bool> reachable_mask(const CommitGraph& graph, std::span<const CommitIndex> heads) {
    std::vector<bool> seen(graph.size(), false);
    std::vector<CommitIndex> stack;
    for (CommitIndex h : heads) {
        if (!seen[h]) {
            seen[h] = true;
            stack.push_back(h);
        }
    }
    while (!stack.empty()) {
        const CommitIndex c = stack.back();
        stack.pop_back();
        for (CommitIndex p : graph.parents(c)) {
            if (!seen[p]) {
                seen[p] = true;
                stack.push_back(p);
            }
        }
    }
    return seen;
}

CommitSet reachable_from_heads(const CommitGraph& graph, const CommitSet& heads) {
    std::vector<CommitIndex> idx;
    for (const CommitId& id : heads) idx.push_back(graph.index_of(id));
    const auto mask = reachable_mask(graph, idx);
    CommitSet out;
    for (CommitIndex c = 0; c < graph.size(); ++c) {
        if (mask[c]) out.insert(graph.id(c));
    }
    return out;
}

CommitSet roots_within(const CommitGraph& graph, const CommitSet& membership) {
    CommitSet out;
    for (const CommitId& id : membership) {
        if (graph.parents(graph.index_of(id)).empty()) out.insert(id);
    }
    return out;
}

std::vector<CommitIndex> roots_within(const CommitGraph& graph, const std::vector<bool>& membership) {
    std::vector<CommitIndex> out;
    for (CommitIndex c = 0; c < graph.size(); ++c) {
        if (membership[c] && graph.parents(c).empty()) out.push_back(c);
    }
    return out;
}

}  // namespace forkscan
