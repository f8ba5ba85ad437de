#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "forkscan/commit_id.hpp"

namespace forkscan {

/// Dense position of a commit inside one CommitGraph.
using CommitIndex = std::uint32_t;
using CommitSet = std::set<CommitId>;

struct CommitNode {
    CommitId id;
    std::vector<CommitId> parents;
    std::optional<std::int64_t> timestamp;
    std::vector<CommitId> cherry_sources;
};

/// Immutable deduplicated commit DAG.
///
/// Parent and child adjacency are both stored in CSR form, so every query
/// after construction is lock-free and safe from any number of threads.
class CommitGraph {
public:
    CommitGraph() = default;

    std::size_t size() const { return ids_.size(); }
    std::size_t edge_count() const { return parent_targets_.size(); }

    std::optional<CommitIndex> find(const CommitId& id) const;
    /// Throws UnknownCommit.
    CommitIndex index_of(const CommitId& id) const;
    bool contains(const CommitId& id) const { return find(id).has_value(); }

    const CommitId& id(CommitIndex c) const { return ids_[c]; }
    std::span<const CommitId> ids() const { return ids_; }

    std::span<const CommitIndex> parents(CommitIndex c) const {
        return {parent_targets_.data() + parent_offsets_[c],
                parent_targets_.data() + parent_offsets_[c + 1]};
    }
    std::span<const CommitIndex> children(CommitIndex c) const {
        return {child_targets_.data() + child_offsets_[c],
                child_targets_.data() + child_offsets_[c + 1]};
    }
    std::optional<std::int64_t> timestamp(CommitIndex c) const;
    std::span<const CommitId> cherry_sources(CommitIndex c) const {
        return {cherry_targets_.data() + cherry_offsets_[c],
                cherry_targets_.data() + cherry_offsets_[c + 1]};
    }

    /// Commits whose message trailer names `source` as cherry-pick origin.
    std::span<const CommitIndex> cherry_picks_of(const CommitId& source) const;

    CommitNode node(CommitIndex c) const;

private:
    friend class GraphBuilder;

    std::vector<CommitId> ids_;
    std::unordered_map<CommitId, CommitIndex, CommitIdHash> index_;
    std::vector<std::uint64_t> parent_offsets_;
    std::vector<CommitIndex> parent_targets_;
    std::vector<std::uint64_t> child_offsets_;
    std::vector<CommitIndex> child_targets_;
    std::vector<std::int64_t> timestamps_;
    std::vector<std::uint64_t> cherry_offsets_;
    std::vector<CommitId> cherry_targets_;
    std::unordered_map<CommitId, std::vector<CommitIndex>, CommitIdHash> cherry_picks_;
};

/// Accumulates commits in any order (parents may be declared after their
/// children) and validates the result on build().
class GraphBuilder {
public:
    void reserve(std::size_t commits, std::size_t edges);

    /// `line` is only used for error messages.
    void add(const CommitId& id, std::span<const CommitId> parents,
             std::optional<std::int64_t> timestamp, std::span<const CommitId> cherry_sources,
             std::size_t line = 0);
    void add(const CommitNode& node, std::size_t line = 0) {
        add(node.id, node.parents, node.timestamp, node.cherry_sources, line);
    }

    /// Throws GraphError on dangling parents or cycles.
    CommitGraph build() &&;

private:
    CommitIndex intern(const CommitId& id, std::size_t line);

    std::vector<CommitId> ids_;
    std::unordered_map<CommitId, CommitIndex, CommitIdHash> index_;
    std::vector<std::uint8_t> defined_;
    std::vector<std::uint32_t> first_reference_line_;
    std::vector<std::int64_t> timestamps_;
    std::vector<std::pair<CommitIndex, CommitIndex>> edges_;  // (child, parent)
    std::vector<std::pair<CommitIndex, CommitId>> cherries_;
};

/// Reads the commits.tsv edge-list format.
CommitGraph load_graph(std::istream& in);
CommitGraph load_graph_file(const std::filesystem::path& path);

/// Writes the graph back in commits.tsv format, one line per commit in index order.
void write_graph(std::ostream& out, const CommitGraph& graph);

std::vector<CommitIndex> children_of(const CommitGraph& graph, CommitIndex c);
CommitSet children_of(const CommitGraph& graph, const CommitId& c);

/// Transitive closure over parent edges. Result is sorted by index.
std::vector<CommitIndex> ancestors(const CommitGraph& graph, std::span<const CommitIndex> start,
                                   bool include_start);
CommitSet ancestors(const CommitGraph& graph, const CommitSet& start, bool include_start);

/// Membership bitmap of everything reachable from `heads` (heads included).
std::vector<bool> reachable_mask(const CommitGraph& graph, std::span<const CommitIndex> heads);
CommitSet reachable_from_heads(const CommitGraph& graph, const CommitSet& heads);

/// Parentless commits among `membership`.
CommitSet roots_within(const CommitGraph& graph, const CommitSet& membership);
std::vector<CommitIndex> roots_within(const CommitGraph& graph, const std::vector<bool>& membership);

}  // namespace forkscan
