#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "forkscan/graph.hpp"
#include "forkscan/osv.hpp"

namespace forkscan {

/// Worklist discipline for the propagation walk. The result does not depend
/// on it; it is selectable so that this can be checked.
enum class Worklist { stack, queue };

struct PropagationOptions {
    Worklist worklist = Worklist::stack;
    bool reverse_children = false;
    /// Called on every status change of a visited commit (instrumentation only).
    std::function<void(CommitIndex commit, bool was_patched, bool now_patched, bool first_visit)>
        on_transition;
};

/// Reusable scratch space for propagating many ranges over one graph.
/// Not thread-safe; use one per thread.
class Propagator {
public:
    explicit Propagator(const CommitGraph& graph);

    /// Vulnerable commits of `range`, sorted by index.
    std::vector<CommitIndex> run(const VulnRange& range, const PropagationOptions& options = {});

private:
    enum : std::uint8_t {
        kIntro = 1,
        kFixed = 2,
        kLimit = 4,
        kLast = 8,
        kLimitSeen = 16,
    };
    enum : std::uint8_t { kUnvisited = 0, kVulnerable = 1, kPatched = 2 };

    void mark(const CommitSet& ids, std::uint8_t flag);

    const CommitGraph* graph_;
    std::vector<std::uint8_t> status_;
    std::vector<std::uint8_t> flags_;
    std::vector<CommitIndex> flagged_;
    std::vector<CommitIndex> visited_;
    std::vector<CommitIndex> worklist_;
};

CommitSet propagate_range(const CommitGraph& graph, const VulnRange& range,
                          const PropagationOptions& options = {});

/// Independent evaluation of the same semantics: a dynamic program over a
/// topological order of the descendants of the introductions.
CommitSet oracle_vulnerable_set(const CommitGraph& graph, const VulnRange& range);

struct RangeKey {
    std::string vuln_id;
    std::size_t range_index = 0;

    friend auto operator<=>(const RangeKey&, const RangeKey&) = default;
    friend bool operator==(const RangeKey&, const RangeKey&) = default;
};

/// commit -> ranges and range -> commits, stored as exact transposes.
class VulnerabilityLabeling {
public:
    using Slot = std::uint32_t;

    VulnerabilityLabeling() = default;

    /// `keys` must be strictly increasing; each vulnerable list sorted and unique.
    static VulnerabilityLabeling from_ranges(std::size_t commit_count, std::vector<RangeKey> keys,
                                             std::vector<std::vector<CommitIndex>> vulnerable);

    std::size_t commit_count() const { return commit_count_; }
    const std::vector<RangeKey>& keys() const { return keys_; }
    std::optional<Slot> slot_of(const RangeKey& key) const;

    std::span<const CommitIndex> vulnerable(Slot slot) const { return by_range_[slot]; }
    std::span<const Slot> ranges_of(CommitIndex c) const {
        return {commit_slots_.data() + commit_offsets_[c],
                commit_slots_.data() + commit_offsets_[c + 1]};
    }
    bool is_vulnerable(CommitIndex c, Slot slot) const;
    bool is_labeled(CommitIndex c) const { return !ranges_of(c).empty(); }

    std::map<CommitId, std::set<RangeKey>> by_commit(const CommitGraph& graph) const;
    std::map<RangeKey, CommitSet> by_range(const CommitGraph& graph) const;

private:
    std::size_t commit_count_ = 0;
    std::vector<RangeKey> keys_;
    std::vector<std::vector<CommitIndex>> by_range_;
    std::vector<std::uint64_t> commit_offsets_{0};
    std::vector<Slot> commit_slots_;
};

struct LabelOptions {
    unsigned threads = 1;
    PropagationOptions propagation;
};

/// Propagates every range independently; ranges may be spread over threads.
VulnerabilityLabeling label_graph(const CommitGraph& graph, const std::vector<Vulnerability>& vulns,
                                  const LabelOptions& options = {});

/// Which event kinds random_dag plants besides the mandatory introduction.
enum EventProfile : unsigned {
    kPlantIntroduced = 1u << 0,  // several introductions, including reintroductions below fixes
    kPlantFixed = 1u << 1,
    kPlantLimit = 1u << 2,
    kPlantLastAffected = 1u << 3,
    kPlantAll = 0xfu,
};

struct GeneratedInstance {
    CommitGraph graph;
    VulnRange range;
};

/// Deterministic random DAG with a planted, internally consistent range.
GeneratedInstance random_dag(std::size_t commits, std::size_t max_parents, unsigned profile,
                             std::uint64_t seed);

}  // namespace forkscan
