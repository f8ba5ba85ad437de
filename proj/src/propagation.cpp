#include "forkscan/propagation.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

#include "forkscan/error.hpp"

namespace forkscan {

Propagator::Propagator(const CommitGraph& graph)
    : graph_(&graph), status_(graph.size(), kUnvisited), flags_(graph.size(), 0) {}

void Propagator::mark(const CommitSet& ids, std::uint8_t flag) {
    for (const CommitId& id : ids) {
        const CommitIndex c = graph_->index_of(id);
        if (flags_[c] == 0) flagged_.push_back(c);
        flags_[c] |= flag;
    }
}

std::vector<CommitIndex> Propagator::run(const VulnRange& range, const PropagationOptions& options) {
    if (range.intro_zero) throw Error(range.vuln_id + ": unexpanded \"0\" introduction");
    if (range.intro.empty()) throw Error(range.vuln_id + ": range has no introduction commits");

    const CommitGraph& g = *graph_;
    struct Reset {
        Propagator& p;
        ~Reset() {
            for (CommitIndex c : p.flagged_) p.flags_[c] = 0;
            for (CommitIndex c : p.visited_) {
                p.status_[c] = kUnvisited;
                p.flags_[c] = 0;
            }
            p.flagged_.clear();
            p.visited_.clear();
            p.worklist_.clear();
        }
    } reset{*this};

    mark(range.intro, kIntro);
    mark(range.fixed, kFixed);
    mark(range.limit, kLimit);
    mark(range.last, kLast);

    for (const CommitId& id : range.intro) {
        const CommitIndex c = g.index_of(id);
        if (status_[c] == kUnvisited) {
            status_[c] = kVulnerable;
            visited_.push_back(c);
            worklist_.push_back(c);
            if (options.on_transition) options.on_transition(c, false, false, true);
        }
    }

    const bool use_queue = options.worklist == Worklist::queue;
    std::size_t head = 0;
    auto visit_child = [&](CommitIndex child, bool parent_patches) {
        const std::uint8_t f = flags_[child];
        const bool patched = !(f & kIntro) &&
                             ((f & (kFixed | kLimit)) || status_[child] == kPatched || parent_patches);
        const std::uint8_t next = patched ? kPatched : kVulnerable;
        const std::uint8_t prev = status_[child];
        if (prev != next) {
            if (prev == kUnvisited) visited_.push_back(child);
            status_[child] = next;
            worklist_.push_back(child);
            if (options.on_transition) {
                options.on_transition(child, prev == kPatched, patched, prev == kUnvisited);
            }
        }
    };

    while (head < worklist_.size()) {
        CommitIndex c;
        if (use_queue) {
            c = worklist_[head++];
        } else {
            c = worklist_.back();
            worklist_.pop_back();
        }
        const bool parent_patches = status_[c] == kPatched || (flags_[c] & kLast);
        const auto kids = g.children(c);
        if (options.reverse_children) {
            for (auto it = kids.rbegin(); it != kids.rend(); ++it) visit_child(*it, parent_patches);
        } else {
            for (CommitIndex child : kids) visit_child(child, parent_patches);
        }
    }

    std::vector<CommitIndex> out;
    if (range.limit.empty()) {
        for (CommitIndex c : visited_) {
            if (status_[c] == kVulnerable) out.push_back(c);
        }
    } else {
        // Keep only vulnerable commits that are strict ancestors of some limit
        // commit. Any such path runs through visited commits only.
        worklist_.clear();
        for (const CommitId& id : range.limit) worklist_.push_back(g.index_of(id));
        while (!worklist_.empty()) {
            const CommitIndex c = worklist_.back();
            worklist_.pop_back();
            for (CommitIndex p : g.parents(c)) {
                if (status_[p] == kUnvisited || (flags_[p] & kLimitSeen)) continue;
                if (flags_[p] == 0) flagged_.push_back(p);
                flags_[p] |= kLimitSeen;
                if (status_[p] == kVulnerable) out.push_back(p);
                worklist_.push_back(p);
            }
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

CommitSet propagate_range(const CommitGraph& graph, const VulnRange& range,
                          const PropagationOptions& options) {
    Propagator propagator(graph);
    CommitSet out;
    for (CommitIndex c : propagator.run(range, options)) out.insert(graph.id(c));
    return out;
}

CommitSet oracle_vulnerable_set(const CommitGraph& graph, const VulnRange& range) {
    if (range.intro_zero || range.intro.empty()) {
        throw Error(range.vuln_id + ": oracle needs a non-empty, expanded introduction set");
    }
    for (EventKind kind : kAllEventKinds) {
        for (const CommitId& id : range.events(kind)) {
            if (!graph.contains(id)) throw UnknownCommit("event commit " + id.hex() + " not in graph");
        }
    }

    // Descendants-or-self of the introductions.
    CommitSet region;
    std::vector<CommitId> frontier(range.intro.begin(), range.intro.end());
    region.insert(range.intro.begin(), range.intro.end());
    while (!frontier.empty()) {
        const CommitId c = frontier.back();
        frontier.pop_back();
        for (const CommitId& child : children_of(graph, c)) {
            if (region.insert(child).second) frontier.push_back(child);
        }
    }

    // Topological order of the region: a commit becomes ready once all of
    // its in-region parents are placed.
    std::map<CommitId, std::size_t> waiting;
    std::vector<CommitId> order;
    for (const CommitId& c : region) {
        std::size_t n = 0;
        for (const CommitId& p : graph.node(graph.index_of(c)).parents) n += region.count(p);
        waiting[c] = n;
        if (n == 0) order.push_back(c);
    }
    for (std::size_t i = 0; i < order.size(); ++i) {
        for (const CommitId& child : children_of(graph, order[i])) {
            if (region.count(child) && --waiting[child] == 0) order.push_back(child);
        }
    }

    std::map<CommitId, bool> patched;
    for (const CommitId& c : order) {
        bool value = false;
        if (!range.intro.count(c)) {
            value = range.fixed.count(c) || range.limit.count(c);
            for (const CommitId& p : graph.node(graph.index_of(c)).parents) {
                if (region.count(p) && (patched.at(p) || range.last.count(p))) value = true;
            }
        }
        patched[c] = value;
    }

    CommitSet vulnerable;
    for (const auto& [c, is_patched] : patched) {
        if (!is_patched) vulnerable.insert(c);
    }
    if (!range.limit.empty()) {
        const CommitSet allowed = ancestors(graph, range.limit, /*include_start=*/false);
        CommitSet filtered;
        std::set_intersection(vulnerable.begin(), vulnerable.end(), allowed.begin(), allowed.end(),
                              std::inserter(filtered, filtered.end()));
        vulnerable = std::move(filtered);
    }
    return vulnerable;
}

VulnerabilityLabeling VulnerabilityLabeling::from_ranges(
    std::size_t commit_count, std::vector<RangeKey> keys,
    std::vector<std::vector<CommitIndex>> vulnerable) {
    if (keys.size() != vulnerable.size()) throw Error("labeling: key/range count mismatch");
    for (std::size_t i = 1; i < keys.size(); ++i) {
        if (!(keys[i - 1] < keys[i])) {
            throw Error("labeling: duplicate or unsorted range key " + keys[i].vuln_id + "#" +
                        std::to_string(keys[i].range_index));
        }
    }
    VulnerabilityLabeling l;
    l.commit_count_ = commit_count;
    l.keys_ = std::move(keys);
    l.by_range_ = std::move(vulnerable);
    l.commit_offsets_.assign(commit_count + 1, 0);
    for (const auto& commits : l.by_range_) {
        for (CommitIndex c : commits) ++l.commit_offsets_[c + 1];
    }
    for (std::size_t i = 0; i < commit_count; ++i) l.commit_offsets_[i + 1] += l.commit_offsets_[i];
    l.commit_slots_.resize(l.commit_offsets_.back());
    std::vector<std::uint64_t> cursor(l.commit_offsets_.begin(), l.commit_offsets_.end() - 1);
    for (Slot s = 0; s < l.by_range_.size(); ++s) {
        for (CommitIndex c : l.by_range_[s]) l.commit_slots_[cursor[c]++] = s;
    }
    return l;
}

std::optional<VulnerabilityLabeling::Slot> VulnerabilityLabeling::slot_of(const RangeKey& key) const {
    const auto it = std::lower_bound(keys_.begin(), keys_.end(), key);
    if (it == keys_.end() || !(*it == key)) return std::nullopt;
    return static_cast<Slot>(it - keys_.begin());
}

bool VulnerabilityLabeling::is_vulnerable(CommitIndex c, Slot slot) const {
    const auto& commits = by_range_[slot];
    return std::binary_search(commits.begin(), commits.end(), c);
}

std::map<CommitId, std::set<RangeKey>> VulnerabilityLabeling::by_commit(const CommitGraph& graph) const {
    std::map<CommitId, std::set<RangeKey>> out;
    for (CommitIndex c = 0; c < commit_count_; ++c) {
        for (Slot s : ranges_of(c)) out[graph.id(c)].insert(keys_[s]);
    }
    return out;
}

std::map<RangeKey, CommitSet> VulnerabilityLabeling::by_range(const CommitGraph& graph) const {
    std::map<RangeKey, CommitSet> out;
    for (Slot s = 0; s < keys_.size(); ++s) {
        auto& set = out[keys_[s]];
        for (CommitIndex c : by_range_[s]) set.insert(graph.id(c));
    }
    return out;
}

VulnerabilityLabeling label_graph(const CommitGraph& graph, const std::vector<Vulnerability>& vulns,
                                  const LabelOptions& options) {
    std::vector<std::pair<RangeKey, const VulnRange*>> work;
    for (const auto& v : vulns) {
        for (const auto& r : v.ranges) work.push_back({{v.id, r.index}, &r});
    }
    std::sort(work.begin(), work.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });

    std::vector<RangeKey> keys;
    keys.reserve(work.size());
    for (const auto& w : work) keys.push_back(w.first);
    std::vector<std::vector<CommitIndex>> results(work.size());

    const unsigned threads =
        std::max(1u, std::min<unsigned>(options.threads, static_cast<unsigned>(work.size())));
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        try {
            Propagator propagator(graph);
            for (std::size_t i = next++; i < work.size(); i = next++) {
                results[i] = propagator.run(*work[i].second, options.propagation);
            }
        } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
            next = work.size();
        }
    };
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    }
    if (failure) std::rethrow_exception(failure);
    return VulnerabilityLabeling::from_ranges(graph.size(), std::move(keys), std::move(results));
}

namespace {

struct SplitMix64 {
    std::uint64_t state;
    std::uint64_t operator()() {
        std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
    std::size_t below(std::size_t n) { return static_cast<std::size_t>((*this)() % n); }
};

}  // namespace

GeneratedInstance random_dag(std::size_t commits, std::size_t max_parents, unsigned profile,
                             std::uint64_t seed) {
    if (commits == 0 || max_parents == 0) throw Error("random_dag: need at least one commit and parent");
    SplitMix64 rng{seed};

    std::vector<CommitId> ids;
    std::set<CommitId> unique;
    while (ids.size() < commits) {
        std::array<std::uint8_t, CommitId::kBytes> bytes{};
        for (std::size_t i = 0; i < bytes.size(); i += 8) {
            const std::uint64_t word = rng();
            for (std::size_t j = 0; j < 8 && i + j < bytes.size(); ++j) {
                bytes[i + j] = static_cast<std::uint8_t>(word >> (8 * j));
            }
        }
        if (unique.insert(CommitId(bytes)).second) ids.emplace_back(bytes);
    }

    std::vector<std::vector<std::size_t>> parents(commits);
    for (std::size_t i = 1; i < commits; ++i) {
        if (rng.below(20) == 0) continue;  // extra root lineage
        const std::size_t want = 1 + rng.below(std::min(max_parents, i));
        while (parents[i].size() < want) {
            std::size_t p;
            if (rng.below(10) < 7) {
                p = i - 1 - rng.below(std::min<std::size_t>(i, 8));
            } else {
                p = rng.below(i);
            }
            if (std::find(parents[i].begin(), parents[i].end(), p) == parents[i].end()) {
                parents[i].push_back(p);
            }
        }
    }

    // Feed the builder in shuffled order so graph indices are not topological.
    std::vector<std::size_t> order(commits);
    for (std::size_t i = 0; i < commits; ++i) order[i] = i;
    for (std::size_t i = commits; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    GraphBuilder builder;
    for (std::size_t i : order) {
        std::vector<CommitId> ps;
        for (std::size_t p : parents[i]) ps.push_back(ids[p]);
        builder.add(ids[i], ps, static_cast<std::int64_t>(1'600'000'000 + 60 * i), {});
    }
    GeneratedInstance out{std::move(builder).build(), {}};
    const CommitGraph& g = out.graph;

    VulnRange& range = out.range;
    range.vuln_id = "GEN-" + std::to_string(seed);
    range.repo_url = "https://example.invalid/generated";

    std::set<std::size_t> used;
    auto descendants_of = [&](std::size_t start) {
        std::vector<std::size_t> out;
        std::vector<bool> seen(commits, false);
        std::vector<CommitIndex> stack{g.index_of(ids[start])};
        while (!stack.empty()) {
            const CommitIndex c = stack.back();
            stack.pop_back();
            for (CommitIndex child : g.children(c)) {
                if (!seen[child]) {
                    seen[child] = true;
                    stack.push_back(child);
                }
            }
        }
        for (std::size_t i = 0; i < commits; ++i) {
            if (seen[g.index_of(ids[i])]) out.push_back(i);
        }
        return out;
    };
    auto pick_unused = [&](const std::vector<std::size_t>& pool) -> std::optional<std::size_t> {
        std::vector<std::size_t> free;
        for (std::size_t i : pool) {
            if (!used.count(i)) free.push_back(i);
        }
        if (free.empty()) return std::nullopt;
        const std::size_t i = free[rng.below(free.size())];
        used.insert(i);
        return i;
    };
    std::vector<std::size_t> all(commits);
    for (std::size_t i = 0; i < commits; ++i) all[i] = i;

    std::vector<std::size_t> intros;
    // The first introduction sits early so that the interesting region is large.
    {
        std::vector<std::size_t> early(all.begin(), all.begin() + std::max<std::size_t>(1, commits / 4));
        intros.push_back(*pick_unused(early));
    }
    if (profile & kPlantIntroduced) {
        const std::size_t extra = rng.below(3);
        for (std::size_t k = 0; k < extra; ++k) {
            if (auto i = pick_unused(all)) intros.push_back(*i);
        }
    }
    auto plant_below_intro = [&](std::size_t count, CommitSet& target) {
        std::vector<std::size_t> planted;
        for (std::size_t k = 0; k < count; ++k) {
            auto pool = descendants_of(intros[rng.below(intros.size())]);
            auto i = pick_unused(pool.empty() ? all : pool);
            if (!i) i = pick_unused(all);
            if (!i) break;
            target.insert(ids[*i]);
            planted.push_back(*i);
        }
        return planted;
    };
    std::vector<std::size_t> fixes;
    if (profile & kPlantFixed) fixes = plant_below_intro(1 + rng.below(3), range.fixed);
    if (profile & kPlantLimit) plant_below_intro(1 + rng.below(2), range.limit);
    if (profile & kPlantLastAffected) plant_below_intro(1 + rng.below(2), range.last);
    if ((profile & kPlantIntroduced) && !fixes.empty()) {
        // Reintroduction below a fix.
        if (auto i = pick_unused(descendants_of(fixes[rng.below(fixes.size())]))) intros.push_back(*i);
    }
    for (std::size_t i : intros) range.intro.insert(ids[i]);
    return out;
}

}  // namespace forkscan
