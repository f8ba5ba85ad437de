#include <doctest.h>

#include <random>
#include <sstream>

#include "forkscan/error.hpp"
#include "forkscan/graph.hpp"
#include "forkscan/propagation.hpp"
#include "test_support.hpp"

using namespace forkscan;
using namespace forkscan::testing;

namespace {

CommitGraph parse(const std::string& text) {
    std::istringstream in(text);
    return load_graph(in);
}

std::string sha(char c) { return std::string(40, c); }

// Naive oracle: repeat one-step parent expansion until nothing changes.
CommitSet fixpoint_ancestors(const CommitGraph& g, const CommitSet& start, bool include_start) {
    CommitSet current;
    for (const auto& s : start) {
        for (const auto& p : g.node(g.index_of(s)).parents) current.insert(p);
    }
    for (;;) {
        CommitSet next = current;
        for (const auto& c : current) {
            for (const auto& p : g.node(g.index_of(c)).parents) next.insert(p);
        }
        if (next == current) break;
        current = std::move(next);
    }
    if (include_start) current.insert(start.begin(), start.end());
    return current;
}

}  // namespace

TEST_CASE("commit ids are 40 lowercase hex characters") {
    CHECK(CommitId::parse(sha('a')).has_value());
    CHECK_FALSE(CommitId::parse(sha('A')).has_value());
    CHECK(CommitId::parse_relaxed(sha('A')) == CommitId::parse(sha('a')));
    CHECK_FALSE(CommitId::parse(sha('a').substr(1)).has_value());
    CHECK_FALSE(CommitId::parse(sha('g')).has_value());
    CHECK_THROWS_AS(CommitId::from_hex("0"), InvalidCommitId);
    const std::string hex = "f052389a634debd148e820d6bf88b5a77fe670d7";
    CHECK(CommitId::from_hex(hex).hex() == hex);
}

TEST_CASE("load_graph basics") {
    SUBCASE("empty stream") {
        const auto g = parse("");
        CHECK(g.size() == 0);
        CHECK(g.edge_count() == 0);
    }
    SUBCASE("single edge is transposed") {
        const auto g = parse(sha('0') + "\t\t\t\n" + sha('1') + "\t" + sha('0') + "\t\t\n");
        CHECK(g.size() == 2);
        CHECK(g.edge_count() == 1);
        CHECK(children_of(g, CommitId::from_hex(sha('0'))) == CommitSet{CommitId::from_hex(sha('1'))});
    }
    SUBCASE("comments, timestamps and cherry sources") {
        const auto g = parse("# header\n" + sha('0') + "\t\t1700000000\t" + sha('9') + "\n" + sha('1') +
                             "\t" + sha('0') + "\t\t\n");
        const auto c0 = g.index_of(CommitId::from_hex(sha('0')));
        CHECK(g.timestamp(c0) == 1700000000);
        CHECK_FALSE(g.timestamp(g.index_of(CommitId::from_hex(sha('1')))).has_value());
        REQUIRE(g.cherry_sources(c0).size() == 1);
        CHECK(g.cherry_picks_of(CommitId::from_hex(sha('9'))).size() == 1);
    }
    SUBCASE("parents may be declared after children") {
        const auto g = parse(sha('1') + "\t" + sha('0') + "\t\t\n" + sha('0') + "\t\t\t\n");
        CHECK(g.size() == 2);
        CHECK(g.parents(g.index_of(CommitId::from_hex(sha('1')))).size() == 1);
    }
}

TEST_CASE("load_graph rejects bad input") {
    SUBCASE("malformed line reports its number") {
        try {
            parse(sha('0') + "\t\t\t\nnot-a-line\n");
            FAIL("expected error");
        } catch (const GraphError& e) {
            CHECK(e.line() == 2);
        }
    }
    SUBCASE("invalid sha") { CHECK_THROWS_AS(parse(sha('x') + "\t\t\t\n"), GraphError); }
    SUBCASE("invalid timestamp") { CHECK_THROWS_AS(parse(sha('0') + "\t\tsoon\t\n"), GraphError); }
    SUBCASE("dangling parent") {
        try {
            parse(sha('0') + "\t\t\t\n" + sha('1') + "\t" + sha('2') + "\t\t\n");
            FAIL("expected error");
        } catch (const GraphError& e) {
            CHECK(e.line() == 2);
            CHECK(std::string(e.what()).find("dangling") != std::string::npos);
        }
    }
    SUBCASE("cycle") {
        try {
            parse(sha('0') + "\t\t\t\n" + sha('1') + "\t" + sha('0') + "," + sha('2') + "\t\t\n" + sha('2') +
                  "\t" + sha('1') + "\t\t\n");
            FAIL("expected error");
        } catch (const GraphError& e) {
            CHECK(std::string(e.what()).find("cycle") != std::string::npos);
        }
    }
    SUBCASE("duplicate edge") {
        CHECK_THROWS_AS(parse(sha('0') + "\t\t\t\n" + sha('1') + "\t" + sha('0') + "," + sha('0') + "\t\t\n"),
                        GraphError);
    }
    SUBCASE("duplicate commit") { CHECK_THROWS_AS(parse(sha('0') + "\t\t\t\n" + sha('0') + "\t\t\t\n"), GraphError); }
    SUBCASE("self parent") { CHECK_THROWS_AS(parse(sha('0') + "\t" + sha('0') + "\t\t\n"), GraphError); }
}

TEST_CASE("queries on small graphs") {
    const auto chain = make_graph({{"c0", {}}, {"c1", {"c0"}}, {"c2", {"c1"}}});
    CHECK(children_of(chain, cid("c2")).empty());
    CHECK(children_of(chain, cid("c1")) == ids({"c2"}));
    CHECK(ancestors(chain, ids({"c0"}), false).empty());
    CHECK(ancestors(chain, ids({"c2"}), false) == ids({"c0", "c1"}));
    CHECK(ancestors(chain, ids({"c2"}), true) == ids({"c0", "c1", "c2"}));
    CHECK(reachable_from_heads(chain, ids({"c0"})) == ids({"c0"}));
    CHECK(roots_within(chain, ids({"c0", "c1", "c2"})) == ids({"c0"}));
    CHECK(roots_within(chain, CommitSet{}).empty());
    CHECK_THROWS_AS(children_of(chain, cid("nope")), UnknownCommit);
    CHECK_THROWS_AS(ancestors(chain, ids({"nope"}), false), UnknownCommit);

    const auto octopus = make_graph({{"r1", {}}, {"r2", {}}, {"m", {"r1", "r2"}}});
    CHECK(roots_within(octopus, reachable_from_heads(octopus, ids({"m"}))) == ids({"r1", "r2"}));

    const auto disjoint = make_graph({{"a0", {}}, {"a1", {"a0"}}, {"b0", {}}, {"b1", {"b0"}}});
    CHECK(reachable_from_heads(disjoint, ids({"a1"})) == ids({"a0", "a1"}));
}

TEST_CASE("QEMU/PANDA fixture graph") {
    const auto g = qp::load();
    CHECK(g.size() == 14);
    const auto panda = reachable_from_heads(g, {qp::panda_head});
    CHECK(panda.count(qp::panda_first));
    CHECK_FALSE(panda.count(qp::fix));
    CHECK(reachable_from_heads(g, {qp::qemu_head}).count(qp::fix));
    CHECK(roots_within(g, reachable_from_heads(g, {qp::qemu_head})) == CommitSet{qp::root});

    // Child count of the fork point, counted directly from the file.
    std::size_t listed = 0;
    std::istringstream file(read_file(fixture("qemu_panda/commits.tsv")));
    for (std::string line; std::getline(file, line);) {
        if (line.empty() || line[0] == '#') continue;
        const auto tab = line.find('\t');
        if (line.substr(tab + 1, 40) == qp::fork_point.hex()) ++listed;
    }
    CHECK(listed == 2);
    CHECK(children_of(g, qp::fork_point).size() == listed);
}

TEST_CASE("graph properties on random DAGs") {
    for (std::uint64_t seed = 1; seed <= 40; ++seed) {
        const std::size_t n = 20 + (seed * 37) % 281;  // up to 300
        const auto inst = random_dag(n, 3, kPlantAll, seed);
        const auto& g = inst.graph;
        CAPTURE(seed);

        // Transpose consistency.
        std::size_t child_links = 0;
        for (CommitIndex c = 0; c < g.size(); ++c) {
            child_links += g.children(c).size();
            for (CommitIndex p : g.parents(c)) {
                const auto kids = g.children(p);
                CHECK(std::find(kids.begin(), kids.end(), c) != kids.end());
            }
        }
        CHECK(child_links == g.edge_count());

        // Ancestors against the naive fixpoint.
        std::mt19937_64 rng(seed);
        CommitSet start;
        for (int k = 0; k < 3; ++k) start.insert(g.id(rng() % g.size()));
        CHECK(ancestors(g, start, false) == fixpoint_ancestors(g, start, false));
        CHECK(ancestors(g, start, true) == fixpoint_ancestors(g, start, true));

        // Monotonicity of reachable_from_heads.
        CommitSet smaller{*start.begin()};
        const auto small = reachable_from_heads(g, smaller);
        const auto big = reachable_from_heads(g, start);
        CHECK(std::includes(big.begin(), big.end(), small.begin(), small.end()));

        // Serialization reproduces the same graph.
        std::stringstream ss;
        write_graph(ss, g);
        const auto again = load_graph(ss);
        REQUIRE(again.size() == g.size());
        for (CommitIndex c = 0; c < g.size(); ++c) {
            CHECK(again.node(again.index_of(g.id(c))).parents == g.node(c).parents);
        }
    }
}
