import math

import networkx as nx
import numpy as np
import pytest

from cdt.atlas import (
    CommunityPartition,
    GeneGraph,
    build_attention_graph,
    community_geneset_enrichment,
    convergence_overlap,
    cross_attention_gene_similarity,
    louvain_communities,
    modularity,
    percell_attention_correlation,
    topn_overlap_enrichment,
)
from cdt.tensor import ConfigError, ContractError


def graph_from_edges(n, edges):
    nodes = [f"g{i}" for i in range(n)]
    return GeneGraph(nodes, [(nodes[a], nodes[b], w) for a, b, w in edges], directed=False)


def two_cliques(size=20):
    edges = [(i, j, 1.0) for blk in (0, size) for i in range(blk, blk + size) for j in range(i + 1, blk + size)]
    edges.append((0, size, 1.0))
    return graph_from_edges(2 * size, edges)


def test_two_cliques_recovered():
    g = two_cliques()
    a = louvain_communities(g, seed=0)
    b = louvain_communities(g, seed=0)
    assert a.membership == b.membership
    comms = sorted(sorted(v) for v in a.communities().values())
    assert len(comms) == 2 and {len(c) for c in comms} == {20}
    assert comms[0] == sorted(f"g{i}" for i in range(20)) or comms[1] == sorted(f"g{i}" for i in range(20))
    assert a.modularity > 0.3


def test_two_triangles():
    g = graph_from_edges(6, [(0, 1, 1), (1, 2, 1), (0, 2, 1), (3, 4, 1), (4, 5, 1), (3, 5, 1), (2, 3, 1)])
    part = louvain_communities(g, seed=3)
    m = part.membership
    assert m["g0"] == m["g1"] == m["g2"] != m["g3"] == m["g4"] == m["g5"]
    # 7 edges, each triangle holds 3 internal edges and degree sum 7
    assert math.isclose(part.modularity, 2 * (3 / 7 - (7 / 14) ** 2))


@pytest.mark.parametrize("seed", range(5))
def test_modularity_matches_networkx(seed):
    rng = np.random.default_rng(seed)
    G = nx.planted_partition_graph(4, 12, 0.6, 0.05, seed=seed)
    for u, v in G.edges:
        G[u][v]["weight"] = float(rng.uniform(0.5, 2.0))
    g = graph_from_edges(G.number_of_nodes(), [(u, v, d["weight"]) for u, v, d in G.edges(data=True)])
    part = louvain_communities(g, seed=seed)
    labels = [part.membership[f"g{i}"] for i in range(G.number_of_nodes())]
    comms = [set(np.flatnonzero(np.array(labels) == c)) for c in set(labels)]
    assert math.isclose(part.modularity, nx.community.modularity(G, comms, weight="weight"), rel_tol=1e-9)
    ref = nx.community.louvain_communities(G, weight="weight", seed=seed)
    # ours is a local optimum; it should be close to networkx's
    assert part.modularity >= nx.community.modularity(G, ref, weight="weight") - 0.02
    assert modularity(g.adjacency(), labels) == pytest.approx(part.modularity)


def test_louvain_rejects_empty():
    with pytest.raises(ContractError):
        louvain_communities(GeneGraph(["a", "b"], []))


def test_topn_overlap():
    G = 11
    row = np.arange(G, dtype=float)
    k, fold, p = topn_overlap_enrichment(row, row, 3, query=0)
    assert k == 3 and math.isclose(fold, 3 / (9 / 10)) and p < 1
    k, _, p = topn_overlap_enrichment(row, row[::-1], 3, query=None)
    assert k == 0 and math.isclose(p, 1.0)
    with pytest.raises(ConfigError):
        topn_overlap_enrichment(row, row, 10, query=0)
    # query dropped from both rankings: its value never counts
    big = row.copy()
    big[5] = 1e9
    k, _, _ = topn_overlap_enrichment(big, big, 1, query=5)
    assert k == 1


def test_fold_arithmetic_frozen():
    k, e = 132, 165 * 679 / 2361
    assert math.isclose(e, 47.452350698856414, rel_tol=1e-12)
    ok, fold, p = convergence_overlap(range(165), range(165 - 132, 165 - 132 + 679), 2361)
    assert ok == 132 and math.isclose(fold, 2.7817378497790872, rel_tol=1e-12)
    assert f"{fold:.1f}" == "2.8" and f"{e:.1f}" == "47.5"
    assert math.isclose(p, 9.28278770259656e-46, rel_tol=1e-9) and f"{p:.1e}" == "9.3e-46"
    with pytest.raises(ContractError):
        convergence_overlap([], ["a"], 5)


def test_cosine_similarity_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.random((5, 7))
    s = cross_attention_gene_similarity(x)
    for i in range(5):
        for j in range(5):
            ref = sum(x[i] * x[j]) / math.sqrt(sum(x[i] ** 2) * sum(x[j] ** 2))
            assert math.isclose(s[i, j], ref, rel_tol=1e-12)
    x[2] = 0
    with pytest.raises(ContractError):
        cross_attention_gene_similarity(x)


def test_attention_graph_edges():
    rng = np.random.default_rng(1)
    a = rng.random((200, 200))
    g = build_attention_graph(a, [f"g{i}" for i in range(200)], 0.05)
    assert len(g.edges) == math.floor(0.05 * 200 * 199)
    assert all(s != d for s, d, _ in g.edges)
    ties = np.ones((4, 4))
    assert len(build_attention_graph(ties, list("abcd"), 0.1).edges) == 12
    with pytest.raises(ContractError):
        build_attention_graph(-a, [f"g{i}" for i in range(200)])


def test_community_enrichment():
    genes = [f"g{i}" for i in range(40)]
    part = CommunityPartition({g: int(i >= 20) for i, g in enumerate(genes)}, 0.5)
    rows = community_geneset_enrichment(part, {"hit": genes[:20], "half": genes[10:30]})
    top = rows[0]
    assert (top["community"], top["gene_set"], top["overlap"]) == (0, "hit", 20)
    assert math.isclose(top["p"], 1 / math.comb(40, 20), rel_tol=1e-9)
    miss = [r for r in rows if r["community"] == 1 and r["gene_set"] == "hit"][0]
    assert miss["overlap"] == 0 and miss["p"] == 1.0
    assert all(r["q"] >= r["p"] for r in rows)
    with pytest.raises(ContractError):
        community_geneset_enrichment(part, {"bad": ["zz"]})


def test_community_enrichment_null():
    rng = np.random.default_rng(2)
    genes = [f"g{i}" for i in range(200)]
    ps = []
    for s in range(50):
        lab = rng.integers(0, 5, 200)
        part = CommunityPartition({g: int(c) for g, c in zip(genes, lab)}, 0.0)
        rows = community_geneset_enrichment(part, {"s": list(rng.choice(genes, 20, replace=False))})
        ps.append(min(r["q"] for r in rows))
    assert np.mean(np.array(ps) < 0.05) <= 0.1


def test_percell_correlation():
    rows = np.tile(np.arange(6.0), (3, 1))
    r = percell_attention_correlation(rows)
    assert r.mean_r == 1.0 and np.all(r.variance == 0)
    rows[2] = 1.0
    r = percell_attention_correlation(rows, top=2)
    assert math.isnan(r.r[0, 2]) and r.mean_r == 1.0
    # gene 5 moves 5 -> 1, gene 4 moves 4 -> 1
    assert r.most_variable == [5, 4]
    with pytest.raises(ContractError):
        percell_attention_correlation(rows[:1])
