"""Attention maps as regulatory-network claims: top-N overlap with known
effects, gene graphs, Louvain communities, gene-set enrichment and
cell-to-cell variation of attention."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .stats import UndefinedStatisticError, bh_adjust, hypergeom_sf, pearson
from .tensor import ConfigError, ContractError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# rankings
# ---------------------------------------------------------------------------

def _top_n(score: np.ndarray, n: int) -> np.ndarray:
    # stable: score descending, then index ascending
    order = np.lexsort((np.arange(score.size), -score))
    return order[:n]


def topn_overlap_enrichment(att_row, effect_row, n: int, query: int | None = None):
    """Overlap of the top-``n`` genes by attention and by ``|effect|``.

    The query gene is dropped from both rankings, so the universe is
    ``M = G - 1`` when ``query`` is given. Returns ``(k, fold, p)`` with
    ``fold = k / (n^2 / M)`` and ``p = P(X >= k)`` under the hypergeometric null.
    """
    att = np.asarray(att_row, dtype=np.float64).ravel()
    eff = np.abs(np.asarray(effect_row, dtype=np.float64).ravel())
    if att.shape != eff.shape:
        raise ContractError(f"length mismatch: {att.size} vs {eff.size}")
    keep = np.ones(att.size, dtype=bool)
    if query is not None:
        keep[query] = False
    att, eff = att[keep], eff[keep]
    M = att.size
    if not 0 < n < M:
        raise ConfigError(f"need 0 < N < M, got N={n}, M={M}")
    k = len(set(_top_n(att, n).tolist()) & set(_top_n(eff, n).tolist()))
    fold = k / (n * n / M)
    return k, fold, hypergeom_sf(k, M, n, n)


def cross_attention_gene_similarity(cross) -> np.ndarray:
    """Cosine similarity between rows of a ``[G, B]`` cross-attention map."""
    x = np.asarray(cross, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ContractError(f"zero cross-attention row(s): {np.flatnonzero(norms == 0)[:5].tolist()}")
    u = x / norms[:, None]
    sim = np.clip(u @ u.T, -1.0, 1.0)
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return sim


# ---------------------------------------------------------------------------
# graphs
# ---------------------------------------------------------------------------

@dataclass
class GeneGraph:
    nodes: list
    edges: list                 # (src, dst, weight)
    directed: bool = True

    def adjacency(self, symmetrize: str = "max") -> np.ndarray:
        """Dense undirected weights; ``symmetrize`` is ``"max"`` or ``"mean"``."""
        idx = {g: i for i, g in enumerate(self.nodes)}
        a = np.zeros((len(self.nodes), len(self.nodes)))
        for s, d, w in self.edges:
            a[idx[s], idx[d]] = w
        if not self.directed:
            return np.maximum(a, a.T)
        if symmetrize == "max":
            return np.maximum(a, a.T)
        if symmetrize == "mean":
            return 0.5 * (a + a.T)
        raise ConfigError(f"unknown symmetrization {symmetrize!r}")


def build_attention_graph(matrix, genes: Sequence[str], top_fraction: float = 0.05) -> GeneGraph:
    """Keep off-diagonal edges at or above the ``1 - top_fraction`` quantile.

    The threshold is the ``floor(top_fraction * G * (G - 1))``-th largest
    off-diagonal weight, so ties at the threshold are all kept. Zero weights
    are never edges.
    """
    if not 0.0 < top_fraction < 1.0:
        raise ConfigError(f"top_fraction must be in (0, 1), got {top_fraction}")
    a = np.asarray(matrix, dtype=np.float64)
    G = a.shape[0]
    if a.shape != (G, G) or len(genes) != G:
        raise ContractError(f"need a square matrix matching {len(genes)} genes, got {a.shape}")
    if np.any(a < 0):
        raise ContractError("attention graph needs a nonnegative matrix")
    off = ~np.eye(G, dtype=bool)
    vals = a[off]
    k = max(1, int(math.floor(top_fraction * vals.size + 1e-9)))
    thr = np.partition(vals, vals.size - k)[vals.size - k]
    keep = off & (a >= thr) & (a > 0)
    src, dst = np.nonzero(keep)
    edges = [(genes[i], genes[j], float(a[i, j])) for i, j in zip(src, dst)]
    return GeneGraph(list(genes), edges, directed=True)


def write_edges_tsv(path, graph: GeneGraph) -> None:
    with open(path, "w") as fh:
        fh.write("src\tdst\tweight\n")
        for s, d, w in graph.edges:
            fh.write(f"{s}\t{d}\t{w:.9g}\n")


# ---------------------------------------------------------------------------
# Louvain
# ---------------------------------------------------------------------------

@dataclass
class CommunityPartition:
    membership: dict            # gene -> community id
    modularity: float
    levels: list = field(default_factory=list)   # modularity after each pass

    def communities(self) -> dict:
        out: dict = {}
        for g, c in self.membership.items():
            out.setdefault(c, []).append(g)
        return out


def modularity(adj, labels, resolution: float = 1.0) -> float:
    """Newman modularity of a labelling on a symmetric weighted graph."""
    a = np.asarray(adj, dtype=np.float64)
    labels = np.asarray(labels)
    two_m = a.sum()
    if two_m == 0:
        raise ContractError("modularity undefined on a graph without edges")
    k = a.sum(axis=1)
    q = 0.0
    for c in np.unique(labels):
        m = labels == c
        q += a[np.ix_(m, m)].sum() / two_m - resolution * (k[m].sum() / two_m) ** 2
    return float(q)


def _one_level(a: np.ndarray, resolution: float, order: np.ndarray) -> tuple[np.ndarray, bool]:
    n = a.shape[0]
    k = a.sum(axis=1)
    two_m = a.sum()
    comm = np.arange(n)
    tot = k.copy()
    moved_any = False
    improved = True
    while improved:
        improved = False
        for i in order:
            ci = comm[i]
            ki = k[i]
            # weights from i to each community, excluding its self-loop
            row = a[i].copy()
            row[i] = 0.0
            links = np.bincount(comm, weights=row, minlength=n)
            tot[ci] -= ki
            gain = links - resolution * tot * ki / two_m
            best = ci
            best_gain = gain[ci]
            cand = np.flatnonzero(links > 0)
            for c in cand:
                if gain[c] > best_gain + 1e-12:
                    best, best_gain = c, gain[c]
            tot[best] += ki
            if best != ci:
                comm[i] = best
                improved = True
                moved_any = True
    _, comm = np.unique(comm, return_inverse=True)
    return comm, moved_any


def louvain_communities(graph: GeneGraph, resolution: float = 1.0, seed: int = 0,
                        symmetrize: str = "max") -> CommunityPartition:
    """Two-phase Louvain (local moves, then aggregation) on the symmetrized graph.

    Node visiting order is a seeded permutation, so results are deterministic
    for a fixed seed and node order.
    """
    if not graph.nodes or not graph.edges:
        raise ContractError("louvain needs a graph with nodes and edges")
    a = graph.adjacency(symmetrize)
    n = a.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x10C4]))
    labels = np.arange(n)
    cur = a
    levels = []
    while True:
        order = rng.permutation(cur.shape[0])
        comm, moved = _one_level(cur, resolution, order)
        if not moved:
            break
        labels = comm[labels]
        nc = comm.max() + 1
        p = np.zeros((cur.shape[0], nc))
        p[np.arange(cur.shape[0]), comm] = 1.0
        cur = p.T @ cur @ p
        levels.append(modularity(a, labels, resolution))
        if nc == 1:
            break
    # relabel by first appearance in node order
    _, first = np.unique(labels, return_index=True)
    remap = {old: new for new, old in enumerate(labels[np.sort(first)])}
    labels = np.array([remap[x] for x in labels])
    q = modularity(a, labels, resolution)
    return CommunityPartition({g: int(c) for g, c in zip(graph.nodes, labels)}, q, levels)


def write_partition_tsv(path, part: CommunityPartition) -> None:
    with open(path, "w") as fh:
        fh.write("gene\tcommunity\n")
        for g, c in part.membership.items():
            fh.write(f"{g}\t{c}\n")


# ---------------------------------------------------------------------------
# enrichment of communities
# ---------------------------------------------------------------------------

def community_geneset_enrichment(part: CommunityPartition, gene_sets: Mapping[str, Sequence[str]],
                                 universe: Sequence[str] | None = None) -> list:
    """Hypergeometric test of every (community, gene set) pair, BH-adjusted
    across all pairs. Rows are sorted by p then community then set name."""
    universe = set(universe) if universe is not None else set(part.membership)
    M = len(universe)
    rows = []
    comms = part.communities()
    for name in sorted(gene_sets):
        s = set(gene_sets[name])
        if not s:
            log.warning("gene set %s is empty; skipped", name)
            continue
        if not s <= universe:
            raise ContractError(f"gene set {name} has genes outside the universe")
        for c in sorted(comms):
            members = set(comms[c]) & universe
            k = len(members & s)
            rows.append({"community": c, "gene_set": name, "size": len(members),
                         "set_size": len(s), "overlap": k,
                         "p": hypergeom_sf(k, M, len(s), len(members))})
    q = bh_adjust([r["p"] for r in rows])
    for r, qq in zip(rows, q):
        r["q"] = float(qq)
    rows.sort(key=lambda r: (r["p"], r["community"], r["gene_set"]))
    return rows


def convergence_overlap(a: Sequence[str], b: Sequence[str], universe: int) -> tuple[int, float, float]:
    """``(overlap, fold, p)`` for two gene sets drawn from ``universe`` genes."""
    a, b = set(a), set(b)
    if not a or not b:
        raise ContractError("convergence_overlap needs two nonempty sets")
    if len(a) > universe or len(b) > universe:
        raise ContractError("set larger than the universe")
    k = len(a & b)
    expected = len(a) * len(b) / universe
    return k, k / expected, hypergeom_sf(k, universe, len(a), len(b))


# ---------------------------------------------------------------------------
# cell-to-cell variation
# ---------------------------------------------------------------------------

@dataclass
class PerCellCorrelation:
    r: np.ndarray               # [n, n]; NaN where undefined
    mean_r: float | None        # over defined off-diagonal pairs
    variance: np.ndarray        # per-gene attention variance across cells
    most_variable: list         # gene indices, most variable first


def percell_attention_correlation(rows, top: int = 10) -> PerCellCorrelation:
    """Pairwise Pearson r between per-cell attention rows ``[n, G]`` of one
    query gene (already head-averaged)."""
    x = np.asarray(rows, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ContractError("need at least two cells")
    r = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(i, n):
            try:
                r[i, j] = r[j, i] = pearson(x[i], x[j])
            except UndefinedStatisticError:
                pass
    off = r[~np.eye(n, dtype=bool)]
    off = off[~np.isnan(off)]
    var = x.var(axis=0)
    order = np.lexsort((np.arange(var.size), -var))
    return PerCellCorrelation(r, float(off.mean()) if off.size else None, var, order[:top].tolist())


def query_rows(bundles: Sequence, query: int) -> np.ndarray:
    """Head-averaged RNA self-attention row of ``query`` for each cell bundle."""
    return np.stack([b.rna_self[:, query, :].mean(axis=0) for b in bundles])
