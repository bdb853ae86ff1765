"""Synthetic regulatory world with a planted ground truth.

The world holds a signed gene regulatory network (GRN), per-locus DNA
embeddings with planted regulatory bins and matching peak tracks, planted
gene sets, and simulated single cells. Every random draw comes from a
``SeedSequence`` keyed by (seed, component), so generation is a pure function
of the seed and adding noise genes leaves the curated part untouched.

GRN convention: ``grn[i, j]`` is the log2 effect on gene ``j`` of knocking
down gene ``i``; the diagonal holds the (negative) self-effect.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor import ConfigError, ContractError

log = logging.getLogger(__name__)

MARKS = ("DNase", "CTCF", "H3K27ac", "H3K4me1", "H3K4me3")

# marks carried by each planted bin class
CLASS_MARKS = {
    "promoter": ("DNase", "H3K4me3", "H3K27ac", "H3K4me1"),
    "active_enhancer": ("DNase", "H3K27ac", "H3K4me1"),
    "ctcf_only": ("DNase", "CTCF"),
}

_STREAMS = {
    "grn": 1, "genes": 2, "loci": 3, "ntc": 4, "cells": 5, "perturb": 6,
    "noise_genes": 7, "snp": 8, "split": 9, "promoter_ctcf": 10,
}


def _rng(seed: int, stream: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAMS[stream], *map(int, extra)]))


@dataclass(frozen=True)
class WorldConfig:
    n_genes: int = 200
    n_bins: int = 64
    embed_dim: int = 96
    hub_count: int = 5
    targets_per_hub: int = 20
    module_size: int = 16
    module_hubs: int = 2
    module_edge: float = 0.3
    background_density: float = 0.01
    hub_effect: tuple = (0.5, 1.0)
    background_effect: tuple = (0.15, 0.4)
    self_effect: tuple = (1.5, 2.5)
    n_train_genes: int = 20
    n_holdout_genes: int = 5
    cells_per_gene: int = 40
    n_ntc: int = 2000
    include_snp: bool = True
    n_snp_loci: int = 10
    cells_per_snp: int = 10
    snp_targets: tuple = (3, 6)
    snp_effect: tuple = (0.3, 0.6)
    mean_log2_sd: float = 0.5
    program_sd: float = 0.2
    program_self: float = 1.0
    cell_noise_sd: float = 0.15
    perturb_noise_sd: float = 0.1
    library_sd: float = 0.2
    n_noise_genes: int = 0
    noise_gene_sd: float = 1.0
    noise_gene_log2_offset: float = -3.0
    planted_bins: Mapping = field(default_factory=lambda: {"promoter": 3, "active_enhancer": 1, "ctcf_only": 2})
    promoter_ctcf: int = 1
    decoy_peaks: Mapping = field(default_factory=lambda: {"DNase": 4, "CTCF": 0, "H3K27ac": 1,
                                                         "H3K4me1": 2, "H3K4me3": 0})
    min_bin_spacing: int = 3
    snr: float = 2.0
    locus_noise_sd: float = 0.3
    gate_range: tuple = (0.5, 1.5)
    seed: int = 0

    def __post_init__(self):
        if self.hub_count * self.targets_per_hub >= self.n_genes:
            raise ConfigError(
                f"hub_count*targets_per_hub = {self.hub_count * self.targets_per_hub} must be < n_genes {self.n_genes}")
        if self.hub_count and self.n_holdout_genes < 1:
            raise ConfigError("need at least one holdout gene")
        if self.module_size and self.module_size > self.targets_per_hub:
            raise ConfigError("module_size must not exceed targets_per_hub")
        if self.module_hubs > max(self.hub_count - 1, 0) and self.module_size:
            raise ConfigError("module_hubs must leave the held-out hub out of the module")
        if self.n_train_genes + self.n_holdout_genes > self.n_genes:
            raise ConfigError("more perturbed genes than genes")
        n_planted = sum(self.planted_bins.values())
        if n_planted * self.min_bin_spacing > self.n_bins:
            raise ConfigError("planted bins do not fit on the bin grid with the requested spacing")

    @property
    def total_genes(self) -> int:
        return self.n_genes + self.n_noise_genes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["planted_bins"] = dict(self.planted_bins)
        d["decoy_peaks"] = dict(self.decoy_peaks)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "WorldConfig":
        d = dict(d)
        for k in ("hub_effect", "background_effect", "self_effect", "snp_targets", "snp_effect", "gate_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Locus:
    locus_id: str
    kind: str                      # "TSS" or "SNP"
    gene: str | None               # perturbed gene for TSS loci
    planted: dict                  # bin -> class
    strengths: dict                # bin -> signal strength
    gate: float
    effect: np.ndarray             # realized mean log2 effect row (gate * GRN row)


@dataclass
class CellSample:
    cell_id: str
    locus_id: str
    expr: np.ndarray               # log1p(CPM), the model input
    target: np.ndarray             # log2FC vs NTC mean
    perturbed_gene: str
    split: str = "train"


@dataclass
class GroundTruthWorld:
    config: WorldConfig
    genes: list
    grn: np.ndarray
    hubs: list
    heldout_hub: str
    hub_targets: dict
    module: list
    gene_sets: dict
    noise_gene_mask: np.ndarray
    base_log2: np.ndarray
    loci: dict = field(default_factory=dict)
    embeddings: dict = field(default_factory=dict)
    peak_tracks: dict = field(default_factory=dict)   # mark -> locus -> sorted bin list
    train_genes: list = field(default_factory=list)
    holdout_genes: list = field(default_factory=list)
    ntc_cpm: np.ndarray | None = None
    ntc_mean: np.ndarray | None = None

    @property
    def n_genes(self) -> int:
        return len(self.genes)

    def gene_index(self, gene: str) -> int:
        try:
            return self._index[gene]
        except AttributeError:
            self._index = {g: i for i, g in enumerate(self.genes)}
            return self.gene_index(gene)
        except KeyError:
            raise LookupError(f"unknown gene {gene!r}") from None

    def dna_lookup(self) -> dict:
        return self.embeddings

    def bin_classes(self, locus_id: str) -> np.ndarray:
        from .enrichment import PeakTrack, classify_bins
        tracks = {m: PeakTrack.from_bins(m, {locus_id: self.peak_tracks[m].get(locus_id, [])})
                  for m in MARKS}
        return classify_bins(tracks, locus_id, self.config.n_bins)


# ---------------------------------------------------------------------------
# GRN
# ---------------------------------------------------------------------------

def _uniform_signed(rng, lo_hi, size, balanced: bool = False):
    lo, hi = lo_hi
    mag = rng.uniform(lo, hi, size)
    if balanced:
        # equal up/down counts keep the CPM renormalization shift small
        signs = np.where(np.arange(size) < size // 2, 1.0, -1.0)
        return mag * rng.permutation(signs)
    return mag * rng.choice([-1.0, 1.0], size)


def generate_regulatory_network(G: int, hub_count: int, targets_per_hub: int, seed: int,
                                cfg: WorldConfig | None = None) -> dict:
    """Planted sparse signed GRN.

    Returns a dict with ``grn [G, G]``, ``hubs`` (gene indices, first one is
    the held-out hub), ``hub_targets`` (hub -> target indices), and
    ``module`` (co-regulated member indices). Hub rows carry exactly their
    targets plus the self-effect; other rows get sparse background edges.
    """
    if cfg is None:
        cfg = WorldConfig(n_genes=G, hub_count=hub_count, targets_per_hub=targets_per_hub,
                          module_size=min(16, targets_per_hub) if hub_count > 2 else 0,
                          module_hubs=2 if hub_count > 2 else 0,
                          n_train_genes=0, n_holdout_genes=1 if hub_count else 0, seed=seed)
    if hub_count * targets_per_hub >= G:
        raise ConfigError(f"infeasible: {hub_count} hubs x {targets_per_hub} targets >= {G} genes")
    rng = _rng(seed, "grn")
    grn = np.zeros((G, G))
    grn[np.arange(G), np.arange(G)] = -rng.uniform(*cfg.self_effect, G)
    if hub_count == 0:
        return {"grn": grn, "hubs": [], "hub_targets": {}, "module": []}

    order = rng.permutation(G)
    hubs = [int(h) for h in order[:hub_count]]
    pool = [int(g) for g in order[hub_count:]]
    module = pool[:cfg.module_size] if cfg.module_size else []
    module_hubs = hubs[1:1 + cfg.module_hubs] if module else []

    hub_targets = {}
    # hubs avoid each other's targets while genes last, so no gene outside
    # the module sits under two programs; non-module hubs avoid the module
    rest = [g for g in pool if g not in module]
    free = list(rest)
    for h in hubs:
        n_new = targets_per_hub - (len(module) if h in module_hubs else 0)
        src = free if len(free) >= n_new else rest
        picked = [int(x) for x in rng.choice(src, n_new, replace=False)]
        free = [g for g in free if g not in picked]
        targets = (list(module) if h in module_hubs else []) + picked
        targets = sorted(targets)
        hub_targets[h] = targets
        grn[h, targets] = _uniform_signed(rng, cfg.hub_effect, len(targets), balanced=True)

    # mutual edges inside the module: same sign pattern as the shared hubs
    for i in module:
        for j in module:
            if i != j:
                grn[i, j] = cfg.module_edge * np.sign(grn[module_hubs[0], j])

    hub_set = set(hubs)
    module_set = set(module)
    for i in range(G):
        if i in hub_set or i in module_set:
            continue
        mask = rng.random(G) < cfg.background_density
        mask[i] = False
        idx = np.flatnonzero(mask)
        grn[i, idx] = _uniform_signed(rng, cfg.background_effect, idx.size)
    return {"grn": grn, "hubs": hubs, "hub_targets": hub_targets, "module": module}


def _expected_level(grn, base, hubs_idx, noise_sd, cfg) -> np.ndarray:
    """Mean unperturbed expression per gene (lognormal means in closed form)."""
    program = grn[hubs_idx, :].copy()
    program[np.arange(len(hubs_idx)), hubs_idx] = -cfg.program_self
    var = noise_sd ** 2 + cfg.program_sd ** 2 * (program ** 2).sum(axis=0)
    return np.exp2(base) * np.exp(0.5 * var * math.log(2.0) ** 2)


def _balance_rows(grn: np.ndarray, level: np.ndarray, min_edges: int = 4, max_scale: float = 1.3) -> None:
    """Shrink the up edges and stretch the down edges of each multi-target
    row by a common factor so the row leaves total expression unchanged
    (in place).

    Without this, CPM renormalization shifts every gene's log2FC by the net
    mass change of the row.
    """
    from scipy.optimize import brentq

    for i in range(grn.shape[0]):
        row = grn[i].copy()
        row[i] = 0.0
        up, down = row > 0, row < 0
        if up.sum() + down.sum() < min_edges or not up.any() or not down.any():
            continue

        def net(t):
            return float((level[up] * (np.exp2(row[up] / t) - 1.0)).sum()
                         + (level[down] * (np.exp2(row[down] * t) - 1.0)).sum())

        # bounded so one highly expressed target cannot distort the row;
        # out of range, the bound gives the closest achievable balance
        if net(max_scale) > 0:
            t = max_scale
        elif net(1.0 / max_scale) < 0:
            t = 1.0 / max_scale
        else:
            t = brentq(net, 1.0 / max_scale, max_scale, xtol=1e-12)
        grn[i, up] = row[up] / t
        grn[i, down] = row[down] * t


# ---------------------------------------------------------------------------
# DNA loci
# ---------------------------------------------------------------------------

def _motifs(seed: int, E: int) -> dict:
    rng = _rng(seed, "loci", 999_999)
    out = {}
    for name in ("promoter", "active_enhancer", "ctcf_only", "aux"):
        v = rng.standard_normal(E)
        out[name] = v / np.linalg.norm(v)
    return out


def _background(seed: int, B: int, E: int) -> np.ndarray:
    return _rng(seed, "loci", 999_998).standard_normal((B, E))


def _place_bins(rng, B: int, n: int, spacing: int) -> list:
    for _ in range(1000):
        bins = sorted(int(b) for b in rng.choice(B, n, replace=False))
        gaps = np.diff(bins + [bins[0] + B]) if bins else []
        if all(g >= spacing for g in gaps):
            return bins
    raise ConfigError("could not place planted bins with the requested spacing")


def generate_locus_embedding(locus_id: str, cfg: WorldConfig, seed: int, planted: Mapping | None = None):
    """Noise embedding ``[B, E]`` with signal injected at planted bins.

    Returns ``(embedding, planted {bin: class}, strengths {bin: s}, peaks
    {mark: sorted bins}, gate)``. A planted bin's signal has norm
    ``snr * sqrt(E)`` and a direction that mixes the class motif with an
    auxiliary motif by an angle set by its strength, so strength survives
    layer norm. The locus gate (mean strength) scales the perturbation
    effect of the locus.
    """
    B, E = cfg.n_bins, cfg.embed_dim
    rng = _rng(seed, "loci", _stable_hash(locus_id))
    # shared genomic background plus locus-specific jitter: most of what
    # tells one locus from another sits at its planted bins
    emb = _background(seed, B, E) + cfg.locus_noise_sd * rng.standard_normal((B, E))
    noise_norm = math.sqrt(E * (1.0 + cfg.locus_noise_sd ** 2))
    counts = dict(cfg.planted_bins) if planted is None else dict(planted)
    n_planted = sum(counts.values())
    motifs = _motifs(seed, E)
    peaks = {m: set() for m in MARKS}
    planted_map: dict = {}
    strengths: dict = {}
    if n_planted:
        bins = _place_bins(rng, B, n_planted, cfg.min_bin_spacing)
        rng.shuffle(bins)
        k = 0
        for cls in ("promoter", "active_enhancer", "ctcf_only"):
            for _ in range(counts.get(cls, 0)):
                planted_map[int(bins[k])] = cls
                k += 1
        lo, hi = cfg.gate_range
        promoters = [b for b, c in sorted(planted_map.items()) if c == "promoter"]
        for b in sorted(planted_map):
            cls = planted_map[b]
            s = float(rng.uniform(lo, hi))
            strengths[b] = s
            theta = (s - lo) / (hi - lo) * (math.pi / 3)
            direction = math.cos(theta) * motifs[cls] + math.sin(theta) * motifs["aux"]
            emb[b] += cfg.snr * noise_norm * direction / np.linalg.norm(direction)
            for m in CLASS_MARKS[cls]:
                peaks[m].add(b)
        for b in promoters[:cfg.promoter_ctcf]:
            peaks["CTCF"].add(b)
        free = [b for b in range(B) if b not in planted_map]
        for m in MARKS:
            n_decoy = cfg.decoy_peaks.get(m, 0) if planted is None or n_planted else 0
            if n_decoy:
                peaks[m].update(int(b) for b in rng.choice(free, n_decoy, replace=False))
    gate = float(np.mean(list(strengths.values()))) if strengths else 1.0
    return emb, planted_map, strengths, {m: sorted(v) for m, v in peaks.items()}, gate


def _stable_hash(s: str) -> int:
    h = 2166136261
    for ch in s.encode():
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h


# ---------------------------------------------------------------------------
# expression
# ---------------------------------------------------------------------------

def _cpm(x: np.ndarray) -> np.ndarray:
    return x / x.sum(axis=-1, keepdims=True) * 1e6


def simulate_cell_expression(world: GroundTruthWorld, n_cells: int, seed: int, stream: int = 0) -> np.ndarray:
    """Unperturbed cells ``[n, G]`` in CPM.

    Per-gene lognormal baseline, per-cell hub-program activity propagated
    through the hub rows of the GRN, per-cell library size, CPM-normalized.
    """
    if n_cells < 1:
        raise ContractError("n_cells must be >= 1")
    cfg = world.config
    G = world.n_genes
    rng = _rng(seed, "cells", stream)
    hub_idx = [world.gene_index(h) for h in world.hubs]
    acts = rng.normal(0.0, cfg.program_sd, (n_cells, len(hub_idx)))
    program = world.grn[hub_idx, :].copy()
    # a hub's own level tracks its program with unit (not knockdown) weight
    program[np.arange(len(hub_idx)), hub_idx] = -cfg.program_self
    log2x = world.base_log2[None, :] + (acts @ program if hub_idx else 0.0)
    lib = np.exp(rng.normal(0.0, cfg.library_sd, (n_cells, 1)))
    log2x = log2x + _split_noise(world, rng, _rng(seed, "cells", stream, 1), n_cells,
                                 cfg.cell_noise_sd, cfg.cell_noise_sd)
    return _cpm(np.exp2(log2x) * lib)


def _split_noise(world, rng_curated, rng_noise, n_rows, sd_curated, sd_noise) -> np.ndarray:
    # curated and noise-gene columns draw from separate streams so adding
    # noise genes leaves the curated draws unchanged
    mask = world.noise_gene_mask
    out = np.empty((n_rows, mask.size))
    out[:, ~mask] = rng_curated.standard_normal((n_rows, int((~mask).sum()))) * sd_curated
    if mask.any():
        out[:, mask] = rng_noise.standard_normal((n_rows, int(mask.sum()))) * sd_noise
    return out


def apply_perturbation(world: GroundTruthWorld, gene_or_locus: str, cell: np.ndarray,
                       noise_seed: int, gate: float | None = None) -> np.ndarray:
    """Perturb one baseline CPM cell and re-normalize.

    ``gene_or_locus`` is a gene id (knocked down through its GRN row with gate
    1 unless given) or a locus id (its realized effect row).
    """
    cfg = world.config
    if gene_or_locus in world.loci:
        row = world.loci[gene_or_locus].effect if gate is None else \
            world.loci[gene_or_locus].effect / world.loci[gene_or_locus].gate * gate
    else:
        row = world.grn[world.gene_index(gene_or_locus)] * (1.0 if gate is None else gate)
    rng = np.random.default_rng(np.random.SeedSequence([int(noise_seed), _STREAMS["perturb"]]))
    rng_noise = np.random.default_rng(np.random.SeedSequence([int(noise_seed), _STREAMS["perturb"], 1]))
    noise = _split_noise(world, rng, rng_noise, 1, cfg.perturb_noise_sd, cfg.noise_gene_sd)[0]
    return _cpm(np.asarray(cell) * np.exp2(row + noise))


def compute_log2fc(expr_cpm, ntc_mean_cpm) -> np.ndarray:
    """``log2((x + 1) / (mean_ntc + 1))`` elementwise."""
    x = np.asarray(expr_cpm, dtype=np.float64)
    m = np.asarray(ntc_mean_cpm, dtype=np.float64)
    if x.shape[-1] != m.shape[-1]:
        raise ContractError(f"length mismatch: {x.shape} vs {m.shape}")
    if np.any(x < 0) or np.any(m < 0):
        raise ContractError("compute_log2fc needs nonnegative CPM values")
    return np.log2((x + 1.0) / (m + 1.0))


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split_genes(world: GroundTruthWorld, holdout_genes: Sequence[str], cells: Sequence[CellSample]):
    """Gene-level split: every cell of a holdout gene goes to validation."""
    holdout = set(holdout_genes)
    if not holdout:
        raise ConfigError("holdout gene list is empty")
    for g in holdout:
        world.gene_index(g)
    if world.heldout_hub and world.heldout_hub not in holdout:
        raise ConfigError(f"held-out hub {world.heldout_hub} must be in the holdout set")
    have = {c.perturbed_gene for c in cells}
    missing = sorted(holdout - have)
    if missing:
        raise ConfigError(f"holdout genes without cells: {missing}")
    train, val = [], []
    for c in cells:
        if c.perturbed_gene in holdout:
            c.split = "val"
            val.append(c)
        else:
            c.split = "train"
            train.append(c)
    return train, val


def assert_no_leakage(train: Sequence[CellSample], val: Sequence[CellSample]) -> None:
    leaked = {c.perturbed_gene for c in val} & {c.perturbed_gene for c in train}
    if leaked:
        raise LeakageError(f"validation genes also perturbed in training: {sorted(leaked)}")


class LeakageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# whole world
# ---------------------------------------------------------------------------

def generate_world(cfg: WorldConfig) -> tuple[GroundTruthWorld, list]:
    """Build the world and all cell samples (split assigned)."""
    seed = cfg.seed
    G0 = cfg.n_genes
    net = generate_regulatory_network(G0, cfg.hub_count, cfg.targets_per_hub, seed, cfg)
    G = cfg.total_genes
    grn = np.zeros((G, G))
    grn[:G0, :G0] = net["grn"]
    genes = [f"G{i:03d}" for i in range(G0)] + [f"N{i:03d}" for i in range(cfg.n_noise_genes)]
    if cfg.n_noise_genes:
        nrng = _rng(seed, "noise_genes")
        grn[np.arange(G0, G), np.arange(G0, G)] = -nrng.uniform(*cfg.self_effect, cfg.n_noise_genes)
    mask = np.zeros(G, dtype=bool)
    mask[G0:] = True

    grng = _rng(seed, "genes")
    base = np.log2(1e6 / G0) + grng.normal(0.0, cfg.mean_log2_sd, G0)
    if cfg.n_noise_genes:
        base = np.concatenate([base, np.log2(1e6 / G0) + cfg.noise_gene_log2_offset + _rng(seed, "noise_genes", 1).normal(
            0.0, cfg.mean_log2_sd, cfg.n_noise_genes)])

    hubs_idx = list(net["hubs"])
    noise_sd = np.full(G, cfg.cell_noise_sd)
    for _ in range(3):
        _balance_rows(grn, _expected_level(grn, base, hubs_idx, noise_sd, cfg))

    hubs = [genes[h] for h in net["hubs"]]
    module = [genes[i] for i in net["module"]]
    hub_targets = {genes[h]: [genes[t] for t in ts] for h, ts in net["hub_targets"].items()}
    gene_sets = {f"hub_{h}_targets": list(ts) for h, ts in hub_targets.items()}
    if module:
        gene_sets["coregulated_module"] = list(module)

    world = GroundTruthWorld(
        config=cfg, genes=genes, grn=grn, hubs=hubs,
        heldout_hub=hubs[0] if hubs else "", hub_targets=hub_targets, module=module,
        gene_sets=gene_sets, noise_gene_mask=mask, base_log2=base,
    )

    # perturbed genes: non-held-out hubs are always trained on
    srng = _rng(seed, "split")
    others = [g for g in genes[:G0] if g not in hubs]
    srng.shuffle(others)
    n_hold_extra = cfg.n_holdout_genes - (1 if hubs else 0)
    holdout = ([world.heldout_hub] if hubs else []) + others[:n_hold_extra]
    rest = others[n_hold_extra:]
    train = hubs[1:] + rest[:max(0, cfg.n_train_genes - (len(hubs) - 1))]
    world.train_genes = sorted(train)
    world.holdout_genes = sorted(holdout)

    for gene in world.train_genes + world.holdout_genes:
        lid = f"TSS_{gene}"
        emb, planted, strengths, peaks, gate = generate_locus_embedding(lid, cfg, seed)
        row = grn[world.gene_index(gene)] * gate
        world.loci[lid] = Locus(lid, "TSS", gene, planted, strengths, gate, row)
        world.embeddings[lid] = emb.astype(np.float32)
        for m, bins in peaks.items():
            world.peak_tracks.setdefault(m, {})[lid] = bins
    if cfg.include_snp:
        snp_rng = _rng(seed, "snp")
        for k in range(cfg.n_snp_loci):
            lid = f"SNP_{k:03d}"
            emb, planted, strengths, peaks, gate = generate_locus_embedding(lid, cfg, seed)
            row = np.zeros(G)
            n_t = int(snp_rng.integers(cfg.snp_targets[0], cfg.snp_targets[1] + 1))
            tgt = snp_rng.choice(G0, n_t, replace=False)
            row[tgt] = _uniform_signed(snp_rng, cfg.snp_effect, n_t)
            world.loci[lid] = Locus(lid, "SNP", None, planted, strengths, gate, row * gate)
            world.embeddings[lid] = emb.astype(np.float32)
            for m, bins in peaks.items():
                world.peak_tracks.setdefault(m, {})[lid] = bins

    world.ntc_cpm = simulate_cell_expression(world, cfg.n_ntc, seed, stream=0)
    world.ntc_mean = world.ntc_cpm.mean(axis=0)

    cells = []
    for li, (lid, locus) in enumerate(sorted(world.loci.items())):
        n = cfg.cells_per_gene if locus.kind == "TSS" else cfg.cells_per_snp
        base_cells = simulate_cell_expression(world, n, seed, stream=1 + li)
        label = locus.gene if locus.kind == "TSS" else lid
        for c in range(n):
            x = apply_perturbation(world, lid, base_cells[c], noise_seed=_cell_seed(seed, li, c))
            cells.append(CellSample(
                cell_id=f"{lid}_c{c:04d}", locus_id=lid,
                expr=np.log1p(x).astype(np.float32),
                target=compute_log2fc(x, world.ntc_mean).astype(np.float32),
                perturbed_gene=label,
            ))
    if world.holdout_genes:
        split_genes(world, world.holdout_genes, cells)
    return world, cells


def _cell_seed(seed: int, locus_index: int, cell_index: int) -> int:
    return int(np.random.SeedSequence([int(seed), 77, locus_index, cell_index]).generate_state(1)[0])
