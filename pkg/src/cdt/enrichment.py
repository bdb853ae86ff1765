"""High-attention genomic bins versus peak tracks: Fisher tests, circular
permutation tests, bin classes and their attention effect sizes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .stats import (
    ContingencyTable2x2,
    TestResult,
    cohens_d,
    fisher_exact_haldane,
    kruskal_wallis,
)
from .tensor import ConfigError, ContractError

BIN_CLASSES = ("promoter", "active_enhancer", "ctcf_only", "unannotated")
DEFAULT_FRACTIONS = (0.05, 0.075, 0.10, 0.125, 0.15, 0.175, 0.20)


@dataclass
class PeakTrack:
    """Half-open bin intervals ``[start, end)`` per locus for one mark."""

    mark: str
    intervals: dict = field(default_factory=dict)   # locus -> list[(start, end)]

    @classmethod
    def from_bins(cls, mark: str, bins_by_locus: Mapping[str, Iterable[int]]) -> "PeakTrack":
        return cls(mark, {locus: bins_to_intervals(bins) for locus, bins in bins_by_locus.items()})

    def bins(self, locus: str, n_bins: int) -> np.ndarray:
        """Boolean membership over the bin grid for one locus."""
        out = np.zeros(n_bins, dtype=bool)
        for start, end in self.intervals.get(locus, []):
            if not 0 <= start < end <= n_bins:
                raise ContractError(f"{self.mark}/{locus}: interval [{start}, {end}) outside [0, {n_bins})")
            out[start:end] = True
        return out


def bins_to_intervals(bins: Iterable[int]) -> list:
    """Merge bin indices into disjoint half-open intervals."""
    out = []
    for b in sorted(set(int(x) for x in bins)):
        if out and out[-1][1] == b:
            out[-1] = (out[-1][0], b + 1)
        else:
            out.append((b, b + 1))
    return out


def read_bed(path) -> dict:
    """Parse ``locus_id  bin_start  bin_end  mark`` lines into {mark: PeakTrack}."""
    tracks: dict = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            locus, start, end, mark = line.rstrip("\n").split("\t")[:4]
            tr = tracks.setdefault(mark, PeakTrack(mark))
            tr.intervals.setdefault(locus, []).append((int(start), int(end)))
    for tr in tracks.values():
        for locus, iv in tr.intervals.items():
            bins = [b for s, e in iv for b in range(s, e)]
            tr.intervals[locus] = bins_to_intervals(bins)
    return tracks


def write_bed(path, tracks: Mapping[str, PeakTrack]) -> None:
    rows = []
    for mark in sorted(tracks):
        for locus in sorted(tracks[mark].intervals):
            for start, end in tracks[mark].intervals[locus]:
                rows.append(f"{locus}\t{start}\t{end}\t{mark}\n")
    with open(path, "w") as fh:
        fh.writelines(rows)


# ---------------------------------------------------------------------------
# top bins and Fisher enrichment
# ---------------------------------------------------------------------------

def select_top_bins(att, fraction: float = 0.10) -> np.ndarray:
    """Indices of the ``floor(fraction * B)`` highest-attention bins.

    Ties at the cut go to the lower bin index. Returned sorted ascending.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"fraction must be in (0, 1), got {fraction}")
    att = np.asarray(att, dtype=np.float64).ravel()
    k = int(math.floor(fraction * att.size + 1e-9))
    order = np.lexsort((np.arange(att.size), -att))
    return np.sort(order[:k])


@dataclass
class MarkEnrichment:
    mark: str
    testable: bool
    table: ContingencyTable2x2 | None
    result: TestResult | None
    degenerate: bool = False

    @property
    def odds_ratio(self) -> float:
        return self.result.effect if self.result else float("nan")

    @property
    def p_value(self) -> float:
        return self.result.p_value if self.result else float("nan")


def mark_enrichment(top_bins, peak_mask, n_bins: int, mark: str = "") -> MarkEnrichment:
    """2x2 table of high-attention x peak membership over bins, Fisher-tested.

    A mark with no peak in the window is untestable. A mark covering every
    bin is still tested (Haldane OR stays finite) but flagged degenerate.
    """
    peak_mask = np.asarray(peak_mask, dtype=bool)
    if peak_mask.size != n_bins:
        raise ContractError(f"peak mask length {peak_mask.size} != {n_bins}")
    top = np.zeros(n_bins, dtype=bool)
    top_bins = np.asarray(top_bins, dtype=int)
    if top_bins.size and (top_bins.min() < 0 or top_bins.max() >= n_bins):
        raise ContractError("top bins outside [0, n_bins)")
    top[top_bins] = True
    if not peak_mask.any():
        return MarkEnrichment(mark, False, None, None)
    a = int((top & peak_mask).sum())
    b = int((top & ~peak_mask).sum())
    c = int((~top & peak_mask).sum())
    d = int((~top & ~peak_mask).sum())
    table = ContingencyTable2x2(a, b, c, d)
    return MarkEnrichment(mark, True, table, fisher_exact_haldane(table), degenerate=bool(peak_mask.all()))


def _overlap(att, peak_mask, k: int) -> int:
    order = np.lexsort((np.arange(att.size), -att))
    return int(peak_mask[order[:k]].sum())


def circular_permutation_test(att, peak_mask, fraction: float = 0.10, n_perm: int = 1000,
                              seed: int = 0, allow_zero_shift: bool = True) -> tuple[float, int, np.ndarray]:
    """Circular-shift null for the overlap of top bins with peaks.

    Each permutation rolls the attention profile by an offset drawn uniformly
    from ``[0, B)`` (or ``[1, B)`` when ``allow_zero_shift`` is False).
    Returns ``(p, observed_overlap, null_overlaps)`` with the add-one
    estimator ``p = (1 + #{null >= observed}) / (1 + n_perm)``.
    """
    if n_perm < 1:
        raise ConfigError("n_perm must be >= 1")
    att = np.asarray(att, dtype=np.float64).ravel()
    peak_mask = np.asarray(peak_mask, dtype=bool)
    B = att.size
    k = int(math.floor(fraction * B + 1e-9))
    observed = _overlap(att, peak_mask, k)
    null = np.empty(n_perm, dtype=np.int64)
    for i in range(n_perm):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        offset = int(rng.integers(0 if allow_zero_shift else 1, B))
        null[i] = _overlap(np.roll(att, offset), peak_mask, k)
    p = (1.0 + float((null >= observed).sum())) / (1.0 + n_perm)
    return p, observed, null


# ---------------------------------------------------------------------------
# bin classes
# ---------------------------------------------------------------------------

def classify_bins(tracks: Mapping[str, PeakTrack], locus: str, n_bins: int) -> np.ndarray:
    """Label every bin: promoter > active_enhancer > ctcf_only > unannotated.

    promoter: H3K4me3+. active_enhancer: H3K27ac+ and H3K4me3-. ctcf_only:
    CTCF+ with both histone marks absent. Everything else is unannotated.
    """
    def mask(mark):
        tr = tracks.get(mark)
        return tr.bins(locus, n_bins) if tr is not None else np.zeros(n_bins, dtype=bool)

    k4me3, k27ac, ctcf = mask("H3K4me3"), mask("H3K27ac"), mask("CTCF")
    labels = np.full(n_bins, "unannotated", dtype=object)
    labels[ctcf & ~k4me3 & ~k27ac] = "ctcf_only"
    labels[k27ac & ~k4me3] = "active_enhancer"
    labels[k4me3] = "promoter"
    return labels


@dataclass
class ClassEffects:
    means: dict
    medians: dict
    counts: dict
    kruskal: TestResult
    cohens_d: dict          # annotated class -> d vs unannotated (None if undefined)


def bin_class_effect_sizes(att, classes) -> ClassEffects:
    """Attention per bin class, Kruskal-Wallis across classes, and Cohen's d
    of each annotated class against unannotated (positive = more attention).

    ``att`` and ``classes`` may be pooled over several loci (flattened).
    """
    att = np.asarray(att, dtype=np.float64).ravel()
    classes = np.asarray(classes, dtype=object).ravel()
    if att.shape != classes.shape:
        raise ContractError("attention and class arrays differ in length")
    groups = {c: att[classes == c] for c in BIN_CLASSES if np.any(classes == c)}
    if len(groups) < 2:
        raise ContractError("need at least two nonempty bin classes")
    kw = kruskal_wallis(list(groups.values()))
    ds = {}
    un = groups.get("unannotated")
    for c, v in groups.items():
        if c == "unannotated":
            continue
        try:
            ds[c] = cohens_d(v, un) if un is not None else None
        except ContractError:
            ds[c] = None
    return ClassEffects(
        means={c: float(v.mean()) for c, v in groups.items()},
        medians={c: float(np.median(v)) for c, v in groups.items()},
        counts={c: int(v.size) for c, v in groups.items()},
        kruskal=kw,
        cohens_d=ds,
    )


def threshold_sweep(att, peak_mask, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> dict:
    """Fisher enrichment at each top fraction plus the largest adjacent jump
    in log odds ratio."""
    att = np.asarray(att, dtype=np.float64).ravel()
    rows = []
    for f in fractions:
        me = mark_enrichment(select_top_bins(att, f), peak_mask, att.size)
        rows.append({"fraction": float(f), "testable": me.testable,
                     "odds_ratio": me.odds_ratio, "p_value": me.p_value})
    log_or = [math.log(r["odds_ratio"]) for r in rows if r["testable"]]
    jump = max((abs(b - a) for a, b in zip(log_or, log_or[1:])), default=0.0)
    return {"rows": rows, "max_adjacent_log_or_jump": jump}
