"""On-disk layout of a simulated world, its cells, and matrix exports.

A world directory holds ``world.json`` (the manifest), CDTT blobs for the
numeric arrays, ``peaks.bed`` and ``cells.tsv``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from . import blob
from .enrichment import PeakTrack, read_bed, write_bed
from .tensor import ContractError
from .world import MARKS, CellSample, GroundTruthWorld, Locus, WorldConfig

WORLD_FILES = ("world.json", "grn.cdtt", "base_log2.cdtt", "noise_mask.cdtt", "ntc_cpm.cdtt",
               "ntc_mean.cdtt", "effects.cdtt", "embeddings.cdtt", "peaks.bed", "cells.tsv",
               "expr.cdtt", "target.cdtt")


class MissingInputError(FileNotFoundError):
    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        super().__init__("missing input file(s): " + ", ".join(self.missing))


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def check_present(directory, names: Sequence[str]) -> None:
    d = Path(directory)
    missing = [str(d / n) for n in names if not (d / n).is_file()]
    if missing:
        raise MissingInputError(missing)


def save_world(world: GroundTruthWorld, cells: Sequence[CellSample], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    loci = sorted(world.loci)
    manifest = {
        "config": world.config.to_dict(),
        "genes": list(world.genes),
        "hubs": list(world.hubs),
        "heldout_hub": world.heldout_hub,
        "hub_targets": {h: list(t) for h, t in world.hub_targets.items()},
        "module": list(world.module),
        "gene_sets": {k: list(v) for k, v in world.gene_sets.items()},
        "train_genes": list(world.train_genes),
        "holdout_genes": list(world.holdout_genes),
        "loci": [{
            "locus_id": lid,
            "kind": world.loci[lid].kind,
            "gene": world.loci[lid].gene,
            "planted": {str(b): c for b, c in sorted(world.loci[lid].planted.items())},
            "strengths": {str(b): float(s) for b, s in sorted(world.loci[lid].strengths.items())},
            "gate": float(world.loci[lid].gate),
        } for lid in loci],
        "seed": world.config.seed,
        "files": list(WORLD_FILES[1:]),
    }
    dump_json(out / "world.json", manifest)
    blob.save(out / "grn.cdtt", world.grn)
    blob.save(out / "base_log2.cdtt", world.base_log2)
    blob.save(out / "noise_mask.cdtt", world.noise_gene_mask.astype(np.float64))
    blob.save(out / "ntc_cpm.cdtt", world.ntc_cpm)
    blob.save(out / "ntc_mean.cdtt", world.ntc_mean)
    blob.save(out / "effects.cdtt", np.stack([world.loci[l].effect for l in loci]))
    blob.save(out / "embeddings.cdtt", np.stack([world.embeddings[l] for l in loci]).astype(np.float32))
    tracks = {m: PeakTrack.from_bins(m, world.peak_tracks.get(m, {})) for m in MARKS}
    write_bed(out / "peaks.bed", tracks)
    with open(out / "cells.tsv", "w") as fh:
        fh.write("row\tcell_id\tlocus_id\tperturbed_gene\tsplit\n")
        for i, c in enumerate(cells):
            fh.write(f"{i}\t{c.cell_id}\t{c.locus_id}\t{c.perturbed_gene}\t{c.split}\n")
    blob.save(out / "expr.cdtt", np.stack([c.expr for c in cells]).astype(np.float32))
    blob.save(out / "target.cdtt", np.stack([c.target for c in cells]).astype(np.float32))
    return out / "world.json"


def load_world(directory) -> tuple[GroundTruthWorld, list]:
    d = Path(directory)
    check_present(d, WORLD_FILES)
    m = json.loads((d / "world.json").read_text())
    cfg = WorldConfig.from_dict(m["config"])
    world = GroundTruthWorld(
        config=cfg, genes=m["genes"], grn=blob.load(d / "grn.cdtt"), hubs=m["hubs"],
        heldout_hub=m["heldout_hub"], hub_targets=m["hub_targets"], module=m["module"],
        gene_sets=m["gene_sets"], noise_gene_mask=blob.load(d / "noise_mask.cdtt") > 0.5,
        base_log2=blob.load(d / "base_log2.cdtt"),
    )
    world.train_genes = m["train_genes"]
    world.holdout_genes = m["holdout_genes"]
    world.ntc_cpm = blob.load(d / "ntc_cpm.cdtt")
    world.ntc_mean = blob.load(d / "ntc_mean.cdtt")
    effects = blob.load(d / "effects.cdtt")
    emb = blob.load(d / "embeddings.cdtt")
    for i, rec in enumerate(m["loci"]):
        lid = rec["locus_id"]
        world.loci[lid] = Locus(lid, rec["kind"], rec["gene"],
                                {int(b): c for b, c in rec["planted"].items()},
                                {int(b): s for b, s in rec["strengths"].items()},
                                rec["gate"], effects[i])
        world.embeddings[lid] = emb[i]
    tracks = read_bed(d / "peaks.bed")
    for mark in MARKS:
        tr = tracks.get(mark, PeakTrack(mark))
        world.peak_tracks[mark] = {lid: [b for s, e in iv for b in range(s, e)]
                                   for lid, iv in tr.intervals.items()}
    expr = blob.load(d / "expr.cdtt")
    target = blob.load(d / "target.cdtt")
    cells = []
    with open(d / "cells.tsv") as fh:
        next(fh)
        for line in fh:
            row, cid, lid, gene, split = line.rstrip("\n").split("\t")
            r = int(row)
            cells.append(CellSample(cid, lid, expr[r], target[r], gene, split))
    if len(cells) != expr.shape[0]:
        raise ContractError(f"cells.tsv lists {len(cells)} cells but expr.cdtt has {expr.shape[0]}")
    return world, cells


def write_matrix_tsv(path, mat, row_labels: Sequence, col_labels: Sequence) -> None:
    """Dense matrix with a header row of column labels and a label column."""
    mat = np.asarray(mat)
    if mat.shape != (len(row_labels), len(col_labels)):
        raise ContractError(f"matrix {mat.shape} vs labels {len(row_labels)}x{len(col_labels)}")
    with open(path, "w") as fh:
        fh.write("\t" + "\t".join(map(str, col_labels)) + "\n")
        for lab, row in zip(row_labels, mat):
            fh.write(str(lab) + "\t" + "\t".join(f"{v:.9g}" for v in row) + "\n")


def write_rows_tsv(path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    """Long-format table; floats with 9 significant digits, None as NA."""
    def fmt(v):
        if v is None:
            return "NA"
        if isinstance(v, (float, np.floating)):
            return f"{float(v):.9g}"
        return str(v)

    with open(path, "w") as fh:
        fh.write("\t".join(columns) + "\n")
        for r in rows:
            fh.write("\t".join(fmt(r.get(c)) for c in columns) + "\n")
