"""Input-gradient attribution: how strongly each input gene's expression
moves each predicted output gene, and how that matrix compares to a
reference."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import CDTModel, forward_batch
from .stats import pearson
from .tensor import ContractError, ShapeError, Tape, Tensor, backward, mul, tensor_sum


@dataclass
class AttributionMatrix:
    grad: np.ndarray        # [G_in, G_out]: |d pred_j / d expr_i| averaged over cells
    cells_used: int
    outputs: np.ndarray     # output gene indices (columns)
    signed: bool = False


def _cell_jacobian(model: CDTModel, dna: np.ndarray, expr: np.ndarray, outputs: np.ndarray,
                   chunk: int) -> np.ndarray:
    """``J[i, b] = d pred[outputs[b]] / d expr[i]`` for one cell (eval mode)."""
    G = expr.size
    out = np.empty((G, outputs.size))
    for start in range(0, outputs.size, chunk):
        js = outputs[start:start + chunk]
        n = js.size
        x = Tensor(np.repeat(expr[None].astype(model.dtype), n, axis=0), requires_grad=True)
        pick = np.zeros((n, G), dtype=model.dtype)
        pick[np.arange(n), js] = 1.0
        # each replicate's loss is one output, so one backward gives n rows
        with Tape() as tape:
            pred, _ = forward_batch(model, np.repeat(dna[None], n, axis=0), x)
            loss = tensor_sum(mul(pred, Tensor(pick)))
            backward(loss, tape)
        out[:, start:start + n] = x.grad.T
    return out


def input_gradient_matrix(model: CDTModel, cells: Sequence, dna_lookup, gene_subset=None,
                          signed: bool = False, chunk: int = 64) -> AttributionMatrix:
    """Average over cells of the (absolute) input-output Jacobian.

    Gradients are taken with respect to the log1p(CPM) input, with dropout off.
    """
    if len(cells) == 0:
        raise ContractError("input_gradient_matrix needs at least one cell")
    G = model.config.n_genes
    outputs = np.arange(G) if gene_subset is None else np.asarray(gene_subset, dtype=int)
    acc = np.zeros((G, outputs.size))
    for c in cells:
        expr = np.asarray(c.expr)
        if expr.shape != (G,):
            raise ShapeError(f"expression length {expr.shape} != ({G},)")
        j = _cell_jacobian(model, np.asarray(dna_lookup[c.locus_id]), expr, outputs, chunk)
        acc += j if signed else np.abs(j)
    return AttributionMatrix(acc / len(cells), len(cells), outputs, signed)


def attribution_correlation(attr, reference, exclude_diagonal: bool = True) -> float:
    """Pearson r between flattened matrices (diagonal dropped for square ones)."""
    a = np.asarray(attr.grad if isinstance(attr, AttributionMatrix) else attr, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if ref.ndim == 1 and a.ndim == 2 and a.shape[1] == 1:
        a = a[:, 0]
    if a.shape != ref.shape:
        raise ShapeError(f"attribution {a.shape} vs reference {ref.shape}")
    if exclude_diagonal and a.ndim == 2 and a.shape[0] == a.shape[1]:
        off = ~np.eye(a.shape[0], dtype=bool)
        return pearson(a[off], ref[off])
    return pearson(a.ravel(), ref.ravel())


def permuted_null(attr, reference, n_perm: int = 20, seed: int = 0) -> np.ndarray:
    """|r| against entry-permuted copies of the reference (off-diagonal entries
    shuffled among themselves)."""
    ref = np.asarray(reference, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA77]))
    out = np.empty(n_perm)
    square = ref.ndim == 2 and ref.shape[0] == ref.shape[1]
    off = ~np.eye(ref.shape[0], dtype=bool) if square else np.ones(ref.shape, dtype=bool)
    for i in range(n_perm):
        shuffled = ref.copy()
        shuffled[off] = rng.permutation(ref[off])
        out[i] = abs(attribution_correlation(attr, shuffled))
    return out
