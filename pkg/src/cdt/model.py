"""The CDT-II network: DNA and RNA encoders, self/cross attention, virtual
cell embedding, task head, and attention-map extraction."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import blob
from .tensor import (
    ConfigError,
    ContractError,
    ShapeError,
    Tensor,
    add,
    concat,
    dropout,
    gelu,
    layer_norm,
    matmul,
    multi_head_attention,
    reshape,
)

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    n_genes: int = 200
    n_bins: int = 64
    dna_embed_dim: int = 96
    model_dim: int = 32
    heads: int = 4
    ffn_dim: int = 128
    dropout_p: float = 0.1
    n_dna_layers: int = 2
    n_rna_layers: int = 1
    vce_pool_heads: int = 4
    task_hidden_dim: int = 64
    head_layer_norm: bool = True
    positional_encoding: bool = False

    def __post_init__(self):
        dims = [self.n_genes, self.n_bins, self.dna_embed_dim, self.model_dim, self.heads,
                self.ffn_dim, self.n_dna_layers, self.n_rna_layers, self.vce_pool_heads,
                self.task_hidden_dim]
        if any(int(v) < 1 for v in dims):
            raise ConfigError(f"all model dims must be >= 1: {self}")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.model_dim % self.vce_pool_heads:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by vce_pool_heads {self.vce_pool_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1): {self.dropout_p}")
        if self.positional_encoding:
            raise ConfigError("positional encodings are not implemented; keep positional_encoding=False")

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        return cls(n_genes=2361, n_bins=896, dna_embed_dim=3072, model_dim=512, heads=8,
                   ffn_dim=2048, dropout_p=0.3, task_hidden_dim=1024)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _attn_shapes(prefix: str, d: int) -> dict:
    return {f"{prefix}.{n}": s for n, s in
            [("wq", (d, d)), ("bq", (d,)), ("wk", (d, d)), ("bk", (d,)),
             ("wv", (d, d)), ("bv", (d,)), ("wo", (d, d)), ("bo", (d,))]}


def _block_shapes(prefix: str, d: int, ffn: int, cross: bool = False) -> dict:
    shapes = {}
    if cross:
        shapes.update({f"{prefix}.lnq_g": (d,), f"{prefix}.lnq_b": (d,),
                       f"{prefix}.lnkv_g": (d,), f"{prefix}.lnkv_b": (d,)})
    else:
        shapes.update({f"{prefix}.ln1_g": (d,), f"{prefix}.ln1_b": (d,)})
    shapes.update(_attn_shapes(f"{prefix}.attn", d))
    shapes.update({f"{prefix}.ln2_g": (d,), f"{prefix}.ln2_b": (d,),
                   f"{prefix}.ffn.w1": (d, ffn), f"{prefix}.ffn.b1": (ffn,),
                   f"{prefix}.ffn.w2": (ffn, d), f"{prefix}.ffn.b2": (d,)})
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered map of parameter name to shape; a pure function of the config."""
    G, B, E, d = cfg.n_genes, cfg.n_bins, cfg.dna_embed_dim, cfg.model_dim
    shapes: dict[str, tuple[int, ...]] = {
        "expr.gene_embed": (G, d),
        "expr.w": (1, d),
        "expr.ln_g": (d,), "expr.ln_b": (d,),
        "dna.w": (E, d), "dna.b": (d,),
        "dna.ln_g": (d,), "dna.ln_b": (d,),
    }
    for i in range(cfg.n_dna_layers):
        shapes.update(_block_shapes(f"dna{i}", d, cfg.ffn_dim))
    for i in range(cfg.n_rna_layers):
        shapes.update(_block_shapes(f"rna{i}", d, cfg.ffn_dim))
    shapes.update(_block_shapes("cross", d, cfg.ffn_dim, cross=True))
    for mod in ("rna", "dna"):
        shapes[f"vce.{mod}_ln_g"] = (d,)
        shapes[f"vce.{mod}_ln_b"] = (d,)
        shapes[f"vce.{mod}_query"] = (1, d)
        shapes.update(_attn_shapes(f"vce.{mod}_pool", d))
    shapes.update({"vce.fuse_w": (2 * d, d), "vce.fuse_b": (d,)})
    if cfg.head_layer_norm:
        shapes.update({"head.ln_g": (d,), "head.ln_b": (d,)})
    shapes.update({"head.w1": (d, cfg.task_hidden_dim), "head.b1": (cfg.task_hidden_dim,),
                   "head.w2": (cfg.task_hidden_dim, G), "head.b2": (G,)})
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    return int(sum(int(np.prod(s)) for s in param_shapes(cfg).values()))


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32, expr_reference=None) -> dict[str, Tensor]:
    """Seeded initial parameters.

    With ``expr_reference`` (a typical log1p(CPM) level per gene, e.g. the
    training mean), each gene's identity embedding starts offset by
    ``-expr_reference[g] * expr.w``. Tokens then begin centered on the
    reference, so layer norm does not wash out the small per-cell deviations
    around a large mean. The architecture is unchanged.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1A17]))
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):  # layer-norm gains
            arr = np.ones(shape)
        elif leaf.startswith("b") or leaf.endswith("_b"):
            arr = np.zeros(shape)
        elif leaf in ("gene_embed", "rna_query", "dna_query") or name == "expr.w":
            arr = rng.standard_normal(shape)
        else:
            fan_in = shape[0]
            arr = rng.standard_normal(shape) / np.sqrt(fan_in)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    if expr_reference is not None:
        ref = np.asarray(expr_reference, dtype=np.float64)
        if ref.shape != (cfg.n_genes,):
            raise ShapeError(f"expr_reference length {ref.shape} != ({cfg.n_genes},)")
        table = params["expr.gene_embed"]
        table.data = (table.data - ref[:, None] * params["expr.w"].data).astype(dtype)
    return params


def cast_params(params: Mapping[str, Tensor], dtype) -> dict[str, Tensor]:
    return {n: Tensor(p.data.astype(dtype), requires_grad=True, name=n) for n, p in params.items()}


def _sub(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    k = len(prefix) + 1
    return {n[k:]: p for n, p in params.items() if n.startswith(prefix + ".")}


# ---------------------------------------------------------------------------
# network pieces
# ---------------------------------------------------------------------------

def _ffn(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    h = gelu(add(matmul(x, p["ffn.w1"]), p["ffn.b1"]))
    return add(matmul(h, p["ffn.w2"]), p["ffn.b2"])


def encode_expression(expr: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Gene tokens: identity embedding plus projected expression, layer-normed.

    ``expr`` is ``[..., G]`` of log1p(CPM) values; returns ``[..., G, d]``.
    """
    table = params["expr.gene_embed"]
    if expr.shape[-1] != table.shape[0]:
        raise ShapeError(f"expression length {expr.shape[-1]} != n_genes {table.shape[0]}")
    col = reshape(expr, expr.shape + (1,))
    tokens = add(matmul(col, params["expr.w"]), table)
    return layer_norm(tokens, params["expr.ln_g"], params["expr.ln_b"], LN_EPS)


def project_dna(dna: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Affine projection ``[..., B, E] -> [..., B, d]`` followed by layer norm."""
    w = params["dna.w"]
    if dna.shape[-1] != w.shape[0]:
        raise ShapeError(f"DNA embedding dim {dna.shape[-1]} != configured {w.shape[0]}")
    h = add(matmul(dna, w), params["dna.b"])
    return layer_norm(h, params["dna.ln_g"], params["dna.ln_b"], LN_EPS)


def self_attention_block(x: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig,
                         training: bool = False, rng=None):
    """Pre-norm block: ``x + MHA(LN(x))`` then ``x + FFN(LN(x))``.

    ``params`` are the block's own parameters (prefix stripped).
    """
    h = layer_norm(x, params["ln1_g"], params["ln1_b"], LN_EPS)
    a, weights = multi_head_attention(h, h, h, _sub(params, "attn"), cfg.heads,
                                      cfg.dropout_p, training, rng)
    x = add(x, dropout(a, cfg.dropout_p, rng, training))
    h = layer_norm(x, params["ln2_g"], params["ln2_b"], LN_EPS)
    x = add(x, dropout(_ffn(h, params), cfg.dropout_p, rng, training))
    return x, weights


def cross_attention_block(rna: Tensor, dna: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig,
                          training: bool = False, rng=None):
    """RNA tokens query DNA tokens; returns updated RNA tokens and ``[..., H, G, B]`` weights."""
    if rna.shape[-1] != dna.shape[-1]:
        raise ConfigError(f"cross attention dims differ: rna {rna.shape}, dna {dna.shape}")
    q = layer_norm(rna, params["lnq_g"], params["lnq_b"], LN_EPS)
    kv = layer_norm(dna, params["lnkv_g"], params["lnkv_b"], LN_EPS)
    a, weights = multi_head_attention(q, kv, kv, _sub(params, "attn"), cfg.heads,
                                      cfg.dropout_p, training, rng)
    x = add(rna, dropout(a, cfg.dropout_p, rng, training))
    h = layer_norm(x, params["ln2_g"], params["ln2_b"], LN_EPS)
    x = add(x, dropout(_ffn(h, params), cfg.dropout_p, rng, training))
    return x, weights


def _pool(tokens: Tensor, params: Mapping[str, Tensor], mod: str, cfg: ModelConfig):
    h = layer_norm(tokens, params[f"vce.{mod}_ln_g"], params[f"vce.{mod}_ln_b"], LN_EPS)
    out, w = multi_head_attention(params[f"vce.{mod}_query"], h, h,
                                  _sub(params, f"vce.{mod}_pool"), cfg.vce_pool_heads)
    return reshape(out, out.shape[:-2] + (out.shape[-1],)), w


def virtual_cell_embed(rna: Tensor, dna: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig):
    """Attention-pool each modality to ``[d]``, concatenate, fuse with an MLP.

    Returns ``(vce [..., d], rna_pool_weights [..., P, G], dna_pool_weights [..., P, B])``.
    """
    r, wr = _pool(rna, params, "rna", cfg)
    s, ws = _pool(dna, params, "dna", cfg)
    fused = gelu(add(matmul(concat([r, s], axis=-1), params["vce.fuse_w"]), params["vce.fuse_b"]))
    return fused, _squeeze_query(wr), _squeeze_query(ws)


def _squeeze_query(w: Tensor) -> np.ndarray:
    # [..., P, 1, L] -> [..., P, L]
    return w.data.reshape(w.shape[:-2] + (w.shape[-1],))


def task_head(vce: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    h = vce
    if cfg.head_layer_norm:
        h = layer_norm(h, params["head.ln_g"], params["head.ln_b"], LN_EPS)
    h = gelu(add(matmul(h, params["head.w1"]), params["head.b1"]))
    return add(matmul(h, params["head.w2"]), params["head.b2"])


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

@dataclass
class AttentionBundle:
    """Attention maps of one forward pass (or a mean over several).

    Shapes: ``dna_self [layers, H, B, B]``, ``rna_self [H, G, G]`` (first RNA
    layer), ``cross [H, G, B]``, ``vce_rna [P, G]``, ``vce_dna [P, B]``.
    """

    dna_self: np.ndarray
    rna_self: np.ndarray
    cross: np.ndarray
    vce_rna: np.ndarray
    vce_dna: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {"dna_self": self.dna_self, "rna_self": self.rna_self, "cross": self.cross,
                "vce_rna": self.vce_rna, "vce_dna": self.vce_dna}

    def head_mean(self) -> tuple[np.ndarray, np.ndarray]:
        """Head-averaged ``rna_self [G, G]`` and ``cross [G, B]``."""
        return self.rna_self.mean(axis=0), self.cross.mean(axis=0)


def forward_batch(model: "CDTModel", dna: np.ndarray, expr, training: bool = False, rng=None):
    """Forward a batch: ``dna [N, B, E]``, ``expr [N, G]`` -> ``pred [N, G]``.

    ``expr`` may be a Tensor (for input gradients). Returns the prediction
    tensor and a dict of batched attention arrays.
    """
    cfg, p = model.config, model.params
    dtype = p["expr.gene_embed"].dtype
    dna_t = Tensor(np.asarray(dna, dtype=dtype))
    expr_t = expr if isinstance(expr, Tensor) else Tensor(np.asarray(expr, dtype=dtype))
    if dna_t.shape[-2:] != (cfg.n_bins, cfg.dna_embed_dim):
        raise ShapeError(f"DNA embedding shape {dna_t.shape[-2:]} != ({cfg.n_bins}, {cfg.dna_embed_dim})")

    d = project_dna(dna_t, p)
    dna_maps = []
    for i in range(cfg.n_dna_layers):
        d, w = self_attention_block(d, _sub(p, f"dna{i}"), cfg, training, rng)
        dna_maps.append(w.data)
    r = encode_expression(expr_t, p)
    rna_maps = []
    for i in range(cfg.n_rna_layers):
        r, w = self_attention_block(r, _sub(p, f"rna{i}"), cfg, training, rng)
        rna_maps.append(w.data)
    r, wc = cross_attention_block(r, d, _sub(p, "cross"), cfg, training, rng)
    vce, wr, wd = virtual_cell_embed(r, d, p, cfg)
    pred = task_head(vce, p, cfg)
    maps = {
        "dna_self": np.stack(dna_maps, axis=-4),
        "rna_self": rna_maps[0],
        "cross": wc.data,
        "vce_rna": wr,
        "vce_dna": wd,
    }
    return pred, maps


class CDTModel:
    """Config plus named parameter tensors."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None,
                 seed: int = 0, dtype=np.float32, expr_reference=None):
        self.config = config
        self.params = params if params is not None else init_params(config, seed, dtype, expr_reference)
        expected = param_shapes(config)
        if list(self.params) != list(expected):
            raise ConfigError("parameter names do not match the config")
        for n, s in expected.items():
            if self.params[n].shape != s:
                raise ShapeError(f"parameter {n}: shape {self.params[n].shape} != {s}")

    @property
    def dtype(self):
        return self.params["expr.gene_embed"].dtype

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def astype(self, dtype) -> "CDTModel":
        return CDTModel(self.config, cast_params(self.params, dtype))

    def copy(self) -> "CDTModel":
        return self.astype(self.dtype)


def forward_predict(sample, model: CDTModel, dna_lookup: Mapping[str, np.ndarray],
                    training: bool = False, rng=None):
    """Predict the log2FC vector of one cell and return every attention map."""
    try:
        dna = dna_lookup[sample.locus_id]
    except KeyError:
        raise LookupError(f"no DNA embedding for locus {sample.locus_id!r}") from None
    expr = np.asarray(sample.expr)
    if expr.shape != (model.config.n_genes,):
        raise ShapeError(f"expression length {expr.shape} != ({model.config.n_genes},)")
    pred, maps = forward_batch(model, dna[None], expr[None], training, rng)
    bundle = AttentionBundle(**{k: v[0] for k, v in maps.items()})
    return pred.data[0], bundle


def predict(model: CDTModel, dna_lookup, samples: Sequence, batch_size: int = 64) -> np.ndarray:
    """Eval-mode predictions ``[n, G]`` for many samples."""
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        dna = np.stack([dna_lookup[s.locus_id] for s in chunk])
        expr = np.stack([s.expr for s in chunk])
        pred, _ = forward_batch(model, dna, expr)
        out.append(pred.data)
    if not out:
        return np.zeros((0, model.config.n_genes))
    return np.concatenate(out, axis=0)


@dataclass
class AttentionSummary:
    """Cell-averaged attention; ``mean`` keeps heads, ``per_cell`` is optional."""

    mean: AttentionBundle
    n_cells: int
    per_cell: list = field(default_factory=list)

    @property
    def rna_self(self) -> np.ndarray:
        return self.mean.rna_self.mean(axis=0)

    @property
    def cross(self) -> np.ndarray:
        return self.mean.cross.mean(axis=0)


def extract_attention_maps(samples: Sequence, model: CDTModel, dna_lookup,
                           keep_per_cell: bool = False, batch_size: int = 32) -> AttentionSummary:
    """Eval-mode attention averaged over cells with a streaming mean."""
    if len(samples) == 0:
        raise ContractError("extract_attention_maps needs at least one sample")
    running: dict[str, np.ndarray] | None = None
    per_cell = []
    seen = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        dna = np.stack([dna_lookup[s.locus_id] for s in chunk])
        expr = np.stack([s.expr for s in chunk])
        _, maps = forward_batch(model, dna, expr)
        for i in range(len(chunk)):
            cell = {k: v[i].astype(np.float64) for k, v in maps.items()}
            seen += 1
            if running is None:
                running = {k: v.copy() for k, v in cell.items()}
            else:
                for k, v in cell.items():
                    running[k] += (v - running[k]) / seen
            if keep_per_cell:
                per_cell.append(AttentionBundle(**cell))
    return AttentionSummary(AttentionBundle(**running), seen, per_cell)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"CDTCKPT1"


def save_checkpoint(path, model: CDTModel, meta: Mapping | None = None) -> None:
    """Header JSON (config, names, meta) followed by one CDTT blob per parameter."""
    header = {
        "config": asdict(model.config),
        "params": list(model.params),
        "meta": dict(meta or {}),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<Q", len(hbytes)))
    buf.write(hbytes)
    for p in model.params.values():
        buf.write(blob.encode(p.data))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[CDTModel, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise blob.BlobFormatError(f"{path}: not a CDT checkpoint")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16:16 + hlen])
    stream = io.BytesIO(raw[16 + hlen:])
    params = {}
    for name in header["params"]:
        params[name] = Tensor(blob.read_stream(stream), requires_grad=True, name=name)
    if stream.read(1):
        raise blob.BlobFormatError(f"{path}: trailing bytes")
    cfg = ModelConfig.from_dict(header["config"])
    return CDTModel(cfg, params), header["meta"]
