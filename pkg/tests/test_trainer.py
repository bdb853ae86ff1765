import json
import math

import numpy as np
import pytest

from cdt.model import CDTModel, ModelConfig
from cdt.tensor import ConfigError, ShapeError, Tensor
from cdt.trainer import (
    AdamState,
    NonFiniteGradientError,
    PlateauState,
    TrainConfig,
    adamw_step,
    clip_grad_norm,
    evaluate_predictions,
    mse_loss,
    plateau_scheduler_step,
    train_loop,
)
from cdt.world import CellSample, LeakageError

TOY = ModelConfig(n_genes=6, n_bins=5, dna_embed_dim=7, model_dim=8, heads=2, ffn_dim=12,
                  dropout_p=0.0, vce_pool_heads=2, task_hidden_dim=9)


def toy_data(n=10, seed=0, genes=("A", "B")):
    rng = np.random.default_rng(seed)
    lookup = {f"TSS_{g}": rng.standard_normal((TOY.n_bins, TOY.dna_embed_dim)).astype(np.float32) for g in genes}
    cells = []
    for i in range(n):
        g = genes[i % len(genes)]
        cells.append(CellSample(f"c{i}", f"TSS_{g}",
                                np.abs(rng.standard_normal(TOY.n_genes)).astype(np.float32) * 5,
                                rng.standard_normal(TOY.n_genes).astype(np.float32) * 0.5, g))
    return cells, lookup


def test_mse_loss():
    rng = np.random.default_rng(0)
    p, t = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    ref = sum((p[i, j] - t[i, j]) ** 2 for i in range(3) for j in range(4)) / 12
    assert math.isclose(float(mse_loss(Tensor(p), t).data), ref, rel_tol=1e-12)
    assert float(mse_loss(Tensor(p), p).data) == 0.0
    with pytest.raises(ShapeError):
        mse_loss(Tensor(p), t[:, :2])


def test_adamw_hand_step():
    cfg = TrainConfig(lr=0.1, weight_decay=0.01)
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    g = {"w": np.array([0.5, -0.25])}
    adamw_step(p, g, AdamState(), cfg)
    # first step: bias-corrected m/sqrt(v) = sign(g)
    expect = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * np.sign(g["w"]) * (
        np.abs(g["w"]) / (np.abs(g["w"]) + 1e-8))
    np.testing.assert_allclose(p["w"].data, expect, rtol=1e-12)


def test_adamw_zero_grad_only_decays():
    cfg = TrainConfig(lr=0.1, weight_decay=0.5)
    p = {"w": Tensor(np.array([2.0, -4.0]))}
    st = AdamState()
    for _ in range(3):
        adamw_step(p, {"w": np.zeros(2)}, st, cfg)
    np.testing.assert_allclose(p["w"].data, np.array([2.0, -4.0]) * 0.95 ** 3, rtol=1e-12)
    with pytest.raises(NonFiniteGradientError):
        adamw_step(p, {"w": np.array([np.nan, 0.0])}, st, cfg)


def test_plateau_scheduler():
    st = PlateauState(lr=1e-3, patience=10)
    plateau_scheduler_step(st, 1.0)
    lrs = [plateau_scheduler_step(st, 1.0) for _ in range(10)]
    assert lrs[:9] == [1e-3] * 9 and lrs[9] == 5e-4
    assert plateau_scheduler_step(st, 0.5) == 5e-4 and st.bad_epochs == 0


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_grad_norm(g, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(np.concatenate(list(clipped.values())), [0.6, 0.8])
    same, norm = clip_grad_norm({"a": np.array([0.3])}, 1.0)
    assert norm == pytest.approx(0.3) and same["a"][0] == 0.3
    zero, norm = clip_grad_norm({"a": np.zeros(3)}, 1.0)
    assert norm == 0.0 and not zero["a"].any()


def test_train_config_validation():
    for kw in (dict(lr=0), dict(betas=(1.0, 0.9)), dict(plateau_factor=1.5), dict(max_epochs=-1)):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


def test_zero_epochs(tmp_path):
    cells, lookup = toy_data()
    m = CDTModel(TOY, seed=0)
    res = train_loop(m, cells[:6], [], lookup, TrainConfig(max_epochs=0), tmp_path)
    assert res.history == [] and res.best_epoch == 0
    assert (tmp_path / "best.ckpt").exists()
    assert (tmp_path / "metrics.jsonl").read_text() == ""
    for n in m.params:
        assert res.model.params[n].data.tobytes() == m.params[n].data.tobytes()


def test_overfits_ten_cells_and_logs(tmp_path):
    cells, lookup = toy_data(10, genes=("A", "B", "C", "D", "E"))
    train = cells[:8]
    cfg = TrainConfig(lr=3e-3, batch_size=4, max_epochs=150, early_stop_patience=None)
    res = train_loop(CDTModel(TOY, seed=0), train, [], lookup, cfg, tmp_path)
    assert res.history[-1]["train_loss"] < 0.1 * res.history[0]["train_loss"]
    rows = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert len(rows) == 150
    assert set(rows[0]) == {"epoch", "lr", "train_loss", "train_r", "val_loss", "val_r"}
    again = train_loop(CDTModel(TOY, seed=0), train, [], lookup, cfg)
    assert again.history == res.history


def test_leakage_rejected():
    cells, lookup = toy_data(6)
    with pytest.raises(LeakageError):
        train_loop(CDTModel(TOY, seed=0), cells[:4], cells[4:], lookup, TrainConfig(max_epochs=1))


def test_evaluate_predictions():
    cells, _ = toy_data(8)
    target = np.stack([c.target for c in cells]).astype(np.float64)
    r = evaluate_predictions(target, cells)
    assert r.cell_level_pearson == 1.0 and r.mean_pseudobulk_r == 1.0
    assert evaluate_predictions(-target, cells).cell_level_pearson == -1.0
    rng = np.random.default_rng(1)
    pred = rng.standard_normal(target.shape)
    r = evaluate_predictions(pred, cells, train_r=0.9)
    # loop oracle for pseudobulk r
    for g in ("A", "B"):
        idx = [i for i, c in enumerate(cells) if c.perturbed_gene == g]
        a, b = pred[idx].mean(0), target[idx].mean(0)
        assert math.isclose(r.per_gene_pseudobulk_pearson[g], np.corrcoef(a, b)[0, 1], rel_tol=1e-9)
    assert math.isclose(r.train_val_gap, 0.9 - r.cell_level_pearson)
    const = np.ones_like(target)
    assert evaluate_predictions(const, cells).cell_level_pearson is None
