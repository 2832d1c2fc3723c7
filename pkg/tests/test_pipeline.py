import json

import numpy as np
import pytest
import torch
from PIL import Image

from surfmap.dataset import GenConfig, generate_dataset, load_dataset, read_f32
from surfmap.metrics import evaluate_model
from surfmap.model import ModelOutput, build_model, load_checkpoint
from surfmap.pipeline import (
    ConfigError,
    NumericError,
    RunConfig,
    predict,
    predict_with,
    run_ablation_suite,
    sample_pair_batch,
    train,
)
from surfmap.pipeline.cli import main
from surfmap.pipeline.data import TensorDataset, average_depth_maps
from surfmap.pipeline.train import read_metrics
from surfmap.synthgen import render_depth


@pytest.fixture(scope="module")
def tiny_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(GenConfig(out_dir=str(root), n_instances=2, n_views=2, split=(0.5, 0.0, 0.5)))
    return root


@pytest.fixture(scope="module")
def small_tds(small_dataset):
    return TensorDataset(small_dataset)


def _cfg(root, out, **kw):
    base = dict(dataset=str(root), steps=3, batch_pairs=2, out_dir=str(out), checkpoint_every=10**6)
    base.update(kw)
    return RunConfig(**base)


# --- sampling ----------------------------------------------------------------------


def test_sampler_single_pair(tiny_dir):
    ds = load_dataset(tiny_dir, instances=[0])
    rows = sample_pair_batch(ds, 200, np.random.default_rng(0), max_azimuth_deg=180.0)
    pairs = {tuple(r[1:]) for r in rows}
    assert pairs == {(0, 1), (1, 0)}
    assert set(rows[:, 0]) == {0}
    with pytest.raises(ValueError):
        sample_pair_batch(ds, 1, np.random.default_rng(0))  # the two views are 180 degrees apart


def test_sampler_gap_one_at_15_degrees(small_dataset):
    rows = sample_pair_batch(small_dataset, 2000, np.random.default_rng(1), max_azimuth_deg=15.0)
    gaps = (rows[:, 2] - rows[:, 1]) % 24
    assert set(np.minimum(gaps, 24 - gaps)) == {1}


def test_sampler_default_window(small_dataset):
    rows = sample_pair_batch(small_dataset, 5000, np.random.default_rng(2))
    gaps = (rows[:, 2] - rows[:, 1]) % 24
    gaps = np.minimum(gaps, 24 - gaps)
    assert set(gaps) == {1, 2, 3} and np.all(rows[:, 1] != rows[:, 2])


def test_sampler_instance_frequencies(small_dataset):
    n = 10_000
    rows = sample_pair_batch(small_dataset, n, np.random.default_rng(3))
    counts = np.bincount(rows[:, 0], minlength=4)
    sigma = np.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts - n / 4) < 3 * sigma), counts


def test_sampler_deterministic(small_dataset):
    a = sample_pair_batch(small_dataset, 50, np.random.default_rng(9), [0, 1])
    b = sample_pair_batch(small_dataset, 50, np.random.default_rng(9), [0, 1])
    assert np.array_equal(a, b) and set(a[:, 0]) <= {0, 1}


def test_sampler_needs_two_views(tmp_path):
    generate_dataset(GenConfig(out_dir=str(tmp_path), n_instances=1, n_views=1, split=(1.0, 0.0, 0.0)))
    with pytest.raises(ValueError):
        sample_pair_batch(load_dataset(tmp_path), 1, np.random.default_rng(0))


def test_average_depth_maps(small_dataset):
    depth = average_depth_maps(small_dataset)
    assert depth.shape == (4, 24, 64, 64)
    cam = small_dataset.cameras[2][5]
    assert np.array_equal(depth[2, 5], render_depth(small_dataset.avg_posmap.grid, cam))


# --- config ---------------------------------------------------------------------


def test_config_defaults_and_errors(tmp_path):
    cfg = RunConfig()
    assert cfg.mode == "deformed" and cfg.multiview and cfg.steps == 2000 and cfg.lr == 1e-3
    assert cfg.max_azimuth_deg == 45.0 and cfg.lr_schedule == "cosine"
    with pytest.raises(ConfigError):
        RunConfig(lr_schedule="step")
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"mode": "deformed", "learning_rate": 1.0})
    with pytest.raises(ConfigError):
        RunConfig(mode="semi")
    with pytest.raises(ConfigError):
        RunConfig(weights={"warp": 1.0})
    with pytest.raises(ConfigError):
        RunConfig(model={"width": 3})
    with pytest.raises(ConfigError):
        RunConfig(data={"n_views": 0, "nope": 1})
    p = tmp_path / "c.json"
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        RunConfig.load(p)
    p.write_text(json.dumps({"steps": 7}))
    assert RunConfig.load(p).steps == 7


def test_mode_invariants_on_weights():
    assert RunConfig(multiview=False).loss_weights().uv == 0.0
    assert RunConfig(mode="fixed_mesh").loss_weights().deform == 0.0
    assert RunConfig(use_seg=False).loss_weights().seg == 0.0
    assert RunConfig(weights={"def": 0.5}).loss_weights().deform == 0.5
    assert RunConfig().hash() == RunConfig().hash() != RunConfig(seed=1).hash()


# --- training ---------------------------------------------------------------------


def test_fixed_mesh_freezes_residual(small_dataset, small_tds, tmp_path):
    cfg = _cfg(small_dataset.root, tmp_path, mode="fixed_mesh", steps=5)
    before = {k: v.clone() for k, v in build_model(cfg.seed).residual_head.state_dict().items()}
    res = train(cfg, tds=small_tds)
    after = res.model.residual_head.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)
    trunk_before = build_model(cfg.seed).encoder.state_dict()
    assert any(not torch.equal(v, res.model.encoder.state_dict()[k]) for k, v in trunk_before.items())


def test_residual_warmup_holds_then_releases_residual(small_dataset, small_tds, tmp_path):
    init = build_model(0).residual_head.state_dict()
    held = train(_cfg(small_dataset.root, tmp_path / "h", steps=3, residual_warmup=3), tds=small_tds)
    assert all(torch.equal(init[k], v) for k, v in held.model.residual_head.state_dict().items())
    assert all(r["def"] == 0.0 for r in read_metrics(held.metrics_log))
    freed = train(_cfg(small_dataset.root, tmp_path / "f", steps=3, residual_warmup=1), tds=small_tds)
    assert any(not torch.equal(init[k], v) for k, v in freed.model.residual_head.state_dict().items())
    with pytest.raises(ConfigError):
        RunConfig(residual_warmup=-1)


def test_single_view_logs_zero_uv(small_dataset, small_tds, tmp_path):
    res = train(_cfg(small_dataset.root, tmp_path, multiview=False, steps=4), tds=small_tds)
    log = read_metrics(res.metrics_log)
    assert len(log) == 4 and all(r["uv"] == 0.0 for r in log)
    assert [r["step"] for r in log] == [1, 2, 3, 4]


def test_lr_schedule_changes_updates_after_first_step(small_dataset, small_tds, tmp_path):
    cos = read_metrics(train(_cfg(small_dataset.root, tmp_path / "c", steps=3), tds=small_tds).metrics_log)
    const = read_metrics(train(_cfg(small_dataset.root, tmp_path / "k", steps=3, lr_schedule="constant"),
                               tds=small_tds).metrics_log)
    # both start at the base rate, so only the first loss agrees
    assert cos[0] == const[0]
    assert cos[2]["total"] != const[2]["total"]


def test_supervised_mode_uses_labels(small_dataset, small_tds, tmp_path):
    res = train(_cfg(small_dataset.root, tmp_path, mode="supervised", steps=3), tds=small_tds)
    log = read_metrics(res.metrics_log)
    assert all(r["repr"] == 0.0 and r["vis"] == 0.0 and r["uv"] == 0.0 for r in log)
    assert all(r["sup_uv"] > 0 and r["sup_posmap"] > 0 for r in log)


def test_loss_decreases_in_50_steps(small_dataset, small_tds, tmp_path):
    first, last = [], []
    for seed in range(3):
        res = train(_cfg(small_dataset.root, tmp_path / str(seed), steps=50, seed=seed, batch_pairs=4), tds=small_tds)
        log = read_metrics(res.metrics_log)
        first.append(log[0]["total"])
        last.append(log[-1]["total"])
    assert np.median(last) < np.median(first), (first, last)


def test_training_is_deterministic(small_dataset, small_tds, tmp_path):
    a = train(_cfg(small_dataset.root, tmp_path / "a", steps=4), tds=small_tds)
    b = train(_cfg(small_dataset.root, tmp_path / "b", steps=4), tds=small_tds)
    assert a.metrics_log.read_bytes() == b.metrics_log.read_bytes()
    ra = evaluate_model(a.model, small_dataset, "val")
    model, state, _ = load_checkpoint(a.checkpoint)
    assert state["step"] == 4 and state["config_hash"] == _cfg(small_dataset.root, tmp_path / "a", steps=4).hash()
    rb = evaluate_model(model, small_dataset, "val")
    assert ra.to_json() == rb.to_json()


def test_periodic_checkpoints(small_dataset, small_tds, tmp_path):
    train(_cfg(small_dataset.root, tmp_path, steps=4, checkpoint_every=2), tds=small_tds)
    names = sorted(p.name for p in tmp_path.glob("checkpoint_*.zip"))
    assert names == ["checkpoint_000002.zip", "checkpoint_final.zip"]
    assert json.loads((tmp_path / "config.json").read_text())["steps"] == 4


def test_nonfinite_loss_dumps_batch(tiny_dir, tmp_path):
    with pytest.raises(NumericError) as info:
        train(_cfg(tiny_dir, tmp_path, steps=5, lr=1e30, max_azimuth_deg=180.0))
    dump = json.loads(info.value.dump.read_text())
    assert len(dump["rows"]) == 2 and "repr" in dump["terms"]


# --- prediction -------------------------------------------------------------------------


class OracleHeads(torch.nn.Module):
    """Returns ground-truth UV, mask and residual for one known image."""

    def __init__(self, ds, inst, view):
        super().__init__()
        self.uv = torch.from_numpy(ds.uvs[inst, view])
        self.logits = torch.from_numpy(np.where(ds.masks[inst, view], 10.0, -10.0)[..., None].astype(np.float32))
        self.res = torch.from_numpy(ds.gt_posmaps[inst] - ds.avg_posmap.grid)

    def forward(self, x):
        return ModelOutput(self.uv, self.logits, self.res)


def test_predict_with_oracle_heads(small_dataset):
    ds = small_dataset
    pred = predict_with(OracleHeads(ds, 1, 4), ds.avg_posmap, ds.images[1, 4])
    np.testing.assert_allclose(pred.posmap.grid, ds.gt_posmaps[1], atol=1e-6)
    assert np.array_equal(pred.mask, ds.masks[1, 4])


def test_predict_checkpoint(small_dataset, small_tds, tmp_path):
    res = train(_cfg(small_dataset.root, tmp_path, steps=2), tds=small_tds)
    image = small_dataset.images[0, 3]
    a, b = predict(res.checkpoint, image), predict(res.checkpoint, image)
    for x, y in zip(a.output, b.output):
        assert torch.equal(x, y)
    assert a.output.uv.shape == (64, 64, 2) and a.mask.shape == (64, 64)
    assert np.abs(a.posmap.grid).max() <= 0.5
    with pytest.raises(ValueError):
        predict(res.checkpoint, np.zeros((32, 32, 3), np.uint8))


# --- ablation ----------------------------------------------------------------------------


def test_small_ablation_suite(small_dataset, tmp_path):
    base = _cfg(small_dataset.root, tmp_path, steps=2, ablation_seeds=[0], eval_split="val")
    result = run_ablation_suite(base, ds=small_dataset)
    assert len(result.reports) == 5
    ckpts = sorted(tmp_path.glob("*/seed_0/checkpoint_final.zip"))
    reports = sorted(tmp_path.glob("*/seed_0/report.json"))
    assert len(ckpts) == 5 and len(reports) == 5
    assert [result.table] == list(tmp_path.glob("*.md"))
    table = result.table.read_text()
    for cell, rep in result.reports.items():
        on_disk = json.loads((tmp_path / cell / "seed_0" / "report.json").read_text())["report"]
        assert on_disk["uv_pck"]["0.03"] == rep.uv_pck[0.03]
        row = f"{rep.uv_pck[0.01]:.1f} | {rep.uv_pck[0.03]:.1f} | {rep.uv_pck[0.1]:.1f} | {rep.uv_auc:.1f}"
        assert row in table
    with pytest.raises(ValueError):
        run_ablation_suite(base, cells=["bogus"], ds=small_dataset)
    # resuming reuses the finished checkpoints and reproduces the reports
    before = {c: p.stat().st_mtime_ns for c, (p,) in result.checkpoints.items()}
    again = run_ablation_suite(base, ds=small_dataset, resume=True)
    assert {c: p.stat().st_mtime_ns for c, (p,) in again.checkpoints.items()} == before
    assert {c: r.to_json() for c, r in again.reports.items()} == {c: r.to_json() for c, r in result.reports.items()}


# --- CLI -----------------------------------------------------------------------------------


def test_cli_end_to_end(tmp_path):
    data = tmp_path / "data"
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "dataset": str(data), "steps": 2, "batch_pairs": 1, "out_dir": str(tmp_path / "run"),
        "max_azimuth_deg": 90.0, "data": {"n_instances": 2, "n_views": 4, "split": [0.5, 0.0, 0.5]},
    }))
    assert main(["gen-data", "--config", str(cfg_path)]) == 0
    assert (data / "meta.json").exists()
    assert main(["train", "--config", str(cfg_path), "--steps", "1"]) == 0
    ckpt = tmp_path / "run" / "checkpoint_final.zip"
    assert load_checkpoint(ckpt)[1]["step"] == 1
    assert main(["eval", "--checkpoint", str(ckpt), "--split", "test"]) == 0
    assert (tmp_path / "run" / "eval_test" / "report.json").exists()
    img = tmp_path / "img.png"
    Image.fromarray(load_dataset(data).images[0, 0]).save(img)
    out = tmp_path / "pred"
    assert main(["predict", "--checkpoint", str(ckpt), "--image", str(img), "--out", str(out)]) == 0
    uv, _ = read_f32(out / "uv.f32")
    assert uv.shape == (64, 64, 2) and (out / "mask.png").exists() and (out / "overlay.png").exists()
    assert main(["overlays", "--checkpoint", str(ckpt), "--n", "2"]) == 0
    assert len(list((tmp_path / "run" / "qualitative").glob("*.png"))) == 4


def test_cli_exit_codes(tmp_path, tiny_dir):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"unknown_field": 1}))
    assert main(["train", "--config", str(bad)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    missing = tmp_path / "m.json"
    missing.write_text(json.dumps({"dataset": str(tmp_path / "nowhere"), "steps": 1, "out_dir": str(tmp_path / "o")}))
    assert main(["train", "--config", str(missing)]) == 3
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.zip")]) == 3
    nan = tmp_path / "nan.json"
    nan.write_text(json.dumps({"dataset": str(tiny_dir), "steps": 5, "lr": 1e30, "batch_pairs": 2,
                               "max_azimuth_deg": 180.0, "out_dir": str(tmp_path / "nan")}))
    assert main(["train", "--config", str(nan)]) == 4
    with pytest.raises(SystemExit):
        main(["frobnicate"])
