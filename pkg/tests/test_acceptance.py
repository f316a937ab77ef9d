"""Acceptance checks, one group per numbered criterion.

Criteria 6, 7, 8 and 10 share two full training runs of the default
configuration (stage 1 then stage 2, through the CLI). Everything is
single-threaded so the two runs can be compared byte for byte.
"""

import math
import os
import time

import numpy as np
import pytest

from gradcheck import check
from oracles import pearson_direct, psnr_direct, ssim_direct
from test_denoiser import _net_fn, small
from test_tensor import OPS
from test_trainer import PANEL as SMALL_PANEL
from test_trainer import S as SCHEDULE
from test_trainer import _single_step_pixels, batch_draw, net, single_marker_loss
from stainforge import tensor as tf
from stainforge.checkpoint import load_checkpoint, save_checkpoint
from stainforge.cli import bench, main
from stainforge.codec import identity_codec
from stainforge.config import ExperimentConfig
from stainforge.data import (FilterRules, PatchRecord, filter_by_coverage, filter_empty_by_ssim, generate_synthetic,
                             quantize)
from stainforge.denoiser import adapt_input_channels, forward
from stainforge.metrics import evaluate, pearson_r, psnr, psnr_from_mse, ssim
from stainforge.sampler import SamplerConfig, ddim_sample, ensemble_sample, predict
from stainforge.schedule import forward_diffuse, make_schedule, recover_eps, recover_z0, v_target
from stainforge.trainer import TrainLog, prepare_latents, stage1_loss, stage2_loss

crit = pytest.mark.criterion


# ---------------------------------------------------------------------------
# 1. scheduler algebra
# ---------------------------------------------------------------------------


@crit(1)
def test_scheduler_round_trip_32bit():
    tic = time.perf_counter()
    s = make_schedule()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        t = int(rng.integers(1, s.T + 1))
        z0 = rng.standard_normal((3, 8, 8)).astype(np.float32)
        eps = rng.standard_normal((3, 8, 8)).astype(np.float32)
        z_t = forward_diffuse(z0, t, eps, s)
        v = v_target(z0, eps, t, s)
        assert z_t.dtype == v.dtype == np.float32
        for got, want in ((recover_z0(z_t, v, t, s), z0), (recover_eps(z_t, v, t, s), eps)):
            worst = max(worst, float(np.linalg.norm(got - want) / np.linalg.norm(want)))
    elapsed = time.perf_counter() - tic
    print(f"scheduler: worst relative error {worst:.2e} in {elapsed:.2f}s")
    assert worst < 1e-6 and elapsed < 5


# ---------------------------------------------------------------------------
# 2. gradient fidelity
# ---------------------------------------------------------------------------


def _split_by_gradient():
    """Parameter names with a nonzero float64 gradient, and those whose gradient vanishes by construction.

    With width 8 and 8 groups every norm sees one channel, so a per-channel
    shift feeding a norm has an exactly zero gradient.
    """
    p = small(dtype=np.float64)
    rng = np.random.default_rng(5)
    x, z = rng.standard_normal((2, 2, 3, 8, 8))
    with tf.precision(np.float64):
        p.requires_grad_(True)
        out = forward(p, x, z, np.array([17, 900]), [1, 2])
        tf.backward(tf.reduce("sum", out * tf.Tensor(rng.standard_normal(out.shape))))
    live = [n for n, t in p.tensors.items() if np.abs(t.grad).max() > 1e-10]
    dead = [n for n in p.tensors if n not in live]
    return live, dead


@crit(2)
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-6)], ids=["32bit", "64bit"])
def test_every_op_and_the_miniature_network(dtype, tol):
    tic = time.perf_counter()
    errors = {name: check(fn, inputs, dtype, h=1e-6) for name, fn, inputs in OPS}
    p = small(dtype=dtype)
    live, dead = _split_by_gradient()
    rng = np.random.default_rng(5)
    x, z = rng.standard_normal((2, 2, 3, 8, 8))
    t, markers = np.array([17, 900]), [1, 2]
    inputs = [x, z] + [p[n].data.copy() for n in live]
    errors["denoiser"] = check(_net_fn(p, live, t, markers), inputs, dtype, h=1e-6, max_coords=6)
    # floor=1 turns the measure into an absolute difference; both sides must be ~0
    p = small(dtype=dtype)
    dead_err = check(_net_fn(p, dead, t, markers), [x, z] + [p[n].data.copy() for n in dead], dtype, max_coords=6, floor=1.0)
    assert dead_err < tol
    worst = max(errors, key=errors.get)
    print(f"gradcheck {np.dtype(dtype).name}: worst {worst} {errors[worst]:.2e}")
    assert all(e < tol for e in errors.values()), {k: v for k, v in errors.items() if v >= tol}
    assert time.perf_counter() - tic < 120


# ---------------------------------------------------------------------------
# 3. input-channel adaptation
# ---------------------------------------------------------------------------


@crit(3)
def test_duplicated_input_matches_original_first_layer():
    tic = time.perf_counter()
    rng = np.random.default_rng(0)
    w = rng.standard_normal((16, 3, 3, 3)) * 0.2
    b = rng.standard_normal(16)
    wide = adapt_input_channels(w)
    assert wide.shape == (16, 6, 3, 3)
    worst = 0.0
    with tf.precision(np.float64):
        for _ in range(100):
            u = rng.standard_normal((1, 3, 8, 8))
            base = tf.conv2d(tf.Tensor(u), tf.Tensor(w), tf.Tensor(b)).data
            dup = tf.conv2d(tf.Tensor(np.concatenate([u, u], axis=1)), tf.Tensor(wide), tf.Tensor(b)).data
            worst = max(worst, float(np.abs(dup - base).max()))
    assert worst < 1e-6 and time.perf_counter() - tic < 5


# ---------------------------------------------------------------------------
# 4. metric oracles
# ---------------------------------------------------------------------------


@crit(4)
def test_metrics_match_direct_formulas():
    tic = time.perf_counter()
    rng = np.random.default_rng(42)
    for _ in range(50):
        a = rng.random((32, 32))
        b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.5), a.shape), 0, 1)
        assert abs(ssim(a, b) - ssim_direct(a, b)) < 1e-6
        assert abs(pearson_r(a, b) - pearson_direct(a, b)) < 1e-6
        assert abs(psnr(a, b) - psnr_direct(a, b)) < 1e-6
    assert time.perf_counter() - tic < 30


@crit(4)
def test_metric_conventions():
    assert pearson_r(np.random.default_rng(0).random((8, 8)), np.full((8, 8), 0.4)) == 0.0
    assert psnr_from_mse(0.01, 1.0) == 20.0


# ---------------------------------------------------------------------------
# 5. loss decomposition
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_data():
    from test_trainer import SPEC

    return prepare_latents(generate_synthetic(SPEC, 4), identity_codec(), SMALL_PANEL)


@crit(5)
def test_stage1_loss_is_mean_of_independent_marker_losses(small_data):
    tic = time.perf_counter()
    p = net(seed=3)
    for seed in range(3):
        x, z0, t, eps = batch_draw(small_data, B=2, seed=seed)
        with tf.no_grad():
            loss, _ = stage1_loss(p, {"x": x, "z0": z0}, t, eps, SMALL_PANEL, SCHEDULE)
        alone = [single_marker_loss(p, x, z0[:, m], t[:, m], eps[:, m], m) for m in range(SMALL_PANEL.M)]
        assert abs(loss.item() - float(np.mean(alone))) < 1e-6
    assert time.perf_counter() - tic < 10


@crit(5)
@pytest.mark.parametrize("lam", [0.0, 1.0])
def test_stage2_loss_endpoints(small_data, lam):
    p = net(seed=4)
    x, pix = small_data.x[:2], small_data.pixels[:2]
    with tf.no_grad():
        loss, _ = stage2_loss(p, identity_codec(), {"x": x, "pixels": pix}, lam, SMALL_PANEL, schedule=SCHEDULE)
    pred = _single_step_pixels(p, np.repeat(x, SMALL_PANEL.M, 0), np.tile(np.arange(SMALL_PANEL.M), 2))
    err = pred - pix.reshape(pred.shape)
    oracle = float(np.mean(np.abs(err))) if lam == 0.0 else float(np.mean(err**2))
    assert abs(loss.item() - oracle) < 1e-6


# ---------------------------------------------------------------------------
# 9. curation rules
# ---------------------------------------------------------------------------


def _disc(img, cy, cx, r, value):
    yy, xx = np.mgrid[: img.shape[-2], : img.shape[-1]]
    img[0][(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = value


def _curation_fixture():
    """Patches with a hand-assigned label: True means the marker shows signal."""
    rng = np.random.default_rng(9)
    cases = []
    cases.append((np.zeros((1, 48, 48)), False))
    cases.append((np.full((1, 48, 48), 1 / 255), False))
    faint = np.zeros((1, 48, 48))
    faint[0, rng.integers(0, 48, 4), rng.integers(0, 48, 4)] = 2 / 255
    cases.append((faint, False))
    edge = np.zeros((1, 48, 48))
    edge[0, :, :2] = 0.01
    cases.append((edge, False))
    for k in range(8):
        img = np.zeros((1, 48, 48))
        for _ in range(4 + k):
            _disc(img, *rng.integers(4, 44, 2), rng.integers(3, 6), rng.uniform(0.3, 0.9))
        cases.append((img, True))
    dense = np.clip(rng.normal(0.5, 0.2, (1, 48, 48)), 0, 1)
    cases.append((dense, True))
    return cases


@crit(9)
def test_empty_patch_filter_agrees_with_hand_labels():
    tic = time.perf_counter()
    cases = _curation_fixture()
    recs = [PatchRecord(f"c{i}", np.zeros((3, 48, 48)), {"CD3": img}) for i, (img, _) in enumerate(cases)]
    kept, n_out = filter_empty_by_ssim(recs, "CD3", 0.8)
    expected = [r.id for r, (_, signal) in zip(recs, cases) if signal]
    assert [r.id for r in kept] == expected
    assert n_out == sum(not s for _, s in cases)
    assert time.perf_counter() - tic < 30


@crit(9)
def test_coverage_filter_matches_mask_fraction_oracle():
    rng = np.random.default_rng(1)
    recs = []
    for i in range(200):
        mask = (rng.random((1, 24, 24)) < rng.uniform(0, 0.6)).astype(np.float32)
        recs.append(PatchRecord(f"m{i}", np.zeros((3, 24, 24)), {}, mask))
    kept = filter_by_coverage(recs, FilterRules(min_cell_coverage=0.25))
    oracle = [r.id for r in recs if sum(1 for v in r.mask.ravel() if v > 0) / r.mask.size >= 0.25]
    assert [r.id for r in kept] == oracle


# ---------------------------------------------------------------------------
# 6, 7, 8, 10. desk-scale training runs
# ---------------------------------------------------------------------------


def _train_default(out):
    tic = time.perf_counter()
    for stage in (1, 2):
        assert main(["train", "--stage", str(stage), "--out", str(out)]) == 0
    return time.perf_counter() - tic


@pytest.fixture(scope="session")
def single_thread():
    old = os.environ.get("STAINFORGE_THREADS")
    os.environ["STAINFORGE_THREADS"] = "1"
    yield
    if old is None:
        os.environ.pop("STAINFORGE_THREADS")
    else:
        os.environ["STAINFORGE_THREADS"] = old


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory, single_thread):
    out = tmp_path_factory.mktemp("desk_a")
    seconds = _train_default(out)
    print(f"\ndesk run: {seconds / 60:.1f} min")
    return out, seconds


@pytest.fixture(scope="session")
def desk_twin(tmp_path_factory, single_thread, desk_run):
    out = tmp_path_factory.mktemp("desk_b")
    _train_default(out)
    return out


@pytest.fixture(scope="session")
def test_split():
    cfg = ExperimentConfig()
    s = cfg.dataset.synth
    return generate_synthetic(cfg.synth_spec(), s.n_test, s.n_train, "test")


def _single_step(ckpt_path, records):
    ck = load_checkpoint(ckpt_path)
    pred = predict(ck.params, ck.codec, np.stack([r.source for r in records]), ck.panel)
    # scored as written by `infer`: 8-bit images
    return quantize(pred), ck.panel


def _report(pred, records, panel):
    P = {r.id: {m: pred[i, j] for j, m in enumerate(panel.names)} for i, r in enumerate(records)}
    G = {r.id: r.markers for r in records}
    return evaluate(P, G, panel.names)


@pytest.fixture(scope="session")
def scores(desk_run, test_split):
    out, _ = desk_run
    pred1, panel = _single_step(out / "stage1.ckpt", test_split)
    pred2, _ = _single_step(out / "stage2.ckpt", test_split)
    rep1, rep2 = _report(pred1, test_split, panel), _report(pred2, test_split, panel)
    for tag, rep in (("stage 1", rep1), ("stage 2", rep2)):
        print(f"\n{tag} single-step:\n{rep.to_text()}")
    return rep1, rep2, pred2, panel


@crit(6)
def test_desk_run_fits_the_time_budget(desk_run):
    _, seconds = desk_run
    assert seconds < 40 * 60


@crit(6)
def test_stage1_loss_decreases(desk_run):
    losses = TrainLog.read(desk_run[0] / "stage1.log.jsonl")
    L = np.array([r["loss"] for r in losses])
    k = max(1, len(L) // 10)
    assert L[-k:].mean() < L[:k].mean()


@crit(6)
def test_per_marker_single_step_quality(scores):
    _, rep2, _, panel = scores
    assert set(rep2.markers) == set(panel.names)
    for m, s in rep2.markers.items():
        assert s.ssim >= 0.70, f"{m}: SSIM {s.ssim:.3f}"
        assert s.r >= 0.5, f"{m}: R {s.r:.3f}"


@crit(6)
def test_fine_tuning_improves_single_step_ssim(scores):
    rep1, rep2, _, _ = scores
    assert rep2.averages["ssim"] > rep1.averages["ssim"]


@crit(7)
def test_marker_discrimination(scores, test_split):
    _, _, pred, panel = scores
    names = panel.names
    hits = total = 0
    for i, r in enumerate(test_split):
        for j, m in enumerate(names):
            # an all-background truth ties with every other all-background channel, so it is not scored
            if not filter_empty_by_ssim([r], m, 0.8)[0]:
                continue
            s = [ssim(pred[i, j, 0], r.markers[mm][0]) for mm in names]
            hits += all(s[j] > s[k] for k in range(len(names)) if k != j)
            total += 1
    print(f"\ndiscrimination: {hits}/{total} = {hits / total:.3f}")
    assert total > 0 and hits / total >= 0.90


@crit(8)
def test_single_step_is_much_faster_than_ddim_ensembles(desk_run, test_split):
    ck = load_checkpoint(desk_run[0] / "stage2.ckpt")
    sources = np.stack([r.source for r in test_split[:2]])
    rows = bench(ck.params, ck.codec, sources, ck.panel, ddim_steps=50, ensemble=10)
    print(f"\nbench: single-step {rows['single_step']['sec_per_sample']:.4f}s, "
          f"DDIM-50 x 10 {rows['ddim']['sec_per_sample']:.3f}s, ratio {rows['ratio']:.0f}x")
    assert rows["ratio"] >= 40


@crit(8)
def test_ensemble_of_one_equals_single_ddim_sample(desk_run, test_split):
    ck = load_checkpoint(desk_run[0] / "stage1.ckpt")
    cfg = SamplerConfig(ddim_steps=10, ensemble=1, seed=7)
    src = test_split[0].source
    a = ensemble_sample(ck.params, ck.codec, src, 1, cfg)
    b = ddim_sample(ck.params, ck.codec, src, 1, cfg)
    assert a.tobytes() == b.tobytes()


@crit(10)
def test_identical_seeded_runs_give_identical_checkpoints(desk_run, desk_twin):
    for name in ("stage1.ckpt", "stage2.ckpt"):
        assert (desk_run[0] / name).read_bytes() == (desk_twin / name).read_bytes(), name


@crit(10)
def test_save_load_reproduces_single_step_outputs(desk_run, desk_twin, test_split, tmp_path):
    path = desk_run[0] / "stage2.ckpt"
    before, _ = _single_step(path, test_split[:8])
    ck = load_checkpoint(path)
    copy = save_checkpoint(tmp_path / "copy.ckpt", ck.params, ck.stage, ck.optimizer, ck.codec)
    after, _ = _single_step(copy, test_split[:8])
    twin, _ = _single_step(desk_twin / "stage2.ckpt", test_split[:8])
    assert before.tobytes() == after.tobytes() == twin.tobytes()
    assert math.isfinite(float(before.sum()))
