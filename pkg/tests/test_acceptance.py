"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s``. The desk-scale training
criteria (6, 7, 10) drive the real CLI end to end and dominate the runtime
(two 5000-step trainings, roughly 15-20 minutes on a 2-core CPU).
"""

import csv
import json
import time

import numpy as np
import pytest
import torch

from detprior import adapter
from detprior.bridge import (
    Parameterization,
    forward_blend,
    recover_x,
    recover_y,
    sample,
    v_target,
)
from detprior.cli import main as cli_main
from detprior.denoiser import make_toy_unet
from detprior.metrics import depth_metrics, mse, normal_metrics, seg_metrics
from detprior.schedule import inference_timesteps, make_schedule
from detprior.taskio import (
    decode_normals,
    default_palette,
    encode_normals,
    normalize_depth,
    seg_decode,
    seg_encode,
    synth_scene,
)
from detprior.training import TrainConfig, fit, loss, make_train_state

from test_metrics import (
    naive_depth_metrics,
    naive_mse,
    naive_normal_metrics,
    naive_seg_metrics,
    unit_field,
)


def _report(criterion: int, ok: bool, detail: str) -> None:
    print(f"\n[criterion {criterion:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def run_cli(*args) -> int:
    return cli_main([str(a) for a in args])


@pytest.fixture(scope="module")
def schedule_1000():
    return make_schedule("cosine", 1000)


# -- criterion 1: oracle-reverse exactness ------------------------------------


def test_criterion_01_oracle_reverse_exactness(schedule_1000):
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (100, 3, 32, 32)).astype(np.float32)
    y = rng.uniform(-1, 1, (100, 3, 32, 32)).astype(np.float32)

    def oracle(state, t):
        return v_target(x, y, t, schedule_1000)

    t0 = time.time()
    worst = 0.0
    for K in (1, 3, 5, 10, 1000):
        plan = inference_timesteps(schedule_1000, K)
        got = sample(x, oracle, Parameterization.PREDICT_V, plan, schedule_1000)
        worst = max(worst, float(np.abs(got - y).max()))
    elapsed = time.time() - t0
    _report(
        1,
        worst <= 1e-4 and elapsed < 60,
        f"max-abs error {worst:.2e} (<= 1e-4) over K in {{1,3,5,10,1000}}, "
        f"100 pairs at 32x32x3, {elapsed:.1f}s (< 60s)",
    )


# -- criterion 2: rotation-pair identity ---------------------------------------


def test_criterion_02_rotation_pair_identity(schedule_1000):
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (10, 3, 32, 32)).astype(np.float32)
    y = rng.uniform(-1, 1, (10, 3, 32, 32)).astype(np.float32)
    worst_rec, worst_norm = 0.0, 0.0
    for t in range(0, 1001):
        y_t = forward_blend(x, y, t, schedule_1000)
        v = v_target(x, y, t, schedule_1000)
        y_rec = recover_y(y_t, v, Parameterization.PREDICT_V, x, t, schedule_1000)
        x_rec = recover_x(y_t, v, t, schedule_1000)
        worst_rec = max(
            worst_rec,
            float(np.abs(y_rec - y).max()),
            float(np.abs(x_rec - x).max()),
        )
        worst_norm = max(worst_norm, float(np.abs(np.hypot(y_t, v) - np.hypot(y, x)).max()))
    _report(
        2,
        worst_rec <= 1e-5 and worst_norm <= 1e-5,
        f"recovery error {worst_rec:.2e} and norm deviation {worst_norm:.2e} "
        f"(both <= 1e-5) over all t in 0..1000, 10 pairs",
    )


# -- criterion 3: parameterization consistency ---------------------------------


def test_criterion_03_parameterization_consistency(schedule_1000):
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, (3, 16, 16))
    y = rng.uniform(-1, 1, (3, 16, 16))
    worst = 0.0
    tested = 0
    for t in range(0, 1001):
        ab = schedule_1000.alpha_bar(t)
        if not 1e-4 <= ab <= 1 - 1e-4:
            continue
        tested += 1
        y_t = forward_blend(x, y, t, schedule_1000)
        rec = [
            recover_y(y_t, v_target(x, y, t, schedule_1000), Parameterization.PREDICT_V,
                      x, t, schedule_1000),
            recover_y(y_t, x, Parameterization.PREDICT_X, x, t, schedule_1000),
            recover_y(y_t, y, Parameterization.PREDICT_Y, x, t, schedule_1000),
        ]
        for i in range(3):
            for j in range(i + 1, 3):
                worst = max(worst, float(np.abs(rec[i] - rec[j]).max()))
    _report(
        3,
        worst <= 1e-5 and tested > 900,
        f"pairwise recovery disagreement {worst:.2e} (<= 1e-5) across "
        f"{tested} timesteps with blend coefficient in [1e-4, 1-1e-4]",
    )


# -- criterion 4: gradient correctness ------------------------------------------


def test_criterion_04_gradient_correctness(schedule_1000):
    rng = np.random.default_rng(3)
    # loss gradient wrt the prediction, double precision, absolute tolerance
    x = torch.tensor(rng.uniform(-1, 1, (3, 8, 8)))
    y = torch.tensor(rng.uniform(-1, 1, (3, 8, 8)))
    pred = torch.tensor(rng.uniform(-1, 1, (3, 8, 8)), requires_grad=True)
    value = loss(pred, x, y, 321, Parameterization.PREDICT_V, schedule_1000)
    value.backward()
    worst_loss_grad = 0.0
    for _ in range(25):
        idx = tuple(rng.integers(0, s) for s in pred.shape)
        h = 1e-6
        with torch.no_grad():
            up, down = pred.detach().clone(), pred.detach().clone()
            up[idx] += h
            down[idx] -= h
        fd = (
            float(loss(up, x, y, 321, Parameterization.PREDICT_V, schedule_1000))
            - float(loss(down, x, y, 321, Parameterization.PREDICT_V, schedule_1000))
        ) / (2 * h)
        worst_loss_grad = max(worst_loss_grad, abs(fd - float(pred.grad[idx])))

    # end-to-end network gradient, 20+ probed weights, relative tolerance
    torch.manual_seed(4)
    model = make_toy_unet(channels=(8, 16), time_embed_dim=16, attention_levels=(1,)).double()
    xin = torch.randn(1, 3, 16, 16, dtype=torch.float64)
    target = torch.randn(1, 3, 16, 16, dtype=torch.float64)

    def net_loss():
        return ((model(xin, 37) - target) ** 2).mean()

    model.zero_grad()
    net_loss().backward()
    params = [p for p in model.parameters() if p.grad is not None and p.numel() > 1]
    worst_net_grad, probed = 0.0, 0
    for p in params:
        for _ in range(2):
            idx = tuple(rng.integers(0, s) for s in p.shape)
            analytic = float(p.grad[idx])
            h = 1e-5
            with torch.no_grad():
                orig = float(p[idx])
                p[idx] = orig + h
                up_v = float(net_loss())
                p[idx] = orig - h
                down_v = float(net_loss())
                p[idx] = orig
            fd = (up_v - down_v) / (2 * h)
            worst_net_grad = max(
                worst_net_grad, abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8)
            )
            probed += 1
    _report(
        4,
        worst_loss_grad <= 1e-6 and worst_net_grad <= 1e-3 and probed >= 20,
        f"loss-gradient fd error {worst_loss_grad:.2e} (<= 1e-6 abs); "
        f"network fd relative error {worst_net_grad:.2e} (<= 1e-3) on {probed} weights",
    )


# -- criterion 5: adapter contracts -----------------------------------------------


def test_criterion_05_adapter_contracts():
    torch.manual_seed(5)
    model = make_toy_unet(channels=(8, 16), time_embed_dim=16, attention_levels=(1,),
                          num_timesteps=50)
    xin = torch.randn(2, 3, 16, 16)
    base_out = model(xin, 7).detach().clone()
    adapter.attach(model)
    attach_exact = torch.equal(model(xin, 7), base_out)

    base_state = {n: p.detach().clone() for n, p in model.named_parameters()
                  if "lora_" not in n}
    scenes = [synth_scene(seed, 16, "normal") for seed in range(16)]
    config = TrainConfig(steps=100, batch_size=4, learning_rate=1e-3, num_timesteps=50,
                         seed=5, use_adapters=False).validate()
    state = make_train_state(model, config)  # adapters already attached; optimizer sees A/B only
    assert all("lora_" in n for n, p in model.named_parameters() if p.requires_grad)
    fit(state, scenes, make_schedule("cosine", 50))
    after = dict(model.named_parameters())
    base_unchanged = all(torch.equal(after[n], t) for n, t in base_state.items())

    adapted_out = model(xin, 7).detach()
    adapter.merge(model)
    merge_err = float((model(xin, 7).detach() - adapted_out).abs().max())
    _report(
        5,
        attach_exact and merge_err <= 1e-5 and base_unchanged,
        f"post-attach exact: {attach_exact}; merged-vs-adapted error {merge_err:.2e} "
        f"(<= 1e-5); base weights bit-unchanged after 100 adapter-only steps: {base_unchanged}",
    )


# -- criteria 6/7/10: desk-scale training through the CLI ---------------------------

TRAIN_STEPS = 5000


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    assert run_cli("synth", "--task", "normal", "--out", root / "train_data",
                   "--count", 500, "--size", 32, "--seed", 0) == 0
    assert run_cli("synth", "--task", "normal", "--out", root / "eval_data",
                   "--count", 50, "--size", 32, "--seed", 10_000) == 0
    return root


def _train(root, name, *extra):
    out = root / name
    code = run_cli(
        "train", "--task", "normal", "--out", out, "--data", root / "train_data",
        "--steps", TRAIN_STEPS, "--seed", 1, *extra,
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def diffusion_run(workspace):
    t0 = time.time()
    out = _train(workspace, "diffusion", "--param", "predict_v")
    return out, time.time() - t0


@pytest.fixture(scope="module")
def baseline_run(workspace):
    return _train(workspace, "baseline", "--single-step", "--param", "predict_y")


def _loss_column(out):
    with open(out / "loss.csv") as f:
        return [float(row["loss"]) for row in csv.DictReader(f)]


def _eval_angular(workspace, run_out, tag) -> float:
    pred_out = run_out / f"pred_{tag}"
    assert run_cli("predict", "--task", "normal", "--out", pred_out,
                   "--checkpoint", run_out / "model.ckpt",
                   "--input", workspace / "eval_data" / "input",
                   "--steps", 5) == 0
    eval_out = run_out / f"eval_{tag}"
    assert run_cli("eval", "--task", "normal", "--out", eval_out,
                   "--pred", pred_out / "pred",
                   "--ref", workspace / "eval_data" / "target") == 0
    report = json.loads((eval_out / "report.json").read_text())
    return report["metrics"]["ang_deg"]


@pytest.mark.slow
def test_criterion_06_desk_scale_training(workspace, diffusion_run, baseline_run):
    diff_out, train_seconds = diffusion_run
    losses = _loss_column(diff_out)
    assert len(losses) == TRAIN_STEPS
    initial = float(np.mean(losses[:10]))
    final = float(np.mean(losses[-100:]))
    diffusion_ang = _eval_angular(workspace, diff_out, "k5")
    baseline_ang = _eval_angular(workspace, baseline_run, "direct")
    ok = (
        final <= 0.1 * initial
        and diffusion_ang < 15.0
        and diffusion_ang <= 1.5 * baseline_ang
        and train_seconds < 7200
    )
    _report(
        6,
        ok,
        f"loss {initial:.4f} -> {final:.4f} (ratio {final / initial:.3f} <= 0.1); "
        f"5-step angular error {diffusion_ang:.2f} deg (< 15); baseline "
        f"{baseline_ang:.2f} deg (ratio {diffusion_ang / baseline_ang:.2f} <= 1.5); "
        f"training {train_seconds / 60:.1f} min (< 2 h)",
    )


@pytest.mark.slow
def test_criterion_07_step_sweep_shape(workspace, diffusion_run):
    diff_out, _ = diffusion_run
    sweep_out = diff_out / "sweep"
    code = run_cli("sweep-steps", "--task", "normal", "--out", sweep_out,
                   "--checkpoint", diff_out / "model.ckpt",
                   "--data", workspace / "eval_data")
    assert code == 0
    with open(sweep_out / "sweep.csv") as f:
        rows = {int(r["steps"]): float(r["error"]) for r in csv.DictReader(f)}
    assert set(rows) == {1, 2, 5, 10, 50}
    best = min(rows.values())
    _report(
        7,
        rows[5] <= 1.1 * best,
        f"K=5 error {rows[5]:.4f} within 10% of best {best:.4f} "
        f"(sweep {sorted(rows.items())}); no absolute values asserted",
    )


# -- criterion 8: metric oracles ------------------------------------------------------


def test_criterion_08_metric_oracles():
    rng = np.random.default_rng(8)
    palette = default_palette(4)
    worst = 0.0
    for _ in range(100):
        pn, gn = unit_field(rng), unit_field(rng)
        got = normal_metrics(pn, gn)
        want = naive_normal_metrics(pn, gn)
        worst = max(worst, abs(got[0] - want[0]), abs(got[1] - want[1]))

        pd_ = rng.uniform(0.5, 4.0, (8, 8))
        gd = rng.uniform(0.5, 4.0, (8, 8))
        m = depth_metrics(pd_, gd)
        want_d = naive_depth_metrics(pd_, gd)
        worst = max(worst, abs(m.rel - want_d[0]), abs(m.delta - want_d[1]),
                    abs(m.rmse_rel - want_d[2]))

        ps = rng.choice([0, 1, 3], size=(8, 8))
        gs = rng.choice([0, 1, 2], size=(8, 8))
        scores = seg_metrics(ps, gs, palette)
        naive = naive_seg_metrics(ps, gs, palette.ids)
        for cid, (acc, iou) in naive.items():
            worst = max(worst, abs(scores.per_category[cid]["acc"] - acc),
                        abs(scores.per_category[cid]["miou"] - iou))

        a = rng.uniform(-1, 1, (8, 8, 3))
        b = rng.uniform(-1, 1, (8, 8, 3))
        worst = max(worst, abs(mse(a, b) - naive_mse(a, b)))

    rel_example = depth_metrics(np.array([[1.0, 5.0]]), np.array([[2.0, 4.0]])).rel
    jitter = np.eye(2) * 1e-9
    delta_example = depth_metrics(np.full((2, 2), 2.4) + jitter,
                                  np.full((2, 2), 2.0) + jitter).delta
    _report(
        8,
        worst <= 1e-10 and rel_example == 0.375 and delta_example == 1.0,
        f"naive-loop agreement {worst:.2e} (<= 1e-10) on 100 random 8x8 maps; "
        f"REL worked example = {rel_example} (0.375); ratio-1.2 accuracy = {delta_example} (1.0)",
    )


# -- criterion 9: codec roundtrips ------------------------------------------------------


def test_criterion_09_codec_roundtrips():
    rng = np.random.default_rng(9)
    roundtrips = 0
    for _ in range(1000):
        n_cats = int(rng.integers(2, 9))
        palette = default_palette(n_cats)
        labels = rng.integers(0, n_cats, size=(12, 12))
        if not np.array_equal(seg_decode(seg_encode(labels, palette), palette), labels):
            break
        roundtrips += 1

    palette = default_palette(6)
    labels = rng.integers(0, 6, size=(16, 16))
    clean = seg_encode(labels, palette)
    robust = True
    for _ in range(200):
        direction = rng.standard_normal(clean.shape)
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
        noisy = clean + rng.uniform(0, 0.499 * palette.min_margin) * direction
        if not np.array_equal(seg_decode(noisy, palette), labels):
            robust = False
            break

    vecs = rng.standard_normal((64, 64, 3))
    vecs /= np.linalg.norm(vecs, axis=-1, keepdims=True)
    normal_err = float(np.abs(decode_normals(encode_normals(vecs)) - vecs).max())

    depth = rng.uniform(1, 9, (16, 16))
    affine_err = max(
        float(np.abs(normalize_depth(a * depth + b) - normalize_depth(depth)).max())
        for a, b in [(2.0, 0.0), (0.3, 5.0), (11.0, -4.0)]
    )
    _report(
        9,
        roundtrips == 1000 and robust and normal_err <= 1e-6 and affine_err <= 1e-12,
        f"{roundtrips}/1000 segmentation roundtrips exact; decode robust below half margin: "
        f"{robust}; normal roundtrip error {normal_err:.2e} (<= 1e-6); depth affine "
        f"invariance deviation {affine_err:.2e}",
    )


# -- criterion 10: reproducibility --------------------------------------------------------


@pytest.mark.slow
def test_criterion_10_reproducibility(workspace):
    outs = []
    for name in ("repro_a", "repro_b"):
        out = workspace / name
        code = run_cli("train", "--task", "normal", "--out", out,
                       "--data", workspace / "train_data", "--steps", 60, "--seed", 42)
        assert code == 0
        outs.append(out)
    logs_equal = (outs[0] / "loss.csv").read_bytes() == (outs[1] / "loss.csv").read_bytes()
    ckpts_equal = (outs[0] / "model.ckpt").read_bytes() == (outs[1] / "model.ckpt").read_bytes()
    _report(
        10,
        logs_equal and ckpts_equal,
        f"identical seeds: loss logs bit-identical: {logs_equal}; "
        f"checkpoints bit-identical: {ckpts_equal}",
    )
