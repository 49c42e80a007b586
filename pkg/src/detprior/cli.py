"""Command-line entry point: train, predict, eval, sweep-steps, synth.

Configuration is a flat dotted-key text file (``train.steps = 5000``) merged
with flag overrides; the fully resolved config is written into the output
directory so every run is reproducible from that file alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import metrics as metrics_mod
from . import taskio
from .bridge import Parameterization, sample, single_step_predict
from .denoiser import as_denoise_fn, make_toy_unet
from .schedule import inference_timesteps, make_schedule
from .training import TrainConfig, fit, load_checkpoint, make_train_state, save_checkpoint

DEFAULTS: dict[str, object] = {
    "task": "normal",
    "out": "runs/out",
    "seed": 0,
    "workers": 1,
    "data.root": "",
    "data.size": 32,
    "schedule.kind": "cosine",
    "schedule.timesteps": 1000,
    "train.param": "predict_v",
    "train.steps": 5000,
    "train.batch_size": 8,
    "train.lr": None,  # 1e-4 with adapters, 1e-3 from scratch
    "train.adapters": False,
    "train.lora_rank": 8,
    "train.lora_alpha": 8.0,
    "train.lora_pattern": r"attn\.",
    "train.single_step": False,
    "train.lr_decay": True,
    "train.ema": None,
    "model.channels": [24, 48, 96],
    "model.time_embed_dim": 64,
    "model.attention_levels": [2],
    "predict.checkpoint": "",
    "predict.input": "",
    "predict.steps": 5,  # multi-step default
    "eval.pred": "",
    "eval.ref": "",
    "eval.palette": "",
    "sweep.steps_set": [1, 2, 5, 10, 50],
    "synth.count": 100,
}


def parse_config_file(path: str | Path) -> dict[str, object]:
    cfg: dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        cfg[key.strip()] = _parse_value(value.strip())
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def format_config(cfg: dict[str, object]) -> str:
    return "\n".join(f"{k} = {json.dumps(cfg[k])}" for k in sorted(cfg)) + "\n"


def resolve_config(args: argparse.Namespace) -> dict[str, object]:
    """defaults < config file < --set overrides < dedicated flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(parse_config_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        cfg[key.strip()] = _parse_value(value.strip())
    for flag, key in [("task", "task"), ("out", "out"), ("seed", "seed"), ("workers", "workers")]:
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "steps", None) is not None:
        cfg["train.steps" if args.command == "train" else "predict.steps"] = args.steps
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _write_resolved(cfg: dict[str, object], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(format_config(cfg))


def _train_config(cfg: dict[str, object]) -> TrainConfig:
    lr = cfg["train.lr"]
    if lr is None:
        lr = 1e-4 if cfg["train.adapters"] else 1e-3
    return TrainConfig(
        param=Parameterization.from_string(str(cfg["train.param"])),
        steps=int(cfg["train.steps"]),
        batch_size=int(cfg["train.batch_size"]),
        learning_rate=float(lr),
        schedule_kind=str(cfg["schedule.kind"]),
        num_timesteps=int(cfg["schedule.timesteps"]),
        use_adapters=bool(cfg["train.adapters"]),
        lora_rank=int(cfg["train.lora_rank"]),
        lora_alpha=float(cfg["train.lora_alpha"]),
        lora_pattern=str(cfg["train.lora_pattern"]),
        seed=int(cfg["seed"]),
        single_step_mode=bool(cfg["train.single_step"]),
        cosine_lr_decay=bool(cfg["train.lr_decay"]),
        ema_decay=None if cfg["train.ema"] in (None, "", False) else float(cfg["train.ema"]),
    ).validate()


def cmd_train(cfg: dict[str, object]) -> int:
    out = Path(str(cfg["out"]))
    _write_resolved(cfg, out)
    config = _train_config(cfg)
    task = str(cfg["task"])
    samples = taskio.load_dataset(str(cfg["data.root"]), task, size=int(cfg["data.size"]))
    schedule = make_schedule(config.schedule_kind, config.num_timesteps)

    torch.manual_seed(config.seed)
    model = make_toy_unet(
        channels=tuple(cfg["model.channels"]),
        time_embed_dim=int(cfg["model.time_embed_dim"]),
        attention_levels=tuple(cfg["model.attention_levels"]),
        num_timesteps=config.num_timesteps,
    )
    state = make_train_state(model, config)
    losses = fit(state, samples, schedule)

    with open(out / "loss.csv", "w") as f:
        f.write("step,loss\n")
        for i, value in enumerate(losses):
            f.write(f"{i},{value!r}\n")
    save_checkpoint(
        out / "model.ckpt", model, config, schedule,
        task=task, step=state.step, init_seed=config.seed,
    )
    print(f"trained {len(losses)} steps; final loss {losses[-1]:.6f}; wrote {out / 'model.ckpt'}")
    return 0


def _decode_prediction(arr: np.ndarray, task: str) -> np.ndarray:
    """Map a raw sampler output to the task's on-disk target encoding."""
    if task == "normal":
        return taskio.encode_normals(taskio.decode_normals(arr)).astype(np.float32)
    if task == "depth":
        d = np.clip((arr.mean(axis=-1) + 1.0) / 2.0, 0.0, 1.0)
        return np.repeat((d * 2.0 - 1.0)[..., None], 3, axis=-1).astype(np.float32)
    return np.clip(arr, -1.0, 1.0).astype(np.float32)


def cmd_predict(cfg: dict[str, object]) -> int:
    out = Path(str(cfg["out"]))
    _write_resolved(cfg, out)
    ckpt = load_checkpoint(str(cfg["predict.checkpoint"]))
    task = str(cfg["task"])
    if task != ckpt.task:
        raise ValueError(f"checkpoint was trained for task {ckpt.task!r}, flag says {task!r}")
    steps = int(cfg["predict.steps"])
    plan = None
    if not ckpt.config.single_step_mode:
        plan = inference_timesteps(ckpt.schedule, steps)
    denoise = as_denoise_fn(ckpt.model)
    pred_dir = out / "pred"
    pred_dir.mkdir(parents=True, exist_ok=True)

    files = sorted(Path(str(cfg["predict.input"])).glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no input images under {cfg['predict.input']}")

    def run_one(path: Path) -> None:
        image = taskio.read_input_image(path, size=int(cfg["data.size"]))
        x = np.moveaxis(image, -1, 0)
        if ckpt.config.single_step_mode:
            y0 = single_step_predict(x, denoise, ckpt.schedule)
        else:
            y0 = sample(x, denoise, ckpt.config.param, plan, ckpt.schedule)
        decoded = _decode_prediction(np.moveaxis(y0, 0, -1), task)
        taskio.write_target_image(decoded, task, pred_dir / path.name)

    errors = 0
    workers = int(cfg["workers"])
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run_one, p): p for p in files}
            for future, path in futures.items():
                try:
                    future.result()
                except Exception as exc:
                    errors += 1
                    print(f"error: {path.name}: {exc}", file=sys.stderr)
    else:
        for path in files:
            try:
                run_one(path)
            except Exception as exc:
                errors += 1
                print(f"error: {path.name}: {exc}", file=sys.stderr)
    print(f"predicted {len(files) - errors}/{len(files)} images into {pred_dir}")
    return errors


def _eval_palette(cfg: dict[str, object], ref_dir: Path) -> taskio.SegPalette:
    if cfg["eval.palette"]:
        return taskio.load_palette(str(cfg["eval.palette"]))
    candidate = ref_dir.parent / taskio.PALETTE_FILENAME
    if candidate.exists():
        return taskio.load_palette(candidate)
    raise FileNotFoundError(
        f"segmentation eval needs a palette: pass eval.palette or place {candidate}"
    )


def evaluate_folders(cfg: dict[str, object]) -> tuple[metrics_mod.MetricReport, list[dict]]:
    task = str(cfg["task"])
    pred_dir = Path(str(cfg["eval.pred"]))
    ref_dir = Path(str(cfg["eval.ref"]))
    pred_files = sorted(pred_dir.glob("*.png"))
    if not pred_files:
        raise FileNotFoundError(f"no predictions under {pred_dir}")
    pairs = []
    for p in pred_files:
        ref = ref_dir / p.name
        if not ref.exists():
            raise FileNotFoundError(f"missing reference for {p.name}: {ref}")
        pairs.append((p, ref))

    palette = _eval_palette(cfg, ref_dir) if task == "segmentation" else None
    rows: list[dict] = []
    per_category_rows: list[dict[int, dict[str, float]]] = []
    for pred_path, ref_path in pairs:
        row: dict = {"id": pred_path.stem}
        if task == "normal":
            pred = taskio.decode_normals(taskio.read_target_image(pred_path, task))
            ref = taskio.decode_normals(taskio.read_target_image(ref_path, task))
            l1, ang = metrics_mod.normal_metrics(pred, ref)
            row.update(l1=l1, ang=ang, ang_deg=np.degrees(ang))
        elif task == "depth":
            pred = (taskio.read_target_image(pred_path, task)[..., 0] + 1.0) / 2.0
            ref = (taskio.read_target_image(ref_path, task)[..., 0] + 1.0) / 2.0
            dm = metrics_mod.depth_metrics(pred, ref)
            row.update(rel=dm.rel, delta=dm.delta, rmse_rel=dm.rmse_rel,
                       excluded_pixels=dm.excluded_pixels)
        elif task == "segmentation":
            pred = taskio.seg_decode(taskio.read_target_image(pred_path, task), palette)
            ref = taskio.seg_decode(taskio.read_target_image(ref_path, task), palette)
            scores = metrics_mod.seg_metrics(pred, ref, palette)
            row.update(mean_acc=scores.mean_acc, mean_miou=scores.mean_miou)
            per_category_rows.append(scores.per_category)
        else:
            value = metrics_mod.mse(
                taskio.read_target_image(pred_path, task),
                taskio.read_target_image(ref_path, task),
            )
            row.update(mse=value)
        rows.append(row)

    numeric = [k for k in rows[0] if k != "id"]
    aggregate = {k: float(np.mean([r[k] for r in rows])) for k in numeric}
    per_category = None
    if per_category_rows:
        per_category = {}
        for cid in sorted({c for r in per_category_rows for c in r}):
            present = [r[cid] for r in per_category_rows if cid in r]
            per_category[cid] = {
                "acc": float(np.mean([v["acc"] for v in present])),
                "miou": float(np.mean([v["miou"] for v in present])),
            }
    report = metrics_mod.MetricReport(
        task=task, per_metric=aggregate, sample_count=len(rows), per_category=per_category
    ).validate()
    return report, rows


def cmd_eval(cfg: dict[str, object]) -> int:
    out = Path(str(cfg["out"]))
    _write_resolved(cfg, out)
    report, rows = evaluate_folders(cfg)
    report.write(out / "report.json")
    metrics_mod.write_flat_table(rows, out / "per_image.csv")
    print(f"evaluated {report.sample_count} images: "
          + ", ".join(f"{k}={v:.4f}" for k, v in sorted(report.per_metric.items())))
    return 0


def primary_error_metric(task: str, per_metric: dict[str, float]) -> float:
    """Scalar error (lower is better) used for step sweeps."""
    if task == "normal":
        return per_metric["ang"]
    if task == "depth":
        return per_metric["rmse_rel"]
    if task == "segmentation":
        return 1.0 - per_metric["mean_miou"]
    return per_metric["mse"]


def cmd_sweep_steps(cfg: dict[str, object]) -> int:
    out = Path(str(cfg["out"]))
    _write_resolved(cfg, out)
    steps_set = [int(k) for k in cfg["sweep.steps_set"]]
    data_root = Path(str(cfg["data.root"]))
    rows = []
    for k in steps_set:
        sub = dict(cfg)
        sub["out"] = str(out / f"k{k}")
        sub["predict.steps"] = k
        sub["predict.input"] = str(data_root / "input")
        errors = cmd_predict(sub)
        if errors:
            return errors
        sub["eval.pred"] = str(out / f"k{k}" / "pred")
        sub["eval.ref"] = str(data_root / "target")
        report, _ = evaluate_folders(sub)
        row = {"steps": k, "error": primary_error_metric(str(cfg["task"]), report.per_metric)}
        row.update(report.per_metric)
        rows.append(row)
        print(f"K={k}: error={row['error']:.5f}")
    metrics_mod.write_flat_table(rows, out / "sweep.csv")
    _plot_sweep(rows, out / "sweep.png")
    return 0


def _plot_sweep(rows: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ks = [r["steps"] for r in rows]
    errs = [r["error"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ks, errs, marker="o")
    ax.set_xscale("log")
    ax.set_xticks(ks, [str(k) for k in ks])
    ax.set_xlabel("inference steps")
    ax.set_ylabel("error")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_synth(cfg: dict[str, object]) -> int:
    out = Path(str(cfg["out"]))
    _write_resolved(cfg, out)
    task = str(cfg["task"])
    seed = int(cfg["seed"])
    count = int(cfg["synth.count"])
    size = int(cfg["data.size"])
    samples = [taskio.synth_scene(seed + i, size, task) for i in range(count)]
    palette = taskio.synth_palette() if task == "segmentation" else None
    taskio.save_dataset(samples, out, palette=palette)
    print(f"wrote {count} {task} pairs to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="detprior",
        description="Deterministic interpolation diffusion for pixel-level prediction tasks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat dotted-key config file")
    common.add_argument("--out", help="output directory (key: out)")
    common.add_argument("--task", choices=taskio.TASKS, help="task tag (key: task)")
    common.add_argument("--seed", type=int, help="seed (key: seed)")
    common.add_argument("--workers", type=int, help="parallel per-image workers (key: workers)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key, e.g. --set train.lr=3e-4")

    p = sub.add_parser("train", parents=[common], help="fine-tune on a dataset folder")
    p.add_argument("--data", help="dataset root with input/ and target/ (key: data.root)")
    p.add_argument("--steps", type=int, help="training steps (key: train.steps)")
    p.add_argument("--param", help="predict_x | predict_y | predict_v (key: train.param)")
    p.add_argument("--single-step", action="store_true",
                   help="direct-prediction baseline (key: train.single_step)")
    p.add_argument("--adapters", action="store_true",
                   help="train low-rank adapters only (key: train.adapters)")

    p = sub.add_parser("predict", parents=[common], help="run inference on an input folder")
    p.add_argument("--checkpoint", help="key: predict.checkpoint")
    p.add_argument("--input", help="folder of input PNGs (key: predict.input)")
    p.add_argument("--steps", type=int, help="diffusion steps (key: predict.steps)")

    p = sub.add_parser("eval", parents=[common], help="score predictions against references")
    p.add_argument("--pred", help="key: eval.pred")
    p.add_argument("--ref", help="key: eval.ref")

    p = sub.add_parser("sweep-steps", parents=[common],
                       help="predict+eval over a set of step counts")
    p.add_argument("--checkpoint", help="key: predict.checkpoint")
    p.add_argument("--data", help="eval dataset root (key: data.root)")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--count", type=int, help="key: synth.count")
    p.add_argument("--size", type=int, help="key: data.size")
    return parser


_EXTRA_FLAG_KEYS = {
    "data": "data.root",
    "param": "train.param",
    "single_step": "train.single_step",
    "adapters": "train.adapters",
    "checkpoint": "predict.checkpoint",
    "input": "predict.input",
    "pred": "eval.pred",
    "ref": "eval.ref",
    "count": "synth.count",
    "size": "data.size",
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        for flag, key in _EXTRA_FLAG_KEYS.items():
            value = getattr(args, flag, None)
            if value not in (None, False):
                cfg[key] = value
        handler = {
            "train": cmd_train,
            "predict": cmd_predict,
            "eval": cmd_eval,
            "sweep-steps": cmd_sweep_steps,
            "synth": cmd_synth,
        }[args.command]
        errors = handler(cfg)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 1 if errors else 0


if __name__ == "__main__":
    sys.exit(main())
