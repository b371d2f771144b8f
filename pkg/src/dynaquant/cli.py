"""Command-line entry point: training runs, R-D sweeps, evaluation, ablation
suites, proxy-function dumps and BD-rate computation.

Run configs are flat UTF-8 key=value files with dotted keys (# comments
allowed); unknown keys are rejected and all defaults are materialized into
the echoed config. Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric
failure. The DYNAQUANT_SEED environment variable overrides the config seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import DataError, KINDS, load_image_dir, synthetic_dataset, write_ppm
from .metrics import (BitProfile, BitProfileEntry, RDCurve, avg_bitwidth,
                      bd_rate, model_size, theoretical_speedup)
from .model import model_bit_inventory
from .quant import dgm_grad, dgm_soft_round
from .train import (TrainConfig, Trainer, TrainingError, evaluate_model,
                    load_checkpoint, save_checkpoint)

REPORT_SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    """Bad run config; message carries the offending key path."""


# -- run config ------------------------------------------------------------------

def _parse_int_list(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.split(",") if x.strip())


def _parse_float_list(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.split(",") if x.strip())


def _parse_str_list(v: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in v.split(",") if x.strip())


def _parse_bool(v: str) -> bool:
    if v.lower() in ("true", "1", "yes"):
        return True
    if v.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected boolean, got {v!r}")


# key -> (parser, default); None default means optional/unset
CONFIG_KEYS = {
    "run.kind": (str, "train"),                     # train | rd-sweep
    "run.out_dir": (str, "runs/out"),
    "train.steps": (int, 20_000),
    "train.batch_size": (int, 8),
    "train.crop": (int, 64),
    "train.lr": (float, 1e-4),
    "train.lambda": (float, 0.0067),
    "train.lambda_grid": (_parse_float_list, (0.0018, 0.0067, 0.025, 0.0932)),
    "train.gamma": (float, 0.001),
    "train.seed": (int, 1),
    "train.mode": (str, "dgm"),                     # ste | dgm
    "train.beta": (float, 5.0),
    "train.beta_ramp": (_parse_float_list, None),   # "start,end"
    "train.learn_scale": (_parse_bool, True),
    "train.learn_zero_point": (_parse_bool, True),
    "quant.bits": (_parse_int_list, (6, 8, 10)),
    "quant.fixed_bits": (int, None),
    "model.stages": (int, 3),
    "model.channels": (_parse_int_list, (16, 32)),
    "model.latent_channels": (int, 32),
    "data.kind": (str, "synthetic"),                # synthetic | dir
    "data.path": (str, None),
    "data.count": (int, 16),
    "data.size": (int, 64),
    "data.kinds": (_parse_str_list, KINDS),
    "data.seed": (int, 7),
    "ablate.steps": (int, 600),
    "ablate.seeds": (_parse_int_list, (1, 2, 3)),
}


def parse_config_text(text: str) -> dict:
    """Flat dotted-key config text -> fully-defaulted typed dict."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        parser, _ = CONFIG_KEYS[key]
        try:
            values[key] = parser(val)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc
    cfg = {k: default for k, (_, default) in CONFIG_KEYS.items()}
    cfg.update(values)
    if "DYNAQUANT_SEED" in os.environ:
        cfg["train.seed"] = int(os.environ["DYNAQUANT_SEED"])
    return cfg


def load_run_config(path: str | Path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(p.read_text())


def train_config_from_run(cfg: dict, **overrides) -> TrainConfig:
    kw = dict(
        lambda_rd=cfg["train.lambda"],
        gamma=cfg["train.gamma"],
        lr=cfg["train.lr"],
        batch_size=cfg["train.batch_size"],
        crop=cfg["train.crop"],
        steps=cfg["train.steps"],
        seed=cfg["train.seed"],
        mode=cfg["train.mode"],
        beta=cfg["train.beta"],
        beta_ramp=cfg["train.beta_ramp"],
        bit_choices=cfg["quant.bits"],
        fixed_bits=cfg["quant.fixed_bits"],
        stages=cfg["model.stages"],
        channels=cfg["model.channels"],
        latent_channels=cfg["model.latent_channels"],
        learn_scale=cfg["train.learn_scale"],
        learn_zero_point=cfg["train.learn_zero_point"],
    )
    kw.update(overrides)
    try:
        return TrainConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_dataset(cfg: dict) -> np.ndarray:
    if cfg["data.kind"] == "synthetic":
        try:
            images = synthetic_dataset(cfg["data.count"], cfg["data.size"],
                                       cfg["data.kinds"], cfg["data.seed"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if images.shape[0] == 0:
            raise DataError("synthetic dataset is empty (data.count=0)")
        return images
    if cfg["data.kind"] == "dir":
        if not cfg["data.path"]:
            raise DataError("data.kind=dir requires data.path")
        images, _, _ = load_image_dir(cfg["data.path"])
        shapes = {im.shape for im in images}
        if len(shapes) != 1:
            raise DataError(f"training images must share one size, got {shapes}")
        return np.stack(images)
    raise ConfigError(f"unknown data.kind {cfg['data.kind']!r}")


# -- reporting --------------------------------------------------------------------

def bit_profile_from_eval(model, eval_result) -> BitProfile:
    """Bind eval-time selections into a concrete whole-model bit profile."""
    entries = []
    for e in model_bit_inventory(model):
        if e.source == "dynamic":
            counts = eval_result.bit_histogram.get(e.layer_id, {})
            total = sum(counts.values())
            bits = (sum(b * c for b, c in counts.items()) / total) if total \
                else float(np.mean(model.config.bit_choices))
            entries.append(BitProfileEntry(e.layer_id, e.param_count, bits,
                                           "dynamic"))
        else:
            entries.append(BitProfileEntry(e.layer_id, e.param_count,
                                           float(e.bits), e.source))
    return BitProfile(entries)


def build_report(cfg: dict, trainer: Trainer, eval_result) -> dict:
    profile = bit_profile_from_eval(trainer.model, eval_result)
    quantized = profile.scoped("quantized-layers")
    fp32_mb = sum(e.param_count for e in quantized) * 4 / 1e6
    b_bar = avg_bitwidth(profile, "quantized-layers")
    overhead = sum(e.param_count for e in profile.scoped("whole-model")
                   if e.source == "fp32") * 4
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in cfg.items()},
        "final": {
            "bpp": eval_result.mean_bpp,
            "psnr_db": eval_result.mean_psnr_db,
            "avg_bits_dynamic": eval_result.avg_bits_dynamic,
            "avg_bits_quantized": b_bar,
            "fp32_size_mb": fp32_mb,
            "model_size_mb": model_size(fp32_mb, b_bar),
            "overhead_bytes": overhead,
            "speedup": theoretical_speedup(b_bar),
            "rd_loss": eval_result.rd_loss,
            "train_loss_last": trainer.trace[-1].loss if trainer.trace else None,
            "steps": trainer.step_count,
        },
        "bit_histogram": {k: {str(b): c for b, c in v.items()}
                          for k, v in eval_result.bit_histogram.items()},
    }
    finite = [v for v in report["final"].values() if isinstance(v, float)]
    if not all(np.isfinite(finite)):
        raise TrainingError("report contains non-finite metrics")
    return report


REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "config", "final", "bit_histogram"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "config": {"type": "object"},
        "final": {
            "type": "object",
            "required": ["bpp", "psnr_db", "avg_bits_dynamic",
                         "avg_bits_quantized", "fp32_size_mb", "model_size_mb",
                         "overhead_bytes", "speedup", "rd_loss", "steps"],
        },
        "bit_histogram": {"type": "object"},
    },
}


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, REPORT_SCHEMA)


def write_trace_csv(trainer: Trainer, path: Path) -> None:
    from .train import StepMetrics

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(StepMetrics.HEADER)
        for m in trainer.trace:
            w.writerow([f"{v:.8g}" if isinstance(v, float) else v
                        for v in m.row()])


def _write_table(rows: list[dict], columns: list[str], out_base: Path) -> str:
    """Emit aligned text and CSV for one results table; returns the text."""
    header = [c for c in columns]
    str_rows = [[("" if r.get(c) is None else
                  (f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c])))
                 for c in header] for r in rows]
    widths = [max(len(h), *(len(s[i]) for s in str_rows)) if str_rows else len(h)
              for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(s.ljust(w) for s, w in zip(row, widths))
              for row in str_rows]
    text = "\n".join(lines) + "\n"
    out_base.with_suffix(".txt").write_text(text)
    with open(out_base.with_suffix(".csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in str_rows:
            w.writerow(row)
    return text


# -- commands ----------------------------------------------------------------------

def _run_single_training(cfg: dict, dataset: np.ndarray, out_dir: Path,
                         **overrides) -> dict:
    tc = train_config_from_run(cfg, **overrides)
    trainer = Trainer(tc, dataset)
    trainer.run(tc.steps)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(trainer, out_dir / "checkpoint.dqnt")
    write_trace_csv(trainer, out_dir / "trace.csv")
    result = evaluate_model(trainer.model, dataset, lambda_rd=tc.lambda_rd)
    report = build_report(cfg, trainer, result)
    validate_report(report)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2,
                                                    sort_keys=True))
    return report


def cmd_train(config_path: str) -> int:
    cfg = load_run_config(config_path)
    dataset = load_dataset(cfg)       # fails before any output is written
    out_dir = Path(cfg["run.out_dir"])

    if cfg["run.kind"] == "train":
        report = _run_single_training(cfg, dataset, out_dir)
        print(f"trained {report['final']['steps']} steps: "
              f"bpp={report['final']['bpp']:.4f} "
              f"psnr={report['final']['psnr_db']:.2f}dB "
              f"b={report['final']['avg_bits_quantized']:.2f}")
        return EXIT_OK

    if cfg["run.kind"] == "rd-sweep":
        points = []
        for lam in cfg["train.lambda_grid"]:
            sub = out_dir / f"lambda_{lam:g}"
            report = _run_single_training(cfg, dataset, sub, lambda_rd=lam)
            points.append((report["final"]["bpp"], report["final"]["psnr_db"]))
            print(f"lambda={lam:g}: bpp={points[-1][0]:.4f} "
                  f"psnr={points[-1][1]:.2f}dB")
        points.sort()
        try:
            curve = RDCurve(points)
        except ValueError as exc:
            raise TrainingError(f"rd-sweep produced an invalid curve: {exc}") from exc
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "rd_curve.csv").write_text(curve.to_csv())
        return EXIT_OK

    raise ConfigError(f"unknown run.kind {cfg['run.kind']!r}")


def cmd_eval(checkpoint_path: str, image_dir: str, out_dir: str,
             lambda_rd: float | None = None) -> int:
    trainer = load_checkpoint(checkpoint_path)
    images, names, skipped = load_image_dir(image_dir)
    lam = trainer.config.lambda_rd if lambda_rd is None else lambda_rd

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    per_image_results = []
    for name, img in zip(names, images):
        res = evaluate_model(trainer.model, img[None], lambda_rd=lam)
        r = res.per_image[0]
        rows.append({"image": name, "bpp": r["bpp"], "psnr_db": r["psnr_db"],
                     **{f"bits.{k}": v for k, v in r["bits"].items()}})
        per_image_results.append({"image": name, **r})

    bit_cols = sorted({c for r in rows for c in r if c.startswith("bits.")})
    _write_table(rows, ["image", "bpp", "psnr_db", *bit_cols], out / "eval")
    summary = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "checkpoint": str(checkpoint_path),
        "mean_bpp": float(np.mean([r["bpp"] for r in rows])),
        "mean_psnr_db": float(np.mean([r["psnr_db"] for r in rows])),
        "images": per_image_results,
        "skipped": skipped,
    }
    (out / "eval.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"evaluated {len(rows)} images: bpp={summary['mean_bpp']:.4f} "
          f"psnr={summary['mean_psnr_db']:.2f}dB ({len(skipped)} skipped)")
    return EXIT_OK


ABLATION_SUITES = ("dgm-vs-ste", "dpa-components", "bitset")


def _ablate_cell(cfg: dict, dataset: np.ndarray, seeds, label: str,
                 trace_dir: Path | None, **overrides) -> dict:
    """Train+eval one configuration over the shared seeds; mean metrics."""
    finals = []
    for seed in seeds:
        tc = train_config_from_run(cfg, seed=seed,
                                   steps=cfg["ablate.steps"], **overrides)
        trainer = Trainer(tc, dataset)
        trainer.run(tc.steps)
        if trace_dir is not None:
            trace_dir.mkdir(parents=True, exist_ok=True)
            safe = "".join(c if c.isalnum() else "_" for c in label)
            write_trace_csv(trainer, trace_dir / f"{safe}_seed{seed}.csv")
        res = evaluate_model(trainer.model, dataset, lambda_rd=tc.lambda_rd)
        finals.append({"bpp": res.mean_bpp, "psnr_db": res.mean_psnr_db,
                       "rd_loss": res.rd_loss,
                       "avg_bits": res.avg_bits_dynamic,
                       "seed": seed})
    return {
        "bpp": float(np.mean([f["bpp"] for f in finals])),
        "psnr_db": float(np.mean([f["psnr_db"] for f in finals])),
        "rd_loss": float(np.mean([f["rd_loss"] for f in finals])),
        "avg_bits": float(np.mean([f["avg_bits"] for f in finals])),
        "per_seed": finals,
    }


def run_ablation(suite: str, cfg: dict, dataset: np.ndarray,
                 trace_dir: Path | None = None) -> list[dict]:
    """Run one ablation grid; per-cell failures are recorded, not fatal."""
    seeds = cfg["ablate.seeds"]
    if suite == "dgm-vs-ste":
        grid = [("ste", {"mode": "ste", "fixed_bits": 8, "gamma": 0.0}),
                ("dgm", {"mode": "dgm", "fixed_bits": 8, "gamma": 0.0})]
    elif suite == "dpa-components":
        base = {"fixed_bits": 8, "gamma": 0.0}
        grid = [("full (s,z,g)", {"mode": "dgm", **base}),
                ("no learnable s", {"mode": "dgm", "learn_scale": False, **base}),
                ("no learnable z", {"mode": "dgm", "learn_zero_point": False, **base}),
                ("no g(x) (ste)", {"mode": "ste", **base})]
    elif suite == "bitset":
        grid = [("{4,6,8}", {"bit_choices": (4, 6, 8)}),
                ("{6,8,10}", {"bit_choices": (6, 8, 10)})]
    else:
        raise ConfigError(f"unknown ablation suite {suite!r}; "
                          f"choose from {ABLATION_SUITES}")

    rows = []
    for label, overrides in grid:
        bits_label = overrides.get("fixed_bits") or "dynamic"
        try:
            cell = _ablate_cell(cfg, dataset, seeds, label, trace_dir, **overrides)
            rows.append({"row": label, "bitwidth": cell["avg_bits"],
                         "bpp": cell["bpp"], "psnr_db": cell["psnr_db"],
                         "rd_loss": cell["rd_loss"], "status": "ok",
                         "per_seed": cell["per_seed"]})
        except Exception as exc:   # record the failure, continue the suite
            rows.append({"row": label, "bitwidth": bits_label, "bpp": None,
                         "psnr_db": None, "rd_loss": None,
                         "status": f"error: {exc}", "per_seed": []})
    return rows


def cmd_ablate(suite: str, config_path: str | None, out_dir: str) -> int:
    cfg = load_run_config(config_path) if config_path else parse_config_text("")
    dataset = load_dataset(cfg)
    out = Path(out_dir)
    rows = run_ablation(suite, cfg, dataset, trace_dir=out / "traces")
    out.mkdir(parents=True, exist_ok=True)
    table_rows = [{k: r[k] for k in ("row", "bitwidth", "bpp", "psnr_db",
                                     "rd_loss", "status")} for r in rows]
    text = _write_table(table_rows,
                        ["row", "bitwidth", "bpp", "psnr_db", "rd_loss", "status"],
                        out / f"ablation_{suite}")
    (out / f"ablation_{suite}.json").write_text(
        json.dumps(rows, indent=2, sort_keys=True, default=str))
    print(text, end="")
    return EXIT_OK


def cmd_proxy_dump(betas, samples_per_unit: int, out_path: str) -> int:
    for b in betas:
        if not b > 0:
            raise ConfigError(f"beta must be positive, got {b}")
    n = int(3 * samples_per_unit) + 1
    xs = np.linspace(0.0, 3.0, n)
    path = Path(out_path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["beta", "x", "g", "gprime"])
        for b in betas:
            g = dgm_soft_round(xs, b)
            gp = dgm_grad(xs - np.floor(xs), b)
            for x, gv, gpv in zip(xs, g, gp):
                w.writerow([f"{b:g}", f"{x:.6f}", f"{gv:.8f}", f"{gpv:.8f}"])
    print(f"wrote {path} ({len(betas)} beta values, {n} samples each)")
    return EXIT_OK


def cmd_bdrate(anchor_csv: str, test_csv: str) -> int:
    try:
        anchor = RDCurve.from_csv(Path(anchor_csv).read_text())
        test = RDCurve.from_csv(Path(test_csv).read_text())
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(f"{bd_rate(anchor, test):.2f}")
    return EXIT_OK


def cmd_synth(count: int, size: int, kinds, seed: int, out_dir: str) -> int:
    images = synthetic_dataset(count, size, kinds, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        write_ppm(out / f"img_{i:04d}.ppm", images[i])
    print(f"wrote {count} images to {out}")
    return EXIT_OK


# -- argparse ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynaquant",
                                description="Quantization-aware training toolkit "
                                            "with dynamic bit-width selection.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training job from a config file")
    t.add_argument("config", help="path to key=value run config")

    e = sub.add_parser("eval", help="evaluate a checkpoint on an image directory")
    e.add_argument("checkpoint")
    e.add_argument("image_dir")
    e.add_argument("--out", default="runs/eval")
    e.add_argument("--lambda", dest="lambda_rd", type=float, default=None)

    a = sub.add_parser("ablate", help="run an ablation suite")
    a.add_argument("suite", choices=ABLATION_SUITES)
    a.add_argument("--config", default=None)
    a.add_argument("--out", default="runs/ablation")

    d = sub.add_parser("proxy-dump", help="dump the gradient proxy g and g'")
    d.add_argument("--betas", default="1,2,5,10")
    d.add_argument("--samples-per-unit", type=int, default=200)
    d.add_argument("--out", default="proxy.csv")

    b = sub.add_parser("bdrate", help="BD-rate between two RD-curve CSV files")
    b.add_argument("anchor_csv")
    b.add_argument("test_csv")

    s = sub.add_parser("synth", help="write a synthetic PPM dataset")
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--kinds", default=",".join(KINDS))
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", default="runs/dataset")

    return p


def dispatch(args: argparse.Namespace) -> int:
    if args.command == "train":
        return cmd_train(args.config)
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.image_dir, args.out, args.lambda_rd)
    if args.command == "ablate":
        return cmd_ablate(args.suite, args.config, args.out)
    if args.command == "proxy-dump":
        return cmd_proxy_dump(_parse_float_list(args.betas),
                              args.samples_per_unit, args.out)
    if args.command == "bdrate":
        return cmd_bdrate(args.anchor_csv, args.test_csv)
    if args.command == "synth":
        try:
            return cmd_synth(args.count, args.size, _parse_str_list(args.kinds),
                             args.seed, args.out)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
