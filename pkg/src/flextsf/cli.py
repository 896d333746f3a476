"""Command-line entry point.

    flextsf <command> [--config FILE] [--key value ...]

Every run resolves one flat configuration (defaults, then the YAML file, then
flag overrides), echoes it to ``<out_dir>/config.echo`` and writes its
artifacts next to it. Passing the echo back through ``--config`` repeats the
run exactly. Failures print one ``error kind=... exit=... message=...`` line
on stderr and exit with the code listed in ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import checkpoint as ckpt_io
from .data import (SYNTHETIC_KINDS, DataError, Dataset, load_csv, load_manifest, make_synthetic,
                   save_manifest, write_csv)
from .model import REFERENCE_CLASSIC_PARAMETERS, FlexTSF, ModelConfig
from .optim import make_rng, rng_state
from .training import (GlobalStats, TrainingDiverged, TrainRegime, ablation_suite,
                       evaluate_mse, few_shot_finetune, train)

log = logging.getLogger("flextsf")

COMMANDS = ("synth", "train", "pretrain", "finetune", "eval", "forecast", "ablate")

EXIT_CODES = {
    "ok": 0,
    "internal": 1,
    "usage": 2,
    "config": 3,
    "missing_file": 4,
    "data": 5,
    "checkpoint": 6,
    "diverged": 7,
}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind
        self.code = EXIT_CODES[kind]


def _opt(default, doc: str):
    return field(default=default, metadata={"doc": doc})


@dataclass
class RunConfig:
    """Every tunable of every command; unused keys are simply ignored by a command."""

    seed: int = _opt(0, "single source of all randomness")
    out_dir: str = _opt("out", "directory receiving all artifacts")
    data: str = _opt("", "input CSV (comma-separated list for pretrain)")
    manifest: str = _opt("", "optional dataset manifest (YAML)")
    checkpoint: str = _opt("", "input checkpoint for finetune/eval/forecast")
    split: str = _opt("test", "split evaluated by eval/forecast")
    raw_scale: bool = _opt(False, "also report MSE in raw units")
    figures: bool = _opt(True, "render PNG figures next to the reports")
    # synth
    kind: str = _opt("sine", f"synthetic family: {', '.join(SYNTHETIC_KINDS)}")
    n_series: int = _opt(200, "synthetic series count")
    min_length: int = _opt(60, "shortest synthetic series")
    max_length: int = _opt(120, "longest synthetic series")
    irregular: bool = _opt(True, "exponential gaps instead of a regular grid")
    mask_fraction: float = _opt(-1.0, "fraction of hidden points (negative: family default)")
    time_unit: float = _opt(1.0, "seconds per synthetic time step")
    period_min: float = _opt(12.0, "shortest period in time steps")
    period_max: float = _opt(36.0, "longest period in time steps")
    amplitude_scale: float = _opt(1.0, "multiplier on synthetic values")
    offset: float = _opt(0.0, "constant added to synthetic values")
    noise: float = _opt(0.05, "relative observation noise")
    # model
    patch_len: int = _opt(8, "points per patch")
    latent_dim: int = _opt(64, "latent size d_z")
    heads: int = _opt(4, "attention heads")
    head_dim: int = _opt(16, "per-head width")
    layers: int = _opt(2, "attention layers")
    solver: str = _opt("flow", "latent solver: flow or rk4")
    solver_hidden: int = _opt(64, "solver hidden width")
    rk4_steps_per_unit: float = _opt(4.0, "RK4 steps per unit of normalized time")
    rotary_base: float = _opt(10000.0, "rotary frequency base")
    tau_scale: float = _opt(1.0, "multiplier on time indicators before rotation")
    kl_weight: float = _opt(1.0, "weight of the KL term")
    sampling: str = _opt("sample", "latent use in training: sample or mean")
    h_max: int = _opt(4, "horizon patches per pre-training draw")
    max_positions: int = _opt(512, "index embeddings when rotary is disabled")
    disable_vt_norm: bool = _opt(False, "ablation: raw values and times")
    disable_ivp_patcher: bool = _opt(False, "ablation: flat linear patch maps")
    disable_led_extras: bool = _opt(False, "ablation: no leader node, no rotary")
    # optimization
    lr: float = _opt(-1.0, "learning rate (negative: regime default)")
    batch_size: int = _opt(64, "examples per step")
    weight_decay: float = _opt(-1.0, "weight decay (negative: regime default)")
    epochs: int = _opt(30, "epoch budget")
    patience: int = _opt(10, "early-stopping patience in epochs")
    warmup_steps: int = _opt(-1, "pre-training warm-up steps (negative: regime default)")
    kl_warmup: float = _opt(0.1, "fraction of steps over which the KL weight ramps up")
    random_cuts: bool = _opt(False, "draw a random context/target cut per series every epoch")
    grad_clip: float = _opt(1.0, "global gradient-norm cap (0: off)")
    max_seconds: float = _opt(0.0, "wall-clock cap per training run (0: none)")
    # forecasting and few-shot
    horizon: int = _opt(24, "points forecast past the end of each series")
    step: float = _opt(0.0, "spacing of forecast times (0: median gap of the series)")
    ks: str = _opt("0,10,50,100,500", "few-shot sample counts")

    # -- construction --------------------------------------------------------
    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def resolve(cls, file_values: dict, overrides: dict) -> RunConfig:
        merged = {}
        for source in (file_values, overrides):
            unknown = sorted(set(source) - set(cls.keys()))
            if unknown:
                raise CliError("config", f"unknown keys: {', '.join(unknown)}")
            merged.update(source)
        kwargs = {}
        for f in fields(cls):
            if f.name in merged:
                kwargs[f.name] = _coerce(f.name, merged[f.name], type(f.default))
        return cls(**kwargs)

    def to_text(self) -> str:
        return yaml.safe_dump(dataclasses.asdict(self), sort_keys=True)

    # -- derived objects -------------------------------------------------------
    def model_config(self) -> ModelConfig:
        raw = {f.name: getattr(self, f.name) for f in fields(ModelConfig)}
        try:
            return ModelConfig(**raw)
        except ValueError as exc:
            raise CliError("config", str(exc)) from None

    def regime(self, kind: str) -> TrainRegime:
        overrides = dict(batch_size=self.batch_size, epochs=self.epochs, patience=self.patience,
                         kl_warmup=self.kl_warmup, random_cuts=self.random_cuts,
                         grad_clip=self.grad_clip, seed=self.seed)
        if self.lr > 0:
            overrides["lr"] = self.lr
        if self.weight_decay >= 0:
            overrides["weight_decay"] = self.weight_decay
        if self.warmup_steps >= 0:
            overrides["warmup_steps"] = self.warmup_steps
        return TrainRegime.for_kind(kind, **overrides)

    def k_grid(self) -> list[int]:
        try:
            ks = [int(k) for k in self.ks.split(",") if k.strip()]
        except ValueError:
            raise CliError("config", f"ks must be comma-separated integers, got {self.ks!r}") from None
        if not ks or any(k < 0 for k in ks):
            raise CliError("config", "ks must list non-negative integers")
        return ks


def _coerce(name: str, value, kind: type):
    if kind is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise CliError("config", f"{name}: expected a boolean, got {value!r}")
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise CliError("config", f"{name}: expected {kind.__name__}, got {value!r}") from None


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flextsf",
        description="Forecasting for irregular and regular time series.",
        epilog="Any configuration key may be overridden as --key value "
               "(dashes and underscores are interchangeable).",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", metavar="command")
    docs = {
        "synth": "write a synthetic corpus (data.csv, manifest.yaml)",
        "train": "classic supervised training on one dataset",
        "pretrain": "self-supervised training on random sub-sequences of several datasets",
        "finetune": "few-shot fine-tuning of the input/output layers over the ks grid",
        "eval": "test-split MSE of a checkpoint with naive baselines",
        "forecast": "forecast past the end of every series in a split",
        "ablate": "train the base model and each single-component ablation",
    }
    key_help = "\n".join(f"  --{f.name.replace('_', '-'):<22} {f.metadata['doc']} "
                         f"(default: {f.default!r})" for f in fields(RunConfig))
    for name in COMMANDS:
        p = sub.add_parser(name, help=docs[name], description=docs[name],
                           epilog="configuration keys:\n" + key_help,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="YAML file of configuration keys")
    return parser


def parse_overrides(tokens: Sequence[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    it = iter(tokens)
    for token in it:
        if not token.startswith("--"):
            raise CliError("usage", f"unexpected argument {token!r}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise CliError("usage", f"missing value for {token}")
        out[key.replace("-", "_")] = value
    return out


def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError("missing_file", f"config file not found: {path}")
    try:
        raw = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise CliError("config", f"cannot parse {path}: {str(exc).splitlines()[0]}") from None
    if not isinstance(raw, dict):
        raise CliError("config", f"{path} must hold a mapping of keys to values")
    return raw


# -- shared helpers ----------------------------------------------------------------

def _require(path: str, what: str) -> Path:
    if not path:
        raise CliError("config", f"--{what} is required for this command")
    p = Path(path)
    if not p.is_file():
        raise CliError("missing_file", f"{what} not found: {path}")
    return p


def _load_dataset(path: str, manifest: str = "") -> Dataset:
    p = _require(path, "data")
    man = None
    if manifest:
        man = load_manifest(_require(manifest, "manifest"))
    else:
        sibling = p.with_name("manifest.yaml")
        if sibling.is_file():
            man = load_manifest(sibling)
    return load_csv(p, man)


def _load_model(cfg: RunConfig) -> FlexTSF:
    ck = ckpt_io.load(_require(cfg.checkpoint, "checkpoint"))
    return ck.to_model()


def _write_metrics(path: Path, rows: Sequence[dict]) -> None:
    cols = ["dataset", "variant", "seed", "k", "mse"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: ("" if r.get(c) is None else r[c]) for c in cols})


def _fmt(x: float) -> str:
    return repr(float(x))


def _report_rows(report) -> list[dict]:
    rows = [dict(dataset=report.dataset, variant=report.variant, seed=report.seed, k=report.k,
                 mse=_fmt(report.mse))]
    for name, v in sorted(report.baselines.items()):
        rows.append(dict(dataset=report.dataset, variant=f"baseline:{name}", seed=report.seed,
                         k=None, mse=_fmt(v)))
    return rows


def _write_text(path: Path, blocks: Sequence[tuple[str, object]]) -> None:
    """Sections separated by ``--- name`` lines, each a YAML document."""
    parts = []
    for name, body in blocks:
        text = body if isinstance(body, str) else yaml.safe_dump(body, sort_keys=True)
        parts.append(f"--- # {name}\n{text}")
    path.write_text("".join(parts))


def _history_block(history: Sequence[dict]) -> list[dict]:
    return [{k: (float(v) if isinstance(v, float) else v) for k, v in h.items()} for h in history]


def _save_checkpoint(model: FlexTSF, out: Path, seed: int, meta: dict) -> None:
    rng = make_rng(seed)
    ckpt_io.save(ckpt_io.Checkpoint.from_model(model, rng_state(rng), meta), out / "checkpoint.bin")


def _forecast_items(model: FlexTSF, report, dataset: Dataset, split: str, stats: GlobalStats):
    from .training import build_examples
    from .vtnorm import denormalize

    exs = build_examples(dataset.split(split), stats, raw=False)
    items = []
    for e, pred, truth in zip(exs, report.predictions, report.targets):
        f = e.features
        items.append((e.context.series_id, denormalize(e.context.values, f)[e.context.observed],
                      denormalize(pred, f), denormalize(truth, f), e))
    return items


# -- commands ----------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, out: Path) -> dict:
    if cfg.kind not in SYNTHETIC_KINDS:
        raise CliError("config", f"kind must be one of {', '.join(SYNTHETIC_KINDS)}")
    ds = make_synthetic(cfg.kind, cfg.n_series, (cfg.min_length, cfg.max_length), cfg.seed,
                        irregular=cfg.irregular, time_unit=cfg.time_unit,
                        mask_fraction=None if cfg.mask_fraction < 0 else cfg.mask_fraction,
                        period_range=(cfg.period_min, cfg.period_max),
                        amplitude_scale=cfg.amplitude_scale, offset=cfg.offset, noise=cfg.noise)
    write_csv(ds.series, out / "data.csv")
    save_manifest(ds.manifest, out / "manifest.yaml")
    counts = {s: len(ds.split(s)) for s in ("train", "val", "test")}
    _write_text(out / "report.txt", [("dataset", {"name": ds.name, "series": len(ds.series),
                                                  "points": int(sum(len(s) for s in ds.series)),
                                                  "splits": counts})])
    if cfg.figures:
        from .plotting import plot_series
        plot_series(ds.series, out / "series.png")
    return {"series": len(ds.series)}


def _train_like(cfg: RunConfig, out: Path, kind: str) -> dict:
    paths = [p for p in cfg.data.split(",") if p.strip()] if kind == "pretrain" else [cfg.data]
    if not paths:
        raise CliError("config", "--data is required for this command")
    datasets = [_load_dataset(p.strip(), cfg.manifest if len(paths) == 1 else "") for p in paths]
    model = FlexTSF(cfg.model_config(), cfg.seed)
    result = train(model, datasets if kind == "pretrain" else datasets[0], cfg.regime(kind),
                   max_seconds=cfg.max_seconds or None)
    reports = [evaluate_mse(model, ds, "test", seed=cfg.seed, raw_scale=cfg.raw_scale)
               for ds in datasets]
    _save_checkpoint(model, out, cfg.seed, {"regime": kind, "best_epoch": result.best_epoch})
    blocks = [(f"test {r.dataset}", r.to_dict()) for r in reports]
    blocks.append(("model", {"parameters": model.count_parameters(),
                             "reference_parameters": REFERENCE_CLASSIC_PARAMETERS,
                             "best_epoch": result.best_epoch, "steps": result.steps}))
    blocks.append(("history", _history_block(result.history)))
    _write_text(out / "report.txt", blocks)
    _write_metrics(out / "metrics.csv", [row for r in reports for row in _report_rows(r)])
    if cfg.figures:
        from .plotting import plot_history
        plot_history(result.history, out / "training.png")
    return {"mse": reports[0].mse}


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    return _train_like(cfg, out, "classic")


def cmd_pretrain(cfg: RunConfig, out: Path) -> dict:
    return _train_like(cfg, out, "pretrain")


def cmd_finetune(cfg: RunConfig, out: Path) -> dict:
    model = _load_model(cfg)
    ds = _load_dataset(cfg.data, cfg.manifest)
    ks = cfg.k_grid()
    regime = cfg.regime("finetune")
    tuned: dict[int, FlexTSF] = {}
    reports = few_shot_finetune(model, ds, ks, regime, keep=tuned)
    # the checkpoint holds the model fine-tuned on the last k of the grid
    _save_checkpoint(tuned[ks[-1]], out, cfg.seed, {"regime": "finetune", "k": ks[-1]})
    _write_text(out / "report.txt", [(f"k={r.k}", r.to_dict()) for r in reports])
    _write_metrics(out / "metrics.csv", [row for r in reports for row in _report_rows(r)[:1]]
                   + _report_rows(reports[0])[1:])
    if cfg.figures:
        from .plotting import plot_few_shot
        plot_few_shot([r.k for r in reports], [r.mse for r in reports], out / "few_shot.png",
                      reports[0].baselines.get("mean"))
    return {"mse": reports[-1].mse}


def cmd_eval(cfg: RunConfig, out: Path) -> dict:
    model = _load_model(cfg)
    ds = _load_dataset(cfg.data, cfg.manifest)
    stats = GlobalStats.fit(ds)
    report = evaluate_mse(model, ds, cfg.split, stats, raw_scale=cfg.raw_scale, seed=cfg.seed)
    _write_text(out / "report.txt", [(f"{cfg.split} {report.dataset}", report.to_dict())])
    _write_metrics(out / "metrics.csv", _report_rows(report))
    if cfg.figures:
        from .plotting import plot_forecasts
        items = _forecast_items(model, report, ds, cfg.split, stats)
        plot_forecasts([(sid, e.context.times[e.context.observed], cx, e.target.times, p, t)
                        for sid, cx, p, t, e in items], out / "eval.png")
    return {"mse": report.mse}


def _horizon_times(times: np.ndarray, horizon: int, step: float) -> np.ndarray:
    if step <= 0:
        step = float(np.median(np.diff(times))) if len(times) > 1 else 1.0
    return times[-1] + step * np.arange(1, horizon + 1)


def cmd_forecast(cfg: RunConfig, out: Path) -> dict:
    if cfg.horizon < 1:
        raise CliError("config", "horizon must be at least 1")
    model = _load_model(cfg)
    ds = _load_dataset(cfg.data, cfg.manifest)
    stats = GlobalStats.fit(ds)
    series = ds.split(cfg.split)
    rows, items = [], []
    for s in series:
        if not s.observed.any():
            log.warning("%s has no observed values; skipped", s.key)
            continue
        ht = _horizon_times(s.times, cfg.horizon, cfg.step)
        mu, sd = stats.for_channel(s.channel)
        pred = model.forecast(s, ht, mu, sd, stats.omega_g)
        rows.extend((s.series_id, s.channel, _fmt(t), _fmt(v)) for t, v in zip(ht, pred))
        items.append((s.key, s.times[s.observed], s.values[s.observed], ht, pred, None))
    with open(out / "forecast.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series_id", "channel", "time", "value_pred"])
        w.writerows(rows)
    _write_text(out / "report.txt", [("forecast", {"dataset": ds.name, "split": cfg.split,
                                                   "series": len(items), "horizon": cfg.horizon,
                                                   "rows": len(rows)})])
    if cfg.figures:
        from .plotting import plot_forecasts
        plot_forecasts(items, out / "forecast.png")
    return {"rows": len(rows)}


def cmd_ablate(cfg: RunConfig, out: Path) -> dict:
    ds = _load_dataset(cfg.data, cfg.manifest)
    base_cfg = dataclasses.replace(cfg.model_config(), disable_vt_norm=False,
                                   disable_ivp_patcher=False, disable_led_extras=False)
    base = FlexTSF(base_cfg, cfg.seed)
    regime = cfg.regime("classic")
    rows = ablation_suite(ds, base, regime)
    table = [{"variant": r.variant, "mse": float(r.mse), "mse_change_pct": round(r.delta_pct, 6)}
             for r in rows]
    _write_text(out / "report.txt", [("ablation", {"dataset": ds.name, "seed": cfg.seed,
                                                   "rows": table})])
    _write_metrics(out / "metrics.csv", [dict(dataset=ds.name, variant=r.variant, seed=cfg.seed,
                                              k=None, mse=_fmt(r.mse)) for r in rows])
    _save_checkpoint(base, out, cfg.seed, {"regime": "classic"})
    if cfg.figures:
        from .plotting import plot_ablation
        plot_ablation(rows, out / "ablation.png")
    return {"rows": len(rows)}


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "pretrain": cmd_pretrain,
            "finetune": cmd_finetune, "eval": cmd_eval, "forecast": cmd_forecast,
            "ablate": cmd_ablate}


def _emit_error(kind: str, message: str) -> int:
    code = EXIT_CODES[kind]
    print(f"error kind={kind} exit={code} message={json.dumps(message)}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return _emit_error("usage", "a command is required")
    try:
        cfg = RunConfig.resolve(load_config_file(args.config), parse_overrides(rest))
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.echo").write_text(cfg.to_text())
        summary = HANDLERS[args.command](cfg, out)
    except CliError as exc:
        return _emit_error(exc.kind, str(exc))
    except FileNotFoundError as exc:
        return _emit_error("missing_file", str(exc))
    except ckpt_io.CheckpointError as exc:
        return _emit_error("checkpoint", str(exc))
    except DataError as exc:
        return _emit_error("data", str(exc))
    except TrainingDiverged as exc:
        return _emit_error("diverged", str(exc))
    print(f"ok command={args.command} out={out} " + " ".join(f"{k}={v}" for k, v in summary.items()))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
