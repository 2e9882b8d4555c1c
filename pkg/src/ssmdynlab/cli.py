"""Experiment runner for the library: one subcommand per analysis.

Run layout: every invocation owns one output directory. The directory is
locked for the duration of the run (a `.lock` file created exclusively),
manifest.json (resolved config, seed, worker count, library version) is
written before any result, and then the subcommand's files follow. All
report JSON and CSV files are byte-identical across reruns with the same
(config, seed, workers); wall-clock measurements are segregated into
timing.json, the one file exempt from that contract. Rendered figures
(the `report` subcommand) are likewise exempt.

Errors leave the process with a nonzero exit code and a single
`error: <message>` line on stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import itertools
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError
from .config import SCHEMAS, ConfigError, load_config
from .data import gen_selective_copy, load_text_corpus
from .dynamics import (
    Perturb,
    divergence_probe,
    fit_deviation_rate,
    lyapunov_closed_form,
    lyapunov_numeric,
    precision_divergence,
    realized_delta_bars,
)
from .lora import (
    TargetStrategy,
    load_adapters,
    save_adapters,
    select_targets,
    trainable_param_count,
    tying_report_from_delta,
)
from .model import init_toy_model, save_model
from .ssm import BufferMode, random_contracting_params, random_params, scan_parallel, scan_sequential
from .train import SIZE_PRESETS, TrainConfig, evaluate, policy_preset, train_loop

SCHEMA_VERSION = 1


class CliError(Exception):
    """Failure with a chosen exit code; the message becomes the stderr line."""

    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    return value


def write_json(path, payload: dict) -> None:
    body = {"schema_version": SCHEMA_VERSION}
    body.update(_jsonable(payload))
    text = json.dumps(body, indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(c) if isinstance(c, float) else str(c) for c in row])


@contextlib.contextmanager
def _locked_dir(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(
            f"output directory '{out}' is locked by another run (stale? remove {lock})"
        ) from None
    try:
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(OSError):
            os.unlink(lock)


def _write_manifest(out: Path, subcommand: str, cfg: dict, seed: int, workers: int) -> None:
    write_json(out / "manifest.json", {
        "library_version": __version__,
        "subcommand": subcommand,
        "seed": seed,
        "workers": workers,
        "config": cfg,
    })


# ---------------------------------------------------------------------------
# lyapunov


def run_lyapunov(cfg: dict, seed: int, workers: int, out: Path) -> None:
    if cfg["draws"] <= 0:
        raise CliError("no draws requested", code=2)
    rng = np.random.default_rng(seed)
    cells = list(itertools.product(cfg["dims"], cfg["t_lens"]))
    estimates = []
    for i in range(cfg["draws"]):
        d, t_len = cells[i % len(cells)]
        if cfg["contracting"]:
            params = random_contracting_params(rng, d, t_max=t_len)
        else:
            params = random_params(rng, d, t_max=t_len)
        u = rng.standard_normal((t_len, d))
        numeric = lyapunov_numeric(params, u)
        closed = lyapunov_closed_form(params.a_log, realized_delta_bars(params, u))
        gap = float(np.max(np.abs(numeric.per_dim - closed.per_dim)))
        estimates.append({
            "draw": i,
            "d": int(d),
            "t_len": int(t_len),
            "lambda_max": numeric.lambda_max,
            "lambda_closed": closed.lambda_max,
            "agreement_gap": gap,
            "t_used": numeric.t_used,
        })
    lams = [e["lambda_max"] for e in estimates]
    summary = {
        "draws": len(estimates),
        "max_lambda": max(lams),
        "positive_count": sum(1 for v in lams if v > 0.0),
        "max_agreement_gap": max(e["agreement_gap"] for e in estimates),
    }
    write_csv(out / "lyapunov.csv",
              ["draw", "d", "t_len", "lambda_max", "lambda_closed", "agreement_gap", "t_used"],
              [[e["draw"], e["d"], e["t_len"], e["lambda_max"], e["lambda_closed"],
                e["agreement_gap"], e["t_used"]] for e in estimates])
    write_json(out / "report.json", {"estimates": estimates, "summary": summary})


# ---------------------------------------------------------------------------
# divergence


def run_divergence(cfg: dict, seed: int, workers: int, out: Path) -> None:
    try:
        perturb = Perturb[cfg["perturb"].strip().upper()]
    except KeyError:
        raise CliError(f"unknown perturbation target '{cfg['perturb']}'", code=2) from None
    policies = [(name, policy_preset(name)) for name in cfg["policies"]]

    rng = np.random.default_rng(seed)
    d, t_len = cfg["d"], cfg["t_len"]
    probe_params = random_params(rng, d, t_max=t_len)
    probe_u = rng.standard_normal((t_len, d))
    traces = []
    for name, pol in policies:
        for eps in cfg["epsilons"]:
            tr = divergence_probe(probe_params, probe_u, eps, perturb=perturb, policy=pol)
            try:
                zeta = fit_deviation_rate(tr)
            except ValueError:
                zeta = None   # deviation hit exact zero almost everywhere
            fname = f"trace_{name}_eps{eps:.0e}.csv"
            write_csv(out / fname, ["step", "deviation"],
                      [[s + 1, float(v)] for s, v in enumerate(tr.deviations)])
            traces.append({
                "policy": name,
                "epsilon": float(eps),
                "zeta": zeta,
                "overflowed": tr.overflowed,
                "file": fname,
            })

    sums = {name: 0.0 for name, _ in policies}
    for _ in range(cfg["draws"]):
        params = random_params(rng, d, t_max=t_len)
        u = rng.standard_normal((t_len, d))
        for name, pol in policies:
            sums[name] += precision_divergence(params, u, pol).mean_divergence
    mean_divergence = {name: s / max(cfg["draws"], 1) for name, s in sums.items()}

    write_csv(out / "divergence_summary.csv", ["policy", "mean_divergence"],
              [[name, mean_divergence[name]] for name, _ in policies])
    write_json(out / "report.json", {
        "traces": traces,
        "mean_divergence": mean_divergence,
        "draws": cfg["draws"],
    })


# ---------------------------------------------------------------------------
# scan-bench


def run_scan_bench(cfg: dict, seed: int, workers: int, out: Path) -> None:
    rng = np.random.default_rng(seed)
    rows = []
    timings = []
    for t_len in cfg["t_lens"]:
        decay = rng.uniform(0.05, 0.999, size=(t_len, cfg["d"]))
        drive = rng.standard_normal((t_len, cfg["d"]))
        t0 = time.perf_counter()
        for _ in range(cfg["repeats"]):
            reference = scan_sequential(decay, drive)
        seq_seconds = (time.perf_counter() - t0) / cfg["repeats"]
        first = None
        for w in cfg["worker_counts"]:
            t0 = time.perf_counter()
            for _ in range(cfg["repeats"]):
                result = scan_parallel(decay, drive, chunk=cfg["chunk"], workers=w)
            par_seconds = (time.perf_counter() - t0) / cfg["repeats"]
            max_rel = float(np.max(np.abs(result - reference)
                                   / np.maximum(np.abs(reference), 1e-300)))
            if first is None:
                first = result
            rows.append({
                "t_len": int(t_len),
                "workers": int(w),
                "max_rel_deviation": max_rel,
                "bitwise_equal": bool(result.tobytes() == first.tobytes()),
            })
            timings.append({"t_len": int(t_len), "workers": int(w),
                            "seq_seconds": seq_seconds, "par_seconds": par_seconds})
    write_csv(out / "scan_bench.csv",
              ["t_len", "workers", "max_rel_deviation", "bitwise_equal"],
              [[r["t_len"], r["workers"], r["max_rel_deviation"], r["bitwise_equal"]]
               for r in rows])
    write_json(out / "report.json", {
        "rows": rows,
        "summary": {"max_rel_deviation": max(r["max_rel_deviation"] for r in rows),
                    "all_worker_invariant": all(r["bitwise_equal"] for r in rows)},
    })
    write_json(out / "timing.json", {
        "rows": timings,
        "note": "wall-clock seconds, excluded from the determinism contract",
    })


# ---------------------------------------------------------------------------
# train


def _resolve_train_knobs(cfg: dict) -> tuple[float, int | None]:
    """Learning rate and adapter rank, with the size preset taking precedence."""
    lr = cfg["learning_rate"]
    rank = cfg["lora_rank"] if cfg["lora_rank"] > 0 else None
    name = cfg["preset"]
    if name:
        tier = name.removeprefix("table3-")
        if tier not in SIZE_PRESETS:
            raise CliError(f"unknown size preset '{name}'", code=2)
        lr, rank = SIZE_PRESETS[tier]
    return lr, rank


def _make_streams(cfg: dict, seed: int):
    if cfg["task"] == "copy":
        train_stream = gen_selective_copy(seed, cfg["t_len"], cfg["vocab"],
                                          cfg["n_sequences"], cfg["batch_size"], k=cfg["marks"])
        eval_stream = gen_selective_copy(seed + 7919, cfg["t_len"], cfg["vocab"],
                                         cfg["eval_sequences"], cfg["batch_size"], k=cfg["marks"])
        return train_stream, eval_stream, cfg["vocab"]
    if cfg["task"] == "text":
        if not cfg["corpus"]:
            raise CliError("text task requires corpus=<path>", code=2)
        train_stream = load_text_corpus(cfg["corpus"], cfg["t_len"], cfg["batch_size"], seed)
        # no held-out split at this scale; evaluation reuses the training windows
        return train_stream, train_stream, train_stream.vocab_size
    raise CliError(f"unknown task '{cfg['task']}'", code=2)


def _train_once(cfg: dict, seed: int, lr: float, rank: int | None, policy_name: str,
                stream, eval_stream, vocab: int):
    model = init_toy_model(seed, d=cfg["d"], vocab=vocab,
                           mode=BufferMode.parse(cfg["mode"]),
                           t_max=cfg["t_max"], gated=cfg["gated"])
    tcfg = TrainConfig(
        learning_rate=lr,
        total_steps=cfg["steps"],
        batch_size=cfg["batch_size"],
        max_seq_len=cfg["t_len"],
        lora_rank=rank,
        lora_strategy=cfg["lora_strategy"],
        lora_scale=cfg["lora_scale"],
        warmup_steps=cfg["warmup_steps"],
        clip_norm=cfg["clip_norm"],
        epochs=cfg["epochs"] if cfg["steps"] > 0 else 0,
        seed=seed,
        loss_scale=cfg["loss_scale"],
    )
    policy = policy_preset(policy_name)
    metrics = train_loop(model, tcfg, policy, stream)
    result = evaluate(model, eval_stream, policy)
    return model, metrics, result


def _metrics_payload(cfg: dict, metrics, policy_name: str) -> dict:
    return {
        "config": cfg,
        "loss_trace": [float(v) for v in metrics.loss_trace],
        "atps": metrics.atps,
        "mmpt": metrics.mmpt,
        "peak_bytes": metrics.peak_bytes,
        "total_tokens": metrics.total_tokens,
        "wall_seconds": metrics.wall_seconds,
        "precision_policy": policy_name,
    }


def _steps_csv(path, metrics) -> None:
    write_csv(path, ["step", "lr", "loss", "grad_norm"],
              [[s, float(lr), float(loss), float(gn)] for s, lr, loss, gn in metrics.step_rows])


def run_train(cfg: dict, seed: int, workers: int, out: Path) -> None:
    lr, rank = _resolve_train_knobs(cfg)
    stream, eval_stream, vocab = _make_streams(cfg, seed)

    if cfg["compare"]:
        rank = rank or 8
        full_model, full_metrics, full_eval = _train_once(
            cfg, seed, lr, None, "fp32", stream, eval_stream, vocab)
        lora_model, lora_metrics, lora_eval = _train_once(
            cfg, seed, lr, rank, "bf16", stream, eval_stream, vocab)
        selection = select_targets(lora_model, TargetStrategy.parse(cfg["lora_strategy"]))
        trainable, total = trainable_param_count(lora_model, selection, rank)
        _steps_csv(out / "steps_full.csv", full_metrics)
        _steps_csv(out / "steps_lora.csv", lora_metrics)
        write_json(out / "report.json", {
            "mode": "compare",
            "full": {"peak_bytes": full_metrics.peak_bytes, "mmpt": full_metrics.mmpt,
                     "total_tokens": full_metrics.total_tokens,
                     "eval_accuracy": full_eval.accuracy, "eval_loss": full_eval.loss},
            "lora": {"rank": rank, "peak_bytes": lora_metrics.peak_bytes,
                     "mmpt": lora_metrics.mmpt, "total_tokens": lora_metrics.total_tokens,
                     "eval_accuracy": lora_eval.accuracy, "eval_loss": lora_eval.loss},
            "trainable_params": trainable,
            "total_params": total,
            "memory_ok": lora_metrics.peak_bytes < full_metrics.peak_bytes,
        })
        atps_ratio = (lora_metrics.atps / full_metrics.atps
                      if full_metrics.atps > 0 else 0.0)
        write_json(out / "timing.json", {
            "full": {"atps": full_metrics.atps, "wall_seconds": full_metrics.wall_seconds},
            "lora": {"atps": lora_metrics.atps, "wall_seconds": lora_metrics.wall_seconds},
            "atps_ratio": atps_ratio,
            "efficiency_ok": atps_ratio >= 1.0,
            "note": "throughput direction is host-dependent; efficiency_ok is a soft check",
        })
        return

    model, metrics, result = _train_once(
        cfg, seed, lr, rank, cfg["policy"], stream, eval_stream, vocab)
    _steps_csv(out / "steps.csv", metrics)
    write_json(out / "metrics.json", _metrics_payload(cfg, metrics, cfg["policy"]))
    lora_info = None
    if rank is not None:
        selection = select_targets(model, TargetStrategy.parse(cfg["lora_strategy"]))
        trainable, total = trainable_param_count(model, selection, rank)
        lora_info = {"rank": rank, "strategy": cfg["lora_strategy"],
                     "scale": cfg["lora_scale"], "targets": list(selection.targeted),
                     "trainable_params": trainable, "total_params": total}
    write_json(out / "report.json", {
        "task": cfg["task"],
        "learning_rate": lr,
        "final_loss": float(metrics.loss_trace[-1]) if metrics.loss_trace else None,
        "loss_trace": [float(v) for v in metrics.loss_trace],
        "eval_loss": result.loss,
        "eval_accuracy": result.accuracy,
        "eval_positions": result.n_positions,
        "peak_bytes": metrics.peak_bytes,
        "mmpt": metrics.mmpt,
        "total_tokens": metrics.total_tokens,
        "precision_policy": cfg["policy"],
        "lora": lora_info,
    })
    write_json(out / "timing.json", {
        "atps": metrics.atps,
        "wall_seconds": metrics.wall_seconds,
        "note": "wall-clock seconds, excluded from the determinism contract",
    })
    if metrics.total_tokens > 0:
        save_model(model, out / "final_model.ssmd")
        if model.adapters:
            save_adapters(out / "final_adapters.ssmd", model.adapters)


# ---------------------------------------------------------------------------
# lora-verify


def run_lora_verify(cfg: dict, seed: int, workers: int, out: Path) -> None:
    if not cfg["checkpoint"]:
        raise CliError("no checkpoint given", code=2)
    try:
        adapters, merged, _meta = load_adapters(cfg["checkpoint"])
    except (CheckpointError, OSError) as exc:
        raise CliError(str(exc), code=2) from exc
    role = cfg["role"]
    if role not in adapters:
        raise CliError(f"checkpoint has no adapter for role '{role}'", code=2)
    adapter = adapters[role]
    width = cfg["segment_width"] or adapter.base.shape[1] // 3
    # the *stored* merged tensor is what a doctored file would have touched
    delta = merged[role] - adapter.base
    try:
        report = tying_report_from_delta(delta, adapter.U, width)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    write_json(out / "report.json", {
        "role": role,
        "r": adapter.r,
        "scale": adapter.scale,
        "segment_width": width,
        "rank_observed": report.rank_observed,
        "segment_residuals": [float(v) for v in report.segment_residuals],
        "max_residual": max((float(v) for v in report.segment_residuals), default=0.0),
        "shared_left_factor_ok": report.shared_left_factor_ok,
    })
    if not report.shared_left_factor_ok:
        raise CliError(
            f"tying verification failed for role '{role}': "
            "update is not explained by a shared left factor")


# ---------------------------------------------------------------------------
# report


def run_report(cfg: dict, seed: int, workers: int, out: Path) -> None:
    src = Path(cfg["run_dir"]) if cfg["run_dir"] else out
    manifest_path = src / "manifest.json"
    if not manifest_path.is_file():
        raise CliError(f"no manifest.json in '{src}'", code=2)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    subcommand = manifest.get("subcommand")
    if subcommand == "report":
        raise CliError("nothing to render for a report run", code=2)
    from . import plots   # matplotlib stays out of the data-only subcommands

    figures = plots.render_run(src, out, subcommand, dpi=cfg["dpi"])
    if not figures:
        raise CliError(f"no renderable data found in '{src}'")
    write_json(out / "figures.json", {
        # In-place renders record "." so reruns into different directories
        # stay byte-identical; an explicit run_dir is echoed as configured.
        "source": cfg["run_dir"] if cfg["run_dir"] else ".",
        "source_subcommand": subcommand,
        "config": cfg,
        "figures": figures,
    })


RUNNERS = {
    "lyapunov": run_lyapunov,
    "divergence": run_divergence,
    "scan-bench": run_scan_bench,
    "train": run_train,
    "lora-verify": run_lora_verify,
    "report": run_report,
}

_HELP = {
    "lyapunov": "estimate maximal Lyapunov exponents over random blocks",
    "divergence": "perturbation and reduced-precision divergence traces",
    "scan-bench": "sequential vs parallel scan timing and equivalence",
    "train": "train the toy model (full or low-rank adapters)",
    "lora-verify": "check the shared-left-factor tying of a saved adapter",
    "report": "render figures from a finished run directory",
}


def _resolve_seed(arg_seed) -> int:
    if arg_seed is not None:
        return arg_seed
    raw = os.environ.get("SSMDYNLAB_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"invalid SSMDYNLAB_SEED value {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssmdynlab",
        description="Desk-scale experiments on selective state-space recurrences.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="INI file with per-subcommand sections")
    common.add_argument("--out", required=True, help="output directory for this run")
    common.add_argument("--seed", type=int, default=None,
                        help="RNG seed (falls back to SSMDYNLAB_SEED, then 0)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        dest="overrides", help="override a config key; wins over the file")
    common.add_argument("--workers", type=int, default=1, help="worker count for parallel scans")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SCHEMAS:
        p = sub.add_parser(name, parents=[common], help=_HELP[name])
        if name == "train":
            p.add_argument("--compare", action="store_true",
                           help="run Full-FP32 and LoRA-BF16 from the same init")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if getattr(args, "compare", False):
        overrides.append("compare=true")
    try:
        if args.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {args.workers}")
        seed = _resolve_seed(args.seed)
        cfg = load_config(args.subcommand, args.config, overrides)
        out = Path(args.out)
        # Rendering into a finished run directory must not clobber that
        # run's manifest; the report's own settings land in figures.json.
        # The source must exist before this run writes anything at all.
        in_place_report = False
        if args.subcommand == "report":
            src = Path(cfg["run_dir"]) if cfg["run_dir"] else out
            if not (src / "manifest.json").is_file():
                raise CliError(f"no manifest.json in '{src}'", code=2)
            in_place_report = src.resolve() == out.resolve()
        with _locked_dir(out):
            if not in_place_report:
                _write_manifest(out, args.subcommand, cfg, seed, args.workers)
            RUNNERS[args.subcommand](cfg, seed, args.workers, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
