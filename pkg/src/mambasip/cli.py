"""Command-line entry point.

Exit status: 0 ok, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import bench as bench_mod
from .blocks import BINAURAL_VARIANTS, VARIANTS
from .data_io import (
    FixtureSpec,
    FormatError,
    NormStats,
    compute_norm_stats,
    gen_fixtures,
    load_dataset,
    load_manifest,
    select_split,
    write_checkpoint,
)
from .evaluation import (
    ConfigMismatch,
    evaluate,
    load_model,
    make_checkpoint,
    pooling_sweep,
    write_predictions,
    write_sweep,
)
from .model import ModelConfig, count_params, init_params
from .numerics import NonFiniteError
from .training import TrainConfig, TrainingDiverged, predict_dataset, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# published totals in millions, for side-by-side comparison
PUBLISHED_MONO = {
    "transformer": 4.05, "transformer-no-skip": 4.05, "transformer-no-mlp": 2.86,
    "uni-mamba": 3.24, "uni-mamba+skip": 3.24, "uni-mamba+mlp": 4.42,
    "bi-mamba": 4.20, "bi-mamba+skip": 4.20, "bi-mamba+mlp": 5.38,
    "uni-lstm": 3.46, "bi-lstm": 4.94,
}
PUBLISHED_BINAURAL = {
    "transformer": 5.23, "uni-mamba": 3.53, "uni-mamba+mlp": 4.72, "bi-mamba": 5.01, "bi-mamba+mlp": 6.27,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def load_run_config(path: str | Path | None, overrides: dict | None = None) -> tuple[ModelConfig, TrainConfig]:
    """JSON file with optional "model" and "train" objects."""
    raw = {} if path is None else json.loads(Path(path).read_text())
    unknown = set(raw) - {"model", "train"}
    if unknown:
        raise ValueError(f"{path}: unknown top-level keys {sorted(unknown)}")
    model = dict(raw.get("model", {}))
    model.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ModelConfig.from_dict(model), TrainConfig.from_dict(raw.get("train", {}))


def cmd_gen_fixtures(a) -> int:
    spec = FixtureSpec(n_train=a.n_train, n_val=a.n_val, n_test=a.n_test, layers=a.layers,
                       frames=a.frames, d_in=a.d_in, binaural=not a.mono)
    entries = gen_fixtures(a.out, a.seed, spec)
    print(f"wrote {len(entries)} samples to {a.out}")
    return EXIT_OK


def cmd_stats(a) -> int:
    entries = select_split(load_manifest(a.manifest), a.split)
    if not entries:
        raise FormatError(f"{a.manifest}: split {a.split!r} is empty")
    stats = compute_norm_stats(entries, Path(a.manifest).parent, source=a.split or "all")
    stats.save(a.out)
    print(f"stats over {len(entries)} samples -> {a.out}")
    return EXIT_OK


def _datasets(manifest: str, cfg: ModelConfig, stats_path: str | None):
    entries = load_manifest(manifest)
    root = Path(manifest).parent
    train_entries = select_split(entries, "train")
    if not train_entries:
        raise FormatError(f"{manifest}: no training samples")
    stats = NormStats.load(stats_path) if stats_path else compute_norm_stats(train_entries, root, "train")
    sets = {}
    for split in ("train", "val", "test"):
        chosen = select_split(entries, split)
        sets[split] = load_dataset(chosen, root, stats, cfg.binaural, name=split) if chosen else None
    return sets, stats


def _check_dims(cfg: ModelConfig, data) -> None:
    shape = data.feats_l[0].shape
    if (shape[0], shape[2]) != (cfg.layers, cfg.d_in):
        raise ConfigMismatch(f"features are (L={shape[0]}, D={shape[2]}) but the model expects "
                             f"(L={cfg.layers}, D={cfg.d_in})")


def cmd_train(a) -> int:
    cfg, tcfg = load_run_config(a.config, {"variant": a.variant, "binaural": a.binaural})
    if a.steps is not None:
        tcfg = TrainConfig.from_dict({**tcfg.to_dict(), "total_steps": a.steps,
                                      "warmup_steps": min(tcfg.warmup_steps, a.steps - 1)})
    sets, stats = _datasets(a.manifest, cfg, a.stats)
    _check_dims(cfg, sets["train"])
    result = train(init_params(cfg), cfg, sets["train"], tcfg, sets["val"])
    write_checkpoint(a.out, make_checkpoint(result, cfg, tcfg, stats, with_optimizer=a.save_optimizer))
    last = result.validation[-1] if result.validation else None
    msg = f"trained {tcfg.total_steps} steps, best step {result.best_step}"
    if last:
        msg += f", final val rmse {last['rmse']:.3f}"
    print(msg + f" -> {a.out}")
    return EXIT_OK


def cmd_predict(a) -> int:
    cfg, params, stats = load_model(a.checkpoint)
    entries = select_split(load_manifest(a.manifest), a.split)
    data = load_dataset(entries, Path(a.manifest).parent, stats, cfg.binaural, name=a.split or "all")
    _check_dims(cfg, data)
    preds = predict_dataset(params, cfg, data)
    write_predictions(a.out, data.ids, preds, data.labels)
    print(f"{len(preds)} predictions -> {a.out}")
    return EXIT_OK


def cmd_eval(a) -> int:
    expect = load_run_config(a.config)[0] if a.config else None
    report = evaluate(a.checkpoint, a.manifest, a.split, expect=expect, out=a.out)
    ncc = "undefined" if report.ncc is None else f"{report.ncc:.4f}"
    print(f"{report.split}: n={report.n} rmse={report.rmse:.4f} ncc={ncc} ({report.ncc_definition})")
    return EXIT_OK


def cmd_sweep(a) -> int:
    cfg, tcfg = load_run_config(a.config, {"variant": a.variant, "binaural": a.binaural})
    sets, _ = _datasets(a.manifest, cfg, a.stats)
    _check_dims(cfg, sets["train"])
    test = sets["test"] or sets["val"]
    if test is None:
        raise FormatError(f"{a.manifest}: sweep needs a test or val split")
    rows = pooling_sweep(cfg, sets["train"], test, tcfg, a.pools, sets["val"], log=print)
    write_sweep(a.out, cfg.variant, rows)
    print(f"sweep -> {a.out}")
    return EXIT_OK


def cmd_bench(a) -> int:
    reports = []
    for kind in a.kinds:
        r = bench_mod.bench_scaling(kind, a.lengths, a.d, a.reps, a.seed)
        reports.append(r)
        flag = f" (flagged: {r.flagged})" if r.flagged else ""
        print(f"{kind}: exponent {r.exponent:.3f}{flag}")
    if a.out:
        bench_mod.write_bench(a.out, reports)
    for row in bench_mod.stepwise_memory(a.memory_lengths, a.d, a.seed):
        print(f"stepwise T={row['length']}: state {row['state_bytes']} B, peak {row['peak_bytes']} B")
    return EXIT_OK


def param_table(variant: str | None = None, binaural: bool | None = None) -> list[tuple[str, str, int, float]]:
    rows = []
    for mode, table in (("mono", PUBLISHED_MONO), ("binaural", PUBLISHED_BINAURAL)):
        if binaural is not None and binaural != (mode == "binaural"):
            continue
        for v, pub in table.items():
            if variant is None or v == variant:
                rows.append((mode, v, count_params(ModelConfig(variant=v, binaural=mode == "binaural")), pub))
    return rows


def cmd_param_count(a) -> int:
    binaural = True if a.binaural else False if a.mono else None
    rows = param_table(a.variant, binaural)
    if not rows:
        raise UsageError(f"no published row for variant {a.variant!r} in the requested mode")
    print(f"{'mode':9s}{'variant':22s}{'params':>12s}{'millions':>10s}{'published':>11s}{'diff':>8s}")
    for mode, v, n, pub in rows:
        print(f"{mode:9s}{v:22s}{n:12d}{n / 1e6:10.2f}{pub:11.2f}{(n / 1e6 - pub) / pub:+8.2%}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mambasip", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-fixtures", help="write a synthetic planted-rule dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-train", type=int, default=64)
    g.add_argument("--n-val", type=int, default=16)
    g.add_argument("--n-test", type=int, default=32)
    g.add_argument("--layers", type=int, default=4)
    g.add_argument("--frames", type=int, default=40)
    g.add_argument("--d-in", type=int, default=32)
    g.add_argument("--mono", action="store_true", help="left ear only")
    g.set_defaults(func=cmd_gen_fixtures)

    s = sub.add_parser("stats", help="per-layer feature normalisation statistics")
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--out", required=True, help=".npz output")
    s.set_defaults(func=cmd_stats)

    def model_flags(q):
        q.add_argument("--manifest", required=True)
        q.add_argument("--config", help="JSON with optional 'model' and 'train' objects")
        q.add_argument("--variant", choices=VARIANTS)
        mode = q.add_mutually_exclusive_group()
        mode.add_argument("--binaural", action="store_true", default=None)
        mode.add_argument("--mono", dest="binaural", action="store_false", default=None)
        q.add_argument("--stats", help="normalisation .npz; computed from the train split if omitted")

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    model_flags(t)
    t.add_argument("--steps", type=int, help="override train.total_steps")
    t.add_argument("--out", required=True)
    t.add_argument("--save-optimizer", action="store_true")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="write per-sample predictions as CSV")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--manifest", required=True)
    pr.add_argument("--split", default="test")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="RMSE/NCC report for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--config", help="reject the checkpoint unless its model config matches")
    e.add_argument("--out", help="JSON report path")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep-pooling", help="train/test one model per pooling size")
    model_flags(w)
    w.add_argument("--pools", type=int, nargs="+", default=[20, 10, 5])
    w.add_argument("--out", required=True, help="CSV output")
    w.set_defaults(func=cmd_sweep)

    b = sub.add_parser("bench", help="forward-time scaling of attention vs Mamba")
    b.add_argument("--kinds", nargs="+", choices=bench_mod.KINDS, default=["attention", "mamba"])
    b.add_argument("--lengths", type=int, nargs="+", default=[256, 512, 1024, 2048, 4096, 8192])
    b.add_argument("--memory-lengths", type=int, nargs="+", default=[64, 256, 1024])
    b.add_argument("--d", type=int, default=384)
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="CSV output")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("param-count", help="trainable parameters per variant at full size")
    c.add_argument("--variant", choices=sorted(set(VARIANTS) | set(BINAURAL_VARIANTS)))
    mode = c.add_mutually_exclusive_group()
    mode.add_argument("--mono", action="store_true")
    mode.add_argument("--binaural", action="store_true")
    c.set_defaults(func=cmd_param_count)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        # FormatError, ConfigMismatch, ShapeError and JSON errors are ValueErrors
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
