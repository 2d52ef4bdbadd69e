"""Pooling-size sweep on planted-rule fixtures; writes the p-by-variant RMSE table as CSV."""

import argparse
import tempfile

from mambasip.data_io import FixtureSpec, compute_norm_stats, gen_fixtures, load_dataset, select_split
from mambasip.evaluation import pooling_sweep, write_sweep
from mambasip.model import ModelConfig
from mambasip.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--variants", nargs="+", default=["uni-mamba", "bi-mamba"])
    ap.add_argument("--pools", type=int, nargs="+", default=[20, 10, 5])
    ap.add_argument("--binaural", action="store_true")
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-prefix", default="sweep")
    a = ap.parse_args()

    root = tempfile.mkdtemp(prefix="mambasip-")
    spec = FixtureSpec(binaural=a.binaural)
    entries = gen_fixtures(root, a.seed, spec)
    stats = compute_norm_stats(select_split(entries, "train"), root)
    sets = {s: load_dataset(select_split(entries, s), root, stats, a.binaural, s) for s in ("train", "val", "test")}
    tcfg = TrainConfig(total_steps=a.steps, warmup_steps=max(1, a.steps // 20), seed=a.seed)

    for variant in a.variants:
        base = ModelConfig(variant=variant, binaural=a.binaural, d=32, layers=spec.layers, d_in=spec.d_in, seed=a.seed)
        rows = pooling_sweep(base, sets["train"], sets["test"], tcfg, a.pools, sets["val"],
                             log=lambda s, v=variant: print(f"{v}: {s}"))
        path = f"{a.out_prefix}-{variant}.csv"
        write_sweep(path, variant, rows)
        print(f"-> {path}")


if __name__ == "__main__":
    main()
