"""Train a small model on planted-rule fixtures and compare it with a constant predictor.

    python3 scripts/learnability.py --variant bi-mamba --binaural --steps 1000
"""

import argparse
import tempfile

import numpy as np

from mambasip.data_io import FixtureSpec, compute_norm_stats, gen_fixtures, load_dataset, select_split
from mambasip.metrics import ncc, rmse
from mambasip.model import ModelConfig, init_params
from mambasip.training import TrainConfig, predict_dataset, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variant", default="uni-mamba")
    ap.add_argument("--binaural", action="store_true")
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--d", type=int, default=32)
    ap.add_argument("--pool", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data", help="fixture directory (a temporary one by default)")
    a = ap.parse_args()

    root = a.data or tempfile.mkdtemp(prefix="mambasip-")
    spec = FixtureSpec(binaural=a.binaural)
    entries = gen_fixtures(root, a.seed, spec)
    stats = compute_norm_stats(select_split(entries, "train"), root)
    sets = {s: load_dataset(select_split(entries, s), root, stats, a.binaural, s) for s in ("train", "val", "test")}

    cfg = ModelConfig(variant=a.variant, binaural=a.binaural, d=a.d, layers=spec.layers, d_in=spec.d_in,
                      pool=a.pool, seed=a.seed)
    tcfg = TrainConfig(total_steps=a.steps, warmup_steps=max(1, a.steps // 20), lr=a.lr, seed=a.seed)
    res = train(init_params(cfg), cfg, sets["train"], tcfg, sets["val"])
    for v in res.validation:
        print(f"step {v['step']:5d}  val rmse {v['rmse']:7.3f}")

    test = sets["test"]
    preds = predict_dataset(res.params, cfg, test)
    base = rmse(np.full(len(test), sets["train"].labels.mean()), test.labels)
    score = rmse(preds, test.labels)
    print(f"best step {res.best_step}")
    print(f"test rmse {score:.3f}  constant baseline {base:.3f}  ({1 - score / base:.1%} lower)")
    print(f"test ncc  {ncc(preds, test.labels):.4f}")


if __name__ == "__main__":
    main()
