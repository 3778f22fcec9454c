"""Train the descriptor on the two-sphere fixture and print every evaluation.

    python3 scripts/fixture_experiment.py --seed 0 --steps 2000 --dim 3
"""
import argparse
import time

from donpipe import fixtures as fx
from donpipe.descriptor import encode, init_params
from donpipe.keypoints import select_references
from donpipe.metrics import (chance_rate, eval_discrimination, eval_occlusion, eval_pck, heldout_pairs,
                             label_to_object)


def run_once(seed: int, steps: int, dim: int, n_per_bin: int = 200, refs_per_object: int = 4, labeled=None):
    scene, cloud, tr, ho, oc = labeled or fx.labeled_fixture()
    t0 = time.perf_counter()
    res = fx.train_fixture_encoder(tr, D=dim, seed=seed, steps=steps)
    dt = time.perf_counter() - t0
    pairs = heldout_pairs(ho, n_per_bin=n_per_bin, seed=seed)
    pck = eval_pck(res.params, ho, pairs)
    lmap = label_to_object(ho)
    refs = select_references(encode(res.params, ho.frames[0]), ho.masks[0], refs_per_object, seed=seed,
                             frame_id=ho.frames[0].frame_id)
    disc = eval_discrimination(res.params, ho, refs, lmap)
    occ = eval_occlusion(res.params, oc, refs, [o.center for o in fx.TWO_SPHERES.objects], lmap)
    base = eval_pck(init_params(seed, D=dim), ho, pairs)
    return dict(train_seconds=dt, final_loss=float(sum(res.losses[-50:]) / 50), pck=pck, disc=disc, occ=occ,
                baseline=base)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--dim", type=int, default=3)
    ap.add_argument("--n-per-bin", type=int, default=200)
    a = ap.parse_args()
    r = run_once(a.seed, a.steps, a.dim, a.n_per_bin)
    print(f"seed {a.seed}  D={a.dim}  steps {a.steps}  train {r['train_seconds']:.1f}s  "
          f"last-50 loss {r['final_loss']:.4f}")
    print(r["pck"].to_text(), end="")
    d, o = r["disc"], r["occ"]
    print(f"discrimination: {d.fraction:.4f} ({d.n_correct}/{d.n_evaluated})")
    print(f"occlusion: visible {o.visible_mean:.4f} +- {o.visible_se:.4f} (n={o.n_visible}), "
          f"occluded {o.occluded_mean:.4f} +- {o.occluded_se:.4f} (n={o.n_occluded}), gap {o.gap:.4f}")
    print(f"untrained encoder PCK@3px: {r['baseline'].fraction_correct:.4f}  "
          f"chance {chance_rate(3.0, 64, 64):.5f}")


if __name__ == "__main__":
    main()
