"""Pipeline CLI. Every stage reads earlier stages from ``--work`` and writes its
own subdirectory there, together with the effective configuration."""
from __future__ import annotations

import argparse
import csv
import io as _io
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import io
from .correspond import PairSampler, write_samples_csv
from .descriptor import encode, init_params, train
from .fusion import cluster_objects, extract_cloud, fuse, LabeledCloud, reproject_masks
from .keypoints import activation_map, extract_keypoints, ReferenceSet, select_references
from .metrics import (eval_discrimination, eval_occlusion, eval_pck, heldout_pairs, InsufficientOcclusion,
                      label_to_object)
from .policy import (entropy_floor, mean_nll, PolicyParams, predict, read_dataset_csv, scripted_reach,
                     train_policy, write_dataset_csv)
from .scenegen import build_scene, generate_trajectory, Trajectory

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
STAGES = ["generate", "fuse", "masks", "sample", "train", "refs", "extract", "eval", "bc-train", "bc-eval", "viz"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="plain-text config file ([section] / key = value)")
    common.add_argument("--work", default="work", help="pipeline working directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--threads", type=int, default=None, help="worker cap for per-pixel stages")
    p = _Parser(prog="donpipe", description=__doc__)
    sub = p.add_subparsers(dest="cmd", parser_class=_Parser)
    for name in STAGES:
        sp = sub.add_parser(name, parents=[common])
        if name == "viz":
            sp.add_argument("--frame", type=int, default=0, help="heldout frame index to visualize")
    return p


# --- helpers -------------------------------------------------------------------

def _stage_dir(args, name) -> Path:
    d = Path(args.work) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _echo(d: Path, cfg: C.Config, args) -> None:
    io.atomic_write_text(d / "effective.cfg", f"# seed = {args.seed}\n" + cfg.dump())


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path}")
    return path


def _load_traj(args, stage, name) -> Trajectory:
    return io.load_trajectory(_need(Path(args.work) / stage / name / io.MANIFEST_NAME, f"{stage}/{name} trajectory").parent)


def _load_refs(args):
    path = _need(Path(args.work) / "refs" / "refs.csv", "reference set (run refs)")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    if not rows:
        raise ValueError(f"{path}: no references")
    labels = np.array([int(r[1]) for r in rows])
    pixels = np.array([[int(r[3]), int(r[4])] for r in rows])
    descs = np.array([[float(x) for x in r[5:]] for r in rows])
    return ReferenceSet(descs, labels, int(rows[0][2]), pixels)


def _csv_text(header, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# --- stages ----------------------------------------------------------------------

def cmd_generate(args, cfg):
    d = _stage_dir(args, "generate")
    scene = build_scene(C.scene_spec(cfg), args.seed)
    intr = C.intrinsics(cfg)
    train_t = generate_trajectory(scene, C.trajectory_spec(cfg, args.seed), intr, name="train")
    held = generate_trajectory(scene, C.trajectory_spec(cfg, args.seed + 1000, cfg.int("trajectory", "heldout_frames")),
                               intr, name="heldout")
    io.save_trajectory(train_t, d / "train")
    io.save_trajectory(held, d / "heldout")
    dspec = C.distractor_spec(cfg)
    n_dis = cfg.int("trajectory", "distractor_frames")
    if dspec is not None and n_dis >= 2:
        dis = generate_trajectory(build_scene(dspec, args.seed), C.trajectory_spec(cfg, args.seed + 2000, n_dis), intr,
                                  name="distractor")
        dis.masks = [{} for _ in dis.frames]
        io.save_trajectory(dis, d / "distractor")
    _echo(d, cfg, args)
    print(f"generated {len(train_t)} training and {len(held)} heldout frames in {d}")


def cmd_fuse(args, cfg):
    t = _load_traj(args, "generate", "train")
    spec = C.scene_spec(cfg)
    vol = fuse(t.frames, spec.workspace_min, spec.workspace_max, cfg.float("fusion", "voxel_size"))
    pts = extract_cloud(vol, spec.workspace_min, spec.workspace_max, spec.ground_plane_z)
    cloud = cluster_objects(pts, cfg.float("fusion", "cluster_radius"), cfg.int("fusion", "min_cluster_points"))
    d = _stage_dir(args, "fuse")
    io.save_cloud(d / "cloud.csv", cloud.points, cloud.labels)
    _echo(d, cfg, args)
    print(f"{len(cloud.points)} surface points in {cloud.n_labels} clusters")


def cmd_masks(args, cfg):
    pts, labels = io.load_cloud(_need(Path(args.work) / "fuse" / "cloud.csv", "labeled cloud (run fuse)"))
    cloud = LabeledCloud(pts, labels)
    tol = cfg.float("fusion", "occlusion_tol")
    d = _stage_dir(args, "masks")
    for name in ("train", "heldout", "distractor"):
        src = Path(args.work) / "generate" / name
        if not src.exists():
            continue
        t = io.load_trajectory(src)
        if name == "distractor":
            t.masks = [{} for _ in t.frames]
        else:
            t.masks = [{m.object_label: m.bits for m in reproject_masks(cloud, f, tol)} for f in t.frames]
        io.save_trajectory(t, d / name)
    _echo(d, cfg, args)
    print(f"masks for {cloud.n_labels} labels written to {d}")


def cmd_sample(args, cfg):
    t = _load_traj(args, "masks", "train")
    sampler = PairSampler(t, C.sampling_config(cfg, args.seed))
    samples = [sampler.sample() for _ in range(cfg.int("sampling", "n_samples"))]
    d = _stage_dir(args, "sample")
    buf = Path(d / "samples.csv.tmp")
    write_samples_csv(buf, samples, t)
    io.atomic_write(d / "samples.csv", buf.read_bytes())
    buf.unlink()
    _echo(d, cfg, args)
    print(f"{len(samples)} training pairs written")


def cmd_train(args, cfg):
    trajs = [_load_traj(args, "masks", "train")]
    if (Path(args.work) / "masks" / "distractor").exists():
        trajs.append(_load_traj(args, "masks", "distractor"))
    init = init_params(args.seed, cfg.int("train", "patch_radius"), cfg.int("train", "descriptor_dim"),
                       cfg.int("train", "hidden"), cfg.bool("train", "use_coords"))
    res = train(trajs, C.sampling_config(cfg, args.seed), C.loss_config(cfg), C.train_config(cfg, args.seed), init=init)
    d = _stage_dir(args, "train")
    io.save_params(d / "encoder.donparam", res.params)
    io.atomic_write_text(d / "loss.csv", _csv_text(["step", "loss"], [[i, io.fmt(x)] for i, x in enumerate(res.losses)]))
    _echo(d, cfg, args)
    print(f"trained {len(res.losses)} steps; first/last 50-step mean loss "
          f"{np.mean(res.losses[:50]):.4f} / {np.mean(res.losses[-50:]):.4f}")


def _params(args):
    return io.load_params(_need(Path(args.work) / "train" / "encoder.donparam", "encoder parameters (run train)"))


def cmd_refs(args, cfg):
    params = _params(args)
    t = _load_traj(args, "masks", "heldout")
    i = cfg.int("keypoints", "ref_frame")
    if not 0 <= i < len(t):
        raise ValueError(f"ref_frame {i} outside the heldout trajectory")
    refs = select_references(encode(params, t.frames[i]), t.masks[i], cfg.int("keypoints", "k_per_object"),
                             seed=args.seed, frame_id=t.frames[i].frame_id)
    D = refs.descriptors.shape[1]
    rows = [[k, int(lab), refs.frame_id, int(px[0]), int(px[1])] + [io.fmt(x) for x in desc]
            for k, (lab, px, desc) in enumerate(zip(refs.labels, refs.pixels, refs.descriptors))]
    d = _stage_dir(args, "refs")
    io.atomic_write_text(d / "refs.csv", _csv_text(["ref_idx", "label", "frame_id", "u", "v"] +
                                                   [f"d{j}" for j in range(D)], rows))
    _echo(d, cfg, args)
    print(f"{len(refs)} references from heldout frame {refs.frame_id}")


KP_HEADER = ["frame_id", "camera", "label", "ref_idx", "u", "v", "depth", "x", "y", "z", "u_norm", "v_norm",
             "confidence", "min_distance", "flags"]


def cmd_extract(args, cfg):
    params = _params(args)
    refs = _load_refs(args)
    t = _load_traj(args, "masks", "heldout")
    d = _stage_dir(args, "extract")
    rows = []
    for f in t.frames:
        dmap = encode(params, f)
        io.atomic_write(d / f"desc_{f.frame_id:04d}.dondesc", io.encode_descriptors(dmap))
        kps = extract_keypoints(dmap, f, refs, cfg.str("keypoints", "lift_mode"), cfg.float("keypoints", "temperature"),
                                cfg.optional_float("keypoints", "uncertain_threshold"))
        for k, (kp, lab) in enumerate(zip(kps, refs.labels)):
            rows.append([f.frame_id, 0, int(lab), k, int(kp.pixel.u), int(kp.pixel.v), io.fmt(kp.depth),
                         *(io.fmt(c) for c in kp.lift), io.fmt(kp.normalized[0]), io.fmt(kp.normalized[1]),
                         io.fmt(kp.confidence), io.fmt(kp.min_distance), kp.flags])
    io.atomic_write_text(d / "keypoints.csv", _csv_text(KP_HEADER, rows))
    _echo(d, cfg, args)
    print(f"{len(rows)} keypoints from {len(t)} frames")


def cmd_eval(args, cfg):
    params = _params(args)
    refs = _load_refs(args)
    t = _load_traj(args, "masks", "heldout")
    pairs = heldout_pairs(t, cfg.int("eval", "n_per_bin"), cfg.int("eval", "points_per_pair"),
                          cfg.float("sampling", "occlusion_tol"), args.seed)
    rep = eval_pck(params, t, pairs, cfg.float("eval", "threshold_px"))
    lines = [rep.to_text()]
    if t.ids is not None:
        lmap = label_to_object(t)
        disc = eval_discrimination(params, t, refs, lmap)
        lines.append(f"discrimination: {disc.fraction:.4f} ({disc.n_correct}/{disc.n_evaluated})\n")
        centers = [o.center for o in C.scene_spec(cfg).objects]
        try:
            occ = eval_occlusion(params, t, refs, centers, lmap)
            lines.append(f"occlusion: visible mean {occ.visible_mean:.4f} (n={occ.n_visible}), "
                         f"occluded mean {occ.occluded_mean:.4f} (n={occ.n_occluded})\n")
        except InsufficientOcclusion as e:
            lines.append(f"occlusion: n/a ({e})\n")
    d = _stage_dir(args, "eval")
    io.atomic_write_text(d / "pck.csv", rep.to_csv())
    io.atomic_write_text(d / "report.txt", "".join(lines))
    _echo(d, cfg, args)
    print("".join(lines), end="")


def _bc_demos(args, cfg, offset: int):
    params = _params(args)
    refs = _load_refs(args)
    t = _load_traj(args, "masks", "heldout")
    rng = np.random.default_rng([args.seed, offset])
    mode = cfg.str("keypoints", "lift_mode")
    demos = []
    for k in range(cfg.int("policy", "n_demos")):
        f = t.frames[(k + offset) % len(t)]
        kps = extract_keypoints(encode(params, f), f, refs, mode, cfg.float("keypoints", "temperature"))
        kvec = np.array([c for kp in kps for c in kp.lift])
        target = np.asarray(kps[0].lift)
        demos.append(scripted_reach(kvec, target, cfg.int("policy", "demo_len"), cfg.float("policy", "gain"), rng))
    return demos


def _save_policy(path, p: PolicyParams) -> None:
    rows = [["sigma_trans", io.fmt(p.sigma_trans)], ["sigma_rot", io.fmt(p.sigma_rot)],
            ["bias"] + [io.fmt(x) for x in p.bias]]
    rows += [[f"w{i}"] + [io.fmt(x) for x in row] for i, row in enumerate(p.weights)]
    io.atomic_write_text(path, "\n".join(",".join(r) for r in rows) + "\n")


def _load_policy(path) -> PolicyParams:
    rows = [ln.split(",") for ln in _need(path, "policy parameters (run bc-train)").read_text().splitlines()]
    st, sr = float(rows[0][1]), float(rows[1][1])
    bias = np.array([float(x) for x in rows[2][1:]])
    W = np.array([[float(x) for x in r[1:]] for r in rows[3:]])
    return PolicyParams(W, bias, st, sr)


def cmd_bc_train(args, cfg):
    demos = _bc_demos(args, cfg, 0)
    d = _stage_dir(args, "bc")
    for k, (o, a) in enumerate(demos):
        tmp = d / f".demo_{k:03d}.csv"
        write_dataset_csv(tmp, o, a)
        io.atomic_write(d / "dataset" / f"demo_{k:03d}.csv", tmp.read_bytes())
        tmp.unlink()
    data = [read_dataset_csv(d / "dataset" / f"demo_{k:03d}.csv") for k in range(len(demos))]
    p = train_policy(data, cfg.float("policy", "lr"), cfg.float("policy", "weight_decay"), cfg.int("policy", "steps"),
                     args.seed, cfg.optional_int("policy", "batch_trajectories"))
    _save_policy(d / "policy.csv", p)
    _echo(d, cfg, args)
    obs = np.concatenate([o for o, _ in data])
    act = np.concatenate([a for _, a in data])
    print(f"policy trained on {len(data)} demos; mean NLL {mean_nll(p, obs, act):.3f} (floor {entropy_floor(p):.3f})")


def cmd_bc_eval(args, cfg):
    p = _load_policy(Path(args.work) / "bc" / "policy.csv")
    demos = _bc_demos(args, cfg, 7)
    obs = np.concatenate([o for o, _ in demos])
    act = np.concatenate([a for _, a in demos])
    err = np.abs(predict(p, obs) - act) / p.sigma
    text = (f"heldout demos: {len(demos)}\nmean NLL: {mean_nll(p, obs, act):.6f}\nentropy floor: {entropy_floor(p):.6f}\n"
            f"mean |error| / sigma: {err.mean():.4f}\nfraction within 2 sigma: {(err.max(axis=1) < 2).mean():.4f}\n")
    d = _stage_dir(args, "bc")
    io.atomic_write_text(d / "eval.txt", text)
    print(text, end="")


def cmd_viz(args, cfg):
    params = _params(args)
    refs = _load_refs(args)
    t = _load_traj(args, "masks", "heldout")
    if not 0 <= args.frame < len(t):
        raise ValueError(f"frame {args.frame} outside the heldout trajectory")
    f = t.frames[args.frame]
    dmap = encode(params, f)
    d = _stage_dir(args, "viz")
    for k, ref in enumerate(refs.descriptors):
        act = activation_map(dmap, ref, cfg.float("keypoints", "temperature"))
        img = np.round(255.0 * act / act.max()).astype(np.uint8)
        io.atomic_write(d / f"act_{f.frame_id:04d}_ref{k:02d}.pgm", io.encode_pgm(img))
    for label, bits in sorted(t.masks[args.frame].items()):
        io.atomic_write(d / f"mask_{f.frame_id:04d}_{label:02d}.pgm", io.encode_pgm(bits.astype(np.uint8) * 255))
    _echo(d, cfg, args)
    print(f"wrote {len(refs)} activation maps for frame {f.frame_id}")


HANDLERS = {
    "generate": cmd_generate, "fuse": cmd_fuse, "masks": cmd_masks, "sample": cmd_sample, "train": cmd_train,
    "refs": cmd_refs, "extract": cmd_extract, "eval": cmd_eval, "bc-train": cmd_bc_train, "bc-eval": cmd_bc_eval,
    "viz": cmd_viz,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.cmd is None:
            raise UsageError("missing subcommand")
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = C.load_config(args.config, args.set)
    except (UsageError, C.ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        HANDLERS[args.cmd](args, cfg)
    except (FileNotFoundError, ValueError, RuntimeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
