"""Command-line surface: clip generation, alignment, MI reports,
solver benchmarks, and training, with bit-exact file formats.

Formats:
  FVOL    binary volume: magic "FVOL", u32 version=1, u32 dtype
          (0=float32, 1=float64), u32 T,H,W,C, little-endian, payload
          row-major T,H,W,C.
  plan    JSON {"t", "h", "w", "maps"}: one gather map per frame.
  config  JSON mirroring ModelConfig plus hyperparameters and paths;
          unknown keys are rejected.
  ckpt    binary checkpoint: magic "ATCK", u32 version=1, u32 manifest
          length, JSON manifest [{name, shape, offset}], float64 payload.

Exit codes: 0 success, 2 usage/config error, 3 data or format error,
4 acceptance-threshold failure in --check modes.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import struct
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .alignment import AlignmentPlan, FeatureVolume, align_clip, dealign_clip
from .infotheory import conditional_entropy, entropy, fit_codebook, mutual_information, quantize
from .matching import Permutation, solve_assignment_exact, solve_assignment_greedy
from .model import ModelConfig, TrainConfig, train
from .synthdata import MotionDataset, SyntheticClip, gen_motion_dataset, gen_shifted, gen_static

__all__ = [
    "main",
    "read_fvol",
    "write_fvol",
    "read_plan",
    "write_plan",
    "read_run_config",
    "write_checkpoint",
    "read_checkpoint",
    "FormatError",
    "ConfigError",
]

_FVOL_MAGIC = b"FVOL"
_CKPT_MAGIC = b"ATCK"
_USAGE_ERROR = 2
_DATA_ERROR = 3
_CHECK_FAILURE = 4


class FormatError(ValueError):
    """Malformed on-disk data (bad magic, truncated payload, bad schema)."""


class ConfigError(ValueError):
    """Malformed run configuration (usage-class error, exit code 2)."""


# ---------------------------------------------------------------- formats

def write_fvol(path, volume, dtype="float64"):
    values = volume.values if isinstance(volume, FeatureVolume) else np.asarray(volume)
    if values.ndim != 4:
        raise FormatError("FVOL: volume must be [T, H, W, C]")
    code = {"float32": 0, "float64": 1}.get(dtype)
    if code is None:
        raise FormatError(f"FVOL: unsupported dtype {dtype!r}")
    np_dtype = np.dtype("<f4") if code == 0 else np.dtype("<f8")
    payload = np.ascontiguousarray(values, dtype=np_dtype)
    with open(path, "wb") as fh:
        fh.write(_FVOL_MAGIC)
        fh.write(struct.pack("<6I", 1, code, *values.shape))
        fh.write(payload.tobytes())


def read_fvol(path):
    """Returns the raw array in the stored dtype (caller converts)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 28 or blob[:4] != _FVOL_MAGIC:
        raise FormatError(f"{path}: not an FVOL file")
    version, code, t, h, w, c = struct.unpack_from("<6I", blob, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported FVOL version {version}")
    if code not in (0, 1):
        raise FormatError(f"{path}: unknown dtype code {code}")
    np_dtype = np.dtype("<f4") if code == 0 else np.dtype("<f8")
    expected = 28 + t * h * w * c * np_dtype.itemsize
    if len(blob) != expected:
        raise FormatError(f"{path}: payload length {len(blob) - 28} does not match header")
    data = np.frombuffer(blob, dtype=np_dtype, offset=28).reshape(t, h, w, c)
    return data.copy()


def write_plan(path, plan, h, w):
    doc = {"t": plan.t_len, "h": h, "w": w,
           "maps": [p.map.tolist() for p in plan.perms]}
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def read_plan(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
        maps = doc["maps"]
        h, w = int(doc["h"]), int(doc["w"])
        plan = AlignmentPlan([Permutation(np.asarray(m, dtype=np.intp)) for m in maps])
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed plan document ({exc})") from exc
    if plan.n_patches != h * w:
        raise FormatError(f"{path}: map length does not match h*w")
    return plan, h, w


_CONFIG_KEYS = {
    "t_len": int, "h": int, "w": int, "c_in": int, "d": int, "heads": int,
    "depth": int, "variant": str, "classes": int, "seed": int,
    "lr": float, "epochs": int, "batch": int, "train_seed": int,
    "dataset_dir": str, "out_dir": str,
}


def read_run_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse config ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(doc) - set(_CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    missing = set(_CONFIG_KEYS) - set(doc)
    if missing:
        raise ConfigError(f"{path}: missing config keys {sorted(missing)}")
    typed = {k: _CONFIG_KEYS[k](doc[k]) for k in _CONFIG_KEYS}
    model = ModelConfig(t_len=typed["t_len"], h=typed["h"], w=typed["w"],
                        c_in=typed["c_in"], d=typed["d"], heads=typed["heads"],
                        depth=typed["depth"], variant=typed["variant"],
                        classes=typed["classes"], seed=typed["seed"])
    hyper = TrainConfig(lr=typed["lr"], epochs=typed["epochs"],
                        batch=typed["batch"], seed=typed["train_seed"])
    return model, hyper, typed["dataset_dir"], typed["out_dir"]


def write_checkpoint(path, params):
    names = sorted(params)
    manifest = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    mbytes = json.dumps(manifest).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<2I", 1, len(mbytes)))
        fh.write(mbytes)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack_from("<2I", blob, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        manifest = json.loads(blob[12:12 + mlen])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad checkpoint manifest") from exc
    payload = blob[12 + mlen:]
    out = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        out[entry["name"]] = arr.reshape(shape).copy()
    return out


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir, names, threads):
    with ThreadPoolExecutor(max_workers=threads) as pool:
        hashes = list(pool.map(lambda n: _sha256(os.path.join(out_dir, n)), names))
    manifest = {"files": [{"name": n, "sha256": h} for n, h in zip(names, hashes)]}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------- commands

def _resolve_threads(args):
    env = os.environ.get("ATA_THREADS")
    if env:
        return max(1, int(env))
    if args.threads:
        return max(1, args.threads)
    return os.cpu_count() or 1


def cmd_gen(args):
    os.makedirs(args.out, exist_ok=True)
    threads = _resolve_threads(args)
    dims = (args.t, args.height, args.width, args.c)
    sidecar = {"kind": args.kind, "seed": args.seed,
               "dims": {"t": args.t, "h": args.height, "w": args.width, "c": args.c}}
    names = []
    if args.kind in ("static", "shift"):
        if args.kind == "static":
            clip = gen_static(*dims, seed=args.seed)
        else:
            clip = gen_shifted(*dims, dx=args.dx, dy=args.dy, seed=args.seed)
        name = "clip_00000.fvol"
        write_fvol(os.path.join(args.out, name), clip.volume, args.dtype)
        names.append(name)
        sidecar["truth_maps"] = [[p.map.tolist() for p in clip.truth_perms]]
    else:
        shuffled = args.kind == "shuffled-motion"
        ds = gen_motion_dataset(args.clips, *dims, shuffled=shuffled, seed=args.seed)
        for i, clip in enumerate(ds.clips):
            name = f"clip_{i:05d}.fvol"
            write_fvol(os.path.join(args.out, name), clip.volume, args.dtype)
            names.append(name)
        sidecar["labels"] = [c.label for c in ds.clips]
        sidecar["train_indices"] = ds.train_indices
        sidecar["val_indices"] = ds.val_indices
        sidecar["truth_maps"] = [[p.map.tolist() for p in c.truth_perms] for c in ds.clips]
    with open(os.path.join(args.out, "sidecar.json"), "w") as fh:
        json.dump(sidecar, fh)
        fh.write("\n")
    names.append("sidecar.json")
    _write_manifest(args.out, names, threads)
    print(f"wrote {len(names)} files to {args.out}")
    return 0


def cmd_align(args):
    raw = read_fvol(args.input)
    volume = FeatureVolume(np.asarray(raw, dtype=np.float64))
    if args.dealign:
        plan, _, _ = read_plan(args.dealign)
        restored = dealign_clip(volume, plan)
        write_fvol(args.output, restored, "float64" if raw.dtype.itemsize == 8 else "float32")
        print(f"de-aligned {args.input} -> {args.output}")
        return 0
    aligned, plan = align_clip(volume)
    write_fvol(args.output, aligned, "float64" if raw.dtype.itemsize == 8 else "float32")
    if args.plan_out:
        write_plan(args.plan_out, plan, volume.h, volume.w)
    print(f"aligned {args.input} -> {args.output}")
    return 0


def _mi_rows(name, volume, cb):
    tokens = volume.tokens()
    labels = [quantize(f, cb) for f in tokens]
    rows = []
    for t in range(1, volume.t_len):
        a, b = labels[t - 1], labels[t]
        rows.append({
            "clip": name, "variant": "none", "aligned": 0, "pair": t,
            "mi": mutual_information(a, b), "h_prev": entropy(a),
            "h_curr": entropy(b), "h_cond": conditional_entropy(a, b),
        })
    aligned, _ = align_clip(volume)
    labels = [quantize(f, cb) for f in aligned.tokens()]
    for t in range(1, volume.t_len):
        a, b = labels[t - 1], labels[t]
        rows.append({
            "clip": name, "variant": "none", "aligned": 1, "pair": t,
            "mi": mutual_information(a, b), "h_prev": entropy(a),
            "h_curr": entropy(b), "h_cond": conditional_entropy(a, b),
        })
    return rows


def cmd_mi(args):
    raw = read_fvol(args.input)
    volume = FeatureVolume(np.asarray(raw, dtype=np.float64))
    if volume.t_len < 2:
        raise FormatError(f"{args.input}: MI needs at least two frames")
    cb = fit_codebook(volume.tokens().reshape(-1, volume.c), args.k, args.seed)
    rows = _mi_rows(os.path.basename(args.input), volume, cb)
    fields = ["clip", "variant", "aligned", "pair", "mi", "h_prev", "h_curr", "h_cond"]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if args.out:
            out.close()
    return 0


def _bench_solver(solver, sizes, reps, seed):
    rng = np.random.default_rng(seed)
    medians = []
    for n in sizes:
        times = []
        for _ in range(reps):
            s = rng.uniform(-1.0, 1.0, (n, n))
            t0 = time.perf_counter()
            solver(s)
            times.append(time.perf_counter() - t0)
        medians.append(float(np.median(times)))
    return medians


def _loglog_slope(sizes, times):
    return float(np.polyfit(np.log(sizes), np.log(times), 1)[0])


def cmd_bench(args):
    sizes = args.sizes
    if min(sizes) < 2:
        raise FormatError("bench: sizes must be >= 2")
    exact = _bench_solver(solve_assignment_exact, sizes, args.reps, args.seed)
    greedy = _bench_solver(solve_assignment_greedy, sizes, args.reps, args.seed)
    rows = [{"size": n, "solver": "exact", "median_seconds": t} for n, t in zip(sizes, exact)]
    rows += [{"size": n, "solver": "greedy", "median_seconds": t} for n, t in zip(sizes, greedy)]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["size", "solver", "median_seconds"])
            writer.writeheader()
            writer.writerows(rows)
    slope_exact = _loglog_slope(sizes, exact)
    slope_greedy = _loglog_slope(sizes, greedy)
    print(f"exact  slope: {slope_exact:.3f}")
    print(f"greedy slope: {slope_greedy:.3f}")
    for n, te, tg in zip(sizes, exact, greedy):
        print(f"  n={n:4d}  exact {te * 1e3:9.3f} ms  greedy {tg * 1e3:9.3f} ms")
    if args.check:
        ok = 2.0 <= slope_exact <= 3.6 and slope_greedy < slope_exact
        if not ok:
            print("bench --check FAILED", file=sys.stderr)
            return _CHECK_FAILURE
        print("bench --check passed")
    return 0


def load_dataset(dataset_dir):
    sidecar_path = os.path.join(dataset_dir, "sidecar.json")
    if not os.path.isdir(dataset_dir) or not os.path.exists(sidecar_path):
        raise FormatError(f"{dataset_dir}: dataset directory or sidecar.json missing")
    with open(sidecar_path) as fh:
        sidecar = json.load(fh)
    try:
        labels = sidecar["labels"]
        train_idx = sidecar["train_indices"]
        val_idx = sidecar["val_indices"]
    except KeyError as exc:
        raise FormatError(f"{sidecar_path}: missing key {exc}") from exc
    clips = []
    for i, label in enumerate(labels):
        raw = read_fvol(os.path.join(dataset_dir, f"clip_{i:05d}.fvol"))
        vol = FeatureVolume(np.asarray(raw, dtype=np.float64))
        clips.append(SyntheticClip(vol, None, int(label)))
    return MotionDataset(clips, train_idx, val_idx)


def cmd_train(args):
    model_cfg, hyper, dataset_dir, out_dir = read_run_config(args.config)
    dataset = load_dataset(dataset_dir)
    os.makedirs(out_dir, exist_ok=True)
    params, metrics = train(dataset, model_cfg, hyper)
    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "train_acc", "val_acc"])
        writer.writeheader()
        writer.writerows(metrics)
    write_checkpoint(os.path.join(out_dir, "checkpoint.bin"), params)
    last = metrics[-1]
    print(f"final epoch {last['epoch']}: loss {last['loss']:.4f} "
          f"train_acc {last['train_acc']:.3f} val_acc {last['val_acc']:.3f}")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(prog="ata", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=0,
                        help="worker pool size for clip-parallel work "
                             "(default: available parallelism; ATA_THREADS overrides)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic clips")
    p.add_argument("kind", choices=["static", "shift", "motion", "shuffled-motion"])
    p.add_argument("--t", type=int, default=8)
    p.add_argument("--height", type=int, default=4)
    p.add_argument("--width", type=int, default=4)
    p.add_argument("--c", type=int, default=8)
    p.add_argument("--dx", type=int, default=1)
    p.add_argument("--dy", type=int, default=0)
    p.add_argument("--clips", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float64")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("align", help="align (or de-align) a volume file")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--plan-out")
    p.add_argument("--dealign", metavar="PLAN", help="apply the inverse of a stored plan")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("mi", help="mutual-information report for a volume file")
    p.add_argument("input")
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_mi)

    p = sub.add_parser("bench", help="solver timing across matrix sizes")
    p.add_argument("--sizes", type=int, nargs="+", default=[32, 64, 128, 256])
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--check", action="store_true",
                   help="exit 4 unless the exact-solver slope is in [2.0, 3.6] "
                        "and below-greedy ordering holds")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", help="train a classifier from a run config")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)
    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _USAGE_ERROR
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _DATA_ERROR
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _DATA_ERROR
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
