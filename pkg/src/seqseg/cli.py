"""Command-line front door: synth, train, eval, infer, dump-features.

Options may come from a key=value config file (--config) and are overridden
by explicit flags; every run writes the resolved option values next to its
outputs as ``config.resolved``, which can be fed back via --config to
reproduce the run.  The SEQSEG_NUM_THREADS environment variable caps the
BLAS thread count (it must be applied before numpy loads, hence the lazy
imports below).

Exit codes: 0 success, 2 invalid configuration or arguments, 3 data error,
4 numeric failure during training.
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_thread_env():
    n = os.environ.get("SEQSEG_NUM_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


_apply_thread_env()


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def read_config_file(path):
    values = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, val = line.partition("=")
            if not eq:
                raise ValueError(f"{path}: malformed config line {raw.rstrip()!r}")
            values[key.strip().replace("-", "_")] = val.strip()
    return values


def write_resolved_config(path, values):
    with open(path, "w") as fh:
        for key in sorted(values):
            val = values[key]
            if val is None:
                continue
            if isinstance(val, (list, tuple)):
                val = ",".join(str(v) for v in val)
            fh.write(f"{key}={val}\n")


def _merge_options(args, subparser, command_keys):
    """Config-file values fill in flags the user did not pass explicitly."""
    merged = {k: getattr(args, k) for k in command_keys}
    if args.config:
        file_values = read_config_file(args.config)
        defaults = {k: subparser.get_default(k) for k in command_keys}
        for key, raw in file_values.items():
            if key not in command_keys or key == "config":
                continue
            if merged[key] != defaults[key]:
                continue  # explicit flag wins
            default = defaults[key]
            if isinstance(default, bool):
                merged[key] = raw.lower() in ("1", "true", "yes")
            elif isinstance(default, int) and not isinstance(default, bool):
                merged[key] = int(raw)
            elif isinstance(default, float):
                merged[key] = float(raw)
            else:
                merged[key] = raw
    return merged


# -- dataset helpers -----------------------------------------------------------


def _load_manifest(manifest_path):
    import csv

    base = os.path.dirname(os.path.abspath(manifest_path))
    scans = []
    with open(manifest_path, newline="") as fh:
        for row in csv.DictReader(fh):
            scans.append(
                {
                    "scan_id": row["scan_id"],
                    "volume": os.path.join(base, row["volume"]),
                    "mask": os.path.join(base, row["mask"]),
                    "spacing": tuple(float(v) for v in row["spacing"].split("x")),
                }
            )
    if not scans:
        raise ValueError(f"{manifest_path}: no scans listed")
    return scans


def _load_scan(entry):
    from .data.volume import load_mask, load_volume

    return load_volume(entry["volume"]), load_mask(entry["mask"])


# -- commands -------------------------------------------------------------------


def cmd_synth(opts):
    import csv

    from .data.synth import synth_generate
    from .data.volume import write_volume

    out_dir = opts["out"]
    os.makedirs(out_dir, exist_ok=True)
    dims = tuple(int(v) for v in opts["dims"].split(","))
    spacing = tuple(float(v) for v in opts["spacing"].split(","))
    pairs = synth_generate(opts["count"], dims, spacing, opts["seed"])
    with open(os.path.join(out_dir, "manifest.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scan_id", "volume", "mask", "dims", "spacing"])
        for i, (vol, mask) in enumerate(pairs):
            scan_id = f"scan_{i:03d}"
            vol_name = f"{scan_id}.vol"
            mask_name = f"{scan_id}.mask"
            write_volume(os.path.join(out_dir, vol_name), vol.data, vol.spacing)
            write_volume(os.path.join(out_dir, mask_name), mask.data, mask.spacing)
            writer.writerow(
                [
                    scan_id,
                    vol_name,
                    mask_name,
                    "x".join(str(d) for d in vol.data.shape),
                    "x".join(str(s) for s in vol.spacing),
                ]
            )
    write_resolved_config(os.path.join(out_dir, "config.resolved"), opts)
    print(f"wrote {len(pairs)} volume/mask pairs to {out_dir}")
    return EXIT_OK


def _network_config(opts):
    from .network import NetworkConfig

    return NetworkConfig(
        o=opts["o"],
        resolution=opts["resolution"],
        base_features=opts["base_features"],
        capacity_divisor=opts["capacity_div"],
        variant=opts["variant"],
    )


def cmd_train(opts):
    from .data.contexts import extract_contexts, organ_slice_range, split_by_scan
    from .data.samples import build_samples
    from .network import Network, save_checkpoint
    from .training import TrainConfig, fit, write_history_csv

    out_dir = opts["out"]
    os.makedirs(out_dir, exist_ok=True)
    scans = _load_manifest(opts["data"])
    config = _network_config(opts)
    split = split_by_scan(
        [s["scan_id"] for s in scans],
        opts["folds"],
        seed=opts["seed"],
        test_fold=opts["test_fold"],
        val_fraction=opts["val_fraction"],
    )
    by_id = {s["scan_id"]: s for s in scans}

    def samples_for(ids):
        out = []
        for sid in ids:
            vol, mask = _load_scan(by_id[sid])
            if vol.thickness > opts["d_mm"]:
                print(
                    f"warning: scan {sid}: slice thickness {vol.thickness} mm exceeds "
                    f"step {opts['d_mm']} mm; contexts contain direct-consecutive slices",
                    file=sys.stderr,
                )
            contexts = extract_contexts(
                vol, sid, organ_slice_range(mask), config.o, opts["d_mm"], mode="train"
            )
            out.extend(build_samples(vol, mask, contexts, config.resolution))
        return out

    train_samples = samples_for(split.train)
    val_samples = samples_for(split.validation)
    if not train_samples:
        raise ValueError("training split produced no usable contexts")

    net = Network(config).init(seed=opts["seed"])
    tc = TrainConfig(
        learning_rate=opts["lr"],
        patience=opts["patience"],
        batch_size=opts["batch_size"],
        max_epochs=opts["epochs"],
        seed=opts["seed"],
    )
    from .errors import TrainingAborted

    ckpt_path = os.path.join(out_dir, "checkpoint.ckpt")
    try:
        result = fit(net, train_samples, val_samples, tc)
    except TrainingAborted as exc:
        net.load_state(exc.best_state)
        save_checkpoint(net, ckpt_path)
        write_history_csv(os.path.join(out_dir, "history.csv"), exc.history)
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(net, ckpt_path)
    write_history_csv(os.path.join(out_dir, "history.csv"), result.history)
    write_resolved_config(os.path.join(out_dir, "config.resolved"), opts)
    last = result.history[-1]
    print(
        f"trained {len(result.history)} epochs (best epoch {result.best_epoch}); "
        f"final train loss {last.train_loss:.4f}; checkpoint at {ckpt_path}"
    )
    return EXIT_OK


def cmd_eval(opts):
    from .errors import ConfigMismatchError
    from .evaluation import (
        REGIMES,
        evaluate_volume,
        format_report_table,
        format_significance_matrix,
        write_report_csv,
    )
    from .network import load_checkpoint

    out_dir = opts["out"]
    os.makedirs(out_dir, exist_ok=True)
    scans = _load_manifest(opts["data"])
    if opts["scans"]:
        wanted = set(opts["scans"].split(","))
        scans = [s for s in scans if s["scan_id"] in wanted]
        if not scans:
            raise ValueError("no manifest scans match --scans")
    ckpt_paths = opts["checkpoints"].split(",")
    nets = [load_checkpoint(p) for p in ckpt_paths]
    for path, net in zip(ckpt_paths, nets):
        if opts["resolution"] and net.config.resolution != opts["resolution"]:
            raise ConfigMismatchError(
                f"{path}: checkpoint resolution {net.config.resolution} != "
                f"requested {opts['resolution']}"
            )

    all_rows = {}
    dice_lists = {}
    for path, net in zip(ckpt_paths, nets):
        name = os.path.splitext(os.path.basename(path))[0]
        rows_by_scan = {}
        dice_lists[name] = []
        for entry in scans:
            vol, mask = _load_scan(entry)
            per_regime = {}
            for regime in REGIMES:
                row = evaluate_volume(
                    net.predict_context,
                    vol,
                    mask,
                    regime,
                    net.config.o,
                    opts["d_mm"],
                    net.config.resolution,
                    scan_id=entry["scan_id"],
                )
                per_regime[regime] = row
            rows_by_scan[entry["scan_id"]] = per_regime
            dice_lists[name].append(per_regime[opts["regime"]].dice)
        all_rows[name] = rows_by_scan
        flat = [r for per in rows_by_scan.values() for r in per.values()]
        write_report_csv(os.path.join(out_dir, f"report_{name}.csv"), flat)
        table = format_report_table(rows_by_scan)
        with open(os.path.join(out_dir, f"report_{name}.txt"), "w") as fh:
            fh.write(table + "\n")
        print(f"== {name}\n{table}")

    if len(nets) >= 2:
        names = list(dice_lists)
        matrix = format_significance_matrix(names, [dice_lists[n] for n in names])
        with open(os.path.join(out_dir, "significance.txt"), "w") as fh:
            fh.write(matrix + "\n")
        print(matrix)
    write_resolved_config(os.path.join(out_dir, "config.resolved"), opts)
    return EXIT_OK


def cmd_infer(opts):
    import numpy as np

    from .data.contexts import slice_step
    from .data.preprocess import preprocess_slice, resample_inplane
    from .data.volume import load_mask, load_volume, write_volume
    from .evaluation import threshold_prediction
    from .network import load_checkpoint
    from .viz import normalize_slice, overlay_image, save_png_rgb

    out_dir = opts["out"]
    os.makedirs(out_dir, exist_ok=True)
    net = load_checkpoint(opts["checkpoint"])
    vol = load_volume(opts["volume"])
    gt = load_mask(opts["mask"]) if opts["mask"] else None
    res = net.config.resolution
    o = net.config.o
    half = (o - 1) // 2
    depth, native = vol.data.shape[0], vol.data.shape[1]
    step = slice_step(opts["d_mm"], vol.thickness)

    cache = {}

    def prepped(m):
        if m not in cache:
            small = resample_inplane(vol.data[m].astype(np.float64), res, "intensity")
            cache[m] = preprocess_slice(small)
        return cache[m]

    pred = np.zeros(vol.data.shape, dtype=np.uint8)
    for k in range(depth):
        members = [min(max(k + j * step, 0), depth - 1) for j in range(-half, half + 1)]
        stack = np.stack([prepped(m) for m in members])
        probs = net.predict_context(stack)
        small_mask = threshold_prediction(probs)
        pred[k] = resample_inplane(small_mask.astype(np.float64), native, "mask")

    write_volume(os.path.join(out_dir, "prediction.mask"), pred, vol.spacing)
    for k in range(depth):
        base = normalize_slice(vol.data[k])
        rgb = overlay_image(base, pred[k].astype(bool), gt.data[k].astype(bool) if gt else None)
        save_png_rgb(os.path.join(out_dir, f"slice_{k:03d}.png"), rgb)
    write_resolved_config(os.path.join(out_dir, "config.resolved"), opts)
    print(f"wrote prediction mask and {depth} overlays to {out_dir}")
    return EXIT_OK


def cmd_dump_features(opts):
    import numpy as np

    from .data.contexts import slice_step
    from .data.preprocess import preprocess_slice, resample_inplane
    from .data.volume import load_volume
    from .network import load_checkpoint
    from .viz import feature_grid, save_png_gray

    out_dir = opts["out"]
    os.makedirs(out_dir, exist_ok=True)
    net = load_checkpoint(opts["checkpoint"])
    vol = load_volume(opts["volume"])
    res = net.config.resolution
    o = net.config.o
    k = opts["slice"]
    depth = vol.data.shape[0]
    if not 0 <= k < depth:
        raise ValueError(f"slice {k} out of range for volume depth {depth}")

    def prepped(m):
        small = resample_inplane(vol.data[m].astype(np.float64), res, "intensity")
        return preprocess_slice(small)

    if opts["repeat_slice"]:
        members = [k] * o
    else:
        step = slice_step(opts["d_mm"], vol.thickness)
        half = (o - 1) // 2
        members = [min(max(k + j * step, 0), depth - 1) for j in range(-half, half + 1)]
    context = np.stack([prepped(m)[None] for m in members])
    grids = net.export_activations(context, opts["layer"])
    for t, maps in enumerate(grids):
        path = os.path.join(out_dir, f"{opts['layer']}_element_{t}.png")
        save_png_gray(path, feature_grid(maps))
    write_resolved_config(os.path.join(out_dir, "config.resolved"), opts)
    print(f"wrote {len(grids)} feature grids for layer {opts['layer']} to {out_dir}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="seqseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    registry = {}

    def register(p, name):
        registry[name] = p
        return p

    def add_common(p):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=0)

    p = register(sub.add_parser("synth", help="generate a synthetic dataset"), "synth")
    add_common(p)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--dims", default="40,128,128", help="D,H,W")
    p.add_argument("--spacing", default="2.0,1.0,1.0", help="sz,sy,sx in mm")

    def add_net_opts(p):
        p.add_argument("--variant", default="full",
                       choices=["full", "single-slice-2d", "aggregation-2d", "unidirectional"])
        p.add_argument("--o", type=int, default=3)
        p.add_argument("--resolution", type=int, default=128)
        p.add_argument("--base-features", type=int, default=64, dest="base_features")
        p.add_argument("--capacity-div", type=int, default=1, dest="capacity_div")

    p = register(sub.add_parser("train", help="train on a synthetic dataset manifest"), "train")
    add_common(p)
    add_net_opts(p)
    p.add_argument("--data", required=True, help="dataset manifest.csv")
    p.add_argument("--d-mm", type=float, default=5.0, dest="d_mm")
    p.add_argument("--folds", type=int, default=2)
    p.add_argument("--test-fold", type=int, default=0, dest="test_fold")
    p.add_argument("--val-fraction", type=float, default=0.1, dest="val_fraction")
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--patience", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=4, dest="batch_size")
    p.add_argument("--epochs", type=int, default=200)

    p = register(sub.add_parser("eval", help="evaluate checkpoints on manifest scans"), "eval")
    add_common(p)
    p.add_argument("--checkpoints", required=True, help="comma-separated checkpoint paths")
    p.add_argument("--data", required=True)
    p.add_argument("--scans", default="", help="comma-separated scan ids (default: all)")
    p.add_argument("--d-mm", type=float, default=5.0, dest="d_mm")
    p.add_argument("--resolution", type=int, default=0,
                   help="assert the checkpoint resolution (0 = accept)")
    p.add_argument("--regime", default="organ-area",
                   choices=["organ-area", "full-volume"],
                   help="regime whose Dice feeds the significance matrix")

    p = register(sub.add_parser("infer", help="segment one volume"), "infer")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--mask", default="", help="optional ground truth for overlays")
    p.add_argument("--d-mm", type=float, default=5.0, dest="d_mm")

    p = register(sub.add_parser("dump-features", help="export per-element feature grids"), "dump-features")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--slice", type=int, default=0)
    p.add_argument("--layer", default="up_3")
    p.add_argument("--repeat-slice", action="store_true", dest="repeat_slice",
                   help="feed the same slice o times (sequence-sensitivity probe)")
    p.add_argument("--d-mm", type=float, default=5.0, dest="d_mm")
    return parser, registry


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "dump-features": cmd_dump_features,
}


def main(argv=None):
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    command_keys = [k for k in vars(args) if k != "command"]
    from .errors import (
        CheckpointError,
        ConfigMismatchError,
        NumericsError,
        TrainingAborted,
        VolumeHeaderError,
        VolumePayloadError,
    )

    try:
        opts = _merge_options(args, subparsers[args.command], command_keys)
        return _COMMANDS[args.command](opts)
    except (NumericsError, TrainingAborted) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (VolumeHeaderError, VolumePayloadError, CheckpointError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigMismatchError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
