"""Command-line interface.

Subcommands: ``simulate``, ``train``, ``evaluate``, ``predict`` and
``fit-smt``. Options can come from flags or a ``--config`` file of
``key = value`` lines; keys before any ``[section]`` header apply to every
subcommand, keys under ``[train]`` (etc.) to that subcommand only, and
flags on the command line win. ``--print-config`` prints the resolved
options and exits. The default thread count comes from
``SPHMICRO_THREADS``.
"""

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import eval as evaluation
from . import fit
from . import model as tissue
from .dataset import load_dataset, make_phantom, save_dataset, simulate_dataset
from .nifti import NiftiError, Volume4D, read_nifti1, write_nifti1

log = logging.getLogger("sphmicro")

DEFAULT_SNR = {"hardi": 30.0, "tensor_valued": 20.0}
PARAM_RANGES = {"d": (0.0, 3.0), "d_i": (0.0, 3.0), "d_sph": (0.0, 3.0),
                "f": (0.0, 1.0), "f_i": (0.0, 1.0), "f_sph": (0.0, 1.0)}
SPLITS = ("train", "val", "test")


class CLIError(Exception):
    """User-facing error; printed without a traceback."""


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def resolve_scheme(name):
    """Bundled scheme name or path to a scheme text file."""
    path = Path(name)
    if path.is_file():
        try:
            scheme = tissue.read_scheme(path)
        except ValueError as err:
            raise CLIError(f"invalid scheme file: {err}") from None
        scheme.name = scheme.name or path.stem
        return scheme
    try:
        return tissue.load_scheme(name)
    except ValueError:
        raise CLIError(f"scheme {name!r} is neither a file nor a bundled scheme "
                       "(hardi, tensor_valued)") from None


def default_snr(scheme, snr):
    if snr is not None:
        return float(snr)
    return DEFAULT_SNR.get(scheme.name, 30.0)


def otsu_mask(volume, scheme):
    """Mask of voxels whose mean b = 0 intensity exceeds Otsu's threshold."""
    from skimage.filters import threshold_otsu

    b0 = volume.data[..., scheme.b0_mask].mean(axis=-1)
    if not np.any(b0 > b0.min()):
        return np.zeros(b0.shape, dtype=bool)
    return b0 > threshold_otsu(b0)


def _thread_limit(threads):
    """Bound BLAS threads to ``threads``, never above the available cores."""
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, min(int(threads), os.cpu_count() or 1)))


def _check_outdir(path):
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise CLIError(f"output directory {parent} does not exist")


def predict_voxels(predict_fn, signals, chunk=1024, threads=1):
    """Apply ``predict_fn`` to fixed-size voxel chunks, optionally in parallel.

    The thread budget goes to chunk workers, each running single-threaded
    BLAS; workers beyond the available cores only add contention and are
    not started. Chunk boundaries do not depend on the thread count, so
    the output is bitwise independent of it.
    """
    starts = list(range(0, len(signals), chunk))
    if not starts:
        return None
    workers = min(int(threads), len(starts), os.cpu_count() or 1)
    with _thread_limit(1):
        if workers <= 1:
            parts = [predict_fn(signals[s:s + chunk]) for s in starts]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(lambda s: predict_fn(signals[s:s + chunk]), starts))
    return np.concatenate(parts, axis=0)


def masked_signals(volume, scheme, mask):
    """Masked voxel signals normalised by their b = 0 mean.

    Returns ``(signals, index)`` for the voxels with a positive b = 0 mean
    and the count of masked voxels dropped because of a zero b = 0 mean.
    """
    if volume.data.shape[-1] != len(scheme):
        raise CLIError(f"volume has {volume.data.shape[-1]} volumes but the scheme lists "
                       f"{len(scheme)}")
    idx = np.flatnonzero(mask.ravel())
    raw = volume.data.reshape(-1, volume.data.shape[-1])[idx].astype(float)
    b0 = raw[:, scheme.b0_mask].mean(axis=1) if scheme.n_b0 else np.ones(len(raw))
    good = np.isfinite(b0) & (b0 > 0)
    norm = raw[good] / b0[good, None]
    return norm, idx[good], int((~good).sum())


def write_maps(values, index, shape, names, prefix, geometry=None, clamp=False):
    paths = []
    for j, name in enumerate(names):
        out = np.zeros(int(np.prod(shape)), dtype=np.float32)
        col = values[:, j] if values is not None else np.zeros(0)
        if clamp and name in PARAM_RANGES:
            col = np.clip(col, *PARAM_RANGES[name])
        out[index] = col
        path = Path(f"{prefix}_{name}.nii")
        geo = dict(geometry or {})
        write_nifti1(Volume4D(out.reshape(shape), geo), path)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args):
    scheme = resolve_scheme(args.scheme)
    snr = default_snr(scheme, args.snr)
    pool = tissue.read_odf(args.odf_pool) if args.odf_pool else None
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sizes = {"train": args.n_train, "val": args.n_val, "test": args.n_test}
    written = []
    for k, split in enumerate(SPLITS):
        if sizes[split] <= 0:
            continue
        # one independent stream per split: seed * 3 + split index is injective
        ds = simulate_dataset(scheme, args.model, sizes[split], snr, args.seed * 3 + k,
                              rotate=args.rotate, odf_pool=pool)
        ds.meta["split"] = split
        if args.odf_pool:
            ds.meta["odf_source"] = f"pool:{Path(args.odf_pool).name}"
        written.append(save_dataset(out_dir / f"{split}.ds", ds))
        print(f"{split}: {len(ds)} configs x {ds.signals.shape[1]} volumes -> {written[-1]}")
    if args.phantom:
        written += write_phantom(scheme, args.model, snr, args.seed, out_dir)
    return written


def write_phantom(scheme, model_kind, snr, seed, out_dir):
    """16^3 phantom volume, its region labels and a truth table in ``out_dir``."""
    ph = make_phantom(scheme, model=model_kind, snr=snr, seed=seed)
    dwi = write_nifti1(ph.volume, Path(out_dir) / "phantom_dwi.nii")
    labels = write_nifti1(ph.labels.astype(np.float32), Path(out_dir) / "phantom_labels.nii")
    truth = Path(out_dir) / "phantom_truth.csv"
    names = tissue.PARAM_NAMES[model_kind]
    rows = [",".join(("label",) + names)]
    rows += [",".join([str(k + 1)] + [f"{v:g}" for v in values])
             for k, values in enumerate(ph.truth)]
    truth.write_text("\n".join(rows) + "\n")
    print(f"phantom: {ph.volume.shape} -> {dwi}, {labels}, {truth}")
    return [dwi, labels, truth]


def _dataset_batches(arch, ds, scheme, batch_size):
    from .nn.pipeline import network_inputs

    scale = tissue.TARGET_SCALE[ds.model]
    n_batches = max(1, len(ds) // batch_size)

    def fn(i):
        s = (i % n_batches) * batch_size
        x = network_inputs(arch, ds.signals[s:s + batch_size], scheme)
        return x.astype(np.float32), (ds.params[s:s + batch_size] * scale).astype(np.float32)

    return fn


def _val_loss(est, ds):
    pred = est.predict(ds.signals) * est.scale
    return float(np.mean((pred - ds.params * est.scale) ** 2))


def cmd_train(args):
    from .nn.pipeline import Estimator, batch_source, make_network
    from .nn.train import TrainConfig, TrainingError, train

    scheme = resolve_scheme(args.scheme)
    snr = default_snr(scheme, args.snr)
    _check_outdir(args.out)
    cfg = TrainConfig(batches=args.batches, batch_size=args.batch_size, lr=args.lr,
                      seed=args.seed, snr=snr, target_scale=tuple(tissue.TARGET_SCALE[args.model]),
                      rotate=args.rotate)
    net = make_network(args.arch, scheme, args.model, seed=args.seed)
    if args.train_data:
        ds = load_dataset(args.train_data)
        if ds.model != args.model:
            raise CLIError(f"training data holds model {ds.model}, not {args.model}")
        batches = _dataset_batches(args.arch, ds, scheme, args.batch_size)
    else:
        pool = tissue.read_odf(args.odf_pool) if args.odf_pool else None
        sim = tissue.Simulator(scheme, args.model, snr=snr, seed=args.seed + 1,
                               rotate=args.rotate, odf_pool=pool)
        batches = batch_source(args.arch, sim, args.batch_size)
    est = Estimator(net, args.arch, scheme, args.model)
    val = load_dataset(args.val_data) if args.val_data else None
    val_before = _val_loss(est, val) if val is not None else None
    outputs = [Path(args.out), Path(str(args.out) + ".bin")]
    if args.loss_log:
        outputs.append(Path(args.loss_log))
    try:
        result = train(net, batches, cfg, log_every=args.log_every)
    except TrainingError as exc:
        for p in outputs:
            p.unlink(missing_ok=True)
        raise CLIError(f"training aborted: {exc}") from exc
    est.metadata = {"seed": args.seed, "batches": args.batches, "batch_size": args.batch_size,
                    "snr": snr, "rotate": int(args.rotate), "lr": args.lr,
                    "train_seconds": round(result.seconds, 1)}
    if val is not None:
        est.metadata["val_loss_initial"] = f"{val_before:.6g}"
        est.metadata["val_loss_final"] = f"{_val_loss(est, val):.6g}"
    est.save(args.out)
    if args.loss_log:
        lrs = [cfg.lr * cfg.lr_factor ** sum(i >= round(m * cfg.batches) for m in cfg.milestones)
               for i in range(cfg.batches)]
        with open(args.loss_log, "w") as fh:
            fh.write("batch,loss,lr\n")
            for i, (loss, lr) in enumerate(zip(result.losses, lrs)):
                fh.write(f"{i},{loss:.6g},{lr:.6g}\n")
    print(f"trained {args.arch} ({net.count_params()} parameters) in {result.seconds:.1f} s; "
          f"final loss {np.median(result.losses[-min(100, len(result.losses)):]):.5g} -> {args.out}")
    if val is not None:
        print(f"validation loss {est.metadata['val_loss_initial']} -> "
              f"{est.metadata['val_loss_final']}")
    return est


def _nlls_predict(scheme):
    def predict(signals):
        return fit.fit_smt_signals(signals, scheme).params()
    return predict


def cmd_evaluate(args):
    from .nn.pipeline import Estimator

    ds = load_dataset(args.test)
    scheme = resolve_scheme(args.scheme or ds.meta.get("scheme", "hardi"))
    if scheme.describe() != ds.meta.get("scheme_layout", scheme.describe()):
        raise CLIError(f"scheme mismatch: test data [{ds.meta['scheme_layout']}] vs "
                       f"scheme [{scheme.describe()}]")
    names = tissue.PARAM_NAMES[ds.model]
    report = evaluation.EvalReport(param_names=names)
    report.dataset = {"path": str(args.test), "size": len(ds), "snr": ds.meta.get("snr"),
                      "seed": ds.meta.get("seed"), "model": ds.model}
    predictors = {}
    for item in args.weights or []:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = None, item
        try:
            est = Estimator.load(path, scheme)
        except ValueError as exc:
            raise CLIError(f"{path}: {exc}") from exc
        if est.model_kind != ds.model:
            raise CLIError(f"{path}: network predicts model {est.model_kind}, test data is "
                           f"{ds.model}")
        predictors[name or est.arch] = est.predict
    if args.nlls:
        if ds.model != "2c":
            raise CLIError("the SMT fit is only defined for the two-compartment model")
        predictors["nlls"] = _nlls_predict(scheme)
    if not predictors:
        raise CLIError("nothing to evaluate: pass --weights and/or --nlls")
    truth = ds.params.astype(float)
    for name, predict in predictors.items():
        t0 = time.perf_counter()
        pred = predict(ds.signals)
        report.runtime[f"{name}_predict"] = time.perf_counter() - t0
        report.add_mae(name, evaluation.mae(pred, truth))
        if name == "nlls":
            f_idx = names.index("f")
            report.add_failure(name, evaluation.failure_rate(pred[:, f_idx]))
        if args.cv_configs > 0:
            n = min(args.cv_configs, len(ds))
            configs = tissue.config_from_params(ds.model, truth[:n], ds.odf[:n].astype(float))
            t0 = time.perf_counter()
            res = evaluation.rotational_cv(predict, configs, scheme,
                                           sph_rotations(args.cv_bandwidth), guard=args.cv_guard)
            report.runtime[f"{name}_cv"] = time.perf_counter() - t0
            report.add_cv(name, res)
    for row in report.rows():
        cells = "  ".join(f"{k}={v:.4g}" for k, v in row.items() if k != "method" and v is not None)
        extra = f"  failure={report.failure[row['method']]:.3f}" if row["method"] in report.failure else ""
        print(f"{row['method']:>10}  {cells}{extra}")
    for out in args.out or []:
        evaluation.export_report(report, out)
        print(f"report -> {out}")
    return report


def sph_rotations(bandwidth):
    from .sph import so3_grid

    return so3_grid(bandwidth)


def _load_mask(args, volume, scheme):
    if args.mask:
        mask = read_nifti1(args.mask).data[..., 0] > 0
        if mask.shape != volume.data.shape[:3]:
            raise CLIError(f"mask shape {mask.shape} differs from volume {volume.data.shape[:3]}")
        return mask
    return otsu_mask(volume, scheme)


def cmd_predict(args):
    from .nn.pipeline import Estimator

    scheme = resolve_scheme(args.scheme)
    volume = read_nifti1(args.dwi)
    try:
        est = Estimator.load(args.weights, scheme)
    except ValueError as exc:
        raise CLIError(f"{args.weights}: {exc}") from exc
    mask = _load_mask(args, volume, scheme)
    signals, index, n_zero = masked_signals(volume, scheme, mask)
    if n_zero:
        log.warning("%d masked voxels have a zero b=0 mean; their maps are set to 0", n_zero)
    t0 = time.perf_counter()
    values = predict_voxels(lambda s: est.predict(s, normalized=True), signals,
                            chunk=args.chunk, threads=args.threads)
    seconds = time.perf_counter() - t0
    rate = len(signals) / seconds if len(signals) and seconds > 0 else float("nan")
    paths = write_maps(values, index, volume.data.shape[:3], est.param_names, args.out_prefix,
                       _map_geometry(volume), clamp=args.clamp)
    print(f"predicted {len(signals)} voxels in {seconds:.2f} s ({rate:.0f} voxels/s, "
          f"{args.threads} thread(s))")
    for p in paths:
        print(f"map -> {p}")
    return {"voxels": len(signals), "seconds": seconds, "voxels_per_s": rate, "paths": paths}


def _map_geometry(volume):
    geo = dict(volume.geometry)
    if "pixdim" in geo:
        pix = list(geo["pixdim"])
        pix[4] = 1.0
        geo["pixdim"] = pix
    return geo


def cmd_fit_smt(args):
    scheme = resolve_scheme(args.scheme)
    if args.data:
        ds = load_dataset(args.data)
        if ds.model != "2c":
            raise CLIError("the SMT fit is only defined for the two-compartment model")
        res = fit.fit_smt_signals(ds.signals.astype(float), scheme)
        err = evaluation.mae(res.params(), ds.params)
        rate = evaluation.failure_rate(res)
        print(f"MAE d={err[0]:.4g} f={err[1]:.4g}  boundary failures {rate:.3f}")
        return res
    if not args.dwi or not args.out_prefix:
        raise CLIError("fit-smt needs --data, or --dwi with --out-prefix")
    volume = read_nifti1(args.dwi)
    mask = _load_mask(args, volume, scheme)
    signals, index, _ = masked_signals(volume, scheme, mask)
    means = tissue.powder_average(signals, scheme)
    res = fit.nlls_smt_2c(means, [s.bval for s in scheme.shells]) if len(means) else None
    values = None if res is None else np.column_stack([res.d, res.f, res.at_bound])
    paths = write_maps(values, index, volume.data.shape[:3], ("d", "f", "at_bound"),
                       args.out_prefix, _map_geometry(volume))
    for p in paths:
        print(f"map -> {p}")
    return res


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="sphmicro", description=__doc__.split("\n")[0])
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--print-config", action="store_true",
                        help="print the resolved configuration and exit")
    parser.add_argument("--threads", type=int,
                        default=int(os.environ.get("SPHMICRO_THREADS", "1")),
                        help="worker threads (default: $SPHMICRO_THREADS or 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scheme=True):
        if scheme:
            p.add_argument("--scheme", default="hardi", help="bundled scheme name or file")
        p.add_argument("--model", choices=tuple(tissue.PARAM_NAMES), default="2c")
        p.add_argument("--snr", type=float, default=None,
                       help="Rician SNR (default 30 for hardi, 20 for tensor_valued; inf = none)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--rotate", action="store_true", help="randomly rotate ODFs")
        p.add_argument("--odf-pool", help="ODF text file to sample from instead of synthesis")

    p = sub.add_parser("simulate", help="write train/val/test datasets")
    common(p)
    p.add_argument("--n-train", type=int, default=0)
    p.add_argument("--n-val", type=int, default=0)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--phantom", action="store_true",
                   help="also write a 16^3 phantom volume with region labels and truth")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a network on simulated batches")
    common(p)
    p.add_argument("--arch", choices=("scnn", "reg-mlp", "pa-mlp", "sh-mlp"), default="scnn")
    p.add_argument("--batches", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--train-data", help="dataset to cycle through instead of on-the-fly batches")
    p.add_argument("--val-data", help="dataset for initial/final validation loss")
    p.add_argument("--out", required=True, help="weight manifest path (blob gets .bin)")
    p.add_argument("--loss-log", help="CSV of per-batch losses")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="MAE / CV / failure-rate report")
    p.add_argument("--test", required=True, help="test dataset manifest")
    p.add_argument("--scheme", help="scheme (default: the one named in the dataset)")
    p.add_argument("--weights", action="append", help="[NAME=]weight file; repeatable")
    p.add_argument("--nlls", action="store_true", help="include the SMT NLLS baseline")
    p.add_argument("--cv-configs", type=int, default=0, help="configs for rotational CV")
    p.add_argument("--cv-bandwidth", type=int, default=9, help="SO(3) grid bandwidth")
    p.add_argument("--cv-guard", type=float, default=evaluation.CV_GUARD)
    p.add_argument("--out", action="append", help="report path (.csv or .json); repeatable")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="parameter maps from a 4D NIfTI volume")
    p.add_argument("--dwi", required=True)
    p.add_argument("--scheme", default="hardi")
    p.add_argument("--weights", required=True)
    p.add_argument("--mask", help="mask volume (default: Otsu threshold of the b=0 mean)")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--clamp", action="store_true", help="clip maps to physical ranges")
    p.add_argument("--chunk", type=int, default=1024, help="voxels per worker task")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("fit-smt", help="SMT NLLS fit of a volume or dataset")
    p.add_argument("--scheme", default="hardi")
    p.add_argument("--dwi")
    p.add_argument("--data", help="dataset manifest (prints MAE and failure rate)")
    p.add_argument("--mask")
    p.add_argument("--out-prefix")
    p.set_defaults(func=cmd_fit_smt)
    return parser


def read_config(path):
    """``{section: {key: value}}`` from a key = value file ("" = global)."""
    sections, current = {"": {}}, ""
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CLIError(f"{path}:{lineno}: expected 'key = value'")
        sections[current][key.strip().replace("-", "_")] = value.strip()
    return sections


def _convert(action, value, where):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        lowered = value.lower()
        if lowered not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise CLIError(f"{where}: expected a boolean, got {value!r}")
        return lowered in ("1", "true", "yes", "on")
    conv = action.type or str
    try:
        if isinstance(action, argparse._AppendAction):
            return [conv(v.strip()) for v in value.split(",") if v.strip()]
        result = conv(value)
    except ValueError as exc:
        raise CLIError(f"{where}: {exc}") from None
    if action.choices is not None and result not in action.choices:
        raise CLIError(f"{where}: {result!r} not in {list(action.choices)}")
    return result


def _apply_config(parser, argv, config_path):
    sections = read_config(config_path)
    choices = _subparsers(parser).choices
    command = next((a for a in argv if a in choices), None)
    if command is None:
        return parser.parse_args(argv)  # argparse reports the missing subcommand
    sub = choices[command]
    actions = {a.dest: a for a in sub._actions if a.dest != "help"}
    top = {a.dest: a for a in parser._actions if a.dest not in ("help", "command")}
    top_defaults, sub_defaults = {}, {}
    for section in ("", command):
        for key, value in sections.get(section, {}).items():
            where = f"{config_path} [{section or 'global'}] {key}"
            if key in actions:
                sub_defaults[key] = _convert(actions[key], value, where)
            elif key in top:
                top_defaults[key] = _convert(top[key], value, where)
            elif section:
                raise CLIError(f"{where}: unknown option for '{command}'")
    for action in sub._actions:
        if action.dest in sub_defaults:
            action.required = False
    sub.set_defaults(**sub_defaults)
    parser.set_defaults(**top_defaults)
    return parser.parse_args(argv)


def _subparsers(parser):
    return next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))


def resolved_config(args):
    skip = {"func", "print_config", "config"}
    lines = [f"[{args.command}]"]
    for key in sorted(vars(args)):
        if key in skip or key == "command":
            continue
        value = getattr(args, key)
        if isinstance(value, list):
            value = ",".join(map(str, value))
        lines.append(f"{key} = {'' if value is None else value}")
    return "\n".join(lines)


def parse_args(argv=None):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        if not Path(known.config).is_file():
            raise CLIError(f"config file {known.config} not found")
        return _apply_config(parser, argv, known.config)
    return parser.parse_args(argv)


def main(argv=None):
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.print_config:
            print(resolved_config(args))
            return 0
        with _thread_limit(args.threads):
            args.func(args)
    except (CLIError, NiftiError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
