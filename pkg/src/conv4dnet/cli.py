"""Command-line entry point: ``conv4dnet {gen,preprocess,train,eval,saliency,kernels}``.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 internal
invariant failure. Every command writes ``run.json`` (argv, parsed
arguments, seed) into its output directory.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import io
from .errors import Conv4dNetError, ConfigError
from .models import MODEL_KINDS, ModelConfig, build_model
from .pipeline import (
    CLASS_NAMES,
    PreprocessConfig,
    SplitPlan,
    SyntheticSpec,
    check_split,
    generate_synthetic,
    make_splits,
    preprocess_dataset,
)
from .saliency import (
    DEFAULT_LAYER,
    METHODS,
    extract_first_layer_kernels,
    gradcampp_4d,
    temporal_saliency_with_roi,
)
from .train import TrainConfig, evaluate, train_loop

log = logging.getLogger("conv4dnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ints(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _write_run(out_dir, args, **extra):
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    record = {"argv": sys.argv[1:], "command": args.command, "version": __version__,
              "args": {k: v for k, v in vars(args).items() if k != "func"},
              "time": time.strftime("%Y-%m-%dT%H:%M:%S"), **extra}
    io.write_json(Path(out_dir) / "run.json", record)


# -- commands ----------------------------------------------------------------

def cmd_gen(args):
    if len(args.geometry) != 4:
        raise ConfigError("--geometry needs T,X,Y,Z")
    spec = SyntheticSpec.for_geometry(args.geometry, tr_seconds=args.tr)
    data = generate_synthetic(spec, classes=args.classes, samples_per_class=args.per_class,
                              noise_sigma=args.noise, seed=args.seed,
                              sessions_per_subject=args.sessions_per_subject)
    io.save_dataset(data, args.out)
    _write_run(args.out, args)
    print(f"wrote {len(data)} samples of geometry {data.geometry} to {args.out}")


def cmd_preprocess(args):
    data = io.load_dataset(args.input)
    config = PreprocessConfig(discard_frames=args.discard, band=args.band, tr_seconds=args.tr)
    out = preprocess_dataset(data, config)
    io.save_dataset(out, args.out)
    _write_run(args.out, args)
    print(f"preprocessed {len(out)} samples -> geometry {out.geometry} in {args.out}")


def _select_classes(data, num_classes, pair):
    if data.num_classes == num_classes:
        return data
    if num_classes == 2 and data.num_classes == 3:
        names = tuple(pair)
        unknown = [n for n in names if n not in data.class_names]
        if unknown:
            raise ConfigError(f"--pair names {unknown} not in dataset classes {data.class_names}")
        return data.select_classes(names)
    raise ConfigError(f"class mismatch: requested {num_classes} classes, dataset has "
                      f"{data.num_classes} {list(data.class_names)}")


def _plan_to_ids(data, plan: SplitPlan):
    sid = [s.session_id for s in data.samples]
    return {"train": [sid[i] for i in plan.train], "test": [sid[i] for i in plan.test],
            "folds": [[sid[i] for i in f] for f in plan.folds]}


def _ids_to_indices(data, ids):
    where = {s.session_id: i for i, s in enumerate(data.samples)}
    missing = [s for s in ids if s not in where]
    if missing:
        raise ConfigError(f"{len(missing)} split sessions missing from dataset, e.g. {missing[0]}")
    return [where[s] for s in ids]


def cmd_train(args):
    data = _select_classes(io.load_dataset(args.data), args.classes, args.pair)
    counts = data.class_counts()
    test_per_class = args.test_per_class
    if test_per_class is None:
        test_per_class = max(1, min(counts) // 4)
    plan = make_splits(data.samples, test_per_class, k=args.folds, seed=args.seed,
                       num_classes=data.num_classes)
    check_split(data.samples, plan)
    chans = args.channels
    config = ModelConfig(stage_channels=chans, stem_channels=chans[0], final_channels=chans[-1],
                         num_classes=data.num_classes, lstm_hidden=args.lstm_hidden,
                         input_geometry=data.geometry, spatial_kernel=args.spatial_kernel,
                         temporal_kernel=args.temporal_kernel)
    model = build_model(args.model, config, seed=args.seed)
    tconf = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr_max=args.lr,
                        lr_min=args.lr_min, weight_decay=args.weight_decay,
                        augment=not args.no_augment, fold=args.fold, seed=args.seed)
    if args.folds >= 2 and not 0 <= args.fold < args.folds:
        raise ConfigError(f"--fold {args.fold} outside [0, {args.folds})")

    def progress(entry):
        print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                       for k, v in entry.items()), flush=True)

    result = train_loop(model, data, plan, tconf, progress=progress)
    out = Path(args.out)
    summary = {"best_epoch": result.best_epoch, "final": result.log[-1] if result.log else {},
               "train_config": tconf.to_dict()}
    io.save_checkpoint(out, model, data.class_names, optimizer=result.optimizer,
                       log_summary=summary, split=_plan_to_ids(data, plan),
                       extra={"pair": list(args.pair)})
    io.write_rows_csv(out / "epoch_log.csv", result.log)
    _write_run(out, args, seed=args.seed)
    print(f"saved checkpoint to {out} (best epoch {result.best_epoch})")


def cmd_eval(args):
    model, meta = io.load_checkpoint(args.ckpt)
    data = io.load_dataset(args.data)
    ck_names = tuple(meta["class_names"])
    if data.class_names != ck_names:
        if len(ck_names) < data.num_classes and all(n in data.class_names for n in ck_names):
            data = data.select_classes(ck_names)
        else:
            raise ConfigError(f"class mismatch: checkpoint has {len(ck_names)} classes "
                              f"{list(ck_names)}, dataset has {data.num_classes} "
                              f"{list(data.class_names)}")
    split = meta.get("split") or {}
    if args.split == "all":
        idx = list(range(len(data)))
    elif args.split == "test":
        idx = _ids_to_indices(data, split.get("test", []))
    elif args.split == "train":
        idx = _ids_to_indices(data, split.get("train", []))
    else:
        fold = meta["train_log_summary"]["train_config"]["fold"]
        folds = split.get("folds", [])
        idx = _ids_to_indices(data, folds[fold]) if len(folds) > 1 else []
    rep = evaluate(model, data, idx, shift=args.shift)
    out = Path(args.out) if args.out else Path(args.ckpt) / f"eval-{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "report.json", rep.to_dict())
    (out / "report.txt").write_text(rep.table() + "\n")
    _write_run(out, args)
    print(rep.table())


def _load_volume(path):
    vol = io.read_t4d(path)
    if vol.ndim not in (4, 5):
        raise ConfigError(f"{path}: expected a (T,X,Y,Z) or (1,T,X,Y,Z) volume, got {vol.shape}")
    return vol.reshape(vol.shape[-4:])


def cmd_saliency(args):
    model, _ = io.load_checkpoint(args.ckpt)
    vol = _load_volume(args.sample)
    if vol.shape != model.config.input_geometry:
        raise ConfigError(f"sample geometry {vol.shape} != model geometry "
                          f"{model.config.input_geometry}")
    res = gradcampp_4d(model, vol, args.target_class, layer=args.layer, method=args.method)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_t4d(out / "map4d.t4d", res.map4d)
    io.write_t4d(out / "upsampled.t4d", res.upsampled)
    header, cols = ["t", "saliency"], [list(range(len(res.temporal_signal))),
                                      [float(v) for v in res.temporal_signal]]
    if args.roi:
        mask = io.read_t4d(args.roi) > 0.5
        bold, sal = temporal_saliency_with_roi(res, mask, vol)
        header += ["roi_bold", "roi_saliency"]
        cols += [[float(v) for v in bold], [float(v) for v in sal]]
    io.write_series_csv(out / "temporal_signal.csv", header, cols)
    _write_run(out, args)
    print(f"saliency for class {args.target_class} at layer {res.layer} written to {out}")


def cmd_kernels(args):
    model, _ = io.load_checkpoint(args.ckpt)
    cout = model.trunk[0].spec.out_channels
    channels = range(cout) if args.channels is None else args.channels
    views = extract_first_layer_kernels(model, channels, seed=args.seed,
                                        per_channel=args.per_channel)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kt = len(views[0].profile) if views else 0
    rows = [{"channel": v.channel, "dx": v.offset[0], "dy": v.offset[1], "dz": v.offset[2],
             "tag": v.tag, **{f"w{i}": float(w) for i, w in enumerate(v.profile)}} for v in views]
    io.write_rows_csv(out / "kernels.csv", rows)
    _write_run(out, args)
    tags = {t: sum(v.tag == t for v in views) for t in ("derivative", "average", "other")}
    print(f"{len(views)} temporal profiles of length {kt}: {tags}")


# -- parser ------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="conv4dnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic planted-pattern dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--geometry", type=_ints, default=(32, 16, 16, 16), help="T,X,Y,Z")
    g.add_argument("--per-class", type=int, default=20)
    g.add_argument("--noise", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", type=int, default=3, choices=(2, 3))
    g.add_argument("--sessions-per-subject", type=int, default=1)
    g.add_argument("--tr", type=float, default=3.0)
    g.set_defaults(func=cmd_gen)

    pp = sub.add_parser("preprocess", help="discard -> bandpass -> per-voxel z-score")
    pp.add_argument("--in", dest="input", required=True)
    pp.add_argument("--out", required=True)
    pp.add_argument("--discard", type=int, default=20)
    pp.add_argument("--band", type=_floats, default=(0.01, 0.1))
    pp.add_argument("--tr", type=float, default=3.0)
    pp.set_defaults(func=cmd_preprocess)

    t = sub.add_parser("train", help="train one model and write a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--model", choices=MODEL_KINDS, default="4d")
    t.add_argument("--classes", type=int, choices=(2, 3), default=3)
    t.add_argument("--pair", type=lambda s: tuple(s.split(",")), default=("CN", "DAT"),
                   help="class names kept for --classes 2 (default CN,DAT)")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch", type=int, default=2)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--lr-min", type=float, default=0.0)
    t.add_argument("--weight-decay", type=float, default=1e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--folds", type=int, default=1)
    t.add_argument("--fold", type=int, default=0, help="held-out validation fold")
    t.add_argument("--test-per-class", type=int, default=None)
    t.add_argument("--channels", type=_ints, default=(4, 8, 8, 16),
                   help="stage widths; full-scale widths are 128,256,512,1024")
    t.add_argument("--lstm-hidden", type=int, default=16)
    t.add_argument("--spatial-kernel", type=int, default=3)
    t.add_argument("--temporal-kernel", type=int, default=3)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy / sensitivity / specificity on a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("test", "train", "val", "all"), default="test")
    e.add_argument("--shift", type=int, default=0, help="circular time shift applied to inputs")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("saliency", help="Grad-CAM++ maps and temporal saliency signal")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--sample", required=True, help="T4D volume")
    s.add_argument("--class", dest="target_class", type=int, required=True)
    s.add_argument("--layer", default=DEFAULT_LAYER)
    s.add_argument("--roi", default=None, help="T4D (X,Y,Z) mask, nonzero = inside")
    s.add_argument("--method", choices=METHODS, default="gradcam++")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_saliency)

    k = sub.add_parser("kernels", help="first-layer temporal kernel profiles with tags")
    k.add_argument("--ckpt", required=True)
    k.add_argument("--channels", type=_ints, default=None)
    k.add_argument("--per-channel", type=int, default=3)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_kernels)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(
                ["gen", "preprocess", "train", "eval", "saliency", "kernels"]))
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (Conv4dNetError, FileNotFoundError, NotADirectoryError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except Exception as err:  # noqa: BLE001
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
