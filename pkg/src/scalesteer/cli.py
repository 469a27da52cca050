"""Command-line surface.

Subcommands: basis, check-equivariance, oracle-check, gradcheck,
make-dataset, train, eval, bench, dump.  Every run prints key=value lines
(machine parseable) starting with a header that records config path, seed
and thread count.  Exit codes: 0 success/pass, 1 check failure, 2 usage or
configuration error.

Configuration is a flat key=value text file; '#' starts a comment.  Unknown
keys are rejected.  Defaults:

    base=2^(1/3)      scale grid base
    n_scales=4        scale levels
    n_basis=6         basis functions per filter
    sigma0=1.5        base Gaussian width
    filter_size=7     square filter extent (odd)
    k_s=1             interaction extent along the scale axis
    variant=vector    classifier variant (vector|scalar|cnn)
    widths=16,32,48   channel widths of the three blocks
    seed=0            RNG seed
    epochs=20         training epochs
    batch=128         minibatch size
    lr=0.01           initial learning rate
    lr_decay_epochs=20,40   epochs at which lr is multiplied by lr_decay_factor
    lr_decay_factor=0.1
    padding_mode=zero (zero|circular)
    precision=f32     (f32|f64)
    threads=<cpus>    worker threads; env SCALESTEER_THREADS overrides
"""

import argparse
import os
import statistics
import sys
import time

import numpy as np

from . import autodiff as ad
from . import container, data
from .basis import BasisSpec, build_basis, load_basis, save_basis, write_pgm
from .equivariance import SweepConfig, run_oracle_suite, sweep_equivariance
from .group import DEFAULT_BASE, ScaleGrid
from .model import (
    Classifier,
    ClassifierConfig,
    TrainConfig,
    evaluate,
    load_classifier,
    matched_cnn_config,
    metrics_csv,
    save_classifier,
    train,
)
from .scaleconv import conv_h_h_interscale, conv_t_h, random_layer
from .tensorops import conv2d

THREADS_ENV = "SCALESTEER_THREADS"


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    return {
        "base": DEFAULT_BASE,
        "n_scales": 4,
        "n_basis": 6,
        "sigma0": 1.5,
        "filter_size": 7,
        "k_s": 1,
        "variant": "vector",
        "widths": (16, 32, 48),
        "seed": 0,
        "epochs": 20,
        "batch": 128,
        "lr": 0.01,
        "lr_decay_epochs": (20, 40),
        "lr_decay_factor": 0.1,
        "padding_mode": "zero",
        "precision": "f32",
        "threads": os.cpu_count() or 1,
    }


_INT_KEYS = {"n_scales", "n_basis", "filter_size", "k_s", "seed", "epochs", "batch", "threads"}
_FLOAT_KEYS = {"base", "sigma0", "lr", "lr_decay_factor"}
_TUPLE_KEYS = {"widths", "lr_decay_epochs"}


def parse_config(text: str) -> dict:
    cfg = default_config()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw_line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in cfg:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            if key in _INT_KEYS:
                cfg[key] = int(value)
            elif key in _FLOAT_KEYS:
                cfg[key] = float(value)
            elif key in _TUPLE_KEYS:
                cfg[key] = tuple(int(v) for v in value.split(",") if v.strip())
            else:
                cfg[key] = value
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return cfg


def load_config(path: str | None) -> dict:
    if path is None:
        cfg = default_config()
    else:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = parse_config(fh.read())
    env_threads = os.environ.get(THREADS_ENV)
    if env_threads:
        cfg["threads"] = int(env_threads)
    return cfg


def _emit(out, **kv):
    for key, value in kv.items():
        if isinstance(value, float):
            value = f"{value:.10g}"
        print(f"{key}={value}", file=out)


def _header(out, args, cfg):
    _emit(out, command=args.command, config=getattr(args, "config", None) or "defaults",
          seed=cfg["seed"], threads=cfg["threads"])


def _basis_from_cfg(cfg: dict):
    spec = BasisSpec(cfg["n_basis"], cfg["filter_size"], ScaleGrid(cfg["base"], cfg["n_scales"]),
                     cfg["sigma0"])
    return build_basis(spec)


# ---------------------------------------------------------------------------
# subcommands


def cmd_basis(args, cfg, out) -> int:
    basis = _basis_from_cfg(cfg)
    save_basis(args.out, basis)
    _emit(out, wrote=args.out, functions=basis.num_functions, levels=basis.num_levels,
          filter_size=basis.filter_size)
    if args.pgm:
        os.makedirs(args.pgm, exist_ok=True)
        count = 0
        for i in range(basis.num_functions):
            for level in range(basis.num_levels):
                write_pgm(os.path.join(args.pgm, f"basis_{i:02d}_level_{level:02d}.pgm"),
                          basis.data[i, level])
                count += 1
        _emit(out, pgm_dir=args.pgm, pgm_files=count)
    return 0


def cmd_check_equivariance(args, cfg, out) -> int:
    sweep_cfg = SweepConfig(base=cfg["base"], seed=cfg["seed"], trials=args.trials,
                            threads=cfg["threads"])
    report = sweep_equivariance(sweep_cfg)
    csv_text = report.to_csv()
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    _emit(out, wrote=args.out, rows=len(report.points), images=report.image_source)
    return 0


def cmd_oracle_check(args, cfg, out) -> int:
    dtype = np.float64 if cfg["precision"] == "f64" else np.float32
    tol = 1e-12 if cfg["precision"] == "f64" else 1e-5
    worst, worst_case = run_oracle_suite(cfg["seed"], args.instances, dtype=dtype, base=cfg["base"])
    _emit(out, instances=args.instances, precision=cfg["precision"], worst_relative_error=worst,
          tolerance=tol, worst_case=worst_case)
    if worst > tol:
        _emit(out, result="FAIL")
        return 1
    _emit(out, result="PASS")
    return 0


def cmd_gradcheck(args, cfg, out) -> int:
    worst = 0.0
    tol = 1e-6
    for seed in range(args.seeds):
        rng = np.random.default_rng((cfg["seed"], seed))
        spec = BasisSpec(3, 3, ScaleGrid(cfg["base"], 3), sigma0=1.0)
        basis = build_basis(spec)
        x = rng.standard_normal((2, 2, 3, 6, 6))
        w1 = ad.leaf(rng.standard_normal((2, 2, 1, 3)) * 0.5)
        w2 = ad.leaf(rng.standard_normal((3, 2, 2, 3)) * 0.5)
        b2 = ad.leaf(rng.standard_normal(3) * 0.1)
        head = rng.standard_normal((3 * 3 * 3, 3)) * 0.2
        labels = rng.integers(0, 3, size=2)

        def make_loss():
            h = ad.scale_conv_hh(ad.constant(x), w1, None, basis)
            h = ad.relu(h)
            h = ad.scale_conv_hh(h, w2, b2, basis)
            h = ad.max_axis(h, 2)
            h = ad.max_pool2d(h, 2)
            h = ad.reshape(h, (2, -1))
            return ad.softmax_cross_entropy(ad.matmul(h, ad.constant(head)), labels)

        if args.perturb:
            # negative control: an op with a deliberately wrong adjoint must
            # be flagged by the finite-difference comparison
            def corrupt(node):
                out = ad.Node(node.value.copy(), (node,))
                out._backward = lambda g: ad._accumulate(node, 1.5 * g)
                return out

            def make_bad_loss():
                h = ad.scale_conv_hh(ad.constant(x), corrupt(w1), None, basis)
                h = ad.relu(h)
                h = ad.scale_conv_hh(h, w2, b2, basis)
                h = ad.max_axis(h, 2)
                h = ad.max_pool2d(h, 2)
                h = ad.reshape(h, (2, -1))
                return ad.softmax_cross_entropy(ad.matmul(h, ad.constant(head)), labels)

            worst = max(worst, ad.finite_difference_check(make_bad_loss, [w1], max_entries=6,
                                                          rng=np.random.default_rng(seed)))
            continue
        worst = max(worst, ad.finite_difference_check(make_loss, [w1, w2, b2], max_entries=6,
                                                      rng=np.random.default_rng(seed)))
    _emit(out, seeds=args.seeds, worst_relative_error=worst, tolerance=tol)
    if args.perturb:
        # the perturbed run is expected to disagree
        ok = worst > 1e-3
        _emit(out, result="PASS" if ok else "FAIL", mode="negative-control")
        return 0 if ok else 1
    if worst > tol:
        _emit(out, result="FAIL")
        return 1
    _emit(out, result="PASS")
    return 0


def cmd_make_dataset(args, cfg, out) -> int:
    if args.synthetic:
        images, labels = data.render_digit_corpus(args.synthetic, cfg["seed"])
    else:
        if not args.images or not args.labels:
            raise ConfigError("make-dataset needs --images/--labels IDX files or --synthetic N")
        images = data.read_idx(args.images).data
        labels = data.read_idx(args.labels).data.astype(np.int64)
        if args.extra_images and args.extra_labels:
            images = np.concatenate([images, data.read_idx(args.extra_images).data])
            labels = np.concatenate([labels, data.read_idx(args.extra_labels).data.astype(np.int64)])
    splits = data.DESK_SPLITS if args.desk else data.FULL_SPLITS
    ds = data.make_mnist_scale(images, labels, cfg["seed"], resolution=args.resolution,
                               split_sizes=splits)
    data.save_dataset(args.out, ds)
    _emit(out, wrote=args.out, samples=len(ds.images), splits=",".join(map(str, ds.split_sizes)),
          resolution=ds.resolution)
    return 0


def _classifier_config(cfg: dict) -> ClassifierConfig:
    return ClassifierConfig(
        variant=cfg["variant"], widths=tuple(cfg["widths"]), n_scales=cfg["n_scales"],
        base=cfg["base"], k_s=cfg["k_s"], n_basis=cfg["n_basis"], sigma0=cfg["sigma0"],
        filter_size=cfg["filter_size"], padding_mode=cfg["padding_mode"], precision=cfg["precision"],
    )


def cmd_train(args, cfg, out) -> int:
    from dataclasses import replace

    ds = data.load_dataset(args.dataset)
    ccfg = replace(_classifier_config(cfg), resolution=ds.resolution)
    if ccfg.variant == "cnn" and args.match_params:
        ccfg = matched_cnn_config(ccfg)
        _emit(out, matched_widths=",".join(map(str, ccfg.widths)))
    model = Classifier(ccfg, seed=cfg["seed"])
    tcfg = TrainConfig(epochs=cfg["epochs"], batch=cfg["batch"], lr=cfg["lr"],
                       decay_epochs=tuple(cfg["lr_decay_epochs"]), decay_factor=cfg["lr_decay_factor"],
                       seed=cfg["seed"])
    rows = train(model, ds, tcfg)
    if args.metrics:
        with open(args.metrics, "w", encoding="utf-8") as fh:
            fh.write(metrics_csv(rows))
        _emit(out, metrics=args.metrics)
    save_classifier(args.out, model)
    final = [r for r in rows if r["split"] == "val"][-1]
    _emit(out, wrote=args.out, params=model.param_count(), val_accuracy=final["accuracy"],
          wall_seconds=final["wall_seconds"])
    return 0


def cmd_eval(args, cfg, out) -> int:
    ds = data.load_dataset(args.dataset)
    model = load_classifier(args.checkpoint)
    images, labels = ds.split(args.split)
    loss, acc = evaluate(model, images, labels)
    _emit(out, split=args.split, samples=len(images), loss=loss, accuracy=f"{acc:.4f}")
    return 0


def _median_time(fn, repeats: int, warmup: int = 2) -> float:
    if repeats < 1:
        raise ConfigError("bench needs at least one repetition")
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cmd_bench(args, cfg, out) -> int:
    rng = np.random.default_rng(cfg["seed"])
    basis = _basis_from_cfg(cfg)
    n_s = basis.num_levels
    c_in, c_out, u = args.c_in, args.c_out, args.size
    dtype = np.float32 if cfg["precision"] == "f32" else np.float64
    image = rng.standard_normal((c_in, u, u)).astype(dtype)
    layer = random_layer(rng, c_in, c_out, basis, dtype=dtype)
    plain_kernel = rng.standard_normal((c_out * n_s, c_in, basis.filter_size, basis.filter_size))
    plain_kernel = plain_kernel.astype(dtype)

    t_plain = _median_time(lambda: conv2d(image, plain_kernel), args.repeats)
    t_lift = _median_time(lambda: conv_t_h(image, layer), args.repeats)

    from .scaleconv import FeatureMapH

    f = FeatureMapH(rng.standard_normal((c_in, n_s, u, u)).astype(dtype), basis.spec.scale_grid)
    big_plain = rng.standard_normal((c_out * n_s, c_in * n_s, basis.filter_size, basis.filter_size))
    big_plain = big_plain.astype(dtype)
    t_plain_hh = _median_time(lambda: conv2d(f.data.reshape(c_in * n_s, u, u), big_plain), args.repeats)
    t_hh = _median_time(lambda: conv_h_h_interscale(f, layer), args.repeats)

    _emit(out, repeats=args.repeats, size=u, c_in=c_in, c_out=c_out, n_scales=n_s,
          plain_conv2d_ms=1e3 * t_plain, conv_t_h_ms=1e3 * t_lift,
          lift_ratio=t_lift / t_plain,
          plain_conv2d_matched_hh_ms=1e3 * t_plain_hh, conv_h_h_ms=1e3 * t_hh,
          hh_ratio=t_hh / t_plain_hh)
    return 0


def cmd_dump(args, cfg, out) -> int:
    print(container.summarize(args.file), file=out)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scalesteer",
                                     description="scale-equivariant steerable convolution toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("basis", help="build and store the filter bank")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--pgm", help="directory for per-slice PGM dumps")

    p = sub.add_parser("check-equivariance", help="run the three standard sweeps")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, default=10)

    p = sub.add_parser("oracle-check", help="fast paths vs the brute-force group sum")
    p.add_argument("--config")
    p.add_argument("--instances", type=int, default=50)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--perturb", action="store_true", help="negative control, expected to disagree")

    p = sub.add_parser("make-dataset", help="build a scaled-digits realization")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--images", help="IDX image file")
    p.add_argument("--labels", help="IDX label file")
    p.add_argument("--extra-images", help="second IDX image file to pool")
    p.add_argument("--extra-labels", help="second IDX label file to pool")
    p.add_argument("--synthetic", type=int, help="render N synthetic digits instead of reading IDX")
    p.add_argument("--resolution", type=int, default=28, choices=(28, 56))
    p.add_argument("--desk", action="store_true", help="2000/500/5000 splits instead of 10k/2k/50k")

    p = sub.add_parser("train", help="train a classifier on a dataset file")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="per-epoch CSV path")
    p.add_argument("--match-params", action="store_true",
                   help="for variant=cnn, rescale widths to match the vector model")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    p = sub.add_parser("bench", help="wall-time of the scale convolutions vs plain conv2d")
    p.add_argument("--config")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--c-in", type=int, default=8)
    p.add_argument("--c-out", type=int, default=16)

    p = sub.add_parser("dump", help="summarize a container file")
    p.add_argument("--config")
    p.add_argument("file")
    return parser


_HANDLERS = {
    "basis": cmd_basis,
    "check-equivariance": cmd_check_equivariance,
    "oracle-check": cmd_oracle_check,
    "gradcheck": cmd_gradcheck,
    "make-dataset": cmd_make_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "dump": cmd_dump,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = sys.stdout
    try:
        cfg = load_config(getattr(args, "config", None))
        _header(out, args, cfg)
        return _HANDLERS[args.command](args, cfg, out)
    except (ConfigError, ValueError) as exc:
        print(f"error={exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error={exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
