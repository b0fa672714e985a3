"""Command-line interface.

Subcommands: ``train``, ``reconstruct``, ``compare-majorizers``,
``suggest-alpha`` and ``gen-synthetic``.

Config file grammar
-------------------
One ``key = value`` pair per line. Blank lines and lines starting with ``#``
are ignored, as is anything after a `` #`` on a value line. Keys are the long
flag names with underscores (``lambda_D``, ``max_iter`` ...). Booleans are
``true``/``false``; ``auto`` selects the built-in default for ``tol`` and
``mean_subtract``. Command-line flags override file values.

Exit status: 0 on success, 1 on a numerical failure, 2 on bad usage or input.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
import warnings

import numpy as np

from . import bpegm
from .caol import (DIVERSITY, MAJORIZER_KINDS, ORTHOGONAL, CaolConfig, g_div,
                   init_filters, iterations_to_common_threshold, iterations_to_within,
                   learn, preprocess)
from .convops import BOUNDARY_CONDITIONS, FilterBank, conv_same, orthogonality_residual
from .errors import (ConvAOLError, DimensionError, FormatError, InputError,
                     InvalidParameterError, NumericalError)
from .imageio import filter_mosaic, read_bank, read_image, read_image_dir, write_bank, write_pgm, write_raw
from .majorizers import TrainingSet, dominance_check, exact_hessian, filter_majorizer
from .mbir import (ReconConfig, identity_model, mask_model, metrics, radon_small, reconstruct,
                   view_angles, wls_baseline)
from .synthetic import synthetic_corpus

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2
MODELS = {"p1": ORTHOGONAL, "p2": DIVERSITY}


# -- config --------------------------------------------------------------


def _bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise InputError(f"not a boolean: {s!r}")


def _opt(conv):
    def parse(s):
        return None if s.strip().lower() == "auto" else conv(s)
    return parse


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# key -> (parser, default)
CONFIG_KEYS = {
    "model": (str, "p1"),
    "filters": (str, "7x7x49"),
    "alpha": (float, 2.5e-4),
    "beta": (float, 5e6),
    "majorizer": (str, "exact"),
    "lambda_D": (float, bpegm.DEFAULT_LAMBDA),
    "lambda_Z": (float, bpegm.DEFAULT_LAMBDA),
    "delta": (float, 0.99),
    "omega_restart": (float, 0.0),
    "extrapolation": (_bool, True),
    "restart": (_bool, True),
    "init": (str, "random"),
    "seed": (int, 0),
    "bc": (str, "circular"),
    "tol": (_opt(float), None),
    "max_iter": (int, 20000),
    "gamma": (float, 1.0),
    "alpha_prime": (float, 1e-4),
    "rescale": (_bool, True),
    "mean_subtract": (_opt(_bool), None),
    "for_mbir": (_bool, False),
    "images": (str, ""),
    "out": (str, "."),
}


def default_config() -> dict:
    return {k: d for k, (_, d) in CONFIG_KEYS.items()}


def parse_config(text: str) -> dict:
    """Parse config text into a dict of typed values (only keys present)."""
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split(" #", 1)[0].strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"config line {no}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise InputError(f"config line {no}: unknown key {key!r}")
        try:
            out[key] = CONFIG_KEYS[key][0](val)
        except ValueError as e:
            raise InputError(f"config line {no}: bad value for {key}: {e}") from None
    return out


def serialize_config(cfg: dict) -> str:
    return "".join(f"{k} = {_fmt(cfg[k])}\n" for k in CONFIG_KEYS if k in cfg)


def parse_filters(spec: str) -> tuple[tuple[int, int], int]:
    """``"7x7x49"`` -> ((7, 7), 49); ``"7x7"`` means K = R."""
    try:
        parts = [int(p) for p in spec.lower().split("x")]
    except ValueError:
        raise InputError(f"bad filter spec {spec!r}") from None
    if len(parts) == 2:
        parts.append(parts[0] * parts[1])
    if len(parts) != 3 or min(parts) < 1:
        raise InputError(f"bad filter spec {spec!r}; expected RHxRWxK")
    return (parts[0], parts[1]), parts[2]


def parse_size(spec: str) -> tuple[int, int]:
    try:
        parts = [int(p) for p in spec.lower().split("x")]
    except ValueError:
        raise InputError(f"bad size {spec!r}") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) < 1:
        raise InputError(f"bad size {spec!r}")
    return parts[0], parts[1]


def validate(cfg: dict) -> None:
    """Re-check every value against the library's own constraints."""
    if cfg["model"] not in MODELS:
        raise InvalidParameterError(f"model must be one of {sorted(MODELS)}")
    if cfg["bc"] not in BOUNDARY_CONDITIONS:
        raise InvalidParameterError(f"bc must be one of {BOUNDARY_CONDITIONS}")
    if cfg["init"] not in ("random", "deterministic"):
        raise InvalidParameterError("init must be random or deterministic")
    if cfg["max_iter"] < 1:
        raise InvalidParameterError("max_iter must be positive")
    if cfg["tol"] is not None and not cfg["tol"] > 0:
        raise InvalidParameterError("tol must be positive")
    if not cfg["lambda_Z"] > 1:
        raise InvalidParameterError("lambda_Z must be > 1")
    parse_filters(cfg["filters"])
    caol_config(cfg)
    ReconConfig(gamma=cfg["gamma"], alpha_prime=cfg["alpha_prime"])


def caol_config(cfg: dict, **over) -> CaolConfig:
    _, K = parse_filters(cfg["filters"])
    kw = dict(alpha=cfg["alpha"], K=K, beta=cfg["beta"] if cfg["model"] == "p2" else 0.0,
              model=MODELS[cfg["model"]], majorizer=cfg["majorizer"],
              lambda_D=cfg["lambda_D"], init=cfg["init"], seed=cfg["seed"],
              tol=cfg["tol"], max_iter=cfg["max_iter"], delta=cfg["delta"],
              omega=cfg["omega_restart"], extrapolation=cfg["extrapolation"],
              restart=cfg["restart"])
    kw.update(over)
    return CaolConfig(**kw)


def resolve_config(args, keys) -> dict:
    """Defaults, then the ``--config`` file, then explicit flags."""
    cfg = default_config()
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                cfg.update(parse_config(fh.read()))
        except OSError as e:
            raise InputError(f"cannot read config: {e}") from None
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    validate(cfg)
    return cfg


# -- data ----------------------------------------------------------------


def load_corpus(args, cfg) -> list:
    if args.synthetic:
        images = synthetic_corpus(args.synthetic, parse_size(args.size), args.data_seed)
    elif cfg["images"]:
        try:
            images = read_image_dir(cfg["images"])
        except (FileNotFoundError, NotADirectoryError) as e:
            raise InputError(f"cannot read image directory: {e}") from None
        if not images:
            raise InputError(f"no images in {cfg['images']!r}")
    else:
        raise InputError("give --images DIR or --synthetic L")
    if len({x.shape for x in images}) != 1:
        raise DimensionError("all training images must share one size")
    ms = cfg["mean_subtract"]
    if ms is None:
        ms = not cfg["for_mbir"]
    return preprocess(images, rescale=cfg["rescale"], mean_subtract=ms)


def _out(cfg, name) -> str:
    os.makedirs(cfg["out"], exist_ok=True)
    return os.path.join(cfg["out"], name)


def write_matrix_csv(path, A, prefix="c") -> None:
    with open(path, "w") as fh:
        fh.write(",".join(f"{prefix}{j}" for j in range(A.shape[1])) + "\n")
        for row in A:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


# -- commands ------------------------------------------------------------


TRAIN_KEYS = [k for k in CONFIG_KEYS if k not in ("gamma", "alpha_prime")]


def cmd_train(args) -> int:
    cfg = resolve_config(args, TRAIN_KEYS)
    shape, K = parse_filters(cfg["filters"])
    images = load_corpus(args, cfg)
    ts = TrainingSet(images, shape, cfg["bc"])
    res = learn(ts, caol_config(cfg))
    bank = res.bank
    write_bank(_out(cfg, "filters.caolfb"), bank)
    write_pgm(_out(cfg, "filters.pgm"), filter_mosaic(bank), bits=8, scale=True)
    write_matrix_csv(_out(cfg, "dtd.csv"), bank.D.T @ bank.D, prefix="k")
    bpegm.write_convergence_csv(_out(cfg, "convergence.csv"), res.records, ["D", "Z"])
    with open(_out(cfg, "config.txt"), "w") as fh:
        fh.write(serialize_config(cfg))
    d = res.diagnostics
    print(f"objective {d['objective']:.10g}")
    print(f"iterations {d['iterations']} converged {res.converged}")
    print(f"g_div {d['g_div']:.6g}")
    print(f"orthogonality_residual {d['orthogonality_residual']:.3g}")
    print(f"tf_residual {d['tf_residual']:.3g}")
    return EXIT_OK


def _load(path, what):
    try:
        return read_image(path)
    except OSError as e:
        raise InputError(f"cannot read {what}: {e}") from None


def _forward(args, image_shape):
    if args.forward == "identity":
        return identity_model(image_shape)
    if args.forward == "mask":
        if not args.mask:
            raise InputError("--forward mask needs --mask")
        mask = _load(args.mask, "mask") > 0.5
        if mask.shape != image_shape:
            raise DimensionError("mask and image sizes differ")
        return mask_model(mask)
    if image_shape[0] != image_shape[1]:
        raise DimensionError("the radon model needs a square image")
    return radon_small(view_angles(args.views, args.fraction), image_shape[0])


def cmd_reconstruct(args) -> int:
    cfg = resolve_config(args, ["gamma", "alpha_prime", "tol", "max_iter", "bc", "delta",
                                "omega_restart", "extrapolation", "restart", "lambda_D",
                                "out"])
    y = _load(args.measurement, "measurement")
    try:
        bank = read_bank(args.bank)
    except OSError as e:
        raise InputError(f"cannot read filter bank: {e}") from None
    ref = _load(args.reference, "reference") if args.reference else None
    if args.forward == "radon":
        image_shape = parse_size(args.size) if args.size else (ref.shape if ref is not None
                                                                else None)
        if image_shape is None:
            raise InputError("--forward radon needs --size or --reference")
    else:
        image_shape = y.shape
    rh, rw = bank.shape
    if rh > image_shape[0] or rw > image_shape[1]:
        raise DimensionError(f"filters {bank.shape} do not fit image {image_shape}")
    if ref is not None and ref.shape != tuple(image_shape):
        raise DimensionError("reference and image sizes differ")
    model = _forward(args, tuple(image_shape))
    if y.size != model.m:
        raise DimensionError(f"measurement has {y.size} values, model expects {model.m}")
    W = _load(args.weights, "weights") if args.weights else None
    rc = ReconConfig(gamma=cfg["gamma"], alpha_prime=cfg["alpha_prime"], use_psi=args.psi,
                     tol=cfg["tol"] or 1e-5, max_iter=cfg["max_iter"], delta=cfg["delta"],
                     omega=cfg["omega_restart"], extrapolation=cfg["extrapolation"],
                     restart=cfg["restart"], bc=cfg["bc"], lambda_A=cfg["lambda_D"])
    t0 = time.perf_counter()
    res = reconstruct(y.reshape(-1), model, W, bank, rc)
    seconds = time.perf_counter() - t0
    x = res.x
    write_raw(_out(cfg, "recon.raw"), x)
    write_pgm(_out(cfg, "recon.pgm"), np.clip(x, 0, 1), bits=16)
    bpegm.write_convergence_csv(_out(cfg, "convergence.csv"), res.records,
                                [b.name for b in res.blocks])
    out = {"rmse": None, "psnr": None, "iterations": len(res.records), "seconds": seconds}
    if ref is not None:
        m = metrics(x, ref)
        out["rmse"] = m["rmse"]
        out["psnr"] = m["psnr"] if math.isfinite(m["psnr"]) else None
        err = np.abs(x - ref)
        write_raw(_out(cfg, "error.raw"), err)
        write_pgm(_out(cfg, "error.pgm"), err, bits=16, scale=True)
        print(f"rmse {m['rmse']:.6g} psnr {m['psnr']:.4g} dB")
        if args.forward == "identity":
            gain = m["psnr"] - metrics(y, ref)["psnr"]
            print(f"psnr gain over input {gain:.4g} dB")
        if args.baseline:
            b = metrics(wls_baseline(y.reshape(-1), model, W), ref)
            print(f"wls baseline rmse {b['rmse']:.6g} psnr {b['psnr']:.4g} dB")
    with open(_out(cfg, "metrics.json"), "w") as fh:
        json.dump(out, fh, indent=1)
    print(f"iterations {out['iterations']} converged {res.converged}")
    return EXIT_OK


def cmd_compare_majorizers(args) -> int:
    cfg = resolve_config(args, TRAIN_KEYS)
    shape, K = parse_filters(cfg["filters"])
    images = load_corpus(args, cfg)
    ts = TrainingSet(images, shape, cfg["bc"])
    D0 = init_filters(shape, K, cfg["init"], cfg["seed"])
    kinds = args.kinds.split(",")
    for k in kinds:
        if k not in MAJORIZER_KINDS:
            raise InvalidParameterError(f"unknown majorizer {k!r}")
    curves = {}
    for kind in kinds:
        r = learn(ts, caol_config(cfg, majorizer=kind), D0)
        curves[kind] = r.objectives
        print(f"{kind}: iterations {len(r.objectives)} converged {r.converged} "
              f"to_1pct {iterations_to_within(r.objectives)} final {r.objectives[-1]:.10g}")
    common = iterations_to_common_threshold(curves)
    print("to_1pct_common " + " ".join(f"{k}={v}" for k, v in common.items()))
    n = max(len(c) for c in curves.values())
    with open(_out(cfg, "compare.csv"), "w") as fh:
        fh.write("iter," + ",".join(kinds) + "\n")
        for i in range(n):
            fh.write(f"{i + 1}," + ",".join(repr(float(curves[k][i])) if i < len(curves[k])
                                            else "" for k in kinds) + "\n")
    H = exact_hessian(ts, require_pd=False)
    report = {}
    for kind in kinds:
        if kind != "exact":
            report[f"{kind}-exact"] = dominance_check(H, filter_majorizer(ts, kind))
    for name, v in report.items():
        print(f"dominance min_eig({name}) {v:.3g}")
    with open(_out(cfg, "dominance.json"), "w") as fh:
        json.dump(report, fh, indent=1)
    return EXIT_OK


def finite_difference_bank() -> list:
    """Horizontal and vertical first differences with ``||d||^2 = 1/R``."""
    s = 1.0 / math.sqrt(2 * 2)
    return [np.array([[s, -s]]), np.array([[s], [-s]])]


def suggest_alpha(images, keep: float = 0.95, bc: str = "circular") -> dict:
    """Pick ``alpha_est`` so the largest ``keep`` share of nonzero responses survive.

    The hard-threshold level ``sqrt(2 alpha)`` is set to the ``1 - keep``
    quantile of the nonzero finite-difference response magnitudes.
    """
    v = np.concatenate([np.abs(conv_same(d, x, bc)).ravel()
                        for x in images for d in finite_difference_bank()])
    nz = v[v > 1e-12 * max(1.0, float(v.max(initial=0.0)))]
    if nz.size == 0:
        warnings.warn("images are constant; nothing to sparsify", RuntimeWarning)
        return {"alpha_est": 0.0, "range": [0.0, 0.0], "kept_fraction": float("nan")}
    thr = float(np.quantile(nz, 1.0 - keep, method="lower"))
    alpha = 0.5 * thr * thr
    return {"alpha_est": alpha, "range": [alpha / 10, alpha],
            "kept_fraction": float(np.mean(nz >= thr))}


def cmd_suggest_alpha(args) -> int:
    cfg = resolve_config(args, ["images", "rescale", "mean_subtract", "for_mbir", "bc"])
    images = load_corpus(args, cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        r = suggest_alpha(images, bc=cfg["bc"])
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    print(f"alpha_est {r['alpha_est']:.6g}")
    print(f"range [{r['range'][0]:.6g}, {r['range'][1]:.6g}]")
    print(f"kept_fraction {r['kept_fraction']:.4f}")
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    if args.L < 1:
        raise InvalidParameterError("L must be positive")
    images = synthetic_corpus(args.L, parse_size(args.size), args.seed, args.noise)
    os.makedirs(args.out, exist_ok=True)
    for i, x in enumerate(images):
        base = os.path.join(args.out, f"img{i:03d}")
        if args.format == "raw":
            write_raw(base + ".raw", x)
        else:
            write_pgm(base + ".pgm", x, bits=16)
    print(f"wrote {len(images)} images to {args.out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def _add_solver(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--bc", choices=BOUNDARY_CONDITIONS)
    p.add_argument("--lambda-D", dest="lambda_D", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--omega-restart", dest="omega_restart", type=float)
    p.add_argument("--extrapolation", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--restart", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--out", help="output directory")


def _add_data(p):
    p.add_argument("--images", help="directory of .pgm/.raw images")
    p.add_argument("--synthetic", type=int, metavar="L",
                   help="train on L generated images instead")
    p.add_argument("--size", default="100x100", help="synthetic image size HxW")
    p.add_argument("--data-seed", dest="data_seed", type=int, default=0)
    p.add_argument("--rescale", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--mean-subtract", dest="mean_subtract",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--for-mbir", dest="for_mbir", action="store_true", default=None,
                   help="bank is meant for reconstruction (no mean subtraction)")


def _add_train(p):
    _add_data(p)
    _add_solver(p)
    p.add_argument("--model", choices=sorted(MODELS))
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--filters", help="RHxRWxK, e.g. 7x7x49")
    p.add_argument("--majorizer", choices=MAJORIZER_KINDS)
    p.add_argument("--init", choices=("random", "deterministic"))
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="convaol",
                                 description="Convolutional analysis operator learning")
    ap.add_argument("--threads", type=int, help="cap BLAS worker threads")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="learn a filter bank")
    _add_train(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="MBIR with a learned filter bank")
    _add_solver(p)
    p.add_argument("--measurement", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--forward", choices=("identity", "mask", "radon"), default="identity")
    p.add_argument("--mask")
    p.add_argument("--size", help="image size for the radon model")
    p.add_argument("--views", type=int, default=48, help="full view count")
    p.add_argument("--fraction", type=float, default=1.0, help="share of views kept")
    p.add_argument("--weights", help="statistical weights image")
    p.add_argument("--reference", help="ground-truth image for metrics")
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha-prime", dest="alpha_prime", type=float)
    p.add_argument("--psi", action="store_true", help="use spatial strength weights")
    p.add_argument("--baseline", action="store_true", help="also report the WLS baseline")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("compare-majorizers", help="cost curves per majorizer")
    _add_train(p)
    p.add_argument("--kinds", default=",".join(MAJORIZER_KINDS))
    p.set_defaults(func=cmd_compare_majorizers)

    p = sub.add_parser("suggest-alpha", help="finite-difference alpha heuristic")
    _add_data(p)
    p.add_argument("--config")
    p.add_argument("--bc", choices=BOUNDARY_CONDITIONS)
    p.set_defaults(func=cmd_suggest_alpha)

    p = sub.add_parser("gen-synthetic", help="write a seeded synthetic corpus")
    p.add_argument("--L", type=int, default=10)
    p.add_argument("--size", default="100x100")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--format", choices=("raw", "pgm"), default="raw")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConvAOLError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
