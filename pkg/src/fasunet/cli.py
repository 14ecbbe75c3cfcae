"""Command-line entry point: ``fasunet <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure (one ``error: <kind>: <message>``
line on stderr), 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .fas import FasConfig, solve
from .fusion import kmeans_segment, postprocess, threshold_segment
from .metrics import evaluate
from .model import BlurSpec, ModelParams

log = logging.getLogger("fasunet")


def _num(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _num(v) for v in row])


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _tau(text: str):
    if text == "auto":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"tau must be a number or 'auto', got {text!r}") from None


# -- subcommands ----------------------------------------------------------------

def _solve_configs(a) -> tuple[ModelParams, FasConfig]:
    """``fas.*``, ``model.*`` and ``blur.*`` keys from ``--config``; explicit flags win."""
    from dataclasses import replace

    kv = io.read_kv(a.config) if a.config else {}
    for key in kv:
        if not key.startswith(("fas.", "model.", "blur.")):
            raise io.FormatError(f"unknown config key {key!r} (expected fas.*, model.* or blur.*)")
    blur_kv = {k: v for k, v in kv.items() if k.startswith("blur.")}
    if "blur.channel_mix" in blur_kv:
        raise io.FormatError("blur.channel_mix is not supported for single-image solves")
    blur = io.build_config(BlurSpec, blur_kv, "blur.", strict=True)
    model_kv = {k: v for k, v in kv.items() if k.startswith("model.")}
    if "model.channels" in model_kv or "model.blur" in model_kv:
        raise io.FormatError("model.channels and model.blur cannot be set for single-image solves")
    p = replace(io.build_config(ModelParams, model_kv, "model.", strict=True), blur=blur)
    cfg = io.build_config(FasConfig, {k: v for k, v in kv.items() if k.startswith("fas.")}, "fas.", strict=True)
    flags = {"mu": a.mu, "nu": a.nu, "eps_tv": a.eps}
    p = replace(p, **{k: v for k, v in flags.items() if v is not None})
    flags = {"levels": a.levels, "k_l": a.kl, "k_m": a.km, "k_r": a.kr, "cycles": a.cycles, "tau": a.tau}
    cfg = replace(cfg, **{k: v for k, v in flags.items() if v is not None})
    return p, cfg


def cmd_solve(a) -> int:
    f = io.load_image(a.image)
    p, cfg = _solve_configs(a)
    res = solve(f, p, cfg)
    io.save_tensor(a.out, res.u)
    trace = a.trace or str(Path(a.out).with_suffix("")) + "_trace.csv"
    write_csv(trace, ["cycle", "residual_norm", "energy"],
              ((k, r, e) for k, (r, e) in enumerate(zip(res.residual_norms, res.energies))))
    log.info("solve: %d cycles, residual %.3e -> %.3e", cfg.cycles, res.residual_norms[0],
             res.residual_norms[-1])
    return 0


def cmd_segment(a) -> int:
    u = io.load_image(a.features)
    if u.ndim == 3 and u.shape[0] == 1:
        u = u[0]
    if a.method == "threshold":
        if not a.thresholds:
            raise ValueError("--method threshold needs --thresholds")
        mask = threshold_segment(u, a.thresholds)
    else:
        if a.k is None:
            raise ValueError("--method kmeans needs --k")
        mask = kmeans_segment(u, a.k, seed=a.seed)
    io.save_mask_pgm(a.out, mask)
    return 0


def _load_dataset(directory) -> tuple[np.ndarray, np.ndarray, list[str]]:
    d = Path(directory)
    stems = sorted({p.name[:-len(p.name.split("_image")[-1])] for p in d.glob("*_image.*")})
    if not stems:
        raise FileNotFoundError(f"no *_image.fast or *_image.pgm files in {d}")
    images, masks = [], []
    for stem in stems:
        src = d / f"{stem}.fast" if (d / f"{stem}.fast").exists() else d / f"{stem}.pgm"
        img = io.load_image(src)
        base = stem[:-len("_image")]
        mask = io.load_mask(d / f"{base}_mask.pgm")
        if img.shape != mask.shape:
            raise ValueError(f"{src.name}: image {img.shape} and mask {mask.shape} differ")
        images.append(img)
        masks.append(mask)
    if len({m.shape for m in masks}) != 1:
        raise ValueError("all training samples must share the same extents")
    return np.stack(images)[:, None], np.stack(masks), [s[:-len("_image")] for s in stems]


def _net_configs(path: Optional[str]):
    from .net import NetConfig, TrainConfig

    kv = io.read_kv(path) if path else {}
    for key in kv:
        if not key.startswith(("net.", "train.", "stop.")):
            raise io.FormatError(f"unknown config key {key!r} (expected net.*, train.* or stop.*)")
    net = io.build_config(NetConfig, kv, "net.", strict=True)
    tr = io.build_config(TrainConfig, kv, "train.", strict=True)
    stop = {k[5:]: float(v) for k, v in kv.items() if k.startswith("stop.")}
    unknown = set(stop) - {"loss", "dsc"}
    if unknown:
        raise io.FormatError(f"unknown stop keys {sorted(unknown)} (expected stop.loss, stop.dsc)")
    return net, tr, stop


def cmd_train(a) -> int:
    from dataclasses import replace

    from .net import forward, predict, train

    cfg, tcfg, stop = _net_configs(a.config)
    if a.seed is not None:
        tcfg = replace(tcfg, seed=a.seed)
    images, labels, names = _load_dataset(a.data_dir)
    if images.shape[1] != cfg.in_channels:
        raise ValueError(f"data has {images.shape[1]} channel(s), net.in_channels={cfg.in_channels}")
    images, pads = io.pad_to_multiple(images, cfg.divisor)
    labels, _ = io.pad_to_multiple(labels, cfg.divisor)
    if any(pads):
        log.info("train: zero-padded inputs by (top, bottom, left, right) = %s to reach a multiple "
                 "of %d; padding is cropped from emitted masks", pads, cfg.divisor)

    def cb(epoch, loss, d):
        log.info("epoch %d loss %.6f a-DSC %.4f", epoch, loss, d)
        if stop:
            return loss <= stop.get("loss", np.inf) and d >= stop.get("dsc", -np.inf)
        return False

    res = train(images, labels, cfg, tcfg, epochs=a.epochs, callback=cb)
    if a.checkpoint_out:
        io.save_checkpoint(a.checkpoint_out, res.store)
    if a.trace_out:
        write_csv(a.trace_out, ["epoch", "loss", "a_dsc", "lr"],
                  zip(range(len(res.losses)), res.losses, res.dscs, res.lrs))
    if a.pred_out:
        out = Path(a.pred_out)
        out.mkdir(parents=True, exist_ok=True)
        pred = io.crop_padding(predict(forward(images, res.store, cfg, "eval")), pads)
        for name, m in zip(names, pred):
            io.save_mask_pgm(out / f"{name}_pred.pgm", m)
    print(f"epochs={len(res.losses)} loss={_num(res.losses[-1])} a_dsc={_num(res.dscs[-1])}")
    return 0


def cmd_eval(a) -> int:
    pred, gt = io.load_mask(a.pred), io.load_mask(a.gt)
    rep = evaluate(pred, gt, a.classes, a.spacing)
    for k, msg in rep.ssd_errors.items():
        log.warning("class %d: %s (excluded from a-SSD)", k, msg)
    rows = [(k, d, p, s) for k, d, p, s in rep.rows()]
    rows.append(("mean", rep.a_dsc, rep.a_preci, rep.a_ssd))
    write_csv(a.out, ["class", "dsc", "precision", "ssd"], rows)
    return 0


def cmd_paramcount(a) -> int:
    from .net import NetConfig, param_count

    cfg = NetConfig(levels=a.levels, channels=a.p, k_l=a.kl, k_m=a.km, k_r=a.kr, kernel=a.kc,
                    classes=a.classes, in_channels=a.cin, spatial_dims=a.dims, channel_ratio=a.ratio)
    pc = param_count(cfg)
    print(f"multiplier={pc.multiplier}")
    print(f"eta_kernel={pc.eta_kernel}")
    print(f"formula_term={pc.multiplier_term}")
    print(f"formula_count={pc.formula_count}")
    print(f"instantiated_count={pc.instantiated_count}")
    return 0


def cmd_synth(a) -> int:
    spec, count = io.parse_phantom_spec(io.read_kv(a.spec_file))
    kv = io.read_kv(a.spec_file)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        if spec.shapes:
            s = io.PhantomSpec(spec.extents, spec.intensities, spec.shapes, spec.noise_std,
                               spec.blur_sigma, spec.seed + i)
        else:
            n_shapes = int(kv["n_shapes"]) if "n_shapes" in kv else None
            s = io.random_phantom_spec(spec.extents, spec.intensities, spec.seed + i, n_shapes,
                                       spec.noise_std, spec.blur_sigma)
        img, gt = io.make_phantom(s)
        io.save_tensor(out / f"{i:03d}_image.fast", img)
        io.save_pgm(out / f"{i:03d}_image.pgm", img)
        io.save_mask_pgm(out / f"{i:03d}_mask.pgm", gt)
    print(f"wrote {count} phantom(s) to {out}")
    return 0


def cmd_postprocess(a) -> int:
    mask = io.load_mask(a.mask)
    io.save_mask_pgm(a.out, postprocess(mask, a.class_id, a.order))
    return 0


def cmd_gradcheck(a) -> int:
    from .net import NetConfig, check_network_gradients, init_params
    from .net.train import warm_up_batchnorm

    kv = io.read_kv(a.config) if a.config else {}
    defaults = {"net.levels": "2", "net.channels": "4", "net.k_l": "1", "net.k_m": "1",
                "net.k_r": "1", "net.classes": "3"}
    kv = {**defaults, **kv}
    extra = {k: v for k, v in kv.items() if not k.startswith("net.")}
    unknown = set(extra) - {"size", "batch", "seed", "mode"}
    if unknown:
        raise io.FormatError(f"unknown gradcheck keys {sorted(unknown)}")
    cfg = io.build_config(NetConfig, kv, "net.", strict=True)
    size, batch = int(extra.get("size", 8)), int(extra.get("batch", 2))
    seed, mode = int(extra.get("seed", 0)), extra.get("mode", "eval")
    rng = np.random.default_rng(seed)
    images = rng.random((batch, cfg.in_channels, size, size))
    labels = rng.integers(0, cfg.classes, (batch, size, size))
    store = init_params(cfg, seed)
    if mode == "eval":
        warm_up_batchnorm(store, cfg, images)
    res = check_network_gradients(store, cfg, images, labels, a.probes, seed=seed, mode=mode)
    print(f"probes={len(res.probes)} rejected={res.rejected} max_rel_error={_num(res.max_rel_error)}")
    if res.max_rel_error > a.tol:
        raise RuntimeError(f"max relative error {res.max_rel_error:.3e} exceeds {a.tol:g}")
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fasunet", description="FAS multigrid segmentation toolkit")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", metavar="command", required=True)

    s = sub.add_parser("solve", help="classical FAS solve of the smoothed feature u")
    s.add_argument("--image", required=True, help="PGM or .fast input image")
    s.add_argument("--config", help="key=value file with fas.*, model.* and blur.* keys")
    s.add_argument("--mu", type=float, help="default 0.1")
    s.add_argument("--nu", type=float, help="default 0")
    s.add_argument("--eps", type=float, help="TV smoothing epsilon, default 1e-3")
    s.add_argument("--levels", type=int, help="default 3")
    s.add_argument("--kl", type=int, help="default 3")
    s.add_argument("--km", type=int, help="default 7")
    s.add_argument("--kr", type=int, help="default 4")
    s.add_argument("--cycles", type=int, help="default 10")
    s.add_argument("--tau", type=_tau, help="step size or 'auto' (default)")
    s.add_argument("--out", required=True, help="output .fast feature tensor")
    s.add_argument("--trace", help="residual trace CSV (default: <out>_trace.csv)")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("segment", help="threshold or k-means fusion of a feature map")
    s.add_argument("--features", required=True)
    s.add_argument("--method", choices=("threshold", "kmeans"), default="threshold")
    s.add_argument("--thresholds", type=_floats)
    s.add_argument("--k", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output mask PGM")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("train", help="train the FAS-Unet on a phantom directory")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--config", help="key=value file with net.*, train.* and stop.* keys")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--checkpoint-out")
    s.add_argument("--trace-out")
    s.add_argument("--pred-out", help="directory for predicted masks of the training set")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="per-class DSC, precision and SSD")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--classes", type=int, required=True)
    s.add_argument("--spacing", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("paramcount", help="closed-form and instantiated parameter counts")
    s.add_argument("--dims", type=int, choices=(2, 3), default=2)
    s.add_argument("--p", type=int, required=True)
    s.add_argument("--kc", type=int, default=3)
    s.add_argument("--kl", type=int, required=True)
    s.add_argument("--km", type=int, required=True)
    s.add_argument("--kr", type=int, required=True)
    s.add_argument("--levels", type=int, required=True)
    s.add_argument("--ratio", type=float, default=1.0)
    s.add_argument("--classes", type=int, default=5)
    s.add_argument("--cin", type=int, default=1)
    s.set_defaults(func=cmd_paramcount)

    s = sub.add_parser("synth", help="write phantoms from a key=value spec")
    s.add_argument("--spec-file", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("postprocess", help="keep the largest component and fill holes")
    s.add_argument("--mask", required=True)
    s.add_argument("--class", dest="class_id", type=int, required=True)
    s.add_argument("--order", choices=("ch", "hc"), default="ch")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_postprocess)

    s = sub.add_parser("gradcheck", help="finite-difference check of the network gradients")
    s.add_argument("--config", help="key=value file with net.* plus size, batch, seed, mode")
    s.add_argument("--probes", type=int, default=50)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001 - every failure maps to exit 1
        msg = str(e).replace("\n", " ")
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
