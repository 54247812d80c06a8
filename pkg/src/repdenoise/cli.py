"""Command-line entry point: simulate, verify-noise-model, train, denoise, eval.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import cdlnet
from .coils import SensitivityMaps
from .container import (
    Container,
    covariance_from_json,
    covariance_to_json,
    load_params,
    read_container,
    save_params,
    write_container,
)
from .errors import ConfigurationError, ContainerFormatError, ReconLabError
from .inference import InferenceStrategy, dither, infer_array, sharpen
from .lattice import IMAGE, KSPACE
from .metrics import evaluate, rows_to_csv
from .noise import CovGenParams, correlated_offsets, covariance_probe, relative_rms
from .pipeline import (
    fully_sampled_pipeline,
    grappa_pipeline,
    monte_carlo_noise_map,
    noise_level_map,
)
from .simulation import FULL, GRAPPA, GRAPPA_ACS, AcquisitionSetup, SimulatedSlice, calibrate_slice, \
    reconstruct_slice, simulate_volumes
from .training import DatasetEntry, LossKind, TrainConfig, train

log = logging.getLogger("repdenoise")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
NOISE_TOLERANCES = {FULL: 0.05, GRAPPA: 0.07, GRAPPA_ACS: 0.10}
LOSSES = {"mse": LossKind.supervised, "mc-sure": LossKind.mc_sure, "rep2rep": LossKind.rep2rep}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message)


# ---------------------------------------------------------------------------
# slice directories


def _slice_dirs(root: Path) -> list[Path]:
    if (root / "kspace.mcks").exists():
        return [root]
    dirs = sorted(p for p in root.glob("slice_*") if (p / "kspace.mcks").exists())
    if not dirs:
        raise OSError(f"no slice containers under {root}")
    return dirs


def load_slice(directory: Path) -> tuple[SimulatedSlice, AcquisitionSetup]:
    """Rebuild a simulated slice (and its acquisition geometry) from containers."""
    k = read_container(directory / "kspace.mcks")
    if k.domain != KSPACE:
        raise ContainerFormatError(f"{directory}/kspace.mcks is not k-space")
    meta = k.meta
    if "covariance" not in meta:
        raise ConfigurationError(f"{directory}: sidecar carries no covariance")
    maps_box = read_container(directory / meta.get("maps_file", "maps.mcks"))
    gt_box = read_container(directory / meta.get("gt_file", "gt.mcks"))
    maps = maps_box.data[0]
    if maps.shape != k.data.shape[1:]:
        raise ContainerFormatError("maps and k-space dims disagree")
    support = np.linalg.norm(maps, axis=0) > 0
    scheme = meta.get("scheme", {})
    setup = AcquisitionSetup(k.dims["n1"], k.dims["n2"], k.dims["c"], k.dims["r"],
                             acceleration=int(scheme.get("acceleration", 1)),
                             acs_lines=int(scheme.get("acs_lines", 0)))
    sl = SimulatedSlice(gt_box.data[0, 0], SensitivityMaps(maps, support), covariance_from_json(meta["covariance"]),
                        k.data)
    return sl, setup


def _mode(setup: AcquisitionSetup, include_acs: bool) -> str:
    if setup.acceleration == 1:
        return FULL
    return GRAPPA_ACS if include_acs else GRAPPA


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cov = CovGenParams(args.sigma_diag, args.sigma_jitter, args.sigma_corr, args.seed)
    setup = AcquisitionSetup(args.n1, args.n2, args.coils, args.reps, cov, args.acceleration, args.acs_lines)
    scheme = setup.scheme(FULL if args.acceleration == 1 else GRAPPA_ACS)
    mask = scheme.line_mask("omega")
    sims = simulate_volumes(setup, args.volumes, args.slices, args.seed)
    out = Path(args.out_dir)
    for i, sl in enumerate(sims):
        d = out / f"slice_{i:04d}"
        prov = {"seed": args.seed, "slice": i, "volumes": args.volumes, "slices_per_volume": args.slices}
        write_container(d / "gt.mcks", Container(sl.gt[None, None], IMAGE, {"provenance": prov}))
        write_container(d / "maps.mcks", Container(sl.maps.s[None], IMAGE, {"provenance": prov}))
        meta = {
            "covariance": covariance_to_json(sl.cov),
            "cov_params": {"sigma_diag": cov.sigma_diag, "sigma_jitter": cov.sigma_jitter,
                           "sigma_corr": cov.sigma_corr},
            "scheme": {"acceleration": scheme.acceleration, "acs_lines": scheme.acs_lines,
                       "n2": scheme.n2, "p": scheme.p},
            "maps_file": "maps.mcks",
            "gt_file": "gt.mcks",
            "provenance": prov,
        }
        write_container(d / "kspace.mcks", Container(sl.kspace * mask, KSPACE, meta))
    print(f"wrote {len(sims)} slice(s) to {out}")
    return EXIT_OK


def cmd_verify_noise_model(args) -> int:
    sl, setup = load_slice(_slice_dirs(Path(args.input))[0])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    modes = [FULL] + ([GRAPPA, GRAPPA_ACS] if setup.acceleration > 1 else [])
    rows, probes = [], {}
    row_index = setup.n1 // 2
    for i, mode in enumerate(modes):
        scheme = setup.scheme(mode)
        acs = mode == GRAPPA_ACS
        kernel = None if mode == FULL else calibrate_slice(sl, scheme)
        analytic = noise_level_map(sl.maps, sl.cov, scheme, kernel, acs).sigma
        emp = monte_carlo_noise_map(sl.maps, sl.cov, scheme, kernel, acs, args.trials, args.seed + i).sigma
        err = relative_rms(emp, analytic, sl.support)
        tol = NOISE_TOLERANCES[mode]
        rows.append([mode, "rel_rms", f"{err:.6f}", tol, "PASS" if err < tol else "FAIL"])
        pipe = fully_sampled_pipeline(sl.maps) if mode == FULL else grappa_pipeline(sl.maps, kernel, scheme, acs)
        cov_row = covariance_probe(pipe, sl.cov, row_index)
        probes[mode] = cov_row
        off = correlated_offsets(cov_row)
        offdiag = float(np.abs(cov_row - np.diag(np.diag(cov_row))).max())
        if mode == FULL:
            rows.append([mode, "offdiag_max", f"{offdiag:.3e}", 1e-10, "PASS" if offdiag < 1e-10 else "FAIL"])
        elif mode == GRAPPA:
            ok = list(off) == [setup.n2 // 2]
            rows.append([mode, "correlated_offsets", ";".join(map(str, off)), f"{setup.n2 // 2}",
                         "PASS" if ok else "FAIL"])
        else:
            ok = 1 in off and 2 in off
            rows.append([mode, "correlated_offsets", ";".join(map(str, off[:8])), "local<=2",
                         "PASS" if ok else "FAIL"])
    with open(out / "noise_verification.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case", "metric", "value", "threshold", "status"])
        w.writerows(rows)
    np.savez(out / "row_covariance.npz", **probes)
    if args.png:
        _covariance_figure(probes, out / "row_covariance.png")
    for r in rows:
        print(",".join(map(str, r)))
    return EXIT_OK


def _covariance_figure(probes: dict, path: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping %s", path)
        return
    fig, axes = plt.subplots(1, len(probes), figsize=(4 * len(probes), 4))
    for ax, (name, c) in zip(np.atleast_1d(axes), probes.items()):
        im = ax.imshow(np.abs(c), cmap="magma")
        ax.set_title(name)
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _entries(dirs, include_acs: bool, sigma: str) -> list[DatasetEntry]:
    out = []
    for d in dirs:
        sl, setup = load_slice(d)
        out.append(reconstruct_slice(sl, setup, _mode(setup, include_acs)).entry(sigma))
    return out


def cmd_train(args) -> int:
    dirs = _slice_dirs(Path(args.data))
    data = _entries(dirs, args.include_acs, args.sigma)
    loss = LOSSES[args.loss]()
    cfg = TrainConfig(patch=args.patch, batch=args.batch, steps=args.steps, lr=args.lr, seed=args.seed,
                      loss=loss, adaptive=not args.non_adaptive, depth=args.depth, subbands=args.subbands,
                      kernel_size=args.kernel_size)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"loss": args.loss, "steps": args.steps, "seed": args.seed, "sigma": args.sigma}

    def checkpoint(step, params, state):
        if args.checkpoint_every and step % args.checkpoint_every == 0:
            save_params(out / f"model_step{step:06d}.mcks", params, dict(extra, step=step))

    res = train(data, cfg, on_step=checkpoint)
    save_params(out / "model.mcks", res.params, dict(extra, step=res.step))
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows([i + 1, repr(float(v))] for i, v in enumerate(res.history))
    print(f"trained {res.step} steps; final loss {res.history[-1] if res.history else float('nan'):.6g}")
    return EXIT_OK


def cmd_denoise(args) -> int:
    model = load_params(args.model)
    strategy = InferenceStrategy.parse(args.strategy)
    out = Path(args.out_dir)
    for d in _slice_dirs(Path(args.input)):
        sl, setup = load_slice(d)
        rec = reconstruct_slice(sl, setup, _mode(setup, args.include_acs))
        reps = rec.reps[: args.reps] if args.reps else rec.reps
        x = infer_array(reps, rec.sigma(args.sigma), model, strategy)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("denoiser produced non-finite values")
        avg = reps.mean(axis=0)
        x = dither(sharpen(x, args.sharpen), avg, args.dither)
        name = d.name if d != Path(args.input) else "denoised"
        meta = {"strategy": strategy.value, "sharpen": args.sharpen, "dither": args.dither,
                "reps": int(reps.shape[0]), "source": str(d)}
        write_container(out / f"{name}.mcks", Container(x[None, None], IMAGE, meta))
        write_container(out / f"{name}_input.mcks", Container(avg[None, None], IMAGE, {"source": str(d)}))
        write_container(out / f"{name}_sigma.mcks",
                        Container((rec.sigma(args.sigma) / np.sqrt(reps.shape[0]))[None, None], IMAGE,
                                  {"source": str(d)}))
        if args.png:
            _magnitude_png(x, out / f"{name}.png")
    print(f"denoised into {out}")
    return EXIT_OK


def _magnitude_png(x: np.ndarray, path: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping %s", path)
        return
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(np.abs(x), cmap="gray")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.axis("off")
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _image(path) -> np.ndarray:
    box = read_container(path)
    if box.domain != IMAGE or box.dims["c"] != 1:
        raise ContainerFormatError(f"{path} is not a single-coil image container")
    return box.data[0, 0]


def cmd_eval(args) -> int:
    ref = _image(args.ref)
    mask = None
    if args.maps:
        mask = np.linalg.norm(read_container(args.maps).data[0], axis=0) > 0
    rows = []
    for path in args.images:
        x = _image(path)
        y = _image(args.noisy) if args.noisy else None
        sig = np.real(_image(args.sigma)) if args.sigma else None
        rows.append(evaluate(Path(path).stem, args.method or Path(path).stem, x, ref, y, sig, mask))
    text = rows_to_csv(rows)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--out-dir", default=".")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="repdenoise", description="Repetition-based MRI denoising lab")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="synthesize phantoms and noisy k-space")
    s.add_argument("--n1", type=int, default=96)
    s.add_argument("--n2", type=int, default=96)
    s.add_argument("--coils", type=int, default=4)
    s.add_argument("--reps", type=int, default=2)
    s.add_argument("--volumes", type=int, default=1)
    s.add_argument("--slices", type=int, default=1)
    s.add_argument("--acceleration", type=int, default=1)
    s.add_argument("--acs-lines", type=int, default=0)
    s.add_argument("--sigma-diag", type=float, default=0.15)
    s.add_argument("--sigma-jitter", type=float, default=0.02)
    s.add_argument("--sigma-corr", type=float, default=0.3)
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify-noise-model", parents=[common], help="analytic vs Monte-Carlo noise maps")
    v.add_argument("--input", required=True)
    v.add_argument("--trials", type=int, default=2000)
    v.add_argument("--png", action="store_true")
    v.set_defaults(func=cmd_verify_noise_model)

    t = sub.add_parser("train", parents=[common], help="train a CDLNet denoiser")
    t.add_argument("--data", required=True)
    t.add_argument("--loss", choices=sorted(LOSSES), default="rep2rep")
    t.add_argument("--sigma", choices=["estimated", "exact"], default="estimated")
    t.add_argument("--include-acs", action="store_true")
    t.add_argument("--non-adaptive", action="store_true")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--patch", type=int, default=32)
    t.add_argument("--batch", type=int, default=4)
    t.add_argument("--lr", type=float, default=5e-4)
    t.add_argument("--depth", type=int, default=6)
    t.add_argument("--subbands", type=int, default=32)
    t.add_argument("--kernel-size", type=int, default=7)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("denoise", parents=[common], help="denoise reconstructed repetitions")
    d.add_argument("--model", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--strategy", choices=[s.value for s in InferenceStrategy], default="pre-avg-ada")
    d.add_argument("--sigma", choices=["estimated", "exact"], default="estimated")
    d.add_argument("--include-acs", action="store_true")
    d.add_argument("--reps", type=int, default=0, help="use the first R repetitions (0 = all)")
    d.add_argument("--sharpen", type=float, default=0.0)
    d.add_argument("--dither", type=float, default=0.0)
    d.add_argument("--png", action="store_true")
    d.set_defaults(func=cmd_denoise)

    e = sub.add_parser("eval", parents=[common], help="metrics CSV against a reference image")
    e.add_argument("--ref", required=True)
    e.add_argument("--images", nargs="+", required=True)
    e.add_argument("--noisy")
    e.add_argument("--sigma")
    e.add_argument("--maps")
    e.add_argument("--method")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cdlnet.set_threads(args.threads)
    try:
        return args.func(args)
    except (OSError, ContainerFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ReconLabError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
