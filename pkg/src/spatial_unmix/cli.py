"""Command-line interface.

Exit codes: 0 success, 2 bad arguments, 3 unreadable or invalid data,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats
from .baseline import fcls_unmix_image
from .bench import run_benchmark
from .errors import (
    ConvergenceError, EmptyClassError, GenerationError, IllConditionedError,
    InfeasibleMomentsError, InvalidArgumentError, NumericError, ParseError,
)
from .evaluate import chain_report, classification_accuracy, global_mse
from .potts import NeighborhoodOrder, dominant_fraction, homogeneity, sample_field
from .sampler import (
    ChainConfig, class_abundance_posterior, estimate_map_labels, estimate_mmse_abundances, run_chain,
)
from .synth import SceneSpec, generate_scene

log = logging.getLogger("spatial_unmix")

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT_NAME = "checkpoint.bin"


def _common(seed_default=1) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=seed_default, help="random seed")
    p.add_argument("--out-dir", type=Path, default=Path("."), help="output directory")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


# chain flag defaults; a --config file overrides these and explicit flags override both
CHAIN_DEFAULTS = {
    "iters": 5000, "burn": 500, "beta": 1.1, "classes": 3,
    "threads": 1, "checkpoint_every": 0, "order": "first",
}


def _chain_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    d = CHAIN_DEFAULTS
    p.add_argument("--iters", type=int, help=f"total iterations including burn-in (default {d['iters']})")
    p.add_argument("--burn", type=int, help=f"burn-in iterations (default {d['burn']})")
    p.add_argument("--beta", type=float, help=f"granularity coefficient (default {d['beta']})")
    p.add_argument("--classes", type=int, help=f"number of classes K (default {d['classes']})")
    p.add_argument("--threads", type=int, help="worker threads (default 1)")
    p.add_argument("--checkpoint-every", type=int, metavar="N",
                   help="write a resumable snapshot every N iterations")
    p.add_argument("--order", choices=["first", "second"], help="neighborhood order (default first)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatial-unmix", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common, chain = _common(), _chain_flags()

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scene")
    p.add_argument("--spec", type=Path, help="SceneSpec JSON (defaults to the reference scene)")
    p.add_argument("--beta", type=float, help="override the scene granularity coefficient")
    p.add_argument("--classes", type=int, help="override K (requires matching moments in --spec)")

    p = sub.add_parser("unmix", parents=[common, chain], help="run the spatial sampler")
    p.add_argument("--cube", type=Path, required=True, help="cube header (.json) or stem")
    p.add_argument("--endmembers", type=Path, required=True, help="endmember CSV")
    p.add_argument("--config", type=Path, help="JSON object of chain settings")
    p.add_argument("--resume", action="store_true", help="continue from the snapshot in --out-dir")

    p = sub.add_parser("fcls", parents=[common], help="fully constrained least squares baseline")
    p.add_argument("--cube", type=Path, required=True)
    p.add_argument("--endmembers", type=Path, required=True)

    p = sub.add_parser("eval", parents=[common], help="score estimates against ground truth")
    p.add_argument("--estimate", type=Path, required=True, help="directory of estimated abundance maps")
    p.add_argument("--truth", type=Path, required=True, help="directory of true abundance maps")
    p.add_argument("--labels", type=Path, help="estimated label map (PGM)")
    p.add_argument("--truth-labels", type=Path, help="true label map (PGM)")

    p = sub.add_parser("potts", parents=[common], help="draw Potts label fields")
    p.add_argument("--beta", type=float, nargs="+", default=[1.1])
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--height", type=int, default=32)
    # single-site sweeps coarsen slowly above the critical beta
    p.add_argument("--sweeps", type=int, default=3000)
    p.add_argument("--order", choices=["first", "second"], default="first")

    p = sub.add_parser("bench", parents=[common, chain], help="FCLS versus spatial sampler on the reference scene")
    return parser


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = SceneSpec.from_json(args.spec) if args.spec else SceneSpec()
    overrides = {"seed": args.seed}
    if args.beta is not None:
        overrides["beta"] = args.beta
    if args.classes is not None:
        overrides["n_classes"] = args.classes
    spec = SceneSpec(**{**spec.to_dict(), **overrides})
    scene = generate_scene(spec)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    formats.write_cube(scene.cube, out / "cube")
    formats.write_endmembers(scene.endmembers, out / "endmembers.csv")
    formats.write_label_map(scene.labels, out / "truth_labels.pgm")
    formats.write_abundance_maps(scene.abundances, spec.width, spec.height, out / "truth")
    formats.write_json(out / "scene.json", {"spec": spec.to_dict(), "snr_db": scene.snr_db})
    print(f"wrote {spec.width}x{spec.height}x{spec.n_bands} scene to {out} (SNR {scene.snr_db:.2f} dB)")
    return EXIT_OK


# flag name -> ChainConfig field
_CHAIN_FIELDS = {
    "iters": "n_mc", "burn": "n_burn", "beta": "beta", "classes": "n_classes",
    "threads": "threads", "checkpoint_every": "checkpoint_every", "order": "order",
}


def _chain_config(args, extra: dict | None = None) -> ChainConfig:
    settings = {field: CHAIN_DEFAULTS[flag] for flag, field in _CHAIN_FIELDS.items()}
    settings.update(extra or {})
    settings.update({field: getattr(args, flag) for flag, field in _CHAIN_FIELDS.items()
                     if getattr(args, flag) is not None})
    settings["seed"] = args.seed
    if settings["checkpoint_every"]:
        settings["checkpoint_path"] = str(args.out_dir / CHECKPOINT_NAME)
    try:
        return ChainConfig(**settings)
    except TypeError as exc:
        raise InvalidArgumentError(f"bad chain setting: {exc}") from exc


def write_chain_outputs(samples, out: Path) -> None:
    """Samples, MAP labels, MMSE abundance maps, class histograms and the chain report."""
    out.mkdir(parents=True, exist_ok=True)
    samples.save(out / "samples.npz")
    z_map = estimate_map_labels(samples)
    mmse = estimate_mmse_abundances(samples, z_map)
    formats.write_label_map(z_map, out / "labels.pgm")
    formats.write_abundance_maps(mmse, samples.width, samples.height, out / "abundances")
    hist_dir = out / "histograms"
    hist_dir.mkdir(exist_ok=True)
    for k in range(samples.n_classes):
        try:
            post = class_abundance_posterior(samples, k)
        except EmptyClassError:
            log.warning("class %d is empty in every draw; no histogram written", k + 1)
            continue
        for r in range(post.counts.shape[0]):
            formats.write_histogram_csv(
                hist_dir / f"class{k + 1}_endmember{r + 1}.csv", post.bin_centers[r], post.counts[r]
            )
    if samples.n_draws >= 2:
        report = chain_report(samples)
        (out / "report.txt").write_text(report.to_text() + "\n")
        (out / "report.json").write_text(report.to_json() + "\n")


def cmd_unmix(args) -> int:
    extra = json.loads(args.config.read_text()) if args.config else None
    config = _chain_config(args, extra)
    cube = formats.read_cube(args.cube)
    M = formats.read_endmembers(args.endmembers)
    resume = None
    if args.resume:
        resume = args.out_dir / CHECKPOINT_NAME
        if not resume.exists():
            raise FileNotFoundError(f"no snapshot to resume at {resume}")
    args.out_dir.mkdir(parents=True, exist_ok=True)
    samples = run_chain(cube, M, config, resume_from=resume)
    write_chain_outputs(samples, args.out_dir)
    rates = ", ".join(f"{r:.3f}" for r in samples.acceptance_rates)
    print(f"kept {samples.n_draws} draws; acceptance rates {rates}; outputs in {args.out_dir}")
    return EXIT_OK


def cmd_fcls(args) -> int:
    cube = formats.read_cube(args.cube)
    M = formats.read_endmembers(args.endmembers)
    A = fcls_unmix_image(cube, M)
    formats.write_abundance_maps(A, cube.width, cube.height, args.out_dir / "abundances")
    print(f"wrote FCLS abundance maps to {args.out_dir / 'abundances'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    est, w, h = formats.read_abundance_maps(args.estimate)
    truth, tw, th = formats.read_abundance_maps(args.truth)
    if (w, h) != (tw, th):
        raise InvalidArgumentError(f"estimate is {w}x{h}, truth is {tw}x{th}")
    result = {"mse": global_mse(est, truth).tolist()}
    if args.labels and args.truth_labels:
        z_true = formats.read_label_map(args.truth_labels)
        z_hat = formats.read_label_map(args.labels)
        acc, perm = classification_accuracy(z_hat, z_true)
        result.update(accuracy=acc, permutation=perm.tolist())
    elif args.labels or args.truth_labels:
        raise InvalidArgumentError("--labels and --truth-labels must be given together")
    for r, m in enumerate(result["mse"]):
        print(f"MSE2_{r + 1} = {m:.3e}")
    if "accuracy" in result:
        print(f"classification accuracy = {result['accuracy']:.4f}")
    args.out_dir.mkdir(parents=True, exist_ok=True)
    formats.write_json(args.out_dir / "eval.json", result)
    return EXIT_OK


def cmd_potts(args) -> int:
    order = NeighborhoodOrder.parse(args.order)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    print(f"{'beta':>6}{'homogeneity':>14}{'dominant':>10}")
    for beta in args.beta:
        z = sample_field(args.classes, beta, args.width, args.height, order, args.sweeps, args.seed)
        formats.write_label_map(z, args.out_dir / f"potts_beta{beta:g}.pgm")
        print(f"{beta:>6g}{homogeneity(z, order):>14.3f}{dominant_fraction(z):>10.3f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    config = _chain_config(args)
    spec = SceneSpec(seed=args.seed, beta=config.beta)
    if config.n_classes != spec.n_classes:
        raise InvalidArgumentError("the reference scene has 3 classes; use synth + unmix for other K")
    result, _, samples = run_benchmark(spec, config)
    print(f"reference scene, seed {args.seed}, SNR {result.snr_db:.2f} dB, class sizes {result.class_sizes}")
    print("\nclass abundance moments (actual vs estimated)")
    print(result.table1())
    print("\nglobal MSE per endmember")
    print(result.table2())
    print(f"\nclassification accuracy {result.accuracy:.4f}")
    print("MH acceptance " + ", ".join(f"{r:.3f}" for r in result.acceptance))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    formats.write_json(args.out_dir / "bench.json", result.to_dict())
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "unmix": cmd_unmix, "fcls": cmd_fcls,
    "eval": cmd_eval, "potts": cmd_potts, "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (OSError, ParseError, json.JSONDecodeError, IllConditionedError, InfeasibleMomentsError,
            GenerationError, EmptyClassError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, ConvergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
