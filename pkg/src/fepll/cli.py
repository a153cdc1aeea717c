"""Command-line interface.

Subcommands: train, import-model, flatten, build-tree, restore, benchmark,
inspect.  Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, FepllError, NumericalError
from .em import em_train
from .gmm import GmmModel
from .manifest import build_manifest, read_manifest, write_manifest
from .metrics import psnr, ssim
from .model_io import MODEL_MAGIC, model_read, model_write, read_covariance_text
from .operators import (
    DegradationOperator,
    convolution_operator,
    decimate_operator,
    gain_operator,
    identity_operator,
    mask_operator,
    radial_gain_map,
    read_kernel_text,
)
from .patches import jitter_rng, jittered_grid, regular_grid, extract
from .pgm import image_read, image_write, read_gain, read_mask
from .phantoms import phantom_corpus
from .report import aggregate, render_figures, write_csv, write_markdown
from .solver import (
    RestorationConfig,
    ablation_configs,
    compare_profiles,
    restore,
)
from .tree import TREE_MAGIC, auto_level_sizes, build_tree, tree_read, tree_write

TASKS = ("denoise", "deblur", "inpaint", "devignette", "sr")


def _add_common_restore_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--tree", help="search tree file (built on the fly if omitted)")
    p.add_argument("--sigma", type=float, default=20.0,
                   help="noise std on the 0-255 scale (default 20)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spacing", type=int, default=6,
                   help="patch anchor spacing (default 6)")
    p.add_argument("--rho", type=float, default=0.95,
                   help="flat-tail retained variability (default 0.95)")
    p.add_argument("--no-tree", action="store_true", help="disable tree selection")
    p.add_argument("--no-flat-tail", action="store_true",
                   help="disable the flat-tail compression (full-rank scoring)")
    p.add_argument("--regular-grid", action="store_true",
                   help="regular instead of jittered anchors")
    p.add_argument("--exact", action="store_true",
                   help="disable all accelerations (spacing 1, regular grid)")
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--beta-multipliers", default="1,4,8,16,32",
                   help="comma-separated multipliers (default 1,4,8,16,32)")
    p.add_argument("--cg-tol", type=float, default=1e-6)
    p.add_argument("--cg-max-iters", type=int, default=200)
    p.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fepll",
        description="GMM patch-prior image restoration with flat-tail, "
                    "search-tree and jittered-sampling accelerations")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a patch mixture with EM")
    p.add_argument("--corpus", required=True, help="directory of PGM images")
    p.add_argument("--components", type=int, default=20)
    p.add_argument("--patch-size", type=int, default=8, help="patch side length")
    p.add_argument("--iters", type=int, default=25)
    p.add_argument("--samples", type=int, default=40000,
                   help="number of training patches")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("import-model",
                       help="convert a text covariance dump to a model file")
    p.add_argument("--text", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("flatten", help="flat-tail compress a model")
    p.add_argument("model")
    p.add_argument("--rho", type=float, default=0.95)
    p.add_argument("--out", required=True)

    p = sub.add_parser("build-tree", help="build the balanced search tree")
    p.add_argument("model")
    p.add_argument("--levels", help="comma-separated level widths ending at 1 "
                                    "(default: halving powers of two)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("restore", help="restore a degraded image")
    p.add_argument("task", choices=TASKS)
    p.add_argument("--input", required=True, help="degraded PGM image")
    p.add_argument("--output", required=True, help="restored PGM image")
    _add_common_restore_flags(p)
    p.add_argument("--kernel", help="blur kernel text file (deblur)")
    p.add_argument("--mask", help="mask PGM, nonzero = observed (inpaint)")
    p.add_argument("--gain", help="gain PGM (devignette); radial default")
    p.add_argument("--factor", type=int, help="upscaling factor (sr)")
    p.add_argument("--reference", help="clean PGM for PSNR/SSIM")
    p.add_argument("--manifest-out", help="manifest path "
                                          "(default: <output>.manifest.json)")
    p.add_argument("--bit-depth", type=int, default=8, choices=(8, 16))

    p = sub.add_parser("benchmark", help="profile quality/speed trade-offs")
    p.add_argument("--corpus", help="directory of PGM images")
    p.add_argument("--synthetic", type=int, metavar="N",
                   help="use N built-in synthetic images instead of a corpus")
    p.add_argument("--size", type=int, default=128,
                   help="synthetic image side (default 128)")
    p.add_argument("--model", required=True)
    p.add_argument("--tasks", default="denoise",
                   help="comma-separated tasks from: denoise, deblur")
    p.add_argument("--profiles", default="full,exact",
                   help="comma-separated profiles from: full, flat-only, "
                        "tree-only, subsample-only, fepll-prime, exact")
    p.add_argument("--ablation", action="store_true",
                   help="run all 8 acceleration toggle combinations")
    p.add_argument("--sigma", type=float, default=20.0)
    p.add_argument("--kernel", help="blur kernel for the deblur task")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("inspect", help="describe a model/tree/manifest/PGM file")
    p.add_argument("path")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _corpus_images(directory: str) -> list[Path]:
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"{directory}: not a directory")
    files = sorted(root.glob("*.pgm"))
    if not files:
        raise DataError(f"{directory}: no PGM images found")
    return files


def _sample_training_patches(files: list[Path], side: int, samples: int,
                             seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    images = [image_read(f) for f in files]
    per = max(1, samples // len(images))
    chunks = []
    for img in images:
        H, W = img.shape
        if H < side or W < side:
            raise DataError(f"corpus image {img.shape} smaller than patch side {side}")
        rr = rng.integers(0, H - side + 1, size=per)
        cc = rng.integers(0, W - side + 1, size=per)
        wins = np.lib.stride_tricks.sliding_window_view(img, (side, side))
        chunk = wins[rr, cc].reshape(per, side * side)
        chunks.append(chunk)
    patches = np.concatenate(chunks, axis=0)
    return patches - patches.mean(axis=1, keepdims=True)


def _parse_multipliers(text: str) -> tuple[float, ...]:
    try:
        mult = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise DataError(f"bad beta multipliers {text!r}") from exc
    if not mult:
        raise DataError("beta multipliers must be non-empty")
    return mult


def _config_from_args(args) -> RestorationConfig:
    mult = _parse_multipliers(args.beta_multipliers)
    iters = args.iters
    if iters != len(mult):
        if args.iters == 5 and len(mult) != 5:
            iters = len(mult)  # follow an explicit multiplier list
        else:
            raise DataError(f"--iters {iters} does not match "
                            f"{len(mult)} beta multipliers")
    cfg = RestorationConfig(
        sigma=args.sigma,
        iterations=iters,
        beta_multipliers=mult,
        spacing=args.spacing,
        sampling="regular" if args.regular_grid else "jittered",
        use_tree=not args.no_tree,
        use_flat_tail=not args.no_flat_tail,
        rho=args.rho,
        seed=args.seed,
        workers=args.workers,
    )
    cfg.cg.tolerance = args.cg_tol
    cfg.cg.max_iterations = args.cg_max_iters
    if args.exact:
        cfg = replace(cfg, use_tree=False, use_flat_tail=False,
                      spacing=1, sampling="regular")
    return cfg


def _make_operator(args, y: np.ndarray) -> DegradationOperator:
    if args.task == "denoise":
        return identity_operator(y.shape)
    if args.task == "deblur":
        if not args.kernel:
            raise DataError("deblur requires --kernel")
        return convolution_operator(read_kernel_text(args.kernel), y.shape)
    if args.task == "inpaint":
        if not args.mask:
            raise DataError("inpaint requires --mask")
        mask = read_mask(args.mask)
        if mask.shape != y.shape:
            raise DataError(f"mask shape {mask.shape} != image shape {y.shape}")
        return mask_operator(mask)
    if args.task == "devignette":
        gain = read_gain(args.gain) if args.gain else radial_gain_map(y.shape)
        if gain.shape != y.shape:
            raise DataError(f"gain shape {gain.shape} != image shape {y.shape}")
        return gain_operator(gain)
    if args.task == "sr":
        if not args.factor:
            raise DataError("sr requires --factor")
        high = (y.shape[0] * args.factor, y.shape[1] * args.factor)
        kernel = read_kernel_text(args.kernel) if args.kernel else None
        return decimate_operator(args.factor, high, kernel)
    raise DataError(f"unknown task {args.task}")


def _prepare_model_and_tree(args, config: RestorationConfig):
    model = model_read(args.model)
    if config.use_flat_tail:
        if model.is_full_rank:
            model = model.flatten(config.rho)
            print(f"note: flattened full-rank model at rho={config.rho} "
                  f"(mean rank {model.mean_rank:.1f})")
    elif not model.is_full_rank:
        raise DataError("flat tail disabled but the model file is compressed; "
                        "supply the full-rank model")
    tree = None
    if config.use_tree:
        if args.tree:
            tree = tree_read(args.tree)
        else:
            tree = build_tree(model, seed=config.seed)
            print(f"note: built a search tree on the fly "
                  f"(levels {tree.level_sizes})")
        if tree.patch_dim != model.patch_dim or tree.n_leaves != model.n_components:
            raise DataError("tree does not match the model")
    return model, tree


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    files = _corpus_images(args.corpus)
    patches = _sample_training_patches(files, args.patch_size, args.samples,
                                       args.seed)
    model, history = em_train(patches, args.components, args.iters, args.seed)
    model_write(model, args.out)
    print(f"trained {args.components} components on {patches.shape[0]} patches "
          f"from {len(files)} images")
    print(f"final log-likelihood: {history[-1]:.3f}")
    print(f"model written to {args.out}")
    return 0


def cmd_import_model(args) -> int:
    model = read_covariance_text(args.text)
    model_write(model, args.out)
    print(f"imported {model.n_components} components with patch_dim "
          f"{model.patch_dim}; written to {args.out}")
    return 0


def cmd_flatten(args) -> int:
    model = model_read(args.model)
    flattened = model.flatten(args.rho)
    model_write(flattened, args.out)
    print(f"rho={args.rho}: mean rank {flattened.mean_rank:.2f} of "
          f"{flattened.patch_dim}")
    print(f"model written to {args.out}")
    return 0


def cmd_build_tree(args) -> int:
    model = model_read(args.model)
    levels = None
    if args.levels:
        levels = tuple(int(t) for t in args.levels.split(",") if t.strip())
    tree = build_tree(model, levels, seed=args.seed)
    tree_write(tree, args.out)
    print(f"tree levels (root to leaves): {tree.level_sizes}")
    print(f"tree written to {args.out}")
    return 0


def cmd_restore(args) -> int:
    t0 = time.perf_counter()
    y = image_read(args.input)
    A = _make_operator(args, y)
    config = _config_from_args(args)
    model, tree = _prepare_model_and_tree(args, config)
    x, stats = restore(y, A, model, tree, config)
    out = np.clip(x, 0.0, 1.0)
    image_write(out, args.output, args.bit_depth)
    seconds = time.perf_counter() - t0

    metrics = None
    if args.reference:
        ref = image_read(args.reference)
        quantized = image_read(args.output)
        metrics = {"psnr": psnr(quantized, ref), "ssim": ssim(quantized, ref)}
        print(f"PSNR {metrics['psnr']:.2f} dB  SSIM {metrics['ssim']:.4f}")
    print(f"restored {args.task} in {seconds:.2f} s "
          f"({stats.total_patches} patches, "
          f"{stats.total_score_evaluations} score evaluations)")

    manifest = build_manifest(
        command="restore",
        parameters={
            "task": args.task,
            "sigma": args.sigma,
            "seed": args.seed,
            "spacing": config.spacing,
            "sampling": config.sampling,
            "use_tree": config.use_tree,
            "use_flat_tail": config.use_flat_tail,
            "rho": args.rho,
            "iterations": config.iterations,
            "beta_multipliers": list(config.beta_multipliers),
            "cg_tol": config.cg.tolerance,
            "cg_max_iters": config.cg.max_iterations,
            "workers": config.workers,
            "exact": args.exact,
            "factor": args.factor,
            "bit_depth": args.bit_depth,
        },
        inputs={name: path for name, path in (
            ("input", args.input), ("model", args.model), ("tree", args.tree),
            ("kernel", args.kernel), ("mask", args.mask), ("gain", args.gain),
            ("reference", args.reference)) if path},
        outputs={"image": args.output},
        metrics=metrics,
        timings={"total_seconds": seconds, **stats.step_seconds()},
    )
    manifest_path = args.manifest_out or f"{args.output}.manifest.json"
    write_manifest(manifest, manifest_path)
    return 0


def restore_args_from_manifest(manifest: dict, output: str) -> list[str]:
    """Reconstruct a restore command line from a manifest (reproduction)."""
    p = manifest["parameters"]
    argv = ["restore", p["task"],
            "--input", manifest["inputs"]["input"]["path"],
            "--output", output,
            "--model", manifest["inputs"]["model"]["path"],
            "--sigma", str(p["sigma"]), "--seed", str(p["seed"]),
            "--spacing", str(p["spacing"]), "--rho", str(p["rho"]),
            "--iters", str(p["iterations"]),
            "--beta-multipliers", ",".join(str(m) for m in p["beta_multipliers"]),
            "--cg-tol", str(p["cg_tol"]),
            "--cg-max-iters", str(p["cg_max_iters"]),
            "--workers", str(p["workers"]),
            "--bit-depth", str(p["bit_depth"])]
    if "tree" in manifest["inputs"]:
        argv += ["--tree", manifest["inputs"]["tree"]["path"]]
    for name in ("kernel", "mask", "gain"):
        if name in manifest["inputs"]:
            argv += [f"--{name}", manifest["inputs"][name]["path"]]
    if p.get("factor"):
        argv += ["--factor", str(p["factor"])]
    if p["sampling"] == "regular":
        argv.append("--regular-grid")
    if not p["use_tree"]:
        argv.append("--no-tree")
    if not p["use_flat_tail"]:
        argv.append("--no-flat-tail")
    if p.get("exact"):
        argv.append("--exact")
    return argv


PROFILE_BUILDERS = {
    "full": lambda base: base,
    "flat-only": lambda base: replace(base, use_tree=False, spacing=1,
                                      sampling="regular"),
    "tree-only": lambda base: replace(base, use_flat_tail=False, spacing=1,
                                      sampling="regular"),
    "subsample-only": lambda base: replace(base, use_flat_tail=False,
                                           use_tree=False),
    "fepll-prime": lambda base: replace(base, use_tree=False, rho=0.98),
    "exact": lambda base: replace(base, use_flat_tail=False, use_tree=False,
                                  spacing=1, sampling="regular"),
}


def cmd_benchmark(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        images = [(f"synthetic{i:02d}", img) for i, img in
                  enumerate(phantom_corpus(args.synthetic, args.size, args.size,
                                           seed=args.seed))]
    else:
        if not args.corpus:
            raise DataError("benchmark needs --corpus or --synthetic")
        files = _corpus_images(args.corpus)
        images = [(f.stem, image_read(f)) for f in files]

    model = model_read(args.model)
    if not model.is_full_rank:
        raise DataError("benchmark expects the full-rank model "
                        "(profiles flatten it themselves)")

    base = RestorationConfig(sigma=args.sigma, seed=args.seed)
    if args.ablation:
        profiles = ablation_configs(base)
    else:
        profiles = []
        for name in (t.strip() for t in args.profiles.split(",")):
            if name not in PROFILE_BUILDERS:
                raise DataError(f"unknown profile {name!r}; choose from "
                                f"{sorted(PROFILE_BUILDERS)}")
            profiles.append((name, PROFILE_BUILDERS[name](base)))

    tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
    rows = []
    for task in tasks:
        if task not in ("denoise", "deblur"):
            raise DataError(f"benchmark supports denoise and deblur, got {task!r}")
        for idx, (name, clean) in enumerate(images):
            rng = np.random.default_rng(args.seed * 7919 + idx)
            if task == "denoise":
                A = identity_operator(clean.shape)
            else:
                kernel = read_kernel_text(args.kernel) if args.kernel else \
                    _default_blur_kernel()
                A = convolution_operator(kernel, clean.shape)
            y = A_apply_noisy(A, clean, args.sigma, rng)
            results = compare_profiles(y, A, model, profiles,
                                       reference=clean, tree_seed=args.seed)
            for res in results:
                rows.append({
                    "image": f"{task}:{name}",
                    "profile": res.name,
                    "psnr": res.psnr,
                    "ssim": res.ssim,
                    "seconds": res.seconds,
                    "patches": res.stats.total_patches,
                    "score_evaluations": res.stats.total_score_evaluations,
                    "selection_multiplies": res.stats.total_selection_multiplies,
                    "estimation_multiplies": res.stats.total_estimation_multiplies,
                })
            print(f"{task}:{name}: " + "  ".join(
                f"{r.name}={r.psnr:.2f}dB/{r.seconds:.2f}s" for r in results))

    write_csv(rows, outdir / "benchmark.csv")
    summary = aggregate(rows)
    baseline = "exact" if any(r["profile"] == "exact" for r in summary) else None
    write_markdown(summary, outdir / "benchmark.md", baseline)
    figures = render_figures(summary, outdir, baseline)
    print(f"wrote {outdir / 'benchmark.csv'}, {outdir / 'benchmark.md'}, "
          + ", ".join(str(f) for f in figures))
    return 0


def _default_blur_kernel() -> np.ndarray:
    from .operators import gaussian_kernel
    return gaussian_kernel(1.6)


def A_apply_noisy(A: DegradationOperator, clean: np.ndarray, sigma: float,
                  rng: np.random.Generator) -> np.ndarray:
    from .operators import apply
    y = apply(A, clean)
    return y + (sigma / 255.0) * rng.standard_normal(y.shape)


def cmd_inspect(args) -> int:
    path = Path(args.path)
    head = path.read_bytes()[:8] if path.is_file() else b""
    if head == MODEL_MAGIC:
        model = model_read(path)
        ranks = model.ranks
        print(f"model: {model.n_components} components, patch_dim "
              f"{model.patch_dim}, rho {model.rho}")
        print(f"ranks: mean {ranks.mean():.2f}, min {ranks.min()}, "
              f"max {ranks.max()}")
        print(f"weight sum: {model.weights.sum():.12f}")
    elif head == TREE_MAGIC:
        tree = tree_read(path)
        print(f"tree: levels {tree.level_sizes}, depth {tree.depth}, "
              f"{tree.n_leaves} leaves, patch_dim {tree.patch_dim}")
    elif path.suffix == ".json":
        print(json.dumps(read_manifest(path), indent=2, sort_keys=True))
    elif head[:2] == b"P5":
        img = image_read(path)
        print(f"PGM image {img.shape[0]}x{img.shape[1]}, "
              f"range [{img.min():.3f}, {img.max():.3f}]")
    else:
        raise DataError(f"{path}: unrecognized file type")
    return 0


COMMANDS = {
    "train": cmd_train,
    "import-model": cmd_import_model,
    "flatten": cmd_flatten,
    "build-tree": cmd_build_tree,
    "restore": cmd_restore,
    "benchmark": cmd_benchmark,
    "inspect": cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FepllError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
