"""The restoration loop: alternating patch estimation and image estimation.

One iteration, at coupling weight beta:

  1. build the anchor grid (jittered grids are resampled every iteration)
  2. extract patches and remove their means
  3. pick one mixture component per patch (tree descent or exhaustive scan)
  4. Wiener-estimate each patch under its component, add the mean back
  5. average the restored patches into an aggregate image
  6. solve the quadratic image-update against the observations

beta follows multipliers * lambda / sigma^2 over the iterations.  The
output is NOT clamped; callers clamp to [0, 1] at write-out only.

Selection and estimation are chunked; chunks may be dispatched to worker
threads, and because chunk boundaries are fixed and results are merged by
index, the restored image is bit-identical for any worker count.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DataError, NumericalError
from .gmm import (
    GmmModel,
    ScoreContext,
    score_flat_cost,
    select_exhaustive,
    wiener_flat_cost,
)
from .metrics import psnr, ssim
from .operators import (
    CgConfig,
    DegradationOperator,
    init_estimate,
    lambda_param,
    solve_image_estimation,
)
from .patches import PatchBatch, extract, jitter_rng, jittered_grid, regular_grid, reproject
from .tree import GmmTree, build_tree, tree_select

__all__ = [
    "RestorationConfig",
    "IterationStats",
    "SolverStats",
    "ProfileResult",
    "beta_schedule",
    "restore",
    "compare_profiles",
    "ablation_configs",
]

SIGMA_FLOOR_8BIT = 0.5   # keeps beta finite for nominally noiseless inputs
CHUNK = 4096             # fixed chunk size; independent of worker count


@dataclass
class RestorationConfig:
    sigma: float                       # noise std on the 0..255 scale
    iterations: int = 5
    beta_multipliers: tuple[float, ...] = (1.0, 4.0, 8.0, 16.0, 32.0)
    spacing: int = 6
    sampling: str = "jittered"         # "jittered" or "regular"
    use_tree: bool = True
    use_flat_tail: bool = True
    rho: float = 0.95
    seed: int = 0
    cg: CgConfig = field(default_factory=CgConfig)
    workers: int = 1
    trace: bool = False                # record per-iteration selections etc.

    def validate(self) -> None:
        if self.sigma < 0:
            raise DataError("sigma must be nonnegative")
        if self.iterations != len(self.beta_multipliers):
            raise DataError(f"iterations {self.iterations} != number of beta "
                            f"multipliers {len(self.beta_multipliers)}")
        if self.sampling not in ("jittered", "regular"):
            raise DataError(f"unknown sampling mode {self.sampling!r}")
        if self.workers < 1:
            raise DataError("workers must be >= 1")
        self.cg.validate()


@dataclass
class IterationStats:
    beta: float
    patches: int = 0
    score_evaluations: int = 0
    selection_multiplies: int = 0
    estimation_multiplies: int = 0
    times: dict[str, float] = field(default_factory=dict)
    image_solve_converged: bool = True
    image_solve_residual: float = 0.0


@dataclass
class SolverStats:
    iterations: list[IterationStats] = field(default_factory=list)
    init_seconds: float = 0.0
    total_seconds: float = 0.0
    lam: float = 0.0
    trace: list[dict] = field(default_factory=list)

    @property
    def total_patches(self) -> int:
        return sum(it.patches for it in self.iterations)

    @property
    def total_score_evaluations(self) -> int:
        return sum(it.score_evaluations for it in self.iterations)

    @property
    def total_selection_multiplies(self) -> int:
        return sum(it.selection_multiplies for it in self.iterations)

    @property
    def total_estimation_multiplies(self) -> int:
        return sum(it.estimation_multiplies for it in self.iterations)

    def step_seconds(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for it in self.iterations:
            for k, v in it.times.items():
                out[k] = out.get(k, 0.0) + v
        return out


def beta_schedule(sigma: float, lam: float,
                  multipliers: Sequence[float]) -> np.ndarray:
    """beta_t = multipliers[t] * lambda / sigma^2 (sigma on the [0, 1] scale)."""
    if sigma <= 0:
        raise DataError("sigma must be positive (apply the floor first)")
    return np.asarray(multipliers, dtype=np.float64) * lam / (sigma * sigma)


def _chunks(n: int) -> list[slice]:
    return [slice(i, min(i + CHUNK, n)) for i in range(0, n, CHUNK)]


def _select_chunk(patches: np.ndarray, model_ctx: ScoreContext,
                  tree: GmmTree | None, tree_ctx: ScoreContext | None,
                  patch_dim: int) -> tuple[np.ndarray, int, int]:
    """Component index per patch plus (evaluations, multiplies) counters."""
    n = patches.shape[0]
    if tree is not None:
        ks, evals, mults = tree_select(tree, patches, tree_ctx, with_counters=True)
        return ks, int(evals.sum()), int(mults.sum())
    ks = select_exhaustive(model_ctx, patches)
    per_patch = sum(score_flat_cost(c.rank, patch_dim)
                    for c in model_ctx.components) + patch_dim
    return ks, n * model_ctx.n_components, n * per_patch


def restore(y: np.ndarray, A: DegradationOperator, model: GmmModel,
            tree: GmmTree | None = None,
            config: RestorationConfig | None = None
            ) -> tuple[np.ndarray, SolverStats]:
    """Run the full restoration; returns the unclamped estimate and counters."""
    if config is None:
        config = RestorationConfig(sigma=20.0)
    config.validate()
    y = np.asarray(y, dtype=np.float64)
    if y.shape != A.output_dims:
        raise DataError(f"observation shape {y.shape} != operator output "
                        f"{A.output_dims}")
    P = model.patch_dim
    side = int(np.sqrt(P))
    if side * side != P:
        raise DataError(f"model patch_dim {P} is not a perfect square")
    if not (1 <= config.spacing <= side):
        raise DataError(f"spacing must lie in [1, {side}]")
    if config.use_tree:
        if tree is None:
            raise DataError("use_tree requires a search tree")
        if tree.n_leaves != model.n_components:
            raise DataError(f"tree has {tree.n_leaves} leaves but the model "
                            f"has {model.n_components} components")
    if not config.use_flat_tail and not model.is_full_rank:
        raise DataError("flat tail disabled: a full-rank model is required")

    t_start = time.perf_counter()
    H, W = A.input_dims
    sigma = max(config.sigma, SIGMA_FLOOR_8BIT) / 255.0
    lam = lambda_param(A, sigma, H * W)
    betas = beta_schedule(sigma, lam, config.beta_multipliers)

    stats = SolverStats(lam=lam)
    if A.kind == "identity":
        x = y.copy()
    else:
        x, _ = init_estimate(A, y, sigma, lam, config.cg)
    stats.init_seconds = time.perf_counter() - t_start

    pool = ThreadPoolExecutor(max_workers=config.workers) \
        if config.workers > 1 else None
    try:
        for t, beta in enumerate(betas):
            it = IterationStats(beta=float(beta))
            tic = time.perf_counter()
            if config.sampling == "jittered":
                grid = jittered_grid(H, W, P, config.spacing,
                                     jitter_rng(config.seed, t))
            else:
                grid = regular_grid(H, W, P, config.spacing)
            it.times["grid"] = time.perf_counter() - tic

            tic = time.perf_counter()
            batch = extract(x, grid)
            it.patches = grid.n_patches
            it.times["extract"] = time.perf_counter() - tic

            tic = time.perf_counter()
            model_ctx = ScoreContext(model.components, beta)
            tree_ctx = tree.make_context(beta) if config.use_tree else None
            slices = _chunks(grid.n_patches)
            work = lambda sl: _select_chunk(batch.patches[sl], model_ctx,
                                            tree if config.use_tree else None,
                                            tree_ctx, P)
            results = list(pool.map(work, slices)) if pool else [work(s) for s in slices]
            ks = np.concatenate([r[0] for r in results]) if results else \
                np.zeros(0, dtype=np.int64)
            it.score_evaluations = sum(r[1] for r in results)
            it.selection_multiplies = sum(r[2] for r in results)
            it.times["select"] = time.perf_counter() - tic

            tic = time.perf_counter()
            estimates = np.empty_like(batch.patches)
            for k in np.unique(ks):
                members = ks == k
                estimates[members] = model_ctx.wiener_flat(int(k),
                                                           batch.patches[members])
                it.estimation_multiplies += int(members.sum()) * \
                    wiener_flat_cost(model.components[int(k)].rank, P)
            it.times["estimate"] = time.perf_counter() - tic

            tic = time.perf_counter()
            x_tilde = reproject(replace(batch, patches=estimates, residual=None),
                                H, W)
            it.times["reproject"] = time.perf_counter() - tic

            tic = time.perf_counter()
            x, info = solve_image_estimation(A, y, x_tilde,
                                             float(beta) * sigma * sigma,
                                             config.cg)
            it.image_solve_converged = info.converged
            it.image_solve_residual = info.residual
            it.times["image_solve"] = time.perf_counter() - tic

            if not np.isfinite(x).all():
                raise NumericalError(f"non-finite image estimate at iteration {t}")
            if config.trace:
                stats.trace.append({
                    "beta": float(beta),
                    "grid": grid,
                    "patches": batch.patches.copy(),
                    "dc": batch.dc.copy(),
                    "selected": ks.copy(),
                    "estimates": estimates.copy(),
                    "x_tilde": x_tilde.copy(),
                })
            stats.iterations.append(it)
    finally:
        if pool:
            pool.shutdown()

    stats.total_seconds = time.perf_counter() - t_start
    return x, stats


# ---------------------------------------------------------------------------
# profile comparison
# ---------------------------------------------------------------------------

@dataclass
class ProfileResult:
    name: str
    config: RestorationConfig
    image: np.ndarray
    stats: SolverStats
    seconds: float
    psnr: float | None = None
    ssim: float | None = None


def _profile_assets(model: GmmModel, config: RestorationConfig,
                    tree: GmmTree | None, tree_seed: int,
                    cache: dict) -> tuple[GmmModel, GmmTree | None]:
    if config.use_flat_tail:
        key = ("model", config.rho)
        if key not in cache:
            cache[key] = model.flatten(config.rho) if model.is_full_rank else model
        use_model = cache[key]
    else:
        use_model = model
    use_tree = None
    if config.use_tree:
        if tree is not None:
            use_tree = tree
        else:
            key = ("tree", config.rho if config.use_flat_tail else 1.0)
            if key not in cache:
                cache[key] = build_tree(use_model, rho=key[1], seed=tree_seed)
            use_tree = cache[key]
    return use_model, use_tree


def compare_profiles(y: np.ndarray, A: DegradationOperator, model: GmmModel,
                     configs: Sequence[tuple[str, RestorationConfig]],
                     tree: GmmTree | None = None,
                     reference: np.ndarray | None = None,
                     tree_seed: int = 0) -> list[ProfileResult]:
    """Restore with several acceleration profiles and collect quality,
    timing and counter rows.

    ``model`` should be the full-rank model; profiles that enable the flat
    tail flatten it at their own rho, and trees are built on demand when
    not supplied.
    """
    if not model.is_full_rank:
        raise DataError("compare_profiles expects the full-rank model")
    cache: dict = {}
    out = []
    for name, config in configs:
        use_model, use_tree = _profile_assets(model, config, tree, tree_seed, cache)
        tic = time.perf_counter()
        image, stats = restore(y, A, use_model, use_tree, config)
        seconds = time.perf_counter() - tic
        result = ProfileResult(name, config, image, stats, seconds)
        if reference is not None:
            clipped = np.clip(image, 0.0, 1.0)
            result.psnr = psnr(clipped, reference)
            result.ssim = ssim(clipped, reference)
        out.append(result)
    return out


def ablation_configs(base: RestorationConfig) -> list[tuple[str, RestorationConfig]]:
    """The eight on/off combinations of flat tail, tree and subsampling."""
    out = []
    for flat in (False, True):
        for tr in (False, True):
            for sub in (False, True):
                name = "+".join(n for n, on in
                                (("flat", flat), ("tree", tr), ("subsample", sub))
                                if on) or "none"
                cfg = replace(base,
                              use_flat_tail=flat,
                              use_tree=tr,
                              spacing=base.spacing if sub else 1,
                              sampling="jittered" if sub else "regular")
                out.append((name, cfg))
    return out
