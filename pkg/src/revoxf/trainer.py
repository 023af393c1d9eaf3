"""Coarse-to-fine optimization of a voxel radiance field from a few posed views."""

from __future__ import annotations

import copy
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import _kernels
from .data.datasets import Dataset
from .errors import DomainError, LoadError, NumericError
from .geometry import Camera, RayBatch, WarpPoseSpec, camera_ray_batch, pixel_centers, sample_warp_poses
from .losses import (
    DELTA_METRICS,
    LossReport,
    LossWeights,
    loss_bgc,
    loss_ds,
    loss_rel,
    loss_rgb,
    loss_total,
    loss_unr_pairs,
    neighbour_pair_count,
    sample_pairs,
)
from .render import RenderConfig, backprop_rays, default_far, render_image, render_rays
from .voxel import ReliabilityField, VoxelGrid, accumulate_reliability, save_checkpoint, upsample
from .warp import WarpProduct, build_warp_product, depth_file_name, depth_provider

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class StageConfig:
    dims: tuple = (64, 64, 64)
    steps: int = 1000
    weights: LossWeights = LossWeights()
    lr_density: float = 0.1
    lr_color: float = 0.01
    # learning rates shrink by this factor over the stage
    lr_decay: float = 0.1

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise DomainError("stage dims must be three values >= 2")
        if int(self.steps) < 1:
            raise DomainError("stage step count must be >= 1")
        if not (self.lr_density > 0 and self.lr_color > 0):
            raise DomainError("learning rates must be positive")
        if not 0 < self.lr_decay <= 1:
            raise DomainError("lr_decay must lie in (0, 1]")


COARSE_PAPER = LossWeights(lambda_rel=1e-1, lambda_unr=1e-2, lambda_d=5e-4, lambda_f=5e-5, lambda_ds=5e-5)
FINE_PAPER = LossWeights(lambda_rel=1e-1, lambda_unr=1e-2, lambda_d=5e-5, lambda_f=1e-5, lambda_ds=5e-5)
LLFF_PAPER = LossWeights(lambda_rel=1e-1, lambda_unr=1e-3, lambda_d=5e-5, lambda_f=5e-6, lambda_ds=5e-4)


@dataclass(frozen=True)
class TrainConfig:
    stages: tuple = (
        StageConfig((64, 64, 64), 1000, COARSE_PAPER),
        StageConfig((128, 128, 128), 2000, FINE_PAPER),
    )
    warp_refresh_period: int = 1000
    warp: WarpPoseSpec = WarpPoseSpec()
    resample_poses: bool = True
    reliability_refresh: str = "warp"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    seed: int = 0
    batch_size: int = 4096
    # shares of input-view, reliable-warp and unreliable-warp rays
    ray_mix: tuple = (0.5, 0.35, 0.15)
    patch_size: int = 8
    patches_per_step: int = 2
    # correlation threshold; None means 1% of the bbox diagonal
    cor_eps: float | None = None
    # opacity of one base voxel in a fresh grid; None leaves raw density at 0
    init_alpha: float | None = 1e-4
    # source pixels rendered less opaque than this carry no depth and are not warped
    min_warp_opacity: float = 0.5
    depth_mode: str = "geometric-fallback"
    depth_dir: str | None = None
    reliability_max_rays: int = 1 << 18
    render: RenderConfig = RenderConfig()
    llff_mode: bool = False
    strict: bool = True
    log_every: int = 50
    debug: bool = False

    def __post_init__(self):
        if len(self.stages) < 1:
            raise DomainError("need at least one stage")
        if self.llff_mode and len(self.stages) != 1:
            raise DomainError("llff_mode trains a single fine stage")
        if self.warp_refresh_period < 1:
            raise DomainError("warp_refresh_period must be >= 1")
        if self.reliability_refresh not in ("warp", "stage"):
            raise DomainError("reliability_refresh must be 'warp' or 'stage'")
        if len(self.ray_mix) != 3 or min(self.ray_mix) < 0 or abs(sum(self.ray_mix) - 1) > 1e-9:
            raise DomainError("ray_mix must be three non-negative shares summing to 1")
        if self.batch_size < 1 or self.patch_size < 2 or self.patches_per_step < 0:
            raise DomainError("bad batch or patch settings")
        if self.init_alpha is not None and not 0 < self.init_alpha < 1:
            raise DomainError("init_alpha must lie in (0, 1)")
        if self.depth_mode not in ("geometric-fallback", "external-file"):
            raise DomainError(f"unknown depth_mode {self.depth_mode!r}")
        if self.depth_mode == "external-file" and not self.depth_dir:
            raise DomainError("external-file depth needs depth_dir")

    @property
    def total_steps(self) -> int:
        return sum(s.steps for s in self.stages)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _config_from_mapping(d)


def desk_config(**kw) -> TrainConfig:
    """Desk-scale schedule: 64^3 for 1000 steps, then 128^3 for 2000."""
    return TrainConfig(**kw)


def paper_config(**kw) -> TrainConfig:
    """The larger 96^3 / 160^3 schedule."""
    stages = (StageConfig((96, 96, 96), 5000, COARSE_PAPER), StageConfig((160, 160, 160), 20000, FINE_PAPER))
    return TrainConfig(stages=stages, **kw)


def llff_config(**kw) -> TrainConfig:
    """Forward-facing scenes: a single fine stage with its own weights."""
    return TrainConfig(stages=(StageConfig((128, 128, 128), 3000, LLFF_PAPER),), llff_mode=True, **kw)


PRESETS = {"desk": desk_config, "paper": paper_config, "llff": llff_config}


def _config_from_mapping(d: dict) -> TrainConfig:
    d = copy.deepcopy(dict(d))
    base = PRESETS[d.pop("preset", "desk")]()
    kw = {}
    if "stages" in d:
        stages = []
        for s in d.pop("stages"):
            s = dict(s)
            w = s.pop("weights", {})
            if "dims" in s:
                s["dims"] = tuple(int(v) for v in s["dims"])
            stages.append(StageConfig(weights=LossWeights(**w), **s))
        kw["stages"] = tuple(stages)
    if "warp" in d:
        kw["warp"] = WarpPoseSpec(**d.pop("warp"))
    if "render" in d:
        kw["render"] = RenderConfig(**d.pop("render"))
    if "ray_mix" in d:
        kw["ray_mix"] = tuple(d.pop("ray_mix"))
    for k in list(d):
        if k not in TrainConfig.__dataclass_fields__:
            raise DomainError(f"unknown config key {k!r}")
        kw[k] = d.pop(k)
    return replace(base, **kw)


def load_config(path) -> tuple[TrainConfig, dict]:
    """Read a TOML config; returns the config and the ``[data]`` table."""
    with open(path, "rb") as f:
        try:
            raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as exc:
            raise LoadError(f"{path}: {exc}") from exc
    data = raw.pop("data", {})
    return _config_from_mapping(raw), data


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def fresh(cls, grid: VoxelGrid) -> "OptimizerState":
        return cls(np.zeros(grid.params.shape, np.float32), np.zeros(grid.params.shape, np.float32))


def apply_reliability_weights(grad: np.ndarray, field: ReliabilityField) -> None:
    """Scale every voxel's gradients by ``1 + rho(v)`` in place."""
    if field.dims != grad.shape[:3]:
        raise DomainError(f"reliability dims {field.dims} != gradient dims {grad.shape[:3]}")
    if field.s_max == 0:
        return
    _kernels.scale_grads(grad, field.gradient_weight())


def adam_step(grid: VoxelGrid, state: OptimizerState, lr_density: float, lr_color: float,
              beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8,
              weights: np.ndarray | None = None) -> None:
    """Bias-corrected Adam on ``grid.grad``; consumed gradients are zeroed.

    Entries whose gradient is exactly zero keep their value and only decay
    their moments.  ``weights`` (per voxel) scales the gradients first, which
    is the same as calling :func:`apply_reliability_weights` beforehand.
    """
    bc1 = 1.0 - beta1 ** (state.step + 1)
    bc2 = 1.0 - beta2 ** (state.step + 1)
    lr = np.array([lr_density, lr_color, lr_color, lr_color])
    use_w = weights is not None
    W = weights if use_w else np.ones((1, 1, 1))
    if use_w and W.shape != grid.dims:
        raise DomainError(f"weight dims {W.shape} != grid dims {grid.dims}")
    bad = _kernels.adam_update(grid.params, grid.grad, state.m, state.v, W, use_w, lr,
                               beta1, beta2, eps, bc1, bc2)
    if bad >= 0:
        block = "density" if bad == 0 else "color"
        raise NumericError(f"non-finite {block} gradient", term=block)
    state.step += 1
    grid.touch()


def smooth_adam_step(grid: VoxelGrid, field: ReliabilityField, weights: LossWeights,
                     state: OptimizerState, lr_density: float, lr_color: float,
                     beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8,
                     grad_weights: np.ndarray | None = None) -> tuple[float, float, float]:
    """:func:`loss_rs` with gradients followed by :func:`adam_step`, fused.

    One sweep over the grid in place of two; the result is bit-identical to
    the separate calls.  Returns ``(loss, L_fc, L_sigma)``.  Unlike
    :func:`adam_step`, a non-finite gradient is found mid-sweep, so part of
    the grid may already be updated (still finite) when the error is raised.
    """
    if field.dims != grid.dims:
        raise DomainError(f"reliability dims {field.dims} != grid dims {grid.dims}")
    npairs = neighbour_pair_count(grid.dims)
    if npairs == 0:
        adam_step(grid, state, lr_density, lr_color, beta1, beta2, eps, grad_weights)
        return 0.0, 0.0, 0.0
    bc1 = 1.0 - beta1 ** (state.step + 1)
    bc2 = 1.0 - beta2 ** (state.step + 1)
    lr = np.array([lr_density, lr_color, lr_color, lr_color])
    use_w = grad_weights is not None
    W = grad_weights if use_w else np.ones((1, 1, 1))
    if use_w and W.shape != grid.dims:
        raise DomainError(f"weight dims {W.shape} != grid dims {grid.dims}")
    sd, sc, bad = _kernels.smooth_adam_update(
        grid.params, grid.grad, state.m, state.v, W, use_w, lr, beta1, beta2, eps, bc1, bc2,
        field.smoothing_factor(), DELTA_METRICS[weights.delta_metric],
        float(weights.huber_delta or 0.0), weights.lambda_d / npairs, weights.lambda_f / npairs)
    grid.touch()
    if bad >= 0:
        block = "density" if bad == 0 else "color"
        raise NumericError(f"non-finite {block} gradient", term=block)
    state.step += 1
    l_sigma, l_fc = sd / npairs, sc / npairs
    return weights.lambda_f * l_fc + weights.lambda_d * l_sigma, l_fc, l_sigma


# ---------------------------------------------------------------------------
# training


@dataclass
class ViewRays:
    camera: Camera
    batch: RayBatch

    def take(self, flat: np.ndarray) -> RayBatch:
        return self.batch[flat]


@dataclass
class TrainResult:
    grid: VoxelGrid
    render: RenderConfig
    log: list = field(default_factory=list)
    products: list = field(default_factory=list)
    field: ReliabilityField | None = None


def _bounds(dataset: Dataset, grid: VoxelGrid, cam: Camera) -> tuple[float, float]:
    far = dataset.far if dataset.far is not None else default_far(grid, cam)
    return float(dataset.near), float(far)


def _check_dataset(dataset: Dataset) -> None:
    train = dataset.split("train")
    if not train:
        raise LoadError("dataset has no training views")
    for v in train:
        if v.rgb.ndim != 3 or v.rgb.shape[2] != 3:
            raise LoadError(f"view {v.name!r}: expected an RGB image")
        if not np.isfinite(v.rgb).all() or v.rgb.min() < 0 or v.rgb.max() > 1:
            raise LoadError(f"view {v.name!r}: colors must be finite and in [0, 1]")


class Trainer:
    """Owns the grid, the optimizer state and the warp products of one run."""

    def __init__(self, dataset: Dataset, config: TrainConfig, log_path=None):
        _check_dataset(dataset)
        self.data = dataset
        self.cfg = config
        self.log: list[dict] = []
        self.log_path = log_path
        self._log_file = None
        self.train_views = dataset.split("train")
        s0 = config.stages[0]
        grid = VoxelGrid(dataset.bbox_min, dataset.bbox_max, s0.dims)
        # density is expressed per base-voxel length so upsampling keeps opacity
        unit = float(np.mean(grid.spacing))
        self.render_cfg = replace(config.render, background=dataset.background,
                                  density_scale=1.0 / unit)
        if config.init_alpha is not None:
            # softplus(raw + shift) is sigma times the base voxel length
            tau = -math.log1p(-config.init_alpha)
            grid.density[...] = math.log(math.expm1(tau)) - self.render_cfg.density_activation_shift
        self.grid = grid
        diag = float(np.linalg.norm(dataset.bbox_max - dataset.bbox_min))
        self.diag = diag
        self.cor_eps = config.cor_eps if config.cor_eps is not None else 0.01 * diag
        self.margin_default = 1e-4 * diag
        self.products: list[WarpProduct] = []
        self.field = ReliabilityField.zeros(grid.dims)
        self._poses: list[Camera] | None = None
        self._seeds = np.random.SeedSequence(config.seed)
        self.rng = np.random.default_rng(self._seeds.spawn(1)[0])
        self._input_rays = [self._view_rays(v.camera) for v in self.train_views]
        self._input_rgb = [v.rgb.reshape(-1, 3).astype(np.float64) for v in self.train_views]
        self._input_ref = self._input_references()

    # -- helpers ---------------------------------------------------------

    def _view_rays(self, cam: Camera) -> ViewRays:
        near, far = _bounds(self.data, self.grid, cam)
        return ViewRays(cam, camera_ray_batch(cam, near, far))

    def _input_references(self) -> list:
        """External depth for the input views, used as ordering references."""
        if self.cfg.depth_mode != "external-file":
            return []
        refs = []
        for i, v in enumerate(self.train_views):
            path = os.path.join(self.cfg.depth_dir, depth_file_name(i, v.camera))
            if os.path.isfile(path):
                m = np.zeros((v.camera.height, v.camera.width), dtype=bool)
                d = depth_provider(v.rgb, None, m, "external-file", depth_dir=self.cfg.depth_dir,
                                   source_id=i, target=v.camera)
                refs.append(WarpProduct(v.camera, v.rgb, d, m, ~m, ~m, i, d, True))
        return refs

    def _emit(self, rec: dict) -> None:
        self.log.append(rec)
        if self._log_file is not None:
            self._log_file.write(json.dumps(rec) + "\n")
            self._log_file.flush()

    # -- warp refresh ----------------------------------------------------

    def refresh_warps(self, stage_idx: int, refresh_idx: int, rebuild_field: bool = True) -> None:
        cfg = self.cfg
        grid = self.grid
        seed = int(np.random.SeedSequence([cfg.seed, stage_idx, refresh_idx]).generate_state(1)[0])
        if self._poses is None or cfg.resample_poses:
            cams = [v.camera for v in self.train_views]
            if cfg.warp.mode == "spherical-offset":
                per_view = [sample_warp_poses(c, cfg.warp, [seed, i], center=self.data.center)
                            for i, c in enumerate(cams)]
            else:
                targets = sample_warp_poses(cams, cfg.warp, seed)
                # a target between views i and i+1 borrows from view i
                per_view = [[] for _ in cams]
                for j, t in enumerate(targets):
                    per_view[j // cfg.warp.count].append(t)
            self._poses = per_view
        products = []
        for i, v in enumerate(self.train_views):
            if not self._poses[i]:
                continue
            near, far = _bounds(self.data, grid, v.camera)
            _, depth, acc = render_image(grid, v.camera, self.render_cfg, near, far, return_alpha=True)
            depth = np.where(acc >= cfg.min_warp_opacity, depth, np.nan)
            for dst in self._poses[i]:
                dnear, dfar = _bounds(self.data, grid, dst)
                _, ddepth = render_image(grid, dst, self.render_cfg, dnear, dfar)
                prod = build_warp_product(i, v.rgb, depth, v.camera, dst, ddepth, self.cor_eps,
                                          cfg.depth_mode, cfg.depth_dir)
                if cfg.debug:
                    prod.check()
                products.append(prod)
        self.products = products
        self._product_rays = [self._view_rays(p.target) for p in products]
        self._rel_index = [np.flatnonzero(~p.m_unreliable.ravel()) for p in products]
        pool = products + self._input_ref
        self._unr_pool = [p for p in pool if p.ref_depth is not None and p.m_unreliable.any()]
        self._unr_rays = [self._view_rays(p.target) for p in self._unr_pool]
        self._unr_index = [np.argwhere(p.m_unreliable) for p in self._unr_pool]
        if rebuild_field:
            self.rebuild_reliability()

    def rebuild_reliability(self) -> None:
        batches = [vr.take(idx) for vr, idx in zip(self._product_rays, self._rel_index) if len(idx)]
        batch = RayBatch.concat(batches)
        cap = self.cfg.reliability_max_rays
        if len(batch) > cap:
            keep = np.sort(self.rng.choice(len(batch), cap, replace=False))
            batch = batch[keep]
        g = self.grid
        self.field = accumulate_reliability(g.bbox_min, g.bbox_max, g.dims, batch)

    # -- one step --------------------------------------------------------

    def _budget(self, w: LossWeights) -> tuple[int, int, int]:
        B = self.cfg.batch_size
        _, f_rel, f_unr = self.cfg.ray_mix
        has_rel = w.lambda_rel > 0 and any(len(i) for i in self._rel_index)
        has_unr = w.lambda_unr > 0 and len(self._unr_pool) > 0
        n_rel = int(round(B * f_rel)) if has_rel else 0
        n_unr = int(round(B * f_unr)) if has_unr else 0
        # budget a term cannot use goes back to the input views
        return B - n_rel - n_unr, n_rel, n_unr

    def _sample_input(self, n: int):
        rng = self.rng
        v = rng.integers(0, len(self._input_rays), n)
        batches, targets = [], []
        for k in range(len(self._input_rays)):
            sel = v == k
            cnt = int(sel.sum())
            if cnt == 0:
                continue
            pix = rng.integers(0, len(self._input_rgb[k]), cnt)
            batches.append(self._input_rays[k].take(pix))
            targets.append(self._input_rgb[k][pix])
        return RayBatch.concat(batches), np.concatenate(targets) if targets else np.zeros((0, 3))

    def _sample_reliable(self, n: int):
        sizes = np.array([len(i) for i in self._rel_index])
        pick = self.rng.choice(len(sizes), n, p=sizes / sizes.sum())
        batches, targets = [], []
        for k in range(len(sizes)):
            cnt = int((pick == k).sum())
            if cnt == 0:
                continue
            flat = self._rel_index[k][self.rng.integers(0, sizes[k], cnt)]
            batches.append(self._product_rays[k].take(flat))
            targets.append(self.products[k].warped_rgb.reshape(-1, 3)[flat])
        return RayBatch.concat(batches), np.concatenate(targets)

    def _sample_pairs(self, n: int, w: LossWeights):
        """Anchors from unreliable pixels plus their depth-gated neighbours.

        Returns the rays to render and, per pair, the row indices of the two
        endpoints in that batch and their reference depths.
        """
        n_anchor = max(1, n // (1 + w.n_pairs))
        sizes = np.array([len(i) for i in self._unr_index])
        pick = self.rng.choice(len(sizes), n_anchor, p=sizes / sizes.sum())
        batches, ip, iq, rp, rq = [], [], [], [], []
        offset = 0
        for k in range(len(sizes)):
            cnt = int((pick == k).sum())
            if cnt == 0:
                continue
            prod = self._unr_pool[k]
            anchors = self._unr_index[k][self.rng.integers(0, sizes[k], cnt)]
            a_idx, q = sample_pairs(prod.ref_depth, anchors, w.k, w.tau_d, w.n_pairs, self.rng)
            if len(a_idx) == 0:
                continue
            p = anchors[a_idx]
            W = prod.target.width
            pix = np.concatenate([p[:, 0] * W + p[:, 1], q[:, 0] * W + q[:, 1]])
            uniq, inv = np.unique(pix, return_inverse=True)
            batches.append(self._unr_rays[k].take(uniq))
            ip.append(offset + inv[: len(p)])
            iq.append(offset + inv[len(p):])
            rp.append(prod.ref_depth[p[:, 0], p[:, 1]])
            rq.append(prod.ref_depth[q[:, 0], q[:, 1]])
            offset += len(uniq)
        if not batches:
            return None
        return (RayBatch.concat(batches), np.concatenate(ip), np.concatenate(iq),
                np.concatenate(rp), np.concatenate(rq))

    def _sample_patches(self, count: int):
        """Square depth patches from input and pseudo views."""
        cams = [vr.camera for vr in self._input_rays] + [p.target for p in self.products]
        s = self.cfg.patch_size
        batches = []
        for _ in range(count):
            cam = cams[int(self.rng.integers(0, len(cams)))]
            if cam.width < s or cam.height < s:
                continue
            x0 = int(self.rng.integers(0, cam.width - s + 1))
            y0 = int(self.rng.integers(0, cam.height - s + 1))
            uv = pixel_centers(cam.width, cam.height)[y0:y0 + s, x0:x0 + s].reshape(-1, 2)
            near, far = _bounds(self.data, self.grid, cam)
            batches.append(camera_ray_batch(cam, near, far, uv))
        return batches

    def step(self, stage: StageConfig, lr_scale: float, state: OptimizerState) -> LossReport:
        grid, rc = self.grid, self.render_cfg
        w = stage.weights
        margin = w.margin if w.margin is not None else self.margin_default
        n_in, n_rel, n_unr = self._budget(w)
        counts = {}

        batch, target = self._sample_input(n_in)
        out = render_rays(grid, batch, rc)
        l_rgb, g = loss_rgb(out.rgb, target)
        backprop_rays(grid, batch, rc, out, g, 0.0)
        counts["rgb"] = len(batch)
        psnr_batch = -10.0 * math.log10(max(l_rgb, 1e-12))

        l_rel = 0.0
        if n_rel:
            batch, target = self._sample_reliable(n_rel)
            out = render_rays(grid, batch, rc)
            l_rel, g, cnt = loss_rel(out.rgb, target, np.ones(len(batch), bool))
            backprop_rays(grid, batch, rc, out, w.lambda_rel * g, 0.0)
            counts["rel"] = cnt

        l_unr = 0.0
        if n_unr:
            s = self._sample_pairs(n_unr, w)
            if s is not None:
                batch, ip, iq, rp, rq = s
                out = render_rays(grid, batch, rc)
                z = out.depth * batch.zscale
                l_unr, gp, gq = loss_unr_pairs(z[ip], z[iq], rp, rq, margin)
                gz = np.zeros(len(batch))
                np.add.at(gz, ip, gp)
                np.add.at(gz, iq, gq)
                backprop_rays(grid, batch, rc, out, 0.0, w.lambda_unr * gz * batch.zscale)
                counts["unr_pairs"] = len(ip)
        l_bgc = loss_bgc(l_rel, l_unr, w)

        l_ds = 0.0
        if w.lambda_ds > 0 and self.cfg.patches_per_step:
            patches = self._sample_patches(self.cfg.patches_per_step)
            if patches:
                batch = RayBatch.concat(patches)
                out = render_rays(grid, batch, rc)
                s = self.cfg.patch_size
                z = (out.depth * batch.zscale).reshape(-1, s, s)
                l_ds, gz = loss_ds(z)
                backprop_rays(grid, batch, rc, out, 0.0, w.lambda_ds * gz.reshape(-1) * batch.zscale)
                counts["ds_patches"] = len(z)

        def report(l_rs=0.0, l_fc=0.0, l_sigma=0.0):
            return loss_total(l_rgb, l_bgc, l_rs, l_ds, w.lambda_ds, l_rel=l_rel, l_unr=l_unr,
                              l_fc=l_fc, l_sigma=l_sigma, counts=counts)

        # reliability weighting is fused into the optimizer pass
        weights = self.field.gradient_weight() if self.field.s_max > 0 else None
        opt = (stage.lr_density * lr_scale, stage.lr_color * lr_scale,
               self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps)
        if w.lambda_f > 0 or w.lambda_d > 0:
            try:
                rs = smooth_adam_step(grid, self.field, w, state, *opt, grad_weights=weights)
            except NumericError:
                report().check()  # name the loss term when one caused it
                raise
            rep = report(*rs)
            rep.check()
        else:
            rep = report()
            rep.check()
            adam_step(grid, state, *opt, weights)
        if self.cfg.debug and not grid.all_finite():
            raise NumericError("grid became non-finite", term="grid")
        rep.counts["psnr_train_batch"] = psnr_batch
        return rep

    # -- driver ----------------------------------------------------------

    def run(self) -> TrainResult:
        cfg = self.cfg
        if self.log_path is not None:
            self._log_file = open(self.log_path, "w")
        try:
            self._emit({"event": "config", "config": _jsonable(cfg.to_dict()),
                        "render": _jsonable(asdict(self.render_cfg))})
            global_step = 0
            for si, stage in enumerate(cfg.stages):
                if si > 0:
                    self.grid = upsample(self.grid, stage.dims)
                    self._input_rays = [self._view_rays(vr.camera) for vr in self._input_rays]
                state = OptimizerState.fresh(self.grid)
                refresh = 0
                t_stage = time.perf_counter()
                for k in range(stage.steps):
                    if k % cfg.warp_refresh_period == 0:
                        rebuild = cfg.reliability_refresh == "warp" or k == 0
                        self.refresh_warps(si, refresh, rebuild)
                        refresh += 1
                        self._emit({"event": "warp", "step": global_step, "stage": si,
                                    "products": len(self.products),
                                    "reliable_pixels": int(sum(len(i) for i in self._rel_index)),
                                    "s_max": int(self.field.s_max)})
                    lr_scale = stage.lr_decay ** (k / stage.steps)
                    t0 = time.perf_counter()
                    rep = self.step(stage, lr_scale, state)
                    global_step += 1
                    psnr_batch = rep.counts.pop("psnr_train_batch")
                    if global_step % cfg.log_every == 0 or k == stage.steps - 1:
                        rec = {"step": global_step, "stage": si, **rep.to_dict(),
                               "psnr_train_batch": psnr_batch}
                        rec["timing"] = None if cfg.strict else {
                            "step_s": time.perf_counter() - t0,
                            "stage_s": time.perf_counter() - t_stage,
                        }
                        self._emit(rec)
        finally:
            if self._log_file is not None:
                self._log_file.close()
                self._log_file = None
        return TrainResult(self.grid, self.render_cfg, self.log, self.products, self.field)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def train(dataset: Dataset, config: TrainConfig, log_path=None) -> TrainResult:
    return Trainer(dataset, config, log_path).run()


RENDER_SIDECAR = "render_config.json"


def save_model(result: TrainResult, out_dir, near: float = 0.0, far: float | None = None) -> str:
    """Checkpoint plus the render settings it needs; returns the checkpoint path."""
    os.makedirs(out_dir, exist_ok=True)
    ckpt = os.path.join(out_dir, "model.rvxf")
    save_checkpoint(result.grid, ckpt)
    side = asdict(result.render)
    side.update(near=near, far=far)
    with open(os.path.join(out_dir, RENDER_SIDECAR), "w") as f:
        json.dump(side, f, indent=2, sort_keys=True)
    return ckpt


def load_render_config(checkpoint_path) -> tuple[RenderConfig, float, float | None]:
    path = os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)), RENDER_SIDECAR)
    if not os.path.isfile(path):
        return RenderConfig(), 0.0, None
    with open(path) as f:
        d = json.load(f)
    near = d.pop("near", 0.0)
    far = d.pop("far", None)
    return RenderConfig(**d), near, far
