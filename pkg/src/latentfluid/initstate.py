"""Initial particle state estimation from calibrated first-frame views.

A plain optimizable voxel grid (density + color, trilinearly interpolated) is
fit to the frame-1 images with the same emission-absorption quadrature the
particle renderer uses.  The fitted density is max-normalized and thresholded
into an occupancy grid, and fluid particles are laid out on a lattice at
number density 1/(2r)^3 inside the occupied voxels, with zero initial
velocities.

The grid starts near-transparent and the fit grows density where the images
demand it, which is the well-conditioned direction for a volumetric fit:
unobserved voxels receive no gradient and simply stay transparent.  Two
additions turn the fitted density into a solid occupancy:

* rays whose target pixel matches the background must be fully transparent,
  so their accumulated opacity is penalized (bg_reg).  The photometric term
  alone cannot see background-colored fog, and with an adaptive optimizer
  its noise-level gradients actively grow such fog.  Background rays never
  cross fluid, so the penalty cannot hurt it.
* an opaque fluid fits as a shell: its interior is invisible and stays
  transparent.  Occupancy is therefore completed geometrically as
  hull AND (dense OR occluded), where hull is the silhouette visual hull
  (voxels projecting to background in any view are dropped) and occluded
  marks voxels no camera can see through the fitted density.  Interiors are
  occluded from every view and come back; hull bulges in front of the fitted
  surface are visible yet transparent and are dropped.  A translucent fluid
  needs no completion (its interior fits directly) and passes through the
  dense branch.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tape
from .errors import ContractViolation, SimulationDiverged
from .params import Adam, ParamStore
from .render import RenderConfig, camera_rays, quadrature, stratified_depths
from .seqio import CameraSpec
from .tape import Tensor


@dataclass
class OccupancyGrid:
    """Axis-aligned boolean voxel grid; resolution is the array shape."""

    occupied: np.ndarray  # (n, n, n) bool
    lo: np.ndarray        # (3,) box corner
    hi: np.ndarray        # (3,) box corner

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.hi - self.lo) / np.array(self.occupied.shape)


@dataclass
class InitStateConfig:
    lo: tuple[float, float, float] = (0.0, 0.0, 0.0)
    hi: tuple[float, float, float] = (1.0, 1.0, 1.0)
    resolution: int = 32
    particle_radius: float = 0.025
    threshold: float = 0.5          # on max-normalized density
    min_peak_density: float = 1.0   # below this the scene counts as empty
    sigma_max: float = 100.0        # density head bound
    init_density_raw: float = -5.0  # start near-transparent and grow
    bg_reg: float = 1.0             # opacity penalty on background rays
    bg_tol: float = 0.02            # target-vs-background gap defining those rays
    visibility_opacity: float = 0.5  # a voxel reached below this is "seen"
    iters: int = 300
    batch_rays: int = 1024
    n_samples: int = 48             # depth samples per ray during the fit
    lr: float = 0.3
    seed: int = 0
    log_every: int = 50


@dataclass
class VoxelModel:
    store: ParamStore
    cfg: InitStateConfig

    @classmethod
    def create(cls, cfg: InitStateConfig) -> "VoxelModel":
        store = ParamStore()
        n3 = cfg.resolution ** 3
        store.param("initstate.density", np.full((n3, 1), cfg.init_density_raw))
        store.param("initstate.color", np.zeros((n3, 3)))
        return cls(store, cfg)


def trilinear_field(
    density: Tensor, color: Tensor, cfg: InitStateConfig, points: np.ndarray
) -> tuple[Tensor, Tensor]:
    """Trilinearly interpolated (sigma, color) at fixed world points.

    density is raw (n^3, 1), color raw (n^3, 3); grid values live at voxel
    centers.  Density uses a bounded sigma_max * sigmoid head, color a
    sigmoid head.  Points outside the box get exactly zero density (constant
    mask), so rays see empty space there.
    """
    n = cfg.resolution
    lo = np.asarray(cfg.lo, dtype=np.float64)
    hi = np.asarray(cfg.hi, dtype=np.float64)
    voxel = (hi - lo) / n
    g = (points - lo) / voxel - 0.5  # voxel-center coordinates
    inside = ((g >= 0.0) & (g <= n - 1)).all(axis=1).astype(np.float64).reshape(-1, 1)
    cell = np.clip(np.floor(g), 0, n - 2).astype(np.int64)
    frac = np.clip(g - cell, 0.0, 1.0)

    sig_raw: Tensor | None = None
    col_raw: Tensor | None = None
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                w = (wx * wy * wz).reshape(-1, 1)
                idx = ((cell[:, 0] + dx) * n + (cell[:, 1] + dy)) * n + (cell[:, 2] + dz)
                s = tape.mul(tape.gather(density, idx), w)
                c = tape.mul(tape.gather(color, idx), w)
                sig_raw = s if sig_raw is None else tape.add(sig_raw, s)
                col_raw = c if col_raw is None else tape.add(col_raw, c)
    sigma = tape.mul(tape.sigmoid(sig_raw), cfg.sigma_max * inside)
    return sigma, tape.sigmoid(col_raw)


def voxel_eval(model: VoxelModel, points: np.ndarray) -> tuple[Tensor, Tensor]:
    return trilinear_field(
        model.store["initstate.density"], model.store["initstate.color"], model.cfg, points
    )


def _render_voxel_rays(
    model: VoxelModel,
    origins: np.ndarray,
    dirs: np.ndarray,
    render_cfg: RenderConfig,
    rng: np.random.Generator,
) -> tuple[Tensor, Tensor]:
    n_rays = origins.shape[0]
    n_s = model.cfg.n_samples
    depths = stratified_depths(rng, n_rays, n_s, render_cfg.near, render_cfg.far)
    x = (origins[:, None, :] + depths[:, :, None] * dirs[:, None, :]).reshape(-1, 3)
    sigma, color = voxel_eval(model, x)
    return quadrature(
        tape.reshape(sigma, (n_rays, n_s)),
        tape.reshape(color, (n_rays, n_s, 3)),
        depths,
        render_cfg.far,
        render_cfg.background,
    )


def fit_voxel_model(
    model: VoxelModel,
    images: Sequence[np.ndarray],
    cams: Sequence[CameraSpec],
    render_cfg: RenderConfig,
    log_path=None,
) -> list[dict]:
    """Adam MSE fit of the voxel grid to the given views."""
    if not images or len(images) != len(cams):
        raise ContractViolation(f"fit_voxel_model: {len(images)} images for {len(cams)} cameras")
    origins, dirs, targets = [], [], []
    for i, (img, cam) in enumerate(zip(images, cams)):
        img = np.asarray(img, dtype=np.float64)
        if img.shape != (cam.height, cam.width, 3):
            raise ContractViolation(
                f"fit_voxel_model: image {i} is {img.shape}, camera expects "
                f"({cam.height}, {cam.width}, 3)"
            )
        o, d = camera_rays(cam)
        origins.append(o)
        dirs.append(d)
        targets.append(img.reshape(-1, 3))
    origins = np.concatenate(origins)
    dirs = np.concatenate(dirs)
    targets = np.concatenate(targets)

    cfg = model.cfg
    background = np.asarray(render_cfg.background, dtype=np.float64)
    is_bg = np.abs(targets - background).max(axis=1) < cfg.bg_tol
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.store, cfg.lr, names=model.store.names("initstate."))
    records: list[dict] = []
    log_file = open(log_path, "w") if log_path else None
    try:
        for it in range(cfg.iters):
            t0 = time.perf_counter()
            pick = rng.choice(
                origins.shape[0], size=min(cfg.batch_rays, origins.shape[0]), replace=False
            )
            pix, weights = _render_voxel_rays(model, origins[pick], dirs[pick], render_cfg, rng)
            diff = tape.sub(pix, targets[pick])
            # background rays must end fully transparent; the photometric
            # term is blind to background-colored fog
            opac = tape.tsum(weights, axis=1)
            loss = tape.add(
                tape.tmean(tape.mul(diff, diff)),
                tape.mul(tape.tmean(tape.mul(opac, is_bg[pick].astype(np.float64))), cfg.bg_reg),
            )
            if not np.isfinite(loss.value):
                raise SimulationDiverged(f"voxel fit loss is not finite at iteration {it}")
            model.store.zero_grad()
            tape.backward(loss)
            opt.step()
            if it % cfg.log_every == 0 or it == cfg.iters - 1:
                rec = {
                    "iter": it,
                    "loss": float(loss.value),
                    "wall_ms": (time.perf_counter() - t0) * 1e3,
                }
                records.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
                    log_file.flush()
    finally:
        if log_file:
            log_file.close()
    return records


def visual_hull(
    images: Sequence[np.ndarray],
    cams: Sequence[CameraSpec],
    cfg: InitStateConfig,
    background,
) -> np.ndarray:
    """(n, n, n) bool: voxel centers inside every view's non-background mask.

    Masks are dilated by one pixel so soft silhouette edges do not carve
    real surface voxels; out-of-frame and behind-camera projections count as
    unseen and are kept.
    """
    from scipy.ndimage import binary_dilation

    n = cfg.resolution
    lo = np.asarray(cfg.lo, dtype=np.float64)
    hi = np.asarray(cfg.hi, dtype=np.float64)
    voxel = (hi - lo) / n
    ii = (np.arange(n) + 0.5) * voxel[0] + lo[0]
    jj = (np.arange(n) + 0.5) * voxel[1] + lo[1]
    kk = (np.arange(n) + 0.5) * voxel[2] + lo[2]
    gx, gy, gz = np.meshgrid(ii, jj, kk, indexing="ij")
    centers = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    background = np.asarray(background, dtype=np.float64)

    hull = np.ones(centers.shape[0], dtype=bool)
    for img, cam in zip(images, cams):
        img = np.asarray(img, dtype=np.float64)
        mask = binary_dilation(np.abs(img - background).max(axis=2) > cfg.bg_tol)
        rot = cam.c2w[:3, :3]
        p_cam = (centers - cam.c2w[:3, 3]) @ rot
        depth = -p_cam[:, 2]
        seen = depth > 1e-9
        with np.errstate(divide="ignore", invalid="ignore"):
            col = np.rint(cam.focal * p_cam[:, 0] / depth + cam.width / 2 - 0.5).astype(np.int64)
            row = np.rint(-cam.focal * p_cam[:, 1] / depth + cam.height / 2 - 0.5).astype(np.int64)
        seen &= (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
        hull[seen] &= mask[row[seen], col[seen]]
    return hull.reshape(n, n, n)


def _density_grid(model: VoxelModel) -> np.ndarray:
    from scipy.special import expit

    n = model.cfg.resolution
    raw = model.store["initstate.density"].value.reshape(n, n, n)
    return model.cfg.sigma_max * expit(raw)


def _occluded_everywhere(
    model: VoxelModel, candidates: np.ndarray, cams: Sequence[CameraSpec]
) -> np.ndarray:
    """For each candidate voxel center: can no camera see it through the
    fitted density?  Accumulates opacity along the camera-to-voxel segment
    (nearest-voxel sampling); a voxel reached with opacity below
    visibility_opacity counts as seen."""
    cfg = model.cfg
    if candidates.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    sigma = _density_grid(model)
    lo = np.asarray(cfg.lo, dtype=np.float64)
    hi = np.asarray(cfg.hi, dtype=np.float64)
    voxel = (hi - lo) / cfg.resolution
    margin = float(voxel.max())
    n_steps = 3 * cfg.resolution
    occluded = np.ones(candidates.shape[0], dtype=bool)
    for cam in cams:
        origin = cam.c2w[:3, 3]
        to_v = candidates - origin
        dist = np.linalg.norm(to_v, axis=1, keepdims=True)
        direction = to_v / dist
        span = np.maximum(dist - margin, 0.0)
        frac = (np.arange(n_steps) + 0.5) / n_steps
        pts = origin + direction[:, None, :] * (span[:, None] * frac[None, :, None])
        cell = np.floor((pts - lo) / voxel).astype(np.int64)
        inside = ((cell >= 0) & (cell < cfg.resolution)).all(axis=2)
        cell = np.clip(cell, 0, cfg.resolution - 1)
        sig = np.where(inside, sigma[cell[..., 0], cell[..., 1], cell[..., 2]], 0.0)
        tau = sig.sum(axis=1) * (span[:, 0] / n_steps)
        occluded &= -np.expm1(-tau) >= cfg.visibility_opacity
    return occluded


def occupancy_from_model(
    model: VoxelModel,
    hull: np.ndarray | None = None,
    cams: Sequence[CameraSpec] | None = None,
) -> OccupancyGrid:
    """Fitted density -> boolean occupancy.

    Base rule: max-normalized density above the threshold.  The peak must
    clear an absolute floor first: an all-transparent fit would otherwise
    still normalize its argmax voxel to 1.  With a hull, occupancy becomes
    hull AND (dense OR occluded): cams are needed for the occlusion test,
    which restores invisible fluid interiors that the fit left transparent.
    """
    cfg = model.cfg
    n = cfg.resolution
    density = _density_grid(model)
    peak = density.max()
    empty_msg = (
        f"estimated occupancy is empty (peak density {peak:.3g}); adjust the "
        f"occupancy threshold (currently {cfg.threshold}) or check the input views"
    )
    if peak < cfg.min_peak_density:
        raise ContractViolation(empty_msg)
    dense = density / peak > cfg.threshold
    if hull is None:
        occupied = dense
    else:
        occupied = dense & hull
        candidates = hull & ~dense
        if cams is not None and candidates.any():
            lo = np.asarray(cfg.lo, dtype=np.float64)
            hi = np.asarray(cfg.hi, dtype=np.float64)
            voxel = (hi - lo) / n
            idx = np.argwhere(candidates)
            centers = lo + (idx + 0.5) * voxel
            occ_flags = _occluded_everywhere(model, centers, cams)
            occupied[idx[occ_flags, 0], idx[occ_flags, 1], idx[occ_flags, 2]] = True
    if not occupied.any():
        raise ContractViolation(empty_msg)
    return OccupancyGrid(occupied, np.asarray(cfg.lo, float), np.asarray(cfg.hi, float))


def particles_from_occupancy(
    grid: OccupancyGrid, particle_radius: float, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Lattice particles at number density 1/(2r)^3 inside occupied voxels.

    A global lattice with pitch 2r and a seeded origin jitter is intersected
    with the occupied voxels, giving exactly the prescribed density and a
    deterministic result per seed.  Velocities are zero.
    """
    pitch = 2.0 * particle_radius
    rng = np.random.default_rng(seed)
    offset = grid.lo + rng.uniform(0.0, pitch, size=3)
    counts = np.floor((grid.hi - offset) / pitch).astype(np.int64) + 1
    if (counts <= 0).any():
        raise ContractViolation("particles_from_occupancy: box is smaller than the particle spacing")
    axes = [offset[a] + pitch * np.arange(counts[a]) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    vox = np.floor((pts - grid.lo) / grid.voxel_size).astype(np.int64)
    n = np.array(grid.occupied.shape)
    ok = ((vox >= 0) & (vox < n)).all(axis=1)
    pts, vox = pts[ok], vox[ok]
    keep = grid.occupied[vox[:, 0], vox[:, 1], vox[:, 2]]
    pts = pts[keep]
    if pts.shape[0] == 0:
        raise ContractViolation(
            "particles_from_occupancy: no lattice points fall inside the occupied voxels"
        )
    return pts, np.zeros_like(pts)


@dataclass
class EstimatedState:
    positions: np.ndarray
    velocities: np.ndarray
    occupancy: OccupancyGrid
    fit_records: list[dict]


def estimate_initial_state(
    images: Sequence[np.ndarray],
    cams: Sequence[CameraSpec],
    cfg: InitStateConfig,
    render_cfg: RenderConfig,
    log_path=None,
) -> EstimatedState:
    """Frame-1 views -> fitted occupancy -> lattice particle state at rest.

    Deterministic per cfg.seed (fit batching, depth sampling, and the lattice
    jitter all derive from it).
    """
    model = VoxelModel.create(cfg)
    records = fit_voxel_model(model, images, cams, render_cfg, log_path=log_path)
    hull = visual_hull(images, cams, cfg, render_cfg.background)
    grid = occupancy_from_model(model, hull=hull, cams=cams)
    positions, velocities = particles_from_occupancy(grid, cfg.particle_radius, seed=cfg.seed)
    return EstimatedState(positions, velocities, grid, records)
