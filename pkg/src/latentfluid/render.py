"""Differentiable particle-driven volume renderer.

Bridges particle states and images.  Points sampled along camera rays are
encoded against nearby particles (fictitious center, soft density, radial
deformation), a small MLP maps the encodings to emission/absorption
quantities, and a coarse-to-fine quadrature composites pixel colors over a
fixed background.  Every pixel is differentiable with respect to both the
particle positions and the renderer parameters.

Encodings consume only relative geometry (offsets, distances, and dot
products with the ray direction), so rendering is equivariant under a rigid
transform applied jointly to particles and cameras.  Samples with no
neighbor inside the support radius contribute exactly zero density, which
makes an empty scene reproduce the background bit for bit.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tape
from .errors import ContractViolation, SimulationDiverged
from .layers import MLP, Linear, positional_encoding
from .params import Adam, ParamStore, lr_exp_decay
from .seqio import CameraSpec
from .spatial import build_grid, query
from .tape import Tensor


@dataclass
class RenderConfig:
    """Geometry and sampling contract shared by every render call."""

    particle_radius: float = 0.025
    support_scale: float = 3.0      # encoding radius r_s = support_scale * particle_radius
    cap: int = 20                   # neighbor cap K; also the fixed 1/K normalizer
    coarse_scale: float = 1.3       # coarse branch scales both radius and cap by this
    n_coarse: int = 64
    n_fine: int = 128
    near: float = 0.3
    far: float = 3.0
    scene_scale: float = 1.0        # length normalizer for the encoding scalars
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    trunk_width: int = 128
    trunk_depth: int = 4
    feat_width: int = 64
    n_freq_ep: int = 10
    n_freq_ed: int = 4

    @property
    def support_radius(self) -> float:
        return self.support_scale * self.particle_radius

    def branch(self, coarse: bool) -> tuple[float, int]:
        """(radius, cap) for the requested sampling branch."""
        if coarse:
            return self.support_radius * self.coarse_scale, int(round(self.cap * self.coarse_scale))
        return self.support_radius, self.cap


# -- cameras --------------------------------------------------------------------


def look_at(position, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world transform for a camera at `position` facing `target`.

    OpenGL convention: the camera looks along its local -z axis.
    """
    p = np.asarray(position, dtype=np.float64)
    z = p - np.asarray(target, dtype=np.float64)
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise ContractViolation("look_at: camera position coincides with the target")
    z = z / nz
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise ContractViolation("look_at: up direction is parallel to the view axis")
    x = x / nx
    c2w = np.eye(4)
    c2w[:3, 0] = x
    c2w[:3, 1] = np.cross(z, x)
    c2w[:3, 2] = z
    c2w[:3, 3] = p
    return c2w


def hemisphere_cameras(
    n_views: int,
    center,
    distance: float,
    focal: float,
    width: int,
    height: int,
    seed: int = 0,
    elevation: tuple[float, float] = (15.0, 75.0),
) -> list[CameraSpec]:
    """Viewpoints sampled uniform-in-area on an upper-hemisphere band.

    Azimuth is uniform; sin(elevation) is uniform between the band limits,
    which is the area-uniform law on the sphere.  Deterministic per seed.
    """
    if n_views < 1:
        raise ContractViolation(f"hemisphere_cameras: need at least one view, got {n_views}")
    rng = np.random.default_rng(seed)
    c = np.asarray(center, dtype=np.float64)
    lo, hi = (math.radians(e) for e in elevation)
    cams = []
    for _ in range(n_views):
        az = rng.uniform(0.0, 2.0 * math.pi)
        el = math.asin(rng.uniform(math.sin(lo), math.sin(hi)))
        offset = np.array(
            [math.cos(el) * math.cos(az), math.sin(el), math.cos(el) * math.sin(az)]
        )
        cams.append(CameraSpec(look_at(c + distance * offset, c), float(focal), width, height))
    return cams


def camera_rays(cam: CameraSpec) -> tuple[np.ndarray, np.ndarray]:
    """Rays through all pixel centers, row-major.  Returns (origins, unit dirs)."""
    c2w = np.asarray(cam.c2w, dtype=np.float64)
    xs = (np.arange(cam.width) + 0.5 - cam.width / 2.0) / cam.focal
    ys = -(np.arange(cam.height) + 0.5 - cam.height / 2.0) / cam.focal
    dx, dy = np.meshgrid(xs, ys)
    d_cam = np.stack([dx, dy, -np.ones_like(dx)], axis=-1).reshape(-1, 3)
    d = d_cam @ c2w[:3, :3].T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(c2w[:3, 3], d.shape).copy()
    return o, d


# -- depth sampling ---------------------------------------------------------------


def stratified_depths(
    rng: np.random.Generator, n_rays: int, n_samples: int, near: float, far: float, jitter: bool = True
) -> np.ndarray:
    """One depth per equal-width bin of [near, far), uniform within the bin."""
    if not (0.0 <= near < far):
        raise ContractViolation(f"stratified_depths: need 0 <= near < far, got [{near}, {far}]")
    u = rng.uniform(size=(n_rays, n_samples)) if jitter else np.full((n_rays, n_samples), 0.5)
    width = (far - near) / n_samples
    return near + (np.arange(n_samples)[None, :] + u) * width


def sample_pdf(
    rng: np.random.Generator, depths: np.ndarray, weights: np.ndarray, n_fine: int, far: float
) -> np.ndarray:
    """Importance depths from the piecewise-constant pdf the weights define.

    Bin i spans [depths[i], depths[i+1]) with the last bin closed by `far`,
    matching the quadrature segments.  Works on detached weights: the draw is
    a constant with respect to the graph.
    """
    n_rays, n_bins = depths.shape
    w = np.asarray(weights, dtype=np.float64) + 1e-5
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((n_rays, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    edges = np.concatenate([depths, np.full((n_rays, 1), far)], axis=1)
    u = (np.arange(n_fine)[None, :] + rng.uniform(size=(n_rays, n_fine))) / n_fine
    # per-row searchsorted: shift each row into a disjoint band so one flat
    # call resolves all rays
    off = 2.0 * np.arange(n_rays)[:, None]
    flat = np.searchsorted((cdf + off).ravel(), (u + off).ravel(), side="right")
    bins = flat.reshape(n_rays, n_fine) - np.arange(n_rays)[:, None] * (n_bins + 1)
    bins = np.clip(bins, 1, n_bins) - 1
    rows = np.arange(n_rays)[:, None]
    c0 = cdf[rows, bins]
    span = np.maximum(cdf[rows, bins + 1] - c0, 1e-12)
    e0 = edges[rows, bins]
    return e0 + (u - c0) / span * (edges[rows, bins + 1] - e0)


# -- particle encoding ------------------------------------------------------------


@dataclass
class SampleEncoding:
    """Per-sample particle context, flattened over (ray, sample).

    ep holds the view-independent scalars [p_rel . dhat, |p_rel|, sigma_p / K,
    v_D / r_s] with lengths divided by scene_scale, where p_rel is the
    fictitious particle center accumulated as an offset from the sample
    position (K-normalized weighted sum of neighbor offsets).  ed holds the
    view-dependent scalars [d_c . dhat, depth / far].  occupancy flags samples
    with at least one neighbor; density is only ever produced there.
    """

    ep: Tensor
    ed: Tensor
    occupancy: np.ndarray
    n_rays: int
    n_samples: int


def encode_samples(
    positions, origins: np.ndarray, dirs: np.ndarray, depths: np.ndarray, cfg: RenderConfig, coarse: bool = False
) -> SampleEncoding:
    """Encode every ray sample against the particles within the support radius.

    The ball query keeps at most `cap` nearest particles; sums are normalized
    by the fixed cap K rather than the neighbor count.  Samples with zero
    neighbors get d_c equal to the ray direction (the zero offset leaves only
    the t * dhat term) and are flagged unoccupied.  Differentiable w.r.t.
    `positions`.
    """
    pos = tape.as_tensor(positions)
    if pos.value.ndim != 2 or pos.value.shape[1] != 3:
        raise ContractViolation(f"encode_samples expects (N, 3) positions, got {pos.value.shape}")
    if origins.shape != dirs.shape or origins.ndim != 2 or origins.shape[1] != 3:
        raise ContractViolation("encode_samples: origins and dirs must both be (R, 3)")
    if np.abs(np.linalg.norm(dirs, axis=1) - 1.0).max() > 1e-6:
        raise ContractViolation("encode_samples: ray directions must be unit length")
    n_rays, n_samples = depths.shape
    if n_rays != origins.shape[0]:
        raise ContractViolation(
            f"encode_samples: {origins.shape[0]} rays but depths for {n_rays}"
        )
    radius, cap = cfg.branch(coarse)
    n_flat = n_rays * n_samples
    x = (origins[:, None, :] + depths[:, :, None] * dirs[:, None, :]).reshape(n_flat, 3)
    dirs_s = np.repeat(dirs, n_samples, axis=0)

    if pos.value.shape[0]:
        nbrs = query(build_grid(pos.value, radius), x, cap=cap)
        qid, idx = nbrs.query_ids(), nbrs.indices
    else:
        qid = idx = np.zeros(0, dtype=np.int64)
    occ = (np.bincount(qid, minlength=n_flat) > 0).astype(np.float64).reshape(n_flat, 1)

    # canonical physical pair order: sums come out identical for any particle
    # labeling or query order
    rel_v = pos.value[idx] - x[qid]
    order = np.lexsort((idx, rel_v[:, 2], rel_v[:, 1], rel_v[:, 0], qid))
    qid, idx = qid[order], idx[order]

    p_i = tape.gather(pos, idx)
    rel = tape.sub(p_i, x[qid])
    d = tape.sqrt(tape.maximum(tape.tsum(tape.mul(rel, rel), axis=1, keepdims=True), 1e-24))
    w = tape.maximum(tape.sub(1.0, tape.power(tape.mul(d, 1.0 / radius), 3.0)), 0.0)

    # the fictitious center is accumulated as an offset from the sample point
    # (not as an absolute position): only relative geometry may enter, or a
    # joint rigid transform of particles and cameras would change the pixels
    inv_k = 1.0 / cap
    sigma_p = tape.scatter_add(w, qid, n_flat)
    p_rel = tape.mul(tape.scatter_add(tape.mul(w, rel), qid, n_flat), inv_k)
    d_mean = tape.mul(tape.scatter_add(d, qid, n_flat), inv_k)
    dev = tape.absval(tape.sub(d, tape.gather(d_mean, qid)))
    v_d = tape.mul(tape.scatter_add(dev, qid, n_flat), inv_k)

    proj = tape.tsum(tape.mul(p_rel, dirs_s), axis=1, keepdims=True)
    p_norm = tape.sqrt(tape.maximum(tape.tsum(tape.mul(p_rel, p_rel), axis=1, keepdims=True), 1e-24))
    ep = tape.concat(
        [
            tape.mul(proj, 1.0 / cfg.scene_scale),
            tape.mul(p_norm, 1.0 / cfg.scene_scale),
            tape.mul(sigma_p, inv_k),
            tape.mul(v_d, 1.0 / radius),
        ],
        axis=1,
    )

    # direction from the ray origin to the fictitious center: t * dhat plus the
    # rotating offset; with zero neighbors this is exactly the ray direction
    to_c = tape.add(p_rel, depths.reshape(n_flat, 1) * dirs_s)
    to_norm = tape.sqrt(tape.maximum(tape.tsum(tape.mul(to_c, to_c), axis=1, keepdims=True), 1e-24))
    d_c = tape.div(to_c, to_norm)
    ed = tape.concat(
        [
            tape.tsum(tape.mul(d_c, dirs_s), axis=1, keepdims=True),
            tape.as_tensor(depths.reshape(n_flat, 1) / cfg.far),
        ],
        axis=1,
    )
    return SampleEncoding(ep, ed, occ, n_rays, n_samples)


# -- appearance fields ------------------------------------------------------------


class RadianceField:
    """MLP appearance model mapping sample encodings to (density, color).

    Trunk consumes the positionally encoded view-independent scalars (relu,
    one skip connection); a softplus head emits density and a sigmoid head
    emits color after mixing in the encoded view-dependent scalars.  The raw
    sample position is deliberately not an input.
    """

    def __init__(self, store: ParamStore, name: str, cfg: RenderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d_ep = 2 * cfg.n_freq_ep * 4
        d_ed = 2 * cfg.n_freq_ed * 2
        widths = [d_ep] + [cfg.trunk_width] * cfg.trunk_depth
        skips = (2,) if cfg.trunk_depth > 2 else ()
        self.trunk = MLP(store, f"{name}.trunk", widths, rng, activation="relu",
                         output_activation="relu", skips=skips)
        self.sigma_head = Linear(store, f"{name}.sigma", cfg.trunk_width, 1, rng)
        self.feat = Linear(store, f"{name}.feat", cfg.trunk_width, cfg.feat_width, rng)
        self.color1 = Linear(store, f"{name}.color1", cfg.feat_width + d_ed, cfg.feat_width, rng)
        self.color2 = Linear(store, f"{name}.color2", cfg.feat_width, 3, rng)

    def __call__(self, enc: SampleEncoding) -> tuple[Tensor, Tensor]:
        h = self.trunk(positional_encoding(enc.ep, self.cfg.n_freq_ep))
        sigma = tape.softplus(self.sigma_head(h))
        mixed = tape.concat([self.feat(h), positional_encoding(enc.ed, self.cfg.n_freq_ed)], axis=1)
        color = tape.sigmoid(self.color2(tape.relu(self.color1(mixed))))
        return sigma, color


class ReferenceField:
    """Analytic appearance standing in for a ground-truth renderer.

    Density is proportional to the soft particle density; color is a smooth,
    view-dependent function of the encoding scalars.  Used to synthesize
    observations and pretraining targets; emits constants (no gradient path).
    """

    def __init__(self, gain: float = 40.0):
        self.gain = gain

    def __call__(self, enc: SampleEncoding) -> tuple[Tensor, Tensor]:
        u, e = enc.ep.value, enc.ed.value
        sigma = self.gain * u[:, 2:3]
        color = np.stack(
            [
                0.5 + 0.35 * np.sin(2.0 * u[:, 0] + e[:, 0]),
                0.5 + 0.35 * np.cos(1.5 * u[:, 1] + 0.5 * e[:, 1]),
                0.5 + 0.35 * np.sin(u[:, 2] - u[:, 3] + 0.7 * e[:, 0]),
            ],
            axis=1,
        )
        return tape.as_tensor(sigma), tape.as_tensor(color)


Field = Callable[[SampleEncoding], tuple[Tensor, Tensor]]


@dataclass
class Renderer:
    store: ParamStore
    cfg: RenderConfig
    coarse: Field
    fine: Field


def build_renderer(store: ParamStore, cfg: RenderConfig, rng: np.random.Generator) -> Renderer:
    """Fresh coarse and fine fields under "renderer.coarse." / "renderer.fine."."""
    return Renderer(
        store,
        cfg,
        RadianceField(store, "renderer.coarse", cfg, rng),
        RadianceField(store, "renderer.fine", cfg, rng),
    )


def reference_renderer(cfg: RenderConfig, gain: float = 40.0) -> Renderer:
    field = ReferenceField(gain)
    return Renderer(ParamStore(), cfg, field, field)


# -- quadrature -------------------------------------------------------------------


def quadrature(sigma: Tensor, color: Tensor, depths: np.ndarray, far: float, background) -> tuple[Tensor, Tensor]:
    """Emission-absorption compositing along each ray over a fixed background.

    sigma is (R, S), color (R, S, 3), depths (R, S) ascending with far past the
    last sample.  Weights T_i * (1 - exp(-sigma_i delta_i)) are nonnegative by
    construction and telescope so their sum plus the background transmittance
    is 1 up to roundoff.  Returns (pixels (R, 3), weights (R, S)).
    """
    n_rays, n_samples = depths.shape
    if sigma.value.shape != (n_rays, n_samples):
        raise ContractViolation(
            f"quadrature: sigma shape {sigma.value.shape} does not match depths {depths.shape}"
        )
    delta = np.diff(np.concatenate([depths, np.full((n_rays, 1), far)], axis=1), axis=1)
    if (delta < 0.0).any():
        raise ContractViolation("quadrature: depths must be ascending and bounded by far")
    sd = tape.mul(sigma, delta)
    alpha = tape.neg(tape.expm1(tape.neg(sd)))
    trans = tape.exp(tape.neg(tape.sub(tape.cumsum(sd, axis=1), sd)))
    weights = tape.mul(trans, alpha)
    fg = tape.tsum(tape.mul(tape.reshape(weights, (n_rays, n_samples, 1)), color), axis=1)
    t_bg = tape.exp(tape.neg(tape.tsum(sd, axis=1, keepdims=True)))
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (n_rays, 3))
    return tape.add(fg, tape.mul(t_bg, bg)), weights


# -- ray rendering ----------------------------------------------------------------


@dataclass
class RenderResult:
    coarse: Tensor            # (R, 3) pixels
    fine: Tensor              # (R, 3) pixels
    weights_coarse: Tensor    # (R, n_coarse)
    weights_fine: Tensor      # (R, n_coarse + n_fine)
    depths_coarse: np.ndarray
    depths_fine: np.ndarray


def _field_eval(field: Field, enc: SampleEncoding) -> tuple[Tensor, Tensor]:
    """Evaluate a field on occupied samples only, scattering back zeros elsewhere.

    Unoccupied samples get exactly zero density, which both guarantees the
    empty-scene-renders-background invariant and skips the MLP on empty space.
    """
    occupied = np.nonzero(enc.occupancy[:, 0])[0]
    n_flat = enc.occupancy.shape[0]
    if occupied.size == n_flat:
        return field(enc)
    if occupied.size == 0:
        return tape.as_tensor(np.zeros((n_flat, 1))), tape.as_tensor(np.zeros((n_flat, 3)))
    sub = SampleEncoding(
        tape.gather(enc.ep, occupied),
        tape.gather(enc.ed, occupied),
        np.ones((occupied.size, 1)),
        enc.n_rays,
        enc.n_samples,
    )
    sigma, color = field(sub)
    return tape.scatter_add(sigma, occupied, n_flat), tape.scatter_add(color, occupied, n_flat)


def render_rays(
    renderer: Renderer,
    positions,
    origins: np.ndarray,
    dirs: np.ndarray,
    rng: np.random.Generator | None = None,
    depths: tuple[np.ndarray, np.ndarray] | None = None,
    background=None,
) -> RenderResult:
    """Two-pass render of a ray batch.

    The coarse pass samples stratified depths; the fine pass re-evaluates the
    sorted union of coarse depths and importance draws from the detached
    coarse weights.  `depths`, when given, pins the (coarse, fine) depths and
    removes every rng draw, which the gradient checks rely on (resampling is
    detached, so finite differences need fixed sample locations).
    """
    cfg = renderer.cfg
    n_rays = origins.shape[0]
    bg = cfg.background if background is None else background
    if depths is None:
        if rng is None:
            raise ContractViolation("render_rays: need an rng when depths are not pinned")
        t_coarse = stratified_depths(rng, n_rays, cfg.n_coarse, cfg.near, cfg.far)
    else:
        t_coarse = np.asarray(depths[0], dtype=np.float64)
    enc_c = encode_samples(positions, origins, dirs, t_coarse, cfg, coarse=True)
    sigma_c, color_c = _field_eval(renderer.coarse, enc_c)
    s_c = t_coarse.shape[1]
    pix_c, w_c = quadrature(
        tape.reshape(sigma_c, (n_rays, s_c)),
        tape.reshape(color_c, (n_rays, s_c, 3)),
        t_coarse, cfg.far, bg,
    )
    if depths is None:
        t_imp = sample_pdf(rng, t_coarse, w_c.value, cfg.n_fine, cfg.far)
        t_fine = np.sort(np.concatenate([t_coarse, t_imp], axis=1), axis=1)
    else:
        t_fine = np.asarray(depths[1], dtype=np.float64)
    enc_f = encode_samples(positions, origins, dirs, t_fine, cfg, coarse=False)
    sigma_f, color_f = _field_eval(renderer.fine, enc_f)
    s_f = t_fine.shape[1]
    pix_f, w_f = quadrature(
        tape.reshape(sigma_f, (n_rays, s_f)),
        tape.reshape(color_f, (n_rays, s_f, 3)),
        t_fine, cfg.far, bg,
    )
    return RenderResult(pix_c, pix_f, w_c, w_f, t_coarse, t_fine)


def render_image(renderer: Renderer, positions, cam: CameraSpec, seed: int = 0, chunk: int = 2048) -> np.ndarray:
    """Full image from the fine branch, chunked over rays.  Deterministic per seed."""
    origins, dirs = camera_rays(cam)
    rng = np.random.default_rng(seed)
    out = np.empty((origins.shape[0], 3))
    with tape.no_grad():
        for lo in range(0, origins.shape[0], chunk):
            res = render_rays(renderer, positions, origins[lo:lo + chunk], dirs[lo:lo + chunk], rng=rng)
            out[lo:lo + chunk] = res.fine.value
    return out.reshape(cam.height, cam.width, 3)


# -- losses -----------------------------------------------------------------------


def photometric_loss(pred, target) -> Tensor:
    """Mean squared error over RGB for a matched ray batch."""
    p = tape.as_tensor(pred)
    t = np.asarray(target, dtype=np.float64)
    if p.value.shape != t.shape:
        raise ContractViolation(
            f"photometric_loss: prediction {p.value.shape} vs target {t.shape}"
        )
    diff = tape.sub(p, t)
    return tape.tmean(tape.mul(diff, diff))


def psnr(mse: float) -> float:
    return -10.0 * math.log10(max(float(mse), 1e-12))


# -- training ---------------------------------------------------------------------


@dataclass
class RenderTrainConfig:
    iters: int = 2000
    batch_rays: int = 1024
    lr: float = 3e-4
    lr_gamma: float = 0.1          # exponential decay factor reached at the last iter
    n_views: int = 20
    n_eval_views: int = 2          # extra held-out views for PSNR rows
    focal: float = 75.0
    width: int = 64
    height: int = 64
    camera_distance: float = 1.5
    camera_seed: int = 0
    seed: int = 0
    log_every: int = 50
    eval_every: int = 0            # 0 disables held-out PSNR evaluation
    eval_rays: int = 512


def _fit_renderer(
    renderer: Renderer,
    next_batch: Callable[[np.random.Generator], tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]],
    eval_batch: Callable[[], tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] | None,
    cfg: RenderTrainConfig,
    log_path,
    stage: str,
) -> list[dict]:
    """Shared Adam loop: MSE on both branches against per-batch target pixels.

    next_batch returns (positions, origins, dirs, target_pixels) for one
    iteration; eval_batch, when present, supplies a fixed held-out batch for
    PSNR rows.
    """
    store = renderer.store
    opt = Adam(store, cfg.lr, names=store.names("renderer."))
    rng = np.random.default_rng(cfg.seed)
    records: list[dict] = []
    log_file = open(log_path, "w") if log_path else None
    try:
        for it in range(cfg.iters):
            t0 = time.perf_counter()
            positions, origins, dirs, target = next_batch(rng)
            res = render_rays(renderer, positions, origins, dirs, rng=rng)
            loss = tape.add(photometric_loss(res.coarse, target), photometric_loss(res.fine, target))
            if not np.isfinite(loss.value):
                raise SimulationDiverged(f"renderer loss is not finite at iteration {it}")
            store.zero_grad()
            tape.backward(loss)
            lr = lr_exp_decay(cfg.lr, it, cfg.iters, cfg.lr_gamma)
            opt.step(lr=lr)
            rec = {
                "iter": it,
                "loss": float(loss.value),
                "lr": lr,
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            }
            if cfg.eval_every and eval_batch and (it % cfg.eval_every == 0 or it == cfg.iters - 1):
                e_pos, e_o, e_d, e_target = eval_batch()
                with tape.no_grad():
                    e_res = render_rays(renderer, e_pos, e_o, e_d, rng=np.random.default_rng(cfg.seed))
                rec["psnr"] = psnr(float(photometric_loss(e_res.fine, e_target).value))
            if it % cfg.log_every == 0 or it == cfg.iters - 1 or "psnr" in rec:
                records.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
                    log_file.flush()
    finally:
        if log_file:
            log_file.close()
    store.metadata["stage"] = stage
    return records


def pretrain_renderer(
    renderer: Renderer,
    scenes: Sequence[np.ndarray],
    cfg: RenderTrainConfig,
    log_path=None,
    reference: Renderer | None = None,
) -> list[dict]:
    """Fit the renderer to reference-field images of multiple particle scenes.

    Per iteration one scene, one view, and a ray batch are drawn; the target
    pixels come from the reference renderer on the same rays so no image set
    has to be materialized.  Held-out views (never trained on) feed the PSNR
    rows when eval_every is set.
    """
    if not scenes:
        raise ContractViolation("pretrain_renderer needs at least one particle scene")
    scenes = [np.asarray(s, dtype=np.float64) for s in scenes]
    for i, s in enumerate(scenes):
        if s.ndim != 2 or s.shape[1] != 3 or s.shape[0] == 0:
            raise ContractViolation(f"pretrain_renderer: scene {i} must be nonempty (N, 3)")
    ref = reference_renderer(renderer.cfg) if reference is None else reference
    rays = []
    eval_rays = []
    for i, s in enumerate(scenes):
        cams = hemisphere_cameras(
            cfg.n_views + cfg.n_eval_views, s.mean(axis=0), cfg.camera_distance,
            cfg.focal, cfg.width, cfg.height, seed=cfg.camera_seed + i,
        )
        rays.append([camera_rays(c) for c in cams[: cfg.n_views]])
        eval_rays.append([camera_rays(c) for c in cams[cfg.n_views:]])

    def next_batch(rng: np.random.Generator):
        si = int(rng.integers(0, len(scenes)))
        origins, dirs = rays[si][int(rng.integers(0, cfg.n_views))]
        pick = rng.choice(origins.shape[0], size=min(cfg.batch_rays, origins.shape[0]), replace=False)
        o, d = origins[pick], dirs[pick]
        with tape.no_grad():
            target = render_rays(ref, scenes[si], o, d, rng=rng).fine.value
        return scenes[si], o, d, target

    eval_fixed = None
    if cfg.eval_every and cfg.n_eval_views:
        ev_rng = np.random.default_rng(cfg.seed + 7919)
        origins, dirs = eval_rays[0][0]
        pick = ev_rng.choice(origins.shape[0], size=min(cfg.eval_rays, origins.shape[0]), replace=False)
        with tape.no_grad():
            target = render_rays(ref, scenes[0], origins[pick], dirs[pick], rng=ev_rng).fine.value
        eval_fixed = (scenes[0], origins[pick], dirs[pick], target)

    return _fit_renderer(
        renderer, next_batch, (lambda: eval_fixed) if eval_fixed else None, cfg, log_path, "R"
    )


def warmup_renderer(
    renderer: Renderer,
    positions: np.ndarray,
    images: Sequence[np.ndarray],
    cams: Sequence[CameraSpec],
    cfg: RenderTrainConfig,
    log_path=None,
) -> list[dict]:
    """Refit the renderer on observed images of one particle state.

    Ray targets are gathered straight from the image pixels (row-major, the
    camera_rays order).  Used before posterior inference so the appearance
    matches the observed scene.
    """
    if len(images) != len(cams) or not images:
        raise ContractViolation(
            f"warmup_renderer: {len(images)} images for {len(cams)} cameras"
        )
    positions = np.asarray(positions, dtype=np.float64)
    rays = [camera_rays(c) for c in cams]
    pixels = []
    for i, (img, cam) in enumerate(zip(images, cams)):
        img = np.asarray(img, dtype=np.float64)
        if img.shape != (cam.height, cam.width, 3):
            raise ContractViolation(
                f"warmup_renderer: image {i} is {img.shape}, camera expects "
                f"({cam.height}, {cam.width}, 3)"
            )
        pixels.append(img.reshape(-1, 3))

    def next_batch(rng: np.random.Generator):
        vi = int(rng.integers(0, len(rays)))
        origins, dirs = rays[vi]
        pick = rng.choice(origins.shape[0], size=min(cfg.batch_rays, origins.shape[0]), replace=False)
        return positions, origins[pick], dirs[pick], pixels[vi][pick]

    return _fit_renderer(renderer, next_batch, None, cfg, log_path, "R-warm")
