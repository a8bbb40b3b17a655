"""Probabilistic particle simulator with learnable latents.

A shared CConv feature encoder feeds two recurrent branches: a prior learner
that sees only past states and a posterior estimator that also sees the
prediction target.  Both emit diagonal-Gaussian latent fields over particles.
A deterministic transition net advances particles ballistically and applies
a learned correction conditioned on the latent sample.

Parameter groups carry the prefixes "encoder.", "prior.", "posterior." and
"transition." so pipeline stages can freeze or adapt branches independently.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from . import tape
from .errors import ContractViolation, SimulationDiverged
from .layers import CConv, GRUCell, Linear, neighbor_list, zero_hidden
from .params import Adam, ParamStore, lr_halving
from .scenes import BoundarySet
from .spatial import build_grid, neighbor_counts
from .sph import Sequence
from .tape import Tensor

_D2_EPS = 1e-24
_D2_EPS_Q = _D2_EPS**0.25


# -- configuration -----------------------------------------------------------


@dataclass
class SimNetConfig:
    particle_radius: float = 0.025
    latent_width: int = 8
    feature_width: int = 32
    hidden_width: int = 32
    kernel_k: int = 4
    frame_dt: float = 0.02
    gravity: tuple[float, float, float] = (0.0, -9.81, 0.0)
    conv_radius_scale: float = 4.5

    @property
    def radius(self) -> float:
        return self.conv_radius_scale * self.particle_radius


# -- latent field and recurrent state -----------------------------------------


@dataclass
class LatentField:
    """Per-particle diagonal Gaussian over the latent space."""

    mean: Tensor
    std: Tensor
    log_std: Tensor
    eps: np.ndarray | None = None
    sample: Tensor | None = None

    def draw(self, rng: np.random.Generator) -> Tensor:
        self.eps = rng.standard_normal(self.mean.value.shape)
        self.sample = self.mean + self.std * self.eps
        return self.sample


@dataclass
class EncoderState:
    hidden: Tensor
    prev_mean: Tensor


def gaussian_kl(q: LatentField, p: LatentField) -> Tensor:
    """KL(q || p) per particle, summed over latent dims.

    Written as 0.5 * ((dmu/sigma_p)^2 + expm1(2s) - 2s) with
    s = log sigma_q - log sigma_p: every addend is nonnegative in floating
    point, so the total can never dip below zero, and coinciding
    distributions give exactly 0."""
    dmu = (q.mean - p.mean) / p.std
    s = q.log_std - p.log_std
    per_dim = (dmu * dmu + (tape.expm1(2.0 * s) - 2.0 * s)) * 0.5
    return tape.tsum(per_dim, axis=1)


# -- the network ----------------------------------------------------------------


class SimulatorNet:
    def __init__(self, config: SimNetConfig, store: ParamStore, rng: np.random.Generator):
        self.config = config
        self.store = store
        c = config
        L, F, H, k = c.latent_width, c.feature_width, c.hidden_width, c.kernel_k
        fluid_in = 1 + 3 + L  # constant channel, velocity, latent-ish input
        bnd_in = 1 + 3  # constant channel, normal
        R = c.radius

        def conv(name, n_in, n_out, with_self=True, gain=1.0):
            return CConv(store, name, n_in, n_out, R, rng, k=k, with_self=with_self, gain=gain)

        self.enc_fluid1 = conv("encoder.block1_fluid", fluid_in, F)
        self.enc_bnd1 = conv("encoder.block1_boundary", bnd_in, F, with_self=False)
        self.enc2 = conv("encoder.block2", 2 * F, F)
        self.enc3 = conv("encoder.block3", F, F)

        self.gru = {
            "prior": GRUCell(store, "prior.gru", F, H, rng),
            "posterior": GRUCell(store, "posterior.gru", F, H, rng),
        }
        self.mean_head = {
            "prior": Linear(store, "prior.mean", H, L, rng),
            "posterior": Linear(store, "posterior.mean", H, L, rng),
        }
        self.std_head = {
            "prior": Linear(store, "prior.log_std", H, L, rng),
            "posterior": Linear(store, "posterior.log_std", H, L, rng),
        }

        self.trans_fluid1 = conv("transition.block1_fluid", fluid_in, F)
        self.trans_bnd1 = conv("transition.block1_boundary", bnd_in, F, with_self=False)
        self.trans2 = conv("transition.block2", 2 * F, F)
        self.trans3 = conv("transition.block3", F, F)
        self.trans4 = conv("transition.block4", F, 3, gain=0.01)

    # -- helpers ---------------------------------------------------------

    def init_state(self, n_particles: int) -> EncoderState:
        return EncoderState(
            hidden=zero_hidden(n_particles, self.config.hidden_width),
            prev_mean=zero_hidden(n_particles, self.config.latent_width),
        )

    @staticmethod
    def _boundary_features(boundary: BoundarySet) -> np.ndarray:
        nb = boundary.positions.shape[0]
        return np.concatenate([np.ones((nb, 1)), boundary.normals], axis=1)

    def encode_features(self, positions, velocities, boundary: BoundarySet, prev_latent_mean) -> Tensor:
        pos = tape.as_tensor(positions)
        vel = tape.as_tensor(velocities)
        pm = tape.as_tensor(prev_latent_mean)
        n = pos.value.shape[0]
        if vel.value.shape != (n, 3) or pm.value.shape != (n, self.config.latent_width):
            raise ContractViolation(
                f"encode_features shapes: positions {pos.value.shape}, velocities "
                f"{vel.value.shape}, prev mean {pm.value.shape}"
            )
        R = self.config.radius
        feats = tape.concat([tape.as_tensor(np.ones((n, 1))), vel, pm], axis=1)
        nbrs_ff = neighbor_list(pos.value, pos.value, R, exclude_self=True)
        nbrs_fb = neighbor_list(pos.value, boundary.positions, R)
        bfeat = self._boundary_features(boundary)
        h1 = tape.tanh(
            tape.concat(
                [
                    self.enc_fluid1(pos, pos, feats, nbrs_ff, feats),
                    self.enc_bnd1(pos, boundary.positions, bfeat, nbrs_fb),
                ],
                axis=1,
            )
        )
        h2 = tape.tanh(self.enc2(pos, pos, h1, nbrs_ff, h1))
        h3 = tape.tanh(self.enc3(pos, pos, h2, nbrs_ff, h2))
        return h3

    def _latent_step(self, branch: str, state: EncoderState, positions, velocities, boundary) -> tuple[EncoderState, LatentField]:
        feats = self.encode_features(positions, velocities, boundary, state.prev_mean)
        h = self.gru[branch](feats, state.hidden)
        mean = self.mean_head[branch](h)
        raw = self.std_head[branch](h)
        std = tape.softplus(raw) + 1e-4
        log_std = tape.log(std)
        dist = LatentField(mean=mean, std=std, log_std=log_std)
        return EncoderState(hidden=h, prev_mean=mean), dist

    def prior_step(self, state, positions, velocities, boundary) -> tuple[EncoderState, LatentField]:
        """Latent distribution conditioned on the past only (the psi branch)."""
        return self._latent_step("prior", state, positions, velocities, boundary)

    def posterior_step(self, state, positions, velocities, boundary) -> tuple[EncoderState, LatentField]:
        """Latent distribution that also sees the prediction target (xi branch)."""
        return self._latent_step("posterior", state, positions, velocities, boundary)

    def transition(self, positions, velocities, z, boundary: BoundarySet) -> tuple[Tensor, Tensor]:
        """Ballistic step under gravity plus a learned correction.

        p* = p + dt v + dt^2 g / 2;  p_hat = p* + correction(p*, v, z, boundary);
        v_hat = (p_hat - p) / dt."""
        pos = tape.as_tensor(positions)
        vel = tape.as_tensor(velocities)
        z = tape.as_tensor(z)
        n = pos.value.shape[0]
        if z.value.shape != (n, self.config.latent_width):
            raise ContractViolation(
                f"transition latent shape {z.value.shape}, expected ({n}, {self.config.latent_width})"
            )
        dt = self.config.frame_dt
        g = np.asarray(self.config.gravity)
        pstar = pos + vel * dt + g * (0.5 * dt * dt)

        R = self.config.radius
        feats = tape.concat([tape.as_tensor(np.ones((n, 1))), vel, z], axis=1)
        nbrs_ff = neighbor_list(pstar.value, pstar.value, R, exclude_self=True)
        nbrs_fb = neighbor_list(pstar.value, boundary.positions, R)
        bfeat = self._boundary_features(boundary)
        h1 = tape.relu(
            tape.concat(
                [
                    self.trans_fluid1(pstar, pstar, feats, nbrs_ff, feats),
                    self.trans_bnd1(pstar, boundary.positions, bfeat, nbrs_fb),
                ],
                axis=1,
            )
        )
        h2 = tape.relu(self.trans2(pstar, pstar, h1, nbrs_ff, h1))
        h3 = tape.relu(self.trans3(pstar, pstar, h2, nbrs_ff, h2))
        dp = self.trans4(pstar, pstar, h3, nbrs_ff, h3)
        pos_hat = pstar + dp
        vel_hat = (pos_hat - pos) * (1.0 / dt)
        return pos_hat, vel_hat


# -- stage-A loss ---------------------------------------------------------------


def neighbor_weights(positions: np.ndarray, radius: float, avg_count: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-particle loss weights w_i = exp(-n_i / c) from neighbor counts.

    Counts are taken on the raw position values (no gradient); c defaults to
    the mean count of this set when avg_count is not supplied."""
    pts = np.asarray(positions)
    counts = neighbor_counts(build_grid(pts, radius), pts, exclude_self=True).astype(np.float64)
    c = float(np.mean(counts)) if avg_count is None else float(avg_count)
    c = max(c, 1.0)
    return np.exp(-counts / c), counts


def weighted_recon(pred_positions: Tensor, true_positions: np.ndarray, weights: np.ndarray) -> Tensor:
    """mean_i w_i * ||p_hat_i - p_i||^0.5, exactly 0 at a perfect prediction.

    The gamma=0.5 distance is (d^2 + eps)^(1/4) - eps^(1/4): subtracting the
    plateau value keeps the term zero when d^2 = 0 while the epsilon keeps
    the gradient finite there."""
    diff = pred_positions - tape.as_tensor(true_positions)
    d2 = tape.tsum(diff * diff, axis=1)
    core = tape.power(d2 + _D2_EPS, 0.25) - _D2_EPS_Q
    return tape.tmean(tape.as_tensor(weights) * core)


def stage_a_loss(
    pred_positions: list[Tensor],
    true_positions: list[np.ndarray],
    posterior_dists: list[LatentField],
    prior_dists: list[LatentField],
    radius: float,
    kl_scale: float = 0.1,
    avg_count: float | None = None,
) -> dict:
    """Horizon-summed weighted reconstruction plus scaled KL.

    Returns tensors under "loss"/"recon"/"kl" and the scalar average neighbor
    count used for the weights under "avg_count"."""
    if not (len(pred_positions) == len(true_positions) == len(posterior_dists) == len(prior_dists)):
        raise ContractViolation("stage_a_loss: mismatched step counts")
    counts_all = []
    for pred, true in zip(pred_positions, true_positions):
        if pred.value.shape != np.asarray(true).shape:
            raise ContractViolation(
                f"stage_a_loss: prediction {pred.value.shape} vs target {np.asarray(true).shape}"
            )
        counts_all.append(
            neighbor_counts(build_grid(pred.value, radius), pred.value, exclude_self=True)
        )
    c = float(np.mean(np.concatenate(counts_all))) if avg_count is None else float(avg_count)
    c = max(c, 1.0)

    recon = tape.as_tensor(0.0)
    kl = tape.as_tensor(0.0)
    for pred, true, counts, q, p in zip(
        pred_positions, true_positions, counts_all, posterior_dists, prior_dists
    ):
        w = np.exp(-counts.astype(np.float64) / c)
        recon = recon + weighted_recon(pred, np.asarray(true), w)
        kl = kl + tape.tmean(gaussian_kl(q, p))
    loss = recon + kl_scale * kl
    return {"loss": loss, "recon": recon, "kl": kl, "avg_count": c}


# -- stage-A pretraining -----------------------------------------------------------


@dataclass
class StageAConfig:
    iters: int = 2000
    batch: int = 2
    lr: float = 1e-3
    n_input: int = 2
    horizon: int = 2
    kl_scale: float = 0.1
    seed: int = 0
    log_every: int = 10
    ckpt_every: int = 0
    lr_halve_every: int = 5000
    lr_halve_after: int = 25000


@dataclass
class SceneData:
    sequence: Sequence
    boundary: BoundarySet


def _window_losses(
    net: SimulatorNet,
    scene: SceneData,
    start: int,
    cfg: StageAConfig,
    rng: np.random.Generator,
) -> tuple[list[Tensor], list[np.ndarray], list[LatentField], list[LatentField]]:
    """Teacher-forced forward pass over one training window.

    The prior branch consumes true frames x_{t-1}; the posterior branch
    consumes the targets x_t; the transition consumes the running prediction."""
    seq, bnd = scene.sequence, scene.boundary
    pos, vel = seq.positions, seq.velocities
    n = pos.shape[1]
    prior_state = net.init_state(n)
    post_state = net.init_state(n)

    # warm up both recurrences on the input frames
    for t in range(start, start + cfg.n_input - 1):
        prior_state, _ = net.prior_step(prior_state, pos[t], vel[t], bnd)
        post_state, _ = net.posterior_step(post_state, pos[t + 1], vel[t + 1], bnd)

    last = start + cfg.n_input - 1
    prev_pos: Tensor | np.ndarray = pos[last]
    prev_vel: Tensor | np.ndarray = vel[last]
    preds, trues, qs, ps = [], [], [], []
    for t in range(last + 1, last + 1 + cfg.horizon):
        prior_state, p_dist = net.prior_step(prior_state, pos[t - 1], vel[t - 1], bnd)
        post_state, q_dist = net.posterior_step(post_state, pos[t], vel[t], bnd)
        z = q_dist.draw(rng)
        pred_pos, pred_vel = net.transition(prev_pos, prev_vel, z, bnd)
        preds.append(pred_pos)
        trues.append(pos[t])
        qs.append(q_dist)
        ps.append(p_dist)
        prev_pos, prev_vel = pred_pos, pred_vel
    return preds, trues, qs, ps


def stage_a_lr(cfg: StageAConfig, it: int) -> float:
    return lr_halving(cfg.lr, it, every=cfg.lr_halve_every, after=cfg.lr_halve_after)


def pretrain_simulator(
    net: SimulatorNet,
    scenes: list[SceneData],
    cfg: StageAConfig,
    log_path=None,
    ckpt_path=None,
) -> list[dict]:
    """Adam optimization of the stage-A loss over random scene windows."""
    if not scenes:
        raise ContractViolation("pretrain needs at least one scene")
    window = cfg.n_input + cfg.horizon
    for s in scenes:
        if s.sequence.positions.shape[0] < window:
            raise ContractViolation(
                f"scene with {s.sequence.positions.shape[0]} frames cannot fit a "
                f"window of {window}"
            )
    store = net.store
    opt = Adam(store, cfg.lr)
    pick_rng = np.random.default_rng(cfg.seed)
    draw_rng = np.random.default_rng(cfg.seed + 1)
    records: list[dict] = []
    log_file = open(log_path, "w") if log_path else None
    try:
        for it in range(cfg.iters):
            t0 = time.perf_counter()
            preds, trues, qs, ps = [], [], [], []
            for _ in range(cfg.batch):
                si = int(pick_rng.integers(0, len(scenes)))
                hi = scenes[si].sequence.positions.shape[0] - window
                start = int(pick_rng.integers(0, hi + 1))
                w_preds, w_trues, w_qs, w_ps = _window_losses(net, scenes[si], start, cfg, draw_rng)
                preds += w_preds
                trues += w_trues
                qs += w_qs
                ps += w_ps
            terms = stage_a_loss(preds, trues, qs, ps, net.config.radius, cfg.kl_scale)
            loss = terms["loss"] * (1.0 / cfg.batch)
            if not np.isfinite(loss.value):
                raise SimulationDiverged(f"stage A loss is not finite at iteration {it}")
            store.zero_grad()
            tape.backward(loss)
            lr = stage_a_lr(cfg, it)
            opt.step(lr=lr)
            rec = {
                "iter": it,
                "loss": float(loss.value),
                "recon": float(terms["recon"].value) / cfg.batch,
                "kl": float(terms["kl"].value) / cfg.batch,
                "lr": lr,
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            }
            if it % cfg.log_every == 0 or it == cfg.iters - 1:
                records.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
                    log_file.flush()
            if ckpt_path and cfg.ckpt_every and it and it % cfg.ckpt_every == 0:
                store.metadata["stage"] = "A"
                store.save(ckpt_path)
    finally:
        if log_file:
            log_file.close()
    if ckpt_path:
        store.metadata["stage"] = "A"
        store.save(ckpt_path)
    return records


# -- rollout -------------------------------------------------------------------


def rollout(
    net: SimulatorNet,
    window_positions: np.ndarray,
    window_velocities: np.ndarray,
    boundary: BoundarySet,
    steps: int,
    latent_source: str = "prior",
    seed: int = 0,
    use_mean: bool = False,
    visual_field: tuple[np.ndarray, np.ndarray] | None = None,
) -> Sequence:
    """Autoregressive prediction from an input window of true frames.

    Returns a Sequence whose first frame is the last input frame, followed by
    `steps` predicted frames.  latent_source picks where z_t comes from:
    "prior" (the psi branch, fed true inputs then its own predictions),
    "posterior-field" (a fixed per-particle Gaussian, e.g. estimated from
    video) or "zero"."""
    if latent_source not in ("prior", "posterior-field", "zero"):
        raise ContractViolation(f"unknown latent source {latent_source!r}")
    if latent_source == "posterior-field" and visual_field is None:
        raise ContractViolation("latent_source 'posterior-field' needs visual_field=(mean, std)")
    wpos = np.asarray(window_positions, dtype=np.float64)
    wvel = np.asarray(window_velocities, dtype=np.float64)
    if wpos.ndim != 3 or wpos.shape[0] < 1:
        raise ContractViolation(f"rollout window must be [T>=1, N, 3], got {wpos.shape}")
    n = wpos.shape[1]
    L = net.config.latent_width
    rng = np.random.default_rng(seed)

    out_pos = [wpos[-1]]
    out_vel = [wvel[-1]]
    with tape.no_grad():
        state = net.init_state(n)
        if latent_source == "prior":
            for t in range(wpos.shape[0] - 1):
                state, _ = net.prior_step(state, wpos[t], wvel[t], boundary)
        pos, vel = wpos[-1], wvel[-1]
        for _ in range(steps):
            if latent_source == "prior":
                state, dist = net.prior_step(state, pos, vel, boundary)
                z = dist.mean if use_mean else dist.draw(rng)
            elif latent_source == "posterior-field":
                mu, sigma = visual_field
                z = mu if use_mean else mu + sigma * rng.standard_normal((n, L))
            else:
                z = np.zeros((n, L))
            pos_t, vel_t = net.transition(pos, vel, z, boundary)
            pos = pos_t.value
            vel = vel_t.value
            out_pos.append(pos)
            out_vel.append(vel)
    return Sequence(np.stack(out_pos), np.stack(out_vel), net.config.frame_dt)
