"""Visual-scene learning: posterior inference, prior adaptation, novel simulation.

Given multi-view observations of a fluid, a pretrained transition model and a
pretrained renderer, the full procedure is: estimate the initial particle
state from frame 1, warm the renderer up on that frame, freeze simulator and
renderer weights, then

* stage B attaches a trainable Gaussian (mu_i, sigma_i) to every particle and
  optimizes it by resampling z each step, advancing one transition step and
  backpropagating a rendered ray batch's photometric error; the update runs
  per time step, so gradients are truncated at the previous state, and
* stage C freezes those posteriors and finetunes only the prior branch so
  that its per-step predictive distribution matches them (KL term) while the
  prior-driven rollout keeps rendering the observations (photometric term).

With the adapted prior the simulator runs on novel geometries where no
per-particle posterior exists.  Heterogeneous scenes clone the prior branch
once per fluid group; the transition model stays shared.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from . import tape
from .errors import ContractViolation, SimulationDiverged
from .params import Adam, ParamStore, lr_cosine
from .render import Renderer, camera_rays, photometric_loss, render_rays
from .scenes import BoundarySet
from .seqio import CameraSpec
from .simnet import EncoderState, LatentField, SimulatorNet, gaussian_kl, rollout
from .sph import Sequence
from .tape import Tensor

# parameter name prefixes: theta drives particles, psi infers their latents
THETA_PREFIXES = ("transition.",)
PSI_PREFIXES = ("encoder.", "prior.")


def _names(store: ParamStore, prefixes) -> list[str]:
    out: list[str] = []
    for p in prefixes:
        out.extend(store.names(p))
    return out


def theta_checksum(store: ParamStore) -> str:
    return store.clone_subset("transition.").checksum()


# -- observations -----------------------------------------------------------------


@dataclass
class ViewSet:
    """Multi-view image sequence from fixed calibrated cameras."""

    images: np.ndarray  # (T, V, H, W, 3) in [0, 1]
    cams: list[CameraSpec]

    def validate(self) -> None:
        img = np.asarray(self.images, dtype=np.float64)
        if img.ndim != 5 or img.shape[4] != 3:
            raise ContractViolation(f"ViewSet images must be (T, V, H, W, 3), got {img.shape}")
        if img.shape[1] != len(self.cams):
            raise ContractViolation(
                f"ViewSet has {img.shape[1]} image views but {len(self.cams)} cameras"
            )
        for v, cam in enumerate(self.cams):
            if img.shape[2:4] != (cam.height, cam.width):
                raise ContractViolation(
                    f"view {v}: images are {img.shape[2:4]}, camera expects "
                    f"({cam.height}, {cam.width})"
                )
        self.images = img

    @property
    def n_frames(self) -> int:
        return self.images.shape[0]

    def flat_rays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All rays across views: origins, dirs (V*H*W, 3), targets (T, V*H*W, 3)."""
        origins, dirs = [], []
        for cam in self.cams:
            o, d = camera_rays(cam)
            origins.append(o)
            dirs.append(d)
        t = self.images.shape[0]
        return (
            np.concatenate(origins),
            np.concatenate(dirs),
            self.images.reshape(t, -1, 3),
        )


# -- the visual posterior -----------------------------------------------------------


@dataclass
class VisualPosterior:
    """Trainable per-particle (or per-group) Gaussian latents, plus optional
    trainable initial velocities.

    In "global" mode one (mu, sigma) row is shared by all particles of a
    fluid group, so the parameter count is groups x 2L regardless of N."""

    store: ParamStore
    mode: str
    group_ids: np.ndarray
    latent_width: int

    @classmethod
    def create(
        cls,
        n_particles: int,
        latent_width: int,
        mode: str = "per-particle",
        group_ids: np.ndarray | None = None,
        seed: int = 0,
        mean_scale: float = 0.5,
        init_std: float = 0.5,
        optimize_velocities: bool = False,
        init_velocities: np.ndarray | None = None,
    ) -> "VisualPosterior":
        if mode not in ("per-particle", "global"):
            raise ContractViolation(f"unknown posterior mode {mode!r}")
        gid = np.zeros(n_particles, dtype=np.int64) if group_ids is None else np.asarray(group_ids, dtype=np.int64)
        if gid.shape != (n_particles,):
            raise ContractViolation(f"group ids shape {gid.shape}, expected ({n_particles},)")
        n_groups = int(gid.max()) + 1 if n_particles else 0
        if sorted(set(gid.tolist())) != list(range(n_groups)):
            raise ContractViolation("group ids must be contiguous from 0")
        rows = n_groups if mode == "global" else n_particles
        rng = np.random.default_rng(seed)
        store = ParamStore()
        store.param("visual.mean", mean_scale * rng.standard_normal((rows, latent_width)))
        store.param("visual.log_std", np.full((rows, latent_width), np.log(init_std)))
        if optimize_velocities:
            v0 = np.zeros((n_particles, 3)) if init_velocities is None else np.asarray(init_velocities, dtype=np.float64)
            store.param("visual.velocity", v0.copy())
        return cls(store, mode, gid, latent_width)

    @property
    def n_particles(self) -> int:
        return self.group_ids.shape[0]

    @property
    def n_groups(self) -> int:
        return int(self.group_ids.max()) + 1

    @property
    def param_count(self) -> int:
        return sum(t.value.size for t in (self.store[n] for n in self.store.names("visual.")))

    def field(self) -> LatentField:
        """Per-particle latent distribution as a differentiable expression."""
        mean = self.store["visual.mean"]
        log_std = self.store["visual.log_std"]
        if self.mode == "global":
            mean = tape.gather(mean, self.group_ids)
            log_std = tape.gather(log_std, self.group_ids)
        std = tape.exp(log_std)
        return LatentField(mean=mean, std=std, log_std=log_std)

    def frozen_field(self) -> LatentField:
        """Constant copy of the current distribution (stage-C target)."""
        f = self.field()
        return LatentField(
            mean=tape.as_tensor(f.mean.value.copy()),
            std=tape.as_tensor(f.std.value.copy()),
            log_std=tape.as_tensor(f.log_std.value.copy()),
        )

    def initial_velocities(self) -> Tensor | None:
        if "visual.velocity" in self.store.entries:
            return self.store["visual.velocity"]
        return None


# -- stage B: visual posterior inference ----------------------------------------------


@dataclass
class StageBConfig:
    epochs: int = 25
    rays_per_step: int = 128
    lr: float = 3e-2
    lr_schedule: str = "cosine"     # paper-scale uses cosine annealing
    mode: str = "per-particle"
    mean_scale: float = 0.5
    init_std: float = 0.5
    optimize_velocities: bool = False
    seed: int = 0
    log_every: int = 20


def _pick_rays(rng, n_total: int, n_want: int) -> np.ndarray:
    return rng.choice(n_total, size=min(n_want, n_total), replace=False)


def _step_lr(schedule: str, base: float, it: int, total: int) -> float:
    if schedule == "cosine":
        # anneal to ~0 only at one past the final step, not on it
        return lr_cosine(base, it, max(1, total))
    if schedule == "constant":
        return base
    raise ContractViolation(f"unknown lr schedule {schedule!r}")


def stage_b(
    net: SimulatorNet,
    renderer: Renderer,
    views: ViewSet,
    positions0: np.ndarray,
    velocities0: np.ndarray,
    boundary: BoundarySet,
    cfg: StageBConfig,
    group_ids: np.ndarray | None = None,
    log_path=None,
) -> tuple[VisualPosterior, list[dict]]:
    """Optimize per-particle latent Gaussians against the observed frames.

    Simulator and renderer weights are read but never written: only the
    posterior's own parameters receive optimizer updates.  Each update
    handles one time step (sample z, advance, render a ray batch), and the
    advanced state is carried forward by value, per the truncated scheme.
    """
    views.validate()
    if views.n_frames < 2:
        raise ContractViolation(f"stage B needs at least 2 observed frames, got {views.n_frames}")
    n = positions0.shape[0]
    post = VisualPosterior.create(
        n, net.config.latent_width, mode=cfg.mode, group_ids=group_ids, seed=cfg.seed,
        mean_scale=cfg.mean_scale, init_std=cfg.init_std,
        optimize_velocities=cfg.optimize_velocities,
        init_velocities=velocities0 if cfg.optimize_velocities else None,
    )
    origins, dirs, targets = views.flat_rays()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(post.store, cfg.lr, names=post.store.names("visual."))
    total = cfg.epochs * (views.n_frames - 1)
    records: list[dict] = []
    log_file = open(log_path, "w") if log_path else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            pos: np.ndarray | Tensor = positions0
            vel: np.ndarray | Tensor = velocities0
            v0 = post.initial_velocities()
            if v0 is not None:
                vel = v0  # first transition of the epoch sees the trainable velocities
            for t in range(1, views.n_frames):
                t0 = time.perf_counter()
                z = post.field().draw(rng)
                pos_t, vel_t = net.transition(pos, vel, z, boundary)
                pick = _pick_rays(rng, origins.shape[0], cfg.rays_per_step)
                res = render_rays(renderer, pos_t, origins[pick], dirs[pick], rng=rng)
                loss = tape.add(
                    photometric_loss(res.coarse, targets[t, pick]),
                    photometric_loss(res.fine, targets[t, pick]),
                )
                if not np.isfinite(loss.value):
                    raise SimulationDiverged(f"stage B loss is not finite at step {step}")
                post.store.zero_grad()
                tape.backward(loss)
                opt.step(lr=_step_lr(cfg.lr_schedule, cfg.lr, step, total))
                pos, vel = pos_t.value, vel_t.value
                if step % cfg.log_every == 0 or step == total - 1:
                    rec = {"step": step, "epoch": epoch, "frame": t, "loss": float(loss.value),
                           "wall_ms": (time.perf_counter() - t0) * 1e3}
                    records.append(rec)
                    if log_file:
                        log_file.write(json.dumps(rec) + "\n")
                        log_file.flush()
                step += 1
    finally:
        if log_file:
            log_file.close()
    return post, records


# -- stage C: physical prior adaptation ----------------------------------------------


@dataclass
class StageCConfig:
    epochs: int = 25
    rays_per_step: int = 128
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    kl_scale: float = 0.01          # beta in the adaptation objective
    seed: int = 0
    log_every: int = 20


def clone_prior_learner(net: SimulatorNet) -> SimulatorNet:
    """Fresh network whose weights copy `net`; used as an independent prior
    learner for one fluid group.  Only its latent branch is ever consulted;
    particle transitions always run through the shared base network."""
    store = ParamStore()
    clone = SimulatorNet(net.config, store, np.random.default_rng(0))
    store.copy_values_from(net.store)
    return clone


def _detached(state: EncoderState) -> EncoderState:
    return EncoderState(
        hidden=tape.as_tensor(state.hidden.value),
        prev_mean=tape.as_tensor(state.prev_mean.value),
    )


def stage_c(
    net: SimulatorNet,
    posterior: VisualPosterior,
    renderer: Renderer,
    views: ViewSet,
    positions0: np.ndarray,
    velocities0: np.ndarray,
    boundary: BoundarySet,
    cfg: StageCConfig,
    learners: list[SimulatorNet] | None = None,
) -> list[dict]:
    """Adapt the prior branch toward the frozen visual posterior.

    Rollout latents come from the prior itself (reparameterized draws, so
    the photometric term reaches psi through the sample); the loss adds
    kl_scale * KL(posterior || prior) averaged over particles.  Updates are
    per time step with the recurrent state carried across steps by value.
    Only the latent-branch parameters of each learner are optimized; the
    transition weights and the renderer are left untouched.
    """
    views.validate()
    if views.n_frames < 2:
        raise ContractViolation(f"stage C needs at least 2 observed frames, got {views.n_frames}")
    learners = [net] if learners is None else learners
    n_groups = posterior.n_groups
    if len(learners) != n_groups:
        raise ContractViolation(
            f"{len(learners)} prior learners for {n_groups} fluid groups"
        )
    n = positions0.shape[0]
    target = posterior.frozen_field()
    masks = [(posterior.group_ids == g).astype(np.float64) for g in range(n_groups)]
    origins, dirs, targets = views.flat_rays()
    rng = np.random.default_rng(cfg.seed)
    opts = [Adam(ln.store, cfg.lr, names=_names(ln.store, PSI_PREFIXES)) for ln in learners]
    total = cfg.epochs * (views.n_frames - 1)
    records: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        pos, vel = positions0, velocities0
        states = [ln.init_state(n) for ln in learners]
        for t in range(1, views.n_frames):
            t0 = time.perf_counter()
            z = None
            kl = None
            for g, ln in enumerate(learners):
                states[g], dist = ln.prior_step(states[g], pos, vel, boundary)
                part = tape.mul(dist.draw(rng), masks[g].reshape(-1, 1))
                z = part if z is None else tape.add(z, part)
                kl_g = tape.mul(gaussian_kl(target, dist), masks[g])
                kl = kl_g if kl is None else tape.add(kl, kl_g)
            kl_mean = tape.mul(tape.tsum(kl), 1.0 / n)
            pos_t, vel_t = net.transition(pos, vel, z, boundary)
            pick = _pick_rays(rng, origins.shape[0], cfg.rays_per_step)
            res = render_rays(renderer, pos_t, origins[pick], dirs[pick], rng=rng)
            photo = tape.add(
                photometric_loss(res.coarse, targets[t, pick]),
                photometric_loss(res.fine, targets[t, pick]),
            )
            loss = tape.add(photo, tape.mul(kl_mean, cfg.kl_scale))
            if not np.isfinite(loss.value):
                raise SimulationDiverged(f"stage C loss is not finite at step {step}")
            for ln in learners:
                ln.store.zero_grad()
            tape.backward(loss)
            lr = _step_lr(cfg.lr_schedule, cfg.lr, step, total)
            for opt in opts:
                opt.step(lr=lr)
            pos, vel = pos_t.value, vel_t.value
            states = [_detached(s) for s in states]
            if step % cfg.log_every == 0 or step == total - 1:
                records.append({
                    "step": step, "epoch": epoch, "frame": t,
                    "loss": float(loss.value), "photo": float(photo.value),
                    "kl": float(kl_mean.value),
                    "wall_ms": (time.perf_counter() - t0) * 1e3,
                })
            step += 1
    return records


# -- novel-scene simulation -----------------------------------------------------------


def grouped_rollout(
    net: SimulatorNet,
    learners: list[SimulatorNet],
    group_ids: np.ndarray,
    positions: np.ndarray,
    velocities: np.ndarray,
    boundary: BoundarySet,
    steps: int,
    seed: int = 0,
    use_mean: bool = False,
) -> Sequence:
    """Prior-driven rollout where each fluid group draws latents from its own
    learner while the shared transition advances all particles together."""
    gid = np.asarray(group_ids, dtype=np.int64)
    n = positions.shape[0]
    if gid.shape != (n,):
        raise ContractViolation(f"group ids shape {gid.shape}, expected ({n},)")
    if int(gid.max()) + 1 != len(learners):
        raise ContractViolation(f"{len(learners)} learners for {int(gid.max()) + 1} groups")
    rng = np.random.default_rng(seed)
    masks = [(gid == g).astype(np.float64).reshape(-1, 1) for g in range(len(learners))]
    out_pos = [np.asarray(positions, dtype=np.float64)]
    out_vel = [np.asarray(velocities, dtype=np.float64)]
    with tape.no_grad():
        states = [ln.init_state(n) for ln in learners]
        pos, vel = out_pos[0], out_vel[0]
        for _ in range(steps):
            z = np.zeros((n, net.config.latent_width))
            for g, ln in enumerate(learners):
                states[g], dist = ln.prior_step(states[g], pos, vel, boundary)
                draw = dist.mean if use_mean else dist.draw(rng)
                z = z + draw.value * masks[g]
            pos_t, vel_t = net.transition(pos, vel, z, boundary)
            pos, vel = pos_t.value, vel_t.value
            out_pos.append(pos)
            out_vel.append(vel)
    return Sequence(np.stack(out_pos), np.stack(out_vel), net.config.frame_dt)


def simulate_novel(
    net: SimulatorNet,
    positions: np.ndarray,
    velocities: np.ndarray,
    boundary: BoundarySet,
    steps: int,
    n_samples: int = 10,
    seed: int = 0,
    learners: list[SimulatorNet] | None = None,
    group_ids: np.ndarray | None = None,
    use_mean: bool = False,
) -> list[Sequence]:
    """Independent prior-driven rollouts on a (possibly novel) scene.

    The scene is just data: new geometry or boundary shapes flow through the
    same code path.  Returns n_samples sequences differing only in the latent
    draws, for mean/std reporting against a reference."""
    window_p = np.asarray(positions, dtype=np.float64)[None]
    window_v = np.asarray(velocities, dtype=np.float64)[None]
    out = []
    for k in range(n_samples):
        if learners is None:
            out.append(rollout(net, window_p, window_v, boundary, steps,
                               latent_source="prior", seed=seed + k, use_mean=use_mean))
        else:
            gid = np.zeros(window_p.shape[1], dtype=np.int64) if group_ids is None else group_ids
            out.append(grouped_rollout(net, learners, gid, window_p[0], window_v[0],
                                       boundary, steps, seed=seed + k, use_mean=use_mean))
    return out
