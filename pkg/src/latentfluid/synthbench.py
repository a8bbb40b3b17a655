"""Synthetic self-consistency benchmarks for the visual learning stages.

The observed scene is manufactured by the system itself: a hidden constant
latent vector per fluid group drives the pretrained transition model to
produce ground-truth particle trajectories, and the pretrained renderer turns
those into multi-view images.  Inference quality is then measurable directly
against the hidden truth at desk scale: a posterior fit from the images
should roll out closer to the true particles than its random initialization,
and a prior adapted to that posterior should transfer the improvement to a
held-out geometry the stages never saw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .errors import ContractViolation
from .metrics import metric_dbar
from .pipeline import VisualPosterior, ViewSet, simulate_novel
from .render import Renderer, hemisphere_cameras, render_image
from .scenes import BlockSpec, BoundaryGeometry, BoundarySet, boundary_particles, sample_scene
from .seqio import CameraSpec
from .simnet import SceneData, SimulatorNet, rollout
from .sph import Sequence


def latent_rollout(
    net: SimulatorNet,
    positions0: np.ndarray,
    velocities0: np.ndarray,
    boundary: BoundarySet,
    z_values: np.ndarray,
    steps: int,
) -> Sequence:
    """Deterministic trajectory under a fixed per-particle latent field."""
    z = np.asarray(z_values, dtype=np.float64)
    return rollout(
        net, positions0[None], velocities0[None], boundary, steps,
        latent_source="posterior-field", visual_field=(z, np.zeros_like(z)),
        use_mean=True,
    )


def render_views(renderer: Renderer, seq: Sequence, cams: list[CameraSpec], seed: int = 0) -> ViewSet:
    """Images of every frame from every camera; deterministic per seed."""
    images = np.stack([
        np.stack([render_image(renderer, seq.positions[t], cam, seed=seed) for cam in cams])
        for t in range(seq.positions.shape[0])
    ])
    views = ViewSet(images, cams)
    views.validate()
    return views


def hidden_latents(
    net: SimulatorNet,
    positions: np.ndarray,
    velocities: np.ndarray,
    boundary: BoundarySet,
    n_groups: int,
    seed: int = 0,
    spread: float = 1.0,
) -> np.ndarray:
    """(n_groups, L) hidden target latents, in-distribution for the net.

    Each group's vector is the prior's own mean response on the initial state
    plus a seeded offset scaled by the prior's typical std, so the resulting
    dynamics stay plausible for the pretrained transition model while
    remaining unknown to the inference stages."""
    rng = np.random.default_rng(seed)
    with tape.no_grad():
        state = net.init_state(positions.shape[0])
        _, dist = net.prior_step(state, positions, velocities, boundary)
    base = dist.mean.value.mean(axis=0)
    scale = spread * dist.std.value.mean()
    return base + scale * rng.standard_normal((n_groups, base.shape[0]))


# -- benchmark scenes ---------------------------------------------------------------


@dataclass
class BenchScene:
    """One synthetic scene: truth plus (for observed scenes) rendered views."""

    truth: Sequence
    boundary: BoundarySet
    group_ids: np.ndarray
    z_star: np.ndarray            # (N, L) hidden per-particle latents
    views: ViewSet | None = None

    @property
    def positions0(self) -> np.ndarray:
        return self.truth.positions[0]

    @property
    def velocities0(self) -> np.ndarray:
        return self.truth.velocities[0]


@dataclass
class BenchmarkConfig:
    particle_radius: float = 0.025
    box: tuple[float, float, float] = (1.0, 1.0, 1.0)
    block_extent: tuple[float, float, float] = (0.18, 0.18, 0.18)
    n_frames: int = 12              # observed frames including t=1
    n_views: int = 4
    image_size: int = 48
    focal_scale: float = 1.1        # focal = focal_scale * image_size
    camera_distance: float = 1.3
    camera_seed: int = 11
    latent_seed: int = 7
    latent_spread: float = 1.0
    scene_seed: int = 21
    holdout_seed: int = 22
    render_seed: int = 0


def _scene_particles(cfg: BenchmarkConfig, n_blocks: int, seed: int):
    geom = BoundaryGeometry(box_min=(0.0, 0.0, 0.0), box_max=cfg.box)
    blocks = [
        BlockSpec(shape="cuboid", extent=cfg.block_extent, rotation="none",
                  scale_range=(1.0, 1.0), speed_range=(0.0, 0.0), jitter=0.3)
        for _ in range(n_blocks)
    ]
    scene = sample_scene(blocks, geom, cfg.particle_radius, seed=seed)
    bnd = boundary_particles(geom, spacing=2.0 * cfg.particle_radius)
    return scene, bnd


def make_benchmark(
    net: SimulatorNet,
    renderer: Renderer,
    cfg: BenchmarkConfig,
    n_blocks: int = 1,
    render_observed: bool = True,
) -> tuple[BenchScene, BenchScene]:
    """(observed, held_out) scenes driven by the same hidden latents.

    The held-out scene re-samples block placement under a different seed, so
    its geometry differs while the hidden physics (z*) is unchanged; its
    views are never rendered because only particle-space metrics use it."""
    observed_scene, bnd = _scene_particles(cfg, n_blocks, cfg.scene_seed)
    z_groups = hidden_latents(
        net, observed_scene.positions, observed_scene.velocities, bnd,
        n_groups=n_blocks, seed=cfg.latent_seed, spread=cfg.latent_spread,
    )

    def build(scene, with_views: bool) -> BenchScene:
        z_star = z_groups[scene.group_ids]
        truth = latent_rollout(
            net, scene.positions, scene.velocities, bnd, z_star, steps=cfg.n_frames - 1
        )
        views = None
        if with_views:
            size = cfg.image_size
            cams = hemisphere_cameras(
                cfg.n_views, center=tuple(0.5 * np.asarray(cfg.box)),
                distance=cfg.camera_distance, focal=cfg.focal_scale * size,
                width=size, height=size, seed=cfg.camera_seed,
            )
            views = render_views(renderer, truth, cams, seed=cfg.render_seed)
        return BenchScene(truth, bnd, scene.group_ids.copy(), z_star, views)

    observed = build(observed_scene, render_observed)
    holdout_scene, _ = _scene_particles(cfg, n_blocks, cfg.holdout_seed)
    held_out = build(holdout_scene, False)
    return observed, held_out


# -- evaluation glue ----------------------------------------------------------------


def posterior_rollout_dbar(
    net: SimulatorNet,
    posterior: VisualPosterior,
    scene: BenchScene,
    n_samples: int = 5,
    seed: int = 0,
) -> float:
    """Mean d-bar of rollouts driven by samples from a visual posterior."""
    f = posterior.field()
    mu, sigma = f.mean.value, f.std.value
    vals = []
    for k in range(n_samples):
        pred = rollout(
            net, scene.positions0[None], scene.velocities0[None], scene.boundary,
            steps=scene.truth.positions.shape[0] - 1,
            latent_source="posterior-field", visual_field=(mu, sigma), seed=seed + k,
        )
        vals.append(metric_dbar(scene.truth.positions, pred.positions))
    return float(np.mean(vals))


def prior_rollout_dbar(
    net: SimulatorNet,
    scene: BenchScene,
    n_samples: int = 10,
    seed: int = 0,
    learners=None,
) -> tuple[float, float]:
    """(mean, std) d-bar of prior-driven rollouts on a benchmark scene."""
    preds = simulate_novel(
        net, scene.positions0, scene.velocities0, scene.boundary,
        steps=scene.truth.positions.shape[0] - 1, n_samples=n_samples, seed=seed,
        learners=learners, group_ids=scene.group_ids if learners else None,
    )
    vals = np.array([metric_dbar(scene.truth.positions, p.positions) for p in preds])
    return float(vals.mean()), float(vals.std())


def one_step_error(net: SimulatorNet, scenes: list[SceneData], seed: int = 0) -> float:
    """Posterior-teacher-forced one-step prediction error d_{t+1}.

    For every interior frame the posterior branch (fed the target frame)
    provides the latent mean, the transition predicts the next state from
    the true current one, and the per-particle position error is averaged
    over frames and scenes."""
    if not scenes:
        raise ContractViolation("one_step_error needs at least one scene")
    errs = []
    with tape.no_grad():
        for scene in scenes:
            pos, vel = scene.sequence.positions, scene.sequence.velocities
            state = net.init_state(pos.shape[1])
            for t in range(pos.shape[0] - 1):
                state, q = net.posterior_step(state, pos[t + 1], vel[t + 1], scene.boundary)
                pred_pos, _ = net.transition(pos[t], vel[t], q.mean, scene.boundary)
                errs.append(float(np.linalg.norm(pred_pos.value - pos[t + 1], axis=1).mean()))
    return float(np.mean(errs))
