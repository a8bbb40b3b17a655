"""Weakly compressible SPH ground-truth generator.

Design goals, in order: determinism (bitwise, given a scene), containment
(particle centers never leave the box margin), bounded energy, and monotone
response to the hidden physical parameters. Visual fidelity matters less at
this scale, so the scheme is deliberately plain:

  * cubic spline kernel, support = 4 * particle_radius (h = 2 * particle_radius)
  * summation density with clamped Tait pressure (gamma = 7, no tensile stress)
  * symmetric pressure acceleration
  * viscosity as XSPH velocity smoothing, coefficient monotone in nu
  * velocity Verlet with cached acceleration (free fall under constant gravity
    reproduces the closed-form displacement exactly)
  * walls and pillar handled by projection with damped reflection plus a soft
    penalty spring near contact

A fixed substep count per frame is raised automatically when the CFL estimate
demands it; the count is a deterministic function of the state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import backend, spatial
from .errors import ContractViolation, SimulationDiverged
from .scenes import Scene


@dataclass
class SimConfig:
    frame_dt: float = 0.02
    substeps: int = 4              # lower bound; CFL can raise the count per frame
    gravity: tuple[float, float, float] = (0.0, -9.81, 0.0)
    sound_speed: float = 8.0
    eos_gamma: float = 7.0
    cfl: float = 0.4
    restitution: float = 0.2       # wall-normal velocity kept after reflection
    penalty_stiffness: float = 4000.0   # 1/s^2, spring accel per meter of proximity
    xsph_scale: float = 2.2        # eps = clip(scale * nu, floor, cap)
    xsph_floor: float = 0.02
    xsph_cap: float = 0.9


@dataclass
class ParticleState:
    positions: np.ndarray   # (N, 3)
    velocities: np.ndarray  # (N, 3)

    def copy(self) -> "ParticleState":
        return ParticleState(self.positions.copy(), self.velocities.copy())


@dataclass
class Sequence:
    positions: np.ndarray   # (T, N, 3)
    velocities: np.ndarray  # (T, N, 3)
    frame_dt: float


class SPHSimulator:
    def __init__(self, scene: Scene, cfg: SimConfig | None = None):
        self.cfg = cfg or SimConfig()
        self.scene = scene
        r = scene.particle_radius
        if not (r > 0.0):
            raise ContractViolation(f"particle_radius must be positive, got {r}")
        self.h = 2.0 * r
        self.support = 4.0 * r
        dens = np.array([p.density for p in scene.params])
        visc = np.array([p.viscosity for p in scene.params])
        gid = scene.group_ids
        self.rho0 = dens[gid]
        self.mass = self.rho0 * (2.0 * r) ** 3
        self.k_eos = self.rho0 * self.cfg.sound_speed**2 / self.cfg.eos_gamma
        self.xsph_eps = np.clip(
            self.cfg.xsph_scale * visc[gid], self.cfg.xsph_floor, self.cfg.xsph_cap
        )
        self.gravity = np.asarray(self.cfg.gravity, dtype=np.float64)
        self.margin = r
        self._acc_cache: np.ndarray | None = None

    # -- force evaluation --------------------------------------------------

    def _pairs(self, pos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grid = spatial.build_grid(pos, self.support)
        nl = spatial.query(grid, pos, radius=self.support, exclude_self=True)
        return nl.query_ids(), nl.indices

    def _forces(self, pos: np.ndarray, vel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pi, pj = self._pairs(pos)
        rho = backend.sph_density(pos, self.mass, pi, pj, self.h)
        pres = np.maximum(
            0.0, self.k_eos * ((rho / self.rho0) ** self.cfg.eos_gamma - 1.0)
        )
        acc, dvel = backend.sph_accel(
            pos, vel, self.mass, rho, pres, pi, pj, self.h, self.xsph_eps
        )
        acc = acc + self.gravity[None, :]
        acc += self._penalty(pos)
        return acc, dvel

    def _penalty(self, pos: np.ndarray) -> np.ndarray:
        """Soft spring pushing particles off walls they are about to touch."""
        cfg = self.cfg
        b = self.scene.boundary
        d0 = 1.5 * self.margin
        acc = np.zeros_like(pos)
        bmin = np.asarray(b.box_min) + self.margin
        bmax = np.asarray(b.box_max) - self.margin
        acc += cfg.penalty_stiffness * np.maximum(0.0, (bmin + d0) - pos)
        acc -= cfg.penalty_stiffness * np.maximum(0.0, pos - (bmax - d0))
        if b.pillar_min is not None:
            pmin = np.asarray(b.pillar_min) - self.margin
            pmax = np.asarray(b.pillar_max) + self.margin
            inside = np.all((pos > pmin - d0) & (pos < pmax + d0), axis=1)
            if inside.any():
                p = pos[inside]
                # push along the axis with the smallest escape distance
                esc_lo = p - (pmin - d0)   # positive depth from each low face
                esc_hi = (pmax + d0) - p
                depth = np.minimum(esc_lo, esc_hi)
                axis = np.argmin(depth, axis=1)
                rows = np.arange(p.shape[0])
                sign = np.where(esc_lo[rows, axis] < esc_hi[rows, axis], -1.0, 1.0)
                add = np.zeros_like(p)
                add[rows, axis] = sign * cfg.penalty_stiffness * np.maximum(0.0, depth[rows, axis])
                full = np.zeros_like(pos)
                full[inside] = add
                acc += full
        return acc

    def _project(self, pos: np.ndarray, vel: np.ndarray) -> None:
        """Clamp centers into the allowed region; damp the outward velocity."""
        cfg = self.cfg
        b = self.scene.boundary
        bmin = np.asarray(b.box_min) + self.margin
        bmax = np.asarray(b.box_max) - self.margin
        for a in range(3):
            low = pos[:, a] < bmin[a]
            if low.any():
                pos[low, a] = bmin[a]
                going = vel[low, a] < 0.0
                v = vel[low, a]
                v[going] *= -cfg.restitution
                vel[low, a] = v
            high = pos[:, a] > bmax[a]
            if high.any():
                pos[high, a] = bmax[a]
                going = vel[high, a] > 0.0
                v = vel[high, a]
                v[going] *= -cfg.restitution
                vel[high, a] = v
        if b.pillar_min is not None:
            pmin = np.asarray(b.pillar_min) - self.margin
            pmax = np.asarray(b.pillar_max) + self.margin
            inside = np.all((pos > pmin) & (pos < pmax), axis=1)
            if inside.any():
                p = pos[inside]
                v = vel[inside]
                esc_lo = p - pmin
                esc_hi = pmax - p
                depth = np.minimum(esc_lo, esc_hi)
                axis = np.argmin(depth, axis=1)
                rows = np.arange(p.shape[0])
                to_low = esc_lo[rows, axis] < esc_hi[rows, axis]
                p[rows, axis] = np.where(to_low, pmin[axis], pmax[axis])
                vn = v[rows, axis]
                outward = np.where(to_low, vn > 0.0, vn < 0.0)
                vn = np.where(outward, -cfg.restitution * vn, vn)
                v[rows, axis] = vn
                pos[inside] = p
                vel[inside] = v

    # -- stepping ------------------------------------------------------------

    def _n_substeps(self, vel: np.ndarray) -> int:
        cfg = self.cfg
        vmax = float(np.sqrt((vel * vel).sum(axis=1).max())) if vel.size else 0.0
        dt_max = cfg.cfl * self.h / (cfg.sound_speed + vmax)
        need = int(math.ceil(cfg.frame_dt / dt_max))
        return max(cfg.substeps, need)

    def step_frame(self, state: ParticleState) -> ParticleState:
        pos = state.positions.copy()
        vel = state.velocities.copy()
        n_sub = self._n_substeps(vel)
        dt = self.cfg.frame_dt / n_sub
        if self._acc_cache is None or self._acc_cache.shape != pos.shape:
            self._acc_cache, _ = self._forces(pos, vel)
        acc = self._acc_cache
        for _ in range(n_sub):
            vh = vel + (0.5 * dt) * acc
            pos = pos + dt * vh
            self._project(pos, vh)
            acc, dvel = self._forces(pos, vh)
            vel = vh + (0.5 * dt) * acc + dvel
        self._acc_cache = acc
        return ParticleState(pos, vel)

    def run(self, n_frames: int) -> Sequence:
        if n_frames < 2:
            raise ContractViolation(f"a sequence needs at least 2 frames, got {n_frames}")
        n = self.scene.n_particles
        out_p = np.zeros((n_frames, n, 3))
        out_v = np.zeros((n_frames, n, 3))
        state = ParticleState(self.scene.positions.copy(), self.scene.velocities.copy())
        self._acc_cache = None
        out_p[0] = state.positions
        out_v[0] = state.velocities
        for t in range(1, n_frames):
            state = self.step_frame(state)
            if not (np.isfinite(state.positions).all() and np.isfinite(state.velocities).all()):
                raise SimulationDiverged(f"non-finite particle state at frame {t}")
            out_p[t] = state.positions
            out_v[t] = state.velocities
        return Sequence(out_p, out_v, self.cfg.frame_dt)


def step_sph(state: ParticleState, scene: Scene, cfg: SimConfig) -> ParticleState:
    """Advance one frame. Convenience wrapper for a fresh simulator."""
    sim = SPHSimulator(scene, cfg)
    return sim.step_frame(state)


def generate_sequence(scene: Scene, cfg: SimConfig, n_frames: int) -> Sequence:
    return SPHSimulator(scene, cfg).run(n_frames)


def kinetic_energy(vel: np.ndarray, mass: np.ndarray) -> float:
    return float(0.5 * (mass * (vel * vel).sum(axis=1)).sum())


def mechanical_energy(pos: np.ndarray, vel: np.ndarray, mass: np.ndarray, gravity) -> float:
    g = np.asarray(gravity, dtype=np.float64)
    pe = -(mass * (pos @ g)).sum()
    return kinetic_energy(vel, mass) + float(pe)
