"""Scene construction: fluid blocks, container geometry, boundary sampling.

A scene is one or more particle blocks (lattice-sampled shapes, optionally
rotated/scaled/translated) inside an axis-aligned box container, optionally
with a rectangular pillar obstacle. Every random draw goes through an
explicit numpy Generator so scenes are reproducible from a seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation


@dataclass(frozen=True)
class PhysicalParams:
    """Hidden physical properties of one fluid block."""

    density: float = 1000.0
    viscosity: float = 0.1

    def validate(self) -> None:
        if not (500.0 * 0.999 <= self.density <= 2000.0 * 1.001):
            raise ContractViolation(f"density {self.density} outside [500, 2000]")
        if not (0.01 * 0.999 <= self.viscosity <= 0.4 * 1.001):
            raise ContractViolation(f"viscosity {self.viscosity} outside [0.01, 0.4]")


@dataclass(frozen=True)
class BoundaryGeometry:
    """Axis-aligned box container, optionally with a rectangular pillar."""

    box_min: tuple[float, float, float] = (0.0, 0.0, 0.0)
    box_max: tuple[float, float, float] = (1.0, 1.0, 1.0)
    pillar_min: tuple[float, float, float] | None = None
    pillar_max: tuple[float, float, float] | None = None

    def as_dict(self) -> dict:
        d = {"box_min": list(self.box_min), "box_max": list(self.box_max)}
        if self.pillar_min is not None:
            d["pillar_min"] = list(self.pillar_min)
            d["pillar_max"] = list(self.pillar_max)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BoundaryGeometry":
        return cls(
            tuple(d["box_min"]),
            tuple(d["box_max"]),
            tuple(d["pillar_min"]) if "pillar_min" in d else None,
            tuple(d["pillar_max"]) if "pillar_max" in d else None,
        )


@dataclass
class BoundarySet:
    """Static boundary sample points with normals pointing into the fluid domain."""

    positions: np.ndarray  # (M, 3)
    normals: np.ndarray    # (M, 3), unit


@dataclass
class Scene:
    positions: np.ndarray        # (N, 3)
    velocities: np.ndarray       # (N, 3)
    group_ids: np.ndarray        # (N,) int64, block index per particle
    params: list[PhysicalParams]  # per block
    boundary: BoundaryGeometry
    particle_radius: float
    seed: int
    blocks: list[dict] = field(default_factory=list)  # descriptive metadata

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    def manifest(self) -> dict:
        return {
            "n_particles": int(self.n_particles),
            "particle_radius": self.particle_radius,
            "seed": self.seed,
            "boundary": self.boundary.as_dict(),
            "group_ids": self.group_ids.tolist(),
            "params": [
                {"density": p.density, "viscosity": p.viscosity} for p in self.params
            ],
            "blocks": self.blocks,
        }


def _axis_points(lo: float, hi: float, spacing: float) -> np.ndarray:
    n = int(round((hi - lo) / spacing)) + 1
    return np.linspace(lo, hi, n)


def boundary_particles(geom: BoundaryGeometry, spacing: float) -> BoundarySet:
    """Sample the container walls (and pillar, if any) on inclusive lattices.

    Each face is sampled independently, endpoints included, so box edges and
    corners carry one sample per adjacent face. Normals point into the fluid
    domain (inward for the container, outward for the pillar).
    """
    if not (spacing > 0.0):
        raise ContractViolation(f"boundary spacing must be positive, got {spacing}")
    bmin = np.asarray(geom.box_min, dtype=np.float64)
    bmax = np.asarray(geom.box_max, dtype=np.float64)
    pos_parts: list[np.ndarray] = []
    nrm_parts: list[np.ndarray] = []

    def add_face(axis: int, value: float, sign: float, lo: np.ndarray, hi: np.ndarray) -> None:
        other = [a for a in range(3) if a != axis]
        u = _axis_points(lo[other[0]], hi[other[0]], spacing)
        v = _axis_points(lo[other[1]], hi[other[1]], spacing)
        uu, vv = np.meshgrid(u, v, indexing="ij")
        pts = np.zeros((uu.size, 3))
        pts[:, axis] = value
        pts[:, other[0]] = uu.ravel()
        pts[:, other[1]] = vv.ravel()
        nrm = np.zeros((uu.size, 3))
        nrm[:, axis] = sign
        pos_parts.append(pts)
        nrm_parts.append(nrm)

    for axis in range(3):
        add_face(axis, bmin[axis], +1.0, bmin, bmax)
        add_face(axis, bmax[axis], -1.0, bmin, bmax)

    if geom.pillar_min is not None:
        pmin = np.asarray(geom.pillar_min, dtype=np.float64)
        pmax = np.asarray(geom.pillar_max, dtype=np.float64)
        for axis in (0, 2):  # pillar sides face outward into the fluid
            add_face(axis, pmin[axis], -1.0, pmin, pmax)
            add_face(axis, pmax[axis], +1.0, pmin, pmax)
        add_face(1, pmax[1], +1.0, pmin, pmax)  # top

    return BoundarySet(np.concatenate(pos_parts), np.concatenate(nrm_parts))


# -- block sampling -------------------------------------------------------


def _lattice_counts(extent: np.ndarray, spacing: float) -> np.ndarray:
    return np.maximum(1, np.floor(extent / spacing + 1e-9).astype(np.int64))


def _cuboid_lattice(extent: np.ndarray, spacing: float) -> np.ndarray:
    n = _lattice_counts(extent, spacing)
    axes = [(np.arange(nk) + 0.5 - nk / 2.0) * spacing for nk in n]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def _sphere_lattice(radius: float, spacing: float) -> np.ndarray:
    pts = _cuboid_lattice(np.array([2 * radius] * 3), spacing)
    keep = (pts * pts).sum(axis=1) <= radius * radius
    return pts[keep]


def _rotation_matrix(kind: str, rng: np.random.Generator) -> np.ndarray:
    if kind == "none":
        return np.eye(3)
    if kind == "yaw":
        a = rng.uniform(0.0, 2.0 * np.pi)
        c, s = np.cos(a), np.sin(a)
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    if kind == "full":
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        a = rng.uniform(0.0, 2.0 * np.pi)
        k = np.array(
            [
                [0.0, -axis[2], axis[1]],
                [axis[2], 0.0, -axis[0]],
                [-axis[1], axis[0], 0.0],
            ]
        )
        return np.eye(3) + np.sin(a) * k + (1.0 - np.cos(a)) * (k @ k)
    raise ContractViolation(f"unknown rotation kind {kind!r}")


@dataclass
class BlockSpec:
    """One fluid block to drop into the scene."""

    shape: str = "cuboid"                      # cuboid | sphere | dam-break | points
    extent: tuple[float, float, float] = (0.2, 0.3, 0.2)
    sphere_radius: float = 0.12
    points: np.ndarray | None = None           # local frame, for shape == points
    params: PhysicalParams = field(default_factory=PhysicalParams)
    rotation: str = "yaw"                       # none | yaw | full
    scale_range: tuple[float, float] = (0.8, 1.2)
    speed_range: tuple[float, float] = (-2.0, 2.0)  # horizontal components
    jitter: float = 0.05                        # lattice jitter, fraction of spacing


def sample_block(
    spec: BlockSpec,
    boundary: BoundaryGeometry,
    particle_radius: float,
    rng: np.random.Generator,
    max_tries: int = 100,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Returns (positions, velocities, meta) for one block placed in the box."""
    spec.params.validate()
    spacing = 2.0 * particle_radius
    bmin = np.asarray(boundary.box_min) + particle_radius
    bmax = np.asarray(boundary.box_max) - particle_radius

    if spec.shape == "dam-break":
        # a column flush against the x-min wall, deterministic placement
        ext = np.array(
            [
                (bmax[0] - bmin[0]) * spec.extent[0],
                (bmax[1] - bmin[1]) * spec.extent[1],
                (bmax[2] - bmin[2]) * spec.extent[2],
            ]
        )
        local = _cuboid_lattice(ext, spacing)
        local += rng.uniform(-0.5, 0.5, size=local.shape) * (spec.jitter * spacing)
        center = np.array(
            [bmin[0] + ext[0] / 2.0, bmin[1] + ext[1] / 2.0, (bmin[2] + bmax[2]) / 2.0]
        )
        pts = local + center
        vel = np.zeros_like(pts)
        return pts, vel, {"shape": "dam-break", "extent": ext.tolist()}

    if spec.shape == "cuboid":
        local = _cuboid_lattice(np.asarray(spec.extent, dtype=np.float64), spacing)
    elif spec.shape == "sphere":
        local = _sphere_lattice(float(spec.sphere_radius), spacing)
    elif spec.shape == "points":
        if spec.points is None:
            raise ContractViolation("shape 'points' requires an explicit point array")
        local = np.asarray(spec.points, dtype=np.float64).copy()
    else:
        raise ContractViolation(f"unknown block shape {spec.shape!r}")

    if local.shape[0] == 0:
        raise ContractViolation("block lattice produced no particles; extent too small")

    local += rng.uniform(-0.5, 0.5, size=local.shape) * (spec.jitter * spacing)

    for attempt in range(max_tries):
        scale = rng.uniform(*spec.scale_range)
        rot = _rotation_matrix(spec.rotation, rng)
        pts = (scale * local) @ rot.T
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        half = (hi - lo) / 2.0
        mid = (hi + lo) / 2.0
        c_lo = bmin + half
        c_hi = bmax - half
        if np.any(c_lo > c_hi):
            continue  # block too large at this scale, redraw
        center = rng.uniform(c_lo, c_hi)
        pts = pts - mid + center
        if boundary.pillar_min is not None:
            pmin = np.asarray(boundary.pillar_min) - particle_radius
            pmax = np.asarray(boundary.pillar_max) + particle_radius
            inside = np.all((pts > pmin) & (pts < pmax), axis=1)
            if inside.any():
                continue
        vel = np.zeros_like(pts)
        vel[:, 0] = rng.uniform(*spec.speed_range)
        vel[:, 2] = rng.uniform(*spec.speed_range)
        meta = {
            "shape": spec.shape,
            "scale": float(scale),
            "center": center.tolist(),
            "rotation": spec.rotation,
            "count": int(pts.shape[0]),
            "tries": attempt + 1,
        }
        return pts, vel, meta
    raise ContractViolation(f"could not place block inside boundary after {max_tries} tries")


def sample_scene(
    blocks: list[BlockSpec],
    boundary: BoundaryGeometry,
    particle_radius: float,
    seed: int,
) -> Scene:
    rng = np.random.default_rng(seed)
    pos_parts, vel_parts, gid_parts, params, metas = [], [], [], [], []
    for b, spec in enumerate(blocks):
        pts, vel, meta = sample_block(spec, boundary, particle_radius, rng)
        pos_parts.append(pts)
        vel_parts.append(vel)
        gid_parts.append(np.full(pts.shape[0], b, dtype=np.int64))
        params.append(spec.params)
        metas.append(meta)
    return Scene(
        positions=np.concatenate(pos_parts),
        velocities=np.concatenate(vel_parts),
        group_ids=np.concatenate(gid_parts),
        params=params,
        boundary=boundary,
        particle_radius=particle_radius,
        seed=seed,
        blocks=metas,
    )
