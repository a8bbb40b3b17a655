import numpy as np
import pytest

from latentfluid.errors import ContractViolation
from latentfluid.scenes import (
    BlockSpec,
    BoundaryGeometry,
    PhysicalParams,
    boundary_particles,
    sample_scene,
)
from latentfluid.sph import (
    SimConfig,
    SPHSimulator,
    generate_sequence,
    kinetic_energy,
    mechanical_energy,
)

BOX = BoundaryGeometry((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


def _block_scene(seed=0, nu=0.1, extent=(0.2, 0.3, 0.2), jitter=0.05, rotation="yaw"):
    spec = BlockSpec(
        shape="cuboid",
        extent=extent,
        params=PhysicalParams(density=1000.0, viscosity=nu),
        rotation=rotation,
        jitter=jitter,
    )
    return sample_scene([spec], BOX, particle_radius=0.025, seed=seed)


def test_boundary_particle_count_unit_box():
    bnd = boundary_particles(BOX, spacing=0.05)
    assert bnd.positions.shape == (6 * 21 * 21, 3)
    assert np.allclose(np.linalg.norm(bnd.normals, axis=1), 1.0)
    # floor normals point up into the domain (interior points, not shared edges)
    p = bnd.positions
    floor = (p[:, 1] == 0.0) & (p[:, 0] > 0) & (p[:, 0] < 1) & (p[:, 2] > 0) & (p[:, 2] < 1)
    assert floor.any() and np.all(bnd.normals[floor, 1] == 1.0)


def test_lattice_spacing_and_count():
    scene = _block_scene(jitter=0.0, rotation="none")
    # 0.2 x 0.3 x 0.2 extent at spacing 0.05 -> 4 x 6 x 4 lattice, but the
    # sampled scale in [0.8, 1.2] does not change the site count
    assert scene.n_particles == 4 * 6 * 4


def test_zero_gravity_rest_lattice_is_stationary():
    scene = _block_scene(jitter=0.0, rotation="none")
    scene.velocities[:] = 0.0
    cfg = SimConfig(gravity=(0.0, 0.0, 0.0))
    seq = generate_sequence(scene, cfg, 51)
    drift = np.abs(seq.positions[-1] - seq.positions[0]).max()
    assert drift < 1e-12


def test_free_fall_matches_closed_form():
    scene = _block_scene(jitter=0.0, rotation="none")
    # single particle, dropped from rest high in the box
    scene.positions = np.array([[0.5, 0.9, 0.5]])
    scene.velocities = np.zeros((1, 3))
    scene.group_ids = np.zeros(1, dtype=np.int64)
    cfg = SimConfig()
    sim = SPHSimulator(scene, cfg)
    seq = sim.run(11)
    t = 10 * cfg.frame_dt
    expected = -0.5 * 9.81 * t * t
    got = seq.positions[10, 0, 1] - seq.positions[0, 0, 1]
    assert abs(got - expected) <= 0.02 * abs(expected)


def test_containment_under_splashing():
    scene = _block_scene(seed=3, nu=0.01)
    seq = generate_sequence(scene, SimConfig(), 50)
    r = scene.particle_radius
    lo = seq.positions.min(axis=(0, 1))
    hi = seq.positions.max(axis=(0, 1))
    assert np.all(lo >= np.array(BOX.box_min) - r)
    assert np.all(hi <= np.array(BOX.box_max) + r)


def test_pillar_containment():
    geom = BoundaryGeometry(
        (0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (0.4, 0.0, 0.4), (0.6, 0.5, 0.6)
    )
    spec = BlockSpec(extent=(0.25, 0.25, 0.25), params=PhysicalParams(viscosity=0.05))
    scene = sample_scene([spec], geom, particle_radius=0.025, seed=8)
    seq = generate_sequence(scene, SimConfig(), 40)
    pmin = np.array(geom.pillar_min)
    pmax = np.array(geom.pillar_max)
    inside = np.all(
        (seq.positions > pmin[None, None, :]) & (seq.positions < pmax[None, None, :]),
        axis=2,
    )
    assert not inside.any()


def test_bitwise_determinism_same_seed():
    a = generate_sequence(_block_scene(seed=5), SimConfig(), 12)
    b = generate_sequence(_block_scene(seed=5), SimConfig(), 12)
    assert a.positions.tobytes() == b.positions.tobytes()
    assert a.velocities.tobytes() == b.velocities.tobytes()


def test_viscosity_dampens_kinetic_energy():
    lo = _block_scene(seed=4, nu=0.01)
    hi = _block_scene(seed=4, nu=0.4)
    assert np.array_equal(lo.positions, hi.positions)  # same geometry, same seed
    cfg = SimConfig()
    seq_lo = generate_sequence(lo, cfg, 51)
    seq_hi = generate_sequence(hi, cfg, 51)
    m = SPHSimulator(lo, cfg).mass
    ke_lo = kinetic_energy(seq_lo.velocities[50], m)
    ke_hi = kinetic_energy(seq_hi.velocities[50], m)
    assert ke_hi < ke_lo


def test_energy_nonincreasing_within_tolerance():
    scene = _block_scene(seed=6, nu=0.1)
    cfg = SimConfig()
    seq = generate_sequence(scene, cfg, 60)
    m = SPHSimulator(scene, cfg).mass
    e = np.array(
        [
            mechanical_energy(seq.positions[t], seq.velocities[t], m, cfg.gravity)
            for t in range(60)
        ]
    )
    e0 = abs(e[0]) if abs(e[0]) > 0 else 1.0
    for t in range(60 - 20):
        assert e[t + 20] <= e[t] + 0.05 * e0, f"energy grew in window starting {t}"


def test_density_and_viscosity_ranges_enforced():
    with pytest.raises(ContractViolation):
        PhysicalParams(density=100.0).validate()
    with pytest.raises(ContractViolation):
        PhysicalParams(viscosity=0.5).validate()


def test_sequence_needs_two_frames():
    scene = _block_scene()
    with pytest.raises(ContractViolation):
        generate_sequence(scene, SimConfig(), 1)


def test_heterogeneous_blocks_carry_groups():
    specs = [
        BlockSpec(extent=(0.15, 0.15, 0.15), params=PhysicalParams(900.0, 0.02)),
        BlockSpec(extent=(0.15, 0.15, 0.15), params=PhysicalParams(1800.0, 0.35)),
    ]
    scene = sample_scene(specs, BOX, particle_radius=0.025, seed=12)
    assert set(np.unique(scene.group_ids)) == {0, 1}
    sim = SPHSimulator(scene, SimConfig())
    m0 = sim.mass[scene.group_ids == 0][0]
    m1 = sim.mass[scene.group_ids == 1][0]
    assert m1 / m0 == pytest.approx(2.0)
    seq = sim.run(10)
    assert np.isfinite(seq.positions).all()
