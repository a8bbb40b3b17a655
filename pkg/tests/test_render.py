"""Renderer tests: encodings, quadrature, cameras, equivariance, training."""

from __future__ import annotations

import numpy as np
import pytest

from latentfluid import render, tape
from latentfluid.errors import ContractViolation
from latentfluid.params import Adam, ParamStore
from latentfluid.render import (
    RenderConfig,
    RenderTrainConfig,
    build_renderer,
    camera_rays,
    encode_samples,
    hemisphere_cameras,
    look_at,
    photometric_loss,
    pretrain_renderer,
    psnr,
    quadrature,
    reference_renderer,
    render_image,
    render_rays,
    sample_pdf,
    stratified_depths,
    warmup_renderer,
)
from latentfluid.seqio import CameraSpec


def small_cfg(**kw) -> RenderConfig:
    base = dict(n_coarse=8, n_fine=16, trunk_width=32, trunk_depth=3, feat_width=16)
    base.update(kw)
    return RenderConfig(**base)


def one_ray(direction=(0.0, 0.0, 1.0)):
    d = np.asarray(direction, dtype=np.float64)
    return np.zeros((1, 3)), (d / np.linalg.norm(d)).reshape(1, 3)


# -- encoding ---------------------------------------------------------------


def test_encode_single_neighbor_at_sample():
    cfg = RenderConfig(particle_radius=0.05)
    o, d = one_ray()
    depths = np.array([[0.7]])
    p = np.array([[0.0, 0.0, 0.7]])  # exactly at the sample point
    enc = encode_samples(p, o, d, depths, cfg)
    ep = enc.ep.value[0]
    assert ep[2] == pytest.approx(1.0 / cfg.cap)          # sigma_p = w = 1
    assert abs(ep[3]) < 1e-12                              # v_D = 0
    assert abs(ep[0]) < 1e-12 and abs(ep[1]) <= 1e-12     # zero offset (norm at its sqrt floor)
    assert enc.occupancy[0, 0] == 1.0


def test_encode_neighbor_at_support_radius_contributes_zero():
    cfg = RenderConfig(particle_radius=0.05)
    r_s = cfg.support_radius
    o, d = one_ray()
    depths = np.array([[0.7]])
    inside = np.array([0.02, 0.0, 0.7])
    at_edge = np.array([r_s, 0.0, 0.7])
    both = encode_samples(np.stack([inside, at_edge]), o, d, depths, cfg)
    alone = encode_samples(inside.reshape(1, 3), o, d, depths, cfg)
    assert both.ep.value[0, 2] == alone.ep.value[0, 2]  # w(at r_s) = 0 exactly


def test_encode_values_match_hand_oracle():
    cfg = RenderConfig(particle_radius=0.05, scene_scale=2.0)
    r_s, k = cfg.support_radius, cfg.cap
    o, d = one_ray((0.1, -0.2, 0.97))
    depths = np.array([[0.8]])
    x = (o + 0.8 * d)[0]
    rng = np.random.default_rng(0)
    offs = rng.uniform(-0.6, 0.6, size=(4, 3)) * r_s / np.sqrt(3.0)
    pts = x + offs
    enc = encode_samples(pts, o, d, depths, cfg)
    dist = np.linalg.norm(offs, axis=1)
    w = np.maximum(1.0 - (dist / r_s) ** 3, 0.0)
    sigma_p = w.sum()
    p_rel = (w[:, None] * offs).sum(axis=0) / k
    v_d = np.abs(dist - dist.sum() / k).sum() / k
    to_c = 0.8 * d[0] + p_rel
    d_c = to_c / np.linalg.norm(to_c)
    want_ep = [p_rel @ d[0] / 2.0, np.linalg.norm(p_rel) / 2.0, sigma_p / k, v_d / r_s]
    want_ed = [d_c @ d[0], 0.8 / cfg.far]
    np.testing.assert_allclose(enc.ep.value[0], want_ep, rtol=1e-12)
    np.testing.assert_allclose(enc.ed.value[0], want_ed, rtol=1e-12)


def test_encode_zero_neighbors_fall_back_to_ray_direction():
    cfg = RenderConfig(particle_radius=0.05)
    o, d = one_ray((0.3, 0.5, 0.81))
    depths = np.array([[0.4, 0.9]])
    pts = np.array([[5.0, 5.0, 5.0]])  # far away from both samples
    enc = encode_samples(pts, o, d, depths, cfg)
    assert (enc.occupancy == 0.0).all()
    np.testing.assert_allclose(enc.ed.value[:, 0], 1.0, atol=1e-12)  # d_c = ray dir
    np.testing.assert_array_equal(enc.ep.value[:, 2], 0.0)


def test_encode_particle_order_invariance_is_exact():
    cfg = RenderConfig(particle_radius=0.06)
    rng = np.random.default_rng(7)
    o = np.zeros((3, 3))
    d = rng.standard_normal((3, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    depths = np.sort(rng.uniform(0.3, 1.0, size=(3, 4)), axis=1)
    x = (o[:, None, :] + depths[:, :, None] * d[:, None, :]).reshape(-1, 3)
    pts = np.concatenate([x + rng.uniform(-0.1, 0.1, size=x.shape), x[:4] + 0.03])
    enc = encode_samples(pts, o, d, depths, cfg)
    perm = rng.permutation(pts.shape[0])
    enc_p = encode_samples(pts[perm], o, d, depths, cfg)
    assert enc.ep.value.tobytes() == enc_p.ep.value.tobytes()
    assert enc.ed.value.tobytes() == enc_p.ed.value.tobytes()


def test_encode_rejects_bad_inputs():
    cfg = RenderConfig()
    o, d = one_ray()
    with pytest.raises(ContractViolation):
        encode_samples(np.zeros((2, 2)), o, d, np.array([[0.5]]), cfg)
    with pytest.raises(ContractViolation):
        encode_samples(np.zeros((2, 3)), o, 2.0 * d, np.array([[0.5]]), cfg)
    with pytest.raises(ContractViolation):
        encode_samples(np.zeros((2, 3)), o, d, np.array([[0.5], [0.6]]), cfg)


# -- quadrature -------------------------------------------------------------


def quad_oracle(sig, col, depths, far, bg):
    delta = np.diff(np.concatenate([depths, np.full((depths.shape[0], 1), far)], axis=1), axis=1)
    sd = sig * delta
    trans = np.exp(-(np.cumsum(sd, axis=1) - sd))
    w = trans * (1.0 - np.exp(-sd))
    return (w[:, :, None] * col).sum(axis=1) + np.exp(-sd.sum(axis=1))[:, None] * np.asarray(bg)


def test_quadrature_matches_oracle():
    rng = np.random.default_rng(1)
    depths = np.sort(rng.uniform(0.2, 1.8, size=(6, 9)), axis=1)
    sig = rng.uniform(0.0, 12.0, size=(6, 9))
    col = rng.uniform(0.0, 1.0, size=(6, 9, 3))
    bg = np.array([0.3, 0.6, 0.9])
    pix, w = quadrature(tape.as_tensor(sig), tape.as_tensor(col), depths, 2.0, bg)
    np.testing.assert_allclose(pix.value, quad_oracle(sig, col, depths, 2.0, bg), rtol=1e-12)
    assert (w.value >= 0.0).all()
    assert w.value.sum(axis=1).max() <= 1.0 + 1e-12


def test_quadrature_opaque_slab_returns_interval_color():
    depths = np.array([[0.2, 0.4, 0.6, 0.8]])
    sig = np.array([[0.0, 80.0, 0.0, 0.0]])
    col = np.tile(np.array([[0.9, 0.1, 0.5], [0.2, 0.7, 0.3], [0.5, 0.5, 0.5], [0.1, 0.1, 0.1]]), (1, 1, 1))
    pix, w = quadrature(tape.as_tensor(sig), tape.as_tensor(col), depths, 1.0, np.ones(3))
    np.testing.assert_allclose(pix.value[0], [0.2, 0.7, 0.3], atol=1e-6)
    assert w.value[0, 1] == pytest.approx(1.0, abs=1e-6)


def test_quadrature_zero_density_gives_exact_background():
    depths = np.sort(np.random.default_rng(2).uniform(0.2, 0.9, size=(5, 7)), axis=1)
    sig = tape.as_tensor(np.zeros((5, 7)))
    col = tape.as_tensor(np.random.default_rng(3).uniform(size=(5, 7, 3)))
    bg = np.array([0.25, 0.5, 0.75])
    pix, w = quadrature(sig, col, depths, 1.0, bg)
    assert np.array_equal(pix.value, np.broadcast_to(bg, (5, 3)))
    assert np.array_equal(w.value, np.zeros((5, 7)))


def test_quadrature_weight_sum_plus_background_is_one():
    rng = np.random.default_rng(4)
    depths = np.sort(rng.uniform(0.2, 1.4, size=(40, 12)), axis=1)
    sig = rng.uniform(0.0, 30.0, size=(40, 12))
    _, w = quadrature(tape.as_tensor(sig), tape.as_tensor(rng.uniform(size=(40, 12, 3))), depths, 1.5, np.ones(3))
    delta = np.diff(np.concatenate([depths, np.full((40, 1), 1.5)], axis=1), axis=1)
    t_bg = np.exp(-(sig * delta).sum(axis=1))
    np.testing.assert_allclose(w.value.sum(axis=1) + t_bg, 1.0, atol=1e-12)


def test_quadrature_rejects_bad_depths():
    sig = tape.as_tensor(np.ones((1, 3)))
    col = tape.as_tensor(np.ones((1, 3, 3)))
    with pytest.raises(ContractViolation):
        quadrature(sig, col, np.array([[0.5, 0.4, 0.6]]), 1.0, np.ones(3))
    with pytest.raises(ContractViolation):
        quadrature(sig, col, np.array([[0.2, 0.4]]), 1.0, np.ones(3))


# -- depth sampling ---------------------------------------------------------


def test_stratified_depths_bounds_and_midpoints():
    rng = np.random.default_rng(5)
    t = stratified_depths(rng, 50, 16, 0.3, 1.2)
    assert t.shape == (50, 16)
    assert (np.diff(t, axis=1) > 0).all()
    assert t.min() >= 0.3 and t.max() < 1.2
    mid = stratified_depths(rng, 2, 4, 0.0, 1.0, jitter=False)
    np.testing.assert_allclose(mid[0], [0.125, 0.375, 0.625, 0.875])
    with pytest.raises(ContractViolation):
        stratified_depths(rng, 1, 4, 1.0, 0.5)


def sample_pdf_oracle(rng_u, depths, weights, far):
    n_rays, n_bins = depths.shape
    w = weights + 1e-5
    out = np.empty_like(rng_u)
    for r in range(n_rays):
        pdf = w[r] / w[r].sum()
        cdf = np.concatenate([[0.0], np.cumsum(pdf)])
        cdf[-1] = 1.0
        edges = np.concatenate([depths[r], [far]])
        for j, u in enumerate(rng_u[r]):
            b = min(max(np.searchsorted(cdf, u, side="right"), 1), n_bins) - 1
            span = max(cdf[b + 1] - cdf[b], 1e-12)
            out[r, j] = edges[b] + (u - cdf[b]) / span * (edges[b + 1] - edges[b])
    return out


def test_sample_pdf_matches_per_ray_oracle():
    rng = np.random.default_rng(6)
    depths = np.sort(rng.uniform(0.2, 1.1, size=(5, 8)), axis=1)
    weights = rng.uniform(0.0, 1.0, size=(5, 8)) * (rng.uniform(size=(5, 8)) > 0.4)
    got = sample_pdf(np.random.default_rng(9), depths, weights, 12, 1.3)
    u = (np.arange(12)[None, :] + np.random.default_rng(9).uniform(size=(5, 12))) / 12
    np.testing.assert_allclose(got, sample_pdf_oracle(u, depths, weights, 1.3), rtol=1e-10)
    assert got.min() >= 0.2 and got.max() <= 1.3


def test_sample_pdf_concentrates_where_weights_are():
    depths = np.tile(np.array([[0.2, 0.4, 0.6, 0.8]]), (3, 1))
    weights = np.array([[0.0, 50.0, 0.0, 0.0]] * 3)
    t = sample_pdf(np.random.default_rng(0), depths, weights, 64, 1.0)
    assert ((t >= 0.4) & (t <= 0.6)).mean() > 0.97


# -- cameras ----------------------------------------------------------------


def test_look_at_axes():
    c2w = look_at((0.0, 0.0, 2.0), (0.0, 0.0, 0.0))
    np.testing.assert_allclose(c2w[:3, :3], np.eye(3), atol=1e-12)
    np.testing.assert_allclose(c2w[:3, 3], [0, 0, 2])
    with pytest.raises(ContractViolation):
        look_at((0.0, 1.0, 0.0), (0.0, 0.0, 0.0))  # up parallel to view axis


def test_camera_rays_center_pixel_and_origins():
    cam = CameraSpec(look_at((0.4, 0.9, 1.6), (0.4, 0.2, 0.1)), 35.0, 3, 3)
    o, d = camera_rays(cam)
    assert o.shape == (9, 3) and d.shape == (9, 3)
    np.testing.assert_allclose(o, np.tile(cam.c2w[:3, 3], (9, 1)))
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(d[4], -cam.c2w[:3, 2], atol=1e-12)  # middle pixel looks down -z


def test_hemisphere_cameras_band_and_determinism():
    center = np.array([0.5, 0.2, 0.5])
    cams = hemisphere_cameras(40, center, 1.3, 50.0, 8, 8, seed=3)
    for cam in cams:
        p = cam.c2w[:3, 3]
        assert np.linalg.norm(p - center) == pytest.approx(1.3, abs=1e-9)
        el = np.degrees(np.arcsin((p - center)[1] / 1.3))
        assert 15.0 - 1e-9 <= el <= 75.0 + 1e-9
        rot = cam.c2w[:3, :3]
        np.testing.assert_allclose(rot.T @ rot, np.eye(3), atol=1e-9)
    again = hemisphere_cameras(40, center, 1.3, 50.0, 8, 8, seed=3)
    assert all(np.array_equal(a.c2w, b.c2w) for a, b in zip(cams, again))


# -- ray rendering ----------------------------------------------------------


def scene_and_rays(seed=0, n_particles=60, n_rays=24):
    rng = np.random.default_rng(seed)
    pts = 0.5 + 0.06 * rng.standard_normal((n_particles, 3))
    cam = hemisphere_cameras(1, pts.mean(axis=0), 1.4, 60.0, 12, 12, seed=seed + 1)[0]
    o, d = camera_rays(cam)
    pick = rng.choice(o.shape[0], size=n_rays, replace=False)
    return pts, o[pick], d[pick]


def test_render_rays_weight_bounds_and_determinism():
    pts, o, d = scene_and_rays()
    ren = build_renderer(ParamStore(), small_cfg(), np.random.default_rng(1))
    res = render_rays(ren, pts, o, d, rng=np.random.default_rng(2))
    res2 = render_rays(ren, pts, o, d, rng=np.random.default_rng(2))
    assert np.array_equal(res.fine.value, res2.fine.value)
    for w in (res.weights_coarse.value, res.weights_fine.value):
        assert (w >= 0.0).all() and w.sum(axis=1).max() <= 1.0 + 1e-12
    assert res.fine.value.shape == (24, 3)
    assert res.depths_fine.shape == (24, small_cfg().n_coarse + small_cfg().n_fine)


def test_render_rays_empty_scene_is_exact_background():
    _, o, d = scene_and_rays()
    cfg = small_cfg(background=(0.2, 0.5, 0.8))
    ren = build_renderer(ParamStore(), cfg, np.random.default_rng(1))
    res = render_rays(ren, np.zeros((0, 3)), o, d, rng=np.random.default_rng(2))
    want = np.broadcast_to(np.array([0.2, 0.5, 0.8]), (24, 3))
    assert np.array_equal(res.coarse.value, want)
    assert np.array_equal(res.fine.value, want)


def test_render_rays_needs_rng_or_depths():
    pts, o, d = scene_and_rays()
    ren = build_renderer(ParamStore(), small_cfg(), np.random.default_rng(1))
    with pytest.raises(ContractViolation):
        render_rays(ren, pts, o, d)


def test_field_eval_compact_path_matches_dense():
    pts, o, d = scene_and_rays(seed=3)
    cfg = small_cfg()
    ren = build_renderer(ParamStore(), cfg, np.random.default_rng(4))
    depths = stratified_depths(np.random.default_rng(5), o.shape[0], 10, cfg.near, cfg.far)
    enc = encode_samples(pts, o, d, depths, cfg)
    assert 0 < enc.occupancy.sum() < enc.occupancy.size  # mixed occupancy
    sig, col = render._field_eval(ren.fine, enc)
    sig_all, col_all = ren.fine(enc)
    occ = enc.occupancy[:, 0] > 0
    np.testing.assert_allclose(sig.value[occ], sig_all.value[occ], rtol=1e-12)
    np.testing.assert_allclose(col.value[occ], col_all.value[occ], rtol=1e-12)
    assert np.array_equal(sig.value[~occ], np.zeros((int((~occ).sum()), 1)))


def test_radiance_field_output_ranges():
    pts, o, d = scene_and_rays(seed=5)
    cfg = small_cfg()
    ren = build_renderer(ParamStore(), cfg, np.random.default_rng(6))
    enc = encode_samples(pts, o, d, stratified_depths(np.random.default_rng(7), 24, 6, cfg.near, cfg.far), cfg)
    sig, col = ren.fine(enc)
    assert (sig.value >= 0.0).all()
    assert (col.value >= 0.0).all() and (col.value <= 1.0).all()


def _rigid(seed):
    rng = np.random.default_rng(seed)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    ang = rng.uniform(0.5, 2.5)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    rot = np.eye(3) + np.sin(ang) * k + (1 - np.cos(ang)) * (k @ k)
    return rot, rng.uniform(-2.0, 2.0, size=3)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_rigid_transform_equivariance(seed):
    pts, o, d = scene_and_rays(seed=seed)
    ren = build_renderer(ParamStore(), small_cfg(), np.random.default_rng(seed + 10))
    rot, shift = _rigid(seed + 20)
    res = render_rays(ren, pts, o, d, rng=np.random.default_rng(99))
    res_t = render_rays(ren, pts @ rot.T + shift, o @ rot.T + shift, d @ rot.T, rng=np.random.default_rng(99))
    np.testing.assert_allclose(res_t.fine.value, res.fine.value, atol=1e-6)
    np.testing.assert_allclose(res_t.coarse.value, res.coarse.value, atol=1e-6)


def test_render_image_shape_and_determinism():
    pts, _, _ = scene_and_rays()
    cfg = small_cfg()
    ren = reference_renderer(cfg)
    cam = hemisphere_cameras(1, pts.mean(axis=0), 1.4, 40.0, 10, 8, seed=2)[0]
    img = render_image(ren, pts, cam, seed=0)
    assert img.shape == (8, 10, 3)
    assert np.array_equal(img, render_image(ren, pts, cam, seed=0))
    assert img.min() >= 0.0 and img.max() <= 1.0


# -- losses -----------------------------------------------------------------


def test_photometric_loss_zero_and_mismatch():
    x = np.random.default_rng(0).uniform(size=(7, 3))
    assert photometric_loss(tape.as_tensor(x), x).value == 0.0
    with pytest.raises(ContractViolation):
        photometric_loss(tape.as_tensor(x), x[:3])


def test_psnr_values():
    assert psnr(1.0) == pytest.approx(0.0)
    assert psnr(0.01) == pytest.approx(20.0)
    assert psnr(0.0) == pytest.approx(120.0)  # floored


# -- training ---------------------------------------------------------------


def test_single_frame_fit_loss_strictly_decreases():
    rng = np.random.default_rng(3)
    cfg = small_cfg()
    ren = build_renderer(ParamStore(), cfg, rng)
    pts = 0.5 + 0.05 * rng.standard_normal((50, 3))
    cam = hemisphere_cameras(1, pts.mean(axis=0), 1.4, 40.0, 16, 16, seed=2)[0]
    o, d = camera_rays(cam)
    t_c = stratified_depths(np.random.default_rng(0), o.shape[0], cfg.n_coarse, cfg.near, cfg.far, jitter=False)
    t_i = stratified_depths(np.random.default_rng(1), o.shape[0], cfg.n_fine, cfg.near, cfg.far)
    t_f = np.sort(np.concatenate([t_c, t_i], axis=1), axis=1)
    with tape.no_grad():
        target = render_rays(reference_renderer(cfg), pts, o, d, depths=(t_c, t_f)).fine.value
    opt = Adam(ren.store, 1e-3)
    losses = []
    for _ in range(200):
        res = render_rays(ren, pts, o, d, depths=(t_c, t_f))
        loss = tape.add(photometric_loss(res.coarse, target), photometric_loss(res.fine, target))
        losses.append(float(loss.value))
        ren.store.zero_grad()
        tape.backward(loss)
        opt.step()
    assert all(losses[k + 1] < losses[k] for k in range(len(losses) - 1))
    assert losses[-1] < 0.1 * losses[0]


def test_pretrain_held_out_psnr_improves():
    rng = np.random.default_rng(0)
    ren = build_renderer(ParamStore(), small_cfg(), rng)
    pts = 0.5 + 0.06 * rng.standard_normal((60, 3))
    tcfg = RenderTrainConfig(
        iters=60, batch_rays=128, lr=2e-3, n_views=4, n_eval_views=1,
        width=24, height=24, log_every=20, eval_every=15, eval_rays=128,
    )
    recs = pretrain_renderer(ren, [pts], tcfg)
    psnrs = [r["psnr"] for r in recs if "psnr" in r]
    assert len(psnrs) >= 4
    assert psnrs[-1] > psnrs[0] + 0.5
    assert ren.store.metadata["stage"] == "R"


def test_pretrain_seed_reproducibility(tmp_path):
    rng_pts = np.random.default_rng(1)
    pts = 0.5 + 0.05 * rng_pts.standard_normal((40, 3))
    tcfg = RenderTrainConfig(iters=8, batch_rays=64, n_views=2, n_eval_views=0,
                             width=16, height=16, log_every=1)
    runs = []
    for _ in range(2):
        ren = build_renderer(ParamStore(), small_cfg(), np.random.default_rng(5))
        recs = pretrain_renderer(ren, [pts], tcfg, log_path=tmp_path / "log.jsonl")
        runs.append(([r["loss"] for r in recs], ren.store.checksum()))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]
    lines = (tmp_path / "log.jsonl").read_text().strip().splitlines()
    assert len(lines) == 8
    assert {"iter", "loss", "lr", "wall_ms"} <= set(__import__("json").loads(lines[0]))


def test_pretrain_rejects_bad_scenes():
    ren = build_renderer(ParamStore(), small_cfg(), np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        pretrain_renderer(ren, [], RenderTrainConfig(iters=1))
    with pytest.raises(ContractViolation):
        pretrain_renderer(ren, [np.zeros((0, 3))], RenderTrainConfig(iters=1))


def test_warmup_fits_observed_images(tmp_path):
    rng = np.random.default_rng(2)
    # enough depth samples that the quadrature noise floor sits well below the
    # appearance mismatch being fitted
    cfg = small_cfg(n_coarse=24, n_fine=48)
    ren = build_renderer(ParamStore(), cfg, rng)
    pts = 0.5 + 0.05 * rng.standard_normal((40, 3))
    cams = hemisphere_cameras(2, pts.mean(axis=0), 1.0, 60.0, 16, 16, seed=4)
    ref = reference_renderer(cfg)
    imgs = [render_image(ref, pts, c, seed=i) for i, c in enumerate(cams)]
    mse_before = np.mean((render_image(ren, pts, cams[0], seed=9) - imgs[0]) ** 2)
    recs = warmup_renderer(ren, pts, imgs, cams, RenderTrainConfig(
        iters=120, batch_rays=128, lr=3e-3, log_every=10), log_path=tmp_path / "w.jsonl")
    mse_after = np.mean((render_image(ren, pts, cams[0], seed=9) - imgs[0]) ** 2)
    assert mse_after < 0.25 * mse_before
    assert len(recs) == 13
    assert ren.store.metadata["stage"] == "R-warm"
    with pytest.raises(ContractViolation):
        warmup_renderer(ren, pts, imgs[:1], cams, RenderTrainConfig(iters=1))
    with pytest.raises(ContractViolation):
        warmup_renderer(ren, pts, [imgs[0][:8], imgs[1]], cams, RenderTrainConfig(iters=1))


# -- model gradient checks --------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_render_gradchecks(seed):
    from latentfluid.modelchecks import render_checks

    for chk in render_checks():
        rng = np.random.default_rng(seed)
        f, arrays = chk.make(rng)
        err = tape.gradcheck(f, arrays, step=chk.step or 1e-5)
        assert err < chk.tol, f"{chk.name}: {err:.3e}"
