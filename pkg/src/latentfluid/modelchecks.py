"""Gradient checks through composite model pieces.

Factories here return (f, arrays) pairs for tape.gradcheck, exercising the
real forward code paths (cconv_forward, GRUCell.__call__, MLP.__call__ via
duck-typed parameter shims).  Geometry for the convolution checks is
rejection-sampled with margins around every non-smooth locus: ball edge,
inf-norm argmax ties, and trilinear cell boundaries, so a 1e-5 central
difference never crosses a branch.
"""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np

from . import tape
from .gradsuite import Check
from .layers import GRUCell, cconv_forward, neighbor_list, positional_encoding, window_eval
from .params import ParamStore
from .render import RenderConfig, build_renderer, encode_samples, quadrature, render_rays
from .tape import Tensor


# -- convolution geometry ---------------------------------------------------


def _sample_offset(rng: np.random.Generator, radius: float, k: int) -> np.ndarray:
    for _ in range(5000):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        off = u * (rng.uniform(0.25, 0.75) * radius)
        uu = off / radius
        mags = np.sort(np.abs(uu))
        if mags[2] - mags[1] < 0.06:
            continue  # inf-norm argmax could flip under perturbation
        c = uu * (np.linalg.norm(uu) / np.abs(uu).max())
        g = (c + 1.0) * 0.5 * (k - 1)
        frac = g - np.clip(np.floor(g), 0, k - 2)
        if np.min(np.minimum(frac, 1.0 - frac)) < 0.08:
            continue  # too close to an interpolation cell face
        return off
    raise RuntimeError("convolution check geometry sampling failed")


def _cconv_instance(rng: np.random.Generator, radius: float = 0.5, k: int = 4, n_in: int = 3, n_out: int = 2):
    n_query, per_query = 2, 3
    qpos = np.stack(
        [np.array([3.0 * radius * j, 0.0, 0.0]) + rng.uniform(-0.02, 0.02, 3) for j in range(n_query)]
    )
    spos = np.concatenate(
        [qpos[j] + np.stack([_sample_offset(rng, radius, k) for _ in range(per_query)]) for j in range(n_query)]
    )
    nbrs = neighbor_list(qpos, spos, radius)
    assert nbrs.indices.shape[0] == n_query * per_query
    feats = rng.normal(size=(spos.shape[0], n_in))
    self_feats = rng.normal(size=(n_query, n_in))
    kernel = rng.normal(size=(k, k, k, n_in, n_out)) * 0.5
    self_w = rng.normal(size=(n_in, n_out)) * 0.5
    w_out = rng.normal(size=(n_query, n_out))
    shim = SimpleNamespace(
        n_in=n_in, n_out=n_out, radius=radius, k=k, window="poly6-cubic", normalize=True
    )
    return shim, qpos, spos, feats, self_feats, kernel, self_w, w_out, nbrs


def _make_cconv_params(rng: np.random.Generator):
    shim, qpos, spos, feats, self_feats, kernel, self_w, w_out, nbrs = _cconv_instance(rng)

    def f(kernel_t, self_w_t, feats_t, self_feats_t):
        shim.kernel = kernel_t
        shim.self_weights = self_w_t
        out = cconv_forward(shim, Tensor(qpos), Tensor(spos), feats_t, nbrs, self_feats_t)
        return tape.tsum(out * Tensor(w_out))

    return f, [kernel, self_w, feats, self_feats]


def _make_cconv_positions(rng: np.random.Generator):
    shim, qpos, spos, feats, self_feats, kernel, self_w, w_out, nbrs = _cconv_instance(rng)
    shim.kernel = Tensor(kernel)
    shim.self_weights = Tensor(self_w)

    def f(qpos_t, spos_t):
        out = cconv_forward(shim, qpos_t, spos_t, Tensor(feats), nbrs, Tensor(self_feats))
        return tape.tsum(out * Tensor(w_out))

    return f, [qpos, spos]


# -- recurrent cell, dense net, encodings -------------------------------------


def _make_gru(rng: np.random.Generator):
    n_in, n_hidden, n = 4, 5, 3
    cell = SimpleNamespace(n_in=n_in, n_hidden=n_hidden)
    shapes = [(n_hidden + n_in, n_hidden)] * 3 + [(n_hidden,)] * 3
    arrays = [rng.normal(size=s) * 0.5 for s in shapes]
    x = rng.normal(size=(n, n_in))
    h = rng.normal(size=(n, n_hidden)) * 0.5
    w_out = rng.normal(size=(n, n_hidden))

    def f(w_r, w_u, w_c, b_r, b_u, b_c, x_t, h_t):
        cell.w_r, cell.w_u, cell.w_c = w_r, w_u, w_c
        cell.b_r, cell.b_u, cell.b_c = b_r, b_u, b_c
        return tape.tsum(GRUCell.__call__(cell, x_t, h_t) * Tensor(w_out))

    return f, arrays + [x, h]


def _make_mlp(rng: np.random.Generator):
    widths = [3, 6, 5, 2]
    skips = {1}
    n = 4
    arrays = []
    for i in range(len(widths) - 1):
        n_in = widths[i] + (widths[0] if i in skips else 0)
        arrays.append(rng.normal(size=(n_in, widths[i + 1])) * 0.5)
        arrays.append(rng.normal(size=(widths[i + 1],)) * 0.1)
    x = rng.normal(size=(n, widths[0]))
    w_out = rng.normal(size=(n, widths[-1]))
    act = tape.tanh

    def f(*ts):
        params, x_t = ts[:-1], ts[-1]
        h = x_t
        n_layers = len(widths) - 1
        for i in range(n_layers):
            if i in skips:
                h = tape.concat([h, x_t], axis=1)
            h = tape.matmul(h, params[2 * i]) + params[2 * i + 1]
            if i < n_layers - 1:
                h = act(h)
        return tape.tsum(h * Tensor(w_out))

    return f, arrays + [x]


def _make_posenc(rng: np.random.Generator):
    x = rng.normal(size=(4, 3))
    w_out = rng.normal(size=(4, 2 * 4 * 3))

    def f(x_t):
        return tape.tsum(positional_encoding(x_t, 4) * Tensor(w_out))

    return f, [x]


def _make_window(rng: np.random.Generator):
    radius = 0.7
    d = rng.uniform(0.05, 0.9, size=(5, 1)) * radius
    w_out = rng.normal(size=(5, 1))

    def f(d_t):
        return tape.tsum(window_eval("poly6-cubic", d_t, radius) * Tensor(w_out))

    return f, [d]


def layer_checks() -> list[Check]:
    return [
        Check("cconv_params", _make_cconv_params),
        Check("cconv_positions", _make_cconv_positions),
        Check("gru_step", _make_gru),
        Check("mlp_skip", _make_mlp),
        Check("positional_encoding", _make_posenc),
        Check("window_poly6", _make_window),
    ]


# -- simulator network ---------------------------------------------------------


def _tiny_simnet(rng: np.random.Generator):
    from .params import ParamStore
    from .scenes import BoundarySet
    from .simnet import SimNetConfig, SimulatorNet

    cfg = SimNetConfig(latent_width=4, feature_width=8, hidden_width=8, kernel_k=2)
    store = ParamStore()
    net = SimulatorNet(cfg, store, rng)
    n = 8
    pos = rng.uniform(0.32, 0.42, size=(n, 3))
    bpos = rng.uniform(0.30, 0.44, size=(5, 3))
    normals = rng.normal(size=(5, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    bnd = BoundarySet(bpos, normals)
    return net, cfg, pos, bnd


def _make_encoder_stack(rng: np.random.Generator):
    net, cfg, pos, bnd = _tiny_simnet(rng)
    n = pos.shape[0]
    vel = rng.normal(size=(n, 3)) * 0.5
    pm = rng.normal(size=(n, cfg.latent_width)) * 0.5
    self_w = net.enc3.self_weights.value.copy()
    w_out = rng.normal(size=(n, cfg.feature_width))

    def f(vel_t, pm_t, sw_t):
        net.enc3.self_weights = sw_t
        out = net.encode_features(pos, vel_t, bnd, pm_t)
        return tape.tsum(out * Tensor(w_out))

    return f, [vel, pm, self_w]


def _make_transition_latent(rng: np.random.Generator):
    net, cfg, pos, bnd = _tiny_simnet(rng)
    n = pos.shape[0]
    vel = rng.normal(size=(n, 3)) * 0.2
    z = rng.normal(size=(n, cfg.latent_width)) * 0.5
    w_out = rng.normal(size=(n, 3))

    def f(z_t, vel_t):
        pos_hat, _ = net.transition(pos, vel_t, z_t, bnd)
        return tape.tsum(pos_hat * Tensor(w_out))

    return f, [z, vel]


def _make_stage_a_recon(rng: np.random.Generator):
    from .simnet import weighted_recon

    net, cfg, pos, bnd = _tiny_simnet(rng)
    n = pos.shape[0]
    vel = rng.normal(size=(n, 3)) * 0.2
    z0 = rng.normal(size=(n, cfg.latent_width)) * 0.5
    target = pos + rng.uniform(0.02, 0.05, size=(n, 3))  # keep d^2 well off zero
    weights = rng.uniform(0.4, 1.0, size=n)

    def f(z_t):
        pos_hat, _ = net.transition(pos, vel, z_t, bnd)
        return weighted_recon(pos_hat, target, weights)

    return f, [z0]


def _make_gaussian_kl(rng: np.random.Generator):
    from .simnet import LatentField, gaussian_kl

    n, L = 5, 4
    arrays = [rng.normal(size=(n, L)) * 0.7 for _ in range(4)]

    def field(mean_t, raw_t):
        std = tape.softplus(raw_t) + 1e-4
        return LatentField(mean=mean_t, std=std, log_std=tape.log(std))

    def f(mq, rq, mp, rp):
        return tape.tmean(gaussian_kl(field(mq, rq), field(mp, rp)))

    return f, arrays


def simnet_checks() -> list[Check]:
    return [
        Check("encoder_stack", _make_encoder_stack),
        Check("transition_latent", _make_transition_latent),
        Check("stage_a_recon", _make_stage_a_recon),
        Check("gaussian_kl", _make_gaussian_kl),
    ]


# -- renderer --------------------------------------------------------------------


def _render_margins_ok(pos, origins, dirs, branch_depths, cfg) -> bool:
    """True when finite differences cannot cross any render kink.

    Checks every pair distance against both branch support radii (window
    clamp), neighbor counts against the caps (membership flips), pair
    distances against zero (sqrt floor), and the radial deviations against
    their capped mean (absolute-value kink).
    """
    for depths, coarse in branch_depths:
        radius, cap = cfg.branch(coarse)
        x = (origins[:, None, :] + depths[:, :, None] * dirs[:, None, :]).reshape(-1, 3)
        dist = np.linalg.norm(x[:, None, :] - pos[None, :, :], axis=2)
        if (np.abs(dist - radius) < 0.02 * radius).any():
            return False
        inside = dist < radius
        if (inside.sum(axis=1) >= cap).any() or (dist[inside] < 1e-3).any():
            return False
        for row in range(x.shape[0]):
            ds = dist[row, inside[row]]
            if ds.size and (np.abs(ds - ds.sum() / cap) < 1e-3 * radius).any():
                return False
    return True


def _render_instance(rng: np.random.Generator):
    """Small two-ray scene with pinned depths and margin-checked particles."""
    cfg = RenderConfig(
        particle_radius=0.05, n_coarse=3, n_fine=4, near=0.4, far=1.3,
        trunk_width=16, trunk_depth=2, feat_width=8,
    )
    for _ in range(300):
        origins = rng.uniform(-0.05, 0.05, size=(2, 3))
        dirs = rng.standard_normal((2, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        t_c = np.sort(rng.uniform(cfg.near, cfg.far - 0.05, size=(2, 3)), axis=1)
        t_i = np.sort(rng.uniform(cfg.near, cfg.far - 0.05, size=(2, 4)), axis=1)
        t_f = np.sort(np.concatenate([t_c, t_i], axis=1), axis=1)
        x = (origins[:, None, :] + t_f[:, :, None] * dirs[:, None, :]).reshape(-1, 3)
        anchors = x[rng.choice(x.shape[0], size=5, replace=False)]
        offs = rng.standard_normal((5, 3))
        offs /= np.linalg.norm(offs, axis=1, keepdims=True)
        pos = anchors + offs * rng.uniform(0.25, 0.85, size=(5, 1)) * cfg.support_radius
        if _render_margins_ok(pos, origins, dirs, [(t_c, True), (t_f, False)], cfg):
            return cfg, pos, origins, dirs, t_c, t_f
    raise RuntimeError("render check geometry sampling failed")


def _make_render_encode(rng: np.random.Generator):
    cfg, pos, origins, dirs, _, t_f = _render_instance(rng)
    a = rng.normal(size=(t_f.size, 4))
    b = rng.normal(size=(t_f.size, 2))

    def f(pos_t):
        enc = encode_samples(pos_t, origins, dirs, t_f, cfg)
        return tape.add(tape.tsum(tape.mul(enc.ep, a)), tape.tsum(tape.mul(enc.ed, b)))

    return f, [pos]


def _make_render_quadrature(rng: np.random.Generator):
    n_rays, n_samples = 3, 5
    depths = np.sort(rng.uniform(0.2, 1.4, size=(n_rays, n_samples)), axis=1)
    sig_raw = rng.normal(size=(n_rays, n_samples))
    col_raw = rng.normal(size=(n_rays, n_samples, 3))
    bg = rng.uniform(0.0, 1.0, size=3)
    w_out = rng.normal(size=(n_rays, 3))

    def f(sr, cr):
        pix, _ = quadrature(tape.softplus(sr), tape.sigmoid(cr), depths, 1.5, bg)
        return tape.tsum(tape.mul(pix, w_out))

    return f, [sig_raw, col_raw]


def _make_render_pixel(rng: np.random.Generator):
    cfg, pos, origins, dirs, t_c, t_f = _render_instance(rng)
    renderer = build_renderer(ParamStore(), cfg, rng)
    w_c = rng.normal(size=(2, 3))
    w_f = rng.normal(size=(2, 3))

    def f(pos_t):
        res = render_rays(renderer, pos_t, origins, dirs, depths=(t_c, t_f))
        return tape.add(
            tape.tsum(tape.mul(res.coarse, w_c)), tape.tsum(tape.mul(res.fine, w_f))
        )

    return f, [pos]


def _make_voxel_trilinear(rng: np.random.Generator):
    from .initstate import InitStateConfig, trilinear_field

    cfg = InitStateConfig(resolution=4, lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0))
    density = rng.normal(size=(64, 1))
    color = rng.normal(size=(64, 3))
    # fixed query points, so FD only moves the grid values (smooth heads)
    pts = rng.uniform(0.2, 0.8, size=(6, 3))
    w_s = rng.normal(size=(6, 1))
    w_c = rng.normal(size=(6, 3))

    def f(d, c):
        sigma, col = trilinear_field(d, c, cfg, pts)
        return tape.add(tape.tsum(tape.mul(sigma, w_s)), tape.tsum(tape.mul(col, w_c)))

    return f, [density, color]


def render_checks() -> list[Check]:
    return [
        Check("render_encode", _make_render_encode),
        Check("render_quadrature", _make_render_quadrature),
        # step 1e-7: the L=10 positional encoding scales larger steps into relu
        # kink crossings inside the field MLP, where finite differences are
        # invalid; the smaller step keeps FD on one linear piece
        Check("render_pixel", _make_render_pixel, tol=1e-3, step=1e-7),
        Check("voxel_trilinear", _make_voxel_trilinear),
    ]


def all_checks() -> list[Check]:
    return layer_checks() + simnet_checks() + render_checks()
