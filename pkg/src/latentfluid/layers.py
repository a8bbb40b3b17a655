"""Differentiable building blocks for particle networks.

Continuous convolution over particle neighborhoods, GRU cells, MLPs with
optional skip connections, and sinusoidal positional encodings.  All layers
register their parameters in a ParamStore and build tape graphs, so anything
assembled from them is trainable with the reverse-mode machinery in tape.py.
"""

from __future__ import annotations

import math

import numpy as np

from . import tape
from .errors import ContractViolation
from .params import ParamStore
from .spatial import NeighborList, build_grid, query
from .tape import Tensor

__all__ = [
    "Linear",
    "MLP",
    "GRUCell",
    "CConv",
    "cconv_forward",
    "gru_step",
    "mlp_forward",
    "positional_encoding",
    "window_eval",
    "neighbor_list",
    "zero_hidden",
]


# -- initialization -------------------------------------------------------


def _uniform_init(rng: np.random.Generator, n_in: int, n_out: int, shape, gain: float = 1.0):
    limit = gain * math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=shape)


def zero_hidden(n: int, width: int) -> Tensor:
    """Initial recurrent state: zeros, not part of the parameter set."""
    return Tensor(np.zeros((n, width)))


# -- dense layers ----------------------------------------------------------


class Linear:
    def __init__(
        self,
        store: ParamStore,
        name: str,
        n_in: int,
        n_out: int,
        rng: np.random.Generator,
        gain: float = 1.0,
    ):
        self.n_in = n_in
        self.n_out = n_out
        self.weight = store.param(f"{name}.weight", _uniform_init(rng, n_in, n_out, (n_in, n_out), gain))
        self.bias = store.param(f"{name}.bias", np.zeros(n_out))

    def __call__(self, x) -> Tensor:
        x = tape.as_tensor(x)
        if x.value.ndim != 2 or x.value.shape[1] != self.n_in:
            raise ContractViolation(
                f"linear expects input width {self.n_in}, got shape {x.value.shape}"
            )
        return tape.matmul(x, self.weight) + self.bias


_ACTIVATIONS = {
    "relu": tape.relu,
    "tanh": tape.tanh,
    "sigmoid": tape.sigmoid,
    "softplus": tape.softplus,
    "none": lambda t: t,
}


def _activation(name: str | None):
    key = "none" if name is None else name
    if key not in _ACTIVATIONS:
        raise ContractViolation(f"unknown activation {name!r}; choose from {sorted(_ACTIVATIONS)}")
    return _ACTIVATIONS[key]


class MLP:
    """Affine + activation chain.

    widths = [n_in, h1, ..., n_out].  Hidden layers use `activation`; the
    final layer uses `output_activation` (default: none).  Layer indices in
    `skips` receive the original input concatenated onto their input, so a
    skip layer's weight matrix is sized for width + n_in columns.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        widths: list[int],
        rng: np.random.Generator,
        activation: str = "relu",
        output_activation: str | None = None,
        skips: tuple[int, ...] = (),
        final_gain: float = 1.0,
    ):
        if len(widths) < 2:
            raise ContractViolation(f"MLP needs at least [n_in, n_out] widths, got {widths}")
        self.widths = list(widths)
        self.skips = set(skips)
        self.act = _activation(activation)
        self.out_act = _activation(output_activation)
        self.layers: list[Linear] = []
        n_layers = len(widths) - 1
        for i in range(n_layers):
            n_in = widths[i] + (widths[0] if i in self.skips else 0)
            gain = final_gain if i == n_layers - 1 else 1.0
            self.layers.append(Linear(store, f"{name}.l{i}", n_in, widths[i + 1], rng, gain=gain))

    def __call__(self, x) -> Tensor:
        x0 = tape.as_tensor(x)
        h = x0
        last = len(self.layers) - 1
        for i, lin in enumerate(self.layers):
            if i in self.skips:
                h = tape.concat([h, x0], axis=1)
            h = lin(h)
            h = self.out_act(h) if i == last else self.act(h)
        return h


def mlp_forward(mlp: MLP, x) -> Tensor:
    return mlp(x)


class GRUCell:
    """Gated recurrent unit.

    r = sigmoid(W_r [h,x] + b_r), u = sigmoid(W_u [h,x] + b_u),
    c = tanh(W_c [r*h, x] + b_c), h' = (1-u)*h + u*c.
    With all parameters zero this contracts the state: h' = 0.5 h.
    """

    def __init__(self, store: ParamStore, name: str, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.n_in = n_in
        self.n_hidden = n_hidden
        shape = (n_hidden + n_in, n_hidden)
        for gate in ("r", "u", "c"):
            w = store.param(f"{name}.w_{gate}", _uniform_init(rng, shape[0], n_hidden, shape))
            b = store.param(f"{name}.b_{gate}", np.zeros(n_hidden))
            setattr(self, f"w_{gate}", w)
            setattr(self, f"b_{gate}", b)

    def __call__(self, inp, hidden) -> Tensor:
        x = tape.as_tensor(inp)
        h = tape.as_tensor(hidden)
        if x.value.shape[1] != self.n_in or h.value.shape[1] != self.n_hidden:
            raise ContractViolation(
                f"gru_step widths: input {x.value.shape} vs {self.n_in}, "
                f"hidden {h.value.shape} vs {self.n_hidden}"
            )
        hx = tape.concat([h, x], axis=1)
        r = tape.sigmoid(tape.matmul(hx, self.w_r) + self.b_r)
        u = tape.sigmoid(tape.matmul(hx, self.w_u) + self.b_u)
        rhx = tape.concat([r * h, x], axis=1)
        c = tape.tanh(tape.matmul(rhx, self.w_c) + self.b_c)
        return (1.0 - u) * h + u * c


def gru_step(cell: GRUCell, inp, hidden) -> Tensor:
    return cell(inp, hidden)


# -- positional encoding -----------------------------------------------------


def positional_encoding(v, n_freqs: int) -> Tensor:
    """Gamma(v): concatenated (sin(2^l pi v), cos(2^l pi v)) for l = 0..L-1.

    Output width is 2 * n_freqs * dim(v)."""
    if n_freqs < 1:
        raise ContractViolation(f"positional_encoding needs L >= 1, got {n_freqs}")
    v = tape.as_tensor(v)
    parts = []
    for level in range(n_freqs):
        scaled = v * (float(2**level) * math.pi)
        parts.append(tape.sin(scaled))
        parts.append(tape.cos(scaled))
    return tape.concat(parts, axis=1)


# -- radial windows ----------------------------------------------------------


def window_eval(kind: str, distance, radius: float):
    """Radial window weight a(d).  "poly6-cubic" is (1 - d^2/R^2)^3 inside the
    ball and 0 outside; both the value and the first derivative vanish at d=R.
    "none" is identically 1.  Accepts arrays (returns an array) or tape
    tensors (returns a tensor on the graph)."""
    if kind == "none":
        if isinstance(distance, Tensor):
            return tape.as_tensor(np.ones_like(distance.value))
        return np.ones_like(np.asarray(distance, dtype=np.float64))
    if kind != "poly6-cubic":
        raise ContractViolation(f"unknown window kind {kind!r}")
    if isinstance(distance, Tensor):
        m = tape.maximum(1.0 - (distance * distance) * (1.0 / (radius * radius)), 0.0)
        return m * m * m
    d = np.asarray(distance, dtype=np.float64)
    m = np.maximum(1.0 - (d * d) / (radius * radius), 0.0)
    return m * m * m


def _window_from_d2(kind: str, d2: Tensor, radius: float) -> Tensor:
    # Same formulas as window_eval but taking squared distance, which is what
    # the convolution has on hand; avoids a sqrt on the hot path.
    if kind == "none":
        return tape.as_tensor(np.ones_like(d2.value))
    m = tape.maximum(1.0 - d2 * (1.0 / (radius * radius)), 0.0)
    return m * m * m


# -- continuous convolution ---------------------------------------------------


def neighbor_list(query_positions: np.ndarray, source_positions: np.ndarray, radius: float, exclude_self: bool = False) -> NeighborList:
    """Neighbor pairs for a convolution: closed ball of the given radius."""
    grid = build_grid(np.asarray(source_positions, dtype=np.float64), radius)
    return query(grid, np.asarray(query_positions, dtype=np.float64), exclude_self=exclude_self)


class CConv:
    """Continuous convolution over a particle neighborhood.

    Each neighbor offset is mapped from the radius-R ball onto the kernel
    grid (k points per axis) by the ball-to-cube transform
    c = u * |u|_2 / |u|_inf, u = offset / R, and the learned filter tensor is
    interpolated trilinearly at that location.  Contributions are faded by a
    radial window and, when `normalize` is set, divided by the neighbor
    count.  A dense map of the query's own feature is added when the layer
    is built with a self term; there is no bias.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        n_in: int,
        n_out: int,
        radius: float,
        rng: np.random.Generator,
        k: int = 4,
        window: str = "poly6-cubic",
        normalize: bool = True,
        with_self: bool = True,
        gain: float = 1.0,
    ):
        if radius <= 0.0:
            raise ContractViolation(f"convolution radius must be positive, got {radius}")
        if k < 1:
            raise ContractViolation(f"kernel grid needs k >= 1, got {k}")
        self.n_in = n_in
        self.n_out = n_out
        self.radius = float(radius)
        self.k = int(k)
        self.window = window
        self.normalize = bool(normalize)
        self.kernel = store.param(
            f"{name}.kernel",
            _uniform_init(rng, n_in, n_out, (k, k, k, n_in, n_out), gain),
        )
        self.self_weights = (
            store.param(f"{name}.self_weights", _uniform_init(rng, n_in, n_out, (n_in, n_out), gain))
            if with_self
            else None
        )

    def __call__(self, query_positions, source_positions, source_features, nbrs: NeighborList, self_features=None) -> Tensor:
        return cconv_forward(self, query_positions, source_positions, source_features, nbrs, self_features)


def cconv_forward(
    layer: CConv,
    query_positions,
    source_positions,
    source_features,
    nbrs: NeighborList,
    self_features=None,
) -> Tensor:
    qpos = tape.as_tensor(query_positions)
    spos = tape.as_tensor(source_positions)
    feats = tape.as_tensor(source_features)
    n_query = qpos.value.shape[0]
    if feats.value.ndim != 2 or feats.value.shape[1] != layer.n_in:
        raise ContractViolation(
            f"convolution expects feature width {layer.n_in}, got shape {feats.value.shape}"
        )
    k = layer.k
    k3 = k * k * k
    radius = layer.radius

    qid = nbrs.query_ids()
    idx = nbrs.indices
    # Canonical summation order: by query, then by physical relative offset
    # (lexicographic), then source index.  Offsets are geometry rather than
    # labels, so the result is exactly invariant both to pair-list order and
    # to particle relabeling (the index key only breaks coincident-point ties).
    rel_v = spos.value[idx] - qpos.value[qid]
    order = np.lexsort((idx, rel_v[:, 2], rel_v[:, 1], rel_v[:, 0], qid))
    qid = qid[order]
    idx = idx[order]
    n_pairs = qid.shape[0]

    if n_pairs == 0:
        agg = tape.as_tensor(np.zeros((n_query, k3 * layer.n_in)))
    else:
        rel = tape.gather(spos, idx) - tape.gather(qpos, qid)
        d2 = tape.tsum(rel * rel, axis=1, keepdims=True)
        win = _window_from_d2(layer.window, d2, radius)
        feats_nb = tape.gather(feats, idx)

        if k == 1:
            rows = qid
            agg = tape.scatter_add(win * feats_nb, rows, n_query)
        else:
            # Ball-to-cube map; the radius cancels in |u|2/|u|inf.
            n2 = tape.sqrt(tape.maximum(d2, 1e-24))
            ninf = tape.reshape(tape.reduce_max(tape.absval(rel), axis=1), (n_pairs, 1))
            cube = rel * (n2 / (tape.maximum(ninf, 1e-30) * radius))
            g = (cube + 1.0) * (0.5 * (k - 1))
            cell = np.clip(np.floor(g.value).astype(np.int64), 0, k - 2)
            frac = g - cell.astype(np.float64)
            fx = tape.col(frac, 0)
            fy = tape.col(frac, 1)
            fz = tape.col(frac, 2)
            wx = (1.0 - fx, fx)
            wy = (1.0 - fy, fy)
            wz = (1.0 - fz, fz)
            sources = []
            rows_parts = []
            for dx in (0, 1):
                for dy in (0, 1):
                    for dz in (0, 1):
                        w = tape.reshape(wx[dx] * wy[dy] * wz[dz], (n_pairs, 1)) * win
                        sources.append(w * feats_nb)
                        lin = ((cell[:, 0] + dx) * k + (cell[:, 1] + dy)) * k + (cell[:, 2] + dz)
                        rows_parts.append(qid * k3 + lin)
            agg = tape.scatter_add(
                tape.concat(sources, axis=0), np.concatenate(rows_parts), n_query * k3
            )
        agg = tape.reshape(agg, (n_query, k3 * layer.n_in))

    kernel_flat = tape.reshape(layer.kernel, (k3 * layer.n_in, layer.n_out))
    out = tape.matmul(agg, kernel_flat)

    if layer.normalize:
        counts = np.bincount(qid, minlength=n_query).astype(np.float64)
        out = out * (1.0 / np.maximum(counts, 1.0))[:, None]

    if layer.self_weights is not None:
        if self_features is None:
            raise ContractViolation("this convolution has a self term; pass self_features")
        sf = tape.as_tensor(self_features)
        if sf.value.shape != (n_query, layer.n_in):
            raise ContractViolation(
                f"self features must have shape ({n_query}, {layer.n_in}), got {sf.value.shape}"
            )
        out = out + tape.matmul(sf, layer.self_weights)
    return out
