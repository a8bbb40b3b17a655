"""Run configuration: defaults, profiles, file loading, dotted overrides.

A run config is a nested dictionary with a fixed schema; the schema (and the
documented defaults) live in DEFAULTS below, which is the "desk" profile.
The "paper" profile applies the published hyperparameter choices (image
resolution, sample counts, stage budgets, learning rates) on top.  Config
files are TOML; any key not present in the schema is rejected by name, and
values must match the default's type (ints may widen to floats).

Precedence: DEFAULTS < profile < config file < --set overrides.
"""

from __future__ import annotations

import copy
import hashlib
import importlib.resources
import json

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ContractViolation, DataFormatError
from .initstate import InitStateConfig
from .pipeline import StageBConfig, StageCConfig
from .render import RenderConfig, RenderTrainConfig
from .simnet import SimNetConfig, StageAConfig
from .sph import SimConfig
from .synthbench import BenchmarkConfig

DEFAULTS: dict = {
    "profile": "desk",
    "data": {
        "particle_radius": 0.025,
        "box": [1.0, 1.0, 1.0],
        "n_scenes": 4,
        "n_frames": 40,
        "frame_dt": 0.02,
        "block_shape": "cuboid",
        "block_extent": [0.2, 0.3, 0.2],
        "block_rotation": "yaw",
        "block_speed": 0.6,        # horizontal speed range is +-this
        "pillar": False,           # carve the unseen-boundary pillar container
        "seed": 0,
    },
    "simnet": {
        "latent_width": 8,
        "feature_width": 32,
        "hidden_width": 32,
        "kernel_k": 4,
        "conv_radius_scale": 4.5,
        "gravity": [0.0, -9.81, 0.0],
    },
    "stage_a": {
        "iters": 2000,
        "batch": 2,
        "lr": 1e-3,
        "n_input": 2,
        "horizon": 2,
        "kl_scale": 0.1,
        "log_every": 10,
    },
    "render": {
        "image_size": 64,
        "support_scale": 3.0,
        "cap": 20,
        "coarse_scale": 1.3,
        "n_coarse": 8,
        "n_fine": 16,
        "near": 0.3,
        "far": 3.0,
        "scene_scale": 1.0,
        "trunk_width": 64,
        "trunk_depth": 3,
        "feat_width": 32,
        "n_freq_ep": 10,
        "n_freq_ed": 4,
    },
    "render_pretrain": {
        "iters": 600,
        "batch_rays": 256,
        "lr": 3e-4,
        "lr_gamma": 0.1,
        "n_views": 20,
        "focal": 75.0,
        "camera_distance": 1.5,
        "log_every": 50,
    },
    "initstate": {
        "resolution": 32,
        "threshold": 0.5,
        "iters": 300,
        "batch_rays": 1024,
        "n_samples": 48,
        "lr": 0.3,
        "bg_reg": 1.0,
        "margin": 0.05,            # occupancy box inset from the container walls
    },
    "warmup": {
        "iters": 300,
        "batch_rays": 256,
        "lr": 3e-4,
        "lr_gamma": 0.1,
        "log_every": 50,
    },
    "stage_b": {
        "epochs": 60,
        "rays_per_step": 128,
        "lr": 3e-2,
        "lr_schedule": "cosine",
        "mode": "per-particle",
        "mean_scale": 0.5,
        "init_std": 0.5,
        "optimize_velocities": False,
        "log_every": 20,
    },
    "stage_c": {
        "epochs": 40,
        "rays_per_step": 128,
        "lr": 1e-3,
        "lr_schedule": "cosine",
        "kl_scale": 0.01,
        "log_every": 20,
    },
    "pipeline": {
        "heterogeneous": False,
        "n_groups": 1,
        "use_true_initial_state": False,
        "n_rollout_samples": 10,
        "display_scale": 1.0,
    },
    "benchmark": {
        "n_frames": 12,
        "n_views": 4,
        "image_size": 48,
        "block_extent": [0.18, 0.18, 0.18],
        "camera_distance": 1.3,
        "latent_spread": 1.0,
        "scene_seed": 21,
        "holdout_seed": 22,
        "latent_seed": 7,
        "camera_seed": 11,
    },
}

# hyperparameters the paper states explicitly; everything else inherits desk
PAPER_OVERRIDES: dict = {
    "profile": "paper",
    "render": {
        "image_size": 400,
        "n_coarse": 64,
        "n_fine": 128,
        "trunk_width": 128,
        "trunk_depth": 4,
        "feat_width": 64,
    },
    "render_pretrain": {"iters": 100_000, "batch_rays": 1024},
    "warmup": {"iters": 100_000, "batch_rays": 1024, "lr": 3e-4, "lr_gamma": 0.1},
    "stage_b": {"epochs": 2000, "lr": 1e-4, "rays_per_step": 1024},   # ~100k steps
    "stage_c": {"epochs": 1000, "lr": 1e-4, "rays_per_step": 1024},   # ~50k steps
    "data": {"n_frames": 60},
}


def _merge(base: dict, override: dict, prefix: str = "") -> None:
    for key, val in override.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ContractViolation(f"unknown config key {dotted!r}")
        cur = base[key]
        if isinstance(cur, dict):
            if not isinstance(val, dict):
                raise ContractViolation(f"config key {dotted!r} must be a table")
            _merge(cur, val, prefix=dotted + ".")
            continue
        base[key] = _coerce(dotted, cur, val)


def _coerce(dotted: str, default, val):
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise ContractViolation(f"config key {dotted!r} expects a boolean, got {val!r}")
        return val
    if isinstance(default, float) and isinstance(val, (int, float)) and not isinstance(val, bool):
        return float(val)
    if isinstance(default, int) and isinstance(val, int) and not isinstance(val, bool):
        return val
    if isinstance(default, str) and isinstance(val, str):
        return val
    if isinstance(default, list):
        if not isinstance(val, list):
            raise ContractViolation(f"config key {dotted!r} expects a list, got {val!r}")
        return [float(x) if isinstance(default[0], float) else x for x in val]
    raise ContractViolation(
        f"config key {dotted!r} expects {type(default).__name__}, got {type(val).__name__}"
    )


def default_config(profile: str = "desk") -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if profile == "desk":
        return cfg
    if profile == "paper":
        _merge(cfg, copy.deepcopy(PAPER_OVERRIDES))
        return cfg
    raise ContractViolation(f"unknown profile {profile!r} (expected 'desk' or 'paper')")


def parse_set(expr: str) -> tuple[str, object]:
    """One --set override, 'dotted.key=value' with a TOML-literal value."""
    if "=" not in expr:
        raise ContractViolation(f"--set expects key=value, got {expr!r}")
    key, raw = expr.split("=", 1)
    key = key.strip()
    if not key:
        raise ContractViolation(f"--set expects key=value, got {expr!r}")
    try:
        val = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        val = raw.strip()  # bare strings may come unquoted
    return key, val


def apply_set(cfg: dict, key: str, val: object) -> None:
    parts = key.split(".")
    node = cfg
    for i, p in enumerate(parts[:-1]):
        dotted = ".".join(parts[: i + 1])
        if p not in node or not isinstance(node[p], dict):
            raise ContractViolation(f"unknown config key {dotted!r}")
        node = node[p]
    _merge(node, {parts[-1]: val}, prefix=".".join(parts[:-1]) + "." if len(parts) > 1 else "")


def load_config(path=None, sets: list[str] | None = None) -> dict:
    """Config file (optional) plus overrides, on top of its declared profile."""
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise
        except tomllib.TOMLDecodeError as e:
            raise DataFormatError(f"unparseable config {path}: {e}") from e
    profile = data.pop("profile", "desk")
    cfg = default_config(profile)
    cfg["profile"] = profile
    _merge(cfg, data)
    for expr in sets or []:
        key, val = parse_set(expr)
        apply_set(cfg, key, val)
    return cfg


def profile_path(name: str) -> str:
    """Filesystem path of a bundled profile file ('desk' or 'paper')."""
    res = importlib.resources.files("latentfluid") / "profiles" / f"{name}.toml"
    if not res.is_file():
        raise ContractViolation(f"unknown profile {name!r} (expected 'desk' or 'paper')")
    return str(res)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()


# -- dataclass builders ---------------------------------------------------------------


def sim_config(cfg: dict) -> SimConfig:
    return SimConfig(frame_dt=cfg["data"]["frame_dt"])


def simnet_config(cfg: dict) -> SimNetConfig:
    s = cfg["simnet"]
    return SimNetConfig(
        particle_radius=cfg["data"]["particle_radius"],
        latent_width=s["latent_width"],
        feature_width=s["feature_width"],
        hidden_width=s["hidden_width"],
        kernel_k=s["kernel_k"],
        frame_dt=cfg["data"]["frame_dt"],
        gravity=tuple(s["gravity"]),
        conv_radius_scale=s["conv_radius_scale"],
    )


def stage_a_config(cfg: dict, seed: int = 0) -> StageAConfig:
    a = cfg["stage_a"]
    return StageAConfig(
        iters=a["iters"], batch=a["batch"], lr=a["lr"], n_input=a["n_input"],
        horizon=a["horizon"], kl_scale=a["kl_scale"], seed=seed, log_every=a["log_every"],
    )


def render_config(cfg: dict) -> RenderConfig:
    r = cfg["render"]
    return RenderConfig(
        particle_radius=cfg["data"]["particle_radius"],
        support_scale=r["support_scale"], cap=r["cap"], coarse_scale=r["coarse_scale"],
        n_coarse=r["n_coarse"], n_fine=r["n_fine"], near=r["near"], far=r["far"],
        scene_scale=r["scene_scale"], trunk_width=r["trunk_width"],
        trunk_depth=r["trunk_depth"], feat_width=r["feat_width"],
        n_freq_ep=r["n_freq_ep"], n_freq_ed=r["n_freq_ed"],
    )


def render_train_config(cfg: dict, section: str, seed: int = 0) -> RenderTrainConfig:
    t = cfg[section]
    size = cfg["render"]["image_size"]
    kw = dict(
        iters=t["iters"], batch_rays=t["batch_rays"], lr=t["lr"], lr_gamma=t["lr_gamma"],
        width=size, height=size, seed=seed, log_every=t["log_every"],
    )
    if section == "render_pretrain":
        kw.update(n_views=t["n_views"], focal=t["focal"], camera_distance=t["camera_distance"])
    return RenderTrainConfig(**kw)


def initstate_config(cfg: dict, seed: int = 0) -> InitStateConfig:
    i = cfg["initstate"]
    m = i["margin"]
    box = cfg["data"]["box"]
    return InitStateConfig(
        lo=(m, m, m), hi=tuple(b - m for b in box),
        resolution=i["resolution"], particle_radius=cfg["data"]["particle_radius"],
        threshold=i["threshold"], iters=i["iters"], batch_rays=i["batch_rays"],
        n_samples=i["n_samples"], lr=i["lr"], bg_reg=i["bg_reg"], seed=seed,
    )


def stage_b_config(cfg: dict, seed: int = 0) -> StageBConfig:
    b = cfg["stage_b"]
    return StageBConfig(
        epochs=b["epochs"], rays_per_step=b["rays_per_step"], lr=b["lr"],
        lr_schedule=b["lr_schedule"], mode=b["mode"], mean_scale=b["mean_scale"],
        init_std=b["init_std"], optimize_velocities=b["optimize_velocities"],
        seed=seed, log_every=b["log_every"],
    )


def stage_c_config(cfg: dict, seed: int = 0) -> StageCConfig:
    c = cfg["stage_c"]
    return StageCConfig(
        epochs=c["epochs"], rays_per_step=c["rays_per_step"], lr=c["lr"],
        lr_schedule=c["lr_schedule"], kl_scale=c["kl_scale"], seed=seed,
        log_every=c["log_every"],
    )


def benchmark_config(cfg: dict) -> BenchmarkConfig:
    b = cfg["benchmark"]
    return BenchmarkConfig(
        particle_radius=cfg["data"]["particle_radius"], box=tuple(cfg["data"]["box"]),
        block_extent=tuple(b["block_extent"]), n_frames=b["n_frames"],
        n_views=b["n_views"], image_size=b["image_size"],
        camera_distance=b["camera_distance"], camera_seed=b["camera_seed"],
        latent_seed=b["latent_seed"], latent_spread=b["latent_spread"],
        scene_seed=b["scene_seed"], holdout_seed=b["holdout_seed"],
    )
