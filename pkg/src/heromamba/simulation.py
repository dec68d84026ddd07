"""Synthetic underwater scenes: clean content, Beer-Lambert transmission and
the single-scattering degradation ``I = J t + B (1 - t)``."""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .spectral import LUMA, luminance

DIFFICULTIES = ("easy", "medium", "hard")

# Per difficulty: scene depth range (near, far), attenuation range for blue
# and the green/red increments over it, clean-image noise level, fraction of
# rows given to open water, and veiling-light ranges (green is capped by blue).
# Easy scenes share one water type; medium and hard vary it widely.
_REGIMES = {
    "easy": dict(depth=(1.5, 2.8), beta_b=(0.12, 0.18), dg=(0.08, 0.15), dr=(0.25, 0.4), texture=0.0,
                 water=(0.0, 0.0), B_r=(0.1, 0.25), B_g=(0.5, 0.7), B_b=(0.7, 0.85)),
    "medium": dict(depth=(0.8, 3.0), beta_b=(0.15, 0.3), dg=(0.1, 0.3), dr=(0.3, 0.8), texture=0.02,
                   water=(0.15, 0.3), B_r=(0.1, 0.35), B_g=(0.5, 0.95), B_b=(0.6, 0.95)),
    "hard": dict(depth=(1.0, 5.0), beta_b=(0.2, 0.4), dg=(0.1, 0.4), dr=(0.4, 1.0), texture=0.04,
                 water=(0.15, 0.3), B_r=(0.1, 0.35), B_g=(0.5, 0.95), B_b=(0.6, 0.95)),
}


@dataclass
class SceneParams:
    """Ground-truth physics of one scene.

    Attributes
    ----------
    B : ndarray, shape (3,)
        Background light in [0, 1].
    beta : ndarray, shape (3,)
        Per-channel attenuation, red >= green >= blue > 0.
    depth : ndarray, shape (H, W)
        Non-negative depth proxy.
    depth_seed : int
        Seed the depth field was drawn from (0 when supplied directly).
    """

    B: np.ndarray
    beta: np.ndarray
    depth: np.ndarray
    depth_seed: int = 0

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=np.float64).reshape(3)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(3)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if (self.B < 0).any() or (self.B > 1).any():
            raise ValueError(f"background light must lie in [0, 1], got {self.B}")
        if not (self.beta[0] >= self.beta[1] >= self.beta[2] > 0):
            raise ValueError(f"attenuation must satisfy red >= green >= blue > 0, got {self.beta}")
        if (self.depth < 0).any():
            raise ValueError("depth must be non-negative")

    @property
    def t(self) -> np.ndarray:
        """Transmission map, 3 x H x W, ``exp(-beta_c * depth)``."""
        return np.exp(-self.beta[:, None, None] * self.depth[None])

    def to_json(self) -> dict:
        return {"B": self.B.tolist(), "beta": self.beta.tolist(), "depth_seed": int(self.depth_seed)}


@dataclass
class ScenePair:
    J: np.ndarray
    I: np.ndarray
    scene: SceneParams
    id: str
    seed: int = 0
    difficulty: str = "easy"


def _check_t(t: np.ndarray) -> None:
    if not np.isfinite(t).all() or (t <= 0).any() or (t > 1).any():
        raise ValueError("transmission must lie in (0, 1]")


def degrade_with(J, t, B) -> np.ndarray:
    """``I = J t + B (1 - t)`` per channel for an explicit transmission map."""
    J = np.asarray(J, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), J.shape)
    _check_t(t)
    if (J < 0).any() or (J > 1).any():
        raise ValueError("clean image must lie in [0, 1]")
    B = np.asarray(B, dtype=np.float64).reshape(3, 1, 1)
    return J * t + B * (1.0 - t)


def degrade(J, scene: SceneParams) -> np.ndarray:
    return degrade_with(J, scene.t, scene.B)


def invert_with(I, t, B, mode: str = "exact", t_min: float = 0.05) -> np.ndarray:
    """Recover J from I given t and B.

    ``exact`` solves the imaging model, ``J = (I - B (1 - t)) / t``, and
    refuses ``t < t_min``. ``approx`` evaluates the first-order estimate
    ``I t + B (1 - t)`` that skip-connection fusion uses, which coincides
    with the exact inverse only where ``t = 1`` or ``J = B``.
    """
    I = np.asarray(I, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), I.shape)
    B = np.asarray(B, dtype=np.float64).reshape(3, 1, 1)
    if mode == "exact":
        if (t < t_min).any():
            raise ValueError(f"transmission below t_min={t_min}; exact inversion is unstable")
        return (I - B * (1.0 - t)) / t
    if mode == "approx":
        return I * t + B * (1.0 - t)
    raise ValueError(f"mode must be 'exact' or 'approx', got {mode!r}")


def invert_degradation(I, scene: SceneParams, mode: str = "exact", t_min: float = 0.05) -> np.ndarray:
    return invert_with(I, scene.t, scene.B, mode, t_min)


# ---------------------------------------------------------------------------
# procedural content
# ---------------------------------------------------------------------------


def _smooth_field(rng: np.random.Generator, size: int, n_waves: int = 4, max_freq: float = 2.0) -> np.ndarray:
    """Sum of random low-frequency plane waves, rescaled to [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    f = np.zeros((size, size))
    for _ in range(n_waves):
        fx, fy = rng.uniform(-max_freq, max_freq, 2)
        f += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    lo, hi = f.min(), f.max()
    return (f - lo) / (hi - lo) if hi > lo else np.zeros_like(f)


def _clean_image(rng: np.random.Generator, size: int, texture: float) -> np.ndarray:
    """Mid-tone colour fields with a few flat shapes and optional noise."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.2, 0.6, 3)[:, None, None]
    J = base + 0.25 * (np.stack([_smooth_field(rng, size) for _ in range(3)]) - 0.5)
    for _ in range(rng.integers(2, 5)):
        color = rng.uniform(0.05, 0.8, 3)[:, None, None]
        cy, cx = rng.uniform(0.25, 0.85, 2)
        r = rng.uniform(0.08, 0.25)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r * rng.uniform(0.5, 1.5))
        J = np.where(mask[None], 0.3 * J + 0.7 * color, J)
    J = J + texture * rng.normal(0.0, 1.0, J.shape)
    return np.clip(J, 0.0, 1.0)


def depth_field(seed: int, size: int, near: float, far: float, water: float,
                water_rows: float = 0.2) -> np.ndarray:
    """Depth map: a scene floor receding towards the top plus smooth relief,
    blending into open water at depth ``water`` over the top ``water_rows``
    fraction of the frame."""
    rng = np.random.default_rng(seed)
    yy = np.mgrid[0:size, 0:size][0] / max(size - 1, 1)
    relief = _smooth_field(rng, size, n_waves=3, max_freq=1.5)
    d = near + (far - near) * np.clip(0.75 * (1.0 - yy) + 0.25 * relief, 0.0, 1.0)
    if water_rows <= 0:
        return d
    # smooth step from open water (top) into the scene
    s = np.clip((yy - water_rows * 0.5) / water_rows, 0.0, 1.0)
    s = s * s * (3 - 2 * s)
    return s * d + (1 - s) * max(water, far)


def sample_scene(rng: np.random.Generator, size: int, difficulty: str = "easy",
                 id: str = "scene", seed: int = 0) -> ScenePair:
    """Draw one clean image, a scene and its degraded rendering from ``rng``."""
    if size < 16 or size & (size - 1):
        raise ValueError(f"size must be a power of two >= 16, got {size}")
    if difficulty not in _REGIMES:
        raise ValueError(f"difficulty must be one of {DIFFICULTIES}, got {difficulty!r}")
    reg = _REGIMES[difficulty]
    J = _clean_image(rng, size, reg["texture"])

    beta_b = rng.uniform(*reg["beta_b"])
    beta_g = beta_b + rng.uniform(*reg["dg"])
    beta_r = beta_g + rng.uniform(*reg["dr"])
    depth_seed = int(rng.integers(0, 2 ** 31 - 1))
    near, far = reg["depth"]
    far = rng.uniform(0.7 * far, far)
    # open water deep enough that even blue keeps at most 10% of the signal
    water = -np.log(0.1) / beta_b
    depth = depth_field(depth_seed, size, near, far, water, rng.uniform(*reg["water"]))
    # blue/green dominant veiling light
    b = rng.uniform(*reg["B_b"])
    g = rng.uniform(reg["B_g"][0], min(b, reg["B_g"][1]))
    r = rng.uniform(*reg["B_r"])
    B = np.array([r, g, b])
    # objects reflect the same ambient light that produces the veil, so the
    # clean scene stays below the open-water luminance
    ceiling = rng.uniform(0.8, 0.95) * float(B @ LUMA)
    J = J * min(1.0, ceiling / float(luminance(J).max()))
    scene = SceneParams(B, np.array([beta_r, beta_g, beta_b]), depth, depth_seed)
    I = degrade(J, scene)
    return ScenePair(J, I, scene, id, seed, difficulty)


def pair_for(seed: int, size: int, difficulty: str, id: str) -> ScenePair:
    return sample_scene(np.random.default_rng(seed), size, difficulty, id=id, seed=seed)


def pair_seed(seed: int, index: int) -> int:
    """Per-pair seed derived from the dataset seed and the pair index."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_dataset(n: int, size: int, seed: int, difficulty: str = "easy") -> tuple[list[ScenePair], dict]:
    """Generate ``n`` pairs and the manifest needed to regenerate them."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    pairs, entries = [], []
    for i in range(n):
        pid = f"pair_{i:04d}"
        ps = pair_seed(seed, i)
        pairs.append(pair_for(ps, size, difficulty, pid))
        entries.append({"id": pid, "seed": ps, "size": size, "difficulty": difficulty})
    manifest = {"version": 1, "seed": seed, "size": size, "difficulty": difficulty, "n": n, "pairs": entries}
    return pairs, manifest


def regenerate(manifest: dict) -> list[ScenePair]:
    return [pair_for(e["seed"], e["size"], e["difficulty"], e["id"]) for e in manifest["pairs"]]


def checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------


def save_dataset(root, pairs: list[ScenePair], manifest: dict, force: bool = False) -> Path:
    """Write ``root/<id>/{clean.png, degraded.png, scene.json}`` and ``manifest.json``.

    An existing non-empty ``root`` is refused unless ``force`` is set, in
    which case it is replaced.
    """
    from .imageio import write_image

    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"{root} already exists and is not empty (use --force)")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    for p in pairs:
        d = root / p.id
        d.mkdir()
        write_image(p.J, d / "clean.png")
        write_image(p.I, d / "degraded.png")
        info = {"id": p.id, "seed": p.seed, "difficulty": p.difficulty, **p.scene.to_json()}
        (d / "scene.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


@dataclass
class LoadedPair:
    id: str
    clean: Optional[np.ndarray]
    degraded: Optional[np.ndarray]
    error: Optional[str] = None


def load_dataset(root) -> tuple[dict, list[LoadedPair]]:
    """Read a dataset directory; pairs that fail to load carry an ``error``."""
    from .imageio import read_image

    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"{mpath} not found")
    try:
        manifest = json.loads(mpath.read_text())
        entries = manifest["pairs"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValueError(f"{mpath}: invalid manifest ({exc})") from exc
    out = []
    for e in entries:
        d = root / e["id"]
        try:
            out.append(LoadedPair(e["id"], read_image(d / "clean.png"), read_image(d / "degraded.png")))
        except (OSError, ValueError) as exc:
            out.append(LoadedPair(e["id"], None, None, str(exc)))
    return manifest, out
