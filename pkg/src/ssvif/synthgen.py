"""Deterministic paired visible/infrared scenes with exact class maps.

Each scene is a smooth colour-gradient background with a few flat shapes
painted on top in painter's order. The image and the label map are rendered
from the same masks, so they agree by construction.

The modalities are deliberately complementary: in the visible image every
class has its own hue and stripe texture, except the *IR-salient* class whose
colour is an iso-luminant shift of the background (it only differs in
chroma). In the infrared image the IR-salient class is hot and every other
class has a flat, mid-range intensity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError
from .imageio import save_label_pgm, save_pgm, save_ppm

_LUMA = np.array([0.299, 0.587, 0.114])

# fixed visible palette for the non-salient classes, cycled when n_classes is large
_PALETTE = np.array([
    [0.85, 0.25, 0.20],
    [0.20, 0.35, 0.85],
    [0.90, 0.80, 0.20],
    [0.25, 0.75, 0.30],
    [0.75, 0.30, 0.80],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.15],
])

MANIFEST = "synth.txt"


@dataclass(frozen=True)
class SceneSpec:
    width: int = 64
    height: int = 64
    n_classes: int = 4
    objects_per_image: tuple[int, int] = (2, 4)
    seed: int = 0
    noise_std: float = 0.02
    ir_salient_class: int = 1

    def __post_init__(self):
        if self.n_classes < 2:
            raise ContractError("n_classes must be >= 2 (class 0 is background)")
        if self.width < 32 or self.height < 32:
            raise ContractError("scenes must be at least 32x32")
        lo, hi = self.objects_per_image
        if lo < 1 or hi < lo:
            raise ContractError(f"bad objects_per_image range {self.objects_per_image}")
        if not 1 <= self.ir_salient_class < self.n_classes:
            raise ContractError("ir_salient_class must be a foreground class")
        if self.noise_std < 0:
            raise ContractError("noise_std must be non-negative")


@dataclass
class Scene:
    vis: np.ndarray     # [3,H,W] float64 in [0,1]
    ir: np.ndarray      # [1,H,W]
    label: np.ndarray   # [H,W] int
    masks: list         # (class, bool mask) in painting order


def scene_rng(seed: int, index: int) -> np.random.Generator:
    """Per-scene stream, independent of generation order."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _iso_luminant_shift() -> np.ndarray:
    u = np.array([0.6, -0.35, 0.45])
    u = u - (_LUMA @ u) / (_LUMA @ _LUMA) * _LUMA
    return u / np.abs(u).max()


def ir_intensity(cls: int, spec: SceneSpec) -> float:
    if cls == spec.ir_salient_class:
        return 0.92
    others = [c for c in range(1, spec.n_classes) if c != spec.ir_salient_class]
    k = others.index(cls)
    return 0.38 + 0.27 * k / max(1, len(others) - 1)


def _shape_mask(kind: str, rng: np.random.Generator, yy, xx, h: int, w: int) -> np.ndarray:
    if kind == "rect":
        rh, rw = rng.integers(h // 4, h // 2, endpoint=True), rng.integers(w // 4, w // 2, endpoint=True)
        top, left = rng.integers(0, h - rh + 1), rng.integers(0, w - rw + 1)
        return (yy >= top) & (yy < top + rh) & (xx >= left) & (xx < left + rw)
    if kind == "disc":
        r = rng.uniform(min(h, w) / 8, min(h, w) / 4.5)
        cy, cx = rng.uniform(r, h - r), rng.uniform(r, w - r)
        return (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r
    # triangle: three vertices around a random centre
    size = rng.uniform(min(h, w) / 3.5, min(h, w) / 2)
    cy, cx = rng.uniform(size / 2, h - size / 2), rng.uniform(size / 2, w - size / 2)
    angles = rng.uniform(0, 2 * np.pi) + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3]) + rng.uniform(-0.4, 0.4, 3)
    vy, vx = cy + size / 1.6 * np.sin(angles), cx + size / 1.6 * np.cos(angles)
    py, px = yy + 0.5, xx + 0.5
    signs = []
    for i in range(3):
        j = (i + 1) % 3
        signs.append((vx[j] - vx[i]) * (py - vy[i]) - (vy[j] - vy[i]) * (px - vx[i]))
    s = np.stack(signs)
    return np.all(s >= 0, axis=0) | np.all(s <= 0, axis=0)


def render_scene(spec: SceneSpec, index: int) -> Scene:
    rng = scene_rng(spec.seed, index)
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    # low-frequency background
    theta = rng.uniform(0, 2 * np.pi)
    ramp = ((yy - h / 2) * np.sin(theta) + (xx - w / 2) * np.cos(theta)) / max(h, w) + 0.5
    c0 = rng.uniform(0.30, 0.60, 3)
    c1 = rng.uniform(0.30, 0.60, 3)
    vis = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    ir_level = rng.uniform(0.12, 0.22)
    ir = np.full((1, h, w), ir_level) + 0.06 * (ramp - 0.5)
    label = np.zeros((h, w), dtype=np.int64)

    shift = _iso_luminant_shift()
    masks = []
    n_obj = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1], endpoint=True))
    for _ in range(n_obj):
        cls = int(rng.integers(1, spec.n_classes))
        kind = ("rect", "disc", "tri")[int(rng.integers(0, 3))]
        mask = _shape_mask(kind, rng, yy, xx, h, w)
        if cls == spec.ir_salient_class:
            # same luminance as whatever lies underneath, only chroma moves
            colour = vis + 0.22 * shift[:, None, None]
        else:
            base = _PALETTE[(cls - 1) % len(_PALETTE)]
            period = 4 + 2 * ((cls - 1) % 3)
            phase = (xx if cls % 2 else yy) + (yy if cls % 3 == 0 else 0)
            stripes = 0.08 * np.where((phase // (period / 2)) % 2 == 0, 1.0, -1.0)
            colour = base[:, None, None] + stripes[None]
        vis = np.where(mask[None], colour, vis)
        ir = np.where(mask[None], ir_intensity(cls, spec), ir)
        label[mask] = cls
        masks.append((cls, mask))

    vis = np.clip(vis + rng.normal(0, spec.noise_std, vis.shape), 0, 1)
    ir = np.clip(ir + rng.normal(0, spec.noise_std, ir.shape), 0, 1)
    return Scene(vis=vis, ir=ir, label=label, masks=masks)


def write_manifest(spec: SceneSpec, count: int, out_root, start: int = 0) -> None:
    fields = asdict(spec)
    fields["objects_per_image"] = f"{spec.objects_per_image[0]},{spec.objects_per_image[1]}"
    fields["count"] = count
    fields["start"] = start
    text = "".join(f"{k} = {v}\n" for k, v in fields.items())
    (Path(out_root) / MANIFEST).write_text(text)


def read_manifest(root) -> dict[str, str] | None:
    path = Path(root) / MANIFEST
    if not path.exists():
        return None
    out = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def generate(spec: SceneSpec, count: int, out_root, start: int = 0) -> list[str]:
    """Write scenes ``start .. start+count-1`` under ``out_root``; returns the ids.

    A held-out test set is the same stream at a later ``start``.
    """
    if count < 1 or start < 0:
        raise ContractError(f"need count >= 1 and start >= 0, got {count}, {start}")
    out_root = Path(out_root)
    try:
        for sub in ("vis", "ir", "labels"):
            (out_root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directories under {out_root}: {exc}") from exc
    ids = []
    for index in range(start, start + count):
        scene = render_scene(spec, index)
        pid = f"{index:05d}"
        save_ppm(scene.vis, out_root / "vis" / f"{pid}.ppm")
        save_pgm(scene.ir, out_root / "ir" / f"{pid}.pgm")
        save_label_pgm(scene.label, out_root / "labels" / f"{pid}.pgm")
        ids.append(pid)
    write_manifest(spec, count, out_root, start)
    return ids
