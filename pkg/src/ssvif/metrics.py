"""Fusion-quality and segmentation metrics (evaluation only, no gradients).

Luminance-based metrics use BT.601 Y. Histogram metrics (EN, MI) work on
8-bit values; SSIM and Q_abf on floats in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ContractError, DimensionError
from .imageio import luminance
from .losses import ssim as _ssim
from .tensor import Tensor, no_grad

# Q_abf sigmoid constants
QABF_GAMMA_G, QABF_KAPPA_G, QABF_SIGMA_G = 0.9994, -15.0, 0.5
QABF_GAMMA_A, QABF_KAPPA_A, QABF_SIGMA_A = 0.9879, -22.0, 0.8

# sRGB / D65 reference white
_SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_D65_WHITE = np.array([0.95047, 1.0, 1.08883])


def to_u8(gray) -> np.ndarray:
    """Round [0,1] floats to 8-bit levels (values outside are clipped)."""
    arr = np.asarray(gray, dtype=np.float64)
    return np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _gray2d(img, name: str) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise DimensionError(f"{name}: expected a single-channel image, got shape {arr.shape}")
    return arr


# -- information metrics ----------------------------------------------------------

def entropy(img_u8) -> float:
    """Shannon entropy in bits of the 256-bin histogram."""
    arr = np.asarray(img_u8)
    if arr.size == 0:
        raise ContractError("entropy of an empty image")
    counts = np.bincount(arr.astype(np.uint8).ravel(), minlength=256)
    p = counts[counts > 0] / arr.size
    return float(-(p * np.log2(p)).sum()) + 0.0


def mutual_information_pair(x_u8, y_u8) -> float:
    x, y = np.asarray(x_u8), np.asarray(y_u8)
    if x.shape != y.shape:
        raise DimensionError(f"mutual information: shapes differ {x.shape} vs {y.shape}")
    if x.size == 0:
        raise ContractError("mutual information of empty images")
    joint = np.bincount(x.astype(np.int64).ravel() * 256 + y.astype(np.int64).ravel(), minlength=65536)
    pxy = joint.reshape(256, 256) / x.size
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    return float((pxy[nz] * np.log2(pxy[nz] / (px @ py)[nz])).sum())


def mutual_information(fused_u8, a_u8, b_u8) -> float:
    """MI(F, A) + MI(F, B)."""
    return mutual_information_pair(fused_u8, a_u8) + mutual_information_pair(fused_u8, b_u8)


# -- structural metrics -----------------------------------------------------------

def ssim_metric(x, y) -> float:
    """Mean local SSIM of two luminance images, same kernel as the loss."""
    xa = _gray2d(x, "ssim_metric").astype(np.float64)
    ya = _gray2d(y, "ssim_metric").astype(np.float64)
    if xa.shape != ya.shape:
        raise DimensionError(f"ssim_metric: shapes differ {xa.shape} vs {ya.shape}")
    with no_grad():
        return _ssim(Tensor(xa[None]), Tensor(ya[None])).item()


def _sobel_np(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.pad(img, 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    return gx, gy


def edge_strength_orientation(img) -> tuple[np.ndarray, np.ndarray]:
    gx, gy = _sobel_np(np.asarray(img, dtype=np.float64))
    g = np.sqrt(gx * gx + gy * gy)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(gx == 0, math.pi / 2, np.arctan(gy / np.where(gx == 0, 1.0, gx)))
    return g, alpha


def _edge_preservation(g_src, a_src, g_f, a_f) -> np.ndarray:
    hi = np.maximum(g_src, g_f)
    lo = np.minimum(g_src, g_f)
    ratio = np.divide(lo, hi, out=np.zeros_like(hi), where=hi > 0)
    angle = 1.0 - np.abs(a_src - a_f) / (math.pi / 2)
    qg = QABF_GAMMA_G / (1.0 + np.exp(QABF_KAPPA_G * (ratio - QABF_SIGMA_G)))
    qa = QABF_GAMMA_A / (1.0 + np.exp(QABF_KAPPA_A * (angle - QABF_SIGMA_A)))
    return qg * qa


def qabf(fused, ir, vis) -> float:
    """Edge-information transfer from both sources into the fused image, in [0,1]."""
    f = _gray2d(fused, "qabf")
    a = _gray2d(ir, "qabf")
    b = _gray2d(vis, "qabf")
    if not f.shape == a.shape == b.shape:
        raise DimensionError(f"qabf: shapes differ {f.shape}, {a.shape}, {b.shape}")
    gf, af = edge_strength_orientation(f)
    ga, aa = edge_strength_orientation(a)
    gb, ab = edge_strength_orientation(b)
    den = float((ga + gb).sum())
    if den == 0:
        return 0.0
    num = float((_edge_preservation(ga, aa, gf, af) * ga + _edge_preservation(gb, ab, gf, af) * gb).sum())
    return num / den


# -- colour -----------------------------------------------------------------------

def srgb_to_lab(rgb) -> np.ndarray:
    """[3,...] sRGB in [0,1] -> CIELAB (D65, 2 degree observer) on axis 0."""
    arr = np.asarray(rgb, dtype=np.float64)
    if arr.shape[0] != 3:
        raise DimensionError(f"srgb_to_lab: expected [3,H,W], got {arr.shape}")
    lin = np.where(arr <= 0.04045, arr / 12.92, ((arr + 0.055) / 1.055) ** 2.4)
    xyz = np.tensordot(_SRGB_TO_XYZ, lin, axes=1) / _D65_WHITE.reshape((3,) + (1,) * (arr.ndim - 1))
    eps, kappa = 216 / 24389, 24389 / 27
    f = np.where(xyz > eps, np.cbrt(xyz), (kappa * xyz + 16) / 116)
    return np.stack([116 * f[1] - 16, 500 * (f[0] - f[1]), 200 * (f[1] - f[2])])


def ciede2000(lab1, lab2) -> np.ndarray:
    """CIEDE2000 colour difference, kL = kC = kH = 1. Lab on axis 0."""
    L1, a1, b1 = (np.asarray(v, dtype=np.float64) for v in lab1)
    L2, a2, b2 = (np.asarray(v, dtype=np.float64) for v in lab2)
    c1 = np.hypot(a1, b1)
    c2 = np.hypot(a2, b2)
    c_bar7 = ((c1 + c2) / 2) ** 7
    g = 0.5 * (1 - np.sqrt(c_bar7 / (c_bar7 + 25.0 ** 7)))
    a1p, a2p = (1 + g) * a1, (1 + g) * a2
    c1p, c2p = np.hypot(a1p, b1), np.hypot(a2p, b2)
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360
    h1p = np.where((b1 == 0) & (a1p == 0), 0.0, h1p)
    h2p = np.where((b2 == 0) & (a2p == 0), 0.0, h2p)

    dL = L2 - L1
    dC = c2p - c1p
    both = c1p * c2p != 0
    dh = h2p - h1p
    dh = np.where(dh > 180, dh - 360, np.where(dh < -180, dh + 360, dh))
    dh = np.where(both, dh, 0.0)
    dH = 2 * np.sqrt(c1p * c2p) * np.sin(np.radians(dh / 2))

    L_bar = (L1 + L2) / 2
    C_bar = (c1p + c2p) / 2
    h_sum = h1p + h2p
    h_bar = np.where(
        np.abs(h1p - h2p) <= 180, h_sum / 2,
        np.where(h_sum < 360, (h_sum + 360) / 2, (h_sum - 360) / 2),
    )
    h_bar = np.where(both, h_bar, h_sum)
    t = (1 - 0.17 * np.cos(np.radians(h_bar - 30)) + 0.24 * np.cos(np.radians(2 * h_bar))
         + 0.32 * np.cos(np.radians(3 * h_bar + 6)) - 0.20 * np.cos(np.radians(4 * h_bar - 63)))
    d_theta = 30 * np.exp(-(((h_bar - 275) / 25) ** 2))
    c_bar7p = C_bar ** 7
    r_c = 2 * np.sqrt(c_bar7p / (c_bar7p + 25.0 ** 7))
    s_l = 1 + 0.015 * (L_bar - 50) ** 2 / np.sqrt(20 + (L_bar - 50) ** 2)
    s_c = 1 + 0.045 * C_bar
    s_h = 1 + 0.015 * C_bar * t
    r_t = -np.sin(np.radians(2 * d_theta)) * r_c
    return np.sqrt(
        (dL / s_l) ** 2 + (dC / s_c) ** 2 + (dH / s_h) ** 2 + r_t * (dC / s_c) * (dH / s_h)
    )


def delta_e(fused_rgb, vis_rgb) -> float:
    """Mean CIEDE2000 between two [3,H,W] sRGB images."""
    f = np.asarray(fused_rgb, dtype=np.float64)
    v = np.asarray(vis_rgb, dtype=np.float64)
    if f.shape != v.shape:
        raise DimensionError(f"delta_e: shapes differ {f.shape} vs {v.shape}")
    return float(ciede2000(srgb_to_lab(f), srgb_to_lab(v)).mean())


# -- segmentation -----------------------------------------------------------------

def confusion_matrix(pred, gt, n: int) -> np.ndarray:
    """``n x n`` counts with rows = ground truth, columns = prediction."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"confusion matrix: shapes differ {pred.shape} vs {gt.shape}")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise ContractError(f"{name} holds class indices outside [0, {n})")
    idx = gt.astype(np.int64).ravel() * n + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=n * n).reshape(n, n)


def iou_from_confusion(conf: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN for classes absent from both maps) and their mean."""
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    iou = np.full(conf.shape[0], np.nan)
    present = union > 0
    iou[present] = inter[present] / union[present]
    return iou, float(np.nanmean(iou)) if present.any() else math.nan


def miou(pred, gt, n: int) -> tuple[np.ndarray, float]:
    return iou_from_confusion(confusion_matrix(pred, gt, n))


def matched_miou(pred, gt, n: int) -> tuple[float, np.ndarray]:
    """mIoU after relabelling predicted clusters to classes by Hungarian matching.

    Self-supervised heads produce clusters with arbitrary indices; the
    one-to-one assignment maximising total IoU is applied before scoring.
    Returns ``(mIoU, mapping)`` where ``mapping[cluster] = class``.
    """
    conf = confusion_matrix(pred, gt, n)
    inter = conf.T.astype(np.float64)  # [cluster, class]
    union = conf.sum(axis=0)[:, None] + conf.sum(axis=1)[None, :] - inter
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    rows, cols = linear_sum_assignment(-iou)
    mapping = np.empty(n, dtype=np.int64)
    mapping[rows] = cols
    _, value = miou(mapping[np.asarray(pred)], gt, n)
    return value, mapping


# -- reports ----------------------------------------------------------------------

@dataclass
class FusionScores:
    en: float
    mi: float
    ssim: float
    qabf: float
    delta_e: float


def fusion_scores(fused_rgb, ir_rgb, vis_rgb) -> FusionScores:
    """All five fusion metrics for one image triple ([3,H,W] floats)."""
    yf = luminance(np.asarray(fused_rgb, dtype=np.float64))
    yi = luminance(np.asarray(ir_rgb, dtype=np.float64))
    yv = luminance(np.asarray(vis_rgb, dtype=np.float64))
    return FusionScores(
        en=entropy(to_u8(yf)),
        mi=mutual_information(to_u8(yf), to_u8(yi), to_u8(yv)),
        ssim=0.5 * (ssim_metric(yf, yi) + ssim_metric(yf, yv)),
        qabf=qabf(yf, yi, yv),
        delta_e=delta_e(fused_rgb, vis_rgb),
    )


@dataclass
class MetricReport:
    ids: list[str] = field(default_factory=list)
    per_image: list[FusionScores] = field(default_factory=list)
    confusion: np.ndarray | None = None
    iou: np.ndarray | None = None
    miou: float = math.nan

    def add(self, pair_id: str, scores: FusionScores) -> None:
        self.ids.append(pair_id)
        self.per_image.append(scores)

    def means(self) -> dict[str, float]:
        if not self.per_image:
            return {}
        keys = ("en", "mi", "ssim", "qabf", "delta_e")
        return {k: float(np.mean([getattr(s, k) for s in self.per_image])) for k in keys}

    def set_segmentation(self, conf: np.ndarray) -> None:
        self.confusion = conf
        self.iou, self.miou = iou_from_confusion(conf)

    def lines(self) -> list[str]:
        out = ["id\ten\tmi\tssim\tqabf\tdelta_e"]
        for pid, s in zip(self.ids, self.per_image):
            out.append(f"{pid}\t{s.en:.6f}\t{s.mi:.6f}\t{s.ssim:.6f}\t{s.qabf:.6f}\t{s.delta_e:.6f}")
        means = self.means()
        if means:
            out.append("mean\t" + "\t".join(f"{means[k]:.6f}" for k in ("en", "mi", "ssim", "qabf", "delta_e")))
        if self.confusion is not None:
            for c, v in enumerate(self.iou):
                out.append(f"iou_class_{c}\t{v:.6f}")
            out.append(f"miou\t{self.miou:.6f}")
        return out
