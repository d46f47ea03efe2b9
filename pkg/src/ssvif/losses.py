"""Fusion losses and the cross-segmentation consistency (CSC) loss.

Image inputs are RGB tensors ``[3,H,W]`` or batches ``[N,3,H,W]``;
intensity, gradient and SSIM terms work on BT.601 luminance, the colour
term on the Cb/Cr channels. Batched losses are means over the batch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .imageio import rgb_to_ycbcr
from .models import SegPrediction
from .ops import separable_filter_valid, sobel
from .tensor import Tensor, concat, log, maximum, reshape, tabs, tmean, tsum

DEFAULT_FUSION_WEIGHTS = (20.0, 20.0, 10.0, 20.0)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
CE_LOG_EPS = 1e-12


@dataclass
class LossBreakdown:
    l_int: float = 0.0
    l_grad: float = 0.0
    l_ssim: float = 0.0
    l_color: float = 0.0
    l_fusion: float = 0.0
    l_ce: float = 0.0
    l_dice: float = 0.0
    l_hyb_A: float = 0.0
    l_hyb_B: float = 0.0
    l_csc: float = 0.0
    l_total: float = 0.0
    w_csc: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _same_shape(*tensors: Tensor, name: str) -> None:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"{name}: shape mismatch {[t.shape for t in tensors]}")


# -- fusion sub-losses -----------------------------------------------------------

def intensity_loss(fused_y: Tensor, ir_y: Tensor, vis_y: Tensor) -> Tensor:
    """Mean |I_f - max(I_ir, I_vis)| over pixels."""
    _same_shape(fused_y, ir_y, vis_y, name="intensity_loss")
    return tmean(tabs(fused_y - maximum(ir_y, vis_y)))


def gradient_loss(fused_y: Tensor, ir_y: Tensor, vis_y: Tensor) -> Tensor:
    """Mean | |grad I_f| - max(|grad I_ir|, |grad I_vis|) | with Sobel magnitudes."""
    _same_shape(fused_y, ir_y, vis_y, name="gradient_loss")
    return tmean(tabs(sobel(fused_y) - maximum(sobel(ir_y), sobel(vis_y))))


def gaussian_taps(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    g = gaussian_taps(size, sigma)
    return np.outer(g, g)


def ssim_map(x: Tensor, y: Tensor) -> Tensor:
    """Local SSIM over valid 11x11 Gaussian windows of one-channel images."""
    _same_shape(x, y, name="ssim")
    if x.shape[-3] != 1:
        raise DimensionError(f"ssim: expects one-channel images, got {x.shape}")
    h, w = x.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ContractError(f"ssim: image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    batch = x.shape[0] if x.ndim == 4 else 1
    stats = concat([x, y, x * x, y * y, x * y], axis=x.ndim - 3)
    blurred = separable_filter_valid(stats, gaussian_taps())
    ho, wo = blurred.shape[-2:]
    blurred = reshape(blurred, (batch, 5, ho, wo))
    mx, my = blurred[:, 0], blurred[:, 1]
    mxx, myy, mxy = blurred[:, 2], blurred[:, 3], blurred[:, 4]
    mx2, my2, mxmy = mx * mx, my * my, mx * my
    num = (2 * mxmy + SSIM_C1) * (2 * (mxy - mxmy) + SSIM_C2)
    den = (mx2 + my2 + SSIM_C1) * ((mxx - mx2) + (myy - my2) + SSIM_C2)
    return num / den


def ssim(x: Tensor, y: Tensor) -> Tensor:
    """Mean local SSIM (averaged over the batch for batched input)."""
    return tmean(ssim_map(x, y))


def ssim_loss(fused_y: Tensor, ir_y: Tensor, vis_y: Tensor) -> Tensor:
    """Average over both sources of 1 - ssim(fused, source)."""
    _same_shape(fused_y, ir_y, vis_y, name="ssim_loss")
    return 1.0 - 0.5 * (ssim(fused_y, ir_y) + ssim(fused_y, vis_y))


def color_loss(fused_rgb: Tensor, vis_rgb: Tensor) -> Tensor:
    """Mean absolute Cb/Cr difference between the fused and visible images."""
    _same_shape(fused_rgb, vis_rgb, name="color_loss")
    cf = rgb_to_ycbcr(fused_rgb)
    cv = rgb_to_ycbcr(vis_rgb)
    return tmean(tabs(cf[..., 1:3, :, :] - cv[..., 1:3, :, :]))


def fusion_loss(
    fused_rgb: Tensor,
    ir_rgb: Tensor,
    vis_rgb: Tensor,
    weights: Sequence[float] = DEFAULT_FUSION_WEIGHTS,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Weighted sum of intensity, gradient, SSIM and colour losses.

    Returns the scalar loss and the four unweighted components.
    """
    if len(weights) != 4:
        raise ConfigError(f"fusion_loss needs 4 weights, got {len(weights)}")
    if any(w < 0 for w in weights):
        raise ConfigError(f"fusion loss weights must be non-negative, got {tuple(weights)}")
    _same_shape(fused_rgb, ir_rgb, vis_rgb, name="fusion_loss")
    ycc_f = rgb_to_ycbcr(fused_rgb)
    ycc_ir = rgb_to_ycbcr(ir_rgb)
    ycc_vis = rgb_to_ycbcr(vis_rgb)
    y_f, y_ir, y_vis = (t[..., 0:1, :, :] for t in (ycc_f, ycc_ir, ycc_vis))
    parts = {
        "l_int": intensity_loss(y_f, y_ir, y_vis),
        "l_grad": gradient_loss(y_f, y_ir, y_vis),
        "l_ssim": ssim_loss(y_f, y_ir, y_vis),
        "l_color": tmean(tabs(ycc_f[..., 1:3, :, :] - ycc_vis[..., 1:3, :, :])),
    }
    total = None
    for w, term in zip(weights, parts.values()):
        if w == 0:
            continue
        total = term * float(w) if total is None else total + term * float(w)
    if total is None:
        total = parts["l_int"] * 0.0
    return total, parts


# -- cross-segmentation consistency --------------------------------------------------

@dataclass
class PseudoLabel:
    classes: np.ndarray      # [..., H, W] int
    confidence: np.ndarray   # [..., H, W]
    source: np.ndarray       # [..., H, W] str "A" / "B"
    n_classes: int = field(default=0)

    def one_hot(self, dtype=np.float32) -> np.ndarray:
        """[..., n, H, W] indicator of the pseudo class."""
        eye = np.eye(self.n_classes, dtype=dtype)
        return np.moveaxis(eye[self.classes], -1, -3)


def _probs_array(p) -> np.ndarray:
    if isinstance(p, SegPrediction):
        return p.probs.data
    if isinstance(p, Tensor):
        return p.data
    return np.asarray(p)


def build_pseudo_label(pA, pB) -> PseudoLabel:
    """Per pixel, the argmax of the branch with the strictly higher peak probability.

    Ties go to branch B. The result is a constant target: it carries no graph.
    """
    a, b = _probs_array(pA), _probs_array(pB)
    if a.shape != b.shape:
        raise DimensionError(f"pseudo label: branch shapes differ {a.shape} vs {b.shape}")
    ax = a.ndim - 3
    conf_a, conf_b = a.max(axis=ax), b.max(axis=ax)
    take_a = conf_a > conf_b
    classes = np.where(take_a, a.argmax(axis=ax), b.argmax(axis=ax))
    return PseudoLabel(
        classes=classes,
        confidence=np.maximum(conf_a, conf_b),
        source=np.where(take_a, "A", "B"),
        n_classes=a.shape[ax],
    )


def hybrid_loss(
    pred: SegPrediction,
    target: PseudoLabel,
    dice_eps: float = 1e-6,
    ce_normalization: str = "mean",
) -> tuple[Tensor, Tensor, Tensor]:
    """Cross-entropy plus soft Dice against a hard pseudo-label.

    Returns ``(l_hyb, l_ce, l_dice)``. ``ce_normalization="sum"`` keeps the
    per-image pixel sum instead of the pixel mean.
    """
    probs = pred.probs
    if probs.shape[-3] != target.n_classes or probs.shape[:-3] + probs.shape[-2:] != target.classes.shape:
        raise DimensionError(f"hybrid_loss: prediction {probs.shape} vs target {target.classes.shape}")
    ch = probs.ndim - 3
    onehot = Tensor(target.one_hot(probs.dtype.type))
    picked = tsum(probs * onehot, axis=ch)
    nll = -log(picked, CE_LOG_EPS)
    if ce_normalization == "mean":
        l_ce = tmean(nll)
    elif ce_normalization == "sum":
        l_ce = tmean(tsum(nll, axis=(-2, -1))) if nll.ndim == 3 else tsum(nll)
    else:
        raise ConfigError(f"unknown ce_normalization {ce_normalization!r}")

    spatial = (-2, -1)
    inter = tsum(probs * onehot, axis=spatial)
    denom = tsum(probs, axis=spatial) + onehot.data.sum(axis=spatial) + dice_eps
    l_dice = 1.0 - tmean(2.0 * inter / denom)
    return l_ce + l_dice, l_ce, l_dice


def csc_loss(
    pA: SegPrediction,
    pB: SegPrediction,
    dice_eps: float = 1e-6,
    ce_normalization: str = "mean",
) -> tuple[Tensor, PseudoLabel, dict[str, Tensor]]:
    """Mean of the hybrid losses of both branches against the shared pseudo-label."""
    if pA.probs.shape != pB.probs.shape:
        raise DimensionError(f"csc_loss: branch shapes differ {pA.probs.shape} vs {pB.probs.shape}")
    pseudo = build_pseudo_label(pA, pB)
    hyb_a, ce_a, dice_a = hybrid_loss(pA, pseudo, dice_eps, ce_normalization)
    hyb_b, ce_b, dice_b = hybrid_loss(pB, pseudo, dice_eps, ce_normalization)
    parts = {
        "l_hyb_A": hyb_a, "l_ce_A": ce_a, "l_dice_A": dice_a,
        "l_hyb_B": hyb_b, "l_ce_B": ce_b, "l_dice_B": dice_b,
    }
    return 0.5 * (hyb_a + hyb_b), pseudo, parts
