"""Shared test utilities: finite differences, gradient cases, naive oracles."""

from __future__ import annotations

import math

import numpy as np

from ssvif import losses, ops
from ssvif import tensor as T
from ssvif.models import SegPrediction
from ssvif.tensor import Tensor, no_grad

# -- acceptance bookkeeping -------------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, str] = {}


def report(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_RESULTS[criterion] = line
    print(line, flush=True)


# -- finite differences -----------------------------------------------------------

# Entries far below the gradient's own scale are compared against this
# fraction of its largest entry; central differences cannot resolve them
# more finely than roughly eps * |f| / h anyway.
REL_FLOOR = 1e-6


def rel_error(a, n, scale: float = 1.0) -> float:
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR * max(1.0, scale))
    return float(np.max(np.abs(a - n) / den))


def gradcheck(fn, inputs, rng, h=1e-5, max_coords=None, directions=2) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` maps Tensors to a Tensor of any shape; it is reduced to a scalar
    with fixed random weights. Every coordinate is checked unless
    ``max_coords`` limits it to a random subset, in which case ``directions``
    random directional derivatives are checked as well.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    weights = rng.standard_normal(out.shape)
    T.tsum(out * Tensor(weights)).backward()
    analytic = [leaf.grad.copy() for leaf in leaves]
    scale = max(float(np.abs(g).max()) for g in analytic)

    def f(arrays) -> float:
        with no_grad():
            return float((fn(*[Tensor(a) for a in arrays]).data * weights).sum())

    worst = 0.0
    for k, x in enumerate(inputs):
        coords = list(np.ndindex(x.shape))
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in pick]
        for idx in coords:
            arrays = [a.copy() for a in inputs]
            arrays[k][idx] = x[idx] + h
            fp = f(arrays)
            arrays[k][idx] = x[idx] - h
            fm = f(arrays)
            worst = max(worst, rel_error(analytic[k][idx], (fp - fm) / (2 * h), scale))
    if max_coords is not None:
        for _ in range(directions):
            dirs = [rng.standard_normal(x.shape) for x in inputs]
            fp = f([x + h * d for x, d in zip(inputs, dirs)])
            fm = f([x - h * d for x, d in zip(inputs, dirs)])
            exact = sum(float((g * d).sum()) for g, d in zip(analytic, dirs))
            worst = max(worst, rel_error(exact, (fp - fm) / (2 * h), scale))
    return worst


# -- gradient cases ------------------------------------------------------------------
# each builder takes an rng and returns (fn, inputs, max_coords)

def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _separated_pair(rng, shape, margin=0.05):
    a = rng.standard_normal(shape)
    gap = _away_from_zero(rng, shape, margin)
    return a, a + gap


def _probs(rng, shape):
    z = rng.standard_normal(shape) * 1.5
    e = np.exp(z - z.max(axis=-3, keepdims=True))
    return e / e.sum(axis=-3, keepdims=True)


def _img(rng, n, c, h, w):
    return rng.uniform(0.05, 0.95, (n, c, h, w))


def _case_conv(rng):
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, 2))
    k = int(rng.choice([1, 3]))
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(3)
    return (lambda x, w, b: ops.conv2d(x, w, b, stride=stride, padding=pad)), [x, w, b], None


def _case_pad(mode):
    def build(rng):
        return (lambda x: T.pad2d(x, 2, mode=mode)), [rng.standard_normal((2, 5, 6))], None
    return build


def _case_hybrid(rng):
    probs_target = _probs(rng, (2, 3, 6, 6))
    target = losses.build_pseudo_label(probs_target, _probs(rng, (2, 3, 6, 6)))
    logits = rng.standard_normal((2, 3, 6, 6))

    def fn(z):
        return losses.hybrid_loss(SegPrediction.from_logits(z), target)[0]
    return fn, [logits], 48


def _case_ce(rng):
    target = losses.build_pseudo_label(_probs(rng, (3, 5, 5)), _probs(rng, (3, 5, 5)))
    return (lambda z: losses.hybrid_loss(SegPrediction.from_logits(z), target)[1]), [rng.standard_normal((3, 5, 5))], None


def _case_dice(rng):
    target = losses.build_pseudo_label(_probs(rng, (3, 5, 5)), _probs(rng, (3, 5, 5)))
    return (lambda z: losses.hybrid_loss(SegPrediction.from_logits(z), target)[2]), [rng.standard_normal((3, 5, 5))], None


def _case_csc(rng):
    za, zb = rng.standard_normal((2, 2, 3, 6, 6))

    def fn(a, b):
        return losses.csc_loss(SegPrediction.from_logits(a), SegPrediction.from_logits(b))[0]
    return fn, [za, zb], 48


KINK_MARGIN = 1e-3


def _np_sobel(y):
    from ssvif.ops import SOBEL_DELTA
    p = np.pad(y, [(0, 0)] * (y.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    gx = (p[..., :-2, 2:] + 2 * p[..., 1:-1, 2:] + p[..., 2:, 2:]) - (p[..., :-2, :-2] + 2 * p[..., 1:-1, :-2] + p[..., 2:, :-2])
    gy = (p[..., 2:, :-2] + 2 * p[..., 2:, 1:-1] + p[..., 2:, 2:]) - (p[..., :-2, :-2] + 2 * p[..., :-2, 1:-1] + p[..., :-2, 2:])
    return np.sqrt(gx * gx + gy * gy + SOBEL_DELTA)


def _kink_distance(f, a, b):
    """Distance of |f - max(a, b)| from its non-differentiable set."""
    return min(np.abs(a - b).min(), np.abs(f - np.maximum(a, b)).min())


def _smooth_yimgs(rng, n, size, gradient=True):
    # redraw until every abs/max in the intensity and gradient terms is away from its kink
    while True:
        ys = [rng.uniform(0.05, 0.95, (n, 1, size, size)) for _ in range(3)]
        ok = _kink_distance(*ys) > KINK_MARGIN
        if ok and gradient:
            ok = _kink_distance(*[_np_sobel(y) for y in ys]) > KINK_MARGIN
        if ok:
            return ys


def _yimgs(rng, n, size):
    return _smooth_yimgs(rng, n, size)


def _smooth_rgb_triple(rng, size):
    from ssvif.imageio import rgb_to_ycbcr
    while True:
        imgs = [_img(rng, 1, 3, size, size) for _ in range(3)]
        ycc = [rgb_to_ycbcr(x) for x in imgs]
        ys = [c[:, :1] for c in ycc]
        if (_kink_distance(*ys) > KINK_MARGIN
                and _kink_distance(*[_np_sobel(y) for y in ys]) > KINK_MARGIN
                and np.abs(ycc[0][:, 1:] - ycc[2][:, 1:]).min() > KINK_MARGIN):
            return imgs


def _smooth_color_pair(rng):
    from ssvif.imageio import rgb_to_ycbcr
    while True:
        f, v = _img(rng, 2, 3, 6, 6), _img(rng, 2, 3, 6, 6)
        if np.abs(rgb_to_ycbcr(f)[:, 1:] - rgb_to_ycbcr(v)[:, 1:]).min() > KINK_MARGIN:
            return [f, v]


GRAD_CASES = {
    "add": lambda r: (T.add, list(r.standard_normal((2, 3, 4))), None),
    "add_broadcast": lambda r: (T.add, [r.standard_normal((3, 4)), r.standard_normal((1, 4))], None),
    "sub": lambda r: (T.sub, [r.standard_normal((3, 4)), r.standard_normal((3, 1))], None),
    "mul": lambda r: (T.mul, [r.standard_normal((2, 3, 4)), r.standard_normal((3, 4))], None),
    "div": lambda r: (T.div, [r.standard_normal((3, 4)), _away_from_zero(r, (3, 4), 0.3)], None),
    "scalar_mul": lambda r: ((lambda a: T.scalar_mul(a, -1.7)), [r.standard_normal((3, 4))], None),
    "power": lambda r: ((lambda a: T.power(a, 3.0)), [r.standard_normal((3, 4))], None),
    "power_frac": lambda r: ((lambda a: T.power(a, 0.5)), [r.uniform(0.2, 2.0, (3, 4))], None),
    "relu": lambda r: (T.relu, [_away_from_zero(r, (3, 5))], None),
    "sigmoid": lambda r: (T.sigmoid, [r.standard_normal((3, 5)) * 3], None),
    "abs": lambda r: (T.tabs, [_away_from_zero(r, (3, 5))], None),
    "maximum": lambda r: (T.maximum, list(_separated_pair(r, (3, 5))), None),
    "exp": lambda r: (T.exp, [r.standard_normal((3, 5))], None),
    "log": lambda r: (T.log, [r.uniform(0.1, 3.0, (3, 5))], None),
    "log_eps": lambda r: ((lambda a: T.log(a, 1e-3)), [r.uniform(0.01, 1.0, (3, 5))], None),
    "sqrt": lambda r: (T.sqrt, [r.uniform(0.1, 3.0, (3, 5))], None),
    "sum_all": lambda r: ((lambda a: T.tsum(a)), [r.standard_normal((2, 3, 4))], None),
    "sum_axis": lambda r: ((lambda a: T.tsum(a, axis=(0, 2), keepdims=True)), [r.standard_normal((2, 3, 4))], None),
    "mean_axis": lambda r: ((lambda a: T.tmean(a, axis=-1)), [r.standard_normal((2, 3, 4))], None),
    "reshape": lambda r: ((lambda a: T.reshape(a, (4, 6))), [r.standard_normal((2, 3, 4))], None),
    "getitem": lambda r: ((lambda a: a[:, 1:3, ::2]), [r.standard_normal((2, 4, 5))], None),
    "getitem_repeat": lambda r: ((lambda a: a[np.array([0, 2, 0, 1])]), [r.standard_normal((3, 4))], None),
    "concat": lambda r: ((lambda a, b: T.concat([a, b, a], axis=1)), [r.standard_normal((2, 2, 3)), r.standard_normal((2, 1, 3))], None),
    "pad_constant": _case_pad("constant"),
    "pad_edge": _case_pad("edge"),
    "pad_reflect": _case_pad("reflect"),
    "conv2d": _case_conv,
    "conv2d_unbatched": lambda r: ((lambda x, w: ops.conv2d(x, w, padding=1)), [r.standard_normal((2, 5, 4)), r.standard_normal((3, 2, 3, 3))], None),
    "channel_mix": lambda r: ((lambda x: ops.channel_mix(x, r_mat, r_off)), [r.standard_normal((2, 3, 4, 4))], None),
    "separable_filter": lambda r: ((lambda x: ops.separable_filter_valid(x, [0.2, 0.5, 0.3])), [r.standard_normal((2, 2, 6, 7))], None),
    "softmax": lambda r: (ops.softmax_channel, [r.standard_normal((2, 4, 3, 3)) * 2], None),
    "avgpool": lambda r: (ops.avgpool2x, [r.standard_normal((2, 2, 4, 6))], None),
    "upsample": lambda r: (ops.upsample_nearest2x, [r.standard_normal((2, 2, 3, 2))], None),
    "sobel": lambda r: (ops.sobel, [r.uniform(0, 1, (2, 1, 6, 6))], None),
    # losses
    "intensity_loss": lambda r: (losses.intensity_loss, _smooth_yimgs(r, 2, 8, gradient=False), None),
    "gradient_loss": lambda r: (losses.gradient_loss, _yimgs(r, 2, 8), 64),
    "ssim_loss": lambda r: (losses.ssim_loss, _yimgs(r, 1, 12), 64),
    "color_loss": lambda r: (losses.color_loss, _smooth_color_pair(r), None),
    "fusion_loss": lambda r: ((lambda f, i, v: losses.fusion_loss(f, i, v)[0]), _smooth_rgb_triple(r, 12), 48),
    "ce_loss": _case_ce,
    "dice_loss": _case_dice,
    "hybrid_loss": _case_hybrid,
    "csc_loss": _case_csc,
}

r_mat = np.array([[0.3, -0.2, 0.5], [1.1, 0.0, -0.7], [0.25, 0.25, 0.5]])
r_off = np.array([0.1, -0.2, 0.5])

LOSS_CASES = [name for name in GRAD_CASES if name.endswith("_loss")]


def run_grad_case(name: str, instances: int, seed: int = 0) -> float:
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i, sum(map(ord, name))])
        fn, inputs, max_coords = GRAD_CASES[name](rng)
        worst = max(worst, gradcheck(fn, inputs, rng, max_coords=max_coords))
    return worst


# -- naive per-pixel oracles ----------------------------------------------------------

def naive_luma(rgb, y, x):
    return 0.299 * rgb[0][y][x] + 0.587 * rgb[1][y][x] + 0.114 * rgb[2][y][x]


def naive_cbcr(rgb, y, x):
    lum = naive_luma(rgb, y, x)
    return 0.5 + 0.564 * (rgb[2][y][x] - lum), 0.5 + 0.713 * (rgb[0][y][x] - lum)


def naive_intensity_loss(f, ir, vis):
    h, w = len(f[0]), len(f[0][0])
    total = 0.0
    for y in range(h):
        for x in range(w):
            total += abs(naive_luma(f, y, x) - max(naive_luma(ir, y, x), naive_luma(vis, y, x)))
    return total / (h * w)


def _clamped(img, y, x):
    h, w = len(img), len(img[0])
    return img[min(max(y, 0), h - 1)][min(max(x, 0), w - 1)]


def naive_sobel_xy(img, y, x):
    """Sobel responses with replicated borders on a 2-D list image."""
    kx = ((-1, 0, 1), (-2, 0, 2), (-1, 0, 1))
    gx = gy = 0.0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            v = _clamped(img, y + dy, x + dx)
            gx += kx[dy + 1][dx + 1] * v
            gy += kx[dx + 1][dy + 1] * v
    return gx, gy


def _luma_plane(rgb):
    h, w = len(rgb[0]), len(rgb[0][0])
    return [[naive_luma(rgb, y, x) for x in range(w)] for y in range(h)]


def naive_gradient_loss(f, ir, vis):
    planes = [_luma_plane(img) for img in (f, ir, vis)]
    h, w = len(planes[0]), len(planes[0][0])
    total = 0.0
    for y in range(h):
        for x in range(w):
            mags = []
            for p in planes:
                gx, gy = naive_sobel_xy(p, y, x)
                mags.append(math.sqrt(gx * gx + gy * gy + 1e-12))
            total += abs(mags[0] - max(mags[1], mags[2]))
    return total / (h * w)


def naive_color_loss(f, vis):
    h, w = len(f[0]), len(f[0][0])
    total = 0.0
    for y in range(h):
        for x in range(w):
            cbf, crf = naive_cbcr(f, y, x)
            cbv, crv = naive_cbcr(vis, y, x)
            total += abs(cbf - cbv) + abs(crf - crv)
    return total / (2 * h * w)


def naive_pseudo_label(pa, pb, y, x):
    """(class, source) at one pixel of [n][H][W] probability lists."""
    n = len(pa)
    col_a = [pa[c][y][x] for c in range(n)]
    col_b = [pb[c][y][x] for c in range(n)]
    if max(col_a) > max(col_b):
        return col_a.index(max(col_a)), "A"
    return col_b.index(max(col_b)), "B"


def naive_ce(p, labels):
    h, w = len(labels), len(labels[0])
    return sum(-math.log(p[labels[y][x]][y][x] + 1e-12) for y in range(h) for x in range(w)) / (h * w)


def naive_dice(p, labels, eps=1e-6):
    n, h, w = len(p), len(labels), len(labels[0])
    ratios = []
    for c in range(n):
        inter = sum(p[c][y][x] for y in range(h) for x in range(w) if labels[y][x] == c)
        psum = sum(p[c][y][x] for y in range(h) for x in range(w))
        count = sum(1 for y in range(h) for x in range(w) if labels[y][x] == c)
        ratios.append(2 * inter / (psum + count + eps))
    return 1 - sum(ratios) / n


def naive_labels(pa, pb):
    h, w = len(pa[0]), len(pa[0][0])
    return [[naive_pseudo_label(pa, pb, y, x)[0] for x in range(w)] for y in range(h)]


def naive_csc(pa, pb):
    labels = naive_labels(pa, pb)
    hyb_a = naive_ce(pa, labels) + naive_dice(pa, labels)
    hyb_b = naive_ce(pb, labels) + naive_dice(pb, labels)
    return 0.5 * (hyb_a + hyb_b)


def naive_qabf(f, a, b):
    """Edge-transfer quality on 2-D list images, one pixel at a time."""
    h, w = len(f), len(f[0])

    def edge(img, y, x):
        gx, gy = naive_sobel_xy(img, y, x)
        strength = math.sqrt(gx * gx + gy * gy)
        angle = math.pi / 2 if gx == 0 else math.atan(gy / gx)
        return strength, angle

    def preserve(gs, as_, gf, af):
        if gs == 0 and gf == 0:
            g_ratio = 0.0
        elif gs > gf:
            g_ratio = gf / gs
        else:
            g_ratio = gs / gf
        a_ratio = 1 - abs(as_ - af) / (math.pi / 2)
        qg = 0.9994 / (1 + math.exp(-15 * (g_ratio - 0.5)))
        qa = 0.9879 / (1 + math.exp(-22 * (a_ratio - 0.8)))
        return qg * qa

    num = den = 0.0
    for y in range(h):
        for x in range(w):
            gf, af = edge(f, y, x)
            ga, aa = edge(a, y, x)
            gb, ab = edge(b, y, x)
            num += preserve(ga, aa, gf, af) * ga + preserve(gb, ab, gf, af) * gb
            den += ga + gb
    return 0.0 if den == 0 else num / den


def random_probs(rng, n, h, w):
    return _probs(rng, (n, h, w))
