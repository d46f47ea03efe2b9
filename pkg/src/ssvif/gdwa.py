"""Epoch-level weighting of the CSC loss against the fusion loss.

GDWA combines two signals per task k (A = fusion, B = CSC):

* the gradient norm on the shared fusion-model parameters, normalised so
  that ``gt_A + gt_B = 1``;
* the descent rate ``r_k = L_k(epoch j) / L_k(epoch j-1)``, turned into
  weights ``s_k`` by a temperature softmax.

``lambda_k`` is proportional to ``gt_k * s_k`` and the CSC weight is
``lambda_B / lambda_A``, clamped to ``[OMEGA_MIN, OMEGA_MAX]``.

DWA (descent rate only) and a fixed weight are provided as baselines.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields

from .errors import ConfigError, ContractError, DivergenceError

log = logging.getLogger(__name__)

OMEGA_MIN = 0.01
OMEGA_MAX = 100.0
SCHEDULERS = ("gdwa", "dwa", "fixed")


@dataclass
class GdwaState:
    temperature: float = 2.0
    # running sums for the current epoch
    g_sum_A: float = 0.0
    g_sum_B: float = 0.0
    g_count: int = 0
    loss_sum_A: float = 0.0
    loss_sum_B: float = 0.0
    loss_count: int = 0
    # epoch-mean losses; NaN until the first epoch closes
    prev_loss_A: float = math.nan
    prev_loss_B: float = math.nan
    curr_loss_A: float = math.nan
    curr_loss_B: float = math.nan
    # last computed quantities
    last_g_A: float = math.nan
    last_g_B: float = math.nan
    last_r_A: float = 1.0
    last_r_B: float = 1.0
    lambda_A: float = 0.5
    lambda_B: float = 0.5
    omega: float = 1.0
    epoch_index: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"GDWA temperature must be positive, got {self.temperature}")

    @property
    def g_A(self) -> float:
        return self.g_sum_A / self.g_count if self.g_count else math.nan

    @property
    def g_B(self) -> float:
        return self.g_sum_B / self.g_count if self.g_count else math.nan

    @property
    def mean_loss_A(self) -> float:
        return self.loss_sum_A / self.loss_count if self.loss_count else math.nan

    @property
    def mean_loss_B(self) -> float:
        return self.loss_sum_B / self.loss_count if self.loss_count else math.nan

    def to_meta(self, prefix: str = "gdwa.") -> dict[str, str]:
        return {prefix + f.name: repr(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_meta(cls, meta: dict[str, str], prefix: str = "gdwa.") -> "GdwaState":
        kwargs = {}
        for f in fields(cls):
            raw = meta.get(prefix + f.name)
            if raw is None:
                continue
            kwargs[f.name] = int(raw) if f.type in ("int", int) else float(raw)
        return cls(**kwargs)


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


def accumulate_step(
    state: GdwaState,
    grad_norm_fusion: float | None,
    grad_norm_csc: float | None,
    loss_fusion: float,
    loss_csc: float,
) -> None:
    """Fold one training step into the epoch running means.

    Norms may be ``None`` on steps where they were not measured.
    """
    if not _finite(loss_fusion, loss_csc):
        raise DivergenceError(f"non-finite loss (fusion={loss_fusion}, csc={loss_csc})")
    if grad_norm_fusion is not None or grad_norm_csc is not None:
        if grad_norm_fusion is None or grad_norm_csc is None:
            raise ContractError("both gradient norms must be given together")
        if not _finite(grad_norm_fusion, grad_norm_csc):
            raise DivergenceError(f"non-finite gradient norm ({grad_norm_fusion}, {grad_norm_csc})")
        if grad_norm_fusion < 0 or grad_norm_csc < 0:
            raise ContractError("gradient norms are non-negative")
        state.g_sum_A += grad_norm_fusion
        state.g_sum_B += grad_norm_csc
        state.g_count += 1
    state.loss_sum_A += loss_fusion
    state.loss_sum_B += loss_csc
    state.loss_count += 1


def normalized_norms(g_a: float, g_b: float) -> tuple[float, float]:
    total = g_a + g_b
    if total <= 0:
        log.warning("both task gradient norms are zero; using equal gradient weights")
        return 0.5, 0.5
    # divide separately: 1 - gt_a would cancel when one norm dominates
    return g_a / total, g_b / total


def descent_softmax(r_a: float, r_b: float, temperature: float) -> tuple[float, float]:
    # subtract the max before exponentiating
    m = max(r_a, r_b) / temperature
    ea, eb = math.exp(r_a / temperature - m), math.exp(r_b / temperature - m)
    return ea / (ea + eb), eb / (ea + eb)


def gdwa_weights(g_a: float, g_b: float, r_a: float, r_b: float, temperature: float) -> tuple[float, float, float]:
    """Return ``(lambda_A, lambda_B, omega)`` with omega unclamped."""
    gt_a, gt_b = normalized_norms(g_a, g_b)
    s_a, s_b = descent_softmax(r_a, r_b, temperature)
    z = gt_a * s_a + gt_b * s_b
    lam_a, lam_b = gt_a * s_a / z, gt_b * s_b / z
    omega = lam_b / lam_a if lam_a > 0 else math.inf
    return lam_a, lam_b, omega


def clamp_omega(omega: float) -> float:
    return min(max(omega, OMEGA_MIN), OMEGA_MAX)


def _close_epoch(state: GdwaState) -> tuple[float, float]:
    """Shift epoch-mean losses into history; return the descent rates."""
    if state.loss_count == 0:
        raise ContractError("no steps accumulated this epoch")
    state.prev_loss_A, state.prev_loss_B = state.curr_loss_A, state.curr_loss_B
    state.curr_loss_A, state.curr_loss_B = state.mean_loss_A, state.mean_loss_B
    if _finite(state.prev_loss_A, state.prev_loss_B) and state.prev_loss_A > 0 and state.prev_loss_B > 0:
        r_a = state.curr_loss_A / state.prev_loss_A
        r_b = state.curr_loss_B / state.prev_loss_B
    else:
        r_a = r_b = 1.0
    state.last_r_A, state.last_r_B = r_a, r_b
    return r_a, r_b


def _reset(state: GdwaState) -> None:
    state.g_sum_A = state.g_sum_B = 0.0
    state.loss_sum_A = state.loss_sum_B = 0.0
    state.g_count = state.loss_count = 0
    state.epoch_index += 1


def end_of_epoch_update(state: GdwaState) -> float:
    """Compute the next epoch's CSC weight from this epoch's statistics."""
    if state.g_count == 0:
        raise ContractError("GDWA update needs at least one gradient-norm sample this epoch")
    g_a, g_b = state.g_A, state.g_B
    r_a, r_b = _close_epoch(state)
    lam_a, lam_b, omega = gdwa_weights(g_a, g_b, r_a, r_b, state.temperature)
    state.last_g_A, state.last_g_B = g_a, g_b
    state.lambda_A, state.lambda_B = lam_a, lam_b
    state.omega = clamp_omega(omega)
    _reset(state)
    return state.omega


def dwa_weights(r_a: float, r_b: float, temperature: float) -> tuple[float, float, float]:
    """DWA: lambda_k = K * softmax(r / T)_k with K = 2 tasks."""
    s_a, s_b = descent_softmax(r_a, r_b, temperature)
    return 2 * s_a, 2 * s_b, s_b / s_a


def dwa_update(state: GdwaState) -> float:
    r_a, r_b = _close_epoch(state)
    lam_a, lam_b, omega = dwa_weights(r_a, r_b, state.temperature)
    state.lambda_A, state.lambda_B = lam_a, lam_b
    state.omega = clamp_omega(omega)
    _reset(state)
    return state.omega


def fixed_update(w: float) -> float:
    if not w > 0:
        raise ConfigError(f"fixed CSC weight must be positive, got {w}")
    return w


class WeightScheduler:
    """Trainer-facing wrapper choosing between GDWA, DWA and a fixed weight."""

    def __init__(self, kind: str = "gdwa", temperature: float = 2.0, fixed_weight: float = 0.1):
        if kind not in SCHEDULERS:
            raise ConfigError(f"unknown scheduler {kind!r}; choose one of {', '.join(SCHEDULERS)}")
        self.kind = kind
        self.fixed_weight = fixed_update(fixed_weight) if kind == "fixed" else fixed_weight
        self.state = GdwaState(temperature=temperature)
        # neutral weight until the first Stage-II epoch has produced statistics
        self.state.omega = self.fixed_weight if kind == "fixed" else 1.0

    @property
    def omega(self) -> float:
        return self.state.omega

    @property
    def needs_grad_norms(self) -> bool:
        return self.kind == "gdwa"

    def accumulate(self, norm_fusion, norm_csc, loss_fusion: float, loss_csc: float) -> None:
        accumulate_step(self.state, norm_fusion, norm_csc, loss_fusion, loss_csc)

    def end_epoch(self) -> float:
        if self.kind == "gdwa":
            return end_of_epoch_update(self.state)
        if self.kind == "dwa":
            return dwa_update(self.state)
        _close_epoch(self.state)
        _reset(self.state)
        self.state.omega = fixed_update(self.fixed_weight)
        return self.state.omega
