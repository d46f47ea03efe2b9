"""Projection of the CSC gradient onto the fusion gradient.

For flattened gradients over the shared parameters::

    alpha = (g_csc . g_fusion) / |g_fusion|^2
    cos   = (g_csc . g_fusion) / (|g_csc| |g_fusion|)

A negative ``alpha`` (equivalently a negative cosine) marks a conflicting
step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError


@dataclass
class ProjectionRecord:
    step: int
    alpha_cf: float
    cos_phi: float
    conflicting: bool
    norm_csc: float
    norm_fusion: float


@dataclass
class ProjectionReport:
    records: list[ProjectionRecord] = field(default_factory=list)
    skipped: int = 0

    def add(self, record: ProjectionRecord | None) -> None:
        if record is None:
            self.skipped += 1
        else:
            self.records.append(record)

    def extend(self, other: "ProjectionReport") -> None:
        self.records.extend(other.records)
        self.skipped += other.skipped

    def dump(self, path) -> None:
        lines = ["step\talpha_cf\tcos_phi\tconflicting\tnorm_csc\tnorm_fusion"]
        for r in self.records:
            lines.append(f"{r.step}\t{r.alpha_cf!r}\t{r.cos_phi!r}\t{int(r.conflicting)}\t{r.norm_csc!r}\t{r.norm_fusion!r}")
        Path(path).write_text("\n".join(lines) + "\n")


def flatten(grads) -> np.ndarray:
    """Concatenate gradient arrays in the given order into one float64 vector."""
    return np.concatenate([np.asarray(g, dtype=np.float64).ravel() for g in grads])


def projection_coefficient(g_csc: np.ndarray, g_fusion: np.ndarray) -> tuple[float, float]:
    """Return ``(alpha_cf, cos_phi)``. Raises when the fusion gradient vanishes."""
    g_csc = np.asarray(g_csc, dtype=np.float64).ravel()
    g_fusion = np.asarray(g_fusion, dtype=np.float64).ravel()
    if g_csc.shape != g_fusion.shape:
        raise DimensionError(f"gradient vectors differ in length: {g_csc.size} vs {g_fusion.size}")
    dot = float(g_csc @ g_fusion)
    nf2 = float(g_fusion @ g_fusion)
    nc = math.sqrt(float(g_csc @ g_csc))
    if nf2 == 0.0:
        raise ContractError("projection undefined: fusion gradient has zero norm")
    alpha = dot / nf2
    cos = dot / (nc * math.sqrt(nf2)) if nc > 0 else 0.0
    return alpha, min(1.0, max(-1.0, cos))


def make_record(step: int, g_csc: np.ndarray, g_fusion: np.ndarray) -> ProjectionRecord | None:
    """Projection record for one step, or ``None`` when it is undefined."""
    try:
        alpha, cos = projection_coefficient(g_csc, g_fusion)
    except ContractError:
        return None
    return ProjectionRecord(
        step=step,
        alpha_cf=alpha,
        cos_phi=cos,
        conflicting=cos < 0,
        norm_csc=float(np.linalg.norm(g_csc)),
        norm_fusion=float(np.linalg.norm(g_fusion)),
    )


@dataclass
class ProjectionSummary:
    steps: int
    mean_alpha: float
    mean_cos: float
    conflict_fraction: float
    skipped: int = 0

    def lines(self) -> list[str]:
        return [
            f"projection_steps\t{self.steps}",
            f"mean_alpha_cf\t{self.mean_alpha:.6e}",
            f"mean_cos_phi\t{self.mean_cos:.6f}",
            f"conflict_fraction\t{self.conflict_fraction:.6f}",
            f"skipped_steps\t{self.skipped}",
        ]


def summarize(report: ProjectionReport) -> ProjectionSummary:
    if not report.records:
        raise ContractError("cannot summarise an empty projection report")
    alphas = np.array([r.alpha_cf for r in report.records])
    coss = np.array([r.cos_phi for r in report.records])
    conflicts = np.array([r.conflicting for r in report.records])
    return ProjectionSummary(
        steps=len(report.records),
        mean_alpha=float(alphas.mean()),
        mean_cos=float(coss.mean()),
        conflict_fraction=float(conflicts.mean()),
        skipped=report.skipped,
    )
