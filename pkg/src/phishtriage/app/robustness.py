"""Delivery-skew robustness check.

A phishing email ``e`` reaches user ``u`` with probability ``P_e(u)``.  The
user then either detects it (and may report it) or not (and may click).  If
delivery volume drove the click counts, the share of reports whose email was
also clicked would differ between otherwise similar emails; a flat ratio
across groups argues against large delivery skew.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np


@dataclass
class ClickGenerationModel:
    """``p_delivery`` and ``p_detect`` are scalars, per-email vectors (|E|) or |E| x |U| matrices."""

    users: int
    emails: int
    p_delivery: float | np.ndarray
    p_detect: float | np.ndarray
    p_notify: float | np.ndarray
    p_click: float | np.ndarray
    seed: int = 0
    families: Sequence[int] | None = None

    def __post_init__(self):
        for name in ("p_delivery", "p_detect", "p_notify", "p_click"):
            v = np.asarray(getattr(self, name), dtype=float)
            if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.families is not None and len(self.families) != self.emails:
            raise ValueError("families must give one group per email")

    def _grid(self, v, per_user: bool = False) -> np.ndarray:
        a = np.asarray(v, dtype=float)
        if a.ndim == 1:
            a = a[None, :] if per_user else a[:, None]
        return np.broadcast_to(a, (self.emails, self.users))

    def report_prob(self) -> np.ndarray:
        return self._grid(self.p_delivery) * self._grid(self.p_detect) * self._grid(self.p_notify, True)

    def click_prob(self) -> np.ndarray:
        return self._grid(self.p_delivery) * (1 - self._grid(self.p_detect)) * self._grid(self.p_click, True)


@dataclass
class ClickRealization:
    reported: np.ndarray  # |E| x |U| bool
    clicked: np.ndarray

    @property
    def D(self) -> set[tuple[int, int]]:
        return set(zip(*map(list, np.nonzero(self.reported))))

    @property
    def C(self) -> set[tuple[int, int]]:
        return set(zip(*map(list, np.nonzero(self.clicked))))

    @property
    def email_clicked(self) -> np.ndarray:
        return self.clicked.any(axis=1)

    @property
    def C_prime(self) -> set[tuple[int, int]]:
        """Reports whose email was clicked by someone: the clicked emails visible among the reports."""
        hit = self.email_clicked
        return {(e, u) for e, u in self.D if hit[e]}

    @property
    def n_reported(self) -> int:
        return int(self.reported.sum())

    @property
    def n_clicked(self) -> int:
        return int(self.clicked.sum())


def simulate_click_generation(m: ClickGenerationModel) -> ClickRealization:
    """One Monte Carlo draw: delivery, then detect -> notify or miss -> click, per (email, user)."""
    rng = np.random.default_rng(m.seed)
    shape = (m.emails, m.users)
    delivered = rng.random(shape) < m._grid(m.p_delivery)
    detected = rng.random(shape) < m._grid(m.p_detect)
    notify = rng.random(shape) < m._grid(m.p_notify, True)
    click = rng.random(shape) < m._grid(m.p_click, True)
    return ClickRealization(delivered & detected & notify, delivered & ~detected & click)


def expected_counts(m: ClickGenerationModel) -> tuple[float, float]:
    """Expected (|D|, |C|) summed over every (email, user) pair."""
    return float(m.report_prob().sum()), float(m.click_prob().sum())


@dataclass
class RatioRow:
    group: Hashable
    reported: int
    clicked: int

    @property
    def ratio(self) -> float:
        return self.clicked / self.reported


@dataclass
class RobustnessTable:
    rows: list[RatioRow]
    excluded_groups: int
    excluded_reports: int
    notes: list[str] = field(default_factory=list)

    @property
    def ratios(self) -> np.ndarray:
        return np.array([r.ratio for r in self.rows])

    @property
    def mean(self) -> float:
        return float(self.ratios.mean()) if self.rows else math.nan

    @property
    def sd(self) -> float:
        return float(self.ratios.std()) if self.rows else math.nan

    @property
    def cv(self) -> float:
        m = self.mean
        return self.sd / m if self.rows and m > 0 else math.nan


def robustness_ratio(reports: Iterable[tuple[Hashable, bool]], min_group: int = 5) -> RobustnessTable:
    """Per group: share of reported emails with at least one matched click.

    ``reports`` yields (group key, clicked?) per reported email.  Groups smaller
    than ``min_group`` are excluded and counted.
    """
    tally: dict[Hashable, list[int]] = {}
    for g, hit in reports:
        t = tally.setdefault(g, [0, 0])
        t[0] += 1
        t[1] += int(bool(hit))
    rows, ex_g, ex_r = [], 0, 0
    for g in sorted(tally, key=lambda k: (str(type(k)), k)):
        n, c = tally[g]
        if n < min_group:
            ex_g += 1
            ex_r += n
            continue
        rows.append(RatioRow(g, n, c))
    return RobustnessTable(rows, ex_g, ex_r)


def realization_reports(r: ClickRealization, families: Sequence[int] | None = None) -> list[tuple[int, bool]]:
    """Flatten a realization into (family, email clicked?) per report event."""
    fam = np.arange(r.reported.shape[0]) if families is None else np.asarray(families)
    hit = r.email_clicked
    e_idx, _ = np.nonzero(r.reported)
    return [(int(fam[e]), bool(hit[e])) for e in e_idx]


def signature_groups(profiles: Mapping[str, Sequence[bool]]) -> dict[str, str]:
    """Group key per email: the set of vulnerabilities it exhibits."""
    return {eid: "".join("1" if v else "0" for v in present) for eid, present in profiles.items()}


def skew_experiment(
    n_families: int = 40, family_size: int = 10, users: int = 2000, base_delivery: float = 0.01,
    skew: float = 1.0, skew_share: float = 0.5, p_detect: float = 0.5, p_notify: float = 0.5,
    p_click: float = 0.1, seed: int = 0, min_group: int = 5,
) -> RobustnessTable:
    """Simulate families with delivery probability multiplied by ``skew`` on a share of them."""
    E = n_families * family_size
    fam = np.repeat(np.arange(n_families), family_size)
    skewed = np.arange(n_families) < int(round(skew_share * n_families))
    p = np.where(skewed[fam], min(1.0, base_delivery * skew), base_delivery)
    m = ClickGenerationModel(users, E, p, p_detect, p_notify, p_click, seed, fam)
    return robustness_ratio(realization_reports(simulate_click_generation(m), fam), min_group)
