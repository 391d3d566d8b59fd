"""Adaptive data optimization: fit scaling laws, steer the sampling mixture.

Each domain's loss trajectory is modeled as L(n) = eps + beta * n**-alpha.
Laws are refit on a fixed schedule from subsampled history; between refits
every chunk re-reads pi, a distribution blending per-domain learning speed
(the law's derivative), a credit score tracking realized sampling, the
prior, and a temporal average — floored to a minimum probability so no
domain ever starves.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FeedbackError, MixtureError
from .mixtures import MixtureKey, MixtureSource, MixtureSpec, sorted_keys
from .seeding import canonical_json

logger = logging.getLogger(__name__)


@dataclass
class AdoConfig:
    """Tuning knobs; defaults follow the reference training setup."""

    fit_start_step: int = 1000
    refit_every: int = 1000
    subsample_every: int = 10
    discard_first: int = 500
    p_min: float | None = None  # default 0.1/K once K is known
    smoothing: float = 0.5  # s: weight of the temporal average in pi
    credit_rate: float = 0.1  # delta: step size of the credit update
    samples_per_step: int = 1  # training samples consumed per step

    def __post_init__(self):
        if not (0 <= self.smoothing < 1):
            raise MixtureError("smoothing must lie in [0, 1)")
        if not (0 < self.credit_rate <= 1):
            raise MixtureError("credit_rate must lie in (0, 1]")
        if self.fit_start_step < 1 or self.refit_every < 1 or self.subsample_every < 1:
            raise MixtureError("schedule parameters must be positive")

    def resolved_p_min(self, num_domains: int) -> float:
        p = 0.1 / num_domains if self.p_min is None else self.p_min
        if p * num_domains >= 1:
            raise MixtureError(f"p_min {p} too large for {num_domains} domains")
        return p

    def to_json(self) -> dict:
        return {
            "fit_start_step": self.fit_start_step,
            "refit_every": self.refit_every,
            "subsample_every": self.subsample_every,
            "discard_first": self.discard_first,
            "p_min": self.p_min,
            "smoothing": self.smoothing,
            "credit_rate": self.credit_rate,
            "samples_per_step": self.samples_per_step,
        }

    @staticmethod
    def from_json(data: Mapping) -> "AdoConfig":
        return AdoConfig(**dict(data))


@dataclass(frozen=True)
class DomainLaw:
    """Power-law loss model L(n) = epsilon + beta * n**-alpha."""

    epsilon: float
    beta: float
    alpha: float
    fallback: bool = False

    def predict(self, n: float) -> float:
        return self.epsilon + self.beta * n ** -self.alpha


def learning_speed(law: DomainLaw, n: float) -> float:
    """-dL/dn = alpha * beta * n**-(alpha+1); how fast loss still falls."""
    if n < 1:
        raise ValueError("learning_speed requires n >= 1")
    return law.alpha * law.beta * n ** -(law.alpha + 1.0)


def _loglinear(eps: float, n: np.ndarray, loss: np.ndarray) -> tuple[float, float, float] | None:
    """Closed-form (alpha, beta, prediction_sse) at fixed eps; None if infeasible.

    (alpha, beta) come from the log-linear regression of log(loss - eps) on
    log(n). Candidates are ranked by squared prediction error in the
    original loss space: ranking in log space would reward shrinking eps,
    since small residuals near the irreducible loss amplify noise there.
    """
    resid = loss - eps
    if np.any(resid <= 0):
        return None
    y = np.log(resid)
    x = np.log(n)
    xm, ym = x.mean(), y.mean()
    denom = float(((x - xm) ** 2).sum())
    if denom == 0:
        return None
    slope = float(((x - xm) * (y - ym)).sum()) / denom
    if slope >= 0:
        return None  # loss must decrease with n
    intercept = ym - slope * xm
    alpha = -slope
    beta = math.exp(intercept)
    pred = eps + beta * n ** -alpha
    sse = float(((pred - loss) ** 2).sum())
    return alpha, beta, sse


def fit_power_law(history: list[tuple[float, float]]) -> DomainLaw:
    """Fit (eps, beta, alpha) by grid-refined search on eps.

    For each eps candidate the best (alpha, beta) follow in closed form
    from a log-linear regression; a linear refinement pass around the best
    grid cell sharpens eps. A history that never decreases yields a flat
    fallback law so downstream scoring sees ~zero learning speed.
    """
    if len(history) < 8:
        raise MixtureError("need at least 8 points to fit a power law")
    n = np.array([p[0] for p in history], dtype=float)
    loss = np.array([p[1] for p in history], dtype=float)
    if np.any(n < 1) or np.any(~np.isfinite(loss)):
        raise MixtureError("history points need n >= 1 and finite losses")

    # Candidate eps values in [0, 0.999*min(loss)]. The irreducible loss of a
    # converged curve sits just below the smallest observed loss, so the grid
    # log-spaces the *gap* below min(loss): dense near it, sparse toward 0.
    hi = 0.999 * float(loss.min())
    candidates: list[float] = [0.0]
    if hi > 0:
        gaps = np.geomspace(1e-6, 1.0, 49)
        candidates.extend(float(hi * (1.0 - g)) for g in gaps)
    candidates = sorted(set(candidates))

    best: tuple[float, float, float, float] | None = None  # (sse, eps, alpha, beta)
    for eps in candidates:
        fit = _loglinear(eps, n, loss)
        if fit is not None and (best is None or fit[2] < best[0]):
            best = (fit[2], eps, fit[0], fit[1])

    if best is None:
        eps = float(loss.min())
        beta = max(float(loss[0]) - eps, 1e-12)
        return DomainLaw(epsilon=eps, beta=beta, alpha=1e-6, fallback=True)

    # one refinement pass between the best cell's neighbors
    idx = min(range(len(candidates)), key=lambda i: abs(candidates[i] - best[1]))
    lo_r = candidates[max(0, idx - 1)]
    hi_r = candidates[min(len(candidates) - 1, idx + 1)]
    if hi_r > lo_r:
        for eps in np.linspace(lo_r, hi_r, 201):
            fit = _loglinear(float(eps), n, loss)
            if fit is not None and fit[2] < best[0]:
                best = (fit[2], float(eps), fit[0], fit[1])

    _, eps, alpha, beta = best
    return DomainLaw(epsilon=eps, beta=beta, alpha=alpha)


@dataclass
class _DomainTrack:
    history: list[tuple[int, float]] = field(default_factory=list)  # (step, mean loss)
    law: DomainLaw | None = None
    last_loss: float | None = None
    carried: int = 0  # steps where the loss was carried forward


class AdoState:
    """All mutable ADO quantities for one job."""

    def __init__(self, config: AdoConfig, prior: Mapping[MixtureKey, float]):
        total = sum(prior.values())
        if abs(total - 1.0) > 1e-9:
            raise MixtureError(f"prior must sum to 1, got {total!r}")
        self.config = config
        self.domains: list[MixtureKey] = sorted_keys(prior)
        if len(self.domains) < 2:
            raise MixtureError("adaptive optimization needs at least 2 domains")
        self.mu: dict[MixtureKey, float] = {k: float(prior[k]) for k in self.domains}
        self.p_min = config.resolved_p_min(len(self.domains))
        self.t = 0
        self.cumulative_samples = 0
        self._cum_at_step: list[int] = []  # cumulative samples after step i+1
        self.tracks: dict[MixtureKey, _DomainTrack] = {k: _DomainTrack() for k in self.domains}
        self.credit: dict[MixtureKey, float] = dict(self.mu)  # lambda
        self.pi: dict[MixtureKey, float] = dict(self.mu)
        self.pi_bar: dict[MixtureKey, float] = dict(self.mu)
        self._pi_bar_count = 1
        self.fit_steps: list[int] = []

    @property
    def fitted(self) -> bool:
        return bool(self.fit_steps)

    # -------------------------------------------------------------- feedback

    def record_step(
        self,
        step: int,
        losses: Mapping[MixtureKey, float],
        num_samples: int | None = None,
    ) -> None:
        """Ingest one training step's mean per-domain losses.

        Steps must arrive in order. A domain absent from `losses` carries
        its previous loss forward (flagged in its track). Refits fire at
        fit_start_step and every refit_every steps after.
        """
        if step != self.t + 1:
            raise FeedbackError(f"expected step {self.t + 1}, got {step}")
        unknown = set(losses) - set(self.domains)
        if unknown:
            raise FeedbackError(f"unknown domain in losses: {sorted(unknown)[0]}")
        self.t = step
        self.cumulative_samples += (
            self.config.samples_per_step if num_samples is None else int(num_samples)
        )
        self._cum_at_step.append(self.cumulative_samples)
        for key in self.domains:
            track = self.tracks[key]
            if key in losses:
                value = float(losses[key])
                track.last_loss = value
                track.history.append((step, value))
            elif track.last_loss is not None:
                track.carried += 1
                track.history.append((step, track.last_loss))
            else:
                track.carried += 1  # nothing to carry yet; no history point
        d = self.config.credit_rate
        for key in self.domains:
            self.credit[key] = (1 - d) * self.credit[key] + d * self.pi[key]
        cfg = self.config
        if step >= cfg.fit_start_step and step % cfg.refit_every == 0:
            self._refit(step)

    def _shared_n(self, step: int) -> float:
        """Sample count used for every domain: cumulative total over K."""
        if 1 <= step <= len(self._cum_at_step):
            total = self._cum_at_step[step - 1]
        else:
            total = self.cumulative_samples
        return max(total / len(self.domains), 1.0)

    def _refit(self, step: int) -> None:
        cfg = self.config
        for key in self.domains:
            track = self.tracks[key]
            points = [
                (self._shared_n(s), loss)
                for s, loss in track.history
                if s > cfg.discard_first and s % cfg.subsample_every == 0
            ]
            if len(points) < 8:
                logger.warning("domain %s: only %d usable points, fit skipped", key, len(points))
                continue
            track.law = fit_power_law(points)
        self.fit_steps.append(step)

    # -------------------------------------------------------------------- pi

    def _floored(self, dist: Mapping[MixtureKey, float]) -> dict[MixtureKey, float]:
        """Raise entries to p_min, renormalizing the rest; repeats to a fixed point."""
        out = {k: float(dist[k]) for k in self.domains}
        floored: set[MixtureKey] = set()
        while True:
            low = [k for k in self.domains if k not in floored and out[k] < self.p_min]
            if not low:
                return out
            floored.update(low)
            free = [k for k in self.domains if k not in floored]
            if not free:
                n = len(self.domains)
                return {k: 1.0 / n for k in self.domains}
            budget = 1.0 - self.p_min * len(floored)
            free_mass = sum(out[k] for k in free)
            for k in floored:
                out[k] = self.p_min
            for k in free:
                out[k] = out[k] / free_mass * budget if free_mass > 0 else budget / len(free)

    def compute_pi(self) -> dict[MixtureKey, float]:
        """Current sampling distribution; advances the temporal average."""
        if not self.fitted:
            return dict(self.mu)
        n = self._shared_n(self.t)
        scores: dict[MixtureKey, float] = {}
        for key in self.domains:
            law = self.tracks[key].law
            speed = learning_speed(law, n) if law is not None else 0.0
            scores[key] = self.mu[key] * self.credit[key] * speed
        total = sum(scores.values())
        if total <= 0:
            pi = self._floored(self.mu)
        else:
            rho = {k: v / total for k, v in scores.items()}
            s = self.config.smoothing
            blended = {
                k: (1 - s) * rho[k] + s * self.pi_bar[k] for k in self.domains
            }
            pi = self._floored(blended)
        self.pi = pi
        c = self._pi_bar_count
        self.pi_bar = {
            k: (self.pi_bar[k] * c + pi[k]) / (c + 1) for k in self.domains
        }
        self._pi_bar_count = c + 1
        return dict(pi)

    # ------------------------------------------------------------ checkpoint

    def state_dict(self) -> dict:
        def dist(d: Mapping[MixtureKey, float]) -> dict:
            return {k.canonical_string(): v for k, v in sorted(d.items(), key=lambda kv: kv[0].sort_key())}

        return {
            "config": self.config.to_json(),
            "mu": dist(self.mu),
            "t": self.t,
            "cumulative_samples": self.cumulative_samples,
            "cum_at_step": list(self._cum_at_step),
            "credit": dist(self.credit),
            "pi": dist(self.pi),
            "pi_bar": dist(self.pi_bar),
            "pi_bar_count": self._pi_bar_count,
            "fit_steps": list(self.fit_steps),
            "tracks": {
                k.canonical_string(): {
                    "history": self.tracks[k].history,
                    "law": None
                    if self.tracks[k].law is None
                    else {
                        "epsilon": self.tracks[k].law.epsilon,
                        "beta": self.tracks[k].law.beta,
                        "alpha": self.tracks[k].law.alpha,
                        "fallback": self.tracks[k].law.fallback,
                    },
                    "last_loss": self.tracks[k].last_loss,
                    "carried": self.tracks[k].carried,
                }
                for k in self.domains
            },
        }

    @staticmethod
    def from_state(state: Mapping) -> "AdoState":
        config = AdoConfig.from_json(state["config"])
        mu = {MixtureKey.parse(k): v for k, v in state["mu"].items()}
        out = AdoState(config, mu)
        out.t = int(state["t"])
        out.cumulative_samples = int(state["cumulative_samples"])
        out._cum_at_step = [int(v) for v in state.get("cum_at_step", [])]
        out.credit = {MixtureKey.parse(k): float(v) for k, v in state["credit"].items()}
        out.pi = {MixtureKey.parse(k): float(v) for k, v in state["pi"].items()}
        out.pi_bar = {MixtureKey.parse(k): float(v) for k, v in state["pi_bar"].items()}
        out._pi_bar_count = int(state["pi_bar_count"])
        out.fit_steps = [int(s) for s in state["fit_steps"]]
        for key_str, track_state in state["tracks"].items():
            track = out.tracks[MixtureKey.parse(key_str)]
            track.history = [(int(s), float(l)) for s, l in track_state["history"]]
            law = track_state["law"]
            track.law = None if law is None else DomainLaw(**law)
            track.last_loss = track_state["last_loss"]
            track.carried = int(track_state["carried"])
        return out


class AdoSource(MixtureSource):
    """Mixture provider backed by an AdoState; one instance per job."""

    algorithm = "ado"

    def __init__(self, state: AdoState, chunk_size: int):
        self.state = state
        self.chunk_size = int(chunk_size)

    def current_spec(self) -> MixtureSpec:
        return MixtureSpec(self.state.compute_pi(), self.chunk_size)

    def observe_feedback(self, step: int, losses: Mapping[MixtureKey, tuple[float, int]]) -> None:
        """Losses arrive as (loss_sum, token_count) per domain; zero counts carry."""
        means = {
            k: float(total) / int(count)
            for k, (total, count) in losses.items()
            if int(count) > 0
        }
        counts = sum(int(v[1]) for v in losses.values())
        self.state.record_step(step, means, num_samples=counts or None)

    def is_dynamic(self) -> bool:
        return True

    def state_dict(self) -> dict:
        return {"ado": self.state.state_dict(), "chunk_size": self.chunk_size}

    def load_state(self, state: Mapping) -> None:
        self.state = AdoState.from_state(state["ado"])
        self.chunk_size = int(state["chunk_size"])


class TrajectoryLogger:
    """Append-only log of (step, chunk_id, pi) for later plotting."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def log(self, step: int, chunk_id: int, pi: Mapping[MixtureKey, float]) -> None:
        entry = {
            "step": step,
            "chunk_id": chunk_id,
            "pi": {k.canonical_string(): v for k, v in sorted(pi.items(), key=lambda kv: kv[0].sort_key())},
        }
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(canonical_json(entry) + "\n")

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        entries = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    entries.append(json.loads(line))
        return entries
