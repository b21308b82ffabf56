"""Resampling engine: weight schemes, ensembles, and bootstrap test laws.

The central object is the ensemble of scaled perturbations
``rate * (theta_star_b - theta_hat)``.  Two laws are built from it:

* the *standard* law re-applies the functional to the perturbed estimate
  and recenters once at the original estimate — the textbook recipe, which
  is inconsistent precisely when the functional is only directionally
  differentiable at the truth; and
* the *modified* law pushes each raw perturbation through an estimated
  directional derivative, which restores consistency in those kinked cases.

Draw ``b`` always uses an rng substream derived from ``(master_seed, b)``,
so ensembles are bit-identical no matter how draws are scheduled.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .core import (EmpiricalLaw, EstimateBundle, GridFunction, TestReport,
                   make_test_report, plug_in_statistic)

__all__ = [
    "ResampleScheme",
    "BootstrapEnsemble",
    "substream",
    "draw_resample_weights",
    "bootstrap_ensemble",
    "statistic_law",
    "run_test",
    "law_degeneracy",
    "ensemble_to_csv",
    "ensemble_from_csv",
    "DEGENERATE_LAW_TOL",
]

# atom range below which a bootstrap law counts as degenerate
DEGENERATE_LAW_TOL = 1e-14


def substream(master_seed: int, *path: int) -> np.random.Generator:
    """Independent generator for a node of the replication tree.

    The stream is keyed by the whole tuple ``(master_seed, *path)``, so any
    worker can reproduce any node without coordination and the result never
    depends on execution order.
    """
    return np.random.default_rng(np.random.SeedSequence((int(master_seed),) +
                                                        tuple(int(p) for p in path)))


@dataclass(frozen=True)
class ResampleScheme:
    """How bootstrap weights are drawn.

    ``multinomial``: integer resample counts (classical with-replacement /
    pairs bootstrap).  ``multiplier``: i.i.d. nonnegative weights with the
    declared mean and standard deviation (default 1 and 1, the standard
    exponential).
    """

    kind: str = "multinomial"
    multiplier_mean: float = 1.0
    multiplier_std: float = 1.0

    def __post_init__(self):
        if self.kind not in ("multinomial", "multiplier"):
            raise ValueError(f"unknown resample scheme {self.kind!r}")
        if self.kind == "multiplier" and (self.multiplier_mean <= 0
                                          or self.multiplier_std <= 0):
            raise ValueError("multiplier mean and std must be positive")


def draw_resample_weights(scheme: ResampleScheme, n: int,
                          rng: np.random.Generator) -> np.ndarray:
    """One weight vector of length ``n`` for the given scheme."""
    if n < 1:
        raise ValueError("cannot resample an empty sample (n = %d)" % n)
    if scheme.kind == "multinomial":
        return rng.multinomial(n, np.full(n, 1.0 / n)).astype(np.float64)
    # affine map of the standard exponential hits (mean, std) exactly
    w = scheme.multiplier_mean - scheme.multiplier_std \
        + scheme.multiplier_std * rng.standard_exponential(n)
    return w


@dataclass(frozen=True)
class BootstrapEnsemble:
    """B scaled perturbations ``rate*(theta_star_b - theta_hat)``.

    ``draws`` has shape (B,) for scalar estimates and (B, d) otherwise;
    ``template`` keeps the grid/weights when the estimate lives on a grid,
    so draws can be rewrapped for functionals that need quadrature.
    """

    draws: np.ndarray
    rate: float
    seed_manifest: dict
    template: GridFunction | None = None

    def __post_init__(self):
        draws = np.asarray(self.draws, dtype=float)
        if draws.ndim not in (1, 2) or draws.shape[0] < 1:
            raise ValueError("draws must be a (B,) or (B, d) array with B >= 1")
        draws = draws.copy()
        draws.setflags(write=False)
        object.__setattr__(self, "draws", draws)
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        if self.template is not None and (draws.ndim != 2 or
                                          draws.shape[1] != len(self.template)):
            raise ValueError("template length does not match draw width")

    def __len__(self):
        return self.draws.shape[0]

    def draw(self, b: int):
        """Draw ``b`` in the shape of the original estimate."""
        row = self.draws[b]
        if self.template is not None:
            return self.template.with_values(row)
        return row


def _estimate_values(estimate):
    if isinstance(estimate, GridFunction):
        return np.asarray(estimate.values, dtype=float)
    return np.asarray(estimate, dtype=float)


def bootstrap_ensemble(estimator, data, B: int, scheme: ResampleScheme,
                       master_seed: int, rate: float | None = None,
                       theta_hat=None) -> BootstrapEnsemble:
    """Build the ensemble of scaled bootstrap perturbations.

    ``estimator(data, weights)`` must return the estimate for the weighted
    sample; ``weights=None`` means the original unweighted fit.  ``theta_hat``
    may be passed when the unweighted fit is already available.  ``rate``
    defaults to ``sqrt(n)`` with ``n = len(data)``.
    """
    if B < 1:
        raise ValueError("B must be a positive integer")
    n = len(data)
    if rate is None:
        rate = float(np.sqrt(n))
    if theta_hat is None:
        theta_hat = estimator(data, None)
    template = theta_hat if isinstance(theta_hat, GridFunction) else None
    center = _estimate_values(theta_hat)
    scalar = center.ndim == 0
    center = np.atleast_1d(center)
    draws = np.empty((B, center.shape[0]))
    for b in range(B):
        w = draw_resample_weights(scheme, n, substream(master_seed, b))
        try:
            star = estimator(data, w)
        except Exception as exc:
            raise RuntimeError(f"bootstrap draw {b} failed: {exc}") from exc
        star = np.atleast_1d(_estimate_values(star))
        if star.shape != center.shape:
            raise ValueError(f"draw {b} has shape {star.shape}, "
                             f"estimate has shape {center.shape}")
        draws[b] = rate * (star - center)
    if scalar:
        draws = draws[:, 0]
    manifest = {"master_seed": int(master_seed), "scheme": scheme.kind,
                "B": int(B), "n": int(n), "rate": float(rate)}
    return BootstrapEnsemble(draws=draws, rate=float(rate),
                             seed_manifest=manifest, template=template)


def statistic_law(ensemble: BootstrapEnsemble, mode: str, functional=None,
                  theta_hat=None, derivative=None) -> EmpiricalLaw:
    """Empirical law of the bootstrap test statistic.

    ``mode="standard"``: atoms ``rate*(phi(theta_hat + draw/rate) -
    phi(theta_hat))`` with the recentring value computed once.  Requires
    ``functional`` and ``theta_hat``.

    ``mode="modified"``: atoms ``derivative(draw)`` — the estimated
    directional derivative applied to each raw perturbation.  Requires
    ``derivative``.
    """
    if mode == "standard":
        if functional is None or theta_hat is None:
            raise ValueError("standard mode needs functional and theta_hat")
        rate = ensemble.rate
        center = _evaluate(functional, theta_hat)
        base = _estimate_values(theta_hat)
        if isinstance(theta_hat, GridFunction):
            rebuild = theta_hat.with_values
        else:
            rebuild = lambda v: v  # noqa: E731
        atoms = np.empty(len(ensemble))
        rows = ensemble.draws[:, None] if ensemble.draws.ndim == 1 \
            else ensemble.draws
        for b in range(len(ensemble)):
            perturbed = base + rows[b].reshape(base.shape) / rate
            atoms[b] = rate * (_evaluate(functional, rebuild(perturbed)) - center)
        return EmpiricalLaw(atoms)
    if mode == "modified":
        if derivative is None:
            raise ValueError("modified mode needs a derivative estimate")
        atoms = np.empty(len(ensemble))
        for b in range(len(ensemble)):
            atoms[b] = float(derivative(ensemble.draw(b)))
        return EmpiricalLaw(atoms)
    raise ValueError(f"unknown mode {mode!r}; expected 'standard' or 'modified'")


def _evaluate(functional, theta):
    if hasattr(functional, "evaluate"):
        return float(functional.evaluate(theta))
    return float(functional(theta))


def law_degeneracy(law: EmpiricalLaw) -> dict:
    """Diagnostic fields describing a (possibly) collapsed bootstrap law."""
    atom_range = float(law.atoms[-1] - law.atoms[0])
    out = {"atom_range": atom_range,
           "degenerate_law": bool(atom_range < DEGENERATE_LAW_TOL)}
    if out["degenerate_law"]:
        out["note"] = "derivative estimate annihilated the ensemble"
    return out


def run_test(data, estimator, functional, derivative_factory, alpha: float = 0.05,
             delta_bump: float = 0.0, B: int = 500,
             scheme: ResampleScheme | None = None, master_seed: int = 0,
             rate: float | None = None) -> TestReport:
    """One-sided test of ``phi(theta_0) <= 0`` with the modified bootstrap.

    ``estimator(data, weights)`` produces the (possibly weighted) estimate;
    ``derivative_factory(bundle)`` returns the estimated directional
    derivative, a callable on perturbations.  The statistic is
    ``rate * phi(theta_hat)``; the critical value is the ``1 - alpha``
    quantile of the modified-bootstrap law; the decision rule is
    ``statistic > critical + delta_bump``.  A collapsed law is flagged in
    the diagnostics, not raised.
    """
    scheme = scheme or ResampleScheme()
    n = len(data)
    theta_hat = estimator(data, None)
    bundle = EstimateBundle(theta_hat, n, rate=rate)
    statistic = plug_in_statistic(bundle, functional)
    ensemble = bootstrap_ensemble(estimator, data, B, scheme, master_seed,
                                  rate=bundle.rate, theta_hat=theta_hat)
    derivative = derivative_factory(bundle)
    law = statistic_law(ensemble, "modified", derivative=derivative)
    diagnostics = law_degeneracy(law)
    return make_test_report(statistic, law, alpha, delta_bump,
                            seed_manifest=ensemble.seed_manifest,
                            diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# persistence: long CSV (draw, component, value) + JSON manifest
# ---------------------------------------------------------------------------

def ensemble_to_csv(ensemble: BootstrapEnsemble) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["draw", "component", "value"])
    rows = ensemble.draws[:, None] if ensemble.draws.ndim == 1 else ensemble.draws
    for b in range(rows.shape[0]):
        for j in range(rows.shape[1]):
            writer.writerow([b, j, format(rows[b, j], ".17g")])
    return buf.getvalue()


def ensemble_manifest_json(ensemble: BootstrapEnsemble) -> str:
    return json.dumps(ensemble.seed_manifest, sort_keys=True)


def ensemble_from_csv(text: str, manifest_json: str,
                      template: GridFunction | None = None) -> BootstrapEnsemble:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][:3] != ["draw", "component", "value"]:
        raise ValueError("expected CSV header 'draw,component,value'")
    manifest = json.loads(manifest_json)
    body = [r for r in rows[1:] if r]
    nb = max(int(r[0]) for r in body) + 1
    nd = max(int(r[1]) for r in body) + 1
    draws = np.full((nb, nd), np.nan)
    for r in body:
        draws[int(r[0]), int(r[1])] = float(r[2])
    if np.any(np.isnan(draws)):
        raise ValueError("ensemble CSV is missing entries")
    if nd == 1 and template is None:
        draws = draws[:, 0]
    return BootstrapEnsemble(draws=draws, rate=float(manifest["rate"]),
                             seed_manifest=manifest, template=template)
