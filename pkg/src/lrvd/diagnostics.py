"""Checks of the rank-space symmetry structure and the sweep harnesses.

Covers the residual-symmetry tests for reparameterizations ``A' = R^-1 A,
B' = B R``, cumulative-energy curves for rank orderings, and beta/tau/MC
sweeps over trained models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import adapter as lr
from . import evaluator as ev
from .models import build_model, make_task
from .numerics import Rng, sample_matrix_normal, svd
from .trainer import evaluate, train

ORDERINGS = ("svd", "learned-alpha", "random-permutation")


# --------------------------------------------------------------------------
# residual symmetry


@dataclass
class SymmetryProbe:
    d: np.ndarray  # positive diagonal of D
    r: np.ndarray
    tol: float = 1e-9

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64).ravel()
        self.r = np.asarray(self.r, dtype=np.float64)
        if np.any(self.d <= 0):
            raise ValueError("symmetry probe: D must be positive")
        if self.r.shape != (self.d.size, self.d.size):
            raise ValueError(f"symmetry probe: R shape {self.r.shape} for rank {self.d.size}")


def _offdiag_max(m: np.ndarray) -> float:
    return float(np.max(np.abs(m - np.diag(np.diag(m))))) if m.shape[0] > 1 else 0.0


def transformed_covariances(d, r) -> tuple[np.ndarray, np.ndarray]:
    """Rank covariances of ``R^-1 A`` and ``B R`` when both factors use ``diag(d)``."""
    dm = np.diag(np.asarray(d, dtype=np.float64))
    r_inv = np.linalg.inv(r)
    return r_inv @ dm @ r_inv.T, r.T @ dm @ r


def residual_symmetry_check(probe: SymmetryProbe) -> dict:
    """Classify ``R`` against the rank-tied diagonal family.

    Returns flags ``orthogonal``, ``both_diagonal`` (both transformed
    covariances diagonal), ``equal_diagonal`` (additionally equal to each
    other) and ``is_signed_permutation``, plus the deviations behind them.
    """
    r, tol = probe.r, probe.tol
    cond = np.linalg.cond(r)
    if not np.isfinite(cond) or cond > 1e12:
        raise ValueError(f"residual_symmetry_check: R is singular (condition number {cond:.3g})")
    cov_a, cov_b = transformed_covariances(probe.d, r)
    orth_dev = float(np.max(np.abs(r @ r.T - np.eye(r.shape[0]))))
    off = max(_offdiag_max(cov_a), _offdiag_max(cov_b))
    gap = float(np.max(np.abs(cov_a - cov_b)))

    a = np.abs(r)
    big = a > 1.0 - tol
    small = a < tol
    signed_perm = bool(
        np.all(big | small) and np.all(big.sum(axis=0) == 1) and np.all(big.sum(axis=1) == 1)
    )
    return {
        "orthogonal": orth_dev < tol,
        "both_diagonal": off < tol,
        "equal_diagonal": off < tol and gap < tol,
        "is_signed_permutation": signed_perm,
        "orthogonality_deviation": orth_dev,
        "offdiag_max": off,
        "covariance_gap": gap,
    }


def haar_orthogonal(rng: Rng, n: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix: QR of a Gaussian with sign-corrected R diagonal."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def random_signed_permutation(rng: Rng, n: int) -> np.ndarray:
    perm = rng.generator.permutation(n)
    signs = rng.generator.choice([-1.0, 1.0], size=n)
    m = np.zeros((n, n))
    m[np.arange(n), perm] = signs
    return m


def distinct_diagonal(rng: Rng, n: int, min_gap: float = 0.1) -> np.ndarray:
    while True:
        d = np.exp(rng.generator.uniform(-1.0, 1.0, size=n))
        if np.min(np.diff(np.sort(d))) > min_gap:
            return d


def theorem_suite(
    seed: int = 0,
    rank: int = 4,
    n_orthogonal: int = 500,
    n_permutation: int = 500,
    n_nonorthogonal: int = 100,
    tol: float = 1e-9,
    violation_floor: float = 1e-6,
) -> dict:
    """Randomized residual-symmetry report.

    * signed permutations: both transformed covariances diagonal, off-diagonal < 1e-12
    * Haar orthogonal (non-permutation) R with distinct D: diagonality violated
      (off-diagonal > ``violation_floor``), and ``both_diagonal`` agrees with
      ``is_signed_permutation``
    * random non-orthogonal invertible R: equal-diagonal condition fails
    """
    rng = Rng(seed, (7,))
    failures: list[dict] = []
    sections = {}

    worst = 0.0
    for i in range(n_permutation):
        sub = rng.substream(0, i)
        d = distinct_diagonal(sub, rank)
        res = residual_symmetry_check(SymmetryProbe(d, random_signed_permutation(sub, rank), tol))
        worst = max(worst, res["offdiag_max"])
        if not (res["both_diagonal"] and res["is_signed_permutation"] and res["offdiag_max"] < 1e-12):
            failures.append({"family": "signed_permutation", "index": i, **res})
    sections["signed_permutation"] = {"probes": n_permutation, "max_offdiag": worst}

    least = math.inf
    for i in range(n_orthogonal):
        sub = rng.substream(1, i)
        d = distinct_diagonal(sub, rank)
        r = haar_orthogonal(sub, rank)
        res = residual_symmetry_check(SymmetryProbe(d, r, tol))
        least = min(least, res["offdiag_max"])
        consistent = res["both_diagonal"] == res["is_signed_permutation"]
        if not (consistent and not res["is_signed_permutation"] and res["offdiag_max"] > violation_floor):
            failures.append({"family": "haar_orthogonal", "index": i, **res})
    sections["haar_orthogonal"] = {"probes": n_orthogonal, "min_offdiag": least}

    least_gap = math.inf
    for i in range(n_nonorthogonal):
        sub = rng.substream(2, i)
        d = distinct_diagonal(sub, rank)
        while True:
            r = sub.standard_normal((rank, rank))
            if np.linalg.cond(r) < 1e3 and np.max(np.abs(r @ r.T - np.eye(rank))) > 1e-3:
                break
        res = residual_symmetry_check(SymmetryProbe(d, r, tol))
        least_gap = min(least_gap, max(res["offdiag_max"], res["covariance_gap"]))
        if res["equal_diagonal"] or res["orthogonal"]:
            failures.append({"family": "non_orthogonal", "index": i, **res})
    sections["non_orthogonal"] = {"probes": n_nonorthogonal, "min_violation": least_gap}

    return {
        "seed": seed,
        "rank": rank,
        "tolerance": tol,
        "violation_floor": violation_floor,
        "probes": n_permutation + n_orthogonal,
        "sections": sections,
        "failures": failures,
        "passed": not failures,
    }


def mc_covariance_transform_check(d, r, n_samples: int, rng: Rng) -> float:
    """Max deviation between the empirical row covariance of ``R^-1 A`` and ``R^-1 D R^-T``.

    ``A`` is drawn as ``MN(0, diag(d), I)`` with ``n_samples`` columns.
    """
    d = np.asarray(d, dtype=np.float64).ravel()
    a = sample_matrix_normal(rng, np.zeros((d.size, n_samples)), d, np.ones(n_samples))
    a_new = np.linalg.solve(r, a)
    empirical = a_new @ a_new.T / n_samples
    expected, _ = transformed_covariances(d, r)
    return float(np.max(np.abs(empirical - expected)))


# --------------------------------------------------------------------------
# energy curves


@dataclass
class EnergyCurve:
    ordering: str
    fractions: np.ndarray  # e_0 .. e_r
    order: list[int]

    @property
    def auc(self) -> float:
        return float(np.mean(self.fractions[1:])) if self.fractions.size > 1 else 0.0


class ZeroUpdateError(ValueError):
    pass


def learned_order(adapter: lr.RankTiedAdapter) -> list[int]:
    """Active ranks by increasing log-alpha, ties by descending component norm, then index."""
    comps = adapter.components()
    active = [i for i in range(adapter.r_init) if adapter.active_mask[i]]
    return sorted(active, key=lambda i: (adapter.log_alpha[i], -np.linalg.norm(comps[i]), i))


def energy_curve(
    adapter: lr.RankTiedAdapter,
    ordering: str = "learned-alpha",
    rng: Rng | None = None,
    order: list[int] | None = None,
    normalize: bool = True,
) -> EnergyCurve:
    """Cumulative energy captured as active rank components are added.

    ``svd`` uses squared singular values of the mean update; the other
    orderings use ``||partial sum of components||_F^2 / ||dW||_F^2``.
    ``random-permutation`` needs ``rng``; ``order`` overrides the ordering.
    """
    if ordering not in ORDERINGS:
        raise ValueError(f"energy_curve: unknown ordering {ordering!r}")
    dw = adapter.mean_update()
    total = float(np.sum(dw * dw))
    if normalize and total == 0.0:
        raise ZeroUpdateError("energy_curve: mean update is zero; use normalize=False for raw energies")
    norm = total if normalize else 1.0
    active = [i for i in range(adapter.r_init) if adapter.active_mask[i]]
    r = len(active)

    if ordering == "svd" and order is None:
        sigma = svd(dw).sigma[:r] if r else np.zeros(0)
        energies = np.concatenate([[0.0], np.cumsum(sigma**2)]) / norm
        if normalize and r:
            energies[-1] = 1.0
        return EnergyCurve("svd", energies, list(range(r)))

    if order is None:
        if ordering == "learned-alpha":
            order = learned_order(adapter)
        else:
            if rng is None:
                raise ValueError("energy_curve: random-permutation ordering needs an rng")
            order = [active[j] for j in rng.generator.permutation(r)]
    comps = adapter.components()
    partial = np.zeros_like(dw)
    energies = [0.0]
    for i in order:
        partial = partial + comps[i]
        energies.append(float(np.sum(partial * partial)) / norm)
    if normalize and order:
        energies[-1] = 1.0  # the full sum is dW itself
    return EnergyCurve(ordering, np.array(energies), list(order))


def gauge_ordering_experiment(adapters, n_random: int = 20, rng: Rng | None = None) -> list[dict]:
    """Compare learned-alpha, SVD and random orderings for each adapter.

    ``adapters`` is an iterable of ``(label, RankTiedAdapter)``. Adapters with
    fewer than two active ranks are reported with ``skipped`` set.
    """
    rng = rng if rng is not None else Rng(0)
    rows = []
    for n, (label, a) in enumerate(adapters):
        active = int(a.active_mask.sum())
        if active < 2:
            rows.append({"adapter": label, "active": active, "skipped": "fewer than 2 active ranks"})
            continue
        svd_curve = energy_curve(a, "svd")
        learned = energy_curve(a, "learned-alpha")
        sub = rng.substream(n)
        randoms = np.array([energy_curve(a, "random-permutation", sub.substream(j)).auc for j in range(n_random)])
        rows.append(
            {
                "adapter": label,
                "active": active,
                "auc_svd": svd_curve.auc,
                "auc_learned": learned.auc,
                "auc_random_mean": float(randoms.mean()),
                "auc_random_std": float(randoms.std()),
                "improvement": learned.auc - float(randoms.mean()),
                "skipped": None,
            }
        )
    return rows


# --------------------------------------------------------------------------
# sweeps


def _final_metrics(model, task, config) -> dict:
    out = evaluate(model, task.x_test, task.y_test, 0, Rng(config.seed), config.obs_std)
    out["r_eff"] = sum(lr.effective_rank(a, config.tau) for _, a in model.adapters)
    return out


def tau_counts(model, tau: float) -> dict:
    """Effective rank of a fixed snapshot under threshold ``tau``; parameters are untouched."""
    per = {f"r_eff_layer{i}": lr.effective_rank(a, tau) for i, a in model.adapters}
    return {"r_eff": sum(per.values()), **per}


def sweep(kind: str, grid, base_config, task_params: dict, model_spec: dict, seeds, k_rng_seed: int = 0) -> list[dict]:
    """Run a beta, tau or MC-sample sweep; one row per (grid value, seed).

    beta: retrain per grid value and seed. tau: train once per seed with hard
    pruning disabled, then re-count the same snapshot at each tau.
    mc: train once per seed, then :func:`evaluator.sample_sweep` over ``grid``.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("sweep: empty grid")
    if kind not in ("beta", "tau", "mc"):
        raise ValueError(f"sweep: unknown kind {kind!r}")
    rows = []
    for seed in seeds:
        task = make_task({**task_params, "seed": seed})
        spec = dict(model_spec)
        if task.kind == "regression":
            spec["backbone_seed"] = task.params["backbone_seed"]
        if kind == "beta":
            for value in grid:
                model, _ = train(build_model(spec), task, replace(base_config, beta=float(value), seed=seed))
                rows.append({"kind": kind, "value": float(value), "seed": seed, **_final_metrics(model, task, base_config)})
        elif kind == "tau":
            model, _ = train(build_model(spec), task, replace(base_config, seed=seed, prune_steps=()))
            for value in grid:
                rows.append({"kind": kind, "value": float(value), "seed": seed, **tau_counts(model, float(value))})
        else:
            model, _ = train(build_model(spec), task, replace(base_config, seed=seed))
            for row in ev.sample_sweep(model, task.x_test, task.y_test, [int(k) for k in grid], Rng(k_rng_seed, (seed,))):
                rows.append({"kind": kind, "value": row["k"], "seed": seed, **row})
    return rows


def aggregate(rows: list[dict], columns: list[str]) -> list[dict]:
    """Mean and std of ``columns`` per grid value, as extra rows tagged by ``stat``."""
    out = []
    values = sorted({r["value"] for r in rows})
    for v in values:
        group = [r for r in rows if r["value"] == v]
        for stat, fn in (("mean", np.mean), ("std", np.std)):
            agg = {"kind": group[0]["kind"], "value": v, "seed": stat}
            for c in columns:
                xs = [r[c] for r in group if r.get(c) is not None]
                agg[c] = float(fn(xs)) if xs else None
            out.append(agg)
    return out
