"""Rank-tied variational low-rank adapter.

The posterior over the factors is

    A_ij ~ N(mu_A[i, j], alpha_i * mu_A[i, j]**2)
    B_ki ~ N(mu_B[k, i], alpha_i * mu_B[k, i]**2)

with one ``log_alpha`` per rank shared by row ``i`` of A and column ``i`` of B.
The update applied to a layer is ``(lam / r_init) * B @ A``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .numerics import Rng, ShapeError, as_matrix, matrix_from_json, matrix_to_json

# Sparse variational dropout KL approximation constants.
K1 = 0.63576
K2 = 1.87320
K3 = 1.48695

DEFAULT_CLAMP = (-10.0, 8.0)
DEFAULT_TAU = 4.0
VARIANCE_FLOOR = 1e-8


@dataclass(frozen=True)
class KlConstants:
    k1: float = K1
    k2: float = K2
    k3: float = K3


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def kl_term(log_alpha):
    """Per-rank negative-KL surrogate ``k1*sig(k2 + k3*t) - 0.5*log(1 + 1/alpha) - k1``.

    Non-positive, nondecreasing in ``t = log alpha`` and tends to 0 as t grows.
    Works elementwise on arrays.
    """
    t = np.asarray(log_alpha, dtype=np.float64)
    # log(1 + e^{-t}) evaluated without overflow for very negative t
    softplus_neg = np.logaddexp(0.0, -t)
    out = K1 * _sigmoid(K2 + K3 * t) - 0.5 * softplus_neg - K1
    return float(out) if out.ndim == 0 else out


@dataclass
class RankTiedAdapter:
    mu_A: np.ndarray
    mu_B: np.ndarray
    log_alpha: np.ndarray
    lam: float = 16.0
    active_mask: np.ndarray | None = None
    clamp: tuple[float, float] = DEFAULT_CLAMP

    def __post_init__(self):
        self.mu_A = as_matrix(self.mu_A, "mu_A")
        self.mu_B = as_matrix(self.mu_B, "mu_B")
        self.log_alpha = np.asarray(self.log_alpha, dtype=np.float64).ravel().copy()
        r = self.mu_A.shape[0]
        if self.mu_B.shape[1] != r or self.log_alpha.shape[0] != r:
            raise ShapeError(
                f"adapter: mu_A {self.mu_A.shape}, mu_B {self.mu_B.shape} and "
                f"log_alpha ({self.log_alpha.shape[0]},) disagree on rank"
            )
        if self.lam <= 0:
            raise ValueError("adapter: lambda must be positive")
        lo, hi = self.clamp
        if not lo < hi:
            raise ValueError(f"adapter: empty clamp interval {self.clamp}")
        self.clamp = (float(lo), float(hi))
        self.log_alpha = np.clip(self.log_alpha, lo, hi)
        if self.active_mask is None:
            self.active_mask = np.ones(r, dtype=bool)
        self.active_mask = np.asarray(self.active_mask, dtype=bool).ravel().copy()
        if self.active_mask.shape[0] != r:
            raise ShapeError("adapter: active_mask length differs from rank")

    @classmethod
    def init(
        cls,
        d_in: int,
        d_out: int,
        r_init: int,
        rng: Rng,
        lam: float = 16.0,
        init_log_alpha: float = -8.0,
        clamp: tuple[float, float] = DEFAULT_CLAMP,
    ) -> RankTiedAdapter:
        """LoRA-style start: Gaussian ``mu_A`` with variance ``1/d_in``, zero ``mu_B``."""
        if r_init < 1:
            raise ValueError("adapter: r_init must be >= 1")
        mu_A = rng.standard_normal((r_init, d_in)) / np.sqrt(d_in)
        mu_B = np.zeros((d_out, r_init))
        return cls(mu_A, mu_B, np.full(r_init, float(init_log_alpha)), lam=lam, clamp=clamp)

    @property
    def r_init(self) -> int:
        return self.mu_A.shape[0]

    @property
    def d_in(self) -> int:
        return self.mu_A.shape[1]

    @property
    def d_out(self) -> int:
        return self.mu_B.shape[0]

    @property
    def scaling(self) -> float:
        return self.lam / self.r_init

    @property
    def alpha(self) -> np.ndarray:
        return np.exp(self.log_alpha)

    def mean_update(self) -> np.ndarray:
        """Posterior-mean ``Delta W`` of shape ``(d_out, d_in)``."""
        return self.scaling * (self.mu_B * self.active_mask) @ self.mu_A

    def components(self) -> list[np.ndarray]:
        """Scaled rank-one terms ``(lam/r_init) * mu_B[:, i] mu_A[i, :]`` for every rank."""
        return [self.scaling * np.outer(self.mu_B[:, i], self.mu_A[i]) for i in range(self.r_init)]

    def copy(self) -> RankTiedAdapter:
        return RankTiedAdapter(
            self.mu_A.copy(),
            self.mu_B.copy(),
            self.log_alpha.copy(),
            lam=self.lam,
            active_mask=self.active_mask.copy(),
            clamp=self.clamp,
        )

    def to_json(self) -> dict:
        return {
            "mu_A": matrix_to_json(self.mu_A),
            "mu_B": matrix_to_json(self.mu_B),
            "log_alpha": [float(v) for v in self.log_alpha],
            "lambda": float(self.lam),
            "r_init": self.r_init,
            "active_mask": [bool(v) for v in self.active_mask],
            "clamp": list(self.clamp),
        }

    @classmethod
    def from_json(cls, obj: dict) -> RankTiedAdapter:
        missing = {"mu_A", "mu_B", "log_alpha", "lambda", "r_init", "active_mask"} - set(obj)
        if missing:
            raise ValueError(f"adapter record missing keys: {sorted(missing)}")
        adapter = cls(
            matrix_from_json(obj["mu_A"]),
            matrix_from_json(obj["mu_B"]),
            np.array(obj["log_alpha"], dtype=np.float64),
            lam=float(obj["lambda"]),
            active_mask=np.array(obj["active_mask"], dtype=bool),
            clamp=tuple(obj.get("clamp", DEFAULT_CLAMP)),
        )
        if adapter.r_init != int(obj["r_init"]):
            raise ValueError(f"adapter record: r_init {obj['r_init']} but factors have rank {adapter.r_init}")
        return adapter


def kl_sum(adapter: RankTiedAdapter, group_scaling: bool = False) -> float:
    """Sum of :func:`kl_term` over active ranks.

    ``group_scaling`` multiplies each term by the number of tied entries
    ``d_in + d_out``.
    """
    terms = kl_term(adapter.log_alpha[adapter.active_mask])
    weight = (adapter.d_in + adapter.d_out) if group_scaling else 1.0
    return float(weight * np.sum(terms))


def _check_x(x: np.ndarray, adapter: RankTiedAdapter, base_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    base_out = np.asarray(base_out, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != adapter.d_in:
        raise ShapeError(f"adapter forward: input shape {x.shape}, adapter expects (batch, {adapter.d_in})")
    if base_out.shape != (x.shape[0], adapter.d_out):
        raise ShapeError(
            f"adapter forward: base_out shape {base_out.shape}, expected ({x.shape[0]}, {adapter.d_out})"
        )
    return x, base_out


def forward_deterministic(x, adapter: RankTiedAdapter, base_out) -> np.ndarray:
    x, base_out = _check_x(x, adapter, base_out)
    s = (x @ adapter.mu_A.T) * adapter.active_mask
    return base_out + adapter.scaling * (s @ adapter.mu_B.T)


def local_reparam_moments(x, adapter: RankTiedAdapter) -> tuple[np.ndarray, np.ndarray]:
    """Output-space mean and variance of the (unscaled) adapter output ``x A^T B^T``.

    The variance omits the product-of-variances term, as in the standard
    local reparameterization moment match.
    """
    x = np.asarray(x, dtype=np.float64)
    mask = adapter.active_mask
    alpha = adapter.alpha * mask
    m_s = (x @ adapter.mu_A.T) * mask
    v_s = (x * x) @ (alpha[:, None] * adapter.mu_A**2).T
    mu_B2 = adapter.mu_B**2
    m_y = m_s @ adapter.mu_B.T
    v_y = v_s @ mu_B2.T + (m_s * m_s) @ (mu_B2 * alpha).T
    return m_y, v_y


def forward_local_reparam(x, adapter: RankTiedAdapter, rng: Rng | None, base_out, eps=None) -> np.ndarray:
    """Sample the adapter output in activation space.

    ``eps`` may be passed to pin the standard-normal noise (shape
    ``(batch, d_out)``); otherwise it is drawn from ``rng``.
    """
    x, base_out = _check_x(x, adapter, base_out)
    m_y, v_y = local_reparam_moments(x, adapter)
    if eps is None:
        eps = rng.standard_normal(m_y.shape)
    return base_out + adapter.scaling * (m_y + eps * np.sqrt(v_y + VARIANCE_FLOOR))


def sample_factors(adapter: RankTiedAdapter, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw one (A, B) pair from the posterior; pruned ranks are zeroed."""
    sd = np.sqrt(adapter.alpha) * adapter.active_mask
    a = adapter.mu_A * (1.0 + sd[:, None] * rng.standard_normal(adapter.mu_A.shape))
    b = adapter.mu_B * (1.0 + sd[None, :] * rng.standard_normal(adapter.mu_B.shape))
    return a * adapter.active_mask[:, None], b * adapter.active_mask[None, :]


def forward_direct_sample(x, adapter: RankTiedAdapter, rng: Rng, base_out) -> np.ndarray:
    x, base_out = _check_x(x, adapter, base_out)
    a, b = sample_factors(adapter, rng)
    return base_out + adapter.scaling * ((x @ a.T) @ b.T)


def effective_rank(adapter: RankTiedAdapter, tau: float = DEFAULT_TAU) -> int:
    return int(np.sum(adapter.active_mask & (adapter.log_alpha < tau)))


def prune(adapter: RankTiedAdapter, tau: float = DEFAULT_TAU) -> RankTiedAdapter:
    """Permanently deactivate ranks with ``log_alpha >= tau`` (in place; returns the adapter)."""
    adapter.active_mask &= adapter.log_alpha < tau
    return adapter


# --------------------------------------------------------------------------
# graph builders used for training


@dataclass
class AdapterVars:
    mu_A: ad.Var
    mu_B: ad.Var
    log_alpha: ad.Var


def adapter_vars(tape: ad.Tape, adapter: RankTiedAdapter, prefix: str) -> AdapterVars:
    return AdapterVars(
        mu_A=tape.leaf(adapter.mu_A, name=f"{prefix}.mu_A"),
        mu_B=tape.leaf(adapter.mu_B, name=f"{prefix}.mu_B"),
        log_alpha=tape.leaf(adapter.log_alpha.reshape(1, -1), name=f"{prefix}.log_alpha"),
    )


def local_reparam_graph(x: ad.Var, p: AdapterVars, adapter: RankTiedAdapter, eps: np.ndarray) -> ad.Var:
    """Adapter contribution ``(lam/r_init) * (m_y + eps * sqrt(v_y + floor))`` on the tape."""
    tape = x.tape
    lo, hi = adapter.clamp
    mask = tape.const(adapter.active_mask.astype(np.float64).reshape(1, -1))
    alpha = p.log_alpha.clamp(lo, hi).exp() * mask
    m_s = (x @ p.mu_A.T) * mask
    v_s = x.square() @ (p.mu_A.square().T * alpha)
    mu_B2 = p.mu_B.square()
    m_y = m_s @ p.mu_B.T
    v_y = v_s @ mu_B2.T + m_s.square() @ (mu_B2 * alpha).T
    noise = tape.const(eps) * (v_y + VARIANCE_FLOOR).sqrt()
    return (m_y + noise) * adapter.scaling


def deterministic_graph(x: ad.Var, p: AdapterVars, adapter: RankTiedAdapter) -> ad.Var:
    mask = x.tape.const(adapter.active_mask.astype(np.float64).reshape(1, -1))
    return ((x @ p.mu_A.T) * mask @ p.mu_B.T) * adapter.scaling


def kl_sum_graph(p: AdapterVars, adapter: RankTiedAdapter, group_scaling: bool = False) -> ad.Var:
    tape = p.log_alpha.tape
    lo, hi = adapter.clamp
    t = p.log_alpha.clamp(lo, hi)
    sig = ad.sigmoid(t * K3 + K2)
    softplus_neg = (ad.exp(-t) + 1.0).log()
    terms = sig * K1 - softplus_neg * 0.5 - K1
    mask = tape.const(adapter.active_mask.astype(np.float64).reshape(1, -1))
    total = (terms * mask).sum()
    if group_scaling:
        total = total * float(adapter.d_in + adapter.d_out)
    return total
