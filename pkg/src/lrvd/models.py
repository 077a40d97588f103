"""Frozen backbones with adapter slots, plus synthetic tasks with known structure."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import adapter as lr
from . import autodiff as ad
from .numerics import Rng, ShapeError, matrix_from_json, matrix_to_json

# stream indices under a seed, kept distinct so changing one consumer never shifts another
BACKBONE_STREAM = 1
ADAPTER_STREAM = 2
HEAD_STREAM = 3
TASK_STREAM = 4


def frozen_weight(backbone_seed: int, layer_index: int, d_out: int, d_in: int) -> np.ndarray:
    """Frozen base weight ``W_0 ~ N(0, 1/d_in)``, reproducible from the backbone seed."""
    rng = Rng(backbone_seed, (BACKBONE_STREAM, layer_index))
    return rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)


# --------------------------------------------------------------------------
# tasks


@dataclass
class SyntheticTask:
    kind: str  # "regression" | "classification"
    params: dict
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    teacher_update: np.ndarray | None = None

    @property
    def d_in(self) -> int:
        return self.x_train.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.params["d_out"] if self.kind == "regression" else self.params["n_classes"]

    def to_json(self) -> dict:
        return {"kind": self.kind, **self.params}


def _orthonormal_columns(rng: Rng, n: int, k: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, k)))
    return q * np.sign(np.diag(r))


def make_lowrank_regression_task(
    d_in: int = 32,
    d_out: int = 32,
    r_star: int = 3,
    spectrum=None,
    noise_std: float = 0.1,
    n_train: int = 1024,
    n_test: int = 512,
    seed: int = 0,
    n_val: int | None = None,
    backbone_seed: int | None = None,
) -> SyntheticTask:
    """Teacher ``y = (W_0 + dW*) x + noise`` with ``dW* = sum_i s_i u_i v_i^T``.

    ``W_0`` is the same frozen weight :func:`build_model` draws for layer 0 of
    a regression backbone with ``backbone_seed`` (defaults to ``seed``).
    ``spectrum`` defaults to linearly decaying values ``r_star, ..., 1``.
    """
    if r_star < 0 or r_star > min(d_in, d_out):
        raise ValueError(f"regression task: r_star={r_star} infeasible for {d_out}x{d_in}")
    if spectrum is None:
        spectrum = [float(r_star - i) for i in range(r_star)]
    spectrum = [float(s) for s in spectrum]
    if len(spectrum) != r_star:
        raise ValueError(f"regression task: spectrum has {len(spectrum)} values for r_star={r_star}")
    if any(s <= 0 for s in spectrum) or any(a < b for a, b in zip(spectrum, spectrum[1:])):
        raise ValueError("regression task: spectrum must be positive and descending")
    if noise_std < 0:
        raise ValueError("regression task: noise_std must be >= 0")
    n_val = n_test if n_val is None else n_val
    backbone_seed = seed if backbone_seed is None else backbone_seed

    rng = Rng(seed, (TASK_STREAM,))
    teacher = np.zeros((d_out, d_in))
    if r_star:
        u = _orthonormal_columns(rng.substream(0), d_out, r_star)
        v = _orthonormal_columns(rng.substream(1), d_in, r_star)
        teacher = (u * np.array(spectrum)) @ v.T
    w0 = frozen_weight(backbone_seed, 0, d_out, d_in)
    w_true = w0 + teacher

    def draw(split: int, n: int):
        sub = rng.substream(10 + split)
        x = sub.standard_normal((n, d_in))
        y = x @ w_true.T + noise_std * sub.standard_normal((n, d_out))
        return x, y

    params = dict(
        d_in=d_in, d_out=d_out, r_star=r_star, spectrum=spectrum, noise_std=noise_std,
        n_train=n_train, n_val=n_val, n_test=n_test, seed=seed, backbone_seed=backbone_seed,
    )
    return SyntheticTask("regression", params, *draw(0, n_train), *draw(1, n_val), *draw(2, n_test), teacher)


def make_cluster_classification_task(
    d_in: int = 16,
    n_classes: int = 2,
    separation: float = 3.0,
    label_noise: float = 0.0,
    n_train: int = 256,
    n_val: int = 512,
    n_test: int = 2048,
    seed: int = 0,
) -> SyntheticTask:
    """Gaussian clusters with unit covariance and pairwise mean distance ``separation``.

    A ``label_noise`` fraction of labels is replaced by a uniform draw over all
    classes, so some of them keep their original value.
    """
    if n_classes < 2:
        raise ValueError("classification task: n_classes must be >= 2")
    if n_classes > d_in:
        raise ValueError("classification task: need d_in >= n_classes for orthogonal class means")
    if not 0.0 <= label_noise <= 1.0:
        raise ValueError(f"classification task: label_noise={label_noise} outside [0, 1]")
    if separation < 0:
        raise ValueError("classification task: separation must be >= 0")
    rng = Rng(seed, (TASK_STREAM,))
    means = _orthonormal_columns(rng.substream(0), d_in, n_classes).T * (separation / np.sqrt(2.0))

    def draw(split: int, n: int):
        sub = rng.substream(10 + split)
        labels = sub.generator.integers(0, n_classes, size=n)
        x = means[labels] + sub.standard_normal((n, d_in))
        resample = sub.generator.random(n) < label_noise
        noisy = sub.generator.integers(0, n_classes, size=n)
        return x, np.where(resample, noisy, labels)

    params = dict(
        d_in=d_in, n_classes=n_classes, separation=separation, label_noise=label_noise,
        n_train=n_train, n_val=n_val, n_test=n_test, seed=seed,
    )
    return SyntheticTask("classification", params, *draw(0, n_train), *draw(1, n_val), *draw(2, n_test))


def make_task(params: dict) -> SyntheticTask:
    params = dict(params)
    kind = params.pop("kind", None)
    if kind == "regression":
        return make_lowrank_regression_task(**params)
    if kind == "classification":
        return make_cluster_classification_task(**params)
    raise ValueError(f"unknown task kind {kind!r}")


# --------------------------------------------------------------------------
# backbones


@dataclass
class Layer:
    weight: np.ndarray  # frozen, (d_out, d_in)
    bias: np.ndarray | None = None  # frozen
    activation: str = "identity"
    adapter: lr.RankTiedAdapter | None = None

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def base(self, x: np.ndarray) -> np.ndarray:
        out = x @ self.weight.T
        return out if self.bias is None else out + self.bias


def _activate(h, activation: str):
    if activation == "identity":
        return h
    if activation == "relu":
        return h.relu() if isinstance(h, ad.Var) else np.maximum(h, 0.0)
    raise ValueError(f"unknown activation {activation!r}")


@dataclass
class BackboneModel:
    layers: list[Layer]
    head_bias: np.ndarray
    head_weight: np.ndarray | None = None
    task_kind: str = "regression"
    spec: dict = field(default_factory=dict)

    @property
    def adapters(self) -> list[tuple[int, lr.RankTiedAdapter]]:
        return [(i, layer.adapter) for i, layer in enumerate(self.layers) if layer.adapter is not None]

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def n_outputs(self) -> int:
        return self.head_bias.shape[0]

    def _head(self, h):
        out = h if self.head_weight is None else h @ self.head_weight.T
        return out + self.head_bias

    def features(self, x, mode: str = "deterministic", rng: Rng | None = None) -> np.ndarray:
        """Hidden representation before the head.

        ``mode`` is one of ``frozen`` (adapters ignored), ``deterministic``
        (posterior mean), ``local`` (local reparameterization noise) or
        ``direct`` (one joint factor sample per adapter).
        """
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.d_in:
            raise ShapeError(f"model: input shape {h.shape}, expected (batch, {self.d_in})")
        for i, layer in enumerate(self.layers):
            out = layer.base(h)
            a = layer.adapter
            if a is not None and mode != "frozen":
                if mode == "deterministic":
                    out = lr.forward_deterministic(h, a, out)
                elif mode == "local":
                    out = lr.forward_local_reparam(h, a, rng.substream(i), out)
                elif mode == "direct":
                    out = lr.forward_direct_sample(h, a, rng.substream(i), out)
                else:
                    raise ValueError(f"unknown forward mode {mode!r}")
            h = _activate(out, layer.activation)
        return h

    def forward(self, x, mode: str = "deterministic", rng: Rng | None = None) -> np.ndarray:
        return self._head(self.features(x, mode, rng))

    def trainable_parameter_count(self) -> int:
        n = sum(a.r_init * (a.d_in + a.d_out) + a.r_init for _, a in self.adapters)
        n += self.head_bias.size
        if self.head_weight is not None:
            n += self.head_weight.size
        return n

    def copy(self) -> BackboneModel:
        layers = [
            Layer(
                layer.weight.copy(),
                None if layer.bias is None else layer.bias.copy(),
                layer.activation,
                None if layer.adapter is None else layer.adapter.copy(),
            )
            for layer in self.layers
        ]
        hw = None if self.head_weight is None else self.head_weight.copy()
        return BackboneModel(layers, self.head_bias.copy(), hw, self.task_kind, dict(self.spec))

    def to_json(self) -> dict:
        return {
            "task_kind": self.task_kind,
            "spec": self.spec,
            "layers": [
                {
                    "weight": matrix_to_json(layer.weight),
                    "bias": None if layer.bias is None else [float(v) for v in layer.bias],
                    "activation": layer.activation,
                    "adapter": None if layer.adapter is None else layer.adapter.to_json(),
                }
                for layer in self.layers
            ],
            "head": {
                "weight": None if self.head_weight is None else matrix_to_json(self.head_weight),
                "bias": [float(v) for v in self.head_bias],
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> BackboneModel:
        layers = []
        for rec in obj["layers"]:
            adapter = None if rec["adapter"] is None else lr.RankTiedAdapter.from_json(rec["adapter"])
            bias = None if rec["bias"] is None else np.array(rec["bias"], dtype=np.float64)
            layer = Layer(matrix_from_json(rec["weight"]), bias, rec["activation"], adapter)
            if adapter is not None and (adapter.d_in, adapter.d_out) != (layer.d_in, layer.d_out):
                raise ValueError("checkpoint: adapter shape does not match its host layer")
            layers.append(layer)
        head = obj["head"]
        hw = None if head["weight"] is None else matrix_from_json(head["weight"])
        return cls(layers, np.array(head["bias"], dtype=np.float64), hw, obj["task_kind"], obj.get("spec", {}))


MODEL_DEFAULTS = {
    "kind": "regression",
    "d_in": 32,
    "d_out": 32,
    "n_classes": 2,
    "hidden": 32,
    "r_init": 16,
    "lam": 16.0,
    "init_log_alpha": -8.0,
    "clamp": list(lr.DEFAULT_CLAMP),
    "adapters": "all",
    "backbone_seed": 0,
}


def build_model(spec: dict) -> BackboneModel:
    """Construct a backbone from a flat spec (see ``MODEL_DEFAULTS`` for keys).

    ``regression``: one frozen linear layer with a trainable output bias.
    ``classification``: two frozen relu layers and a trainable linear head.
    ``adapters`` is ``"all"``, ``"none"`` or a list of layer indices.
    """
    unknown = sorted(set(spec) - set(MODEL_DEFAULTS))
    if unknown:
        raise ValueError(f"model spec: unknown keys {unknown}")
    s = {**MODEL_DEFAULTS, **spec}
    if int(s["r_init"]) < 1:
        raise ValueError("model spec: r_init must be >= 1")
    seed = int(s["backbone_seed"])
    clamp = tuple(float(v) for v in s["clamp"])

    if s["kind"] == "regression":
        dims = [(int(s["d_out"]), int(s["d_in"]), "identity")]
    elif s["kind"] == "classification":
        h = int(s["hidden"])
        dims = [(h, int(s["d_in"]), "relu"), (h, h, "relu")]
    else:
        raise ValueError(f"model spec: unknown kind {s['kind']!r}")
    if any(d < 1 for d_out, d_in, _ in dims for d in (d_out, d_in)):
        raise ValueError("model spec: dimensions must be positive")

    if s["adapters"] == "all":
        adapted = set(range(len(dims)))
    elif s["adapters"] == "none":
        adapted = set()
    else:
        adapted = {int(i) for i in s["adapters"]}
        if not adapted <= set(range(len(dims))):
            raise ValueError(f"model spec: adapter indices {sorted(adapted)} outside {len(dims)} layers")

    layers = []
    for i, (d_out, d_in, act) in enumerate(dims):
        adapter = None
        if i in adapted:
            adapter = lr.RankTiedAdapter.init(
                d_in, d_out, int(s["r_init"]), Rng(seed, (ADAPTER_STREAM, i)),
                lam=float(s["lam"]), init_log_alpha=float(s["init_log_alpha"]), clamp=clamp,
            )
        layers.append(Layer(frozen_weight(seed, i, d_out, d_in), None, act, adapter))

    if s["kind"] == "regression":
        head_weight = None
        head_bias = np.zeros(int(s["d_out"]))
    else:
        h, c = int(s["hidden"]), int(s["n_classes"])
        head_weight = Rng(seed, (HEAD_STREAM,)).standard_normal((c, h)) / np.sqrt(h)
        head_bias = np.zeros(c)
    return BackboneModel(layers, head_bias, head_weight, s["kind"], s)


def model_spec_for_task(task: SyntheticTask, **overrides) -> dict:
    """Model spec whose dimensions (and, for regression, frozen ``W_0``) match ``task``."""
    spec = {"kind": task.kind, "d_in": task.d_in}
    if task.kind == "regression":
        spec.update(d_out=task.params["d_out"], backbone_seed=task.params["backbone_seed"])
    else:
        spec.update(n_classes=task.params["n_classes"])
    spec.update(overrides)
    return spec
