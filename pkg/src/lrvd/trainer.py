"""ELBO training loop: Adam on adapter means, per-rank log-alpha and the head."""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import adapter as lr
from . import autodiff as ad
from . import evaluator as ev
from .models import BackboneModel, SyntheticTask
from .numerics import Rng

CHECKPOINT_FORMAT = "lrvd-checkpoint/1"

# stream indices for the training loop
BATCH_STREAM = 20
NOISE_STREAM = 21
EVAL_STREAM = 22


class NumericalError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    adapter_lr: float = 1e-2
    head_lr: float = 1e-2
    beta: float = 3e-2
    tau: float = lr.DEFAULT_TAU
    steps: int = 3000
    batch_size: int = 64
    prune_steps: tuple[int, ...] = (1000, 2000, 3000)
    eval_interval: int = 250
    seed: int = 0
    clamp: tuple[float, float] = lr.DEFAULT_CLAMP
    eval_k: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    weight_decay: float = 1e-2
    kl_group_scaling: bool = False
    obs_std: float = 1.0

    def __post_init__(self):
        self.prune_steps = tuple(int(s) for s in self.prune_steps)
        self.clamp = tuple(float(c) for c in self.clamp)
        problems = []
        if self.adapter_lr <= 0 or self.head_lr <= 0:
            problems.append("learning rates must be positive")
        if self.beta < 0:
            problems.append("beta must be >= 0")
        if self.steps < 0 or self.batch_size < 1 or self.eval_interval < 1:
            problems.append("steps >= 0, batch_size >= 1 and eval_interval >= 1 required")
        if any(s < 1 or s > self.steps for s in self.prune_steps) and self.steps > 0:
            problems.append(f"prune_steps {list(self.prune_steps)} must lie in [1, steps={self.steps}]")
        if not self.clamp[0] < self.clamp[1]:
            problems.append(f"empty clamp interval {list(self.clamp)}")
        if self.eval_k < 0 or self.obs_std <= 0:
            problems.append("eval_k >= 0 and obs_std > 0 required")
        if problems:
            raise ValueError("train config: " + "; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"train config: unknown keys {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["prune_steps"] = list(self.prune_steps)
        out["clamp"] = list(self.clamp)
        return out


@dataclass
class RunRecord:
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("run record: steps must increase")
        self.rows.append(dict(row))

    def to_jsonl(self, timing: bool = False) -> str:
        """One JSON object per row. Wall-clock is left out unless asked for, so
        identical runs serialize to identical bytes."""
        lines = []
        for row in self.rows:
            rec = row if timing else {k: v for k, v in row.items() if k != "seconds"}
            lines.append(json.dumps(rec, sort_keys=True))
        return "".join(line + "\n" for line in lines)

    def __len__(self) -> int:
        return len(self.rows)


# --------------------------------------------------------------------------
# loss


@dataclass
class LossParts:
    loss: ad.Var
    nll: float
    kl: float
    leaves: dict[str, ad.Var]


def _param_leaves(tape: ad.Tape, model: BackboneModel):
    avars = {i: lr.adapter_vars(tape, a, f"layer{i}") for i, a in model.adapters}
    head_w = None if model.head_weight is None else tape.leaf(model.head_weight, name="head.weight")
    head_b = tape.leaf(model.head_bias.reshape(1, -1), name="head.bias")
    return avars, head_w, head_b


def elbo_loss(
    x: np.ndarray,
    y: np.ndarray,
    model: BackboneModel,
    beta: float,
    noise_rng: Rng | None = None,
    eps: dict[int, np.ndarray] | None = None,
    obs_std: float = 1.0,
    group_scaling: bool = False,
) -> LossParts:
    """Minimized objective ``mean NLL - beta * sum_adapters kl_sum``.

    The NLL uses one local-reparameterization draw per adapted layer; pass
    ``eps`` (layer index -> standard-normal array) to pin that noise.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("elbo_loss: empty batch")
    tape = ad.Tape()
    avars, head_w, head_b = _param_leaves(tape, model)
    h = tape.const(x)
    for i, layer in enumerate(model.layers):
        out = h @ tape.const(layer.weight.T)
        if layer.bias is not None:
            out = out + tape.const(layer.bias.reshape(1, -1))
        if layer.adapter is not None:
            if eps is not None and i in eps:
                e = eps[i]
            else:
                e = noise_rng.substream(i).standard_normal((x.shape[0], layer.d_out))
            out = out + lr.local_reparam_graph(h, avars[i], layer.adapter, e)
        h = out.relu() if layer.activation == "relu" else out
    logits = h if head_w is None else h @ head_w.T
    logits = logits + head_b

    if model.task_kind == "classification":
        nll = ad.cross_entropy(logits, y)
    else:
        resid = (logits - tape.const(y)) * (1.0 / obs_std)
        nll = resid.square().sum() * (0.5 / x.shape[0])

    kl = None
    for i, a in model.adapters:
        term = lr.kl_sum_graph(avars[i], a, group_scaling)
        kl = term if kl is None else kl + term
    loss = nll if kl is None or beta == 0 else nll - kl * beta

    leaves = {n.name: ad.Var(tape, j) for j, n in enumerate(tape.nodes) if n.kind == "leaf"}
    kl_value = 0.0 if kl is None else float(kl.value[0, 0])
    return LossParts(loss, float(nll.value[0, 0]), kl_value, leaves)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float | dict[str, float],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: dict[str, float] | None = None,
    frozen: dict[str, np.ndarray] | None = None,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam with decoupled weight decay; returns new params and state.

    ``lr`` and ``weight_decay`` may be given per parameter name. ``frozen``
    maps names to boolean masks of entries that must not move.
    """
    t = state.t + 1
    m_new, v_new, out = dict(state.m), dict(state.v), {}
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} for parameter {name} {p.shape}")
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1 - beta2) * g * g
        step_lr = lr[name] if isinstance(lr, dict) else lr
        update = step_lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        wd = 0.0 if weight_decay is None else weight_decay.get(name, 0.0)
        new = p - update - step_lr * wd * p
        if frozen is not None and name in frozen:
            keep = frozen[name]
            new = np.where(keep, p, new)
            m = np.where(keep, 0.0, m)
            v = np.where(keep, 0.0, v)
        m_new[name], v_new[name], out[name] = m, v, new
    return out, AdamState(m_new, v_new, t)


# --------------------------------------------------------------------------
# training


def _get_params(model: BackboneModel) -> dict[str, np.ndarray]:
    params = {}
    for i, a in model.adapters:
        params[f"layer{i}.mu_A"] = a.mu_A
        params[f"layer{i}.mu_B"] = a.mu_B
        params[f"layer{i}.log_alpha"] = a.log_alpha.reshape(1, -1)
    if model.head_weight is not None:
        params["head.weight"] = model.head_weight
    params["head.bias"] = model.head_bias.reshape(1, -1)
    return params


def _set_params(model: BackboneModel, params: dict[str, np.ndarray]) -> None:
    for i, a in model.adapters:
        a.mu_A = params[f"layer{i}.mu_A"]
        a.mu_B = params[f"layer{i}.mu_B"]
        a.log_alpha = np.clip(params[f"layer{i}.log_alpha"].ravel(), *a.clamp)
    if model.head_weight is not None:
        model.head_weight = params["head.weight"]
    model.head_bias = params["head.bias"].ravel()


def _frozen_masks(model: BackboneModel) -> dict[str, np.ndarray]:
    out = {}
    for i, a in model.adapters:
        off = ~a.active_mask
        out[f"layer{i}.mu_A"] = np.broadcast_to(off[:, None], a.mu_A.shape)
        out[f"layer{i}.mu_B"] = np.broadcast_to(off[None, :], a.mu_B.shape)
        out[f"layer{i}.log_alpha"] = off.reshape(1, -1)
    return out


def evaluate(model: BackboneModel, x, y, k: int, rng: Rng, obs_std: float = 1.0) -> dict:
    result = ev.mc_predict(model, x, k, rng, labels=y if model.task_kind == "classification" else None)
    return ev.summarize(result, y, obs_std)


def _adapter_diagnostics(model: BackboneModel) -> str:
    parts = []
    for i, a in model.adapters:
        parts.append(
            f"layer{i}: |mu_A|max={np.abs(a.mu_A).max():.3g} |mu_B|max={np.abs(a.mu_B).max():.3g} "
            f"log_alpha=[{a.log_alpha.min():.3g}, {a.log_alpha.max():.3g}] active={int(a.active_mask.sum())}"
        )
    return "; ".join(parts)


def train(model: BackboneModel, task: SyntheticTask, config: TrainConfig, on_row=None):
    """Optimize the ELBO in place; returns ``(model, RunRecord)``.

    Each step: draw a batch with replacement, one local-reparameterization
    noise draw, Adam update, re-clamp ``log_alpha``. Pruning with ``config.tau``
    happens after the update at every step listed in ``prune_steps``, and a
    record row is appended every ``eval_interval`` steps and at the last step.
    """
    if task.d_in != model.d_in or task.n_outputs != model.n_outputs:
        raise ValueError(
            f"train: task dims ({task.d_in} -> {task.n_outputs}) do not match model ({model.d_in} -> {model.n_outputs})"
        )
    record = RunRecord()
    if config.steps == 0:
        return model, record

    root = Rng(config.seed)
    batch_rng = root.substream(BATCH_STREAM)
    eval_rng = root.substream(EVAL_STREAM)
    lrs = {name: (config.head_lr if name.startswith("head.") else config.adapter_lr) for name in _get_params(model)}
    decay = {name: config.weight_decay for name in lrs if name.startswith("head.")}
    prune_at = set(config.prune_steps)
    state = AdamState()
    n = task.x_train.shape[0]
    t0 = time.perf_counter()

    for step in range(1, config.steps + 1):
        idx = batch_rng.generator.integers(0, n, size=config.batch_size)
        parts = elbo_loss(
            task.x_train[idx], task.y_train[idx], model, config.beta,
            noise_rng=root.substream(NOISE_STREAM, step), obs_std=config.obs_std,
            group_scaling=config.kl_group_scaling,
        )
        loss_value = float(parts.loss.value[0, 0])
        if not np.isfinite(loss_value):
            raise NumericalError(step, f"non-finite loss {loss_value}; {_adapter_diagnostics(model)}")
        grads = ad.backward(parts.loss.tape, parts.loss)
        params = _get_params(model)
        grads = {name: grads[name] for name in params}
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(step, f"non-finite gradient for {name}; {_adapter_diagnostics(model)}")
        new, state = adam_step(
            params, grads, state, lrs, config.adam_beta1, config.adam_beta2, config.adam_eps,
            weight_decay=decay, frozen=_frozen_masks(model),
        )
        _set_params(model, new)

        if step in prune_at:
            for _, a in model.adapters:
                lr.prune(a, config.tau)

        if step % config.eval_interval == 0 or step == config.steps:
            row = {
                "step": step,
                "train_loss": loss_value,
                "data_nll": parts.nll,
                "kl_sum": sum(lr.kl_sum(a, config.kl_group_scaling) for _, a in model.adapters),
                "r_eff": {f"layer{i}": lr.effective_rank(a, config.tau) for i, a in model.adapters},
                "active": {f"layer{i}": int(a.active_mask.sum()) for i, a in model.adapters},
            }
            det = evaluate(model, task.x_val, task.y_val, 0, eval_rng, config.obs_std)
            row.update({f"val_{key}_k0": value for key, value in det.items()})
            if config.eval_k > 0:
                mc = evaluate(model, task.x_val, task.y_val, config.eval_k, eval_rng.substream(step), config.obs_std)
                row.update({f"val_{key}_k{config.eval_k}": value for key, value in mc.items()})
            row["seconds"] = time.perf_counter() - t0
            record.append(row)
            if on_row is not None:
                on_row(row)
    return model, record


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: BackboneModel, path, extra: dict | None = None) -> None:
    """Write the model as JSON; the file appears atomically via rename."""
    path = Path(path)
    payload = {"format": CHECKPOINT_FORMAT, "model": model.to_json()}
    if extra:
        payload["extra"] = extra
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload))
    os.replace(tmp, path)


def load_checkpoint(path) -> BackboneModel:
    path = Path(path)
    text = path.read_text()
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not an {CHECKPOINT_FORMAT} file")
    try:
        return BackboneModel.from_json(payload["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed model record: {exc}") from None
