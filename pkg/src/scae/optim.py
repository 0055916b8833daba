"""Adam, gradient masking and the two-phase (dense, then masked) training driver."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from . import tensor as T
from .data import PatchDataset
from .errors import DimensionError, NumericError
from .model import Cae, loss_terms
from .projections import project_weights_, sparsity
from .tensor import Tensor

logger = logging.getLogger(__name__)

SCOPES = ("encoder", "decoder", "all")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Optional[np.ndarray]], state: AdamState):
    """One bias-corrected Adam update, in place.  Missing gradients count as zero."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros(p.shape, dtype=np.float64) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        if name not in state.m:
            state.m[name] = np.zeros(p.shape, dtype=np.float64)
            state.v[name] = np.zeros(p.shape, dtype=np.float64)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        step = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data[...] = (p.data.astype(np.float64) - step).astype(np.float32)
    return params


def mask_from_weights(w) -> np.ndarray:
    w = w.data if isinstance(w, Tensor) else np.asarray(w)
    return (w != 0).astype(np.float32)


def masked_grad(grad, mask) -> np.ndarray:
    grad = np.asarray(grad)
    mask = np.asarray(mask)
    if grad.shape != mask.shape:
        raise DimensionError(f"gradient shape {grad.shape} != mask shape {mask.shape}")
    return grad * mask


@dataclass
class DescentConfig:
    epochs: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    lam: Optional[float] = None  # None: use the model's config
    restart: str = "init"  # phase 2 starts from the initial weights ("init") or the projected ones ("continue")
    eta_mode: str = "layer"

    def adam(self) -> AdamState:
        return AdamState(self.lr, self.beta1, self.beta2, self.eps)


@dataclass
class EpochLog:
    phase: int
    epoch: int
    entropy: float
    distortion: float
    total: float


StepHook = Callable[[Cae, int, int, int], None]  # model, phase, epoch, batch


def run_epochs(model: Cae, dataset: PatchDataset, cfg: DescentConfig, phase: int, epoch_offset: int = 0,
               masks: Optional[Mapping[str, np.ndarray]] = None, step_hook: Optional[StepHook] = None) -> list[EpochLog]:
    """Adam epochs; with ``masks`` the gradients are masked and masked weights re-zeroed after each step."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    params = model.parameters()
    state = cfg.adam()
    history = []
    for e in range(cfg.epochs):
        sums = np.zeros(3)
        count = 0
        for b, xb in enumerate(dataset.batches(epoch_offset + e, cfg.batch_size)):
            try:
                terms = loss_terms(model, Tensor(xb), cfg.lam)
            except NumericError as exc:
                T.reset_graph()
                raise NumericError(f"phase {phase} epoch {e} batch {b}: {exc}") from exc
            model.zero_grad()
            T.backward(terms.total)
            grads = {k: p.grad for k, p in params.items()}
            if masks:
                for k, m in masks.items():
                    if grads[k] is not None:
                        grads[k] = masked_grad(grads[k], m)
            adam_step(params, grads, state)
            if masks:
                for k, m in masks.items():
                    params[k].data[m == 0] = 0.0
            n = len(xb)
            sums += n * np.array([terms.entropy.item(), terms.distortion.item(), terms.total.item()])
            count += n
            if step_hook is not None:
                step_hook(model, phase, e, b)
        ent, dist, tot = sums / count
        history.append(EpochLog(phase, e, ent, dist, tot))
        logger.debug("phase %d epoch %d: total %.6f (entropy %.4f, distortion %.6f)", phase, e, tot, ent, dist)
    return history


def first_descent(model: Cae, dataset: PatchDataset, cfg: DescentConfig, step_hook=None) -> list[EpochLog]:
    return run_epochs(model, dataset, cfg, phase=1, step_hook=step_hook)


def project_model(model: Cae, eta: float, constraint: str, scope: str, mode: str = "layer") -> dict[str, np.ndarray]:
    """Project the in-scope conv weights in place and return their masks.  Biases are untouched."""
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}")
    params = model.parameters()
    names = model.weight_names(scope)
    project_weights_([params[n].data for n in names], eta, constraint, mode)
    return {n: mask_from_weights(params[n]) for n in names}


def second_descent(model: Cae, dataset: PatchDataset, masks: Mapping[str, np.ndarray], cfg: DescentConfig,
                   init_state: Optional[Mapping[str, np.ndarray]] = None, step_hook=None) -> list[EpochLog]:
    """Masked retraining with a fresh optimizer.

    With ``cfg.restart == "init"`` all parameters first go back to
    ``init_state``; masked weights are zeroed either way.
    """
    if cfg.restart == "init":
        if init_state is None:
            raise ValueError("restart='init' needs the initial weights")
        model.load_state_dict(init_state)
    elif cfg.restart != "continue":
        raise ValueError(f"unknown restart mode {cfg.restart!r}")
    params = model.parameters()
    for k, m in masks.items():
        params[k].data[m == 0] = 0.0
    return run_epochs(model, dataset, cfg, phase=2, epoch_offset=cfg.epochs, masks=masks, step_hook=step_hook)


@dataclass
class DoubleDescentResult:
    model: Cae
    masks: dict[str, np.ndarray]
    history: list[EpochLog]
    sparsity_at_projection: float


def double_descent(model: Cae, dataset: PatchDataset, epochs: int, eta: float, constraint: str, scope: str,
                   cfg: Optional[DescentConfig] = None, step_hook=None) -> DoubleDescentResult:
    """Dense training, one projection of the in-scope weights, then masked retraining."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    cfg = DescentConfig() if cfg is None else cfg
    cfg = DescentConfig(**{**cfg.__dict__, "epochs": epochs})
    init_state = model.state_dict()
    history = first_descent(model, dataset, cfg, step_hook)
    masks = project_model(model, eta, constraint, scope, cfg.eta_mode)
    params = model.parameters()
    s = sparsity([params[n] for n in masks])
    logger.info("projection %s eta=%g scope=%s: sparsity %.4f", constraint, eta, scope, s)
    history += second_descent(model, dataset, masks, cfg, init_state, step_hook)
    return DoubleDescentResult(model, masks, history, s)


def eta_for_sparsity(model: Cae, target: float, constraint: str, scope: str, mode: str = "layer",
                     tol: float = 0.005, max_iter: int = 60) -> tuple[float, float]:
    """Bisect the radius (log scale) so the projection hits ``target`` sparsity in scope.

    Works on a copy of the weights.  Returns (eta, achieved sparsity).
    """
    params = model.parameters()
    names = model.weight_names(scope)
    base = [params[n].data.copy() for n in names]

    def s_at(eta):
        ws = [b.copy() for b in base]
        project_weights_(ws, eta, constraint, mode)
        return sparsity(ws)

    hi = max(float(np.abs(b).sum()) for b in base) * 1.01  # no projection at or above this radius
    lo = hi * 1e-9
    best = (hi, s_at(hi))
    for _ in range(max_iter):
        mid = math.sqrt(lo * hi)
        s = s_at(mid)
        if abs(s - target) < abs(best[1] - target):
            best = (mid, s)
        if abs(s - target) <= tol:
            break
        if s > target:
            lo = mid
        else:
            hi = mid
    return best
