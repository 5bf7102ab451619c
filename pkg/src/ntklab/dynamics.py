"""Standard, linearized, centered and centered-standard predictors.

With parent parameters ``theta_t`` and live parameters ``theta``:

* standard:           f(theta, x)
* linearized:         f(theta_t, x) + J(x) (theta - theta_t)
* centered:           J(x) (theta - theta_t)
* centered_standard:  f(theta, x) - f(theta_t, x)

where ``J`` is the parameter Jacobian at ``theta_t``.  Under the ``frozen``
batch-norm policy every evaluation uses the parent's running statistics, so
the tangent feature map of the linearized/centered models cannot move.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch
from torch import Tensor
from torch.func import jvp, vjp

from . import engine
from .engine import ParamVector, _apply
from .models import Architecture, ModelSnapshot, predict_class

KINDS = ("standard", "linearized", "centered", "centered_standard")
BN_POLICIES = ("frozen", "standard")


class MissingParent(ValueError):
    pass


class BatchNormPolicyError(ValueError):
    pass


class DynamicsModel:
    """A predictor with one of four dynamics over an optional parent snapshot.

    The model owns its live parameters, running statistics and momentum
    buffer; :meth:`sgd_step` updates them in place.
    """

    def __init__(
        self,
        arch: Architecture,
        kind: str = "standard",
        *,
        params: ParamVector | None = None,
        stats: dict | None = None,
        parent: ModelSnapshot | None = None,
        bn_policy: str | None = None,
        ablation: bool = False,
        dtype=torch.float64,
    ):
        if kind not in KINDS:
            raise ValueError(f"unknown dynamics kind {kind!r}")
        if kind != "standard" and parent is None:
            raise MissingParent(f"{kind} dynamics require a parent snapshot")
        if bn_policy is None:
            bn_policy = "standard" if parent is None else "frozen"
        if bn_policy not in BN_POLICIES:
            raise ValueError(f"unknown batch-norm policy {bn_policy!r}")
        if kind in ("linearized", "centered") and bn_policy != "frozen" and not ablation:
            raise BatchNormPolicyError(
                f"{kind} dynamics need frozen batch-norm statistics unless run as an ablation"
            )
        self.arch = arch
        self.graph = arch.graph
        self.kind = kind
        self.bn_policy = bn_policy
        self.ablation = ablation
        self.dtype = dtype
        self.parent = parent
        if parent is not None:
            self.parent_params, parent_stats = parent.restore(dtype, arch)
        else:
            self.parent_params, parent_stats = None, None
        if params is None:
            if parent is None:
                raise MissingParent("standard dynamics without a parent need explicit params")
            params = self.parent_params
        self.params = params.to(dtype).clone()
        if stats is None:
            stats = parent_stats if parent_stats is not None else {}
        self.stats = {k: v.to(dtype).clone() for k, v in stats.items()}
        self.buffer: ParamVector | None = None

    @classmethod
    def from_snapshot(cls, snapshot: ModelSnapshot, kind: str = "standard", **kw) -> "DynamicsModel":
        """Spawn a model whose live parameters start at the snapshot's."""
        return cls(snapshot.arch, kind, parent=snapshot, **kw)

    # -- evaluation ---------------------------------------------------------

    @property
    def train_mode(self) -> bool:
        return self.bn_policy == "standard" and engine.has_batchnorm(self.graph)

    def _x(self, x) -> Tensor:
        return torch.as_tensor(x).to(self.dtype)

    def _delta(self) -> ParamVector:
        return self.params - self.parent_params

    def _outputs(self, x: Tensor, train: bool):
        """(output, batch moments) of the dynamics, as a differentiable function of x."""
        g, stats = self.graph, self.stats
        if self.kind == "standard":
            return _apply(g, self.params.tensors, x, stats, train, False)
        if self.kind == "centered_standard":
            out, moments = _apply(g, self.params.tensors, x, stats, train, False)
            base, _ = _apply(g, self.parent_params.tensors, x, stats, train, False)
            return out - base, moments
        primal, tangent, moments = jvp(
            lambda p: _apply(g, p, x, stats, train, False),
            (self.parent_params.tensors,),
            (self._delta().tensors,),
            has_aux=True,
        )
        if self.kind == "linearized":
            return primal + tangent, moments
        return tangent, moments

    def predict(self, x, *, train: bool = False) -> Tensor:
        x = self._x(x)
        with torch.no_grad():
            return self._outputs(x, train)[0]

    def predict_class(self, x) -> Tensor:
        return predict_class(self.predict(x))

    def zeroth_and_first_order(self, x) -> tuple[Tensor, Tensor]:
        """(f(theta_t, x), J(x)(theta - theta_t)) in inference mode."""
        if self.parent_params is None:
            raise MissingParent("no parent to expand around")
        x = self._x(x)
        return jvp(
            lambda p: _apply(self.graph, p, x, self.stats, False, False)[0],
            (self.parent_params.tensors,),
            (self._delta().tensors,),
        )

    def _param_pullback(self, x: Tensor, train: bool):
        g, stats = self.graph, self.stats
        if self.kind in ("standard", "centered_standard"):
            out, pullback, moments = vjp(
                lambda p: _apply(g, p, x, stats, train, False), self.params.tensors, has_aux=True
            )
            if self.kind == "centered_standard":
                with torch.no_grad():
                    out = out - _apply(g, self.parent_params.tensors, x, stats, train, False)[0]
            return out, pullback, moments
        out, moments = self._outputs(x, train)
        _, pullback = vjp(lambda p: _apply(g, p, x, stats, train, False)[0], self.parent_params.tensors)
        return out, pullback, moments

    def grad_params(self, x, cotangent, *, train: bool = False) -> ParamVector:
        """Gradient of <cotangent, predict(x)> with respect to the live parameters.

        For linearized and centered dynamics this is the parent's Jacobian
        transposed, independent of the live parameters.
        """
        x = self._x(x)
        out, pullback, _ = self._param_pullback(x, train)
        cot = torch.as_tensor(cotangent, dtype=out.dtype)
        if cot.shape != out.shape:
            raise engine.ShapeError(f"cotangent shape {tuple(cot.shape)} != output {tuple(out.shape)}")
        (g,) = pullback(cot)
        return ParamVector({k: g[k] for k in self.params.tensors})

    def input_grad(self, x, cotangent, *, train: bool = False) -> Tensor:
        x = self._x(x)
        out, pullback = vjp(lambda xx: self._outputs(xx, train)[0], x)
        cot = torch.as_tensor(cotangent, dtype=out.dtype)
        if cot.shape != out.shape:
            raise engine.ShapeError(f"cotangent shape {tuple(cot.shape)} != output {tuple(out.shape)}")
        return pullback(cot)[0]

    def loss_input_grad(self, x, labels, loss: str = "ce") -> tuple[Tensor, Tensor]:
        """(per-call mean loss, gradient of the loss with respect to x), inference mode."""
        x = self._x(x)
        value, pullback = vjp(lambda xx: engine.loss_value(loss, self._outputs(xx, False)[0], labels), x)
        return value.detach(), pullback(torch.ones_like(value))[0]

    # -- training -----------------------------------------------------------

    def reset_momentum(self) -> None:
        self.buffer = None

    def sgd_step(
        self,
        x,
        labels,
        lr: float,
        momentum: float = 0.0,
        *,
        loss: str = "ce",
        adversary: Callable[["DynamicsModel", Tensor, Tensor], Tensor] | None = None,
    ) -> float:
        """One SGD+momentum step; returns the batch loss before the update.

        ``buffer <- momentum * buffer - lr * grad``, ``theta <- theta + buffer``.
        ``adversary`` (if given) maps (model, x, labels) to perturbed inputs.
        Running statistics move only under the ``standard`` batch-norm policy.
        """
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        x = self._x(x)
        labels = torch.as_tensor(labels)
        if adversary is not None:
            x = self._x(adversary(self, x, labels))
        train = self.train_mode
        out, pullback, moments = self._param_pullback(x, train)
        value, dlogits = engine.loss_and_grad(loss, out.detach(), labels)
        (g,) = pullback(dlogits)
        grad = ParamVector({k: g[k].detach() for k in self.params.tensors})
        if self.buffer is None:
            self.buffer = grad.zeros_like()
        self.buffer = self.buffer * momentum - grad * lr
        self.params = self.params + self.buffer
        if train and moments:
            self.stats = engine.update_running_stats(self.stats, moments)
        return value

    # -- snapshots ----------------------------------------------------------

    def feature_point(self) -> tuple[ParamVector, dict]:
        """Parameters and statistics at which this model's tangent features live."""
        if self.kind in ("linearized", "centered"):
            return self.parent_params, self.stats
        return self.params, self.stats

    def feature_snapshot(self, epoch: int = 0, tag: str = "benign", config_hash: str = "") -> ModelSnapshot:
        params, stats = self.feature_point()
        return ModelSnapshot.capture(self.arch, params, stats, epoch, tag, config_hash)

    def snapshot(self, epoch: int = 0, tag: str = "benign", config_hash: str = "") -> ModelSnapshot:
        return ModelSnapshot.capture(self.arch, self.params, self.stats, epoch, tag, config_hash)


def batched(fn, x, batch_size: int = 256):
    outs = [fn(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    return torch.cat(outs) if outs else torch.empty(0)


def accuracy(model: DynamicsModel, x, labels, batch_size: int = 256) -> float:
    labels = torch.as_tensor(labels).long()
    if len(labels) == 0:
        raise ValueError("empty dataset")
    pred = batched(model.predict_class, model._x(x), batch_size)
    return float((pred == labels).double().mean())


def relative_magnitude_terms(model: DynamicsModel, x, batch_size: int = 256) -> np.ndarray:
    """Per-sample |delta f|^2 / |f_0|^2; NaN where |f_0| = 0."""
    if model.kind != "linearized":
        raise ValueError("relative magnitude is defined for linearized dynamics")
    out = []
    x = model._x(x)
    for i in range(0, len(x), batch_size):
        with torch.no_grad():
            f0, df = model.zeroth_and_first_order(x[i : i + batch_size])
        num = (df**2).sum(dim=1)
        den = (f0**2).sum(dim=1)
        ratio = torch.where(den > 0, num / torch.where(den > 0, den, torch.ones_like(den)), torch.nan)
        out.append(ratio.double().numpy())
    return np.concatenate(out) if out else np.empty(0)


def relative_magnitude(model: DynamicsModel, x, batch_size: int = 256) -> float:
    """Mean over samples of |delta f|^2 / |f_0|^2, skipping samples with f_0 = 0."""
    terms = relative_magnitude_terms(model, x, batch_size)
    valid = ~np.isnan(terms)
    if not valid.any():
        raise ValueError("all samples have zero parent output")
    return float(terms[valid].mean())
