"""Adam with coupled L2 weight decay, and softmax cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    weight_decay: float = 0.0

    @classmethod
    def like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(state: AdamState, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Apply one Adam update to ``param`` in place and return it.

    The decay term is added to the gradient before the moment updates.
    """
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ShapeError(
            f"adam: param {param.shape}, grad {grad.shape}, state {state.m.shape} must agree"
        )
    g = grad + state.weight_decay * param if state.weight_decay else grad
    state.m *= state.beta1
    state.m += (1 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1 - state.beta2) * (g * g)
    state.t += 1
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    param -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(param.dtype, copy=False)
    return param


@dataclass
class Adam:
    """One :class:`AdamState` per named parameter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    weight_decay: float = 0.0
    states: dict[str, AdamState] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            state = self.states.get(name)
            if state is None:
                state = self.states[name] = AdamState.like(
                    p, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                    epsilon=self.epsilon, weight_decay=self.weight_decay,
                )
            adam_step(state, p, grads[name])


def softmax_cross_entropy(logits: np.ndarray, labels, n_classes: int | None = None):
    """Mean cross-entropy of ``softmax(logits)`` against integer labels.

    Returns ``(loss, grad_logits)`` with the gradient already divided by N.
    """
    labels = np.asarray(labels)
    n, k = logits.shape
    if n_classes is not None and k != n_classes:
        raise ShapeError(f"expected {n_classes} logits per row, got {logits.shape}")
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k - 1}], got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    rows = np.arange(n)
    loss = float(-log_p[rows, labels].mean())
    grad = np.exp(log_p)
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad
