"""Adam with bias correction."""

from dataclasses import dataclass, field

import numpy as np

from mvecho.errors import DimensionError


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """Apply one Adam update in place.

    ``params`` maps names to tensors, ``grads`` maps the same names to arrays.
    Names missing from ``grads`` are skipped (frozen this step).
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    lr_t = state.learning_rate * np.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    eps_t = state.epsilon * np.sqrt(1.0 - b2**t)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        # lr * m_hat / (sqrt(v_hat) + eps), rearranged to avoid two temporaries
        p.data -= (lr_t * m / (np.sqrt(v) + eps_t)).astype(p.data.dtype, copy=False)


class Adam:
    """Optimizer over a name->Tensor mapping reading each tensor's ``.grad``."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, trainable=None):
        self.params = params
        self.trainable = set(params) if trainable is None else set(trainable)
        self.state = AdamState(learning_rate=lr, beta1=beta1, beta2=beta2, epsilon=eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {
            name: p.grad
            for name, p in self.params.items()
            if name in self.trainable and p.grad is not None
        }
        adam_step(self.params, grads, self.state)
