"""First-order optimizers driving parameter tensors in place.

The optimizer owns no graph state: after ``backward`` has populated a tape,
``step(tape)`` reads each parameter's gradient buffer and updates
``tensor.data`` in place.  Parameters without a gradient on the tape (not
reached by the loss) are skipped; non-finite gradients raise.
"""

from __future__ import annotations

import numpy as np

from .autodiff import AutodiffError, NonFiniteError, Tape, Tensor

__all__ = ["Optimizer"]

_METHODS = ("sgd", "sgd-momentum", "adam")


class Optimizer:
    """SGD, SGD with momentum, or Adam over a named parameter dict.

    State (momentum / moment estimates) is keyed by parameter name, so the
    same optimizer instance survives tape resets across steps.
    """

    def __init__(self, params: dict[str, Tensor], method: str = "sgd",
                 lr: float = 0.1, momentum: float = 0.9,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if method not in _METHODS:
            raise AutodiffError(f"unknown optimizer method '{method}'; "
                                f"expected one of {_METHODS}")
        if lr < 0:
            raise AutodiffError(f"learning rate must be >= 0, got {lr}")
        self.params = dict(params)
        self.method = method
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self._state: dict[str, dict[str, np.ndarray]] = {}

    def _slot(self, name: str, tensor: Tensor) -> dict[str, np.ndarray]:
        slot = self._state.get(name)
        if slot is None:
            slot = {
                "v": np.zeros_like(tensor.data),
                "m": np.zeros_like(tensor.data),
            }
            self._state[name] = slot
        return slot

    def step(self, tape: Tape) -> None:
        """Apply one update from the gradients recorded on ``tape``."""
        self.step_count += 1
        for name, t in self.params.items():
            if t.node is None or t.tape is not tape:
                continue
            g = tape.grads[t.node]
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
            if self.lr == 0.0:
                continue
            if self.method == "sgd":
                t.data -= self.lr * g
            elif self.method == "sgd-momentum":
                slot = self._slot(name, t)
                slot["v"] = self.momentum * slot["v"] + g
                t.data -= self.lr * slot["v"]
            else:  # adam
                slot = self._slot(name, t)
                slot["m"] = self.beta1 * slot["m"] + (1 - self.beta1) * g
                slot["v"] = self.beta2 * slot["v"] + (1 - self.beta2) * (g * g)
                m_hat = slot["m"] / (1 - self.beta1 ** self.step_count)
                v_hat = slot["v"] / (1 - self.beta2 ** self.step_count)
                t.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
