import numpy as np

from .spec import NetworkParams


class Adam:
    """Adam with bias correction, updating ``NetworkParams`` in place.

    Moment buffers are keyed by (layer index, tensor name) and created lazily.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 epsilon: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: dict[tuple[int, str], np.ndarray] = {}
        self.v: dict[tuple[int, str], np.ndarray] = {}
        self.t = 0

    def step(self, params: NetworkParams, grads: list[dict[str, np.ndarray]]) -> None:
        for i, g in enumerate(grads):
            for key, value in g.items():
                if not np.all(np.isfinite(value)):
                    raise FloatingPointError(f"non-finite gradient for layer {i} {key}")
                if value.shape != params.tensors[i][key].shape:
                    raise ValueError(f"gradient shape {value.shape} != param shape for layer {i} {key}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, g in enumerate(grads):
            for key, grad in g.items():
                p = params.tensors[i][key]
                m = self.m.setdefault((i, key), np.zeros_like(p))
                v = self.v.setdefault((i, key), np.zeros_like(p))
                m *= self.beta1
                m += (1 - self.beta1) * grad
                v *= self.beta2
                v += (1 - self.beta2) * (grad * grad)
                update = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.epsilon)
                p -= update.astype(p.dtype, copy=False)
