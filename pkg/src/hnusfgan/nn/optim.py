import numpy as np

from .module import Parameter


class Adam:
    """Bias-corrected Adam; moments live on each :class:`Parameter`."""

    def __init__(self, params, lr: float = 2e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params: list[Parameter] = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps

    def step(self) -> None:
        adam_step(self.params, self.lr, *self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Apply one Adam update to every parameter and clear its gradient.

    Parameters without a gradient are treated as having a zero gradient, so
    their moments still decay and their step counts stay aligned.
    """
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.step += 1
        p.exp_avg *= beta1
        p.exp_avg += (1.0 - beta1) * g
        p.exp_avg_sq *= beta2
        p.exp_avg_sq += (1.0 - beta2) * g * g
        m_hat = p.exp_avg / (1.0 - beta1 ** p.step)
        v_hat = p.exp_avg_sq / (1.0 - beta2 ** p.step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad = None
