"""Central finite-difference checks of the analytic backward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .loss import mse_loss


def relative_error(analytic, numeric, floor=1e-6) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``.

    The floor keeps gradients that are exactly zero in theory (a conv bias
    feeding batch normalisation) from comparing round-off against round-off.
    """
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def numeric_gradient(f, x, h=1e-5):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = f()
        flat[j] = orig - h
        fm = f()
        flat[j] = orig
        out[j] = (fp - fm) / (2.0 * h)
    return grad


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)  # (layer, name) -> relative error

    @property
    def per_layer(self) -> dict:
        worst: dict = {}
        for (i, _), err in self.errors.items():
            worst[i] = max(worst.get(i, 0.0), err)
        return worst

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.errors.values())

    def __str__(self):
        lines = [f"gradient check (tol {self.tolerance:g}): {'PASS' if self.passed else 'FAIL'}"]
        for (i, name), err in sorted(self.errors.items()):
            lines.append(f"  layer {i:2d} {name:8s} rel_err={err:.3e}")
        return "\n".join(lines)


def gradient_check(model, batch, target, tolerance=1e-4, h=1e-5, check_input=False) -> GradCheckReport:
    """Compare backward() against central differences of the MSE loss in train mode.

    Works on a copy so the caller's running statistics are untouched. With
    ``check_input`` the gradient with respect to the batch is checked too and
    reported under layer index -1.
    """
    model = model.copy()
    x = np.array(batch, dtype=np.float64)
    report = GradCheckReport(tolerance)

    def loss():
        out, _ = model.forward(x, train=True)
        return mse_loss(out, target)[0]

    out, cache = model.forward(x, train=True)
    _, dout = mse_loss(out, target)
    grads = model.backward(cache, dout)
    for i, name, p in list(model.parameters()):
        report.errors[(i, name)] = relative_error(grads[i][name], numeric_gradient(loss, p, h))

    if check_input:
        dx = _input_gradient(model, x, target)
        report.errors[(-1, "input")] = relative_error(dx, numeric_gradient(loss, x, h))
    return report


def _input_gradient(model, x, target):
    out, cache = model.forward(x, train=True)
    dy = mse_loss(out, target)[1]
    for i in range(len(model.layers) - 1, -1, -1):
        dy, _ = model.layers[i].backward(dy, cache.layer_caches[i])
    return dy


def layer_gradient_check(layer, x, h=1e-5, seed=0):
    """Check one layer in isolation against a random linear functional of its output.

    Returns a dict of relative errors keyed by parameter name plus ``"input"``.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    y, _ = layer.forward(x, True)
    proj = rng.standard_normal(y.shape)

    def f():
        return float(np.sum(layer.forward(x, True)[0] * proj))

    _, cache = layer.forward(x, True)
    dx, grads = layer.backward(proj, cache)
    errors = {"input": relative_error(dx, numeric_gradient(f, x, h))}
    for name, p in layer.params.items():
        errors[name] = relative_error(grads[name], numeric_gradient(f, p, h))
    return errors
