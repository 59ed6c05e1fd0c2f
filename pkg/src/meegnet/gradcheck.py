"""Central finite-difference checks of the analytic backward passes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .losses import LossConfig, loss_gradient, loss_value
from .model import MEEGNet


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_array: dict[str, float] = field(default_factory=dict)
    checked: int = 0
    # largest |gradient| seen per array (analytic or numeric)
    magnitude: dict[str, float] = field(default_factory=dict)

    def passed(self, tol):
        return self.max_rel_error < tol


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / denom


def _pick(rng, size, max_entries):
    if max_entries is None or size <= max_entries:
        return np.arange(size)
    return np.sort(rng.choice(size, max_entries, replace=False))


def _fd_array(fn, arr, idx, eps):
    flat = arr.reshape(-1)
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn()
        flat[i] = orig - eps
        down = fn()
        flat[i] = orig
        out[j] = (up - down) / (2 * eps)
    return out


def _run_fixed(model: MEEGNet, x, bn_training, fused):
    # batch norm in the requested mode, dropout active with frozen masks
    layers = model.layers
    if fused:
        x = model.fused_front.forward(x, training=bn_training, cache=True)
        layers = layers[3:]
    model._front = "fused" if fused else "layered"
    for layer in layers:
        training = bn_training if isinstance(layer, nn.BatchNorm) else True
        x = layer.forward(x, training=training, cache=True)
    return x


def gradient_check(model: MEEGNet, x, labels, loss_cfg: LossConfig | None = None, eps=1e-5,
                   bn_mode="infer", max_entries=None, seed=0, fused=False) -> GradCheckResult:
    """Compare back-propagated parameter gradients of the full network with central differences.

    Dropout masks are drawn once and then frozen; batch norm runs either on its
    moving statistics (``bn_mode="infer"``) or on batch statistics without
    updating them (``"train"``). ``max_entries`` limits how many scalars of
    each parameter array are probed.
    """
    loss_cfg = loss_cfg or LossConfig()
    x = model._check_input(np.asarray(x))
    labels = np.asarray(labels)
    bn_training = bn_mode == "train"
    bns = model.batch_norm_layers()
    drops = model.dropout_layers()
    saved_update = [b.update_stats for b in bns]
    saved_freeze = [d.freeze for d in drops]
    for b in bns:
        b.update_stats = False
    for d in drops:
        d.freeze = True
    rng = np.random.default_rng(seed)
    try:
        probs = _run_fixed(model, x, bn_training, fused)
        grads = model.backward(loss_gradient(probs, labels, loss_cfg))

        def loss():
            return loss_value(_run_fixed(model, x, bn_training, fused), labels, loss_cfg).mean

        result = GradCheckResult(0.0)
        for name, layer, key in model.named_params():
            arr = layer.params[key]
            idx = _pick(rng, arr.size, max_entries)
            numeric = _fd_array(loss, arr, idx, eps)
            analytic = grads[name].reshape(-1)[idx]
            err = float(relative_error(analytic, numeric).max())
            result.per_array[name] = err
            result.magnitude[name] = float(max(np.abs(analytic).max(), np.abs(numeric).max()))
            result.checked += len(idx)
            result.max_rel_error = max(result.max_rel_error, err)
    finally:
        for b, flag in zip(bns, saved_update):
            b.update_stats = flag
        for d, flag in zip(drops, saved_freeze):
            d.freeze = flag
        model.clear_caches()
    return result


def layer_gradient_check(layer: nn.Layer, x, grad_out=None, eps=1e-5, training=True,
                         max_entries=None, seed=0) -> GradCheckResult:
    """Check one layer against central differences of ``sum(grad_out * layer(x))``.

    Both the input gradient (reported as ``"input"``) and every parameter
    gradient are compared.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=float)
    update = getattr(layer, "update_stats", None)
    freeze = getattr(layer, "freeze", None)
    if update is not None:
        layer.update_stats = False
    if freeze is not None:
        layer.freeze = True
    try:
        y = layer.forward(x, training=training, cache=True)
        if grad_out is None:
            grad_out = rng.standard_normal(y.shape)
        grad_in = layer.backward(grad_out)
        analytic = {k: v.copy() for k, v in layer.grads.items()}

        def objective():
            return float(np.sum(grad_out * layer.forward(x, training=training, cache=False)))

        result = GradCheckResult(0.0)
        targets = [("input", x, grad_in)] + [(k, layer.params[k], analytic[k]) for k in layer.params]
        for name, arr, ana in targets:
            if ana is None:
                continue
            idx = _pick(rng, arr.size, max_entries)
            numeric = _fd_array(objective, arr, idx, eps)
            err = float(relative_error(ana.reshape(-1)[idx], numeric).max())
            result.per_array[name] = err
            result.magnitude[name] = float(max(np.abs(ana.reshape(-1)[idx]).max(),
                                               np.abs(numeric).max()))
            result.checked += len(idx)
            result.max_rel_error = max(result.max_rel_error, err)
    finally:
        if update is not None:
            layer.update_stats = update
        if freeze is not None:
            layer.freeze = freeze
        layer.clear_cache()
    return result
