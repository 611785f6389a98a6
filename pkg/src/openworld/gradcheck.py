"""Central finite-difference gradient checking against the analytic backward pass."""

from __future__ import annotations

import numpy as np


def central_difference(f, arr, h=1e-5, indices=None):
    """Numerically differentiate scalar f() w.r.t. entries of arr (modified in place).

    f must re-read arr on every call. Returns an array shaped like arr when
    indices is None, otherwise a flat vector of derivatives for those indices.
    """
    flat = arr.reshape(-1)
    if indices is None:
        indices = range(flat.size)
        out = np.zeros(arr.size, dtype=np.float64)
        full = True
    else:
        out = np.zeros(len(indices), dtype=np.float64)
        full = False
    for pos, idx in enumerate(indices):
        orig = flat[idx]
        flat[idx] = orig + h
        fp = f()
        flat[idx] = orig - h
        fm = f()
        flat[idx] = orig
        out[pos] = (fp - fm) / (2.0 * h)
    return out.reshape(arr.shape) if full else out


def relative_errors(analytic, numeric, floor=1e-5):
    """|a - n| / max(|a|, |n|, floor).

    The floor absorbs central-difference roundoff (~1e-15 * loss / h absolute),
    which otherwise dominates for gradients far below the loss scale; above the
    floor this is a plain relative comparison.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def max_relative_error(analytic, numeric, floor=1e-5):
    return float(relative_errors(analytic, numeric, floor).max())


def _random_layer_case(kind, rng):
    """A small random layer of the given kind plus an input tensor (float64)."""
    from . import nn

    if kind == "conv2d":
        k = int(rng.integers(1, 5))
        stride = int(rng.integers(1, 4))
        cin = int(rng.integers(1, 4))
        cout = int(rng.integers(1, 5))
        h = k + int(rng.integers(0, 6))
        w = k + int(rng.integers(0, 6))
        kernels = rng.normal(size=(k, k, cin, cout))
        layer = nn.Conv2D(kernels, rng.normal(size=cout), stride=stride)
        x = rng.normal(size=(1, h, w, cin))
    elif kind == "maxpool":
        win = int(rng.integers(1, 5))
        h = win + int(rng.integers(0, 6))
        w = win + int(rng.integers(0, 6))
        c = int(rng.integers(1, 4))
        layer = nn.MaxPool2D(win)
        x = rng.normal(size=(1, h, w, c))
    elif kind == "relu":
        shape = (1,) + tuple(int(rng.integers(1, 6)) for _ in range(3))
        layer = nn.ReLU()
        # keep inputs away from the kink so central differences stay valid
        x = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    elif kind == "dropout":
        layer = nn.Dropout(float(rng.uniform(0.0, 0.8)))
        x = rng.normal(size=(1, int(rng.integers(2, 20))))
    elif kind == "dense":
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, 7))
        layer = nn.Dense(rng.normal(size=(m, n)), rng.normal(size=m))
        x = rng.normal(size=(1, n))
    elif kind in ("sigmoid-output", "softmax-output"):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, 7))
        act = "sigmoid" if kind == "sigmoid-output" else "softmax"
        layer = nn.OutputHead(rng.normal(size=(m, n)), rng.normal(size=m), activation=act)
        x = rng.normal(size=(1, n))
    else:
        raise ValueError(kind)
    return layer, x


def check_layer_kind(kind, n_cases=100, seed=0, tol=1e-4, h=1e-5):
    """Random-case finite-difference sweep for one layer kind.

    Projects the layer output onto a random vector to get a scalar, then checks
    analytic input and parameter gradients against central differences. For the
    output heads the fused activation+loss gradient is checked instead.
    Returns the worst relative error over all cases; raises AssertionError on
    any case exceeding tol.
    """
    from . import nn

    rng = np.random.default_rng(seed)
    worst = 0.0
    for case in range(n_cases):
        if kind in ("sigmoid-output", "softmax-output"):
            layer, x = _random_layer_case(kind, rng)
            net = nn.Network(layers=[layer], input_shape=x.shape[1:], dtype=np.float64)
            k = layer.spec.units
            target = np.zeros((1, k))
            target[0, int(rng.integers(0, k))] = 1.0
            err = check_network_gradients(net, x, target, h=h, tol=tol,
                                          rng_seed=int(rng.integers(1 << 30)))
            worst = max(worst, err)
            continue
        layer, x = _random_layer_case(kind, rng)
        proj = rng.normal(size=layer.spec.output_shape(x.shape[1:]))
        mask_seed = int(rng.integers(1 << 30))

        def scalar():
            out = layer.forward(x, train=True, rng=np.random.default_rng(mask_seed))
            return float((out * proj).sum())

        scalar()
        param_grads, dx = layer.backward(np.broadcast_to(proj, (1,) + proj.shape).astype(np.float64))
        tensors = [("input", x, dx[0])] + [
            (name, p, param_grads[name]) for name, p in layer.params().items()]
        for name, arr, analytic in tensors:
            numeric = central_difference(scalar, arr, h=h)
            err = max_relative_error(analytic, numeric)
            worst = max(worst, err)
            if err >= tol:
                raise AssertionError(
                    f"{kind} case {case}: fd mismatch on {name} "
                    f"(max relative error {err:.3e} >= {tol:.1e})")
    return worst


def check_network_gradients(network, x, target, h=1e-5, tol=1e-4, rng_seed=7,
                            samples_per_param=None):
    """Compare every (or a sampled subset of) parameter gradient to central differences.

    Dropout is re-seeded identically for each evaluation so the loss stays a
    deterministic function of the parameters. Returns the worst relative error.
    """
    from .nn import bce_loss_batch, softmax_ce_loss_batch

    def loss_fn():
        rng = np.random.default_rng(rng_seed)
        scores = network.forward(x, train=True, rng=rng)
        if network.head.activation == "sigmoid":
            loss, _ = bce_loss_batch(scores, target)
        else:
            loss, _ = softmax_ce_loss_batch(scores, target)
        network._train_ready = False
        return loss

    rng = np.random.default_rng(rng_seed)
    _, grads = network.loss_and_gradients(x, target, rng=np.random.default_rng(rng_seed))
    worst = 0.0
    skipped = checked = 0
    for layer, layer_grads in zip(network.layers, grads):
        for name, p in layer.params().items():
            if samples_per_param is not None and p.size > samples_per_param:
                idx = rng.choice(p.size, size=samples_per_param, replace=False)
            else:
                idx = np.arange(p.size)
            numeric = central_difference(loss_fn, p, h=h, indices=idx)
            analytic = layer_grads[name].reshape(-1)[idx]
            checked += len(idx)
            errs = relative_errors(analytic, numeric)
            for pos in np.flatnonzero(errs >= tol):
                # a ReLU kink or pool-argmax switch near x makes the central
                # difference itself invalid there. For a smooth coordinate the
                # h/2 and 2h estimates agree with fd(h) to ~C*h^2 (relative
                # ~1e-9), so any visible step dependence marks contamination.
                fd = [central_difference(loss_fn, p, h=hh, indices=[idx[pos]])[0]
                      for hh in (h / 2, 2 * h)]
                if max_relative_error([fd[0]] * 2, [fd[1], numeric[pos]]) > tol / 10:
                    skipped += 1
                    continue
                raise AssertionError(
                    f"gradient check failed for {layer.spec.kind} param {name!r}: "
                    f"relative error {errs[pos]:.3e} >= {tol:.1e}")
            smooth = errs < tol
            if smooth.any():
                worst = max(worst, float(errs[smooth].max()))
    if checked and skipped > 0.2 * checked:
        raise AssertionError(
            f"{skipped}/{checked} coordinates sat on non-smooth points; "
            "cannot certify gradients")
    return worst
