"""Central finite-difference checks for layers and networks."""
import numpy as np


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, x, h=1e-5, indices=None):
    """Central differences of the scalar ``f()`` w.r.t. entries of ``x`` (perturbed in place)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx) if indices is not None else flat.size)
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * h)
    return out


def check_layer(layer, x, seed=0, h=1e-5):
    """Compare analytic and numeric gradients of ``sum(w * layer(x))`` for random ``w``.

    Returns ``{"x": err, "<param>": err, ...}`` of relative errors. The
    forward pass runs in training mode with a generator reseeded on every
    call, so stochastic layers see the same mask each time.
    """
    x = np.array(x, dtype=np.float64)
    out = layer.forward(x, train=True, rng=np.random.default_rng(seed))
    # separate stream, so the probe weights never coincide with an input drawn from ``seed``
    w = np.random.default_rng([seed, 1]).standard_normal(out.shape)
    gx = layer.backward(w)
    analytic = {"x": gx}
    analytic.update({k: layer.grads[k].copy() for k in layer.params})

    def f():
        y = layer.forward(x, train=True, rng=np.random.default_rng(seed))
        layer._cache = None
        return float(np.sum(w * y))

    errors = {"x": rel_error(gx, numeric_grad(f, x, h))}
    for k, p in layer.params.items():
        errors[k] = rel_error(analytic[k], numeric_grad(f, p, h))
    return errors


def _relu_pattern(net):
    """Activation masks left in the ReLU caches by the last training-mode forward."""
    from .layers import ReLU

    return [layer._cache.copy() for layer in net.leaves() if isinstance(layer, ReLU) and layer._cache is not None]


def check_network(net, x, labels, seed=0, h=1e-5, per_param=6, include_input=True, return_info=False):
    """Finite-difference check of the mean cross-entropy of ``net`` (training mode).

    Checks ``per_param`` random entries of every parameter array and
    returns the relative error over all checked entries together.

    A perturbation of ``+-h`` that flips any ReLU on or off makes the
    loss non-differentiable inside the stencil, so the difference quotient
    says nothing about the gradient there. Such entries are detected by
    comparing activation patterns and left out; with ``return_info`` the
    result is ``(error, {"checked": n, "skipped": k})``.
    """
    from .losses import softmax_xent

    x = np.array(x, dtype=np.float64)
    pick = np.random.default_rng(seed + 7)

    def loss():
        logits = net.forward(x, train=True, rng=np.random.default_rng(seed))
        return softmax_xent(logits, labels)[0]

    logits = net.forward(x, train=True, rng=np.random.default_rng(seed))
    base = _relu_pattern(net)
    _, g = softmax_xent(logits, labels)
    gx = net.backward(g)

    targets = [(layer.grads[key], layer.params[key]) for _, layer, key in net.named_parameters()]
    if include_input:
        targets.append((gx, x))
    analytic, numeric, skipped = [], [], 0
    for grad, arr in targets:
        grad = grad.copy()
        flat = arr.reshape(-1)
        for i in pick.choice(arr.size, size=min(per_param, arr.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            fp = loss()
            smooth = all(np.array_equal(a, b) for a, b in zip(base, _relu_pattern(net)))
            flat[i] = old - h
            fm = loss()
            smooth = smooth and all(np.array_equal(a, b) for a, b in zip(base, _relu_pattern(net)))
            flat[i] = old
            if not smooth:
                skipped += 1
                continue
            analytic.append(grad.reshape(-1)[i])
            numeric.append((fp - fm) / (2 * h))
    for layer in net.leaves():
        layer._cache = None
    err = rel_error(np.array(analytic), np.array(numeric))
    if return_info:
        return err, {"checked": len(analytic), "skipped": skipped}
    return err
