"""Central finite-difference gradient checking shared by the layer and model tests."""

import numpy as np

STEP = 1e-4
# gradients smaller than this are compared absolutely; avoids 0/0 on exact zeros
FLOOR = 1e-6


def rel_error(analytic, numeric) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)))


def numeric_grad(loss, arr: np.ndarray, h: float = STEP) -> np.ndarray:
    """d loss / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros(arr.shape)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss()
        flat[i] = old - h
        down = loss()
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return grad


def check_layer(layer, x, seed, params=None, reseed=None) -> dict:
    """Worst relative error per tensor for ``sum(R * layer(x))`` with random R.

    ``reseed`` is called before every forward so stochastic layers draw the
    same mask each time.
    """
    # separate stream: the caller usually draws x from ``seed`` itself
    rng = np.random.default_rng([seed, 7919])
    params = layer.params if params is None else params

    def forward():
        if reseed is not None:
            reseed()
        return layer.forward(x, train=True)

    r = rng.standard_normal(forward().shape)

    def loss():
        return float(np.sum(forward() * r))

    forward()
    dx = layer.backward(r)
    grads = {k: np.array(v) for k, v in getattr(layer, "grads", {}).items()}
    errors = {"input": rel_error(dx, numeric_grad(loss, x))}
    for name, p in params.items():
        errors[name] = rel_error(grads[name], numeric_grad(loss, p))
    return errors


def check_model(model, x, y) -> dict:
    """Worst relative error per parameter tensor of the mean training loss.

    The dropout generator is rewound before every forward pass so each
    evaluation sees the same mask.
    """
    from gated_paraling.training import batch_loss_and_grad

    state = model.dropout.rng.bit_generator.state

    def loss():
        model.dropout.rng.bit_generator.state = state
        return batch_loss_and_grad(model, x, y)[0]

    model.dropout.rng.bit_generator.state = state
    _, _, dlogits = batch_loss_and_grad(model, x, y)
    model.backward(dlogits)
    grads = {k: np.array(v) for k, v in model.gradients().items()}
    return {name: rel_error(grads[name], numeric_grad(loss, p)) for name, p in model.parameters().items()}
