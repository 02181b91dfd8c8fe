"""Central finite-difference checks for the autodiff engine and the losses."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad

STEP = 1e-4
TOLERANCE = 1e-4
GRAD_FLOOR = 1e-8
# coordinates this small relative to the tensor's largest gradient are below
# what central differences resolve in float64
RELATIVE_FLOOR = 1e-6


def numerical_grad(fn: Callable[[], ad.Tensor], x: ad.Tensor, step: float = STEP) -> np.ndarray:
    """d fn() / d x by central differences, perturbing ``x.data`` in place."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = out.reshape(-1)
    with ad.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn().item()
            flat[i] = orig - step
            lo = fn().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
    return out


def max_relative_error(
    analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR, relative_floor: float = RELATIVE_FLOOR
) -> float:
    """Largest |a - n| / max(|a|, |n|) over coordinates with |a| above the floor.

    The floor is ``max(floor, relative_floor * max|a|)``. If every analytic
    coordinate is below it, the largest numeric magnitude is returned, so a
    missing gradient still shows up.
    """
    a = analytic.reshape(-1)
    n = numeric.reshape(-1)
    cut = max(floor, relative_floor * float(np.max(np.abs(a)))) if a.size else floor
    keep = np.abs(a) >= cut
    if not keep.any():
        return float(np.max(np.abs(n))) if n.size else 0.0
    a, n = a[keep], n[keep]
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a), np.abs(n))))


def check(fn: Callable[[], ad.Tensor], inputs: Sequence[ad.Tensor], step: float = STEP) -> float:
    """Max relative error between reverse-mode and finite-difference grads.

    ``fn`` must rebuild the graph from ``inputs`` on every call.
    """
    ad.zero_grad(inputs)
    loss = fn()
    ad.backward(loss)
    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        numeric = numerical_grad(fn, x, step)
        worst = max(worst, max_relative_error(analytic, numeric))
    ad.zero_grad(inputs)
    return worst


# ------------------------------------------------------------------ suite


def _away_from_zero(rng, shape, lo=0.2):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.0, size=shape)


def _leaf(a) -> ad.Tensor:
    return ad.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _weighted(t: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    """Scalar ``sum(w * t)`` with a fixed random weight so every output coordinate matters."""
    return ad.sum(ad.mul(t, ad.Tensor(w)))


def _primitive_cases(rng: np.random.Generator):
    """Yield ``(name, fn, inputs)`` for one random instance of each primitive."""
    dims = lambda: int(rng.integers(2, 9))  # noqa: E731
    m, n, k = dims(), dims(), dims()
    w_mn = rng.standard_normal((m, n))

    def unary(name, op, x):
        x = _leaf(x)
        return name, (lambda: _weighted(op(x), w_mn)), [x]

    a, b = _leaf(rng.standard_normal((m, n))), _leaf(rng.standard_normal((m, n)))
    s = _leaf(rng.standard_normal(()))
    yield "add", (lambda: _weighted(ad.add(a, b), w_mn)), [a, b]
    yield "add_scalar", (lambda: _weighted(ad.add(a, s), w_mn)), [a, s]
    yield "sub", (lambda: _weighted(ad.sub(a, b), w_mn)), [a, b]
    yield "mul", (lambda: _weighted(ad.mul(a, b), w_mn)), [a, b]
    yield "mul_scalar", (lambda: _weighted(ad.mul(s, a), w_mn)), [a, s]
    d = _leaf(_away_from_zero(rng, (m, n), 0.5))
    yield "div", (lambda: _weighted(ad.div(a, d), w_mn)), [a, d]
    yield unary("square", ad.square, rng.standard_normal((m, n)))
    yield unary("exp", ad.exp, rng.standard_normal((m, n)))
    yield unary("log", ad.log, rng.uniform(0.2, 2.0, (m, n)))
    yield unary("tanh", ad.tanh, rng.standard_normal((m, n)))
    yield unary("relu", ad.relu, _away_from_zero(rng, (m, n)))
    yield unary("softmax", lambda x: ad.softmax(x, axis=1), rng.standard_normal((m, n)))
    yield unary("log_softmax", lambda x: ad.log_softmax(x, axis=1), rng.standard_normal((m, n)))
    yield unary("l2_normalize", lambda x: ad.l2_normalize(x, axis=1), rng.standard_normal((m, n)))
    yield unary("transpose", lambda x: ad.transpose(ad.transpose(x)), rng.standard_normal((m, n)))

    x = _leaf(rng.standard_normal((m, n)))
    w_m = rng.standard_normal(m)
    yield "sum", (lambda: ad.add(_weighted(ad.sum(x, axis=1), w_m), ad.sum(x))), [x]
    yield "mean", (lambda: ad.add(_weighted(ad.mean(x, axis=1), w_m), ad.mean(x))), [x]
    y = _leaf(rng.standard_normal((n, k)))
    w_mk = rng.standard_normal((m, k))
    yield "matmul", (lambda: _weighted(ad.matmul(x, y), w_mk)), [x, y]
    p3, q3 = _leaf(rng.standard_normal((k, m, n))), _leaf(rng.standard_normal((k, n, m)))
    w3 = rng.standard_normal((k, m, m))
    yield "bmm", (lambda: _weighted(ad.bmm(p3, q3), w3)), [p3, q3]
    bias = _leaf(rng.standard_normal(n))
    yield "add_bias", (lambda: _weighted(ad.add_bias(x, bias), w_mn)), [x, bias]
    w_flat = rng.standard_normal(m * n)
    yield "reshape", (lambda: _weighted(ad.reshape(x, (m * n,)), w_flat)), [x]
    z = _leaf(rng.standard_normal((m, k)))
    w_cat = rng.standard_normal((m, n + k))
    yield "concat", (lambda: _weighted(ad.concat([x, z], axis=1), w_cat)), [x, z]
    idx = rng.integers(m, size=k)
    w_take = rng.standard_normal((k, n))
    yield "take", (lambda: _weighted(ad.take(x, idx), w_take)), [x]
    pl, ql = _leaf(rng.standard_normal((m, n))), _leaf(rng.standard_normal((m, n)))
    yield (
        "kl_divergence",
        (lambda: _weighted(ad.kl_divergence(ad.softmax(pl, axis=1), ad.softmax(ql, axis=1)), w_m)),
        [pl, ql],
    )
    t = rng.standard_normal((m, n))
    yield "mse", (lambda: ad.mse(a, t)), [a]


def _tiny_policy(rng: np.random.Generator):
    from .policy import PolicyConfig, init_params

    cfg = PolicyConfig(
        image_size=4, patch=2, latent_dim=int(rng.integers(2, 7)), hidden=int(rng.integers(2, 9)),
        horizon=2, action_dim=3, euler_steps=2,
    )
    params = init_params(cfg, rng)
    for t in params.tensors.values():  # non-zero everywhere so every path carries gradient
        t.data[...] = rng.normal(0.0, 0.5, size=t.shape)
    return cfg, params


def _random_latent(rng, b, d, leaf=True):
    from .policy import LatentPair

    make = _leaf if leaf else ad.Tensor
    attn = rng.dirichlet(np.ones(4), size=b)
    return LatentPair(
        z_v=make(rng.standard_normal((b, d))),
        z_l=make(rng.standard_normal((b, d))),
        z_fused=make(np.tanh(rng.standard_normal((b, d)))),
        attn=ad.Tensor(attn),
    )


def _loss_cases(rng: np.random.Generator):
    from . import losses as L
    from .policy import encode

    b, d = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    k = int(rng.integers(2, 5))
    old = _random_latent(rng, b, d, leaf=False)
    new = _random_latent(rng, b, d)
    est = L.init_estimator(d, rng, k=k, hidden=int(rng.integers(2, 9)))
    for t in est.tensors.values():
        t.data[...] = rng.normal(0.0, 0.7, size=t.shape)
    est_in = list(est.tensors.values())
    new_in = [new.z_v, new.z_l, new.z_fused]
    mask = rng.random(b) < 0.5
    mask[rng.integers(b)] = True
    temp = float(rng.uniform(0.1, 1.0))
    yield "rac_loss", (lambda: L.rac_loss(new, old, mask, temp)), [new.z_fused]
    yield "rac_loss_student_negatives", (lambda: L.rac_loss(new, old, mask, temp, "student")), [new.z_fused]
    yield "mi_loss", (lambda: L.mi_loss(old, new, est)), new_in + est_in
    yield "mi_loss_independent", (lambda: L.mi_loss(old, new, est, "independent")), new_in + est_in
    yield "mc_loss", (lambda: L.mc_loss(old, new, est)), new_in + est_in
    yield "cmi_loss", (lambda: L.cmi_loss(old, new, est)), new_in + est_in

    cfg, params = _tiny_policy(rng)
    bp = int(rng.integers(2, 5))
    images = rng.uniform(0, 1, (bp, cfg.channels, cfg.image_size, cfg.image_size))
    proprio = rng.uniform(-1, 1, (bp, cfg.proprio_dim))
    instr = np.stack([np.zeros(bp, int), rng.integers(cfg.n_objects, size=bp), rng.integers(cfg.n_targets, size=bp)], 1)
    actions = rng.uniform(-1, 1, (bp, cfg.horizon, cfg.action_dim))
    noise, tau = L.draw_flow_noise(rng, bp, cfg.horizon, cfg.action_dim)
    tau = np.clip(tau, 0.05, 0.95)
    p_in = list(params.tensors.values())

    def flow():
        lat = encode(images, proprio, instr, params)
        return L.flow_matching_loss(actions, lat, params, noise, tau)

    yield "flow_matching_loss", flow, p_in

    teacher_lat = _random_latent(rng, bp, cfg.latent_dim, leaf=False)
    est2 = L.init_estimator(cfg.latent_dim, rng, k=k, hidden=4)
    mask2 = np.zeros(bp, bool)
    mask2[: max(1, bp // 2)] = True
    weights = L.LossWeights(rac=float(rng.uniform(0.05, 1)), cmi=float(rng.uniform(0.05, 1)), temperature=temp)

    def total():
        lat = encode(images, proprio, instr, params)
        cl = L.flow_matching_loss(actions, lat, params, noise, tau)
        rac = L.rac_loss(lat, teacher_lat, mask2, weights.temperature)
        return L.total_loss(cl, rac, L.cmi_loss(teacher_lat, lat, est2), weights)

    yield "total_loss", total, p_in + list(est2.tensors.values())

    theta = {f"w{i}": _leaf(rng.standard_normal((int(rng.integers(1, 9)),))) for i in range(3)}
    anchor = {n: t.data + rng.standard_normal(t.shape) for n, t in theta.items()}
    fisher = {n: rng.uniform(0, 2, t.shape) for n, t in theta.items()}
    strength = float(rng.uniform(0.1, 10))
    yield "ewc_penalty", (lambda: L.ewc_penalty(theta, anchor, fisher, strength)), list(theta.values())


def run_suite(instances: int = 10, seed: int = 0) -> dict[str, float]:
    """Worst relative error per op over ``instances`` random instances."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(instances):
        for name, fn, inputs in list(_primitive_cases(rng)) + list(_loss_cases(rng)):
            worst[name] = max(worst.get(name, 0.0), check(fn, inputs))
    return worst


LOSS_OPS = (
    "rac_loss", "mi_loss", "mc_loss", "cmi_loss", "flow_matching_loss", "total_loss", "ewc_penalty",
)
