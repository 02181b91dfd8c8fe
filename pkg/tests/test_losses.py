from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from continual_vla import autodiff as ad
from continual_vla import losses as L
from continual_vla.autodiff import Tensor
from continual_vla.policy import LatentPair


def latent(z_fused, z_v=None, z_l=None, leaf=False):
    z_fused = np.asarray(z_fused, dtype=float)
    b, d = z_fused.shape
    z_v = z_fused if z_v is None else z_v
    z_l = z_fused if z_l is None else z_l
    mk = lambda a: Tensor(a, requires_grad=leaf)  # noqa: E731
    return LatentPair(mk(z_v), mk(z_l), mk(z_fused), Tensor(np.full((b, 4), 0.25)))


def rand_latent(rng, b=4, d=6):
    return latent(rng.normal(size=(b, d)), rng.normal(size=(b, d)), rng.normal(size=(b, d)))


def softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


# ------------------------------------------------------------------ RAC


@pytest.mark.parametrize("temp", [0.07, 0.5, 3.0])
def test_rac_identical_latents_is_log_batch(temp):
    z = np.tile(np.random.default_rng(0).normal(size=(1, 5)), (4, 1))
    val = L.rac_loss(latent(z), latent(z), np.ones(4, bool), temp).item()
    assert val == pytest.approx(math.log(4), abs=1e-12)


def test_rac_saturated_positive():
    # unit vectors with <v1,u1> = 1, <v1,u2> = -1, temperature 0.1 -> logits 10 and -10
    v = np.array([[1.0, 0.0], [0.0, 1.0]])
    u = np.array([[1.0, 0.0], [-1.0, 0.0]])
    val = L.rac_loss(latent(v), latent(u), np.array([True, False]), 0.1).item()
    assert val == pytest.approx(math.log1p(math.exp(-20)), rel=1e-6)
    assert val == pytest.approx(2.06e-9, rel=0.01)


def rac_oracle(v, u, mask, temp, negatives="anchor"):
    total, n = 0.0, 0
    for i in range(len(v)):
        if not mask[i]:
            continue
        vi = v[i] / np.linalg.norm(v[i])
        sims = []
        for j in range(len(v)):
            other = u[j] if (negatives == "anchor" or j == i) else v[j]
            sims.append(float(np.dot(vi, other / np.linalg.norm(other))) / temp)
        total += -(sims[i] - math.log(sum(math.exp(s) for s in sims)))
        n += 1
    return total / n


@pytest.mark.parametrize("negatives", ["anchor", "student"])
def test_rac_matches_scalar_oracle(negatives):
    rng = np.random.default_rng(1)
    for _ in range(10):
        v, u = rng.normal(size=(5, 7)), rng.normal(size=(5, 7))
        mask = rng.random(5) < 0.6
        mask[0] = True
        got = L.rac_loss(latent(v), latent(u), mask, 0.07, negatives).item()
        assert got == pytest.approx(rac_oracle(v, u, mask, 0.07, negatives), abs=1e-10)


def test_rac_gradient_reaches_student_only():
    rng = np.random.default_rng(2)
    s, t = latent(rng.normal(size=(4, 3)), leaf=True), latent(rng.normal(size=(4, 3)))
    ad.backward(L.rac_loss(s, t, np.ones(4, bool)))
    assert s.z_fused.grad is not None and t.z_fused.grad is None


def test_rac_contract_errors():
    z = latent(np.ones((3, 2)))
    with pytest.raises(L.LossContractError):
        L.rac_loss(z, z, np.zeros(3, bool))
    with pytest.raises(L.LossContractError):
        L.rac_loss(z, latent(np.ones((2, 2))), np.ones(3, bool))
    with pytest.raises(L.LossContractError):
        L.rac_loss(latent(np.ones((1, 2))), latent(np.ones((1, 2))), np.ones(1, bool))


# ------------------------------------------------------------------ F and joint


def estimator(d=6, k=4, seed=0):
    return L.init_estimator(d, np.random.default_rng(seed), k=k, hidden=8)


def test_project_F_uniform_when_a_projection_is_zero():
    rng = np.random.default_rng(3)
    for name in ("v_proj", "l_proj"):
        est = estimator()
        est[name].data[...] = 0.0
        z = rand_latent(rng)
        assert np.allclose(L.project_F(z.z_v, z.z_l, est).data, 1.0 / 16, atol=1e-15)


def test_project_F_is_a_distribution_with_bilinear_log_structure():
    rng = np.random.default_rng(4)
    est = estimator()
    z = rand_latent(rng)
    F = L.project_F(z.z_v, z.z_l, est).data
    assert np.allclose(F.sum(axis=1), 1.0, atol=1e-9)
    for b in range(len(F)):
        logF = np.log(F[b].reshape(4, 4))
        centred = logF - logF.mean(0, keepdims=True) - logF.mean(1, keepdims=True) + logF.mean()
        sv = np.linalg.svd(centred, compute_uv=False)
        assert sv[1] < 1e-9 * max(sv[0], 1.0)
        x = z.z_v.data[b] @ est["v_proj"].data
        y = z.z_l.data[b] @ est["l_proj"].data
        assert np.allclose(centred, np.outer(x - x.mean(), y - y.mean()), atol=1e-9)


def test_joint_distribution_contract():
    rng = np.random.default_rng(5)
    est = estimator()
    old, new = rand_latent(rng), rand_latent(rng)
    J = L.joint_distribution(old.z_fused, new.z_fused, est).data
    assert J.shape == (4, 16) and np.all(J >= 0) and np.allclose(J.sum(1), 1.0)
    for n in ("joint_w1", "joint_b1", "joint_w2", "joint_b2"):
        est[n].data[...] = 0.0
    assert np.allclose(L.joint_distribution(old.z_fused, new.z_fused, est).data, 1.0 / 16)
    same = latent(np.tile(rng.normal(size=(1, 6)), (3, 1)))
    Js = L.joint_distribution(same.z_fused, same.z_fused, estimator()).data
    assert np.array_equal(Js[0], Js[1]) and np.array_equal(Js[1], Js[2])


# ------------------------------------------------------------------ MI / MC oracles


def joint_oracle(zo, zn, est):
    t = lambda n: est[n].data  # noqa: E731
    pair = np.concatenate([zo @ t("v_proj"), zn @ t("l_proj")])
    h = np.tanh(pair @ t("joint_w1") + t("joint_b1"))
    return softmax(h @ t("joint_w2") + t("joint_b2"))


def F_oracle(zv, zl, est):
    return softmax(np.outer(zv @ est["v_proj"].data, zl @ est["l_proj"].data).ravel())


def kl(p, q):
    return float(sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0))


def mi_oracle(old, new, est, mode):
    k, b = est.k, len(old)
    joints = [joint_oracle(old.z_fused.data[i], new.z_fused.data[i], est) for i in range(b)]
    if mode == "batch":
        P = sum(joints) / b
        grid = P.reshape(k, k)
        return -kl(P, np.outer(grid.sum(1), grid.sum(0)).ravel())
    p_old = sum(F_oracle(old.z_v.data[i], old.z_l.data[i], est) for i in range(b)) / b
    p_new = sum(F_oracle(new.z_v.data[i], new.z_l.data[i], est) for i in range(b)) / b
    prod = np.outer(p_old.reshape(k, k).sum(1), p_new.reshape(k, k).sum(0)).ravel()
    return -sum(kl(J, prod) for J in joints) / b


def mc_oracle(old, new, est):
    b = len(old)
    p_old = sum(F_oracle(old.z_v.data[i], old.z_l.data[i], est) for i in range(b)) / b
    p_new = sum(F_oracle(new.z_v.data[i], new.z_l.data[i], est) for i in range(b)) / b
    return kl(p_new, p_old)


@pytest.mark.parametrize("mode", L.MI_MODES)
def test_mi_matches_scalar_oracle(mode):
    rng = np.random.default_rng(6)
    for s in range(5):
        est = estimator(seed=s)
        old, new = rand_latent(rng), rand_latent(rng)
        assert L.mi_loss(old, new, est, mode).item() == pytest.approx(mi_oracle(old, new, est, mode), abs=1e-10)


def test_mc_and_cmi_match_oracles():
    rng = np.random.default_rng(7)
    est = estimator()
    old, new = rand_latent(rng), rand_latent(rng)
    mc = L.mc_loss(old, new, est).item()
    assert mc == pytest.approx(mc_oracle(old, new, est), abs=1e-10)
    for mode in L.MI_MODES:
        cmi = L.cmi_loss(old, new, est, mode).item()
        assert cmi == L.mi_loss(old, new, est, mode).item() + mc
        assert cmi == pytest.approx(mi_oracle(old, new, est, mode) + mc_oracle(old, new, est), abs=1e-10)


def test_mi_zero_when_joint_is_product():
    # a zero joint MLP gives a uniform joint, which equals the product of its marginals
    rng = np.random.default_rng(8)
    est = estimator()
    for n in ("joint_w1", "joint_b1", "joint_w2", "joint_b2"):
        est[n].data[...] = 0.0
    old, new = rand_latent(rng), rand_latent(rng)
    assert L.mi_loss(old, new, est, "batch").item() == pytest.approx(0.0, abs=1e-12)
    for n in ("v_proj", "l_proj"):
        est[n].data[...] = 0.0
    assert L.mi_loss(old, new, est, "independent").item() == pytest.approx(0.0, abs=1e-12)


def test_batch_mi_bounded_by_log_k():
    rng = np.random.default_rng(9)
    for s in range(20):
        est = L.init_estimator(6, np.random.default_rng(s), k=4, hidden=8)
        for n in ("joint_w2",):
            est[n].data *= 20
        val = L.mi_loss(rand_latent(rng, b=16), rand_latent(rng, b=16), est, "batch").item()
        assert -math.log(4) - 1e-9 <= val <= 1e-12


def test_mc_zero_for_identical_sides_and_forced_value():
    rng = np.random.default_rng(10)
    est = estimator()
    z = rand_latent(rng)
    assert L.mc_loss(z, z, est).item() == pytest.approx(0.0, abs=1e-15)
    # K=2: p_new one-hot against uniform p_old over 4 bins gives ln 4
    p_new = Tensor(np.array([1.0, 0, 0, 0]))
    p_old = Tensor(np.full(4, 0.25))
    assert ad.kl_divergence(p_new, p_old).item() == pytest.approx(math.log(4), abs=1e-12)


def test_cmi_at_identity_and_independence_is_not_positive():
    rng = np.random.default_rng(11)
    est = estimator()
    for n in ("joint_w1", "joint_b1", "joint_w2", "joint_b2"):
        est[n].data[...] = 0.0
    z = rand_latent(rng)
    assert L.cmi_loss(z, z, est).item() <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(L.MI_MODES))
def test_mi_nonpositive_mc_nonnegative(seed, mode):
    rng = np.random.default_rng(seed)
    est = L.init_estimator(5, rng, k=int(rng.integers(2, 6)), hidden=6)
    b = int(rng.integers(1, 7))
    old, new = rand_latent(rng, b, 5), rand_latent(rng, b, 5)
    assert L.mi_loss(old, new, est, mode).item() <= 1e-9
    assert L.mc_loss(old, new, est).item() >= -1e-9


def test_mi_rejects_mismatched_batches():
    rng = np.random.default_rng(12)
    with pytest.raises(L.LossContractError):
        L.mi_loss(rand_latent(rng, 3), rand_latent(rng, 4), estimator())
    with pytest.raises(ValueError):
        L.mi_loss(rand_latent(rng), rand_latent(rng), estimator(), mode="nope")


# ------------------------------------------------------------------ flow matching


def _policy(seed=0):
    from continual_vla.policy import PolicyConfig, init_params

    return init_params(PolicyConfig(), np.random.default_rng(seed))


def _obs(rng, cfg, b):
    from continual_vla.policy import encode

    def enc(params):
        return encode(
            rng_images, np.zeros((b, cfg.proprio_dim)), np.zeros((b, 3), int), params
        )

    rng_images = rng.uniform(0, 1, (b, cfg.channels, cfg.image_size, cfg.image_size))
    return enc


def test_flow_loss_zero_expert_matches_direct_formula():
    params = _policy()
    cfg = params.config
    for k in ("act_w1", "act_b1", "act_w2", "act_b2", "act_w3", "act_b3", "act_skip", "end_w", "end_b", "end_scale"):
        params[k].data[...] = 0.0
    rng = np.random.default_rng(13)
    acts = rng.uniform(-1, 1, (3, cfg.horizon, cfg.action_dim))
    noise, tau = L.draw_flow_noise(rng, 3, cfg.horizon, cfg.action_dim)
    val = L.flow_matching_loss(acts, _obs(rng, cfg, 3)(params), params, noise, tau).item()
    assert val == pytest.approx(np.sum((noise - acts) ** 2) / (3 * cfg.horizon * cfg.action_dim), rel=1e-12)
    assert val >= 0


def test_flow_loss_zero_for_exact_target():
    # at tau = 0 the noised chunk is the noise itself; route it through the skip path
    # and subtract the action through the endpoint bias
    params = _policy()
    cfg = params.config
    for k in ("act_w1", "act_b1", "act_w2", "act_b2", "act_w3", "act_b3", "end_w"):
        params[k].data[...] = 0.0
    rng = np.random.default_rng(14)
    action = rng.uniform(-1, 1, (1, cfg.horizon, cfg.action_dim))
    params["act_skip"].data[...] = [1.0, 0.0, 0.0, 0.0]
    params["end_scale"].data[...] = [1.0, 0.0, 0.0, 0.0]
    params["end_b"].data[...] = -action.ravel()
    acts = np.repeat(action, 3, 0)
    noise = rng.normal(size=acts.shape)
    val = L.flow_matching_loss(acts, _obs(rng, cfg, 3)(params), params, noise, np.zeros(3)).item()
    assert val == pytest.approx(0.0, abs=1e-28)


# ------------------------------------------------------------------ total


def test_total_loss_identities():
    cl, rac, cmi = Tensor(1.25), Tensor(0.5), Tensor(-0.75)
    w0 = L.LossWeights(rac=0.0, cmi=0.0)
    assert L.total_loss(cl, rac, cmi, w0) is cl
    vals = [L.total_loss(cl, rac, cmi, L.LossWeights(rac=r, cmi=0.3)).item() for r in (0.0, 1.0, 2.0)]
    assert vals[2] - vals[1] == pytest.approx(vals[1] - vals[0], abs=1e-15)
    got = L.total_loss(cl, rac, cmi, L.LossWeights(rac=0.2, cmi=0.3)).item()
    assert got == pytest.approx(1.25 + 0.2 * 0.5 + 0.3 * -0.75, abs=1e-15)


def test_loss_weights_validate():
    with pytest.raises(ValueError):
        L.LossWeights(rac=-1)
    with pytest.raises(ValueError):
        L.LossWeights(temperature=0)


# ------------------------------------------------------------------ EWC


def test_ewc_penalty_values():
    theta = {"w": Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)}
    anchor = {"w": np.array([1.0, 2.0, 3.0])}
    assert L.ewc_penalty(theta, anchor, {"w": np.ones(3)}, 5.0).item() == 0.0
    one = {"w": Tensor(np.array([2.0]), requires_grad=True)}
    assert L.ewc_penalty(one, {"w": np.array([0.0])}, {"w": np.ones(1)}, 1.0).item() == pytest.approx(2.0)
    rng = np.random.default_rng(15)
    th = {n: Tensor(rng.normal(size=4), requires_grad=True) for n in "ab"}
    an = {n: rng.normal(size=4) for n in "ab"}
    fi = {n: rng.uniform(0, 1, 4) for n in "ab"}
    direct = 3.0 / 2 * sum(np.sum(fi[n] * (th[n].data - an[n]) ** 2) for n in "ab")
    assert L.ewc_penalty(th, an, fi, 3.0).item() == pytest.approx(direct, abs=1e-12)


def test_fisher_diagonal_scalar_model():
    # loss_i = 0.5 * (w * x_i - y_i)^2 -> grad = (w x_i - y_i) x_i
    w = Tensor(np.array([0.7]), requires_grad=True)
    xs, ys = np.array([1.0, 2.0, -1.0]), np.array([0.5, 1.0, 2.0])

    def loss_fn(i, _rng):
        r = ad.sub(ad.mul(w, float(xs[i])), Tensor(np.array([ys[i]])))
        return ad.mul(ad.sum(ad.square(r)), 0.5)

    rng = np.random.default_rng(16)
    picks = np.random.default_rng(16).integers(3, size=50)
    fisher = L.fisher_diagonal({"w": w}, loss_fn, np.arange(3), 50, rng)
    expected = np.mean([((0.7 * xs[i] - ys[i]) * xs[i]) ** 2 for i in picks])
    assert fisher["w"][0] == pytest.approx(expected, rel=1e-12)
    assert w.grad is None

    flat = Tensor(np.array([0.0]), requires_grad=True)
    zero = L.fisher_diagonal({"w": flat}, lambda i, r: ad.mul(ad.sum(flat), 0.0), np.arange(3), 5, rng)
    assert np.array_equal(zero["w"], [0.0])


def test_fisher_contract_errors():
    w = Tensor(np.ones(1), requires_grad=True)
    with pytest.raises(L.LossContractError):
        L.fisher_diagonal({"w": w}, lambda i, r: ad.sum(w), [], 3, np.random.default_rng(0))
    with pytest.raises(L.LossContractError):
        L.fisher_diagonal({"w": w}, lambda i, r: ad.sum(w), [0], 0, np.random.default_rng(0))
