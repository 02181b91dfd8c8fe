"""Training objectives.

* flow matching on action chunks (the base imitation loss),
* replay-anchor contrastive loss between student and frozen-teacher latents,
* cross-modal mutual-information and marginal-consistency terms computed
  through a small trainable estimator,
* their weighted total, and the EWC penalty with its Fisher diagonal.

All losses return 0-d :class:`~continual_vla.autodiff.Tensor` values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .policy import LatentPair, PolicyParameters, predict_velocity, noised_actions


class LossContractError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    rac: float = 0.1
    cmi: float = 0.1
    temperature: float = 0.07

    def __post_init__(self):
        if self.rac < 0 or self.cmi < 0:
            raise ValueError("loss weights must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


# ------------------------------------------------------------ flow matching


def draw_flow_noise(rng: np.random.Generator, batch: int, horizon: int, action_dim: int):
    """Gaussian noise chunk and flow time per example."""
    noise = rng.standard_normal((batch, horizon, action_dim))
    tau = rng.uniform(0.0, 1.0, size=batch)
    return noise, tau


def flow_matching_loss(
    actions: np.ndarray, latent: LatentPair, params: PolicyParameters, noise: np.ndarray, tau: np.ndarray
) -> Tensor:
    """Mean over all entries of ``(noise - a - f(a_tau, tau, z))**2``."""
    actions = np.asarray(actions, dtype=np.float64)
    target = noise - actions
    pred = predict_velocity(noised_actions(actions, noise, tau), tau, latent, params)
    return ad.mse(pred, Tensor(target))


# ------------------------------------------------------ replay anchor (RAC)


def rac_loss(
    student: LatentPair,
    anchors: LatentPair,
    replay_mask: Sequence[bool],
    temperature: float = 0.07,
    negatives: str = "anchor",
) -> Tensor:
    """InfoNCE between student fused latents and teacher anchors.

    Row ``i`` scores the student latent ``v_i`` against every anchor ``u_j``
    in the batch with cosine similarity over ``temperature``; the matching
    anchor is the positive. Only replay rows contribute to the mean.

    ``negatives="student"`` swaps the off-diagonal anchors for the other
    student latents ``v_j`` (the positive stays ``<v_i, u_i>``).
    """
    mask = np.asarray(replay_mask, dtype=bool)
    b = len(student)
    if b < 2:
        raise LossContractError("contrastive loss needs a batch of at least 2")
    if len(anchors) != b or mask.shape != (b,):
        raise LossContractError("student, anchor and mask lengths differ")
    if not mask.any():
        raise LossContractError("replay mask selects no rows")
    if temperature <= 0:
        raise LossContractError("temperature must be positive")
    v = ad.l2_normalize(student.z_fused, axis=1)
    u = ad.l2_normalize(anchors.z_fused, axis=1)
    eye = Tensor(np.eye(b))
    if negatives == "anchor":
        logits = ad.mul(ad.matmul(v, ad.transpose(u)), 1.0 / temperature)
    elif negatives == "student":
        pos = ad.mul(ad.sum(ad.mul(v, u), axis=1), 1.0 / temperature)
        pos_mat = ad.mul(ad.matmul(ad.reshape(pos, (b, 1)), Tensor(np.ones((1, b)))), eye)
        off = ad.mul(ad.mul(ad.matmul(v, ad.transpose(v)), 1.0 / temperature), Tensor(1.0 - np.eye(b)))
        logits = ad.add(off, pos_mat)
    else:
        raise ValueError(f"unknown negatives mode {negatives!r}")
    logp_pos = ad.sum(ad.mul(ad.log_softmax(logits, axis=1), eye), axis=1)
    return ad.mul(ad.mean(ad.take(logp_pos, np.flatnonzero(mask))), -1.0)


# ---------------------------------------------- mutual information estimator


@dataclass
class MIEstimator:
    """Shared projections ``V``, ``L`` (d -> K) and the joint MLP (2K -> K^2)."""

    tensors: dict[str, Tensor]
    k: int

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> dict[str, Tensor]:
        return self.tensors


def init_estimator(latent_dim: int, rng: np.random.Generator, k: int = 8, hidden: int = 32) -> MIEstimator:
    def w(n_in, n_out):
        return Tensor(rng.normal(0.0, np.sqrt(1.0 / n_in), size=(n_in, n_out)), requires_grad=True)

    tensors = {
        "v_proj": w(latent_dim, k),
        "l_proj": w(latent_dim, k),
        "joint_w1": w(2 * k, hidden),
        "joint_b1": Tensor(np.zeros(hidden), requires_grad=True),
        "joint_w2": w(hidden, k * k),
        "joint_b2": Tensor(np.zeros(k * k), requires_grad=True),
    }
    return MIEstimator(tensors, k)


def project_F(z_v: Tensor, z_l: Tensor, est: MIEstimator) -> Tensor:
    """Per-row softmax over the flattened ``K x K`` outer product ``(V z_v)(L z_l)^T``."""
    b, k = z_v.shape[0], est.k
    vis = ad.reshape(ad.matmul(z_v, est["v_proj"]), (b, k, 1))
    lang = ad.reshape(ad.matmul(z_l, est["l_proj"]), (b, 1, k))
    return ad.softmax(ad.reshape(ad.bmm(vis, lang), (b, k * k)), axis=1)


def joint_distribution(old_fused: Tensor, new_fused: Tensor, est: MIEstimator) -> Tensor:
    """Joint over ``K x K`` bins from the projected pair ``[V z_old, L z_new]``.

    Row index of the grid belongs to the teacher side, column index to the
    student side.
    """
    pair = ad.concat([ad.matmul(old_fused, est["v_proj"]), ad.matmul(new_fused, est["l_proj"])], axis=1)
    h = ad.tanh(ad.add_bias(ad.matmul(pair, est["joint_w1"]), est["joint_b1"]))
    return ad.softmax(ad.add_bias(ad.matmul(h, est["joint_w2"]), est["joint_b2"]), axis=1)


def batch_marginal(latent: LatentPair, est: MIEstimator) -> Tensor:
    return ad.mean(project_F(latent.z_v, latent.z_l, est), axis=0)


def product_of_marginals(p_old: Tensor, p_new: Tensor, k: int) -> Tensor:
    """Outer product of the teacher row-marginal and student column-marginal."""
    rows = ad.sum(ad.reshape(p_old, (k, k)), axis=1)
    cols = ad.sum(ad.reshape(p_new, (k, k)), axis=0)
    return ad.reshape(ad.matmul(ad.reshape(rows, (k, 1)), ad.reshape(cols, (1, k))), (k * k,))


def mutual_information(joints: Tensor, product: Tensor) -> Tensor:
    """Batch mean of KL(joint_b || product)."""
    b = joints.shape[0]
    tiled = ad.matmul(Tensor(np.ones((b, 1))), ad.reshape(product, (1, product.shape[0])))
    return ad.mean(ad.kl_divergence(joints, tiled))


def _check_batches(old: LatentPair, new: LatentPair) -> None:
    if len(old) != len(new):
        raise LossContractError(f"teacher batch {len(old)} != student batch {len(new)}")
    if len(new) < 1:
        raise LossContractError("empty batch")


MI_MODES = ("batch", "independent")


def mi_loss(old: LatentPair, new: LatentPair, est: MIEstimator, mode: str = "batch") -> Tensor:
    """Negative estimated mutual information between teacher and student latents.

    ``mode="batch"``: the per-sample joints are averaged into one ``K x K``
    joint ``P`` and the estimate is ``KL(P || rows(P) x cols(P))``, the exact
    mutual information of the binned pair (bounded by ``ln K``).

    ``mode="independent"``: batch mean of ``KL(joint_b || rows(p_old) x
    cols(p_new))`` with the two marginals taken from the ``F`` projections of
    each side. The joint is not tied to those marginals, so the estimator can
    inflate the value by moving joint mass onto low-probability cells.
    """
    _check_batches(old, new)
    joints = joint_distribution(old.z_fused, new.z_fused, est)
    if mode == "batch":
        p = ad.mean(joints, axis=0)
        return ad.mul(ad.kl_divergence(p, product_of_marginals(p, p, est.k)), -1.0)
    if mode == "independent":
        prod = product_of_marginals(batch_marginal(old, est), batch_marginal(new, est), est.k)
        return ad.mul(mutual_information(joints, prod), -1.0)
    raise ValueError(f"unknown mutual-information mode {mode!r}")


def mc_loss(old: LatentPair, new: LatentPair, est: MIEstimator) -> Tensor:
    """KL(p_new || p_old) between batch-mean projected marginals."""
    _check_batches(old, new)
    return ad.kl_divergence(batch_marginal(new, est), batch_marginal(old, est))


def cmi_loss(old: LatentPair, new: LatentPair, est: MIEstimator, mode: str = "batch") -> Tensor:
    return ad.add(mi_loss(old, new, est, mode), mc_loss(old, new, est))


# -------------------------------------------------------------------- total


@dataclass
class LossBreakdown:
    total: Tensor
    cl: float
    rac: float = 0.0
    mi: float = 0.0
    mc: float = 0.0
    ewc: float = 0.0

    def row(self) -> dict[str, float]:
        return {
            "L_CL": self.cl,
            "L_RAC": self.rac,
            "L_MI": self.mi,
            "L_MC": self.mc,
            "L_EWC": self.ewc,
            "total": self.total.item(),
        }


def total_loss(cl: Tensor, rac: Tensor | None, cmi: Tensor | None, weights: LossWeights) -> Tensor:
    """``cl + w_rac * rac + w_cmi * cmi``; zero-weight terms are not added at all."""
    out = cl
    if weights.rac != 0.0 and rac is not None:
        out = ad.add(out, ad.mul(rac, weights.rac))
    if weights.cmi != 0.0 and cmi is not None:
        out = ad.add(out, ad.mul(cmi, weights.cmi))
    return out


# ---------------------------------------------------------------------- EWC


def fisher_diagonal(
    params: Mapping[str, Tensor],
    loss_fn: Callable[[object, np.random.Generator], Tensor],
    dataset: Sequence,
    n_samples: int,
    rng: np.random.Generator,
) -> dict[str, np.ndarray]:
    """Empirical Fisher diagonal: mean squared per-sample gradient.

    ``loss_fn(sample, rng)`` builds the loss of a single sample drawn
    uniformly from ``dataset``.
    """
    if n_samples < 1:
        raise LossContractError("n_samples must be >= 1")
    if len(dataset) == 0:
        raise LossContractError("Fisher estimate needs a non-empty dataset")
    fisher = {k: np.zeros_like(v.data) for k, v in params.items()}
    tensors = list(params.values())
    for _ in range(n_samples):
        sample = dataset[int(rng.integers(len(dataset)))]
        ad.zero_grad(tensors)
        ad.backward(loss_fn(sample, rng))
        for k, v in params.items():
            if v.grad is not None:
                fisher[k] += v.grad * v.grad
    ad.zero_grad(tensors)
    return {k: f / n_samples for k, f in fisher.items()}


def ewc_penalty(
    params: Mapping[str, Tensor],
    anchor: Mapping[str, np.ndarray],
    fisher: Mapping[str, np.ndarray],
    strength: float,
) -> Tensor:
    """``strength / 2 * sum_i F_i (theta_i - theta*_i)**2`` over the Fisher's keys."""
    terms = [
        ad.sum(ad.mul(Tensor(fisher[k]), ad.square(ad.sub(params[k], Tensor(anchor[k])))))
        for k in sorted(fisher)
    ]
    if not terms:
        return Tensor(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return ad.mul(out, strength / 2.0)

