"""Toy vision-language-action policy with a flow-matching action head.

Data flow for a batch of ``B`` observations::

    image -> 4x4 patches (+ patch centre coordinates) -> patch tokens      [encoder]
    (verb, object, target) ids -> summed embeddings                         [encoder]
    embedding -> z_l ; proprio -> p ; query([z_l, p]) attends over tokens
        -> z_v ; z_fused = tanh(W [z_v, z_l, p])                            [fusion]
    (noised chunk, flow time, z_fused) -> MLP -> velocity                   [action expert]

The encoder partition is trainable during the base stage and frozen after it;
fusion and action expert always train. The fusion output is the latent used
as the contrastive anchor and by the mutual-information estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_VERSION = 1
ENCODER_PARAMS = ("patch_w", "patch_b", "emb_verb", "emb_obj", "emb_tgt")


@dataclass(frozen=True)
class PolicyConfig:
    image_size: int = 16
    channels: int = 3
    patch: int = 4
    latent_dim: int = 32
    proprio_dim: int = 4
    horizon: int = 8
    action_dim: int = 3
    hidden: int = 64
    n_verbs: int = 1
    n_objects: int = 4
    n_targets: int = 3
    euler_steps: int = 10

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def patch_features(self) -> int:
        return self.channels * self.patch * self.patch + 2

    @property
    def chunk_size(self) -> int:
        return self.horizon * self.action_dim


@dataclass
class PolicyParameters:
    """Named parameter tensors plus the frozen partition.

    A frozen parameter has ``requires_grad=False`` and never gets a grad buffer.
    """

    config: PolicyConfig
    tensors: dict[str, Tensor]
    frozen: set[str] = field(default_factory=set)
    is_teacher: bool = False

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k not in self.frozen}

    def freeze(self, names) -> None:
        if self.is_teacher:
            return
        for n in names:
            self.frozen.add(n)
            self.tensors[n].requires_grad = False
            self.tensors[n].grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}


def init_params(config: PolicyConfig, rng: np.random.Generator) -> PolicyParameters:
    d, h = config.latent_dim, config.hidden

    def glorot(n_in, n_out):
        return rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out))

    expert_in = config.chunk_size + 3 + d
    arrays = {
        "patch_w": glorot(config.patch_features, d),
        "patch_b": np.zeros(d),
        "emb_verb": rng.normal(0.0, 0.5, size=(config.n_verbs, d)),
        "emb_obj": rng.normal(0.0, 0.5, size=(config.n_objects, d)),
        "emb_tgt": rng.normal(0.0, 0.5, size=(config.n_targets, d)),
        "lang_w": glorot(d, d),
        "lang_b": np.zeros(d),
        "prop_w": glorot(config.proprio_dim, d),
        "prop_b": np.zeros(d),
        "query_w": glorot(2 * d, d),
        "key_w": glorot(d, d),
        "value_w": glorot(d, d),
        "fuse_w": glorot(3 * d, d),
        "fuse_b": np.zeros(d),
        "act_w1": glorot(expert_in, h),
        "act_b1": np.zeros(h),
        "act_w2": glorot(h, h),
        "act_b2": np.zeros(h),
        "act_w3": glorot(h, config.chunk_size) * 0.1,
        "act_b3": np.zeros(config.chunk_size),
        "act_skip": np.zeros(N_SKIP_FEATURES),
        "end_w": glorot(d, config.chunk_size),
        "end_b": np.zeros(config.chunk_size),
        "end_scale": np.zeros(N_SKIP_FEATURES),
    }
    return PolicyParameters(config, {k: Tensor(v, requires_grad=True) for k, v in arrays.items()})


def snapshot_teacher(params: PolicyParameters) -> PolicyParameters:
    """Frozen deep copy: no tensor in it ever requires grad."""
    tensors = {k: Tensor(v.data.copy()) for k, v in params.tensors.items()}
    return PolicyParameters(params.config, tensors, frozen=set(tensors), is_teacher=True)


# ----------------------------------------------------------------- encoding


@dataclass
class LatentPair:
    """Batched fusion-layer latents; every field has leading dimension B."""

    z_v: Tensor
    z_l: Tensor
    z_fused: Tensor
    attn: Tensor

    def __len__(self) -> int:
        return self.z_fused.shape[0]

    def detach(self) -> LatentPair:
        return LatentPair(self.z_v.detach(), self.z_l.detach(), self.z_fused.detach(), self.attn.detach())


_patch_cache: dict[tuple, np.ndarray] = {}


def _patch_centres(config: PolicyConfig) -> np.ndarray:
    key = (config.image_size, config.patch)
    if key not in _patch_cache:
        g = config.image_size // config.patch
        rows, cols = np.divmod(np.arange(g * g), g)
        _patch_cache[key] = np.stack([(cols + 0.5) / g, (rows + 0.5) / g], axis=1)
    return _patch_cache[key]


def patchify(images: np.ndarray, config: PolicyConfig) -> np.ndarray:
    """``(B, C, n, n)`` images -> ``(B, P, C*p*p + 2)`` patch features."""
    b, c, n, m = images.shape
    if (c, n, m) != (config.channels, config.image_size, config.image_size):
        raise ad.ShapeError(f"image shape {(c, n, m)} does not match config")
    p, g = config.patch, n // config.patch
    x = images.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, g * g, c * p * p)
    centres = np.broadcast_to(_patch_centres(config), (b, g * g, 2))
    return np.concatenate([x, centres], axis=2)


def encode(images: np.ndarray, proprio: np.ndarray, instructions: np.ndarray, params: PolicyParameters) -> LatentPair:
    """Deterministic fusion latents for a batch of (observation, instruction)."""
    cfg = params.config
    images = np.asarray(images, dtype=np.float64)
    proprio = np.asarray(proprio, dtype=np.float64)
    instructions = np.asarray(instructions, dtype=np.int64)
    b = images.shape[0]
    if proprio.shape != (b, cfg.proprio_dim) or instructions.shape != (b, 3):
        raise ad.ShapeError("proprio/instruction batch shapes do not match images")
    d, n_p = cfg.latent_dim, cfg.n_patches

    feats = Tensor(patchify(images, cfg).reshape(b * n_p, cfg.patch_features))
    tokens = ad.add_bias(ad.matmul(feats, params["patch_w"]), params["patch_b"])  # (B*P, d)

    emb = ad.add(
        ad.add(ad.take(params["emb_verb"], instructions[:, 0]), ad.take(params["emb_obj"], instructions[:, 1])),
        ad.take(params["emb_tgt"], instructions[:, 2]),
    )
    z_l = ad.tanh(ad.add_bias(ad.matmul(emb, params["lang_w"]), params["lang_b"]))
    prop = ad.tanh(ad.add_bias(ad.matmul(Tensor(proprio), params["prop_w"]), params["prop_b"]))

    query = ad.reshape(ad.matmul(ad.concat([z_l, prop], axis=1), params["query_w"]), (b, d, 1))
    keys = ad.reshape(ad.matmul(tokens, params["key_w"]), (b, n_p, d))
    values = ad.reshape(ad.matmul(tokens, params["value_w"]), (b, n_p, d))
    scores = ad.mul(ad.reshape(ad.bmm(keys, query), (b, n_p)), 1.0 / np.sqrt(d))
    attn = ad.softmax(scores, axis=1)
    z_v = ad.reshape(ad.bmm(ad.reshape(attn, (b, 1, n_p)), values), (b, d))

    fused = ad.tanh(ad.add_bias(ad.matmul(ad.concat([z_v, z_l, prop], axis=1), params["fuse_w"]), params["fuse_b"]))
    return LatentPair(z_v=z_v, z_l=z_l, z_fused=fused, attn=attn)


# -------------------------------------------------------------- action head


def _time_features(tau: np.ndarray) -> np.ndarray:
    return np.stack([tau, np.sin(np.pi * tau), np.cos(np.pi * tau)], axis=1)


N_SKIP_FEATURES = 4
SKIP_EPS = 0.01


def _skip_features(tau: np.ndarray) -> np.ndarray:
    return np.stack([np.ones_like(tau), tau, tau * tau, 1.0 / (1.0 + SKIP_EPS - tau)], axis=1)


def predict_velocity(noised: np.ndarray, tau, latent: LatentPair, params: PolicyParameters) -> Tensor:
    """Action-expert estimate of ``noise - action`` at flow time ``tau``.

    ``noised`` is ``(B, H, Da)``; ``tau`` is a scalar or a length-B array in
    ``[0, 1]``. Returns a ``(B, H, Da)`` tensor.
    """
    cfg = params.config
    noised = np.asarray(noised, dtype=np.float64)
    b = noised.shape[0]
    if noised.shape[1:] != (cfg.horizon, cfg.action_dim):
        raise ad.ShapeError(f"action chunk shape {noised.shape[1:]} != {(cfg.horizon, cfg.action_dim)}")
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (b,))
    if np.any(tau < 0) or np.any(tau > 1):
        raise ValueError("flow time must lie in [0, 1]")
    x = ad.concat(
        [Tensor(noised.reshape(b, cfg.chunk_size)), Tensor(_time_features(tau)), latent.z_fused], axis=1
    )
    h = ad.relu(ad.add_bias(ad.matmul(x, params["act_w1"]), params["act_b1"]))
    h = ad.relu(ad.add_bias(ad.matmul(h, params["act_w2"]), params["act_b2"]))
    out = ad.add_bias(ad.matmul(h, params["act_w3"]), params["act_b3"])
    # time-scaled identity path for the noised chunk
    scale = ad.matmul(Tensor(_skip_features(tau)), ad.reshape(params["act_skip"], (N_SKIP_FEATURES, 1)))
    skip = ad.mul(ad.matmul(scale, Tensor(np.ones((1, cfg.chunk_size)))), Tensor(noised.reshape(b, cfg.chunk_size)))
    # latent-conditioned endpoint path with the same time scaling
    end = ad.add_bias(ad.matmul(latent.z_fused, params["end_w"]), params["end_b"])
    end_scale = ad.matmul(Tensor(_skip_features(tau)), ad.reshape(params["end_scale"], (N_SKIP_FEATURES, 1)))
    end = ad.mul(ad.matmul(end_scale, Tensor(np.ones((1, cfg.chunk_size)))), end)
    out = ad.add(ad.add(out, skip), end)
    return ad.reshape(out, (b, cfg.horizon, cfg.action_dim))


def noised_actions(actions: np.ndarray, noise: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """Interpolant ``tau * a + (1 - tau) * noise``: pure noise at 0, data at 1."""
    t = np.asarray(tau, dtype=np.float64).reshape(-1, 1, 1)
    return t * actions + (1.0 - t) * noise


def integrate(
    noise: np.ndarray, latent: LatentPair, params: PolicyParameters, n_steps: int
) -> np.ndarray:
    """Forward-Euler integration from flow time 0 to 1.

    The head regresses ``noise - action``, which is minus the time derivative
    of the interpolant, hence the subtraction.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    x = noise.copy()
    dt = 1.0 / n_steps
    with ad.no_grad():
        for k in range(n_steps):
            v = predict_velocity(x, k * dt, latent, params).data
            x = x - dt * v
    return np.clip(x, -1.0, 1.0)


def sample_actions(
    images: np.ndarray,
    proprio: np.ndarray,
    instructions: np.ndarray,
    params: PolicyParameters,
    rngs,
    n_steps: int | None = None,
) -> np.ndarray:
    """Sample one action chunk per batch row; row ``i`` draws its noise from ``rngs[i]``."""
    cfg = params.config
    n_steps = cfg.euler_steps if n_steps is None else n_steps
    noise = np.stack([r.standard_normal((cfg.horizon, cfg.action_dim)) for r in rngs])
    with ad.no_grad():
        latent = encode(images, proprio, instructions, params)
    return integrate(noise, latent, params, n_steps)


def as_policy_fn(params: PolicyParameters, n_steps: int | None = None):
    """Adapter to the suite's rollout interface."""

    def act(inp) -> np.ndarray:
        return sample_actions(inp.images, inp.proprio, inp.instructions, params, inp.rngs, n_steps)

    return act


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, params: PolicyParameters) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    arrays = {f"param/{k}": v.data for k, v in params.tensors.items()}
    arrays["meta/version"] = np.array(CHECKPOINT_VERSION)
    arrays["meta/frozen"] = np.array(sorted(params.frozen), dtype=str)
    arrays["meta/config"] = np.array([repr(params.config)], dtype=str)
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_checkpoint(path: str | Path, config: PolicyConfig) -> PolicyParameters:
    with np.load(path) as z:
        if int(z["meta/version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {int(z['meta/version'])}")
        frozen = set(z["meta/frozen"].tolist())
        tensors = {
            k.split("/", 1)[1]: Tensor(z[k].copy(), requires_grad=k.split("/", 1)[1] not in frozen)
            for k in z.files
            if k.startswith("param/")
        }
    return PolicyParameters(config, tensors, frozen=frozen)


def clone_params(params: PolicyParameters) -> PolicyParameters:
    tensors = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in params.tensors.items()}
    return PolicyParameters(params.config, tensors, frozen=set(params.frozen), is_teacher=params.is_teacher)


__all__ = [
    "ENCODER_PARAMS",
    "LatentPair",
    "PolicyConfig",
    "PolicyParameters",
    "as_policy_fn",
    "clone_params",
    "encode",
    "init_params",
    "integrate",
    "load_checkpoint",
    "noised_actions",
    "predict_velocity",
    "sample_actions",
    "save_checkpoint",
    "snapshot_teacher",
]
