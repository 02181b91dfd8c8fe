"""Continual training loop, baseline strategies and run-directory output.

Every random draw comes from a stream keyed by ``(seed, purpose, ...)``.
Parameter init, batch indices, flow noise and evaluation episodes therefore
match across strategies for the same seed. Strategies compared on one seed
see the same layouts and noise wherever their procedures coincide.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import metrics as M
from .config import ExperimentConfig
from .policy import (
    ENCODER_PARAMS,
    PolicyConfig,
    PolicyParameters,
    as_policy_fn,
    encode,
    init_params,
    save_checkpoint,
    snapshot_teacher,
)
from .replay import ReplayMemory, StepDataset, make_batch
from .suite import TaskSpec, Trajectory, collect_demos, generate_tasks, rollout_many


class TrainingContractError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    def __init__(self, stage: int, iteration: int, detail: str):
        super().__init__(f"non-finite values at stage {stage}, iteration {iteration}: {detail}")
        self.stage, self.iteration, self.detail = stage, iteration, detail


def stream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Independent generator for one purpose of one run."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(purpose.encode()), *keys]))


# -------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def learning_rate(base: float, it: int, iters: int, schedule: str = "cosine") -> float:
    """Per-stage step size; cosine decays from ``base`` toward 0 over the stage."""
    if schedule == "constant":
        return base
    if schedule == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * it / iters))
    raise ValueError(f"unknown lr schedule {schedule!r}")


def optimizer_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One Adam update of ``params`` (name -> Tensor) from ``grads`` (name -> array).

    Parameters that are not trainable are skipped. Raises
    :class:`FloatingPointError` if any gradient is non-finite, before anything
    is modified.
    """
    for k, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for k, p in params.items():
        g = grads.get(k)
        if g is None or not p.requires_grad:
            continue
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -------------------------------------------------------------- strategies


@dataclass(frozen=True)
class Strategy:
    name: str
    weights: L.LossWeights = L.LossWeights()
    negatives: str = "anchor"
    mi_mode: str = "batch"
    ewc_strength: float = 1000.0
    fisher_samples: int = 64
    replay_fraction: float = 0.5

    @property
    def uses_memory(self) -> bool:
        return self.name in ("er", "infovla")

    @classmethod
    def from_config(cls, config: ExperimentConfig, name: str | None = None) -> Strategy:
        return cls(
            name=name or config.strategy,
            weights=L.LossWeights(config.rac_weight, config.cmi_weight, config.temperature),
            negatives=config.negatives,
            mi_mode=config.mi_mode,
            ewc_strength=config.ewc_strength,
            fisher_samples=config.fisher_samples,
            replay_fraction=config.replay_fraction,
        )


@dataclass
class EWCAnchor:
    params: dict[str, np.ndarray]
    fisher: dict[str, np.ndarray]


@dataclass
class StageReport:
    stage: int
    seed: int
    success: dict[int, float]
    losses: list[dict]
    wall_clock: float
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        for t, r in self.success.items():
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"success rate of task {t} outside [0, 1]")


# ------------------------------------------------------------- evaluation


def evaluate_task(params: PolicyParameters, spec: TaskSpec, episodes: int, seed: int) -> float:
    """Success rate over ``episodes`` rollouts; episode ``e`` uses stream ``(seed, eval, task, e)``."""
    rngs = [stream(seed, "eval", spec.task_id, e) for e in range(episodes)]
    traces = rollout_many(as_policy_fn(params), spec, rngs)
    return float(np.mean([t.success for t in traces]))


def evaluate(
    params: PolicyParameters, specs: Sequence[TaskSpec], episodes: int, seed: int, parallel: bool = False
) -> dict[int, float]:
    if parallel and len(specs) > 1:
        with ThreadPoolExecutor() as pool:
            rates = list(pool.map(lambda s: evaluate_task(params, s, episodes, seed), specs))
    else:
        rates = [evaluate_task(params, s, episodes, seed) for s in specs]
    return {s.task_id: r for s, r in zip(specs, rates)}


def probe_set(spec: TaskSpec, size: int, seed: int) -> StepDataset:
    """Fixed observations of one task from held-out expert episodes."""
    demos = collect_demos(spec, max(1, -(-size // 8)), stream(seed, "probe", spec.task_id))
    ds = StepDataset.from_trajectories(demos)
    while len(ds) < size:
        demos += collect_demos(spec, 1, stream(seed, "probe", spec.task_id, len(demos)))
        ds = StepDataset.from_trajectories(demos)
    return ds[np.arange(size)]


# --------------------------------------------------------------- training


def _flow_loss(data: StepDataset, params: PolicyParameters, rng: np.random.Generator):
    cfg = params.config
    latent = encode(data.images, data.proprio, data.instructions, params)
    noise, tau = L.draw_flow_noise(rng, len(data), cfg.horizon, cfg.action_dim)
    return L.flow_matching_loss(data.actions, latent, params, noise, tau), latent


def _ewc_total(params: PolicyParameters, anchors: Sequence[EWCAnchor], strength: float):
    out = None
    trainable = params.trainable()
    for a in anchors:
        fisher = {k: f for k, f in a.fisher.items() if k in trainable}
        term = L.ewc_penalty(trainable, a.params, fisher, strength)
        out = term if out is None else ad.add(out, term)
    return out


def train_step(
    k: int,
    batch_data: StepDataset,
    replay_mask: np.ndarray,
    params: PolicyParameters,
    teacher: PolicyParameters | None,
    estimator: L.MIEstimator | None,
    strategy: Strategy,
    noise_rng: np.random.Generator,
    ewc_anchors: Sequence[EWCAnchor] = (),
) -> L.LossBreakdown:
    """Build the strategy's objective for one batch (graph only, no update)."""
    cl, latent = _flow_loss(batch_data, params, noise_rng)
    bd = L.LossBreakdown(total=cl, cl=cl.item())
    if strategy.name == "infovla" and k > 0:
        with ad.no_grad():
            old = encode(batch_data.images, batch_data.proprio, batch_data.instructions, teacher)
        rac = cmi = None
        if strategy.weights.rac != 0.0 and replay_mask.any():
            rac = L.rac_loss(latent, old, replay_mask, strategy.weights.temperature, strategy.negatives)
            bd.rac = rac.item()
        if strategy.weights.cmi != 0.0:
            mi = L.mi_loss(old, latent, estimator, strategy.mi_mode)
            mc = L.mc_loss(old, latent, estimator)
            cmi = ad.add(mi, mc)
            bd.mi, bd.mc = mi.item(), mc.item()
        bd.total = L.total_loss(cl, rac, cmi, strategy.weights)
    elif strategy.name == "ewc" and ewc_anchors and strategy.ewc_strength > 0:
        pen = _ewc_total(params, ewc_anchors, strategy.ewc_strength)
        if pen is not None:
            bd.ewc = pen.item()
            bd.total = ad.add(cl, pen)
    return bd


def run_stage(
    k: int,
    task_data: StepDataset,
    params: PolicyParameters,
    teacher: PolicyParameters | None,
    memory: ReplayMemory | None,
    strategy: Strategy,
    config: ExperimentConfig,
    seed: int,
    eval_specs: Sequence[TaskSpec] = (),
    ewc_anchors: Sequence[EWCAnchor] = (),
) -> StageReport:
    """Train one stage in place, then evaluate ``eval_specs``.

    ``task_data`` is the stage's training set: the current group for most
    strategies, the union of all seen tasks for multitask.
    """
    if strategy.name == "infovla" and k > 0 and teacher is None:
        raise TrainingContractError(f"infovla stage {k} needs a frozen teacher")
    if teacher is not None and not teacher.is_teacher:
        raise TrainingContractError("teacher must be a frozen snapshot")
    if strategy.name in ("sequential", "multitask") and memory is not None and len(memory):
        raise TrainingContractError(f"{strategy.name} does not use replay memory")
    t0 = time.perf_counter()
    iters = config.base_iterations if k == 0 else config.incremental_iterations
    use_mem = memory if strategy.uses_memory and k > 0 else None
    batch_rng = stream(seed, "batch", k)
    noise_rng = stream(seed, "flow", k)
    estimator = None
    opt_params = dict(params.trainable())
    if strategy.name == "infovla" and k > 0 and strategy.weights.cmi != 0.0:
        estimator = L.init_estimator(params.config.latent_dim, stream(seed, "mi-init", k), config.mi_bins, config.mi_hidden)
        opt_params.update({f"mi/{n}": t for n, t in estimator.tensors.items()})
    state = AdamState()
    rows = []
    for it in range(iters):
        batch = make_batch(task_data, use_mem, config.batch_size, strategy.replay_fraction, batch_rng)
        try:
            bd = train_step(k, batch.data, batch.replay_mask, params, teacher, estimator, strategy, noise_rng, ewc_anchors)
            ad.backward(bd.total)
            grads = {n: t.grad for n, t in opt_params.items()}
            optimizer_step(opt_params, grads, state, learning_rate(config.lr, it, iters, config.lr_schedule))
        except (ad.NonFiniteError, FloatingPointError) as e:
            raise NumericalFailure(k, it, str(e)) from e
        finally:
            ad.zero_grad(list(opt_params.values()))
        rows.append({"stage": k, "iteration": it, **bd.row()})
    rates = evaluate(params, eval_specs, config.eval_episodes, seed, config.parallel_eval)
    return StageReport(k, seed, rates, rows, time.perf_counter() - t0)


def estimate_fisher(params: PolicyParameters, data: StepDataset, n_samples: int, seed: int, k: int) -> dict:
    rng = stream(seed, "fisher", k)

    def loss_fn(sample, r):
        return _flow_loss(data[np.array([sample])], params, r)[0]

    return L.fisher_diagonal(params.trainable(), loss_fn, np.arange(len(data)), n_samples, rng)


# ------------------------------------------------------------------ runs


@dataclass
class RunResult:
    R: M.SuccessMatrix
    reports: list[StageReport]
    params: PolicyParameters
    memory: ReplayMemory
    diagnostics: dict
    config: ExperimentConfig
    seed: int


def policy_config(config: ExperimentConfig) -> PolicyConfig:
    return PolicyConfig(latent_dim=config.latent_dim, hidden=config.hidden, euler_steps=config.euler_steps)


def build_suite(config: ExperimentConfig) -> list[TaskSpec]:
    return generate_tasks(config.benchmark.n_tasks, config.benchmark.suite_seed)


def collect_all_demos(specs: Sequence[TaskSpec], config: ExperimentConfig, seed: int) -> dict[int, list[Trajectory]]:
    n = config.benchmark.demos_per_task
    return {s.task_id: collect_demos(s, n, stream(seed, "demos", s.task_id)) for s in specs}


def run_sequence(
    specs: Sequence[TaskSpec],
    config: ExperimentConfig,
    strategy: Strategy | str | None = None,
    seed: int = 0,
    run_dir: str | Path | None = None,
    demos: dict[int, list[Trajectory]] | None = None,
    log=None,
) -> RunResult:
    """Train through every Bi-kNm stage, evaluating all seen tasks after each.

    With ``run_dir`` set, the run directory is refreshed at every stage boundary.
    """
    if not specs:
        raise TrainingContractError("no tasks")
    if not isinstance(strategy, Strategy):
        strategy = Strategy.from_config(config, strategy)
    groups = config.benchmark.stage_groups()
    if sum(len(g) for g in groups) != len(specs):
        raise TrainingContractError(f"benchmark layout covers {sum(len(g) for g in groups)} tasks, got {len(specs)}")
    if demos is None:
        demos = collect_all_demos(specs, config, seed)
    task_stage = np.zeros(len(specs), dtype=np.int64)
    for j, g in enumerate(groups):
        task_stage[g] = j
    R = M.SuccessMatrix.empty(task_stage, config.benchmark.stage_labels())

    params = init_params(policy_config(config), stream(seed, "init"))
    memory = ReplayMemory()
    teacher = None
    anchors: list[EWCAnchor] = []
    reports: list[StageReport] = []
    probes = {s.task_id: probe_set(s, config.probe_size, seed) for s in specs}
    sims: dict[int, dict[int, np.ndarray]] = {}
    diag = {"attention_entropy": {}, "structure_drift": {}}
    out = _RunDir(run_dir, config, strategy, seed) if run_dir is not None else None

    for k, group in enumerate(groups):
        seen = [t for g in groups[: k + 1] for t in g]
        train_ids = seen if strategy.name == "multitask" else group
        data = StepDataset.from_trajectories([d for t in train_ids for d in demos[t]])
        rep = run_stage(
            k, data, params, teacher, memory, strategy, config, seed,
            eval_specs=[specs[t] for t in seen], ewc_anchors=anchors,
        )
        for t, r in rep.success.items():
            R.values[t, k] = r
        for t in seen:
            ent = M.attention_diffusion(params, probes[t])
            sim = M.representation_similarity(params, probes[t])
            sims.setdefault(t, {})[k] = sim
            diag["attention_entropy"].setdefault(str(t), {})[str(k)] = ent
            diag["structure_drift"].setdefault(str(t), {})[str(k)] = M.structure_drift(sims[t][int(task_stage[t])], sim)
        rep.diagnostics = {t: diag["attention_entropy"][str(t)][str(k)] for t in seen}
        reports.append(rep)

        # stage boundary
        if k == 0:
            params.freeze(ENCODER_PARAMS)
        if strategy.uses_memory:
            for t in group:
                memory.store(t, demos[t], stream(seed, "memory", t))
        if strategy.name == "infovla":
            teacher = snapshot_teacher(params)
        if strategy.name == "ewc":
            cur = StepDataset.from_trajectories([d for t in group for d in demos[t]])
            anchors.append(EWCAnchor(params.state_dict(), estimate_fisher(params, cur, strategy.fisher_samples, seed, k)))
        if out is not None:
            out.stage_done(k, R, reports, memory, params, diag)
        if log is not None:
            rates = " ".join(f"{rep.success[t]:.2f}" for t in seen)
            log(f"[{strategy.name} seed={seed}] stage {k} ({rep.wall_clock:.1f}s): {rates}")

    return RunResult(R, reports, params, memory, diag, config, seed)


# ------------------------------------------------------------ run output


LOSS_FIELDS = ["stage", "iteration", "L_CL", "L_RAC", "L_MI", "L_MC", "L_EWC", "total"]


def losses_csv(reports: Sequence[StageReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_FIELDS)
    for rep in reports:
        for row in rep.losses:
            w.writerow([row["stage"], row["iteration"]] + [f"{row[f]:.8g}" for f in LOSS_FIELDS[2:]])
    return buf.getvalue()


class _RunDir:
    def __init__(self, path, config: ExperimentConfig, strategy: Strategy, seed: int):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.save_ckpt = config.save_checkpoints
        resolved = config.with_overrides(strategy=strategy.name, seeds=[seed])
        M.write_atomic(self.path / "config.json", resolved.to_json() + "\n")

    def stage_done(self, k, R: M.SuccessMatrix, reports, memory: ReplayMemory, params, diag) -> None:
        seen = int((R.task_stage <= k).sum())
        partial = M.SuccessMatrix(R.values[:seen, : k + 1].copy(), R.task_stage[:seen], R.stage_labels[: k + 1])
        M.write_csv(self.path / "R.csv", partial)
        M.write_atomic(self.path / "losses.csv", losses_csv(reports))
        M.write_atomic(self.path / "memory_manifest.json", json.dumps(memory.manifest(), indent=2) + "\n")
        M.write_atomic(self.path / "diagnostics.json", json.dumps(diag, indent=2) + "\n")
        if self.save_ckpt:
            (self.path / "checkpoints").mkdir(exist_ok=True)
            save_checkpoint(self.path / "checkpoints" / f"stage{k}.npz", params)
