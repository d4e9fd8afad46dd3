"""Reward-feedback fine-tuning of the toy denoiser.

One fine-tuning step on a batch:

1. diffusion loss on the batch (same as pretraining);
2. draw a stopping step ``t`` in ``[T_s, T_e]`` and pure noise ``x_T``;
3. denoise ``T -> t`` without gradients;
4. one gradient-carrying network evaluation at ``t`` and the implied
   ``x0_hat``;
5. detect and embed faces in ``x0_hat`` with the reward embedder and score
   them (single-reference or matching reward);
6. ``loss = lambda * L_diff - reward`` and one Adam update.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .assignment import Assignment
from .diffusion import (
    DenoiserModel,
    ModelConfig,
    SchedulerConfig,
    TrainState,
    condition_vector,
    posterior_mean,
    posterior_std,
    predict_x0_from_eps,
    pretrain_loss_and_grad,
    rollout,
    x0_eps_coefficient,
)
from .embedding import DomainError, normalize_rows
from .metrics import confusion_report
from .rewards import NoFaceError, RewardConfig, mimr_and_gradient, similarity_backward
from .seeding import derive_rng
from .toy_world import CustomizationSample, ToyWorld, detect_faces

__all__ = [
    "ABLATION_MODES",
    "EncodedData",
    "MODES",
    "RunConfig",
    "StepResult",
    "TrainingDiverged",
    "encode",
    "evaluate",
    "generate",
    "make_model",
    "pretrain",
    "rerefl_step",
    "run_ablation",
    "split_indices",
    "reward_vs_step_curve",
    "sample_reward",
    "sft_step",
    "stability_statistic",
    "train",
]

logger = logging.getLogger(__name__)

MODES = ("sft", "rerefl_sir", "rerefl_mimr")
MODE_ALIASES = {"sir": "rerefl_sir", "mimr": "rerefl_mimr", "sft": "sft"}


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class RunConfig:
    mode: str = "rerefl_mimr"
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    learning_rate: float = 1e-3
    batch_size: int = 32
    total_steps: int = 1500
    seed: int = 0
    eval_every: int = 500

    def __post_init__(self):
        self.mode = MODE_ALIASES.get(self.mode, self.mode)
        if self.mode not in MODES:
            raise DomainError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if isinstance(self.scheduler, dict):
            self.scheduler = SchedulerConfig(**self.scheduler)
        if isinstance(self.reward, dict):
            self.reward = RewardConfig(**self.reward)
        if self.batch_size < 1 or self.total_steps < 0 or self.eval_every < 1:
            raise DomainError("batch_size and eval_every must be >= 1, total_steps >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheduler"] = self.scheduler.to_dict()
        d["reward"] = self.reward.to_dict()
        return d


@dataclass
class EncodedData:
    """Dataset arrays ready for batching."""

    x0: np.ndarray
    cond: np.ndarray
    ref_psi: list[np.ndarray]
    ref_Psi: list[np.ndarray]
    m: np.ndarray

    def __len__(self):
        return self.x0.shape[0]

    def subset(self, idx) -> "EncodedData":
        idx = np.asarray(idx, dtype=np.intp)
        return EncodedData(
            self.x0[idx], self.cond[idx], [self.ref_psi[i] for i in idx], [self.ref_Psi[i] for i in idx], self.m[idx]
        )


def encode(world: ToyWorld, samples: list[CustomizationSample]) -> EncodedData:
    """Embed references with both embedders and build conditioning vectors.

    Conditioning uses only the reward embedder.
    """
    n = len(samples)
    if n == 0:
        return EncodedData(
            np.zeros((0, world.composite_dim)),
            np.zeros((0, cond_dim(world))),
            [], [], np.zeros(0, dtype=np.intp),
        )
    ref_psi = [world.psi.embed_many(s.references) for s in samples]
    ref_Psi = [world.Psi.embed_many(s.references) for s in samples]
    cond = np.vstack([
        condition_vector(rp, s.prompt_code, world.n_slots, world.n_slots) for rp, s in zip(ref_psi, samples)
    ])
    x0 = np.vstack([s.target for s in samples])
    return EncodedData(x0, cond, ref_psi, ref_Psi, np.array([s.M for s in samples], dtype=np.intp))


def cond_dim(world: ToyWorld) -> int:
    return world.n_slots * world.psi.d_out + 2 * world.n_slots


def make_model(world: ToyWorld, sched: SchedulerConfig, seed: int, hidden=(128, 128, 128), time_dim: int = 16,
               sigma_data: float | None = 0.3) -> DenoiserModel:
    """Fresh denoiser for ``world``; ``sigma_data=None`` disables preconditioning."""
    abar = tuple(float(a) for a in sched.alphas_cumprod) if sigma_data is not None else None
    cfg = ModelConfig(world.composite_dim, cond_dim(world), time_dim, tuple(hidden), sched.T, sigma_data, abar)
    return DenoiserModel(cfg, rng=derive_rng(seed, "model-init"))


def _scatter(world: ToyWorld, idx: np.ndarray, grad_vecs: np.ndarray) -> np.ndarray:
    out = np.zeros((world.n_slots, world.slot_width))
    out[idx, 1:] = grad_vecs
    return out.ravel()


def sample_reward(world: ToyWorld, x0_hat: np.ndarray, ref_psi: np.ndarray, mode: str, reward_cfg: RewardConfig):
    """Reward of one predicted sample and its gradient w.r.t. ``x0_hat``.

    ``rerefl_sir`` compares the first reference against the first detected
    face, the one a whole-image recognizer would report; it never looks at
    the reference to pick a face. ``rerefl_mimr`` (and ``sft``, for logging) uses the
    matching reward over the Hungarian assignment.

    Returns:
        ``(reward, d_reward_d_x0, assignment_or_None)``.

    Raises:
        NoFaceError: nothing detected in ``x0_hat``.
    """
    idx, vecs = detect_faces(x0_hat, world.tau, world.n_slots)
    if idx.size == 0:
        raise NoFaceError("no face detected")
    if np.any(np.linalg.norm(vecs, axis=1) < 1e-12):
        raise NoFaceError("degenerate face vector")
    raw = world.psi.raw(vecs)
    if np.any(np.linalg.norm(raw, axis=1) == 0.0):
        raise NoFaceError("degenerate face vector")
    if mode == "rerefl_sir":
        ref = ref_psi[:1]
        g_raw = np.zeros_like(raw)
        g_raw[0] = similarity_backward(ref, raw[:1], np.ones((1, 1)))[0]
        value = float(ref[0] @ normalize_rows(raw[:1])[0])
        return value, _scatter(world, idx, world.psi.pullback(vecs, g_raw)), None
    r, g_raw, a, _ = mimr_and_gradient(ref_psi, raw, reward_cfg)
    return r, _scatter(world, idx, world.psi.pullback(vecs, g_raw)), a


RewardFn = Callable[[ToyWorld, np.ndarray, np.ndarray, str, RewardConfig], tuple]
RolloutFn = Callable[[np.ndarray, np.ndarray, np.ndarray, np.random.Generator], np.ndarray]


@dataclass
class StepResult:
    total_loss: float
    l_diff: float
    l_rerefl: float
    reward_value: float
    assignments: list[Assignment | None]
    diagnostics: dict


def _check_finite(state: TrainState, **values) -> None:
    bad = {k: v for k, v in values.items() if not np.isfinite(v)}
    if bad:
        snap = {"step": state.step, **{k: float(v) for k, v in values.items()},
                "param_norms": [float(np.linalg.norm(p)) for p in state.model.params]}
        raise TrainingDiverged(f"non-finite loss at step {state.step}: {bad}", snap)


def rerefl_step(
    state: TrainState,
    data: EncodedData,
    batch: np.ndarray,
    world: ToyWorld,
    cfg: RunConfig,
    rng: np.random.Generator | None = None,
    *,
    reward_fn: RewardFn | None = None,
    rollout_fn: RolloutFn | None = None,
    update: bool = True,
) -> StepResult:
    """One reward-feedback update on ``data[batch]``.

    Args:
        rollout_fn: ``(x_T, t, cond, rng) -> x_t`` for the gradient-free
            part of the trajectory; defaults to ancestral sampling with
            ``state.model``. Gradients depend on it only through ``x_t``.
        update: apply the optimizer step. Gradients are returned in
            ``diagnostics["grads"]`` either way.
    """
    if cfg.mode == "sft":
        raise DomainError("rerefl_step needs a reward mode; use sft_step for mode 'sft'")
    rng = state.rng if rng is None else rng
    reward_fn = reward_fn or sample_reward
    model, sched, rcfg = state.model, cfg.scheduler, cfg.reward
    batch = np.asarray(batch, dtype=np.intp)
    b = batch.size
    x0, cond = data.x0[batch], data.cond[batch]

    l_diff, g_diff = pretrain_loss_and_grad(model, sched, x0, cond, rng)

    t = rng.integers(sched.T_s, sched.T_e + 1, size=b)
    x_T = rng.standard_normal(x0.shape)
    if rollout_fn is None:
        x_t = rollout(model, sched, x_T, t, cond, rng)
    else:
        x_t = np.asarray(rollout_fn(x_T, t, cond, rng), dtype=np.float64)

    eps, cache = model.forward(x_t, t, cond, keep_cache=True)
    x0_hat = predict_x0_from_eps(sched, x_t, t, eps)

    rewards = np.zeros(b)
    d_x0 = np.zeros_like(x0_hat)
    assignments: list[Assignment | None] = []
    no_face = 0
    for i in range(b):
        try:
            r, g, a = reward_fn(world, x0_hat[i], data.ref_psi[batch[i]], cfg.mode, rcfg)
        except NoFaceError:
            no_face += 1
            assignments.append(None)
            if rcfg.no_face_fallback == "fixed_penalty":
                rewards[i] = -rcfg.no_face_penalty
            logger.debug("step %d: no face in sample %d, fallback %s", state.step, int(batch[i]), rcfg.no_face_fallback)
            continue
        rewards[i] = r
        d_x0[i] = g
        assignments.append(a)

    l_rerefl = -float(rewards.mean())
    total = rcfg.pretrain_weight * l_diff + l_rerefl
    _check_finite(state, total_loss=total, l_diff=l_diff, l_rerefl=l_rerefl)

    # loss = -mean(R); chain through x0_hat = (x_t - c * eps) / sqrt(abar)
    d_eps = -(d_x0 / b) * x0_eps_coefficient(sched, t)[:, None]
    g_reward = model.backward(cache, d_eps)
    grads = [rcfg.pretrain_weight * gd + gr for gd, gr in zip(g_diff, g_reward)]
    if update:
        state.optimizer.step(model.params, grads)
        state.step += 1

    faces = [a for a in assignments if a is not None]
    return StepResult(
        total_loss=total,
        l_diff=l_diff,
        l_rerefl=l_rerefl,
        reward_value=float(rewards.mean()),
        assignments=assignments,
        diagnostics={
            "t": t,
            "x_t": x_t,
            "x0_hat": x0_hat,
            "no_face": no_face,
            "matched_fraction": float(np.mean([len(a) for a in faces])) if faces else 0.0,
            "grads": grads,
            "reward_grads": g_reward,
        },
    )


def sft_step(state: TrainState, data: EncodedData, batch: np.ndarray, sched: SchedulerConfig,
             rng: np.random.Generator | None = None) -> tuple[float]:
    """One diffusion-loss update on ``data[batch]``."""
    rng = state.rng if rng is None else rng
    batch = np.asarray(batch, dtype=np.intp)
    loss, grads = pretrain_loss_and_grad(state.model, sched, data.x0[batch], data.cond[batch], rng)
    _check_finite(state, loss=loss)
    state.optimizer.step(state.model.params, grads)
    state.step += 1
    return (loss,)


def pretrain(state: TrainState, data: EncodedData, sched: SchedulerConfig, steps: int, batch_size: int) -> list[float]:
    """Diffusion-loss training; returns the per-step loss curve."""
    losses = []
    for _ in range(steps):
        batch = state.rng.integers(0, len(data), size=batch_size)
        losses.append(sft_step(state, data, batch, sched)[0])
    return losses


def generate(model: DenoiserModel, sched: SchedulerConfig, cond: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Full ``T``-step ancestral sampling for every conditioning row."""
    cond = np.atleast_2d(cond)
    x_T = rng.standard_normal((cond.shape[0], model.config.x_dim))
    return rollout(model, sched, x_T, np.zeros(cond.shape[0], dtype=np.intp), cond, rng)


def evaluate(model: DenoiserModel, sched: SchedulerConfig, world: ToyWorld, data: EncodedData,
             seed: int, reward_cfg: RewardConfig | None = None, samples: np.ndarray | None = None) -> dict:
    """Generate once per held-out sample and score it with the evaluation embedder.

    ``samples`` overrides generation (e.g. ground-truth targets for the
    ceiling check). The reward column is the matching reward under the
    reward embedder, faceless samples counted at -1.
    """
    reward_cfg = reward_cfg or RewardConfig()
    if len(data) == 0:
        return {"id_sim": float("nan"), "id_conf": float("nan"), "mean_reward": float("nan"),
                "n_samples": 0, "missing_faces": 0, "reports": []}
    x = generate(model, sched, data.cond, derive_rng(seed, "eval")) if samples is None else samples
    reports, rewards = [], []
    for i in range(len(data)):
        _, vecs = detect_faces(x[i], world.tau, world.n_slots)
        gens = np.zeros((0, world.Psi.d_out))
        if len(vecs) and np.all(np.linalg.norm(vecs, axis=1) >= 1e-12):
            gens = world.Psi.raw(vecs)
            if np.any(np.linalg.norm(gens, axis=1) == 0.0):
                gens = np.zeros((0, world.Psi.d_out))
        reports.append(confusion_report(data.ref_Psi[i], gens))
        try:
            rewards.append(sample_reward(world, x[i], data.ref_psi[i], "rerefl_mimr", reward_cfg)[0])
        except NoFaceError:
            rewards.append(-1.0)
    return {
        "id_sim": float(np.mean([r.id_sim for r in reports])),
        "id_conf": float(np.mean([r.id_conf for r in reports])),
        "mean_reward": float(np.mean(rewards)),
        "n_samples": len(reports),
        "missing_faces": int(sum(r.missing_faces for r in reports)),
        "reports": reports,
    }


def train(cfg: RunConfig, state: TrainState, data: EncodedData, world: ToyWorld,
          eval_data: EncodedData | None = None) -> tuple[TrainState, list[dict]]:
    """Run ``cfg.total_steps - state.step`` updates, evaluating every ``eval_every``.

    Resuming from a checkpointed ``state`` continues the same trajectory.
    History rows carry running means of the losses since the previous
    evaluation.
    """
    if len(data) == 0:
        raise DomainError("training dataset is empty")
    history: list[dict] = []
    acc = {"l_diff": [], "l_rerefl": []}
    while state.step < cfg.total_steps:
        batch = state.rng.integers(0, len(data), size=cfg.batch_size)
        if cfg.mode == "sft":
            (loss,) = sft_step(state, data, batch, cfg.scheduler)
            acc["l_diff"].append(loss)
            acc["l_rerefl"].append(0.0)
        else:
            res = rerefl_step(state, data, batch, world, cfg)
            acc["l_diff"].append(res.l_diff)
            acc["l_rerefl"].append(res.l_rerefl)
        if eval_data is not None and (state.step % cfg.eval_every == 0 or state.step == cfg.total_steps):
            ev = evaluate(state.model, cfg.scheduler, world, eval_data, cfg.seed, cfg.reward)
            row = {
                "step": state.step, "mode": cfg.mode, "seed": cfg.seed,
                "id_sim": ev["id_sim"], "id_conf": ev["id_conf"], "mean_reward": ev["mean_reward"],
                "l_diff": float(np.mean(acc["l_diff"])), "l_rerefl": float(np.mean(acc["l_rerefl"])),
            }
            history.append(row)
            acc = {"l_diff": [], "l_rerefl": []}
            logger.info("step %d %s id_sim=%.4f id_conf=%.4f reward=%.4f",
                        state.step, cfg.mode, row["id_sim"], row["id_conf"], row["mean_reward"])
    return state, history


def reward_vs_step_curve(model: DenoiserModel, sched: SchedulerConfig, world: ToyWorld, data: EncodedData,
                         index: int, n_seeds: int, seed: int = 0, reward_cfg: RewardConfig | None = None) -> np.ndarray:
    """Reward of the predicted clean sample along the reverse trajectory.

    Row ``s`` is one sampling seed; column ``k`` is the reward after ``k``
    denoising steps: columns ``0..T-1`` score ``x0_hat`` predicted at steps
    ``T..1`` and column ``T`` scores the final sample. Single-reference
    samples use the single-reference reward, others the matching reward.
    Faceless predictions score -1.
    """
    reward_cfg = reward_cfg or RewardConfig()
    mode = "rerefl_sir" if data.m[index] == 1 else "rerefl_mimr"
    ref_psi = data.ref_psi[index]
    cond = np.repeat(data.cond[index:index + 1], n_seeds, axis=0)
    rngs = [derive_rng(seed, "curve", s) for s in range(n_seeds)]
    x = np.vstack([r.standard_normal((1, model.config.x_dim)) for r in rngs])
    curve = np.zeros((n_seeds, sched.T + 1))

    def score(rows):
        out = []
        for row in rows:
            try:
                out.append(sample_reward(world, row, ref_psi, mode, reward_cfg)[0])
            except NoFaceError:
                out.append(-1.0)
        return out

    for k, tau in enumerate(range(sched.T, 0, -1)):
        tt = np.full(n_seeds, tau)
        eps = model(x, tt, cond)
        curve[:, k] = score(predict_x0_from_eps(sched, x, tt, eps))
        mean = posterior_mean(sched, x, tt, eps)
        z = np.vstack([r.standard_normal((1, x.shape[1])) for r in rngs])
        x = mean + posterior_std(sched, tt)[:, None] * z
    curve[:, sched.T] = score(x)
    return curve


def stability_statistic(curve: np.ndarray, fraction: float = 0.4) -> tuple[float, float]:
    """Across-seed std of the reward, averaged over the first and last ``fraction`` of steps."""
    n = curve.shape[1]
    k = max(1, int(round(fraction * n)))
    std = curve.std(axis=0)
    return float(std[:k].mean()), float(std[-k:].mean())


def split_indices(n: int, eval_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Train and held-out indices: the last ``eval_fraction`` of the samples is held out."""
    if not 0.0 <= eval_fraction < 1.0:
        raise DomainError(f"eval_fraction must lie in [0, 1), got {eval_fraction}")
    n_eval = int(round(n * eval_fraction))
    return np.arange(n - n_eval), np.arange(n - n_eval, n)


ABLATION_MODES = ("pretrained",) + MODES


def run_ablation(
    seed: int,
    *,
    n_identities: int = 12,
    dim: int = 16,
    min_sep: float = 1.0,
    sigma_intra: float = 0.15,
    m_range: tuple[int, int] = (2, 4),
    n_samples: int = 2000,
    n_slots: int = 4,
    pretrain_steps: int = 1500,
    pretrain_batch: int = 64,
    steps: int = 1500,
    batch_size: int = 32,
    learning_rate: float = 1e-3,
) -> dict[str, dict]:
    """Pretrain once, fine-tune a copy per mode, and score everything on the held-out split.

    Returns ``{mode: {"id_sim", "id_conf", "mean_reward"}}`` including the
    ``"pretrained"`` starting point.
    """
    from .toy_world import make_dataset, sample_universe

    universe = sample_universe(n_identities, dim, min_sep, sigma_intra, seed)
    world = ToyWorld.build(universe, n_slots)
    data = encode(world, make_dataset(universe, n_samples, m_range, derive_rng(seed, "data"), n_slots))
    train_idx, eval_idx = split_indices(len(data))
    train_data, eval_data = data.subset(train_idx), data.subset(eval_idx)
    sched = SchedulerConfig()

    base = TrainState.fresh(make_model(world, sched, seed), learning_rate, derive_rng(seed, "pretrain"))
    pretrain(base, train_data, sched, pretrain_steps, pretrain_batch)

    def score(model):
        ev = evaluate(model, sched, world, eval_data, seed)
        return {k: ev[k] for k in ("id_sim", "id_conf", "mean_reward")}

    out = {"pretrained": score(base.model)}
    for mode in MODES:
        state = TrainState.fresh(base.model.copy(), learning_rate, derive_rng(seed, "train", mode))
        cfg = RunConfig(mode=mode, scheduler=sched, learning_rate=learning_rate, batch_size=batch_size,
                        total_steps=steps, seed=seed, eval_every=max(steps, 1))
        train(cfg, state, train_data, world)
        out[mode] = score(state.model)
        logger.info("seed %d %s %s", seed, mode, out[mode])
    return out
