"""Minimal conditional DDPM over composite slot vectors.

The denoiser is a small SiLU MLP with hand-written reverse-mode gradients.
It predicts the noise ``eps`` from ``(x_t, time features, condition)``.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .embedding import DomainError
from .seeding import rng_from_state, rng_state

__all__ = [
    "Adam",
    "CHECKPOINT_VERSION",
    "DenoiserModel",
    "ModelConfig",
    "SchedulerConfig",
    "TrainState",
    "condition_vector",
    "denoise_step",
    "forward_noise",
    "load_checkpoint",
    "posterior_mean",
    "predict_x0",
    "predict_x0_from_eps",
    "pretrain_loss",
    "pretrain_loss_and_grad",
    "rollout",
    "save_checkpoint",
]

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SchedulerConfig:
    """Linear beta schedule over ``T`` steps plus the fine-tuning window.

    ``clip_x0`` bounds the clean-sample estimate inside ancestral sampling
    only; :func:`predict_x0_from_eps` is never clipped.
    """

    T: int = 25
    T_s: int = 1
    T_e: int = 10
    beta_start: float = 0.01
    beta_end: float = 0.4
    clip_x0: float | None = 1.0

    def __post_init__(self):
        if not 1 <= self.T_s <= self.T_e < self.T:
            raise DomainError(f"need 1 <= T_s <= T_e < T, got T_s={self.T_s}, T_e={self.T_e}, T={self.T}")
        b = self.betas
        if not np.all((b > 0) & (b < 1)):
            raise DomainError("betas must lie strictly inside (0, 1)")
        if not np.all(np.diff(self.alphas_cumprod) < 0):
            raise DomainError("alphas_cumprod must be strictly decreasing")

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alphas_cumprod(self) -> np.ndarray:
        """Index ``t`` holds the cumulative product up to step ``t``; index 0 is 1."""
        return np.concatenate([[1.0], np.cumprod(self.alphas)])

    def to_dict(self) -> dict:
        return asdict(self)


def _check_t(sched: SchedulerConfig, t, lo: int = 1) -> np.ndarray:
    t = np.asarray(t, dtype=np.intp)
    if np.any(t < lo) or np.any(t > sched.T):
        raise DomainError(f"time step out of range [{lo}, {sched.T}]: {t}")
    return t


def _col(v: np.ndarray, like: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (like.ndim - v.ndim))


def forward_noise(sched: SchedulerConfig, x0, t, noise) -> np.ndarray:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) noise``."""
    t = _check_t(sched, t)
    ab = sched.alphas_cumprod[t]
    x0 = np.asarray(x0, dtype=np.float64)
    return _col(np.sqrt(ab), x0) * x0 + _col(np.sqrt(1.0 - ab), x0) * noise


def predict_x0_from_eps(sched: SchedulerConfig, x_t, t, eps) -> np.ndarray:
    t = _check_t(sched, t)
    ab = sched.alphas_cumprod[t]
    x_t = np.asarray(x_t, dtype=np.float64)
    return (x_t - _col(np.sqrt(1.0 - ab), x_t) * eps) / _col(np.sqrt(ab), x_t)


def x0_eps_coefficient(sched: SchedulerConfig, t) -> np.ndarray:
    """d x0_hat / d eps_hat, elementwise."""
    t = _check_t(sched, t)
    ab = sched.alphas_cumprod[t]
    return -np.sqrt(1.0 - ab) / np.sqrt(ab)


def posterior_mean(sched: SchedulerConfig, x_t, t, eps, clip: bool = True) -> np.ndarray:
    """Mean of ``q(x_{t-1} | x_t, x0_hat)`` with ``x0_hat`` from ``eps``.

    ``x0_hat`` is clipped to ``[-clip_x0, clip_x0]`` unless ``clip`` is
    False or the scheduler disables clipping.
    """
    t = _check_t(sched, t)
    x_t = np.asarray(x_t, dtype=np.float64)
    abar = sched.alphas_cumprod
    beta = sched.betas[t - 1]
    c0 = np.sqrt(abar[t - 1]) * beta / (1.0 - abar[t])
    ct = np.sqrt(1.0 - beta) * (1.0 - abar[t - 1]) / (1.0 - abar[t])
    x0 = predict_x0_from_eps(sched, x_t, t, eps)
    if clip and sched.clip_x0 is not None:
        x0 = np.clip(x0, -sched.clip_x0, sched.clip_x0)
    return _col(c0, x_t) * x0 + _col(ct, x_t) * x_t


def posterior_std(sched: SchedulerConfig, t) -> np.ndarray:
    t = _check_t(sched, t)
    abar = sched.alphas_cumprod
    var = sched.betas[t - 1] * (1.0 - abar[t - 1]) / (1.0 - abar[t])
    return np.where(t == 1, 0.0, np.sqrt(var))


@dataclass(frozen=True)
class ModelConfig:
    """Network shape and, optionally, output preconditioning.

    With ``sigma_data`` set the network output ``F`` is mapped to the noise
    estimate as ``c_skip(t) * x_t + c_out(t) * F`` and its input is scaled by
    ``c_in(t)``, so the regression target has unit scale at every step.
    ``alphas_cumprod`` (length ``T + 1``) must then be given.
    """

    x_dim: int
    cond_dim: int
    time_dim: int = 16
    hidden: tuple[int, ...] = (128, 128, 128)
    T: int = 25
    sigma_data: float | None = None
    alphas_cumprod: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.sigma_data is not None:
            if self.sigma_data <= 0:
                raise DomainError(f"sigma_data must be > 0, got {self.sigma_data}")
            if self.alphas_cumprod is None or len(self.alphas_cumprod) != self.T + 1:
                raise DomainError("preconditioning needs alphas_cumprod of length T + 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        if self.alphas_cumprod is not None:
            d["alphas_cumprod"] = list(self.alphas_cumprod)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        if d.get("alphas_cumprod") is not None:
            d["alphas_cumprod"] = tuple(d["alphas_cumprod"])
        return cls(**d)

    def coefficients(self, t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(c_in, c_skip, c_out)`` per row; identity map without preconditioning."""
        t = np.asarray(t, dtype=np.intp)
        if self.sigma_data is None:
            one = np.ones(t.shape)
            return one, np.zeros(t.shape), one
        a = np.asarray(self.alphas_cumprod)[t]
        s2 = self.sigma_data ** 2
        denom = a * s2 + (1.0 - a)
        return 1.0 / np.sqrt(denom), np.sqrt(1.0 - a) / denom, np.sqrt(a * s2 / denom)


def time_features(t, dim: int, T: int) -> np.ndarray:
    """Sinusoidal embedding of integer steps, ``(B, dim)``."""
    t = np.asarray(t, dtype=np.float64) * (1000.0 / T)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _silu(z):
    s = 0.5 * (1.0 + np.tanh(0.5 * z))
    return z * s, s


class DenoiserModel:
    """``eps_hat = f([x_t, time(t), cond])`` with SiLU hidden layers."""

    def __init__(self, config: ModelConfig, params: list[np.ndarray] | None = None, rng: np.random.Generator | None = None):
        self.config = config
        sizes = [config.x_dim + config.time_dim + config.cond_dim, *config.hidden, config.x_dim]
        self.sizes = sizes
        if params is None:
            if rng is None:
                raise ValueError("need params or an rng to initialize")
            params = []
            for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
                scale = 1.0 / math.sqrt(fan_in)
                if i == len(sizes) - 2:
                    scale *= 0.1
                params.append(rng.standard_normal((fan_in, fan_out)) * scale)
                params.append(np.zeros(fan_out))
        expected = [(a, b) for a, b in zip(sizes[:-1], sizes[1:])]
        shapes = [p.shape for p in params[0::2]]
        if shapes != expected:
            raise DomainError(f"parameter shapes {shapes} do not match config {expected}")
        self.params = [np.asarray(p, dtype=np.float64) for p in params]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.config, [p.copy() for p in self.params])

    def inputs(self, x_t, t, cond) -> np.ndarray:
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
        cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
        c_in = self.config.coefficients(t)[0]
        return np.concatenate(
            [c_in[:, None] * x_t, time_features(t, self.config.time_dim, self.config.T), cond], axis=1
        )

    def forward(self, x_t, t, cond, keep_cache: bool = False):
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
        h = self.inputs(x_t, t, cond)
        layers = [] if keep_cache else None
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ W + b
            if i < n_layers - 1:
                a, s = _silu(z)
                if keep_cache:
                    layers.append((h, z, s))
                h = a
            else:
                if keep_cache:
                    layers.append((h, None, None))
                h = z
        _, c_skip, c_out = self.config.coefficients(t)
        eps = c_skip[:, None] * x_t + c_out[:, None] * h
        return (eps, {"layers": layers, "c_out": c_out}) if keep_cache else eps

    def __call__(self, x_t, t, cond) -> np.ndarray:
        return self.forward(x_t, t, cond)

    def backward(self, cache, d_out: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients of ``sum(d_out * eps_hat)``."""
        grads: list[np.ndarray] = [None] * len(self.params)
        g = d_out * cache["c_out"][:, None]
        layers = cache["layers"]
        n_layers = len(layers)
        for i in reversed(range(n_layers)):
            h_in, z, s = layers[i]
            if z is not None:
                # d silu / dz = s (1 + z (1 - s))
                g = g * (s * (1.0 + z * (1.0 - s)))
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = g @ self.params[2 * i].T
        return grads


def condition_vector(ref_embeddings: np.ndarray, prompt_code: int, m_max: int, n_prompts: int) -> np.ndarray:
    """Concatenate reference embeddings padded to ``m_max``, a presence mask and a one-hot prompt."""
    r = np.atleast_2d(np.asarray(ref_embeddings, dtype=np.float64))
    m, d = r.shape
    if m > m_max:
        raise DomainError(f"{m} references exceed m_max={m_max}")
    if not 0 <= prompt_code < n_prompts:
        raise DomainError(f"prompt code {prompt_code} out of range [0, {n_prompts})")
    refs = np.zeros((m_max, d))
    refs[:m] = r
    mask = np.zeros(m_max)
    mask[:m] = 1.0
    prompt = np.zeros(n_prompts)
    prompt[prompt_code] = 1.0
    return np.concatenate([refs.ravel(), mask, prompt])


def predict_x0(model: DenoiserModel, sched: SchedulerConfig, x_t, t, cond) -> np.ndarray:
    eps = model(x_t, t, cond)
    return predict_x0_from_eps(sched, x_t, np.broadcast_to(t, (eps.shape[0],)), eps)


def denoise_step(model: DenoiserModel, sched: SchedulerConfig, x_t, t, cond, rng: np.random.Generator) -> np.ndarray:
    """Ancestral sample of ``x_{t-1}``; no noise is added at ``t = 1``."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.intp), (x_t.shape[0],))
    eps = model(x_t, t, cond)
    mean = posterior_mean(sched, x_t, t, eps)
    z = rng.standard_normal(x_t.shape)
    return mean + _col(posterior_std(sched, t), x_t) * z


def rollout(model: DenoiserModel, sched: SchedulerConfig, x_T: np.ndarray, t_stop, cond, rng: np.random.Generator) -> np.ndarray:
    """Denoise rows of ``x_T`` from step T down to their own ``t_stop``.

    Row ``i`` is updated only while the current step exceeds ``t_stop[i]``;
    the returned array holds each row's ``x_{t_stop}``. Every row draws
    noise at every step so results do not depend on the batch's mix of
    stopping points. Runs without gradient bookkeeping.
    """
    x = np.array(x_T, dtype=np.float64)
    t_stop = np.broadcast_to(np.asarray(t_stop, dtype=np.intp), (x.shape[0],))
    cond = np.atleast_2d(cond)
    for tau in range(sched.T, 0, -1):
        active = t_stop < tau
        z = rng.standard_normal(x.shape)
        if not np.any(active):
            continue
        tt = np.full(x.shape[0], tau)
        eps = model(x[active], tt[active], cond[active])
        mean = posterior_mean(sched, x[active], tt[active], eps)
        x[active] = mean + _col(posterior_std(sched, tt[active]), mean) * z[active]
    return x


def pretrain_loss_and_grad(model: DenoiserModel, sched: SchedulerConfig, x0, cond, rng: np.random.Generator):
    """Noise-prediction MSE at uniformly drawn steps, with parameter gradients.

    The loss is the mean over batch rows and components.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    b = x0.shape[0]
    t = rng.integers(1, sched.T + 1, size=b)
    noise = rng.standard_normal(x0.shape)
    x_t = forward_noise(sched, x0, t, noise)
    eps, cache = model.forward(x_t, t, cond, keep_cache=True)
    diff = eps - noise
    loss = float(np.mean(diff * diff))
    grads = model.backward(cache, 2.0 * diff / diff.size)
    return loss, grads


def pretrain_loss(model: DenoiserModel, sched: SchedulerConfig, x0, cond, rng: np.random.Generator) -> float:
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    t = rng.integers(1, sched.T + 1, size=x0.shape[0])
    noise = rng.standard_normal(x0.shape)
    eps = model(forward_noise(sched, x0, t, noise), t, cond)
    return float(np.mean((eps - noise) ** 2))


class Adam:
    def __init__(self, shapes, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainState:
    model: DenoiserModel
    optimizer: Adam
    rng: np.random.Generator
    step: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, model: DenoiserModel, lr: float, rng: np.random.Generator) -> "TrainState":
        return cls(model, Adam([p.shape for p in model.params], lr=lr), rng)

    def reset_optimizer(self, lr: float) -> None:
        self.optimizer = Adam([p.shape for p in self.model.params], lr=lr)


def _enc(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _dec(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").reshape(d["shape"]).copy()


def save_checkpoint(path: Path, state: TrainState, sched: SchedulerConfig | None = None) -> None:
    """Write a versioned JSON checkpoint holding parameters, optimizer and RNG state."""
    opt = state.optimizer
    blob = {
        "version": CHECKPOINT_VERSION,
        "model_config": state.model.config.to_dict(),
        "params": [_enc(p) for p in state.model.params],
        "optimizer": {
            "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "t": opt.t,
            "m": [_enc(a) for a in opt.m], "v": [_enc(a) for a in opt.v],
        },
        "rng": rng_state(state.rng),
        "step": state.step,
        "scheduler": sched.to_dict() if sched is not None else None,
        "meta": state.meta,
    }
    Path(path).write_text(json.dumps(blob, sort_keys=True) + "\n")


def load_checkpoint(path: Path) -> tuple[TrainState, SchedulerConfig | None]:
    blob = json.loads(Path(path).read_text())
    if blob.get("version") != CHECKPOINT_VERSION:
        raise DomainError(f"unsupported checkpoint version {blob.get('version')!r}")
    model = DenoiserModel(ModelConfig.from_dict(blob["model_config"]), [_dec(p) for p in blob["params"]])
    o = blob["optimizer"]
    opt = Adam([p.shape for p in model.params], o["lr"], o["beta1"], o["beta2"], o["eps"])
    opt.t = o["t"]
    opt.m = [_dec(a) for a in o["m"]]
    opt.v = [_dec(a) for a in o["v"]]
    sched = SchedulerConfig(**blob["scheduler"]) if blob.get("scheduler") else None
    return TrainState(model, opt, rng_from_state(blob["rng"]), blob["step"], blob.get("meta", {})), sched
