"""DDPM over action chunks.

An action chunk is ``horizon`` steps of ``[pose(9) | force(force_dims)]``
flattened row-major. Poses use the translation + 6D-rotation vector from
:mod:`ocra.geometry`; noising happens in that chart and samples are
projected back onto SE(3) by Gram-Schmidt.

Reverse update, with ``eps_hat`` from the denoiser::

    x_{k-1} = a_k * (x_k - g_k * eps_hat + s_k * z)

where ``a_k = 1/sqrt(1-beta_k)``, ``g_k = beta_k / sqrt(1-abar_k)`` and
``s_k`` is chosen so that the injected noise has standard deviation
``sqrt(beta_tilde_k)`` (the posterior of the forward process, default) or
``sqrt(beta_k)`` after the outer ``a_k`` scaling. For unit-variance data the
second is the exact reverse kernel; the first under-disperses when
``beta_1`` is large.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import encode, nn
from .errors import (ConfigError, DegenerateRotation, DimensionMismatch, InvalidRange,
                     StepOutOfRange)
from .geometry import POSE_DIM, pose_decode
from .io import atomic_write_bytes, decode_container, encode_container, section_text

TIME_EMBED_DIM = 16
_MIN_STD = 1e-8
PARAMETERIZATIONS = ("sample", "epsilon", "velocity")
REVERSE_VARIANCES = ("beta_tilde", "beta")
# per-group spread floor, relative to the group's RMS magnitude
ACTION_STD_FLOOR = 0.01


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    sigma: np.ndarray
    posterior_std: np.ndarray

    @property
    def K(self) -> int:
        return len(self.beta)

    def check_step(self, k: int):
        if not 1 <= k <= self.K:
            raise StepOutOfRange(f"diffusion step {k} outside [1, {self.K}]")


def make_schedule(K: int, beta_start: float, beta_end: float,
                  reverse_variance: str = "beta_tilde") -> NoiseSchedule:
    """Linear beta schedule; index ``k - 1`` holds the coefficients of step k.

    ``reverse_variance`` picks the variance of the noise injected by each
    reverse step: ``"beta_tilde"`` or ``"beta"``.
    """
    if K < 1 or not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidRange(f"need K >= 1 and 0 < beta_start <= beta_end < 1, "
                           f"got K={K}, [{beta_start}, {beta_end}]")
    if reverse_variance not in REVERSE_VARIANCES:
        raise InvalidRange(f"unknown reverse variance {reverse_variance!r}")
    beta = np.linspace(beta_start, beta_end, K)
    alpha_bar = np.cumprod(1.0 - beta)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    alpha = 1.0 / np.sqrt(1.0 - beta)
    gamma = beta / np.sqrt(1.0 - alpha_bar)
    posterior_std = np.sqrt(beta_tilde if reverse_variance == "beta_tilde" else beta)
    sigma = posterior_std / alpha
    sigma[0] = 0.0
    posterior_std[0] = 0.0
    return NoiseSchedule(beta, alpha_bar, alpha, gamma, sigma, posterior_std)


def forward_diffuse(x0, k: int, noise, schedule: NoiseSchedule):
    schedule.check_step(k)
    ab = schedule.alpha_bar[k - 1]
    return np.sqrt(ab) * np.asarray(x0, dtype=float) + np.sqrt(1.0 - ab) * np.asarray(noise, dtype=float)


def reverse_step(x_k, k: int, eps_hat, schedule: NoiseSchedule, rng: np.random.Generator):
    schedule.check_step(k)
    x_k = np.asarray(x_k, dtype=float)
    inner = x_k - schedule.gamma[k - 1] * np.asarray(eps_hat, dtype=float)
    if k > 1 and schedule.sigma[k - 1] > 0.0:
        inner = inner + schedule.sigma[k - 1] * rng.standard_normal(x_k.shape)
    return schedule.alpha[k - 1] * inner


def posterior_mean(x_k, x0, k: int, schedule: NoiseSchedule):
    """Mean of q(x_{k-1} | x_k, x_0), for checking the reverse update."""
    schedule.check_step(k)
    ab = schedule.alpha_bar[k - 1]
    ab_prev = schedule.alpha_bar[k - 2] if k > 1 else 1.0
    b = schedule.beta[k - 1]
    c0 = np.sqrt(ab_prev) * b / (1.0 - ab)
    ck = np.sqrt(1.0 - b) * (1.0 - ab_prev) / (1.0 - ab)
    return c0 * np.asarray(x0) + ck * np.asarray(x_k)


def gaussian_optimal_eps(x_k, k: int, mean, var, schedule: NoiseSchedule):
    """E[eps | x_k] when the clean data are N(mean, diag(var))."""
    ab = schedule.alpha_bar[k - 1]
    return np.sqrt(1.0 - ab) * (x_k - np.sqrt(ab) * mean) / (ab * var + 1.0 - ab)


def time_embedding(k, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    k = np.atleast_1d(np.asarray(k, dtype=float))
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    arg = k[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


@dataclass
class PolicyConfig:
    horizon: int = 8
    obs_horizon: int = 2
    force_dims: int = 1
    feature_dim: int = encode.DEFAULT_DIM
    hidden: int = 128
    diffusion_steps: int = 100
    beta_start: float = 1e-2
    beta_end: float = 0.02
    # variance of the reverse-step noise; "beta" is exact for unit-variance data
    reverse_variance: str = "beta"
    lr: float = 1e-4
    lr_schedule: str = "cosine"
    batch_size: int = 32
    # "resfilm": trainable fusion; "frozen": gate held at 0; "none": vision only
    fusion: str = "resfilm"
    # "sample": network predicts the clean chunk; "epsilon": predicts noise
    parameterization: str = "sample"
    # std of Gaussian noise added to the normalized observation features
    # while training (a ridge-like regularizer; 0 disables)
    obs_noise: float = 0.0

    def __post_init__(self):
        if self.horizon < 1 or self.obs_horizon < 1:
            raise ConfigError("horizon and obs_horizon must be >= 1")
        if self.force_dims not in (0, 1, 3):
            raise ConfigError(f"force_dims must be 0, 1 or 3, got {self.force_dims}")
        if self.fusion not in ("resfilm", "frozen", "none"):
            raise ConfigError(f"unknown fusion mode {self.fusion!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ConfigError(f"unknown parameterization {self.parameterization!r}")
        if self.reverse_variance not in REVERSE_VARIANCES:
            raise ConfigError(f"unknown reverse variance {self.reverse_variance!r}")
        if self.obs_noise < 0:
            raise ConfigError("obs_noise must be non-negative")

    @property
    def step_dim(self) -> int:
        return POSE_DIM + self.force_dims

    @property
    def chunk_dim(self) -> int:
        return self.horizon * self.step_dim

    @property
    def obs_dim(self) -> int:
        return self.obs_horizon * self.feature_dim

    @property
    def uses_tactile(self) -> bool:
        return self.fusion != "none"


@dataclass
class Normalizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, data, floor=None) -> Normalizer:
        """Per-column z-score. ``floor`` (scalar or per-column) bounds the
        scale from below; columns with no spread at all keep raw units."""
        data = np.asarray(data, dtype=float)
        mean = data.mean(axis=0)
        std = data.std(axis=0)
        if floor is not None:
            std = np.maximum(std, floor)
        return cls(mean, np.where(std > _MIN_STD, std, 1.0))

    @classmethod
    def identity(cls, dim: int) -> Normalizer:
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def inverse(self, z):
        return np.asarray(z, dtype=float) * self.scale + self.mean


class DiffusionPolicy:
    """Conditional noise predictor plus everything needed to sample from it.

    Conditioning: per observation frame, a geometry feature ``f_pc`` and a
    tactile feature ``f_t`` (both normalized) are fused by ResFiLM; the
    frames are concatenated and appended to the MLP input together with the
    sinusoidal step embedding.
    """

    def __init__(self, config: PolicyConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        sizes = [c.chunk_dim + c.obs_dim + TIME_EMBED_DIM, c.hidden, c.hidden, c.chunk_dim]
        self.params = nn.init_mlp(sizes, rng)
        if c.uses_tactile:
            self.params.update(encode.init_resfilm(c.feature_dim, rng))
        self.schedule = make_schedule(c.diffusion_steps, c.beta_start, c.beta_end, c.reverse_variance)
        self.action_norm = Normalizer.identity(c.chunk_dim)
        self.pc_norm = Normalizer.identity(c.feature_dim)
        self.tac_norm = Normalizer.identity(c.feature_dim)

    @property
    def frozen(self) -> tuple:
        if self.config.fusion == "frozen":
            return ("film.W", "film.b", "proj.W", "alpha")
        return ()

    def fit_normalizers(self, x0, f_pc, f_t=None):
        """Fit action/feature statistics on raw training arrays.

        ``x0``: (N, chunk_dim); ``f_pc``/``f_t``: (N, obs_horizon, D).
        """
        self.action_norm = Normalizer.fit(x0, self.action_floor(x0))
        d = self.config.feature_dim
        self.pc_norm = Normalizer.fit(np.asarray(f_pc).reshape(-1, d))
        if f_t is not None and self.config.uses_tactile:
            self.tac_norm = Normalizer.fit(np.asarray(f_t).reshape(-1, d))

    def action_floor(self, x0) -> np.ndarray:
        """Per-column scale floor for action chunks.

        Columns are grouped by meaning (translation, 6D rotation, force)
        across all chunk steps; each group's floor is ``ACTION_STD_FLOOR``
        times its RMS magnitude. A column whose spread across demonstrations
        is only measurement jitter (e.g. a rate that is the same in every
        demonstration) would otherwise be blown up to unit variance, and its
        unpredictable noise would dominate the loss at small ``k``.
        """
        x0 = np.asarray(x0, dtype=float).reshape(-1, self.config.horizon, self.config.step_dim)
        floor = np.zeros(self.config.step_dim)
        for sl in (slice(0, 3), slice(3, POSE_DIM), slice(POSE_DIM, self.config.step_dim)):
            if sl.stop > sl.start:
                floor[sl] = ACTION_STD_FLOOR * np.sqrt(np.mean(x0[:, :, sl] ** 2))
        return np.tile(floor, self.config.horizon)

    # conditioning -------------------------------------------------------
    def condition(self, f_pc, f_t=None):
        """Normalized, fused, flattened observation. Returns ``(obs, cache)``."""
        c = self.config
        f_pc = np.asarray(f_pc, dtype=float)
        if f_pc.ndim == 2:
            f_pc = f_pc[None]
        if f_pc.shape[1:] != (c.obs_horizon, c.feature_dim):
            raise DimensionMismatch(
                f"f_pc has shape {f_pc.shape}, expected (B, {c.obs_horizon}, {c.feature_dim})")
        zp = self.pc_norm(f_pc)
        if not c.uses_tactile:
            return zp.reshape(len(zp), -1), None
        f_t = np.asarray(f_t, dtype=float)
        if f_t.ndim == 2:
            f_t = f_t[None]
        if f_t.shape != f_pc.shape:
            raise DimensionMismatch(f"f_t shape {f_t.shape} != f_pc shape {f_pc.shape}")
        fused, cache = encode.resfilm_fuse(zp, self.tac_norm(f_t), self.params)
        return fused.reshape(len(fused), -1), cache

    # denoiser -----------------------------------------------------------
    def _coefficients(self, k):
        ab = self.schedule.alpha_bar[np.asarray(k) - 1][:, None]
        a, s = np.sqrt(ab), np.sqrt(1.0 - ab)
        one = np.ones_like(a)
        if self.config.parameterization == "epsilon":
            return np.zeros_like(a), one, one
        if self.config.parameterization == "velocity":
            return s, a, one
        return 1.0 / s, -a / s, one

    def predict_eps(self, x_k, k, obs):
        """Noise estimate for a batch of noisy chunks.

        Under the "sample" parameterization the network output ``D`` is a
        clean-chunk estimate and ``eps_hat = (x_k - sqrt(abar_k) D) /
        sqrt(1 - abar_k)``; under "epsilon" the output is ``eps_hat`` itself.
        Returns ``(eps_hat, cache)``.
        """
        x_k = np.atleast_2d(np.asarray(x_k, dtype=float))
        k = np.broadcast_to(np.asarray(k), (len(x_k),))
        c_skip, c_out, c_in = self._coefficients(k)
        inp = np.concatenate([c_in * x_k, obs, time_embedding(k)], axis=1)
        y, mlp_cache = nn.mlp_forward(self.params, inp)
        return c_skip * x_k + c_out * y, {"mlp": mlp_cache, "c_out": c_out}

    def backward(self, grad_eps, eps_cache, cond_cache):
        """Parameter gradients given dL/d eps_hat."""
        c = self.config
        grads, g_in = nn.mlp_backward(self.params, eps_cache["mlp"], grad_eps * eps_cache["c_out"])
        if c.uses_tactile and cond_cache is not None:
            g_obs = g_in[:, c.chunk_dim:c.chunk_dim + c.obs_dim].reshape(-1, c.obs_horizon, c.feature_dim)
            fusion_grads, _, _ = encode.resfilm_backward(g_obs, cond_cache, self.params)
            grads.update(fusion_grads)
        return grads

    # sampling -----------------------------------------------------------
    def sample_normalized(self, obs, rng: np.random.Generator):
        """Run the reverse chain from N(0, I). ``obs`` is (B, obs_dim)."""
        obs = np.atleast_2d(obs)
        x = rng.standard_normal((len(obs), self.config.chunk_dim))
        for k in range(self.schedule.K, 0, -1):
            eps, _ = self.predict_eps(x, k, obs)
            x = reverse_step(x, k, eps, self.schedule, rng)
        return x

    def split_chunk(self, chunk):
        """Raw chunk row -> (pose vectors (H, 9), forces (H, force_dims))."""
        steps = np.asarray(chunk, dtype=float).reshape(self.config.horizon, self.config.step_dim)
        return steps[:, :POSE_DIM], steps[:, POSE_DIM:]

    # persistence --------------------------------------------------------
    def state_sections(self) -> dict:
        s = {f"param/{k}": v for k, v in self.params.items()}
        s.update({
            "norm/action_mean": self.action_norm.mean, "norm/action_scale": self.action_norm.scale,
            "norm/pc_mean": self.pc_norm.mean, "norm/pc_scale": self.pc_norm.scale,
            "norm/tac_mean": self.tac_norm.mean, "norm/tac_scale": self.tac_norm.scale,
            "schedule/beta": self.schedule.beta, "schedule/alpha_bar": self.schedule.alpha_bar,
            "config": json.dumps(asdict(self.config), sort_keys=True),
        })
        return s

    def save(self, path, extra: dict | None = None):
        sections = self.state_sections()
        if extra:
            sections.update(extra)
        atomic_write_bytes(path, encode_container(sections))

    @classmethod
    def from_sections(cls, sections: dict) -> DiffusionPolicy:
        config = PolicyConfig(**json.loads(section_text(sections, "config")))
        policy = cls(config)
        policy.params = {k[len("param/"):]: v.copy() for k, v in sections.items() if k.startswith("param/")}
        policy.action_norm = Normalizer(sections["norm/action_mean"], sections["norm/action_scale"])
        policy.pc_norm = Normalizer(sections["norm/pc_mean"], sections["norm/pc_scale"])
        policy.tac_norm = Normalizer(sections["norm/tac_mean"], sections["norm/tac_scale"])
        return policy

    @classmethod
    def load(cls, path) -> DiffusionPolicy:
        from .io import _read_bytes
        return cls.from_sections(decode_container(_read_bytes(path)))


def diffusion_loss(eps, eps_hat) -> float:
    """Batch mean of the squared L2 noise-prediction error."""
    r = np.asarray(eps_hat) - np.asarray(eps)
    return float(np.mean(np.sum(r * r, axis=1)))


def train_step(policy: DiffusionPolicy, batch: dict, adam: nn.AdamState,
               rng: np.random.Generator) -> float:
    """One Adam step on the noise-prediction loss.

    ``batch`` holds raw ``x0`` (B, chunk_dim), ``f_pc`` (B, obs_horizon, D)
    and, when tactile fusion is on, ``f_t`` of the same shape.
    """
    c = policy.config
    x0 = np.atleast_2d(np.asarray(batch["x0"], dtype=float))
    if x0.shape[1] != c.chunk_dim:
        raise DimensionMismatch(f"x0 width {x0.shape[1]} != chunk dim {c.chunk_dim}")
    B = len(x0)
    z0 = policy.action_norm(x0)
    k = rng.integers(1, policy.schedule.K + 1, size=B)
    eps = rng.standard_normal(z0.shape)
    ab = policy.schedule.alpha_bar[k - 1][:, None]
    x_k = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    f_pc, f_t = np.asarray(batch["f_pc"], dtype=float), batch.get("f_t")
    if c.obs_noise > 0:
        f_pc = f_pc + c.obs_noise * policy.pc_norm.scale * rng.standard_normal(f_pc.shape)
        if f_t is not None and c.uses_tactile:
            f_t = np.asarray(f_t, dtype=float)
            f_t = f_t + c.obs_noise * policy.tac_norm.scale * rng.standard_normal(f_t.shape)
    obs, cond_cache = policy.condition(f_pc, f_t)
    eps_hat, cache = policy.predict_eps(x_k, k, obs)
    loss = diffusion_loss(eps, eps_hat)
    grads = policy.backward(2.0 * (eps_hat - eps) / B, cache, cond_cache)
    nn.adam_update(policy.params, grads, adam, frozen=policy.frozen)
    return loss


def sample_chunk(policy: DiffusionPolicy, f_pc, f_t, rng: np.random.Generator):
    """Draw one action chunk for a single observation.

    Returns ``(chunk, transforms, forces)`` with the raw chunk vector, the
    decoded per-step transforms and the per-step force references.
    """
    obs, _ = policy.condition(f_pc, f_t)
    z = policy.sample_normalized(obs, rng)[0]
    chunk = policy.action_norm.inverse(z)
    poses, forces = policy.split_chunk(chunk)
    transforms = []
    for i, v in enumerate(poses):
        try:
            transforms.append(pose_decode(v))
        except DegenerateRotation:
            # one redraw of the rotation block for this step
            redraw = policy.split_chunk(policy.action_norm.inverse(policy.sample_normalized(obs, rng)[0]))[0]
            v = np.concatenate([v[:3], redraw[i, 3:]])
            poses[i] = v
            transforms.append(pose_decode(v))
    chunk = np.concatenate([poses, forces], axis=1).reshape(-1)
    return chunk, transforms, forces


def train(policy: DiffusionPolicy, data: dict, steps: int, rng: np.random.Generator,
          adam: nn.AdamState | None = None, log_every: int = 0, callback=None) -> list:
    """Minibatch training loop; returns the per-step losses.

    With the cosine schedule the learning rate decays from ``config.lr`` to
    zero over ``steps``.
    """
    adam = adam if adam is not None else nn.AdamState(lr=policy.config.lr)
    base_lr = adam.lr
    n = len(data["x0"])
    bs = policy.config.batch_size
    losses = []
    for step in range(steps):
        if policy.config.lr_schedule == "cosine":
            adam.lr = base_lr * 0.5 * (1.0 + np.cos(np.pi * step / steps))
        idx = rng.integers(0, n, size=bs)
        batch = {key: np.asarray(val)[idx] for key, val in data.items() if val is not None}
        losses.append(train_step(policy, batch, adam, rng))
        if callback is not None and log_every and (step + 1) % log_every == 0:
            callback(step + 1, losses)
    adam.lr = base_lr
    return losses
