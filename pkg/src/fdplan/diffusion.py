"""Cosine noise schedule and the forward/reverse diffusion steps.

Action sequences live in normalized [-1, 1] units during diffusion; the
reverse-step posterior noise scale is sigma_k = sqrt(beta_k), with no noise
added at the final step k = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BETA_CAP = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    clip_sample: bool = True

    @property
    def num_steps(self) -> int:
        return len(self.betas)


def cosine_beta_schedule(num_steps: int, clip_sample: bool = True) -> NoiseSchedule:
    """squaredcos_cap_v2: alpha_bar(t) = f(t)/f(0), f(t) = cos^2(((t/K + 0.008)/1.008) * pi/2)."""
    if num_steps < 2:
        raise ValueError("need at least 2 diffusion steps")

    def f(t: float) -> float:
        return np.cos((t / num_steps + 0.008) / 1.008 * np.pi / 2.0) ** 2

    f0 = f(0.0)
    betas = np.array(
        [min(1.0 - f(k + 1.0) / f(float(k)), BETA_CAP) for k in range(num_steps)]
    )
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas), clip_sample=clip_sample)


def add_noise(clean: np.ndarray, noise: np.ndarray, k, sched: NoiseSchedule) -> np.ndarray:
    """Forward process: sqrt(abar_k) * clean + sqrt(1 - abar_k) * noise.

    k may be an int or, for batched inputs, an integer array broadcast over
    leading axes.
    """
    clean = np.asarray(clean, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if clean.shape != noise.shape:
        raise ValueError(f"shape mismatch: {clean.shape} vs {noise.shape}")
    abar = sched.alpha_bars[k]
    if np.ndim(abar) > 0:
        abar = np.reshape(abar, (-1,) + (1,) * (clean.ndim - 1))
    return np.sqrt(abar) * clean + np.sqrt(1.0 - abar) * noise


def denoise_step(
    noisy: np.ndarray,
    eps_hat: np.ndarray,
    k: int,
    sched: NoiseSchedule,
    rng: np.random.Generator | None = None,
    sigma_override: float | None = None,
) -> np.ndarray:
    """One reverse step from A^k to A^{k-1} given the predicted noise."""
    noisy = np.asarray(noisy, dtype=float)
    eps_hat = np.asarray(eps_hat, dtype=float)
    if noisy.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {noisy.shape} vs {eps_hat.shape}")
    if not 0 <= k < sched.num_steps:
        raise ValueError(f"step {k} out of range")
    out = (noisy - sched.betas[k] / np.sqrt(1.0 - sched.alpha_bars[k]) * eps_hat) / np.sqrt(sched.alphas[k])
    if k > 0:
        sigma = np.sqrt(sched.betas[k]) if sigma_override is None else sigma_override
        if sigma > 0.0:
            if rng is None:
                raise ValueError("rng required when adding reverse-process noise")
            out = out + sigma * rng.standard_normal(out.shape)
    if sched.clip_sample:
        out = np.clip(out, -1.0, 1.0)
    return out


def epsilon_loss(eps_true: np.ndarray, eps_pred: np.ndarray) -> float:
    """Mean squared error over all elements."""
    eps_true = np.asarray(eps_true, dtype=float)
    eps_pred = np.asarray(eps_pred, dtype=float)
    if eps_true.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch: {eps_true.shape} vs {eps_pred.shape}")
    if eps_true.size == 0:
        raise ValueError("empty batch")
    return float(np.mean((eps_true - eps_pred) ** 2))
