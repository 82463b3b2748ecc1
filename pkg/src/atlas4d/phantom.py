"""Synthetic 4D phantom: a growing ellipsoid with an inner structure.

The clean series follows smooth linear radius curves; the noisy series
perturbs the inner-structure radius independently at every time point
(structural noise) and adds Gaussian voxel noise (intensity noise). This
makes temporal-denoising claims testable: the clean geometry is the known
ground truth and the per-time jitter mimics anatomically implausible
frame-to-frame variation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume_io import LabelVolume, Volume3D, Volume4D

# Mild anisotropy of the outer shell keeps the geometry non-spherical; the
# inner structure is a centered sphere so jitter has room in both directions.
_OUTER_ANISOTROPY = (1.0, 0.92, 0.86)
_INNER_OFFSET_VOXELS = (0.0, 0.0, 0.0)


@dataclass
class PhantomConfig:
    dims: tuple[int, int, int] = (32, 32, 32)
    n_times: int = 10
    time_start: float = 21.0
    time_end: float = 30.0
    outer_radius: tuple[float, float] = (10.0, 0.3)   # (voxels at t0, voxels/week)
    inner_radius: tuple[float, float] = (4.6, 0.3)
    levels: tuple[float, float, float] = (0.0, 0.5, 1.0)  # background, tissue, inner
    edge_width: float = 1.8  # voxels of smooth transition at each boundary
    structural_jitter_sigma: float = 0.0
    intensity_noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_times < 2:
            raise ValueError("need at least 2 time points")
        if self.time_end <= self.time_start:
            raise ValueError("time_end must exceed time_start")
        if self.structural_jitter_sigma < 0 or self.intensity_noise_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")
        if self.edge_width <= 0:
            raise ValueError("edge_width must be positive")

    def times(self) -> np.ndarray:
        return np.linspace(self.time_start, self.time_end, self.n_times)

    def outer_at(self, t: float) -> float:
        return self.outer_radius[0] + self.outer_radius[1] * (t - self.time_start)

    def inner_at(self, t: float) -> float:
        return self.inner_radius[0] + self.inner_radius[1] * (t - self.time_start)


def _smoothstep(u: np.ndarray) -> np.ndarray:
    s = np.clip(u, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def _compose(cfg: PhantomConfig, t: float, inner_r: float) -> tuple[np.ndarray, np.ndarray]:
    """Intensity volume and inner-structure membership for one time point."""
    nx, ny, nz = cfg.dims
    cx, cy, cz = ((n - 1) / 2.0 for n in cfg.dims)
    x = np.arange(nx)[:, None, None] - cx
    y = np.arange(ny)[None, :, None] - cy
    z = np.arange(nz)[None, None, :] - cz

    r_out = cfg.outer_at(t)
    ax, ay, az = (a * r_out for a in _OUTER_ANISOTROPY)
    rho = np.sqrt((x / ax) ** 2 + (y / ay) ** 2 + (z / az) ** 2)
    s_out = _smoothstep((1.0 - rho) * r_out / cfg.edge_width + 0.5)

    ox, oy, oz = _INNER_OFFSET_VOXELS
    d_in = np.sqrt((x - ox) ** 2 + (y - oy) ** 2 + (z - oz) ** 2)
    s_in = _smoothstep((inner_r - d_in) / cfg.edge_width + 0.5)

    bg, tissue, inner = cfg.levels
    vol = bg + (tissue - bg) * s_out + (inner - tissue) * s_in
    return vol, s_in


def _check_geometry(cfg: PhantomConfig) -> None:
    half = min(cfg.dims) / 2.0
    offset = float(np.linalg.norm(_INNER_OFFSET_VOXELS))
    for t in cfg.times():
        r_out = cfg.outer_at(t)
        r_in = cfg.inner_at(t)
        if r_out * max(_OUTER_ANISOTROPY) + cfg.edge_width + 1.0 > half:
            raise ValueError(f"phantom radius escapes the grid at t={t:g}")
        if r_in <= 0:
            raise ValueError(f"inner radius not positive at t={t:g}")
        if r_in + offset + cfg.edge_width + 0.5 > r_out * min(_OUTER_ANISOTROPY):
            raise ValueError(f"inner structure escapes the outer shell at t={t:g}")


def generate(cfg: PhantomConfig) -> tuple[Volume4D, Volume4D, list[LabelVolume]]:
    """Build (clean, noisy, labels) for the configured phantom.

    The clean series depends only on geometry, never on the noise draws.
    Labels mark voxels fully inside the clean inner structure, where the
    clean intensity equals the inner tissue level exactly. Jittered inner
    radii are clamped so the noisy geometry stays inside the outer shell.
    """
    _check_geometry(cfg)
    times = cfg.times()
    spacing = (1.0, 1.0, 1.0)

    jitter_rng = np.random.default_rng([cfg.seed, 0])
    jitter = jitter_rng.normal(0.0, cfg.structural_jitter_sigma, cfg.n_times)
    offset = float(np.linalg.norm(_INNER_OFFSET_VOXELS))

    clean_vols, noisy_vols, labels = [], [], []
    for k, t in enumerate(times):
        clean, s_in = _compose(cfg, t, cfg.inner_at(t))
        clean_vols.append(Volume3D(cfg.dims, spacing, clean))
        labels.append(
            LabelVolume(cfg.dims, spacing, (s_in >= 1.0).astype(np.int64), n_classes=1)
        )

        r_max = cfg.outer_at(t) * min(_OUTER_ANISOTROPY) - offset - cfg.edge_width - 1.0
        r_noisy = float(np.clip(cfg.inner_at(t) + jitter[k], 0.8, r_max))
        noisy, _ = _compose(cfg, t, r_noisy)
        if cfg.intensity_noise_sigma > 0:
            noise_rng = np.random.default_rng([cfg.seed, 1, k])
            noisy = noisy + noise_rng.normal(0.0, cfg.intensity_noise_sigma, cfg.dims)
        noisy_vols.append(Volume3D(cfg.dims, spacing, noisy))

    clean_series = Volume4D(clean_vols, times)
    noisy_series = Volume4D(noisy_vols, times.copy())
    return clean_series, noisy_series, labels
