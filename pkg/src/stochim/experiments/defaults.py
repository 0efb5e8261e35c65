"""Default configurations of the six studies (the desk-scale reference runs)."""
from __future__ import annotations

from .config import ExperimentConfig

_STANDARD = dict(epsilon=0.01, M=32, N=10, G=64, nonlinearity="sin", c=1.0, delta=0.1, step=1e-4)

_DEFAULTS = {
    "gap": dict(
        eps_grid=[0.005, 0.01, 0.02, 0.03, 0.05, 0.1],
        N_grid=[1, 2, 5, 10],
        lip_grid=[0.0, 0.5, 1.0],
    ),
    "invariance": dict(_STANDARD, n_starts=10, times=[0.1, 0.5, 1.0], halving=True, seeds=[0]),
    "tracking": dict(_STANDARD, n_starts=20, n_linear=20, n_on_manifold=3, seeds=[0]),
    "delta-convergence": dict(
        epsilon=0.05, M=8, N=2, G=32, nonlinearity="sin", c=0.3, phi=[0.1], step=1e-3,
        seeds=[0, 1, 2, 3, 4], xi_points=5, R=1.0, densify=3,
        delta_grid=[0.5, 0.25, 0.125, 0.0625, 0.03125],
    ),
    "noise-stats": dict(
        seeds=list(range(100)), ou_lambda=1.0, ou_delta=1.0, noise_step=0.01, step=0.01,
        horizon=1000.0, burn_in=20.0, stat_horizons=[10.0, 100.0, 1000.0],
    ),
    "attractor": dict(_STANDARD, scheme="etd", n_samples=5, seeds=[0]),
}


def default_config(experiment: str, **over) -> ExperimentConfig:
    kw = dict(_DEFAULTS.get(experiment, {}))
    kw.update(over)
    return ExperimentConfig(experiment=experiment, **kw)
