"""Euler ODE / Euler-Maruyama samplers with classifier-free guidance variants.

Models are duck-typed: anything with ``forward(x_t, t, y)`` and a
``null_class`` attribute works (trained networks, the analytic oracle, stubs).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from deltafm.schedule import LINEAR, DomainError, Schedule

SAMPLER_KINDS = ("euler_ode", "euler_maruyama")
GUIDANCE_MODES = ("standard_cfg", "hat_cfg", "tilde_cfg")
_TOL = 1e-12


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "euler_maruyama"
    nfe: int = 50
    diffusion_scale: object = "sigma"  # "sigma", "zero" or a constant
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler {self.kind!r}; expected one of {SAMPLER_KINDS}")
        if int(self.nfe) < 1:
            raise ValueError("nfe must be >= 1")
        if isinstance(self.diffusion_scale, str):
            if self.diffusion_scale not in ("sigma", "zero"):
                raise ValueError(f"unknown diffusion scale {self.diffusion_scale!r}")
        elif float(self.diffusion_scale) < 0:
            raise ValueError("diffusion scale must be non-negative")


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance is applied only for ``sigma_low <= t <= sigma_high``."""

    enabled: bool = False
    w: float = 1.0
    sigma_low: float = 0.0
    sigma_high: float = 1.0
    lam: float = 0.0
    t_hat: object = None  # MeanTrajectory
    mode: str = "standard_cfg"

    def __post_init__(self):
        if self.mode not in GUIDANCE_MODES:
            raise ValueError(f"unknown guidance mode {self.mode!r}; expected one of {GUIDANCE_MODES}")
        if not 0.0 <= self.sigma_low <= self.sigma_high <= 1.0:
            raise ValueError("guidance interval must satisfy 0 <= sigma_low <= sigma_high <= 1")
        if self.w < 0:
            raise ValueError("guidance weight must be non-negative")
        if not 0.0 <= self.lam < 1.0:
            raise ValueError("lambda must lie in [0, 1)")


# guidance settings tuned for large-scale class-conditional image generation
DELTA_FM_PRESET = GuidanceConfig(enabled=True, w=1.85, sigma_low=0.0, sigma_high=0.65, mode="hat_cfg")
FM_PRESET = GuidanceConfig(enabled=True, w=1.75, sigma_low=0.0, sigma_high=0.75, mode="standard_cfg")
OFF = GuidanceConfig()


def preset(name: str, **overrides) -> GuidanceConfig:
    base = {"deltafm": DELTA_FM_PRESET, "fm": FM_PRESET}[name]
    return replace(base, **overrides)


def guided_velocity(model, x_t, t, y, guidance: GuidanceConfig = OFF, schedule: Schedule = LINEAR):
    v_c = model.forward(x_t, t, y)
    if not guidance.enabled:
        return v_c
    if guidance.mode != "standard_cfg" and guidance.t_hat is None:
        raise ValueError(f"{guidance.mode} needs a mean trajectory (t_hat)")
    inside = (guidance.sigma_low <= np.asarray(t)) & (np.asarray(t) <= guidance.sigma_high)
    if not np.any(inside):
        return v_c
    v_u = model.forward(x_t, t, model.null_class)
    w, lam = guidance.w, guidance.lam
    cfg = w * v_c + (1.0 - w) * v_u
    if guidance.mode == "standard_cfg":
        guided = cfg
    else:
        t_hat = guidance.t_hat.at(t, schedule)
        if guidance.mode == "hat_cfg":
            guided = (1.0 - lam) * cfg + lam * t_hat
        else:
            guided = (w + lam) * v_c - (1.0 - w) * v_u - lam * t_hat
    if np.ndim(inside) == 0:
        return guided
    return np.where(np.reshape(inside, (-1, 1)), guided, v_c)


def _check_step(t, dt):
    if not (-_TOL <= t <= 1.0 + _TOL and -_TOL <= t + dt <= 1.0 + _TOL):
        raise DomainError(f"step from t={t} by dt={dt} leaves [0, 1]")


def diffusion_coefficient(rule, t, schedule: Schedule = LINEAR):
    if rule == "sigma":
        return float(schedule.eval(t)[1])
    if rule == "zero":
        return 0.0
    return float(rule)


def step_ode(model, x, t, dt, y, guidance: GuidanceConfig = OFF, schedule: Schedule = LINEAR):
    _check_step(t, dt)
    if dt == 0:
        return np.array(x, dtype=np.float64, copy=True)
    return x + dt * guided_velocity(model, x, t, y, guidance, schedule)


def step_sde(model, x, t, dt, y, guidance: GuidanceConfig = OFF, schedule: Schedule = LINEAR, rng=None,
             diffusion="sigma", noise=None):
    """Euler-Maruyama step of dx = [v + (w_t/2) score] dt + sqrt(w_t) dW.

    The step that reaches t=1 is taken with the ODE rule because the score is
    singular there. With zero diffusion no random numbers are drawn. ``noise``
    replays a recorded standard-normal draw instead of sampling one.
    """
    _check_step(t, dt)
    if t >= 1.0:
        raise DomainError("stochastic step requires t < 1")
    w_t = diffusion_coefficient(diffusion, t, schedule)
    if t + dt >= 1.0 - _TOL or w_t == 0.0:
        return step_ode(model, x, t, dt, y, guidance, schedule)
    v = guided_velocity(model, x, t, y, guidance, schedule)
    drift = v + 0.5 * w_t * schedule.velocity_to_score(x, v, t)
    if noise is None:
        noise = rng.standard_normal(np.shape(x))
    return x + dt * drift + np.sqrt(w_t * dt) * noise


def time_grid(nfe: int) -> np.ndarray:
    return np.arange(nfe + 1) / nfe


def _rngs(seed):
    init_seq, step_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(step_seq)


def integrate(model, x0, y, config: SamplerConfig, guidance: GuidanceConfig = OFF, schedule: Schedule = LINEAR,
              rng=None, record=None):
    """Integrate states ``x0`` from t=0 to t=1; ``record(k, t, x)`` sees every grid state."""
    grid = time_grid(int(config.nfe))
    x = np.array(x0, dtype=np.float64, copy=True)
    if record is not None:
        record(0, 0.0, x)
    for k in range(len(grid) - 1):
        t, dt = grid[k], grid[k + 1] - grid[k]
        if config.kind == "euler_ode":
            x = step_ode(model, x, t, dt, y, guidance, schedule)
        else:
            x = step_sde(model, x, t, dt, y, guidance, schedule, rng, config.diffusion_scale)
        if record is not None:
            record(k + 1, grid[k + 1], x)
    return x


def sample(model, n: int, y, config: SamplerConfig = SamplerConfig(), guidance: GuidanceConfig = OFF,
           schedule: Schedule = LINEAR, dim: int | None = None):
    """``n`` samples of class ``y`` (``None`` for the null class) from fresh noise."""
    dim = dim or model.input_dim
    init_rng, step_rng = _rngs(config.seed)
    x0 = init_rng.standard_normal((n, dim))
    return integrate(model, x0, y, config, guidance, schedule, step_rng)


@dataclass
class TrajectoryRecord:
    step: int
    t: float
    state: np.ndarray
    expectation: np.ndarray


def trajectory(model, eps, y, config: SamplerConfig = SamplerConfig(), guidance: GuidanceConfig = OFF,
               schedule: Schedule = LINEAR, record_every: int = 5):
    """Integrate from ``eps`` recording every ``record_every`` steps plus both endpoints.

    Each record carries the state and the implied posterior-mean endpoint.
    """
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    nfe = int(config.nfe)
    _, step_rng = _rngs(config.seed)
    records = []

    def keep(k, t, x):
        if k % record_every == 0 or k == nfe:
            v = guided_velocity(model, x, t, y, guidance, schedule)
            records.append(TrajectoryRecord(k, float(t), x.copy(), schedule.denoise_expectation(x, v, t)))

    integrate(model, eps, y, config, guidance, schedule, step_rng, record=keep)
    return records


def paths(model, eps, y, config: SamplerConfig = SamplerConfig(), guidance: GuidanceConfig = OFF,
          schedule: Schedule = LINEAR):
    """All grid states as an array of shape (n, nfe + 1, d)."""
    _, step_rng = _rngs(config.seed)
    states = []
    integrate(model, eps, y, config, guidance, schedule, step_rng, record=lambda k, t, x: states.append(x.copy()))
    return np.stack(states, axis=1)


# -- trajectory dumps -------------------------------------------------------

def write_trajectories_csv(path, runs) -> None:
    """``runs`` is a list of ``(class_label, records)`` with batched record states.

    Columns: class,traj_id,step,t,state0..,expectation0..; traj_id is unique
    across the whole file.
    """
    import csv

    rows, dim, offset = [], None, 0
    for label, records in runs:
        n = records[0].state.shape[0]
        dim = records[0].state.shape[1]
        for rec in records:
            for i in range(n):
                rows.append([label, offset + i, rec.step, repr(rec.t)]
                            + [repr(float(v)) for v in rec.state[i]]
                            + [repr(float(v)) for v in rec.expectation[i]])
        offset += n
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "traj_id", "step", "t"] + [f"state{i}" for i in range(dim or 0)]
                   + [f"expectation{i}" for i in range(dim or 0)])
        w.writerows(rows)


def read_trajectories_csv(path):
    """Return ``{class: (states (n, steps, d), expectations, times)}``."""
    import csv

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:4] != ["class", "traj_id", "step", "t"]:
            raise ValueError(f"{path}: not a trajectory dump (bad header)")
        dim = (len(header) - 4) // 2
        by_traj = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4 + 2 * dim:
                raise ValueError(f"{path}: line {lineno}: expected {4 + 2 * dim} columns")
            key = (int(row[0]), int(row[1]))
            vals = [float(v) for v in row[4:]]
            by_traj.setdefault(key, []).append((int(row[2]), float(row[3]), vals[:dim], vals[dim:]))
    out = {}
    for label in sorted({k[0] for k in by_traj}):
        trajs = [sorted(v) for k, v in sorted(by_traj.items()) if k[0] == label]
        states = np.array([[r[2] for r in tr] for tr in trajs])
        exps = np.array([[r[3] for r in tr] for tr in trajs])
        times = np.array([r[1] for r in trajs[0]])
        out[label] = (states, exps, times)
    return out
