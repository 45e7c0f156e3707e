"""Sparse-reward continuous-control tasks with deterministic dynamics.

All step functions are pure: they take an ``EnvState`` and an action and
return a new state plus a ``StepResult``. Randomness only enters through
``reset`` (start-state jitter). Extrinsic rewards are always 0 or 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .numkit import NumkitError, Rng

ENV_IDS = ("plane2d", "mountaincar", "cartpole_swingup", "double_pendulum")
GRAVITY = 9.81


class EnvError(NumkitError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    id: str
    state_dim: int
    action_dim: int
    action_low: tuple[float, ...]
    action_high: tuple[float, ...]
    horizon: int = 500
    normalize: bool = False
    dt: float = 0.02
    # plane2d
    half_width: float = 2.5
    goal: tuple[float, float] = (1.0, 1.0)
    goal_radius: float = 0.05
    # cartpole
    cart_mass: float = 0.5
    pole_mass: float = 0.5
    pole_half_length: float = 0.5
    track_limit: float = 3.0
    # double pendulum
    link_mass: tuple[float, float] = (1.0, 1.0)
    link_length: tuple[float, float] = (1.0, 1.0)
    tip_tolerance: float = 0.1

    def __post_init__(self):
        if self.id not in ENV_IDS:
            raise EnvError(f"unknown environment {self.id!r}; choose from {ENV_IDS}")
        if self.horizon < 1:
            raise EnvError("horizon must be >= 1")
        lo = np.asarray(self.action_low, dtype=float)
        hi = np.asarray(self.action_high, dtype=float)
        if lo.shape != (self.action_dim,) or hi.shape != (self.action_dim,):
            raise EnvError("action bounds must have one entry per action dimension")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
            raise EnvError("action bounds must be finite with low < high")


def make_spec(env_id: str, **overrides) -> EnvSpec:
    base = {
        "plane2d": dict(state_dim=2, action_dim=2, action_low=(-0.01, -0.01), action_high=(0.01, 0.01)),
        "mountaincar": dict(state_dim=2, action_dim=1, action_low=(-1.0,), action_high=(1.0,)),
        "cartpole_swingup": dict(
            state_dim=4, action_dim=1, action_low=(-10.0,), action_high=(10.0,), normalize=True
        ),
        "double_pendulum": dict(
            state_dim=4, action_dim=1, action_low=(-1.0,), action_high=(1.0,), normalize=True
        ),
    }
    if env_id not in base:
        raise EnvError(f"unknown environment {env_id!r}; choose from {ENV_IDS}")
    return EnvSpec(id=env_id, **{**base[env_id], **overrides})


@dataclass
class EnvState:
    physical: np.ndarray
    steps_elapsed: int = 0


@dataclass
class StepResult:
    observation: np.ndarray
    reward_ext: float
    done: bool
    info: dict = field(default_factory=dict)


def wrap_angle(x: float) -> float:
    return (x + math.pi) % (2.0 * math.pi) - math.pi


def reset(spec: EnvSpec, rng: Rng) -> tuple[EnvState, np.ndarray]:
    if spec.id == "plane2d":
        phys = np.zeros(2)
    elif spec.id == "mountaincar":
        phys = np.array([rng.uniform(-0.6, -0.4), 0.0])
    elif spec.id == "cartpole_swingup":
        phys = np.array([0.0, math.pi, 0.0, 0.0]) + rng.uniform(-0.05, 0.05, 4)
        phys[1] = wrap_angle(phys[1])
    else:
        phys = np.array([math.pi, 0.0, 0.0, 0.0]) + rng.uniform(-0.05, 0.05, 4)
        phys[0] = wrap_angle(phys[0])
    return EnvState(phys, 0), observe(spec, phys)


def observe(spec: EnvSpec, phys: np.ndarray) -> np.ndarray:
    return np.array(phys, dtype=np.float64)


def clip_action(spec: EnvSpec, a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.shape != (spec.action_dim,):
        raise EnvError(f"{spec.id}: expected action of size {spec.action_dim}, got {a.shape}")
    return np.clip(a, spec.action_low, spec.action_high)


# -- 2D plane -----------------------------------------------------------------


def step_plane2d(spec: EnvSpec, st: EnvState, a) -> tuple[EnvState, StepResult]:
    a = clip_action(spec, a)
    B = spec.half_width
    pos = (st.physical + a + B) % (2.0 * B) - B
    dist = math.hypot(pos[0] - spec.goal[0], pos[1] - spec.goal[1])
    reached = dist < spec.goal_radius
    return _finish(spec, st, pos, 1.0 if reached else 0.0, reached, dist=dist)


# -- mountain car -------------------------------------------------------------

MC_POWER = 0.0015
MC_GRAVITY = 0.0025
MC_MAX_SPEED = 0.07
MC_MIN_X, MC_MAX_X = -1.2, 0.6
MC_GOAL_X = 0.45


def step_mountaincar(spec: EnvSpec, st: EnvState, a) -> tuple[EnvState, StepResult]:
    force = float(clip_action(spec, a)[0])
    x, v = float(st.physical[0]), float(st.physical[1])
    v += MC_POWER * force - MC_GRAVITY * math.cos(3.0 * x)
    v = min(max(v, -MC_MAX_SPEED), MC_MAX_SPEED)
    x += v
    x = min(max(x, MC_MIN_X), MC_MAX_X)
    if x == MC_MIN_X and v < 0:
        v = 0.0
    reached = x >= MC_GOAL_X
    return _finish(spec, st, np.array([x, v]), 1.0 if reached else 0.0, reached)


# -- cart-pole swing-up -------------------------------------------------------


def cartpole_accel(spec: EnvSpec, phys: np.ndarray, force: float) -> tuple[float, float]:
    """(cart accel, pole angular accel); the pole angle is 0 when upright."""
    _, beta, _, beta_dot = phys
    mc, mp, l = spec.cart_mass, spec.pole_mass, spec.pole_half_length
    total = mc + mp
    sin_b, cos_b = math.sin(beta), math.cos(beta)
    temp = (force + mp * l * beta_dot**2 * sin_b) / total
    beta_acc = (GRAVITY * sin_b - cos_b * temp) / (l * (4.0 / 3.0 - mp * cos_b**2 / total))
    x_acc = temp - mp * l * beta_acc * cos_b / total
    return x_acc, beta_acc


def cartpole_energy(spec: EnvSpec, phys: np.ndarray) -> float:
    _, beta, x_dot, beta_dot = phys
    mc, mp, l = spec.cart_mass, spec.pole_mass, spec.pole_half_length
    kinetic = (
        0.5 * (mc + mp) * x_dot**2
        + mp * l * x_dot * beta_dot * math.cos(beta)
        + 0.5 * (4.0 / 3.0) * mp * l**2 * beta_dot**2
    )
    return kinetic + mp * GRAVITY * l * math.cos(beta)


def cartpole_integrate(spec: EnvSpec, phys: np.ndarray, force: float, dt: float) -> np.ndarray:
    x, beta, x_dot, beta_dot = phys
    x_acc, beta_acc = cartpole_accel(spec, phys, force)
    # semi-implicit Euler: velocities first, positions from the new velocities
    x_dot += dt * x_acc
    beta_dot += dt * beta_acc
    return np.array([x + dt * x_dot, beta + dt * beta_dot, x_dot, beta_dot])


def step_cartpole_swingup(spec: EnvSpec, st: EnvState, a) -> tuple[EnvState, StepResult]:
    force = float(clip_action(spec, a)[0])
    phys = cartpole_integrate(spec, st.physical, force, spec.dt)
    phys[1] = wrap_angle(phys[1])
    upright = math.cos(phys[1]) > 0.9
    off_track = abs(phys[0]) > spec.track_limit
    return _finish(spec, st, phys, 1.0 if upright else 0.0, off_track)


# -- double pendulum ----------------------------------------------------------
# Physical state: (beta1, beta2, beta1_dot, beta2_dot). beta1 is the first link's
# angle from the upward vertical, beta2 the second joint's angle relative to link 1.
# Point masses sit at the link ends; the torque acts on the first joint.


def double_pendulum_accel(spec: EnvSpec, phys: np.ndarray, torque: float) -> tuple[float, float]:
    b1, b2, d1, d2 = phys
    m1, m2 = spec.link_mass
    l1, l2 = spec.link_length
    p1, p2 = b1, b1 + b2
    dp1, dp2 = d1, d1 + d2
    s12, c12 = math.sin(p1 - p2), math.cos(p1 - p2)
    m11 = (m1 + m2) * l1**2
    m12 = m2 * l1 * l2 * c12
    m22 = m2 * l2**2
    f1 = -m2 * l1 * l2 * s12 * dp2**2 + (m1 + m2) * GRAVITY * l1 * math.sin(p1) + torque
    f2 = m2 * l1 * l2 * s12 * dp1**2 + m2 * GRAVITY * l2 * math.sin(p2)
    det = m11 * m22 - m12 * m12
    ddp1 = (m22 * f1 - m12 * f2) / det
    ddp2 = (m11 * f2 - m12 * f1) / det
    return ddp1, ddp2 - ddp1


def double_pendulum_energy(spec: EnvSpec, phys: np.ndarray) -> float:
    b1, b2, d1, d2 = phys
    m1, m2 = spec.link_mass
    l1, l2 = spec.link_length
    p1, p2 = b1, b1 + b2
    dp1, dp2 = d1, d1 + d2
    kinetic = 0.5 * (m1 + m2) * l1**2 * dp1**2 + 0.5 * m2 * l2**2 * dp2**2
    kinetic += m2 * l1 * l2 * dp1 * dp2 * math.cos(p1 - p2)
    potential = (m1 + m2) * GRAVITY * l1 * math.cos(p1) + m2 * GRAVITY * l2 * math.cos(p2)
    return kinetic + potential


def double_pendulum_integrate(spec: EnvSpec, phys: np.ndarray, torque: float, dt: float) -> np.ndarray:
    b1, b2, d1, d2 = phys
    a1, a2 = double_pendulum_accel(spec, phys, torque)
    d1 += dt * a1
    d2 += dt * a2
    return np.array([b1 + dt * d1, b2 + dt * d2, d1, d2])


def tip_distance(spec: EnvSpec, phys: np.ndarray) -> float:
    b1, b2 = phys[0], phys[1]
    l1, l2 = spec.link_length
    tx = l1 * math.sin(b1) + l2 * math.sin(b1 + b2)
    ty = l1 * math.cos(b1) + l2 * math.cos(b1 + b2)
    return math.hypot(tx, ty - (l1 + l2))


def step_double_pendulum(spec: EnvSpec, st: EnvState, a) -> tuple[EnvState, StepResult]:
    torque = float(clip_action(spec, a)[0])
    phys = double_pendulum_integrate(spec, st.physical, torque, spec.dt)
    phys[0] = wrap_angle(phys[0])
    phys[1] = wrap_angle(phys[1])
    dist = tip_distance(spec, phys)
    return _finish(spec, st, phys, 1.0 if dist < spec.tip_tolerance else 0.0, False, dist=dist)


# -- common -------------------------------------------------------------------


def _finish(spec, st, phys, reward, terminal, **info) -> tuple[EnvState, StepResult]:
    steps = st.steps_elapsed + 1
    timeout = steps >= spec.horizon
    info = {"terminal": float(terminal), "timeout": float(timeout and not terminal), **info}
    new = EnvState(phys, steps)
    return new, StepResult(observe(spec, phys), float(reward), bool(terminal or timeout), info)


_STEPS = {
    "plane2d": step_plane2d,
    "mountaincar": step_mountaincar,
    "cartpole_swingup": step_cartpole_swingup,
    "double_pendulum": step_double_pendulum,
}


def step(spec: EnvSpec, st: EnvState, a) -> tuple[EnvState, StepResult]:
    if st.steps_elapsed >= spec.horizon:
        raise EnvError(f"{spec.id}: episode already at horizon {spec.horizon}; reset first")
    return _STEPS[spec.id](spec, st, a)


def scale_action(spec: EnvSpec, a_unit: np.ndarray) -> np.ndarray:
    """Map a policy action from [-1, 1] onto the environment's action box."""
    u = np.clip(np.asarray(a_unit, dtype=np.float64), -1.0, 1.0)
    lo = np.asarray(spec.action_low)
    hi = np.asarray(spec.action_high)
    return lo + 0.5 * (u + 1.0) * (hi - lo)


# -- observation normaliser ---------------------------------------------------

NORM_STD_FLOOR = 1e-8
NORM_CLIP = 10.0


@dataclass
class ObsNormalizer:
    """Running mean/std (Welford). ``normalize`` uses statistics from before ``o``."""

    dim: int
    count: int = 0
    mean: np.ndarray = None
    m2: np.ndarray = None

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.m2 is None:
            self.m2 = np.zeros(self.dim)

    @property
    def std(self) -> np.ndarray:
        if self.count < 1:
            return np.zeros(self.dim)
        return np.sqrt(self.m2 / self.count)

    def apply(self, o) -> np.ndarray:
        """Normalise with the current statistics, without updating them."""
        o = np.asarray(o, dtype=np.float64)
        if self.count == 0:
            return np.zeros_like(o)
        out = (o - self.mean) / np.maximum(self.std, NORM_STD_FLOOR)
        return np.clip(out, -NORM_CLIP, NORM_CLIP)

    def update(self, o) -> None:
        o = np.asarray(o, dtype=np.float64)
        if o.shape != (self.dim,):
            raise EnvError(f"normaliser expects dimension {self.dim}, got {o.shape}")
        self.count += 1
        d = o - self.mean
        self.mean = self.mean + d / self.count
        self.m2 = self.m2 + d * (o - self.mean)

    def copy(self) -> "ObsNormalizer":
        return replace(self, mean=self.mean.copy(), m2=self.m2.copy())


def normalize(norm: ObsNormalizer, o) -> np.ndarray:
    """Normalise ``o`` with the statistics seen so far, then fold it in."""
    out = norm.apply(o)
    norm.update(o)
    return out
