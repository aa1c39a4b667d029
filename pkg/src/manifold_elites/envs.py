"""Deterministic 2D physics tasks with trajectory behaviour descriptors.

Two environments ship: a bounded air-hockey arena where a striker knocks a
puck around (wall-bounce descriptors), and a flat-ground kicker where a point
agent launches a dropped ball (ballistic descriptors). Both use a fixed-step
float64 integrator with no environmental randomness: identical parameters
give bit-identical trajectories regardless of thread count.

Integration is semi-implicit Euler except for the ball in flight, which uses
the exact constant-acceleration step with in-step apex and ground-crossing
resolution so ballistic statistics match the closed-form projectile solution
to rounding error rather than O(dt).

Rollouts are evaluated through a batched core; the single-policy entry points
are the batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .archive import BdSpec, CategoricalDim, ContinuousDim
from .errors import ConfigurationError
from .nets import MlpSpec, ParamVector, mlp

DT = 0.05
EPISODE_LEN = 500
ACTUATION_WINDOW = 100

# striker arena
ARENA = 100.0
PUCK_RADIUS = 2.5
STRIKER_RADIUS = 2.5
PUCK_DAMPING = 0.995          # per-step velocity factor after the window
STRIKER_ACTION_GAIN = 5.0     # velocity command per unit of policy output
STRIKER_MAX_SPEED = 15.0
STRIKER_MAX_SPIN = np.pi
PUCK_REST_SPEED = 1e-4
STRIKER_START = (50.0, 20.0)
PUCK_START = (50.0, 30.0)

# kicker ground
GRAVITY = 10.0
BALL_DROP_HEIGHT = 3.0
BALL_START_X = 1.0
AGENT_START_X = 0.0
AGENT_FORCE_GAIN = 5.0
AGENT_MAX_FORCE = 20.0
KICK_GAIN = 20.0              # impulse rate per unit of policy output
KICK_MAX = 60.0
KICK_REACH_X = 1.0
KICK_REACH_Y = 1.5
# the kick contact point sits below ground level so a grounded ball is
# scooped upward instead of being driven into the ground
KICK_CONTACT_HEIGHT = -0.5
AGENT_DAMPING = 0.9

KICKER_X_RANGE = (-60.0, 60.0)
KICKER_Y_RANGE = (0.0, 18.0)

MIX_SCALE_FACTOR = 100.0
STRIKER_MIX_INDICES = (0, 1, 6, 7, 8, 9)   # striker x/y, puck x/y, puck vx/vy
KICKER_MIX_INDICES = (0, 2, 3, 4, 5)       # agent x, ball x/y, ball vx/vy

# wall ids, also the event payloads: 0=S (y=0), 1=E (x=100), 2=N (y=100), 3=W (x=0)
WALL_SOUTH, WALL_EAST, WALL_NORTH, WALL_WEST = 0, 1, 2, 3


def env_constants() -> dict:
    """Physics constants echoed into run manifests."""
    return {
        "dt": DT, "episode_len": EPISODE_LEN, "actuation_window": ACTUATION_WINDOW,
        "arena": ARENA, "puck_radius": PUCK_RADIUS, "striker_radius": STRIKER_RADIUS,
        "puck_damping": PUCK_DAMPING, "striker_action_gain": STRIKER_ACTION_GAIN,
        "striker_max_speed": STRIKER_MAX_SPEED,
        "striker_max_spin": STRIKER_MAX_SPIN, "puck_rest_speed": PUCK_REST_SPEED,
        "striker_start": STRIKER_START, "puck_start": PUCK_START,
        "gravity": GRAVITY, "ball_drop_height": BALL_DROP_HEIGHT,
        "ball_start_x": BALL_START_X, "agent_start_x": AGENT_START_X,
        "agent_force_gain": AGENT_FORCE_GAIN, "agent_max_force": AGENT_MAX_FORCE,
        "kick_gain": KICK_GAIN, "kick_max": KICK_MAX,
        "kick_reach_x": KICK_REACH_X, "kick_reach_y": KICK_REACH_Y,
        "kick_contact_height": KICK_CONTACT_HEIGHT, "agent_damping": AGENT_DAMPING,
        "kicker_x_range": KICKER_X_RANGE, "kicker_y_range": KICKER_Y_RANGE,
        "mix_scale_factor": MIX_SCALE_FACTOR,
    }


@dataclass(frozen=True)
class EnvSpec:
    name: str
    variant: str
    obs_dim: int
    act_dim: int
    episode_len: int
    actuation_window: int
    bd_spec: BdSpec
    mix_scale_indices: tuple[int, ...]
    policy_spec: MlpSpec


@dataclass
class Trajectory:
    """Rollout record: per-step observations, tagged events, summary stats."""

    states: np.ndarray
    events: list[tuple]
    degenerate: bool
    summary: dict

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


def striker_policy_spec() -> MlpSpec:
    return mlp([14, 32, 32, 3], hidden="tanh", output="linear")


def kicker_policy_spec() -> MlpSpec:
    return mlp([7, 32, 32, 2], hidden="tanh", output="linear")


def apply_mix_scale(obs: np.ndarray, spec: EnvSpec) -> np.ndarray:
    """Multiply the exteroceptive observation entries by the mix factor."""
    out = np.asarray(obs, dtype=np.float64).copy()
    if spec.mix_scale_indices:
        out[..., list(spec.mix_scale_indices)] *= MIX_SCALE_FACTOR
    return out


def _policy_weights(spec: MlpSpec, values: np.ndarray):
    """Stacked per-layer weights (B, n_in, n_out) and biases (B, n_out)."""
    layers = []
    off = 0
    for n_in, n_out in spec.layer_shapes():
        w = values[:, off:off + n_in * n_out].reshape(-1, n_in, n_out)
        off += n_in * n_out
        b = values[:, off:off + n_out]
        off += n_out
        layers.append((w, b))
    return layers


def _policy_batch(layers, acts, obs: np.ndarray) -> np.ndarray:
    h = obs
    for (w, b), act in zip(layers, acts):
        h = np.matmul(h[:, None, :], w)[:, 0] + b
        if act == "tanh":
            h = np.tanh(h)
    return h


def _stack_values(thetas: Sequence, policy: MlpSpec) -> np.ndarray:
    rows = []
    for theta in thetas:
        if isinstance(theta, ParamVector):
            if theta.spec.layer_sizes != policy.layer_sizes:
                raise ConfigurationError(
                    f"policy parameters built for {theta.spec.layer_sizes}, "
                    f"environment expects {policy.layer_sizes}")
            rows.append(theta.values)
        else:
            v = np.asarray(theta, dtype=np.float64)
            if v.shape != (policy.param_count,):
                raise ConfigurationError(
                    f"policy vector has shape {v.shape}, expected "
                    f"({policy.param_count},)")
            rows.append(v)
    return np.stack(rows)


# ---------------------------------------------------------------------------
# striker


def _striker_batch(thetas: Sequence, mix_scale: bool = False) -> list[Trajectory]:
    policy = striker_policy_spec()
    values = _stack_values(thetas, policy)
    b = values.shape[0]
    layers = _policy_weights(policy, values)
    acts = policy.activations

    sx = np.full(b, STRIKER_START[0])
    sy = np.full(b, STRIKER_START[1])
    sang = np.zeros(b)
    svx = np.zeros(b)
    svy = np.zeros(b)
    svang = np.zeros(b)
    px = np.full(b, PUCK_START[0])
    py = np.full(b, PUCK_START[1])
    pvx = np.zeros(b)
    pvy = np.zeros(b)

    active = np.ones(b, dtype=bool)
    degenerate = np.zeros(b, dtype=bool)
    prev_contact = np.zeros(b, dtype=bool)
    done_step = np.full(b, EPISODE_LEN - 1, dtype=int)
    final_px = px.copy()
    final_py = py.copy()
    states = np.zeros((b, EPISODE_LEN, 14))
    events: list[list[tuple]] = [[] for _ in range(b)]
    wall_seq: list[list[int]] = [[] for _ in range(b)]

    contact_r = STRIKER_RADIUS + PUCK_RADIUS
    lo, hi = PUCK_RADIUS, ARENA - PUCK_RADIUS
    slo, shi = STRIKER_RADIUS, ARENA - STRIKER_RADIUS

    for t in range(EPISODE_LEN):
        obs = np.empty((b, 14))
        obs[:, 0] = sx
        obs[:, 1] = sy
        obs[:, 2] = sang
        obs[:, 3] = svx
        obs[:, 4] = svy
        obs[:, 5] = svang
        obs[:, 6] = px
        obs[:, 7] = py
        obs[:, 8] = pvx
        obs[:, 9] = pvy
        obs[:, 10] = py          # distance to south wall
        obs[:, 11] = ARENA - px  # east
        obs[:, 12] = ARENA - py  # north
        obs[:, 13] = px          # west
        if mix_scale:
            obs[:, list(STRIKER_MIX_INDICES)] *= MIX_SCALE_FACTOR
        if active.all():
            states[:, t] = obs
        else:
            states[active, t] = obs[active]

        if t < ACTUATION_WINDOW:
            a = _policy_batch(layers, acts, obs)
            bad = ~np.isfinite(a).all(axis=1)
            degenerate |= bad
            a[degenerate] = 0.0
            svx = np.clip(a[:, 0] * STRIKER_ACTION_GAIN,
                          -STRIKER_MAX_SPEED, STRIKER_MAX_SPEED)
            svy = np.clip(a[:, 1] * STRIKER_ACTION_GAIN,
                          -STRIKER_MAX_SPEED, STRIKER_MAX_SPEED)
            svang = np.clip(a[:, 2], -STRIKER_MAX_SPIN, STRIKER_MAX_SPIN)
        elif t == ACTUATION_WINDOW:
            svx = np.zeros(b)
            svy = np.zeros(b)
            svang = np.zeros(b)

        sx = np.clip(sx + svx * DT, slo, shi)
        sy = np.clip(sy + svy * DT, slo, shi)
        sang = sang + svang * DT

        pvx = pvx * PUCK_DAMPING
        pvy = pvy * PUCK_DAMPING

        dx = px - sx
        dy = py - sy
        d2 = dx * dx + dy * dy
        contact = (d2 < contact_r * contact_r) & active
        if contact.any():
            d = np.sqrt(np.where(contact, d2, 1.0))
            safe = d > 1e-9
            nx = np.where(safe, dx / d, 0.0)
            ny = np.where(safe, dy / d, 1.0)
            vns = svx * nx + svy * ny
            vnp = pvx * nx + pvy * ny
            hit = contact & (vns > vnp)
            pvx = np.where(hit, pvx + (vns - vnp) * nx, pvx)
            pvy = np.where(hit, pvy + (vns - vnp) * ny, pvy)
            px = np.where(contact, sx + nx * contact_r, px)
            py = np.where(contact, sy + ny * contact_r, py)
            for i in np.flatnonzero(contact & ~prev_contact):
                events[i].append(("contact", t, 0))
        prev_contact = contact

        px = px + pvx * DT
        py = py + pvy * DT

        # mirror reflection of the overshoot = exact in-step crossing for
        # constant within-step velocity; restitution 1
        for crossed, wall in (
            (active & (px < lo), WALL_WEST),
            (active & (px > hi), WALL_EAST),
            (active & (py < lo), WALL_SOUTH),
            (active & (py > hi), WALL_NORTH),
        ):
            if crossed.any():
                if wall == WALL_WEST:
                    px = np.where(crossed, 2.0 * lo - px, px)
                    pvx = np.where(crossed, -pvx, pvx)
                elif wall == WALL_EAST:
                    px = np.where(crossed, 2.0 * hi - px, px)
                    pvx = np.where(crossed, -pvx, pvx)
                elif wall == WALL_SOUTH:
                    py = np.where(crossed, 2.0 * lo - py, py)
                    pvy = np.where(crossed, -pvy, pvy)
                else:
                    py = np.where(crossed, 2.0 * hi - py, py)
                    pvy = np.where(crossed, -pvy, pvy)
                for i in np.flatnonzero(crossed):
                    events[i].append(("wall", t, wall))
                    wall_seq[i].append(wall)
        px = np.clip(px, lo, hi)
        py = np.clip(py, lo, hi)

        if t >= ACTUATION_WINDOW:
            speed2 = pvx * pvx + pvy * pvy
            newly_done = active & (speed2 < PUCK_REST_SPEED * PUCK_REST_SPEED)
            if newly_done.any():
                done_step[newly_done] = t
                final_px[newly_done] = px[newly_done]
                final_py[newly_done] = py[newly_done]
                active &= ~newly_done
                if not active.any():
                    break
    if active.any():
        final_px[active] = px[active]
        final_py[active] = py[active]

    out = []
    for i in range(b):
        seq = _dedup_consecutive(wall_seq[i])
        out.append(Trajectory(
            states=states[i, :done_step[i] + 1].copy(),
            events=events[i],
            degenerate=bool(degenerate[i]),
            summary={
                "final_puck_x": float(final_px[i]),
                "final_puck_y": float(final_py[i]),
                "wall_seq": tuple(seq),
                "steps": int(done_step[i] + 1),
            }))
    return out


def _dedup_consecutive(seq: Sequence[int]) -> list[int]:
    out: list[int] = []
    for w in seq:
        if not out or out[-1] != w:
            out.append(w)
    return out


def wall_combo_label(wall_seq: Sequence[int]) -> int:
    """17-way wall-bounce label from the deduplicated hit sequence.

    0 = no wall; 1..4 = single wall S/E/N/W; 5..16 = ordered
    (first, second) pairs of distinct walls: label = 5 + 3*first + rank of
    second among the other three walls. Only the first two distinct-in-
    succession hits matter.
    """
    seq = _dedup_consecutive(list(wall_seq))
    if not seq:
        return 0
    if len(seq) == 1:
        return 1 + seq[0]
    a, b = seq[0], seq[1]
    rank = b if b < a else b - 1
    return 5 + 3 * a + rank


def striker_rollout(theta, mix_scale: bool = False) -> Trajectory:
    return _striker_batch([theta], mix_scale=mix_scale)[0]


def striker_bd_spec() -> BdSpec:
    return BdSpec((ContinuousDim(0.0, ARENA, 30), ContinuousDim(0.0, ARENA, 30),
                   CategoricalDim(17)))


def striker_bd(traj: Trajectory) -> tuple:
    """(final puck x, final puck y, wall-combo label) on the 30x30x17 grid."""
    s = traj.summary
    return (s["final_puck_x"], s["final_puck_y"], wall_combo_label(s["wall_seq"]))


def striker_small_bd_spec() -> BdSpec:
    return BdSpec((ContinuousDim(0.0, ARENA, 10), ContinuousDim(0.0, ARENA, 10),
                   CategoricalDim(5)))


def striker_small_bd(traj: Trajectory) -> tuple:
    """Reduced descriptor: position on a 10x10 grid plus first wall hit."""
    s = traj.summary
    first = 1 + s["wall_seq"][0] if s["wall_seq"] else 0
    return (s["final_puck_x"], s["final_puck_y"], first)


# ---------------------------------------------------------------------------
# kicker


def _ball_flight_step(bx, by, bvx, bvy):
    """One exact constant-acceleration step of free flight.

    Returns (x_new, y_new, vy_new, peaked, apex, landing, x_land): `peaked`
    flags an in-step apex at height `apex`; `landing` flags an in-step ground
    crossing resolved exactly at `x_land`.
    """
    y_new = by + bvy * DT - 0.5 * GRAVITY * DT * DT
    vy_new = bvy - GRAVITY * DT
    x_new = bx + bvx * DT
    peaked = (bvy > 0.0) & (vy_new <= 0.0)
    apex = by + bvy * bvy / (2.0 * GRAVITY)
    landing = y_new < 0.0
    disc = np.sqrt(np.maximum(bvy * bvy + 2.0 * GRAVITY * by, 0.0))
    x_land = bx + bvx * (bvy + disc) / GRAVITY
    return x_new, y_new, vy_new, peaked, apex, landing, x_land


def ballistic_flight(x0: float, y0: float, vx: float, vy: float,
                     max_steps: int = 100_000) -> tuple[float, float]:
    """Fly one ball through the environment's integrator until it lands.

    Returns (landing x, maximum height). Drives the same stepping code the
    rollouts use; intended for oracle tests and debugging.
    """
    bx = np.array([float(x0)])
    by = np.array([float(y0)])
    bvx = np.array([float(vx)])
    bvy = np.array([float(vy)])
    max_y = max(float(y0), 0.0)
    for _ in range(max_steps):
        x_new, y_new, vy_new, peaked, apex, landing, x_land = _ball_flight_step(
            bx, by, bvx, bvy)
        if peaked[0]:
            max_y = max(max_y, float(apex[0]))
        if landing[0]:
            return float(x_land[0]), max_y
        bx, by, bvy = x_new, y_new, vy_new
        max_y = max(max_y, float(by[0]))
    raise RuntimeError("ball never landed")


def _kicker_batch(thetas: Sequence, mix_scale: bool = False) -> list[Trajectory]:
    policy = kicker_policy_spec()
    values = _stack_values(thetas, policy)
    b = values.shape[0]
    layers = _policy_weights(policy, values)
    acts = policy.activations

    ax = np.full(b, AGENT_START_X)
    avx = np.zeros(b)
    bx = np.full(b, BALL_START_X)
    by = np.full(b, BALL_DROP_HEIGHT)
    bvx = np.zeros(b)
    bvy = np.zeros(b)
    landed = np.zeros(b, dtype=bool)
    max_y = np.full(b, BALL_DROP_HEIGHT)

    active = np.ones(b, dtype=bool)
    degenerate = np.zeros(b, dtype=bool)
    done_step = np.full(b, EPISODE_LEN - 1, dtype=int)
    final_bx = bx.copy()
    n_kicks = np.zeros(b, dtype=int)
    states = np.zeros((b, EPISODE_LEN, 7))
    events: list[list[tuple]] = [[] for _ in range(b)]

    for t in range(EPISODE_LEN):
        contact = (np.abs(bx - ax) <= KICK_REACH_X) & (by <= KICK_REACH_Y)
        obs = np.empty((b, 7))
        obs[:, 0] = ax
        obs[:, 1] = avx
        obs[:, 2] = bx
        obs[:, 3] = by
        obs[:, 4] = bvx
        obs[:, 5] = bvy
        obs[:, 6] = contact.astype(np.float64)
        if mix_scale:
            obs[:, list(KICKER_MIX_INDICES)] *= MIX_SCALE_FACTOR
        if active.all():
            states[:, t] = obs
        else:
            states[active, t] = obs[active]

        if t < ACTUATION_WINDOW:
            a = _policy_batch(layers, acts, obs)
            bad = ~np.isfinite(a).all(axis=1)
            degenerate |= bad
            a[degenerate] = 0.0
            force = np.clip(a[:, 0] * AGENT_FORCE_GAIN,
                            -AGENT_MAX_FORCE, AGENT_MAX_FORCE)
            kick = np.clip(a[:, 1] * KICK_GAIN, 0.0, KICK_MAX)
        else:
            force = np.zeros(b)
            kick = np.zeros(b)

        avx = (avx + force * DT) * AGENT_DAMPING
        ax = ax + avx * DT

        kicking = contact & (kick > 0.0) & active
        if kicking.any():
            # impulse direction: from the agent's contact point to the ball,
            # so kick timing along the fall controls the launch angle
            dirx = bx - ax
            diry = by - KICK_CONTACT_HEIGHT
            norm = np.sqrt(dirx * dirx + diry * diry)
            ok = norm > 1e-9
            safe = np.where(ok, norm, 1.0)
            dirx = np.where(ok, dirx / safe, 0.0)
            diry = np.where(ok, diry / safe, 1.0)
            bvx = np.where(kicking, bvx + dirx * kick * DT, bvx)
            bvy = np.where(kicking, bvy + diry * kick * DT, bvy)
            landed = landed & ~kicking
            for i in np.flatnonzero(kicking):
                events[i].append(("kick", t, float(kick[i])))
                n_kicks[i] += 1

        flying = ~landed
        if flying.any():
            x_new, y_new, vy_new, peaked, apex, landing, x_land = \
                _ball_flight_step(bx, by, bvx, bvy)
            peaked &= flying
            landing &= flying
            max_y = np.where(peaked, np.maximum(max_y, apex), max_y)
            max_y = np.where(flying, np.maximum(max_y, np.maximum(by, y_new)), max_y)
            if landing.any():
                bx = np.where(landing, x_land, np.where(flying, x_new, bx))
                by = np.where(landing, 0.0, np.where(flying, y_new, by))
                bvx = np.where(landing, 0.0, bvx)
                bvy = np.where(landing, 0.0, np.where(flying, vy_new, bvy))
                landed |= landing
                for i in np.flatnonzero(landing & active):
                    events[i].append(("land", t, float(bx[i])))
            else:
                bx = np.where(flying, x_new, bx)
                by = np.where(flying, y_new, by)
                bvy = np.where(flying, vy_new, bvy)

        if t >= ACTUATION_WINDOW:
            newly_done = active & landed
            if newly_done.any():
                done_step[newly_done] = t
                final_bx[newly_done] = bx[newly_done]
                active &= ~newly_done
                if not active.any():
                    break
    if active.any():
        final_bx[active] = bx[active]

    out = []
    for i in range(b):
        out.append(Trajectory(
            states=states[i, :done_step[i] + 1].copy(),
            events=events[i],
            degenerate=bool(degenerate[i]),
            summary={
                "final_ball_x": float(final_bx[i]),
                "max_ball_y": float(max_y[i]),
                "n_kicks": int(n_kicks[i]),
                "steps": int(done_step[i] + 1),
            }))
    return out


def kicker_rollout(theta, mix_scale: bool = False) -> Trajectory:
    return _kicker_batch([theta], mix_scale=mix_scale)[0]


def kicker_bd_spec() -> BdSpec:
    return BdSpec((ContinuousDim(*KICKER_X_RANGE, 200),
                   ContinuousDim(*KICKER_Y_RANGE, 50)))


def kicker_bd(traj: Trajectory) -> tuple:
    """(final ball x, max ball height) on the 200x50 grid."""
    s = traj.summary
    return (s["final_ball_x"], s["max_ball_y"])


def kicker_small_bd_spec() -> BdSpec:
    return BdSpec((ContinuousDim(*KICKER_X_RANGE, 40),
                   ContinuousDim(*KICKER_Y_RANGE, 10)))


kicker_small_bd = kicker_bd


def bipedal_walker_bd_spec() -> BdSpec:
    """4-D gait descriptor grid, instantiable for config-level checks only."""
    return BdSpec((ContinuousDim(0.0, 1.0, 5),        # mean hull height
                   ContinuousDim(-100.0, 100.0, 100),  # final hull x
                   ContinuousDim(0.0, 1.0, 5),        # left duty factor
                   ContinuousDim(0.0, 1.0, 5)))       # right duty factor


# ---------------------------------------------------------------------------
# registry


class Env:
    """One concrete environment: spec plus rollout and descriptor functions."""

    def __init__(self, spec: EnvSpec, batch_fn, bd_fn):
        self.spec = spec
        self._batch_fn = batch_fn
        self._bd_fn = bd_fn

    def rollout(self, theta) -> Trajectory:
        return self._batch_fn([theta])[0]

    def rollout_batch(self, thetas: Sequence) -> list[Trajectory]:
        if not thetas:
            return []
        return self._batch_fn(thetas)

    def bd(self, traj: Trajectory) -> tuple:
        return self._bd_fn(traj)


def make_env(name: str, variant: str = "normal", grid: str = "full") -> Env:
    if variant not in ("normal", "mix-scale"):
        raise ConfigurationError(f"unknown variant {variant!r}")
    if grid not in ("full", "small"):
        raise ConfigurationError(f"unknown grid scale {grid!r}")
    mix = variant == "mix-scale"
    if name == "striker":
        bd_spec = striker_bd_spec() if grid == "full" else striker_small_bd_spec()
        bd_fn = striker_bd if grid == "full" else striker_small_bd
        spec = EnvSpec("striker", variant, 14, 3, EPISODE_LEN, ACTUATION_WINDOW,
                       bd_spec, STRIKER_MIX_INDICES, striker_policy_spec())
        return Env(spec, lambda ts: _striker_batch(ts, mix_scale=mix), bd_fn)
    if name == "kicker":
        bd_spec = kicker_bd_spec() if grid == "full" else kicker_small_bd_spec()
        spec = EnvSpec("kicker", variant, 7, 2, EPISODE_LEN, ACTUATION_WINDOW,
                       bd_spec, KICKER_MIX_INDICES, kicker_policy_spec())
        return Env(spec, lambda ts: _kicker_batch(ts, mix_scale=mix), kicker_bd)
    raise ConfigurationError(f"unknown environment {name!r}")
