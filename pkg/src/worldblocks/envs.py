"""Seeded synthetic environments and data generators.

Generators (bouncing ball, motif streams, sprite grids) return full
trajectories with ground-truth labels; episodic environments (T-maze,
gridworld, mini arcade) follow a reset/step contract.  Every output is
a pure function of (spec, seed, action sequence): the per-episode
random stream is derived from the seed and the episode index, and each
class documents its exact draw order so tests can replay it.

Known-model builders (`tmaze_model`, `gridworld_model`, `arcade_model`)
return the matching discrete layers for planning and learning tests.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .distributions import DirichletCounts
from .errors import ConfigError, DataError, ShapeError
from .hmm import HmmLayer
from .rng import sample_categorical, stream

_TABLE_FLOOR = 1e-12


@dataclass(frozen=True)
class EnvSpec:
    """Declared interface of an environment.

    obs_sizes lists one alphabet size per discrete modality, or one
    entry per continuous dimension when obs_kind is "continuous".
    """

    name: str
    obs_kind: str
    obs_sizes: tuple
    num_actions: int
    has_reward: bool
    seed: int
    horizon: int

    def __post_init__(self):
        object.__setattr__(self, "obs_sizes", tuple(int(s) for s in self.obs_sizes))
        if self.obs_kind not in ("discrete", "continuous"):
            raise ConfigError(f"unknown observation kind {self.obs_kind!r}")
        if not self.obs_sizes or any(s < 1 for s in self.obs_sizes):
            raise ConfigError("observation space must be non-empty")
        if self.num_actions < 1:
            raise ConfigError("action space must be non-empty")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")


@dataclass(frozen=True)
class StepRecord:
    """One environment transition as seen by the agent."""

    t: int
    observation: tuple
    action: int
    reward: float
    terminal: bool

    def __post_init__(self):
        if self.t < 1:
            raise ConfigError("step count starts at 1")
        if not np.isfinite(self.reward):
            raise DataError("reward must be finite")


# ---------------------------------------------------------------------------
# trajectory generators


@dataclass(frozen=True)
class BallTrajectory:
    """Positions (and optional velocities), true states, mode labels."""

    obs: np.ndarray
    states: np.ndarray
    modes: np.ndarray


def bouncing_ball(
    horizon: int,
    seed: int,
    *,
    gravity: float = 0.05,
    restitution: float = 0.9,
    height: float = 2.0,
    velocity: float = 0.0,
    dyn_noise: float = 0.0,
    obs_noise: float = 0.0,
    include_velocity: bool = True,
    contact_tol: float = 1e-9,
) -> BallTrajectory:
    """1-D ball under gravity with a floor bounce.

    Flight uses the midpoint update x' = x + v - g/2, v' = v - g, which
    samples the continuous-time parabola exactly (so a drop from rest
    at height h first touches the floor after ceil(sqrt(2h/g)) steps
    and g*x + v^2/2 is conserved in flight).  When the candidate
    position would cross the floor while moving down, the step instead
    bounces: x' = x, v' = -restitution * v (mode 1).

    Draw order per step: two standard normals for dynamics noise, then
    one per observed coordinate.  Mode 0 labels flight, 1 the bounce.
    """
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    if gravity <= 0:
        raise ConfigError("gravity must be positive")
    if not 0 < restitution <= 1:
        raise ConfigError("restitution must lie in (0, 1]")
    if dyn_noise < 0 or obs_noise < 0:
        raise ConfigError("noise scales must be non-negative")
    rng = stream(seed, "ball")
    dim = 2 if include_velocity else 1
    states = np.zeros((horizon, 2))
    modes = np.zeros(horizon, dtype=int)
    obs = np.zeros((horizon, dim))
    x, v = float(height), float(velocity)
    states[0] = (x, v)
    obs[0] = (x, v)[:dim] + obs_noise * rng.standard_normal(dim)
    for t in range(1, horizon):
        glide = x + v - gravity / 2.0
        if glide <= contact_tol and v <= 0:
            modes[t] = 1
            x, v = x, -restitution * v
        else:
            x, v = glide, v - gravity
        noise = dyn_noise * rng.standard_normal(2)
        x, v = x + noise[0], v + noise[1]
        states[t] = (x, v)
        obs[t] = (x, v)[:dim] + obs_noise * rng.standard_normal(dim)
    return BallTrajectory(obs=obs, states=states, modes=modes)


def motif_stream(motifs, grammar, length: int, seed: int):
    """Concatenation of fixed motifs sampled from a motif-level chain.

    grammar[j, i] is the probability that motif j follows motif i
    (columns sum to one, matching the package transition convention);
    the first motif is drawn uniformly.  Returns (sequence, labels)
    with one label per motif window.
    """
    motifs = [np.asarray(m, dtype=int) for m in motifs]
    if not motifs:
        raise ConfigError("need at least one motif")
    stride = motifs[0].size
    if stride < 1 or any(m.size != stride for m in motifs):
        raise ConfigError("motifs must be non-empty and share one length")
    grammar = np.asarray(grammar, dtype=float)
    if grammar.shape != (len(motifs), len(motifs)):
        raise ShapeError(f"grammar must be {(len(motifs), len(motifs))}; got {grammar.shape}")
    if np.any(grammar < 0) or not np.allclose(grammar.sum(axis=0), 1.0, atol=1e-8):
        raise ConfigError("grammar columns must be probability vectors")
    if length < 1 or length % stride:
        raise ConfigError(f"length must be a positive multiple of the motif length {stride}")
    rng = stream(seed, "motif")
    windows = length // stride
    labels = np.zeros(windows, dtype=int)
    labels[0] = sample_categorical(rng, np.full(len(motifs), 1.0 / len(motifs)))
    for w in range(1, windows):
        labels[w] = sample_categorical(rng, grammar[:, labels[w - 1]])
    seq = np.concatenate([motifs[k] for k in labels])
    return seq, labels


@dataclass(frozen=True)
class SpriteRollout:
    """Rendered frames with per-sprite ground truth."""

    frames: np.ndarray
    positions: np.ndarray
    colors: np.ndarray


_SPRITE_MOVES = np.array([[0, 0], [-1, 0], [1, 0], [0, -1], [0, 1]])


def sprite_world(
    grid,
    num_sprites: int,
    horizon: int,
    seed: int,
    *,
    velocities=None,
    colors=None,
    actions=None,
) -> SpriteRollout:
    """Colored point sprites drifting on a wrap-around grid.

    Each sprite keeps a constant integer velocity (drawn from
    {-1,0,1}^2 when not given); `actions` (length horizon-1, alphabet
    stay/up/down/left/right) overrides sprite 0's velocity step by
    step.  frames[t, r, c] holds the color of the sprite at that cell
    (0 = background; higher sprite indices draw on top).

    Draw order: per-sprite velocities (row delta then column delta)
    when defaulted, then up to 100 rounds of per-sprite (row, column)
    placements until all sprites start on distinct cells.
    """
    rows, cols = (int(g) for g in grid)
    if num_sprites < 1:
        raise ConfigError("need at least one sprite")
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    if rows * cols < num_sprites:
        raise ConfigError("grid too small for the sprites")
    rng = stream(seed, "sprites")
    if velocities is None:
        velocities = rng.integers(-1, 2, size=(num_sprites, 2))
    velocities = np.asarray(velocities, dtype=int)
    if velocities.shape != (num_sprites, 2):
        raise ShapeError(f"velocities must be ({num_sprites}, 2)")
    if colors is None:
        colors = np.arange(1, num_sprites + 1)
    colors = np.asarray(colors, dtype=int)
    if colors.shape != (num_sprites,) or np.any(colors < 1):
        raise ConfigError("one positive color per sprite required")
    if actions is not None:
        actions = np.asarray(actions, dtype=int)
        if actions.shape != (horizon - 1,):
            raise ShapeError(f"actions must supply {horizon - 1} steps")
        if actions.size and (actions.min() < 0 or actions.max() >= len(_SPRITE_MOVES)):
            raise DataError("action index outside the sprite move alphabet")

    for _ in range(100):
        pos = np.column_stack(
            [rng.integers(0, rows, size=num_sprites), rng.integers(0, cols, size=num_sprites)]
        )
        if len({(int(r), int(c)) for r, c in pos}) == num_sprites:
            break
    else:
        raise ConfigError("could not place sprites on distinct cells in 100 tries")

    positions = np.zeros((horizon, num_sprites, 2), dtype=int)
    frames = np.zeros((horizon, rows, cols), dtype=int)
    positions[0] = pos
    for t in range(horizon):
        if t:
            step = velocities.copy()
            if actions is not None:
                step[0] = _SPRITE_MOVES[actions[t - 1]]
            positions[t] = (positions[t - 1] + step) % (rows, cols)
        for s in range(num_sprites):
            frames[t, positions[t, s, 0], positions[t, s, 1]] = colors[s]
    return SpriteRollout(frames=frames, positions=positions, colors=colors)


# ---------------------------------------------------------------------------
# episodic environments


def _det_counts(table) -> DirichletCounts:
    return DirichletCounts(np.asarray(table, dtype=float) + _TABLE_FLOOR)


class _EpisodicEnv:
    """Shared reset/step bookkeeping; subclasses fill the dynamics."""

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self._episode = -1
        self._t = 0
        self._done = True
        self._rng = None

    def reset(self, episode=None) -> tuple:
        self._episode = self._episode + 1 if episode is None else int(episode)
        self._rng = stream(self.spec.seed, f"{self.spec.name}:episode:{self._episode}")
        self._t = 0
        self._done = False
        return self._reset_state()

    def step(self, action) -> StepRecord:
        if self._done:
            raise ConfigError("episode finished; call reset() first")
        action = int(action)
        if not 0 <= action < self.spec.num_actions:
            raise DataError(
                f"action {action} outside the alphabet of size {self.spec.num_actions}"
            )
        self._t += 1
        obs, reward, finished = self._transition(action)
        self._done = finished or self._t >= self.spec.horizon
        return StepRecord(
            t=self._t, observation=obs, action=action, reward=reward, terminal=self._done
        )


class TMaze(_EpisodicEnv):
    """Two-armed maze with a cue room revealing the rewarded arm.

    Locations: 0 center, 1 left arm, 2 right arm, 3 cue.  Actions:
    0 go-left, 1 go-right, 2 go-cue; arms are absorbing.  Observation
    modalities: (location, cue signal, reward signal).  The cue signal
    names the rewarded arm (1 + arm) in the cue room and is 0 outside.
    The reward signal in an arm is 1 (win) or 2 (lose), correct with
    probability `reward_fidelity`; the scalar reward (+1 / -1) is paid
    once, on arm entry, according to the signal drawn there.

    Draws per episode: the rewarded arm at reset, then one uniform
    draw per step spent in an arm (for the reward signal).
    """

    CENTER, LEFT, RIGHT, CUE = range(4)

    def __init__(self, seed: int, *, reward_fidelity: float = 0.75):
        if not 0.5 <= reward_fidelity <= 1.0:
            raise ConfigError("reward fidelity must lie in [0.5, 1]")
        super().__init__(
            EnvSpec(
                name="tmaze",
                obs_kind="discrete",
                obs_sizes=(4, 3, 3),
                num_actions=3,
                has_reward=True,
                seed=seed,
                horizon=2,
            )
        )
        self.reward_fidelity = reward_fidelity

    def _reset_state(self) -> tuple:
        self._arm = int(self._rng.integers(2))
        self._loc = self.CENTER
        return (self.CENTER, 0, 0)

    def _transition(self, action):
        prev = self._loc
        if prev in (self.LEFT, self.RIGHT):
            new = prev
        else:
            new = (self.LEFT, self.RIGHT, self.CUE)[action]
        self._loc = new
        cue_sig = 1 + self._arm if new == self.CUE else 0
        reward_sig = 0
        if new in (self.LEFT, self.RIGHT):
            correct = new - 1 == self._arm
            hit = self._rng.uniform() < self.reward_fidelity
            reward_sig = 1 if (correct == hit) else 2
        entered = new != prev and new in (self.LEFT, self.RIGHT)
        reward = (1.0 if reward_sig == 1 else -1.0) if entered else 0.0
        return (new, cue_sig, reward_sig), reward, False


def tmaze(seed: int, **kwargs) -> TMaze:
    return TMaze(seed, **kwargs)


def tmaze_model(*, reward_fidelity: float = 0.75) -> HmmLayer:
    """Exact generative model of the T-maze as a controllable layer.

    Factors: rewarded arm (2 states, static) and location (4 states,
    action-driven).  Modalities: location (identity), cue signal, and
    reward signal, the latter two joined to both factors.
    """
    p = reward_fidelity
    arm_trans = np.zeros((2, 2, 3))
    for a in range(3):
        arm_trans[:, :, a] = np.eye(2)
    loc_trans = np.zeros((4, 4, 3))
    for a, dest in enumerate((TMaze.LEFT, TMaze.RIGHT, TMaze.CUE)):
        loc_trans[dest, TMaze.CENTER, a] = 1.0
        loc_trans[dest, TMaze.CUE, a] = 1.0
        loc_trans[TMaze.LEFT, TMaze.LEFT, a] = 1.0
        loc_trans[TMaze.RIGHT, TMaze.RIGHT, a] = 1.0
    loc_obs = np.eye(4)
    cue_obs = np.zeros((3, 2, 4))
    reward_obs = np.zeros((3, 2, 4))
    for arm in range(2):
        for loc in range(4):
            if loc == TMaze.CUE:
                cue_obs[1 + arm, arm, loc] = 1.0
            else:
                cue_obs[0, arm, loc] = 1.0
            if loc in (TMaze.LEFT, TMaze.RIGHT):
                win = p if loc - 1 == arm else 1.0 - p
                reward_obs[1, arm, loc] = win
                reward_obs[2, arm, loc] = 1.0 - win
            else:
                reward_obs[0, arm, loc] = 1.0
    return HmmLayer(
        order_sizes=((2,), (4,)),
        num_obs=(4, 3, 3),
        modality_factors=((1,), (0, 1), (0, 1)),
        controllable_orders=frozenset({1}),
        num_actions=3,
        trans_counts=((_det_counts(arm_trans),), (_det_counts(loc_trans),)),
        obs_counts=(_det_counts(loc_obs), _det_counts(cue_obs), _det_counts(reward_obs)),
        init_counts=(
            (_det_counts([0.5, 0.5]),),
            (_det_counts([1.0, 0.0, 0.0, 0.0]),),
        ),
    )


class Gridworld(_EpisodicEnv):
    """Fully observed grid with a rewarded goal cell.

    Actions 0..3 move up/down/left/right; walking into a wall leaves
    the position unchanged with reward 0.  Observation modalities:
    (cell index, reward signal); the reward signal is 1 at the goal.
    Reaching the goal pays +1 and ends the episode.

    Draws per episode: one integer at reset selecting the start cell
    uniformly among non-goal cells.
    """

    def __init__(self, dims, goal, seed: int, *, horizon: int = 24):
        rows, cols = (int(d) for d in dims)
        goal = (int(goal[0]), int(goal[1]))
        if rows < 1 or cols < 1:
            raise ConfigError("grid must be non-empty")
        if not (0 <= goal[0] < rows and 0 <= goal[1] < cols):
            raise ConfigError("goal must lie inside the grid")
        if rows * cols < 2:
            raise ConfigError("need at least one non-goal cell")
        super().__init__(
            EnvSpec(
                name="gridworld",
                obs_kind="discrete",
                obs_sizes=(rows * cols, 2),
                num_actions=4,
                has_reward=True,
                seed=seed,
                horizon=horizon,
            )
        )
        self.dims = (rows, cols)
        self.goal = goal

    def _cell(self, pos) -> int:
        return pos[0] * self.dims[1] + pos[1]

    def _reset_state(self) -> tuple:
        rows, cols = self.dims
        draw = int(self._rng.integers(rows * cols - 1))
        if draw >= self._cell(self.goal):
            draw += 1
        self._pos = divmod(draw, cols)
        return (self._cell(self._pos), 0)

    def _transition(self, action):
        rows, cols = self.dims
        dr, dc = ((-1, 0), (1, 0), (0, -1), (0, 1))[action]
        r, c = self._pos[0] + dr, self._pos[1] + dc
        if 0 <= r < rows and 0 <= c < cols:
            self._pos = (r, c)
        at_goal = self._pos == self.goal
        return (self._cell(self._pos), int(at_goal)), float(at_goal), at_goal


def gridworld(dims, goal, seed: int, **kwargs) -> Gridworld:
    return Gridworld(dims, goal, seed, **kwargs)


def gridworld_model(dims, goal) -> HmmLayer:
    """Exact single-factor model of the gridworld (cell state, 4 actions)."""
    rows, cols = (int(d) for d in dims)
    n = rows * cols
    goal_cell = int(goal[0]) * cols + int(goal[1])
    trans = np.zeros((n, n, 4))
    for cell in range(n):
        r, c = divmod(cell, cols)
        for a, (dr, dc) in enumerate(((-1, 0), (1, 0), (0, -1), (0, 1))):
            nr, nc = r + dr, c + dc
            dest = nr * cols + nc if 0 <= nr < rows and 0 <= nc < cols else cell
            trans[dest, cell, a] = 1.0
    reward_obs = np.zeros((2, n))
    reward_obs[0] = 1.0
    reward_obs[:, goal_cell] = (0.0, 1.0)
    return HmmLayer(
        order_sizes=((n,),),
        num_obs=(n, 2),
        modality_factors=((0,), (0,)),
        controllable_orders=frozenset({1}),
        num_actions=4,
        trans_counts=((_det_counts(trans),),),
        obs_counts=(_det_counts(np.eye(n)), _det_counts(reward_obs)),
        init_counts=((_det_counts(np.full(n, 1.0 / n)),),),
    )


class MiniArcade(_EpisodicEnv):
    """Catch game: a paddle under a column of falling objects.

    The object starts at the top row and falls one row per step; the
    step on which it reaches the bottom row checks the catch (paddle
    column after moving == object column, reward +1), so the reward
    signal is a function of the resulting state.  The next step
    respawns the object at the top in a fresh uniform column.  Actions
    0..2 move the paddle left/stay/right with clipping.  Observation
    modalities: (paddle column, object column, object row, reward
    signal).

    Draws per episode: one spawn column at reset, then one per respawn
    (i.e. each step taken while the object sits on the bottom row).
    """

    def __init__(self, seed: int, *, width: int = 3, rows: int = 3, horizon: int = 18):
        if width < 2 or rows < 2:
            raise ConfigError("arcade needs at least 2 columns and 2 rows")
        super().__init__(
            EnvSpec(
                name="arcade",
                obs_kind="discrete",
                obs_sizes=(width, width, rows, 2),
                num_actions=3,
                has_reward=True,
                seed=seed,
                horizon=horizon,
            )
        )
        self.width = width
        self.rows = rows

    def _reset_state(self) -> tuple:
        self._paddle = self.width // 2
        self._col = int(self._rng.integers(self.width))
        self._row = 0
        return (self._paddle, self._col, self._row, 0)

    def _transition(self, action):
        self._paddle = int(np.clip(self._paddle + action - 1, 0, self.width - 1))
        caught = 0
        if self._row == self.rows - 1:
            self._col = int(self._rng.integers(self.width))
            self._row = 0
        else:
            self._row += 1
            if self._row == self.rows - 1:
                caught = int(self._paddle == self._col)
        return (self._paddle, self._col, self._row, caught), float(caught), False


def mini_arcade(seed: int, **kwargs) -> MiniArcade:
    return MiniArcade(seed, **kwargs)


def arcade_model(
    *, width: int = 3, rows: int = 3, prior: float = 0.1, sensor_strength: float = 10.0
) -> HmmLayer:
    """Learnable model of the arcade with grounded senses and actuator.

    Factors: paddle, object column, object row; one modality per factor
    plus a reward modality joined to all three.  The per-factor sensor
    tables start as strong identities (a flat observation model is a
    fixed point of expectation-maximization, so something must pin the
    states to the senses), and the paddle's response to actions is
    likewise pinned (the agent knows its own actuator).  Object
    dynamics and the reward table start flat and are learned online.
    """
    layer = HmmLayer.uniform(
        (width, width, rows),
        (width, width, rows, 2),
        modality_factors=((0,), (1,), (2,), (0, 1, 2)),
        controllable_orders=(1,),
        num_actions=3,
        prior=prior,
    )
    grounded = tuple(
        DirichletCounts(sensor_strength * np.eye(n) + prior)
        for n in (width, width, rows)
    )
    paddle = np.zeros((width, width, 3))
    for a in range(3):
        for p in range(width):
            paddle[int(np.clip(p + a - 1, 0, width - 1)), p, a] = 1.0
    trans = (
        (DirichletCounts(sensor_strength * paddle + prior),),
    ) + layer.trans_counts[1:]
    return replace(layer, obs_counts=grounded + (layer.obs_counts[3],), trans_counts=trans)
