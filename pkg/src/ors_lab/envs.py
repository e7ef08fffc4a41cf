"""Deterministic enumerable mazes, a continuous point maze, offline dataset
generation and the assumption detectors for the exact theory.

Maze text format: ``#`` wall, ``.`` free, ``G`` free cell marked as goal.
Actions are ``up, down, right, left, stay``; walking into a wall or off the
grid leaves the agent in place, so the successor function is total.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTION_NAMES = ("up", "down", "right", "left", "stay")
MOVES = np.array([(-1, 0), (1, 0), (0, 1), (0, -1), (0, 0)])
UNREACHABLE = -1


class MazeParseError(ValueError):
    pass


@dataclass(eq=False)
class DeterministicMdp:
    successor: np.ndarray          # (S, A) int, f(s, a)
    coords: np.ndarray             # (S, d) float, state embedding
    gamma: float = 0.99
    cells: np.ndarray | None = None  # (S, 2) grid (row, col) for mazes
    shape: tuple[int, int] | None = None
    goal: int | None = None        # goal marker from the layout, if any
    absorbing: tuple[int, ...] = ()

    def __post_init__(self):
        self.successor = np.asarray(self.successor, dtype=np.int64)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim == 1:
            self.coords = self.coords[:, None]
        S, A = self.successor.shape
        if A < 1:
            raise ValueError("every state needs at least one action")
        if self.successor.min() < 0 or self.successor.max() >= S:
            raise ValueError("successor table must map into the state set")
        if self.coords.shape[0] != S:
            raise ValueError("need one coordinate row per state")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")

    @property
    def n_states(self) -> int:
        return self.successor.shape[0]

    @property
    def n_actions(self) -> int:
        return self.successor.shape[1]

    @property
    def state_dim(self) -> int:
        return self.coords.shape[1]

    def step(self, s, a):
        return self.successor[s, a]

    def with_absorbing_goal(self, g: int) -> "DeterministicMdp":
        succ = self.successor.copy()
        succ[g, :] = g
        return DeterministicMdp(succ, self.coords, self.gamma, self.cells, self.shape,
                                self.goal, tuple(sorted(set(self.absorbing) | {int(g)})))

    def with_gamma(self, gamma: float) -> "DeterministicMdp":
        return DeterministicMdp(self.successor, self.coords, gamma, self.cells, self.shape,
                                self.goal, self.absorbing)

    def state_at(self, row: int, col: int) -> int:
        hits = np.flatnonzero((self.cells[:, 0] == row) & (self.cells[:, 1] == col))
        if hits.size == 0:
            raise KeyError(f"no free cell at ({row}, {col})")
        return int(hits[0])

    def nearest_state(self, points) -> np.ndarray:
        """Index of the closest state embedding for each point (snapping)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        d2 = ((pts[:, None, :] - self.coords[None, :, :]) ** 2).sum(-1)
        return d2.argmin(axis=1)


def potential(coords_a, coords_b) -> np.ndarray:
    """Squared Euclidean distance between embeddings (broadcasting)."""
    diff = np.asarray(coords_a, dtype=np.float64) - np.asarray(coords_b, dtype=np.float64)
    return (diff ** 2).sum(axis=-1)


# -- maze construction ------------------------------------------------------

def parse_maze(text: str, gamma: float = 0.99) -> DeterministicMdp:
    lines = [ln.rstrip("\n\r") for ln in text.splitlines()]
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise MazeParseError("line 1: empty maze")
    width = len(lines[0])
    cells, goal = [], None
    for r, line in enumerate(lines):
        if len(line) != width:
            raise MazeParseError(f"line {r + 1}: expected {width} columns, found {len(line)}")
        for c, ch in enumerate(line):
            if ch not in "#.G":
                raise MazeParseError(f"line {r + 1}: unexpected character {ch!r} at column {c + 1}")
            if ch == "#":
                continue
            if ch == "G":
                if goal is not None:
                    raise MazeParseError(f"line {r + 1}: more than one goal marker")
                goal = len(cells)
            cells.append((r, c))
    if not cells:
        raise MazeParseError(f"line {len(lines)}: maze has no free cells")
    cells = np.array(cells, dtype=np.int64)
    index = {(int(r), int(c)): i for i, (r, c) in enumerate(cells)}
    succ = np.empty((len(cells), len(MOVES)), dtype=np.int64)
    for i, (r, c) in enumerate(cells):
        for a, (dr, dc) in enumerate(MOVES):
            succ[i, a] = index.get((int(r + dr), int(c + dc)), i)
    return DeterministicMdp(succ, cells.astype(np.float64), gamma, cells,
                            (len(lines), width), goal)


def load_maze(path, gamma: float = 0.99) -> DeterministicMdp:
    return parse_maze(Path(path).read_text(), gamma)


def maze_text(mdp: DeterministicMdp) -> str:
    h, w = mdp.shape
    grid = [["#"] * w for _ in range(h)]
    for i, (r, c) in enumerate(mdp.cells):
        grid[r][c] = "G" if mdp.goal == i else "."
    return "\n".join("".join(row) for row in grid) + "\n"


def chain(n: int, gamma: float = 0.99) -> DeterministicMdp:
    """A one-row corridor of ``n`` cells."""
    return parse_maze("." * n, gamma)


def open_grid(h: int, w: int, gamma: float = 0.99) -> DeterministicMdp:
    return parse_maze("\n".join("." * w for _ in range(h)), gamma)


def cycle(n: int, gamma: float = 0.99) -> DeterministicMdp:
    """Ring of ``n`` states with actions forward / backward, embedded on a circle."""
    idx = np.arange(n)
    succ = np.stack([(idx + 1) % n, (idx - 1) % n], axis=1)
    ang = 2 * np.pi * idx / n
    return DeterministicMdp(succ, np.stack([np.cos(ang), np.sin(ang)], axis=1), gamma)


U_MAZE = """\
.....
.###.
.#.#.
.#.#.
G#...
"""

# 8x8 layout used by the end-to-end experiments: two short interior walls.
MAZE_8X8 = """\
........
........
..###...
........
........
...###..
........
........
"""


def u_maze(gamma: float = 0.99) -> DeterministicMdp:
    """Goal at the bottom-left; cells just across the wall are Euclidean-close
    but many steps away."""
    return parse_maze(U_MAZE, gamma)


def _largest_component(free: np.ndarray) -> np.ndarray:
    h, w = free.shape
    seen = np.zeros_like(free, dtype=bool)
    best = []
    for r0 in range(h):
        for c0 in range(w):
            if not free[r0, c0] or seen[r0, c0]:
                continue
            comp, q = [], deque([(r0, c0)])
            seen[r0, c0] = True
            while q:
                r, c = q.popleft()
                comp.append((r, c))
                for dr, dc in MOVES[:4]:
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and free[rr, cc] and not seen[rr, cc]:
                        seen[rr, cc] = True
                        q.append((rr, cc))
            if len(comp) > len(best):
                best = comp
    out = np.zeros_like(free, dtype=bool)
    for r, c in best:
        out[r, c] = True
    return out


def random_maze(h: int, w: int, wall_fraction: float, rng: np.random.Generator,
                gamma: float = 0.99) -> DeterministicMdp:
    """Random walls; cells outside the largest 4-connected free component
    become walls so that every state can reach every other."""
    free = rng.random((h, w)) >= wall_fraction
    if not free.any():
        free[rng.integers(h), rng.integers(w)] = True
    free = _largest_component(free)
    text = "\n".join("".join("." if f else "#" for f in row) for row in free)
    return parse_maze(text, gamma)


# -- shortest-path layers ---------------------------------------------------

@dataclass
class LayerDecomposition:
    goal: int
    steps: np.ndarray                 # step*(s, g); UNREACHABLE for no path
    layers: list[np.ndarray]          # layers[k] = states with step* == k

    @property
    def unreachable(self) -> np.ndarray:
        return np.flatnonzero(self.steps == UNREACHABLE)

    def layer_of(self, s) -> int:
        return int(self.steps[s])


def compute_layers(mdp: DeterministicMdp, g: int) -> LayerDecomposition:
    """Exact BFS distances to ``g`` over the successor graph (reverse search)."""
    S = mdp.n_states
    if not 0 <= g < S:
        raise ValueError(f"goal {g} is not a state")
    preds = [[] for _ in range(S)]
    for s in range(S):
        for s2 in set(mdp.successor[s].tolist()):
            preds[s2].append(s)
    steps = np.full(S, UNREACHABLE, dtype=np.int64)
    steps[g] = 0
    q = deque([g])
    while q:
        u = q.popleft()
        for p in preds[u]:
            if steps[p] == UNREACHABLE:
                steps[p] = steps[u] + 1
                q.append(p)
    depth = steps.max()
    layers = [np.flatnonzero(steps == k) for k in range(depth + 1)]
    return LayerDecomposition(int(g), steps, layers)


def shortest_path_actions(mdp: DeterministicMdp, layers: LayerDecomposition) -> np.ndarray:
    """Boolean (S, A) mask of actions that start a shortest path to the goal.

    At the goal the shortest-path actions are those that stay there.
    """
    steps = layers.steps
    nxt = steps[mdp.successor]
    mask = (nxt == steps[:, None] - 1) & (steps[:, None] >= 1)
    g = layers.goal
    mask[g] = mdp.successor[g] == g
    mask[steps == UNREACHABLE] = False
    return mask


def shortest_path_trajectory(mdp: DeterministicMdp, start: int, g: int,
                             layers: LayerDecomposition | None = None):
    """States and actions of the lowest-action-id shortest path ``start -> g``."""
    layers = layers or compute_layers(mdp, g)
    if layers.steps[start] == UNREACHABLE:
        raise ValueError(f"goal {g} unreachable from {start}")
    mask = shortest_path_actions(mdp, layers)
    states, actions = [int(start)], []
    s = int(start)
    while s != g:
        a = int(np.flatnonzero(mask[s])[0])
        actions.append(a)
        s = int(mdp.successor[s, a])
        states.append(s)
    return np.array(states), np.array(actions, dtype=np.int64)


# -- behavioural policies ---------------------------------------------------

def uniform_policy(mdp: DeterministicMdp) -> np.ndarray:
    return np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)


def layer_monotone_policy(mdp: DeterministicMdp, layers: LayerDecomposition) -> np.ndarray:
    """Uniform over shortest-path actions; states that cannot reach the goal
    act uniformly."""
    mask = shortest_path_actions(mdp, layers).astype(np.float64)
    empty = mask.sum(axis=1) == 0
    mask[empty] = 1.0
    return mask / mask.sum(axis=1, keepdims=True)


def eps_greedy_policy(mdp: DeterministicMdp, layers: LayerDecomposition, eps: float) -> np.ndarray:
    return (1.0 - eps) * layer_monotone_policy(mdp, layers) + eps * uniform_policy(mdp)


@dataclass
class PolicySpec:
    kind: str = "uniform"          # uniform | eps_greedy | layer_monotone
    epsilon: float = 0.3
    goal: int | None = None        # required for layer_monotone

    KINDS = ("uniform", "eps_greedy", "layer_monotone")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}; expected one of {self.KINDS}")
        if self.kind == "layer_monotone" and self.goal is None:
            raise ValueError("layer_monotone policy needs a goal")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")

    def describe(self) -> dict:
        return {"kind": self.kind, "epsilon": self.epsilon, "goal": self.goal}


# -- offline datasets -------------------------------------------------------

@dataclass(eq=False)
class OfflineDataset:
    """Flat table of (s, a, s', a') tuples, sorted by trajectory then time.

    Discrete datasets hold state ids and integer actions; continuous ones hold
    coordinate arrays and real action vectors.
    """

    traj_id: np.ndarray
    t: np.ndarray
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    a_next: np.ndarray
    policy: dict = field(default_factory=dict)
    discrete: bool = True

    def __post_init__(self):
        self.traj_id = np.asarray(self.traj_id, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=np.int64)
        n = len(self.traj_id)
        for name in ("s", "a", "s_next", "a_next"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has the wrong length")
        # last tuple index of each tuple's trajectory
        ends = np.empty(n, dtype=np.int64)
        if n:
            boundary = np.flatnonzero(np.diff(self.traj_id) != 0)
            last = np.append(boundary, n - 1)
            first = np.insert(boundary + 1, 0, 0)
            for f, l in zip(first, last):
                ends[f:l + 1] = l
        self.traj_end = ends

    def __len__(self):
        return len(self.traj_id)

    @property
    def n_trajectories(self) -> int:
        return len(np.unique(self.traj_id))

    def trajectories(self):
        """Yield index arrays, one per trajectory."""
        if not len(self):
            return
        starts = np.flatnonzero(np.r_[True, np.diff(self.traj_id) != 0])
        for st in starts:
            yield np.arange(st, self.traj_end[st] + 1)

    def future_state(self, idx, offsets) -> np.ndarray:
        """State ``offsets`` steps after tuple ``idx`` (offset 1 is ``s'``).

        Offsets that run past the end of the trajectory clamp to its final state.
        """
        idx = np.asarray(idx)
        j = np.minimum(idx + np.asarray(offsets) - 1, self.traj_end[idx])
        return self.s_next[j]


def generate_dataset(mdp: DeterministicMdp, spec: PolicySpec, n_trajectories: int,
                     horizon: int, seed: int) -> OfflineDataset:
    """Roll out ``spec`` for ``horizon`` steps from uniformly random starts.

    ``eps_greedy`` draws a fresh random goal per trajectory and acts greedily
    toward it with probability ``1 - epsilon``. ``layer_monotone`` moves along
    shortest paths to ``spec.goal`` and stays once there.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if n_trajectories < 1:
        raise ValueError("need at least one trajectory")
    seeds = np.random.SeedSequence(seed).spawn(n_trajectories)
    if spec.kind == "layer_monotone":
        fixed_layers = compute_layers(mdp, spec.goal)
        table = layer_monotone_policy(mdp, fixed_layers)
        starts_from = np.flatnonzero(fixed_layers.steps != UNREACHABLE)
    elif spec.kind == "uniform":
        table = uniform_policy(mdp)
        starts_from = np.arange(mdp.n_states)
    else:
        table = None
        starts_from = np.arange(mdp.n_states)
    layer_cache = {}
    cols = {k: [] for k in ("traj_id", "t", "s", "a", "s_next", "a_next")}
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        pol = table
        if pol is None:
            goal = int(rng.integers(mdp.n_states))
            if goal not in layer_cache:
                layer_cache[goal] = eps_greedy_policy(mdp, compute_layers(mdp, goal), spec.epsilon)
            pol = layer_cache[goal]
        cum = np.cumsum(pol, axis=1)
        s = int(rng.choice(starts_from))
        a = int(np.searchsorted(cum[s], rng.random(), side="right"))
        a = min(a, mdp.n_actions - 1)
        for t in range(horizon):
            s2 = int(mdp.successor[s, a])
            a2 = min(int(np.searchsorted(cum[s2], rng.random(), side="right")), mdp.n_actions - 1)
            for k, v in (("traj_id", i), ("t", t), ("s", s), ("a", a), ("s_next", s2), ("a_next", a2)):
                cols[k].append(v)
            s, a = s2, a2
    return OfflineDataset(**{k: np.array(v, dtype=np.int64) for k, v in cols.items()},
                          policy=spec.describe(), discrete=True)


def empirical_policy(dataset: OfflineDataset, n_states: int, n_actions: int,
                     prior: float = 0.0) -> np.ndarray:
    """Action frequencies per state (over ``s`` and ``s'`` slots); unvisited
    states fall back to uniform."""
    counts = np.full((n_states, n_actions), float(prior))
    np.add.at(counts, (dataset.s, dataset.a), 1.0)
    last = dataset.traj_end == np.arange(len(dataset))
    np.add.at(counts, (dataset.s_next[last], dataset.a_next[last]), 1.0)
    tot = counts.sum(axis=1, keepdims=True)
    out = np.where(tot > 0, counts / np.where(tot > 0, tot, 1.0), 1.0 / n_actions)
    return out


def save_jsonl(dataset: OfflineDataset, path, mdp: DeterministicMdp | None = None):
    """One tuple per line: ``{traj_id, t, s, a, s_next, a_next}``; states are
    written as coordinate arrays."""
    def state(x):
        if dataset.discrete:
            return mdp.coords[x].tolist()
        return np.asarray(x, dtype=np.float64).tolist()

    def action(x):
        return int(x) if dataset.discrete else np.asarray(x, dtype=np.float64).tolist()

    with open(path, "w") as fh:
        for i in range(len(dataset)):
            fh.write(json.dumps({
                "traj_id": int(dataset.traj_id[i]), "t": int(dataset.t[i]),
                "s": state(dataset.s[i]), "a": action(dataset.a[i]),
                "s_next": state(dataset.s_next[i]), "a_next": action(dataset.a_next[i]),
            }) + "\n")


def load_jsonl(path, mdp: DeterministicMdp | None = None, policy: dict | None = None) -> OfflineDataset:
    """Read a dataset written by :func:`save_jsonl`. With ``mdp`` given,
    coordinates are mapped back to state ids."""
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    rows.sort(key=lambda r: (r["traj_id"], r["t"]))
    discrete = mdp is not None
    lookup = {tuple(c): i for i, c in enumerate(mdp.coords.tolist())} if discrete else None

    def state(x):
        if discrete:
            try:
                return lookup[tuple(float(v) for v in x)]
            except KeyError:
                raise ValueError(f"state {x} is not a state of the given maze") from None
        return x

    cols = {
        "traj_id": [r["traj_id"] for r in rows], "t": [r["t"] for r in rows],
        "s": [state(r["s"]) for r in rows], "a": [r["a"] for r in rows],
        "s_next": [state(r["s_next"]) for r in rows], "a_next": [r["a_next"] for r in rows],
    }
    dt = np.int64 if discrete else np.float64
    return OfflineDataset(cols["traj_id"], cols["t"],
                          *(np.array(cols[k], dtype=dt) for k in ("s", "a", "s_next", "a_next")),
                          policy=policy or {}, discrete=discrete)


# -- assumption detectors ---------------------------------------------------

@dataclass
class Finding:
    holds: bool
    counterexample: dict | None = None
    detail: str = ""

    def to_dict(self):
        return {"holds": self.holds, "counterexample": self.counterexample, "detail": self.detail}


@dataclass
class AssumptionReport:
    goal: int
    deterministic: Finding
    reachability: Finding
    potential_monotone: Finding
    policy_monotone: Finding
    delta_phi: float

    @property
    def all_hold(self) -> bool:
        return all(f.holds for f in (self.deterministic, self.reachability,
                                     self.potential_monotone, self.policy_monotone))

    def to_dict(self):
        return {
            "goal": self.goal, "all_hold": self.all_hold, "delta_phi": self.delta_phi,
            "A1_deterministic": self.deterministic.to_dict(),
            "A2_one_step_reachability": self.reachability.to_dict(),
            "A3_potential_monotone": self.potential_monotone.to_dict(),
            "A4_policy_layer_monotone": self.policy_monotone.to_dict(),
        }


def potential_gap(mdp: DeterministicMdp, layers: LayerDecomposition):
    """Smallest ``min Phi(S_k) - max Phi(S_{k-1})`` over adjacent layers, with
    the pair of states attaining it."""
    phi = potential(mdp.coords, mdp.coords[layers.goal])
    best, pair = np.inf, None
    for k in range(1, len(layers.layers)):
        lo, hi = layers.layers[k - 1], layers.layers[k]
        i_lo = lo[np.argmax(phi[lo])]
        i_hi = hi[np.argmin(phi[hi])]
        gap = phi[i_hi] - phi[i_lo]
        if gap < best:
            best, pair = gap, (int(i_lo), int(i_hi), k)
    return float(best), pair


def _successor_layers(mdp, layers, dataset, policy):
    """Per state, the set of successor layers under the behaviour data/policy."""
    steps = layers.steps
    out = {}
    if policy is not None:
        for s in range(mdp.n_states):
            acts = np.flatnonzero(policy[s] > 0)
            out[s] = steps[mdp.successor[s, acts]]
    else:
        for s, s2 in zip(dataset.s, dataset.s_next):
            out.setdefault(int(s), []).append(steps[s2])
        out = {k: np.array(v) for k, v in out.items()}
    return out


def check_assumptions(mdp: DeterministicMdp, dataset: OfflineDataset | None, g: int,
                      policy: np.ndarray | None = None) -> AssumptionReport:
    """Evaluate the four assumptions of the exact theory for goal ``g``.

    The potential is squared Euclidean distance on ``mdp.coords``. Behaviour
    monotonicity is judged on ``policy`` (a table) when given, else on the
    transitions observed in ``dataset``.
    """
    layers = compute_layers(mdp, g)
    steps = layers.steps

    det = Finding(True, detail="successor table is total and single-valued")
    if dataset is not None and dataset.discrete and len(dataset):
        bad = np.flatnonzero(mdp.successor[dataset.s, dataset.a] != dataset.s_next)
        if bad.size:
            i = int(bad[0])
            det = Finding(False, {"s": int(dataset.s[i]), "a": int(dataset.a[i]),
                                  "s_next": int(dataset.s_next[i]),
                                  "f(s,a)": int(mdp.successor[dataset.s[i], dataset.a[i]])},
                          f"{bad.size} tuples disagree with the successor function")

    unreach = layers.unreachable
    if unreach.size:
        reach = Finding(False, {"state": int(unreach[0])},
                        f"{unreach.size} states cannot reach the goal")
    else:
        reach = Finding(True, detail="every state has an action into the next-lower layer")

    gap, pair = potential_gap(mdp, layers)
    if pair is None:
        pot = Finding(True, detail="single-layer instance")
        gap = float("inf")
    elif gap > 0:
        pot = Finding(True, detail=f"minimum adjacent-layer potential gap {gap:g}")
    else:
        phi = potential(mdp.coords, mdp.coords[g])
        s1, s2, k = pair
        pot = Finding(False, {"s_closer": s1, "layer_closer": k - 1, "phi_closer": float(phi[s1]),
                              "s_farther": s2, "layer_farther": k, "phi_farther": float(phi[s2])},
                      "potential does not separate adjacent layers")

    if policy is None and dataset is None:
        raise ValueError("need a dataset or a policy table to judge behaviour monotonicity")
    succ_layers = _successor_layers(mdp, layers, dataset, policy)
    pol = Finding(True, detail="behaviour successors preserve the layer order")
    for k in range(1, len(layers.layers)):
        lo = [(int(s), int(np.max(succ_layers[s]))) for s in layers.layers[k - 1]
              if s in succ_layers and len(succ_layers[s])]
        hi = [(int(s), int(np.min(succ_layers[s]))) for s in layers.layers[k]
              if s in succ_layers and len(succ_layers[s])]
        if not lo or not hi:
            continue
        s1, m1 = max(lo, key=lambda x: x[1])
        s2, m2 = min(hi, key=lambda x: x[1])
        if m1 > m2:
            pol = Finding(False, {"s1": s1, "layer_s1": k - 1, "successor_layer_s1": m1,
                                  "s2": s2, "layer_s2": k, "successor_layer_s2": m2},
                          "a closer state moves to a farther layer than a farther state")
            break
    return AssumptionReport(int(g), det, reach, pot, pol, float(gap))


# -- continuous point maze --------------------------------------------------

def _segments_cross(p, q, a, b) -> np.ndarray:
    """Vectorized proper/improper intersection test for segments p->q and a->b."""
    def orient(u, v, w):
        return (v[..., 0] - u[..., 0]) * (w[..., 1] - u[..., 1]) - \
               (v[..., 1] - u[..., 1]) * (w[..., 0] - u[..., 0])
    d1, d2 = orient(a, b, p), orient(a, b, q)
    d3, d4 = orient(p, q, a), orient(p, q, b)
    return ((d1 * d2) <= 0) & ((d3 * d4) <= 0)


@dataclass
class PointMaze2d:
    """Point mass in the unit box. Actions in ``[-1, 1]^2`` move the point by
    ``step_size * a``; a move that would cross a wall is cancelled."""

    walls: list = field(default_factory=lambda: [((0.5, 0.0), (0.5, 0.7))])
    step_size: float = 0.1
    goal_radius: float = 0.1
    action_noise: float = 0.0
    gamma: float = 0.99
    low: float = 0.0
    high: float = 1.0

    state_dim = 2
    action_dim = 2

    def step(self, x, a, rng: np.random.Generator | None = None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        a = np.clip(np.atleast_2d(np.asarray(a, dtype=np.float64)), -1.0, 1.0)
        delta = self.step_size * a
        if self.action_noise > 0:
            if rng is None:
                raise ValueError("noisy point maze needs an rng")
            delta = delta + self.action_noise * rng.standard_normal(delta.shape)
        prop = np.clip(x + delta, self.low, self.high)
        blocked = np.zeros(len(x), dtype=bool)
        for (a0, a1) in self.walls:
            blocked |= _segments_cross(x, prop, np.asarray(a0, float), np.asarray(a1, float))
        return np.where(blocked[:, None], x, prop)

    def sample_states(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=(n, 2))

    def reached(self, x, g) -> np.ndarray:
        return np.linalg.norm(np.asarray(x) - np.asarray(g), axis=-1) <= self.goal_radius


def generate_point_dataset(env: PointMaze2d, n_trajectories: int, horizon: int, seed: int,
                           epsilon: float = 1.0) -> OfflineDataset:
    """Continuous rollouts. With probability ``1 - epsilon`` the behaviour
    heads straight for a per-trajectory random goal, otherwise it acts
    uniformly at random."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    seeds = np.random.SeedSequence(seed).spawn(n_trajectories)
    rows = {k: [] for k in ("traj_id", "t", "s", "a", "s_next", "a_next")}

    def act(rng, x, goal):
        if rng.random() < epsilon:
            return rng.uniform(-1, 1, size=2)
        d = goal - x
        return d / max(np.abs(d).max(), 1e-9)

    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        x = env.sample_states(1, rng)[0]
        goal = env.sample_states(1, rng)[0]
        a = act(rng, x, goal)
        for t in range(horizon):
            x2 = env.step(x, a, rng)[0]
            a2 = act(rng, x2, goal)
            for k, v in (("traj_id", i), ("t", t), ("s", x), ("a", a), ("s_next", x2), ("a_next", a2)):
                rows[k].append(v)
            x, a = x2, a2
    return OfflineDataset(np.array(rows["traj_id"]), np.array(rows["t"]),
                          *(np.array(rows[k], dtype=np.float64) for k in ("s", "a", "s_next", "a_next")),
                          policy={"kind": "point_eps_goal", "epsilon": epsilon}, discrete=False)
