"""Procedurally generated, partially observable grid rooms for
target-object navigation, with a pose-graph shortest-path oracle.

Rooms come in four families (kitchen / bedroom / bathroom / living
analogues) that differ in target vocabulary and obstacle density.  The
agent sees a one-hot encoding of the K x K window in front of it and
must Stop next to a named object while it is in view.
"""

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

OBJECT_NAMES = (
    "sink", "stove", "fridge", "table",
    "bed", "wardrobe", "lamp", "plant",
    "toilet", "mirror", "sofa", "tv",
)
VOCAB_SIZE = len(OBJECT_NAMES)

FAMILY_NAMES = ("kitchen", "bedroom", "bathroom", "living")
FAMILY_OBJECTS = {
    0: (0, 1, 2, 3),    # sink stove fridge table
    1: (4, 5, 6, 7),    # bed wardrobe lamp plant
    2: (8, 9, 0, 6),    # toilet mirror sink lamp
    3: (10, 11, 3, 7),  # sofa tv table plant
}
FAMILY_WALL_DENSITY = (0.06, 0.10, 0.14, 0.18)

# cell codes: object with id k occupies code 2 + k
FREE, WALL = 0, 1

# headings clockwise; y grows downward
NORTH, EAST, SOUTH, WEST = 0, 1, 2, 3
DELTAS = ((0, -1), (1, 0), (0, 1), (-1, 0))
HEADING_GLYPHS = "^>v<"

ROTATE_LEFT, ROTATE_RIGHT, MOVE_AHEAD, STOP = 0, 1, 2, 3
ACTION_NAMES = ("RotateLeft", "RotateRight", "MoveAhead", "Stop")
NUM_ACTIONS = 4

DEFAULT_K = 5
DEFAULT_T_MAX = 50
DEFAULT_RADIUS = 1


@dataclass
class RoomLayout:
    width: int
    height: int
    cells: np.ndarray  # int16 [height, width]
    family: int
    layout_id: int
    seed: int
    object_cells: dict = field(default_factory=dict)
    _padded: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.object_cells:
            self.object_cells = _index_objects(self.cells)

    def padded(self, k):
        # immutable after generation, so caching per window size is safe
        if k not in self._padded:
            self._padded[k] = np.pad(self.cells, k, constant_values=WALL)
        return self._padded[k]

    def free_cells(self):
        ys, xs = np.nonzero(self.cells == FREE)
        return list(zip(xs.tolist(), ys.tolist()))


@dataclass
class Pose:
    x: int
    y: int
    heading: int


@dataclass(frozen=True)
class TargetSpec:
    object_id: int
    embedding: np.ndarray  # one-hot over the global vocabulary

    @staticmethod
    def for_object(object_id):
        g = np.zeros(VOCAB_SIZE)
        g[object_id] = 1.0
        return TargetSpec(object_id, g)


@dataclass
class Observation:
    features: np.ndarray  # flattened one-hot of the K x K forward window
    target_visible: bool
    target_distance: float  # Chebyshev cells; success check only, never fed to the policy


@dataclass
class EpisodeState:
    layout: RoomLayout
    pose: Pose
    target: TargetSpec
    t: int = 0
    done: bool = False
    success: bool = False
    t_max: int = DEFAULT_T_MAX
    radius: int = DEFAULT_RADIUS
    k_window: int = DEFAULT_K


def _index_objects(cells):
    out = {}
    ys, xs = np.nonzero(cells >= 2)
    for x, y in zip(xs.tolist(), ys.tolist()):
        out.setdefault(int(cells[y, x]) - 2, []).append((x, y))
    return out


def obs_dim(k_window=DEFAULT_K):
    return k_window * k_window * (2 + VOCAB_SIZE)


_WINDOW_CACHE = {}
_EYE = np.eye(2 + VOCAB_SIZE)


def _window_offsets(k):
    """(dx, dy) for depth 1..k ahead and lateral -k//2..k//2, per heading."""
    if k not in _WINDOW_CACHE:
        half = k // 2
        per_heading = []
        for h in range(4):
            fx, fy = DELTAS[h]
            rx, ry = DELTAS[(h + 1) % 4]
            off = [(d * fx + l * rx, d * fy + l * ry)
                   for d in range(1, k + 1) for l in range(-half, half + 1)]
            per_heading.append(np.array(off, dtype=np.intp))
        _WINDOW_CACHE[k] = per_heading
    return _WINDOW_CACHE[k]


def _window_cats(layout, pose, k):
    off = _window_offsets(k)[pose.heading]
    pad = layout.padded(k)
    return pad[pose.y + k + off[:, 1], pose.x + k + off[:, 0]]


def observe(layout, pose, target_id, k_window=DEFAULT_K):
    cats = _window_cats(layout, pose, k_window)
    visible = bool(np.any(cats == 2 + target_id))
    dist = min(
        max(abs(cx - pose.x), abs(cy - pose.y))
        for cx, cy in layout.object_cells[target_id]
    )
    return Observation(_EYE[cats].ravel(), visible, float(dist))


def _success_here(layout, pose, target_id, k_window, radius):
    obs = observe(layout, pose, target_id, k_window)
    return obs.target_visible and obs.target_distance <= radius


# ---------------------------------------------------------------------------
# episode control


def reset(layout, seed, *, k_window=DEFAULT_K, t_max=DEFAULT_T_MAX,
          radius=DEFAULT_RADIUS, target_id=None):
    """Place the agent uniformly on a free cell/heading, sample a target
    uniformly from the objects present (or use the one given)."""
    rng = np.random.default_rng(seed)
    free = layout.free_cells()
    x, y = free[int(rng.integers(len(free)))]
    heading = int(rng.integers(4))
    if target_id is None:
        present = sorted(layout.object_cells)
        target_id = present[int(rng.integers(len(present)))]
    elif target_id not in layout.object_cells:
        raise ValueError(f"target {target_id} not present in layout {layout.layout_id}")
    target = TargetSpec.for_object(target_id)
    state = EpisodeState(layout, Pose(x, y, heading), target,
                         t_max=t_max, radius=radius, k_window=k_window)
    return observe(layout, state.pose, target.object_id, k_window), target, state


def step(state, action):
    """Advance one action; returns (observation, reward, done, success).

    MoveAhead into a wall or object keeps the pose (still costs a step).
    Stop ends the episode; success needs the target within `radius`
    (Chebyshev) and visible.  Hitting t_max forces done without success.
    """
    if state.done:
        raise ValueError("step: episode already done")
    if action not in (ROTATE_LEFT, ROTATE_RIGHT, MOVE_AHEAD, STOP):
        raise ValueError(f"step: unknown action {action!r}")
    layout, pose = state.layout, state.pose
    state.t += 1
    if action == STOP:
        state.done = True
        state.success = _success_here(layout, pose, state.target.object_id,
                                      state.k_window, state.radius)
    elif action == ROTATE_LEFT:
        pose.heading = (pose.heading - 1) % 4
    elif action == ROTATE_RIGHT:
        pose.heading = (pose.heading + 1) % 4
    else:  # MOVE_AHEAD
        dx, dy = DELTAS[pose.heading]
        nx, ny = pose.x + dx, pose.y + dy
        if layout.cells[ny, nx] == FREE:
            pose.x, pose.y = nx, ny
    if not state.done and state.t >= state.t_max:
        state.done = True
        state.success = False
    reward = 5.0 if state.success else -0.01
    obs = observe(layout, pose, state.target.object_id, state.k_window)
    return obs, reward, state.done, state.success


# ---------------------------------------------------------------------------
# shortest-path oracle


def shortest_path_length(layout, start, object_id, *, k_window=DEFAULT_K, radius=DEFAULT_RADIUS):
    """Minimum rotations+moves from `start` to any pose satisfying the
    success predicate for the object, by BFS over the (x, y, heading) graph.
    The terminal Stop is not counted.
    """
    if object_id not in layout.object_cells:
        raise ValueError(f"object {object_id} not present in layout {layout.layout_id}")

    def is_goal(pose):
        return _success_here(layout, pose, object_id, k_window, radius)

    start_key = (start.x, start.y, start.heading)
    if is_goal(start):
        return 0
    seen = {start_key}
    queue = deque([(start_key, 0)])
    while queue:
        (x, y, h), dist = queue.popleft()
        nxt = [(x, y, (h - 1) % 4), (x, y, (h + 1) % 4)]
        dx, dy = DELTAS[h]
        if layout.cells[y + dy, x + dx] == FREE:
            nxt.append((x + dx, y + dy, h))
        for key in nxt:
            if key in seen:
                continue
            if is_goal(Pose(*key)):
                return dist + 1
            seen.add(key)
            queue.append((key, dist + 1))
    raise ValueError(
        f"object {object_id} unreachable from ({start.x},{start.y}) "
        f"in layout {layout.layout_id}; layout generation bug"
    )


# ---------------------------------------------------------------------------
# generation


def _connected(cells):
    """All free cells mutually reachable by 4-neighbor moves."""
    free = np.argwhere(cells == FREE)
    if len(free) == 0:
        return False
    total = len(free)
    start = (int(free[0][0]), int(free[0][1]))
    seen = {start}
    queue = deque([start])
    while queue:
        y, x = queue.popleft()
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ny, nx = y + dy, x + dx
            if (ny, nx) not in seen and 0 <= ny < cells.shape[0] \
                    and 0 <= nx < cells.shape[1] and cells[ny, nx] == FREE:
                seen.add((ny, nx))
                queue.append((ny, nx))
    return len(seen) == total


def _has_free_diag_neighbor(cells, x, y):
    h, w = cells.shape
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and cells[ny, nx] == FREE:
                return True
    return False


def generate_layout(seed, family, size_range=(8, 14)):
    """Deterministic layout for (seed, family); connectivity guaranteed,
    every object in the family vocabulary placed at least once.
    """
    if family not in FAMILY_OBJECTS:
        raise ValueError(f"unknown family {family}")
    lo, hi = size_range
    for perturb in range(10):
        rng = np.random.default_rng(seed + perturb * 0x9E3779B9)
        width = int(rng.integers(lo, hi + 1))
        height = int(rng.integers(lo, hi + 1))
        cells = np.full((height, width), FREE, dtype=np.int16)
        cells[0, :] = WALL
        cells[-1, :] = WALL
        cells[:, 0] = WALL
        cells[:, -1] = WALL

        interior = [(x, y) for y in range(1, height - 1) for x in range(1, width - 1)]
        rng.shuffle(interior)
        n_walls = int(round(FAMILY_WALL_DENSITY[family] * len(interior)))
        placed = 0
        for x, y in interior:
            if placed >= n_walls:
                break
            cells[y, x] = WALL
            if _connected(cells):
                placed += 1
            else:
                cells[y, x] = FREE

        ok = True
        for oid in FAMILY_OBJECTS[family]:
            n_inst = 2 if rng.random() < 0.35 else 1
            for _ in range(n_inst):
                spots = [(x, y) for x, y in interior if cells[y, x] == FREE]
                rng.shuffle(spots)
                done = False
                for x, y in spots:
                    cells[y, x] = 2 + oid
                    if _connected(cells) and _has_free_diag_neighbor(cells, x, y):
                        done = True
                        break
                    cells[y, x] = FREE
                if not done:
                    ok = False
                    break
            if not ok:
                break
        if ok and np.any(cells == FREE):
            return RoomLayout(width, height, cells, family, layout_id=-1, seed=seed)
        log.warning("layout generation failed for seed=%d family=%d, perturbing seed",
                    seed, family)
    raise RuntimeError(f"could not generate a valid layout for seed={seed} family={family}")


def make_splits(layout_seed, n_train=20, n_val=5, n_test=5, size_range=(8, 14)):
    """Train/val/test layouts per family from disjoint index ranges."""
    splits = {"train": [], "val": [], "test": []}
    bounds = (("train", 0, n_train),
              ("val", n_train, n_train + n_val),
              ("test", n_train + n_val, n_train + n_val + n_test))
    for family in sorted(FAMILY_OBJECTS):
        for name, start, stop in bounds:
            for idx in range(start, stop):
                seed = int(np.random.SeedSequence((layout_seed, family, idx)).generate_state(1)[0])
                layout = generate_layout(seed, family, size_range)
                layout.layout_id = family * 100 + idx
                splits[name].append(layout)
    return splits


# ---------------------------------------------------------------------------
# rendering and text serialization


def _cell_glyph(code):
    if code == FREE:
        return "."
    if code == WALL:
        return "#"
    return chr(ord("A") + code - 2)


def render_ascii(state):
    """Pure text view of the episode; agent drawn with a heading glyph."""
    rows = []
    for y in range(state.layout.height):
        row = [_cell_glyph(int(c)) for c in state.layout.cells[y]]
        if y == state.pose.y:
            row[state.pose.x] = HEADING_GLYPHS[state.pose.heading]
        rows.append("".join(row))
    return "\n".join(rows)


def layout_to_text(layout):
    lines = [f"{layout.width} {layout.height} {layout.family} {layout.layout_id}"]
    for y in range(layout.height):
        lines.append("".join(_cell_glyph(int(c)) for c in layout.cells[y]))
    return "\n".join(lines) + "\n"


def layout_from_text(text):
    lines = [ln for ln in text.splitlines() if ln]
    width, height, family, layout_id = (int(v) for v in lines[0].split())
    cells = np.zeros((height, width), dtype=np.int16)
    for y, row in enumerate(lines[1:1 + height]):
        for x, ch in enumerate(row):
            if ch == "#":
                cells[y, x] = WALL
            elif ch == ".":
                cells[y, x] = FREE
            else:
                cells[y, x] = 2 + ord(ch) - ord("A")
    return RoomLayout(width, height, cells, family, layout_id, seed=0)
