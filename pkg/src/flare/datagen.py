"""Synthetic tabletop world, scripted expert, and dataset generation.

The world is a continuous [0, 1]^2 plane observed as a small top-down RGB
image. Five colored objects (filled squares) and three goal zones
(outlined squares) are scattered at random; a task is "pick <color> place
<zone>", given to the policy as a short token sequence. The effector (a
white cross) moves by bounded deltas and grasps the nearest object when
the gripper closes within reach. Held objects track the effector. An
episode succeeds when the task's object rests inside its zone, ungrasped.

Dynamics, rendering, the expert and dataset files are all deterministic
functions of their seeds, so identical seeds reproduce byte-identical
dataset files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

COLOR_NAMES = ("red", "green", "blue", "yellow", "magenta")
ZONE_NAMES = ("cyan", "orange", "violet")
VOCAB = ("<pad>", "pick", "place") + COLOR_NAMES + ZONE_NAMES

OBJECT_RGB = np.array(
    [(220, 50, 47), (64, 190, 80), (60, 90, 220), (230, 200, 40), (200, 60, 200)],
    dtype=np.uint8,
)
ZONE_RGB = np.array([(0, 210, 210), (250, 150, 0), (160, 70, 255)], dtype=np.uint8)
EFFECTOR_RGB = np.array((255, 255, 255), dtype=np.uint8)
BACKGROUND_RGB = np.array((20, 20, 20), dtype=np.uint8)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class WorldConfig:
    image_size: int = 48
    n_objects: int = 4
    n_zones: int = 3
    text_len: int = 8
    action_clip: float = 0.08
    episode_horizon: int = 80
    execute_horizon: int = 8
    success_radius: float = 0.14
    grasp_radius: float = 0.10
    object_half: float = 0.05
    zone_half: float = 0.10
    margin: float = 0.12
    min_sep: float = 0.22
    max_retries: int = 20

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError("image_size too small to render the scene")
        if not 1 <= self.n_objects <= len(COLOR_NAMES):
            raise ValueError(f"n_objects must be in [1, {len(COLOR_NAMES)}]")
        if not 1 <= self.n_zones <= len(ZONE_NAMES):
            raise ValueError(f"n_zones must be in [1, {len(ZONE_NAMES)}]")
        if self.text_len < 4:
            raise ValueError("text_len must hold a 4-token instruction")
        if not 1 <= self.execute_horizon <= self.episode_horizon:
            raise ValueError("execute_horizon must be in [1, episode_horizon]")
        if self.action_clip <= 0 or self.success_radius <= 0 or self.grasp_radius <= 0:
            raise ValueError("radii and clip must be positive")
        # objects placed at least min_sep apart can never start inside a zone
        if self.min_sep <= self.success_radius:
            raise ValueError("min_sep must exceed success_radius")


@dataclass(frozen=True, eq=False)
class TaskSpec:
    task_id: int
    object_idx: int
    zone_idx: int
    instruction: str
    tokens: np.ndarray


@dataclass
class WorldState:
    effector: np.ndarray  # (2,) in [0, 1]
    gripper: float  # 0 open, 1 closed
    objects: np.ndarray  # (n_objects, 2)
    zones: np.ndarray  # (n_zones, 2)
    held: int  # object index, -1 when empty

    def copy(self) -> "WorldState":
        return WorldState(
            self.effector.copy(), self.gripper, self.objects.copy(), self.zones.copy(), self.held
        )


@dataclass(eq=False)
class Episode:
    task_id: int
    tokens: np.ndarray  # (text_len,) int32
    images: np.ndarray  # (T+1, S, S, 3) uint8
    proprio: np.ndarray  # (T+1, 3) float32
    actions: np.ndarray | None  # (T, 3) float32, None for action-free storage
    success: bool
    nan_flag: bool = False

    def check(self) -> None:
        if self.actions is not None and len(self.actions) != len(self.images) - 1:
            raise ValueError("episode must satisfy len(actions) == len(observations) - 1")
        if len(self.proprio) != len(self.images):
            raise ValueError("proprio and image streams must have equal length")


@dataclass(eq=False)
class ChunkSample:
    image: np.ndarray  # (S, S, 3) uint8, observation at chunk start
    tokens: np.ndarray  # (text_len,) int32
    proprio: np.ndarray  # (3,) float32
    actions: np.ndarray | None  # (horizon, 3) float32 raw action space
    future_image: np.ndarray  # (S, S, 3) uint8, observation `horizon` steps ahead
    task_id: int


# ----------------------------------------------------------------- tasks --


def tokenize_instruction(instruction: str, text_len: int) -> np.ndarray:
    toks = [VOCAB.index(w) for w in instruction.split()]
    if len(toks) > text_len:
        raise ValueError("instruction longer than text_len")
    return np.array(toks + [0] * (text_len - len(toks)), dtype=np.int32)


def make_task_suite(n_tasks: int, seed: int, cfg: WorldConfig = WorldConfig()) -> list[TaskSpec]:
    """Sample ``n_tasks`` distinct (object color, zone) pairings."""
    combos = [(o, z) for o in range(cfg.n_objects) for z in range(cfg.n_zones)]
    if not 1 <= n_tasks <= len(combos):
        raise ValueError(f"n_tasks must be in [1, {len(combos)}]")
    rng = np.random.default_rng(np.random.SeedSequence([0x5417E, seed]))
    order = rng.permutation(len(combos))
    suite = []
    for tid in range(n_tasks):
        o, z = combos[order[tid]]
        instr = f"pick {COLOR_NAMES[o]} place {ZONE_NAMES[z]}"
        suite.append(
            TaskSpec(tid, o, z, instr, tokenize_instruction(instr, cfg.text_len))
        )
    return suite


# ----------------------------------------------------------------- world --


def sample_world_state(rng: np.random.Generator, cfg: WorldConfig) -> WorldState:
    """Scatter objects and zones with pairwise separation >= min_sep."""
    pts: list[np.ndarray] = []
    for _ in range(cfg.n_objects + cfg.n_zones):
        for _attempt in range(1000):
            p = rng.uniform(cfg.margin, 1.0 - cfg.margin, size=2)
            if all(np.linalg.norm(p - q) >= cfg.min_sep for q in pts):
                pts.append(p)
                break
        else:
            raise RuntimeError("could not place entities; loosen min_sep or margin")
    arr = np.array(pts)
    eff = rng.uniform(cfg.margin, 1.0 - cfg.margin, size=2)
    return WorldState(eff, 0.0, arr[: cfg.n_objects], arr[cfg.n_objects :], -1)


def success(task: TaskSpec, state: WorldState, cfg: WorldConfig) -> bool:
    """Object inside its zone and not currently grasped."""
    d = np.linalg.norm(state.objects[task.object_idx] - state.zones[task.zone_idx])
    return bool(d <= cfg.success_radius and state.held != task.object_idx)


def sample_initial_state(task: TaskSpec, rng: np.random.Generator, cfg: WorldConfig) -> WorldState:
    # min_sep > success_radius already rules out instant success; keep the
    # guard so looser configs stay safe
    for _ in range(100):
        state = sample_world_state(rng, cfg)
        if not success(task, state, cfg):
            return state
    raise RuntimeError("could not sample a non-trivial initial state")


def step_world(state: WorldState, action: np.ndarray, cfg: WorldConfig) -> WorldState:
    """Apply one bounded delta + gripper command; returns a new state."""
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (3,):
        raise ValueError(f"action must have shape (3,), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise FloatingPointError("non-finite action")
    delta = np.clip(a[:2], -cfg.action_clip, cfg.action_clip)
    eff = np.clip(state.effector + delta, 0.0, 1.0)
    objects = state.objects.copy()
    held = state.held
    if held >= 0:
        objects[held] = eff
    closed = bool(a[2] > 0.5)
    if closed and held < 0:
        dists = np.linalg.norm(objects - eff, axis=1)
        j = int(np.argmin(dists))
        if dists[j] <= cfg.grasp_radius:
            held = j
            objects[j] = eff
    elif not closed:
        held = -1
    return WorldState(eff, 1.0 if closed else 0.0, objects, state.zones.copy(), held)


def proprio(state: WorldState) -> np.ndarray:
    return np.array([state.effector[0], state.effector[1], state.gripper], dtype=np.float32)


# ---------------------------------------------------------------- render --


def _px(v: float, size: int) -> int:
    return int(np.clip(np.round(v * (size - 1)), 0, size - 1))


def _fill_box(img, cx, cy, half, color):
    size = img.shape[0]
    x0, x1 = _px(cx - half, size), _px(cx + half, size)
    y0, y1 = _px(cy - half, size), _px(cy + half, size)
    img[y0 : y1 + 1, x0 : x1 + 1] = color


def _outline_box(img, cx, cy, half, color, thickness=2):
    size = img.shape[0]
    x0, x1 = _px(cx - half, size), _px(cx + half, size)
    y0, y1 = _px(cy - half, size), _px(cy + half, size)
    for t in range(min(thickness, (x1 - x0) // 2 + 1, (y1 - y0) // 2 + 1)):
        img[y0 + t, x0 : x1 + 1] = color
        img[y1 - t, x0 : x1 + 1] = color
        img[y0 : y1 + 1, x0 + t] = color
        img[y0 : y1 + 1, x1 - t] = color


def _cross(img, cx, cy, color, arm=2):
    size = img.shape[0]
    x, y = _px(cx, size), _px(cy, size)
    img[max(y - arm, 0) : y + arm + 1, x] = color
    img[y, max(x - arm, 0) : x + arm + 1] = color


def render(state: WorldState, cfg: WorldConfig) -> np.ndarray:
    """Top-down uint8 image; zones behind objects behind the effector."""
    img = np.empty((cfg.image_size, cfg.image_size, 3), dtype=np.uint8)
    img[:] = BACKGROUND_RGB
    for z in range(cfg.n_zones):
        _outline_box(img, state.zones[z, 0], state.zones[z, 1], cfg.zone_half, ZONE_RGB[z])
    for o in range(cfg.n_objects):
        _fill_box(img, state.objects[o, 0], state.objects[o, 1], cfg.object_half, OBJECT_RGB[o])
    _cross(img, state.effector[0], state.effector[1], EFFECTOR_RGB)
    return img


# ---------------------------------------------------------------- expert --


def scripted_expert(
    task: TaskSpec, state: WorldState, noise_scale: float, rng: np.random.Generator, cfg: WorldConfig = WorldConfig()
) -> np.ndarray:
    """One expert action: reach, grasp, carry to the zone, release.

    Movement gets Gaussian jitter of ``noise_scale``; the jitter draw
    happens unconditionally so the rng stream does not depend on scale.
    """
    eff = state.effector
    jitter = noise_scale * rng.standard_normal(2)
    if success(task, state, cfg):
        delta = np.zeros(2)
        grip = 0.0
    elif state.held == task.object_idx:
        zone = state.zones[task.zone_idx]
        if np.linalg.norm(eff - zone) <= 0.5 * cfg.success_radius:
            delta = np.zeros(2)
            grip = 0.0  # release inside the zone
        else:
            delta = zone - eff
            grip = 1.0
    elif state.held >= 0:
        delta = np.zeros(2)
        grip = 0.0  # drop a wrong object
    else:
        obj = state.objects[task.object_idx]
        delta = obj - eff
        grip = 1.0 if np.linalg.norm(obj - eff) <= 0.75 * cfg.grasp_radius else 0.0
    d = np.clip(delta + jitter, -cfg.action_clip, cfg.action_clip)
    return np.array([d[0], d[1], grip], dtype=np.float32)


def run_expert_episode(
    task: TaskSpec, rng: np.random.Generator, cfg: WorldConfig, noise_scale: float = 0.01
) -> Episode:
    state = sample_initial_state(task, rng, cfg)
    images = [render(state, cfg)]
    qs = [proprio(state)]
    acts = []
    for _t in range(cfg.episode_horizon):
        a = scripted_expert(task, state, noise_scale, rng, cfg)
        state = step_world(state, a, cfg)
        acts.append(a)
        images.append(render(state, cfg))
        qs.append(proprio(state))
        if success(task, state, cfg):
            break
    ep = Episode(
        task_id=task.task_id,
        tokens=task.tokens.copy(),
        images=np.stack(images),
        proprio=np.stack(qs),
        actions=np.stack(acts).astype(np.float32),
        success=success(task, state, cfg),
    )
    ep.check()
    return ep


def expert_chunk_policy(task: TaskSpec, cfg: WorldConfig, noise_scale: float = 0.0, seed=0):
    """Adapt the per-step expert to the chunked policy interface.

    The wrapper forward-simulates its own shadow world; because dynamics
    are deterministic and the executed actions are exactly the returned
    chunk prefix, the shadow stays in lockstep with the real rollout.
    """
    rng = np.random.default_rng(seed)
    shadow: dict = {"state": None}

    def policy_fn(image, tokens, q):
        if shadow["state"] is None:
            raise RuntimeError("expert policy needs reset(initial_state) before rollout")
        sim = shadow["state"]
        actions = []
        for _ in range(cfg.execute_horizon):
            a = scripted_expert(task, sim, noise_scale, rng, cfg)
            sim = step_world(sim, a, cfg)
            actions.append(a)
        shadow["state"] = sim
        return np.stack(actions)

    def reset(initial_state: WorldState) -> None:
        shadow["state"] = initial_state.copy()

    policy_fn.reset = reset
    return policy_fn


# --------------------------------------------------------------- rollout --


def rollout(
    policy_fn,
    task: TaskSpec,
    initial_state: WorldState,
    max_steps: int,
    cfg: WorldConfig = WorldConfig(),
) -> tuple[Episode, bool]:
    """Closed-loop evaluation: replan every ``execute_horizon`` steps.

    ``policy_fn(image, tokens, proprio)`` returns an action chunk; the
    first ``execute_horizon`` actions are executed before replanning. A
    non-finite chunk ends the episode unsuccessfully with ``nan_flag``.
    """
    state = initial_state.copy()
    images = [render(state, cfg)]
    qs = [proprio(state)]
    acts: list[np.ndarray] = []
    nan_flag = False
    done = success(task, state, cfg)
    while len(acts) < max_steps and not done and not nan_flag:
        chunk = np.asarray(policy_fn(images[-1], task.tokens, qs[-1]))
        if not np.all(np.isfinite(chunk)):
            nan_flag = True
            break
        for a in chunk[: cfg.execute_horizon]:
            state = step_world(state, a, cfg)
            acts.append(
                np.array(
                    [
                        np.clip(a[0], -cfg.action_clip, cfg.action_clip),
                        np.clip(a[1], -cfg.action_clip, cfg.action_clip),
                        a[2],
                    ],
                    dtype=np.float32,
                )
            )
            images.append(render(state, cfg))
            qs.append(proprio(state))
            done = success(task, state, cfg)
            if done or len(acts) >= max_steps:
                break
    ep = Episode(
        task_id=task.task_id,
        tokens=task.tokens.copy(),
        images=np.stack(images),
        proprio=np.stack(qs),
        actions=np.stack(acts).astype(np.float32) if acts else np.zeros((0, 3), np.float32),
        success=bool(done and not nan_flag),
        nan_flag=nan_flag,
    )
    ep.check()
    return ep, ep.success


# ----------------------------------------------------------- dataset i/o --


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(_canonical_json(obj).encode()).hexdigest()


def suite_to_manifest(suite: list[TaskSpec]) -> list[dict]:
    return [
        {
            "task_id": t.task_id,
            "object_idx": t.object_idx,
            "zone_idx": t.zone_idx,
            "instruction": t.instruction,
        }
        for t in suite
    ]


def suite_from_manifest(entries: list[dict], cfg: WorldConfig) -> list[TaskSpec]:
    return [
        TaskSpec(
            e["task_id"],
            e["object_idx"],
            e["zone_idx"],
            e["instruction"],
            tokenize_instruction(e["instruction"], cfg.text_len),
        )
        for e in entries
    ]


def generate_dataset(
    suite: list[TaskSpec],
    demos_per_task: int,
    action_free: bool,
    seed: int,
    out_path: str,
    cfg: WorldConfig = WorldConfig(),
    noise_scale: float = 0.01,
) -> dict:
    """Write expert demonstrations for every task to ``out_path`` (npz).

    Only successful episodes are stored. Each (task, demo) slot owns an
    independent seed; failures retry with fresh draws from that slot's
    stream, erroring out after ``cfg.max_retries`` attempts.
    """
    if demos_per_task < 1:
        raise ValueError("demos_per_task must be >= 1")
    episodes: list[Episode] = []
    for task in suite:
        for d in range(demos_per_task):
            rng = np.random.default_rng(np.random.SeedSequence([seed, task.task_id, d]))
            for _attempt in range(cfg.max_retries):
                ep = run_expert_episode(task, rng, cfg, noise_scale)
                if ep.success:
                    break
            else:
                raise RuntimeError(
                    f"task {task.task_id}: no successful demo in {cfg.max_retries} attempts"
                )
            if action_free:
                ep = Episode(ep.task_id, ep.tokens, ep.images, ep.proprio, None, True)
            episodes.append(ep)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "action_free": action_free,
        "noise_scale": noise_scale,
        "demos_per_task": demos_per_task,
        "n_episodes": len(episodes),
        "world": asdict(cfg),
        "vocab": list(VOCAB),
        "suite": suite_to_manifest(suite),
    }
    manifest["world_hash"] = config_hash({"world": manifest["world"], "vocab": manifest["vocab"]})
    save_episodes(out_path, episodes, manifest)
    return manifest


def save_episodes(path: str, episodes: list[Episode], manifest: dict) -> None:
    arrays: dict[str, np.ndarray] = {
        "__manifest__": np.frombuffer(_canonical_json(manifest).encode(), dtype=np.uint8)
    }
    for i, ep in enumerate(episodes):
        key = f"ep{i:05d}"
        arrays[f"{key}.image"] = ep.images
        arrays[f"{key}.proprio"] = ep.proprio
        if ep.actions is not None:
            arrays[f"{key}.actions"] = ep.actions
        arrays[f"{key}.tokens"] = ep.tokens
        arrays[f"{key}.task_id"] = np.int64(ep.task_id)
        arrays[f"{key}.success"] = np.bool_(ep.success)
    np.savez_compressed(path, **arrays)


@dataclass
class Dataset:
    manifest: dict
    episodes: list[Episode]

    @property
    def action_free(self) -> bool:
        return bool(self.manifest["action_free"])

    def world_config(self) -> WorldConfig:
        return WorldConfig(**self.manifest["world"])

    def suite(self) -> list[TaskSpec]:
        return suite_from_manifest(self.manifest["suite"], self.world_config())

    def chunk_index(self) -> list[tuple[int, int]]:
        """All (episode, start time) pairs with at least one real action."""
        return [(i, t) for i, ep in enumerate(self.episodes) for t in range(len(ep.images) - 1)]

    def get_chunk(self, ep_idx: int, t: int, horizon: int) -> ChunkSample:
        """Chunk starting at time t; past the episode end the final action
        repeats and the future frame clamps to the final observation."""
        ep = self.episodes[ep_idx]
        n_act = len(ep.images) - 1
        if not 0 <= t < n_act:
            raise IndexError(f"chunk start {t} out of range [0, {n_act})")
        if ep.actions is not None:
            got = ep.actions[t : t + horizon]
            acts = np.empty((horizon, 3), dtype=np.float32)
            acts[: len(got)] = got
            acts[len(got) :] = got[-1]
        else:
            acts = None
        fut = ep.images[min(t + horizon, n_act)]
        return ChunkSample(
            image=ep.images[t],
            tokens=ep.tokens,
            proprio=ep.proprio[t],
            actions=acts,
            future_image=fut,
            task_id=ep.task_id,
        )


def load_dataset(path: str) -> Dataset:
    with np.load(path) as z:
        manifest = json.loads(bytes(z["__manifest__"]).decode())
        if manifest.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported dataset schema: {manifest.get('schema_version')}")
        episodes = []
        for i in range(manifest["n_episodes"]):
            key = f"ep{i:05d}"
            ep = Episode(
                task_id=int(z[f"{key}.task_id"]),
                tokens=z[f"{key}.tokens"],
                images=z[f"{key}.image"],
                proprio=z[f"{key}.proprio"],
                actions=z[f"{key}.actions"] if f"{key}.actions" in z else None,
                success=bool(z[f"{key}.success"]),
            )
            ep.check()
            episodes.append(ep)
    return Dataset(manifest, episodes)
