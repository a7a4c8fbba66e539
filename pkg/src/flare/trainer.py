"""Training loops: embedding pretraining and policy fitting.

Random-draw discipline (load-bearing for reproducibility and for the
policy-only equivalence guarantee): parameter init consumes
SeedSequence([seed, 1]), a random target embedding SeedSequence([seed, 2]),
the step stream SeedSequence([seed, 3]), the pretraining heldout split
SeedSequence([seed, 4]) and its probe SeedSequence([seed, 5]). Each step
draws, in order: labeled batch indices, labeled symmetry elements (when
augmenting), action-free batch indices and symmetry elements (only when
an action-free batch is due), labeled noise, labeled tau, action-free
noise. With lam = 0 and no action-free data the stream is therefore
identical to a plain flow-matching trainer's, no target model is built,
and no EMA update runs.

Action-free samples enter the model as pure noise at tau = 0 and
contribute only the alignment term; labeled samples contribute flow
matching and alignment. Each loss term averages over the samples that
feed it (a step without labeled samples has flow loss exactly zero).
The EMA target update runs after the optimizer step.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from . import alignment, flowmatch, model
from .autodiff import Tensor, square
from .config import ModelConfig
from .datagen import Dataset, WorldConfig, config_hash, load_dataset
from .flowmatch import FlowConfig
from .nn import Params, freeze_params, subtree, zero_grads


@dataclass(frozen=True)
class TrainConfig:
    # optimization
    steps: int = 20000
    batch_size: int = 64
    lr: float = 3e-4
    beta1: float = 0.95
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    warmup_ratio: float = 0.05
    # objective
    lam: float = 0.2
    l_tap: int = 6
    ema_rho: float = 0.995
    action_free_fraction: float = 0.5
    target_embedding: str = "policy"  # "policy" (copy at step 0) or "random"
    augment: bool = True  # per-sample square symmetries on training batches
    # architecture
    d_model: int = 128
    n_heads: int = 4
    patch_size: int = 8
    n_fusion_blocks: int = 4
    n_qformer_blocks: int = 2
    n_queries: int = 8
    n_future_tokens: int = 8
    n_dit_blocks: int = 8
    ffn_mult: int = 4
    horizon: int = 16
    k_steps: int = 4
    dtype: str = "float32"
    # bookkeeping
    seed: int = 0
    checkpoint_every: int = 1000
    init_embedding: str = ""
    heldout_fraction: float = 0.1
    heldout_every: int = 100

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 1 <= self.l_tap <= self.n_dit_blocks:
            raise ValueError(f"l_tap must be in [1, {self.n_dit_blocks}]")
        if not 0.0 <= self.ema_rho <= 1.0:
            raise ValueError("ema_rho must be in [0, 1]")
        if not 0.0 <= self.action_free_fraction < 1.0:
            raise ValueError("action_free_fraction must be in [0, 1)")
        if not 0.0 <= self.warmup_ratio <= 0.5:
            raise ValueError("warmup_ratio must be in [0, 0.5]")
        if self.target_embedding not in ("policy", "random"):
            raise ValueError("target_embedding must be 'policy' or 'random'")
        if self.lam > 0 and self.n_future_tokens != self.n_queries:
            raise ValueError("alignment requires n_future_tokens == n_queries")
        if self.lam > 0 and self.n_future_tokens == 0:
            raise ValueError("alignment requires future tokens")

    @staticmethod
    def from_file(path: str) -> "TrainConfig":
        with open(path) as f:
            raw = json.load(f)
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return TrainConfig(**raw)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    def hash(self) -> str:
        return config_hash(dataclasses.asdict(self))


def model_config(cfg: TrainConfig, ds: Dataset) -> ModelConfig:
    world = ds.world_config()
    return ModelConfig(
        d_model=cfg.d_model,
        n_heads=cfg.n_heads,
        image_size=world.image_size,
        patch_size=cfg.patch_size,
        n_channels=3,
        text_len=world.text_len,
        vocab_size=len(ds.manifest["vocab"]),
        n_fusion_blocks=cfg.n_fusion_blocks,
        n_queries=cfg.n_queries,
        n_qformer_blocks=cfg.n_qformer_blocks,
        d_state=3,
        d_action=3,
        horizon=cfg.horizon,
        n_future_tokens=cfg.n_future_tokens,
        n_dit_blocks=cfg.n_dit_blocks,
        ffn_mult=cfg.ffn_mult,
        dtype=cfg.dtype,
    )


def flow_config(cfg: TrainConfig) -> FlowConfig:
    return FlowConfig(k_steps=cfg.k_steps, horizon=cfg.horizon)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr over warmup_ratio * steps, then cosine to zero."""
    warm = int(round(cfg.warmup_ratio * cfg.steps))
    if step < warm:
        return cfg.lr * step / warm
    frac = (step - warm) / max(1, cfg.steps - warm)
    return cfg.lr * 0.5 * (1.0 + float(np.cos(np.pi * frac)))


class AdamW:
    """Decoupled weight decay Adam; parameters without gradients are skipped
    entirely (no moment update, no decay)."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Params, lr: float, cfg: TrainConfig) -> None:
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * g
            v = self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps) + cfg.weight_decay * p.data
            p.data = p.data - lr * update


@dataclass
class TrainState:
    params: Params
    target: dict[str, np.ndarray] | None
    opt: AdamW
    rng: np.random.Generator
    step: int
    model_cfg: ModelConfig
    world_cfg: WorldConfig


@dataclass(eq=False)
class Batch:
    images: np.ndarray  # (B, S, S, 3) uint8
    tokens: np.ndarray  # (B, T) int32
    proprio: np.ndarray  # (B, 3) float32
    actions: np.ndarray | None  # (B, H, 3) float32 raw space
    future_images: np.ndarray  # (B, S, S, 3) uint8
    pairs: list | None = None  # source (episode, t) ids, kept for diagnostics

    def __len__(self):
        return len(self.images)


def make_batch(ds: Dataset, pairs, horizon: int, with_actions: bool) -> Batch:
    chunks = [ds.get_chunk(e, t, horizon) for e, t in pairs]
    return Batch(
        images=np.stack([c.image for c in chunks]),
        tokens=np.stack([c.tokens for c in chunks]),
        proprio=np.stack([c.proprio for c in chunks]),
        actions=np.stack([c.actions for c in chunks]) if with_actions else None,
        future_images=np.stack([c.future_image for c in chunks]),
        pairs=[(int(e), int(t)) for e, t in pairs],
    )


N_SYMMETRIES = 8  # dihedral group of the square: 4 rotations x optional flip


def _transform_image(img: np.ndarray, g: int) -> np.ndarray:
    out = np.rot90(img, g & 3)
    if g & 4:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def _transform_points(xy: np.ndarray, g: int) -> np.ndarray:
    """Map positions in [0, 1]^2 the way _transform_image moves pixels."""
    x, y = xy[..., 0].copy(), xy[..., 1].copy()
    for _ in range(g & 3):
        x, y = y, 1.0 - x
    if g & 4:
        x = 1.0 - x
    return np.stack([x, y], axis=-1)


def _transform_deltas(dxy: np.ndarray, g: int) -> np.ndarray:
    dx, dy = dxy[..., 0].copy(), dxy[..., 1].copy()
    for _ in range(g & 3):
        dx, dy = dy, -dx
    if g & 4:
        dx = -dx
    return np.stack([dx, dy], axis=-1)


def augment_batch(batch: Batch, gs: np.ndarray) -> Batch:
    """Per-sample square symmetries applied jointly to images, effector
    position, and action deltas.

    The world is equivariant under them: the pixel grid maps onto itself,
    the per-axis action clip box is symmetric, and expert jitter is
    isotropic, so every transformed sample is a demonstration the expert
    could have produced in the transformed layout. Gripper channels and
    instruction tokens name colors, not directions, and pass through.
    """
    images = np.stack([_transform_image(im, g) for im, g in zip(batch.images, gs)])
    fut = np.stack([_transform_image(im, g) for im, g in zip(batch.future_images, gs)])
    proprio = batch.proprio.copy()
    for i, g in enumerate(gs):
        proprio[i, :2] = _transform_points(batch.proprio[i, :2], g)
    actions = None
    if batch.actions is not None:
        actions = batch.actions.copy()
        for i, g in enumerate(gs):
            actions[i, :, :2] = _transform_deltas(batch.actions[i, :, :2], g)
    return Batch(images, batch.tokens, proprio, actions, fut, batch.pairs)


def init_train_state(cfg: TrainConfig, mc: ModelConfig, world: WorldConfig) -> TrainState:
    params = model.init_policy(mc, np.random.default_rng(np.random.SeedSequence([cfg.seed, 1])))
    if cfg.init_embedding:
        load_embedding_into(params, cfg.init_embedding, mc)
    target = None
    if cfg.lam > 0:
        if cfg.target_embedding == "policy":
            target = alignment.make_target(params)
        else:
            fresh: Params = {}
            from . import encoders

            encoders.init_embedding_model(
                fresh, mc, np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
            )
            target = {k: v.data for k, v in fresh.items()}
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    return TrainState(params, target, AdamW(), rng, 0, mc, world)


def train_step(state: TrainState, batch_l: Batch | None, batch_af: Batch | None, cfg: TrainConfig) -> dict:
    """One optimizer step; mutates and returns metrics for the state's step.

    ``batch_l`` may be None for an action-free-only step (requires lam > 0);
    flow matching then contributes exactly zero.
    """
    mc = state.model_cfg
    fc = flow_config(cfg)
    params = state.params
    dtype = mc.np_dtype

    n_l = len(batch_l) if batch_l is not None else 0
    n_af = len(batch_af) if batch_af is not None else 0
    want_future = cfg.lam > 0
    if n_l == 0 and n_af == 0:
        raise ValueError("train_step needs at least one sample")
    if n_l == 0 and not want_future:
        raise ValueError("an action-free-only step requires lam > 0")
    zero_grads(params)

    if n_l:
        eps_l = state.rng.standard_normal((n_l, mc.horizon, mc.d_action))
        tau_l = flowmatch.sample_tau(fc, state.rng, size=n_l)
        a_norm = model.normalize_actions(batch_l.actions, state.world_cfg.action_clip)
        a_tau = flowmatch.noise_chunk(a_norm, tau_l, eps_l)
        v_target = flowmatch.velocity_target(a_norm, eps_l).astype(dtype)
        images = batch_l.images
        tokens = batch_l.tokens
        q = batch_l.proprio
        fut_images = batch_l.future_images
        tau = tau_l
        if n_af:
            eps_af = state.rng.standard_normal((n_af, mc.horizon, mc.d_action))
            images = np.concatenate([images, batch_af.images])
            tokens = np.concatenate([tokens, batch_af.tokens])
            q = np.concatenate([q, batch_af.proprio])
            fut_images = np.concatenate([fut_images, batch_af.future_images])
            a_tau = np.concatenate([a_tau, eps_af])  # action-free rows ride at tau = 0
            tau = np.concatenate([tau_l, np.zeros(n_af)])
    else:
        a_tau = state.rng.standard_normal((n_af, mc.horizon, mc.d_action))
        tau = np.zeros(n_af)
        images = batch_af.images
        tokens = batch_af.tokens
        q = batch_af.proprio
        fut_images = batch_af.future_images

    v_pred, fut_pred = model.policy_forward(
        params, images, tokens, q, a_tau.astype(dtype), tau, mc, cfg.l_tap,
        want_actions=n_l > 0, want_future=want_future,
    )
    if n_l:
        v_pred_l = v_pred[:n_l] if n_af else v_pred
        fm = square(v_pred_l - Tensor(v_target)).mean()
    else:
        fm = Tensor(np.asarray(0.0, dtype=dtype))

    al = None
    if want_future:
        targets = alignment.flare_targets(state.target, fut_images, tokens, mc)
        al = alignment.align_loss(fut_pred, targets)
    total = alignment.combined_loss(fm, al, cfg.lam)
    if not np.isfinite(float(total.item())):
        raise FloatingPointError(
            f"non-finite loss at step {state.step}: labeled chunks "
            f"{batch_l.pairs if batch_l is not None else None}, action-free chunks "
            f"{batch_af.pairs if batch_af is not None else None}"
        )
    total.backward()

    lr = lr_schedule(state.step, cfg)
    state.opt.step(params, lr, cfg)
    if cfg.lam > 0:
        alignment.ema_update(state.target, subtree(params, "vl."), cfg.ema_rho)
    state.step += 1
    return {
        "step": state.step,
        "loss": float(total.item()),
        "fm_loss": float(fm.item()),
        "align_loss": float(al.item()) if al is not None else 0.0,
        "lr": lr,
        "n_labeled": n_l,
        "n_action_free": n_af,
    }


# ----------------------------------------------------------- checkpoints --


def save_checkpoint(path: str, state: TrainState, cfg: TrainConfig, data_hash: str) -> None:
    arrays: dict[str, np.ndarray] = {}
    for k, p in state.params.items():
        arrays[f"param/{k}"] = p.data
    if state.target is not None:
        for k, v in state.target.items():
            arrays[f"ema/{k}"] = v
    for k, v in state.opt.m.items():
        arrays[f"m/{k}"] = v
        arrays[f"v/{k}"] = state.opt.v[k]
    meta = {
        "cfg": dataclasses.asdict(cfg),
        "cfg_hash": cfg.hash(),
        "data_hash": data_hash,
        "model_cfg": dataclasses.asdict(state.model_cfg),
        "world": dataclasses.asdict(state.world_cfg),
        "step": state.step,
        "adam_t": state.opt.t,
        "rng_state": state.rng.bit_generator.state,
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    return meta, arrays


def restore_policy(path: str) -> tuple[Params, ModelConfig, FlowConfig, WorldConfig, dict]:
    """Rebuild a frozen-shape policy from a checkpoint, failing loudly on
    any missing or shape-mismatched parameter."""
    meta, arrays = load_checkpoint(path)
    mc = ModelConfig(**meta["model_cfg"])
    world = WorldConfig(**meta["world"])
    cfg = TrainConfig(**meta["cfg"])
    params = model.init_policy(mc, np.random.default_rng(0))
    for k, p in params.items():
        key = f"param/{k}"
        if key not in arrays:
            raise ValueError(f"checkpoint missing parameter {k}")
        if arrays[key].shape != p.data.shape:
            raise ValueError(
                f"shape mismatch for {k}: checkpoint {arrays[key].shape} vs model {p.data.shape}"
            )
        p.data = arrays[key]
    extra = [k for k in arrays if k.startswith("param/") and k[6:] not in params]
    if extra:
        raise ValueError(f"checkpoint has unknown parameters: {extra[:4]}")
    return params, mc, flow_config(cfg), world, meta


def restore_train_state(path: str, cfg: TrainConfig, data_hash: str) -> TrainState:
    meta, arrays = load_checkpoint(path)
    if meta["cfg_hash"] != cfg.hash():
        raise ValueError("resume config does not match checkpoint config")
    if meta["data_hash"] != data_hash:
        raise ValueError("resume dataset does not match checkpoint dataset")
    params, mc, _fc, world, _ = restore_policy(path)
    target = None
    if cfg.lam > 0:
        target = {k[4:]: arrays[k].copy() for k in arrays if k.startswith("ema/")}
        if not target:
            raise ValueError("checkpoint lacks the EMA target required by lam > 0")
    opt = AdamW()
    opt.t = meta["adam_t"]
    for k in arrays:
        if k.startswith("m/"):
            name = k[2:]
            opt.m[name] = arrays[k].copy()
            opt.v[name] = arrays[f"v/{name}"].copy()
    rng = np.random.default_rng(0)
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(params, target, opt, rng, meta["step"], mc, world)


# ----------------------------------------------------------------- loops --


def _dataset_hash(ds: Dataset) -> str:
    return config_hash(ds.manifest)


def fit(
    cfg: TrainConfig,
    data_path: str,
    out_dir: str,
    action_free_path: str | None = None,
    resume: str | None = None,
) -> dict:
    """Train a policy; writes checkpoints and a metrics log into out_dir."""
    ds = load_dataset(data_path)
    if ds.action_free:
        raise ValueError("policy training requires a labeled dataset")
    af = load_dataset(action_free_path) if action_free_path else None
    if af is not None:
        if cfg.lam == 0:
            raise ValueError("action-free co-training requires lam > 0")
        if af.manifest["world_hash"] != ds.manifest["world_hash"]:
            raise ValueError("action-free dataset world does not match labeled dataset")
    data_hash = _dataset_hash(ds)
    mc = model_config(cfg, ds)
    os.makedirs(out_dir, exist_ok=True)

    if resume:
        state = restore_train_state(resume, cfg, data_hash)
        mode = "a"
    else:
        state = init_train_state(cfg, mc, ds.world_config())
        mode = "w"

    idx_l = ds.chunk_index()
    idx_af = af.chunk_index() if af is not None else []
    n_af = int(round(cfg.batch_size * cfg.action_free_fraction)) if af is not None else 0
    n_af = min(n_af, cfg.batch_size - 1)
    n_l = cfg.batch_size - n_af

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    checkpoints: list[str] = []
    with open(metrics_path, mode) as log:
        for step in range(state.step, cfg.steps):
            pick_l = state.rng.integers(0, len(idx_l), size=n_l)
            if cfg.augment:
                gs_l = state.rng.integers(0, N_SYMMETRIES, size=n_l)
            batch_l = make_batch(ds, [idx_l[i] for i in pick_l], cfg.horizon, with_actions=True)
            if cfg.augment:
                batch_l = augment_batch(batch_l, gs_l)
            batch_af = None
            if n_af:
                pick_af = state.rng.integers(0, len(idx_af), size=n_af)
                if cfg.augment:
                    gs_af = state.rng.integers(0, N_SYMMETRIES, size=n_af)
                batch_af = make_batch(af, [idx_af[i] for i in pick_af], cfg.horizon, with_actions=False)
                if cfg.augment:
                    batch_af = augment_batch(batch_af, gs_af)
            metrics = train_step(state, batch_l, batch_af, cfg)
            log.write(json.dumps(metrics, sort_keys=True) + "\n")
            if (step + 1) % cfg.checkpoint_every == 0 or step + 1 == cfg.steps:
                ck = os.path.join(out_dir, f"ckpt_{step + 1:07d}.npz")
                save_checkpoint(ck, state, cfg, data_hash)
                if ck not in checkpoints:
                    checkpoints.append(ck)
    return {"checkpoints": checkpoints, "final_step": state.step, "metrics_path": metrics_path}


def _probe_fm_loss(state: TrainState, batch: Batch, eps: np.ndarray, tau: np.ndarray, cfg: TrainConfig) -> float:
    """Flow-matching loss on a fixed probe batch with frozen parameters."""
    mc = state.model_cfg
    frozen = freeze_params(state.params)
    a_norm = model.normalize_actions(batch.actions, state.world_cfg.action_clip)
    a_tau = flowmatch.noise_chunk(a_norm, tau, eps).astype(mc.np_dtype)
    v_target = flowmatch.velocity_target(a_norm, eps)
    v_pred, _ = model.policy_forward(
        frozen, batch.images, batch.tokens, batch.proprio, a_tau, tau, mc, cfg.l_tap
    )
    return flowmatch.fm_loss(v_pred.data, v_target.astype(mc.np_dtype))


def pretrain_embedding(data_path: str, cfg: TrainConfig, out_dir: str, probe_size: int = 64) -> dict:
    """Stage-one training of the embedding model through the flow objective.

    The q-former trains jointly with a throwaway transformer + action
    decoder (no future tokens, no alignment); only the embedding subtree is
    saved. Logs heldout flow-matching loss on a fixed probe before the
    first step and periodically after.
    """
    ds = load_dataset(data_path)
    if ds.action_free:
        raise ValueError("embedding pretraining requires expert actions")
    if len(ds.episodes) < 2:
        raise ValueError("need at least 2 episodes to hold one out")
    cfg = dataclasses.replace(
        cfg, lam=0.0, n_future_tokens=0, action_free_fraction=0.0, init_embedding=""
    )
    data_hash = _dataset_hash(ds)
    mc = model_config(cfg, ds)
    os.makedirs(out_dir, exist_ok=True)

    split_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
    perm = split_rng.permutation(len(ds.episodes))
    n_held = max(1, int(round(cfg.heldout_fraction * len(ds.episodes))))
    held = set(perm[:n_held].tolist())
    idx_train = [(e, t) for e, t in ds.chunk_index() if e not in held]
    idx_held = [(e, t) for e, t in ds.chunk_index() if e in held]
    if not idx_train:
        raise ValueError("heldout split consumed every episode")

    probe_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 5]))
    take = min(probe_size, len(idx_held))
    probe_pairs = [idx_held[i] for i in probe_rng.choice(len(idx_held), size=take, replace=False)]
    probe = make_batch(ds, probe_pairs, cfg.horizon, with_actions=True)
    probe_eps = probe_rng.standard_normal((take, cfg.horizon, 3))
    probe_tau = flowmatch.sample_tau(flow_config(cfg), probe_rng, size=take)

    state = init_train_state(cfg, mc, ds.world_config())
    metrics_path = os.path.join(out_dir, "pretrain_metrics.jsonl")
    heldout_first = heldout_last = None
    with open(metrics_path, "w") as log:
        for step in range(cfg.steps + 1):
            if step % cfg.heldout_every == 0 or step == cfg.steps:
                held_fm = _probe_fm_loss(state, probe, probe_eps, probe_tau, cfg)
                if heldout_first is None:
                    heldout_first = held_fm
                heldout_last = held_fm
                log.write(json.dumps({"heldout_fm": held_fm, "step": step}, sort_keys=True) + "\n")
            if step == cfg.steps:
                break
            pick = state.rng.integers(0, len(idx_train), size=cfg.batch_size)
            if cfg.augment:
                gs = state.rng.integers(0, N_SYMMETRIES, size=cfg.batch_size)
            batch = make_batch(ds, [idx_train[i] for i in pick], cfg.horizon, with_actions=True)
            if cfg.augment:
                batch = augment_batch(batch, gs)
            metrics = train_step(state, batch, None, cfg)
            log.write(json.dumps(metrics, sort_keys=True) + "\n")

    out_path = os.path.join(out_dir, "embedding.npz")
    arrays = {f"param/{k}": v.data for k, v in subtree(state.params, "vl.").items()}
    meta = {
        "model_cfg": dataclasses.asdict(mc),
        "cfg_hash": cfg.hash(),
        "data_hash": data_hash,
        "heldout_first": heldout_first,
        "heldout_last": heldout_last,
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(out_path, **arrays)
    return {
        "path": out_path,
        "heldout_first": heldout_first,
        "heldout_last": heldout_last,
        "metrics_path": metrics_path,
    }


_EMBEDDING_ARCH_KEYS = (
    "d_model",
    "n_heads",
    "image_size",
    "patch_size",
    "text_len",
    "vocab_size",
    "n_fusion_blocks",
    "n_queries",
    "n_qformer_blocks",
    "ffn_mult",
    "dtype",
)


def load_embedding_into(params: Params, path: str, mc: ModelConfig) -> None:
    """Overwrite the policy's embedding subtree with pretrained weights."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        saved = json.loads(json.dumps(meta["model_cfg"]))
        for k in _EMBEDDING_ARCH_KEYS:
            if saved[k] != getattr(mc, k):
                raise ValueError(
                    f"pretrained embedding was built with {k}={saved[k]}, model wants {getattr(mc, k)}"
                )
        for k, p in subtree(params, "vl.").items():
            key = f"param/{k}"
            if key not in z.files:
                raise ValueError(f"embedding file missing {k}")
            arr = z[key]
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}")
            p.data = arr
