"""Training loop, autoregressive rollout and checkpoint I/O."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .mesh import NUM_NODE_TYPES, MeshGraph, SegmentAssignment, Trajectory
from .model import (DTYPE, M4GN, ModelConfig, Sample, SegmentContext, build_sample, collate,
                    loss_and_gradients, predict_change, prepare_context)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, state: dict):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
        self.last_good_state = state


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


@dataclass
class Episode:
    """One trajectory with its static segment context."""

    mesh: MeshGraph
    trajectory: Trajectory
    ctx: SegmentContext

    def states(self, regime: str) -> np.ndarray:
        return self.trajectory.features if regime == "eulerian" else self.trajectory.positions

    @property
    def T(self) -> int:
        return len(self.trajectory) - 1


def make_episode(traj: Trajectory, seg: SegmentAssignment, cfg: ModelConfig) -> Episode:
    return Episode(traj.mesh, traj, prepare_context(traj.mesh, seg, cfg))


def sample_at(cfg: ModelConfig, ep: Episode, t: int, noise: np.ndarray | None = None,
              with_target: bool = True) -> Sample:
    s = ep.states(cfg.regime)
    prev = s[t - 1] if t > 0 else s[t]
    return build_sample(cfg, ep.mesh, ep.ctx, s[t], prev, s[t + 1] if with_target else None, noise)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def _stats(a: np.ndarray, fixed_cols: slice | None = None):
    mean = a.mean(axis=0) if len(a) else np.zeros(a.shape[1])
    std = a.std(axis=0) if len(a) else np.ones(a.shape[1])
    std = np.where(std > 1e-12, std, 1.0)
    if fixed_cols is not None:
        mean[fixed_cols] = 0.0
        std[fixed_cols] = 1.0
    return mean, std


def compute_normalizers(cfg: ModelConfig, episodes: list[Episode]) -> dict:
    """Per-column mean/std of inputs and targets over clean training frames.

    Node-type one-hot columns are left unscaled.
    """
    xs, es, ws, ts = [], [], [], []
    for ep in episodes:
        for t in range(ep.T):
            s = sample_at(cfg, ep, t)
            xs.append(s.x)
            es.append(s.mesh_feat)
            ws.append(s.world_feat)
            ts.append(s.target[~s.kinematic])
    onehot = slice(cfg.node_in - NUM_NODE_TYPES, None)
    return {"node": _stats(np.concatenate(xs), onehot), "edge": _stats(np.concatenate(es)),
            "world": _stats(np.concatenate(ws)) if sum(len(w) for w in ws) else
            (np.zeros(cfg.world_in), np.ones(cfg.world_in)),
            "out": _stats(np.concatenate(ts))}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-4
    lr_final: float = 1e-6
    batch_size: int = 1
    seed: int = 0
    noise: float | None = None  # None -> model config value
    log_every: int = 100

    def lr_at(self, step: int) -> float:
        """Exponential decay from ``lr`` to ``lr_final`` across the step budget."""
        if self.lr == 0:
            return 0.0
        frac = step / max(self.steps - 1, 1)
        return self.lr * (self.lr_final / self.lr) ** frac


def batch_tensors(model: M4GN, samples: list[Sample]):
    b = collate(samples)
    target = torch.as_tensor(np.concatenate([s.target for s in samples]), dtype=DTYPE)
    target = (target - model.out_mean) / model.out_std
    weights = torch.as_tensor(np.concatenate([~s.kinematic for s in samples]).astype(np.float64))
    return b, target, weights


def train(model: M4GN, episodes: list[Episode], tcfg: TrainConfig, normalize: bool = True) -> dict:
    """Adam on the masked L2 loss with per-sample input noise.

    Noise corrupts the current state of non-kinematic nodes; targets stay
    relative to the clean next state, so the model learns to undo it.

    Returns a history with the loss of every step and the learning rates used.
    """
    cfg = model.cfg
    set_determinism(tcfg.seed)
    if normalize:
        model.set_normalizers(compute_normalizers(cfg, episodes))
    rng = np.random.default_rng(tcfg.seed)
    sigma = cfg.noise if tcfg.noise is None else tcfg.noise
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr)
    history = {"loss": [], "lr": []}
    last_good = {k: v.clone() for k, v in model.state_dict().items()}
    for step in range(tcfg.steps):
        lr = tcfg.lr_at(step)
        for group in opt.param_groups:
            group["lr"] = lr
        samples = []
        for _ in range(tcfg.batch_size):
            ep = episodes[int(rng.integers(len(episodes)))]
            t = int(rng.integers(ep.T))
            shape = ep.states(cfg.regime)[t].shape
            noise = rng.normal(0.0, sigma, size=shape) if sigma > 0 else None
            samples.append(sample_at(cfg, ep, t, noise))
        b, target, weights = batch_tensors(model, samples)
        loss, grads = loss_and_gradients(model, b, target, weights)
        if not torch.isfinite(loss):
            model.load_state_dict(last_good)
            raise TrainingDiverged(step, last_good)
        opt.zero_grad(set_to_none=False)
        for name, p in model.named_parameters():
            p.grad = grads[name]
        if lr > 0:
            opt.step()
        history["loss"].append(loss.item())
        history["lr"].append(lr)
        if tcfg.log_every and step % tcfg.log_every == 0:
            log.info("step %d loss %.6e lr %.3e", step, loss.item(), lr)
            last_good = {k: v.clone() for k, v in model.state_dict().items()}
    return history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def one_step_rmse(model: M4GN, episodes: list[Episode]) -> float:
    """RMSE of predicted next state over all non-kinematic nodes and frames."""
    sq, cnt = 0.0, 0
    for ep in episodes:
        samples = [sample_at(model.cfg, ep, t) for t in range(ep.T)]
        for s, change in zip(samples, predict_change(model, samples)):
            err = (change - s.target)[~s.kinematic]
            sq += float(np.sum(err ** 2))
            cnt += err.size
    return math.sqrt(sq / cnt)


def rollout(model: M4GN, ep: Episode, T: int | None = None) -> np.ndarray:
    """Autoregressive prediction of states 0..T; kinematic nodes follow the reference."""
    cfg = model.cfg
    truth = ep.states(cfg.regime)
    T = ep.T if T is None else T
    if T > ep.T:
        raise ValueError(f"rollout horizon {T} exceeds the reference length {ep.T}")
    out = [truth[0].copy()]
    prev = truth[0]
    for t in range(T):
        cur = out[-1]
        nxt_known = truth[t + 1]
        s = build_sample(cfg, ep.mesh, ep.ctx, cur, prev, nxt_known)
        nxt = s.base + predict_change(model, [s])[0]
        nxt[s.kinematic] = nxt_known[s.kinematic]
        prev = cur
        out.append(nxt)
    return np.stack(out)


def persistence(ep: Episode, regime: str, T: int | None = None) -> np.ndarray:
    s = ep.states(regime)
    T = ep.T if T is None else T
    return np.broadcast_to(s[0], (T + 1,) + s[0].shape).copy()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: M4GN, directory, extra: dict | None = None) -> None:
    """JSON manifest plus one little-endian float64 blob per tensor."""
    d = Path(directory)
    (d / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in model.state_dict().items():
        fname = f"params/{name}.bin"
        t.detach().cpu().numpy().astype("<f8").tofile(d / fname)
        entries.append({"name": name, "shape": list(t.shape), "file": fname})
    manifest = {"format": "m4gn-checkpoint/1", "config": model.cfg.to_dict(), "tensors": entries,
                "extra": extra or {}}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_checkpoint(directory) -> tuple[M4GN, dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    model = M4GN(ModelConfig(**manifest["config"]))
    state = model.state_dict()
    for e in manifest["tensors"]:
        if e["name"] not in state:
            raise ValueError(f"checkpoint tensor {e['name']!r} is not part of the model")
        arr = np.fromfile(d / e["file"], dtype="<f8")
        if arr.size != math.prod(e["shape"]):
            raise ValueError(f"tensor {e['name']!r} blob has {arr.size} values, expected shape {e['shape']}")
        state[e["name"]] = torch.as_tensor(arr.reshape(e["shape"]), dtype=DTYPE)
    model.load_state_dict(state)
    return model, manifest.get("extra", {})


def config_from_dict(doc: dict, cls):
    known = set(cls.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**doc)


__all__ = ["Episode", "TrainConfig", "TrainingDiverged", "make_episode", "sample_at", "train",
           "compute_normalizers", "one_step_rmse", "rollout", "persistence", "save_checkpoint",
           "load_checkpoint", "set_determinism"]
