"""Objective, optimisation schedule, training loop, inference and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .alignment import distortion_loss, scene_loss
from .config import ModelConfig
from .data import Dataset, random_crops
from .metrics import MetricError, srcc
from .model import MPIQE, ModelOutput, apply_freeze, trainable_parameters
from .text import Tokenizer

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mpiqe-checkpoint/1"


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss."""


class CheckpointError(ValueError):
    pass


# --- objective ---------------------------------------------------------------

def score_loss(pred: torch.Tensor, gt: torch.Tensor, beta: float = 1.0, plain_l1: bool = False) -> torch.Tensor:
    """Smooth-L1 (Huber with threshold ``beta``) between predicted and target scores."""
    if plain_l1:
        return F.l1_loss(pred, gt)
    if beta <= 0:
        raise ValueError("beta must be positive")
    return F.smooth_l1_loss(pred, gt, beta=beta)


def total_loss(l_scene, l_dist, l_score, lambda1: float, lambda2: float):
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be non-negative")
    return l_scene + lambda1 * l_dist + lambda2 * l_score


def compute_losses(out: ModelOutput, mos: torch.Tensor, scene_labels: torch.Tensor,
                   dist_labels: torch.Tensor, cfg: ModelConfig) -> dict[str, torch.Tensor]:
    zero = out.score.sum() * 0.0
    l_scene = scene_loss(out.scene_probs, scene_labels) if out.scene_probs is not None else zero
    l_dist = distortion_loss(out.dist_agg, dist_labels, cfg.temp_global) if out.dist_agg is not None else zero
    l_score = score_loss(out.score, mos.to(out.score.dtype), cfg.smooth_l1_beta, cfg.plain_l1)
    return {
        "scene": l_scene,
        "dist": l_dist,
        "score": l_score,
        "total": total_loss(l_scene, l_dist, l_score, cfg.lambda1, cfg.lambda2),
    }


def learning_rate(epoch: float, cfg: ModelConfig) -> float:
    """Linear warm-up to ``cfg.lr``, then cosine decay to zero at ``total_epochs``."""
    if epoch < cfg.warmup_epochs:
        return cfg.lr * epoch / cfg.warmup_epochs
    span = cfg.total_epochs - cfg.warmup_epochs
    if span <= 0:
        return cfg.lr
    t = min(max((epoch - cfg.warmup_epochs) / span, 0.0), 1.0)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * t))


# --- data plumbing -----------------------------------------------------------

def to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(..., H, W, 3) array -> (..., 3, H, W) tensor."""
    t = torch.from_numpy(np.ascontiguousarray(images))
    return t.movedim(-1, -3).to(dtype)


def resolve_labels(model: MPIQE, dataset: Dataset, images: np.ndarray, policy: str):
    """Per-image (scene, distortion) label arrays, -1 where a label is unavailable."""
    if policy == "auto":
        policy = "manifest" if dataset.has_labels() else "pseudo"
    if policy == "off":
        n = len(dataset)
        return np.full(n, -1), np.full(n, -1)
    if policy == "manifest":
        return dataset.labels("scene"), dataset.labels("distortion")
    if policy == "pseudo":
        size = model.cfg.crop_size
        off = (images.shape[1] - size) // 2
        center = to_tensor(images[:, off:off + size, off:off + size])
        scenes, dists = model.zero_shot_labels(center)
        return scenes.numpy(), dists.numpy()
    raise ValueError(f"unknown label policy {policy!r}")


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    rng_state: dict | None = None
    best_metrics: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    optimizer: torch.optim.Optimizer | None = field(default=None, repr=False)


def _epoch_batches(images: np.ndarray, cfg: ModelConfig, rng: np.random.Generator):
    crops, owners = [], []
    for i, img in enumerate(images):
        crops.append(random_crops(img, cfg.crops_per_image, cfg.crop_size, rng))
        owners.extend([i] * cfg.crops_per_image)
    crops = np.concatenate(crops)
    owners = np.asarray(owners)
    order = rng.permutation(len(owners))
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        yield crops[idx], owners[idx]


def train(model: MPIQE, dataset: Dataset, cfg: ModelConfig | None = None, val_dataset: Dataset | None = None,
          out_dir: str | Path | None = None, max_steps: int | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainState:
    """Optimise the trainable groups of ``model`` on ``dataset``.

    Without an explicit ``val_dataset`` a ``cfg.val_frac`` share of the images
    is held out for best-checkpoint selection. When ``out_dir`` is given the
    best checkpoint and a per-epoch CSV log are written there.
    """
    cfg = cfg or model.cfg
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)

    if val_dataset is None and cfg.val_frac > 0 and int(len(dataset) * cfg.val_frac) >= 2:
        perm = rng.permutation(len(dataset))
        n_val = int(len(dataset) * cfg.val_frac)
        val_dataset = dataset.subset(np.sort(perm[:n_val]), f"{dataset.name}-val")
        dataset = dataset.subset(np.sort(perm[n_val:]), dataset.name)

    images = dataset.images(cfg.image_size)
    mos = dataset.normalized_mos()
    scene_lbl, dist_lbl = resolve_labels(model, dataset, images, cfg.label_policy)
    if val_dataset is not None:
        val_dataset.mos_range = dataset.mos_range
        val_images = val_dataset.images(cfg.image_size)

    apply_freeze(model)
    groups = trainable_parameters(model)
    optimizer = torch.optim.Adam([{"params": ps, "name": name} for name, ps in groups.items()], lr=0.0)
    params = [p for ps in groups.values() for p in ps]
    steps_per_epoch = math.ceil(len(dataset) * cfg.crops_per_image / cfg.batch_size)
    state = TrainState(optimizer=optimizer)
    best_srcc, best_weights = -math.inf, None
    dtype = next(model.parameters()).dtype
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(cfg.total_epochs):
        model.train()
        sums = {"scene": 0.0, "dist": 0.0, "score": 0.0, "total": 0.0}
        count = 0
        epoch_lr = learning_rate(epoch, cfg)
        for i, (crops, owners) in enumerate(_epoch_batches(images, cfg, rng)):
            lr = learning_rate(epoch + i / steps_per_epoch, cfg)
            for g in optimizer.param_groups:
                g["lr"] = lr
            out = model(to_tensor(crops, dtype))
            losses = compute_losses(
                out, torch.as_tensor(mos[owners]), torch.as_tensor(scene_lbl[owners]),
                torch.as_tensor(dist_lbl[owners]), cfg)
            if not torch.isfinite(losses["total"]):
                detail = {k: float(v.detach()) for k, v in losses.items()}
                raise NumericalError(f"non-finite loss at epoch {epoch} step {state.step}: {detail}")
            optimizer.zero_grad(set_to_none=True)
            losses["total"].backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            optimizer.step()
            state.step += 1
            for k in sums:
                sums[k] += float(losses[k].detach()) * len(owners)
            count += len(owners)
            if max_steps is not None and state.step >= max_steps:
                break
        row = {"epoch": epoch + 1, "lr": epoch_lr}
        row.update({f"L_{k}": v / max(count, 1) for k, v in sums.items()})
        row["val_srcc"] = math.nan
        if val_dataset is not None:
            preds = predict_images(model, val_images, cfg, np.random.default_rng(cfg.seed))
            try:
                row["val_srcc"] = srcc(preds, val_dataset.normalized_mos())
            except MetricError:
                pass
            if row["val_srcc"] > best_srcc:
                best_srcc = row["val_srcc"]
                best_weights = {k: v.detach().clone() for k, v in model.state_dict().items()}
                state.best_metrics = {"val_srcc": best_srcc, "epoch": epoch + 1}
                if out_dir is not None:
                    state.epoch = epoch + 1
                    state.rng_state = rng.bit_generator.state
                    save_checkpoint(model, state, out_dir / "checkpoint")
        state.epoch = epoch + 1
        state.history.append(row)
        log.info("epoch %d lr=%.3g total=%.4f val_srcc=%.4f", epoch + 1, epoch_lr, row["L_total"], row["val_srcc"])
        if on_epoch is not None:
            on_epoch(row)
        if max_steps is not None and state.step >= max_steps:
            break

    state.rng_state = rng.bit_generator.state
    if best_weights is not None:
        model.load_state_dict(best_weights)
    elif out_dir is not None:
        save_checkpoint(model, state, out_dir / "checkpoint")
    if out_dir is not None:
        write_log(state.history, out_dir / "train_log.csv")
    return state


LOG_COLUMNS = ("epoch", "lr", "L_scene", "L_dist", "L_score", "L_total", "val_srcc")


def write_log(history: list[dict], path: str | Path) -> None:
    lines = [",".join(LOG_COLUMNS)]
    for row in history:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in LOG_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- inference ---------------------------------------------------------------

@torch.no_grad()
def crop_scores(model: MPIQE, crops: np.ndarray, batch: int = 64) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = [model(to_tensor(crops[s:s + batch], dtype)).score for s in range(0, len(crops), batch)]
    return torch.cat(out).double().numpy()


def predict_images(model: MPIQE, images: np.ndarray, cfg: ModelConfig | None, rng: np.random.Generator) -> np.ndarray:
    cfg = cfg or model.cfg
    k = cfg.crops_per_image
    crops = np.concatenate([random_crops(img, k, cfg.crop_size, rng) for img in images])
    return crop_scores(model, crops).reshape(len(images), k).mean(axis=1)


def predict(model: MPIQE, image: np.ndarray, rng: np.random.Generator | None = None) -> float:
    """Mean score over ``crops_per_image`` random crops of one (H, W, 3) image."""
    rng = rng if rng is not None else np.random.default_rng(model.cfg.seed)
    return float(predict_images(model, image[None], model.cfg, rng)[0])


def predict_dataset(model: MPIQE, dataset: Dataset, seed: int = 0) -> np.ndarray:
    images = dataset.images(model.cfg.image_size)
    return predict_images(model, images, model.cfg, np.random.default_rng(seed))


# --- checkpoints -------------------------------------------------------------

def _blob_name(name: str) -> str:
    return name.replace("/", "__") + ".bin"


def _write_tensor(path: Path, t: torch.Tensor):
    arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
    path.write_bytes(arr.tobytes(order="C"))


def save_checkpoint(model: MPIQE, state: TrainState | None, path: str | Path) -> Path:
    """Directory with ``manifest.json`` metadata plus one little-endian float32 blob per tensor."""
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    tensors = dict(model.state_dict())
    if state is not None and state.optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in state.optimizer.param_groups:
            for p in group["params"]:
                for key, value in state.optimizer.state.get(p, {}).items():
                    if torch.is_tensor(value):
                        tensors[f"optimizer/{names[id(p)]}/{key}"] = value
    entries = []
    for name, t in tensors.items():
        blob = _blob_name(name)
        _write_tensor(path / "tensors" / blob, t)
        entries.append({"name": name, "shape": list(t.shape), "dtype": "float32", "file": f"tensors/{blob}"})
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "config_fingerprint": model.cfg.fingerprint(),
        "pretrained": model.pretrained,
        "tokenizer": {"vocab": model.text.tokenizer.vocab, "subword": model.text.tokenizer.subword,
                      "max_len": model.text.tokenizer.max_len},
        "tensors": entries,
    }
    if state is not None:
        meta["train_state"] = {"step": state.step, "epoch": state.epoch, "rng_state": state.rng_state,
                               "best_metrics": state.best_metrics, "history": state.history}
    (path / "manifest.json").write_text(json.dumps(meta, indent=1, default=_json_default), encoding="utf-8")
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


def _read_meta(path: Path) -> dict:
    manifest = path / "manifest.json"
    if not manifest.is_file():
        raise CheckpointError(f"missing checkpoint manifest: {manifest}")
    try:
        meta = json.loads(manifest.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format')!r}")
    return meta


def _read_tensor(path: Path, entry: dict) -> torch.Tensor:
    file = path / entry["file"]
    if not file.is_file():
        raise CheckpointError(f"missing tensor blob for {entry['name']}")
    arr = np.frombuffer(file.read_bytes(), dtype="<f4")
    shape = tuple(entry["shape"])
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"corrupt tensor blob for {entry['name']}")
    return torch.from_numpy(arr.reshape(shape).astype(np.float32))


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> tuple[MPIQE, TrainState]:
    path = Path(path)
    meta = _read_meta(path)
    saved_cfg = ModelConfig(**meta["config"])
    if config is not None and config.fingerprint() != meta["config_fingerprint"]:
        warnings.warn("checkpoint config fingerprint differs from the requested config", stacklevel=2)
    cfg = config or saved_cfg
    tok = meta["tokenizer"]
    model = MPIQE(cfg, Tokenizer(tok["vocab"], max_len=tok["max_len"], subword=tok["subword"]))
    model.pretrained = bool(meta.get("pretrained", False))
    apply_freeze(model)
    own = model.state_dict()
    loaded, optim_entries = {}, {}
    for entry in meta["tensors"]:
        name = entry["name"]
        if name.startswith("optimizer/"):
            optim_entries[name] = entry
            continue
        if name not in own:
            raise CheckpointError(f"unexpected tensor {name} in checkpoint")
        if tuple(own[name].shape) != tuple(entry["shape"]):
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {tuple(entry['shape'])} vs model {tuple(own[name].shape)}")
        loaded[name] = _read_tensor(path, entry)
    missing = set(own) - set(loaded)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)}")
    model.load_state_dict(loaded)

    state = TrainState()
    ts = meta.get("train_state")
    if ts is not None:
        state = TrainState(ts["step"], ts["epoch"], ts["rng_state"], ts["best_metrics"], ts["history"])
    if optim_entries:
        groups = trainable_parameters(model)
        optimizer = torch.optim.Adam([{"params": ps, "name": n} for n, ps in groups.items()], lr=cfg.lr)
        params = dict(model.named_parameters())
        for name, entry in optim_entries.items():
            _, pname, key = name.split("/", 2)
            optimizer.state[params[pname]][key] = _read_tensor(path, entry)
        state.optimizer = optimizer
    return model, state


def load_backbone(model: MPIQE, path: str | Path) -> MPIQE:
    """Copy text/vision backbone tensors from a checkpoint directory and mark them pretrained."""
    path = Path(path)
    meta = _read_meta(path)
    own = model.state_dict()
    update = {}
    for entry in meta["tensors"]:
        name = entry["name"]
        if name.split(".", 1)[0] not in ("text", "vision") or name not in own:
            continue
        if tuple(own[name].shape) != tuple(entry["shape"]):
            raise CheckpointError(f"shape mismatch for {name}")
        update[name] = _read_tensor(path, entry).to(own[name].dtype)
    model.load_state_dict(update, strict=False)
    model.pretrained = True
    apply_freeze(model)
    return model
