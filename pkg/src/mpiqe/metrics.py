"""Correlation metrics and the repeated random-split evaluation protocols."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)


class MetricError(ValueError):
    """Correlation undefined for the given inputs."""


def _as_pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise MetricError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise MetricError("need at least two samples")
    return x, y


def plcc(x, y) -> float:
    x, y = _as_pair(x, y)
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(dx @ dx), np.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        raise MetricError("PLCC undefined for constant input")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def srcc(x, y) -> float:
    """Spearman correlation: Pearson correlation of average ranks."""
    x, y = _as_pair(x, y)
    rx, ry = rankdata(x), rankdata(y)
    if np.all(rx == rx[0]) or np.all(ry == ry[0]):
        raise MetricError("SRCC undefined: zero rank variance")
    n = x.size
    if np.unique(rx).size == n and np.unique(ry).size == n:
        # tie-free: integer rank differences make the closed form exact
        d2 = float(np.sum((rx - ry) ** 2))
        return 1.0 - 6.0 * d2 / (n * (n * n - 1.0))
    return plcc(rx, ry)


@dataclass
class RepeatResult:
    seed: int
    plcc: float
    srcc: float
    n_train: int = 0
    n_test: int = 0
    error: str | None = None


@dataclass
class EvalReport:
    per_repeat: list[RepeatResult]
    protocol: dict = field(default_factory=dict)
    config_fingerprint: str | None = None
    dataset_fingerprints: dict = field(default_factory=dict)

    def _ok(self):
        return [r for r in self.per_repeat if r.error is None]

    @property
    def median_plcc(self) -> float:
        ok = self._ok()
        return float(np.median([r.plcc for r in ok])) if ok else math.nan

    @property
    def median_srcc(self) -> float:
        ok = self._ok()
        return float(np.median([r.srcc for r in ok])) if ok else math.nan

    @property
    def seeds(self) -> list[int]:
        return [r.seed for r in self.per_repeat]

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "seeds": self.seeds,
            "per_repeat": [asdict(r) for r in self.per_repeat],
            "median_plcc": self.median_plcc,
            "median_srcc": self.median_srcc,
            "config_fingerprint": self.config_fingerprint,
            "dataset_fingerprints": self.dataset_fingerprints,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls([RepeatResult(**r) for r in d["per_repeat"]], d.get("protocol", {}),
                   d.get("config_fingerprint"), d.get("dataset_fingerprints", {}))

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def repeat_seed(base_seed: int, repeat: int) -> int:
    return int(np.random.SeedSequence([base_seed, repeat]).generate_state(1)[0])


def split_indices(n: int, train_frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random disjoint (train, test) index arrays covering range(n)."""
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_frac * n))
    n_train = min(max(n_train, 1), n - 1) if n > 1 else n
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


# (train_dataset, test_dataset, seed) -> (plcc, srcc)
TrainEvalFn = Callable[..., tuple[float, float]]


def default_train_eval(model_factory, config) -> TrainEvalFn:
    from .training import predict_dataset, train

    def run(train_ds, test_ds, seed):
        cfg = config.replace(seed=seed)
        model = model_factory(cfg)
        train(model, train_ds, cfg)
        preds = predict_dataset(model, test_ds, seed=seed)
        mos = test_ds.normalized_mos()
        return plcc(preds, mos), srcc(preds, mos)

    return run


def run_protocol(model_factory, dataset, repeats: int = 10, train_frac: float = 0.8,
                 base_seed: int = 0, config=None, train_eval: TrainEvalFn | None = None,
                 train_subsample: float | None = None) -> EvalReport:
    """Train from scratch on ``repeats`` random splits and report median PLCC/SRCC.

    ``train_eval`` overrides the default train-then-predict routine; it
    receives (train_dataset, test_dataset, seed). ``train_subsample`` keeps
    only that fraction of each training split (test split unchanged).
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if train_eval is None:
        if config is None:
            raise ValueError("config is required for the default train/eval routine")
        train_eval = default_train_eval(model_factory, config)
    results = []
    for r in range(repeats):
        seed = repeat_seed(base_seed, r)
        train_idx, test_idx = split_indices(len(dataset), train_frac, seed)
        if train_subsample is not None:
            keep = int(round(train_subsample * len(train_idx)))
            if keep < 2:
                raise ValueError(f"training fraction {train_subsample} leaves fewer than 2 images")
            train_idx = np.sort(np.random.default_rng(seed + 1).permutation(train_idx)[:keep])
        train_ds = dataset.subset(train_idx, f"{dataset.name}-train")
        test_ds = dataset.subset(test_idx, f"{dataset.name}-test")
        try:
            p, s = train_eval(train_ds, test_ds, seed)
            results.append(RepeatResult(seed, float(p), float(s), len(train_idx), len(test_idx)))
        except Exception as exc:  # recorded per repeat, the protocol keeps going
            log.warning("repeat %d (seed %d) failed: %s", r, seed, exc)
            results.append(RepeatResult(seed, math.nan, math.nan, len(train_idx), len(test_idx), repr(exc)))
        log.info("repeat %d seed %d: plcc=%.4f srcc=%.4f", r, seed, results[-1].plcc, results[-1].srcc)
    protocol = {"name": "random-split", "repeats": repeats, "train_frac": train_frac, "base_seed": base_seed}
    if train_subsample is not None:
        protocol["train_subsample"] = train_subsample
    return EvalReport(results, protocol,
                      config.fingerprint() if config is not None else None,
                      {"dataset": dataset.fingerprint()})


def data_efficiency_sweep(model_factory, dataset, fractions=(0.2, 0.4, 0.6), repeats: int = 10,
                          train_frac: float = 0.8, base_seed: int = 0, config=None,
                          train_eval: TrainEvalFn | None = None) -> dict[float, EvalReport]:
    """One protocol run per training fraction; the test split per repeat is shared across fractions."""
    for f in fractions:
        if not 0 < f <= 0.8:
            raise ValueError(f"fraction {f} outside (0, 0.8]")
    return {
        f: run_protocol(model_factory, dataset, repeats, train_frac, base_seed, config,
                        train_eval, train_subsample=f)
        for f in sorted(fractions)
    }


def cross_eval(checkpoint, train_dataset_name: str, test_dataset, seed: int = 0) -> tuple[float, float]:
    """Score an unseen dataset with a trained checkpoint; no adaptation."""
    from .training import load_checkpoint, predict_dataset

    if train_dataset_name == test_dataset.name:
        warnings.warn(f"cross-dataset evaluation on the training dataset {train_dataset_name!r}",
                      stacklevel=2)
    model, _ = load_checkpoint(checkpoint)
    preds = predict_dataset(model, test_dataset, seed=seed)
    mos = test_dataset.normalized_mos()
    return plcc(preds, mos), srcc(preds, mos)
