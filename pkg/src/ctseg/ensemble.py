"""Top-n member selection and stacked combination of member probability
maps into a final segmentation.

Binary (organ-vs-background) members contribute evidence features only;
the stacker is a per-voxel multinomial logistic regression over the
concatenated member class probabilities, trained with the combined loss
and ADAM on held-out volumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, ShapeError, WeightError
from .model import PredictorParams, one_hot, softmax_param_grads, _softmax
from .objective import AdamState, LossConfig, adam_step
from .volume import LabelVolume, ProbMap

COMBINER_KINDS = ("MEAN", "WEIGHTED", "STACKER")


@dataclass(frozen=True)
class EnsembleMember:
    id: str
    params_path: str
    mode: str            # e.g. "multiclass-2D" or "binary-3D"
    score: float

    @property
    def is_binary(self):
        return self.mode.startswith("binary")


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple[EnsembleMember, ...]
    combiner: str = "MEAN"
    weights: tuple[float, ...] | None = None
    stacker_path: str | None = None

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        if self.combiner not in COMBINER_KINDS:
            raise ValueError(f"unknown combiner {self.combiner!r}")

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for m in self.members:
                fh.write(f"member\t{m.params_path}\t{m.mode}\t{m.score!r}\n")
            fh.write(f"combiner\t{self.combiner}\n")
            if self.stacker_path:
                fh.write(f"stacker\t{self.stacker_path}\n")

    @classmethod
    def load(cls, path):
        members = []
        combiner = "MEAN"
        stacker_path = None
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                fields = line.rstrip("\n").split("\t")
                if not fields or not fields[0]:
                    continue
                if fields[0] == "member":
                    members.append(EnsembleMember(
                        id=fields[1], params_path=fields[1],
                        mode=fields[2], score=float(fields[3]),
                    ))
                elif fields[0] == "combiner":
                    combiner = fields[1]
                elif fields[0] == "stacker":
                    stacker_path = fields[1]
        return cls(tuple(members), combiner, None, stacker_path)


def select_top_n(candidates, n=5):
    """The n highest-scoring members; ties broken by id, all if fewer."""
    ordered = sorted(candidates, key=lambda m: (-m.score, m.id))
    return list(ordered[:min(n, len(ordered))])


def _stack_arrays(probmaps):
    first = probmaps[0]
    for pm in probmaps[1:]:
        if pm.dims != first.dims or pm.num_classes != first.num_classes:
            raise ShapeError(
                f"member shape mismatch: {pm.dims}x{pm.num_classes} vs "
                f"{first.dims}x{first.num_classes}"
            )
    return np.stack([pm.probs.astype(np.float64) for pm in probmaps])


def combine_mean(probmaps, weights=None) -> ProbMap:
    """Per-voxel weighted mean of member probabilities, renormalized."""
    arrays = _stack_arrays(probmaps)
    if weights is None:
        weights = np.ones(len(probmaps))
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(probmaps),):
        raise ShapeError(f"need {len(probmaps)} weights, got shape {w.shape}")
    if np.any(w < 0) or not w.sum() > 0:
        raise WeightError("weights must be >= 0 with a positive sum")
    mixed = np.tensordot(w / w.sum(), arrays, axes=1)
    mixed /= mixed.sum(axis=0, keepdims=True)
    first = probmaps[0]
    return ProbMap(first.dims, first.spacing, mixed.astype(np.float32),
                   first.num_classes)


def map_binary_members(pm: ProbMap, target_classes=3) -> ProbMap:
    """Embed a 2-class organ-vs-background map into the target class
    space as (background, organ evidence, 0 for every other class).
    Used only as stacker input features, never as a final prediction."""
    if pm.num_classes != 2:
        raise ShapeError(f"binary member must have 2 classes, got {pm.num_classes}")
    nx, ny, nz = pm.dims
    out = np.zeros((target_classes, nz, ny, nx), dtype=np.float32)
    out[0] = pm.probs[0]
    out[1] = pm.probs[1]
    return ProbMap(pm.dims, pm.spacing, out, target_classes)


def stacker_features(probmaps, target_classes=3):
    """Concatenated member probabilities, binary members embedded;
    shape (n_members * target_classes, n_voxels)."""
    mapped = [
        map_binary_members(pm, target_classes) if pm.num_classes == 2 else pm
        for pm in probmaps
    ]
    arrays = _stack_arrays(mapped)
    n_members, n_classes = arrays.shape[0], arrays.shape[1]
    return arrays.reshape(n_members * n_classes, -1)


def init_stacker(n_members, num_classes=3) -> PredictorParams:
    """Identity-block initialization: logits start as the member mean, so
    an untrained stacker reproduces mean-combination argmax behavior."""
    blocks = np.tile(np.eye(num_classes), (1, n_members)) / n_members
    return PredictorParams(blocks, np.zeros(num_classes))


def train_stacker(member_probmaps_per_volume, truth_labels, seed=0,
                  epochs=200, lr=0.05, loss_cfg: LossConfig = LossConfig(),
                  num_classes=3):
    """Fit the per-voxel logistic stacker on held-out volumes.

    member_probmaps_per_volume: list over volumes, each a list of member
    ProbMaps for that volume. truth_labels: matching LabelVolumes.
    Deterministic per seed (the seed orders nothing today but is kept for
    future minibatching and is recorded by callers).
    """
    if not member_probmaps_per_volume:
        raise ValueError("train_stacker needs at least one volume")
    n_members = len(member_probmaps_per_volume[0])
    feats = np.concatenate([
        stacker_features(pms, num_classes) for pms in member_probmaps_per_volume
    ], axis=1)
    truth = np.concatenate([
        one_hot(lab.labels, num_classes) for lab in truth_labels
    ], axis=1)
    if feats.shape[1] != truth.shape[1]:
        raise ShapeError("member maps and truth labels cover different voxel counts")

    params = init_stacker(n_members, num_classes)
    if epochs == 0:
        return params
    state = AdamState.init(params.flatten().size, lr=lr)
    for epoch in range(epochs):
        loss, dw, db, _ = softmax_param_grads(
            params.weights, params.bias, feats, truth, loss_cfg
        )
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite stacker loss at epoch {epoch}")
        flat, state = adam_step(
            params.flatten(), np.concatenate([dw.ravel(), db]), state
        )
        params = params.with_flat(flat)
    return params


def stacked_combine(probmaps, combiner="MEAN", weights=None,
                    stacker: PredictorParams | None = None,
                    num_classes=3) -> ProbMap:
    """Combine member probability maps into one ProbMap."""
    if combiner == "MEAN":
        mapped = [
            map_binary_members(pm, num_classes) if pm.num_classes == 2 else pm
            for pm in probmaps
        ]
        return combine_mean(mapped)
    if combiner == "WEIGHTED":
        mapped = [
            map_binary_members(pm, num_classes) if pm.num_classes == 2 else pm
            for pm in probmaps
        ]
        return combine_mean(mapped, weights)
    if combiner == "STACKER":
        if stacker is None:
            stacker = init_stacker(len(probmaps), num_classes)
        feats = stacker_features(probmaps, num_classes)
        probs = _softmax(stacker.weights @ feats + stacker.bias[:, None])
        first = probmaps[0]
        nx, ny, nz = first.dims
        return ProbMap(
            first.dims, first.spacing,
            probs.reshape(num_classes, nz, ny, nx).astype(np.float32),
            num_classes,
        )
    raise ValueError(f"unknown combiner {combiner!r}")


def stacked_predict(probmaps, combiner="MEAN", weights=None,
                    stacker: PredictorParams | None = None, num_classes=3):
    """Combine members and take the per-voxel argmax (ties -> lower id)."""
    combined = stacked_combine(probmaps, combiner, weights, stacker, num_classes)
    return combined, combined.argmax_labels()
