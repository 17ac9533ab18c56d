"""Pluggable predictor interface and the desk-scale reference segmenter.

The reference segmenter is a per-voxel multinomial linear classifier over
five handcrafted features (intensity, 3x3 in-plane mean, in-plane
gradient magnitude, normalized x and y position). It is trained with the
full pipeline: per-batch volume selection, windowing, sampled z-score
normalization, the augmentation policy, slice reduction, in-plane
downsampling, the combined Tanimoto/cross-entropy loss and ADAM updates,
with early stopping on the validation loss.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, apply_policy
from .dataset import FoldPlan, Manifest, sample_batch
from .errors import DivergenceError, EmptyInputError, FormatError, ShapeError
from .objective import (
    AdamState,
    LossConfig,
    adam_step,
    combined_loss,
    dice_score,
    pooled_foreground_dice,
)
from .preprocess import (
    DEFAULT_SAMPLE_FRACTION,
    DEFAULT_SLICES,
    IntensityStats,
    WindowConfig,
    downsample,
    normalize,
    sample_stats,
    select_slices,
    window,
)
from .volume import CtVolume, ProbMap, UnitState, load_labels, load_volume

FEATURE_VERSION = 1
NUM_FEATURES = 5

_PRM_HEADER = struct.Struct("<4sHHH")


@dataclass(frozen=True)
class PredictorParams:
    weights: np.ndarray   # (num_classes, NUM_FEATURES)
    bias: np.ndarray      # (num_classes,)
    feature_version: int = FEATURE_VERSION

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise ShapeError(f"inconsistent parameter shapes {w.shape}, {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def num_classes(self):
        return self.weights.shape[0]

    @property
    def num_features(self):
        return self.weights.shape[1]

    def flatten(self):
        return np.concatenate([self.weights.ravel(), self.bias])

    def with_flat(self, flat):
        c, f = self.weights.shape
        return PredictorParams(
            flat[: c * f].reshape(c, f), flat[c * f:], self.feature_version
        )

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(_PRM_HEADER.pack(
                b"PRM1", self.feature_version,
                self.num_classes, self.num_features,
            ))
            fh.write(self.weights.astype("<f8").tobytes())
            fh.write(self.bias.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            raw = fh.read(_PRM_HEADER.size)
            if len(raw) < _PRM_HEADER.size:
                raise FormatError("PRM1 header truncated")
            magic, version, n_classes, n_features = _PRM_HEADER.unpack(raw)
            if magic != b"PRM1":
                raise FormatError(f"bad magic {magic!r}")
            body = fh.read()
        expected = (n_classes * n_features + n_classes) * 8
        if len(body) != expected:
            raise FormatError(
                f"PRM1 payload length {len(body)} != expected {expected}"
            )
        flat = np.frombuffer(body, dtype="<f8")
        return cls(
            flat[: n_classes * n_features].reshape(n_classes, n_features),
            flat[n_classes * n_features:],
            version,
        )


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "2D"                 # 2D: batch 28, 3D: batch 1
    batch_size: int | None = None    # None = mode default
    max_epochs: int = 200
    patience: int = 10
    tolerance: float = 1e-4
    seed: int = 0
    num_classes: int = 3
    slices: int = DEFAULT_SLICES
    target_size: int = 128
    sample_fraction: float = DEFAULT_SAMPLE_FRACTION
    lr: float = 1e-3
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    window: WindowConfig = field(default_factory=WindowConfig)

    def __post_init__(self):
        if self.mode not in ("2D", "3D"):
            raise ValueError(f"mode must be '2D' or '3D', got {self.mode!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")

    @property
    def effective_batch_size(self):
        if self.batch_size is not None:
            return self.batch_size
        return 28 if self.mode == "2D" else 1


@dataclass
class TrainLogEntry:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


def featurize(volume: CtVolume):
    """Per-voxel feature stack of shape (NUM_FEATURES, nz, ny, nx).

    Features: normalized intensity, 3x3 in-plane local mean, in-plane
    gradient magnitude from central differences, and normalized (x, y)
    position in [-1, 1]. Borders use clamped (edge) padding.
    """
    if volume.unit_state is not UnitState.NORMALIZED:
        raise ValueError("featurize expects a NORMALIZED volume")
    v = volume.voxels.astype(np.float64)
    nz, ny, nx = v.shape
    padded = np.pad(v, ((0, 0), (1, 1), (1, 1)), mode="edge")

    local_mean = np.zeros_like(v)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            local_mean += padded[:, dy:dy + ny, dx:dx + nx]
    local_mean /= 9.0

    gx = (padded[:, 1:ny + 1, 2:] - padded[:, 1:ny + 1, :nx]) / 2.0
    gy = (padded[:, 2:, 1:nx + 1] - padded[:, :ny, 1:nx + 1]) / 2.0
    grad_mag = np.sqrt(gx ** 2 + gy ** 2)

    x_pos = np.zeros(nx) if nx == 1 else (
        (np.arange(nx) - (nx - 1) / 2.0) / ((nx - 1) / 2.0)
    )
    y_pos = np.zeros(ny) if ny == 1 else (
        (np.arange(ny) - (ny - 1) / 2.0) / ((ny - 1) / 2.0)
    )
    xf = np.broadcast_to(x_pos[None, None, :], v.shape)
    yf = np.broadcast_to(y_pos[None, :, None], v.shape)
    return np.stack([v, local_mean, grad_mag, xf, yf])


def init_params(num_classes, seed) -> PredictorParams:
    """Uniform [-0.01, 0.01] initialization from the run seed."""
    rng = np.random.default_rng(seed)
    return PredictorParams(
        rng.uniform(-0.01, 0.01, size=(num_classes, NUM_FEATURES)),
        rng.uniform(-0.01, 0.01, size=num_classes),
    )


def _softmax(logits):
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def predict(params: PredictorParams, volume: CtVolume) -> ProbMap:
    """Per-voxel softmax(W @ features + b) as a ProbMap."""
    if params.num_features != NUM_FEATURES:
        raise ShapeError(
            f"params expect {params.num_features} features, model has {NUM_FEATURES}"
        )
    feats = featurize(volume).reshape(NUM_FEATURES, -1)
    probs = _softmax(params.weights @ feats + params.bias[:, None])
    nz, ny, nx = volume.voxels.shape
    return ProbMap(
        volume.dims, volume.spacing,
        probs.reshape(params.num_classes, nz, ny, nx).astype(np.float32),
        params.num_classes,
    )


def one_hot(labels_array, num_classes):
    flat = np.asarray(labels_array).ravel()
    out = np.zeros((num_classes, flat.size), dtype=np.float64)
    out[flat, np.arange(flat.size)] = 1.0
    return out


def softmax_param_grads(weights, bias, feats, truth_onehot, loss_cfg):
    """Loss and analytic gradients w.r.t. (weights, bias) for pooled voxels.

    feats: (F, N); truth_onehot: (C, N). The gradient chains the combined
    loss through the softmax jacobian.
    """
    probs = _softmax(weights @ feats + bias[:, None])
    loss, dprob = combined_loss(probs, truth_onehot, loss_cfg)
    # softmax jacobian: dL/dz_k = p_k * (g_k - sum_c g_c p_c)
    inner = (dprob * probs).sum(axis=0, keepdims=True)
    dlogits = probs * (dprob - inner)
    dw = dlogits @ feats.T
    db = dlogits.sum(axis=1)
    return loss, dw, db, probs


class _VolumeCache:
    def __init__(self, manifest):
        self._records = {rec.id: rec for rec in manifest}
        self._vols = {}
        self._labs = {}

    def volume(self, vid):
        if vid not in self._vols:
            self._vols[vid] = load_volume(self._records[vid].volume_path)
        return self._vols[vid]

    def labels(self, vid):
        if vid not in self._labs:
            rec = self._records[vid]
            if rec.label_path is None:
                raise ValueError(f"{vid} has no label file")
            self._labs[vid] = load_labels(rec.label_path)
        return self._labs[vid]


def preprocess_for_inference(volume: CtVolume, labels, cfg: TrainConfig,
                             stats: IntensityStats):
    """Deterministic window -> normalize -> downsample chain, keeping all
    slices (the per-voxel model has no fixed depth requirement)."""
    vol = normalize(window(volume, cfg.window), stats)
    target = min(cfg.target_size, vol.nx)
    return downsample(vol, labels, target=target)


def validate(params: PredictorParams, pairs, cfg: TrainConfig,
             stats: IntensityStats):
    """Validation loss and per-volume Dice, with no augmentation.

    pairs: list of (id, CtVolume HOUNSFIELD, LabelVolume). Returns
    (mean combined loss, {id: {"organ": d1, "tumor": d2, "foreground": dp}}).
    """
    if not pairs:
        raise EmptyInputError("validate on empty volume list")
    losses = []
    dice = {}
    for vid, vol, lab in pairs:
        pvol, plab = preprocess_for_inference(vol, lab, cfg, stats)
        probs = predict(params, pvol)
        truth = one_hot(plab.labels, cfg.num_classes)
        loss, _ = combined_loss(
            probs.probs.reshape(cfg.num_classes, -1), truth, cfg.loss
        )
        losses.append(loss)
        pred_lab = probs.argmax_labels()
        entry = {"foreground": pooled_foreground_dice(pred_lab, plab)}
        for c in range(1, cfg.num_classes):
            name = {1: "organ", 2: "tumor"}.get(c, f"class{c}")
            entry[name] = dice_score(pred_lab, plab, c)
        dice[vid] = entry
    return float(np.mean(losses)), dice


def train(manifest: Manifest, fold_plan: FoldPlan, held_out_fold, cfg: TrainConfig):
    """Full training loop; returns (best PredictorParams, list of TrainLogEntry).

    Per batch: select random volumes, window (per-volume quantiles),
    normalize (dataset-sample statistics), apply the augmentation policy,
    reduce to the configured slice count, downsample, forward, combined
    loss, ADAM step. Validation loss is computed after each epoch;
    training stops when it has not improved by more than the tolerance
    for `patience` consecutive epochs, or at max_epochs. The returned
    parameters are those achieving the best validation loss.
    """
    train_ids = fold_plan.training_ids(held_out_fold)
    val_ids = list(fold_plan.folds[held_out_fold])
    if not train_ids:
        raise EmptyInputError("no training volumes outside the held-out fold")
    cache = _VolumeCache(manifest)

    ss = np.random.SeedSequence(cfg.seed)
    init_seed, stats_seed, aug_seed, slice_seed = [
        int(s.generate_state(1)[0]) for s in ss.spawn(4)
    ]
    params = init_params(cfg.num_classes, init_seed)
    stats = sample_stats(
        manifest.subset(train_ids), cfg.window,
        sample_fraction=cfg.sample_fraction, seed=stats_seed,
    )
    log: list[TrainLogEntry] = []
    if cfg.max_epochs == 0:
        return params, log, stats

    val_pairs = [(vid, cache.volume(vid), cache.labels(vid)) for vid in val_ids]
    batch_size = cfg.effective_batch_size
    batches_per_epoch = max(1, -(-len(train_ids) // batch_size))
    state = AdamState.init(params.flatten().size, lr=cfg.lr)
    best_loss = np.inf
    best_params = params
    epochs_since_improvement = 0

    for epoch in range(cfg.max_epochs):
        tic = time.perf_counter()
        epoch_losses = []
        for b in range(batches_per_epoch):
            ids = sample_batch(train_ids, batch_size, cfg.seed, epoch, b)
            batch = [(
                normalize(window(cache.volume(vid), cfg.window), stats),
                cache.labels(vid),
            ) for vid in ids]
            batch, _trace = apply_policy(
                batch, cfg.augment, mode=cfg.mode,
                seed=int(np.random.SeedSequence(
                    [aug_seed, epoch, b]).generate_state(1)[0]),
            )
            feats_parts = []
            truth_parts = []
            for i, (vol, lab) in enumerate(batch):
                vol, lab = select_slices(
                    vol, lab, k=cfg.slices, training=True,
                    seed=int(np.random.SeedSequence(
                        [slice_seed, epoch, b, i]).generate_state(1)[0]),
                )
                vol, lab = downsample(
                    vol, lab, target=min(cfg.target_size, vol.nx)
                )
                feats_parts.append(featurize(vol).reshape(NUM_FEATURES, -1))
                truth_parts.append(one_hot(lab.labels, cfg.num_classes))
            feats = np.concatenate(feats_parts, axis=1)
            truth = np.concatenate(truth_parts, axis=1)
            loss, dw, db, _ = softmax_param_grads(
                params.weights, params.bias, feats, truth, cfg.loss
            )
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}, batch {b}"
                )
            epoch_losses.append(loss)
            flat, state = adam_step(
                params.flatten(), np.concatenate([dw.ravel(), db]), state
            )
            params = params.with_flat(flat)

        val_loss, _ = validate(params, val_pairs, cfg, stats)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        log.append(TrainLogEntry(
            epoch=epoch,
            train_loss=float(np.mean(epoch_losses)),
            val_loss=val_loss,
            seconds=time.perf_counter() - tic,
        ))
        if val_loss < best_loss - cfg.tolerance:
            best_loss = val_loss
            best_params = params
            epochs_since_improvement = 0
        else:
            epochs_since_improvement += 1
            if epochs_since_improvement >= cfg.patience:
                break
    return best_params, log, stats
