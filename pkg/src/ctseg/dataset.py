"""Dataset manifests, the slice-count-sorted cross-validation fold plan,
and seeded batch sampling.

Manifest format: UTF-8 text, one record per line, tab-separated fields
    id <TAB> volume-path <TAB> label-path (or "-") <TAB> slice-count <TAB> slice-thickness-mm
Fold plan format: UTF-8 lines "fold-index <TAB> id".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FoldError, ManifestError, ParseError

DEFAULT_FOLDS = 5


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    volume_path: str
    label_path: str | None
    slice_count: int
    slice_thickness: float

    def sort_key(self):
        return (self.slice_count, self.slice_thickness, self.id)


class Manifest:
    """Immutable collection of dataset records with unique ids."""

    def __init__(self, records):
        self.records = tuple(records)
        seen = {}
        for rec in self.records:
            if rec.id in seen:
                raise ManifestError(f"duplicate id {rec.id!r}")
            if rec.slice_count < 1:
                raise ManifestError(f"{rec.id}: slice_count must be >= 1")
            if not rec.slice_thickness > 0:
                raise ManifestError(f"{rec.id}: slice_thickness must be > 0")
            seen[rec.id] = rec
        self.by_id = seen

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def ids(self):
        return [rec.id for rec in self.records]

    def subset(self, ids):
        wanted = set(ids)
        return Manifest([rec for rec in self.records if rec.id in wanted])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                lab = rec.label_path if rec.label_path is not None else "-"
                fh.write(
                    f"{rec.id}\t{rec.volume_path}\t{lab}\t"
                    f"{rec.slice_count}\t{rec.slice_thickness!r}\n"
                )


def load_manifest(path) -> Manifest:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 5:
                raise ParseError(
                    f"line {lineno}: expected 5 tab-separated fields, "
                    f"got {len(fields)}", line=lineno,
                )
            vid, vol_path, lab_path, count_s, thick_s = fields
            try:
                count = int(count_s)
                thickness = float(thick_s)
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}", line=lineno) from None
            if count < 1:
                raise ParseError(
                    f"line {lineno}: slice_count must be >= 1, got {count}",
                    line=lineno,
                )
            if not thickness > 0:
                raise ParseError(
                    f"line {lineno}: slice_thickness must be > 0, got {thickness}",
                    line=lineno,
                )
            records.append(ManifestRecord(
                id=vid,
                volume_path=vol_path,
                label_path=None if lab_path == "-" else lab_path,
                slice_count=count,
                slice_thickness=thickness,
            ))
    return Manifest(records)


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[tuple[str, ...], ...]

    @property
    def k(self):
        return len(self.folds)

    def fold_of(self, vid):
        for i, fold in enumerate(self.folds):
            if vid in fold:
                return i
        raise KeyError(vid)

    def training_ids(self, held_out):
        return [vid for i, fold in enumerate(self.folds)
                if i != held_out for vid in fold]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for i, fold in enumerate(self.folds):
                for vid in fold:
                    fh.write(f"{i}\t{vid}\n")

    @classmethod
    def load(cls, path):
        folds = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                try:
                    idx_s, vid = line.split("\t")
                    idx = int(idx_s)
                except ValueError as exc:
                    raise ParseError(f"line {lineno}: {exc}", line=lineno) from None
                folds.setdefault(idx, []).append(vid)
        return cls(tuple(tuple(folds[i]) for i in sorted(folds)))


def assign_folds(manifest: Manifest, k=DEFAULT_FOLDS) -> FoldPlan:
    """Deterministic, seed-free k-fold plan.

    Records are sorted by (slice_count, slice_thickness, id) and cut into
    k contiguous near-equal blocks (the first n mod k blocks get one
    extra record), so validation folds hold slice-count extremes that the
    training folds never saw.
    """
    n = len(manifest)
    if k < 1:
        raise FoldError(f"k must be >= 1, got {k}")
    if n < k:
        raise FoldError(f"manifest has {n} records, fewer than k = {k}")
    ordered = sorted(manifest, key=ManifestRecord.sort_key)
    base = n // k
    extra = n % k
    folds = []
    pos = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append(tuple(rec.id for rec in ordered[pos:pos + size]))
        pos += size
    return FoldPlan(tuple(folds))


def sample_batch(ids, batch_size, seed, epoch=0, batch_index=0):
    """Deterministically draw batch_size ids for (seed, epoch, batch_index).

    Within a batch the draw is without replacement when the pool is large
    enough, with replacement otherwise; across batches every id is drawn
    uniformly.
    """
    pool = list(ids)
    if not pool:
        raise ValueError("sample_batch on empty id pool")
    rng = np.random.default_rng(
        np.random.SeedSequence([int(seed), int(epoch), int(batch_index)])
    )
    if batch_size <= len(pool):
        idx = rng.permutation(len(pool))[:batch_size]
    else:
        idx = rng.integers(0, len(pool), size=batch_size)
    return [pool[int(i)] for i in idx]
