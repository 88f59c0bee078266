"""Deterministic synthetic video-text data.

A class is a coloured wipe: a bar that advances one patch cell per frame in
a fixed direction and leaves its trail lit. Reversing the frames of a clip
gives a different clip, so the encoder has to use frame order.
Long videos chain ``long_segments`` class clips; their summaries list the
classes in order, and every multiset of classes appears in several orders.
"""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass, fields

import numpy as np

from . import io
from .rng import Rng
from .tensor import RejectedInput

COLORS = ("red", "green", "blue")
DIRECTIONS = {"right": (0, 1), "left": (0, -1), "down": (1, 0), "up": (-1, 0)}


@dataclass
class SyntheticDatasetSpec:
    num_classes: int = 8
    samples_per_class: int = 16
    test_per_class: int = 8
    noise: float = 0.1
    frames: int = 4
    image: int = 32
    patch: int = 8
    channels: int = 3
    long_segments: int = 4
    long_multisets: int = 8
    long_orders: int = 4
    long_train_copies: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(COLORS) * len(DIRECTIONS):
            raise RejectedInput(f"num_classes must be in [1, {len(COLORS) * len(DIRECTIONS)}]")
        if self.image % self.patch:
            raise RejectedInput("image must be a multiple of patch")
        if self.long_segments > self.num_classes:
            raise RejectedInput("long_segments cannot exceed num_classes")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def class_attributes(k: int) -> tuple[str, str]:
    dirs = list(DIRECTIONS)
    return COLORS[k % len(COLORS)], dirs[(k // len(COLORS)) % len(dirs)]


def class_caption(k: int) -> str:
    color, direction = class_attributes(k)
    return f"{color} patch moves {direction}"


def summary_caption(seq) -> str:
    parts = [" ".join(class_attributes(k)) for k in seq]
    return "first " + " then ".join(parts)


def motif(k: int, spec: SyntheticDatasetSpec) -> np.ndarray:
    """Noise-free clip ``(T, C, H, W)`` for class ``k``.

    A one-patch-thick bar in the class colour enters at one edge and advances
    one patch cell per frame, leaving its earlier cells lit (a wipe). The bar
    is vertical for left/right and horizontal for up/down.
    """
    color, direction = class_attributes(k)
    ci = COLORS.index(color) % spec.channels
    g, p = spec.image // spec.patch, spec.patch
    dr, dc = DIRECTIONS[direction]
    step = dr + dc
    start = 0 if step > 0 else g - 1
    clip = np.zeros((spec.frames, spec.channels, spec.image, spec.image))
    for t in range(spec.frames):
        for j in range(min(t, g - 1) + 1):
            cell = start + step * j
            if dc:
                clip[t, ci, :, cell * p:(cell + 1) * p] = 1.0
            else:
                clip[t, ci, cell * p:(cell + 1) * p, :] = 1.0
    return clip


def _noisy(base: np.ndarray, noise: float, rng: Rng) -> np.ndarray:
    if noise == 0:
        return base.copy()
    return np.clip(base + rng.normal(base.shape, noise), 0.0, 1.0)


@dataclass
class Dataset:
    spec: SyntheticDatasetSpec
    captions: list  # per class
    train_clips: np.ndarray
    train_labels: np.ndarray
    test_clips: np.ndarray
    test_labels: np.ndarray
    sequences: list  # ordered class tuples
    summaries: list  # per sequence
    long_train: np.ndarray
    long_train_seq: np.ndarray
    long_test: np.ndarray
    long_test_seq: np.ndarray

    @property
    def texts(self) -> list:
        return list(self.captions) + list(self.summaries)


def _long_sequences(spec: SyntheticDatasetSpec, rng: Rng) -> list:
    S = spec.long_segments
    subsets = list(itertools.combinations(range(spec.num_classes), S))
    picked = rng.permutation(len(subsets))[:spec.long_multisets]
    seqs = []
    for i in sorted(picked):
        perms = list(itertools.permutations(subsets[i]))
        for j in sorted(rng.permutation(len(perms))[:spec.long_orders]):
            seqs.append(perms[j])
    return seqs


def generate_synthetic(spec: SyntheticDatasetSpec) -> Dataset:
    rng = Rng(spec.seed).child("dataset")
    motifs = [motif(k, spec) for k in range(spec.num_classes)]

    def clips(per_class, purpose):
        r = rng.child(purpose)
        labels = np.repeat(np.arange(spec.num_classes), per_class)
        return np.stack([_noisy(motifs[k], spec.noise, r) for k in labels]), labels

    train_clips, train_labels = clips(spec.samples_per_class, "train")
    test_clips, test_labels = clips(spec.test_per_class, "test")

    seqs = _long_sequences(spec, rng.child("sequences"))

    def long(copies, purpose):
        r = rng.child(purpose)
        ids = np.repeat(np.arange(len(seqs)), copies)
        vids = [np.concatenate([_noisy(motifs[k], spec.noise, r) for k in seqs[i]])
                for i in ids]
        return np.stack(vids), ids

    long_train, long_train_seq = long(spec.long_train_copies, "long-train")
    long_test, long_test_seq = long(1, "long-test")
    return Dataset(
        spec=spec,
        captions=[class_caption(k) for k in range(spec.num_classes)],
        train_clips=train_clips, train_labels=train_labels,
        test_clips=test_clips, test_labels=test_labels,
        sequences=seqs, summaries=[summary_caption(s) for s in seqs],
        long_train=long_train, long_train_seq=long_train_seq,
        long_test=long_test, long_test_seq=long_test_seq,
    )


_CLIP_FIELDS = ("train_clips", "test_clips", "long_train", "long_test")
_LABEL_FIELDS = ("train_labels", "test_labels", "long_train_seq", "long_test_seq")


def save_dataset(directory, ds: Dataset, header: dict | None = None) -> None:
    """Write ``<field>.clip`` stacks plus ``dataset.json`` (labels and texts)."""
    os.makedirs(directory, exist_ok=True)
    for name in _CLIP_FIELDS:
        io.save_clips(os.path.join(directory, f"{name}.clip"), getattr(ds, name))
    meta = {**(header or {}), "spec": ds.spec.to_dict(), "captions": ds.captions,
            "sequences": [list(map(int, s)) for s in ds.sequences],
            "summaries": ds.summaries,
            **{name: getattr(ds, name).tolist() for name in _LABEL_FIELDS}}
    io.atomic_write(os.path.join(directory, "dataset.json"),
                    json.dumps(meta, indent=1, sort_keys=True).encode())


def load_dataset(directory) -> Dataset:
    path = os.path.join(directory, "dataset.json")
    try:
        with open(path, encoding="utf-8") as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise io.FormatError(f"{path}: {exc}") from exc
    try:
        return Dataset(
            spec=SyntheticDatasetSpec(**meta["spec"]),
            captions=list(meta["captions"]),
            sequences=[tuple(s) for s in meta["sequences"]],
            summaries=list(meta["summaries"]),
            **{name: io.load_clips(os.path.join(directory, f"{name}.clip"))
               for name in _CLIP_FIELDS},
            **{name: np.asarray(meta[name], dtype=np.int64) for name in _LABEL_FIELDS},
        )
    except KeyError as exc:
        raise io.FormatError(f"{path}: missing field {exc}") from exc
