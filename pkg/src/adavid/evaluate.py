"""Synthetic stand-ins for multiple-choice, retrieval and frame-count evaluations."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .flops import schedule_flops
from .rng import Rng
from .tensor import RejectedInput
from .video import DimSchedule, named_schedule

CSV_HEADER = "schedule,frames,flops,metric,value,seed"


@dataclass(frozen=True)
class McqItem:
    query: str
    candidates: tuple  # indices into a clip pool
    answer: int  # position of the correct candidate, 0-based

    def __post_init__(self):
        if len(self.candidates) < 2:
            raise RejectedInput("an MCQ item needs at least two candidates")
        if not 0 <= self.answer < len(self.candidates):
            raise RejectedInput("answer index outside the candidate list")


def _unit(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def mcq_accuracy(query_embs, candidate_embs, answers) -> float:
    """Pick the candidate with highest cosine to each query; ties go to the lowest index."""
    q = _unit(query_embs)
    c = _unit(candidate_embs)
    sims = np.einsum("ne,nke->nk", q, c)
    return float(np.mean(np.argmax(sims, axis=1) == np.asarray(answers)))


def build_mcq_items(dataset, k: int = 5, n_items: int = 1000, mode: str = "inter",
                    seed: int = 0):
    """Returns ``(items, pool)``.

    ``inter``: the correct clip plus ``k-1`` clips of other classes from the
    test split. ``intra``: the candidates are the segments of one long test
    video (``k`` is then the segment count).
    """
    rng = Rng(seed).child(f"mcq-{mode}")
    items = []
    if mode == "inter":
        labels = dataset.test_labels
        n_cls = dataset.spec.num_classes
        if k > n_cls:
            raise RejectedInput(f"k={k} exceeds the number of classes {n_cls}")
        by_class = [np.flatnonzero(labels == c) for c in range(n_cls)]
        for _ in range(n_items):
            classes = rng.choice(n_cls, size=k, replace=False)
            cands = tuple(int(rng.choice(by_class[c])) for c in classes)
            items.append(McqItem(dataset.captions[classes[0]], cands, 0))
        pool = dataset.test_clips
    elif mode == "intra":
        S = dataset.spec.long_segments
        n_vid = len(dataset.long_test)
        pool = dataset.long_test.reshape(n_vid * S, -1, *dataset.long_test.shape[2:])
        for _ in range(n_items):
            v = int(rng.integers(0, n_vid))
            j = int(rng.integers(0, S))
            cls = dataset.sequences[dataset.long_test_seq[v]][j]
            items.append(McqItem(dataset.captions[cls], tuple(v * S + i for i in range(S)), j))
    else:
        raise RejectedInput(f"unknown MCQ mode {mode!r}")
    # move the answer to a random slot so position carries no signal
    shuffled = []
    for it in items:
        order = rng.permutation(len(it.candidates))
        cands = tuple(it.candidates[i] for i in order)
        shuffled.append(McqItem(it.query, cands, int(np.flatnonzero(order == it.answer)[0])))
    return shuffled, pool


def resample_frames(clips, frames: int) -> np.ndarray:
    """Pick ``frames`` uniformly spaced frames along the time axis (axis -4)."""
    clips = np.asarray(clips)
    t_ = clips.shape[-4]
    if frames == t_:
        return clips
    idx = np.round(np.linspace(0, t_ - 1, frames)).astype(int)
    return np.take(clips, idx, axis=-4)


def mcq_eval(model, items, schedule, pool, frames: int | None = None) -> float:
    used = sorted({i for it in items for i in it.candidates})
    clips = pool[used]
    if frames is not None:
        clips = resample_frames(clips, frames)
    embs = dict(zip(used, model.embed_videos(clips, schedule)))
    queries = sorted({it.query for it in items})
    qemb = dict(zip(queries, model.embed_texts(queries)))
    q = np.stack([qemb[it.query] for it in items])
    c = np.stack([[embs[i] for i in it.candidates] for it in items])
    return mcq_accuracy(q, c, [it.answer for it in items])


def retrieval_eval(query_embs, gallery_embs, ground_truth, ks=(1, 5, 10)) -> dict:
    """Recall@k of text->video retrieval by cosine similarity.

    ``ground_truth[i]`` is the gallery index matching query ``i``.
    """
    q, g = _unit(query_embs), _unit(gallery_embs)
    if len(g) < max(ks):
        raise RejectedInput(f"gallery needs at least {max(ks)} items, has {len(g)}")
    gt = list(ground_truth)
    if len(gt) != len(q):
        raise RejectedInput("ground truth must list one gallery index per query")
    for i, j in enumerate(gt):
        if j is None or not 0 <= int(j) < len(g):
            raise KeyError(f"query {i}: ground-truth id {j!r} not in gallery")
    sims = q @ g.T
    ranks = np.empty(len(q), dtype=int)
    for i, j in enumerate(gt):
        order = np.argsort(-sims[i], kind="stable")
        ranks[i] = int(np.flatnonzero(order == int(j))[0]) + 1
    return {f"R@{k}": float(np.mean(ranks <= k)) for k in ks}


# -------------------------------------------------------------------- sweeps
@dataclass
class SweepRow:
    schedule: str
    frames: int
    flops: int
    metric: str
    value: float
    seed: int


@dataclass
class SweepResult:
    rows: list

    def to_csv(self, config_hash: str | None = None, seed: int | None = None) -> str:
        head = [] if config_hash is None else [f"config_hash={config_hash}"]
        head += [] if seed is None else [f"seed={seed}"]
        lines = ["# " + " ".join(head)] if head else []
        lines.append(CSV_HEADER)
        lines += [f"{r.schedule},{r.frames},{r.flops},{r.metric},{r.value!r},{r.seed}"
                  for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_json(self, config_hash: str, seed: int | None = None) -> str:
        return json.dumps({"config_hash": config_hash, "seed": seed,
                           "rows": [asdict(r) for r in self.rows]}, indent=2, sort_keys=True)


def _schedule(s, config) -> DimSchedule:
    return s if isinstance(s, DimSchedule) else named_schedule(s, config)


def sweep(model, dataset, schedules, frame_counts, benchmark: str = "mcq", seed: int = 0,
          long_model=None, n_items: int = 500, mcq_mode: str = "inter") -> SweepResult:
    """Evaluate every (schedule, frame count) pair and attach closed-form FLOPs.

    ``mcq``: short clips resampled to ``frames`` frames; FLOPs of one clip.
    ``retrieval``: long test videos, ``frames / clip_len`` evenly spaced
    segments aggregated by ``long_model``; FLOPs of all segments.
    """
    cfg = model.video_config
    N = cfg.tokens_per_frame
    rows = []
    if benchmark == "mcq":
        items, pool = build_mcq_items(dataset, n_items=n_items, mode=mcq_mode, seed=seed)
        for s in schedules:
            sched = _schedule(s, cfg)
            for f in frame_counts:
                acc = mcq_eval(model, items, sched, pool, frames=f)
                flops = schedule_flops(sched, f, N).total
                rows.append(SweepRow(sched.label, f, flops, "accuracy", acc, seed))
    elif benchmark == "retrieval":
        if long_model is None:
            raise RejectedInput("retrieval sweep needs a trained long-video model")
        clip_len = dataset.spec.frames
        S_full = dataset.spec.long_segments
        q = long_model.embed_texts(dataset.summaries)
        for s in schedules:
            sched = _schedule(s, cfg)
            for f in frame_counts:
                if f % clip_len or not 0 < f // clip_len <= S_full:
                    raise RejectedInput(f"frame count {f} must be a multiple of {clip_len} "
                                        f"and at most {S_full * clip_len}")
                S = f // clip_len
                keep = np.round(np.linspace(0, S_full - 1, S)).astype(int)
                vids = dataset.long_test.reshape(len(dataset.long_test), S_full, clip_len,
                                                 *dataset.long_test.shape[2:])[:, keep]
                segs = vids.reshape(-1, clip_len, *vids.shape[3:])
                feats = model.embed_videos(segs, sched).reshape(len(vids), S, -1)
                gallery = long_model.embed_features(feats)
                # one query per sequence; gallery item i shows sequence long_test_seq[i]
                where = {int(seq): i for i, seq in enumerate(dataset.long_test_seq)}
                rec = retrieval_eval(q, gallery, [where[i] for i in range(len(q))])
                flops = schedule_flops(sched, f, N, "hier", S).total
                for metric, value in rec.items():
                    rows.append(SweepRow(sched.label, f, flops, metric, value, seed))
    else:
        raise RejectedInput(f"unknown benchmark {benchmark!r}")
    return SweepResult(rows)


def _ridge_head(x, y, n_classes, lam=1e-2):
    onehot = np.eye(n_classes)[y]
    xb = np.hstack([x, np.ones((len(x), 1))])
    return np.linalg.solve(xb.T @ xb + lam * np.eye(xb.shape[1]), xb.T @ onehot)


def frame_sweep_classifier(model, dataset, frame_counts, schedules, seed: int = 0,
                           head: str = "ridge") -> SweepResult:
    """Long-video classification with a linear head on whole-video embeddings.

    Each long video is sampled to ``frames`` frames and encoded as a single
    clip; classes are the ordered motif sequences. ``head="random"`` skips
    fitting and uses a random linear map (chance-level floor).
    """
    cfg = model.video_config
    N = cfg.tokens_per_frame
    n_cls = len(dataset.sequences)
    rng = Rng(seed).child("frame-sweep")
    rows = []
    for s in schedules:
        sched = _schedule(s, cfg)
        for f in frame_counts:
            if f > cfg.max_frames:
                raise RejectedInput(f"{f} frames exceeds encoder max_frames {cfg.max_frames}")
            xtr = model.embed_videos(resample_frames(dataset.long_train, f), sched)
            xte = model.embed_videos(resample_frames(dataset.long_test, f), sched)
            if head == "ridge":
                w = _ridge_head(xtr, dataset.long_train_seq, n_cls)
            else:
                w = rng.child(f"{sched.label}-{f}").normal((xtr.shape[1] + 1, n_cls))
            pred = np.argmax(np.hstack([xte, np.ones((len(xte), 1))]) @ w, axis=1)
            acc = float(np.mean(pred == dataset.long_test_seq))
            rows.append(SweepRow(sched.label, f, schedule_flops(sched, f, N).total,
                                 "top1", acc, seed))
    return SweepResult(rows)
