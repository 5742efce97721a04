"""Measurement protocols for trained embedders.

* group-property embedding error over recomposition tuples
* nearest-neighbor sequence completion (A -> B' -> C against A -> C)
* spatial and temporal gradient saliency
* embedding export for external clustering / dimensionality reduction
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import InvalidInputError
from .imaging import ImageSequence, Pose2
from .model import PAIR, MotionEmbedder
from .recomposer import CATEGORIES, RecompositionTuple, SamplerConfig, sample_tuple
from .training import TrainConfig, gather_bank, loss_from_embeddings, _pair_tables

SPATIAL = "spatial"
TEMPORAL = "temporal"


# --------------------------------------------------------------------------
# group-property error


@dataclass
class GroupErrorReport:
    equiv_error: float
    ineq_error: float
    ineq_violation: float
    chance_baseline: float
    equiv_by_type: dict[str, float]
    ineq_by_type: dict[str, float]
    n_tuples: int
    margin: float

    @property
    def ratio(self) -> float:
        return self.equiv_error / self.ineq_error if self.ineq_error > 0 else math.inf

    @property
    def separated(self) -> bool:
        """False when equiv and ineq errors are within a factor of two."""
        return not (0.5 <= self.ratio <= 2.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratio"] = self.ratio
        d["separated"] = self.separated
        d["verdict"] = "separated" if self.separated else "no separation"
        return d


def sample_tuples(sequences: Sequence[ImageSequence], n_tuples: int, sampler: SamplerConfig,
                  rng: np.random.Generator, cuts=None) -> list[RecompositionTuple]:
    """Round-robin over ``sequences`` until ``n_tuples`` tuples are drawn."""
    tuples: list[RecompositionTuple] = []
    misses = 0
    k = 0
    while len(tuples) < n_tuples:
        i = k % len(sequences)
        t = sample_tuple(sequences[i], sampler, rng, cuts[i] if cuts else ())
        k += 1
        if t is None:
            misses += 1
            if misses > len(sequences) and not tuples:
                raise InvalidInputError("no test sequence is long enough to sample tuples from")
            continue
        tuples.append(t)
    return tuples


@torch.no_grad()
def embed_tuples(model: MotionEmbedder, tuples: Sequence[RecompositionTuple], batch: int = 50) -> np.ndarray:
    """(n_tuples, 6, head_dim) embeddings in member order f1 f2 b1 b2 i1 i2."""
    model.eval()
    out = []
    for lo in range(0, len(tuples), batch):
        bank, index_lists = gather_bank(tuples[lo : lo + batch], model.head.weight.dtype)
        out.append(model.embed_indexed(bank, index_lists).double().numpy())
    return np.concatenate(out).reshape(len(tuples), 6, -1)


def cosine_distance_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return 1.0 - (a * b).sum(-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


def chance_distance(embeddings: np.ndarray, rng: np.random.Generator, n_pairs: int = 1000,
                    groups: Sequence | None = None) -> float:
    """Mean cosine distance between randomly paired rows (from different groups)."""
    embeddings = np.asarray(embeddings)
    n = len(embeddings)
    if n < 2:
        raise InvalidInputError("need at least two embeddings")
    groups = np.asarray(groups) if groups is not None else np.arange(n)
    ia, ib = [], []
    while len(ia) < n_pairs:
        i, j = rng.integers(n, size=2)
        if i != j and groups[i] != groups[j]:
            ia.append(i)
            ib.append(j)
    return float(cosine_distance_rows(embeddings[ia], embeddings[ib]).mean())


def group_error(model: MotionEmbedder, sequences: Sequence[ImageSequence], n_tuples: int,
                rng: np.random.Generator, sampler: SamplerConfig | None = None,
                cfg: TrainConfig | None = None, cuts=None) -> GroupErrorReport:
    """Mean embedding distance over equivalent and inequivalent tuple pairs.

    Distances come from the same routine the training loss uses. The chance
    baseline pairs member embeddings drawn from different source sequences.
    """
    if n_tuples <= 0:
        raise InvalidInputError("n_tuples must be positive; an empty report is undefined")
    if not sequences:
        raise InvalidInputError("no test sequences")
    sampler = sampler or SamplerConfig()
    cfg = cfg or TrainConfig()
    tuples = sample_tuples(sequences, n_tuples, sampler, rng, cuts)
    emb = embed_tuples(model, tuples)
    flat = torch.from_numpy(emb.reshape(-1, emb.shape[-1]))
    _, _, d = loss_from_embeddings(flat, cfg, sampler.negatives_per_tuple)
    _, _, neg, cat = _pair_tables(len(tuples), sampler.negatives_per_tuple)
    d, neg, cat = d.numpy(), neg.numpy(), cat.numpy()

    by_cat = {c: float(d[cat == k].mean()) for k, c in enumerate(CATEGORIES) if (cat == k).any()}
    owners = np.repeat([id(t.f1.source) for t in tuples], 6)
    chance = chance_distance(emb.reshape(-1, emb.shape[-1]), rng, 1000, owners) if len(set(owners)) > 1 else math.nan
    return GroupErrorReport(
        equiv_error=float(d[~neg].mean()),
        ineq_error=float(d[neg].mean()),
        ineq_violation=float(np.maximum(cfg.margin - d[neg], 0.0).mean()),
        chance_baseline=chance,
        equiv_by_type={c.split("_", 1)[1]: v for c, v in by_cat.items() if c.startswith("positive")},
        ineq_by_type={c.split("_", 1)[1]: v for c, v in by_cat.items() if c.startswith("negative")},
        n_tuples=len(tuples),
        margin=cfg.margin,
    )


# --------------------------------------------------------------------------
# nearest-neighbor completion


@dataclass
class NnCompletionResult:
    probe_id: str
    skip: int
    distance_true_middle: float
    min_distance_same_sequence_others: float
    min_distance_out_of_sequence: float
    rank_of_true: int
    pixel_true_middle: float
    pixel_min_same_sequence_others: float
    pixel_min_out_of_sequence: float
    distance_duplicate_start: float
    n_candidates: int


@dataclass(frozen=True)
class Probe:
    sequence: int
    start: int
    skip: int

    @property
    def frames(self) -> tuple[int, int, int]:
        return self.start, self.start + self.skip, self.start + 2 * self.skip


def make_probes(sequences: Sequence[ImageSequence], skip: int, rng: np.random.Generator,
                per_sequence: int = 10) -> list[Probe]:
    if skip < 1:
        raise InvalidInputError("skip must be >= 1")
    probes = []
    for s, seq in enumerate(sequences):
        n_start = len(seq) - 2 * skip
        if n_start <= 0:
            continue
        starts = rng.choice(n_start, size=min(per_sequence, n_start), replace=False)
        probes.extend(Probe(s, int(a), skip) for a in np.sort(starts))
    return probes


def _mad(x: np.ndarray, ref: np.ndarray) -> np.ndarray:
    return np.abs(x - ref[None]).mean(axis=(1, 2))


@torch.no_grad()
def nn_complete(model: MotionEmbedder, sequences: Sequence[ImageSequence], probes: Sequence[Probe],
                rng: np.random.Generator, out_per_sequence: int = 20,
                candidate_order: np.random.Generator | None = None) -> list[NnCompletionResult]:
    """Rank the true middle frame among candidates B' by d(A B' C, A C).

    Candidates are every other frame of the probe's sequence (the query frames
    A, B and C excluded) and ``out_per_sequence`` random frames from each other
    sequence. Ties count in favor of the true frame. ``candidate_order``
    optionally shuffles the candidate pool, which must not change any result.
    """
    model.eval()
    results = []
    shape = sequences[0].shape
    for n, probe in enumerate(probes):
        seq = sequences[probe.sequence]
        if seq.shape != shape:
            raise InvalidInputError("probe frames differ in size from the candidate pool")
        a, b, c = probe.frames
        same = [k for k in range(len(seq)) if k not in (a, b, c)]
        same_frames = np.asarray(seq.frames[same], np.float32) if same else np.zeros((0,) + shape, np.float32)
        out_blocks = []
        for s, other in enumerate(sequences):
            if s == probe.sequence:
                continue
            if other.shape != shape:
                raise InvalidInputError("candidate frames differ in size from the probe")
            pick = np.sort(rng.choice(len(other), size=min(out_per_sequence, len(other)), replace=False))
            out_blocks.append(np.asarray(other.frames[pick], np.float32))
        out_frames = np.concatenate(out_blocks) if out_blocks else np.zeros((0,) + shape, np.float32)

        fa = np.asarray(seq.frames[a], np.float32)
        fb = np.asarray(seq.frames[b], np.float32)
        fc = np.asarray(seq.frames[c], np.float32)
        cands = np.concatenate([fb[None], same_frames, out_frames])
        kind = np.array([0] + [1] * len(same_frames) + [2] * len(out_frames))
        order = np.arange(len(cands))
        if candidate_order is not None:
            order = candidate_order.permutation(len(cands))
        cands, kind = cands[order], kind[order]

        bank = torch.from_numpy(np.concatenate([fa[None], fc[None], cands])).to(model.head.weight.dtype)
        seqs = [[0, 1], [0, 0, 1]] + [[0, 2 + i, 1] for i in range(len(cands))]
        emb = model.embed_indexed(bank, seqs).double().numpy()
        cand_d = cosine_distance_rows(emb[2:], emb[0][None])
        d_dup = float(cosine_distance_rows(emb[1][None], emb[0][None])[0])
        true_d = float(cand_d[kind == 0][0])
        pix = _mad(cands, fa)
        results.append(NnCompletionResult(
            probe_id=f"{seq.source_id}:{a}-{b}-{c}",
            skip=probe.skip,
            distance_true_middle=true_d,
            min_distance_same_sequence_others=float(cand_d[kind == 1].min()) if (kind == 1).any() else math.nan,
            min_distance_out_of_sequence=float(cand_d[kind == 2].min()) if (kind == 2).any() else math.nan,
            rank_of_true=1 + int((cand_d[kind != 0] < true_d).sum()),
            pixel_true_middle=float(pix[kind == 0][0]),
            pixel_min_same_sequence_others=float(pix[kind == 1].min()) if (kind == 1).any() else math.nan,
            pixel_min_out_of_sequence=float(pix[kind == 2].min()) if (kind == 2).any() else math.nan,
            distance_duplicate_start=d_dup,
            n_candidates=len(cands),
        ))
    return results


def summarize_nn(results: Sequence[NnCompletionResult]) -> dict:
    if not results:
        raise InvalidInputError("no nearest-neighbor results to summarize")
    col = lambda name: np.array([getattr(r, name) for r in results], dtype=np.float64)
    true_d = col("distance_true_middle")
    out_d = col("min_distance_out_of_sequence")
    same_d = col("min_distance_same_sequence_others")
    ranks = col("rank_of_true")
    return {
        "skip": sorted({r.skip for r in results}),
        "n_probes": len(results),
        "rank1_fraction": float((ranks == 1).mean()),
        "mean_rank": float(ranks.mean()),
        "mean_true_middle": float(np.nanmean(true_d)),
        "mean_min_same_sequence": float(np.nanmean(same_d)),
        "mean_min_out_of_sequence": float(np.nanmean(out_d)),
        "median_true_over_median_min_out": float(np.nanmedian(true_d) / np.nanmedian(out_d)),
        "duplicate_beats_true_fraction": float((col("distance_duplicate_start") < true_d).mean()),
        "pixel_mean_true_middle": float(np.nanmean(col("pixel_true_middle"))),
        "pixel_mean_min_same_sequence": float(np.nanmean(col("pixel_min_same_sequence_others"))),
        "pixel_mean_min_out_of_sequence": float(np.nanmean(col("pixel_min_out_of_sequence"))),
        "pixel_true_over_min_same": float(np.nanmean(col("pixel_true_middle"))
                                          / np.nanmean(col("pixel_min_same_sequence_others"))),
    }


def write_nn_rows(results: Sequence[NnCompletionResult], path: str | Path) -> None:
    names = list(NnCompletionResult.__dataclass_fields__)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(names)
        for r in results:
            w.writerow([getattr(r, n) for n in names])


# --------------------------------------------------------------------------
# saliency


@dataclass
class SaliencyMap:
    values: np.ndarray  # (H, W) signed gradient
    source: str
    frame: int
    pair: int | None = None  # step index for spatial maps


def saliency(model: MotionEmbedder, frames, source: str = SPATIAL) -> list[SaliencyMap]:
    """Signed input gradients of an activation norm.

    ``spatial``: for every CNN step, the gradient of ||features|| with respect
    to each frame of that step (two maps per pair in image-pair mode).
    ``temporal``: the gradient of ||embedding|| with respect to every frame.
    """
    model.eval()
    frames = torch.as_tensor(np.array(frames), dtype=model.head.weight.dtype)
    if frames.dim() != 3:
        raise InvalidInputError("saliency expects a (T, H, W) sequence")
    pair_mode = model.spec.input_mode == PAIR
    maps: list[SaliencyMap] = []
    if source == SPATIAL:
        steps = range(frames.shape[0] - 1) if pair_mode else range(frames.shape[0])
        for t in steps:
            ids = (t, t + 1) if pair_mode else (t,)
            x = frames[list(ids)].clone().requires_grad_(True)
            feat = model.features(x.unsqueeze(0))
            torch.linalg.vector_norm(feat).backward()
            for k, fi in enumerate(ids):
                maps.append(SaliencyMap(x.grad[k].detach().numpy().copy(), SPATIAL, fi, t))
    elif source == TEMPORAL:
        x = frames.clone().requires_grad_(True)
        emb = model.embed_indexed(x, [list(range(x.shape[0]))])[0]
        torch.linalg.vector_norm(emb).backward()
        maps = [SaliencyMap(x.grad[t].detach().numpy().copy(), TEMPORAL, t) for t in range(x.shape[0])]
    else:
        raise InvalidInputError(f"saliency source must be '{SPATIAL}' or '{TEMPORAL}'")
    return maps


def mass_in_mask(maps: Sequence[SaliencyMap], masks: Sequence[np.ndarray]) -> float:
    """Fraction of total |saliency| falling inside each map's frame mask."""
    inside = total = 0.0
    for m in maps:
        mag = np.abs(m.values)
        inside += float(mag[masks[m.frame]].sum())
        total += float(mag.sum())
    return inside / total if total > 0 else math.nan


def diverging_rgb(values: np.ndarray) -> np.ndarray:
    """8-bit RGB: blue for negative, white at 0, red for positive (symmetric scale)."""
    scale = float(np.abs(values).max())
    v = values / scale if scale > 0 else np.zeros_like(values)
    rgb = np.ones(values.shape + (3,))
    pos = np.clip(v, 0, 1)
    neg = np.clip(-v, 0, 1)
    rgb[..., 0] -= neg
    rgb[..., 1] -= pos + neg
    rgb[..., 2] -= pos
    return np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)


def write_saliency(maps: Sequence[SaliencyMap], out_dir: str | Path, prefix: str = "saliency") -> list[str]:
    """Write each map as little-endian f32 (``.f32``) plus a PNG; returns file stems."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for n, m in enumerate(maps):
        stem = f"{prefix}_{m.source}_{n:03d}_frame{m.frame:03d}"
        np.ascontiguousarray(m.values, dtype="<f4").tofile(out_dir / f"{stem}.f32")
        Image.fromarray(diverging_rgb(m.values)).save(out_dir / f"{stem}.png")
        index.append({"stem": stem, "source": m.source, "frame": m.frame, "pair": m.pair,
                      "shape": list(m.values.shape), "abs_sum": float(np.abs(m.values).sum())})
    (out_dir / f"{prefix}_index.json").write_text(json.dumps(index, indent=2))
    return [e["stem"] for e in index]


# --------------------------------------------------------------------------
# embedding export

GT_COLUMNS = ("translation_magnitude", "translation_direction_deg", "rotation_deg")


def motion_summary(poses: Sequence[Pose2] | None) -> tuple[float, float, float] | None:
    """Net translation magnitude, direction (degrees, [0, 360)) and rotation."""
    if not poses:
        return None
    first, last = poses[0], poses[-1]
    dx, dy = last.tx - first.tx, last.ty - first.ty
    direction = math.degrees(math.atan2(dy, dx)) % 360.0
    rotation = (last.theta - first.theta) % 360.0
    return math.hypot(dx, dy), direction, rotation


@torch.no_grad()
def embed_sequences(model: MotionEmbedder, sequences: Sequence[ImageSequence],
                    positions: Sequence[int] | None = None, batch: int = 64) -> np.ndarray:
    """Embed whole sequences (or the given frame positions of each)."""
    model.eval()
    out = []
    for lo in range(0, len(sequences), batch):
        part = sequences[lo : lo + batch]
        blocks, lists, offset = [], [], 0
        for seq in part:
            pos = list(positions) if positions is not None else list(range(len(seq)))
            blocks.append(np.asarray(seq.frames[pos], np.float32))
            lists.append(list(range(offset, offset + len(pos))))
            offset += len(pos)
        bank = torch.from_numpy(np.concatenate(blocks)).to(model.head.weight.dtype)
        out.append(model.embed_indexed(bank, lists).double().numpy())
    if not out:
        return np.zeros((0, model.spec.head_dim))
    return np.concatenate(out)


def export_embeddings(model: MotionEmbedder, items: Sequence[tuple[ImageSequence, Sequence[Pose2] | None]],
                      path: str | Path, positions: Sequence[int] | None = None) -> int:
    """CSV: sequence id, ground-truth motion (blank when unknown), embedding."""
    path = Path(path)
    dim = model.spec.head_dim
    emb = embed_sequences(model, [s for s, _ in items], positions)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sequence_id", *GT_COLUMNS, *(f"e{k:03d}" for k in range(dim))])
        for (seq, poses), row in zip(items, emb):
            gt = motion_summary(poses)
            gt_cells = [repr(v) for v in gt] if gt else ["", "", ""]
            w.writerow([seq.source_id, *gt_cells, *(repr(float(v)) for v in row)])
    return len(items)


def read_embeddings(path: str | Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """(ids, ground truth (N, 3) with NaN for unknown, embeddings (N, D))."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    dim = len(header) - 1 - len(GT_COLUMNS)
    ids = [r[0] for r in body]
    gt = np.array([[float(c) if c else math.nan for c in r[1:4]] for r in body]).reshape(-1, 3)
    emb = np.array([[float(c) for c in r[4:]] for r in body]).reshape(-1, dim)
    return ids, gt, emb


def direction_octant(direction_deg: np.ndarray) -> np.ndarray:
    """Bin directions into 8 sectors of 45 degrees centered on 0, 45, ..."""
    return (np.floor((np.asarray(direction_deg) + 22.5) / 45.0).astype(int)) % 8


def nearest_centroid_accuracy(emb: np.ndarray, labels: np.ndarray, train: np.ndarray) -> float:
    """Accuracy on ``~train`` rows of a cosine nearest-centroid classifier fit on ``train`` rows."""
    x = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    classes = np.unique(labels[train])
    centroids = np.stack([x[train & (labels == c)].mean(0) for c in classes])
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    pred = classes[np.argmax(x[~train] @ centroids.T, axis=1)]
    return float((pred == labels[~train]).mean())


def linear_readout_r2(emb: np.ndarray, target: np.ndarray, train: np.ndarray, ridge: float = 1e-3) -> float:
    """Held-out R^2 of a ridge-regularized linear readout fit on ``train`` rows."""
    x = np.hstack([emb, np.ones((len(emb), 1))])
    xt, yt = x[train], target[train]
    reg = ridge * np.eye(x.shape[1])
    reg[-1, -1] = 0.0
    w = np.linalg.solve(xt.T @ xt + reg * len(xt), xt.T @ yt)
    pred = x[~train] @ w
    y = target[~train]
    return float(1.0 - ((y - pred) ** 2).sum() / ((y - y.mean()) ** 2).sum())
