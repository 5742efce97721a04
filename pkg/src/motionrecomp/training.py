"""Siamese hinge-loss training over recomposition tuples."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import InvalidInputError, TrainingDiverged, UndefinedDistanceError
from .imaging import ImageSequence
from .model import (
    CheckpointState,
    ModelSpec,
    MotionEmbedder,
    load_parameters,
    model_arrays,
    optimizer_arrays,
    restore_optimizer,
    save_checkpoint,
    torch_rng_bytes,
)
from .recomposer import (
    CATEGORIES,
    MEMBER_NAMES,
    Relation,
    RecompositionTuple,
    SamplerConfig,
    enumerate_pairs,
    sample_tuple,
)

log = logging.getLogger(__name__)

COSINE = "cosine"
EUCLIDEAN = "euclidean"


@dataclass
class TrainConfig:
    margin: float = 0.5
    distance: str = COSINE
    lr: float = 1e-2
    decay_epochs: int = 30
    decay_factor: float = 0.1
    batch_sequences: int = 50
    epochs: int = 30
    seed: int = 0
    val_fraction: float = 0.1
    val_tuples: int = 200
    bn_batches: int = 8  # batches used to re-estimate BatchNorm statistics each epoch

    def __post_init__(self):
        if self.margin <= 0:
            raise InvalidInputError("margin must be > 0")
        if self.lr < 0:
            raise InvalidInputError("lr must be >= 0")
        if self.batch_sequences < 1 or self.epochs < 0 or self.decay_epochs < 1:
            raise InvalidInputError("batch_sequences and decay_epochs must be >= 1, epochs >= 0")
        if self.distance not in (COSINE, EUCLIDEAN):
            raise InvalidInputError(f"distance must be '{COSINE}' or '{EUCLIDEAN}'")
        if self.bn_batches < 0:
            raise InvalidInputError("bn_batches must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise InvalidInputError("val_fraction must be in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``."""
        return self.lr * self.decay_factor ** (epoch // self.decay_epochs)


# --------------------------------------------------------------------------
# distances and the hinge loss


def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedDistanceError("cosine distance is undefined for a zero vector")
    return float(1.0 - np.dot(a, b) / (na * nb))


def distances(a: torch.Tensor, b: torch.Tensor, kind: str = COSINE) -> torch.Tensor:
    """Row-wise distance between (N, D) embedding batches."""
    if kind == EUCLIDEAN:
        return torch.linalg.vector_norm(a - b, dim=-1)
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise UndefinedDistanceError("cosine distance is undefined for a zero embedding")
    return 1.0 - (a * b).sum(-1) / (na * nb)


def pair_loss(r1, r2, relation: Relation, cfg: TrainConfig | None = None) -> float:
    cfg = cfg or TrainConfig()
    if cfg.distance == COSINE:
        d = cosine_distance(r1, r2)
    else:
        d = float(np.linalg.norm(np.asarray(r1, np.float64) - np.asarray(r2, np.float64)))
    if relation is Relation.POSITIVE:
        return d
    return max(0.0, cfg.margin - d)


@dataclass
class LossBreakdown:
    totals: dict[str, float] = field(default_factory=lambda: {c: 0.0 for c in CATEGORIES})
    counts: dict[str, int] = field(default_factory=lambda: {c: 0 for c in CATEGORIES})

    @property
    def total(self) -> float:
        return sum(self.totals.values())

    @property
    def pairs(self) -> int:
        return sum(self.counts.values())

    def mean(self) -> float:
        return self.total / max(self.pairs, 1)

    def add(self, other: LossBreakdown) -> None:
        for c in CATEGORIES:
            self.totals[c] += other.totals[c]
            self.counts[c] += other.counts[c]

    def as_dict(self) -> dict:
        return {"totals": dict(self.totals), "counts": dict(self.counts)}


# --------------------------------------------------------------------------
# batch assembly


def gather_bank(tuples: Sequence[RecompositionTuple], dtype=torch.float32):
    """Frame bank holding every frame the tuples touch, plus per-member index lists."""
    blocks = []
    index_lists = []
    offset = 0
    for t in tuples:
        used = sorted({p for m in t.members for p in m.positions})
        local = {p: offset + k for k, p in enumerate(used)}
        source = t.f1.source
        if source is None:
            raise InvalidInputError("tuple members need an attached source sequence")
        blocks.append(np.asarray(source.frames[used], dtype=np.float32))
        index_lists.extend([local[p] for p in m.positions] for m in t.members)
        offset += len(used)
    bank = torch.from_numpy(np.concatenate(blocks)).to(dtype)
    return bank, index_lists


def _pair_tables(n_tuples: int, negatives_per_tuple: int):
    labels = enumerate_pairs(None, negatives_per_tuple)
    pos = {name: k for k, name in enumerate(MEMBER_NAMES)}
    ia, ib, neg, cat = [], [], [], []
    for t in range(n_tuples):
        for lab in labels:
            ia.append(6 * t + pos[lab.a])
            ib.append(6 * t + pos[lab.b])
            neg.append(lab.relation is Relation.NEGATIVE)
            cat.append(CATEGORIES.index(lab.category))
    return (torch.tensor(ia), torch.tensor(ib), torch.tensor(neg), torch.tensor(cat))


def loss_from_embeddings(emb: torch.Tensor, cfg: TrainConfig, negatives_per_tuple: int = 6):
    """Mean hinge loss over all labeled pairs of consecutive 6-member blocks."""
    n_tuples = emb.shape[0] // 6
    ia, ib, neg, cat = _pair_tables(n_tuples, negatives_per_tuple)
    d = distances(emb[ia], emb[ib], cfg.distance)
    per_pair = torch.where(neg, torch.clamp(cfg.margin - d, min=0.0), d)
    br = LossBreakdown()
    vals = per_pair.detach().double()
    for k, c in enumerate(CATEGORIES):
        sel = cat == k
        br.totals[c] = float(vals[sel].sum())
        br.counts[c] = int(sel.sum())
    return per_pair.mean(), br, d.detach()


def batch_loss(tuples: Sequence[RecompositionTuple], model: MotionEmbedder, cfg: TrainConfig,
               negatives_per_tuple: int = 6):
    """(mean loss tensor, LossBreakdown) for a batch of tuples."""
    if not tuples:
        raise InvalidInputError("empty batch")
    bank, index_lists = gather_bank(tuples, model.head.weight.dtype)
    emb = model.embed_indexed(bank, index_lists)
    loss, br, _ = loss_from_embeddings(emb, cfg, negatives_per_tuple)
    return loss, br


@torch.no_grad()
def recalibrate_batchnorm(model: MotionEmbedder, sequences: Sequence[ImageSequence], sampler: SamplerConfig,
                          rng: np.random.Generator, batches: int, batch_sequences: int,
                          cuts: Sequence[Sequence[int]] | None = None) -> None:
    """Replace BatchNorm running statistics with exact averages over fresh batches.

    The exponential running averages lag behind the weights; evaluating with
    them makes held-out distances swing from epoch to epoch.
    """
    norms = [m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    if not norms or batches == 0:
        return
    was_training = model.training
    momenta = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None  # cumulative average
    model.train()
    order = rng.permutation(len(sequences))
    done = 0
    for lo in range(0, len(order), batch_sequences):
        tuples = [t for i in order[lo : lo + batch_sequences]
                  if (t := sample_tuple(sequences[i], sampler, rng, cuts[i] if cuts else ())) is not None]
        if not tuples:
            continue
        bank, index_lists = gather_bank(tuples, model.head.weight.dtype)
        model.embed_indexed(bank, index_lists)
        done += 1
        if done == batches:
            break
    for m, momentum in zip(norms, momenta):
        m.momentum = momentum
    model.train(was_training)


# --------------------------------------------------------------------------
# validation


@torch.no_grad()
def tuple_distances(model: MotionEmbedder, sequences: Sequence[ImageSequence], n_tuples: int,
                    sampler: SamplerConfig, rng: np.random.Generator, cfg: TrainConfig,
                    cuts: Sequence[Sequence[int]] | None = None, batch: int = 50):
    """Sample tuples round-robin over ``sequences`` and return per-pair distances.

    Returns (distances, is_negative, category index) arrays, plus the tuples.
    """
    tuples = []
    k = 0
    attempts = 0
    while len(tuples) < n_tuples and sequences:
        i = k % len(sequences)
        t = sample_tuple(sequences[i], sampler, rng, cuts[i] if cuts else ())
        if t is not None:
            tuples.append(t)
        k += 1
        attempts += 1
        if attempts > 10 * n_tuples + len(sequences) and not tuples:
            break
    d_all, neg_all, cat_all = [], [], []
    for lo in range(0, len(tuples), batch):
        part = tuples[lo : lo + batch]
        bank, index_lists = gather_bank(part, model.head.weight.dtype)
        emb = model.embed_indexed(bank, index_lists)
        _, _, d = loss_from_embeddings(emb, cfg, sampler.negatives_per_tuple)
        ia, ib, neg, cat = _pair_tables(len(part), sampler.negatives_per_tuple)
        d_all.append(d.double().numpy())
        neg_all.append(neg.numpy())
        cat_all.append(cat.numpy())
    if not tuples:
        return np.zeros(0), np.zeros(0, bool), np.zeros(0, int), tuples
    return np.concatenate(d_all), np.concatenate(neg_all), np.concatenate(cat_all), tuples


def validation_metrics(model, sequences, sampler, cfg, cuts=None) -> dict | None:
    if not sequences:
        return None
    was_training = model.training
    model.eval()
    rng = np.random.default_rng([cfg.seed, 7919])
    d, neg, _, _ = tuple_distances(model, sequences, cfg.val_tuples, sampler, rng, cfg, cuts)
    model.train(was_training)
    if d.size == 0:
        return None
    equiv = float(d[~neg].mean())
    ineq = float(d[neg].mean())
    loss = float(np.where(neg, np.maximum(cfg.margin - d, 0.0), d).mean())
    return {"val_loss": loss, "val_equiv": equiv, "val_ineq": ineq, "val_gap": ineq - equiv}


# --------------------------------------------------------------------------
# training loop


def split_train_val(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 104729]).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _rng_state_blob() -> bytes:
    return torch_rng_bytes()


@dataclass
class TrainResult:
    state: CheckpointState
    metrics: list[dict]
    model: MotionEmbedder


def train(
    sequences: Sequence[ImageSequence],
    cfg: TrainConfig,
    spec: ModelSpec,
    sampler: SamplerConfig | None = None,
    out_dir: str | Path | None = None,
    resume: CheckpointState | None = None,
    cuts: Sequence[Sequence[int]] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    meta: dict | None = None,
) -> TrainResult:
    """Train a MotionEmbedder with Adam and a step-decay learning rate.

    Data order depends only on ``cfg.seed`` and the epoch number, so a resumed
    run repeats exactly what an uninterrupted run would have done. When
    ``out_dir`` is given, ``metrics.jsonl`` and ``last.ckpt`` are written there
    after every epoch.
    """
    sampler = sampler or SamplerConfig(seed=cfg.seed)
    if not sequences:
        raise InvalidInputError("training needs at least one sequence")
    too_short = [s.source_id for s in sequences if len(s) < sampler.min_sequence_length]
    if len(too_short) == len(sequences):
        raise InvalidInputError(f"every sequence is shorter than {sampler.min_sequence_length} frames")

    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    train_idx, val_idx = split_train_val(len(sequences), cfg.val_fraction, cfg.seed)
    train_seqs = [sequences[i] for i in train_idx]
    train_cuts = [cuts[i] for i in train_idx] if cuts else None
    val_seqs = [sequences[i] for i in val_idx]
    val_cuts = [cuts[i] for i in val_idx] if cuts else None

    torch.manual_seed(cfg.seed)
    model = MotionEmbedder(spec)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    start_epoch = 0
    metrics: list[dict] = []
    if resume is not None:
        if resume.spec != spec:
            raise InvalidInputError("resume checkpoint was trained with a different model spec")
        load_parameters(model, resume.parameters)
        if resume.optimizer:
            restore_optimizer(opt, resume.optimizer, resume.meta.get("param_groups", opt.state_dict()["param_groups"]))
        if resume.rng_state:
            torch.set_rng_state(torch.from_numpy(np.frombuffer(resume.rng_state, dtype=np.uint8).copy()))
        start_epoch = resume.epoch + 1

    base_meta = {"train": asdict(cfg), "sampler": _sampler_dict(sampler)}
    base_meta.update(meta or {})

    def snapshot(epoch: int) -> CheckpointState:
        opt_arrays, groups = optimizer_arrays(opt)
        m = dict(base_meta, param_groups=groups)
        return CheckpointState(spec, model_arrays(model), opt_arrays, epoch, _rng_state_blob(), m)

    initial_val = validation_metrics(model, val_seqs, sampler, cfg, val_cuts) if start_epoch == 0 else None
    epoch = start_epoch - 1
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        rng = np.random.default_rng([cfg.seed, sampler.seed, epoch])
        order = rng.permutation(train_idx)
        epoch_br = LossBreakdown()
        batch_losses = []
        for lo in range(0, len(order), cfg.batch_sequences):
            tuples = []
            for i in order[lo : lo + cfg.batch_sequences]:
                t = sample_tuple(sequences[i], sampler, rng, cuts[i] if cuts else ())
                if t is not None:
                    tuples.append(t)
            if not tuples:
                continue
            loss, br = batch_loss(tuples, model, cfg, sampler.negatives_per_tuple)
            if not torch.isfinite(loss):
                diag = None
                if out_dir:
                    diag = out_dir / "diverged.ckpt"
                    save_checkpoint(snapshot(epoch), diag)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {lo // cfg.batch_sequences}", diag
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_br.add(br)
            batch_losses.append(loss.item())

        recalibrate_batchnorm(model, train_seqs, sampler, np.random.default_rng([cfg.seed, epoch, 31337]),
                              cfg.bn_batches, cfg.batch_sequences, train_cuts)
        record = {
            "epoch": epoch,
            "lr": lr,
            "loss": epoch_br.mean(),
            "first_batch_loss": batch_losses[0] if batch_losses else None,
            "breakdown": epoch_br.as_dict(),
        }
        val = validation_metrics(model, val_seqs, sampler, cfg, val_cuts)
        if val:
            record.update(val)
        if initial_val is not None and epoch == start_epoch:
            record["initial_val"] = initial_val
        record["wall_time"] = time.perf_counter() - t0
        metrics.append(record)
        log.info("epoch %d lr %.3g loss %.4f val %s", epoch, lr, record["loss"], val)
        if out_dir:
            with open(out_dir / "metrics.jsonl", "a") as f:
                f.write(json.dumps(record) + "\n")
            save_checkpoint(snapshot(epoch), out_dir / "last.ckpt")
        if on_epoch:
            on_epoch(record)

    model.eval()
    return TrainResult(snapshot(max(epoch, start_epoch - 1)), metrics, model)


def _sampler_dict(s: SamplerConfig) -> dict:
    d = asdict(s)
    d["configs_enabled"] = [c.value for c in s.configs_enabled]
    return d
