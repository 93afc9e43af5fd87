"""Chunked mini-batch training with Adam."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import network as net
from .data import UtteranceRecord, segment_soft_labels
from .numeric import EmptyInputError, backward

log = logging.getLogger(__name__)

TRACE_HEADER = ("epoch", "batch", "L_s", "L_pf", "L_ps", "L_total")


class TrainingDivergedError(ArithmeticError):
    pass


@dataclass
class Chunk:
    features: np.ndarray
    frame_labels: np.ndarray
    segment_distribution: np.ndarray
    source_index: np.ndarray
    utt_id: str = ""


def make_chunks(u: UtteranceRecord, chunk_len: int = 100, rng=None, num_phonemes: Optional[int] = None) -> list:
    """Cut ``floor(T / chunk_len)`` non-overlapping chunks at random offsets.

    Utterances shorter than ``chunk_len`` are wrapped by repetition into a
    single chunk. Frame labels follow the same indices and the segment
    distribution is recomputed from them.
    """
    if chunk_len < 1:
        raise ValueError("chunk_len must be positive")
    n_frames = u.features.shape[0]
    if n_frames == 0:
        raise EmptyInputError(f"{u.utt_id}: no frames")
    rng = rng if rng is not None else np.random.default_rng(0)
    P = num_phonemes if num_phonemes is not None else int(u.alignment.max()) + 1

    if n_frames < chunk_len:
        indices = [np.arange(chunk_len) % n_frames]
    else:
        count = n_frames // chunk_len
        slack = n_frames - count * chunk_len
        shifts = np.sort(rng.integers(0, slack + 1, size=count))
        indices = [np.arange(chunk_len) + i * chunk_len + int(shifts[i]) for i in range(count)]
    chunks = []
    for idx in indices:
        labels = u.alignment[idx]
        chunks.append(Chunk(u.features[idx], labels, segment_soft_labels(labels, P), idx, u.utt_id))
    return chunks


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for parameter {name}")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if p.data.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} differs from parameter {name} {p.data.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


@dataclass
class Schedule:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 256
    chunk_len: int = 100
    patience: int = 2
    lr_decay: float = 0.5
    seed: int = 0


@dataclass
class TrainResult:
    checkpoint: Path
    trace: list
    speakers: list


def speaker_index(records) -> list:
    return sorted({r.speaker_id for r in records})


def epoch_chunks(records, schedule: Schedule, epoch: int, num_phonemes: int) -> list:
    """One random chunk per utterance, interleaved across speakers so every
    batch sees a balanced speaker mix."""
    rng = np.random.default_rng([schedule.seed, epoch])
    by_speaker = {}
    for r in records:
        by_speaker.setdefault(r.speaker_id, []).append(r)
    speakers = sorted(by_speaker)
    queues = []
    for s in speakers:
        utts = by_speaker[s]
        queues.append([utts[i] for i in rng.permutation(len(utts))])
    order = []
    for rnd in range(max(len(q) for q in queues)):
        for k in rng.permutation(len(queues)):
            if rnd < len(queues[k]):
                order.append(queues[k][rnd])
    picked = []
    for u in order:
        chunks = make_chunks(u, schedule.chunk_len, rng, num_phonemes)
        picked.append((u.speaker_id, chunks[int(rng.integers(len(chunks)))]))
    return picked


def train_batch(model: net.Model, batch, speaker_ids: dict, state: AdamState):
    x = np.stack([c.features for _, c in batch])
    labels = net.LabelBundle(
        speaker=np.array([speaker_ids[s] for s, _ in batch]),
        frame_phonemes=np.stack([c.frame_labels for _, c in batch]),
        segment_distribution=np.stack([c.segment_distribution for _, c in batch]),
    )
    model.zero_grad()
    out = net.forward(x, model, train=True)
    losses = net.compute_losses(out, labels, model.config)
    values = losses.values()
    if not all(math.isfinite(v) for v in values):
        return values
    backward(losses.total)
    adam_step(model.params, {k: p.grad for k, p in model.params.items()}, state)
    return values


def train(
    records,
    config: net.NetworkConfig,
    schedule: Schedule,
    out_dir,
    resume: Optional[str] = None,
    init_seed: Optional[int] = None,
) -> TrainResult:
    """Train ``config`` on ``records`` and checkpoint after every epoch.

    Writes ``epochNNN.pmtl``, ``model.pmtl`` (latest) and ``loss_trace.csv``
    under ``out_dir``. Randomness for epoch ``e`` derives from
    ``(schedule.seed, e)`` alone, so resuming from a checkpoint replays the
    same subsequent trace as an uninterrupted run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    speakers = speaker_index(records)
    if len(speakers) < 2:
        raise ValueError("training needs at least two speakers")
    if len(speakers) != config.num_speakers:
        raise ValueError(f"config expects {config.num_speakers} speakers, corpus has {len(speakers)}")
    speaker_ids = {s: i for i, s in enumerate(speakers)}

    state = AdamState(lr=schedule.lr)
    best, stale, start = math.inf, 0, 1
    trace = []
    if resume:
        model, items, extras = net.load_checkpoint(resume)
        state.lr = float(items["trainer.lr"])
        state.t = int(items["trainer.adam_t"])
        best = float(items["trainer.best"])
        stale = int(items["trainer.stale"])
        start = int(items["trainer.epoch"]) + 1
        for key, arr in extras.items():
            kind, _, name = key.partition(":")
            target = {"adam.m": state.m, "adam.v": state.v}.get(kind)
            if target is not None:
                target[name] = arr.reshape(model.params[name].data.shape).astype(config.dtype)
        trace = [row for row in read_trace(out_dir / "loss_trace.csv") if row[0] < start] if (out_dir / "loss_trace.csv").exists() else []
    else:
        model = net.build(config, seed=schedule.seed if init_seed is None else init_seed)

    checkpoint = out_dir / "model.pmtl"
    for epoch in range(start, schedule.epochs + 1):
        chunks = epoch_chunks(records, schedule, epoch, config.num_phonemes)
        sums = np.zeros(4)
        n_batches = 0
        for b, lo in enumerate(range(0, len(chunks), schedule.batch_size), start=1):
            values = train_batch(model, chunks[lo:lo + schedule.batch_size], speaker_ids, state)
            if not all(math.isfinite(v) for v in values):
                raise TrainingDivergedError(f"loss became non-finite at epoch {epoch}, batch {b}")
            trace.append((epoch, b) + tuple(values))
            sums += values
            n_batches += 1
        mean = tuple(float(v) for v in sums / n_batches)
        trace.append((epoch, -1) + mean)
        log.info("epoch %d  L_s %.4f  L_pf %.4f  L_ps %.4f  L_total %.4f  lr %.2e", epoch, *mean, state.lr)

        if mean[3] < best:
            best, stale = mean[3], 0
        else:
            stale += 1
            if stale >= schedule.patience:
                state.lr *= schedule.lr_decay
                stale = 0

        extra = {f"schedule.{k}": v for k, v in asdict(schedule).items()}
        extra.update({
            "trainer.epoch": epoch,
            "trainer.lr": float(state.lr),
            "trainer.adam_t": state.t,
            "trainer.best": float(best),
            "trainer.stale": stale,
        })
        arrays = {f"adam.m:{k}": v for k, v in state.m.items()}
        arrays.update({f"adam.v:{k}": v for k, v in state.v.items()})
        net.save_checkpoint(out_dir / f"epoch{epoch:03d}.pmtl", model, extra, arrays)
        net.save_checkpoint(checkpoint, model, extra, arrays)
        write_trace(out_dir / "loss_trace.csv", trace)
    if not checkpoint.exists():
        net.save_checkpoint(checkpoint, model)
    return TrainResult(checkpoint, trace, speakers)


def write_trace(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for epoch, batch, *vals in rows:
            w.writerow([epoch, batch] + [repr(float(v)) for v in vals])


def read_trace(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != TRACE_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [(int(r[0]), int(r[1])) + tuple(float(v) for v in r[2:]) for r in reader]
