"""Feature preprocessing, the synthetic speaker-phrase corpus, and file formats."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .numeric import EmptyInputError

DEVICES = ("A", "B", "C")
ENROLL_SESSIONS = (1, 4, 7)
SUBSETS = ("background", "development", "evaluation")


def sliding_cmn(x, window_frames: int = 300) -> np.ndarray:
    """Subtract a per-dimension sliding mean over a centered window.

    The window keeps ``min(window_frames, T)`` frames and is shifted inward
    at the edges, so utterances no longer than the window get plain global
    mean subtraction.
    """
    x = np.asarray(x)
    n = x.shape[0]
    if n == 0:
        raise EmptyInputError("sliding_cmn: no frames")
    if window_frames < 1:
        raise ValueError("window_frames must be positive")
    width = min(window_frames, n)
    start = np.clip(np.arange(n) - width // 2, 0, n - width)
    csum = np.concatenate([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0, dtype=np.float64)])
    means = (csum[start + width] - csum[start]) / width
    return (x - means).astype(x.dtype)


def vad_mask(energy, zcr, energy_thresh: float, zcr_thresh: float, relative: bool = True) -> np.ndarray:
    """Keep frames that are loud, or moderately loud and fricative-like.

    A frame is speech when ``energy > E`` or when ``energy > E / 2`` and
    ``zcr > zcr_thresh``. With ``relative`` the energy threshold ``E`` is
    ``energy_thresh`` times the utterance mean energy.
    """
    energy = np.asarray(energy, dtype=np.float64)
    zcr = np.asarray(zcr, dtype=np.float64)
    if energy.size == 0:
        raise EmptyInputError("vad_mask: no frames")
    if energy.shape != zcr.shape:
        raise ValueError(f"energy and zcr lengths differ: {energy.shape} vs {zcr.shape}")
    if not (np.isfinite(energy_thresh) and np.isfinite(zcr_thresh)):
        raise ValueError("VAD thresholds must be finite")
    level = energy_thresh * energy.mean() if relative else energy_thresh
    return (energy > level) | ((energy > 0.5 * level) & (zcr > zcr_thresh))


def segment_soft_labels(labels, num_phonemes: int) -> np.ndarray:
    """Normalized histogram of frame phoneme labels; sums to exactly 1.0."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyInputError("segment_soft_labels: empty alignment")
    if labels.min() < 0 or labels.max() >= num_phonemes:
        raise ValueError(f"alignment labels must lie in [0, {num_phonemes})")
    counts = np.bincount(labels, minlength=num_phonemes)
    # bins are whole multiples of 2^-52, so every partial sum is exact in any order;
    # the leftover units go to the largest bin
    units = np.rint(counts * (2.0**52 / labels.size)).astype(np.int64)
    units[int(np.argmax(counts))] += (1 << 52) - int(units.sum())
    return units.astype(np.float64) / 2.0**52


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SynthConfig:
    num_speakers: int = 80
    num_phrases: int = 6
    num_phonemes: int = 24
    phonemes_per_phrase: int = 6
    min_frames_per_phoneme: int = 12
    max_frames_per_phoneme: int = 24
    feature_dim: int = 23
    speaker_offset_sd: float = 0.6
    phoneme_mean_sd: float = 1.0
    noise_sd: float = 1.0
    device_offset_sd: float = 0.3
    sessions_per_speaker: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.num_speakers < 2 or self.num_phrases < 2:
            raise ValueError("need at least 2 speakers and 2 phrases")
        if self.num_phonemes < self.num_phrases:
            raise ValueError("need at least as many phonemes as phrases")
        if self.phonemes_per_phrase < 1 or self.feature_dim < 1:
            raise ValueError("phonemes_per_phrase and feature_dim must be positive")
        if not 1 <= self.min_frames_per_phoneme <= self.max_frames_per_phoneme:
            raise ValueError("frames per phoneme range is empty")
        if min(self.speaker_offset_sd, self.phoneme_mean_sd, self.noise_sd, self.device_offset_sd) < 0:
            raise ValueError("standard deviations must be nonnegative")
        if self.sessions_per_speaker < 1:
            raise ValueError("sessions_per_speaker must be positive")


@dataclass
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    phrase_id: int
    session: int
    device: str
    features: np.ndarray
    alignment: np.ndarray

    def __post_init__(self):
        if len(self.alignment) != self.features.shape[0]:
            raise ValueError(
                f"{self.utt_id}: alignment has {len(self.alignment)} frames, features {self.features.shape[0]}"
            )

    @property
    def is_enrollment(self) -> bool:
        return is_enrollment(self.session, self.device)


def is_enrollment(session: int, device: str) -> bool:
    return session in ENROLL_SESSIONS and device == "A"


def session_device(session: int) -> str:
    """Sessions 1, 4, 7 are recorded on device A; the rest alternate B, C."""
    if session in ENROLL_SESSIONS:
        return "A"
    rank = sum(1 for s in range(1, session) if s not in ENROLL_SESSIONS)
    return "B" if rank % 2 == 0 else "C"


@dataclass
class ManifestEntry:
    utt_id: str
    speaker_id: str
    phrase_id: int
    session: int
    device: str
    feature_path: str
    alignment_path: str = "-"

    @property
    def is_enrollment(self) -> bool:
        return is_enrollment(self.session, self.device)


@dataclass
class CorpusManifest:
    """Utterance ids per disjoint speaker subset."""

    subsets: dict = field(default_factory=dict)

    def speakers(self, subset: str) -> list:
        return sorted({utt.split("_")[0] for utt in self.subsets[subset]})


def speaker_name(index: int) -> str:
    return f"spk{index:04d}"


def utterance_name(speaker: str, phrase: int, session: int) -> str:
    return f"{speaker}_p{phrase:02d}_s{session}"


def split_speakers(num_speakers: int) -> dict:
    """Disjoint background/development/evaluation speaker ranges, about 2:1:1."""
    n_bg = num_speakers // 2
    n_dev = (num_speakers - n_bg) // 2
    idx = list(range(num_speakers))
    return {
        "background": idx[:n_bg],
        "development": idx[n_bg:n_bg + n_dev],
        "evaluation": idx[n_bg + n_dev:],
    }


def synth_corpus(cfg: SynthConfig):
    """Generate every (speaker, phrase, session) rendition.

    Each phrase is a fixed phoneme sequence with fixed per-phoneme
    durations. Frame values are Gaussian around the phoneme mean plus the
    speaker and device offsets. Returns ``(records, CorpusManifest)``.
    """
    rng = np.random.default_rng(cfg.seed)
    D = cfg.feature_dim
    phoneme_means = rng.normal(0.0, cfg.phoneme_mean_sd, size=(cfg.num_phonemes, D))
    speaker_offsets = rng.normal(0.0, cfg.speaker_offset_sd, size=(cfg.num_speakers, D))
    device_offsets = dict(zip(DEVICES, rng.normal(0.0, cfg.device_offset_sd, size=(len(DEVICES), D))))
    replace = cfg.phonemes_per_phrase > cfg.num_phonemes
    phrases = [rng.choice(cfg.num_phonemes, size=cfg.phonemes_per_phrase, replace=replace) for _ in range(cfg.num_phrases)]
    durations = [
        rng.integers(cfg.min_frames_per_phoneme, cfg.max_frames_per_phoneme + 1, size=cfg.phonemes_per_phrase)
        for _ in range(cfg.num_phrases)
    ]
    alignments = [np.repeat(seq, dur).astype(np.int64) for seq, dur in zip(phrases, durations)]

    records = []
    for s in range(cfg.num_speakers):
        spk = speaker_name(s)
        for q in range(cfg.num_phrases):
            align = alignments[q]
            for session in range(1, cfg.sessions_per_speaker + 1):
                device = session_device(session)
                centre = phoneme_means[align] + speaker_offsets[s] + device_offsets[device]
                noise = rng.normal(0.0, 1.0, size=centre.shape) * cfg.noise_sd
                feats = (centre + noise).astype(np.float32)
                records.append(
                    UtteranceRecord(utterance_name(spk, q, session), spk, q, session, device, feats, align.copy())
                )

    split = split_speakers(cfg.num_speakers)
    manifest = CorpusManifest()
    for subset, members in split.items():
        names = {speaker_name(i) for i in members}
        manifest.subsets[subset] = [r.utt_id for r in records if r.speaker_id in names]
    return records, manifest


def write_corpus(records, manifest: CorpusManifest, out_dir, with_alignments: bool = True) -> dict:
    """Write archives, one alignment file and one manifest per subset.

    Returns the manifest path for each subset.
    """
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    by_id = {r.utt_id: r for r in records}
    align_name = "alignments.txt" if with_alignments else "-"
    if with_alignments:
        write_alignments(out / align_name, ((r.utt_id, r.alignment) for r in records))
    paths = {}
    for subset in SUBSETS:
        entries = []
        for utt in manifest.subsets.get(subset, []):
            r = by_id[utt]
            feat_rel = f"features/{utt}.feat"
            write_archive(out / feat_rel, r.features)
            entries.append(ManifestEntry(utt, r.speaker_id, r.phrase_id, r.session, r.device, feat_rel, align_name))
        paths[subset] = out / f"{subset}.tsv"
        write_manifest(paths[subset], entries)
    return paths


def load_corpus(manifest_path, require_alignments: bool = True) -> list:
    """Read a manifest and everything it points at into ``UtteranceRecord``s."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    entries = read_manifest(manifest_path)
    align_cache = {}
    records = []
    for e in entries:
        feats = read_archive(base / e.feature_path)
        if e.alignment_path == "-":
            if require_alignments:
                raise ValueError(f"{e.utt_id}: manifest carries no alignment")
            align = np.zeros(feats.shape[0], dtype=np.int64)
        else:
            if e.alignment_path not in align_cache:
                align_cache[e.alignment_path] = read_alignments(base / e.alignment_path)
            align = align_cache[e.alignment_path][e.utt_id]
        records.append(UtteranceRecord(e.utt_id, e.speaker_id, e.phrase_id, e.session, e.device, feats, align))
    return records


# ---------------------------------------------------------------------------
# FEAT1 archives

FEAT_MAGIC = b"FEAT1"
_HEADER = struct.Struct("<II")
MAX_VALUES = 1 << 31


class ArchiveError(ValueError):
    pass


class BadMagicError(ArchiveError):
    pass


class TruncatedArchiveError(ArchiveError):
    def __init__(self, message, offset):
        super().__init__(message)
        self.offset = offset


class DimensionOverflowError(ArchiveError):
    pass


def encode_archive(x) -> bytes:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"archives hold matrices, got shape {x.shape}")
    rows, cols = x.shape
    if rows >= 1 << 32 or cols >= 1 << 32 or rows * cols >= MAX_VALUES:
        raise DimensionOverflowError(f"matrix {rows}x{cols} too large for FEAT1")
    return FEAT_MAGIC + _HEADER.pack(rows, cols) + np.ascontiguousarray(x, dtype="<f4").tobytes()


def decode_archive(blob: bytes) -> np.ndarray:
    if blob[: len(FEAT_MAGIC)] != FEAT_MAGIC:
        raise BadMagicError(f"bad magic {blob[:len(FEAT_MAGIC)]!r}, expected {FEAT_MAGIC!r}")
    head_end = len(FEAT_MAGIC) + _HEADER.size
    if len(blob) < head_end:
        raise TruncatedArchiveError(f"header truncated at byte {len(blob)}", len(blob))
    rows, cols = _HEADER.unpack_from(blob, len(FEAT_MAGIC))
    if rows * cols >= MAX_VALUES:
        raise DimensionOverflowError(f"declared size {rows}x{cols} exceeds the FEAT1 limit")
    need = head_end + 4 * rows * cols
    if len(blob) < need:
        raise TruncatedArchiveError(
            f"archive truncated at byte {len(blob)}; {rows}x{cols} needs {need} bytes", len(blob)
        )
    if len(blob) > need:
        raise ArchiveError(f"{len(blob) - need} trailing bytes after {rows}x{cols} matrix")
    return np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=head_end).reshape(rows, cols).astype(np.float32)


def write_archive(path, x):
    with open(path, "wb") as fh:
        fh.write(encode_archive(x))


def read_archive(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_archive(fh.read())


def write_embeddings(stem, ids, matrix):
    """FEAT1 archive ``<stem>.feat`` plus ``<stem>.ids`` with one id per line."""
    stem = str(stem)
    matrix = np.asarray(matrix)
    if len(ids) != matrix.shape[0]:
        raise ValueError("one id per embedding row is required")
    write_archive(stem + ".feat", matrix)
    with open(stem + ".ids", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{i}\n" for i in ids)


def read_embeddings(stem):
    stem = str(stem)
    matrix = read_archive(stem + ".feat")
    with open(stem + ".ids", encoding="utf-8") as fh:
        ids = [line.rstrip("\n") for line in fh if line.strip()]
    if len(ids) != matrix.shape[0]:
        raise ArchiveError(f"{stem}: {len(ids)} ids for {matrix.shape[0]} embeddings")
    return ids, matrix


# ---------------------------------------------------------------------------
# text formats


def write_alignments(path, items: Iterable):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for utt, labels in items:
            fh.write(f"{utt}\t{' '.join(str(int(v)) for v in labels)}\n")


def read_alignments(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            utt, sep, rest = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected utt_id<TAB>labels")
            out[utt] = np.array([int(v) for v in rest.split()], dtype=np.int64)
    return out


def write_manifest(path, entries: Iterable[ManifestEntry]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            fh.write(
                f"{e.utt_id}\t{e.speaker_id}\t{e.phrase_id}\t{e.session}\t{e.device}\t{e.feature_path}\t{e.alignment_path}\n"
            )


def read_manifest(path) -> list:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 tab-separated columns, got {len(cols)}")
            utt, spk, phrase, session, device, feat, align = cols
            if device not in DEVICES:
                raise ValueError(f"{path}:{lineno}: unknown device {device!r}")
            entries.append(ManifestEntry(utt, spk, int(phrase), int(session), device, feat, align))
    return entries


def manifest_entries(records, feature_dir: Optional[str] = None) -> list:
    """Manifest rows for in-memory records (paths are nominal)."""
    base = feature_dir or "features"
    return [
        ManifestEntry(r.utt_id, r.speaker_id, r.phrase_id, r.session, r.device, os.path.join(base, r.utt_id + ".feat"))
        for r in records
    ]
