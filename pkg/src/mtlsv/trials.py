"""Text-dependent trial lists, EER, and per-condition reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

TRIAL_TYPES = ("TC", "TW", "IC", "IW")
NONTARGET_TYPES = ("TW", "IC", "IW")


def trial_type(same_speaker: bool, same_phrase: bool) -> str:
    if same_speaker:
        return "TC" if same_phrase else "TW"
    return "IC" if same_phrase else "IW"


def model_name(speaker_id: str, phrase_id: int) -> str:
    return f"{speaker_id}_p{int(phrase_id):02d}"


@dataclass(frozen=True)
class Trial:
    model_id: str
    test_utt_id: str
    type: str


@dataclass
class TrialSet:
    trials: list
    # model id -> enrollment utterance ids, in manifest order
    models: dict = field(default_factory=dict)

    def counts(self) -> dict:
        out = dict.fromkeys(TRIAL_TYPES, 0)
        for t in self.trials:
            out[t.type] += 1
        return out

    def __len__(self):
        return len(self.trials)


def generate_trials(entries, gender: Optional[dict] = None) -> TrialSet:
    """Pair every test utterance with every enrollment model.

    Enrollment models are speaker-phrase pairs built from the enrollment
    sessions. With ``gender`` (speaker id -> tag) pairs are only formed
    within the same tag. Trials follow manifest order: models by first
    appearance, then test utterances.
    """
    entries = list(entries)
    enroll = [e for e in entries if e.is_enrollment]
    tests = [e for e in entries if not e.is_enrollment]
    if not enroll:
        raise ValueError("manifest has no enrollment utterances")
    if not tests:
        raise ValueError("manifest has no test utterances")
    models = {}
    model_keys = {}
    for e in enroll:
        mid = model_name(e.speaker_id, e.phrase_id)
        models.setdefault(mid, []).append(e.utt_id)
        model_keys[mid] = (e.speaker_id, e.phrase_id)
    trials = []
    for mid, (spk, phrase) in model_keys.items():
        for e in tests:
            if gender is not None and gender.get(spk) != gender.get(e.speaker_id):
                continue
            trials.append(Trial(mid, e.utt_id, trial_type(spk == e.speaker_id, phrase == e.phrase_id)))
    return TrialSet(trials, models)


# ---------------------------------------------------------------------------
# EER


def error_rates(target, nontarget, threshold):
    """(FAR, FRR) at ``threshold``: nontargets >= threshold accepted,
    targets below it rejected."""
    target = np.asarray(target, dtype=np.float64)
    nontarget = np.asarray(nontarget, dtype=np.float64)
    return float(np.mean(nontarget >= threshold)), float(np.mean(target < threshold))


def compute_eer(target_scores, nontarget_scores):
    """Equal error rate by a threshold sweep.

    Candidate thresholds are the midpoints between consecutive distinct
    pooled scores plus one below the minimum and one above the maximum.
    The candidate minimizing ``|FAR - FRR|`` wins (the lowest threshold on
    ties); the EER is ``(FAR + FRR) / 2`` there. Returns ``(eer, threshold)``.
    """
    target = np.asarray(target_scores, dtype=np.float64).ravel()
    nontarget = np.asarray(nontarget_scores, dtype=np.float64).ravel()
    if target.size == 0:
        raise ValueError("compute_eer: no target scores")
    if nontarget.size == 0:
        raise ValueError("compute_eer: no nontarget scores")
    values = np.unique(np.concatenate([target, nontarget]))
    thresholds = np.concatenate([[values[0] - 1.0], (values[:-1] + values[1:]) / 2, [values[-1] + 1.0]])
    t_sorted = np.sort(target)
    n_sorted = np.sort(nontarget)
    frr = np.searchsorted(t_sorted, thresholds, side="left") / target.size
    far = (nontarget.size - np.searchsorted(n_sorted, thresholds, side="left")) / nontarget.size
    best = int(np.argmin(np.abs(far - frr)))
    return float((far[best] + frr[best]) / 2), float(thresholds[best])


# ---------------------------------------------------------------------------
# scores and reports


@dataclass
class ScoreSet:
    trials: list
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.trials) != self.scores.shape[0]:
            raise ValueError("one score per trial is required")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    def by_type(self, kind: str) -> np.ndarray:
        mask = np.array([t.type == kind for t in self.trials], dtype=bool)
        return self.scores[mask] if mask.size else np.empty(0)


@dataclass
class ReportRow:
    condition: str
    eer: float
    threshold: float


@dataclass
class Report:
    rows: list
    notices: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {r.condition: r.eer for r in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["condition", "eer_percent", "threshold"])
        for r in self.rows:
            w.writerow([r.condition, repr(100.0 * r.eer), repr(r.threshold)])
        return buf.getvalue()

    def to_text(self) -> str:
        head = "Condition  EER(%)   threshold"
        lines = [head, "-" * len(head)]
        lines += [f"{r.condition:<9}  {100 * r.eer:7.3f}  {r.threshold: .6g}" for r in self.rows]
        lines += [f"note: {n}" for n in self.notices]
        return "\n".join(lines) + "\n"


def report(scoreset: ScoreSet) -> Report:
    """EER of TC targets against each nontarget trial type present."""
    target = scoreset.by_type("TC")
    if target.size == 0:
        raise ValueError("report needs TC trials")
    rows, notices = [], []
    for kind in NONTARGET_TYPES:
        non = scoreset.by_type(kind)
        if non.size == 0:
            notices.append(f"no {kind} trials; column omitted")
            continue
        eer, thr = compute_eer(target, non)
        rows.append(ReportRow(kind, eer, thr))
    return Report(rows, notices)


def read_report_csv(text: str) -> dict:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header != ["condition", "eer_percent", "threshold"]:
        raise ValueError(f"unexpected report header {header}")
    return {row[0]: (float(row[1]), float(row[2])) for row in reader if row}


# ---------------------------------------------------------------------------
# trial and score files


def write_trials(path, trials: Iterable[Trial]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in trials:
            fh.write(f"{t.model_id}\t{t.test_utt_id}\t{t.type}\n")


def read_trials(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 3 or cols[2] not in TRIAL_TYPES:
                raise ValueError(f"{path}:{lineno}: expected model<TAB>utt<TAB>type")
            out.append(Trial(*cols))
    return out


def write_scores(path, scoreset: ScoreSet):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t, s in zip(scoreset.trials, scoreset.scores):
            fh.write(f"{t.model_id}\t{t.test_utt_id}\t{t.type}\t{float(s)!r}\n")


def read_scores(path) -> ScoreSet:
    trials, scores = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 4 or cols[2] not in TRIAL_TYPES:
                raise ValueError(f"{path}:{lineno}: expected model<TAB>utt<TAB>type<TAB>score")
            trials.append(Trial(cols[0], cols[1], cols[2]))
            scores.append(float(cols[3]))
    return ScoreSet(trials, np.array(scores))
