"""The speaker-phoneme multi-task network: assembly, losses, embeddings, checkpoints."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import layers as L
from . import numeric as nm
from .layers import PoolingMode, TdnnLayerSpec
from .numeric import DimensionError, Tensor

SHARED_CONTEXTS = ((-2, -1, 0, 1, 2), (-2, 0, 2), (-3, 0, 3), (0,))

# toggles per system variant
PRESETS = {
    "S1": dict(pooling_mode=PoolingMode.STATS, use_se=False, use_frame_phonetic=True, use_segment_adversarial=False),
    "S2": dict(pooling_mode=PoolingMode.STATS, use_se=True, use_frame_phonetic=True, use_segment_adversarial=False),
    "S3": dict(pooling_mode=PoolingMode.PHONE_ATT_WEIGHTED, use_se=False, use_frame_phonetic=True, use_segment_adversarial=False),
    "S4": dict(pooling_mode=PoolingMode.PHONE_ATT_WEIGHTED, use_se=True, use_frame_phonetic=True, use_segment_adversarial=False),
    "S5": dict(pooling_mode=PoolingMode.STATS, use_se=True, use_frame_phonetic=False, use_segment_adversarial=False),
    "S6": dict(pooling_mode=PoolingMode.PHONE_ATT_WEIGHTED, use_se=True, use_frame_phonetic=True, use_segment_adversarial=True),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    num_phonemes: int
    num_speakers: int
    input_dim: int = 23
    hidden_dim: int = 512
    alpha: float = 0.3
    beta: float = 0.2
    scale: float = 1.5
    pooling_mode: PoolingMode = PoolingMode.PHONE_ATT_WEIGHTED
    use_se: bool = True
    use_frame_phonetic: bool = True
    use_segment_adversarial: bool = True
    se_ratio: int = 4
    embedding_layer: str = "segment1"
    grl_lambda: float = 1.0
    precision: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "pooling_mode", PoolingMode.parse(self.pooling_mode))
        if self.num_phonemes < 2:
            raise ConfigError(f"num_phonemes must be >= 2, got {self.num_phonemes}")
        if self.num_speakers < 2:
            raise ConfigError(f"num_speakers must be >= 2, got {self.num_speakers}")
        if self.input_dim < 1 or self.hidden_dim < 1 or self.se_ratio < 1:
            raise ConfigError("input_dim, hidden_dim and se_ratio must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights alpha and beta must be nonnegative")
        if self.scale <= 0:
            raise ConfigError("pooling scale must be positive")
        if self.embedding_layer not in ("segment1", "segment2"):
            raise ConfigError(f"embedding_layer must be segment1 or segment2, got {self.embedding_layer!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.pooling_mode.phoneme_aware and not self.use_frame_phonetic:
            raise ConfigError("phoneme-aware pooling needs the frame-level phonetic subnet")

    @classmethod
    def preset(cls, name: str, **overrides) -> "NetworkConfig":
        try:
            toggles = dict(PRESETS[name.upper()])
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
        toggles.update(overrides)
        return cls(**toggles)

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def pooled_dim(self) -> int:
        return 2 * self.num_phonemes

    def to_items(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.value if isinstance(v, PoolingMode) else v
        return out

    @classmethod
    def from_items(cls, items: dict) -> "NetworkConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in items:
                continue
            kwargs[f.name] = _coerce(f.type, items[f.name])
        return cls(**kwargs)


def _coerce(type_name, value):
    if not isinstance(value, str):
        return value
    if type_name in ("int",):
        return int(value)
    if type_name in ("float",):
        return float(value)
    if type_name in ("bool",):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    return value


@dataclass
class Model:
    """Learnable parameters plus normalization running statistics."""

    config: NetworkConfig
    params: dict
    buffers: dict = field(default_factory=dict)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def groups(self) -> set:
        return {name.split(".")[0] for name in self.params}

    def num_values(self) -> int:
        return sum(p.data.size for p in self.params.values())


@dataclass
class ForwardOutputs:
    speaker_logits: Tensor
    pooled: Tensor
    embedding: Tensor
    frame_phoneme_logits: Optional[Tensor] = None
    frame_posteriors: Optional[Tensor] = None
    segment_phoneme_logits: Optional[Tensor] = None


@dataclass
class LabelBundle:
    """Speaker index, per-frame phoneme indices and segment phoneme distribution.

    A mini-batch carries a leading axis on each field.
    """

    speaker: object
    frame_phonemes: Optional[np.ndarray] = None
    segment_distribution: Optional[np.ndarray] = None


@dataclass
class Losses:
    speaker: Tensor
    frame_phonetic: Tensor
    segment_phonetic: Tensor
    total: Tensor

    def values(self) -> tuple:
        return tuple(float(t.data) for t in (self.speaker, self.frame_phonetic, self.segment_phonetic, self.total))


def layer_specs(config: NetworkConfig) -> dict:
    """Frame-level layer layout keyed by parameter-group name."""
    h = config.hidden_dim
    specs = {}
    in_dim = config.input_dim
    for i, ctx in enumerate(SHARED_CONTEXTS, start=1):
        specs[f"shared{i}"] = TdnnLayerSpec(ctx, in_dim, h, use_se=config.use_se, normalize=True)
        in_dim = h
    specs["etdnn5"] = TdnnLayerSpec((0,), h, config.num_phonemes, activation="identity")
    if config.use_frame_phonetic:
        specs["pf1"] = TdnnLayerSpec((0,), h, h, normalize=True)
        specs["pf2"] = TdnnLayerSpec((0,), h, h, normalize=True)
    return specs


def _segment_layout(config: NetworkConfig) -> dict:
    h, P = config.hidden_dim, config.num_phonemes
    dims = {"seg1": (2 * P, h), "seg2": (h, h), "spk_head": (h, config.num_speakers)}
    if config.use_frame_phonetic:
        dims["pf_head"] = (h, P)
    if config.use_segment_adversarial:
        dims.update({"adv1": (2 * P, h), "adv2": (h, h), "adv_head": (h, P)})
    return dims


def build(config: NetworkConfig, seed: int = 0) -> Model:
    """Initialize every parameter group the configuration asks for.

    Each parameter draws from a generator keyed on its own name, so
    disabling a group leaves the others bit-identical.
    """
    dtype = config.dtype
    params = {}
    buffers = {}
    for name, spec in layer_specs(config).items():
        params.update(L.init_tdnn(spec, name, seed, dtype))
        if spec.normalize:
            buffers[f"{name}.mvn.mean"] = np.zeros((1, spec.out_dim), dtype=dtype)
            buffers[f"{name}.mvn.var"] = np.ones((1, spec.out_dim), dtype=dtype)
    for name, (rows, cols) in _segment_layout(config).items():
        params.update(L.init_affine(name, rows, cols, seed, dtype))
    return Model(config, params, buffers)


def forward(x, model: Model, train: bool = False, heads: bool = True, track_grad: bool = True) -> ForwardOutputs:
    """Run the network on one utterance ``(T, D)`` or a batch ``(B, T, D)``.

    In training mode normalization layers use batch statistics and update
    their running estimates; otherwise they apply the running estimates.
    With ``heads=False`` only the path to the embedding is evaluated.
    """
    config = model.config
    x = np.asarray(x, dtype=config.dtype)
    if x.ndim not in (2, 3) or x.shape[-1] != config.input_dim:
        raise DimensionError(f"expected frames of width {config.input_dim}, got shape {x.shape}")
    if x.shape[-2] < 1:
        raise nm.EmptyInputError("utterance has no frames")
    values = model.params if track_grad else {k: Tensor(p.data) for k, p in model.params.items()}
    specs = layer_specs(config)
    groups = {}
    for key, value in values.items():
        group, _, rest = key.partition(".")
        groups.setdefault(group, {})[rest] = value

    def run(name, h):
        spec = specs[name]
        running = None
        if spec.normalize:
            running = (model.buffers[f"{name}.mvn.mean"][0], model.buffers[f"{name}.mvn.var"][0])
        return L.tdnn_forward(h, spec, groups[name], running=running, train=train)

    h = Tensor(x)
    for i in range(1, len(SHARED_CONTEXTS) + 1):
        h = run(f"shared{i}", h)
    shared = h
    h5 = run("etdnn5", shared)

    frame_logits = posteriors = None
    if config.use_frame_phonetic and (heads or config.pooling_mode.phoneme_aware):
        f = run("pf2", run("pf1", shared))
        frame_logits = nm.affine(f, values["pf_head.W"], values["pf_head.b"])
        posteriors = nm.softmax(frame_logits, axis="channel")

    if config.pooling_mode.phoneme_aware:
        pooled = L.phoneme_attentive_pool(posteriors, h5, config.pooling_mode, config.scale, check_simplex=False)
    else:
        pooled = nm.stats_pool(h5)

    seg1 = nm.affine(pooled, values["seg1.W"], values["seg1.b"])
    seg2 = nm.affine(nm.relu(seg1), values["seg2.W"], values["seg2.b"])
    embedding = seg1 if config.embedding_layer == "segment1" else seg2
    out = ForwardOutputs(speaker_logits=None, pooled=pooled, embedding=embedding)
    if not heads:
        return out
    out.speaker_logits = nm.affine(nm.relu(seg2), values["spk_head.W"], values["spk_head.b"])
    out.frame_phoneme_logits = frame_logits
    out.frame_posteriors = posteriors
    if config.use_segment_adversarial:
        a = nm.grl(pooled, config.grl_lambda)
        a = nm.relu(nm.affine(a, values["adv1.W"], values["adv1.b"]))
        a = nm.relu(nm.affine(a, values["adv2.W"], values["adv2.b"]))
        out.segment_phoneme_logits = nm.affine(a, values["adv_head.W"], values["adv_head.b"])
    return out


def compute_losses(out: ForwardOutputs, labels: LabelBundle, config: NetworkConfig) -> Losses:
    """Speaker cross-entropy, frame phoneme cross-entropy, segment KL, and
    their weighted total ``L_s + alpha * L_pf + beta * L_ps``.

    Losses of disabled subnets are zero.
    """
    dtype = out.speaker_logits.data.dtype
    speaker = np.asarray(labels.speaker)
    N, P = config.num_speakers, config.num_phonemes
    if np.any(speaker < 0) or np.any(speaker >= N):
        raise ValueError(f"speaker label out of range [0, {N})")
    l_s = nm.cross_entropy(out.speaker_logits, speaker)

    zero = Tensor(np.zeros((), dtype=dtype))
    l_pf = l_ps = zero
    if config.use_frame_phonetic and out.frame_phoneme_logits is not None:
        if labels.frame_phonemes is None:
            raise ValueError("frame phoneme labels are required by the frame-level phonetic subnet")
        frames = np.asarray(labels.frame_phonemes)
        if np.any(frames < 0) or np.any(frames >= P):
            raise ValueError(f"frame phoneme label out of range [0, {P})")
        l_pf = nm.cross_entropy(out.frame_phoneme_logits, frames)
    if config.use_segment_adversarial and out.segment_phoneme_logits is not None:
        if labels.segment_distribution is None:
            raise ValueError("segment phoneme distribution is required by the adversarial subnet")
        target = np.asarray(labels.segment_distribution, dtype=dtype)
        if np.any(target < 0) or np.any(np.abs(target.sum(axis=-1) - 1.0) > 1e-6):
            raise ValueError("segment phoneme distribution must lie on the simplex")
        l_ps = nm.kl_divergence(target, out.segment_phoneme_logits)
    total = nm.add(l_s, nm.scale(l_pf, config.alpha), nm.scale(l_ps, config.beta))
    return Losses(l_s, l_pf, l_ps, total)


def extract_embedding(x, model: Model) -> np.ndarray:
    """Speaker embedding of one utterance, in evaluation mode."""
    out = forward(x, model, train=False, heads=False, track_grad=False)
    return np.array(out.embedding.data, dtype=np.float64)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"PMTL1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: Model, extra_config: Optional[dict] = None, extra_arrays: Optional[dict] = None):
    """Write magic, a ``key = value`` config block, then named float32 arrays.

    Arrays are model parameters, then normalization buffers (prefixed
    ``buffer:``), then any ``extra_arrays`` in insertion order.
    """
    items = model.config.to_items()
    items.update(extra_config or {})
    arrays = [(name, p.data) for name, p in model.params.items()]
    arrays += [(f"buffer:{name}", v) for name, v in model.buffers.items()]
    arrays += list((extra_arrays or {}).items())
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(items, arrays))


def encode_checkpoint(items: dict, arrays) -> bytes:
    text = "".join(f"{k} = {_fmt(v)}\n" for k, v in items.items()).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(text)), text, struct.pack("<I", len(arrays))]
    for name, value in arrays:
        value = np.asarray(value)
        mat = value.reshape(1, -1) if value.ndim < 2 else value.reshape(value.shape[0], -1)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<II", *mat.shape))
        chunks.append(np.ascontiguousarray(mat, dtype="<f4").tobytes())
    return b"".join(chunks)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def read_checkpoint(path):
    """Return ``(items, arrays)`` where both are insertion-ordered dicts of
    strings and float32 matrices."""
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode_checkpoint(blob)


def decode_checkpoint(blob: bytes):
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a checkpoint: bad magic")
    pos = len(CHECKPOINT_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"checkpoint truncated at byte {pos}")
        piece = blob[pos:pos + n]
        pos += n
        return piece

    (text_len,) = struct.unpack("<I", take(4))
    items = {}
    for line in take(text_len).decode("utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            items[key.strip()] = value.strip()
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        arrays[name] = np.frombuffer(take(4 * rows * cols), dtype="<f4").reshape(rows, cols).astype(np.float32)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after the last array")
    return items, arrays


def load_checkpoint(path):
    """Rebuild a :class:`Model` from a checkpoint.

    Returns ``(model, items, extra_arrays)``; ``items`` has every config
    line (network and otherwise) as strings, ``extra_arrays`` every array
    that is neither a parameter nor a buffer.
    """
    items, arrays = read_checkpoint(path)
    config = NetworkConfig.from_items(items)
    model = build(config, seed=0)
    for name, p in model.params.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {name}")
        p.data = arrays.pop(name).reshape(p.data.shape).astype(config.dtype)
        p.zero_grad()
    for name in model.buffers:
        key = f"buffer:{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing buffer {name}")
        model.buffers[name] = arrays.pop(key).astype(config.dtype)
    return model, items, arrays
