"""Sense-classification distillation.

A small student (affine map, optionally one hidden layer) is trained so
that its projected output selects the same sense index as the teacher
embedding did. The loss is cross entropy over softmax-normalized dot
products between the student output and the token's sense vectors.

On-disk `.skdm` model format (little-endian): magic "SKDM"; version
u16 = 1; feature_dim u32; hidden_dim u32; teacher_dim u32; activation
u8 (0 identity, 1 relu, 2 tanh); 3 reserved bytes; weights as IEEE-754
binary32 LE, row-major, in order W1, b1, W2, b2 (W1/b1 omitted when
hidden_dim = 0); CRC-32 footer as in `.sdict`.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .dictionary import SenseDictionary, SenseSet
from .errors import (
    BadMagic,
    ChecksumMismatch,
    DimMismatch,
    EmptyTrainingSet,
    LabelOutOfRange,
    StreamMisaligned,
    TruncatedFile,
    UnsupportedVersion,
)
from .stream import read_all

MAGIC = b"SKDM"
VERSION = 1
_HEADER_STRUCT = struct.Struct("<4sHIIIB3x")
_CRC_STRUCT = struct.Struct("<I")

_ACTIVATION_CODES = {"identity": 0, "relu": 1, "tanh": 2}
_CODE_ACTIVATIONS = {v: k for k, v in _ACTIVATION_CODES.items()}

PROB_FLOOR = 1e-12
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class StudentModel:
    """Affine student: n = W2 act(W1 x + b1) + b2, or n = W2 x + b2 when hidden_dim = 0."""

    feature_dim: int
    hidden_dim: int
    teacher_dim: int
    activation: str
    W1: np.ndarray | None
    b1: np.ndarray | None
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        if self.activation not in _ACTIVATION_CODES:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.hidden_dim > 0:
            if self.W1 is None or self.b1 is None:
                raise ValueError("hidden_dim > 0 requires W1 and b1")
            expect = {
                "W1": (self.hidden_dim, self.feature_dim),
                "b1": (self.hidden_dim,),
                "W2": (self.teacher_dim, self.hidden_dim),
                "b2": (self.teacher_dim,),
            }
        else:
            if self.W1 is not None or self.b1 is not None:
                raise ValueError("hidden_dim 0 forbids W1/b1")
            expect = {
                "W2": (self.teacher_dim, self.feature_dim),
                "b2": (self.teacher_dim,),
            }
        for name, shape in expect.items():
            tensor = np.asarray(getattr(self, name), dtype=np.float64)
            if tensor.shape != shape:
                raise ValueError(f"{name} shape {tensor.shape}, expected {shape}")
            if not np.all(np.isfinite(tensor)):
                raise ValueError(f"{name} contains non-finite values")
            setattr(self, name, tensor)

    def tensors(self) -> dict[str, np.ndarray]:
        if self.hidden_dim > 0:
            return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}
        return {"W2": self.W2, "b2": self.b2}


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    agreement: float


@dataclass
class TrainTrace:
    """Per-epoch training diagnostics; epoch 0 is the pre-update evaluation."""

    epochs: list[EpochStats] = field(default_factory=list)
    skipped_records: int = 0


def _activate(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "identity":
        return pre
    if name == "relu":
        return np.maximum(pre, 0.0)
    return np.tanh(pre)


def _activate_grad(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "identity":
        return np.ones_like(pre)
    if name == "relu":
        return (pre > 0.0).astype(np.float64)
    t = np.tanh(pre)
    return 1.0 - t * t


def init_student(
    feature_dim: int,
    hidden_dim: int,
    teacher_dim: int,
    activation: str,
    seed: int,
) -> StudentModel:
    """Seeded uniform(-a, a) weights with a = sqrt(6/(fan_in+fan_out)); zero biases."""
    rng = np.random.default_rng(seed)

    def glorot(fan_out: int, fan_in: int) -> np.ndarray:
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(fan_out, fan_in))

    if hidden_dim > 0:
        W1 = glorot(hidden_dim, feature_dim)
        b1 = np.zeros(hidden_dim)
        W2 = glorot(teacher_dim, hidden_dim)
    else:
        W1 = b1 = None
        W2 = glorot(teacher_dim, feature_dim)
    return StudentModel(
        feature_dim=feature_dim,
        hidden_dim=hidden_dim,
        teacher_dim=teacher_dim,
        activation=activation,
        W1=W1,
        b1=b1,
        W2=W2,
        b2=np.zeros(teacher_dim),
    )


def _forward_batch(
    model: StudentModel, features: np.ndarray
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Returns (outputs, hidden_pre, hidden) for a (batch, feature_dim) input."""
    if model.hidden_dim > 0:
        pre = features @ model.W1.T + model.b1
        hidden = _activate(model.activation, pre)
        return hidden @ model.W2.T + model.b2, pre, hidden
    return features @ model.W2.T + model.b2, None, None


def student_forward(model: StudentModel, features) -> np.ndarray:
    """Map one feature vector to teacher dimension."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (model.feature_dim,):
        raise DimMismatch(f"features shape {x.shape}, expected ({model.feature_dim},)")
    out, _, _ = _forward_batch(model, x[None, :])
    return out[0]


def sense_logits(senses: SenseSet, n) -> np.ndarray:
    """Dot product of the projected output with each sense vector."""
    vec = np.asarray(n, dtype=np.float64)
    if vec.shape != (senses.senses.shape[1],):
        raise DimMismatch(
            f"vector shape {vec.shape}, sense dim {senses.senses.shape[1]}"
        )
    return senses.senses_f64 @ vec


def softmax_prob(logits) -> np.ndarray:
    """Max-shifted softmax; sums to 1 and cannot overflow."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - np.max(z)
    exp = np.exp(shifted)
    return exp / exp.sum()


def ce_loss(prob, label: int) -> float:
    """Cross entropy -log p[label], with p floored at 1e-12 before the log."""
    p = np.asarray(prob, dtype=np.float64)
    if not 0 <= label < p.shape[0]:
        raise LabelOutOfRange(f"label {label} outside [0, {p.shape[0]})")
    return float(-np.log(max(float(p[label]), PROB_FLOOR)))


def ce_grad(
    model: StudentModel, senses: SenseSet, features, label: int
) -> dict[str, np.ndarray]:
    """Analytic gradient of ce_loss(softmax(sense_logits(student_forward(x)))).

    dL/dz = p - onehot(label), backpropagated through the sense dot
    products and the affine chain. The 1e-12 probability floor is
    ignored (it only binds where the gradient is numerically dead).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (model.feature_dim,):
        raise DimMismatch(f"features shape {x.shape}, expected ({model.feature_dim},)")
    if not 0 <= label < len(senses):
        raise LabelOutOfRange(f"label {label} outside [0, {len(senses)})")

    out, pre, hidden = _forward_batch(model, x[None, :])
    prob = softmax_prob(senses.senses_f64 @ out[0])
    dz = prob.copy()
    dz[label] -= 1.0
    dn = senses.senses_f64.T @ dz

    grads: dict[str, np.ndarray] = {"b2": dn}
    if model.hidden_dim > 0:
        grads["W2"] = np.outer(dn, hidden[0])
        dh = model.W2.T @ dn
        dpre = dh * _activate_grad(model.activation, pre[0])
        grads["W1"] = np.outer(dpre, x)
        grads["b1"] = dpre
    else:
        grads["W2"] = np.outer(dn, x)
    return grads


def _group_by_token(tokens: np.ndarray) -> dict[int, np.ndarray]:
    groups: dict[int, list[int]] = {}
    for i, token in enumerate(tokens):
        groups.setdefault(int(token), []).append(i)
    return {t: np.asarray(ix, dtype=np.int64) for t, ix in groups.items()}


def _evaluate(
    model: StudentModel,
    dictionary: SenseDictionary,
    features: np.ndarray,
    tokens: np.ndarray,
    labels: np.ndarray,
) -> tuple[float, float]:
    """(mean loss, teacher-agreement fraction) over all records."""
    outputs, _, _ = _forward_batch(model, features)
    loss_cap = -np.log(PROB_FLOOR)
    loss_sum = 0.0
    agree = 0
    for token, idx in _group_by_token(tokens).items():
        senses = dictionary.entries[token].senses_f64
        logits = outputs[idx] @ senses.T
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        rows = np.arange(idx.shape[0])
        loss_sum += float(np.minimum(-logp[rows, labels[idx]], loss_cap).sum())
        agree += int(np.sum(np.argmax(logits, axis=1) == labels[idx]))
    n = features.shape[0]
    return loss_sum / n, agree / n


def _batch_gradients(
    model: StudentModel,
    dictionary: SenseDictionary,
    features: np.ndarray,
    tokens: np.ndarray,
    labels: np.ndarray,
) -> dict[str, np.ndarray]:
    """Mean-loss gradients over one mini-batch (vectorized per token group)."""
    outputs, pre, hidden = _forward_batch(model, features)
    batch = features.shape[0]
    dn = np.zeros_like(outputs)
    for token, idx in _group_by_token(tokens).items():
        senses = dictionary.entries[token].senses_f64
        logits = outputs[idx] @ senses.T
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        prob = exp / exp.sum(axis=1, keepdims=True)
        prob[np.arange(idx.shape[0]), labels[idx]] -= 1.0
        dn[idx] = prob @ senses
    dn /= batch

    grads: dict[str, np.ndarray] = {"b2": dn.sum(axis=0)}
    if model.hidden_dim > 0:
        grads["W2"] = dn.T @ hidden
        dh = dn @ model.W2
        dpre = dh * _activate_grad(model.activation, pre)
        grads["W1"] = dpre.T @ features
        grads["b1"] = dpre.sum(axis=0)
    else:
        grads["W2"] = dn.T @ features
    return grads


class _Adam:
    def __init__(self, tensors: dict[str, np.ndarray], lr: float):
        self.lr = lr
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.t = 0

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        for name, g in grads.items():
            self.m[name] = ADAM_BETA1 * self.m[name] + (1 - ADAM_BETA1) * g
            self.v[name] = ADAM_BETA2 * self.v[name] + (1 - ADAM_BETA2) * g * g
            m_hat = self.m[name] / (1 - ADAM_BETA1**self.t)
            v_hat = self.v[name] / (1 - ADAM_BETA2**self.t)
            tensors[name] -= self.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def train(
    teacher_source: BinaryIO,
    feature_source: BinaryIO,
    dictionary: SenseDictionary,
    config: TrainConfig,
    *,
    hidden_dim: int = 0,
    activation: str = "relu",
    init_model: StudentModel | None = None,
) -> tuple[StudentModel, TrainTrace]:
    """Mini-batch training against precomputed teacher sense labels.

    The streams must be aligned index-for-index (equal length, equal
    token ids). Records whose token is absent from the dictionary carry
    no label and are skipped (counted in the trace). Shuffling, weight
    init and the optimizer are all driven by config.seed, so identical
    inputs produce identical weight bytes. Pass init_model to start from
    explicit weights instead of the seeded initialization.
    """
    teacher_header, teacher_tokens, teacher_mat = read_all(teacher_source)
    feature_header, feature_tokens, feature_mat = read_all(feature_source)
    if teacher_tokens.shape[0] != feature_tokens.shape[0]:
        raise StreamMisaligned(
            f"teacher has {teacher_tokens.shape[0]} records, "
            f"features {feature_tokens.shape[0]}"
        )
    if not np.array_equal(teacher_tokens, feature_tokens):
        first = int(np.flatnonzero(teacher_tokens != feature_tokens)[0])
        raise StreamMisaligned(f"token mismatch at record {first}")
    if teacher_header.dim != dictionary.dim:
        raise DimMismatch(
            f"teacher dim {teacher_header.dim} != dictionary dim {dictionary.dim}"
        )

    usable = np.asarray(
        [int(t) in dictionary.entries for t in teacher_tokens], dtype=bool
    )
    trace = TrainTrace(skipped_records=int(np.sum(~usable)))
    tokens = teacher_tokens[usable].astype(np.int64)
    teacher = teacher_mat[usable]
    features = feature_mat[usable]
    if tokens.shape[0] == 0:
        raise EmptyTrainingSet("no training record has a dictionary entry")

    labels = np.empty(tokens.shape[0], dtype=np.int64)
    for token, idx in _group_by_token(tokens).items():
        senses = dictionary.entries[token].senses_f64
        labels[idx] = np.argmax(teacher[idx] @ senses.T, axis=1)

    if init_model is not None:
        model = init_model
    else:
        model = init_student(
            feature_header.dim, hidden_dim, teacher_header.dim, activation, config.seed
        )
    if model.feature_dim != feature_header.dim:
        raise DimMismatch(
            f"model feature_dim {model.feature_dim} != stream dim {feature_header.dim}"
        )
    if model.teacher_dim != teacher_header.dim:
        raise DimMismatch(
            f"model teacher_dim {model.teacher_dim} != stream dim {teacher_header.dim}"
        )

    loss, agreement = _evaluate(model, dictionary, features, tokens, labels)
    trace.epochs.append(EpochStats(epoch=0, mean_loss=loss, agreement=agreement))

    tensors = model.tensors()
    optimizer = _Adam(tensors, config.learning_rate) if config.optimizer == "adam" else None
    rng = np.random.default_rng(config.seed)
    n = tokens.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            grads = _batch_gradients(
                model, dictionary, features[idx], tokens[idx], labels[idx]
            )
            if optimizer is not None:
                optimizer.step(tensors, grads)
            else:
                for name, g in grads.items():
                    tensors[name] -= config.learning_rate * g
        loss, agreement = _evaluate(model, dictionary, features, tokens, labels)
        trace.epochs.append(EpochStats(epoch=epoch, mean_loss=loss, agreement=agreement))
    return model, trace


FALLBACK_LABEL = -1


def infer_labels(
    model: StudentModel, dictionary: SenseDictionary, feature_source: BinaryIO
) -> tuple[np.ndarray, int]:
    """Per-record sense selection by the student.

    Returns (labels, fallback count); records whose token is absent from
    the dictionary get FALLBACK_LABEL.
    """
    header, tokens, features = read_all(feature_source)
    if header.dim != model.feature_dim:
        raise DimMismatch(
            f"stream dim {header.dim} != model feature_dim {model.feature_dim}"
        )
    outputs, _, _ = _forward_batch(model, features)
    labels = np.full(tokens.shape[0], FALLBACK_LABEL, dtype=np.int64)
    fallbacks = 0
    for i, token in enumerate(tokens):
        entry = dictionary.entries.get(int(token))
        if entry is None:
            fallbacks += 1
            continue
        labels[i] = int(np.argmax(entry.senses_f64 @ outputs[i]))
    return labels, fallbacks


def save_model(model: StudentModel, sink: BinaryIO) -> int:
    """Write the `.skdm` byte image (float32 weights, CRC-32 footer)."""
    buf = io.BytesIO()
    buf.write(
        _HEADER_STRUCT.pack(
            MAGIC,
            VERSION,
            model.feature_dim,
            model.hidden_dim,
            model.teacher_dim,
            _ACTIVATION_CODES[model.activation],
        )
    )
    for tensor in (model.W1, model.b1, model.W2, model.b2):
        if tensor is not None:
            buf.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    body = buf.getvalue()
    data = body + _CRC_STRUCT.pack(zlib.crc32(body) & 0xFFFF_FFFF)
    sink.write(data)
    return len(data)


def load_model(source: BinaryIO) -> StudentModel:
    """Parse a `.skdm` file, verifying the CRC; weights widen to float64."""
    data = source.read()
    if len(data) < _HEADER_STRUCT.size + _CRC_STRUCT.size:
        raise TruncatedFile(f"file of {len(data)} bytes cannot hold a model")
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    body, footer = data[:-4], data[-4:]
    (crc_stored,) = _CRC_STRUCT.unpack(footer)
    if zlib.crc32(body) & 0xFFFF_FFFF != crc_stored:
        raise ChecksumMismatch("CRC-32 footer does not match contents")
    _magic, version, feature_dim, hidden_dim, teacher_dim, act_code = (
        _HEADER_STRUCT.unpack_from(body, 0)
    )
    if version != VERSION:
        raise UnsupportedVersion(f"model version {version}, expected {VERSION}")
    if act_code not in _CODE_ACTIVATIONS:
        raise UnsupportedVersion(f"unknown activation code {act_code}")

    offset = _HEADER_STRUCT.size
    shapes: list[tuple[str, tuple[int, ...]]] = []
    if hidden_dim > 0:
        shapes += [("W1", (hidden_dim, feature_dim)), ("b1", (hidden_dim,))]
        shapes += [("W2", (teacher_dim, hidden_dim))]
    else:
        shapes += [("W2", (teacher_dim, feature_dim))]
    shapes += [("b2", (teacher_dim,))]

    tensors: dict[str, np.ndarray] = {}
    for name, shape in shapes:
        size = int(np.prod(shape)) * 4
        if offset + size > len(body):
            raise TruncatedFile(f"{name} payload overruns file")
        tensors[name] = (
            np.frombuffer(body, dtype="<f4", count=int(np.prod(shape)), offset=offset)
            .reshape(shape)
            .astype(np.float64)
        )
        offset += size
    if offset != len(body):
        raise TruncatedFile(f"{len(body) - offset} unexpected bytes after weights")
    return StudentModel(
        feature_dim=feature_dim,
        hidden_dim=hidden_dim,
        teacher_dim=teacher_dim,
        activation=_CODE_ACTIVATIONS[act_code],
        W1=tensors.get("W1"),
        b1=tensors.get("b1"),
        W2=tensors["W2"],
        b2=tensors["b2"],
    )
