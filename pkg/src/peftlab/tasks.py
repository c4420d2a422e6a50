"""Downstream heads, losses, metrics and synthetic task generators."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import ClassVar, Mapping, Sequence, Union

import numpy as np

from . import tensor as tn
from .errors import ConfigError, FeasibilityError, LabelError, ShapeError
from .tensor import Tensor

BLANK = 0
_SPLIT_STREAM = {"train": 1, "test": 2, "pretrain": 3}


@dataclass(frozen=True)
class UtteranceCls:
    n_classes: int = 4
    noise: float = 5.0
    kind: ClassVar[str] = "utterance"
    metric: ClassVar[str] = "accuracy"
    higher_is_better: ClassVar[bool] = True

    def __post_init__(self):
        _check_int("n_classes", self.n_classes, 2)
        _check_noise(self.noise)

    @property
    def n_outputs(self) -> int:
        return self.n_classes


@dataclass(frozen=True)
class FrameCTC:
    vocab_size: int = 5
    max_label_len: int = 4
    noise: float = 0.5
    kind: ClassVar[str] = "ctc"
    metric: ClassVar[str] = "ter"
    higher_is_better: ClassVar[bool] = False

    def __post_init__(self):
        _check_int("vocab_size", self.vocab_size, 2)
        _check_int("max_label_len", self.max_label_len, 1)
        _check_noise(self.noise)

    @property
    def n_outputs(self) -> int:
        return self.vocab_size


@dataclass(frozen=True)
class Diarization:
    n_speakers: int = 2
    noise: float = 0.5
    switch_prob: float = 0.1
    kind: ClassVar[str] = "diarization"
    metric: ClassVar[str] = "der"
    higher_is_better: ClassVar[bool] = False

    def __post_init__(self):
        if self.n_speakers != 2:
            raise ConfigError(f"task.n_speakers must be 2, got {self.n_speakers!r}")
        _check_noise(self.noise)
        if not 0.0 < self.switch_prob < 1.0:
            raise ConfigError(f"task.switch_prob must lie in (0, 1), got {self.switch_prob!r}")

    @property
    def n_outputs(self) -> int:
        return 2


TaskSpec = Union[UtteranceCls, FrameCTC, Diarization]
TASKS: dict[str, type] = {cls.kind: cls for cls in (UtteranceCls, FrameCTC, Diarization)}
METRIC_DIRECTION = {cls.metric: cls.higher_is_better for cls in TASKS.values()}


def _check_int(key, value, lo):
    if not isinstance(value, int) or isinstance(value, bool) or value < lo:
        raise ConfigError(f"task.{key} must be an integer >= {lo}, got {value!r}")


def _check_noise(value):
    if not isinstance(value, (int, float)) or isinstance(value, bool) or value < 0:
        raise ConfigError(f"task.noise must be a non-negative number, got {value!r}")


def worst_metric(task: TaskSpec) -> float:
    return 0.0 if task.higher_is_better else 1.0


# -- data ------------------------------------------------------------------------------

@dataclass
class Dataset:
    task: TaskSpec
    features: np.ndarray  # (N, T, d_input)
    labels: list = field(repr=False)
    split: str = "train"
    seed: int = 0

    def __post_init__(self):
        if self.features.ndim != 3:
            raise ShapeError(f"features must be (N, T, d_input), got {self.features.shape}")
        if len(self.labels) != self.features.shape[0]:
            raise ShapeError("one label per item required")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def seq_len(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.task, self.features[indices], [self.labels[i] for i in indices],
                       self.split, self.seed)


def _task_rngs(seed: int, split: str):
    if split not in _SPLIT_STREAM:
        raise ValueError(f"unknown split {split!r}")
    return np.random.default_rng([seed, 0]), np.random.default_rng([seed, _SPLIT_STREAM[split]])


def gen_task(task: TaskSpec, n_items: int, seq_len: int, d_input: int, seed: int,
             split: str = "train") -> Dataset:
    """
    Deterministic synthetic corpus. Class templates, symbol means and speaker
    directions depend on ``seed`` only, so train and test splits generated with
    the same seed share them.
    """
    if n_items < 1:
        raise ValueError("n_items must be at least 1")
    shared, rng = _task_rngs(seed, split)
    noise = float(task.noise)
    if isinstance(task, UtteranceCls):
        templates = shared.normal(size=(task.n_classes, d_input))
        labels = rng.integers(0, task.n_classes, size=n_items)
        feats = templates[labels][:, None, :] + noise * rng.normal(size=(n_items, seq_len, d_input))
        return Dataset(task, feats, [int(k) for k in labels], split, seed)

    if isinstance(task, FrameCTC):
        means = shared.normal(size=(task.vocab_size, d_input))
        feats = np.empty((n_items, seq_len, d_input))
        labels = []
        for n in range(n_items):
            states = _left_to_right_states(rng, task.vocab_size, min(task.max_label_len, seq_len), seq_len)
            feats[n] = means[states] + noise * rng.normal(size=(seq_len, d_input))
            labels.append(tuple(collapse(states)))
        return Dataset(task, feats, labels, split, seed)

    if isinstance(task, Diarization):
        speakers = shared.normal(size=(2, d_input))
        activity = np.empty((n_items, seq_len, 2))
        for n in range(n_items):
            for s in range(2):
                on = rng.random() < 0.5
                for t in range(seq_len):
                    if rng.random() < task.switch_prob:
                        on = not on
                    activity[n, t, s] = float(on)
        feats = activity @ speakers + noise * rng.normal(size=(n_items, seq_len, d_input))
        return Dataset(task, feats, list(activity), split, seed)

    raise ConfigError(f"unknown task {task!r}")


def _left_to_right_states(rng, vocab_size: int, max_len: int, seq_len: int) -> np.ndarray:
    n = int(rng.integers(1, max_len + 1))
    symbols = [int(rng.integers(1, vocab_size))]
    while len(symbols) < n:
        if vocab_size == 2:
            break  # a single non-blank symbol cannot change between segments
        s = int(rng.integers(1, vocab_size))
        if s != symbols[-1]:
            symbols.append(s)
    cuts = np.sort(rng.choice(np.arange(1, seq_len), size=len(symbols) - 1, replace=False))
    durations = np.diff(np.concatenate([[0], cuts, [seq_len]]))
    return np.repeat(symbols, durations)


def gen_splits(task: TaskSpec, n_train: int, n_test: int, seq_len: int, d_input: int,
               seed: int) -> tuple[Dataset, Dataset]:
    return (gen_task(task, n_train, seq_len, d_input, seed, "train"),
            gen_task(task, n_test, seq_len, d_input, seed, "test"))


def low_resource_split(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Seeded subsample without replacement of ``ceil(fraction * n)`` items, order kept."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(ds)
    k = max(1, math.ceil(fraction * n - 1e-9))
    if k == n:
        return ds.subset(np.arange(n))
    idx = np.sort(np.random.default_rng([seed, 17]).choice(n, size=k, replace=False))
    return ds.subset(idx)


# -- heads -------------------------------------------------------------------------------

def head_shapes(task: TaskSpec, d_model: int) -> dict[str, tuple[int, ...]]:
    return {"head.weight": (d_model, task.n_outputs), "head.bias": (task.n_outputs,)}


def init_head(task: TaskSpec, d_model: int, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng([seed, 13])
    return {"head.weight": Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_model), size=(d_model, task.n_outputs))),
            "head.bias": Tensor(np.zeros(task.n_outputs))}


def head_forward(rep: Tensor, head: Mapping[str, Tensor], task: TaskSpec) -> Tensor:
    """Utterance tasks mean-pool over time first; frame tasks are per-frame linear maps."""
    if isinstance(task, UtteranceCls):
        rep = rep.mean(axis=-2)
    out = rep @ head["head.weight"] + head["head.bias"]
    if isinstance(task, FrameCTC):
        out = tn.log_softmax(out, axis=-1)
    return out


def task_loss(outputs: Tensor, labels: Sequence, task: TaskSpec) -> Tensor:
    if isinstance(task, UtteranceCls):
        return cross_entropy(outputs, np.asarray(labels, dtype=np.int64))
    if isinstance(task, FrameCTC):
        return ctc_loss_batch(outputs, labels)
    return pit_loss(outputs, np.asarray(labels, dtype=np.float64))


def evaluate(outputs: np.ndarray, labels: Sequence, task: TaskSpec) -> float:
    if isinstance(task, UtteranceCls):
        return float(np.mean(np.argmax(outputs, axis=-1) == np.asarray(labels)))
    if isinstance(task, FrameCTC):
        errors = sum(edit_distance(ctc_greedy_decode(lp), ref) for lp, ref in zip(outputs, labels))
        return errors / sum(len(ref) for ref in labels)
    return diarization_error(outputs, np.asarray(labels))


# -- losses ---------------------------------------------------------------------------------

def cross_entropy(logits, target) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over any leading axes."""
    logits = tn.as_tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    if target.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {target.shape} do not match logits {logits.shape}")
    k = logits.shape[-1]
    if np.any(target < 0) or np.any(target >= k):
        raise LabelError(f"class id out of range for {k} classes: {target.tolist()}")
    return -tn.pick(tn.log_softmax(logits, axis=-1), target).mean()


def _extend(labels: Sequence[int]) -> np.ndarray:
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    ext[1::2] = labels
    return ext


def ctc_min_frames(labels: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _ctc_forward_backward(lp: np.ndarray, labels: Sequence[int]):
    """Log-space alpha/beta tables over the blank-extended label sequence."""
    t_len = lp.shape[0]
    ext = _extend(labels)
    s_len = ext.size
    emit = lp[:, ext]  # (T, S)
    skip = np.zeros(s_len, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    neg_inf = -np.inf
    alpha = np.full((t_len, s_len), neg_inf)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((t_len, s_len), neg_inf)
    beta[-1, -1] = emit[-1, -1]
    if s_len > 1:
        beta[-1, -2] = emit[-1, -2]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]

    log_p = alpha[-1, -1] if s_len == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    return ext, emit, alpha, beta, log_p


def ctc_loss(log_probs, labels: Sequence[int]) -> Tensor:
    """
    ``-log`` of the total probability of every blank-augmented alignment of
    ``labels`` to the ``(T, V)`` frame log-probabilities.
    """
    log_probs = tn.as_tensor(log_probs)
    labels = [int(s) for s in labels]
    if log_probs.ndim != 2:
        raise ShapeError(f"ctc_loss expects (T, V) log-probabilities, got {log_probs.shape}")
    t_len, vocab = log_probs.shape
    if any(s == BLANK or s < 0 or s >= vocab for s in labels):
        raise LabelError(f"labels must be non-blank ids below {vocab}: {labels}")
    need = ctc_min_frames(labels)
    if t_len < need:
        raise FeasibilityError(f"{t_len} frames cannot align labels {labels} (need {need})")
    ext, emit, alpha, beta, log_p = _ctc_forward_backward(log_probs.data, labels)

    def backward(g):
        occupancy = np.exp(alpha + beta - emit - log_p)  # (T, S)
        grad = np.zeros_like(log_probs.data)
        for s, sym in enumerate(ext):
            grad[:, sym] += occupancy[:, s]
        return (-g * grad,)

    return tn._make(np.asarray(-log_p), (log_probs,), backward, "ctc_loss")


def ctc_loss_batch(log_probs: Tensor, labels: Sequence[Sequence[int]]) -> Tensor:
    if log_probs.ndim == 2:
        return ctc_loss(log_probs, labels)
    losses = [ctc_loss(log_probs[b], labels[b]) for b in range(log_probs.shape[0])]
    return tn.stack(losses).mean()


def collapse(path: Sequence[int]) -> list[int]:
    out = []
    prev = None
    for s in path:
        s = int(s)
        if s != prev and s != BLANK:
            out.append(s)
        prev = s
    return out


def ctc_greedy_decode(log_probs) -> list[int]:
    """Per-frame argmax (lowest id wins ties), repeats merged, blanks dropped."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    return collapse(np.argmax(lp, axis=-1))


def _bce_with_logits(z: Tensor, y: np.ndarray) -> Tensor:
    return tn.softplus(z) - z * y


def pit_loss(logits, activity) -> Tensor:
    """
    Two-speaker permutation-invariant BCE: for every item, the smaller of the
    mean frame/speaker BCE under the identity and the swapped speaker order;
    averaged over leading batch axes.
    """
    logits = tn.as_tensor(logits)
    activity = np.asarray(activity, dtype=np.float64)
    if logits.shape != activity.shape or logits.shape[-1] != 2:
        raise ShapeError(f"pit_loss needs matching (..., T, 2) shapes: {logits.shape} vs {activity.shape}")
    direct = _bce_with_logits(logits, activity).mean(axis=(-2, -1))
    swapped = _bce_with_logits(logits, activity[..., ::-1]).mean(axis=(-2, -1))
    return tn.minimum(direct, swapped).mean()


def diarization_error(logits: np.ndarray, activity: np.ndarray) -> float:
    """Fraction of wrong frame/speaker decisions under the better speaker order, averaged over items."""
    pred = np.asarray(logits) > 0.0
    ref = np.asarray(activity) > 0.5
    direct = (pred != ref).mean(axis=(-2, -1))
    swapped = (pred != ref[..., ::-1]).mean(axis=(-2, -1))
    return float(np.mean(np.minimum(direct, swapped)))


# -- edit distance --------------------------------------------------------------------------

def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def token_error_rate(hyp: Sequence, ref: Sequence) -> float:
    if len(ref) == 0:
        raise ValueError("reference sequence must be non-empty")
    return edit_distance(hyp, ref) / len(ref)


def task_from_dict(d: Mapping) -> TaskSpec:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in TASKS:
        raise ConfigError(f"task.kind must be one of {sorted(TASKS)}, got {kind!r}")
    cls = TASKS[kind]
    allowed = set(cls.__dataclass_fields__)
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key task.{sorted(unknown)[0]} for task kind {kind!r}")
    return cls(**d)


def task_to_dict(task: TaskSpec) -> dict:
    return {"kind": task.kind, **asdict(task)}
