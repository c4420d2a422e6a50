"""Freeze-masked Adam, training/evaluation loops and the sweep experiments."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import peft
from . import tensor as tn
from .errors import ConfigError, DivergenceError
from .peft import FreezePlan, MethodConfig
from .tasks import Dataset, FrameCTC, TaskSpec, gen_task, low_resource_split, worst_metric
from .tasks import evaluate, head_forward, init_head, task_loss
from .tensor import Tensor
from .transformer import (EncoderConfig, EncoderParams, encoder_forward, init_encoder,
                          init_recon_head, layer_inputs, masked_pretrain_loss)

EVAL_BATCH = 64


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 150
    batch_size: int = 16

    def __post_init__(self):
        if not (isinstance(self.lr, (int, float)) and self.lr > 0):
            raise ConfigError(f"optim.lr must be positive, got {self.lr!r}")
        for key in ("beta1", "beta2"):
            value = getattr(self, key)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"optim.{key} must lie in (0, 1), got {value!r}")
        if not self.eps > 0:
            raise ConfigError(f"optim.eps must be positive, got {self.eps!r}")
        for key, lo in (("steps", 0), ("batch_size", 1)):
            value = getattr(self, key)
            if not isinstance(value, int) or isinstance(value, bool) or value < lo:
                raise ConfigError(f"optim.{key} must be an integer >= {lo}, got {value!r}")


def adam_step(params: Mapping[str, Tensor], moments: dict, plan: FreezePlan,
              cfg: OptimConfig, t: int) -> None:
    """
    One bias-corrected Adam update of the parameters named in ``plan``, in place.

    Frozen parameters and their moments are never touched. Gradients are all
    checked before anything is written, so a non-finite gradient leaves the
    whole state as it was and raises :class:`DivergenceError`.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    grads = {}
    for name in sorted(plan.trainable):
        if name not in params:
            continue
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
        grads[name] = g
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, g in grads.items():
        m, v = moments.get(name, (None, None))
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        moments[name] = (m, v)
        params[name].data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def _batches(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    bs = min(batch_size, n)
    perm = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + bs > n:
            perm = rng.permutation(n)
            pos = 0
        yield perm[pos:pos + bs]
        pos += bs


# -- upstream pretraining ------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    mask_frac: float = 0.3
    steps: int = 300
    lr: float = 1e-3
    batch_size: int = 16
    corpus_seed: int = 0
    corpus_size: int = 256
    seq_len: int = 32
    seed: int = 0

    def __post_init__(self):
        if not (isinstance(self.mask_frac, (int, float)) and 0.0 < self.mask_frac < 1.0):
            raise ConfigError(f"pretrain.mask_frac must lie in (0, 1), got {self.mask_frac!r}")
        if not (isinstance(self.lr, (int, float)) and self.lr > 0):
            raise ConfigError(f"pretrain.lr must be positive, got {self.lr!r}")
        if not isinstance(self.steps, int) or self.steps < 0:
            raise ConfigError(f"pretrain.steps must be a non-negative integer, got {self.steps!r}")
        for key in ("batch_size", "corpus_size", "seq_len"):
            value = getattr(self, key)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"pretrain.{key} must be a positive integer, got {value!r}")


def pretrain_corpus(cfg: PretrainConfig, d_input: int) -> np.ndarray:
    """Unlabeled sequences of piecewise-constant Gaussian "phones"."""
    source = FrameCTC(vocab_size=9, max_label_len=8, noise=0.3)
    return gen_task(source, cfg.corpus_size, cfg.seq_len, d_input, cfg.corpus_seed, "pretrain").features


@dataclass
class PretrainResult:
    params: EncoderParams
    recon: dict
    initial_loss: float
    final_loss: float
    trace: list


def _probe_loss(params, recon, corpus, mask_frac) -> float:
    with tn.no_grad():
        return masked_pretrain_loss(corpus[:64], params, recon, mask_frac, seed=12345).item()


def pretrain_upstream(enc: EncoderConfig, cfg: PretrainConfig) -> PretrainResult:
    """Minimise the masked-frame reconstruction loss on a seeded corpus."""
    if cfg.seq_len > enc.max_len:
        raise ConfigError(f"pretrain.seq_len {cfg.seq_len} exceeds encoder.max_len {enc.max_len}")
    corpus = pretrain_corpus(cfg, enc.d_input)
    params = init_encoder(enc, cfg.seed)
    recon = init_recon_head(enc, cfg.seed)
    named = {**params, **recon}
    for p in named.values():
        p.requires_grad = True
    plan = FreezePlan(frozenset(named))
    optim = OptimConfig(lr=cfg.lr, steps=max(cfg.steps, 1), batch_size=cfg.batch_size)
    initial = _probe_loss(params, recon, corpus, cfg.mask_frac)
    mask_rng = np.random.default_rng([cfg.seed, 29])
    moments: dict = {}
    trace = []
    for step, idx in enumerate(_batches(len(corpus), cfg.batch_size, cfg.steps,
                                        np.random.default_rng([cfg.seed, 31])), 1):
        for p in named.values():
            p.grad = None
        loss = masked_pretrain_loss(corpus[idx], params, recon, cfg.mask_frac, mask_rng)
        if not np.isfinite(loss.item()):
            raise DivergenceError(f"pretraining loss became non-finite at step {step}")
        loss.backward()
        adam_step(named, moments, plan, optim, step)
        trace.append(loss.item())
    for p in named.values():
        p.requires_grad = False
        p.grad = None
    final = _probe_loss(params, recon, corpus, cfg.mask_frac)
    return PretrainResult(params, recon, initial, final, trace)


# -- downstream runs ---------------------------------------------------------------------

@dataclass
class RunResult:
    method: str
    task: str
    seed: int
    lr: float
    trainable_upstream: int
    trainable_total: int
    loss_trace: list
    metric_name: str
    metric: float
    diverged: bool
    fraction: float = 1.0
    final_params: dict | None = field(default=None, repr=False, compare=False)


class TunedModel:
    """Frozen-or-not encoder, one tuning method and a downstream head, as one parameter set."""

    def __init__(self, upstream: EncoderParams, method: MethodConfig, task: TaskSpec, seed: int):
        self.encoder = upstream.clone()
        self.state, plan = peft.inject(method, upstream.config, seed)
        self.head = init_head(task, upstream.config.d_model, seed)
        self.plan = plan
        self.method = method
        self.task = task
        self.hooks = peft.build_hooks(self.state)
        self.params: dict[str, Tensor] = {**self.encoder, **self.state, **self.head}
        for name, p in self.params.items():
            p.requires_grad = name in plan

    @property
    def encoder_frozen_plain(self) -> bool:
        """No hooks and no trainable encoder weights: encoder outputs can be cached."""
        return self.hooks is None and not any(n in self.plan for n in self.encoder)

    def inventory(self) -> dict[str, tuple[int, ...]]:
        return {name: p.shape for name, p in self.params.items()}

    def hidden_states(self, features) -> list:
        return encoder_forward(features, self.encoder, self.hooks)

    def outputs_from_states(self, states) -> Tensor:
        return head_forward(peft.represent(states, self.state), self.head, self.task)

    def forward(self, features) -> Tensor:
        return self.outputs_from_states(self.hidden_states(features))

    def init_prefix(self, features) -> None:
        with tn.no_grad():
            inputs = layer_inputs(features, self.encoder)
        peft.apply_prefix_init(self.state, inputs)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}


def _cached_states(model: TunedModel, features: np.ndarray) -> np.ndarray:
    """Hidden states stacked as ``(L, N, T, d)``, computed without a graph."""
    chunks = []
    with tn.no_grad():
        for start in range(0, len(features), EVAL_BATCH):
            states = model.hidden_states(features[start:start + EVAL_BATCH])
            chunks.append(np.stack([s.data for s in states]))
    return np.concatenate(chunks, axis=1)


def _evaluate(model: TunedModel, test: Dataset, cache: np.ndarray | None) -> float | None:
    outs = []
    with tn.no_grad():
        for start in range(0, len(test), EVAL_BATCH):
            sl = slice(start, start + EVAL_BATCH)
            if cache is not None:
                out = model.outputs_from_states([Tensor(s) for s in cache[:, sl]])
            else:
                out = model.forward(test.features[sl])
            outs.append(out.data)
    outputs = np.concatenate(outs)
    if not np.all(np.isfinite(outputs)):
        return None
    return evaluate(outputs, test.labels, test.task)


def train_run(upstream: EncoderParams, method: MethodConfig, task: TaskSpec, train: Dataset,
              test: Dataset, optim: OptimConfig, seed: int, log_every: int = 10,
              fraction: float = 1.0, keep_params: bool = False) -> RunResult:
    """
    Tune ``method`` plus a fresh head on ``train`` for ``optim.steps`` Adam steps
    and score the test split. A non-finite loss, gradient, parameter or output
    ends the run with ``diverged=True`` and the task's worst metric.
    """
    model = TunedModel(upstream, method, task, seed)
    inventory = model.inventory()
    trainable_upstream = peft.count_trainable(model.plan, inventory, "upstream")
    trainable_total = peft.count_trainable(model.plan, inventory, "all")

    cached = model.encoder_frozen_plain
    train_cache = _cached_states(model, train.features) if cached else None
    test_cache = _cached_states(model, test.features) if cached else None
    if cached and not isinstance(method, peft.WeightedSum):
        train_cache, test_cache = train_cache[-1:], test_cache[-1:]  # the head reads the top layer only

    # one batch is always drawn so a zero-step Prefix run still gets its data-dependent init
    batches = list(_batches(len(train), optim.batch_size, max(optim.steps, 1), np.random.default_rng([seed, 23])))
    if isinstance(method, peft.Prefix):
        model.init_prefix(train.features[batches[0]])
    batches = batches[:optim.steps]

    trainable = [p for n, p in model.params.items() if n in model.plan]
    moments: dict = {}
    trace: list[float] = []
    window: list[float] = []
    diverged = False
    for step, idx in enumerate(batches, 1):
        for p in trainable:
            p.grad = None
        if cached:
            out = model.outputs_from_states([Tensor(s[idx]) for s in train_cache])
        else:
            out = model.forward(train.features[idx])
        loss = task_loss(out, [train.labels[i] for i in idx], task)
        value = loss.item()
        if not np.isfinite(value):
            diverged = True
            break
        loss.backward()
        try:
            adam_step(model.params, moments, model.plan, optim, step)
        except DivergenceError:
            diverged = True
            break
        if not all(np.all(np.isfinite(p.data)) for p in trainable):
            diverged = True
            break
        window.append(value)
        if step % log_every == 0 or step == len(batches):
            trace.append(float(np.mean(window)))
            window = []

    metric = None
    if not diverged:
        metric = _evaluate(model, test, test_cache)
        diverged = metric is None
    if diverged:
        metric = worst_metric(task)

    return RunResult(method=method.name, task=task.kind, seed=seed, lr=optim.lr,
                     trainable_upstream=trainable_upstream, trainable_total=trainable_total,
                     loss_trace=trace, metric_name=task.metric, metric=float(metric),
                     diverged=diverged, fraction=fraction,
                     final_params=model.snapshot() if keep_params else None)


# -- experiments ---------------------------------------------------------------------------

@dataclass
class RunSpec:
    """Everything a run needs except the method, learning rate and seed."""

    upstream: EncoderParams
    task: TaskSpec
    train: Dataset
    test: Dataset
    optim: OptimConfig = OptimConfig()
    log_every: int = 10


@dataclass(frozen=True)
class CellStats:
    values: tuple
    n_diverged: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))  # population std

    @property
    def median(self) -> float:
        return float(np.median(self.values))

    @property
    def n(self) -> int:
        return len(self.values)


def aggregate(metrics: Sequence[float], diverged: Sequence[bool] = ()) -> CellStats:
    if not metrics:
        raise ValueError("cannot aggregate an empty cell")
    return CellStats(tuple(float(m) for m in metrics), int(sum(diverged)))


@dataclass
class SweepTable:
    axis: str  # "lr" or "fraction"
    methods: list
    columns: list
    cells: dict  # (method name, column) -> CellStats
    runs: list

    def cell(self, method: str, column) -> CellStats:
        return self.cells[(method, column)]


def _run_job(job):
    spec, method, lr, seed, train, fraction = job
    return train_run(spec.upstream, method, spec.task, train, spec.test,
                     replace(spec.optim, lr=lr), seed, spec.log_every, fraction)


def _execute(jobs: list, workers: int) -> list[RunResult]:
    if workers <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def _tabulate(axis: str, methods, columns, runs: list[RunResult]) -> SweepTable:
    cells = {}
    for m in methods:
        for c in columns:
            picked = [r for r in runs if r.method == m.name and getattr(r, axis) == c]
            cells[(m.name, c)] = aggregate([r.metric for r in picked], [r.diverged for r in picked])
    return SweepTable(axis, [m.name for m in methods], list(columns), cells, runs)


def lr_sweep(spec: RunSpec, methods: Sequence[MethodConfig], lrs: Sequence[float],
             seeds: Sequence[int], workers: int = 1) -> SweepTable:
    """Every (method, lr, seed) on the full training split; mean/std per (method, lr)."""
    if not methods or not lrs or not seeds:
        raise ValueError("methods, lrs and seeds must be non-empty")
    jobs = [(spec, m, float(lr), int(s), spec.train, 1.0) for m in methods for lr in lrs for s in seeds]
    return _tabulate("lr", methods, [float(lr) for lr in lrs], _execute(jobs, workers))


def low_resource_experiment(spec: RunSpec, methods: Sequence[MethodConfig], fractions: Sequence[float],
                            seeds: Sequence[int], workers: int = 1) -> SweepTable:
    """
    For every (fraction, seed), draw one subsample of the training split and
    train every method on that same subsample.
    """
    if not methods or not fractions or not seeds:
        raise ValueError("methods, fractions and seeds must be non-empty")
    jobs = []
    for fraction in fractions:
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
        for s in seeds:
            subset = low_resource_split(spec.train, fraction, int(s))
            jobs += [(spec, m, spec.optim.lr, int(s), subset, float(fraction)) for m in methods]
    return _tabulate("fraction", methods, [float(f) for f in fractions], _execute(jobs, workers))


def seed_repeat(results: Iterable[RunResult]) -> CellStats:
    results = list(results)
    return aggregate([r.metric for r in results], [r.diverged for r in results])
