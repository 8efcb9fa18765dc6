"""Training and evaluation of the bracket-completion model.

Batches are groups of whole sentences of one length. A sentence is encoded
once and every selected closing bracket in it contributes a cross-entropy
term read off the state just before that bracket, so the summed gradient is
the same as handling each prefix separately, without any padding.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import dyck_gen, nn_core, stack_oracle
from .nn_core import ModelParams

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, params: ModelParams, history: list[dict]):
        super().__init__(message)
        self.params = params
        self.history = history


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    t: int = 0
    skipped: int = 0

    @classmethod
    def like(cls, params: ModelParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like())


def adam_step(params: ModelParams, grads: ModelParams, st: AdamState, lr=1e-3, beta1=0.9, beta2=0.999,
              eps=1e-8) -> tuple[ModelParams, AdamState]:
    """Bias-corrected Adam. Returns new objects; inputs are left untouched.

    A gradient with any non-finite entry is dropped (state unchanged apart
    from the ``skipped`` counter).
    """
    if not grads.all_finite():
        log.warning("non-finite gradient at Adam step %d, update skipped", st.t + 1)
        return params, AdamState(st.m, st.v, st.t, st.skipped + 1)
    t = st.t + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = getattr(grads, name)
        m = beta1 * getattr(st.m, name) + (1.0 - beta1) * g
        v = beta2 * getattr(st.v, name) + (1.0 - beta2) * g * g
        new_p[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name] = m
        new_v[name] = v
    return ModelParams(**new_p), AdamState(ModelParams(**new_m), ModelParams(**new_v), t, st.skipped)


def clip_global_norm(grads: ModelParams, max_norm: float | None) -> tuple[ModelParams, float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for _, g in grads.items()))
    if max_norm is None or not np.isfinite(norm) or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return ModelParams(**{k: g * scale for k, g in grads.items()}), norm


# ---------------------------------------------------------------------------
# data


@dataclass
class EncodedCorpus:
    """Sentences as a code matrix plus their annotated closing brackets."""

    sentences: list[str]
    codes: np.ndarray
    table: stack_oracle.InstanceTable

    @classmethod
    def from_sentences(cls, sentences) -> "EncodedCorpus":
        sentences = list(sentences)
        return cls(sentences, nn_core.encode_corpus(sentences), stack_oracle.instance_table(sentences))

    def __len__(self):
        return len(self.sentences)

    @property
    def length(self) -> int:
        return self.codes.shape[1]

    def select(self, idx) -> "EncodedCorpus":
        idx = np.asarray(idx)
        remap = np.full(len(self), -1, dtype=np.int64)
        remap[idx] = np.arange(len(idx))
        keep = remap[self.table.sentence] >= 0
        table = self.table.subset(keep)
        table.sentence = remap[table.sentence]
        order = np.lexsort((table.pos, table.sentence))
        table = table.subset(order)
        return EncodedCorpus([self.sentences[i] for i in idx], self.codes[idx], table)


def split_corpus(sentences, fraction: float = 0.5, seed: int = 0) -> tuple[list[str], list[str]]:
    """Shuffle-split sentences into (train, test); ``fraction`` goes to train."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("split fraction must lie in (0, 1)")
    sentences = list(sentences)
    perm = np.random.default_rng([seed, 0x5717]).permutation(len(sentences))
    cut = int(round(fraction * len(sentences)))
    train_idx = np.sort(perm[:cut])
    test_idx = np.sort(perm[cut:])
    return [sentences[i] for i in train_idx], [sentences[i] for i in test_idx]


def _loss_targets(data: EncodedCorpus, table: stack_oracle.InstanceTable):
    """Dense (N, n-1) label and weight matrices aligned with decoder logits."""
    N, n = data.codes.shape
    y = np.zeros((N, n - 1))
    w = np.zeros((N, n - 1))
    y[table.sentence, table.pos - 1] = table.target
    w[table.sentence, table.pos - 1] = 1.0
    return y, w


# ---------------------------------------------------------------------------
# config


DEFAULT_SCHEDULE = ((0, 32), (1, 64), (2, 128), (3, 256), (4, 512))


@dataclass
class TrainConfig:
    hidden_units: int = 20
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # (first epoch, batch size in sentences); curriculum epochs use the first entry
    batch_schedule: tuple[tuple[int, int], ...] = DEFAULT_SCHEDULE
    epochs: int = 5
    curriculum_length: int = 50
    curriculum_fraction: float = 0.1
    curriculum_epochs: int = 1
    clip_norm: float | None = 5.0
    seed: int = 0
    split_fraction: float = 0.5
    split_seed: int = 0
    forget_bias: float = 1.0
    dtype: str = "float64"
    # stop the main phase once test error has not improved for this many epochs
    plateau_patience: int | None = None

    def __post_init__(self):
        self.batch_schedule = tuple(tuple(int(x) for x in e) for e in self.batch_schedule)
        sizes = [b for _, b in self.batch_schedule]
        if not sizes or sizes != sorted(sizes) or min(sizes) < 1:
            raise ValueError(f"batch schedule must be non-empty and non-decreasing: {self.batch_schedule}")
        starts = [e for e, _ in self.batch_schedule]
        if starts != sorted(starts) or starts[0] != 0:
            raise ValueError("batch schedule must start at epoch 0 with increasing epochs")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must lie in (0, 1)")
        if self.hidden_units < 1:
            raise ValueError("hidden_units must be positive")
        if self.curriculum_length % 2:
            raise ValueError("curriculum length must be even")

    def batch_size(self, epoch: int) -> int:
        size = self.batch_schedule[0][1]
        for start, b in self.batch_schedule:
            if epoch >= start:
                size = b
        return size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["batch_schedule"] = [list(e) for e in self.batch_schedule]
        return d


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class ErrorReport:
    count: int
    errors: int
    by_distance: dict[int, tuple[int, int]] = field(default_factory=dict)  # value -> (count, errors)
    by_depth: dict[int, tuple[int, int]] = field(default_factory=dict)

    @property
    def error_rate(self) -> float:
        return self.errors / self.count

    @staticmethod
    def rates(buckets: dict[int, tuple[int, int]]) -> dict[int, float]:
        return {k: e / c for k, (c, e) in sorted(buckets.items()) if c}

    def distance_rates(self) -> dict[int, float]:
        return self.rates(self.by_distance)

    def depth_rates(self) -> dict[int, float]:
        return self.rates(self.by_depth)

    def buckets(self, axis: str) -> dict[int, tuple[int, int]]:
        return self.by_distance if axis == "distance" else self.by_depth

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "errors": self.errors,
            "error_rate": self.error_rate,
            "by_distance": {str(k): list(v) for k, v in sorted(self.by_distance.items())},
            "by_embedded_depth": {str(k): list(v) for k, v in sorted(self.by_depth.items())},
        }


def predict_logits(params: ModelParams, codes: np.ndarray, batch: int = 1000) -> np.ndarray:
    """(N, n) logits; column t is read after t+1 characters."""
    out = np.empty(codes.shape, dtype=params.dtype)
    for s in range(0, len(codes), batch):
        fw = nn_core.forward_batch(params, codes[s: s + batch])
        out[s: s + batch] = fw.logits.T
    return out


def instance_predictions(params: ModelParams, data: EncodedCorpus, table=None) -> np.ndarray:
    """0/1 predictions per instance; p = 0.5 exactly predicts square."""
    table = data.table if table is None else table
    logits = predict_logits(params, data.codes)
    return (logits[table.sentence, table.pos - 1] > 0.0).astype(np.int64)


def _bucket(values, wrong) -> dict[int, tuple[int, int]]:
    keys, inv = np.unique(values, return_inverse=True)
    counts = np.bincount(inv, minlength=len(keys))
    errs = np.bincount(inv, weights=wrong, minlength=len(keys)).astype(np.int64)
    return {int(k): (int(c), int(e)) for k, c, e in zip(keys, counts, errs)}


def report_from_predictions(pred, table: stack_oracle.InstanceTable) -> ErrorReport:
    if len(table) == 0:
        raise ValueError("cannot evaluate an empty instance set")
    wrong = (np.asarray(pred) != table.target).astype(np.int64)
    return ErrorReport(
        count=len(table),
        errors=int(wrong.sum()),
        by_distance=_bucket(table.distance, wrong),
        by_depth=_bucket(table.embedded_depth, wrong),
    )


def evaluate(params: ModelParams, data: EncodedCorpus, table=None) -> ErrorReport:
    """Error rate overall and per distance / embedded depth on ``table`` (default: all instances)."""
    table = data.table if table is None else table
    if len(table) == 0:
        raise ValueError("cannot evaluate an empty instance set")
    return report_from_predictions(instance_predictions(params, data, table), table)


# ---------------------------------------------------------------------------
# training


@lru_cache(maxsize=8)
def curriculum_corpus(length: int, count: int, seed: int) -> tuple[str, ...]:
    cfg = dyck_gen.GrammarConfig(n=length, seed=seed)
    return tuple(dyck_gen.sample_corpus(cfg, count))


def _run_epoch(params, adam, cfg: TrainConfig, data: EncodedCorpus, y, w, batch_size, rng):
    perm = rng.permutation(len(data))
    total_loss = 0.0
    total_w = 0.0
    wrong = 0.0
    for s in range(0, len(perm), batch_size):
        idx = perm[s: s + batch_size]
        wb = w[idx].T
        n_inst = wb.sum()
        if n_inst == 0:
            continue
        fw = nn_core.forward_batch(params, data.codes[idx, :-1])
        yb = y[idx].T
        logits = fw.logits
        batch_loss = float((nn_core.bce_from_logits(logits, yb) * wb).sum())
        if not np.isfinite(batch_loss):
            raise FloatingPointError(f"loss became {batch_loss}")
        dlogits = (nn_core.sigmoid(logits) - yb) * wb / n_inst
        grads = nn_core.backward_batch(params, fw, dlogits)
        grads, _ = clip_global_norm(grads, cfg.clip_norm)
        params, adam = adam_step(params, grads, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        total_loss += batch_loss
        total_w += n_inst
        # error of the pre-update parameters on this batch (running train error)
        wrong += float((((logits > 0.0) != (yb > 0.5)) * wb).sum())
    denom = max(total_w, 1.0)
    return params, adam, total_loss / denom, wrong / denom


def fit(train: EncodedCorpus, test: EncodedCorpus | None, cfg: TrainConfig, select=None,
        params: ModelParams | None = None, on_epoch=None) -> tuple[ModelParams, list[dict]]:
    """Curriculum phase on fresh short sentences, then the main phase on ``train``.

    ``select(table) -> bool mask`` restricts which instances carry loss in both
    phases (generalization splits); the encoder still reads full sentences.
    """
    seeds = np.random.SeedSequence([cfg.seed, 0x7A1])
    init_seed, order_seed, curr_seed = (int(s.generate_state(1)[0]) for s in seeds.spawn(3))
    dtype = np.dtype(cfg.dtype)
    if params is None:
        params = ModelParams.init(cfg.hidden_units, np.random.default_rng(init_seed), dtype, cfg.forget_bias)
    adam = AdamState.like(params)
    rng = np.random.default_rng(order_seed)
    train_table = train.table if select is None else train.table.subset(select(train.table))
    if len(train_table) == 0:
        raise ValueError("no training instances selected")
    y, w = _loss_targets(train, train_table)
    history: list[dict] = []
    last_good = params

    phases: list[tuple[str, EncodedCorpus, np.ndarray, np.ndarray, int]] = []
    if cfg.curriculum_fraction > 0 and cfg.curriculum_epochs > 0:
        budget = cfg.curriculum_fraction * cfg.epochs * len(train_table)
        per_epoch = budget / cfg.curriculum_epochs
        count = max(1, int(math.ceil(per_epoch / (cfg.curriculum_length // 2))))
        short = EncodedCorpus.from_sentences(curriculum_corpus(cfg.curriculum_length, count, curr_seed))
        short_table = short.table if select is None else short.table.subset(select(short.table))
        sy, sw = _loss_targets(short, short_table)
        phases += [("curriculum", short, sy, sw, e) for e in range(cfg.curriculum_epochs)]
    phases += [("main", train, y, w, e) for e in range(cfg.epochs)]
    best_test, stale = math.inf, 0

    for epoch_id, (phase, data, py, pw, e) in enumerate(phases):
        bs = cfg.batch_size(e if phase == "main" else 0)
        t0 = time.perf_counter()
        try:
            params, adam, mean_loss, train_err = _run_epoch(params, adam, cfg, data, py, pw, bs, rng)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"training diverged in {phase} epoch {e}: {exc}", last_good, history) from None
        if not params.all_finite():
            raise TrainingDiverged(f"non-finite parameters after {phase} epoch {e}", last_good, history)
        last_good = params
        record = {
            "epoch": epoch_id,
            "phase": phase,
            "phase_epoch": e,
            "batch_size": bs,
            "train_loss": mean_loss,
            "train_error": train_err,
            "test_error": evaluate(params, test).error_rate if test is not None and len(test) else None,
            "wall_time": time.perf_counter() - t0,
            "seed": cfg.seed,
            "skipped_steps": adam.skipped,
        }
        history.append(record)
        log.info("epoch %(epoch)d %(phase)s bs=%(batch_size)d loss=%(train_loss).4f "
                 "train_err=%(train_error).4f test_err=%(test_error)s", record)
        if on_epoch is not None:
            on_epoch(record, params)
        if phase == "main" and cfg.plateau_patience and record["test_error"] is not None:
            if record["test_error"] < best_test:
                best_test, stale = record["test_error"], 0
            else:
                stale += 1
                if stale >= cfg.plateau_patience:
                    log.info("test error plateaued for %d epochs, stopping", stale)
                    break
    return params, history


def train(corpus, cfg: TrainConfig) -> tuple[ModelParams, list[dict]]:
    """Split ``corpus`` (sentences) into train/test halves and fit; the log reports test error."""
    train_s, test_s = split_corpus(corpus, cfg.split_fraction, cfg.split_seed)
    return fit(EncodedCorpus.from_sentences(train_s), EncodedCorpus.from_sentences(test_s), cfg)
