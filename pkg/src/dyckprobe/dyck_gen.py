"""Sampling fixed-length Dyck-2 sentences from a length-aware probabilistic grammar.

Grammar::

    S  -> S1 S | S1
    S1 -> B | T
    B  -> [ S ] | { S }
    T  -> [ ] | { }

P(S -> S1 S) = r_c * s(l) and P(S1 -> B) = r_b * s(l), where ``l`` is the
number of characters emitted so far and ``r_b``, ``r_c`` are drawn once per
derivation attempt. Derivations whose yield is not exactly ``n`` characters
are rejected and redrawn from the same stream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable

import numpy as np
from numba import njit

from . import stack_oracle

ALPHABET = "[]{}"
OPENERS = "[{"
CLOSERS = "]}"
RNG_ALGORITHM = "numpy.PCG64 via SeedSequence(seed, spawn_key=(sentence_index,))"

# derivation stack symbols; a pending closer with alphabet code c is stored as c + _CLOSE_OFFSET
_S = 0
_S1 = 1
_CLOSE_OFFSET = 2
_CODES = np.frombuffer(ALPHABET.encode("ascii"), dtype=np.uint8)
_CHUNK = 4096


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GrammarConfig:
    n: int = 100
    r_range: tuple[float, float] = (0.4, 0.8)
    seed: int = 0
    max_attempts: int = 10_000

    def __post_init__(self):
        if self.n < 2 or self.n % 2:
            raise ValueError(f"target length must be even and >= 2, got {self.n}")
        lo, hi = self.r_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError(f"r_range must lie inside [0, 1], got {self.r_range}")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be positive")


@dataclass
class Sentence:
    chars: str

    @property
    def length(self) -> int:
        return len(self.chars)

    def __str__(self):
        return self.chars


def shape_factor(l: float, n: float) -> float:
    """min(1, 3 - 3 l / n); 1 up to two thirds of the sentence, then linear down to 0."""
    if l < 0 or l > n:
        raise ValueError(f"shape_factor needs 0 <= l <= n, got l={l}, n={n}")
    return min(1.0, -3.0 * l / n + 3.0)


def sentence_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sentence ``index`` of a corpus seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


@njit(cache=True)
def _derive_from(n, lo, hi, u, pos, out):
    """Run derivation attempts on the uniform stream ``u`` starting at ``pos``.

    Returns (status, next_pos, attempts). status 1: an accepted sentence is in
    ``out``. status 0: ``u`` ran out mid-attempt; the caller extends the stream
    and resumes at ``next_pos``, so results do not depend on the buffer size.
    """
    stack = np.empty(2 * n + 4, dtype=np.int8)
    attempts = 0
    m = u.shape[0]
    while True:
        if pos + 2 > m:
            return 0, pos, attempts
        r_b = lo + (hi - lo) * u[pos]
        r_c = lo + (hi - lo) * u[pos + 1]
        p = pos + 2
        stack[0] = _S
        top = 1
        length = 0
        owed = 2
        while top > 0:
            top -= 1
            sym = stack[top]
            if sym == _S:
                if p >= m:
                    return 0, pos, attempts
                if u[p] < r_c * min(1.0, -3.0 * length / n + 3.0):
                    stack[top] = _S
                    stack[top + 1] = _S1
                    top += 2
                    owed += 2
                else:
                    stack[top] = _S1
                    top += 1
                p += 1
            elif sym == _S1:
                if p + 2 > m:
                    return 0, pos, attempts
                t = 0 if u[p] < 0.5 else 1
                out[length] = 2 * t
                if u[p + 1] < r_b * min(1.0, -3.0 * length / n + 3.0):
                    length += 1
                    stack[top] = 2 * t + 1 + _CLOSE_OFFSET
                    stack[top + 1] = _S
                    top += 2
                    owed += 1
                else:
                    out[length + 1] = 2 * t + 1
                    length += 2
                    owed -= 2
                p += 2
            else:
                out[length] = sym - _CLOSE_OFFSET
                length += 1
                owed -= 1
            if length + owed > n:
                break
        attempts += 1
        pos = p
        if top == 0 and length == n:
            return 1, pos, attempts


def sample_sentence_with_stats(cfg: GrammarConfig, rng: np.random.Generator) -> tuple[Sentence, int]:
    """Returns the sentence and the number of derivation attempts it took."""
    lo, hi = (float(x) for x in cfg.r_range)
    u = rng.random(_CHUNK)
    pos = 0
    attempts = 0
    out = np.empty(cfg.n, dtype=np.int8)
    while attempts < cfg.max_attempts:
        status, pos, tried = _derive_from(cfg.n, lo, hi, u, pos, out)
        attempts += tried
        if status == 1 and attempts <= cfg.max_attempts:
            return Sentence(_CODES[out].tobytes().decode("ascii")), attempts
        u = np.concatenate([u[pos:], rng.random(_CHUNK)])
        pos = 0
    raise GenerationError(f"no sentence of length {cfg.n} after {cfg.max_attempts} attempts")


def sample_sentence(cfg: GrammarConfig, rng: np.random.Generator) -> Sentence:
    return sample_sentence_with_stats(cfg, rng)[0]


def iter_sentences(cfg: GrammarConfig, count: int, start: int = 0) -> Iterable[tuple[Sentence, int]]:
    for i in range(start, start + count):
        yield sample_sentence_with_stats(cfg, sentence_rng(cfg.seed, i))


def sample_corpus(cfg: GrammarConfig, count: int) -> list[str]:
    return [s.chars for s, _ in iter_sentences(cfg, count)]


@dataclass
class CorpusSummary:
    n: int
    count: int
    seed: int
    r_range: tuple[float, float]
    rng_algorithm: str = RNG_ALGORITHM
    attempts: int = 0
    rejected: int = 0
    distance_hist: dict[int, int] = field(default_factory=dict)
    depth_hist: dict[int, int] = field(default_factory=dict)
    histogram_unit: str = "closing-bracket instance"

    @property
    def acceptance_rate(self) -> float:
        return self.count / self.attempts if self.attempts else 0.0

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "count": self.count,
            "seed": self.seed,
            "r_range": list(self.r_range),
            "rng_algorithm": self.rng_algorithm,
            "attempts": self.attempts,
            "rejected": self.rejected,
            "acceptance_rate": self.acceptance_rate,
            "histogram_unit": self.histogram_unit,
            "distance_hist": {str(k): v for k, v in sorted(self.distance_hist.items())},
            "embedded_depth_hist": {str(k): v for k, v in sorted(self.depth_hist.items())},
        }


def generate_corpus(cfg: GrammarConfig, count: int, sink: IO[str]) -> CorpusSummary:
    """Write ``count`` sentences to ``sink`` (one per line) and return the corpus statistics."""
    if count < 1:
        raise ValueError("count must be >= 1")
    summary = CorpusSummary(n=cfg.n, count=count, seed=cfg.seed, r_range=tuple(cfg.r_range))
    dist_hist: dict[int, int] = {}
    depth_hist: dict[int, int] = {}
    for sent, attempts in iter_sentences(cfg, count):
        sink.write(sent.chars + "\n")
        summary.attempts += attempts
        for inst in stack_oracle.annotate_instances(sent.chars):
            dist_hist[inst.distance] = dist_hist.get(inst.distance, 0) + 1
            depth_hist[inst.embedded_depth] = depth_hist.get(inst.embedded_depth, 0) + 1
    summary.rejected = summary.attempts - count
    summary.distance_hist = dist_hist
    summary.depth_hist = depth_hist
    return summary


def write_corpus(cfg: GrammarConfig, count: int, out_dir: str | Path) -> CorpusSummary:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "corpus.txt", "w", encoding="utf-8", newline="\n") as fh:
        summary = generate_corpus(cfg, count, fh)
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def read_corpus(path: str | Path) -> list[str]:
    path = Path(path)
    if path.is_dir():
        path = path / "corpus.txt"
    with open(path, encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh]
    bad = [i for i, s in enumerate(lines) if not s or set(s) - set(ALPHABET)]
    if bad:
        raise ValueError(f"{path}: line {bad[0] + 1} is not a bracket string")
    return lines
