"""Diagnostic probes on frozen encoder states.

A probe sees only the concatenated state [h_i, c_i] after ``i`` characters
and is trained to recover either the depth at ``i`` (linear regression) or
the bracket types of the last ``j`` characters (a small LSTM decoder).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn_core, stack_oracle
from .nn_core import sigmoid
from .trainer import EncodedCorpus

TYPE_OF_CODE = np.array([0, 0, 1, 1])  # '[' ']' -> square, '{' '}' -> curly


@dataclass
class StateDataset:
    """Frozen encoder states with their probe targets.

    ``position`` is the prefix length i (1-based index of the last character
    read). ``codes`` and ``match`` are per-sentence arrays shared with the
    source corpus; ``match[s, x]`` is the index of the bracket closing the
    opener at 0-based index x (-1 for closers).
    """

    states: np.ndarray  # (M, 2H)
    sentence: np.ndarray
    position: np.ndarray
    depth: np.ndarray
    codes: np.ndarray  # (N, n)
    match: np.ndarray  # (N, n)

    def __len__(self):
        return len(self.position)

    def subset(self, mask) -> "StateDataset":
        return StateDataset(self.states[mask], self.sentence[mask], self.position[mask], self.depth[mask],
                            self.codes, self.match)

    def _lookback_index(self, j: int):
        k = np.arange(1, j + 1)
        idx = self.position[:, None] - k[None, :]  # 0-based index of x_{i-k+1}
        valid = idx >= 0
        return np.where(valid, idx, 0), valid

    def previous_types(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """(M, j) bracket types z_{i,k} = type(x_{i-k+1}) and a validity mask (k <= i)."""
        idx, valid = self._lookback_index(j)
        types = TYPE_OF_CODE[self.codes[self.sentence[:, None], idx]]
        return np.where(valid, types, -1), valid

    def relevance(self, j: int) -> np.ndarray:
        """(M, j) True where x_{i-k+1} is an opener still unclosed after i characters."""
        idx, valid = self._lookback_index(j)
        closes_at = self.match[self.sentence[:, None], idx]
        return valid & (closes_at >= self.position[:, None])


def match_matrix(data: EncodedCorpus) -> np.ndarray:
    match = np.full(data.codes.shape, -1, dtype=np.int64)
    match[data.table.sentence, data.table.start] = data.table.pos
    return match


def sample_positions(data: EncodedCorpus, per_sentence: int = 10, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``per_sentence`` distinct prefix lengths per sentence, uniform over 1..n."""
    rng = np.random.default_rng([seed, 0x9B0])
    n = data.length
    k = min(per_sentence, n)
    pos = np.stack([np.sort(rng.choice(n, size=k, replace=False)) + 1 for _ in range(len(data))])
    sent = np.repeat(np.arange(len(data)), k)
    return sent, pos.ravel()


def extract_states(params: nn_core.ModelParams, data: EncodedCorpus, sentence, position,
                   batch: int = 1000) -> StateDataset:
    """Run the (frozen) encoder and collect [h_i, c_i] at the requested prefix lengths."""
    sentence = np.asarray(sentence, dtype=np.int64)
    position = np.asarray(position, dtype=np.int64)
    if sentence.shape != position.shape:
        raise ValueError("sentence and position arrays must align")
    n = data.length
    if len(position) and (position.min() < 1 or position.max() > n):
        raise ValueError(f"positions must lie in 1..{n}")
    if len(sentence) and (sentence.min() < 0 or sentence.max() >= len(data)):
        raise ValueError("sentence index out of range")
    H = params.hidden_units
    states = np.empty((len(position), 2 * H), dtype=params.dtype)
    order = np.argsort(sentence, kind="stable")
    uniq = np.unique(sentence)
    for s in range(0, len(uniq), batch):
        ids = uniq[s: s + batch]
        fw = nn_core.forward_batch(params, data.codes[ids])
        row = np.searchsorted(ids, sentence[order])
        sel = (row < len(ids)) & (ids[np.minimum(row, len(ids) - 1)] == sentence[order])
        rows = order[sel]
        b = row[sel]
        t = position[rows] - 1
        states[rows, :H] = fw.cache.hs[t, b]
        states[rows, H:] = fw.cache.cs[t, b]
    depth = np.cumsum(np.where(data.codes % 2 == 0, 1, -1), axis=1)
    return StateDataset(states, sentence, position, depth[sentence, position - 1], data.codes, match_matrix(data))


def split_by_sentence(ds: StateDataset, fraction: float = 0.5, seed: int = 0) -> tuple[StateDataset, StateDataset]:
    sids = np.unique(ds.sentence)
    rng = np.random.default_rng([seed, 0x5B1])
    fit_ids = rng.permutation(sids)[: int(round(fraction * len(sids)))]
    mask = np.isin(ds.sentence, fit_ids)
    return ds.subset(mask), ds.subset(~mask)


# ---------------------------------------------------------------------------
# shared Adam over plain dicts of arrays


class _Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class ProbeConfig:
    epochs: int = 3
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    positions_per_sentence: int = 10
    lookback: int = 16
    fit_fraction: float = 0.5


# ---------------------------------------------------------------------------
# scalar depth probe


@dataclass
class ScalarProbe:
    w: np.ndarray
    b: float

    def predict(self, states: np.ndarray) -> np.ndarray:
        return states @ self.w + self.b


@dataclass
class ScalarReport:
    count: int
    mae: float
    baseline_mae: float
    baseline_value: float
    by_depth: dict[int, dict] = field(default_factory=dict)  # depth -> count, mae, baseline_mae, mean_prediction
    baseline_equivalent: bool = False

    def rows(self, hidden_units: int) -> list[dict]:
        return [
            {"probe": "scalar-depth", "hidden_units": hidden_units, "depth": d, **v}
            for d, v in sorted(self.by_depth.items())
        ]


def scalar_report(probe: ScalarProbe, ds: StateDataset, baseline_value: float) -> ScalarReport:
    pred = probe.predict(ds.states)
    err = np.abs(pred - ds.depth)
    base = np.abs(baseline_value - ds.depth)
    by_depth = {}
    for d in np.unique(ds.depth):
        m = ds.depth == d
        by_depth[int(d)] = {
            "count": int(m.sum()),
            "mae": float(err[m].mean()),
            "baseline_mae": float(base[m].mean()),
            "mean_prediction": float(pred[m].mean()),
        }
    return ScalarReport(len(ds), float(err.mean()), float(base.mean()), float(baseline_value), by_depth)


def train_scalar_probe(fit: StateDataset, cfg: ProbeConfig = ProbeConfig(),
                       evaluate_on: StateDataset | None = None) -> tuple[ScalarProbe, ScalarReport]:
    """Linear map [h, c] -> depth fitted by squared error with Adam.

    Starts from the constant mean-depth predictor, so the baseline is the
    point training departs from.
    """
    if len(fit) == 0:
        raise ValueError("empty probe dataset")
    y = fit.depth.astype(np.float64)
    mean = float(y.mean())
    params = {"w": np.zeros(fit.states.shape[1]), "b": np.array(mean)}
    degenerate = np.unique(y).size == 1
    opt = _Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 0x5CA])
    if not degenerate:
        for _ in range(cfg.epochs):
            perm = rng.permutation(len(fit))
            for s in range(0, len(perm), cfg.batch_size):
                idx = perm[s: s + cfg.batch_size]
                X = fit.states[idx]
                r = X @ params["w"] + params["b"] - y[idx]
                grads = {"w": 2.0 * X.T @ r / len(idx), "b": np.array(2.0 * r.mean())}
                opt.step(params, grads)
    probe = ScalarProbe(params["w"], float(params["b"]))
    report = scalar_report(probe, fit if evaluate_on is None else evaluate_on, mean)
    report.baseline_equivalent = degenerate
    return probe, report


# ---------------------------------------------------------------------------
# sequence probe


@dataclass
class SequenceProbe:
    """LSTM decoder started from a linear map of the frozen state.

    Step 1 gets a zero input; step k > 1 gets the one-hot of the probe's own
    hard prediction at step k-1 (no gradient flows through that choice).
    """

    params: dict
    hidden_units: int
    lookback: int

    @classmethod
    def init(cls, state_dim: int, hidden_units: int, lookback: int, rng) -> "SequenceProbe":
        H = hidden_units

        def u(shape, fan_in):
            k = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-k, k, size=shape)

        p = {
            "A_h": u((state_dim, H), state_dim), "a_h": np.zeros(H),
            "A_c": u((state_dim, H), state_dim), "a_c": np.zeros(H),
            "Wx": u((4 * H, 2), 2), "Wh": u((4 * H, H), H), "b": np.zeros(4 * H),
            "v": u((H,), H), "v_b": np.array(0.0),
        }
        p["b"][H: 2 * H] = 1.0
        return cls(p, H, lookback)

    def _unroll(self, states):
        p = self.params
        B = len(states)
        h0 = states @ p["A_h"] + p["a_h"]
        c0 = states @ p["A_c"] + p["a_c"]
        X = np.zeros((self.lookback, B, 2))
        h, c = h0, c0
        for k in range(self.lookback):
            cache = nn_core.lstm_forward(p["Wx"], p["Wh"], p["b"], X[k: k + 1], h, c)
            h, c = cache.hs[0], cache.cs[0]
            if k + 1 < self.lookback:
                pred = (h @ p["v"] + p["v_b"] > 0.0).astype(np.int64)
                X[k + 1, np.arange(B), pred] = 1.0
        cache = nn_core.lstm_forward(p["Wx"], p["Wh"], p["b"], X, h0, c0)
        logits = cache.hs @ p["v"] + p["v_b"]  # (j, B)
        return cache, logits

    def predict(self, states: np.ndarray) -> np.ndarray:
        """(M, j) predicted bracket types."""
        out = []
        for s in range(0, len(states), 4096):
            _, logits = self._unroll(states[s: s + 4096])
            out.append((logits.T > 0.0).astype(np.int64))
        return np.concatenate(out) if out else np.zeros((0, self.lookback), dtype=np.int64)

    def loss_and_grads(self, states, targets, valid):
        """Summed cross-entropy over valid (state, k) pairs, averaged over states."""
        p = self.params
        cache, logits = self._unroll(states)
        y = np.where(valid, targets, 0).T.astype(np.float64)
        w = valid.T.astype(np.float64) / len(states)
        loss = float((nn_core.bce_from_logits(logits, y) * w).sum())
        dlogits = (sigmoid(logits) - y) * w
        grads = {
            "v": np.einsum("kb,kbh->h", dlogits, cache.hs),
            "v_b": np.array(dlogits.sum()),
        }
        dhs = dlogits[:, :, None] * p["v"]
        dWx, dWh, db, _, dh0, dc0 = nn_core.lstm_backward(p["Wx"], p["Wh"], cache, dhs)
        grads.update(Wx=dWx, Wh=dWh, b=db)
        grads["A_h"] = states.T @ dh0
        grads["a_h"] = dh0.sum(axis=0)
        grads["A_c"] = states.T @ dc0
        grads["a_c"] = dc0.sum(axis=0)
        return loss, grads


@dataclass
class SequenceReport:
    lookback: int
    skipped: int
    # per k (1-based): counts and errors split by relevance
    relevant_count: np.ndarray
    relevant_errors: np.ndarray
    irrelevant_count: np.ndarray
    irrelevant_errors: np.ndarray

    def error(self, k: int, relevant: bool) -> float:
        c = (self.relevant_count if relevant else self.irrelevant_count)[k - 1]
        e = (self.relevant_errors if relevant else self.irrelevant_errors)[k - 1]
        return float(e / c) if c else float("nan")

    def pooled_error(self, ks, relevant: bool) -> float:
        idx = np.asarray(list(ks)) - 1
        c = (self.relevant_count if relevant else self.irrelevant_count)[idx].sum()
        e = (self.relevant_errors if relevant else self.irrelevant_errors)[idx].sum()
        return float(e / c) if c else float("nan")

    def rows(self, hidden_units: int) -> list[dict]:
        out = []
        for k in range(1, self.lookback + 1):
            for rel in (True, False):
                c = int((self.relevant_count if rel else self.irrelevant_count)[k - 1])
                out.append({
                    "probe": "previous-characters", "hidden_units": hidden_units, "k": k,
                    "relevance": "relevant" if rel else "irrelevant", "count": c,
                    "error_rate": self.error(k, rel) if c else None,
                })
        return out


def sequence_report(probe: SequenceProbe, ds: StateDataset) -> SequenceReport:
    j = probe.lookback
    keep = ds.position >= j
    skipped = int((~keep).sum())
    ds = ds.subset(keep)
    targets, _ = ds.previous_types(j)
    wrong = probe.predict(ds.states) != targets
    rel = ds.relevance(j)
    return SequenceReport(
        lookback=j,
        skipped=skipped,
        relevant_count=rel.sum(axis=0),
        relevant_errors=(wrong & rel).sum(axis=0),
        irrelevant_count=(~rel).sum(axis=0),
        irrelevant_errors=(wrong & ~rel).sum(axis=0),
    )


def train_sequence_probe(fit: StateDataset, j: int, cfg: ProbeConfig = ProbeConfig(), hidden_units: int | None = None,
                         evaluate_on: StateDataset | None = None) -> tuple[SequenceProbe, SequenceReport]:
    """Fit the sequence probe on states whose prefix has at least ``j`` characters."""
    if j < 1:
        raise ValueError("lookback j must be >= 1")
    keep = fit.position >= j
    train_ds = fit.subset(keep)
    if len(train_ds) == 0:
        raise ValueError(f"no states with at least {j} characters")
    rng = np.random.default_rng([cfg.seed, 0x5E9])
    H = hidden_units or fit.states.shape[1] // 2
    probe = SequenceProbe.init(fit.states.shape[1], H, j, rng)
    targets, valid = train_ds.previous_types(j)
    opt = _Adam(probe.params, lr=cfg.lr)
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(train_ds))
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s: s + cfg.batch_size]
            _, grads = probe.loss_and_grads(train_ds.states[idx], targets[idx], valid[idx])
            opt.step(probe.params, grads)
    report = sequence_report(probe, fit if evaluate_on is None else evaluate_on)
    return probe, report
