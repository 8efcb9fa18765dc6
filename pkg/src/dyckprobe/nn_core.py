"""Embedding + LSTM encoder and a one-unit logistic decoder, in plain numpy.

Gate order everywhere is (input, forget, candidate, output). The stacked
kernels ``lstm_forward`` / ``lstm_backward`` work on (time, batch, feature)
arrays; the single-instance functions (``lstm_step``, ``encode``, ``decode``,
``backward``) are thin wrappers over them.

Label convention: y = 1 means the closing bracket is curly, y = 0 square.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

ALPHABET = "[]{}"
CODE = {ch: i for i, ch in enumerate(ALPHABET)}
EMBED_DIM = 5
GATES = ("i", "f", "c", "o")
PARAM_ORDER = (
    "embedding",
    "W_ix", "W_ih", "W_fx", "W_fh", "W_cx", "W_ch", "W_ox", "W_oh",
    "b_i", "b_f", "b_c", "b_o",
    "dec_w", "dec_b",
)
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


def sigmoid(x):
    # tanh form avoids overflow warnings for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.logaddexp(0.0, x)


def encode_chars(chars: str) -> np.ndarray:
    try:
        return np.fromiter((CODE[ch] for ch in chars), dtype=np.int64, count=len(chars))
    except KeyError as exc:
        raise ValueError(f"not a bracket character: {exc.args[0]!r}") from None


def encode_corpus(sentences) -> np.ndarray:
    """(N, n) int array of alphabet codes; all sentences must share one length."""
    lengths = {len(s) for s in sentences}
    if len(lengths) != 1:
        raise ValueError(f"sentences must have equal length, got {sorted(lengths)}")
    buf = "".join(sentences).encode("ascii")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(len(sentences), -1)
    lut = np.full(256, -1, dtype=np.int64)
    for ch, i in CODE.items():
        lut[ord(ch)] = i
    codes = lut[raw]
    if (codes < 0).any():
        raise ValueError("corpus contains non-bracket characters")
    return codes


@dataclass
class ModelParams:
    embedding: np.ndarray
    W_ix: np.ndarray
    W_ih: np.ndarray
    W_fx: np.ndarray
    W_fh: np.ndarray
    W_cx: np.ndarray
    W_ch: np.ndarray
    W_ox: np.ndarray
    W_oh: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray
    dec_w: np.ndarray
    dec_b: np.ndarray

    @property
    def hidden_units(self) -> int:
        return self.b_i.shape[0]

    @property
    def dtype(self):
        return self.W_ix.dtype

    @classmethod
    def zeros(cls, hidden_units: int, dtype=np.float64) -> "ModelParams":
        return cls(**{k: np.zeros(s, dtype=dtype) for k, s in param_shapes(hidden_units).items()})

    @classmethod
    def init(cls, hidden_units: int, rng: np.random.Generator, dtype=np.float64,
             forget_bias: float = 1.0) -> "ModelParams":
        """U(-k, k) with k = 1/sqrt(fan-in); forget bias starts at ``forget_bias``."""
        shapes = param_shapes(hidden_units)
        arrays = {}
        for name in PARAM_ORDER:
            shape = shapes[name]
            if name.startswith("b_") or name == "dec_b":
                arrays[name] = np.zeros(shape, dtype=dtype)
                continue
            fan_in = 1 if name == "embedding" else shape[-1]
            k = 1.0 / np.sqrt(fan_in)
            arrays[name] = rng.uniform(-k, k, size=shape).astype(dtype)
        arrays["b_f"][:] = forget_bias
        return cls(**arrays)

    def items(self):
        return ((name, getattr(self, name)) for name in PARAM_ORDER)

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(**{k: np.zeros_like(v) for k, v in self.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(**{k: v.astype(dtype) for k, v in self.items()})

    def check(self):
        expected = param_shapes(self.hidden_units)
        for name, arr in self.items():
            if arr.shape != expected[name]:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {expected[name]}")

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for _, v in self.items())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for _, v in self.items()])

    def stacked(self):
        """(W_x (4H, 5), W_h (4H, H), b (4H,)) in gate order i, f, c, o."""
        Wx = np.concatenate([self.W_ix, self.W_fx, self.W_cx, self.W_ox], axis=0)
        Wh = np.concatenate([self.W_ih, self.W_fh, self.W_ch, self.W_oh], axis=0)
        b = np.concatenate([self.b_i, self.b_f, self.b_c, self.b_o])
        return Wx, Wh, b

    def set_stacked_grads(self, dWx, dWh, db):
        """Scatter stacked gradients back into the named gate blocks (in place)."""
        H = self.hidden_units
        for g, gate in enumerate(GATES):
            sl = slice(g * H, (g + 1) * H)
            getattr(self, f"W_{gate}x")[...] = dWx[sl]
            getattr(self, f"W_{gate}h")[...] = dWh[sl]
            getattr(self, f"b_{gate}")[...] = db[sl]


def param_shapes(H: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"embedding": (len(ALPHABET), EMBED_DIM)}
    for gate in GATES:
        shapes[f"W_{gate}x"] = (H, EMBED_DIM)
        shapes[f"W_{gate}h"] = (H, H)
    for gate in GATES:
        shapes[f"b_{gate}"] = (H,)
    shapes["dec_w"] = (H,)
    shapes["dec_b"] = ()
    return shapes


@dataclass
class EncoderState:
    h: np.ndarray
    c: np.ndarray

    def concat(self) -> np.ndarray:
        return np.concatenate([self.h, self.c], axis=-1)


# ---------------------------------------------------------------------------
# stacked kernels


@dataclass
class LSTMCache:
    X: np.ndarray
    h0: np.ndarray
    c0: np.ndarray
    gates: np.ndarray  # (T, B, 4H) post-activation
    hs: np.ndarray  # (T, B, H)
    cs: np.ndarray  # (T, B, H)
    tanh_cs: np.ndarray


@njit(cache=True)
def _backward_loop(Wh, gates, cs, tanh_cs, c0, dhs, dh_next, dc_next, dA):
    T, B, H = cs.shape
    for t in range(T - 1, -1, -1):
        for n in range(B):
            for k in range(H):
                i = gates[t, n, k]
                f = gates[t, n, H + k]
                g = gates[t, n, 2 * H + k]
                o = gates[t, n, 3 * H + k]
                c_prev = cs[t - 1, n, k] if t > 0 else c0[n, k]
                tc = tanh_cs[t, n, k]
                dh = dhs[t, n, k] + dh_next[n, k]
                dc = dc_next[n, k] + dh * o * (1.0 - tc * tc)
                dA[t, n, k] = dc * g * i * (1.0 - i)
                dA[t, n, H + k] = dc * c_prev * f * (1.0 - f)
                dA[t, n, 2 * H + k] = dc * i * (1.0 - g * g)
                dA[t, n, 3 * H + k] = dh * tc * o * (1.0 - o)
                dc_next[n, k] = dc * f
        dh_next[:, :] = np.dot(dA[t], Wh)
    return dh_next, dc_next


def lstm_forward(Wx, Wh, b, X, h0, c0) -> LSTMCache:
    """Unroll the cell over X of shape (T, B, D) from (h0, c0)."""
    T, B, _ = X.shape
    H = Wh.shape[1]
    if Wx.shape != (4 * H, X.shape[2]) or Wh.shape != (4 * H, H) or b.shape != (4 * H,):
        raise ShapeError(f"weights {Wx.shape}, {Wh.shape}, {b.shape} do not fit input {X.shape}")
    if h0.shape != (B, H) or c0.shape != (B, H):
        raise ShapeError(f"initial state {h0.shape}/{c0.shape} does not match (B={B}, H={H})")
    dtype = np.result_type(Wx, Wh, b, X, h0, c0)
    pre_x = X @ Wx.T + b
    gates = np.empty((T, B, 4 * H), dtype=dtype)
    hs = np.empty((T, B, H), dtype=dtype)
    cs = np.empty((T, B, H), dtype=dtype)
    tanh_cs = np.empty((T, B, H), dtype=dtype)
    # sigmoid(x) = (1 + tanh(x / 2)) / 2, so one tanh call covers all four gates
    scale = np.full(4 * H, 0.5, dtype=dtype)
    scale[2 * H: 3 * H] = 1.0
    WhT = Wh.T.astype(dtype)
    h, c = h0.astype(dtype), c0.astype(dtype)
    for t in range(T):
        g = gates[t]
        a = h @ WhT
        a += pre_x[t]
        a *= scale
        np.tanh(a, out=g)
        sig = g[:, : 2 * H]
        sig *= 0.5
        sig += 0.5
        sig = g[:, 3 * H:]
        sig *= 0.5
        sig += 0.5
        c = g[:, H: 2 * H] * c
        c += g[:, :H] * g[:, 2 * H: 3 * H]
        cs[t] = c
        np.tanh(c, out=tanh_cs[t])
        h = np.multiply(g[:, 3 * H:], tanh_cs[t], out=hs[t])
    return LSTMCache(X, h0, c0, gates, hs, cs, tanh_cs)


def lstm_backward(Wx, Wh, cache: LSTMCache, dhs, dh_last=None, dc_last=None):
    """Backpropagate through the unrolled cell.

    ``dhs`` (T, B, H) holds the loss gradient arriving at each h_t from
    outside the recurrence; ``dh_last``/``dc_last`` optionally add gradient at
    the final state. Returns (dWx, dWh, db, dX, dh0, dc0).
    """
    T, B, H = cache.hs.shape
    dtype = cache.gates.dtype
    dA = np.empty_like(cache.gates)
    dh_next = np.zeros((B, H), dtype=dtype) if dh_last is None else np.array(dh_last, dtype=dtype)
    dc_next = np.zeros((B, H), dtype=dtype) if dc_last is None else np.array(dc_last, dtype=dtype)
    _backward_loop(np.ascontiguousarray(Wh, dtype=dtype), cache.gates, cache.cs, cache.tanh_cs,
                   np.ascontiguousarray(cache.c0, dtype=dtype), np.ascontiguousarray(dhs, dtype=dtype),
                   dh_next, dc_next, dA)
    dA2 = dA.reshape(T * B, 4 * H)
    h_prev = np.concatenate([cache.h0[None], cache.hs[:-1]], axis=0).reshape(T * B, H)
    dWx = dA2.T @ cache.X.reshape(T * B, -1)
    dWh = dA2.T @ h_prev
    db = dA2.sum(axis=0)
    dX = dA @ Wx
    return dWx, dWh, db, dX, dh_next, dc_next


# ---------------------------------------------------------------------------
# encoder / decoder over batches of equal-length code sequences


@dataclass
class BatchForward:
    codes: np.ndarray
    cache: LSTMCache
    logits: np.ndarray  # (T, B) decoder logit after reading t+1 characters


def forward_batch(params: ModelParams, codes: np.ndarray) -> BatchForward:
    """Encode (B, T) code rows; logits[t] reads the state after t+1 characters."""
    B, T = codes.shape
    H = params.hidden_units
    Wx, Wh, b = params.stacked()
    X = params.embedding[codes.T]  # (T, B, 5)
    z = np.zeros((B, H), dtype=params.dtype)
    cache = lstm_forward(Wx, Wh, b, X, z, z)
    logits = cache.hs @ params.dec_w + params.dec_b
    return BatchForward(codes, cache, logits)


def backward_batch(params: ModelParams, fw: BatchForward, dlogits: np.ndarray) -> ModelParams:
    """Gradient of a loss given its derivative w.r.t. every logit (T, B)."""
    grads = params.zeros_like()
    hs = fw.cache.hs
    grads.dec_w[...] = np.einsum("tb,tbh->h", dlogits, hs)
    grads.dec_b[...] = dlogits.sum()
    dhs = dlogits[:, :, None] * params.dec_w
    Wx, Wh, _ = params.stacked()
    dWx, dWh, db, dX, _, _ = lstm_backward(Wx, Wh, fw.cache, dhs)
    grads.set_stacked_grads(dWx, dWh, db)
    onehot = fw.codes.T.reshape(-1)[:, None] == np.arange(len(ALPHABET))
    grads.embedding[...] = onehot.T.astype(dX.dtype) @ dX.reshape(-1, EMBED_DIM)
    return grads


def bce_from_logits(logits, y):
    """-[y log p + (1-y) log(1-p)] with p = sigmoid(logits), overflow-safe."""
    return softplus(logits) - y * logits


# ---------------------------------------------------------------------------
# single-instance API


def lstm_step(params: ModelParams, x: np.ndarray, state: EncoderState) -> EncoderState:
    x = np.asarray(x, dtype=params.dtype)
    if x.shape != (EMBED_DIM,):
        raise ShapeError(f"input must have shape ({EMBED_DIM},), got {x.shape}")
    H = params.hidden_units
    if state.h.shape != (H,) or state.c.shape != (H,):
        raise ShapeError(f"state must have {H} units")
    Wx, Wh, b = params.stacked()
    cache = lstm_forward(Wx, Wh, b, x[None, None, :], state.h[None], state.c[None])
    return EncoderState(cache.hs[0, 0].copy(), cache.cs[0, 0].copy())


def zero_state(params: ModelParams) -> EncoderState:
    H = params.hidden_units
    return EncoderState(np.zeros(H, dtype=params.dtype), np.zeros(H, dtype=params.dtype))


def encode(params: ModelParams, prefix: str) -> EncoderState:
    if not prefix:
        raise ValueError("cannot encode an empty prefix")
    fw = forward_batch(params, encode_chars(prefix)[None, :])
    return EncoderState(fw.cache.hs[-1, 0].copy(), fw.cache.cs[-1, 0].copy())


def decode(params: ModelParams, state: EncoderState) -> float:
    """P(next closing bracket is curly)."""
    return float(sigmoid(state.h @ params.dec_w + params.dec_b))


def loss(params: ModelParams, prefix: str, target: int) -> float:
    state = encode(params, prefix)
    z = state.h @ params.dec_w + params.dec_b
    return float(bce_from_logits(z, float(target)))


def backward(params: ModelParams, prefix: str, target: int) -> ModelParams:
    """d(binary cross-entropy)/d(params) for predicting ``target`` after ``prefix``."""
    if not prefix:
        raise ValueError("cannot differentiate through an empty prefix")
    fw = forward_batch(params, encode_chars(prefix)[None, :])
    dlogits = np.zeros_like(fw.logits)
    dlogits[-1, 0] = sigmoid(fw.logits[-1, 0]) - target
    return backward_batch(params, fw, dlogits)


# ---------------------------------------------------------------------------
# checkpoints


def _checksum(params: ModelParams) -> str:
    h = hashlib.sha256()
    for name, arr in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def save_checkpoint(params: ModelParams, path: str | Path, seed: int | None = None, extra: dict | None = None):
    """``.npz`` with one array per parameter plus a JSON header array ``__header__``."""
    header = {
        "version": CHECKPOINT_VERSION,
        "hidden_units": params.hidden_units,
        "embed_dim": EMBED_DIM,
        "alphabet": ALPHABET,
        "gate_order": list(GATES),
        "layout": list(PARAM_ORDER),
        "shapes": {k: list(v.shape) for k, v in params.items()},
        "precision": str(params.dtype),
        "label_convention": "y=1 curly, y=0 square",
        "decoder_input": "h",
        "seed": seed,
        "sha256": _checksum(params),
    }
    if extra:
        header["extra"] = extra
    arrays = {"__header__": np.array(json.dumps(header, sort_keys=True))}
    arrays.update(params.items())
    # hand-built .npz: fixed member timestamps keep the file byte-reproducible
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            # ascontiguousarray would promote 0-d arrays (header, dec_b) to 1-d
            np.lib.format.write_array(buf, np.asarray(arr, order="C"), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        missing = [k for k in PARAM_ORDER if k not in data.files]
        if missing:
            raise ValueError(f"{path}: missing arrays {missing}")
        params = ModelParams(**{k: data[k].copy() for k in PARAM_ORDER})
    try:
        params.check()
    except ShapeError as exc:
        raise ValueError(f"{path}: {exc}") from None
    if params.hidden_units != header["hidden_units"]:
        raise ValueError(f"{path}: header says H={header['hidden_units']}, arrays say {params.hidden_units}")
    if str(params.dtype) != header["precision"]:
        raise ValueError(f"{path}: precision tag {header['precision']} does not match {params.dtype}")
    if _checksum(params) != header["sha256"]:
        raise ValueError(f"{path}: checksum mismatch")
    return params, header
