"""Small deterministic transformer encoder with start/end span heads.

Parameters live in a flat float32 vector described by a named manifest, so
they can be exchanged, averaged, and checkpointed byte-for-byte. All math
runs in float64 internally and is free of dropout or any other source of
randomness: identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError, SpanDecodeError

PAD_ID = 0

_LN_EPS = 1e-5
_ATTN_MASK = -1e9
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_heads: int
    n_layers: int
    d_ff: int
    max_seq_len: int = 384
    max_answer_len: int = 30
    init_seed: int = 0

    def __post_init__(self):
        counts = {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "d_ff": self.d_ff,
            "max_seq_len": self.max_seq_len,
            "max_answer_len": self.max_answer_len,
        }
        for name, value in counts.items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.max_seq_len < 8:
            raise ConfigError(f"max_seq_len must be >= 8, got {self.max_seq_len}")
        if self.max_answer_len >= self.max_seq_len:
            raise ConfigError("max_answer_len must be smaller than max_seq_len")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "d_ff": self.d_ff,
            "max_seq_len": self.max_seq_len,
            "max_answer_len": self.max_answer_len,
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            return cls(**{k: int(d[k]) for k in (
                "vocab_size", "d_model", "n_heads", "n_layers", "d_ff",
                "max_seq_len", "max_answer_len", "init_seed",
            ) if k in d})
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad model config: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad model config JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("model config JSON must be an object")
        return cls.from_dict(d)


Manifest = tuple[tuple[str, tuple[int, ...]], ...]


class ParamVector:
    """Flat float32 parameter state plus the named shapes it packs.

    The array is frozen after construction; every operation returns a new
    vector. Finiteness is not enforced here so that updates arriving off
    the wire can be inspected and rejected instead of crashing the caller.
    """

    __slots__ = ("values", "manifest")

    def __init__(self, values, manifest: Manifest):
        arr = np.array(values, dtype=np.float32, copy=True, order="C").reshape(-1)
        manifest = tuple((str(name), tuple(int(d) for d in shape)) for name, shape in manifest)
        total = sum(int(np.prod(shape, dtype=np.int64)) for _, shape in manifest)
        if total != arr.size:
            raise ShapeError(
                f"manifest covers {total} values but vector holds {arr.size}"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "manifest", manifest)

    def __setattr__(self, name, value):
        raise AttributeError("ParamVector is immutable")

    def __len__(self) -> int:
        return self.values.size

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.values).all())

    def same_manifest(self, other: "ParamVector") -> bool:
        return self.manifest == other.manifest

    def views(self) -> dict[str, np.ndarray]:
        """Read-only views of each named tensor into the flat array."""
        out = {}
        offset = 0
        for name, shape in self.manifest:
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = self.values[offset:offset + size].reshape(shape)
            offset += size
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.manifest == other.manifest and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.manifest, self.values.tobytes()))


def manifest_for(config: ModelConfig) -> Manifest:
    """Tensor layout, in the order values are packed and initialized."""
    d, f = config.d_model, config.d_ff
    entries: list[tuple[str, tuple[int, ...]]] = [
        ("embed.token", (config.vocab_size, d)),
        ("embed.position", (config.max_seq_len, d)),
        ("embed.segment", (2, d)),
    ]
    for i in range(config.n_layers):
        p = f"layer{i}."
        entries += [
            (p + "ln1.scale", (d,)), (p + "ln1.offset", (d,)),
            (p + "attn.wq", (d, d)), (p + "attn.bq", (d,)),
            (p + "attn.wk", (d, d)), (p + "attn.bk", (d,)),
            (p + "attn.wv", (d, d)), (p + "attn.bv", (d,)),
            (p + "attn.wo", (d, d)), (p + "attn.bo", (d,)),
            (p + "ln2.scale", (d,)), (p + "ln2.offset", (d,)),
            (p + "ff.w1", (d, f)), (p + "ff.b1", (f,)),
            (p + "ff.w2", (f, d)), (p + "ff.b2", (d,)),
        ]
    entries += [
        ("final_norm.scale", (d,)), ("final_norm.offset", (d,)),
        ("span_head.start.w", (d,)), ("span_head.start.b", (1,)),
        ("span_head.end.w", (d,)), ("span_head.end.b", (1,)),
    ]
    return tuple(entries)


def init_params(config: ModelConfig) -> ParamVector:
    """Seeded initialization: uniform [-0.05, 0.05] except layer-norm
    scales (1) and offsets (0)."""
    rng = np.random.Generator(np.random.PCG64(config.init_seed))
    manifest = manifest_for(config)
    chunks = []
    for name, shape in manifest:
        size = int(np.prod(shape, dtype=np.int64))
        if name.endswith(".scale"):
            chunks.append(np.ones(size, dtype=np.float32))
        elif name.endswith(".offset"):
            chunks.append(np.zeros(size, dtype=np.float32))
        else:
            chunks.append(rng.uniform(-0.05, 0.05, size).astype(np.float32))
    return ParamVector(np.concatenate(chunks), manifest)


@dataclass(frozen=True)
class Batch:
    token_ids: np.ndarray   # (B, L) int
    segment_ids: np.ndarray  # (B, L) in {0, 1}
    pad_mask: np.ndarray    # (B, L) in {0, 1}; 0 marks padding
    start_pos: np.ndarray   # (B,)
    end_pos: np.ndarray     # (B,)

    def __post_init__(self):
        for field in ("token_ids", "segment_ids", "pad_mask", "start_pos", "end_pos"):
            object.__setattr__(self, field, np.asarray(getattr(self, field), dtype=np.int64))
        b, l = self.token_ids.shape
        if self.segment_ids.shape != (b, l) or self.pad_mask.shape != (b, l):
            raise DataError("batch grids must share the same (B, L) shape")
        if self.start_pos.shape != (b,) or self.end_pos.shape != (b,):
            raise DataError("start_pos/end_pos must have one entry per row")
        if not np.isin(self.segment_ids, (0, 1)).all() or not np.isin(self.pad_mask, (0, 1)).all():
            raise DataError("segment_ids and pad_mask must be 0/1 grids")
        if ((self.start_pos < 0) | (self.start_pos > self.end_pos) | (self.end_pos >= l)).any():
            raise DataError("need 0 <= start_pos <= end_pos < L for every row")
        if (self.token_ids[self.pad_mask == 0] != PAD_ID).any():
            raise DataError("padded slots must hold the PAD token")

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.token_ids.shape[1]


@dataclass(frozen=True)
class SpanLogits:
    start_logits: np.ndarray  # (B, L)
    end_logits: np.ndarray    # (B, L)

    def __post_init__(self):
        s = np.asarray(self.start_logits, dtype=np.float64)
        e = np.asarray(self.end_logits, dtype=np.float64)
        if s.shape != e.shape or s.ndim != 2:
            raise ShapeError("start/end logits must be equal-shaped (B, L) grids")
        if not (np.isfinite(s).all() and np.isfinite(e).all()):
            raise DataError("logits contain non-finite values")
        object.__setattr__(self, "start_logits", s)
        object.__setattr__(self, "end_logits", e)


def _check_batch_against_config(config: ModelConfig, batch: Batch) -> None:
    if batch.seq_len > config.max_seq_len:
        raise ShapeError(
            f"batch length {batch.seq_len} exceeds max_seq_len {config.max_seq_len}"
        )
    if (batch.token_ids < 0).any() or (batch.token_ids >= config.vocab_size).any():
        raise DataError("token id out of vocabulary range")


def _check_params_against_config(params: ParamVector, config: ModelConfig) -> None:
    if params.manifest != manifest_for(config):
        raise ShapeError("parameter manifest does not match the model config")


def _layer_norm(x, scale, offset):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * r
    return xhat * scale + offset, xhat, r


def _layer_norm_backward(dy, xhat, r, scale):
    dscale = (dy * xhat).sum(axis=(0, 1))
    doffset = dy.sum(axis=(0, 1))
    dxhat = dy * scale
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = r * (dxhat - m1 - xhat * m2)
    return dx, dscale, doffset


def _gelu(x):
    u = _GELU_C * (x + _GELU_A * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(u)), u


def _gelu_backward(dy, x, u):
    t = np.tanh(u)
    du_dx = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du_dx)


def _split_heads(x, n_heads):
    b, l, d = x.shape
    return x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dh)


def _forward_pass(params: ParamVector, config: ModelConfig, batch: Batch, keep_cache: bool):
    _check_params_against_config(params, config)
    _check_batch_against_config(config, batch)

    w = {name: view.astype(np.float64) for name, view in params.views().items()}
    ids, segs = batch.token_ids, batch.segment_ids
    l = batch.seq_len

    x = w["embed.token"][ids] + w["embed.position"][:l] + w["embed.segment"][segs]

    # Additive key mask: padded positions never receive attention.
    key_mask = np.where(batch.pad_mask[:, None, None, :] == 1, 0.0, _ATTN_MASK)
    scale = 1.0 / math.sqrt(config.d_model // config.n_heads)

    layers = []
    for i in range(config.n_layers):
        p = f"layer{i}."
        h1, xhat1, r1 = _layer_norm(x, w[p + "ln1.scale"], w[p + "ln1.offset"])
        q = _split_heads(h1 @ w[p + "attn.wq"] + w[p + "attn.bq"], config.n_heads)
        k = _split_heads(h1 @ w[p + "attn.wk"] + w[p + "attn.bk"], config.n_heads)
        v = _split_heads(h1 @ w[p + "attn.wv"] + w[p + "attn.bv"], config.n_heads)
        scores = q @ k.transpose(0, 1, 3, 2) * scale + key_mask
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(probs @ v)
        attn_out = ctx @ w[p + "attn.wo"] + w[p + "attn.bo"]
        x_mid = x + attn_out
        h2, xhat2, r2 = _layer_norm(x_mid, w[p + "ln2.scale"], w[p + "ln2.offset"])
        a = h2 @ w[p + "ff.w1"] + w[p + "ff.b1"]
        g, u = _gelu(a)
        x_out = x_mid + g @ w[p + "ff.w2"] + w[p + "ff.b2"]
        if keep_cache:
            layers.append({
                "x_in": x, "h1": h1, "xhat1": xhat1, "r1": r1,
                "q": q, "k": k, "v": v, "probs": probs, "ctx": ctx,
                "x_mid": x_mid, "h2": h2, "xhat2": xhat2, "r2": r2,
                "a": a, "g": g, "u": u,
            })
        x = x_out

    xf, xhatf, rf = _layer_norm(x, w["final_norm.scale"], w["final_norm.offset"])
    start = xf @ w["span_head.start.w"] + w["span_head.start.b"][0]
    end = xf @ w["span_head.end.w"] + w["span_head.end.b"][0]
    logits = SpanLogits(start, end)
    cache = None
    if keep_cache:
        cache = {"w": w, "layers": layers, "xf": xf, "xhatf": xhatf, "rf": rf, "scale": scale}
    return logits, cache


def forward(params: ParamVector, config: ModelConfig, batch: Batch) -> SpanLogits:
    """Run the encoder and span heads over a batch."""
    logits, _ = _forward_pass(params, config, batch, keep_cache=False)
    return logits


def _masked_log_softmax(logits, pad_mask):
    masked = np.where(pad_mask == 1, logits, -np.inf)
    m = masked.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(masked - m).sum(axis=-1, keepdims=True))
    return masked - lse  # -inf stays -inf at pads


def _span_cross_entropy(logits: SpanLogits, batch: Batch):
    """Mean over rows of (start CE + end CE) / 2, softmax over non-pad slots.

    Returns the scalar loss and d(loss)/d(logits) for backprop.
    """
    if logits.start_logits.shape != batch.token_ids.shape:
        raise ShapeError("logits shape does not match the batch")
    rows = np.arange(batch.size)
    tgt_mask = batch.pad_mask[rows, batch.start_pos] & batch.pad_mask[rows, batch.end_pos]
    if (tgt_mask == 0).any():
        raise DataError("target span position falls on a pad slot")

    total = 0.0
    dlogits = []
    for grid, targets in ((logits.start_logits, batch.start_pos),
                          (logits.end_logits, batch.end_pos)):
        logp = _masked_log_softmax(grid, batch.pad_mask)
        total += -logp[rows, targets].sum()
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        dlogits.append(p / (2.0 * batch.size))
    return total / (2.0 * batch.size), dlogits[0], dlogits[1]


def loss(logits: SpanLogits, batch: Batch) -> float:
    value, _, _ = _span_cross_entropy(logits, batch)
    return float(value)


def grad(params: ParamVector, config: ModelConfig, batch: Batch) -> ParamVector:
    """Analytic gradient of ``loss(forward(...))`` w.r.t. every parameter."""
    logits, cache = _forward_pass(params, config, batch, keep_cache=True)
    _, dstart, dend = _span_cross_entropy(logits, batch)

    w = cache["w"]
    grads = {name: np.zeros_like(arr) for name, arr in w.items()}

    xf = cache["xf"]
    grads["span_head.start.w"] = np.einsum("bl,bld->d", dstart, xf)
    grads["span_head.start.b"] = np.array([dstart.sum()])
    grads["span_head.end.w"] = np.einsum("bl,bld->d", dend, xf)
    grads["span_head.end.b"] = np.array([dend.sum()])
    dxf = dstart[..., None] * w["span_head.start.w"] + dend[..., None] * w["span_head.end.w"]
    dx, gs, go = _layer_norm_backward(dxf, cache["xhatf"], cache["rf"], w["final_norm.scale"])
    grads["final_norm.scale"] = gs
    grads["final_norm.offset"] = go

    n_heads, scale = config.n_heads, cache["scale"]
    for i in reversed(range(config.n_layers)):
        p = f"layer{i}."
        c = cache["layers"][i]

        # feed-forward block: x_out = x_mid + gelu(h2 W1 + b1) W2 + b2
        dg = dx @ w[p + "ff.w2"].T
        grads[p + "ff.w2"] = np.einsum("blf,bld->fd", c["g"], dx)
        grads[p + "ff.b2"] = dx.sum(axis=(0, 1))
        da = _gelu_backward(dg, c["a"], c["u"])
        grads[p + "ff.w1"] = np.einsum("bld,blf->df", c["h2"], da)
        grads[p + "ff.b1"] = da.sum(axis=(0, 1))
        dh2 = da @ w[p + "ff.w1"].T
        dx_mid, gs, go = _layer_norm_backward(dh2, c["xhat2"], c["r2"], w[p + "ln2.scale"])
        grads[p + "ln2.scale"] = gs
        grads[p + "ln2.offset"] = go
        dx_mid = dx_mid + dx  # residual

        # attention block: x_mid = x_in + (merge(P @ v) Wo + bo)
        dattn = dx_mid
        grads[p + "attn.wo"] = np.einsum("bld,ble->de", c["ctx"], dattn)
        grads[p + "attn.bo"] = dattn.sum(axis=(0, 1))
        dctx = _split_heads(dattn @ w[p + "attn.wo"].T, n_heads)
        dprobs = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = c["probs"].transpose(0, 1, 3, 2) @ dctx
        dscores = c["probs"] * (dprobs - (dprobs * c["probs"]).sum(axis=-1, keepdims=True))
        dq = dscores @ c["k"] * scale
        dk = dscores.transpose(0, 1, 3, 2) @ c["q"] * scale
        dh1 = np.zeros_like(c["h1"])
        for name, dmat in (("wq", dq), ("wk", dk), ("wv", dv)):
            dflat = _merge_heads(dmat)
            grads[p + "attn." + name] = np.einsum("bld,ble->de", c["h1"], dflat)
            grads[p + "attn.b" + name[1]] = dflat.sum(axis=(0, 1))
            dh1 += dflat @ w[p + "attn." + name].T
        dx_in, gs, go = _layer_norm_backward(dh1, c["xhat1"], c["r1"], w[p + "ln1.scale"])
        grads[p + "ln1.scale"] = gs
        grads[p + "ln1.offset"] = go
        dx = dx_in + dx_mid  # residual

    ids, segs = batch.token_ids, batch.segment_ids
    np.add.at(grads["embed.token"], ids.reshape(-1), dx.reshape(-1, config.d_model))
    grads["embed.position"][:batch.seq_len] = dx.sum(axis=0)
    np.add.at(grads["embed.segment"], segs.reshape(-1), dx.reshape(-1, config.d_model))

    flat = np.concatenate([grads[name].reshape(-1) for name, _ in params.manifest])
    return ParamVector(flat.astype(np.float32), params.manifest)


def sgd_step(params: ParamVector, gradient: ParamVector, lr: float) -> ParamVector:
    """One plain gradient-descent step, element-wise params - lr * grad."""
    if lr < 0:
        raise ConfigError(f"learning rate must be nonnegative, got {lr}")
    if not params.same_manifest(gradient):
        raise ShapeError("params and gradient manifests differ")
    return ParamVector(params.values - np.float32(lr) * gradient.values, params.manifest)


def predict_span(start_logits, end_logits, effective_len: int, max_answer_len: int,
                 first_index: int = 0) -> tuple[int, int, float]:
    """Best (start, end) with start <= end <= start + max_answer_len, both in
    [first_index, effective_len). Ties go to the smallest start, then end."""
    start_logits = np.asarray(start_logits, dtype=np.float64).reshape(-1)
    end_logits = np.asarray(end_logits, dtype=np.float64).reshape(-1)
    lo, hi = int(first_index), int(min(effective_len, start_logits.size))
    if hi <= lo or lo < 0:
        raise SpanDecodeError(f"no candidate positions in [{first_index}, {effective_len})")
    n = hi - lo
    scores = start_logits[lo:hi, None] + end_logits[None, lo:hi]
    s_idx = np.arange(n)
    feasible = (s_idx[:, None] <= s_idx[None, :]) & (s_idx[None, :] <= s_idx[:, None] + max_answer_len)
    scores = np.where(feasible, scores, -np.inf)
    flat = int(np.argmax(scores))  # first occurrence wins: smallest start, then end
    s, e = divmod(flat, n)
    return lo + s, lo + e, float(scores[s, e])
