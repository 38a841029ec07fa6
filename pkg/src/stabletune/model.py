"""A BERT-shaped post-LN transformer encoder, small enough to train on a laptop.

Parameter names are flat dotted strings::

    embeddings.token            [vocab, d]
    embeddings.position         [max_len, d]
    embeddings.ln.{gain,bias}   [d]
    blocks.<i>.attn.{wq,bq,wk,bk,wv,bv,wo,bo}
    blocks.<i>.ln1.{gain,bias}
    blocks.<i>.ffn.{w1,b1,w2,b2}
    blocks.<i>.ln2.{gain,bias}
    pooler.{weight,bias}        [d, d], [d]
    head.{weight,bias}          [d, C], [C]

Blocks are numbered 1..N from the bottom, so block N is the topmost.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
NUM_SPECIAL = 5

BLOCK_ORDER = (
    "attn.wq",
    "attn.bq",
    "attn.wk",
    "attn.bk",
    "attn.wv",
    "attn.bv",
    "attn.wo",
    "attn.bo",
    "ln1.gain",
    "ln1.bias",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
    "ln2.gain",
    "ln2.bias",
)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    max_seq_len: int = 32
    hidden_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 4
    ffn_dim: int = 256
    dropout_p: float = 0.1
    num_classes: int = 2
    init_std: float = 0.02
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"activation must be 'relu' or 'gelu', got {self.activation!r}")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.init_std <= 0:
            raise ValueError("init_std must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.vocab_size <= NUM_SPECIAL:
            raise ValueError(f"vocab_size must exceed the {NUM_SPECIAL} reserved ids")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def is_regression(self) -> bool:
        return self.num_classes == 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ReinitSpec:
    reinit_pooler: bool = False
    num_blocks: int = 0

    def __post_init__(self):
        if self.num_blocks < 0:
            raise ValueError("number of re-initialised blocks must be >= 0")


_BIAS_LEAVES = frozenset({"bias", "bq", "bk", "bv", "bo", "b1", "b2"})


def block_key(block: int, name: str) -> str:
    return f"blocks.{block}.{name}"


def param_block(name: str) -> int | None:
    """Block index of a parameter name, or None outside the block stack."""
    if name.startswith("blocks."):
        return int(name.split(".", 2)[1])
    return None


def param_component(name: str) -> str:
    return name.split(".", 1)[0]


def is_norm(name: str) -> bool:
    return ".ln" in name or name.startswith("embeddings.ln")


def is_bias(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in _BIAS_LEAVES


def is_matrix(name: str) -> bool:
    return not (is_norm(name) or is_bias(name))


class ModelParams(Mapping[str, np.ndarray]):
    """Ordered, named parameter tree.  Copies are independent."""

    def __init__(self, tensors: Mapping[str, np.ndarray], num_blocks: int):
        self._t = dict(tensors)
        self.num_blocks = num_blocks

    def __getitem__(self, name: str) -> np.ndarray:
        return self._t[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def get_param(self, component: str, name: str, block: int | None = None) -> np.ndarray:
        if block is None:
            return self._t[f"{component}.{name}"]
        return self._t[block_key(block, name)]

    def block_names(self, block: int) -> list[str]:
        return [block_key(block, n) for n in BLOCK_ORDER]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self._t.items()}, self.num_blocks)

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ModelParams":
        """New tree with ``updates`` swapped in (other arrays are shared)."""
        merged = dict(self._t)
        for k, v in updates.items():
            if k not in merged:
                raise KeyError(k)
            merged[k] = v
        return ModelParams(merged, self.num_blocks)

    def without(self, component: str) -> "ModelParams":
        return ModelParams(
            {k: v for k, v in self._t.items() if param_component(k) != component},
            self.num_blocks,
        )

    def num_scalars(self) -> int:
        return sum(v.size for v in self._t.values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self._t):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self._t[k], dtype="<f8").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# initialisation


def _block_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.hidden_dim, cfg.ffn_dim
    return {
        "attn.wq": (d, d),
        "attn.bq": (d,),
        "attn.wk": (d, d),
        "attn.bk": (d,),
        "attn.wv": (d, d),
        "attn.bv": (d,),
        "attn.wo": (d, d),
        "attn.bo": (d,),
        "ln1.gain": (d,),
        "ln1.bias": (d,),
        "ffn.w1": (d, f),
        "ffn.b1": (f,),
        "ffn.w2": (f, d),
        "ffn.b2": (d,),
        "ln2.gain": (d,),
        "ln2.bias": (d,),
    }


def param_shapes(cfg: ModelConfig, include_head: bool = True) -> dict[str, tuple[int, ...]]:
    d = cfg.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embeddings.token": (cfg.vocab_size, d),
        "embeddings.position": (cfg.max_seq_len, d),
        "embeddings.ln.gain": (d,),
        "embeddings.ln.bias": (d,),
    }
    for b in range(1, cfg.num_blocks + 1):
        for name, shape in _block_shapes(cfg).items():
            shapes[block_key(b, name)] = shape
    shapes["pooler.weight"] = (d, d)
    shapes["pooler.bias"] = (d,)
    if include_head:
        shapes.update(head_shapes(cfg))
    return shapes


def head_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {"head.weight": (cfg.hidden_dim, cfg.num_classes), "head.bias": (cfg.num_classes,)}


def _draw(name: str, shape: tuple[int, ...], std: float, rng) -> np.ndarray:
    if name.endswith("gain"):
        return np.ones(shape)
    if is_norm(name) or is_bias(name):
        return np.zeros(shape)
    return rng.normal(0.0, std, size=shape)


def init_params(cfg: ModelConfig, rng, include_head: bool = True) -> ModelParams:
    """Weights ~ N(0, init_std^2), biases 0, layer-norm gain 1 / bias 0."""
    tensors = {
        name: _draw(name, shape, cfg.init_std, rng)
        for name, shape in param_shapes(cfg, include_head).items()
    }
    return ModelParams(tensors, cfg.num_blocks)


def init_head(cfg: ModelConfig, rng, zero: bool = False) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in head_shapes(cfg).items():
        out[name] = np.zeros(shape) if zero else _draw(name, shape, cfg.init_std, rng)
    return out


def apply_reinit(params: ModelParams, spec: ReinitSpec, rng, cfg: ModelConfig) -> ModelParams:
    """Redraw the pooler (optionally) and the top ``spec.num_blocks`` blocks.

    Redrawn tensors follow :func:`init_params`; every other tensor is passed
    through untouched.  Draw order is pooler first, then blocks top-down.
    """
    n = params.num_blocks
    if spec.num_blocks > n:
        raise ValueError(f"cannot re-initialise {spec.num_blocks} of {n} blocks")
    shapes = param_shapes(cfg, include_head=False)
    names: list[str] = []
    if spec.reinit_pooler:
        names += ["pooler.weight", "pooler.bias"]
    for b in range(n, n - spec.num_blocks, -1):
        names += params.block_names(b)
    fresh = {name: _draw(name, shapes[name], cfg.init_std, rng) for name in names}
    return params.replace(fresh)


def block_concat(params: Mapping[str, np.ndarray], block: int, num_blocks: int | None = None) -> np.ndarray:
    """All tensors of one block, raveled row-major in ``BLOCK_ORDER``."""
    n = num_blocks if num_blocks is not None else getattr(params, "num_blocks", None)
    if n is not None and not 1 <= block <= n:
        raise IndexError(f"block index {block} outside 1..{n}")
    try:
        parts = [np.ravel(params[block_key(block, name)]) for name in BLOCK_ORDER]
    except KeyError:
        raise IndexError(f"no block {block} in parameter tree") from None
    return np.concatenate(parts)


def block_split(vec: np.ndarray, cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Inverse of :func:`block_concat` (names relative to the block)."""
    shapes = _block_shapes(cfg)
    out, pos = {}, 0
    for name in BLOCK_ORDER:
        size = math.prod(shapes[name])
        out[name] = vec[pos : pos + size].reshape(shapes[name])
        pos += size
    if pos != vec.size:
        raise ValueError(f"vector of length {vec.size} does not match block size {pos}")
    return out


# ---------------------------------------------------------------------------
# forward pass


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add_bias(T.matmul(x, w), b)


def encode(
    p: Mapping[str, Tensor],
    ids: np.ndarray,
    mask: np.ndarray,
    cfg: ModelConfig,
    rng=None,
    training: bool = False,
) -> Tensor:
    """Hidden states [B, S, d] of the final block."""
    ids = np.asarray(ids)
    bsz, seq = ids.shape
    if seq > cfg.max_seq_len:
        raise ValueError(f"sequence length {seq} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.size and ids.max() >= cfg.vocab_size:
        raise IndexError(f"token id {ids.max()} >= vocab_size {cfg.vocab_size}")
    d, h, dh = cfg.hidden_dim, cfg.num_heads, cfg.head_dim
    drop = cfg.dropout_p
    act = T.relu if cfg.activation == "relu" else T.gelu

    pos = T.index(p["embeddings.position"], np.s_[:seq])
    tok = T.embedding(p["embeddings.token"], ids)
    x = T.add(tok, _tile_positions(pos, bsz))
    x = T.layer_norm(x, p["embeddings.ln.gain"], p["embeddings.ln.bias"])
    x = T.dropout(x, drop, rng, training)

    attn_mask = np.where(np.asarray(mask, dtype=bool), 0.0, -1e9)[:, None, None, :]
    scale = 1.0 / math.sqrt(dh)
    for b in range(1, cfg.num_blocks + 1):
        g = lambda name: p[block_key(b, name)]  # noqa: E731
        q = _heads(_linear(x, g("attn.wq"), g("attn.bq")), bsz, seq, h, dh)
        k = _heads(_linear(x, g("attn.wk"), g("attn.bk")), bsz, seq, h, dh)
        v = _heads(_linear(x, g("attn.wv"), g("attn.bv")), bsz, seq, h, dh)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
        probs = T.dropout(T.softmax(scores, attn_mask), drop, rng, training)
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (bsz, seq, d))
        attn_out = T.dropout(_linear(ctx, g("attn.wo"), g("attn.bo")), drop, rng, training)
        x = T.layer_norm(T.add(x, attn_out), g("ln1.gain"), g("ln1.bias"))
        hidden = act(_linear(x, g("ffn.w1"), g("ffn.b1")))
        ffn_out = T.dropout(_linear(hidden, g("ffn.w2"), g("ffn.b2")), drop, rng, training)
        x = T.layer_norm(T.add(x, ffn_out), g("ln2.gain"), g("ln2.bias"))
    return x


def _tile_positions(pos: Tensor, bsz: int) -> Tensor:
    # equal-shape add only, so replicate the position rows across the batch
    seq, d = pos.shape
    ones = np.ones((bsz, 1, 1))

    def grad_fn(g):
        return (g.sum(axis=0),)

    return T._emit(ones * pos.data[None], (pos,), grad_fn)


def _heads(x: Tensor, bsz: int, seq: int, h: int, dh: int) -> Tensor:
    return T.transpose(T.reshape(x, (bsz, seq, h, dh)), (0, 2, 1, 3))


def pool(p: Mapping[str, Tensor], hidden: Tensor) -> Tensor:
    """tanh(W h_[CLS] + b) on the first position."""
    cls = T.index(hidden, np.s_[:, 0, :])
    return T.tanh(_linear(cls, p["pooler.weight"], p["pooler.bias"]))


def forward(
    params: Mapping,
    batch,
    cfg: ModelConfig,
    rng=None,
    training: bool = False,
) -> Tensor:
    """Logits [B, C], or predictions [B] when ``cfg.num_classes == 1``.

    ``params`` may hold numpy arrays (treated as constants) or tensors.
    ``batch`` needs ``ids`` and ``mask`` arrays of shape [B, S].
    """
    p = as_tensors(params)
    hidden = encode(p, batch.ids, batch.mask, cfg, rng, training)
    pooled = T.dropout(pool(p, hidden), cfg.dropout_p, rng, training)
    logits = _linear(pooled, p["head.weight"], p["head.bias"])
    if cfg.is_regression:
        return T.reshape(logits, (logits.shape[0],))
    return logits


def as_tensors(params: Mapping, requires_grad: bool = False) -> dict[str, Tensor]:
    return {
        k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=requires_grad, name=k)
        for k, v in params.items()
    }


def task_loss(out: Tensor, labels, cfg: ModelConfig) -> Tensor:
    if cfg.is_regression:
        return T.mse(out, np.asarray(labels, dtype=np.float64))
    return T.softmax_cross_entropy(out, np.asarray(labels, dtype=np.int64))


def predict(params: Mapping, batch, cfg: ModelConfig) -> np.ndarray:
    """Class indices (classification) or real values (regression), no dropout."""
    out = forward(params, batch, cfg, training=False).data
    if cfg.is_regression:
        return out
    return out.argmax(axis=1)


# ---------------------------------------------------------------------------
# checkpoint files
#
# Layout (all integers little-endian):
#   8 bytes   magic b"STCKPT01"
#   uint32    length of UTF-8 JSON metadata, then the metadata itself
#             ({"config": {...} | null, "num_blocks": N})
#   uint32    number of tensors
#   per tensor:
#     uint16  name length, then UTF-8 name
#     uint8   ndim, then ndim x uint32 dimension sizes
#     float64 data, row-major, little-endian

_MAGIC = b"STCKPT01"


def save_params(path: str | Path, params: ModelParams, cfg: ModelConfig | None = None) -> None:
    meta = json.dumps(
        {"config": cfg.to_dict() if cfg else None, "num_blocks": params.num_blocks},
        sort_keys=True,
    ).encode()
    chunks = [_MAGIC, struct.pack("<I", len(meta)), meta, struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: str | Path) -> tuple[ModelParams, ModelConfig | None]:
    buf = Path(path).read_bytes()
    if buf[:8] != _MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    try:
        return _parse_checkpoint(buf)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt or truncated checkpoint ({exc})") from None


def _parse_checkpoint(buf: bytes) -> tuple[ModelParams, ModelConfig | None]:
    pos = 8
    (mlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = json.loads(buf[pos : pos + mlen])
    pos += mlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = math.prod(shape)
        if pos + 8 * size > len(buf):
            raise struct.error("tensor data runs past end of file")
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    cfg = ModelConfig(**meta["config"]) if meta.get("config") else None
    return ModelParams(tensors, meta["num_blocks"]), cfg
