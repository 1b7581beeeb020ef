"""Toy decoder-only transformer with per-layer hidden-state access.

The same architecture serves as the accelerated target model and (with
fewer layers) as the draft model.  Everything on the inference path runs in
float32 through the strict-order kernels, which buys two properties the
rest of the engine leans on:

* resumption: a forward pass split at any layer boundary is bit-identical
  to the unsplit pass;
* lazy cache completion: positions whose deeper-layer KV entries were
  skipped by an early exit can be advanced later with bit-identical
  results, because per-row computations never depend on which other rows
  share the batch.

Pre-LN blocks, sinusoidal positions, ReLU FFN, LayerNorm.  The final norm
is applied before the LM head wherever logits are computed, including at
intermediate layers, so that logits from different depths share a scale.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels, rng

LN_EPS = np.float32(1e-5)

CONFIG_FIELDS = ("vocab_size", "hidden_dim", "num_layers", "num_heads", "ffn_dim", "max_context")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    hidden_dim: int = 64
    num_layers: int = 8
    num_heads: int = 4
    ffn_dim: int = 256
    max_context: int = 512
    seed: int = 0

    def validate(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if min(self.hidden_dim, self.num_heads, self.ffn_dim, self.max_context) < 1:
            raise ValueError("all dimensions must be positive")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")

    @property
    def head_dim(self):
        return self.hidden_dim // self.num_heads


def tensor_specs(config: ModelConfig):
    """Declaration-order list of (name, shape, init kind) for all weights."""
    d, f, v = config.hidden_dim, config.ffn_dim, config.vocab_size
    specs = [("embedding", (v, d), "uniform")]
    for i in range(config.num_layers):
        p = f"layers.{i}"
        specs += [
            (f"{p}.ln1.g", (d,), "ones"),
            (f"{p}.ln1.b", (d,), "zeros"),
            (f"{p}.attn.wq", (d, d), "uniform"),
            (f"{p}.attn.wk", (d, d), "uniform"),
            (f"{p}.attn.wv", (d, d), "uniform"),
            (f"{p}.attn.wo", (d, d), "uniform"),
            (f"{p}.ln2.g", (d,), "ones"),
            (f"{p}.ln2.b", (d,), "zeros"),
            (f"{p}.ffn.w1", (d, f), "uniform"),
            (f"{p}.ffn.b1", (f,), "zeros"),
            (f"{p}.ffn.w2", (f, d), "uniform"),
            (f"{p}.ffn.b2", (d,), "zeros"),
        ]
    specs += [
        ("final_norm.g", (d,), "ones"),
        ("final_norm.b", (d,), "zeros"),
        ("lm_head", (d, v), "uniform"),
    ]
    return specs


class TransformerModel:
    """Immutable-after-construction weight container plus forward machinery."""

    def __init__(self, config: ModelConfig, tensors: dict):
        config.validate()
        expected = tensor_specs(config)
        if [n for n, _, _ in expected] != list(tensors):
            raise ValueError("tensor names do not match config")
        for name, shape, _ in expected:
            t = tensors[name]
            if t.shape != shape or t.dtype != np.float32:
                raise ValueError(f"tensor {name}: bad shape/dtype {t.shape}/{t.dtype}")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"tensor {name}: non-finite values")
        self.config = config
        self.tensors = tensors
        self.pos_encoding = sinusoidal_encoding(config.max_context, config.hidden_dim)

    def __getitem__(self, name):
        return self.tensors[name]

    def num_parameters(self):
        return sum(t.size for t in self.tensors.values())


def sinusoidal_encoding(max_len: int, dim: int) -> np.ndarray:
    pe = np.zeros((max_len, dim), dtype=np.float64)
    pos = np.arange(max_len)[:, None]
    div = np.exp(np.arange(0, dim, 2) * (-math.log(10000.0) / dim))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)
    return pe.astype(np.float32)


def init_model(config: ModelConfig) -> TransformerModel:
    """Seeded deterministic init: one splitmix64 stream per weight matrix,
    uniform(-b, b) with b = sqrt(6/(fan_in+fan_out)); biases zero, norm
    gains one."""
    config.validate()
    tensors = {}
    for idx, (name, shape, kind) in enumerate(tensor_specs(config)):
        if kind == "uniform":
            fan_in, fan_out = shape[0], shape[1]
            b = math.sqrt(6.0 / (fan_in + fan_out))
            vals = rng.uniform(rng.derive(config.seed, idx), int(np.prod(shape)), -b, b)
            tensors[name] = vals.reshape(shape)
        elif kind == "zeros":
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = np.ones(shape, dtype=np.float32)
    return TransformerModel(config, tensors)


def layer_norm(x, g, b):
    """Row-wise LayerNorm with strict-order reductions. x: (n, d) float32."""
    d = np.float32(x.shape[-1])
    mean = kernels.seq_sum(x) / d
    xc = x - mean[..., None]
    var = kernels.seq_sum(xc * xc) / d
    return xc / np.sqrt(var + LN_EPS)[..., None] * g + b


def softmax_1d(x):
    """Deterministic softmax over a 1-D float32 vector."""
    e = np.exp(x - np.max(x))
    return e / kernels.seq_sum(e[None, :])[0]


class DecodeState:
    """KV cache plus lazy-completion bookkeeping for one generation stream.

    Each position carries a frontier: the number of layers whose KV entries
    exist for it.  ``pending[p]`` is the residual-stream value feeding layer
    ``frontier[p]``.  ``run_layer(l)`` advances every unfrozen position
    sitting at frontier l, so positions that an early exit left behind are
    dragged forward exactly when a later token needs their deeper KV.
    """

    def __init__(self, model: TransformerModel):
        cfg = model.config
        self.model = model
        self.kcache = np.zeros((cfg.num_layers, cfg.max_context, cfg.hidden_dim), np.float32)
        self.vcache = np.zeros_like(self.kcache)
        self.pending = np.zeros((cfg.max_context, cfg.hidden_dim), np.float32)
        self.frontier = np.zeros(cfg.max_context, np.int64)
        self.attn_index = {}  # position -> explicit index array (tree rows only)
        self.n = 0
        self.new_rows = []
        self.frozen = set()

    @property
    def tokens_capacity_left(self):
        return self.model.config.max_context - self.n

    def begin(self, tokens, pos_ids=None, attn_lists=None):
        """Append new rows for `tokens`; they start at frontier 0.

        pos_ids overrides the positional-encoding index per row (token
        trees reuse position ctx+depth-1 across sibling branches).
        attn_lists gives, per row, the explicit list of state indices the
        row may attend to (ancestors-only tree attention); None means plain
        causal attention over all earlier positions.
        """
        cfg = self.model.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size == 0:
            raise ValueError("tokens must be a non-empty 1-D sequence")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError("token id out of range")
        if self.n + tokens.size > cfg.max_context:
            raise ValueError("context overflow")
        rows = list(range(self.n, self.n + tokens.size))
        if pos_ids is None:
            pos_ids = rows
        emb = self.model["embedding"][tokens] + self.model.pos_encoding[list(pos_ids)]
        self.pending[rows] = emb
        self.frontier[rows] = 0
        for j, p in enumerate(rows):
            if attn_lists is not None and attn_lists[j] is not None:
                idx = np.asarray(sorted(set(attn_lists[j]) | {p}), dtype=np.int64)
                if idx.max() > p:
                    raise ValueError("attention index must not look ahead")
                self.attn_index[p] = idx
        self.n += tokens.size
        self.new_rows = rows
        return rows

    def freeze(self, positions):
        self.frozen.update(positions)

    def unfreeze_all(self):
        self.frozen.clear()

    def run_layer(self, l: int):
        """Advance all unfrozen positions at frontier l through layer l.

        Returns the residual-stream values of the rows added by the last
        begin() (after layer l for those that advanced).
        """
        m = self.model
        cfg = m.config
        if not 0 <= l < cfg.num_layers:
            raise ValueError("layer index out of range")
        rows = [p for p in range(self.n) if self.frontier[p] == l and p not in self.frozen]
        if rows:
            self._advance(l, rows)
        return self.pending[self.new_rows].copy()

    def _advance(self, l, rows):
        m = self.model
        cfg = m.config
        p_ = f"layers.{l}"
        x = self.pending[rows]
        h = layer_norm(x, m[f"{p_}.ln1.g"], m[f"{p_}.ln1.b"])
        q = kernels.matmul(h, m[f"{p_}.attn.wq"])
        k = kernels.matmul(h, m[f"{p_}.attn.wk"])
        v = kernels.matmul(h, m[f"{p_}.attn.wv"])
        self.kcache[l, rows] = k
        self.vcache[l, rows] = v

        nh, dh = cfg.num_heads, cfg.head_dim
        scale = np.float32(1.0 / math.sqrt(dh))
        attn = np.empty_like(x)
        for j, p in enumerate(rows):
            ctx = self.attn_index.get(p)
            if ctx is None:
                ctx = np.arange(p + 1)
            kc = self.kcache[l, ctx]
            vc = self.vcache[l, ctx]
            out = np.empty(cfg.hidden_dim, np.float32)
            for hh in range(nh):
                s = slice(hh * dh, (hh + 1) * dh)
                scores = kernels.matmul(kc[:, s], q[j, s][:, None])[:, 0] * scale
                probs = softmax_1d(scores)
                out[s] = kernels.matmul(probs[None, :], vc[:, s])[0]
            attn[j] = kernels.matmul(out[None, :], m[f"{p_}.attn.wo"])[0]
        x = x + attn

        h2 = layer_norm(x, m[f"{p_}.ln2.g"], m[f"{p_}.ln2.b"])
        f = np.maximum(kernels.matmul(h2, m[f"{p_}.ffn.w1"]) + m[f"{p_}.ffn.b1"], np.float32(0))
        x = x + kernels.matmul(f, m[f"{p_}.ffn.w2"]) + m[f"{p_}.ffn.b2"]

        self.pending[rows] = x
        self.frontier[rows] = l + 1

    def compact(self, keep_new_rows, n_committed):
        """After a tree step: keep `keep_new_rows` (state indices, ascending)
        as committed positions n_committed.., drop all other rows past
        n_committed.  Their KV/pending entries move down unchanged, which is
        exact because each kept row attended precisely to its committed
        prefix."""
        dest = list(range(n_committed, n_committed + len(keep_new_rows)))
        self.kcache[:, dest] = self.kcache[:, keep_new_rows]
        self.vcache[:, dest] = self.vcache[:, keep_new_rows]
        self.pending[dest] = self.pending[keep_new_rows]
        self.frontier[dest] = self.frontier[keep_new_rows]
        self.attn_index = {}
        self.n = n_committed + len(keep_new_rows)
        self.new_rows = []
        self.frozen.clear()


def full_head_logits(model: TransformerModel, hidden: np.ndarray) -> np.ndarray:
    """Final-norm then LM-head projection of one hidden vector."""
    hidden = np.asarray(hidden, dtype=np.float32)
    if not np.all(np.isfinite(hidden)):
        raise ValueError("non-finite hidden state")
    h = layer_norm(hidden[None, :], model["final_norm.g"], model["final_norm.b"])
    return kernels.matmul(h, model["lm_head"])[0]


def sliced_head_logits(model: TransformerModel, hidden: np.ndarray, token_ids) -> np.ndarray:
    """Logits for selected vocabulary columns only.

    Bit-identical to gathering the same entries from full_head_logits: the
    per-column dot products accumulate in the same order either way.
    """
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if token_ids.size == 0:
        raise ValueError("empty token id list")
    if token_ids.min() < 0 or token_ids.max() >= model.config.vocab_size:
        raise ValueError("token id out of range")
    hidden = np.asarray(hidden, dtype=np.float32)
    if not np.all(np.isfinite(hidden)):
        raise ValueError("non-finite hidden state")
    h = layer_norm(hidden[None, :], model["final_norm.g"], model["final_norm.b"])
    cols = np.ascontiguousarray(model["lm_head"][:, token_ids])
    return kernels.matmul(h, cols)[0]


def forward_to_layer(model: TransformerModel, tokens, stop_layer: int, state: DecodeState = None):
    """Run layers 0..stop_layer for `tokens`; returns (last hidden, state).

    Pass the returned state back with the next token chunk (or call
    run_layer for deeper layers) to resume; resumption is bit-exact.
    """
    if not 0 <= stop_layer < model.config.num_layers:
        raise ValueError("stop_layer out of range")
    if state is None:
        state = DecodeState(model)
    state.begin(tokens)
    for l in range(stop_layer + 1):
        out = state.run_layer(l)
    return out[-1], state


def greedy_next_token(model: TransformerModel, state: DecodeState, token: int):
    """Full-depth forward of one token; returns (argmax id, per-layer hidden
    list for the new row)."""
    state.begin([token])
    trace = []
    for l in range(model.config.num_layers):
        trace.append(state.run_layer(l)[-1])
    logits = full_head_logits(model, trace[-1])
    return int(np.argmax(logits)), trace


def prefill(model: TransformerModel, tokens) -> DecodeState:
    """Full forward over all prompt tokens but the last; the caller feeds
    the last token through its own per-layer loop."""
    state = DecodeState(model)
    if len(tokens) > 1:
        state.begin(tokens[:-1])
        for l in range(model.config.num_layers):
            state.run_layer(l)
    return state


# --- weight file format -------------------------------------------------
# magic "SPXW", u32 version, u32 tensor count, then per tensor:
# u16 name length, name bytes, u8 rank, u32 per-dim sizes, f32 LE data.
# The first pseudo-tensor "config" (rank 1) carries the config fields in
# declared order; the 64-bit seed travels as four 16-bit limbs so it
# survives the f32 payload exactly.

MAGIC = b"SPXW"
VERSION = 1


def _config_vector(config: ModelConfig) -> np.ndarray:
    limbs = [(config.seed >> s) & 0xFFFF for s in (0, 16, 32, 48)]
    vals = [getattr(config, f) for f in CONFIG_FIELDS] + limbs
    return np.array(vals, dtype=np.float32)


def _config_from_vector(vec: np.ndarray) -> ModelConfig:
    if vec.size != len(CONFIG_FIELDS) + 4:
        raise ValueError("bad config pseudo-tensor length")
    fields = {f: int(v) for f, v in zip(CONFIG_FIELDS, vec)}
    limbs = [int(v) for v in vec[len(CONFIG_FIELDS):]]
    seed = sum(limb << (16 * i) for i, limb in enumerate(limbs))
    return ModelConfig(seed=seed, **fields)


def _write_tensor(fh, name: str, data: np.ndarray):
    nb = name.encode()
    fh.write(len(nb).to_bytes(2, "little"))
    fh.write(nb)
    fh.write(data.ndim.to_bytes(1, "little"))
    for dim in data.shape:
        fh.write(int(dim).to_bytes(4, "little"))
    fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated weight file")
    return buf


def _read_tensor(fh):
    nlen = int.from_bytes(_read_exact(fh, 2), "little")
    name = _read_exact(fh, nlen).decode()
    rank = int.from_bytes(_read_exact(fh, 1), "little")
    shape = tuple(int.from_bytes(_read_exact(fh, 4), "little") for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
    return name, data.astype(np.float32)


def save_weights(model: TransformerModel, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(VERSION.to_bytes(4, "little"))
        fh.write((len(model.tensors) + 1).to_bytes(4, "little"))
        _write_tensor(fh, "config", _config_vector(model.config))
        for name, t in model.tensors.items():
            _write_tensor(fh, name, t)


def load_weights(path) -> TransformerModel:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise ValueError("bad magic: not a weight file")
        version = int.from_bytes(_read_exact(fh, 4), "little")
        if version != VERSION:
            raise ValueError(f"unsupported weight file version {version}")
        count = int.from_bytes(_read_exact(fh, 4), "little")
        name, vec = _read_tensor(fh)
        if name != "config":
            raise ValueError("weight file missing config pseudo-tensor")
        config = _config_from_vector(vec)
        tensors = {}
        for _ in range(count - 1):
            name, data = _read_tensor(fh)
            tensors[name] = data
    return TransformerModel(config, tensors)


def with_tensors(model: TransformerModel, tensors: dict) -> TransformerModel:
    """New model sharing the config but with replaced weights."""
    return TransformerModel(model.config, tensors)
