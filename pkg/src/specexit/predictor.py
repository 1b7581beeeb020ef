"""Exit features and the per-layer MLP exit predictor.

Three feature blocks per speculative set, concatenated in a fixed order:
sliced logits of the k speculative tokens, their softmax over the set
("local probabilities"), and the change of those probabilities since the
previously evaluated layer.  With k=4 the predictor input is 12-dim.

The predictor is a 2-layer MLP (hidden 512, ReLU, sigmoid output) trained
per layer with class-weighted binary cross entropy.  Training is plain
full-batch gradient descent with backtracking on the step size, which
makes the recorded loss history non-increasing by construction.
"""

from dataclasses import dataclass

import numpy as np

from . import rng
from .model import DecodeState, TransformerModel, full_head_logits, sliced_head_logits, softmax_1d


@dataclass(frozen=True)
class FeatureVector:
    spec_logits: np.ndarray
    local_probs: np.ndarray
    prob_variation: np.ndarray

    @property
    def k(self):
        return self.spec_logits.size

    def concat(self) -> np.ndarray:
        return np.concatenate([self.spec_logits, self.local_probs, self.prob_variation]).astype(np.float32)


def uniform_probs(k: int) -> np.ndarray:
    """Starting point for the variation feature at a token's first
    evaluated layer: no-information prior over the speculative set."""
    return np.full(k, 1.0 / k, dtype=np.float32)


def extract_features(spec_logits, prev_local_probs) -> FeatureVector:
    spec_logits = np.asarray(spec_logits, dtype=np.float32)
    prev_local_probs = np.asarray(prev_local_probs, dtype=np.float32)
    if spec_logits.size < 1 or spec_logits.shape != prev_local_probs.shape:
        raise ValueError("bad feature input shapes")
    if not np.all(np.isfinite(spec_logits)):
        raise ValueError("non-finite speculative logits")
    if abs(float(prev_local_probs.sum()) - 1.0) > 1e-5:
        raise ValueError("prev_local_probs must sum to 1")
    local = softmax_1d(spec_logits)
    return FeatureVector(spec_logits=spec_logits, local_probs=local, prob_variation=local - prev_local_probs)


@dataclass
class PredictorWeights:
    w1: np.ndarray       # (3k, H)
    b1: np.ndarray       # (H,)
    w2: np.ndarray       # (H,)
    b2: float
    threshold: float = 0.5

    def __post_init__(self):
        if self.w1.shape[1] != self.b1.size or self.w1.shape[1] != self.w2.size:
            raise ValueError("predictor weight shapes inconsistent")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")

    @property
    def k(self):
        return self.w1.shape[0] // 3

    @property
    def hidden(self):
        return self.w1.shape[1]


def init_predictor(k: int, hidden: int, seed: int, threshold: float = 0.5) -> PredictorWeights:
    d = 3 * k
    b = np.sqrt(6.0 / (d + hidden))
    w1 = rng.uniform(rng.derive(seed, 0), d * hidden, -b, b).reshape(d, hidden)
    b2 = np.sqrt(6.0 / (hidden + 1))
    w2 = rng.uniform(rng.derive(seed, 1), hidden, -b2, b2)
    return PredictorWeights(w1=w1, b1=np.zeros(hidden, np.float32), w2=w2, b2=0.0, threshold=threshold)


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def predictor_forward(w: PredictorWeights, features) -> float:
    """Exit probability sigmoid(w2 . relu(w1' f + b1) + b2), in (0, 1)."""
    f = features.concat() if isinstance(features, FeatureVector) else np.asarray(features)
    if f.shape != (w.w1.shape[0],):
        raise ValueError(f"feature dimension {f.shape} does not match predictor {w.w1.shape}")
    h = np.maximum(f @ w.w1 + w.b1, 0)
    return float(_sigmoid(h @ w.w2 + w.b2))


def decide_exit(prob: float, threshold: float) -> bool:
    """Strictly greater-than: an all-zero predictor (output 0.5) never
    triggers an exit at the default threshold."""
    return prob > threshold


@dataclass(frozen=True)
class TrainingExample:
    features: np.ndarray  # concatenated 3k vector
    label: bool           # early argmax at `layer` matches final argmax
    layer: int


def predictor_loss_and_grads(w: PredictorWeights, feats: np.ndarray, labels: np.ndarray,
                             weights: np.ndarray):
    """Weighted BCE over a batch plus gradients for (w1, b1, w2, b2).

    Works at whatever float precision `feats` carries, so the finite-
    difference check can run it in float64.
    """
    z1 = feats @ w.w1 + w.b1
    h = np.maximum(z1, 0)
    z2 = h @ w.w2 + w.b2
    p = _sigmoid(z2)
    eps = 1e-12
    losses = -(labels * np.log(p + eps) + (1 - labels) * np.log(1 - p + eps))
    loss = float((weights * losses).sum() / weights.sum())
    dz2 = weights * (p - labels) / weights.sum()
    gw2 = h.T @ dz2
    gb2 = float(dz2.sum())
    dh = np.outer(dz2, w.w2)
    dz1 = dh * (z1 > 0)
    gw1 = feats.T @ dz1
    gb1 = dz1.sum(axis=0)
    return loss, (gw1, gb1, gw2, gb2)


@dataclass(frozen=True)
class PredictorTrainConfig:
    epochs: int = 200
    lr: float = 1.0
    seed: int = 0
    balance_classes: bool = True


def train_predictor(examples, cfg: PredictorTrainConfig, hidden: int = 512,
                    threshold: float = 0.5):
    """Full-batch gradient descent with backtracking line halving.

    Returns (weights, per-epoch loss history, final train accuracy).  The
    loss history is non-increasing: a step that would raise the loss is
    retried at half the step size (deterministically).
    """
    if len(examples) == 0:
        raise ValueError("empty example list")
    feats = np.stack([e.features for e in examples]).astype(np.float64)
    labels = np.array([float(e.label) for e in examples])
    k = feats.shape[1] // 3
    w = init_predictor(k, hidden, cfg.seed, threshold)
    w = PredictorWeights(w1=w.w1.astype(np.float64), b1=w.b1.astype(np.float64),
                         w2=w.w2.astype(np.float64), b2=0.0, threshold=threshold)

    n_pos = labels.sum()
    if cfg.balance_classes and 0 < n_pos < len(labels):
        wp = len(labels) / (2.0 * n_pos)
        wn = len(labels) / (2.0 * (len(labels) - n_pos))
        weights = np.where(labels > 0.5, wp, wn)
    else:
        weights = np.ones_like(labels)

    lr = cfg.lr
    loss, grads = predictor_loss_and_grads(w, feats, labels, weights)
    history = [loss]
    for _ in range(cfg.epochs):
        accepted = False
        while lr >= 1e-12:
            trial = PredictorWeights(
                w1=w.w1 - lr * grads[0], b1=w.b1 - lr * grads[1],
                w2=w.w2 - lr * grads[2], b2=w.b2 - lr * grads[3],
                threshold=threshold)
            new_loss, new_grads = predictor_loss_and_grads(trial, feats, labels, weights)
            if new_loss <= loss:
                w, loss, grads = trial, new_loss, new_grads
                accepted = True
                break
            lr *= 0.5
        history.append(loss)
        if not accepted:
            break
        lr *= 1.1  # recover step size after halvings

    preds = np.array([predictor_forward(w, f) for f in feats]) > threshold
    accuracy = float((preds == (labels > 0.5)).mean())
    final = PredictorWeights(w1=w.w1.astype(np.float32), b1=w.b1.astype(np.float32),
                             w2=w.w2.astype(np.float32), b2=float(w.b2), threshold=threshold)
    return final, history, accuracy


def predictor_param_count(k: int, hidden: int, num_layers: int):
    """Parameter count per the bias-free accounting (3k*H + H weights per
    layer) and the matching kilobyte estimate at half-precision storage
    (2 bytes per parameter): (4, 512, 32) -> 416 KB.  Our own files store
    float32 plus the H+1 bias terms per layer, so they are larger."""
    if min(k, hidden, num_layers) < 1:
        raise ValueError("arguments must be positive")
    per_layer = 3 * k * hidden + hidden
    kb = per_layer * num_layers * 2 / 1024
    return per_layer * num_layers, kb


# --- labeled data collection -------------------------------------------


def collect_training_data(target: TransformerModel, draft: TransformerModel, corpus: bytes,
                          layers, k: int = 4, num_prompts: int = 8, prompt_len: int = 16,
                          max_new: int = 32, seed: int = 0):
    """Greedy-generate from corpus prompts and record, per generated token
    and per requested layer, the exit features and whether the layer's
    early argmax already matches the final argmax."""
    if not corpus:
        raise ValueError("empty corpus")
    layers = sorted(layers)
    examples = []
    for ctx, traces in _generation_layer_traces(target, draft, corpus, k, num_prompts,
                                                prompt_len, max_new, seed):
        spec, hidden_per_layer = traces
        final_argmax = int(np.argmax(full_head_logits(target, hidden_per_layer[-1])))
        prev = uniform_probs(k)
        for l in range(target.config.num_layers):
            sl = sliced_head_logits(target, hidden_per_layer[l], spec.tokens)
            fv = extract_features(sl, prev)
            prev = fv.local_probs
            if l in layers:
                label = int(np.argmax(full_head_logits(target, hidden_per_layer[l]))) == final_argmax
                examples.append(TrainingExample(features=fv.concat(), label=label, layer=l))
    return examples


def _generation_layer_traces(target, draft, corpus, k, num_prompts, prompt_len, max_new, seed):
    """Yields (context, (speculative set, per-layer hiddens)) for every
    token position of a batch of greedy generations."""
    data = np.frombuffer(corpus, dtype=np.uint8)
    if data.size < prompt_len:
        raise ValueError("corpus shorter than prompt length")
    starts = rng.splitmix64(seed, num_prompts) % np.uint64(max(data.size - prompt_len, 1))
    for s in starts:
        prompt = [int(b) for b in data[int(s) : int(s) + prompt_len]]
        tstate = DecodeState(target)
        dstate = DecodeState(draft)
        if len(prompt) > 1:
            tstate.begin(prompt[:-1])
            for l in range(target.config.num_layers):
                tstate.run_layer(l)
            dstate.begin(prompt[:-1])
            for l in range(draft.config.num_layers):
                dstate.run_layer(l)
        context = list(prompt)
        next_in = prompt[-1]
        for _ in range(max_new):
            dstate.begin([next_in])
            for l in range(draft.config.num_layers):
                dout = dstate.run_layer(l)
            spec = _spec_from_hidden(draft, dout[-1], k)
            tstate.begin([next_in])
            hiddens = []
            for l in range(target.config.num_layers):
                hiddens.append(tstate.run_layer(l)[-1])
            yield context, (spec, hiddens)
            next_in = int(np.argmax(full_head_logits(target, hiddens[-1])))
            context.append(next_in)


def _spec_from_hidden(draft, hidden, k):
    from .speculation import speculative_set_from_logits

    return speculative_set_from_logits(full_head_logits(draft, hidden), k)


# --- predictor bank persistence ----------------------------------------
# magic "SPXP", u32 version, u32 k, u32 hidden, u32 block count, then per
# block: u32 layer id, f32 threshold, then w1 (3k*H), b1 (H), w2 (H), b2
# as little-endian f32.

SPXP_MAGIC = b"SPXP"
SPXP_VERSION = 1


def save_predictors(bank: dict, path):
    """bank: {layer id -> PredictorWeights}, all with identical k and H."""
    if not bank:
        raise ValueError("empty predictor bank")
    ks = {w.k for w in bank.values()}
    hs = {w.hidden for w in bank.values()}
    if len(ks) != 1 or len(hs) != 1:
        raise ValueError("mixed predictor shapes in bank")
    k, hidden = ks.pop(), hs.pop()
    with open(path, "wb") as fh:
        fh.write(SPXP_MAGIC)
        fh.write(SPXP_VERSION.to_bytes(4, "little"))
        fh.write(k.to_bytes(4, "little"))
        fh.write(hidden.to_bytes(4, "little"))
        fh.write(len(bank).to_bytes(4, "little"))
        for layer in sorted(bank):
            w = bank[layer]
            fh.write(int(layer).to_bytes(4, "little"))
            fh.write(np.float32(w.threshold).tobytes())
            for arr in (w.w1, w.b1, w.w2, np.array([w.b2], np.float32)):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_predictors(path) -> dict:
    def read(fh, n):
        buf = fh.read(n)
        if len(buf) != n:
            raise ValueError("truncated predictor file")
        return buf

    with open(path, "rb") as fh:
        if read(fh, 4) != SPXP_MAGIC:
            raise ValueError("bad magic: not a predictor file")
        version = int.from_bytes(read(fh, 4), "little")
        if version != SPXP_VERSION:
            raise ValueError(f"unsupported predictor file version {version}")
        k = int.from_bytes(read(fh, 4), "little")
        hidden = int.from_bytes(read(fh, 4), "little")
        count = int.from_bytes(read(fh, 4), "little")
        bank = {}
        for _ in range(count):
            layer = int.from_bytes(read(fh, 4), "little")
            threshold = float(np.frombuffer(read(fh, 4), dtype="<f4")[0])
            w1 = np.frombuffer(read(fh, 4 * 3 * k * hidden), dtype="<f4").reshape(3 * k, hidden)
            b1 = np.frombuffer(read(fh, 4 * hidden), dtype="<f4")
            w2 = np.frombuffer(read(fh, 4 * hidden), dtype="<f4")
            b2 = float(np.frombuffer(read(fh, 4), dtype="<f4")[0])
            bank[layer] = PredictorWeights(w1=w1.copy(), b1=b1.copy(), w2=w2.copy(),
                                           b2=b2, threshold=threshold)
    return bank
