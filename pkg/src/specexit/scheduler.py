"""Two-level predictor scheduling.

Offline: profile exit frequencies per layer over a corpus once, rank
layers by count (ties by lower id).  Online: a circular queue of the last
N exit layers plus a per-layer neighbor-count array; layer i is "hot" when
any queued exit landed within `radius` of it.  The active set per token is
the union of the offline top-k and the hot layers, clipped to layers that
can host a predictor (the final layer never needs one).
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ScheduleConfig:
    queue_len: int = 5
    radius: int = 2
    offline_top_k: int = 4

    def validate(self, num_layers):
        if self.queue_len < 1 or self.radius < 0:
            raise ValueError("bad schedule config")
        if self.offline_top_k > num_layers - 1:
            raise ValueError("offline_top_k exceeds predictor-capable layers")


@dataclass
class OfflineProfile:
    num_layers: int
    exit_counts: np.ndarray      # length num_layers, u64
    fingerprint: int             # 64-bit hash of the model weight file

    def __post_init__(self):
        self.exit_counts = np.asarray(self.exit_counts, dtype=np.uint64)
        if self.exit_counts.shape != (self.num_layers,):
            raise ValueError("exit_counts length must equal num_layers")

    @property
    def ranked_layers(self):
        """Predictor-capable layers (0..L-2) by count descending, ties by
        lower layer id."""
        counts = self.exit_counts[: self.num_layers - 1]
        return sorted(range(self.num_layers - 1), key=lambda i: (-int(counts[i]), i))


@dataclass
class OnlineState:
    num_layers: int
    config: ScheduleConfig
    queue: list = field(default_factory=list)   # oldest first
    neighbor_counts: np.ndarray = None

    def __post_init__(self):
        if self.neighbor_counts is None:
            self.neighbor_counts = np.zeros(self.num_layers, dtype=np.int64)


def _neighborhood(layer, num_layers, radius):
    return range(max(layer - radius, 0), min(layer + radius, num_layers - 1) + 1)


def update_online(state: OnlineState, exit_layer: int) -> OnlineState:
    """Push one exit layer; evicts the oldest entry once the queue is full.
    neighbor_counts is maintained incrementally and always equals a scratch
    recomputation from the queue contents."""
    if not 0 <= exit_layer < state.num_layers:
        raise ValueError("exit layer out of range")
    r = state.config.radius
    if len(state.queue) == state.config.queue_len:
        evicted = state.queue.pop(0)
        for i in _neighborhood(evicted, state.num_layers, r):
            state.neighbor_counts[i] -= 1
    state.queue.append(exit_layer)
    for i in _neighborhood(exit_layer, state.num_layers, r):
        state.neighbor_counts[i] += 1
    return state


def recompute_counts(state: OnlineState) -> np.ndarray:
    """From-scratch oracle for the incremental neighbor counts."""
    counts = np.zeros(state.num_layers, dtype=np.int64)
    for e in state.queue:
        for i in _neighborhood(e, state.num_layers, state.config.radius):
            counts[i] += 1
    return counts


def online_hot_layers(state: OnlineState):
    return [i for i in range(state.num_layers - 1) if state.neighbor_counts[i] > 0]


def active_layers(profile: OfflineProfile, state: OnlineState, config: ScheduleConfig):
    """Union of offline top-k and online hot layers, ascending, restricted
    to 0..L-2.  Before the queue holds anything, only the offline part is
    active."""
    config.validate(profile.num_layers)
    chosen = set(profile.ranked_layers[: config.offline_top_k])
    chosen.update(online_hot_layers(state))
    return sorted(l for l in chosen if l <= profile.num_layers - 2)


def profile_offline(engine_generate, prompts, num_layers: int, fingerprint: int) -> OfflineProfile:
    """Count verified exits per layer over a corpus of prompts.

    engine_generate(prompt) must return an iterable of per-token records
    with an `exit_layer` attribute and a `verified` flag, produced with all
    predictors active (the exit engine provides this; a synthetic trace
    works for tests).  Tokens that never exit early are counted at L-1.
    """
    counts = np.zeros(num_layers, dtype=np.uint64)
    saw_any = False
    for prompt in prompts:
        for rec in engine_generate(prompt):
            saw_any = True
            counts[rec.exit_layer] += np.uint64(1)
    if not saw_any:
        raise ValueError("profiling produced no tokens (empty corpus?)")
    return OfflineProfile(num_layers=num_layers, exit_counts=counts, fingerprint=fingerprint)


def weight_fingerprint(path) -> int:
    """64-bit fingerprint of a weight file: leading bytes of its sha256."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return int.from_bytes(h.digest()[:8], "little")


# --- profile persistence ------------------------------------------------
# magic "SPXS", u32 version, u32 L, L x u64 per-layer counts, u64 model
# fingerprint.

SPXS_MAGIC = b"SPXS"
SPXS_VERSION = 1


def save_profile(profile: OfflineProfile, path):
    with open(path, "wb") as fh:
        fh.write(SPXS_MAGIC)
        fh.write(SPXS_VERSION.to_bytes(4, "little"))
        fh.write(int(profile.num_layers).to_bytes(4, "little"))
        fh.write(profile.exit_counts.astype("<u8").tobytes())
        fh.write(int(profile.fingerprint).to_bytes(8, "little"))


def load_profile(path, expect_fingerprint: int = None) -> OfflineProfile:
    def read(fh, n):
        buf = fh.read(n)
        if len(buf) != n:
            raise ValueError("truncated profile file")
        return buf

    with open(path, "rb") as fh:
        if read(fh, 4) != SPXS_MAGIC:
            raise ValueError("bad magic: not a profile file")
        version = int.from_bytes(read(fh, 4), "little")
        if version != SPXS_VERSION:
            raise ValueError(f"unsupported profile version {version}")
        num_layers = int.from_bytes(read(fh, 4), "little")
        counts = np.frombuffer(read(fh, 8 * num_layers), dtype="<u8").copy()
        fingerprint = int.from_bytes(read(fh, 8), "little")
    if expect_fingerprint is not None and fingerprint != expect_fingerprint:
        raise ValueError("profile fingerprint does not match model weights")
    return OfflineProfile(num_layers=num_layers, exit_counts=counts, fingerprint=fingerprint)
