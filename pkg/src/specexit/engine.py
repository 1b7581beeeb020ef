"""Autoregressive decoding loop with early exiting.

Per token: the draft proposes k speculative tokens, the scheduler picks
which layers run the exit predictor, and at each active layer the engine
extracts features, consults the exit policy, and on a positive decision
verifies against the full LM head (the global argmax must be one of the
speculative tokens).  A verified exit emits that argmax immediately;
otherwise the token falls through to the final layer.

Deeper-layer KV entries of early-exited positions are filled lazily: the
next token's forward drags stale positions along, which keeps attention
exact (see model.DecodeState).
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .model import DecodeState, TransformerModel, full_head_logits, sliced_head_logits
from .predictor import decide_exit, extract_features, predictor_forward, uniform_probs
from .scheduler import OfflineProfile, OnlineState, ScheduleConfig, active_layers, update_online
from .speculation import SpeculativeSet, speculative_set_from_logits


@dataclass
class ExitRecord:
    token: int
    exit_layer: int
    predictor_fired: bool
    verified: bool
    active: list = field(default_factory=list)
    full_head_count: int = 0
    predictor_evals: int = 0

    def to_json(self):
        return json.dumps({
            "token": self.token, "exit_layer": self.exit_layer,
            "predictor_fired": self.predictor_fired, "verified": self.verified,
            "active": list(self.active),
        })

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        return cls(token=d["token"], exit_layer=d["exit_layer"],
                   predictor_fired=d["predictor_fired"], verified=d["verified"],
                   active=d["active"])


@dataclass(frozen=True)
class EngineConfig:
    k: int = 4
    threshold: float = 0.5
    schedule_mode: str = "all"   # "all" or "two-level"
    spec_full_vocab: bool = False


def verify_exit(model: TransformerModel, hidden, spec_set: SpeculativeSet):
    """Full-head check of a positive prediction: returns the global argmax
    token if it lies inside the speculative set, else None."""
    logits = full_head_logits(model, hidden)
    tok = int(np.argmax(logits))
    return tok if tok in spec_set.tokens else None


class NeverExitPolicy:
    def start(self, prompt):
        pass

    def observe(self, token):
        pass

    def exit_prob(self, layer, features, hidden):
        return 0.0


class AlwaysExitPolicy(NeverExitPolicy):
    def exit_prob(self, layer, features, hidden):
        return 1.0


class PredictorPolicy(NeverExitPolicy):
    """Trained per-layer MLP predictors."""

    def __init__(self, bank: dict):
        self.bank = bank

    def exit_prob(self, layer, features, hidden):
        if layer not in self.bank:
            raise KeyError(f"no predictor for active layer {layer}")
        return predictor_forward(self.bank[layer], features)


class OraclePolicy:
    """Fires exactly when the layer's argmax already equals the final
    argmax, using a private full-depth forward of the same stream."""

    def __init__(self, target: TransformerModel):
        self.target = target
        self.state = None
        self.final_argmax = None

    def start(self, prompt):
        self.state = DecodeState(self.target)
        if len(prompt) > 1:
            self.state.begin(prompt[:-1])
            for l in range(self.target.config.num_layers):
                self.state.run_layer(l)

    def observe(self, token):
        self.state.begin([token])
        for l in range(self.target.config.num_layers):
            out = self.state.run_layer(l)
        self.final_argmax = int(np.argmax(full_head_logits(self.target, out[-1])))

    def exit_prob(self, layer, features, hidden):
        early = int(np.argmax(full_head_logits(self.target, hidden)))
        return 1.0 if early == self.final_argmax else 0.0


class ExitEngine:
    """One generation stream; owns its KV caches and online schedule state."""

    def __init__(self, target: TransformerModel, draft: TransformerModel, policy,
                 config: EngineConfig = EngineConfig(),
                 profile: OfflineProfile = None,
                 schedule_config: ScheduleConfig = ScheduleConfig()):
        if config.schedule_mode not in ("all", "two-level"):
            raise ValueError(f"unknown schedule mode {config.schedule_mode!r}")
        if config.schedule_mode == "two-level" and profile is None:
            raise ValueError("two-level scheduling needs an offline profile")
        self.target = target
        self.draft = draft
        self.policy = policy
        self.config = config
        self.profile = profile
        self.schedule_config = schedule_config
        self.online = OnlineState(target.config.num_layers, schedule_config)
        self.tstate = None
        self.dstate = None
        self.context = None
        self.next_in = None

    def start(self, prompt):
        prompt = list(prompt)
        if not prompt:
            raise ValueError("empty prompt")
        self.tstate = DecodeState(self.target)
        self.dstate = DecodeState(self.draft)
        if len(prompt) > 1:
            self.tstate.begin(prompt[:-1])
            for l in range(self.target.config.num_layers):
                self.tstate.run_layer(l)
            self.dstate.begin(prompt[:-1])
            for l in range(self.draft.config.num_layers):
                self.dstate.run_layer(l)
        self.context = prompt
        self.next_in = prompt[-1]
        self.policy.start(prompt)

    def _speculative_set(self):
        self.dstate.begin([self.next_in])
        for l in range(self.draft.config.num_layers):
            dout = self.dstate.run_layer(l)
        logits = full_head_logits(self.draft, dout[-1])
        k = self.target.config.vocab_size if self.config.spec_full_vocab else self.config.k
        return speculative_set_from_logits(logits, k)

    def _active_layers(self):
        L = self.target.config.num_layers
        if self.config.schedule_mode == "all":
            return list(range(L - 1))
        return active_layers(self.profile, self.online, self.schedule_config)

    def step(self) -> ExitRecord:
        cfg = self.target.config
        spec = self._speculative_set()
        active = self._active_layers()
        active_set = set(active)
        self.policy.observe(self.next_in)

        self.tstate.begin([self.next_in])
        prev = uniform_probs(len(spec.tokens))
        token = None
        exit_layer = cfg.num_layers - 1
        fired = False
        verified = False
        full_heads = 0
        evals = 0
        hidden = None
        for l in range(cfg.num_layers):
            hidden = self.tstate.run_layer(l)[-1]
            if l in active_set:
                fv = extract_features(sliced_head_logits(self.target, hidden, spec.tokens), prev)
                prev = fv.local_probs
                prob = self.policy.exit_prob(l, fv, hidden)
                evals += 1
                if decide_exit(prob, self.config.threshold):
                    fired = True
                    full_heads += 1
                    tok = verify_exit(self.target, hidden, spec)
                    if tok is not None:
                        token = tok
                        exit_layer = l
                        verified = True
                        break
        if token is None:
            full_heads += 1
            token = int(np.argmax(full_head_logits(self.target, hidden)))

        self.context.append(token)
        self.next_in = token
        update_online(self.online, exit_layer)
        return ExitRecord(token=token, exit_layer=exit_layer, predictor_fired=fired,
                          verified=verified, active=active, full_head_count=full_heads,
                          predictor_evals=evals)

    def generate(self, prompt, max_new: int):
        """Returns (token list, ExitRecord trace)."""
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        self.start(prompt)
        trace = [self.step() for _ in range(max_new)]
        return [r.token for r in trace], trace

    def generate_forced(self, prompt, forced_tokens):
        """Position-aligned evaluation: run the early-exit machinery at each
        position of a given continuation (normally the full model's greedy
        stream), then force that continuation's token into the context.

        The returned trace lines up 1:1 with forced_tokens, so per-position
        comparisons against the full model do not compound drift.  Skipped
        deep layers of exited positions are completed lazily by later steps,
        keeping the KV cache exact for the forced context.
        """
        if len(forced_tokens) == 0:
            raise ValueError("empty forced continuation")
        self.start(prompt)
        trace = []
        for tok in forced_tokens:
            rec = self.step()
            trace.append(rec)
            self.context[-1] = int(tok)
            self.next_in = int(tok)
        return trace


def generate(target, draft, policy, prompt, max_new, config=EngineConfig(),
             profile=None, schedule_config=ScheduleConfig()):
    engine = ExitEngine(target, draft, policy, config, profile, schedule_config)
    return engine.generate(prompt, max_new)


def greedy_generate(target: TransformerModel, prompt, max_new: int):
    """Plain full-depth greedy decoding; returns (tokens, per-token oracle
    exit layers) so one pass yields both the baseline output and the
    theoretical earliest-exit trace."""
    state = DecodeState(target)
    prompt = list(prompt)
    if len(prompt) > 1:
        state.begin(prompt[:-1])
        for l in range(target.config.num_layers):
            state.run_layer(l)
    tokens = []
    oracle_layers = []
    next_in = prompt[-1]
    for _ in range(max_new):
        state.begin([next_in])
        hiddens = [state.run_layer(l)[-1] for l in range(target.config.num_layers)]
        next_in = int(np.argmax(full_head_logits(target, hiddens[-1])))
        tokens.append(next_in)
        oracle_layers.append(_earliest_matching_layer(target, hiddens))
    return tokens, oracle_layers


def _earliest_matching_layer(target, hiddens):
    final = int(np.argmax(full_head_logits(target, hiddens[-1])))
    for l, h in enumerate(hiddens):
        if int(np.argmax(full_head_logits(target, h))) == final:
            return l
    return target.config.num_layers - 1


def oracle_exit_layer(target: TransformerModel, context) -> int:
    """Smallest layer whose full-head argmax equals the final layer's, by
    exhaustive per-layer check over a fresh forward of `context`."""
    state = DecodeState(target)
    state.begin(context)
    hiddens = [state.run_layer(l)[-1] for l in range(target.config.num_layers)]
    return _earliest_matching_layer(target, hiddens)


def write_trace(trace, path):
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(rec.to_json() + "\n")


def read_trace(path):
    with open(path) as fh:
        return [ExitRecord.from_json(line) for line in fh if line.strip()]
