"""Bench metrics and report assembly."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class LayerConfusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @property
    def precision(self):
        d = self.tp + self.fp
        return self.tp / d if d else None

    @property
    def recall(self):
        d = self.tp + self.fn
        return self.tp / d if d else None


@dataclass
class BenchReport:
    avg_exit_layer: float
    oracle_avg_exit_layer: float
    agreement_rate: float
    tokens_per_second: float
    active_layer_avg: float
    num_tokens: int
    per_layer: dict = field(default_factory=dict)  # layer -> LayerConfusion
    dataset: str = ""

    def __post_init__(self):
        if not 0.0 <= self.agreement_rate <= 1.0:
            raise ValueError("agreement rate must lie in [0, 1]")

    def to_json(self):
        d = asdict(self)
        d["per_layer"] = {str(l): asdict(c) for l, c in self.per_layer.items()}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["per_layer"] = {int(l): LayerConfusion(**c) for l, c in d["per_layer"].items()}
        return cls(**d)

    def table(self):
        lines = [
            f"dataset            {self.dataset or '-'}",
            f"tokens             {self.num_tokens}",
            f"avg exit layer     {self.avg_exit_layer:.3f}",
            f"oracle avg layer   {self.oracle_avg_exit_layer:.3f}",
            f"agreement rate     {self.agreement_rate:.4f}",
            f"tokens/sec         {self.tokens_per_second:.1f}",
            f"avg active layers  {self.active_layer_avg:.2f}",
        ]
        if self.per_layer:
            lines.append("layer  evals  precision  recall")
            for l in sorted(self.per_layer):
                c = self.per_layer[l]
                p = "-" if c.precision is None else f"{c.precision:.3f}"
                r = "-" if c.recall is None else f"{c.recall:.3f}"
                lines.append(f"{l:5d}  {c.total:5d}  {p:>9}  {r:>6}")
        return "\n".join(lines)


def compute_metrics(trace, oracle_layers, full_tokens, tokens_per_second: float = 0.0,
                    per_layer: dict = None, dataset: str = "") -> BenchReport:
    """Aggregate an early-exit trace against its baselines.

    trace: ExitRecord list from the early-exit run.  oracle_layers: the
    theoretical earliest exit layer per token from the full greedy run.
    full_tokens: the full-model greedy output over the same prompts.
    """
    if len(trace) != len(oracle_layers) or len(trace) != len(full_tokens):
        raise ValueError("trace length mismatch")
    if not trace:
        raise ValueError("empty trace")
    avg_exit = float(np.mean([r.exit_layer for r in trace]))
    oracle_avg = float(np.mean(oracle_layers))
    agreement = float(np.mean([r.token == t for r, t in zip(trace, full_tokens)]))
    active_avg = float(np.mean([len(r.active) for r in trace]))
    return BenchReport(
        avg_exit_layer=avg_exit, oracle_avg_exit_layer=oracle_avg,
        agreement_rate=agreement, tokens_per_second=tokens_per_second,
        active_layer_avg=active_avg, num_tokens=len(trace),
        per_layer=per_layer or {}, dataset=dataset)


def predictor_confusion(target, draft, bank, corpus, k=4, num_prompts=4, prompt_len=16,
                        max_new=32, seed=0):
    """Per-layer confusion counts of the trained predictors, evaluated in a
    no-exit pass so every layer sees every token."""
    from .predictor import (_generation_layer_traces, extract_features, predictor_forward,
                            uniform_probs)
    from .model import full_head_logits, sliced_head_logits

    confusion = {l: LayerConfusion() for l in bank}
    for _ctx, (spec, hiddens) in _generation_layer_traces(target, draft, corpus, k,
                                                          num_prompts, prompt_len, max_new, seed):
        final = int(np.argmax(full_head_logits(target, hiddens[-1])))
        prev = uniform_probs(k)
        for l in range(target.config.num_layers - 1):
            fv = extract_features(sliced_head_logits(target, hiddens[l], spec.tokens), prev)
            prev = fv.local_probs
            if l not in bank:
                continue
            w = bank[l]
            fired = predictor_forward(w, fv) > w.threshold
            label = int(np.argmax(full_head_logits(target, hiddens[l]))) == final
            c = confusion[l]
            if fired and label:
                c.tp += 1
            elif fired:
                c.fp += 1
            elif label:
                c.fn += 1
            else:
                c.tn += 1
    return confusion
