"""End-to-end pipeline: train models, train predictors, profile, bench.

Every stage is deterministic given its config seeds.  Artifacts carry
fingerprints tying them to upstream stages; a manifest in the output
directory lets re-runs skip stages whose inputs did not change.  Timing is
written to a separate file so the canonical report stays byte-identical
across runs.
"""

import hashlib
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import rng
from .engine import ExitEngine, EngineConfig, PredictorPolicy, greedy_generate, write_trace
from .metrics import compute_metrics, predictor_confusion
from .model import ModelConfig, init_model, load_weights, save_weights
from .predictor import (PredictorTrainConfig, collect_training_data, load_predictors,
                        save_predictors, train_predictor)
from .scheduler import (ScheduleConfig, load_profile, profile_offline, save_profile,
                        weight_fingerprint)
from .train_lm import TrainConfig, train_language_model

DEFAULT_CONFIG = {
    "out_dir": "runs/default",
    "corpus": "data/fixture_corpus.txt",
    "target": {
        "model": {"vocab_size": 256, "hidden_dim": 64, "num_layers": 8, "num_heads": 4,
                  "ffn_dim": 256, "max_context": 512, "seed": 11},
        "train": {"epochs": 20, "lr": 0.25, "batch_size": 16, "seq_len": 64, "seed": 101},
    },
    "draft": {
        "model": {"vocab_size": 256, "hidden_dim": 64, "num_layers": 2, "num_heads": 4,
                  "ffn_dim": 256, "max_context": 512, "seed": 22},
        "train": {"epochs": 10, "lr": 0.25, "batch_size": 16, "seq_len": 64, "seed": 202},
    },
    "predictors": {
        "k": 4, "hidden": 512, "threshold": 0.7,
        "collect": {"num_prompts": 96, "prompt_len": 16, "max_new": 32, "seed": 303},
        "train": {"epochs": 600, "lr": 1.0, "seed": 404},
    },
    "schedule": {"queue_len": 5, "radius": 1, "offline_top_k": 4},
    "profile": {"num_prompts": 16, "prompt_len": 16, "max_new": 32, "seed": 505},
    "bench": {"num_prompts": 16, "prompt_len": 16, "max_new": 48, "seed": 606,
              "mode": "two-level"},
}


def load_config(path=None, seed=None, out_dir=None):
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path is not None:
        with open(path) as fh:
            user = json.load(fh)
        _deep_update(cfg, user)
    if seed is not None:
        # one flag reseeds every stage deterministically
        cfg["target"]["model"]["seed"] = rng.derive(seed, 0)
        cfg["target"]["train"]["seed"] = rng.derive(seed, 1)
        cfg["draft"]["model"]["seed"] = rng.derive(seed, 2)
        cfg["draft"]["train"]["seed"] = rng.derive(seed, 3)
        cfg["predictors"]["collect"]["seed"] = rng.derive(seed, 4)
        cfg["predictors"]["train"]["seed"] = rng.derive(seed, 5)
        cfg["profile"]["seed"] = rng.derive(seed, 6)
        cfg["bench"]["seed"] = rng.derive(seed, 7)
    if out_dir is not None:
        cfg["out_dir"] = str(out_dir)
    return cfg


def _deep_update(base, extra):
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], val)
        else:
            base[key] = val


def _stage_key(*parts):
    blob = json.dumps(parts, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


class Pipeline:
    def __init__(self, config: dict):
        self.cfg = config
        self.out = Path(config["out_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.out / "manifest.json"
        self.manifest = {}
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())

    # -- helpers ---------------------------------------------------------

    def _corpus(self) -> bytes:
        path = Path(self.cfg["corpus"])
        if not path.exists():
            raise FileNotFoundError(f"corpus file not found: {path}")
        return path.read_bytes()

    def _save_manifest(self):
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True))

    def _fresh(self, stage, key, artifact):
        entry = self.manifest.get(stage)
        return entry == key and (self.out / artifact).exists()

    def _done(self, stage, key):
        self.manifest[stage] = key
        self._save_manifest()

    def _require(self, artifact, producer):
        path = self.out / artifact
        if not path.exists():
            raise FileNotFoundError(
                f"missing artifact {artifact}; run the '{producer}' stage first")
        return path

    # -- stages ----------------------------------------------------------

    def train_model(self, which: str):
        spec = self.cfg[which]
        artifact = f"{which}.spxw"
        key = _stage_key(spec, _corpus_hash(self._corpus()))
        if self._fresh(which, key, artifact):
            return self.out / artifact
        model = init_model(ModelConfig(**spec["model"]))
        model, history = train_language_model(model, self._corpus(), TrainConfig(**spec["train"]))
        save_weights(model, self.out / artifact)
        (self.out / f"{which}_loss.json").write_text(json.dumps(history))
        self._done(which, key)
        return self.out / artifact

    def train_predictors(self):
        pcfg = self.cfg["predictors"]
        target_path = self._require("target.spxw", "train-model")
        draft_path = self._require("draft.spxw", "train-draft")
        key = _stage_key(pcfg, weight_fingerprint(target_path), weight_fingerprint(draft_path))
        if self._fresh("predictors", key, "predictors.spxp"):
            return self.out / "predictors.spxp"
        target = load_weights(target_path)
        draft = load_weights(draft_path)
        layers = list(range(target.config.num_layers - 1))
        examples = collect_training_data(
            target, draft, self._corpus(), layers, k=pcfg["k"], **pcfg["collect"])
        bank = {}
        stats = {}
        tcfg = PredictorTrainConfig(epochs=pcfg["train"]["epochs"], lr=pcfg["train"]["lr"],
                                    seed=pcfg["train"]["seed"])
        for l in layers:
            subset = [e for e in examples if e.layer == l]
            w, history, acc = train_predictor(
                subset, replace(tcfg, seed=rng.derive(tcfg.seed, l)),
                hidden=pcfg["hidden"], threshold=pcfg["threshold"])
            bank[l] = w
            pos = sum(e.label for e in subset)
            stats[l] = {"examples": len(subset), "positives": pos,
                        "train_accuracy": acc, "final_loss": history[-1]}
        save_predictors(bank, self.out / "predictors.spxp")
        (self.out / "predictor_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
        self._done("predictors", key)
        return self.out / "predictors.spxp"

    def profile(self):
        pcfg = self.cfg["profile"]
        target_path = self._require("target.spxw", "train-model")
        self._require("draft.spxw", "train-draft")
        self._require("predictors.spxp", "train-predictors")
        fingerprint = weight_fingerprint(target_path)
        key = _stage_key(pcfg, self.cfg["predictors"], fingerprint)
        if self._fresh("profile", key, "profile.spxs"):
            return self.out / "profile.spxs"
        target, draft, bank = self._load_models()
        econf = EngineConfig(k=self.cfg["predictors"]["k"],
                             threshold=self.cfg["predictors"]["threshold"], schedule_mode="all")

        def run(prompt):
            engine = ExitEngine(target, draft, PredictorPolicy(bank), econf)
            _, trace = engine.generate(prompt, pcfg["max_new"])
            return trace

        prompts = corpus_prompts(self._corpus(), pcfg["num_prompts"], pcfg["prompt_len"],
                                 pcfg["seed"])
        prof = profile_offline(run, prompts, target.config.num_layers, fingerprint)
        save_profile(prof, self.out / "profile.spxs")
        self._done("profile", key)
        return self.out / "profile.spxs"

    def bench(self):
        bcfg = self.cfg["bench"]
        target_path = self._require("target.spxw", "train-model")
        self._require("predictors.spxp", "train-predictors")
        profile_path = self._require("profile.spxs", "profile")
        key = _stage_key(bcfg, self.cfg["schedule"], weight_fingerprint(target_path))
        target, draft, bank = self._load_models()
        prof = load_profile(profile_path, expect_fingerprint=weight_fingerprint(target_path))
        sched = ScheduleConfig(queue_len=self.cfg["schedule"]["queue_len"],
                               radius=self.cfg["schedule"]["radius"],
                               offline_top_k=self.cfg["schedule"]["offline_top_k"])
        econf = EngineConfig(k=self.cfg["predictors"]["k"],
                             threshold=self.cfg["predictors"]["threshold"],
                             schedule_mode=bcfg["mode"])
        prompts = corpus_prompts(self._corpus(), bcfg["num_prompts"], bcfg["prompt_len"],
                                 bcfg["seed"])
        full_tokens, oracle_layers = [], []
        greedy = []
        for prompt in prompts:
            toks, olayers = greedy_generate(target, prompt, bcfg["max_new"])
            greedy.append(toks)
            full_tokens.extend(toks)
            oracle_layers.extend(olayers)

        # position-aligned early-exit evaluation along the greedy stream
        trace = []
        t0 = time.perf_counter()
        for prompt, toks in zip(prompts, greedy):
            engine = ExitEngine(target, draft, PredictorPolicy(bank), econf,
                                profile=prof, schedule_config=sched)
            trace.extend(engine.generate_forced(prompt, toks))
        elapsed = time.perf_counter() - t0

        confusion = predictor_confusion(target, draft, bank, self._corpus(),
                                        k=econf.k, num_prompts=min(4, bcfg["num_prompts"]),
                                        prompt_len=bcfg["prompt_len"],
                                        max_new=bcfg["max_new"], seed=bcfg["seed"])
        report = compute_metrics(trace, oracle_layers, full_tokens,
                                 tokens_per_second=0.0, per_layer=confusion,
                                 dataset=Path(self.cfg["corpus"]).name)
        sim = context_similarity(oracle_layers, target.config.num_layers, sched)
        write_trace(trace, self.out / "trace.jsonl")
        (self.out / "report.json").write_text(report.to_json())
        (self.out / "similarity.json").write_text(json.dumps(sim, sort_keys=True))
        (self.out / "report.txt").write_text(report.table() + "\n")
        # wall-clock kept out of the deterministic report
        (self.out / "timing.json").write_text(json.dumps(
            {"tokens_per_second": len(trace) / elapsed if elapsed > 0 else 0.0}))
        self._done("bench", key)
        return report

    def _load_models(self):
        target = load_weights(self.out / "target.spxw")
        draft = load_weights(self.out / "draft.spxw")
        bank = load_predictors(self.out / "predictors.spxp")
        return target, draft, bank

    def run_all(self):
        self.train_model("target")
        self.train_model("draft")
        self.train_predictors()
        self.profile()
        return self.bench()


def _corpus_hash(data: bytes):
    return hashlib.sha256(data).hexdigest()


def corpus_prompts(corpus: bytes, num_prompts: int, prompt_len: int, seed: int):
    """Deterministic prompt slices from a byte corpus."""
    data = np.frombuffer(corpus, dtype=np.uint8)
    if data.size < prompt_len:
        raise ValueError("corpus shorter than prompt length")
    starts = rng.splitmix64(seed, num_prompts) % np.uint64(data.size - prompt_len + 1)
    return [[int(b) for b in data[int(s) : int(s) + prompt_len]] for s in starts]


def context_similarity(exit_layers, num_layers: int, sched: ScheduleConfig):
    """Hit rate of each token's exit layer inside the online neighborhood
    set built from the preceding tokens, against the base rate a uniformly
    placed set of the same size would get."""
    from .scheduler import OnlineState, update_online

    state = OnlineState(num_layers, sched)
    hits = 0
    base = 0.0
    n = 0
    for e in exit_layers:
        if state.queue:
            hot = [i for i in range(num_layers) if state.neighbor_counts[i] > 0]
            hits += int(e in hot)
            base += len(hot) / num_layers
            n += 1
        update_online(state, int(e))
    hit_rate = hits / n if n else 0.0
    base_rate = base / n if n else 0.0
    return {"hit_rate": hit_rate, "base_rate": base_rate,
            "ratio": hit_rate / base_rate if base_rate else None, "tokens": n}


def run_pipeline(config: dict):
    return Pipeline(config).run_all()
