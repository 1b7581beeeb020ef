"""Early exiting under tree-based speculative decoding.

Each root-to-leaf path of the draft tree is treated as one hyper-token:
the path exits at a layer only when every node on it is ready (the
rearmost/Cannikin rule, realized as a per-layer conjunction of node
decisions).  Speculative-head logits for all tree nodes are computed in
one batched pass.  Acceptance is deterministic greedy token matching, so
with exits disabled the committed stream equals vanilla greedy decoding.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .model import DecodeState, TransformerModel, full_head_logits, layer_norm
from .predictor import decide_exit, extract_features, uniform_probs
from .scheduler import OfflineProfile, OnlineState, ScheduleConfig, active_layers, update_online
from .speculation import SpeculativeSet, TokenTree, build_token_tree, enumerate_paths, propose_topk
from .engine import EngineConfig, oracle_exit_layer


@dataclass
class HyperToken:
    path: list                 # node indices, depth 1..leaf
    per_node_spec: list        # SpeculativeSet per path node (children for
    #                            internal nodes, frontier proposal for leaf)
    per_node_feature_spec: list = None  # fixed-size (k) set for predictor
    #                            features; children are its leading entries

    def feature_spec(self, pos):
        if self.per_node_feature_spec is None:
            return self.per_node_spec[pos]
        return self.per_node_feature_spec[pos]


@dataclass
class TreeStepResult:
    accepted_tokens: list
    correction_token: int
    path_exit_layers: list     # per hyper-token, leaf order
    accepted_path: int         # index of the winning hyper-token
    predictor_evals: int
    num_paths: int
    max_path_len: int
    scheduled_layer_count: int


def merge_paths(tree: TokenTree, draft: TransformerModel = None, context=None, k: int = 4):
    """One HyperToken per leaf.  Internal nodes carry their children as the
    speculative set (the draft already proposed exactly those); leaves get
    a fresh draft proposal over their full path context.

    Each node additionally gets a fixed-size feature set: the draft's top-k
    at the node's own context.  Internal-node children are the leading
    entries of that set (they came from the same ranked distribution), so
    predictors trained on k-dim features apply to every tree node.
    """
    paths = enumerate_paths(tree)
    hypertokens = []
    child_map = {}
    for j, n in enumerate(tree.nodes):
        child_map.setdefault(n.parent, []).append(j)
    topk_cache = {}

    def node_topk(idx, path):
        if idx not in topk_cache:
            if draft is None or context is None:
                raise ValueError("speculative sets need the draft model and context")
            upto = path[: path.index(idx) + 1]
            toks = [tree.nodes[i].token for i in upto]
            topk_cache[idx] = propose_topk(draft, list(context) + toks, k)
        return topk_cache[idx]

    for path in paths:
        specs = []
        fspecs = []
        for idx in path:
            kids = child_map.get(idx)
            fspecs.append(node_topk(idx, path))
            if kids:
                specs.append(SpeculativeSet(
                    tokens=tuple(tree.nodes[c].token for c in kids),
                    draft_probs=tuple(tree.nodes[c].prob for c in kids)))
            else:
                specs.append(fspecs[-1])
        hypertokens.append(HyperToken(path=path, per_node_spec=specs,
                                      per_node_feature_spec=fspecs))
    return hypertokens


def grouped_speculative_logits(model: TransformerModel, hiddens, token_id_lists):
    """Sliced-head logits for many tree nodes in one batched pass.

    hiddens: (n, hidden_dim) float32, one row per node.  Returns a ragged
    list; row j holds the logits of token_id_lists[j].  Each row is
    bit-identical to sliced_head_logits on that node alone: normalization
    and the head matmul are row-independent with fixed accumulation order.
    """
    hiddens = np.asarray(hiddens, dtype=np.float32)
    if hiddens.ndim != 2 or hiddens.shape[0] < 1:
        raise ValueError("need at least one node hidden state")
    if len(token_id_lists) != hiddens.shape[0]:
        raise ValueError("one id list per node required")
    v = model.config.vocab_size
    for ids in token_id_lists:
        if len(ids) == 0:
            raise ValueError("empty token id list")
        if min(ids) < 0 or max(ids) >= v:
            raise ValueError("token id out of range")
    normed = layer_norm(hiddens, model["final_norm.g"], model["final_norm.b"])
    full = kernels.matmul(normed, model["lm_head"])
    return [full[j, np.asarray(ids, dtype=np.int64)] for j, ids in enumerate(token_id_lists)]


def hypertoken_exit_decision(per_node_probs, threshold: float) -> bool:
    """Conjunction over the path: the slowest node gates the whole
    hyper-token (rearmost-exit semantics evaluated layer by layer)."""
    probs = list(per_node_probs)
    if not probs:
        raise ValueError("need at least one node probability")
    return all(decide_exit(p, threshold) for p in probs)


def hypertoken_oracle_exit(target: TransformerModel, context, path_tokens) -> int:
    """Rearmost of the per-node oracle exit layers along a path."""
    context = list(context)
    layers = [oracle_exit_layer(target, context + list(path_tokens[:j]))
              for j in range(len(path_tokens))]
    return max(layers)


class TreeEngine:
    """Tree speculative decoding with hyper-token early exits."""

    def __init__(self, target: TransformerModel, draft: TransformerModel, policy,
                 branching=(3, 2), config: EngineConfig = EngineConfig(),
                 profile: OfflineProfile = None,
                 schedule_config: ScheduleConfig = ScheduleConfig()):
        if config.schedule_mode == "two-level" and profile is None:
            raise ValueError("two-level scheduling needs an offline profile")
        self.target = target
        self.draft = draft
        self.policy = policy
        self.branching = tuple(branching)
        self.config = config
        self.profile = profile
        self.schedule_config = schedule_config
        self.online = OnlineState(target.config.num_layers, schedule_config)
        self.tstate = None
        self.context = None

    def start(self, prompt):
        prompt = list(prompt)
        if not prompt:
            raise ValueError("empty prompt")
        self.tstate = DecodeState(self.target)
        if len(prompt) > 1:
            self.tstate.begin(prompt[:-1])
            for l in range(self.target.config.num_layers):
                self.tstate.run_layer(l)
        self.context = prompt
        self.policy.start(prompt)

    def _active_layers(self):
        L = self.target.config.num_layers
        if self.config.schedule_mode == "all":
            return list(range(L - 1))
        return active_layers(self.profile, self.online, self.schedule_config)

    def step(self) -> TreeStepResult:
        cfg = self.target.config
        L = cfg.num_layers
        tree = build_token_tree(self.draft, self.context, self.branching)
        hts = merge_paths(tree, self.draft, self.context, self.config.k)
        paths = [ht.path for ht in hts]
        n_nodes = len(tree.nodes)          # includes the root at index 0
        m = len(self.context) - 1          # committed, already-forwarded positions

        # one forward block: root (= last un-forwarded context token) plus
        # every tree node, with ancestor-only attention and depth-shifted
        # positional ids.
        tokens = [n.token for n in tree.nodes]
        pos_ids = [m + n.depth for n in tree.nodes]
        attn_lists = [None]
        ancestors = {0: [0]}
        for j in range(1, n_nodes):
            ancestors[j] = ancestors[tree.nodes[j].parent] + [j]
            attn_lists.append(list(range(m)) + [m + a for a in ancestors[j]])
        rows = self.tstate.begin(tokens, pos_ids=pos_ids, attn_lists=attn_lists)

        active_set = set(self._active_layers())
        prev_local = {j: None for j in range(1, n_nodes)}
        live = set(range(len(paths)))
        exit_layer = [L - 1] * len(paths)
        preds = [None] * len(paths)        # per path: argmax chain [root, n1, ..]
        evals = 0
        hidden = None
        for l in range(L):
            hidden = self.tstate.run_layer(l)
            if not live:
                break
            if l in active_set and l <= L - 2:
                live_nodes = sorted({j for p in live for j in paths[p]})
                id_lists = []
                node_rows = []
                for j in live_nodes:
                    spec = self._node_feature_spec(hts, j)
                    id_lists.append(spec.tokens)
                    node_rows.append(hidden[j])
                logits = grouped_speculative_logits(self.target, np.stack(node_rows), id_lists)
                probs = {}
                for jj, j in enumerate(live_nodes):
                    prev = prev_local[j]
                    if prev is None:
                        prev = uniform_probs(len(id_lists[jj]))
                    fv = extract_features(logits[jj], prev)
                    prev_local[j] = fv.local_probs
                    probs[j] = self.policy.exit_prob(l, fv, hidden[j])
                    evals += 1
                for p in sorted(live):
                    if hypertoken_exit_decision([probs[j] for j in paths[p]], self.config.threshold):
                        chain = self._verify_path(hts[p], hidden, l)
                        if chain is not None:
                            exit_layer[p] = l
                            preds[p] = chain
                            live.discard(p)
                # stop advancing rows no node of a live path still needs
                keep = {j for p in live for j in paths[p]} | ({0} if live else set())
                self.tstate.freeze(rows[j] for j in range(n_nodes) if j not in keep)
            if not live:
                break

        for p in list(live):
            preds[p] = self._argmax_chain(hts[p], hidden)
        self.tstate.unfreeze_all()

        # greedy acceptance: longest path whose tokens match the target's
        # own argmax chain; ties go to the earlier leaf.
        best_p, best_len = 0, -1
        for p, ht in enumerate(hts):
            chain = preds[p]
            n_ok = 0
            for t, idx in enumerate(ht.path):
                if tree.nodes[idx].token == chain[t]:
                    n_ok += 1
                else:
                    break
            if n_ok > best_len:
                best_p, best_len = p, n_ok
        ht = hts[best_p]
        accepted_nodes = ht.path[:best_len]
        accepted_tokens = [tree.nodes[j].token for j in accepted_nodes]
        correction = preds[best_p][best_len]

        self.tstate.compact([rows[0]] + [rows[j] for j in accepted_nodes], m)
        self.context.extend(accepted_tokens + [correction])
        for _ in range(len(accepted_tokens) + 1):
            update_online(self.online, exit_layer[best_p])

        return TreeStepResult(
            accepted_tokens=accepted_tokens, correction_token=correction,
            path_exit_layers=exit_layer, accepted_path=best_p,
            predictor_evals=evals, num_paths=len(paths),
            max_path_len=max(len(p) for p in paths),
            scheduled_layer_count=max(len(active_set), 1))

    def _node_feature_spec(self, hts, node_idx) -> SpeculativeSet:
        for ht in hts:
            if node_idx in ht.path:
                return ht.feature_spec(ht.path.index(node_idx))
        raise KeyError(node_idx)

    def _verify_path(self, ht: HyperToken, hidden, layer):
        """Full-head argmax chain for root + path nodes; None unless every
        path node's argmax lands inside its speculative set."""
        chain = [int(np.argmax(full_head_logits(self.target, hidden[0])))]
        for idx, spec in zip(ht.path, ht.per_node_spec):
            am = int(np.argmax(full_head_logits(self.target, hidden[idx])))
            if am not in spec.tokens:
                return None
            chain.append(am)
        return chain

    def _argmax_chain(self, ht: HyperToken, hidden):
        chain = [int(np.argmax(full_head_logits(self.target, hidden[0])))]
        for idx in ht.path:
            chain.append(int(np.argmax(full_head_logits(self.target, hidden[idx]))))
        return chain

    def generate(self, prompt, max_new: int):
        """Commit at least max_new tokens; returns (tokens, step results)."""
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        self.start(prompt)
        steps = []
        produced = []
        while len(produced) < max_new:
            res = self.step()
            steps.append(res)
            produced.extend(res.accepted_tokens + [res.correction_token])
        return produced[:max_new], steps
