"""Draft-model proposals: top-k speculative sets and token trees.

The draft model is a smaller, independently trained transformer over the
same byte vocabulary.  Its proposals define the reduced search space the
exit predictors work in.  All tie-breaks are by lower token id so results
are identical across platforms.
"""

from dataclasses import dataclass

import numpy as np

from .model import DecodeState, TransformerModel, full_head_logits, softmax_1d


@dataclass(frozen=True)
class SpeculativeSet:
    tokens: tuple        # k distinct token ids, best first
    draft_probs: tuple   # draft-distribution probability of each token

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise ValueError("speculative set must hold at least one token")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("speculative tokens must be distinct")


@dataclass
class TreeNode:
    token: int
    parent: int  # index into TokenTree.nodes, -1 for root
    depth: int
    prob: float = 0.0  # draft probability of this token given its parent path


@dataclass
class TokenTree:
    nodes: list              # TreeNode; nodes[0] is the root (last committed token)
    branching: tuple

    def children(self, idx):
        return [j for j, n in enumerate(self.nodes) if n.parent == idx]

    def path_to(self, idx):
        """Node indices from depth 1 down to idx (root excluded)."""
        path = []
        while idx != 0:
            path.append(idx)
            idx = self.nodes[idx].parent
        return path[::-1]

    def leaves(self):
        parents = {n.parent for n in self.nodes}
        return [i for i in range(len(self.nodes)) if i not in parents]


def topk_from_logits(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest logits, ties broken by lower index."""
    order = np.argsort(-logits, kind="stable")
    return order[:k]


def _draft_next_logits(draft: TransformerModel, context) -> np.ndarray:
    state = DecodeState(draft)
    state.begin(context)
    for l in range(draft.config.num_layers):
        out = state.run_layer(l)
    return full_head_logits(draft, out[-1])


def propose_topk(draft: TransformerModel, context, k: int) -> SpeculativeSet:
    """The k most probable next tokens under the draft model."""
    if len(context) == 0:
        raise ValueError("empty context")
    if k > draft.config.vocab_size:
        raise ValueError("k exceeds vocabulary size")
    logits = _draft_next_logits(draft, context)
    return speculative_set_from_logits(logits, k)


def speculative_set_from_logits(logits: np.ndarray, k: int) -> SpeculativeSet:
    ids = topk_from_logits(logits, k)
    probs = softmax_1d(logits)[ids]
    return SpeculativeSet(tokens=tuple(int(i) for i in ids), draft_probs=tuple(float(p) for p in probs))


def build_token_tree(draft: TransformerModel, context, branching) -> TokenTree:
    """Depth-first draft expansion: every depth-d node gets its top
    branching[d] continuations as children.  Node 0 is the root (the last
    committed context token)."""
    if len(branching) == 0 or any(b < 1 for b in branching):
        raise ValueError("branching must be a non-empty list of positive counts")
    if len(context) == 0:
        raise ValueError("empty context")
    total = 1
    count = 1
    for b in branching:
        count *= b
        total += count
    if len(context) + total > draft.config.max_context:
        raise ValueError("tree exceeds max context")

    nodes = [TreeNode(token=int(context[-1]), parent=-1, depth=0)]
    context = list(context)

    def expand(idx, path_tokens, depth):
        if depth == len(branching):
            return
        spec = propose_topk(draft, context + path_tokens, branching[depth])
        child_ids = []
        for tok, pr in zip(spec.tokens, spec.draft_probs):
            nodes.append(TreeNode(token=tok, parent=idx, depth=depth + 1, prob=pr))
            child_ids.append(len(nodes) - 1)
        for cid, tok in zip(child_ids, spec.tokens):
            expand(cid, path_tokens + [tok], depth + 1)

    expand(0, [], 0)
    nodes_sorted = sorted(range(len(nodes)), key=lambda i: (nodes[i].depth, i))
    remap = {old: new for new, old in enumerate(nodes_sorted)}
    ordered = []
    for old in nodes_sorted:
        n = nodes[old]
        ordered.append(TreeNode(token=n.token, parent=remap[n.parent] if n.parent >= 0 else -1,
                                depth=n.depth, prob=n.prob))
    return TokenTree(nodes=ordered, branching=tuple(branching))


def enumerate_paths(tree: TokenTree):
    """Root-to-leaf node-index paths (root excluded), in leaf order."""
    return [tree.path_to(leaf) for leaf in tree.leaves()]
