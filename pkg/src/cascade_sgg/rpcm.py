"""Relation predictor: bi-context message passing plus prototype matching.

Entities and relations (selected pairs) exchange attention-weighted messages
for L iterations; each iteration fuses the global (messaged) features with
the local initial ones through a learned gate. Relation features are then
matched by cosine similarity against per-class prototypes built from label
word vectors, with a learned background prototype at index 0.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

ENTITY_TYPES = ("ee", "rs", "ro")
RELATION_TYPES = ("rr", "sr", "or")
MESSAGE_TYPES = ENTITY_TYPES + RELATION_TYPES
# (receiver kind, sender kind) per message type; "e" entity, "r" relation
_KINDS = {"ee": ("e", "e"), "rs": ("e", "r"), "ro": ("e", "r"),
          "rr": ("r", "r"), "sr": ("r", "e"), "or": ("r", "e")}
NORM_EPS = 1e-12
LEAKY_SLOPE = 0.2


class PrototypeError(ValueError):
    pass


# -- graph ------------------------------------------------------------------

def _unique_rows(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if len(a) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    rows = np.unique(np.column_stack([a, b]).astype(np.int64), axis=0)
    return rows[:, 0], rows[:, 1]


@dataclass(frozen=True)
class GraphAdjacency:
    """Edge lists (receiver, sender) for each message type, sorted."""

    num_entities: int
    subjects: np.ndarray
    objects: np.ndarray
    edges: dict = field(compare=False)

    @property
    def num_relations(self) -> int:
        return len(self.subjects)


def build_adjacency(num_entities: int, subjects, objects) -> GraphAdjacency:
    """Sparse pair graph. Relation neighbours share an endpoint entity."""
    s = np.asarray(subjects, dtype=np.int64).reshape(-1)
    o = np.asarray(objects, dtype=np.int64).reshape(-1)
    if len(s) != len(o):
        raise ValueError("subjects and objects must have equal length")
    if len(s) and (min(s.min(), o.min()) < 0 or max(s.max(), o.max()) >= num_entities):
        raise ValueError("relation endpoint outside the entity range")
    rel = np.arange(len(s), dtype=np.int64)
    edges = {}
    a = np.concatenate([s, o])
    b = np.concatenate([o, s])
    keep = a != b
    edges["ee"] = _unique_rows(a[keep], b[keep])
    edges["rs"] = (s.copy(), rel.copy())
    edges["ro"] = (o.copy(), rel.copy())
    edges["sr"] = (rel.copy(), s.copy())
    edges["or"] = (rel.copy(), o.copy())

    inc_ent = np.concatenate([s, o])
    inc_rel = np.concatenate([rel, rel])
    order = np.lexsort((inc_rel, inc_ent))
    inc_ent, inc_rel = inc_ent[order], inc_rel[order]
    recv, send = [], []
    bounds = np.flatnonzero(np.diff(inc_ent)) + 1
    for group in np.split(inc_rel, bounds):
        g = np.unique(group)
        if len(g) > 1:
            x, y = np.meshgrid(g, g, indexing="ij")
            m = x != y
            recv.append(x[m])
            send.append(y[m])
    if recv:
        edges["rr"] = _unique_rows(np.concatenate(recv), np.concatenate(send))
    else:
        edges["rr"] = (np.zeros(0, np.int64), np.zeros(0, np.int64))
    return GraphAdjacency(int(num_entities), s, o, edges)


@dataclass
class GraphState:
    entity: torch.Tensor
    relation: torch.Tensor
    entity0: torch.Tensor
    relation0: torch.Tensor
    adjacency: GraphAdjacency
    iteration: int = 0

    def __post_init__(self):
        if self.entity.shape[0] != self.adjacency.num_entities:
            raise ValueError("entity rows do not match the adjacency")
        if self.relation.shape[0] != self.adjacency.num_relations:
            raise ValueError("relation rows do not match the adjacency")

    @classmethod
    def initial(cls, entity0: torch.Tensor, relation0: torch.Tensor, adjacency: GraphAdjacency) -> "GraphState":
        return cls(entity0, relation0, entity0, relation0, adjacency, 0)


# -- message passing --------------------------------------------------------

class MessagingParams(nn.Module):
    """Six message weights, per-type attention vectors and the two fusion gates."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        scale = 1.0 / np.sqrt(dim)
        self.weights = nn.ParameterDict(
            {t: nn.Parameter(torch.randn(dim, dim, dtype=torch.float64) * scale) for t in MESSAGE_TYPES})
        self.att_recv = nn.ParameterDict(
            {t: nn.Parameter(torch.randn(dim, dtype=torch.float64) * scale) for t in MESSAGE_TYPES})
        self.att_send = nn.ParameterDict(
            {t: nn.Parameter(torch.randn(dim, dtype=torch.float64) * scale) for t in MESSAGE_TYPES})
        # sigmoid(0) = 0.5: start halfway between global and local
        self.gate_entity = nn.Parameter(torch.zeros(dim, dtype=torch.float64))
        self.gate_relation = nn.Parameter(torch.zeros(dim, dtype=torch.float64))

    def gates(self) -> tuple[torch.Tensor, torch.Tensor]:
        return torch.sigmoid(self.gate_entity), torch.sigmoid(self.gate_relation)


def _segment_softmax(scores: torch.Tensor, receivers: torch.Tensor, n: int) -> torch.Tensor:
    mx = torch.full((n,), -torch.inf, dtype=scores.dtype).scatter_reduce(
        0, receivers, scores.detach(), reduce="amax", include_self=True)
    e = torch.exp(scores - mx[receivers])
    den = torch.zeros(n, dtype=scores.dtype).index_add(0, receivers, e)
    return e / den[receivers]


def attention(state: GraphState, params: MessagingParams, mtype: str):
    """(receivers, senders, alpha) for one message type."""
    recv_np, send_np = state.adjacency.edges[mtype]
    recv = torch.as_tensor(recv_np)
    send = torch.as_tensor(send_np)
    rk, sk = _KINDS[mtype]
    h_recv = state.entity if rk == "e" else state.relation
    h_send = state.entity if sk == "e" else state.relation
    if len(recv) == 0:
        return recv, send, torch.zeros(0, dtype=h_recv.dtype)
    logits = F.leaky_relu(h_recv[recv] @ params.att_recv[mtype] + h_send[send] @ params.att_send[mtype],
                          LEAKY_SLOPE)
    return recv, send, _segment_softmax(logits, recv, h_recv.shape[0])


def _messages(state: GraphState, params: MessagingParams, mtype: str) -> torch.Tensor:
    rk, sk = _KINDS[mtype]
    h_send = state.entity if sk == "e" else state.relation
    n_recv = state.entity.shape[0] if rk == "e" else state.relation.shape[0]
    recv, send, alpha = attention(state, params, mtype)
    agg = torch.zeros(n_recv, h_send.shape[1], dtype=h_send.dtype)
    if len(recv):
        agg = agg.index_add(0, recv, alpha[:, None] * h_send[send])
    return agg @ params.weights[mtype].T


def entity_message_update(state: GraphState, params: MessagingParams) -> torch.Tensor:
    """sigmoid of messages from neighbour entities, subject-of and object-of relations."""
    return torch.sigmoid(sum(_messages(state, params, t) for t in ENTITY_TYPES))


def relation_message_update(state: GraphState, params: MessagingParams) -> torch.Tensor:
    """sigmoid of messages from endpoint-sharing relations, the subject and the object."""
    return torch.sigmoid(sum(_messages(state, params, t) for t in RELATION_TYPES))


def global_local_fuse(global_: torch.Tensor, local: torch.Tensor, gate) -> torch.Tensor:
    """gate * global + (1 - gate) * local."""
    if global_.shape != local.shape:
        raise ValueError(f"shape mismatch: {tuple(global_.shape)} vs {tuple(local.shape)}")
    gate = torch.as_tensor(gate, dtype=global_.dtype)
    return gate * global_ + (1 - gate) * local


def pba_step(state: GraphState, params: MessagingParams) -> GraphState:
    """One synchronous iteration: both updates read iteration-i features."""
    ge, gr = params.gates()
    ent = global_local_fuse(entity_message_update(state, params), state.entity0, ge)
    rel = global_local_fuse(relation_message_update(state, params), state.relation0, gr)
    return replace(state, entity=ent, relation=rel, iteration=state.iteration + 1)


def pba_run(state: GraphState, params: MessagingParams, iterations: int) -> GraphState:
    """Apply ``iterations`` steps; the returned state's ``relation`` rows are Rel."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    for _ in range(iterations):
        state = pba_step(state, params)
    return state


# -- prototypes -------------------------------------------------------------

_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(label: str) -> list[str]:
    return _TOKEN.findall(label.lower().replace("_", " "))


def load_word_vectors(text: str | None = None) -> dict[str, np.ndarray]:
    if text is None:
        text = (resources.files("cascade_sgg") / "data" / "word_vectors.txt").read_text()
    table = {}
    for line in text.splitlines():
        parts = line.split()
        if parts:
            table[parts[0]] = np.array([float(v) for v in parts[1:]])
    return table


def hashed_vector(token: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(token.encode()).digest()[:8], "little")
    v = np.random.default_rng(seed).normal(size=dim)
    return v / np.linalg.norm(v)


def init_prototypes(labels, table: dict[str, np.ndarray], hash_fallback: bool = False) -> np.ndarray:
    """Row c is the mean of the word vectors of label c's tokens.

    Unknown tokens are skipped, or hashed to a fixed vector when
    ``hash_fallback`` is set. A label with no usable token is an error.
    """
    if not table:
        raise PrototypeError("empty embedding table")
    dim = len(next(iter(table.values())))
    rows = []
    for label in labels:
        vecs = []
        for tok in tokenize(label):
            if tok in table:
                vecs.append(np.asarray(table[tok], dtype=np.float64))
            elif hash_fallback:
                vecs.append(hashed_vector(tok, dim))
        if not vecs:
            raise PrototypeError(f"no known tokens in label {label!r}")
        rows.append(np.mean(vecs, axis=0))
    return np.stack(rows) if rows else np.zeros((0, dim))


def _head(d_in: int, d_hidden: int, d_out: int, activation: str = "relu") -> nn.Sequential:
    act = {"relu": nn.ReLU, "tanh": nn.Tanh, "identity": nn.Identity}[activation]
    return nn.Sequential(nn.Linear(d_in, d_hidden), act(), nn.Linear(d_hidden, d_out))


class PrototypeBank(nn.Module):
    """Prototype encoder and the two projection heads into the joint space.

    With ``background`` set, a learned vector is prepended to the label
    embeddings so prototype 0 stands for "no relation".
    """

    def __init__(self, labels, word_vectors: np.ndarray, rel_dim: int, joint_dim: int = 64,
                 hidden: int | None = None, background: bool = True, share_heads: bool = False,
                 activation: str = "relu"):
        super().__init__()
        self.labels = tuple(labels)
        word_vectors = np.asarray(word_vectors, dtype=np.float64)
        if len(self.labels) != len(word_vectors):
            raise PrototypeError("one word vector per label is required")
        d_word = word_vectors.shape[1]
        hidden = hidden or max(rel_dim, joint_dim)
        self.background = background
        self.share_heads = share_heads
        self.register_buffer("tokens", torch.as_tensor(word_vectors))
        self.bg_token = nn.Parameter(0.1 * torch.randn(d_word, dtype=torch.float64)) if background else None
        self.enc_p = _head(d_word, hidden, rel_dim, activation)
        self.map_r = _head(rel_dim, hidden, joint_dim, activation)
        self.map_p = self.map_r if share_heads else _head(rel_dim, hidden, joint_dim, activation)
        self.double()

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    @property
    def offset(self) -> int:
        """Index of relation class 0 among the prototypes."""
        return 1 if self.background else 0

    def prototypes(self) -> torch.Tensor:
        t = self.tokens
        if self.background:
            t = torch.cat([self.bg_token[None], t], dim=0)
        return self.enc_p(t)

    def export_text(self) -> str:
        with torch.no_grad():
            _, p, _, _ = project_to_joint_space(self, torch.zeros(0, self.map_r[0].in_features, dtype=torch.float64))
        names = (["<background>"] if self.background else []) + list(self.labels)
        return "".join(f"{n}\t" + " ".join(f"{v:.6f}" for v in row) + "\n" for n, row in zip(names, p.numpy()))


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    n = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if x.numel() and bool((n <= NORM_EPS).any()):
        raise PrototypeError("zero vector at normalization")
    return x / n


def project_to_joint_space(bank: PrototypeBank, rel: torch.Tensor):
    """(r, p, r_bar, p_bar): r = MAP_r(Rel), p = MAP_p(Enc_p(T))."""
    r = bank.map_r(rel)
    p = bank.map_p(bank.prototypes())
    return r, p, l2_normalize(r), l2_normalize(p)


# -- losses -----------------------------------------------------------------

def loss_instance_contrastive(r_bar: torch.Tensor, p_bar: torch.Tensor, targets, tau: float) -> torch.Tensor:
    """Mean cross-entropy of cosine logits / tau against the target prototype."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    targets = torch.as_tensor(targets, dtype=torch.long).reshape(-1)
    r_bar = r_bar.reshape(len(targets), -1)
    if len(targets) == 0:
        return torch.zeros((), dtype=p_bar.dtype)
    return F.cross_entropy(r_bar @ p_bar.T / tau, targets)


def loss_instance_distance(r_true: torch.Tensor, r_neg: torch.Tensor, prototype: torch.Tensor,
                           gamma1: float) -> torch.Tensor:
    """Mean of max(0, |r_true - p|^2 - |r_neg - p|^2 + gamma1) over rows."""
    if gamma1 < 0:
        raise ValueError("gamma1 must be >= 0")
    r_true, r_neg, prototype = (torch.atleast_2d(t) for t in (r_true, r_neg, prototype))
    if r_true.shape[0] == 0:
        return torch.zeros((), dtype=r_true.dtype)
    q_pos = ((r_true - prototype) ** 2).sum(1)
    q_neg = ((r_neg - prototype) ** 2).sum(1)
    return torch.clamp(q_pos - q_neg + gamma1, min=0).mean()


def hard_negatives(r_bar: torch.Tensor, targets, carries, p_bar: torch.Tensor):
    """Closest sample (to the true prototype) whose pair does not carry the true class.

    ``carries[j, c]`` says sample j's pair holds prototype class c. Returns
    (anchor rows, negative rows) for samples that have a valid negative.
    """
    targets = torch.as_tensor(targets, dtype=torch.long)
    carries = torch.as_tensor(np.asarray(carries), dtype=torch.bool)
    with torch.no_grad():
        d = torch.cdist(r_bar, p_bar) ** 2 if len(targets) else torch.zeros(0, p_bar.shape[0])
        d = d.masked_fill(carries, torch.inf)
        cand = d[:, targets]                       # (negative j, anchor i)
        best = torch.argmin(cand, dim=0)
        ok = torch.isfinite(cand[best, torch.arange(len(targets))])
    anchors = torch.arange(len(targets))[ok]
    return anchors, best[ok]


def loss_prototype_contrast(p_bar: torch.Tensor) -> torch.Tensor:
    """L2,1 norm of the prototype cosine-similarity matrix, diagonal included."""
    return torch.linalg.vector_norm(p_bar @ p_bar.T, dim=1).sum()


def loss_prototype_distance(p_bar: torch.Tensor, k: int, gamma2: float, reduction: str = "mean") -> torch.Tensor:
    """Hinge max(0, gamma2 - d) on the k smallest off-diagonal squared distances."""
    c = p_bar.shape[0]
    if not 1 <= k <= c * (c - 1):
        raise ValueError(f"k must lie in [1, {c * (c - 1)}]")
    if gamma2 < 0:
        raise ValueError("gamma2 must be >= 0")
    diff = p_bar[:, None, :] - p_bar[None, :, :]
    d = (diff ** 2).sum(-1)
    off = d[~torch.eye(c, dtype=torch.bool)]
    smallest = torch.topk(off, k, largest=False).values
    hinge = torch.clamp(gamma2 - smallest, min=0)
    return hinge.mean() if reduction == "mean" else hinge.sum()


def rpcm_total_loss(ic, id_, pc, pd) -> torch.Tensor:
    return ic + id_ + pc + pd


# -- prediction -------------------------------------------------------------

@dataclass(frozen=True)
class RelationPrediction:
    similarities: np.ndarray      # cosine, in [-1, 1]
    relation_class: int           # index into the prototype rows given
    score: float                  # softmax(s / tau) at the argmax


def predict_relation(r, p_bar, tau: float) -> RelationPrediction:
    """Cosine match of one relation vector; ties go to the lowest index.

    Dividing by tau scales every similarity alike, so the argmax is taken on
    the cosines themselves.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    r = torch.as_tensor(np.asarray(r) if not isinstance(r, torch.Tensor) else r, dtype=torch.float64)
    p_bar = torch.as_tensor(np.asarray(p_bar) if not isinstance(p_bar, torch.Tensor) else p_bar,
                            dtype=torch.float64)
    s = (l2_normalize(r.reshape(1, -1)) @ p_bar.T)[0].detach().numpy()
    cls = int(np.argmax(s))
    z = s / tau
    prob = np.exp(z - z.max())
    return RelationPrediction(s, cls, float(prob[cls] / prob.sum()))


# -- full model -------------------------------------------------------------

@dataclass(frozen=True)
class RpcmConfig:
    dim: int = 64
    joint_dim: int = 64
    iterations: int = 4
    tau: float = 0.1
    gamma1: float = 1.0
    gamma2: float = 1.0
    k: int | None = None
    background: bool = True
    share_heads: bool = False
    pd_reduction: str = "mean"

    def neighbour_count(self, num_prototypes: int) -> int:
        return self.k if self.k is not None else min(5, num_prototypes * (num_prototypes - 1))


@dataclass
class GraphInputs:
    entity_x: torch.Tensor
    relation_x: torch.Tensor
    adjacency: GraphAdjacency


class RelationPredictor(nn.Module):
    def __init__(self, entity_in: int, relation_in: int, labels, word_vectors, config: RpcmConfig = RpcmConfig()):
        super().__init__()
        self.config = config
        self.entity_in = nn.Linear(entity_in, config.dim)
        self.relation_in = nn.Linear(relation_in, config.dim)
        self.messaging = MessagingParams(config.dim)
        self.bank = PrototypeBank(labels, word_vectors, config.dim, config.joint_dim,
                                  background=config.background, share_heads=config.share_heads)
        self.double()

    def initial_state(self, inputs: GraphInputs) -> GraphState:
        e0 = torch.tanh(self.entity_in(inputs.entity_x))
        r0 = torch.tanh(self.relation_in(inputs.relation_x))
        return GraphState.initial(e0, r0, inputs.adjacency)

    def relation_features(self, inputs: GraphInputs, iterations: int | None = None) -> torch.Tensor:
        state = self.initial_state(inputs)
        if inputs.adjacency.num_relations == 0:
            return state.relation
        return pba_run(state, self.messaging, iterations or self.config.iterations).relation

    def forward(self, inputs: GraphInputs, iterations: int | None = None):
        rel = self.relation_features(inputs, iterations)
        return project_to_joint_space(self.bank, rel)

    def losses(self, inputs: GraphInputs, labels: np.ndarray, sample_pairs, sample_targets) -> dict:
        """All four losses on one (possibly multi-scene) graph.

        ``labels`` is an (R, C) boolean multi-label matrix over relation
        classes; samples are (pair row, prototype index) with index 0 the
        background when enabled.
        """
        cfg = self.config
        _, _, r_bar, p_bar = self(inputs)
        pairs = torch.as_tensor(np.asarray(sample_pairs, dtype=np.int64))
        targets = torch.as_tensor(np.asarray(sample_targets, dtype=np.int64))
        carries_pair = np.zeros((len(labels), p_bar.shape[0]), dtype=bool)
        carries_pair[:, self.bank.offset:] = labels
        if self.bank.background:
            carries_pair[:, 0] = ~labels.any(axis=1)
        rs = r_bar[pairs]
        ic = loss_instance_contrastive(rs, p_bar, targets, cfg.tau)
        anchors, negs = hard_negatives(rs, targets, carries_pair[pairs.numpy()], p_bar)
        id_ = loss_instance_distance(rs[anchors], rs[negs], p_bar[targets[anchors]], cfg.gamma1)
        pc = loss_prototype_contrast(p_bar)
        pd = loss_prototype_distance(p_bar, cfg.neighbour_count(p_bar.shape[0]), cfg.gamma2, cfg.pd_reduction)
        return {"ic": ic, "id": id_, "pc": pc, "pd": pd, "total": rpcm_total_loss(ic, id_, pc, pd)}

    @torch.no_grad()
    def relation_probabilities(self, inputs: GraphInputs, iterations: int | None = None) -> np.ndarray:
        """(R, C) softmax(s / tau) mass per relation class (background column dropped)."""
        _, _, r_bar, p_bar = self(inputs, iterations)
        prob = torch.softmax(r_bar @ p_bar.T / self.config.tau, dim=1)
        return prob[:, self.bank.offset:].numpy()


def build_samples(labels: np.ndarray, background: bool, rng: np.random.Generator | None = None,
                  bg_ratio: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One sample per (pair, carried class); unlabelled pairs become background samples.

    With ``bg_ratio`` set, background samples are subsampled to at most
    ``bg_ratio`` times the number of positive samples.
    """
    labels = np.asarray(labels, dtype=bool)
    off = 1 if background else 0
    pr, cl = np.nonzero(labels)
    pairs, targets = [pr], [cl + off]
    if background:
        bg = np.flatnonzero(~labels.any(axis=1))
        if bg_ratio is not None and len(bg) > bg_ratio * max(len(pr), 1):
            n = int(bg_ratio * max(len(pr), 1))
            bg = np.sort((rng or np.random.default_rng(0)).choice(bg, size=n, replace=False))
        pairs.append(bg)
        targets.append(np.zeros(len(bg), dtype=np.int64))
    return np.concatenate(pairs).astype(np.int64), np.concatenate(targets).astype(np.int64)
