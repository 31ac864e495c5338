"""Pair proposal: two adversarially coupled pair autoencoders (PED1, PED2).

Training sees annotated pairs only. A candidate pair is ranked by the
negative of its n=2 reconstruction loss, so pairs resembling annotated ones
float to the top.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .geometry import SPATIAL_DIM, pair_spatial_features

DEFAULT_K1 = 10_000
SCORE_N = 2


class TrainingError(RuntimeError):
    pass


_ACTIVATIONS = {"tanh": nn.Tanh, "relu": nn.ReLU, "sigmoid": nn.Sigmoid, "identity": nn.Identity}


def _mlp(d_in: int, d_hidden: int, d_out: int, activation: str, output: str = "identity") -> nn.Sequential:
    layers = [nn.Linear(d_in, d_hidden), _ACTIVATIONS[activation](), nn.Linear(d_hidden, d_out)]
    if output != "identity":
        layers.append(_ACTIVATIONS[output]())
    return nn.Sequential(*layers)


class PpgModel(nn.Module):
    """E1/D1 form PED1, E2/D2 form PED2. Float64 throughout.

    Decoders end in a sigmoid by default and inputs are min-max scaled to
    [0, 1], which keeps the adversarial error of PED2 bounded. ``shift`` and
    ``scale`` hold that scaler; :meth:`prepare` applies it, the forward pass
    itself does not.
    """

    def __init__(self, d_x: int, d_z: int | None = None, hidden: int | None = None, activation: str = "tanh",
                 output: str = "sigmoid"):
        super().__init__()
        if activation not in _ACTIVATIONS or output not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}/{output!r}")
        d_z = max(1, d_x // 4) if d_z is None else d_z
        hidden = max(d_z, (d_x + d_z) // 2) if hidden is None else hidden
        self.d_x, self.d_z, self.hidden = d_x, d_z, hidden
        self.activation, self.output = activation, output
        self.e1 = _mlp(d_x, hidden, d_z, activation)
        self.d1 = _mlp(d_z, hidden, d_x, activation, output)
        self.e2 = _mlp(d_x, hidden, d_z, activation)
        self.d2 = _mlp(d_z, hidden, d_x, activation, output)
        self.register_buffer("shift", torch.zeros(d_x, dtype=torch.float64))
        self.register_buffer("scale", torch.ones(d_x, dtype=torch.float64))
        self.double()

    @classmethod
    def identity(cls, d_x: int) -> "PpgModel":
        m = cls(d_x, d_z=d_x, hidden=d_x, activation="identity", output="identity")
        with torch.no_grad():
            for lin in m.linears():
                lin.weight.copy_(torch.eye(d_x, dtype=torch.float64))
                lin.bias.zero_()
        return m

    def linears(self) -> list[nn.Linear]:
        return [l for l in self.modules() if isinstance(l, nn.Linear)]

    def ped1_parameters(self):
        return [*self.e1.parameters(), *self.d1.parameters()]

    def ped2_parameters(self):
        return [*self.e2.parameters(), *self.d2.parameters()]

    def ped1(self, x: torch.Tensor) -> torch.Tensor:
        return self.d1(self.e1(x))

    def ped2(self, x: torch.Tensor) -> torch.Tensor:
        return self.d2(self.e2(x))

    def fit_scaler(self, x) -> None:
        """Min-max scale training rows into [0, 1] per column."""
        x = torch.as_tensor(np.asarray(x), dtype=torch.float64)
        with torch.no_grad():
            lo, hi = x.min(0).values, x.max(0).values
            span = hi - lo
            self.shift.copy_(lo)
            self.scale.copy_(torch.where(span > 1e-8, span, torch.ones_like(span)))

    def prepare(self, x) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(x), dtype=torch.float64)
        return (x - self.shift) / self.scale


def _as_x(model: PpgModel, x) -> torch.Tensor:
    x = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=torch.float64)
    if x.ndim != 2 or x.shape[1] != model.d_x:
        raise ValueError(f"expected X of shape (N, {model.d_x}), got {tuple(x.shape)}")
    return x


def ped_forward(model: PpgModel, x) -> tuple[torch.Tensor, torch.Tensor]:
    """X1 = D1(E1(X)); X2 = D2(E2(X1))."""
    x = _as_x(model, x)
    x1 = model.ped1(x)
    return x1, model.ped2(x1)


def _rownorm(d: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(d, dim=1)


def ppg_loss(model: PpgModel, x, n: int) -> torch.Tensor:
    """(1/n) mean||X - X1|| + (1 - 1/n) mean||X - X2||, norms taken per row."""
    if n < 1:
        raise ValueError("iteration index n must be >= 1")
    x = _as_x(model, x)
    x1, x2 = ped_forward(model, x)
    a = 1.0 / n
    return a * _rownorm(x - x1).mean() + (1 - a) * _rownorm(x - x2).mean()


@dataclass
class PpgTrainer:
    """Alternating min-max updates: a PED1 step, then a PED2 step, per batch."""

    model: PpgModel
    lr: float = 1e-3

    def __post_init__(self):
        self.opt1 = torch.optim.Adam(self.model.ped1_parameters(), lr=self.lr)
        self.opt2 = torch.optim.Adam(self.model.ped2_parameters(), lr=self.lr)

    def step(self, x, n: int) -> float:
        return ppg_training_step(self.model, self.opt1, self.opt2, x, n)


def ppg_training_step(model: PpgModel, opt1, opt2, x, n: int) -> float:
    """One alternating update on a batch of annotated pairs; returns the pre-update loss."""
    x = _as_x(model, x)
    if len(x) == 0:
        raise ValueError("empty training batch")
    a = 1.0 / n
    with torch.no_grad():
        loss = float(ppg_loss(model, x, n))
    if not np.isfinite(loss):
        raise TrainingError(f"pair-proposal loss diverged at n={n}: {loss}")

    # PED1: reconstruct X and make PED2 reconstruct its output well
    opt1.zero_grad()
    x1 = model.ped1(x)
    l1 = a * _rownorm(x - x1).mean() + (1 - a) * _rownorm(x - model.ped2(x1)).mean()
    l1.backward()
    opt1.step()

    # PED2: reconstruct real X, push away reconstructions of PED1 output
    opt2.zero_grad()
    with torch.no_grad():
        x1 = model.ped1(x)
    l2 = a * _rownorm(x - model.ped2(x)).mean() - (1 - a) * _rownorm(x - model.ped2(x1)).mean()
    l2.backward()
    opt2.step()
    if not (torch.isfinite(l1) and torch.isfinite(l2)):
        raise TrainingError(f"pair-proposal update diverged at n={n}")
    return loss


def fit_ppg(model: PpgModel, x_pos, epochs: int, lr: float = 3e-3, batch_size: int = 32, seed: int = 0,
            trainer: PpgTrainer | None = None, start_epoch: int = 1, on_epoch=None) -> list[float]:
    """Train on positive pair features; the epoch index is n. Returns per-epoch mean loss."""
    x = _as_x(model, x_pos)
    trainer = trainer or PpgTrainer(model, lr)
    log = []
    for epoch in range(start_epoch, epochs + 1):
        g = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0]))
        perm = torch.randperm(len(x), generator=g)
        losses = [trainer.step(x[perm[i:i + batch_size]], epoch) for i in range(0, len(x), batch_size)]
        log.append(float(np.mean(losses)))
        if on_epoch is not None:
            on_epoch(epoch, trainer, log)
    return log


# -- scoring ----------------------------------------------------------------

@dataclass(frozen=True)
class PairScore:
    subject_id: int
    object_id: int
    score: float

    @property
    def pair(self) -> tuple[int, int]:
        return (self.subject_id, self.object_id)


@torch.no_grad()
def pair_score_array(model: PpgModel, x) -> np.ndarray:
    """-(0.5||X - X1|| + 0.5||X - X2||) per row."""
    x = _as_x(model, x)
    if len(x) == 0:
        return np.zeros(0)
    x1, x2 = ped_forward(model, x)
    w = 1.0 / SCORE_N
    return -(w * _rownorm(x - x1) + (1 - w) * _rownorm(x - x2)).numpy()


def score_pairs(model: PpgModel, candidates) -> list[PairScore]:
    """Score ``(pair, x)`` candidates; output is in pair order whatever the input order."""
    cands = sorted(((tuple(map(int, p)), np.asarray(x, dtype=np.float64)) for p, x in candidates),
                   key=lambda c: c[0])
    if not cands:
        return []
    scores = pair_score_array(model, np.stack([x for _, x in cands]))
    return [PairScore(p[0], p[1], float(s)) for (p, _), s in zip(cands, scores)]


def select_top_k(scores, k1: int = DEFAULT_K1) -> list[tuple[int, int]]:
    """Highest-scoring pairs; ties go to the lexicographically smaller pair."""
    if k1 < 1:
        raise ValueError("k1 must be >= 1")
    ranked = sorted(scores, key=lambda s: (-s.score, s.subject_id, s.object_id))
    return [s.pair for s in ranked[:k1]]


# -- pair features ----------------------------------------------------------

def pair_feature_dim(semantic_dim: int) -> int:
    return SPATIAL_DIM + 2 * semantic_dim


def pair_features(boxes: np.ndarray, semantic: np.ndarray, subjects, objects, width: float, height: float) -> np.ndarray:
    """X rows: spatial features, then subject semantics, then object semantics."""
    subjects = np.asarray(subjects, dtype=np.int64)
    objects = np.asarray(objects, dtype=np.int64)
    semantic = np.asarray(semantic, dtype=np.float64)
    spatial = pair_spatial_features(boxes, subjects, objects, width, height)
    return np.hstack([spatial, semantic[subjects], semantic[objects]]) if len(subjects) else \
        np.zeros((0, pair_feature_dim(semantic.shape[1])))


def all_ordered_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    s, o = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    keep = s != o
    return s[keep].astype(np.int64), o[keep].astype(np.int64)


# -- two-cluster benchmark --------------------------------------------------

def two_cluster_samples(seed: int, n_train: int = 500, n_test: int = 200, dim: int = 32,
                        separation: float = 4.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positive-cluster training set plus held-out positive and far-cluster test sets.

    The positive cluster lies near a random low-dimensional subspace, so an
    autoencoder bottleneck can capture it; the far cluster is an isotropic
    blob offset by ``separation`` in a random direction.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x2C1]))
    basis = np.linalg.qr(rng.normal(size=(dim, dim)))[0][:, : max(1, dim // 8)]

    def positive(n):
        return rng.normal(size=(n, basis.shape[1])) @ basis.T + 0.1 * rng.normal(size=(n, dim))

    offset = rng.normal(size=dim)
    offset *= separation / np.linalg.norm(offset)
    train = positive(n_train)
    test_pos = positive(n_test)
    test_far = offset + rng.normal(size=(n_test, dim))
    return train, test_pos, test_far


def ranking_auc(pos_scores, neg_scores) -> float:
    """Probability a positive outranks a negative (ties count half)."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("need at least one positive and one negative score")
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (len(pos) * len(neg)))
