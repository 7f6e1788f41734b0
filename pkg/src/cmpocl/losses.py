"""Self-supervised objectives as graph builders.

All functions take :class:`~cmpocl.tensor.Node` embeddings of shape
``(batch, d)`` and return scalar nodes. Per-sample terms are averaged over
the batch.

The coding-rate regulariser is *maximised* to keep the patch embeddings
spread out, so composite losses add ``-beta * coding_rate``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from . import tensor as T
from .tensor import ContractError, Node

POOLINGS = ("per-patch-index", "pooled")
MSE_FORMS = ("mean", "sum")


@dataclass(frozen=True)
class CmpHyperParams:
    alpha: float = 1.0
    beta: float = 1.0
    eps_sq: float = 0.2
    n_patches: int = 20
    tcr_pooling: str = "per-patch-index"
    normalize_tcr: bool = True
    mse_form: str = "mean"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("alpha and beta must be non-negative")
        if not self.eps_sq > 0:
            raise ContractError("eps_sq must be positive")
        if self.n_patches < 2:
            raise ContractError("n_patches must be at least 2")
        if self.tcr_pooling not in POOLINGS:
            raise ContractError(f"tcr_pooling must be one of {POOLINGS}")
        if self.mse_form not in MSE_FORMS:
            raise ContractError(f"mse_form must be one of {MSE_FORMS}")


@dataclass
class PatchEmbeddings:
    """Per-patch embeddings of one minibatch.

    ``z[i]`` holds the online encoder output for patch ``i`` of every
    sample; ``p`` are predictor outputs and ``targets`` the EMA encoder
    outputs (BYOL only).
    """

    z: Sequence[Node]
    p: Optional[Sequence[Node]] = None
    targets: Optional[Sequence[Node]] = None

    def __post_init__(self):
        if len(self.z) == 0:
            raise ContractError("no patch embeddings")
        shape = self.z[0].shape
        for name, group in (("z", self.z), ("p", self.p), ("targets", self.targets)):
            if group is None:
                continue
            if len(group) != len(self.z):
                raise ContractError(f"{name} has {len(group)} patches, z has {len(self.z)}")
            for node in group:
                if node.shape != shape:
                    raise ContractError(f"{name} patch shape {node.shape} != {shape}")

    @property
    def n(self) -> int:
        return len(self.z)


def _check_patch_count(patches: PatchEmbeddings, hp: CmpHyperParams):
    if patches.n != hp.n_patches:
        raise ContractError(f"got {patches.n} patches, hyperparameters say {hp.n_patches}")


def coding_rate(zs: Sequence[Node], eps_sq: float, pooling: str = "per-patch-index",
                normalize: bool = True) -> Node:
    """Total coding rate of a list of (batch, d) embedding matrices."""
    if pooling not in POOLINGS:
        raise ContractError(f"unknown pooling {pooling!r}")
    if normalize:
        zs = [T.l2_normalize_rows(z) for z in zs]
    b, d = zs[0].shape
    if pooling == "pooled":
        stacked = T.vstack(zs)
        c = d / (stacked.shape[0] * eps_sq)
        return T.logdet_gram(T.transpose(stacked), c)
    c = d / (b * eps_sq)
    return T.mean_stack([T.logdet_gram(T.transpose(z), c) for z in zs])


def tcr_loss(patches: PatchEmbeddings, hp: CmpHyperParams) -> Node:
    return coding_rate(patches.z, hp.eps_sq, hp.tcr_pooling, hp.normalize_tcr)


def _neg_cos(a: Node, b: Node) -> Node:
    return T.scale(T.mean(T.cosine_rows(a, b)), -1.0)


def _normalized_mse(target: Node, pred: Node, form: str) -> Node:
    t = T.l2_normalize_rows(target)
    p = T.l2_normalize_rows(pred)
    return T.mse_sum(t, p) if form == "sum" else T.mse(t, p)


def simsiam_loss(z1: Node, z2: Node, p1: Node, p2: Node) -> Node:
    for other in (z2, p1, p2):
        if other.shape != z1.shape:
            raise ContractError(f"simsiam shape mismatch: {z1.shape} vs {other.shape}")
    return T.add(_neg_cos(T.stop_gradient(z1), p2), _neg_cos(T.stop_gradient(z2), p1))


def byol_loss(z1p: Node, z2p: Node, p1: Node, p2: Node, mse_form: str = "mean") -> Node:
    """Normalised MSE against target-encoder outputs ``z1p``, ``z2p``.

    Targets are wrapped in a stop-gradient as well, so passing online
    outputs by mistake still leaves the target branch frozen.
    """
    for other in (z2p, p1, p2):
        if other.shape != z1p.shape:
            raise ContractError(f"byol shape mismatch: {z1p.shape} vs {other.shape}")
    return T.add(_normalized_mse(T.stop_gradient(z1p), p2, mse_form),
                 _normalized_mse(T.stop_gradient(z2p), p1, mse_form))


# composite losses: each *_terms function returns (ssl, regulariser) with
# total = alpha * ssl + beta * regulariser


def _combine(ssl: Node, reg: Node, hp: CmpHyperParams) -> Node:
    return T.add(T.scale(ssl, hp.alpha), T.scale(reg, hp.beta))


def simsiam_cmp_terms(patches: PatchEmbeddings, hp: CmpHyperParams) -> tuple[Node, Node]:
    if patches.p is None:
        raise ContractError("SimSiam-CMP needs predictor outputs")
    _check_patch_count(patches, hp)
    target = T.stop_gradient(T.mean_stack(patches.z))
    ssl = T.add_all([_neg_cos(target, p) for p in patches.p])
    return ssl, T.scale(tcr_loss(patches, hp), -1.0)


def byol_cmp_terms(patches: PatchEmbeddings, hp: CmpHyperParams) -> tuple[Node, Node]:
    if patches.targets is None:
        raise ContractError("BYOL-CMP needs target-encoder embeddings")
    if patches.p is None:
        raise ContractError("BYOL-CMP needs predictor outputs")
    _check_patch_count(patches, hp)
    target = T.stop_gradient(T.mean_stack(patches.targets))
    ssl = T.add_all([_normalized_mse(target, p, hp.mse_form) for p in patches.p])
    return ssl, T.scale(tcr_loss(patches, hp), -1.0)


def empssl_terms(patches: PatchEmbeddings, hp: CmpHyperParams) -> tuple[Node, Node]:
    _check_patch_count(patches, hp)
    avg = T.mean_stack(patches.z)
    ssl = T.add_all([_neg_cos(z, avg) for z in patches.z])
    return ssl, T.scale(tcr_loss(patches, hp), -1.0)


def simsiam_cmp_loss(patches: PatchEmbeddings, hp: CmpHyperParams) -> Node:
    return _combine(*simsiam_cmp_terms(patches, hp), hp)


def byol_cmp_loss(patches: PatchEmbeddings, hp: CmpHyperParams) -> Node:
    return _combine(*byol_cmp_terms(patches, hp), hp)


def empssl_loss(patches: PatchEmbeddings, hp: CmpHyperParams) -> Node:
    return _combine(*empssl_terms(patches, hp), hp)
