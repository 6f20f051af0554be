"""Order-violation loss, brute-force permutation inference, and accuracy metrics.

A clip pair in the right order should have the earlier clip's ordering
feature elementwise below the later one's; violations are penalized by the
squared hinge ``sum(max(0, phi_i - phi_j)^2)``. A scene is ordered by
enumerating all M! candidate sequences and picking the one whose implied
forward pairs accumulate the least loss.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .validation import check_vector

DEFAULT_MAX_CLIPS = 6
DEFAULT_MARGIN = 0.2


@dataclass(frozen=True)
class Scene:
    """An ordered list of clip ids; the stored order is the ground truth."""

    scene_id: str
    clip_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "clip_ids", tuple(self.clip_ids))
        if len(set(self.clip_ids)) != len(self.clip_ids):
            raise ValueError(f"scene {self.scene_id}: duplicate clip ids")
        if not 2 <= len(self.clip_ids) <= DEFAULT_MAX_CLIPS:
            raise ValueError(
                f"scene {self.scene_id}: scene size out of range "
                f"(got {len(self.clip_ids)}, need 2..{DEFAULT_MAX_CLIPS})"
            )

    @property
    def size(self) -> int:
        return len(self.clip_ids)


@dataclass
class OrderingResult:
    permutation: tuple   # clip indices in predicted temporal order
    total_loss: float
    correct: bool        # permutation is the identity (inputs given in gt order)


def pair_loss(phi_i, phi_j) -> float:
    """Squared order-violation hinge; zero iff phi_i <= phi_j elementwise."""
    phi_i = check_vector(phi_i, "phi_i")
    phi_j = check_vector(phi_j, "phi_j", length=phi_i.shape[0])
    diff = np.maximum(0.0, phi_i.astype(np.float64) - phi_j.astype(np.float64))
    return float(np.dot(diff, diff))


def negative_loss(phi_i, phi_j_corrupt, alpha: float = DEFAULT_MARGIN) -> float:
    """Hinge pushing a corrupted pair's violation loss above the margin alpha."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return max(0.0, alpha - pair_loss(phi_i, phi_j_corrupt))


def pairwise_loss_matrix(phis) -> np.ndarray:
    """All directed pair losses: L[a, b] = pair_loss(phis[a], phis[b])."""
    stack = np.stack([check_vector(p, "phi").astype(np.float64) for p in phis], axis=0)
    diff = np.maximum(0.0, stack[:, None, :] - stack[None, :, :])
    return np.einsum("abk,abk->ab", diff, diff)


def infer_order(phis, max_clips: int = DEFAULT_MAX_CLIPS) -> OrderingResult:
    """Try all M! sequences; return the one with the least total forward-pair loss.

    The matrix of directed pair losses is computed once; each candidate
    permutation then costs only the sum of its M(M-1)/2 implied earlier->later
    entries. Ties go to the lexicographically smallest permutation.
    """
    m = len(phis)
    if m < 2:
        raise ValueError(f"need at least 2 clips to order, got {m}")
    if m > max_clips:
        raise ValueError(
            f"scene has {m} clips, above the cap of {max_clips}; "
            f"raise max_clips to enumerate {math.factorial(m)} permutations"
        )
    losses = pairwise_loss_matrix(phis)
    perms = np.array(list(itertools.permutations(range(m))))  # lexicographic order
    pair_idx = list(itertools.combinations(range(m), 2))
    totals = np.zeros(len(perms))
    for a, b in pair_idx:
        totals += losses[perms[:, a], perms[:, b]]
    best = int(np.argmin(totals))  # first minimum = lexicographically smallest
    perm = tuple(int(v) for v in perms[best])
    return OrderingResult(
        permutation=perm,
        total_loss=float(totals[best]),
        correct=perm == tuple(range(m)),
    )


def ordering_accuracy(results) -> float:
    """Fraction of scenes whose full predicted permutation matches ground truth."""
    results = list(results)
    if not results:
        raise ValueError("no ordering results")
    return sum(1 for r in results if r.correct) / len(results)


def chance_accuracy(scene_size_histogram) -> float:
    """Expected exact-match accuracy of a uniform random permutation predictor.

    ``scene_size_histogram`` maps scene size M -> number (or weight) of scenes;
    the result is sum(n_M / M!) / sum(n_M).
    """
    items = dict(scene_size_histogram).items()
    total = 0.0
    weight = 0.0
    for m, n in items:
        if m < 2:
            raise ValueError(f"scene sizes must be >= 2, got {m}")
        if n < 0:
            raise ValueError(f"negative count for scene size {m}")
        total += n / math.factorial(m)
        weight += n
    if weight == 0:
        raise ValueError("empty scene-size histogram")
    return total / weight
