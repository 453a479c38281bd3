"""Per-batch cross-domain sequential (CDS) graphs and their augmentation views."""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from src.dataio import DataError, Domain, HybridSequence
from src.diffcore import ContractError

logger = logging.getLogger(__name__)


class Augmentation(str, Enum):
    """Graph augmentation strategy for the contrastive views."""

    ID = "ID"  # item dropout
    SR = "SR"  # sequence reorder
    NONE = "none"


@dataclass(frozen=True)
class CdsGraph:
    """
    Normalized block adjacency over batch-local nodes.

    Node order is A items, then users, then B items. Item-item blocks are
    empty; user-item edges carry positional weights q/L.
    """

    matrix: sp.csr_matrix
    raw: sp.csr_matrix
    items_a: np.ndarray
    users: np.ndarray
    items_b: np.ndarray
    norm: str = "symmetric"

    @property
    def num_nodes(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def block_sizes(self) -> Tuple[int, int, int]:
        return len(self.items_a), len(self.users), len(self.items_b)

    def local_index(self) -> Dict[str, Dict[int, int]]:
        """Global id -> local node row, per node class."""
        m_b, p_b, _ = self.block_sizes
        return {
            "A": {int(g): i for i, g in enumerate(self.items_a)},
            "U": {int(g): m_b + i for i, g in enumerate(self.users)},
            "B": {int(g): m_b + p_b + i for i, g in enumerate(self.items_b)},
        }

    def global_rows(self, num_items_a: int, num_users: int) -> np.ndarray:
        """Rows of the global embedding table for every local node."""
        return np.concatenate(
            [self.items_a, num_items_a + self.users, num_items_a + num_users + self.items_b]
        ).astype(np.int64)

    def block(self, rows: str, cols: str) -> sp.csr_matrix:
        """Slice one block, e.g. ``block("A", "U")`` for R_{A,U}."""
        m_b, p_b, n_b = self.block_sizes
        spans = {"A": (0, m_b), "U": (m_b, m_b + p_b), "B": (m_b + p_b, m_b + p_b + n_b)}
        r0, r1 = spans[rows]
        c0, c1 = spans[cols]
        return self.matrix[r0:r1, c0:c1]


@dataclass(frozen=True)
class PerturbationRecord:
    """One perturbed item of one sequence."""

    sequence: int
    item: int
    action: str  # "drop" or "move"


@dataclass
class MaskingMatrix:
    """Multiplier on the A blocks (T_{A,U}, T_{U,A}) plus the perturbation log."""

    q: sp.csr_matrix
    log: List[PerturbationRecord] = field(default_factory=list)

    def perturbed_per_sequence(self) -> Dict[int, int]:
        counts: Dict[int, int] = {}
        for record in self.log:
            counts[record.sequence] = counts.get(record.sequence, 0) + 1
        return counts


@dataclass
class AugmentedView:
    """A perturbed copy V of a CDS graph's matrix."""

    graph: CdsGraph
    matrix: sp.csr_matrix
    strategy: Augmentation
    alpha: float
    seed: int
    mask: MaskingMatrix
    sequences_a: List[Tuple[int, ...]]


def perturb_count(length: int, alpha: float) -> int:
    """ceil(L * alpha), robust to float noise such as 10 * 0.3."""
    return min(length, math.ceil(round(length * alpha, 9)))


def _normalize(raw: sp.csr_matrix, norm: str) -> sp.csr_matrix:
    degree = np.asarray(raw.sum(axis=1)).ravel()
    safe = np.where(degree > 0, degree, 1.0)
    if norm == "symmetric":
        inv_sqrt = sp.diags(np.where(degree > 0, 1.0 / np.sqrt(safe), 0.0))
        return sp.csr_matrix(inv_sqrt @ raw @ inv_sqrt)
    if norm == "row":
        inv = sp.diags(np.where(degree > 0, 1.0 / safe, 0.0))
        return sp.csr_matrix(inv @ raw)
    raise ContractError(f"Unknown graph normalization '{norm}'")


def _positional_edges(
    sequences: Sequence[Tuple[int, ...]],
    user_rows: Sequence[int],
    item_rows: Dict[int, int],
) -> Tuple[List[int], List[int], List[float]]:
    rows: List[int] = []
    cols: List[int] = []
    weights: List[float] = []
    for items, user_row in zip(sequences, user_rows):
        length = len(items)
        for q, item in enumerate(items, start=1):
            w = q / length
            item_row = item_rows[item]
            rows += [item_row, user_row]
            cols += [user_row, item_row]
            weights += [w, w]
    return rows, cols, weights


def build_graph(batch: Sequence[HybridSequence], norm: str = "symmetric") -> CdsGraph:
    """
    Build the normalized CDS graph of one batch.

    The edge between user k and the item at position q of its length-L domain
    subsequence has raw weight q/L. The adjacency is then normalized,
    symmetrically (w / sqrt(deg x * deg y)) by default or by row degree.
    There are no user self-loops.

    Raises:
        DataError: If the batch is empty
    """
    if not batch:
        raise DataError("Cannot build a graph from an empty batch")

    items_a = np.array(sorted({i for s in batch for i in s.seq_a}), dtype=np.int64)
    users = np.array(sorted({s.user_id for s in batch}), dtype=np.int64)
    items_b = np.array(sorted({i for s in batch for i in s.seq_b}), dtype=np.int64)
    m_b, p_b, n_b = len(items_a), len(users), len(items_b)
    size = m_b + p_b + n_b

    user_row = {int(u): m_b + i for i, u in enumerate(users)}
    a_row = {int(g): i for i, g in enumerate(items_a)}
    b_row = {int(g): m_b + p_b + i for i, g in enumerate(items_b)}
    rows_of_users = [user_row[s.user_id] for s in batch]

    rows_a, cols_a, w_a = _positional_edges([s.seq_a for s in batch], rows_of_users, a_row)
    rows_b, cols_b, w_b = _positional_edges([s.seq_b for s in batch], rows_of_users, b_row)
    raw = sp.csr_matrix(
        (w_a + w_b, (rows_a + rows_b, cols_a + cols_b)), shape=(size, size), dtype=np.float64
    )
    raw.sum_duplicates()

    graph = CdsGraph(
        matrix=_normalize(raw, norm),
        raw=raw,
        items_a=items_a,
        users=users,
        items_b=items_b,
        norm=norm,
    )
    logger.debug("Built CDS graph: %d A items, %d users, %d B items", m_b, p_b, n_b)
    return graph


def _a_block_mask(matrix: sp.coo_matrix, m_b: int) -> np.ndarray:
    return (matrix.row < m_b) | (matrix.col < m_b)


def _mask_ratio(graph: CdsGraph, view: sp.csr_matrix) -> sp.csr_matrix:
    """Q with V = Q * M on the A blocks and zeros elsewhere."""
    m_b = graph.block_sizes[0]
    coo = graph.matrix.tocoo()
    a_side = _a_block_mask(coo, m_b)
    rows, cols = coo.row[a_side], coo.col[a_side]
    original = coo.data[a_side]
    perturbed = np.asarray(view[rows, cols]).ravel()
    return sp.csr_matrix(
        (perturbed / original, (rows, cols)), shape=graph.matrix.shape, dtype=np.float64
    )


def item_dropout(
    g: CdsGraph, batch: Sequence[HybridSequence], alpha: float, seed: int
) -> AugmentedView:
    """
    Drop ceil(L * alpha) distinct domain-A items of every sequence.

    Items are drawn uniformly from a sequence's distinct A items, at most as
    many as there are; every position of a drawn item goes with it. Sessions
    of one user share (item, user) edges, so each A-side entry is scaled by
    the share of its raw weight left once the dropped positions are removed:
    a user with one session in the batch loses the edge entirely, a sibling
    session keeps its own weight. The B side is copied from M unchanged.

    Raises:
        ContractError: If alpha is outside [0, 1]
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must be in [0, 1], got {alpha}")
    rng = np.random.default_rng(seed)
    local = g.local_index()
    removed: Dict[Tuple[int, int], float] = {}
    log: List[PerturbationRecord] = []
    for index, seq in enumerate(batch):
        items = seq.seq_a
        distinct = np.unique(np.asarray(items, dtype=np.int64))
        k = perturb_count(len(items), alpha)
        if k > len(distinct):
            logger.debug(
                "Sequence %d has %d distinct A items; dropping all of them instead of %d",
                index,
                len(distinct),
                k,
            )
            k = len(distinct)
        if k == 0:
            continue
        user = local["U"][seq.user_id]
        length = len(items)
        for drawn in rng.choice(distinct, size=k, replace=False):
            item = int(drawn)
            weight = sum(q / length for q, i in enumerate(items, start=1) if i == item)
            key = (local["A"][item], user)
            removed[key] = removed.get(key, 0.0) + weight
            log.append(PerturbationRecord(index, item, "drop"))

    m_b = g.block_sizes[0]
    coo = g.matrix.tocoo()
    a_idx = np.flatnonzero(_a_block_mask(coo, m_b))
    rows, cols = coo.row[a_idx], coo.col[a_idx]
    lost = np.array(
        [
            removed.get((r, c) if r < m_b else (c, r), 0.0)
            for r, c in zip(rows.tolist(), cols.tolist())
        ],
        dtype=np.float64,
    )
    total = np.asarray(g.raw[rows, cols], dtype=np.float64).ravel()
    remaining = total - lost
    ratio = np.where(remaining > 1e-12 * total, remaining / np.where(total > 0, total, 1.0), 0.0)

    data = coo.data.copy()
    data[a_idx] *= ratio
    view = sp.csr_matrix((data, (coo.row, coo.col)), shape=g.matrix.shape, dtype=np.float64)
    view.eliminate_zeros()
    q = sp.csr_matrix((ratio, (rows, cols)), shape=g.matrix.shape, dtype=np.float64)
    return AugmentedView(
        graph=g,
        matrix=view,
        strategy=Augmentation.ID,
        alpha=alpha,
        seed=seed,
        mask=MaskingMatrix(q=q, log=log),
        sequences_a=[s.seq_a for s in batch],
    )


def sequence_reorder(
    g: CdsGraph, batch: Sequence[HybridSequence], alpha: float, seed: int
) -> AugmentedView:
    """
    Move ceil(L * alpha) domain-A items of every sequence to its end.

    The moved items keep the order in which they were drawn. Positional
    weights are recomputed for the new order and only the A blocks are
    renormalized; B entries are copied from M unchanged.

    Raises:
        ContractError: If alpha is outside [0, 1]
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must be in [0, 1], got {alpha}")
    rng = np.random.default_rng(seed)
    reordered: List[Tuple[int, ...]] = []
    log: List[PerturbationRecord] = []
    for index, seq in enumerate(batch):
        items = seq.seq_a
        k = perturb_count(len(items), alpha)
        if k == 0:
            reordered.append(items)
            continue
        moved = [int(p) for p in rng.choice(len(items), size=k, replace=False)]
        moved_set = set(moved)
        kept = [item for p, item in enumerate(items) if p not in moved_set]
        reordered.append(tuple(kept + [items[p] for p in moved]))
        log.extend(PerturbationRecord(index, items[p], "move") for p in moved)

    if not log:
        view = g.matrix.copy()
    else:
        local = g.local_index()
        m_b = g.block_sizes[0]
        user_rows = [local["U"][s.user_id] for s in batch]
        rows, cols, weights = _positional_edges(reordered, user_rows, local["A"])
        raw_coo = g.raw.tocoo()
        b_side = ~_a_block_mask(raw_coo, m_b)
        raw = sp.csr_matrix(
            (
                np.concatenate([weights, raw_coo.data[b_side]]),
                (
                    np.concatenate([rows, raw_coo.row[b_side]]).astype(np.int64),
                    np.concatenate([cols, raw_coo.col[b_side]]).astype(np.int64),
                ),
            ),
            shape=g.raw.shape,
            dtype=np.float64,
        )
        raw.sum_duplicates()
        renormalized = _normalize(raw, g.norm).tocoo()
        original = g.matrix.tocoo()
        a_new = _a_block_mask(renormalized, m_b)
        b_old = ~_a_block_mask(original, m_b)
        view = sp.csr_matrix(
            (
                np.concatenate([renormalized.data[a_new], original.data[b_old]]),
                (
                    np.concatenate([renormalized.row[a_new], original.row[b_old]]),
                    np.concatenate([renormalized.col[a_new], original.col[b_old]]),
                ),
            ),
            shape=g.matrix.shape,
            dtype=np.float64,
        )

    return AugmentedView(
        graph=g,
        matrix=view,
        strategy=Augmentation.SR,
        alpha=alpha,
        seed=seed,
        mask=MaskingMatrix(q=_mask_ratio(g, view), log=log),
        sequences_a=reordered,
    )


def pair_views(
    g: CdsGraph,
    batch: Sequence[HybridSequence],
    strategy: Union[Augmentation, str],
    alpha: float,
    seed: int,
) -> Tuple[AugmentedView, AugmentedView]:
    """
    Draw two independent views of the same strategy from derived seeds.

    Raises:
        ContractError: If the strategy is not ID or SR
    """
    strategy = Augmentation(strategy)
    operations: Dict[Augmentation, Callable[..., AugmentedView]] = {
        Augmentation.ID: item_dropout,
        Augmentation.SR: sequence_reorder,
    }
    if strategy not in operations:
        raise ContractError(f"pair_views needs ID or SR, got {strategy.value}")
    first, second = (
        int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(2)
    )
    operation = operations[strategy]
    return operation(g, batch, alpha, first), operation(g, batch, alpha, second)


def write_triplets(matrix: sp.spmatrix, path: Union[str, Path]) -> None:
    """Dump a matrix as ``row col value`` lines, one per stored entry."""
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as f:
        for i in order:
            f.write(f"{coo.row[i]} {coo.col[i]} {float(coo.data[i])!r}\n")


def read_triplets(path: Union[str, Path], size: int) -> sp.csr_matrix:
    rows, cols, values = [], [], []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                r, c, v = line.split()
                rows.append(int(r))
                cols.append(int(c))
                values.append(float(v))
    return sp.csr_matrix((values, (rows, cols)), shape=(size, size), dtype=np.float64)


def domain_of_row(g: CdsGraph, row: int) -> str:
    m_b, p_b, _ = g.block_sizes
    if row < m_b:
        return Domain.A.value
    return "U" if row < m_b + p_b else Domain.B.value
