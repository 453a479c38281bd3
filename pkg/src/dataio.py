"""Loading, synthesizing, splitting and batching hybrid cross-domain sequences."""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
import yaml

from src.config import SynthConfig

logger = logging.getLogger(__name__)

T = TypeVar("T")

# Scales user-item affinities into softmax logits for the generator.
_AFFINITY_SCALE = 1.0
# Per-session noise around the user's latent taste.
_SESSION_DRIFT = 0.5
# Chance a session stays in its user's home cluster.
_HOME_CLUSTER_RATE = 0.75


class DataError(Exception):
    """Base exception for dataset errors."""


class DatasetParseError(DataError):
    """Raised when a dataset line cannot be parsed."""

    def __init__(self, line_number: int, message: str) -> None:
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class DomainConsistencyError(DataError):
    """Raised when one item is tagged with both domains."""


class SplitError(DataError):
    """Raised when a dataset cannot be split."""


class Domain(str, Enum):
    """Recommendation domain of an item."""

    A = "A"
    B = "B"


@dataclass(frozen=True)
class Event:
    """One interaction: a domain-local item id and its domain."""

    item: int
    domain: Domain


@dataclass(frozen=True)
class HybridSequence:
    """One user's ordered interactions across both domains."""

    user_id: int
    events: Tuple[Event, ...]

    def __post_init__(self) -> None:
        if not self.events:
            raise DataError(f"Sequence of user {self.user_id} has no events")

    def subsequence(self, domain: Domain) -> Tuple[int, ...]:
        return tuple(e.item for e in self.events if e.domain == domain)

    @property
    def seq_a(self) -> Tuple[int, ...]:
        return self.subsequence(Domain.A)

    @property
    def seq_b(self) -> Tuple[int, ...]:
        return self.subsequence(Domain.B)

    @classmethod
    def from_pairs(cls, user_id: int, pairs: Sequence[Tuple[int, str]]) -> "HybridSequence":
        return cls(user_id, tuple(Event(int(i), Domain(d)) for i, d in pairs))


@dataclass
class IndexMap:
    """Dense id -> original id, per id space."""

    users: List[int] = field(default_factory=list)
    items_a: List[int] = field(default_factory=list)
    items_b: List[int] = field(default_factory=list)

    def original_item(self, domain: Domain, item: int) -> int:
        return (self.items_a if domain == Domain.A else self.items_b)[item]

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(
                {"users": self.users, "items_a": self.items_a, "items_b": self.items_b},
                f,
                default_flow_style=None,
            )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "IndexMap":
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
        return cls(
            users=list(raw.get("users", [])),
            items_a=list(raw.get("items_a", [])),
            items_b=list(raw.get("items_b", [])),
        )


@dataclass
class Dataset:
    """Sequences plus the sizes of the three id spaces."""

    sequences: List[HybridSequence]
    num_items_a: int
    num_users: int
    num_items_b: int
    index_map: Optional[IndexMap] = None

    @property
    def counts(self) -> Tuple[int, int, int]:
        """(m, n, p): A items, B items, users."""
        return self.num_items_a, self.num_items_b, self.num_users


@dataclass
class DatasetSplit:
    """Train/test partition of a dataset."""

    train: List[HybridSequence]
    test: List[HybridSequence]
    num_items_a: int
    num_users: int
    num_items_b: int
    moved_to_train: int = 0


@dataclass(frozen=True)
class NextItemExample:
    """A sequence prefix with at most one next-item target per domain."""

    prefix: HybridSequence
    target_a: Optional[int]
    target_b: Optional[int]


def dataset_counts(sequences: Sequence[HybridSequence]) -> Tuple[int, int, int]:
    """Return (m, n, p) implied by the largest ids present."""
    m = n = p = 0
    for seq in sequences:
        p = max(p, seq.user_id + 1)
        for event in seq.events:
            if event.domain == Domain.A:
                m = max(m, event.item + 1)
            else:
                n = max(n, event.item + 1)
    return m, n, p


def parse_dataset(path: Union[str, Path]) -> Dataset:
    """
    Parse a TSV file of hybrid sequences and densely re-index all ids.

    Each non-blank line is ``user_id<TAB>item:domain,item:domain,...``.

    Args:
        path: Dataset file

    Returns:
        Dataset whose index_map recovers the original ids

    Raises:
        FileNotFoundError: If the file does not exist
        DatasetParseError: On a malformed line
        DomainConsistencyError: If an item is tagged with both domains
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset file not found: {path}")

    index_map = IndexMap()
    users: Dict[int, int] = {}
    items: Dict[Domain, Dict[int, int]] = {Domain.A: {}, Domain.B: {}}
    item_domain: Dict[int, Tuple[Domain, int]] = {}
    sequences: List[HybridSequence] = []

    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise DatasetParseError(line_number, "expected 'user<TAB>item:domain,...'")
            try:
                user = int(fields[0])
            except ValueError as e:
                raise DatasetParseError(line_number, f"bad user id {fields[0]!r}") from e

            events: List[Event] = []
            for token in fields[1].split(","):
                item_text, sep, domain_text = token.strip().rpartition(":")
                if not sep or domain_text not in ("A", "B"):
                    raise DatasetParseError(line_number, f"bad event {token!r}")
                try:
                    item = int(item_text)
                except ValueError as e:
                    raise DatasetParseError(line_number, f"bad item id {item_text!r}") from e
                domain = Domain(domain_text)

                if item in item_domain and item_domain[item][0] != domain:
                    first_domain, first_line = item_domain[item]
                    raise DomainConsistencyError(
                        f"Item {item} tagged {first_domain.value} on line {first_line} "
                        f"and {domain.value} on line {line_number}"
                    )
                item_domain.setdefault(item, (domain, line_number))

                dense = items[domain]
                if item not in dense:
                    dense[item] = len(dense)
                    (index_map.items_a if domain == Domain.A else index_map.items_b).append(item)
                events.append(Event(dense[item], domain))

            if user not in users:
                users[user] = len(users)
                index_map.users.append(user)
            sequences.append(HybridSequence(users[user], tuple(events)))

    dataset = Dataset(
        sequences=sequences,
        num_items_a=len(items[Domain.A]),
        num_users=len(users),
        num_items_b=len(items[Domain.B]),
        index_map=index_map,
    )
    logger.info(
        "Loaded %d sequences from %s (m=%d, n=%d, p=%d)",
        len(sequences),
        path,
        dataset.num_items_a,
        dataset.num_items_b,
        dataset.num_users,
    )
    return dataset


def write_dataset(
    path: Union[str, Path],
    sequences: Sequence[HybridSequence],
    index_map: Optional[IndexMap] = None,
    num_items_a: Optional[int] = None,
) -> None:
    """
    Serialize sequences to TSV.

    With an index map, ids are translated back to the original ones. Without
    one, B items are written as ``num_items_a + item`` so every raw item id
    belongs to one domain only.
    """
    offset = num_items_a if num_items_a is not None else dataset_counts(sequences)[0]
    with open(path, "w", encoding="utf-8") as f:
        for seq in sequences:
            user = index_map.users[seq.user_id] if index_map else seq.user_id
            tokens = []
            for event in seq.events:
                if index_map:
                    item = index_map.original_item(event.domain, event.item)
                elif event.domain == Domain.B:
                    item = offset + event.item
                else:
                    item = event.item
                tokens.append(f"{item}:{event.domain.value}")
            f.write(f"{user}\t{','.join(tokens)}\n")
    logger.info("Wrote %d sequences to %s", len(sequences), path)


def _draw_items(rng: np.random.Generator, logits: np.ndarray, count: int) -> List[int]:
    # Gumbel top-k: sampling without replacement proportional to softmax(logits).
    keys = logits + rng.gumbel(size=logits.shape[0])
    return [int(i) for i in np.argsort(-keys, kind="stable")[:count]]


def _draw_session(
    rng: np.random.Generator,
    logits: np.ndarray,
    popularity: np.ndarray,
    count: int,
    noise_rate: float,
) -> List[int]:
    """Distinct items of one domain session in random order; some follow popularity only."""
    noisy = int(rng.binomial(count, noise_rate))
    chosen = _draw_items(rng, logits, count - noisy)
    if noisy:
        masked = popularity.copy()
        masked[chosen] = -np.inf
        chosen += _draw_items(rng, masked, noisy)
    return [chosen[i] for i in rng.permutation(count)]


def synthesize(cfg: SynthConfig) -> List[HybridSequence]:
    """
    Generate overlapped-user sequences from a clustered latent factor model.

    Items and users fall into ``num_clusters`` taste groups. A session picks
    an A cluster (usually its user's) and a B cluster that follows it with
    probability ``domain_correlation``; items of the session's cluster get a
    logit bonus on top of a user-factor affinity and item popularity. A share
    ``noise_rate`` of the events is drawn from popularity alone. Domain-A
    lengths average density_ratio times the domain-B ones and every sequence
    has at least one event in each domain.
    """
    rng = np.random.default_rng(cfg.seed)
    k = cfg.latent_dim
    user_factors = rng.normal(size=(cfg.num_users, k))
    item_factors_a = rng.normal(size=(cfg.num_items_a, k))
    item_factors_b = rng.normal(size=(cfg.num_items_b, k))
    popularity_a = rng.normal(scale=cfg.popularity_scale, size=cfg.num_items_a)
    popularity_b = rng.normal(scale=cfg.popularity_scale, size=cfg.num_items_b)
    clusters_a = rng.permutation(cfg.num_items_a) % cfg.num_clusters
    clusters_b = rng.permutation(cfg.num_items_b) % cfg.num_clusters
    home = rng.integers(cfg.num_clusters, size=cfg.num_users)
    scale = _AFFINITY_SCALE / math.sqrt(k)

    sequences: List[HybridSequence] = []
    for user in range(cfg.num_users):
        for _ in range(cfg.sequences_per_user):
            context = user_factors[user] + rng.normal(scale=_SESSION_DRIFT, size=k)
            cluster_a = (
                home[user]
                if rng.random() < _HOME_CLUSTER_RATE
                else rng.integers(cfg.num_clusters)
            )
            cluster_b = (
                cluster_a
                if rng.random() < cfg.domain_correlation
                else rng.integers(cfg.num_clusters)
            )
            logits_a = (
                scale * item_factors_a @ context
                + cfg.cluster_strength * (clusters_a == cluster_a)
                + popularity_a
            )
            logits_b = (
                scale * item_factors_b @ context
                + cfg.cluster_strength * (clusters_b == cluster_b)
                + popularity_b
            )
            len_a = min(cfg.num_items_a, 1 + int(rng.poisson(cfg.resolved_mean_len_a - 1.0)))
            len_b = min(cfg.num_items_b, 1 + int(rng.poisson(cfg.mean_len_b - 1.0)))
            items_a = _draw_session(rng, logits_a, popularity_a, len_a, cfg.noise_rate)
            items_b = _draw_session(rng, logits_b, popularity_b, len_b, cfg.noise_rate)

            labels = [Domain.A] * len_a + [Domain.B] * len_b
            queues = {Domain.A: iter(items_a), Domain.B: iter(items_b)}
            events = tuple(
                Event(next(queues[labels[i]]), labels[i])
                for i in rng.permutation(len(labels))
            )
            sequences.append(HybridSequence(user, events))

    total_a = sum(len(s.seq_a) for s in sequences)
    total_b = sum(len(s.seq_b) for s in sequences)
    logger.info(
        "Synthesized %d sequences: %d A events, %d B events (ratio %.2f)",
        len(sequences),
        total_a,
        total_b,
        total_a / max(total_b, 1),
    )
    return sequences


def split_dataset(
    data: Sequence[HybridSequence],
    train_fraction: float,
    seed: int,
    counts: Optional[Tuple[int, int, int]] = None,
) -> DatasetSplit:
    """
    Randomly split sequences into train and test.

    Test sequences whose user or any item never occurs in train are moved to
    train, so evaluation never meets an untrained id.

    Args:
        data: All sequences
        train_fraction: Share of sequences drawn for training, in (0, 1)
        seed: Shuffle seed
        counts: (m, n, p); derived from the data when omitted

    Raises:
        SplitError: With fewer than two sequences
        ValueError: If train_fraction is outside (0, 1)
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if len(data) < 2:
        raise SplitError(f"Need at least 2 sequences to split, got {len(data)}")

    order = np.random.default_rng(seed).permutation(len(data))
    n_train = min(max(int(round(len(data) * train_fraction)), 1), len(data) - 1)
    train = [data[i] for i in order[:n_train]]
    candidates = [data[i] for i in order[n_train:]]

    seen_users = {s.user_id for s in train}
    seen_items = {(e.domain, e.item) for s in train for e in s.events}
    test: List[HybridSequence] = []
    moved = 0
    for seq in candidates:
        items = {(e.domain, e.item) for e in seq.events}
        if seq.user_id in seen_users and items <= seen_items:
            test.append(seq)
        else:
            train.append(seq)
            seen_users.add(seq.user_id)
            seen_items |= items
            moved += 1

    m, n, p = counts if counts is not None else dataset_counts(data)
    logger.info(
        "Split %d sequences: %d train, %d test (%d moved to train for unseen ids)",
        len(data),
        len(train),
        len(test),
        moved,
    )
    return DatasetSplit(
        train=train, test=test, num_items_a=m, num_users=p, num_items_b=n, moved_to_train=moved
    )


def make_batches(data: Sequence[T], batch_size: int, seed: Optional[int]) -> List[List[T]]:
    """
    Partition data into batches, shuffled by seed (kept in order when seed is None).

    Raises:
        ValueError: If batch_size < 1
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be at least 1, got {batch_size}")
    order = (
        np.arange(len(data))
        if seed is None
        else np.random.default_rng(seed).permutation(len(data))
    )
    return [
        [data[i] for i in order[start : start + batch_size]]
        for start in range(0, len(data), batch_size)
    ]


def make_examples(sequences: Sequence[HybridSequence]) -> List[NextItemExample]:
    """
    Turn sequences into next-item examples.

    The last A event and the last B event are the targets of their domains;
    every other event stays in the prefix. A domain with fewer than two events
    has no target and keeps its events in the prefix.
    """
    examples: List[NextItemExample] = []
    skipped = 0
    for seq in sequences:
        held_out = set()
        targets: Dict[Domain, Optional[int]] = {}
        for domain in Domain:
            positions = [i for i, e in enumerate(seq.events) if e.domain == domain]
            if len(positions) >= 2:
                held_out.add(positions[-1])
                targets[domain] = seq.events[positions[-1]].item
            else:
                targets[domain] = None
        if not held_out:
            skipped += 1
            continue
        prefix = HybridSequence(
            seq.user_id, tuple(e for i, e in enumerate(seq.events) if i not in held_out)
        )
        examples.append(NextItemExample(prefix, targets[Domain.A], targets[Domain.B]))
    if skipped:
        logger.debug("Skipped %d sequences without any next-item target", skipped)
    return examples
