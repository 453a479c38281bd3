"""Model parameters and the per-batch forward pass."""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src.cdsgraph import Augmentation, AugmentedView, CdsGraph, build_graph, pair_views
from src.config import TrainConfig
from src.contrastive import ssl_losses
from src.dataio import Domain, HybridSequence, NextItemExample, make_examples
from src.diffcore import ContractError, Tensor, concat, gather_rows, reshape
from src.ea_seq import EaParams, attend_sequence, build_preference, mean_pool
from src.gnn_encoder import LayerWeights, NodeReps, encode
from src.objective import PredictionHead, ce_loss, joint_loss, l2_penalty, predict
from src.optim import xavier_init
from src.utils import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class ModelParams:
    """All trainable tensors of the model."""

    num_items_a: int
    num_users: int
    num_items_b: int
    dim: int
    embedding: Tensor
    layers: List[LayerWeights]
    ea_a: EaParams
    ea_b: EaParams
    head_a: PredictionHead
    head_b: PredictionHead

    @classmethod
    def initialize(
        cls, num_items_a: int, num_users: int, num_items_b: int, dim: int, layers: int, seed: int
    ) -> "ModelParams":
        """
        Xavier-initialize every matrix and zero every bias.

        The embedding table holds A items, then users, then B items.

        Raises:
            ValueError: If a size is not positive
        """
        if min(num_items_a, num_users, num_items_b, dim, layers) < 1:
            raise ValueError(
                f"Model sizes must be positive: m={num_items_a}, p={num_users}, "
                f"n={num_items_b}, d={dim}, layers={layers}"
            )

        def xavier(shape: Tuple[int, ...], name: str) -> Tensor:
            return xavier_init(shape, derive_seed(seed, name), name=name)

        def zeros(size: int, name: str) -> Tensor:
            return Tensor(np.zeros(size), requires_grad=True, name=name)

        total = num_items_a + num_users + num_items_b
        return cls(
            num_items_a=num_items_a,
            num_users=num_users,
            num_items_b=num_items_b,
            dim=dim,
            embedding=xavier((total, dim), "embedding"),
            layers=[
                (xavier((dim, dim), f"gnn.{i}.w1"), xavier((dim, dim), f"gnn.{i}.w2"))
                for i in range(layers)
            ],
            ea_a=EaParams(
                xavier((dim, dim), "ea_a.w1"), xavier((dim, 1), "ea_a.w2"), zeros(dim, "ea_a.b")
            ),
            ea_b=EaParams(
                xavier((dim, dim), "ea_b.w1"), xavier((dim, 1), "ea_b.w2"), zeros(dim, "ea_b.b")
            ),
            head_a=PredictionHead(
                xavier((num_items_a, 4 * dim), "head_a.w"), zeros(num_items_a, "head_a.b")
            ),
            head_b=PredictionHead(
                xavier((num_items_b, 4 * dim), "head_b.w"), zeros(num_items_b, "head_b.b")
            ),
        )

    def named_tensors(self) -> Dict[str, Tensor]:
        """Every trainable tensor under a stable name, in a fixed order."""
        named: Dict[str, Tensor] = {"embedding": self.embedding}
        for i, (w1, w2) in enumerate(self.layers):
            named[f"gnn.{i}.w1"] = w1
            named[f"gnn.{i}.w2"] = w2
        named.update(self.ea_a.named("ea_a"))
        named.update(self.ea_b.named("ea_b"))
        named.update(self.head_a.named("head_a"))
        named.update(self.head_b.named("head_b"))
        return named

    def ea(self, domain: Domain) -> EaParams:
        return self.ea_a if domain == Domain.A else self.ea_b

    def head(self, domain: Domain) -> PredictionHead:
        return self.head_a if domain == Domain.A else self.head_b

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.numpy() for name, t in self.named_tensors().items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        """
        Overwrite parameter values in place.

        Raises:
            ContractError: If names or shapes differ
        """
        named = self.named_tensors()
        if set(arrays) != set(named):
            missing = sorted(set(named) - set(arrays))
            unexpected = sorted(set(arrays) - set(named))
            raise ContractError(f"Parameter mismatch: missing {missing}, unexpected {unexpected}")
        for name, tensor in named.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise ContractError(
                    f"Parameter '{name}' has shape {value.shape}, expected {tensor.shape}"
                )
            tensor.data[...] = value

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in self.named_tensors().items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(tensor.data).tobytes())
        return digest.hexdigest()


@dataclass
class BatchLosses:
    """Loss components of one batch."""

    loss_a: Tensor
    loss_b: Tensor
    ssl_a: Tensor
    ssl_b: Tensor
    joint: Tensor
    reg: Tensor
    targets_a: int
    targets_b: int
    graph: CdsGraph
    views: Optional[Tuple[AugmentedView, AugmentedView]] = None
    empty_domains: List[str] = field(default_factory=list)

    @property
    def objective(self) -> Tensor:
        """Joint loss plus the L2 penalty; what training differentiates."""
        return self.joint + self.reg

    def values(self) -> Dict[str, float]:
        return {
            "L_A": self.loss_a.item(),
            "L_B": self.loss_b.item(),
            "L_sA": self.ssl_a.item(),
            "L_sB": self.ssl_b.item(),
            "joint": self.joint.item(),
        }


def _encode(
    graph: Union[CdsGraph, AugmentedView],
    params: ModelParams,
    cfg: TrainConfig,
    train: bool,
    rng: Optional[np.random.Generator],
) -> NodeReps:
    return encode(
        graph,
        params.embedding,
        params.layers,
        params.num_items_a,
        params.num_users,
        train=train,
        dropout_rate=cfg.dropout,
        activation=cfg.activation,
        slope=cfg.leaky_slope,
        rng=rng,
    )


def _preferences(
    params: ModelParams,
    graph: CdsGraph,
    reps: NodeReps,
    prefixes: Sequence[HybridSequence],
    cfg: TrainConfig,
) -> Dict[Domain, Tensor]:
    """Stacked sequence-level preferences H_S, (B, 2d), per domain."""
    local = graph.local_index()
    rows: Dict[Domain, List[Tensor]] = {Domain.A: [], Domain.B: []}
    empty = 0
    for prefix in prefixes:
        user = reshape(gather_rows(reps.final, [local["U"][prefix.user_id]]), (params.dim,))
        for domain in Domain:
            items = prefix.subsequence(domain)
            if not items:
                h_s = Tensor(np.zeros(params.dim))
                empty += 1
            else:
                emb = gather_rows(reps.final, [local[domain.value][i] for i in items])
                if cfg.use_ea:
                    h_s = attend_sequence(
                        emb, params.ea(domain), cfg.attention_mode, cfg.leaky_slope
                    )
                else:
                    h_s = mean_pool(emb)
            rows[domain].append(reshape(build_preference(h_s, user), (1, 2 * params.dim)))
    if empty:
        logger.debug("%d empty domain subsequences in batch; using zero vectors", empty)
    return {domain: concat(stacked, axis=0) for domain, stacked in rows.items()}


def forward_batch(
    params: ModelParams,
    examples: Sequence[NextItemExample],
    cfg: TrainConfig,
    seed: int,
    train: bool = True,
) -> BatchLosses:
    """
    Run the full pipeline on one batch and return its losses.

    Builds the CDS graph of the prefixes, encodes it, draws and encodes two
    augmented views for the contrastive loss (unless augmentation is none),
    pools each domain subsequence into a preference and scores the held-out
    targets of both domains.

    Args:
        params: Model parameters
        examples: Batch of next-item examples
        cfg: Training configuration
        seed: Seed of this batch; augmentation and dropout seeds derive from it
        train: Whether dropout is active

    Returns:
        BatchLosses whose objective (joint loss plus L2 penalty) is ready
        for backward()

    Raises:
        ContractError: If the batch is empty
    """
    if not examples:
        raise ContractError("forward_batch: empty batch")
    prefixes = [ex.prefix for ex in examples]
    graph = build_graph(prefixes, cfg.graph_norm)
    rng = np.random.default_rng(derive_seed(seed, "dropout")) if train else None
    reps = _encode(graph, params, cfg, train, rng)

    strategy = Augmentation(cfg.augmentation)
    views: Optional[Tuple[AugmentedView, AugmentedView]] = None
    ssl_a: Tensor = Tensor(0.0)
    ssl_b: Tensor = Tensor(0.0)
    empty_domains: List[str] = []
    if strategy != Augmentation.NONE:
        views = pair_views(graph, prefixes, strategy, cfg.alpha, derive_seed(seed, "aug"))
        z1 = _encode(views[0], params, cfg, train, rng)
        z2 = _encode(views[1], params, cfg, train, rng)
        ssl = ssl_losses(z1, z2, cfg.tau, cfg.ssl_reg)
        ssl_a, ssl_b, empty_domains = ssl.loss_a, ssl.loss_b, ssl.empty_domains

    prefs = _preferences(params, graph, reps, prefixes, cfg)
    supervised: Dict[Domain, Tensor] = {}
    counts: Dict[Domain, int] = {}
    for domain in Domain:
        targets = [
            (row, ex.target_a if domain == Domain.A else ex.target_b)
            for row, ex in enumerate(examples)
        ]
        targets = [(row, t) for row, t in targets if t is not None]
        counts[domain] = len(targets)
        if not targets:
            supervised[domain] = Tensor(0.0)
            continue
        picked = [row for row, _ in targets]
        probs = predict(
            gather_rows(prefs[Domain.A], picked),
            gather_rows(prefs[Domain.B], picked),
            params.head(domain),
            domain,
        )
        supervised[domain] = ce_loss(probs, [t for _, t in targets])

    beta = cfg.beta if strategy != Augmentation.NONE else 0.0
    joint = joint_loss(supervised[Domain.A], supervised[Domain.B], ssl_a, ssl_b, beta)
    batch_rows = gather_rows(
        params.embedding, graph.global_rows(params.num_items_a, params.num_users)
    )
    reg = l2_penalty([batch_rows, params.head_a.w, params.head_b.w], cfg.l2_reg, len(examples))
    return BatchLosses(
        loss_a=supervised[Domain.A],
        loss_b=supervised[Domain.B],
        ssl_a=ssl_a,
        ssl_b=ssl_b,
        joint=joint,
        reg=reg,
        targets_a=counts[Domain.A],
        targets_b=counts[Domain.B],
        graph=graph,
        views=views,
        empty_domains=empty_domains,
    )


def score_batch(
    params: ModelParams, examples: Sequence[NextItemExample], cfg: TrainConfig
) -> Dict[Domain, np.ndarray]:
    """Next-item probabilities over each domain's full vocabulary, one row per example."""
    if not examples:
        raise ContractError("score_batch: empty batch")
    prefixes = [ex.prefix for ex in examples]
    graph = build_graph(prefixes, cfg.graph_norm)
    reps = _encode(graph, params, cfg, False, None)
    prefs = _preferences(params, graph, reps, prefixes, cfg)
    return {
        domain: predict(prefs[Domain.A], prefs[Domain.B], params.head(domain), domain).numpy()
        for domain in Domain
    }


TOY_SEQUENCES = (
    (0, ((0, "A"), (0, "B"), (1, "A"), (2, "B"), (2, "A"), (1, "B"))),
    (1, ((1, "A"), (3, "A"), (2, "B"), (1, "B"), (4, "A"), (0, "B"))),
    (2, ((1, "B"), (0, "A"), (4, "A"), (0, "B"), (3, "A"), (2, "B"), (2, "A"))),
)


def toy_batch() -> List[NextItemExample]:
    """Three users over A items 0-4 and B items 0-2, as next-item examples."""
    sequences = [HybridSequence.from_pairs(user, pairs) for user, pairs in TOY_SEQUENCES]
    return make_examples(sequences)


def gradcheck_config() -> TrainConfig:
    """Deterministic small configuration used for gradient verification."""
    return TrainConfig(
        epochs=1,
        batch_size=3,
        embedding_size=4,
        layers=2,
        alpha=0.5,
        beta=0.3,
        dropout=0.0,
        ssl_reg=1.0,
        augmentation="ID",
        seed=7,
    )
