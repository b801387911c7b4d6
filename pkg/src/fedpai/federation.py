"""The federated round engine: sampling, local training, aggregation.

Five strategies share one loop:

- ``fedavg``: dense baseline, plain averaging.
- ``fedpai_u_client``: each client derives a personal gradient-flow mask
  from its own data at initialization; the server averages masked updates
  and re-sparsifies with a magnitude top-kappa (sparsity-aware
  aggregation), producing the global mask used for downloads.
- ``fedpai_u_server``: one gradient-flow mask computed server-side from a
  proxy batch and shared by all clients.
- ``fedpai_s``: structured channel pruning; the server recomputes a
  channel mask each round until it stabilizes, then regroups the model
  into a physically smaller one.
- ``iterative_magnitude``: magnitude mask recomputed every round on a
  geometric schedule, with lottery-style rewinding (surviving weights
  reset to their initial values while the schedule is still cutting) and
  a fixed learning rate.

Averaging masked models densifies the result wherever client masks
disagree (the sparsity-cancellation effect); sparsity-aware aggregation
restores the budget:

>>> import numpy as np
>>> from fedpai.model import mlp_spec, init_weights
>>> from fedpai.pruning import Mask
>>> spec = mlp_spec(4, [], 4)          # one dense layer: 16 prunable weights
>>> st = init_weights(spec, 0)
>>> st.params[:16] = np.arange(1.0, 17.0)
>>> a = Mask(np.array([1] * 4 + [0] * 12, dtype=np.uint8), 0.25)
>>> b = Mask(np.array([0] * 4 + [1] * 4 + [0] * 8, dtype=np.uint8), 0.25)
>>> aggregate_fedavg([(st, a), (st, b)]).nnz_prunable()   # union: 2 * ceil(kappa*n)
8
>>> state, mask = aggregate_sparsity_aware([(st, a), (st, b)], kappa=0.25)
>>> state.nnz_prunable()                                  # back to ceil(kappa*n)
4
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, partition_dirichlet, partition_iid
from .errors import ConfigError, LayoutError
from .metrics import RoundReport, encode_sparse, evaluate, flops_forward
from .model import ModelSpec, ModelState, init_weights, loss_and_grad, sgd_step
from .pruning import (
    Mask,
    apply_mask,
    grasp_score,
    iterative_prune_schedule,
    magnitude_mask,
    top_kappa_mask,
)
from .structured import (
    ChannelMask,
    MaskHistory,
    channel_importance,
    channel_mask_from_scores,
    ebt_check,
    regroup,
)

STRATEGIES = (
    "fedavg",
    "fedpai_u_client",
    "fedpai_u_server",
    "fedpai_s",
    "iterative_magnitude",
)

# seed-stream tags so the rng draws of one concern never shift another
_TAG_SAMPLE = 4
_TAG_SHUFFLE = 5
_TAG_PROXY = 6
_TAG_SCORING = 7


@dataclass
class StrategyConfig:
    strategy: str
    kappa: float = 1.0
    local_epochs: int = 10
    batch_size: int = 32
    lr: float = 0.1
    lr_decay_round: int = 100
    lr_decay_factor: float = 0.1
    clients_per_round: float = 0.1
    grasp_batch_size: int = 128
    ebt_window: int = 5
    ebt_epsilon: float = 0.1
    iterative_prune_rounds: int = 100  # half the default 200-round horizon
    aggregate_by_support: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(field="strategy", value=self.strategy, allowed=f"one of {STRATEGIES}")
        if not 0.0 < self.kappa <= 1.0:
            raise ConfigError(field="kappa", value=self.kappa, allowed="in (0,1]")
        if not 0.0 < self.clients_per_round <= 1.0:
            raise ConfigError(
                field="clients_per_round", value=self.clients_per_round, allowed="in (0,1]"
            )
        if self.local_epochs < 0:
            raise ConfigError(field="local_epochs", value=self.local_epochs, allowed=">= 0")
        if self.batch_size < 1:
            raise ConfigError(field="batch_size", value=self.batch_size, allowed=">= 1")


@dataclass
class ClientState:
    client_id: int
    indices: np.ndarray  # this client's shard of training indices
    personal_mask: Mask | None = None
    local_state: ModelState | None = None


@dataclass
class ServerState:
    spec: ModelSpec
    global_state: ModelState
    global_mask: Mask | ChannelMask | None
    round: int
    strategy: str
    original_prunable: int
    ebt_history: MaskHistory = field(default_factory=lambda: MaskHistory(5))
    ebt_fixed: bool = False
    init_params: np.ndarray | None = None  # rewind target for the LTH-style baseline


def sample_clients(client_ids, fraction: float, round_index: int, seed: int) -> list[int]:
    """ceil(fraction * N) distinct ids, uniform, deterministic per round."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(field="fraction", value=fraction, allowed="in (0,1]")
    ids = list(client_ids)
    k = max(1, math.ceil(fraction * len(ids) - 1e-9))
    rng = np.random.default_rng((seed, _TAG_SAMPLE, round_index))
    pick = rng.choice(len(ids), size=k, replace=False)
    return sorted(ids[i] for i in pick)


def local_train(
    spec: ModelSpec,
    state: ModelState,
    x: np.ndarray,
    y: np.ndarray,
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    mask: Mask | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[ModelState, float]:
    """Minibatch SGD on one shard; returns (state, mean minibatch loss).

    The personal mask is applied up front and pinned on every step, so the
    returned state is exactly zero off-mask. With ``batch_size >= len(y)``
    batches are taken in shard order (full-batch GD, no shuffling).
    """
    if mask is not None:
        state = apply_mask(state, mask)
    n = len(y)
    if epochs == 0:
        return state, evaluate(spec, state, x, y)[1]
    losses = []
    for _ in range(epochs):
        if batch_size >= n:
            order = np.arange(n)
        else:
            order = (rng or np.random.default_rng()).permutation(n)
        for start in range(0, n, batch_size):
            b = order[start : start + batch_size]
            loss, g = loss_and_grad(spec, state, x[b], y[b])
            state = sgd_step(state, g, lr, mask)
            losses.append(loss)
    return state, float(np.mean(losses))


def aggregate_fedavg(updates, by_support: bool = False) -> ModelState:
    """Coordinate-wise mean of masked updates with divisor |participants|.

    ``by_support=True`` switches the divisor to the per-coordinate count
    of clients whose mask covers that coordinate (off by default: the
    plain form divides by the participant count everywhere, shrinking
    coordinates only some clients hold).
    """
    if not updates:
        raise LayoutError("cannot aggregate an empty update list")
    layout = updates[0][0].layout
    if any(s.layout.n_params != layout.n_params for s, _ in updates):
        raise LayoutError("updates have incongruent layouts")
    acc = np.zeros(layout.n_params)
    support = np.zeros(layout.n_params)
    for state, mask in updates:
        masked = state if mask is None else apply_mask(state, mask)
        acc += masked.params
        if by_support:
            keep = np.ones(layout.n_params)
            if mask is not None:
                keep[layout.prunable_index[mask.bits == 0]] = 0.0
            support += keep
    if by_support:
        return ModelState(acc / np.maximum(support, 1.0), layout)
    return ModelState(acc / len(updates), layout)


def aggregate_sparsity_aware(updates, kappa: float, by_support: bool = False) -> tuple[ModelState, Mask]:
    """Mean the masked updates, then keep only the top-kappa magnitudes.

    Returns the re-sparsified global state and the resulting global mask
    (used to prune the next download).
    """
    mean = aggregate_fedavg(updates, by_support)
    mask = magnitude_mask(mean, kappa)
    return apply_mask(mean, mask), mask


def _scoring_batch(x_all, y_all, indices, batch_size: int, seed_key) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed_key)
    take = min(batch_size, len(indices))
    pick = indices[rng.permutation(len(indices))[:take]]
    return x_all[pick], y_all[pick]


def init_federation(
    spec: ModelSpec,
    dataset: Dataset,
    cfg: StrategyConfig,
    num_clients: int,
    alpha: float | None,
    seed: int,
) -> tuple[ServerState, list[ClientState], np.ndarray, np.ndarray]:
    """Model init, partitioning, and strategy-specific mask setup.

    Pruning-at-initialization masks are computed here, at the shared
    initial weights, before any training. Returns (server, clients,
    features, labels) with features reshaped for the spec.
    """
    state = init_weights(spec, seed)
    if alpha is None:
        plan = partition_iid(dataset, num_clients, seed)
    else:
        plan = partition_dirichlet(dataset, num_clients, alpha, seed)
    x_all = dataset.features.reshape((len(dataset.features),) + spec.input_shape)
    y_all = dataset.labels
    clients = [ClientState(i, plan.client_indices[i]) for i in range(num_clients)]
    server = ServerState(
        spec=spec,
        global_state=state,
        global_mask=None,
        round=0,
        strategy=cfg.strategy,
        original_prunable=state.layout.n_prunable,
        ebt_history=MaskHistory(cfg.ebt_window),
        init_params=state.params.copy() if cfg.strategy == "iterative_magnitude" else None,
    )
    if cfg.strategy == "fedpai_u_client":
        for c in clients:
            bx, by = _scoring_batch(
                x_all, y_all, c.indices, cfg.grasp_batch_size, (seed, _TAG_SCORING, c.client_id)
            )
            c.personal_mask = top_kappa_mask(grasp_score(spec, state, bx, by), cfg.kappa)
    elif cfg.strategy == "fedpai_u_server":
        # the server holds no client data: score on a proxy batch drawn
        # from the held-out test distribution (simulator convenience)
        bx, by = _scoring_batch(
            x_all, y_all, dataset.test_indices, cfg.grasp_batch_size, (seed, _TAG_PROXY)
        )
        mask = top_kappa_mask(grasp_score(spec, state, bx, by), cfg.kappa)
        server.global_mask = mask
        for c in clients:
            c.personal_mask = mask
    return server, clients, x_all, y_all


def run_round(
    server: ServerState,
    clients: list[ClientState],
    cfg: StrategyConfig,
    x_all: np.ndarray,
    y_all: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    seed: int,
) -> RoundReport:
    """One communication round; mutates server and sampled clients."""
    t0 = time.perf_counter()
    t = server.round
    if cfg.strategy == "iterative_magnitude":
        lr = cfg.lr  # fixed rate for the iterative baseline
    else:
        lr = cfg.lr * cfg.lr_decay_factor if t >= cfg.lr_decay_round else cfg.lr

    sampled = sample_clients(range(len(clients)), cfg.clients_per_round, t, seed)

    down_mask = server.global_mask if isinstance(server.global_mask, Mask) else None
    broadcast = (
        apply_mask(server.global_state, down_mask) if down_mask is not None else server.global_state
    )
    bytes_down = len(sampled) * encode_sparse(broadcast, down_mask).byte_size

    updates = []
    losses = []
    bytes_up = 0
    for cid in sampled:
        c = clients[cid]
        new_state, mean_loss = local_train(
            server.spec,
            broadcast,
            x_all[c.indices],
            y_all[c.indices],
            epochs=cfg.local_epochs,
            batch_size=cfg.batch_size,
            lr=lr,
            mask=c.personal_mask,
            rng=np.random.default_rng((seed, _TAG_SHUFFLE, t, cid)),
        )
        c.local_state = new_state
        losses.append(mean_loss)
        bytes_up += encode_sparse(new_state, c.personal_mask).byte_size
        updates.append((new_state, c.personal_mask))

    if cfg.strategy in ("fedavg", "fedpai_s"):
        new_global = aggregate_fedavg(updates, cfg.aggregate_by_support)
    elif cfg.strategy in ("fedpai_u_client", "fedpai_u_server"):
        new_global, global_mask = aggregate_sparsity_aware(
            updates, cfg.kappa, cfg.aggregate_by_support
        )
        server.global_mask = global_mask
    else:  # iterative_magnitude
        mean = aggregate_fedavg(updates, cfg.aggregate_by_support)
        kappa_t = iterative_prune_schedule(t + 1, cfg.kappa, cfg.iterative_prune_rounds)
        mask = magnitude_mask(mean, kappa_t)
        if kappa_t < 1.0 and t + 1 <= cfg.iterative_prune_rounds:
            # lottery-style cycle: while the schedule is still cutting,
            # surviving weights rewind to their initial values
            rewound = ModelState(server.init_params.copy(), mean.layout)
            new_global = apply_mask(rewound, mask)
        else:
            new_global = apply_mask(mean, mask)
        server.global_mask = mask
        for c in clients:
            c.personal_mask = mask  # recomputed each round, not a PaI mask

    if cfg.strategy == "fedpai_s" and not server.ebt_fixed and t >= 1:
        candidate = channel_mask_from_scores(
            channel_importance(server.spec, new_global), cfg.kappa
        )
        server.ebt_history.push(candidate, t)
        fixed = ebt_check(server.ebt_history, cfg.ebt_epsilon)
        if fixed is not None:
            server.spec, new_global = regroup(server.spec, new_global, fixed)
            server.global_mask = fixed
            server.ebt_fixed = True

    accuracy, _ = evaluate(server.spec, new_global, test_x, test_y)
    nnz = new_global.nnz_prunable()
    server.global_state = new_global
    server.round = t + 1
    return RoundReport(
        round=t,
        test_accuracy=accuracy,
        train_loss=float(np.mean(losses)),
        bytes_up=bytes_up,
        bytes_down=bytes_down,
        model_nnz=nnz,
        sparsity=1.0 - nnz / server.original_prunable,
        flops_per_forward=flops_forward(server.spec),
        wallclock_ms=int((time.perf_counter() - t0) * 1000),
    )


def run_experiment(
    spec: ModelSpec,
    dataset: Dataset,
    cfg: StrategyConfig,
    *,
    num_clients: int,
    rounds: int,
    alpha: float | None,
    seed: int,
    sink=None,
    capture: dict | None = None,
) -> list[RoundReport]:
    """Run one full training trajectory; a pure function of its arguments.

    ``sink``, when given, receives each RoundReport as it is produced.
    ``capture``, when given, is filled with the final ``server`` and
    ``clients`` states (for mask export and inspection).
    """
    server, clients, x_all, y_all = init_federation(
        spec, dataset, cfg, num_clients, alpha, seed
    )
    test_x = x_all[dataset.test_indices]
    test_y = y_all[dataset.test_indices]
    reports = []
    for _ in range(rounds):
        report = run_round(server, clients, cfg, x_all, y_all, test_x, test_y, seed)
        reports.append(report)
        if sink is not None:
            sink(report)
    if capture is not None:
        capture["server"] = server
        capture["clients"] = clients
    return reports
