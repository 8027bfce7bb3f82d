"""Federated training loop: local SGD, in-cluster averaging, mutual distillation.

The round structure is the same for every algorithm -- local updates, an
aggregation step, evaluation -- and the algorithms differ only in how clients
are grouped and how their updates are merged:

* ``fedtsa``   -- duration-based clusters, per-cluster width; Stage 1 averages
  weights inside each cluster, Stage 2 runs deep mutual learning between the
  cluster models on server-side distillation inputs.
* ``fedavg``   -- a single cluster at a fixed width; Stage 1 only.
* ``fedprox``  -- ``fedavg`` plus a proximal term pulling local weights toward
  the round's starting model.
* ``heterofl`` -- duration-based clusters sharing one full-width global model;
  each coordinate is averaged over the clients whose submodel covers it.

Every reduction over clients or clusters sorts its operands per coordinate
before summing, so results are bit-identical under any permutation of the
inputs and under any degree of update parallelism.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from fedsim.clustering import (
    ClientProfile,
    ClusterAssignment,
    cluster_profiles,
    measure_durations,
)
from fedsim.data import (
    DISTILLATION_KINDS,
    DistillationSource,
    LabeledDataset,
    Partition,
    draw_distillation_batch,
    partition_dirichlet,
    partition_iid,
    reserve_indices,
)
from fedsim.errors import ConfigError, DimensionError, EngineError, FedsimError
from fedsim.losses import (
    cross_entropy,
    kl_divergence,
    kl_divergence_model_led,
    softmax_with_temperature,
)
from fedsim.models import (
    ModelParams,
    ModelSpec,
    OverlapMap,
    build_pruned_spec,
    extract_overlap,
    init_params,
    overlap_map,
)
from fedsim.nn import backward_from_cache, forward_cached, model_forward, sgd_step

ALGORITHMS = ("fedtsa", "fedavg", "fedprox", "heterofl")
LOSS_MODES = ("kl_only", "ce_only", "combined")
KL_DIRECTIONS = ("forward", "reverse")
STAGE1_WEIGHTINGS = ("uniform", "data_size")
PARTITION_MODES = ("iid", "dirichlet")

EVAL_CHUNK = 1024

# Disjoint random streams spawned off the master seed.  Each consumer gets its
# own spawn key so adding rounds, clients or draws never shifts another
# stream's values.
_STREAM_INIT = 0  # (stream, cluster_id) - per-cluster model init
_STREAM_LOCAL = 1  # (stream, client_id, round) - minibatch order per client
_STREAM_PARTITION = 2
_STREAM_HOLDOUT = 3
_STREAM_DISTILL = 4  # (stream, round) when resampling, (stream, 0) otherwise
_STREAM_PROFILE = 5


def stream_seed(master_seed: int, *key: int) -> np.random.SeedSequence:
    """A named, independent random stream derived from the master seed."""

    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(k) for k in key))


def profiling_seed(config: "FedConfig") -> np.random.SeedSequence:
    """The stream used to measure durations, shared by the run loop and the
    standalone profiling command so both produce the same measurements."""

    return stream_seed(config.master_seed, _STREAM_PROFILE)


@dataclass(frozen=True)
class FedConfig:
    """Everything a run needs besides the data, the model and the clients.

    Defaults follow the full protocol (batch 100, 100 local epochs, learning
    rate 0.03, 100 rounds, temperature 5, one global distillation epoch,
    KL-only Stage 2, 200 distillation samples); desk-scale runs override the
    counts, not the structure.
    """

    algorithm: str = "fedtsa"
    rounds: int = 100
    local_epochs: int = 100
    batch_size: int = 100
    learning_rate: float = 0.03
    stage1_weighting: str = "uniform"

    # Stage-2 mutual distillation
    temperature: float = 5.0
    global_epochs: int = 1
    loss_mode: str = "kl_only"
    loss_alpha: float = 0.5
    kl_direction: str = "forward"
    t_squared_rescale: bool = False
    include_self_in_consensus: bool = True
    distill_kind: str = "holdout"
    distill_count: int = 200
    distill_prompts: tuple[str, ...] = ()
    distill_directory: str | None = None
    distill_resample: bool = False
    holdout_count: int | None = None

    # baselines
    fedprox_mu: float = 0.01
    homogeneous_pruning: float = 1.0

    # data partitioning
    partition_mode: str = "iid"
    dirichlet_alpha: float = 0.6

    # profiling and clustering
    workload_units: float = 10.0
    profile_noise_sd: float = 0.05
    kde_bandwidth: float | None = None
    rate_ladder: tuple[float, ...] | None = None
    refine_kde: bool = True

    master_seed: int = 0

    def validate(self) -> None:
        def bad(msg: str, fieldname: str) -> None:
            raise ConfigError(msg, field=fieldname)

        if self.algorithm not in ALGORITHMS:
            bad(f"must be one of {ALGORITHMS}, got {self.algorithm!r}", "algorithm")
        if self.rounds < 0:
            bad(f"must be >= 0, got {self.rounds}", "rounds")
        if self.local_epochs < 0:
            bad(f"must be >= 0, got {self.local_epochs}", "local_epochs")
        if self.batch_size < 1:
            bad(f"must be >= 1, got {self.batch_size}", "batch_size")
        if not self.learning_rate > 0:
            bad(f"must be > 0, got {self.learning_rate}", "learning_rate")
        if self.stage1_weighting not in STAGE1_WEIGHTINGS:
            bad(
                f"must be one of {STAGE1_WEIGHTINGS}, got {self.stage1_weighting!r}",
                "stage1_weighting",
            )
        if not self.temperature > 0:
            bad(f"must be > 0, got {self.temperature}", "temperature")
        if self.global_epochs < 1:
            bad(f"must be >= 1, got {self.global_epochs}", "global_epochs")
        if self.loss_mode not in LOSS_MODES:
            bad(f"must be one of {LOSS_MODES}, got {self.loss_mode!r}", "loss_mode")
        if not 0.0 <= self.loss_alpha <= 1.0:
            bad(f"must lie in [0, 1], got {self.loss_alpha}", "loss_alpha")
        if self.kl_direction not in KL_DIRECTIONS:
            bad(f"must be one of {KL_DIRECTIONS}, got {self.kl_direction!r}", "kl_direction")
        if self.distill_kind not in DISTILLATION_KINDS:
            bad(f"must be one of {DISTILLATION_KINDS}, got {self.distill_kind!r}", "distill_kind")
        if self.distill_count < 1:
            bad(f"must be >= 1, got {self.distill_count}", "distill_count")
        if self.distill_kind == "directory" and not self.distill_directory:
            bad("required when distill_kind is 'directory'", "distill_directory")
        if self.holdout_count is not None and self.holdout_count < 1:
            bad(f"must be >= 1 when set, got {self.holdout_count}", "holdout_count")
        if self.fedprox_mu < 0:
            bad(f"must be >= 0, got {self.fedprox_mu}", "fedprox_mu")
        if not 0.0 < self.homogeneous_pruning <= 1.0:
            bad(f"must lie in (0, 1], got {self.homogeneous_pruning}", "homogeneous_pruning")
        if self.partition_mode not in PARTITION_MODES:
            bad(f"must be one of {PARTITION_MODES}, got {self.partition_mode!r}", "partition_mode")
        if not self.dirichlet_alpha > 0:
            bad(f"must be > 0, got {self.dirichlet_alpha}", "dirichlet_alpha")
        if not self.workload_units > 0:
            bad(f"must be > 0, got {self.workload_units}", "workload_units")
        if not 0.0 <= self.profile_noise_sd < 1.0 / 3.0:
            bad(f"must lie in [0, 1/3), got {self.profile_noise_sd}", "profile_noise_sd")
        if self.kde_bandwidth is not None and not self.kde_bandwidth > 0:
            bad(f"must be > 0 when set, got {self.kde_bandwidth}", "kde_bandwidth")
        if self.rate_ladder is not None:
            if not self.rate_ladder:
                bad("must be non-empty when set", "rate_ladder")
            for r in self.rate_ladder:
                if not 0.0 < r <= 1.0:
                    bad(f"entries must lie in (0, 1], got {r}", "rate_ladder")
        if self.master_seed < 0:
            bad(f"must be >= 0, got {self.master_seed}", "master_seed")


@dataclass
class ClusterState:
    """One cluster's model between rounds."""

    cluster_id: int
    spec: ModelSpec
    params: ModelParams
    rate: float
    member_ids: tuple[int, ...]


@dataclass(frozen=True)
class RoundMetrics:
    """What one round produced.  ``wall_seconds`` is measurement, not result:
    writers that promise byte-stable output must leave it out."""

    round_index: int
    cluster_accuracy: tuple[float, ...]
    client_weighted_accuracy: float
    data_weighted_accuracy: float
    unweighted_accuracy: float
    mean_local_loss: float
    stage2_kl: float
    wall_seconds: float

    def as_dict(self, include_wall: bool = False) -> dict:
        d = {
            "round": self.round_index,
            "cluster_accuracy": list(self.cluster_accuracy),
            "client_weighted_accuracy": self.client_weighted_accuracy,
            "data_weighted_accuracy": self.data_weighted_accuracy,
            "unweighted_accuracy": self.unweighted_accuracy,
            "mean_local_loss": self.mean_local_loss,
            "stage2_kl": self.stage2_kl,
        }
        if include_wall:
            d["wall_seconds"] = self.wall_seconds
        return d


@dataclass
class RunResult:
    """Everything a run leaves behind."""

    metrics: list[RoundMetrics]
    states: list[ClusterState]
    profiles: list[ClientProfile]
    partition: Partition
    assignment: ClusterAssignment | None = None
    global_params: ModelParams | None = None  # heterofl's full-width model


def _sorted_mean(stack: np.ndarray) -> np.ndarray:
    """Mean over axis 0 with a canonical summation order.

    Sorting per coordinate first makes the reduction invariant (bitwise) to
    the order the operands arrive in.
    """

    return np.sort(stack, axis=0).sum(axis=0) / stack.shape[0]


def local_update(
    spec: ModelSpec,
    params: ModelParams,
    features: np.ndarray,
    labels: np.ndarray,
    config: FedConfig,
    seed,
    prox_reference: ModelParams | None = None,
) -> tuple[ModelParams, float]:
    """``local_epochs`` epochs of minibatch SGD on cross-entropy.

    Each epoch reshuffles; a final short batch is processed, not dropped.
    With ``prox_reference`` set, the proximal term ``(mu/2) * ||w - ref||^2``
    is added to every batch objective.  Zero epochs (or a zero learning rate)
    return the starting parameters unchanged; the reported loss is the mean
    over all batch losses before their steps (NaN when no batch ran).
    """

    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = features.shape[0]
    if n == 0:
        raise EngineError("client has no training data")
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match {n} samples")
    rng = np.random.default_rng(seed)
    current = params
    batch_losses: list[float] = []
    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            take = order[start : start + config.batch_size]
            logits, caches = forward_cached(spec, current, features[take])
            loss, logit_grad = cross_entropy(logits, labels[take])
            grads = backward_from_cache(spec, current, caches, logit_grad)
            if prox_reference is not None and config.fedprox_mu > 0:
                for name in grads:
                    grads[name] += config.fedprox_mu * (
                        current.tensors[name] - prox_reference.tensors[name]
                    )
            current = sgd_step(current, grads, config.learning_rate)
            batch_losses.append(loss)
    mean_loss = float(np.mean(batch_losses)) if batch_losses else float("nan")
    return current, mean_loss


def stage1_aggregate(
    params_list: list[ModelParams],
    data_sizes: list[int] | None = None,
    weighting: str = "uniform",
) -> ModelParams:
    """Average client parameters inside one cluster (all same shapes).

    ``uniform`` sums per-coordinate in sorted order and divides by the count;
    ``data_size`` weights each client by its share of the cluster's samples
    (weighted values are sorted before summing).  Either way the result is
    bit-identical under permutation of the clients.
    """

    if not params_list:
        raise EngineError("cannot aggregate an empty cluster")
    if weighting not in STAGE1_WEIGHTINGS:
        raise ConfigError(f"must be one of {STAGE1_WEIGHTINGS}, got {weighting!r}", field="stage1_weighting")
    names = set(params_list[0].tensors)
    for p in params_list[1:]:
        if set(p.tensors) != names:
            raise DimensionError("cluster members disagree on parameter tensor names")
    if weighting == "data_size":
        if data_sizes is None or len(data_sizes) != len(params_list):
            raise EngineError("data_size weighting needs one sample count per client")
        sizes = np.asarray(data_sizes, dtype=np.float64)
        if np.any(sizes <= 0):
            raise EngineError("data_size weighting needs positive sample counts")
        weights = sizes / sizes.sum()
    out: dict[str, np.ndarray] = {}
    for name in params_list[0].tensors:
        shape = params_list[0].tensors[name].shape
        for p in params_list[1:]:
            if p.tensors[name].shape != shape:
                raise DimensionError(
                    f"{name}: cluster members disagree on shape "
                    f"({shape} vs {p.tensors[name].shape})"
                )
        if weighting == "uniform":
            stack = np.stack([p.tensors[name] for p in params_list])
            out[name] = np.sort(stack, axis=0).sum(axis=0) / len(params_list)
        else:
            stack = np.stack([w * p.tensors[name] for w, p in zip(weights, params_list)])
            out[name] = np.sort(stack, axis=0).sum(axis=0)
    return ModelParams(out)


def heterofl_aggregate(
    global_params: ModelParams,
    contributions: list[tuple[ModelParams, OverlapMap]],
) -> ModelParams:
    """Per-coordinate covering mean over heterogeneous submodels.

    Each client contributes to exactly the leading block its submodel covers;
    every global coordinate becomes the mean of the clients covering it, and
    coordinates nobody covers keep their previous value.  When every client
    covers everything this is arithmetic-for-arithmetic the uniform Stage-1
    average.
    """

    if not contributions:
        raise EngineError("cannot aggregate an empty client set")
    out: dict[str, np.ndarray] = {}
    for name, base in global_params.tensors.items():
        padded = []
        for params, omap in contributions:
            if name not in omap.extents:
                raise DimensionError(f"{name}: contribution has no overlap extent")
            block = params.tensors.get(name)
            if block is None:
                raise DimensionError(f"{name}: contribution is missing the tensor")
            canvas = np.full(base.shape, np.nan)
            sl = omap.slices(name)
            if block.shape != canvas[sl].shape:
                raise DimensionError(
                    f"{name}: contribution shape {block.shape} does not fit extent "
                    f"{omap.extents[name]}"
                )
            canvas[sl] = block
            padded.append(canvas)
        stack = np.sort(np.stack(padded), axis=0)  # NaN sorts to the end
        count = np.sum(~np.isnan(stack), axis=0)
        total = np.nansum(stack, axis=0)
        out[name] = np.where(count > 0, total / np.maximum(count, 1), base)
    return ModelParams(out)


def split_batches(features: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Fixed-order minibatch views of a distillation pool."""

    if batch_size < 1:
        raise ConfigError(f"must be >= 1, got {batch_size}", field="batch_size")
    return [features[i : i + batch_size] for i in range(0, features.shape[0], batch_size)]


def stage2_dml(
    states: list[ClusterState],
    batches: list[np.ndarray],
    config: FedConfig,
) -> tuple[list[ClusterState], float]:
    """Deep mutual learning between cluster models on unlabeled inputs.

    Per batch, every cluster's logits are snapshotted before anyone moves;
    the consensus is the plain mean of the snapshot (including the cluster's
    own logits unless configured otherwise), softened at the distillation
    temperature, and each cluster takes one SGD step toward it.  Batches are
    sequential: later batches see earlier steps.  Returns new states plus the
    mean per-step KL value (0.0 when no KL term is active).

    With a single cluster and ``kl_only`` the consensus equals the cluster's
    own distribution, the gradient is exactly zero, and parameters come back
    unchanged.
    """

    if not states:
        raise EngineError("stage 2 needs at least one cluster")
    m = len(states)
    if m == 1 and not config.include_self_in_consensus:
        raise EngineError("consensus over zero peers: a single cluster must include itself")
    kl_fn = kl_divergence if config.kl_direction == "forward" else kl_divergence_model_led
    scale = config.temperature**2 if config.t_squared_rescale else 1.0
    params = [s.params for s in states]
    kl_sum = 0.0
    kl_steps = 0
    for _ in range(config.global_epochs):
        for batch in batches:
            snapshots = []
            caches_by_cluster = []
            for s, p in zip(states, params):
                logits, caches = forward_cached(s.spec, p, batch)
                snapshots.append(logits)
                caches_by_cluster.append(caches)
            stack = np.stack(snapshots)
            shared = _sorted_mean(stack) if config.include_self_in_consensus else None
            new_params = []
            for r, state in enumerate(states):
                consensus = (
                    shared
                    if shared is not None
                    else _sorted_mean(np.delete(stack, r, axis=0))
                )
                own = snapshots[r]
                logit_grad = None
                if config.loss_mode in ("kl_only", "combined"):
                    kl_value, kl_grad = kl_fn(
                        softmax_with_temperature(consensus, config.temperature),
                        own,
                        config.temperature,
                    )
                    kl_sum += kl_value
                    kl_steps += 1
                    logit_grad = scale * kl_grad
                if config.loss_mode in ("ce_only", "combined"):
                    pseudo = np.argmax(consensus, axis=1)
                    _, ce_grad = cross_entropy(own, pseudo)
                    if config.loss_mode == "ce_only":
                        logit_grad = ce_grad
                    else:
                        logit_grad = config.loss_alpha * logit_grad + (1.0 - config.loss_alpha) * ce_grad
                grads = backward_from_cache(state.spec, params[r], caches_by_cluster[r], logit_grad)
                new_params.append(sgd_step(params[r], grads, config.learning_rate))
            params = new_params
    new_states = [replace(s, params=p) for s, p in zip(states, params)]
    mean_kl = kl_sum / kl_steps if kl_steps else 0.0
    return new_states, mean_kl


def evaluate(spec: ModelSpec, params: ModelParams, features: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy, computed in fixed-size chunks."""

    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = features.shape[0]
    if n == 0:
        raise DimensionError("cannot evaluate on an empty set")
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match {n} samples")
    hits = 0
    for start in range(0, n, EVAL_CHUNK):
        logits = model_forward(spec, params, features[start : start + EVAL_CHUNK])
        hits += int(np.sum(np.argmax(logits, axis=1) == labels[start : start + EVAL_CHUNK]))
    return hits / n


def _build_distillation_source(
    config: FedConfig, train: LabeledDataset, holdout: np.ndarray | None
) -> DistillationSource:
    if config.distill_kind == "holdout":
        return DistillationSource(
            "holdout",
            prompts=config.distill_prompts,
            dataset=train,
            holdout_indices=holdout,
        )
    if config.distill_kind == "directory":
        return DistillationSource(
            "directory", prompts=config.distill_prompts, directory=config.distill_directory
        )
    return DistillationSource(
        "noise", prompts=config.distill_prompts, input_shape=train.input_shape
    )


def _single_cluster_assignment(profiles: list[ClientProfile], rate: float) -> ClusterAssignment:
    durations = np.array([p.measured_duration for p in profiles], dtype=np.float64)
    return ClusterAssignment(
        durations=durations,
        cluster_of=np.zeros(len(profiles), dtype=np.int64),
        boundaries=np.array([]),
        cluster_means=np.array([float(durations.mean())]),
        rates=np.array([rate]),
    )


def run_experiment(
    config: FedConfig,
    base_spec: ModelSpec,
    train: LabeledDataset,
    test: LabeledDataset,
    profiles: list[ClientProfile],
    workers: int = 1,
    on_round=None,
) -> RunResult:
    """Cluster once, then run the configured number of federated rounds.

    ``workers`` parallelises the per-client local updates only; every number
    in the output is bit-identical whatever its value.  ``on_round`` (if set)
    is called with each :class:`RoundMetrics` as it is produced.
    """

    config.validate()
    if workers < 1:
        raise ConfigError(f"must be >= 1, got {workers}", field="workers")
    if not profiles:
        raise ConfigError("need at least one client profile", field="profiles")
    ids = [p.client_id for p in profiles]
    if len(set(ids)) != len(ids):
        raise ConfigError("client ids must be unique", field="profiles")
    if any(i < 0 for i in ids):
        raise ConfigError("client ids must be non-negative", field="profiles")
    if train.class_count != test.class_count:
        raise DimensionError("train and test disagree on the number of classes")

    seed = config.master_seed

    # Reserve the server-side holdout before partitioning so no client ever
    # trains on a distillation input.
    holdout = None
    pool_indices = None
    if config.algorithm == "fedtsa" and config.distill_kind == "holdout":
        n_hold = config.holdout_count if config.holdout_count is not None else config.distill_count
        if n_hold >= len(train):
            raise ConfigError(
                f"holdout of {n_hold} leaves no training data (have {len(train)})",
                field="holdout_count",
            )
        holdout, pool_indices = reserve_indices(len(train), n_hold, stream_seed(seed, _STREAM_HOLDOUT))

    if config.partition_mode == "iid":
        partition = partition_iid(
            train.labels, len(profiles), stream_seed(seed, _STREAM_PARTITION), indices=pool_indices
        )
    else:
        partition = partition_dirichlet(
            train.labels,
            len(profiles),
            config.dirichlet_alpha,
            stream_seed(seed, _STREAM_PARTITION),
            indices=pool_indices,
        )
    sizes = partition.sizes()
    profiles = [replace(p, data_size=int(s)) for p, s in zip(profiles, sizes)]

    if any(p.measured_duration is None for p in profiles):
        profiles = measure_durations(
            profiles, config.workload_units, config.profile_noise_sd, profiling_seed(config)
        )

    if config.algorithm in ("fedtsa", "heterofl"):
        assignment = cluster_profiles(
            profiles,
            bandwidth=config.kde_bandwidth,
            ladder=list(config.rate_ladder) if config.rate_ladder is not None else None,
            refine=config.refine_kde,
        )
    else:
        assignment = _single_cluster_assignment(profiles, config.homogeneous_pruning)
    rates = assignment.rates

    states: list[ClusterState] = []
    for c in range(assignment.cluster_count):
        spec_c = build_pruned_spec(base_spec, float(rates[c]))
        params_c = init_params(spec_c, stream_seed(seed, _STREAM_INIT, c))
        members = tuple(int(ids[pos]) for pos in assignment.members(c))
        states.append(ClusterState(c, spec_c, params_c, float(rates[c]), members))

    # position of each client in the profile/partition order, keyed by id
    pos_of = {cid: pos for pos, cid in enumerate(ids)}

    global_params = None
    omaps: list[OverlapMap] = []
    if config.algorithm == "heterofl":
        global_params = init_params(base_spec, stream_seed(seed, _STREAM_INIT, 0))
        omaps = [overlap_map(base_spec, s.spec) for s in states]
        for state, omap in zip(states, omaps):
            state.params = extract_overlap(global_params, omap)

    distill_batches: list[np.ndarray] = []
    distill_source = None
    if config.algorithm == "fedtsa":
        distill_source = _build_distillation_source(config, train, holdout)
        if not config.distill_resample:
            drawn = draw_distillation_batch(
                distill_source, config.distill_count, stream_seed(seed, _STREAM_DISTILL, 0)
            )
            distill_batches = split_batches(drawn.features, config.batch_size)

    prox = config.algorithm == "fedprox"
    metrics: list[RoundMetrics] = []
    for t in range(config.rounds):
        t0 = time.perf_counter()

        jobs = []  # (client_id, cluster_index, start params)
        for ci, state in enumerate(states):
            start_params = state.params
            for cid in state.member_ids:
                jobs.append((cid, ci, start_params))

        def one_update(job):
            cid, ci, start_params = job
            idx = partition.client_indices[pos_of[cid]]
            try:
                new_params, loss = local_update(
                    states[ci].spec,
                    start_params,
                    train.features[idx],
                    train.labels[idx],
                    config,
                    stream_seed(seed, _STREAM_LOCAL, cid, t),
                    prox_reference=start_params if prox else None,
                )
            except FedsimError as exc:
                raise EngineError(f"round {t}, cluster {ci}, client {cid}: {exc}") from exc
            return cid, ci, new_params, loss

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(one_update, jobs))
        else:
            results = [one_update(job) for job in jobs]

        by_cluster: dict[int, dict[int, ModelParams]] = {ci: {} for ci in range(len(states))}
        losses = []
        for cid, ci, new_params, loss in results:
            by_cluster[ci][cid] = new_params
            losses.append(loss)
        mean_local_loss = float(np.mean(losses)) if losses else float("nan")

        if config.algorithm == "heterofl":
            contributions = []
            for ci, state in enumerate(states):
                for cid in state.member_ids:
                    contributions.append((by_cluster[ci][cid], omaps[ci]))
            global_params = heterofl_aggregate(global_params, contributions)
            for state, omap in zip(states, omaps):
                state.params = extract_overlap(global_params, omap)
        else:
            for ci, state in enumerate(states):
                members = sorted(by_cluster[ci])
                member_sizes = [int(sizes[pos_of[cid]]) for cid in members]
                state.params = stage1_aggregate(
                    [by_cluster[ci][cid] for cid in members],
                    data_sizes=member_sizes,
                    weighting=config.stage1_weighting,
                )

        stage2_kl = 0.0
        if config.algorithm == "fedtsa":
            if config.distill_resample:
                drawn = draw_distillation_batch(
                    distill_source, config.distill_count, stream_seed(seed, _STREAM_DISTILL, t)
                )
                distill_batches = split_batches(drawn.features, config.batch_size)
            try:
                states, stage2_kl = stage2_dml(states, distill_batches, config)
            except FedsimError as exc:
                raise EngineError(f"round {t}, stage 2: {exc}") from exc

        accuracies = tuple(
            evaluate(s.spec, s.params, test.features, test.labels) for s in states
        )
        member_counts = np.array([len(s.member_ids) for s in states], dtype=np.float64)
        member_data = np.array(
            [sum(int(sizes[pos_of[cid]]) for cid in s.member_ids) for s in states],
            dtype=np.float64,
        )
        acc = np.asarray(accuracies)
        round_metrics = RoundMetrics(
            round_index=t,
            cluster_accuracy=accuracies,
            client_weighted_accuracy=float(np.sum(acc * member_counts) / member_counts.sum()),
            data_weighted_accuracy=float(np.sum(acc * member_data) / member_data.sum()),
            unweighted_accuracy=float(acc.mean()),
            mean_local_loss=mean_local_loss,
            stage2_kl=stage2_kl,
            wall_seconds=time.perf_counter() - t0,
        )
        metrics.append(round_metrics)
        if on_round is not None:
            on_round(round_metrics)

    return RunResult(
        metrics=metrics,
        states=states,
        profiles=profiles,
        partition=partition,
        assignment=assignment,
        global_params=global_params,
    )
