"""
Training loop: per-epoch discriminator step then main step, neighbor-set
refresh on the detached Q, consensus assembly and the final representation

    Q = [C* ⊕ Z¹ ⊕ … ⊕ Z^V]
"""

from dataclasses import dataclass
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from autodiff import Tape, Var
from clustering import evaluate
from config import TrainConfig
from data import MissingSpec, ViewSet, apply_missing, normalize
from errors import ConfigError, DimensionError, TrainingError
from logger import log
from losses import (
    LossBreakdown,
    loss_cor,
    loss_dis_discriminator,
    loss_dis_generator,
    loss_ent,
    loss_rec,
    objective_var,
    total_objective,
)
from networks import (
    AdamState,
    ModelParams,
    adam_step,
    decode_view,
    discriminate,
    encode_view,
    init_params,
    project,
)

__all__ = [
    "TrainConfig",
    "Embeddings",
    "OptimizerStates",
    "FitResult",
    "build_neighbor_sets",
    "assemble_consensus",
    "assemble_q",
    "common_alignment_gap",
    "adversarial_pairs",
    "prepare_viewset",
    "forward_embeddings",
    "train_epoch",
    "fit",
]


@dataclass(eq=False)
class Embeddings:
    z: Tuple[np.ndarray, ...]
    c: Tuple[np.ndarray, ...]
    c_star: np.ndarray
    q: np.ndarray

    @property
    def n_views(self) -> int:
        return len(self.z)


@dataclass
class OptimizerStates:
    main: AdamState
    disc: AdamState

    @classmethod
    def from_config(cls, config: TrainConfig) -> "OptimizerStates":
        return cls(AdamState.from_config(config), AdamState.from_config(config))


class FitResult(NamedTuple):
    params: ModelParams
    embeddings: Embeddings
    log: List[Dict[str, Any]]


ProgressHook = Callable[[int, Dict[str, Any]], None]


# ---------- NEIGHBORS / CONSENSUS ----------


def build_neighbor_sets(q: np.ndarray, n_omega: int) -> List[List[int]]:
    """
    The n_omega most cosine-similar other rows of each row of q.
    Equal similarities go to the lower index.
    """
    q = np.asarray(q, dtype=np.float64)
    n = q.shape[0]
    if n_omega < 1:
        raise ConfigError(f"n_omega must be >= 1, got {n_omega}")
    if n_omega >= n:
        raise ConfigError(f"n_omega={n_omega} needs more than {n_omega} samples, got N={n}")

    norms = np.maximum(np.linalg.norm(q, axis=1, keepdims=True), ad.COSINE_NORM_FLOOR)
    unit = q / norms
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    order = np.argsort(-sim, axis=1, kind="stable")
    return [order[i, :n_omega].tolist() for i in range(n)]


def _present_weights(mask: Optional[np.ndarray], n: int, n_views: int) -> np.ndarray:
    if mask is None:
        return np.full((n, n_views), 1.0 / n_views)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (n, n_views):
        raise DimensionError(f"mask shape {mask.shape} != ({n}, {n_views})")
    counts = mask.sum(axis=1, keepdims=True)
    return np.divide(mask, counts, out=np.zeros_like(mask), where=counts > 0)


def assemble_consensus(c: Sequence[np.ndarray], mask: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Elementwise mean of the per-view common representations. With a mask,
    each sample averages over its present views only.
    """
    if not c:
        raise DimensionError("assemble_consensus: no views given")
    arrays = [np.asarray(cv, dtype=np.float64) for cv in c]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise DimensionError(f"assemble_consensus: per-view shapes differ: {sorted(shapes)}")
    if mask is None:
        return np.mean(arrays, axis=0)
    weights = _present_weights(mask, arrays[0].shape[0], len(arrays))
    return sum(w[:, None] * a for w, a in zip(weights.T, arrays))


def assemble_q(c_star: np.ndarray, z: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([c_star, *z], axis=1)


def common_alignment_gap(c: Sequence[np.ndarray], mask: Optional[np.ndarray] = None) -> float:
    """Mean ||c_i^v - c_i^u||_2 over view pairs and the samples that have both views."""
    n_views = len(c)
    if n_views < 2:
        return 0.0
    n = c[0].shape[0]
    present = np.ones((n, n_views), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    distances = []
    for v in range(n_views):
        for u in range(v + 1, n_views):
            both = present[:, v] & present[:, u]
            if both.any():
                distances.append(np.linalg.norm(c[v][both] - c[u][both], axis=1))
    if not distances:
        return 0.0
    return float(np.concatenate(distances).mean())


def adversarial_pairs(n_views: int, mode: str = "cycle") -> List[Tuple[int, int]]:
    """
    (v, u) pairs: discriminator v sees Z^v as real and Z^u as fake.
    'cycle' pairs each view with the next one (u = v+1 mod V);
    'all' uses every u != v.
    """
    if n_views < 2:
        return []
    if mode == "all":
        return [(v, u) for v in range(n_views) for u in range(n_views) if u != v]
    return [(v, (v + 1) % n_views) for v in range(n_views)]


# ---------- FORWARD ----------


def prepare_viewset(data: ViewSet, config: TrainConfig) -> ViewSet:
    """Apply the missing-view protocol (when configured), then normalize."""
    if config.missing_ratio > 0:
        data = apply_missing(data, MissingSpec(config.missing_ratio, config.seed))
    return normalize(data, config.normalize)


def _view_outputs(bound, xs: Sequence[Var]) -> Tuple[List[Var], List[Var]]:
    zs, cs = [], []
    for v, x in enumerate(xs):
        h, h_bar = encode_view(bound, v, x)
        z, c = project(bound, v, h, h_bar)
        zs.append(z)
        cs.append(c)
    return zs, cs


def forward_embeddings(params: ModelParams, data: ViewSet) -> Embeddings:
    """Detached forward pass over the whole dataset."""
    if list(params.view_dims) != data.dims:
        raise DimensionError(f"model expects view dims {list(params.view_dims)}, data has {data.dims}")
    tape = Tape()
    bound = params.bind(tape)
    zs, cs = _view_outputs(bound, [tape.constant(x) for x in data.views])
    z = tuple(np.array(v.value) for v in zs)
    c = tuple(np.array(v.value) for v in cs)
    c_star = assemble_consensus(c, data.mask)
    return Embeddings(z, c, c_star, assemble_q(c_star, z))


# ---------- EPOCH ----------


def _check_finite(name: str, value: float, epoch: int) -> None:
    if not np.isfinite(value):
        log("error", "tr_non_finite_loss", component=name, epoch=epoch, value=value)
        raise TrainingError(name, epoch, value)


def _batches(n: int, config: TrainConfig, epoch: int) -> List[np.ndarray]:
    if config.batch_size == 0 or config.batch_size >= n:
        return [np.arange(n)]
    order = np.random.default_rng([config.seed, epoch]).permutation(n)
    return [np.sort(order[i:i + config.batch_size]) for i in range(0, n, config.batch_size)]


def _discriminator_step(
    params: ModelParams,
    state: AdamState,
    xs: Sequence[np.ndarray],
    mask: np.ndarray,
    pairs: Sequence[Tuple[int, int]],
    epoch: int,
) -> Tuple[ModelParams, AdamState, float]:
    # latents come from a separate pass so the encoders stay off this tape
    frozen_tape = Tape()
    frozen = params.bind(frozen_tape)
    zs, _ = _view_outputs(frozen, [frozen_tape.constant(x) for x in xs])

    tape = Tape()
    bound = params.bind(tape, trainable=params.names("disc"))
    z_consts = [tape.constant(z.value) for z in zs]
    loss = None
    for v, u in pairs:
        real = discriminate(bound, v, z_consts[v])
        fake = discriminate(bound, v, z_consts[u])
        term = loss_dis_discriminator(real, fake, mask[:, v], mask[:, u])
        loss = term if loss is None else ad.add(loss, term)

    value = float(loss.value[0, 0])
    _check_finite("dis_discriminator", value, epoch)
    grads = ad.backward(tape, loss)
    params, state = adam_step(state, params, grads)
    return params, state, value


def _main_step(
    params: ModelParams,
    state: AdamState,
    xs: Sequence[np.ndarray],
    mask: np.ndarray,
    q_ref: np.ndarray,
    pairs: Sequence[Tuple[int, int]],
    config: TrainConfig,
    epoch: int,
) -> Tuple[ModelParams, AdamState, Dict[str, Any]]:
    tape = Tape()
    bound = params.bind(tape, trainable=params.names("main"))
    x_vars = [tape.constant(x) for x in xs]
    zs, cs = _view_outputs(bound, x_vars)

    rec = [
        loss_rec(x_vars[v], decode_view(bound, v, zs[v], cs[v]), mask[:, v])
        for v in range(len(xs))
    ]
    cor: List[Var] = []
    dis: List[Var] = []
    if config.use_cor_dis:
        cor = [loss_cor(z, c) for z, c in zip(zs, cs)]
        dis = [loss_dis_generator(discriminate(bound, v, zs[u]), mask[:, u]) for v, u in pairs]

    ent = None
    n = xs[0].shape[0]
    # at least one negative per anchor must remain
    n_omega = min(config.n_omega, n - 2)
    if config.use_ent and n_omega >= 1:
        # differentiable twin of assemble_consensus
        weights = _present_weights(mask, n, len(xs))
        c_star = ad.multiply(cs[0], tape.constant(weights[:, [0]]))
        for v in range(1, len(cs)):
            c_star = ad.add(c_star, ad.multiply(cs[v], tape.constant(weights[:, [v]])))
        q = ad.concat([c_star, *zs])
        ent = loss_ent(q, build_neighbor_sets(q_ref, n_omega))

    parts = {
        "rec": [float(r.value[0, 0]) for r in rec],
        "cor": [float(c.value[0, 0]) for c in cor],
        "dis_generator": float(sum(d.value[0, 0] for d in dis)),
        "ent": 0.0 if ent is None else float(ent.value[0, 0]),
    }
    for name in ("rec", "cor"):
        for value in parts[name]:
            _check_finite(name, value, epoch)
    _check_finite("dis_generator", parts["dis_generator"], epoch)
    _check_finite("ent", parts["ent"], epoch)

    objective = objective_var(rec, cor, dis, ent, config.alpha, config.beta)
    _check_finite("total", float(objective.value[0, 0]), epoch)
    grads = ad.backward(tape, objective)
    params, state = adam_step(state, params, grads)
    return params, state, parts


def train_epoch(
    params: ModelParams,
    states: OptimizerStates,
    data: ViewSet,
    config: TrainConfig,
    epoch: int,
    q_ref: np.ndarray,
) -> Tuple[ModelParams, OptimizerStates, LossBreakdown]:
    """
    One epoch: per batch, a discriminator step (encoders frozen) then a main
    step on J (discriminators frozen). Positives for the neighbor term come
    from q_ref, the detached Q at the last refresh.
    """
    pairs = adversarial_pairs(data.n_views, config.adversarial_pairing) if config.use_cor_dis else []

    rec = np.zeros(data.n_views)
    cor = np.zeros(data.n_views)
    dis_generator = 0.0
    dis_discriminator = 0.0
    ent_weighted = 0.0
    for batch in _batches(data.n_samples, config, epoch):
        xs = [view[batch] for view in data.views]
        mask = data.mask[batch]
        if pairs:
            params, states.disc, d_loss = _discriminator_step(params, states.disc, xs, mask, pairs, epoch)
            dis_discriminator += d_loss
        params, states.main, parts = _main_step(
            params, states.main, xs, mask, q_ref[batch], pairs, config, epoch
        )
        rec += parts["rec"]
        if parts["cor"]:
            cor += parts["cor"]
        dis_generator += parts["dis_generator"]
        ent_weighted += parts["ent"] * batch.size

    breakdown = total_objective(
        rec,
        cor,
        dis_generator,
        ent_weighted / data.n_samples,
        config.alpha,
        config.beta,
        dis_discriminator=dis_discriminator,
    )
    return params, states, breakdown


# ---------- FIT ----------


def fit(
    data: ViewSet,
    config: TrainConfig,
    progress: Optional[ProgressHook] = None,
) -> FitResult:
    """
    init_params, then `epochs` calls of train_epoch. Neighbor sets are
    rebuilt from the detached Q every `neighbor_refresh` epochs.
    """
    config.validate()
    if config.use_ent and config.n_omega >= data.n_samples:
        raise ConfigError(f"n_omega={config.n_omega} must be below N={data.n_samples}")
    smallest = min(b.size for b in _batches(data.n_samples, config, 0))
    if config.use_ent and config.n_omega > smallest - 2:
        log(
            "warning",
            "tr_n_omega_clamped",
            n_omega=config.n_omega,
            effective=max(smallest - 2, 0),
            batch=int(smallest),
        )
    k = config.n_clusters or data.n_clusters
    if k > data.n_samples:
        raise ConfigError(f"K={k} exceeds N={data.n_samples}")

    params = init_params(config, data.dims, config.seed)
    states = OptimizerStates.from_config(config)
    embeddings = forward_embeddings(params, data)
    q_ref = embeddings.q
    log(
        "info",
        "tr_fit_start",
        dataset=data.name,
        n=data.n_samples,
        dims=data.dims,
        epochs=config.epochs,
        params=params.count(),
        align=common_alignment_gap(embeddings.c, data.mask),
    )

    records: List[Dict[str, Any]] = []
    for epoch in range(config.epochs):
        if epoch > 0 and epoch % config.neighbor_refresh == 0:
            q_ref = embeddings.q
            log("debug", "tr_neighbors_refreshed", epoch=epoch)

        try:
            params, states, breakdown = train_epoch(params, states, data, config, epoch, q_ref)
        except Exception as e:
            log("error", "tr_epoch_error", epoch=epoch, error=str(e))
            raise

        embeddings = forward_embeddings(params, data)
        record: Dict[str, Any] = {
            "epoch": epoch + 1,
            **breakdown.to_record(),
            "align": common_alignment_gap(embeddings.c, data.mask),
        }
        if config.eval_every and data.labels is not None and (epoch + 1) % config.eval_every == 0:
            result = evaluate(
                embeddings.q,
                data.labels,
                k,
                seed=config.seed,
                max_iters=config.kmeans_max_iters,
                restarts=config.kmeans_restarts,
            )
            record.update(acc=result.acc, nmi=result.nmi, pur=result.pur)

        records.append(record)
        log("debug", "tr_epoch", **record)
        if progress is not None:
            progress(epoch, record)

    log(
        "info",
        "tr_fit_done",
        dataset=data.name,
        epochs=config.epochs,
        final_total=records[-1]["total"] if records else None,
        q_columns=embeddings.q.shape[1],
    )
    return FitResult(params, embeddings, records)
