"""
Parameter containers, forward passes and the Adam optimizer.

Per view v the model holds:
  enc.v      view-specific encoder          d_v -> ... -> h
  adapter.v  input adapter of the shared encoder  d_v -> adapter_width
  trunk      shared trunk (tied across views)     adapter_width -> ... -> h̄
  head_z.v   specific projection head       h -> D_z
  head_c.v   common projection head         h̄ -> D_c
  dec.v      decoder                        D_z + D_c -> ... -> d_v
  disc.v     discriminator                  D_z -> ... -> 1 (sigmoid)

Weights are stored (fan_in, fan_out) so a layer is X·W + b.
"""

import json
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from autodiff import Tape, Var
from config import ACTIVATIONS, TrainConfig, train_config_from_dict
from errors import ConfigError, ContractError, DimensionError, IngestionError
from logger import log


DISC_PREFIX = "disc."


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: Tuple[int, ...]
    activation: str = "relu"
    output_activation: Optional[str] = None

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise ConfigError(f"an MLP needs at least 2 widths, got {self.layer_widths}")
        if any(w < 1 for w in self.layer_widths):
            raise ConfigError(f"zero-width layer in {self.layer_widths}")
        for act in (self.activation, self.output_activation):
            if act is not None and act not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {act!r}")

    @property
    def layers(self) -> List[Tuple[int, int]]:
        return list(zip(self.layer_widths[:-1], self.layer_widths[1:]))


def build_specs(config: TrainConfig, view_dims: Sequence[int]) -> Dict[str, MlpSpec]:
    if not view_dims:
        raise ConfigError("at least one view is required")
    if any(d < 1 for d in view_dims):
        raise ConfigError(f"view dimensions must be >= 1, got {list(view_dims)}")

    act = config.activation
    specs: Dict[str, MlpSpec] = {
        "trunk": MlpSpec((config.adapter_width, *config.trunk_widths), act, act),
    }
    for v, d in enumerate(view_dims):
        specs[f"enc.{v}"] = MlpSpec((d, *config.encoder_widths), act, act)
        specs[f"adapter.{v}"] = MlpSpec((d, config.adapter_width), act, act)
        specs[f"head_z.{v}"] = MlpSpec((config.encoder_widths[-1], config.dim_z), act)
        specs[f"head_c.{v}"] = MlpSpec((config.trunk_widths[-1], config.dim_c), act)
        specs[f"dec.{v}"] = MlpSpec((config.dim_z + config.dim_c, *config.decoder_widths, d), act)
        specs[f"disc.{v}"] = MlpSpec((config.dim_z, *config.discriminator_widths, 1), act, "sigmoid")
    return specs


@dataclass
class ModelParams:
    """Named parameter matrices plus the layer specs they were built from."""

    values: Dict[str, np.ndarray]
    specs: Dict[str, MlpSpec]
    view_dims: Tuple[int, ...]
    dim_z: int
    dim_c: int

    @property
    def n_views(self) -> int:
        return len(self.view_dims)

    def names(self, group: str = "all") -> List[str]:
        """group: 'all', 'disc' (discriminators) or 'main' (everything else)."""
        if group == "disc":
            return [n for n in self.values if n.startswith(DISC_PREFIX)]
        if group == "main":
            return [n for n in self.values if not n.startswith(DISC_PREFIX)]
        return list(self.values)

    def count(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def replace_values(self, values: Dict[str, np.ndarray]) -> "ModelParams":
        return ModelParams(values, self.specs, self.view_dims, self.dim_z, self.dim_c)

    def bind(self, tape: Tape, trainable: Iterable[str] = ()) -> "BoundParams":
        """
        Put every parameter on the tape. Names in `trainable` become leaves
        (gradients reported); the rest enter as constants.
        """
        trainable = set(trainable)
        unknown = trainable - set(self.values)
        if unknown:
            raise ContractError(f"bind: unknown parameter names {sorted(unknown)}")
        vars_: Dict[str, Var] = {}
        for name, value in self.values.items():
            vars_[name] = tape.leaf(name, value) if name in trainable else tape.constant(value)
        return BoundParams(tape, vars_, self)


@dataclass
class BoundParams:
    tape: Tape
    vars: Dict[str, Var]
    params: ModelParams

    def __getitem__(self, name: str) -> Var:
        return self.vars[name]


def _param_name(net: str, layer: int, kind: str) -> str:
    return f"{net}.{layer}.{kind}"


def init_params(config: TrainConfig, view_dims: Sequence[int], seed: int) -> ModelParams:
    """
    Glorot-uniform weights, zero biases. Drawn in build_specs order from one
    generator seeded with `seed`, so the result is fully determined by it.
    """
    specs = build_specs(config, view_dims)
    rng = np.random.default_rng(seed)
    values: Dict[str, np.ndarray] = {}
    for net, spec in specs.items():
        for layer, (fan_in, fan_out) in enumerate(spec.layers):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            values[_param_name(net, layer, "w")] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            values[_param_name(net, layer, "b")] = np.zeros((1, fan_out))

    params = ModelParams(values, specs, tuple(int(d) for d in view_dims), config.dim_z, config.dim_c)
    log("debug", "nn_params_initialized", seed=seed, view_dims=list(view_dims), count=params.count())
    return params


# ---------- FORWARD PASSES ----------


def mlp_forward(bound: BoundParams, net: str, x: Var) -> Var:
    spec = bound.params.specs[net]
    if x.shape[1] != spec.layer_widths[0]:
        raise DimensionError(f"{net}: expected {spec.layer_widths[0]} input columns, got {x.shape[1]}")
    out = x
    n_layers = len(spec.layers)
    for layer in range(n_layers):
        out = ad.add(
            ad.matmul(out, bound[_param_name(net, layer, "w")]),
            bound[_param_name(net, layer, "b")],
        )
        act = spec.activation if layer < n_layers - 1 else spec.output_activation
        if act is not None:
            out = ad.unary(act, out)
    return out


def _check_view(params: ModelParams, view_index: int) -> None:
    if not 0 <= view_index < params.n_views:
        raise IndexError(f"view index {view_index} out of range for {params.n_views} views")


def encode_view(bound: BoundParams, view_index: int, x: Var) -> Tuple[Var, Var]:
    """H from the view-specific encoder, H̄ from adapter + shared trunk."""
    params = bound.params
    _check_view(params, view_index)
    if x.shape[1] != params.view_dims[view_index]:
        raise DimensionError(
            f"encode_view: view {view_index} expects {params.view_dims[view_index]} columns, got {x.shape[1]}"
        )
    h = mlp_forward(bound, f"enc.{view_index}", x)
    h_bar = mlp_forward(bound, "trunk", mlp_forward(bound, f"adapter.{view_index}", x))
    return h, h_bar


def project(bound: BoundParams, view_index: int, h: Var, h_bar: Var) -> Tuple[Var, Var]:
    _check_view(bound.params, view_index)
    z = mlp_forward(bound, f"head_z.{view_index}", h)
    c = mlp_forward(bound, f"head_c.{view_index}", h_bar)
    return z, c


def decode_view(bound: BoundParams, view_index: int, z: Var, c: Var) -> Var:
    """Decode E = [Z ⊕ C] (Z columns first)."""
    _check_view(bound.params, view_index)
    if z.shape[0] != c.shape[0]:
        raise DimensionError(f"decode_view: Z has {z.shape[0]} rows, C has {c.shape[0]}")
    return mlp_forward(bound, f"dec.{view_index}", ad.concat([z, c]))


def discriminate(bound: BoundParams, view_index: int, z: Var) -> Var:
    _check_view(bound.params, view_index)
    if z.shape[1] != bound.params.dim_z:
        raise DimensionError(f"discriminate: expected {bound.params.dim_z} columns, got {z.shape[1]}")
    return mlp_forward(bound, f"disc.{view_index}", z)


# ---------- ADAM ----------


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, config: TrainConfig) -> "AdamState":
        return cls(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)


def adam_step(
    state: AdamState,
    params: ModelParams,
    grads: Dict[str, np.ndarray],
) -> Tuple[ModelParams, AdamState]:
    """
    One bias-corrected Adam update of the parameters named in `grads`.
    Returns new params and state; the inputs are left untouched and
    parameters without a gradient keep the very same array.
    """
    for name, g in grads.items():
        if name not in params.values:
            raise ContractError(f"adam_step: gradient for unknown parameter {name!r}")
        if g.shape != params.values[name].shape:
            raise ContractError(
                f"adam_step: gradient shape {g.shape} != parameter shape {params.values[name].shape} for {name!r}"
            )

    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t

    values = dict(params.values)
    m = dict(state.m)
    v = dict(state.v)
    for name in sorted(grads):
        g = grads[name]
        m_prev = m.get(name, np.zeros_like(g))
        v_prev = v.get(name, np.zeros_like(g))
        m[name] = state.beta1 * m_prev + (1.0 - state.beta1) * g
        v[name] = state.beta2 * v_prev + (1.0 - state.beta2) * (g * g)
        m_hat = m[name] / bc1
        v_hat = v[name] / bc2
        values[name] = params.values[name] - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)

    new_state = AdamState(state.learning_rate, state.beta1, state.beta2, state.eps, t, m, v)
    return params.replace_values(values), new_state


# ---------- CHECKPOINT ----------
#
# Little-endian binary container:
#   8s   magic b"GMAECKPT"
#   u32  version
#   u32  n bytes of UTF-8 JSON TrainConfig, then the bytes
#   u32  n views, then n × u32 view dims
#   u32  n entries, then per entry:
#          u16 name length, UTF-8 name, u32 rows, u32 cols, rows*cols f64

CHECKPOINT_MAGIC = b"GMAECKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, params: ModelParams, config: TrainConfig) -> None:
    config_bytes = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(config_bytes)),
        config_bytes,
        struct.pack("<I", params.n_views),
        struct.pack(f"<{params.n_views}I", *params.view_dims),
        struct.pack("<I", len(params.values)),
    ]
    for name, value in params.values.items():
        raw_name = name.encode("utf-8")
        rows, cols = value.shape
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<II", rows, cols))
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())

    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))
    log("info", "nn_checkpoint_saved", path=path, entries=len(params.values))


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise IngestionError(f"checkpoint {self.path} is truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> Tuple[ModelParams, TrainConfig]:
    try:
        with open(path, "rb") as fh:
            reader = _Reader(fh.read(), path)
    except OSError as e:
        raise IngestionError(f"cannot read checkpoint {path}: {e}") from e

    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise IngestionError(f"{path} is not a checkpoint file")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise IngestionError(f"checkpoint {path} has unsupported version {version}")

    (config_len,) = reader.unpack("<I")
    config = train_config_from_dict(json.loads(reader.take(config_len).decode("utf-8")))
    (n_views,) = reader.unpack("<I")
    view_dims = reader.unpack(f"<{n_views}I")
    (n_entries,) = reader.unpack("<I")

    values: Dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        rows, cols = reader.unpack("<II")
        data = np.frombuffer(reader.take(rows * cols * 8), dtype="<f8")
        values[name] = data.astype(np.float64).reshape(rows, cols)

    specs = build_specs(config, view_dims)
    expected = {
        _param_name(net, layer, kind): (shape if kind == "w" else (1, shape[1]))
        for net, spec in specs.items()
        for layer, shape in enumerate(spec.layers)
        for kind in ("w", "b")
    }
    got = {name: value.shape for name, value in values.items()}
    if got != expected:
        raise IngestionError(f"checkpoint {path} does not match its stored config")

    log("info", "nn_checkpoint_loaded", path=path, entries=n_entries)
    return ModelParams(values, specs, tuple(view_dims), config.dim_z, config.dim_c), config
