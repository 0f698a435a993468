"""Fixed observation encoder f: O -> S and the state containers built on it."""

from dataclasses import dataclass, field, replace
from typing import Hashable, Optional, Sequence, Tuple

import numpy as np

from errors import InvalidArgument

# A StatePoint is a 1-D float64 array of fixed dimension.
StatePoint = np.ndarray


@dataclass(frozen=True)
class FixedEncoder:
    seed: int
    in_dim: int
    out_dim: int
    weights: np.ndarray
    bias: np.ndarray
    identity: bool = False
    coord_dim: int = 0
    feature_scale: float = 1.0
    coord_scale: float = 1.0

    @property
    def state_dim(self) -> int:
        return self.out_dim + self.coord_dim


ENCODER_KINDS = ("identity", "random", "random_with_coordinates")


@dataclass(frozen=True)
class EncoderConfig:
    """How observations become StatePoints; ``identity`` passes env coordinates through."""

    kind: str = "identity"
    out_dim: int = 16
    seed: int = 0
    feature_scale: float = 1.0
    coord_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise InvalidArgument(f"'{self.kind}' is not one of {', '.join(ENCODER_KINDS)}", field="kind")
        if self.out_dim < 1:
            raise InvalidArgument("out_dim must be >= 1", field="out_dim")
        for name in ("feature_scale", "coord_scale"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be > 0", field=name)


def as_state_array(states) -> np.ndarray:
    """Stack a list of StatePoints (or an N x d array) into a float64 N x d array."""
    if isinstance(states, np.ndarray):
        arr = states.astype(np.float64, copy=False)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
    else:
        rows = [np.atleast_1d(np.asarray(s, dtype=np.float64)) for s in states]
        dims = {row.shape for row in rows}
        if len(dims) > 1:
            raise InvalidArgument(f"states have mixed dimensions {sorted(dims)}", field="states")
        arr = np.vstack(rows) if rows else np.empty((0, 0))
    if arr.ndim != 2:
        raise InvalidArgument(f"states must be N x d, got shape {arr.shape}", field="states")
    return arr


def _freeze(arr):
    arr = np.array(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def new_encoder(seed: int, in_dim: int, out_dim: int) -> FixedEncoder:
    """Seeded single affine layer with weights ~ U(-1/sqrt(in_dim), 1/sqrt(in_dim)) and zero bias."""
    if in_dim < 1:
        raise InvalidArgument(f"in_dim must be >= 1, got {in_dim}", field="in_dim")
    if out_dim < 1:
        raise InvalidArgument(f"out_dim must be >= 1, got {out_dim}", field="out_dim")

    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(in_dim)
    weights = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    return FixedEncoder(
        seed=seed,
        in_dim=in_dim,
        out_dim=out_dim,
        weights=_freeze(weights),
        bias=_freeze(np.zeros(out_dim)),
    )


def identity_encoder(dim: int) -> FixedEncoder:
    """Pass-through encoder for environments whose coordinates already are the state space."""
    if dim < 1:
        raise InvalidArgument(f"dim must be >= 1, got {dim}", field="dim")
    return FixedEncoder(
        seed=0,
        in_dim=dim,
        out_dim=dim,
        weights=_freeze(np.eye(dim)),
        bias=_freeze(np.zeros(dim)),
        identity=True,
    )


def encode(enc: FixedEncoder, obs) -> StatePoint:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim != 1 or obs.shape[0] != enc.in_dim:
        raise InvalidArgument(
            f"observation has shape {obs.shape}, encoder expects ({enc.in_dim},)",
            field="obs",
        )
    if enc.identity:
        return obs.copy()
    return np.tanh(enc.weights @ obs + enc.bias)


def encode_with_coordinates(
    enc: FixedEncoder,
    obs,
    coords,
    feature_scale: float = 1.0,
    coord_scale: float = 1.0,
) -> StatePoint:
    """Encoded features concatenated with raw spatial coordinates, each block scaled."""
    features = encode(enc, obs) * feature_scale
    coords = np.asarray(coords, dtype=np.float64).ravel() * coord_scale
    return np.concatenate([features, coords])


def build_encoder(cfg: EncoderConfig, obs_dim: int, coord_dim: int) -> FixedEncoder:
    if cfg.kind == "identity":
        return identity_encoder(coord_dim)
    enc = new_encoder(cfg.seed, obs_dim, cfg.out_dim)
    if cfg.kind == "random":
        return enc
    return replace(enc, coord_dim=coord_dim, feature_scale=cfg.feature_scale, coord_scale=cfg.coord_scale)


def encode_state(enc: FixedEncoder, obs, coords) -> StatePoint:
    """The StatePoint the training loop stores: coordinates for the identity
    encoder, features of ``obs`` otherwise, with ``coords`` appended when the
    encoder carries a coordinate block."""
    if enc.identity:
        return encode(enc, coords)
    if enc.coord_dim:
        coords = np.asarray(coords, dtype=np.float64).ravel()
        if coords.shape[0] != enc.coord_dim:
            raise InvalidArgument(f"expected {enc.coord_dim} coordinates, got {coords.shape[0]}", field="coords")
        return encode_with_coordinates(enc, obs, coords, enc.feature_scale, enc.coord_scale)
    return encode(enc, obs)


@dataclass(frozen=True)
class Episode:
    """Ordered states of one trajectory.

    ``keys`` identify states for tabular bookkeeping; when omitted each state's
    coordinates (as a tuple) are its key.
    """

    states: np.ndarray
    keys: Tuple[Hashable, ...] = field(default=())

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.float64)
        if states.ndim == 1:
            states = states.reshape(-1, 1)
        if states.ndim != 2:
            raise InvalidArgument("episode states must be a T x d array", field="states")
        object.__setattr__(self, "states", states)
        if not self.keys:
            object.__setattr__(self, "keys", tuple(tuple(row) for row in states.tolist()))
        elif len(self.keys) != states.shape[0]:
            raise InvalidArgument(
                f"{len(self.keys)} keys for {states.shape[0]} states", field="keys"
            )

    @property
    def length(self) -> int:
        return self.states.shape[0]

    def __len__(self):
        return self.length


def make_episode(states: Sequence, keys: Optional[Sequence[Hashable]] = None) -> Episode:
    return Episode(np.asarray(states, dtype=np.float64), tuple(keys) if keys is not None else ())
