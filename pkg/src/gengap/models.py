"""Small MLP classifiers: parameterization, forward passes, decisions,
logit-averaged ensembles, and the binary checkpoint format."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .rng import mix64, stream, ROLE_INIT

CHECKPOINT_MAGIC = b"GGAP"
CHECKPOINT_VERSION = 1

_ACTIVATIONS_NP = {
    "relu": lambda x: np.where(x > 0, x, 0.0),
    "tanh": np.tanh,
}
_ACTIVATIONS_AD = {"relu": ad.relu, "tanh": ad.tanh}


class CheckpointError(IOError):
    """A checkpoint file is missing, truncated, or inconsistent."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a fully connected classifier producing logits."""

    input_dim: int
    hidden: tuple[tuple[int, str], ...] = ()
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(
            self, "hidden", tuple((int(w), str(a)) for w, a in self.hidden)
        )
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        for width, act in self.hidden:
            if width < 1:
                raise ValueError("hidden widths must be positive")
            if act not in _ACTIVATIONS_NP:
                raise ValueError(f"unknown activation {act!r}")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [w for w, _ in self.hidden] + [self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    def param_layout(self) -> ad.Layout:
        layout: list[tuple[str, tuple[int, ...]]] = []
        for i, (din, dout) in enumerate(self.layer_dims()):
            layout.append((f"layer{i}.w", (din, dout)))
            layout.append((f"layer{i}.b", (dout,)))
        return tuple(layout)

    def param_count(self) -> int:
        return sum(
            int(np.prod(shape, dtype=np.int64)) for _, shape in self.param_layout()
        )

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": [list(h) for h in self.hidden],
            "num_classes": self.num_classes,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(
            input_dim=int(d["input_dim"]),
            hidden=tuple((int(w), str(a)) for w, a in d["hidden"]),
            num_classes=int(d["num_classes"]),
        )


@dataclass(frozen=True)
class Lineage:
    """Identity of a trained model inside a grid.

    Models produced by the same joint training run share ``run_id``; the
    estimators use this to skip dependent pairs.
    """

    procedure_id: str
    k: int
    j: int
    run_id: str


@dataclass
class Model:
    spec: ModelSpec
    params: ad.ParamVector
    lineage: Lineage


def init_params(spec: ModelSpec, seed: int) -> ad.ParamVector:
    """Glorot-uniform weights and zero biases from a Philox stream."""
    rng = stream(mix64(seed, ROLE_INIT))
    parts: dict[str, np.ndarray] = {}
    for i, (din, dout) in enumerate(spec.layer_dims()):
        bound = np.sqrt(6.0 / (din + dout))
        parts[f"layer{i}.w"] = rng.uniform(-bound, bound, size=(din, dout))
        parts[f"layer{i}.b"] = np.zeros(dout)
    return ad.ParamVector.from_segments(spec.param_layout(), parts)


def forward_logits(spec: ModelSpec, params: ad.ParamVector, x: np.ndarray) -> np.ndarray:
    """Plain-numpy forward pass; x is (batch, input_dim) or (input_dim,)."""
    h = np.asarray(x, dtype=np.float64)
    n_layers = len(spec.layer_dims())
    for i in range(n_layers):
        h = h @ params.segment(f"layer{i}.w") + params.segment(f"layer{i}.b")
        if i < n_layers - 1:
            h = _ACTIVATIONS_NP[spec.hidden[i][1]](h)
    return h


def tensor_logits(spec: ModelSpec, leaves: dict[str, ad.Tensor], x: np.ndarray) -> ad.Tensor:
    """Differentiable forward pass over the leaf tensors of `leaves`."""
    h: ad.Tensor = ad.Tensor(np.asarray(x, dtype=np.float64))
    n_layers = len(spec.layer_dims())
    for i in range(n_layers):
        h = h @ leaves[f"layer{i}.w"] + leaves[f"layer{i}.b"]
        if i < n_layers - 1:
            h = _ACTIVATIONS_AD[spec.hidden[i][1]](h)
    return h


def _check_input(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.spec.input_dim:
        raise ValueError(
            f"input has dimension {x.shape[-1]}, model expects {model.spec.input_dim}"
        )
    return x


def predict_proba(model: Model, x) -> np.ndarray:
    """Probability vector for one feature vector (deterministic)."""
    x = _check_input(model, x)
    return ad.softmax(forward_logits(model.spec, model.params, x))


def predict_proba_batch(model: Model, xs) -> np.ndarray:
    xs = _check_input(model, xs)
    return ad.softmax(forward_logits(model.spec, model.params, xs))


def decide(model: Model, x) -> int:
    """Argmax class decision; ties break toward the lowest index."""
    return int(np.argmax(predict_proba(model, x)))


def decide_batch(model: Model, xs) -> np.ndarray:
    return np.argmax(predict_proba_batch(model, xs), axis=-1)


def ensemble_logits(models: list[Model], xs) -> np.ndarray:
    if len(models) < 2:
        raise ValueError("an ensemble needs at least two members")
    spec = models[0].spec
    for m in models[1:]:
        if m.spec != spec:
            raise ValueError("ensemble members must share a ModelSpec")
    stacked = np.stack([forward_logits(m.spec, m.params, xs) for m in models])
    return stacked.mean(axis=0)


def ensemble_predict(models: list[Model], x) -> np.ndarray:
    """Softmax of the arithmetic mean of member logits."""
    return ad.softmax(ensemble_logits(models, np.asarray(x, dtype=np.float64)))


def dataset_loss_error(
    spec: ModelSpec, params: ad.ParamVector, xs: np.ndarray, ys: np.ndarray
) -> tuple[float, float]:
    """Mean plain cross-entropy (no smoothing, no penalties) and 0/1 error."""
    ys = np.asarray(ys, dtype=np.int64)
    if ys.size == 0:
        raise ValueError("empty evaluation set")
    if ys.min() < 0 or ys.max() >= spec.num_classes:
        raise ValueError("label out of range")
    logits = forward_logits(spec, params, xs)
    logp = ad.log_softmax_rows(logits)
    loss = float(-logp[np.arange(ys.size), ys].mean())
    err = float((np.argmax(logits, axis=-1) != ys).mean())
    return loss, err


# ---------------------------------------------------------------------------
# Checkpoints: magic, version, JSON descriptor, raw little-endian float64
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path: str) -> None:
    header = json.dumps(
        {"spec": model.spec.to_dict(), "lineage": asdict(model.lineage)},
        sort_keys=True,
    ).encode("utf-8")
    payload = (
        CHECKPOINT_MAGIC
        + struct.pack("<H", CHECKPOINT_VERSION)
        + struct.pack("<I", len(header))
        + header
        + model.params.values.astype("<f8").tobytes()
    )
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Model:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 10 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a model checkpoint")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} has unsupported version {version}")
    (hlen,) = struct.unpack_from("<I", blob, 6)
    try:
        header = json.loads(blob[10 : 10 + hlen].decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        lineage = Lineage(**header["lineage"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}") from exc
    values = np.frombuffer(blob[10 + hlen :], dtype="<f8").astype(np.float64)
    if values.size != spec.param_count():
        raise CheckpointError(
            f"{path} holds {values.size} parameters, spec expects {spec.param_count()}"
        )
    return Model(spec, ad.ParamVector(values, spec.param_layout()), lineage)
