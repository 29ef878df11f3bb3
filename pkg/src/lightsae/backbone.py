"""RevIN plus the RLinear / RMLP forecasting backbones.

The embedding variant can be applied at the input embedding, at the
projection head, at both, or nowhere (``apply_point``). The head reuses the
embedding machinery with ``L -> d_model`` and ``d_model -> H``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import numcore as nc
from .embedding import EmbeddingParams, EmbeddingSpec, embed, init_params, param_count
from .errors import ContractError, DimensionError
from .numcore import Matrix

APPLY_POINTS = ("embedding", "head", "both", "none")
KINDS = ("RLinear", "RMLP")


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "RLinear"
    d_model: int = 128
    H: int = 96
    hidden_layers: int = 2
    apply_point: str = "embedding"
    revin_epsilon: float = 1e-5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown backbone kind {self.kind!r}; expected one of {KINDS}")
        if self.apply_point not in APPLY_POINTS:
            raise ContractError(f"apply_point must be one of {APPLY_POINTS}, got {self.apply_point!r}")
        if self.H < 1 or self.d_model < 1:
            raise ContractError("H and d_model must be >= 1")
        if self.kind == "RMLP" and self.hidden_layers < 1:
            raise ContractError("RMLP needs hidden_layers >= 1")
        if self.revin_epsilon <= 0:
            raise ContractError("revin_epsilon must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(**d)


@dataclass
class RevinState:
    mean: np.ndarray  # (..., N, 1)
    std: np.ndarray


def revin_normalize(X, eps: float = 1e-5) -> tuple[np.ndarray, RevinState]:
    """Per-channel instance normalisation over the time axis (last axis)."""
    X = np.asarray(X.data if isinstance(X, Matrix) else X, dtype=np.float64)
    if X.shape[-1] < 2:
        raise ContractError("RevIN needs at least two time steps")
    mean = X.mean(axis=-1, keepdims=True)
    std = np.maximum(X.std(axis=-1, keepdims=True), eps)
    return (X - mean) / std, RevinState(mean, std)


def revin_denormalize(Y, state: RevinState) -> Matrix:
    """Invert ``revin_normalize`` on a forecast; differentiable in ``Y``."""
    Y = Y if isinstance(Y, Matrix) else Matrix(Y)
    if Y.shape[:-1] != state.mean.shape[:-1]:
        raise DimensionError(f"forecast shape {Y.shape} does not match RevIN state {state.mean.shape}")
    return nc.add(nc.mul(Y, Matrix(state.std)), Matrix(state.mean))


def head_spec(backbone: BackboneSpec, emb: EmbeddingSpec) -> EmbeddingSpec:
    variant = emb.variant if backbone.apply_point in ("head", "both") else "Shared"
    return replace(emb, variant=variant, L=backbone.d_model, d_model=backbone.H)


def embedding_spec(backbone: BackboneSpec, emb: EmbeddingSpec) -> EmbeddingSpec:
    variant = emb.variant if backbone.apply_point in ("embedding", "both") else "Shared"
    if emb.d_model != backbone.d_model:
        raise DimensionError(f"embedding width {emb.d_model} != backbone d_model {backbone.d_model}")
    return replace(emb, variant=variant)


class ForecastModel:
    """Embedding, optional residual MLP blocks, and a projection head.

    ``emb_spec`` carries the requested variant; the variant actually used at
    each end follows ``backbone.apply_point``.
    """

    def __init__(self, backbone: BackboneSpec, emb_spec: EmbeddingSpec, seed: int = 0):
        self.backbone = backbone
        self.requested = emb_spec
        self.emb_spec = embedding_spec(backbone, emb_spec)
        self.head_spec = head_spec(backbone, emb_spec)
        rng_emb, rng_hidden, rng_head = (
            np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)
        )
        self.emb = init_params(self.emb_spec, rng_emb)
        self.head = init_params(self.head_spec, rng_head)
        self.hidden: dict[str, Matrix] = {}
        if backbone.kind == "RMLP":
            d = backbone.d_model
            bound = 1.0 / np.sqrt(d)
            for j in range(backbone.hidden_layers):
                self.hidden[f"W{j}"] = Matrix(rng_hidden.uniform(-bound, bound, (d, d)), True, f"W{j}")
                self.hidden[f"b{j}"] = Matrix(np.zeros((1, d)), True, f"b{j}")

    @property
    def N(self) -> int:
        return self.emb_spec.N

    @property
    def L(self) -> int:
        return self.emb_spec.L

    def parameters(self) -> dict[str, Matrix]:
        params = {f"emb.{k}": m for k, m in self.emb.items()}
        params.update({f"hidden.{k}": m for k, m in self.hidden.items()})
        params.update({f"head.{k}": m for k, m in self.head.items()})
        return params

    def num_parameters(self) -> int:
        return int(sum(m.data.size for m in self.parameters().values()))

    def embedding_delta(self) -> int:
        """Trainable parameters added over the all-Shared model of the same shape."""
        base = replace(self.emb_spec, variant="Shared")
        hbase = replace(self.head_spec, variant="Shared")
        return (
            param_count(self.emb_spec) - param_count(base)
            + param_count(self.head_spec) - param_count(hbase)
        )

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: m.data.copy() for k, m in self.parameters().items()}

    def restore(self, state: dict[str, np.ndarray]) -> None:
        for k, m in self.parameters().items():
            m.data = state[k].copy()

    def zero_grad(self) -> None:
        for m in self.parameters().values():
            m.zero_grad()

    def forward(self, X) -> Matrix:
        """X: (N, L) or (B, N, L) raw window -> forecast (N, H) or (B, N, H)."""
        X = np.asarray(X.data if isinstance(X, Matrix) else X, dtype=np.float64)
        if X.ndim not in (2, 3) or X.shape[-2:] != (self.N, self.L):
            raise DimensionError(f"model expects input (..., {self.N}, {self.L}), got {X.shape}")
        xn, state = revin_normalize(X, self.backbone.revin_epsilon)
        h = embed(self.emb, self.emb_spec, Matrix(xn))
        for j in range(self.backbone.hidden_layers if self.backbone.kind == "RMLP" else 0):
            z = nc.relu(nc.add(nc.matmul(h, self.hidden[f"W{j}"]), self.hidden[f"b{j}"]))
            h = nc.add(h, z)
        y = embed(self.head, self.head_spec, h)
        return revin_denormalize(y, state)

    __call__ = forward

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone.to_dict(),
            "requested": self.requested.to_dict(),
            "embedding": self.emb.to_dict(),
            "head": self.head.to_dict(),
            "hidden": {k: nc.stack_json(m.data) for k, m in self.hidden.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForecastModel":
        model = cls(BackboneSpec.from_dict(d["backbone"]), EmbeddingSpec.from_dict(d["requested"]))
        model.emb = EmbeddingParams.from_dict(d["embedding"])
        model.head = EmbeddingParams.from_dict(d["head"])
        for k, v in d.get("hidden", {}).items():
            model.hidden[k] = Matrix(nc.unstack_json(v), True, k)
        return model
