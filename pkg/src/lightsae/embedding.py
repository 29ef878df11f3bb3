"""Per-channel linear embeddings: shared, independent, SAE and LightSAE families.

Every variant maps a channel's length-L window to a d_model vector through a
per-channel weight ``W_base + W_aux[i]``:

===============  ========  ===================================================
variant          W_base    W_aux[i]
===============  ========  ===================================================
Shared           W_sh      0
IndFull          0         W_i
IndLR            0         L_i @ R_i
IndPool          0         sum_k g[i,k] W_k
LightSAEInd      0         (sum_k g[i,k] L_k) @ R_pool
SAEFull          W_sh      W_c[i]
SAELR            W_sh      L_i @ R_i
SAEPool          W_sh      sum_k g[i,k] W_k
LightSAE         W_sh      (sum_k g[i,k] L_k) @ R_pool
===============  ========  ===================================================

Per-channel and pool weights are stored stacked along a leading axis
(``W_c`` is N x L x d_model, ``L_pool`` is K x L x r, ...).
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .errors import ContractError, DimensionError, VariantError
from .numcore import Matrix

VARIANTS = (
    "Shared",
    "IndFull",
    "IndLR",
    "IndPool",
    "LightSAEInd",
    "SAEFull",
    "SAELR",
    "SAEPool",
    "LightSAE",
)

# variant -> (framework, low-rank?, pool?)
TRAITS = {
    "Shared": ("Shared", False, False),
    "IndFull": ("Ind", False, False),
    "IndLR": ("Ind", True, False),
    "IndPool": ("Ind", False, True),
    "LightSAEInd": ("Ind", True, True),
    "SAEFull": ("SAE", False, False),
    "SAELR": ("SAE", True, False),
    "SAEPool": ("SAE", False, True),
    "LightSAE": ("SAE", True, True),
}


@dataclass(frozen=True)
class EmbeddingSpec:
    variant: str
    N: int
    L: int
    d_model: int
    r: int = 25
    K: int = 3
    use_aux_bias: bool = True

    def __post_init__(self):
        if self.variant not in TRAITS:
            raise VariantError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for field in ("N", "L", "d_model"):
            if getattr(self, field) < 1:
                raise ContractError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.low_rank and not 1 <= self.r <= min(self.L, self.d_model):
            raise ContractError(
                f"rank r={self.r} must lie in [1, min(L, d_model)={min(self.L, self.d_model)}]"
            )
        if self.pooled:
            if self.K < 1:
                raise ContractError(f"pool size K must be >= 1, got {self.K}")
            if self.K > self.N:
                warnings.warn(f"pool size K={self.K} exceeds channel count N={self.N}", stacklevel=3)

    @property
    def framework(self) -> str:
        return TRAITS[self.variant][0]

    @property
    def low_rank(self) -> bool:
        return TRAITS[self.variant][1]

    @property
    def pooled(self) -> bool:
        return TRAITS[self.variant][2]

    @property
    def has_base(self) -> bool:
        return self.framework in ("Shared", "SAE")

    @property
    def has_aux(self) -> bool:
        return self.variant != "Shared"

    @property
    def aux_bias(self) -> bool:
        return self.use_aux_bias and self.has_aux

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingSpec":
        return cls(**d)


def param_shapes(spec: EmbeddingSpec) -> dict[str, tuple[int, ...]]:
    """Exactly the parameter tensors the variant needs, in canonical order."""
    N, L, d, r, K = spec.N, spec.L, spec.d_model, spec.r, spec.K
    shapes: dict[str, tuple[int, ...]] = {}
    if spec.has_base:
        shapes["W_sh"] = (L, d)
    shapes["b_sh"] = (1, d)
    v = spec.variant
    if v in ("IndFull", "SAEFull"):
        shapes["W_c"] = (N, L, d)
    elif v in ("IndLR", "SAELR"):
        shapes["L_c"] = (N, L, r)
        shapes["R_c"] = (N, r, d)
    elif v in ("IndPool", "SAEPool"):
        shapes["W_pool"] = (K, L, d)
        shapes["gate_logits"] = (N, K)
    elif v in ("LightSAEInd", "LightSAE"):
        shapes["L_pool"] = (K, L, r)
        shapes["R_pool"] = (r, d)
        shapes["gate_logits"] = (N, K)
    if spec.aux_bias:
        shapes["b_c"] = (N, d)
    return shapes


class EmbeddingParams(dict):
    """Name -> Matrix mapping validated against the variant's field set."""

    def __init__(self, spec: EmbeddingSpec, tensors: dict[str, Matrix]):
        expected = param_shapes(spec)
        if set(tensors) != set(expected):
            raise ContractError(
                f"{spec.variant} needs parameters {sorted(expected)}, got {sorted(tensors)}"
            )
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        super().__init__((name, tensors[name]) for name in expected)
        self.spec = spec

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: m.data.copy() for k, m in self.items()}

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "matrices": {k: nc.stack_json(m.data) for k, m in self.items()},
        }

    @classmethod
    def from_dict(cls, d: dict, requires_grad: bool = True) -> "EmbeddingParams":
        spec = EmbeddingSpec.from_dict(d["spec"])
        tensors = {
            k: Matrix(nc.unstack_json(v), requires_grad=requires_grad, name=k)
            for k, v in d["matrices"].items()
        }
        return cls(spec, tensors)


def init_params(spec: EmbeddingSpec, seed: int | np.random.Generator) -> EmbeddingParams:
    """Initialise so every SAE-framework variant starts exactly at the shared baseline.

    Base and independent full weights, plus left factors, draw from
    U(-1/sqrt(L), 1/sqrt(L)); right factors, auxiliary full weights of the SAE
    family, gate logits and biases start at zero.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(spec.L)
    sae = spec.framework == "SAE"
    tensors = {}
    for name, shape in param_shapes(spec).items():
        if name == "W_sh" or name == "L_c" or name == "L_pool":
            arr = rng.uniform(-bound, bound, size=shape)
        elif name in ("W_c", "W_pool") and not sae:
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            arr = np.zeros(shape)
        tensors[name] = Matrix(arr, requires_grad=True, name=name)
    return EmbeddingParams(spec, tensors)


def gates(params: EmbeddingParams, i: int | None = None) -> Matrix:
    """Softmax gate row for channel ``i`` (1 x K), or all rows (N x K) when ``i`` is None."""
    if not params.spec.pooled:
        raise VariantError(f"{params.spec.variant} has no component pool")
    logits = params["gate_logits"]
    if i is None:
        return nc.softmax_rows(logits)
    _check_channel(params.spec, i)
    row = _select_row(logits, i)
    return nc.softmax_row(row)


def _select_row(m: Matrix, i: int) -> Matrix:
    onehot = Matrix(np.eye(m.rows)[i : i + 1])
    return nc.matmul(onehot, m)


def _check_channel(spec: EmbeddingSpec, i: int) -> None:
    if not 0 <= i < spec.N:
        raise ContractError(f"channel index {i} out of range for N={spec.N}")


def _aux_stack(params: EmbeddingParams) -> Matrix:
    """Auxiliary weights of all channels as an N x L x d_model tensor."""
    spec = params.spec
    v = spec.variant
    if v in ("IndFull", "SAEFull"):
        return params["W_c"]
    if v in ("IndLR", "SAELR"):
        return nc.einsum("nlr,nrd->nld", params["L_c"], params["R_c"])
    g = gates(params)
    if v in ("IndPool", "SAEPool"):
        return nc.einsum("nk,kld->nld", g, params["W_pool"])
    left = nc.einsum("nk,klr->nlr", g, params["L_pool"])
    return nc.einsum("nlr,rd->nld", left, params["R_pool"])


def compose_aux_weight(params: EmbeddingParams, spec: EmbeddingSpec, i: int) -> Matrix:
    """Channel ``i``'s auxiliary weight (L x d_model)."""
    if not spec.has_aux:
        raise VariantError("Shared variant has no auxiliary weight")
    _check_channel(spec, i)
    v = spec.variant
    sel = Matrix(np.eye(spec.N)[i])  # 1 x N
    if v in ("IndFull", "SAEFull"):
        return nc.einsum("on,nld->ld", sel, params["W_c"])
    if v in ("IndLR", "SAELR"):
        left = nc.einsum("on,nlr->lr", sel, params["L_c"])
        right = nc.einsum("on,nrd->rd", sel, params["R_c"])
        return nc.matmul(left, right)
    g = gates(params, i)
    if v in ("IndPool", "SAEPool"):
        return nc.einsum("ok,kld->ld", g, params["W_pool"])
    left = nc.einsum("ok,klr->lr", g, params["L_pool"])
    return nc.matmul(left, params["R_pool"])


def embed(params: EmbeddingParams, spec: EmbeddingSpec, X) -> Matrix:
    """Embed X (N x L, or B x N x L) into N x d_model (or B x N x d_model)."""
    X = X if isinstance(X, Matrix) else Matrix(X)
    batched = X.data.ndim == 3
    if X.shape[-2:] != (spec.N, spec.L) or X.data.ndim not in (2, 3):
        raise DimensionError(f"embed expects input (..., {spec.N}, {spec.L}), got {X.shape}")
    Xb = X if batched else nc.reshape(X, 1, spec.N, spec.L)
    out = None
    if spec.has_base:
        out = nc.matmul(Xb, params["W_sh"])
    if spec.has_aux:
        aux = _aux_product(params, spec, Xb)
        out = aux if out is None else nc.add(out, aux)
    out = nc.add(out, params["b_sh"])
    if spec.aux_bias:
        out = nc.add(out, params["b_c"])
    return out if batched else nc.reshape(out, spec.N, spec.d_model)


def _aux_product(params: EmbeddingParams, spec: EmbeddingSpec, Xb: Matrix) -> Matrix:
    """X_i @ W_aux[i] for every channel, without materialising full weights when factored."""
    v = spec.variant
    if v in ("IndFull", "SAEFull"):
        return nc.einsum("bnl,nld->bnd", Xb, params["W_c"])
    if v in ("IndLR", "SAELR"):
        z = nc.einsum("bnl,nlr->bnr", Xb, params["L_c"])
        return nc.einsum("bnr,nrd->bnd", z, params["R_c"])
    g = gates(params)
    if v in ("IndPool", "SAEPool"):
        w = nc.einsum("nk,kld->nld", g, params["W_pool"])
        return nc.einsum("bnl,nld->bnd", Xb, w)
    left = nc.einsum("nk,klr->nlr", g, params["L_pool"])
    z = nc.einsum("bnl,nlr->bnr", Xb, left)
    return nc.matmul(z, params["R_pool"])


def merge_weights(params: EmbeddingParams, spec: EmbeddingSpec) -> tuple[np.ndarray, np.ndarray]:
    """Fold base, gates and factors into one L x d_model matrix per channel.

    Returns ``(W, b)`` with W of shape N x L x d_model and b of shape N x d_model.
    """
    with nc.no_record():
        W = np.zeros((spec.N, spec.L, spec.d_model))
        if spec.has_base:
            W += params["W_sh"].data
        if spec.has_aux:
            W += _aux_stack(params).data
    b = np.repeat(params["b_sh"].data, spec.N, axis=0)
    if spec.aux_bias:
        b = b + params["b_c"].data
    return W, b


def merged_forward(W: np.ndarray, b: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Inference path: one vector-matrix product per channel."""
    X = np.asarray(X, dtype=np.float64)
    return np.einsum("...nl,nld->...nd", X, W) + b


def param_count(spec: EmbeddingSpec) -> int:
    return int(sum(np.prod(s) for s in param_shapes(spec).values()))


def aux_weights(params: EmbeddingParams) -> np.ndarray:
    """Composed auxiliary weights (N x L x d_model) as plain arrays, for export."""
    if not params.spec.has_aux:
        raise VariantError("Shared variant has no auxiliary weights")
    with nc.no_record():
        return _aux_stack(params).data.copy()
