"""Config-driven runs, ablation tables, application-point sweeps and analyses."""

from __future__ import annotations

import csv
import json
import logging
import re
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import analysis
from .backbone import BackboneSpec, ForecastModel
from .data import Dataset, load_csv, normalize, split
from .embedding import VARIANTS, TRAITS, EmbeddingSpec, aux_weights
from .errors import ConfigError, InputError, VariantError
from .numcore import Matrix, to_csv
from .training import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

STANDARD_LOOKBACKS = (96, 192, 336, 720)


@dataclass
class ExperimentConfig:
    dataset: str
    protocol: str = "ratio712"
    L: int = 96
    H: int = 96
    backbone: dict = field(default_factory=lambda: {"kind": "RLinear", "d_model": 128})
    embedding: dict = field(default_factory=lambda: {"variant": "LightSAE", "r": 25, "K": 3})
    train: dict = field(default_factory=dict)
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.L not in STANDARD_LOOKBACKS:
            warnings.warn(f"lookback L={self.L} is outside the usual grid {STANDARD_LOOKBACKS}", stacklevel=3)
        # fail early on bad sub-configs
        self.backbone_spec()
        self.train_config()
        if self.embedding.get("variant", "LightSAE") not in VARIANTS:
            raise VariantError(f"unknown variant {self.embedding.get('variant')!r}")

    def backbone_spec(self) -> BackboneSpec:
        return BackboneSpec(H=self.H, **self.backbone)

    def embedding_spec(self, N: int) -> EmbeddingSpec:
        return EmbeddingSpec(N=N, L=self.L, d_model=self.backbone_spec().d_model, **self.embedding)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad experiment config: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON: {exc}") from None

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)


def prepare_dataset(config: ExperimentConfig) -> Dataset:
    return normalize(split(load_csv(config.dataset), config.protocol))


def _finite_or_none(x: float):
    return float(x) if np.isfinite(x) else None


def build_model(config: ExperimentConfig, N: int) -> ForecastModel:
    return ForecastModel(config.backbone_spec(), config.embedding_spec(N), seed=config.train_config().seed)


def export_weights(model: ForecastModel, out_dir: str | Path) -> list[str]:
    """Write per-channel auxiliary weights as ``aux_c{i}.csv`` (plus ``shared.csv``).

    Uses the input embedding when it carries auxiliaries, otherwise the head.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = model.emb if model.emb_spec.has_aux or not model.head_spec.has_aux else model.head
    written = []
    if "W_sh" in params:
        to_csv(params["W_sh"], out_dir / "shared.csv")
        written.append("shared.csv")
    if params.spec.has_aux:
        for i, w in enumerate(aux_weights(params)):
            to_csv(Matrix(w), out_dir / f"aux_c{i}.csv")
            written.append(f"aux_c{i}.csv")
    if params.spec.pooled:
        analysis.export_gates(params, params.spec, out_dir / "gates.csv")
        written.append("gates.csv")
    return written


def run(config: ExperimentConfig, ds: Dataset | None = None, write: bool = True) -> dict:
    """Load, split, normalise, train, and evaluate one configuration.

    Returns the report dict; with ``write`` also stores ``report.json``,
    ``timing.json``, ``checkpoint.json`` and weight CSVs under ``output_dir``.
    """
    return execute(config, ds, write)[0]


def execute(config: ExperimentConfig, ds: Dataset | None = None, write: bool = True):
    """Like :func:`run` but also returns the trained model."""
    ds = prepare_dataset(config) if ds is None else ds
    tc = config.train_config()
    model = build_model(config, ds.N)
    model, hist = train(model, ds, tc, config.L, config.H)
    test = evaluate(model, ds, "test", config.L, config.H)
    val = evaluate(model, ds, "val", config.L, config.H)
    if not np.isfinite(test["mse"]):
        raise ConfigError("test split yields no windows or non-finite metrics")
    baseline = ForecastModel(
        replace(model.backbone, apply_point="none"), model.requested, seed=tc.seed
    ).num_parameters()
    report = {
        "config": config.to_dict(),
        "dataset": {"name": ds.name, "T": ds.T, "N": ds.N, "split_bounds": list(ds.split_bounds)},
        "metrics": {"test_mse": test["mse"], "test_mae": test["mae"], "val_mse": val["mse"]},
        "params": {
            "total": model.num_parameters(),
            "embedding_delta": model.embedding_delta(),
            "baseline_total": baseline,
        },
        "train_defaults": tc.to_dict(),
        "history": _clean(hist.to_dict(timing=False)),
        "artifacts": [],
    }
    if write:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = export_weights(model, out / "weights")
        (out / "checkpoint.json").write_text(json.dumps(model.to_dict()))
        report["artifacts"] = ["checkpoint.json", "timing.json"] + [f"weights/{f}" for f in files]
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        (out / "timing.json").write_text(json.dumps({"wall_clock_s": hist.wall_clock_s}))
    return report, model


def _clean(obj):
    if isinstance(obj, float):
        return _finite_or_none(obj)
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean(v) for v in obj]
    return obj


ABLATION_COLUMNS = ("variant", "framework", "LR", "Pool", "MSE", "dMSE_pct", "params", "dparams_pct")


def ablate(config: ExperimentConfig, variants: list[str], ds: Dataset | None = None) -> list[dict]:
    """Run each variant with the same seed and data; MSE/params relative to Shared.

    Positive ``dMSE_pct`` means lower error than Shared.
    """
    if not variants:
        raise ConfigError("ablate needs at least one variant")
    for v in variants:
        if v not in VARIANTS:
            raise VariantError(f"unknown variant {v!r}")
    ds = prepare_dataset(config) if ds is None else ds
    out = Path(config.output_dir)
    results = {}
    for v in dict.fromkeys(["Shared"] + list(variants)):
        cfg = config.with_(
            embedding={**config.embedding, "variant": v},
            output_dir=str(out / v),
        )
        results[v] = run(cfg, ds)
    base = results["Shared"]
    base_mse = base["metrics"]["test_mse"]
    base_params = base["params"]["total"]
    rows = []
    for v in variants:
        r = results[v]
        fw, lr, pool = TRAITS[v]
        mse_v = r["metrics"]["test_mse"]
        rows.append({
            "variant": v,
            "framework": fw,
            "LR": lr,
            "Pool": pool,
            "MSE": mse_v,
            "dMSE_pct": 100.0 * (base_mse - mse_v) / base_mse,
            "params": r["params"]["total"],
            "dparams_pct": 100.0 * (r["params"]["total"] - base_params) / base_params,
        })
    out.mkdir(parents=True, exist_ok=True)
    write_table(rows, ABLATION_COLUMNS, out / "ablation.csv")
    return rows


def sweep_apply_point(config: ExperimentConfig, ds: Dataset | None = None) -> list[dict]:
    ds = prepare_dataset(config) if ds is None else ds
    out = Path(config.output_dir)
    rows = []
    for point in ("embedding", "head", "both", "none"):
        cfg = config.with_(backbone={**config.backbone, "apply_point": point}, output_dir=str(out / point))
        r = run(cfg, ds)
        rows.append({"apply_point": point, "MSE": r["metrics"]["test_mse"], "MAE": r["metrics"]["test_mae"],
                     "params": r["params"]["total"]})
    out.mkdir(parents=True, exist_ok=True)
    write_table(rows, ("apply_point", "MSE", "MAE", "params"), out / "apply_point.csv")
    return rows


def write_table(rows: list[dict], columns, path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


_OUTPUT_PREFIXES = ("energy_", "cos_", "pool_", "gates")


def _weight_files(weights_dir: Path) -> list[Path]:
    aux = list(weights_dir.glob("aux_c*.csv"))
    if aux:
        return sorted(aux, key=lambda p: int(re.sub(r"\D", "", p.stem) or 0))
    return sorted(p for p in weights_dir.glob("*.csv") if not p.name.startswith(_OUTPUT_PREFIXES))


def _find_checkpoint(weights_dir: Path) -> Path:
    for cand in (weights_dir / "checkpoint.json", weights_dir.parent / "checkpoint.json"):
        if cand.is_file():
            return cand
    raise InputError(f"no checkpoint.json in {weights_dir} or its parent")


def _pooled_params(ckpt: Path):
    model = ForecastModel.from_dict(json.loads(ckpt.read_text()))
    for params in (model.emb, model.head):
        if params.spec.pooled:
            return params
    raise VariantError(f"checkpoint variant {model.requested.variant} has no component pool")


def analyze(weights_dir: str | Path, mode: str, out_dir: str | Path | None = None, name: str = "aux",
            threshold: float = 0.95) -> list[Path]:
    """Dispatch one structural analysis and write its CSV artifacts."""
    weights_dir = Path(weights_dir)
    out_dir = Path(out_dir) if out_dir is not None else weights_dir
    if not weights_dir.is_dir():
        raise InputError(f"weights directory not found: {weights_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if mode in ("energy", "cosine"):
        files = _weight_files(weights_dir)
        if not files:
            raise InputError(f"no weight CSVs in {weights_dir}")
        mats = [analysis.from_csv_array(p) for p in files]
        if mode == "energy":
            curves = []
            for p, m in zip(files, mats):
                c = analysis.cumulative_energy(m)
                curves.append(c)
                path = out_dir / f"energy_{p.stem}.csv"
                analysis.write_energy(c, path)
                written.append(path)
            avg = analysis.average_curve(curves)
            path = out_dir / f"energy_{name}_avg.csv"
            analysis.write_energy(avg, path)
            written.append(path)
            ranks = [analysis.effective_rank(c, threshold) for c in curves]
            path = out_dir / f"effective_rank_{name}.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["file", "effective_rank"])
                w.writerows([[p.name, r] for p, r in zip(files, ranks)])
            written.append(path)
        else:
            S = analysis.cosine_similarity_matrix(mats)
            path = out_dir / f"cos_{name}.csv"
            analysis.write_matrix(S, path)
            written.append(path)
    elif mode == "gates":
        params = _pooled_params(_find_checkpoint(weights_dir))
        path = out_dir / "gates.csv"
        analysis.export_gates(params, params.spec, path)
        written.append(path)
    elif mode == "pool":
        params = _pooled_params(_find_checkpoint(weights_dir))
        path = out_dir / "cos_pool.csv"
        analysis.write_matrix(analysis.pool_similarity(params), path)
        written.append(path)
    else:
        raise ConfigError(f"unknown analysis mode {mode!r}")
    return written
