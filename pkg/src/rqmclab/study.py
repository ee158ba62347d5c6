"""Configuration-driven experiment runs that write CSV tables and a JSON manifest."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
import time
from pathlib import Path
from typing import Literal, Union

import numpy as np
import scipy
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import __version__, bound, estimator, fem, integrands, lds, randomfield
from .errors import ConfigError

log = logging.getLogger(__name__)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SigmaRecipe(_Strict):
    recipe: Literal["ones", "scaled_lognormal", "uniform_1_2"]
    s: int = Field(ge=1)
    seed: int = 0
    scale: float = Field(default=1.0, gt=0)


class CaseConfig(_Strict):
    name: str
    sigma: Union[list[float], SigmaRecipe]

    @field_validator("sigma")
    @classmethod
    def _positive(cls, v):
        if isinstance(v, list) and (not v or any(not x > 0 for x in v)):
            raise ValueError("sigma must be a non-empty list of positive values")
        return v


class IsConfig(_Strict):
    kind: Literal["none", "scaled_normal", "beta_like"] = "none"
    params: Union[Literal["pilot"], list[float]] = "pilot"
    pilot_n: int = 4096
    compare_plain: bool = True

    @field_validator("pilot_n")
    @classmethod
    def _pow2(cls, v):
        if v < 1 or v & (v - 1):
            raise ValueError("pilot_n must be a power of two")
        return v


class RqmcSection(_Strict):
    n_min_log2: int = Field(default=10, ge=0, le=31)
    n_max_log2: int = Field(default=20, ge=0, le=31)
    replicates: int = Field(default=30, ge=2)
    seed: int = 12345
    threads: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _ordered(self):
        if self.n_max_log2 < self.n_min_log2:
            raise ValueError("n_max_log2 must be >= n_min_log2")
        return self

    def grid(self) -> tuple[int, ...]:
        return tuple(2 ** m for m in range(self.n_min_log2, self.n_max_log2 + 1))


class FitSection(_Strict):
    window: Union[None, tuple[int, int]] = None
    top: int = Field(default=3, ge=2)


class BoundSection(_Strict):
    enabled: bool = True
    C: float = Field(default=1.0, gt=0)
    C_eps: float = Field(default=1.0, gt=0)
    eps: float = Field(default=0.05, gt=0, lt=1)
    delta_bar: float = Field(default=1e-6, gt=0)
    n_grid_log2: Union[None, list[int]] = None


class FieldSection(_Strict):
    nu: float = 4.5
    r: float = 1.0
    gamma: float = 10.0
    fft_size: int = 256
    scaling: Literal["lambda", "sqrt"] = "lambda"
    taper: bool = True
    basis_file: Union[None, str] = None


class FemSection(_Strict):
    N: int = Field(default=16, ge=2)
    rhs: Literal["one"] = "one"
    tol: float = Field(default=1e-10, gt=0)


class OutputSection(_Strict):
    dir: str = "rqmclab-out"


class StudyConfig(_Strict):
    """Complete description of one study; unknown keys are rejected."""

    experiment: Literal["lognormal", "pde"] = "lognormal"
    mode: Literal["sample", "bound_only"] = "sample"
    cases: list[CaseConfig]
    importance: IsConfig = IsConfig()
    rqmc: RqmcSection = RqmcSection()
    fit: FitSection = FitSection()
    bound: BoundSection = BoundSection()
    field: FieldSection = FieldSection()
    fem: FemSection = FemSection()
    output: OutputSection = OutputSection()

    @model_validator(mode="after")
    def _check(self):
        if not self.cases:
            raise ValueError("at least one case is required")
        names = [c.name for c in self.cases]
        if len(set(names)) != len(names):
            raise ValueError("case names must be unique")
        return self


# sigma ---------------------------------------------------------------------


def sigma_recipe(kind: str, s: int, seed: int = 0) -> np.ndarray:
    """Per-dimension volatilities.

    ``ones`` gives all ones.  ``scaled_lognormal`` draws ``xi ~ Lognormal(0, 1)``
    and rescales to ``sqrt(s) xi / |xi|`` so that ``sum sigma^2 = s``.
    ``uniform_1_2`` draws i.i.d. values from ``U[1, 2]``.
    """
    if s < 1:
        raise ConfigError("dimension must be positive")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, s])))
    if kind == "ones":
        return np.ones(s)
    if kind == "scaled_lognormal":
        xi = rng.lognormal(0.0, 1.0, size=s)
        return math.sqrt(s) * xi / math.sqrt(float(np.sum(xi * xi)))
    if kind == "uniform_1_2":
        return rng.uniform(1.0, 2.0, size=s)
    raise ConfigError(f"unknown sigma recipe {kind!r}")


def resolve_sigma(case: CaseConfig) -> np.ndarray:
    if isinstance(case.sigma, SigmaRecipe):
        r = case.sigma
        return r.scale * sigma_recipe(r.recipe, r.s, r.seed)
    return np.asarray(case.sigma, dtype=float)


# config loading ------------------------------------------------------------


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            if isinstance(node, list):
                node = node[int(p)]
            else:
                node = node.setdefault(p, {})
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = _coerce(value)
        else:
            node[last] = _coerce(value)
    return data


def load_config(path=None, overrides: list[str] | None = None, data: dict | None = None) -> StudyConfig:
    from pydantic import ValidationError

    if data is None:
        if path is None:
            raise ConfigError("no configuration given")
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    data = apply_overrides(json.loads(json.dumps(data)), overrides or [])
    try:
        return StudyConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None


def config_hash(cfg: StudyConfig) -> str:
    blob = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# running -------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _build_basis(cfg: StudyConfig, s_max: int):
    fs = cfg.field
    if fs.basis_file:
        basis = randomfield.load_basis(fs.basis_file)
        if basis.s < s_max:
            raise ConfigError(f"basis file has {basis.s} modes, cases need {s_max}")
        return basis
    kernel = randomfield.MaternKernel(fs.nu, fs.r)
    return randomfield.build_fourier_basis(kernel, fs.gamma, fs.fft_size, s_max, fs.scaling, fs.taper)


def _growth_coefficients(cfg: StudyConfig, sigma: np.ndarray, basis) -> np.ndarray:
    if cfg.experiment == "pde":
        return sigma * np.asarray(basis.b)[: len(sigma)]
    return sigma


def _make_integrand(cfg: StudyConfig, sigma: np.ndarray, basis):
    if cfg.experiment == "lognormal":
        return integrands.LognormalProduct(sigma)
    sub = truncate_basis(basis, len(sigma))
    return fem.pde_integrand(sub, sigma, fem.Mesh(cfg.fem.N), 1.0, tol=cfg.fem.tol)


def truncate_basis(basis, s: int):
    """Leading ``s`` modes of a basis."""
    if s == basis.s:
        return basis
    if isinstance(basis, randomfield.SpectralBasis):
        return randomfield.SpectralBasis(
            basis.gamma, basis.grid, basis.modes[:s], basis.scaling, basis.b[:s], basis.taper, basis.lambda_min_ratio
        )
    return randomfield.TabulatedBasis(basis.values[:s], basis.b[:s], basis.bounds)


def _wrap_is(cfg: StudyConfig, g, seed: int):
    ic = cfg.importance
    if ic.kind == "none":
        return None, None
    pilot_n = min(ic.pilot_n, 2 ** cfg.rqmc.n_max_log2)
    if ic.kind == "scaled_normal":
        if ic.params == "pilot":
            res = integrands.optimize_alpha(g, pilot_n, seed)
            params = res.params
        else:
            res, params = None, np.asarray(ic.params, dtype=float)
        return integrands.ScaledNormalIS(g, params), res
    if ic.params == "pilot":
        res = integrands.optimize_beta(g, pilot_n, seed)
        params = res.params
    else:
        res, params = None, np.asarray(ic.params, dtype=float)
    return integrands.BetaLikeIS(g, params), res


RATE_HEADER = [
    "case", "s", "sum_sq", "growth_norm", "gamma", "intercept", "window_lo", "window_hi",
    "one_minus_gamma", "normalized", "gamma_is", "is_params", "model_exponent",
]
BOUND_HEADER = ["case", "n", "A_star_max", "B_star", "B_tilde", "C1", "C2", "bound", "rate_exponent", "out_of_range"]


def run_study(cfg: StudyConfig, out_dir=None, threads: int | None = None) -> dict:
    """Run every case of ``cfg`` and write its tables.

    Returns a dictionary with the output paths and per-case rate fits.
    """
    t0 = time.perf_counter()
    out = Path(out_dir or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    threads = threads or cfg.rqmc.threads
    grid = cfg.rqmc.grid()
    sigmas = {c.name: resolve_sigma(c) for c in cfg.cases}
    basis = _build_basis(cfg, max(len(s) for s in sigmas.values())) if cfg.experiment == "pde" else None
    bc = cfg.bound
    bound_grid = [2 ** m for m in bc.n_grid_log2] if bc.n_grid_log2 else list(grid)

    rep_rows, sum_rows, rate_rows, bound_rows = [], [], [], []
    fits: dict[str, dict] = {}
    for case in cfg.cases:
        sigma = sigmas[case.name]
        s = len(sigma)
        coeffs = _growth_coefficients(cfg, sigma, basis)
        spec = bound.GrowthSpec(tuple(coeffs), bc.C, bc.eps, bc.delta_bar, bc.C_eps)
        if bc.enabled:
            for n in bound_grid:
                ev = bound.theorem_bound(spec, n)
                row = ev.as_row()
                bound_rows.append([case.name, n] + [row[k] for k in BOUND_HEADER[2:-1]] + [int(ev.out_of_range)])
        if cfg.mode == "bound_only":
            continue
        log.info("case %s: s=%d", case.name, s)
        g = _make_integrand(cfg, sigma, basis)
        rcfg = estimator.RqmcConfig(grid, cfg.rqmc.replicates, cfg.rqmc.seed, threads)
        variants = []
        wrapped, pilot = _wrap_is(cfg, g, cfg.rqmc.seed)
        if wrapped is None or cfg.importance.compare_plain:
            variants.append(("plain", g))
        if wrapped is not None:
            variants.append((cfg.importance.kind, wrapped))
        case_fit = {}
        for label, integrand in variants:
            res = estimator.estimate(integrand, rcfg)
            for i, n in enumerate(res.n_grid):
                for r in range(res.replicates):
                    rep_rows.append([case.name, label, n, r, float(res.means[i, r])])
                sum_rows.append([case.name, label, n, float(res.pooled[i]), float(res.rmse[i])])
            case_fit[label] = estimator.fit_rate(res, cfg.fit.window, cfg.fit.top)
        norm = float(np.sqrt(np.sum(coeffs ** 2)))
        base = case_fit.get("plain")
        isf = case_fit.get(cfg.importance.kind) if wrapped is not None else None
        ref = base or isf
        model = bound.theorem_bound(spec, math.sqrt(ref.window[0] * ref.window[1])).rate_exponent
        is_params = ""
        if wrapped is not None:
            p = wrapped.alpha if cfg.importance.kind == "scaled_normal" else wrapped.beta
            is_params = ";".join(repr(float(v)) for v in p)
        rate_rows.append([
            case.name, s, float(np.sum(sigma ** 2)), norm,
            base.gamma if base else "", ref.intercept, ref.window[0], ref.window[1],
            (1.0 - base.gamma) if base else "", (1.0 - base.gamma) / norm if base else "",
            isf.gamma if isf else "", is_params, model,
        ])
        fits[case.name] = {"plain": base, "is": isf, "norm": norm, "sigma": sigma, "pilot": pilot}

    paths = {}
    if cfg.mode == "sample":
        paths["replicates"] = out / "replicates.csv"
        _write_csv(paths["replicates"], ["case", "variant", "n", "r", "replicate_mean"], rep_rows)
        paths["summary"] = out / "summary.csv"
        _write_csv(paths["summary"], ["case", "variant", "n", "pooled_mean", "rmse"], sum_rows)
        paths["rates"] = out / "rates.csv"
        _write_csv(paths["rates"], RATE_HEADER, rate_rows)
    if bc.enabled:
        paths["bound"] = out / "bound.csv"
        _write_csv(paths["bound"], BOUND_HEADER, bound_rows)
    paths["manifest"] = out / "manifest.json"
    manifest = build_manifest(cfg, sigmas, basis, time.perf_counter() - t0, threads)
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return {"paths": paths, "fits": fits, "basis": basis}


def build_manifest(cfg: StudyConfig, sigmas: dict, basis, wall: float, threads: int) -> dict:
    dirs = lds.load_direction_numbers(max_dim=1)
    fs = cfg.field
    constants = {
        "C": cfg.bound.C,
        "C_eps": cfg.bound.C_eps,
        "eps": cfg.bound.eps,
        "delta_bar": cfg.bound.delta_bar,
        "eps_bar_inverse_cdf": bound.AS_ERROR,
        "extension_gamma": fs.gamma,
        "fft_size": fs.fft_size,
        "kernel_taper": fs.taper,
        "scaling_mode": fs.scaling,
        "matern_nu": fs.nu,
        "matern_r": fs.r,
        "rhs_f": "f(x) = 1",
        "mesh_N": cfg.fem.N,
        "cg_tolerance": cfg.fem.tol,
        "qoi_box": [list(b) for b in fem.QOI_BOX],
        "qoi_smoothing": fem.QOI_SMOOTHING,
    }
    info = {
        "config": cfg.model_dump(mode="json"),
        "config_sha256": config_hash(cfg),
        "constants": constants,
        "sigma": {k: [float(x) for x in v] for k, v in sigmas.items()},
        "direction_numbers": dirs.source,
        "threads": threads,
        "wall_time_s": round(wall, 3),
        "versions": {
            "rqmclab": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    if basis is not None:
        info["basis_b"] = [float(x) for x in basis.b]
    return info


# preset configurations -----------------------------------------------------


def univariate_config(**kw) -> dict:
    return {
        "experiment": "lognormal",
        "cases": [{"name": f"sigma={v:g}", "sigma": [v]} for v in (1.0, 2.0, 3.0)],
        "importance": {"kind": "scaled_normal", "params": "pilot"},
        "rqmc": {"n_min_log2": 10, "n_max_log2": 20, "replicates": 30, "seed": 12345},
        **kw,
    }


def trivariate_config(**kw) -> dict:
    sig = ([1.0, 1.0, 1.0], [2.0, 1.0, 1.0], [2.0, 1.4, 1.0], [2.0, 1.7, 1.0])
    return {
        "experiment": "lognormal",
        "cases": [{"name": "(" + ",".join(f"{v:g}" for v in s) + ")", "sigma": list(s)} for s in sig],
        "rqmc": {"n_min_log2": 10, "n_max_log2": 20, "replicates": 30, "seed": 12345},
        **kw,
    }


def pde_fields_config(dims=(4, 8, 16), **kw) -> dict:
    cases = []
    for s in dims:
        cases.append({"name": f"s={s}:ones", "sigma": {"recipe": "ones", "s": s}})
        cases.append({"name": f"s={s}:uniform", "sigma": {"recipe": "uniform_1_2", "s": s, "seed": 1}})
        cases.append({"name": f"s={s}:2ones", "sigma": {"recipe": "ones", "s": s, "scale": 2.0}})
    return {
        "experiment": "pde",
        "cases": cases,
        "rqmc": {"n_min_log2": 6, "n_max_log2": 12, "replicates": 20, "seed": 12345},
        "fit": {"window": [64, 4096]},
        **kw,
    }


PRESETS = {"univariate": univariate_config, "trivariate": trivariate_config, "pde-fields": pde_fields_config}
