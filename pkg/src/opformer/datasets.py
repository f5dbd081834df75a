"""Operator-learning corpora for the Izhikevich, tempered LIF and Riemann problems.

A dataset holds, per split, raw (unnormalized) arrays:

``{split}_tokens``   (N, n, input_channels)   encoder token features
``{split}_queries``  (N, m)                   output coordinates
``{split}_targets``  (N, m, output_channels)  solution values
``{split}_params``   (N, p)                   problem parameters (for bookkeeping/plots)

Min-max statistics are computed on the training split only and stored with
the data so a checkpoint can reproduce the exact input scaling.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .container import read_container, write_container
from .solvers.forcing import SpikeForcing
from .solvers.fractional import TemperedFracParams, lif_mesh, solve_tempered_lif
from .solvers.izhikevich import BlowUpError, IzhikevichParams, solve_izhikevich
from .solvers.riemann import RiemannSetup, riemann_exact, waves_inside

log = logging.getLogger(__name__)

FORMAT = "opformer-dataset"
VERSION = 1
SPLITS = ("train", "test")
ARRAY_KINDS = ("tokens", "queries", "targets", "params")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass
class Normalizer:
    """Per-channel affine maps onto [0, 1] fitted on the training split."""

    token_min: list[float]
    token_max: list[float]
    token_log10: list[bool]
    query_min: float
    query_max: float
    target_min: list[float]
    target_max: list[float]

    @staticmethod
    def _scale(lo, hi):
        lo = np.asarray(lo, dtype=np.float64)
        span = np.asarray(hi, dtype=np.float64) - lo
        return lo, np.where(span > 0, span, 1.0)

    @classmethod
    def fit(cls, tokens: np.ndarray, queries: np.ndarray, targets: np.ndarray,
            token_log10: list[bool] | None = None) -> Normalizer:
        c = tokens.shape[-1]
        logs = list(token_log10 or [False] * c)
        flat = tokens.reshape(-1, c).copy()
        for j, use_log in enumerate(logs):
            if use_log:
                flat[:, j] = np.log10(flat[:, j])
        t_flat = targets.reshape(-1, targets.shape[-1])
        return cls(flat.min(axis=0).tolist(), flat.max(axis=0).tolist(), logs,
                   float(queries.min()), float(queries.max()),
                   t_flat.min(axis=0).tolist(), t_flat.max(axis=0).tolist())

    def tokens(self, raw: np.ndarray) -> np.ndarray:
        x = np.array(raw, dtype=np.float64, copy=True)
        for j, use_log in enumerate(self.token_log10):
            if use_log:
                x[..., j] = np.log10(x[..., j])
        lo, span = self._scale(self.token_min, self.token_max)
        return (x - lo) / span

    def queries(self, raw: np.ndarray) -> np.ndarray:
        lo, span = self._scale(self.query_min, self.query_max)
        return (np.asarray(raw, dtype=np.float64) - lo) / span

    def targets(self, raw: np.ndarray) -> np.ndarray:
        lo, span = self._scale(self.target_min, self.target_max)
        return (np.asarray(raw, dtype=np.float64) - lo) / span

    def target_affine(self) -> tuple[np.ndarray, np.ndarray]:
        """(scale, offset) with raw = normalized * scale + offset."""
        lo, span = self._scale(self.target_min, self.target_max)
        return span, lo

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> Normalizer:
        return cls(**d)


# ---------------------------------------------------------------------------
# container type
# ---------------------------------------------------------------------------

@dataclass
class OperatorSample:
    tokens: np.ndarray
    params: np.ndarray
    queries: np.ndarray
    targets: np.ndarray


@dataclass
class Dataset:
    problem: str
    arrays: dict[str, np.ndarray]
    token_names: list[str]
    field_names: list[str]
    param_names: list[str]
    normalizer: Normalizer | None
    generator: dict = field(default_factory=dict)
    seed: int = 0

    def count(self, split: str) -> int:
        return int(self.arrays[f"{split}_tokens"].shape[0])

    @property
    def input_channels(self) -> int:
        return len(self.token_names)

    @property
    def output_channels(self) -> int:
        return len(self.field_names)

    def get(self, split: str, kind: str) -> np.ndarray:
        return self.arrays[f"{split}_{kind}"]

    def sample(self, split: str, i: int) -> OperatorSample:
        return OperatorSample(*(self.arrays[f"{split}_{k}"][i]
                                for k in ("tokens", "params", "queries", "targets")))

    def normalized(self, split: str, idx=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(tokens, queries[..., None], raw targets) for model consumption."""
        if self.normalizer is None:
            raise ValueError("dataset has no normalization statistics (empty training split?)")
        sel = slice(None) if idx is None else idx
        tok = self.normalizer.tokens(self.get(split, "tokens")[sel])
        qry = self.normalizer.queries(self.get(split, "queries")[sel])[..., None]
        return tok, qry, self.get(split, "targets")[sel]

    def select_fields(self, which) -> Dataset:
        """Copy restricted to the listed output fields (names or indices)."""
        idx = [self.field_names.index(w) if isinstance(w, str) else int(w) for w in which]
        arrays = dict(self.arrays)
        for s in SPLITS:
            arrays[f"{s}_targets"] = np.ascontiguousarray(self.arrays[f"{s}_targets"][..., idx])
        norm = self.normalizer
        if norm is not None:
            norm = replace(norm, target_min=[norm.target_min[i] for i in idx],
                           target_max=[norm.target_max[i] for i in idx])
        return Dataset(self.problem, arrays, list(self.token_names), [self.field_names[i] for i in idx],
                       list(self.param_names), norm, dict(self.generator), self.seed)

    def manifest_meta(self) -> dict:
        return {
            "problem": self.problem,
            "counts": {s: self.count(s) for s in SPLITS},
            "token_names": self.token_names,
            "field_names": self.field_names,
            "param_names": self.param_names,
            "normalization": self.normalizer.to_dict() if self.normalizer else None,
            "generator": self.generator,
            "seed": self.seed,
        }


def _assemble(problem, splits: dict[str, dict[str, np.ndarray]], token_names, field_names,
              param_names, generator, seed, token_log10=None) -> Dataset:
    arrays = {}
    for s in SPLITS:
        for k in ARRAY_KINDS:
            arrays[f"{s}_{k}"] = np.ascontiguousarray(splits[s][k], dtype=np.float64)
        if not np.all(np.isfinite(arrays[f"{s}_targets"])):
            raise FloatingPointError(f"non-finite targets in {problem} {s} split")
    norm = None
    if arrays["train_tokens"].shape[0] > 0:
        norm = Normalizer.fit(arrays["train_tokens"], arrays["train_queries"],
                              arrays["train_targets"], token_log10)
    return Dataset(problem, arrays, list(token_names), list(field_names), list(param_names),
                   norm, generator, seed)


def save_dataset(path, dataset: Dataset) -> Path:
    return write_container(path, FORMAT, VERSION, dataset.arrays, dataset.manifest_meta())


def load_dataset(path) -> Dataset:
    manifest, arrays = read_container(path, FORMAT, VERSION)
    norm = manifest.get("normalization")
    return Dataset(manifest["problem"], dict(arrays), manifest["token_names"],
                   manifest["field_names"], manifest["param_names"],
                   Normalizer.from_dict(norm) if norm else None,
                   manifest.get("generator", {}), manifest.get("seed", 0))


def empty_dataset(problem: str = "empty", input_channels: int = 1, output_channels: int = 1,
                  n: int = 1, m: int = 1) -> Dataset:
    splits = {s: {"tokens": np.zeros((0, n, input_channels)), "queries": np.zeros((0, m)),
                  "targets": np.zeros((0, m, output_channels)), "params": np.zeros((0, 1))}
              for s in SPLITS}
    return _assemble(problem, splits, [f"x{i}" for i in range(input_channels)],
                     [f"y{i}" for i in range(output_channels)], ["p"], {}, 0)


# ---------------------------------------------------------------------------
# Izhikevich
# ---------------------------------------------------------------------------

@dataclass
class IzhikevichDataConfig:
    n_train: int = 2200
    n_test: int = 150
    amp_range: tuple[float, float] = (0.5, 1.5)
    loc_range: tuple[float, float] = (4.0, 30.0)
    test_window: tuple[float, float] = (15.0, 19.0)
    n: int = 401
    substeps: int = 20
    seed: int = 0


def in_test_window(t_spike, window=(15.0, 19.0)) -> np.ndarray:
    t_spike = np.asarray(t_spike)
    return (t_spike >= window[0]) & (t_spike <= window[1])


def _izhikevich_design(cfg: IzhikevichDataConfig) -> tuple[np.ndarray, np.ndarray]:
    """Scrambled-Halton (A, t_spike) designs: train outside the test window, test inside."""
    (a0, a1), (l0, l1), (w0, w1) = cfg.amp_range, cfg.loc_range, cfg.test_window
    sampler = qmc.Halton(d=2, scramble=True, seed=cfg.seed)
    train = np.empty((0, 2))
    while len(train) < cfg.n_train:
        pts = qmc.scale(sampler.random(max(64, 2 * (cfg.n_train - len(train)))), [a0, l0], [a1, l1])
        train = np.vstack([train, pts[~in_test_window(pts[:, 1], cfg.test_window)]])
    train = train[:cfg.n_train]
    test_sampler = qmc.Halton(d=2, scramble=True, seed=cfg.seed + 1)
    test = qmc.scale(test_sampler.random(cfg.n_test), [a0, w0], [a1, w1]) if cfg.n_test else np.empty((0, 2))
    return train, test


def _izhikevich_split(design: np.ndarray, params: IzhikevichParams, rng: np.random.Generator,
                      cfg: IzhikevichDataConfig, test: bool) -> dict[str, np.ndarray]:
    design = design.copy()
    forcings = [SpikeForcing.step(t, a) for a, t in design]
    try:
        res = solve_izhikevich(params, forcings) if forcings else None
        u = res.u if res is not None else np.empty((0, params.n))
    except BlowUpError:
        u = np.empty((len(design), params.n))
        for i in range(len(design)):
            while True:
                try:
                    u[i] = solve_izhikevich(params, SpikeForcing.step(design[i, 1], design[i, 0])).u
                    break
                except BlowUpError as exc:
                    lo, hi = cfg.test_window if test else cfg.loc_range
                    new = [rng.uniform(*cfg.amp_range), rng.uniform(lo, hi)]
                    while not test and in_test_window(new[1], cfg.test_window):
                        new[1] = rng.uniform(lo, hi)
                    log.warning("regenerating Izhikevich sample %d after blow-up (%s)", i, exc)
                    design[i] = new
    t = params.grid
    current = np.stack([SpikeForcing.step(ts, a)(t) for a, ts in design]) if len(design) else np.empty((0, t.size))
    tokens = np.stack([np.broadcast_to(t, current.shape), current], axis=-1)
    return {"tokens": tokens, "queries": np.broadcast_to(t, (len(design), t.size)).copy(),
            "targets": u[..., None], "params": design}


def gen_izhikevich_dataset(cfg: IzhikevichDataConfig | None = None) -> Dataset:
    cfg = cfg or IzhikevichDataConfig()
    params = IzhikevichParams(n=cfg.n, substeps=cfg.substeps)
    rng = np.random.default_rng(cfg.seed)
    train, test = _izhikevich_design(cfg)
    splits = {"train": _izhikevich_split(train, params, rng, cfg, False),
              "test": _izhikevich_split(test, params, rng, cfg, True)}
    return _assemble("izhikevich", splits, ["t", "I"], ["u"], ["amplitude", "t_spike"],
                     _jsonable(asdict(cfg)), cfg.seed)


# ---------------------------------------------------------------------------
# tempered fractional LIF
# ---------------------------------------------------------------------------

LIF_CASES = {
    1: {"n_train": 200, "n_test": 20, "n": 204, "sigma": None},
    2: {"n_train": 1500, "n_test": 200, "n": 200, "sigma": None},
    3: {"n_train": 1500, "n_test": 80, "n": 314, "sigma": (0.11, 2.0)},
}


@dataclass
class LIFDataConfig:
    case: int = 1
    n_train: int | None = None
    n_test: int | None = None
    n: int | None = None
    alpha_range: tuple[float, float] = (0.11, 0.99)
    sigma_range: tuple[float, float] | None = None
    pulses: int = 3
    pulse_width: float = 0.02
    fixed_onsets: tuple[float, ...] = (0.2, 0.5, 0.8)
    fixed_amplitude: float = 2.0
    onset_range: tuple[float, float] = (0.05, 0.95)
    min_gap: float = 0.05
    amp_range: tuple[float, float] = (1.0, 3.0)
    n_forcings: int = 20
    corrected: bool = True
    seed: int = 0

    def resolved(self) -> LIFDataConfig:
        if self.case not in LIF_CASES:
            raise ValueError(f"LIF case must be 1, 2 or 3, got {self.case}")
        d = LIF_CASES[self.case]
        return LIFDataConfig(**{**asdict(self),
                                "n_train": d["n_train"] if self.n_train is None else self.n_train,
                                "n_test": d["n_test"] if self.n_test is None else self.n_test,
                                "n": d["n"] if self.n is None else self.n,
                                "sigma_range": d["sigma"] if self.sigma_range is None else self.sigma_range})


def random_pulse_forcing(rng: np.random.Generator, cfg: LIFDataConfig) -> SpikeForcing:
    lo, hi = cfg.onset_range
    for _ in range(10000):
        onsets = np.sort(rng.uniform(lo, hi, cfg.pulses))
        if cfg.pulses < 2 or np.min(np.diff(onsets)) >= cfg.min_gap:
            break
    else:
        raise RuntimeError("could not place pulses with the requested minimum gap")
    amps = rng.uniform(*cfg.amp_range, cfg.pulses)
    return SpikeForcing(tuple(onsets), tuple(amps), cfg.pulse_width)


def gen_lif_dataset(case: int = 1, cfg: LIFDataConfig | None = None) -> Dataset:
    """Case 1: alpha -> v with fixed forcing; 2: (I, alpha) -> v; 3: (I, alpha, sigma) -> v."""
    cfg = (cfg or LIFDataConfig(case=case))
    if cfg.case != case:
        cfg = LIFDataConfig(**{**asdict(cfg), "case": case})
    cfg = cfg.resolved()
    rng = np.random.default_rng(cfg.seed)
    total = cfg.n_train + cfg.n_test
    alphas = np.linspace(*cfg.alpha_range, total) if total > 1 else np.full(total, cfg.alpha_range[0])
    alphas = rng.permutation(alphas)
    tempered = cfg.sigma_range is not None
    sigmas = rng.permutation(np.linspace(*cfg.sigma_range, total)) if tempered else np.zeros(total)
    if cfg.case == 1:
        pool = [SpikeForcing(cfg.fixed_onsets, (cfg.fixed_amplitude,), cfg.pulse_width)]
    else:
        pool = [random_pulse_forcing(rng, cfg) for _ in range(cfg.n_forcings)]
    meshes = [lif_mesh(TemperedFracParams(n=cfg.n), f) for f in pool]

    tokens, queries, targets, params = [], [], [], []
    for i in range(total):
        k = i % len(pool)
        forcing, mesh = pool[k], meshes[k]
        p = TemperedFracParams(alpha=float(alphas[i]), sigma=float(sigmas[i]), n=cfg.n,
                               corrected=cfg.corrected)
        _, v = solve_tempered_lif(p, forcing, mesh)
        cols = [mesh, forcing(mesh), np.full(cfg.n, alphas[i])]
        if tempered:
            cols.append(np.full(cfg.n, sigmas[i]))
        tokens.append(np.stack(cols, axis=-1))
        queries.append(mesh)
        targets.append(v[:, None])
        params.append([alphas[i], sigmas[i]] if tempered else [alphas[i]])
    width = 4 if tempered else 3
    npar = 2 if tempered else 1

    def pack(sel):
        if len(sel) == 0:
            return {"tokens": np.zeros((0, cfg.n, width)), "queries": np.zeros((0, cfg.n)),
                    "targets": np.zeros((0, cfg.n, 1)), "params": np.zeros((0, npar))}
        return {"tokens": np.stack([tokens[i] for i in sel]), "queries": np.stack([queries[i] for i in sel]),
                "targets": np.stack([targets[i] for i in sel]), "params": np.array([params[i] for i in sel])}

    order = np.arange(total)
    splits = {"train": pack(order[:cfg.n_train]), "test": pack(order[cfg.n_train:])}
    names = ["t", "I", "alpha"] + (["sigma"] if tempered else [])
    return _assemble(f"lif{cfg.case}", splits, names, ["v"], names[2:], _jsonable(asdict(cfg)), cfg.seed)


# ---------------------------------------------------------------------------
# Riemann
# ---------------------------------------------------------------------------

RIEMANN_CASES = {"ipr": (50.0, 100.0), "hpr": (1e9, 1e10)}


@dataclass
class RiemannDataConfig:
    case: str = "ipr"
    n_samples: int = 500
    n_train: int = 400
    n_x: int = 512
    seed: int = 0


def riemann_setup(case: str, p_l: float, n_x: int = 512) -> RiemannSetup:
    if case == "ipr":
        return RiemannSetup.ipr(p_l, n_x=n_x)
    if case == "hpr":
        return RiemannSetup.hpr(p_l, n_x=n_x)
    raise ValueError(f"unknown Riemann case {case!r}")


def gen_riemann_dataset(case: str = "ipr", cfg: RiemannDataConfig | None = None) -> Dataset:
    cfg = cfg or RiemannDataConfig(case=case)
    if cfg.case != case:
        cfg = RiemannDataConfig(**{**asdict(cfg), "case": case})
    lo, hi = RIEMANN_CASES[cfg.case]
    p_values = np.linspace(lo, hi, cfg.n_samples)
    fields = []
    for p_l in p_values:
        setup = riemann_setup(cfg.case, float(p_l), cfg.n_x)
        if not waves_inside(setup):
            raise RuntimeError(f"waves leave the domain for p_l={p_l}")
        fields.append(np.stack(riemann_exact(setup), axis=-1))
    x = riemann_setup(cfg.case, lo, cfg.n_x).grid
    perm = np.random.default_rng(cfg.seed).permutation(cfg.n_samples)
    idx = {"train": np.sort(perm[:cfg.n_train]), "test": np.sort(perm[cfg.n_train:])}
    splits = {}
    for s, sel in idx.items():
        splits[s] = {"tokens": p_values[sel].reshape(-1, 1, 1),
                     "queries": np.broadcast_to(x, (len(sel), x.size)).copy(),
                     "targets": np.stack([fields[i] for i in sel]) if len(sel) else np.zeros((0, cfg.n_x, 3)),
                     "params": p_values[sel].reshape(-1, 1)}
    return _assemble(f"riemann-{cfg.case}", splits, ["p_l"], ["rho", "u", "p"], ["p_l"],
                     _jsonable(asdict(cfg)), cfg.seed, token_log10=[cfg.case == "hpr"])


def _jsonable(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out
