"""Scenario definitions, sigma sweeps and CSV output."""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import training as tr
from .channel import CsiNoiseSpec, sample_batch
from .neural import TrainingDiverged
from .rates import always_on

log = logging.getLogger(__name__)

POLICIES = ("cdnn", "locally_robust", "naive", "perfect_csi", "tdma", "always_on")
LEARNED = ("cdnn", "locally_robust")
CSV_COLUMNS = ("scenario", "sigma", "policy", "metric", "tx_index", "value", "ci_halfwidth", "n_eval", "seed")
DEFAULT_GRID = tuple(round(0.1 * i, 10) for i in range(11))

# Seed keys under the root seed: (sigma index, role).
SEED_TRAIN_SET = 0
SEED_EVAL_SET = 1
SEED_NETWORKS = 2


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class CsiTemplate:
    """Per-TX noise matrices ``const + sigma * scale``."""

    const: tuple
    scale: tuple
    shared_estimate: bool = False

    def resolve(self, sigma: float) -> CsiNoiseSpec:
        mats = tuple(np.asarray(c, float) + sigma * np.asarray(s, float) for c, s in zip(self.const, self.scale))
        return CsiNoiseSpec(mats, shared=self.shared_estimate)

    def check(self, sigma_grid, path: str = "csi"):
        for s in sigma_grid:
            for j, (c, a) in enumerate(zip(self.const, self.scale)):
                m = np.asarray(c, float) + s * np.asarray(a, float)
                bad = np.argwhere(~((m >= 0) & (m <= 1)))
                if len(bad):
                    i, k = (int(v) for v in bad[0])
                    raise ScenarioError(f"{path}.tx[{j}]: entry ({i},{k}) resolves to {m[i, k]:g} at sigma={s:g}, outside [0, 1]")


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    k_users: int
    csi: CsiTemplate
    p_max: float = 1.0
    noise_power: float = 1.0
    gain_variance: tuple | None = None
    n_eval: int = 50000
    sigma_grid: tuple = DEFAULT_GRID
    policies: tuple = POLICIES
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)

    def __post_init__(self):
        k = self.k_users
        if k < 1:
            raise ScenarioError("k_users: must be >= 1")
        if len(self.csi.const) != k or len(self.csi.scale) != k:
            raise ScenarioError(f"csi.tx: need {k} entries, got {len(self.csi.const)}")
        for j, (c, s) in enumerate(zip(self.csi.const, self.csi.scale)):
            if np.shape(c) != (k, k) or np.shape(s) != (k, k):
                raise ScenarioError(f"csi.tx[{j}]: const and scale must be {k}x{k}")
        if self.gain_variance is not None:
            v = np.asarray(self.gain_variance, float)
            if v.shape != (k, k) or np.any(v < 0) or not np.all(np.isfinite(v)):
                raise ScenarioError(f"gain_variance: must be a {k}x{k} matrix of finite nonnegative values")
        if self.p_max <= 0:
            raise ScenarioError("p_max: must be positive")
        if self.noise_power <= 0:
            raise ScenarioError("noise_power: must be positive")
        if self.n_eval < 1:
            raise ScenarioError("n_eval: must be >= 1")
        unknown = [p for p in self.policies if p not in POLICIES]
        if unknown:
            raise ScenarioError(f"policies: unknown {unknown}; choose from {list(POLICIES)}")
        self.csi.check(self.sigma_grid)
        if self.train.p_max != self.p_max or self.train.noise_power != self.noise_power:
            object.__setattr__(self, "train", replace(self.train, p_max=self.p_max, noise_power=self.noise_power))

    def to_dict(self) -> dict:
        train = asdict(self.train)
        for k in ("p_max", "noise_power"):
            train.pop(k)
        train["hidden_layers"] = list(train["hidden_layers"])
        return {
            "name": self.name,
            "k_users": self.k_users,
            "p_max": self.p_max,
            "noise_power": self.noise_power,
            "gain_variance": None if self.gain_variance is None else np.asarray(self.gain_variance, float).tolist(),
            "csi": {
                "shared_estimate": self.csi.shared_estimate,
                "tx": [{"const": np.asarray(c, float).tolist(), "scale": np.asarray(s, float).tolist()}
                       for c, s in zip(self.csi.const, self.csi.scale)],
            },
            "n_eval": self.n_eval,
            "sigma_grid": list(self.sigma_grid),
            "policies": list(self.policies),
            "train": train,
        }


# ---------------------------------------------------------------- presets

def _zeros(k):
    return np.zeros((k, k)).tolist()


def centralized_2user() -> ScenarioConfig:
    # shared estimate; TX 2 -> RX 1 cross gain variance attenuated by 0.25
    const = [[0.0, 0.0], [0.0, 1.0]]
    scale = [[0.0, 1.0], [1.0, 0.0]]
    return ScenarioConfig(
        "centralized_2user", 2,
        CsiTemplate((const, const), (scale, scale), shared_estimate=True),
        gain_variance=((1.0, 0.25), (1.0, 1.0)),
    )


def distributed_2user() -> ScenarioConfig:
    return ScenarioConfig(
        "distributed_2user", 2,
        CsiTemplate((_zeros(2), _zeros(2)), (np.ones((2, 2)).tolist(), _zeros(2))),
    )


def distributed_3user(noisy_tx: int = 3) -> ScenarioConfig:
    """Two perfectly informed TXs; TX ``noisy_tx`` (1-based) has ``sigma * ones``."""
    if noisy_tx not in (1, 2, 3):
        raise ScenarioError(f"noisy_tx must be 1, 2 or 3, got {noisy_tx}")
    scale = [np.ones((3, 3)).tolist() if j == noisy_tx - 1 else _zeros(3) for j in range(3)]
    return ScenarioConfig("distributed_3user", 3, CsiTemplate((_zeros(3),) * 3, tuple(scale)))


PRESETS = {
    "centralized_2user": (centralized_2user, "K=2, both TXs share one estimate, Sigma=[[0,s],[s,1]], cross gain 2->1 variance 0.25"),
    "distributed_2user": (distributed_2user, "K=2, Sigma1 = s*ones, Sigma2 = 0 (TX 2 perfectly informed)"),
    "distributed_3user": (distributed_3user, "K=3, Sigma3 = s*ones, Sigma1 = Sigma2 = 0"),
}


def preset_scenarios() -> dict:
    """Preset name -> ScenarioConfig, in a fixed order."""
    return {name: make() for name, (make, _) in PRESETS.items()}


# ---------------------------------------------------------------- loading

def _take(d, allowed, path):
    if not isinstance(d, dict):
        raise ScenarioError(f"{path or '<root>'}: expected a mapping")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        prefix = f"{path}." if path else ""
        raise ScenarioError(f"{prefix}{unknown[0]}: unknown key")
    return d


def scenario_from_dict(d: dict) -> ScenarioConfig:
    top = ("name", "k_users", "p_max", "noise_power", "gain_variance", "csi", "n_eval", "sigma_grid",
           "policies", "train")
    _take(d, top, "")
    for key in ("name", "k_users", "csi"):
        if key not in d:
            raise ScenarioError(f"{key}: required")
    csi = _take(d["csi"], ("shared_estimate", "tx"), "csi")
    txs = csi.get("tx")
    if not isinstance(txs, list):
        raise ScenarioError("csi.tx: expected a list with one entry per TX")
    k = int(d["k_users"])
    const, scale = [], []
    for j, t in enumerate(txs):
        _take(t, ("const", "scale"), f"csi.tx[{j}]")
        const.append(t.get("const", _zeros(k)))
        scale.append(t.get("scale", _zeros(k)))
    train_fields = {f.name for f in fields(tr.TrainConfig)} - {"p_max", "noise_power"}
    train_d = _take(d.get("train") or {}, train_fields, "train")
    try:
        train = tr.TrainConfig(**train_d)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"train: {exc}") from exc
    kwargs = {key: d[key] for key in ("p_max", "noise_power", "n_eval") if key in d}
    if d.get("gain_variance") is not None:
        kwargs["gain_variance"] = tuple(tuple(r) for r in d["gain_variance"])
    if "sigma_grid" in d:
        kwargs["sigma_grid"] = tuple(float(s) for s in d["sigma_grid"])
    if "policies" in d:
        kwargs["policies"] = tuple(d["policies"])
    return ScenarioConfig(
        str(d["name"]), k,
        CsiTemplate(tuple(const), tuple(scale), bool(csi.get("shared_estimate", False))),
        train=train, **kwargs,
    )


def load_scenario(path) -> ScenarioConfig:
    """Load a YAML scenario file, or a preset by name."""
    if str(path) in PRESETS:
        return PRESETS[str(path)][0]()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: parse error: {exc}") from exc
    return scenario_from_dict(d)


def dump_scenario(scenario: ScenarioConfig) -> str:
    return yaml.safe_dump(scenario.to_dict(), sort_keys=False, default_flow_style=None)


def parse_sigma_grid(text: str) -> tuple:
    """``"a:b:step"`` (inclusive), ``"a,b,c"`` or a single value."""
    if ":" in text:
        a, b, step = (float(v) for v in text.split(":"))
        if step <= 0 or b < a:
            raise ScenarioError(f"bad sigma grid {text!r}")
        n = int(round((b - a) / step)) + 1
        return tuple(round(a + i * step, 10) for i in range(n))
    return tuple(float(v) for v in text.split(","))


# ---------------------------------------------------------------- seeding

def derived_seed(root: int, sigma_index: int, role: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(root, spawn_key=(sigma_index, role))


def network_seed(root: int, sigma_index: int) -> int:
    """Integer training seed for the networks of one sweep point."""
    return int(derived_seed(root, sigma_index, SEED_NETWORKS).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class SweepPoint:
    scenario: ScenarioConfig
    sigma: float
    sigma_index: int
    seed: int

    @property
    def noise(self) -> CsiNoiseSpec:
        return self.scenario.csi.resolve(self.sigma)

    @property
    def train_config(self) -> tr.TrainConfig:
        return replace(self.scenario.train, seed=network_seed(self.seed, self.sigma_index))

    def train_set(self):
        sc = self.scenario
        return sample_batch(sc.train.n_train, sc.k_users, sc.gain_variance, self.noise,
                            derived_seed(self.seed, self.sigma_index, SEED_TRAIN_SET))

    def eval_set(self):
        sc = self.scenario
        return sample_batch(sc.n_eval, sc.k_users, sc.gain_variance, self.noise,
                            derived_seed(self.seed, self.sigma_index, SEED_EVAL_SET))


# ---------------------------------------------------------------- rows

@dataclass(frozen=True)
class SweepRow:
    scenario: str
    sigma: float
    policy: str
    metric: str  # sum_rate | transmit_fraction | error
    tx_index: int | None  # 1-based, None for rate rows
    value: float | None
    ci_halfwidth: float | None
    n_eval: int
    seed: int

    def as_csv(self) -> list:
        def num(v):
            return "" if v is None else f"{v:.6g}"
        return [self.scenario, num(self.sigma), self.policy, self.metric,
                "" if self.tx_index is None else str(self.tx_index),
                num(self.value), num(self.ci_halfwidth), str(self.n_eval), str(self.seed)]


def report_rows(point: SweepPoint, policy: str, report: tr.EvalReport) -> list:
    base = dict(scenario=point.scenario.name, sigma=point.sigma, policy=policy,
                n_eval=report.n_eval, seed=point.seed)
    rows = [SweepRow(metric="sum_rate", tx_index=None, value=report.expected_sum_rate,
                     ci_halfwidth=report.confidence_halfwidth, **base)]
    rows += [SweepRow(metric="transmit_fraction", tx_index=j + 1, value=float(f), ci_halfwidth=None, **base)
             for j, f in enumerate(report.transmit_fraction)]
    return rows


def error_row(point: SweepPoint, policy: str) -> SweepRow:
    return SweepRow(point.scenario.name, point.sigma, policy, "error", None, None, None,
                    point.scenario.n_eval, point.seed)


def baseline_reports(scenario: ScenarioConfig, eval_set, policies=None) -> dict:
    """Reports for every requested non-learned policy, keyed by policy name."""
    sc = scenario
    wanted = sc.policies if policies is None else policies
    out = {}
    if "perfect_csi" in wanted:
        out["perfect_csi"] = tr.evaluate_policy(tr.perfect_csi_source(sc.p_max, sc.noise_power), eval_set,
                                                sc.p_max, sc.noise_power)
    if "naive" in wanted:
        out["naive"] = tr.evaluate_policy(tr.naive_source(sc.p_max, sc.noise_power), eval_set,
                                          sc.p_max, sc.noise_power)
    if "tdma" in wanted:
        candidates = [tr.evaluate_policy(tr.constant_source(np.eye(sc.k_users)[j] * sc.p_max), eval_set,
                                         sc.p_max, sc.noise_power) for j in range(sc.k_users)]
        out["tdma"] = max(candidates, key=lambda r: r.expected_sum_rate)
    if "always_on" in wanted:
        out["always_on"] = tr.evaluate_policy(tr.constant_source(always_on(sc.k_users, sc.p_max)), eval_set,
                                              sc.p_max, sc.noise_power)
    return out


def train_learned(point: SweepPoint, train_set, checkpoint_dir=None, history: list | None = None) -> dict:
    """Train every requested learned policy. Values are PolicySets or the raised error."""
    from .checkpoint import save_policies

    cfg = point.train_config
    out = {}
    pdir = None if checkpoint_dir is None else point_dir(checkpoint_dir, point.sigma)
    if "cdnn" in point.scenario.policies:
        try:
            init = tr.init_policy_set(train_set, cfg)
            if pdir is not None:
                save_policies(init, pdir / "pretrained.npz", cfg.seed)
            hook = None if pdir is None else (lambda step, ps: save_policies(ps, pdir / "cdnn.npz", cfg.seed))
            out["cdnn"] = tr.train_joint(init, train_set, cfg, history=history, on_checkpoint=hook)
            if pdir is not None:
                save_policies(out["cdnn"], pdir / "cdnn.npz", cfg.seed)
        except TrainingDiverged as exc:
            log.error("cdnn training diverged at sigma=%g: %s", point.sigma, exc)
            out["cdnn"] = exc
    if "locally_robust" in point.scenario.policies:
        try:
            out["locally_robust"] = tr.train_locally_robust_set(train_set, cfg)
            if pdir is not None:
                save_policies(out["locally_robust"], pdir / "locally_robust.npz", cfg.seed)
        except TrainingDiverged as exc:
            log.error("locally robust training diverged at sigma=%g: %s", point.sigma, exc)
            out["locally_robust"] = exc
    return out


def point_dir(checkpoint_dir, sigma: float) -> Path:
    return Path(checkpoint_dir) / f"sigma_{sigma:.6g}"


def evaluate_point(point: SweepPoint, eval_set, learned: dict) -> list:
    sc = point.scenario
    reports = baseline_reports(sc, eval_set)
    rows = []
    for name in sc.policies:
        if name in LEARNED:
            pset = learned.get(name)
            if pset is None:
                continue
            if isinstance(pset, Exception):
                rows.append(error_row(point, name))
                continue
            rep = tr.evaluate_policy(tr.policy_source(pset, sc.p_max), eval_set, sc.p_max, sc.noise_power)
        else:
            rep = reports[name]
        rows += report_rows(point, name, rep)
    return rows


def run_point(point: SweepPoint, checkpoint_dir=None) -> list:
    """Train, evaluate and report every policy at one sigma."""
    log.info("%s sigma=%g: training", point.scenario.name, point.sigma)
    learned = train_learned(point, point.train_set(), checkpoint_dir)
    return evaluate_point(point, point.eval_set(), learned)


def _run_point_job(args):
    return run_point(*args)


def run_sweep(scenario: ScenarioConfig, sigma_grid=None, out_path=None, seed: int | None = None,
              jobs: int = 1, checkpoint_dir=None) -> list:
    """Run every sigma of the grid and write the rows as CSV.

    Sigma points are independent jobs seeded from ``(seed, sigma index)``, so
    the output does not depend on ``jobs``.
    """
    grid = tuple(scenario.sigma_grid if sigma_grid is None else sigma_grid)
    if any(not 0.0 <= s <= 1.0 for s in grid):
        raise ScenarioError(f"sigma grid values must lie in [0, 1]: {grid}")
    scenario.csi.check(grid)
    root = scenario.train.seed if seed is None else int(seed)
    points = [SweepPoint(scenario, s, i, root) for i, s in enumerate(grid)]
    args = [(p, checkpoint_dir) for p in points]
    if jobs > 1 and len(points) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_run_point_job, args))
    else:
        results = [_run_point_job(a) for a in args]
    rows = [r for chunk in results for r in chunk]
    if out_path is not None:
        write_csv(rows, out_path)
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow(r.as_csv())
    return buf.getvalue()


def write_csv(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(rows_to_csv(rows))
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
