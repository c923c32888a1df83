"""Monte-Carlo runner, figure presets and CSV/JSON export.

Every trial is seeded by ``SeedSequence([seed, sweep_index, trial_index])`` and all
variants of a scenario share that seed, so comparisons between variants are paired.
Per-trial tallies are stacked in trial order and summed once, which makes the report
independent of how many worker processes produced them.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import amp, coherent, noncoh
from .config import ConfigError, PilotKind, PowerPolicy, SystemConfig
from .model import draw_trial

__all__ = [
    "Algorithm",
    "Variant",
    "Scenario",
    "MetricRow",
    "MetricsReport",
    "FIGURES",
    "preset",
    "run",
    "run_trial",
    "export",
    "report_to_csv",
    "report_to_json",
    "read_csv",
]

CSV_COLUMNS = ("sweep_param", "sweep_value", "metric", "estimate", "stderr", "n_trials")
RATE_BATCHES = 20
# exceptions that count as a failed trial rather than aborting the run
TRIAL_ERRORS = (amp.AmpDivergenceError, ArithmeticError, FloatingPointError, np.linalg.LinAlgError)


class Algorithm(str, enum.Enum):
    AMP = "amp"
    AMP_EIB = "amp_eib"
    MAMP = "mamp"
    COHERENT_REPETITION = "coherent_repetition"
    COHERENT_HAMMING74 = "coherent_hamming74"
    PERFECT_CSI = "perfect_csi"


@dataclass(frozen=True)
class Variant:
    """One curve of a figure: an algorithm, its options and per-variant config overrides.

    Options: ``decision`` (posterior/energy), ``damping``, ``n_iters``, ``estimator``
    (amp, amp+mmse; enables the rate metric for AMP), ``code_length`` (repetition),
    ``sharpness`` (M-AMP gate).
    """

    label: str
    algorithm: Algorithm
    overrides: tuple = ()  # ((field, value), ...) applied to the sweep-point config
    options: tuple = ()  # ((name, value), ...)

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        if isinstance(self.overrides, dict):
            object.__setattr__(self, "overrides", tuple(sorted(self.overrides.items())))
        if isinstance(self.options, dict):
            object.__setattr__(self, "options", tuple(sorted(self.options.items())))
        names = {f.name for f in fields(SystemConfig)}
        for key, _ in self.overrides:
            if key not in names:
                raise ConfigError(f"unknown config field {key!r} in variant {self.label!r}")

    def option(self, name, default=None):
        return dict(self.options).get(name, default)


@dataclass(frozen=True)
class Scenario:
    name: str
    config: SystemConfig
    sweep_param: str
    sweep_values: tuple
    variants: tuple
    n_trials: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.sweep_param not in {f.name for f in fields(SystemConfig)}:
            raise ConfigError(f"sweep parameter {self.sweep_param!r} is not a configuration field")
        if self.n_trials < 1:
            raise ConfigError("n_trials must be at least 1")
        if not self.variants:
            raise ConfigError("scenario needs at least one variant")
        object.__setattr__(self, "sweep_values", tuple(self.sweep_values))
        object.__setattr__(self, "variants", tuple(self.variants))
        labels = [v.label for v in self.variants]
        if len(set(labels)) != len(labels):
            raise ConfigError("variant labels must be unique")

    def replace(self, **changes) -> "Scenario":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return Scenario(**values)

    def point_config(self, value, variant: Variant) -> SystemConfig:
        """Configuration of one sweep point for one variant."""
        base = {self.sweep_param: value}
        if self.sweep_param == "coherence_len":
            base["pilot_len"] = min(self.config.pilot_len, int(value))
        cfg = self.config.replace(**base)
        if variant.overrides:
            cfg = cfg.replace(**dict(variant.overrides))
        alg = variant.algorithm
        if alg in (Algorithm.AMP_EIB, Algorithm.MAMP) and self.sweep_param == "coherence_len":
            cfg = cfg.replace(pilot_len=cfg.coherence_len)
        return cfg


@dataclass(frozen=True)
class MetricRow:
    sweep_param: str
    sweep_value: float
    metric: str
    estimate: float
    stderr: float
    n_trials: int


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)

    def get(self, metric: str, value) -> MetricRow:
        for row in self.rows:
            if row.metric == metric and row.sweep_value == value:
                return row
        raise KeyError(f"no row for {metric} at {value}")

    def series(self, metric: str):
        """``(values, estimates, stderrs)`` of one metric along the sweep."""
        rows = [r for r in self.rows if r.metric == metric]
        return (
            np.array([r.sweep_value for r in rows]),
            np.array([r.estimate for r in rows]),
            np.array([r.stderr for r in rows]),
        )

    @property
    def metrics(self) -> list:
        return list(dict.fromkeys(r.metric for r in self.rows))


# tallies collected per trial and variant
TALLY = (
    "failures",
    "active",
    "inactive",
    "missed",
    "false_alarms",
    "message_errors",
    "bit_errors",
    "bits",
    "rate_n",
    "rate_a_re",
    "rate_a_im",
    "rate_b",
    "rate_c",
)
_T = {name: i for i, name in enumerate(TALLY)}


def _detection_counts(out, act):
    return {
        "active": int(act.sum()),
        "inactive": int((~act).sum()),
        "missed": int(np.sum(act & ~out)),
        "false_alarms": int(np.sum(~act & out)),
    }


def _noncoherent(cfg, variant, trial):
    real = trial.realization
    kw = dict(powers=real.powers, damping=variant.option("damping", amp.DEFAULT_DAMPING))
    if variant.option("n_iters") is not None:
        kw["n_iters"] = int(variant.option("n_iters"))
    if variant.algorithm is Algorithm.MAMP:
        gate = noncoh.SigmoidGate(float(variant.option("sharpness", noncoh.DEFAULT_SHARPNESS)))
        out = noncoh.mamp_detect(trial.block, trial.book, trial.profile, cfg.activity_prob, cfg, gate=gate, **kw)
    else:
        out = noncoh.eib_detect(trial.block, trial.book, trial.profile, cfg.activity_prob, cfg, **kw)
    act, msg = real.activity, real.messages
    tally = _detection_counts(out.active, act)
    wrong_msg = act & out.active & (out.decoded != msg)
    tally["message_errors"] = tally["missed"] + int(wrong_msg.sum())
    r = cfg.info_bits
    diff = np.bitwise_xor(np.where(out.active, out.decoded, 0), msg)
    bit_err = np.array([bin(int(x)).count("1") for x in diff[act & out.active]], dtype=int)
    tally["bit_errors"] = int(bit_err.sum()) + r * tally["missed"]
    tally["bits"] = r * tally["active"]
    return tally


def _rate_tally(est, trial, cfg):
    real = trial.realization
    g = np.sqrt(trial.profile.betas)[:, None] * real.small_scale * real.activity[:, None]
    a, b, c = coherent.combiner_samples(est, g, real.powers, trial.profile.betas, cfg.noise_power)
    return {
        "rate_n": a.size,
        "rate_a_re": float(np.sum(a.real)),
        "rate_a_im": float(np.sum(a.imag)),
        "rate_b": float(np.sum(b)),
        "rate_c": float(np.sum(c)),
    }


def _detection(cfg, variant, trial):
    real = trial.realization
    decision = amp.Decision(variant.option("decision", amp.Decision.POSTERIOR))
    kw = dict(powers=real.powers, damping=variant.option("damping", amp.DEFAULT_DAMPING))
    if variant.option("n_iters") is not None:
        kw["n_iters"] = int(variant.option("n_iters"))
    out = amp.amp_detect(trial.block, trial.book, trial.profile, cfg.activity_prob, cfg, decision=decision, **kw)
    det = np.zeros(cfg.n_devices, dtype=bool)
    det[out.support] = True
    tally = _detection_counts(det, real.activity)
    estimator = variant.option("estimator")
    if estimator is not None:
        dev = np.flatnonzero(det & real.activity)
        if coherent.EstimatorKind(estimator) is coherent.EstimatorKind.AMP:
            est = coherent.amp_estimate(out, dev, real.powers, cfg)
        else:
            full = coherent.mmse_estimate(trial.block, out.support, trial.book, real.powers, trial.profile, cfg)
            keep = np.isin(full.devices, dev)
            est = coherent.ChannelEstimate(full.devices[keep], full.ghat[keep], full.gamma[keep], full.source)
        tally.update(_rate_tally(est, trial, cfg))
    return tally


def _perfect(cfg, variant, trial):
    real = trial.realization
    est = coherent.perfect_estimate(real.active_set, real.small_scale, trial.profile)
    tally = {"active": int(real.activity.sum()), "inactive": int((~real.activity).sum())}
    tally.update(_rate_tally(est, trial, cfg))
    return tally


def _payload(cfg, variant, seed):
    if variant.algorithm is Algorithm.COHERENT_HAMMING74:
        code = coherent.HAMMING74
    else:
        code = coherent.repetition(int(variant.option("code_length", 11)))
    estimator = variant.option("estimator", coherent.EstimatorKind.AMP)
    opts = {"damping": variant.option("damping", amp.DEFAULT_DAMPING)}
    s = coherent.payload_trial(cfg, code, estimator, seed, opts)
    return {
        "active": s.active,
        "inactive": s.inactive,
        "missed": s.missed,
        "false_alarms": s.false_alarms,
        "message_errors": s.message_errors,
        "bit_errors": s.bit_errors,
        "bits": s.bits,
    }


def run_trial(scenario: Scenario, sweep_index: int, trial_index: int) -> np.ndarray:
    """Tallies of one trial for every variant, shape ``(n_variants, len(TALLY))``."""
    value = scenario.sweep_values[sweep_index]
    out = np.zeros((len(scenario.variants), len(TALLY)))
    seed = np.random.SeedSequence([scenario.seed, sweep_index, trial_index])
    trials = {}
    for i, variant in enumerate(scenario.variants):
        cfg = scenario.point_config(value, variant)
        try:
            if variant.algorithm in (Algorithm.COHERENT_REPETITION, Algorithm.COHERENT_HAMMING74):
                tally = _payload(cfg, variant, seed)
            else:
                if cfg not in trials:
                    trials[cfg] = draw_trial(cfg, seed)
                trial = trials[cfg]
                if variant.algorithm is Algorithm.AMP:
                    tally = _detection(cfg, variant, trial)
                elif variant.algorithm is Algorithm.PERFECT_CSI:
                    tally = _perfect(cfg, variant, trial)
                else:
                    tally = _noncoherent(cfg, variant, trial)
        except TRIAL_ERRORS:
            tally = {"failures": 1}
        for key, val in tally.items():
            out[i, _T[key]] = val
    return out


def _run_chunk(args):
    scenario, sweep_index, start, stop = args
    return np.stack([run_trial(scenario, sweep_index, t) for t in range(start, stop)])


def _binomial(k, n):
    if n <= 0:
        return float("nan"), float("nan")
    p = k / n
    return p, math.sqrt(max(p * (1.0 - p), 0.0) / n)


def _pooled_rate(t, tau, tau_p):
    n = t[..., _T["rate_n"]]
    with np.errstate(invalid="ignore", divide="ignore"):
        a = (t[..., _T["rate_a_re"]] + 1j * t[..., _T["rate_a_im"]]) / n
        sig = np.abs(a) ** 2
        sinr = sig / ((t[..., _T["rate_b"]] + t[..., _T["rate_c"]]) / n - sig)
        return coherent.achievable_rate(sinr, tau, tau_p)


def _summarise(scenario, value, variant, tallies):
    """Rows for one variant at one sweep point from stacked per-trial tallies ``(n_trials, len(TALLY))``."""
    total = np.sum(tallies, axis=0)
    n = scenario.n_trials
    prefix = f"{variant.label}:"
    rows = []

    def add(metric, est, se):
        rows.append(MetricRow(scenario.sweep_param, value, prefix + metric, float(est), float(se), n))

    alg = variant.algorithm
    if alg is not Algorithm.PERFECT_CSI:
        add("miss_rate", *_binomial(total[_T["missed"]], total[_T["active"]]))
        add("false_alarm_rate", *_binomial(total[_T["false_alarms"]], total[_T["inactive"]]))
    if alg not in (Algorithm.AMP, Algorithm.PERFECT_CSI):
        add("message_error_rate", *_binomial(total[_T["message_errors"]], total[_T["active"]]))
        add("bit_error_rate", *_binomial(total[_T["bit_errors"]], total[_T["bits"]]))
    if total[_T["rate_n"]] > 0:
        cfg = scenario.point_config(value, variant)
        rate = float(_pooled_rate(total, cfg.coherence_len, cfg.pilot_len))
        nb = min(RATE_BATCHES, n)
        batches = np.stack([np.sum(b, axis=0) for b in np.array_split(tallies, nb)])
        per = _pooled_rate(batches, cfg.coherence_len, cfg.pilot_len)
        per = per[np.isfinite(per)]
        se = float(np.std(per, ddof=1) / math.sqrt(per.size)) if per.size > 1 else float("nan")
        add("rate_bits_per_s_per_hz", rate, se)
    add("failure_rate", *_binomial(total[_T["failures"]], n))
    return rows


def run(scenario: Scenario, parallelism: int = 1, chunk: int = 25) -> MetricsReport:
    """Run every trial of every sweep point and aggregate.

    ``parallelism > 1`` spreads contiguous chunks of trials over worker processes; the
    report is identical for any degree of parallelism.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be at least 1")
    jobs = []
    for s in range(len(scenario.sweep_values)):
        for start in range(0, scenario.n_trials, chunk):
            jobs.append((scenario, s, start, min(start + chunk, scenario.n_trials)))
    if parallelism == 1:
        parts = [_run_chunk(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            parts = list(pool.map(_run_chunk, jobs))
    per_point = {}
    for job, part in zip(jobs, parts):
        per_point.setdefault(job[1], []).append(part)
    report = MetricsReport()
    for s, value in enumerate(scenario.sweep_values):
        stacked = np.concatenate(per_point[s], axis=0)  # (n_trials, n_variants, len(TALLY))
        for i, variant in enumerate(scenario.variants):
            report.rows.extend(_summarise(scenario, value, variant, stacked[:, i, :]))
    return report


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if x.is_integer() and abs(x) < 2**53:
        return str(int(x))
    return repr(x)


def report_to_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in report.rows:
        writer.writerow([r.sweep_param, _fmt(r.sweep_value), r.metric, repr(r.estimate), repr(r.stderr), r.n_trials])
    return buf.getvalue()


def report_to_json(report: MetricsReport) -> str:
    records = [
        {
            "sweep_param": r.sweep_param,
            "sweep_value": r.sweep_value,
            "metric": r.metric,
            "estimate": None if math.isnan(r.estimate) else r.estimate,
            "stderr": None if math.isnan(r.stderr) else r.stderr,
            "n_trials": r.n_trials,
        }
        for r in report.rows
    ]
    return json.dumps(records, indent=1) + "\n"


def read_csv(path_or_text) -> MetricsReport:
    """Parse a CSV produced by :func:`export` (path or raw text)."""
    text = path_or_text
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text):
        text = Path(path_or_text).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    rows = [
        MetricRow(r["sweep_param"], float(r["sweep_value"]), r["metric"], float(r["estimate"]), float(r["stderr"]),
                  int(r["n_trials"]))
        for r in reader
    ]
    return MetricsReport(rows)


def export(report: MetricsReport, path, fmt: str = "csv") -> Path:
    """Write ``report`` as CSV or JSON (UTF-8, newline-terminated)."""
    fmt = fmt.lower()
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown format {fmt!r}")
    text = report_to_csv(report) if fmt == "csv" else report_to_json(report)
    path = Path(path)
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


# ---------------------------------------------------------------- presets

def _v(label, algorithm, overrides=None, **options):
    return Variant(label, algorithm, tuple(sorted((overrides or {}).items())), tuple(sorted(options.items())))


ENERGY = amp.Decision.ENERGY.value


def _fig2():
    cfg = SystemConfig(n_devices=200, n_antennas=20, activity_prob=0.05)
    return Scenario("fig2", cfg, "pilot_len", (5, 10, 15, 20, 25), (_v("amp", "amp", decision=ENERGY),), 2000)


def _fig3():
    cfg = SystemConfig(n_devices=200, pilot_len=10, activity_prob=0.05, power_policy=PowerPolicy.SCI)
    return Scenario("fig3", cfg, "n_antennas", (10, 20, 40, 80),
                    (_v("amp", "amp", decision=ENERGY, damping=0.85),), 2000)


def _fig4():
    cfg = SystemConfig(n_devices=200, n_antennas=20, activity_prob=0.05)
    return Scenario("fig4", cfg, "pilot_len", (10, 15, 20, 25), (
        _v("bernoulli", "amp", {"pilot_kind": PilotKind.BERNOULLI}, decision=ENERGY),
        _v("gaussian", "amp", {"pilot_kind": PilotKind.GAUSSIAN}, decision=ENERGY),
    ), 2000)


def _fig5():
    cfg = SystemConfig(n_devices=2000, pilot_len=150, activity_prob=0.05)
    return Scenario("fig5", cfg, "n_antennas", (5, 10, 20, 40), (
        _v("bernoulli", "amp", {"pilot_kind": PilotKind.BERNOULLI}, decision=ENERGY),
        _v("gaussian", "amp", {"pilot_kind": PilotKind.GAUSSIAN}, decision=ENERGY),
    ), 2000)


def _fig6():
    cfg = SystemConfig(n_devices=200, pilot_len=15, activity_prob=0.05)
    return Scenario("fig6", cfg, "n_antennas", (20, 50), (
        _v("npc", "amp", {"power_policy": PowerPolicy.NPC}, decision=ENERGY),
        _v("sci", "amp", {"power_policy": PowerPolicy.SCI}, decision=ENERGY),
    ), 2000)


def _fig7():
    cfg = SystemConfig(n_devices=100, n_antennas=50, coherence_len=500, activity_prob=0.05,
                       power_policy=PowerPolicy.SCI)
    return Scenario("fig7", cfg, "pilot_len", (10, 20, 30, 40), (
        _v("amp", "amp", estimator=coherent.EstimatorKind.AMP.value),
        _v("amp+mmse", "amp", estimator=coherent.EstimatorKind.AMP_PLUS_MMSE.value),
        _v("perfect", "perfect_csi"),
    ), 2000)


def _noncoherent_detection(name, n, taus):
    cfg = SystemConfig(n_devices=n, n_antennas=50, pilot_len=taus[0], coherence_len=max(taus), activity_prob=0.1,
                       power_policy=PowerPolicy.SCI)
    return Scenario(name, cfg, "pilot_len", taus, (
        _v("amp", "amp"),
        _v("amp_eib", "amp_eib", {"info_bits": 1}),
        _v("mamp", "mamp", {"info_bits": 1}),
    ), 2000)


def _payload_scenario(name, bits, coherent_variants):
    cfg = SystemConfig(n_devices=100, n_antennas=20, pilot_len=20, coherence_len=40, activity_prob=0.1,
                       power_policy=PowerPolicy.SCI)
    return Scenario(name, cfg, "coherence_len", (20, 25, 30, 40), (
        _v("mamp", "mamp", {"info_bits": bits}),
        _v("amp_eib", "amp_eib", {"info_bits": bits}),
    ) + coherent_variants, 5000)


def _fig12():
    return _payload_scenario("fig12", 1, tuple(
        _v(f"rep{L}", "coherent_repetition", code_length=L, estimator=coherent.EstimatorKind.AMP.value)
        for L in (11, 15, 19)
    ))


def _fig11():
    return _payload_scenario("fig11", 4, (
        _v("hamming74", "coherent_hamming74", estimator=coherent.EstimatorKind.AMP.value),
    ))


def _sharpness():
    cfg = SystemConfig(n_devices=100, n_antennas=50, pilot_len=10, coherence_len=15, activity_prob=0.1,
                       info_bits=1, power_policy=PowerPolicy.SCI)
    return Scenario("sharpness", cfg, "pilot_len", (10, 12, 15), tuple(
        _v(f"c{c:g}", "mamp", sharpness=float(c)) for c in (5, 10, 20, 40, 80)
    ), 500)


FIGURES = {
    "fig2": _fig2,
    "fig3": _fig3,
    "fig4": _fig4,
    "fig5": _fig5,
    "fig6": _fig6,
    "fig7": _fig7,
    "fig8": lambda: _noncoherent_detection("fig8", 100, (10, 12, 15, 20)),
    "fig9": lambda: _noncoherent_detection("fig9", 200, (20, 30, 40, 50)),
    "fig11": _fig11,
    "fig12": _fig12,
    "sharpness": _sharpness,
}


def preset(figure_id: str) -> Scenario:
    """Scenario reproducing one figure (``fig2`` ... ``fig12``, plus the ``sharpness`` sweep)."""
    key = str(figure_id).lower()
    if key not in FIGURES:
        raise ConfigError(f"unknown figure {figure_id!r}; known: {', '.join(FIGURES)}")
    return FIGURES[key]()
