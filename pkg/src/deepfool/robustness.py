"""Dataset-level robustness estimates, attack comparison and report files."""

import csv
import io
import json
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import attacks
from .attacks import INF, AttackConfig
from .errors import ConfigError, DegenerateGradientError

ATTACKS = ("deepfool", "fgs", "penalized_oracle")

CSV_COLUMNS = (
    "sample_id",
    "attack",
    "fooled",
    "failed",
    "iterations",
    "norm2_raw",
    "norm2_overshoot",
    "norm_inf_raw",
    "x_norm2",
    "x_norm_inf",
    "rel2",
    "rel_inf",
    "wall_ms",
)


def _parse_float(text):
    return INF if text in ("inf", "infinity") else float(text)


@dataclass(frozen=True)
class AttackSpec:
    """Which attack to run and how.

    String form: ``deepfool[:p=inf,eta=0.02,max_iter=50]``,
    ``fgs[:eps=0.1]`` (no ``eps`` means search for the smallest epsilon
    reaching ``target`` misclassification), ``penalized_oracle``.
    """

    name: str = "deepfool"
    config: AttackConfig = AttackConfig()
    epsilon: Optional[float] = None
    target_rate: float = 0.9
    epsilon_max: Optional[float] = None
    steps: int = 100

    def __post_init__(self):
        if self.name not in ATTACKS:
            raise ConfigError(
                f"unknown attack {self.name!r}; choose from {', '.join(ATTACKS)}"
            )

    @classmethod
    def parse(cls, text, **overrides):
        name, _, rest = text.partition(":")
        name = {"oracle": "penalized_oracle", "df": "deepfool"}.get(name, name)
        cfg = {}
        kwargs = {}
        for item in filter(None, rest.split(",")):
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"expected key=value in attack spec, got {item!r}")
            if key == "p":
                cfg["p"] = _parse_float(value)
            elif key in ("eta", "overshoot"):
                cfg["overshoot"] = float(value)
            elif key in ("max_iter", "max_iterations"):
                cfg["max_iterations"] = int(value)
            elif key in ("eps", "epsilon"):
                kwargs["epsilon"] = float(value)
            elif key in ("target", "target_rate"):
                kwargs["target_rate"] = float(value)
            elif key in ("eps_max", "epsilon_max"):
                kwargs["epsilon_max"] = float(value)
            else:
                raise ConfigError(f"unknown attack option {key!r}")
        base = overrides.pop("config", None) or AttackConfig()
        merged = {**base.as_dict(), **cfg}
        merged["p"] = _parse_float(str(merged["p"]))
        merged["clip"] = tuple(merged["clip"]) if merged["clip"] else None
        # options written in the attack string win over caller defaults
        kwargs = {**overrides, **kwargs}
        return cls(name=name, config=AttackConfig(**merged), **kwargs)

    @property
    def label(self):
        if self.name == "deepfool":
            p = self.config.p
            if p == 2.0:
                return "deepfool"
            return "deepfool_pinf" if p == INF else f"deepfool_p{p:g}"
        return self.name

    def as_dict(self):
        return {
            "name": self.name,
            "config": self.config.as_dict(),
            "epsilon": self.epsilon,
            "target_rate": self.target_rate,
            "epsilon_max": self.epsilon_max,
            "steps": self.steps,
        }


@dataclass(frozen=True)
class SampleRecord:
    sample_id: int
    attack: str
    fooled: bool
    failed: bool
    iterations: int
    norm2_raw: float
    norm2_overshoot: float
    norm_inf_raw: float
    x_norm2: float
    x_norm_inf: float
    rel2: float
    rel_inf: float
    wall_ms: float

    def csv_row(self):
        out = []
        for name in CSV_COLUMNS:
            v = getattr(self, name)
            if isinstance(v, bool):
                out.append("1" if v else "0")
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(str(v))
        return out

    @classmethod
    def from_csv_row(cls, row):
        kwargs = {}
        for f_, v in zip(fields(cls), row):
            if f_.type in (bool, "bool"):
                kwargs[f_.name] = v == "1"
            elif f_.type in (int, "int"):
                kwargs[f_.name] = int(v)
            elif f_.type in (float, "float"):
                kwargs[f_.name] = float(v)
            else:
                kwargs[f_.name] = v
        return cls(**kwargs)


def _mean(values):
    values = list(values)
    return math.fsum(values) / len(values) if values else float("nan")


@dataclass
class RobustnessReport:
    records: list
    metadata: dict = field(default_factory=dict)
    n_samples: int = 0
    n_excluded: int = 0
    test_error: float = float("nan")

    @property
    def evaluated(self):
        return [r for r in self.records if not r.failed]

    @property
    def aggregates(self):
        ok = self.evaluated
        return {
            "n_samples": self.n_samples,
            "n_excluded": self.n_excluded,
            "n_attacked": len(self.records),
            "n_failed": len(self.records) - len(ok),
            "rho_adv": _mean(r.rel2 for r in ok),
            "rho_adv_inf": _mean(r.rel_inf for r in ok),
            "fooling_rate": _mean(float(r.fooled) for r in ok) if ok else 0.0,
            "mean_iterations": _mean(r.iterations for r in ok),
            "median_wall_ms": statistics.median(r.wall_ms for r in ok) if ok else 0.0,
            "test_error": self.test_error,
        }

    @property
    def rho_adv(self):
        return self.aggregates["rho_adv"]

    @property
    def rho_adv_inf(self):
        return self.aggregates["rho_adv_inf"]

    @property
    def fooling_rate(self):
        return self.aggregates["fooling_rate"]

    def by_id(self):
        return {r.sample_id: r for r in self.records}

    # -- serialization --

    def _head(self):
        return {
            "metadata": self.metadata,
            "n_samples": self.n_samples,
            "n_excluded": self.n_excluded,
            "test_error": self.test_error,
        }

    def to_json(self):
        doc = dict(self._head())
        doc["aggregates"] = self.aggregates
        doc["records"] = [asdict(r) for r in self.records]
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(
            records=[SampleRecord(**r) for r in doc["records"]],
            metadata=doc["metadata"],
            n_samples=doc["n_samples"],
            n_excluded=doc["n_excluded"],
            test_error=doc["test_error"],
        )

    def to_csv(self):
        buf = io.StringIO()
        buf.write("# " + json.dumps(self._head(), sort_keys=True) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.records:
            writer.writerow(r.csv_row())
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# "):
            raise ValueError("report CSV must start with a '# {...}' metadata line")
        head = json.loads(lines[0][2:])
        reader = csv.reader(lines[1:])
        if tuple(next(reader)) != CSV_COLUMNS:
            raise ValueError("unexpected report CSV header")
        return cls(
            records=[SampleRecord.from_csv_row(row) for row in reader],
            metadata=head["metadata"],
            n_samples=head["n_samples"],
            n_excluded=head["n_excluded"],
            test_error=head["test_error"],
        )


def test_error(f, dataset):
    """Fraction of ``dataset`` that ``f`` misclassifies."""
    if len(dataset) == 0:
        raise ConfigError("test error of an empty dataset is undefined")
    return float(np.mean(f.predict(dataset.x) != dataset.y))


test_error.__test__ = False  # not a pytest test when imported into test modules


def _run_attack(f, x, y, spec, epsilon):
    if spec.name == "deepfool":
        return attacks.deepfool(f, x, spec.config)
    if spec.name == "fgs":
        return attacks.fgs_attack(f, x, y, epsilon)
    return attacks.penalized_oracle(f, x, cfg=spec.config)


def _record(sample_id, label, x, result, timing):
    xn2 = float(np.linalg.norm(x))
    xninf = float(np.max(np.abs(x), initial=0.0))
    if result is None or xn2 == 0.0:
        nan = float("nan")
        return SampleRecord(sample_id, label, False, True, 0, nan, nan, nan,
                            xn2, xninf, nan, nan, 0.0)
    return SampleRecord(
        sample_id=sample_id,
        attack=label,
        fooled=bool(result.fooled),
        failed=False,
        iterations=int(result.iterations),
        norm2_raw=result.norm2_raw,
        norm2_overshoot=result.norm2_overshoot,
        norm_inf_raw=result.norm_inf_raw,
        x_norm2=xn2,
        x_norm_inf=xninf,
        rel2=result.norm2_raw / xn2,
        rel_inf=result.norm_inf_raw / xninf,
        wall_ms=result.wall_time * 1e3 if timing else 0.0,
    )


def evaluate_robustness(
    f,
    dataset,
    spec,
    exclude_misclassified=True,
    threads=1,
    timing=False,
    metadata=None,
):
    """Attack every sample of ``dataset`` and aggregate the results.

    Samples that ``f`` already misclassifies are skipped (and counted) when
    ``exclude_misclassified`` is set. Samples on which the attack hits a
    degenerate gradient are recorded with ``failed=True`` and left out of the
    averages. For fast gradient sign without a fixed epsilon, the epsilon is
    searched on the attacked samples. Records are ordered by sample id, so
    the result is independent of dataset order and of ``threads``. Wall
    times are only recorded when ``timing`` is set; otherwise they are 0 so
    that reruns produce identical reports.
    """
    if isinstance(spec, str):
        spec = AttackSpec.parse(spec)
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate robustness on an empty dataset")
    pred = f.predict(dataset.x)
    err = float(np.mean(pred != dataset.y))
    keep = pred == dataset.y if exclude_misclassified else np.ones(len(dataset), bool)
    order = np.argsort(dataset.ids, kind="stable")
    order = order[keep[order]]
    attacked = dataset.subset(order)

    meta = {
        "attack": spec.as_dict(),
        "model_hash": f.content_hash(),
        "exclude_misclassified": bool(exclude_misclassified),
    }
    epsilon = spec.epsilon
    if spec.name == "fgs" and epsilon is None and len(attacked):
        search = attacks.fgs_epsilon_search(
            f,
            attacked,
            spec.target_rate,
            spec.epsilon_max if spec.epsilon_max is not None else dataset.dynamic_range(),
            spec.steps,
        )
        epsilon = search.epsilon
        meta["epsilon_search"] = {"reached": search.reached, "rate": search.rate,
                                  "grid_step": search.grid_step}
    if spec.name == "fgs":
        meta["epsilon"] = epsilon
    meta.update(metadata or {})

    def one(i):
        x = attacked.x[i]
        try:
            res = _run_attack(f, x, attacked.y[i], spec, epsilon)
        except DegenerateGradientError:
            res = None
        return _record(int(attacked.ids[i]), spec.label, x, res, timing)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(one, range(len(attacked))))
    else:
        records = [one(i) for i in range(len(attacked))]
    return RobustnessReport(
        records=records,
        metadata=meta,
        n_samples=len(dataset),
        n_excluded=int(len(dataset) - len(attacked)),
        test_error=err,
    )


def trend_disagreement(series_a, series_b, tol=0.0):
    """Steps where two robustness measurements move in opposite directions."""
    out = []
    for i in range(1, min(len(series_a), len(series_b))):
        da = series_a[i] - series_a[i - 1]
        db = series_b[i] - series_b[i - 1]
        if abs(da) > tol and abs(db) > tol and (da > 0) != (db > 0):
            out.append(i)
    return out


MEASUREMENT_CAVEAT = (
    "the two attacks disagree on the direction of the robustness change; "
    "conclusions depend on the measurement method, prefer the more accurate "
    "(smaller-perturbation) attack"
)


def compare_attacks(report_a, report_b, previous=None):
    """Per-sample comparison of perturbation norms, ``a`` relative to ``b``.

    ``previous`` may hold the pair of reports for the same two attacks on an
    earlier model; if the two attacks then disagree on whether robustness
    went up or down, a caveat is attached.
    """
    a, b = report_a.by_id(), report_b.by_id()
    if set(a) != set(b):
        raise ConfigError("reports cover different sample ids")
    ratios, ids = [], []
    wins_a = wins_b = ties = 0
    for sid in sorted(a):
        ra, rb = a[sid], b[sid]
        if ra.failed or rb.failed:
            continue
        ratio = ra.norm2_raw / rb.norm2_raw if rb.norm2_raw > 0 else INF
        ratios.append(ratio)
        ids.append(sid)
        if ra.norm2_raw < rb.norm2_raw:
            wins_a += 1
        elif rb.norm2_raw < ra.norm2_raw:
            wins_b += 1
        else:
            ties += 1
    finite = [r for r in ratios if math.isfinite(r)]
    summary = {
        "attack_a": report_a.records[0].attack if report_a.records else None,
        "attack_b": report_b.records[0].attack if report_b.records else None,
        "n_compared": len(ratios),
        "sample_ids": ids,
        "ratios": ratios,
        "wins_a": wins_a,
        "wins_b": wins_b,
        "ties": ties,
        "mean_ratio": _mean(finite),
        "median_ratio": statistics.median(ratios) if ratios else float("nan"),
        "rho_adv_a": report_a.rho_adv,
        "rho_adv_b": report_b.rho_adv,
        "rho_ratio": report_a.rho_adv / report_b.rho_adv if report_b.rho_adv else INF,
        "caveat": None,
    }
    if previous is not None:
        prev_a, prev_b = previous
        if trend_disagreement(
            [prev_a.rho_adv, report_a.rho_adv], [prev_b.rho_adv, report_b.rho_adv]
        ):
            summary["caveat"] = MEASUREMENT_CAVEAT
    return summary
