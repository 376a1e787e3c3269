"""Stacked linear-regression ensembles and their statistics.

Four models are fit on pooled train+validation predictions and
evaluated on the test rows: structural prediction alone (T), functional
alone (A), both (TA), and both plus sex (TAS). Nested models are
compared with the F-test; p-values come from the regularized incomplete
beta function evaluated by continued fraction, exact to ~1e-10.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np


class StatsError(Exception):
    pass


class RankDeficientError(StatsError):
    pass


class TooFewRowsError(StatsError):
    pass


class NotNestedError(StatsError):
    pass


class DomainError(StatsError):
    pass


class ZeroVarianceError(StatsError):
    pass


# pivot threshold relative to the largest diagonal of X'X
RANK_TOL = 1e-10

# a fit with residual variance below this is treated as exact (degenerate inference)
DEGENERATE_SIGMA2 = 1e-12


@dataclass(frozen=True)
class OlsFit:
    coef: np.ndarray
    rss: float
    n: int
    p: int
    xtx_inv: np.ndarray
    sigma2: float
    names: tuple

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.coef


def _cholesky_spd(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor with a pivot-magnitude rank check."""
    n = a.shape[0]
    lower = np.zeros_like(a)
    scale = float(np.max(np.abs(np.diag(a))))
    if scale <= 0:
        raise RankDeficientError("design matrix has an all-zero column")
    for j in range(n):
        d = a[j, j] - lower[j, :j] @ lower[j, :j]
        if d <= RANK_TOL * scale:
            raise RankDeficientError(f"pivot {j} is {d:.3e}, below tolerance")
        lower[j, j] = math.sqrt(d)
        for i in range(j + 1, n):
            lower[i, j] = (a[i, j] - lower[i, :j] @ lower[j, :j]) / lower[j, j]
    return lower


def _chol_solve(lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    y = np.zeros_like(b)
    n = lower.shape[0]
    for i in range(n):
        y[i] = (b[i] - lower[i, :i] @ y[:i]) / lower[i, i]
    x = np.zeros_like(b)
    for i in range(n - 1, -1, -1):
        x[i] = (y[i] - lower[i + 1 :, i] @ x[i + 1 :]) / lower[i, i]
    return x


def ols_fit(x: np.ndarray, y: np.ndarray, names: tuple = ()) -> OlsFit:
    """Least squares via normal equations and Cholesky factorization.

    `x` must already carry its intercept column. Near-collinear designs
    (any pivot below RANK_TOL of the largest diagonal) raise
    RankDeficientError.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise StatsError(f"design {x.shape} and response {y.shape} do not align")
    n, p = x.shape
    if n <= p:
        raise TooFewRowsError(f"need n > p, got n={n}, p={p}")
    if names and len(names) != p:
        raise StatsError("one name per design column required")
    xtx = x.T @ x
    lower = _cholesky_spd(xtx)
    coef = _chol_solve(lower, x.T @ y)
    ident = np.eye(p)
    xtx_inv = np.column_stack([_chol_solve(lower, ident[:, j]) for j in range(p)])
    resid = y - x @ coef
    rss = float(resid @ resid)
    return OlsFit(
        coef=coef,
        rss=rss,
        n=n,
        p=p,
        xtx_inv=xtx_inv,
        sigma2=rss / (n - p),
        names=tuple(names),
    )


@dataclass(frozen=True)
class Metrics:
    mae: float
    mse: float
    r2: float


def metrics(pred, actual) -> Metrics:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    actual = np.asarray(actual, dtype=np.float64).ravel()
    if pred.shape != actual.shape:
        raise StatsError(f"length mismatch: {pred.shape} vs {actual.shape}")
    err = pred - actual
    sst = float(np.sum((actual - actual.mean()) ** 2))
    if sst == 0.0:
        raise ZeroVarianceError("all actual values are equal; R^2 undefined")
    return Metrics(
        mae=float(np.mean(np.abs(err))),
        mse=float(np.mean(err**2)),
        r2=1.0 - float(np.sum(err**2)) / sst,
    )


def regularized_incomplete_beta(x: float, a: float, b: float) -> float:
    """I_x(a, b) by Lentz continued fraction with ln-gamma prefactor."""
    if not (0.0 <= x <= 1.0) or a <= 0.0 or b <= 0.0:
        raise DomainError(f"need x in [0,1], a,b > 0; got x={x}, a={a}, b={b}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def _betacf(a: float, b: float, x: float) -> float:
    max_iter = 300
    eps = 3e-16
    fpmin = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise StatsError(f"incomplete beta did not converge for x={x}, a={a}, b={b}")


def f_upper_tail(f: float, df_num: int, df_den: int) -> float:
    """P(F >= f) for the F distribution."""
    if f <= 0.0:
        return 1.0
    if math.isinf(f):
        return 0.0
    x = df_den / (df_den + df_num * f)
    return regularized_incomplete_beta(x, df_den / 2.0, df_num / 2.0)


def t_two_sided(t: float, df: int) -> float:
    """Two-sided p-value for Student's t."""
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(x, df / 2.0, 0.5)


@dataclass(frozen=True)
class AnovaResult:
    f: float
    df_num: int
    df_den: int
    p_value: float


def anova_nested(reduced: OlsFit, full: OlsFit) -> AnovaResult:
    """F-test of a reduced model against a full model fit on the same rows."""
    if reduced.n != full.n:
        raise NotNestedError(f"row counts differ: {reduced.n} vs {full.n}")
    if full.p <= reduced.p:
        raise NotNestedError(f"full model must add regressors ({reduced.p} vs {full.p})")
    if reduced.names and full.names and not set(reduced.names) <= set(full.names):
        raise NotNestedError(f"{reduced.names} is not a subset of {full.names}")
    if full.rss > reduced.rss * (1 + 1e-9) + 1e-9:
        raise NotNestedError("full model has larger RSS; models are not nested on the same y")
    df_num = full.p - reduced.p
    df_den = full.n - full.p
    if df_den <= 0:
        raise NotNestedError("no residual degrees of freedom in the full model")
    gain = max(reduced.rss - full.rss, 0.0)
    if full.rss <= 0.0:
        return AnovaResult(f=math.inf, df_num=df_num, df_den=df_den, p_value=0.0)
    f = (gain / df_num) / (full.rss / df_den)
    return AnovaResult(f=f, df_num=df_num, df_den=df_den, p_value=f_upper_tail(f, df_num, df_den))


@dataclass(frozen=True)
class CoefficientStats:
    name: str
    estimate: float
    std_error: float
    t: float
    p_value: float


@dataclass(frozen=True)
class InferenceResult:
    coefficients: tuple
    degenerate: bool

    def by_name(self, name: str) -> CoefficientStats:
        for c in self.coefficients:
            if c.name == name:
                return c
        raise KeyError(name)


def coefficient_inference(fit: OlsFit) -> InferenceResult:
    """Per-coefficient standard errors, t statistics, and two-sided p-values.

    An (effectively) exact fit reports p = 0 for every coefficient and
    sets the degenerate flag.
    """
    df = fit.n - fit.p
    degenerate = fit.sigma2 < DEGENERATE_SIGMA2
    rows = []
    names = fit.names or tuple(f"x{i}" for i in range(fit.p))
    for i in range(fit.p):
        est = float(fit.coef[i])
        se = math.sqrt(max(fit.sigma2 * fit.xtx_inv[i, i], 0.0))
        if degenerate or se == 0.0:
            t = math.inf if est != 0 else 0.0
            p = 0.0
        else:
            t = est / se
            p = t_two_sided(t, df)
        rows.append(CoefficientStats(names[i], est, se, t, p))
    return InferenceResult(coefficients=tuple(rows), degenerate=degenerate)


@dataclass(frozen=True)
class PredictionRow:
    record_id: str
    actual_age: float
    t1w_pred: float
    aicbv_pred: float
    sex: int
    project: str
    role: str


@dataclass(frozen=True)
class PredictionTable:
    rows: tuple

    def __post_init__(self):
        seen = set()
        for r in self.rows:
            if r.record_id in seen:
                raise StatsError(f"duplicate prediction row for {r.record_id!r}")
            seen.add(r.record_id)

    def with_role(self, *roles: str) -> list[PredictionRow]:
        return [r for r in self.rows if r.role in roles]


_CSV_HEADER = ["record_id", "actual_age", "t1w_pred", "aicbv_pred", "sex", "project", "role"]


def save_prediction_table(table: PredictionTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(_CSV_HEADER)
        for r in table.rows:
            writer.writerow(
                [r.record_id, repr(r.actual_age), repr(r.t1w_pred), repr(r.aicbv_pred),
                 r.sex, r.project, r.role]
            )


def load_prediction_table(path) -> PredictionTable:
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = set(_CSV_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise StatsError(f"{path}: prediction table missing columns {sorted(missing)}")
        rows = tuple(
            PredictionRow(
                record_id=row["record_id"],
                actual_age=float(row["actual_age"]),
                t1w_pred=float(row["t1w_pred"]),
                aicbv_pred=float(row["aicbv_pred"]),
                sex=int(row["sex"]),
                project=row["project"],
                role=row["role"],
            )
            for row in reader
        )
    return PredictionTable(rows)


ENSEMBLE_REGRESSORS = {
    "T": ("t1w",),
    "A": ("aicbv",),
    "TA": ("t1w", "aicbv"),
    "TAS": ("t1w", "aicbv", "sex"),
}

_COLUMNS = {
    "t1w": lambda r: r.t1w_pred,
    "aicbv": lambda r: r.aicbv_pred,
    "sex": lambda r: float(r.sex),
}


def _design(rows: list[PredictionRow], regressors: tuple) -> np.ndarray:
    cols = [np.ones(len(rows))]
    cols += [np.array([_COLUMNS[name](r) for r in rows]) for name in regressors]
    return np.column_stack(cols)


@dataclass(frozen=True)
class EnsembleReport:
    fits: dict
    test_metrics: dict
    test_predictions: dict
    anovas: dict
    sex_inference: InferenceResult | None
    collinear: bool
    n_fit: int
    n_test: int


def build_ensembles(table: PredictionTable) -> EnsembleReport:
    """Fit T/A/TA/TAS on train+validation rows, evaluate on test rows.

    If the TA design is rank deficient (the two predictions are
    collinear), the report degrades to the T-model alone with the
    collinear flag set.
    """
    fit_rows = table.with_role("train", "validation")
    test_rows = table.with_role("test")
    if not fit_rows or not test_rows:
        raise TooFewRowsError("need train+validation rows to fit and test rows to evaluate")
    y_fit = np.array([r.actual_age for r in fit_rows])
    y_test = np.array([r.actual_age for r in test_rows])

    def fit_model(key):
        regs = ENSEMBLE_REGRESSORS[key]
        return ols_fit(_design(fit_rows, regs), y_fit, names=("intercept",) + regs)

    fits = {"T": fit_model("T")}
    collinear = False
    try:
        fits["A"] = fit_model("A")
        fits["TA"] = fit_model("TA")
        fits["TAS"] = fit_model("TAS")
    except RankDeficientError:
        collinear = True
        fits = {"T": fits["T"]}

    test_predictions = {
        key: fit.predict(_design(test_rows, ENSEMBLE_REGRESSORS[key])) for key, fit in fits.items()
    }
    test_metrics = {key: metrics(pred, y_test) for key, pred in test_predictions.items()}
    anovas = {}
    sex_inference = None
    if not collinear:
        anovas["T_vs_TA"] = anova_nested(fits["T"], fits["TA"])
        anovas["A_vs_TA"] = anova_nested(fits["A"], fits["TA"])
        anovas["TA_vs_TAS"] = anova_nested(fits["TA"], fits["TAS"])
        sex_inference = coefficient_inference(fits["TAS"])
    return EnsembleReport(
        fits=fits,
        test_metrics=test_metrics,
        test_predictions=test_predictions,
        anovas=anovas,
        sex_inference=sex_inference,
        collinear=collinear,
        n_fit=len(fit_rows),
        n_test=len(test_rows),
    )


@dataclass(frozen=True)
class AgeGroupMae:
    lo: float
    hi: float
    mae: float
    count: int


def report_by_age_group(actual, pred, width: float = 5.0) -> list[AgeGroupMae]:
    """MAE per half-open age interval [k*width, (k+1)*width); empty bins omitted."""
    actual = np.asarray(actual, dtype=np.float64).ravel()
    pred = np.asarray(pred, dtype=np.float64).ravel()
    bins: dict[int, list[float]] = {}
    for a, p in zip(actual, pred):
        bins.setdefault(int(math.floor(a / width)), []).append(abs(p - a))
    return [
        AgeGroupMae(lo=k * width, hi=(k + 1) * width, mae=float(np.mean(errs)), count=len(errs))
        for k, errs in sorted(bins.items())
    ]


@dataclass(frozen=True)
class ProjectMae:
    project: str
    mae: float
    count: int


def report_by_project(actual, pred, projects) -> list[ProjectMae]:
    """MAE per project; the record-weighted average equals the overall MAE."""
    actual = np.asarray(actual, dtype=np.float64).ravel()
    pred = np.asarray(pred, dtype=np.float64).ravel()
    groups: dict[str, list[float]] = {}
    for a, p, proj in zip(actual, pred, projects):
        groups.setdefault(proj, []).append(abs(p - a))
    return [
        ProjectMae(project=proj, mae=float(np.mean(errs)), count=len(errs))
        for proj, errs in sorted(groups.items())
    ]
