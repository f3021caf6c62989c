"""PCA monitoring core: preprocessing, calibration, Q/D statistics, limits, EWMA.

All functions are pure and operate on immutable values; fitted models can be
shared freely across threads.  The latent model is

    X_scaled = T_A . P_A^T + E_A

with loadings P_A the leading eigenvectors of the scaled data's covariance.
A new observation x (already scaled) decomposes into scores t = x . P_A and
residual e = x - t . P_A^T.  Two scalars summarize it:

    D = sum_a ((t_a - mu_a) / sigma_a)^2     (distance inside the model plane)
    Q = sum_m e_m^2                          (squared distance off the plane)

where mu_a / sigma_a are the calibration score statistics.  Exceeding the
upper control limit of either statistic flags the window as anomalous.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from msnmon.errors import DimensionError, InvalidData, RankError

# Columns whose spread falls below this are treated as constant and get a
# unit std so they contribute exactly zero after centering.
DEGENERATE_STD = 1e-12
SCORE_STD_FLOOR = 1e-9
UCL_Q_FLOOR = 1e-9

# Eigenvalues below max_eig * RANK_RTOL do not count toward the usable rank.
RANK_RTOL = 1e-10


@dataclass(frozen=True)
class CalibrationMatrix:
    """Raw (unscaled) calibration observations, one row per window."""

    data: np.ndarray
    variable_names: tuple[str, ...]

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "variable_names", tuple(self.variable_names))
        if data.ndim != 2:
            raise InvalidData(f"calibration data must be 2-D, got shape {data.shape}")
        n, m = data.shape
        if n < 2:
            raise InvalidData(f"need at least 2 calibration rows, got {n}")
        if m < 1:
            raise InvalidData("need at least one variable")
        if len(self.variable_names) != m:
            raise InvalidData(
                f"{len(self.variable_names)} names for {m} columns"
            )
        if len(set(self.variable_names)) != m:
            raise InvalidData("variable names must be unique")
        if not np.isfinite(data).all():
            raise InvalidData("calibration data contains non-finite entries")


@dataclass(frozen=True)
class Scaler:
    """Column-wise standardization parameters."""

    means: np.ndarray
    stds: np.ndarray


@dataclass(frozen=True)
class PcaModel:
    scaler: Scaler
    loadings: np.ndarray          # M x A, orthonormal columns
    num_components: int
    score_means: np.ndarray       # length A
    score_stds: np.ndarray        # length A, strictly positive
    residual_eigenvalues: np.ndarray  # discarded eigenvalues, nonincreasing
    calib_count: int
    variable_names: tuple[str, ...] = ()

    @property
    def num_variables(self) -> int:
        return self.loadings.shape[0]


@dataclass(frozen=True)
class StatPair:
    """The (Q, D) pair for one sensor window.

    This is the only monitoring payload that ever crosses a sensor boundary.
    """

    q: float
    d: float
    window_start: int
    sensor_id: str


@dataclass(frozen=True)
class ControlLimits:
    ucl_q: float
    ucl_d: float
    alpha: float  # confidence level in (0, 1); larger alpha -> larger limits


@dataclass(frozen=True)
class EwmaState:
    """Forgetting-factor accumulators over raw observation rows.

    mean_acc and crossprod_acc hold EWMA estimates of E[x] and E[x x^T] in
    raw units, so the state needs constant memory regardless of runtime and
    every refit works in the same frame.
    """

    mean_acc: np.ndarray
    crossprod_acc: np.ndarray
    weight: float  # forgetting factor lambda in [0, 1]; 1 = never update
    obs_seen: int = 0


def fit_scaler(calib: CalibrationMatrix) -> Scaler:
    """Column means and sample stds, with degenerate columns forced to std 1."""
    data = calib.data
    means = data.mean(axis=0)
    stds = data.std(axis=0, ddof=1)
    stds = np.where(stds < DEGENERATE_STD, 1.0, stds)
    return Scaler(means=means, stds=stds)


def apply_scaler(scaler: Scaler, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != scaler.means.shape[0]:
        raise DimensionError(
            f"vector has {x.shape[-1]} entries, scaler expects {scaler.means.shape[0]}"
        )
    return (x - scaler.means) / scaler.stds


def _usable_rank(eigenvalues: np.ndarray) -> int:
    if eigenvalues.size == 0:
        return 0
    tol = max(eigenvalues[0] * RANK_RTOL, 1e-30)
    return int(np.sum(eigenvalues > tol))


def _fix_signs(loadings: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    out = loadings.copy()
    for a in range(out.shape[1]):
        pivot = np.argmax(np.abs(out[:, a]))
        if out[pivot, a] < 0:
            out[:, a] = -out[:, a]
    return out


def fit_pca(calib: CalibrationMatrix, num_components: int) -> PcaModel:
    """Calibrate a PCA model from raw observations.

    The scaled covariance X_s^T X_s / (N-1) is eigendecomposed directly
    (M is small, tens to low hundreds of counters, so this stays cheap no
    matter how many calibration rows there are).  Eigenvalues come out
    nonincreasing; the leading ``num_components`` eigenvectors become the
    loadings, the rest of the spectrum feeds the Q control limit.
    """
    scaler = fit_scaler(calib)
    scaled = apply_scaler(scaler, calib.data)
    n = scaled.shape[0]

    cov = scaled.T @ scaled / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]

    rank = _usable_rank(evals)
    if not 1 <= num_components <= rank:
        raise RankError(
            f"requested {num_components} components but scaled data has rank {rank}"
        )

    loadings = _fix_signs(evecs[:, :num_components])
    scores = scaled @ loadings
    score_means = scores.mean(axis=0)
    score_stds = np.maximum(scores.std(axis=0, ddof=1), SCORE_STD_FLOOR)
    residual_eigenvalues = evals[num_components:rank]

    return PcaModel(
        scaler=scaler,
        loadings=loadings,
        num_components=num_components,
        score_means=score_means,
        score_stds=score_stds,
        residual_eigenvalues=residual_eigenvalues,
        calib_count=n,
        variable_names=calib.variable_names,
    )


def project(model: PcaModel, x_scaled: np.ndarray) -> np.ndarray:
    """Scores of an already-scaled observation: t = x . P_A."""
    x_scaled = np.asarray(x_scaled, dtype=float)
    if x_scaled.shape[-1] != model.num_variables:
        raise DimensionError(
            f"vector has {x_scaled.shape[-1]} entries, model expects {model.num_variables}"
        )
    return x_scaled @ model.loadings


def residual(model: PcaModel, x_scaled: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Part of the observation the model plane cannot explain: e = x - t . P_A^T."""
    x_scaled = np.asarray(x_scaled, dtype=float)
    t = np.asarray(t, dtype=float)
    if t.shape[-1] != model.num_components:
        raise DimensionError(
            f"score vector has {t.shape[-1]} entries, model has {model.num_components}"
        )
    if x_scaled.shape[-1] != model.num_variables:
        raise DimensionError(
            f"vector has {x_scaled.shape[-1]} entries, model expects {model.num_variables}"
        )
    return x_scaled - t @ model.loadings.T


def q_statistic(e: np.ndarray) -> float:
    """Sum of squared residuals."""
    e = np.asarray(e, dtype=float)
    if not np.isfinite(e).all():
        raise InvalidData("residual contains non-finite entries")
    return float(e @ e)


def d_statistic(model: PcaModel, t: np.ndarray) -> float:
    """Standardized squared score distance from the calibration center."""
    t = np.asarray(t, dtype=float)
    if t.shape[-1] != model.num_components:
        raise DimensionError(
            f"score vector has {t.shape[-1]} entries, model has {model.num_components}"
        )
    if not np.isfinite(t).all():
        raise InvalidData("score vector contains non-finite entries")
    z = (t - model.score_means) / model.score_stds
    return float(z @ z)


def statistics_for(model: PcaModel, x_scaled: np.ndarray) -> tuple[float, float]:
    """Convenience: (Q, D) for one scaled observation."""
    t = project(model, x_scaled)
    e = residual(model, x_scaled, t)
    return q_statistic(e), d_statistic(model, t)


def _ucl_q_jackson(residual_eigenvalues: np.ndarray, alpha: float) -> float:
    """Jackson-Mudholkar approximation of the Q limit from residual moments."""
    lam = np.asarray(residual_eigenvalues, dtype=float)
    theta1 = float(lam.sum())
    if theta1 <= 0.0:
        return UCL_Q_FLOOR
    theta2 = float((lam**2).sum())
    theta3 = float((lam**3).sum())
    z = float(stats.norm.ppf(alpha))
    h0 = 1.0 - 2.0 * theta1 * theta3 / (3.0 * theta2**2)
    base = (
        z * math.sqrt(2.0 * theta2 * h0**2) / theta1
        + 1.0
        + theta2 * h0 * (h0 - 1.0) / theta1**2
    )
    if h0 > 0 and base > 0:
        ucl = theta1 * base ** (1.0 / h0)
        if math.isfinite(ucl) and ucl > 0:
            return max(ucl, UCL_Q_FLOOR)
    # Weighted chi-square (Box) approximation when the JM expression
    # degenerates for an awkward residual spectrum.
    g = theta2 / theta1
    dof = theta1**2 / theta2
    return max(float(g * stats.chi2.ppf(alpha, dof)), UCL_Q_FLOOR)


def _ucl_d_fdist(num_components: int, calib_count: int, alpha: float) -> float:
    a, n = num_components, calib_count
    if n <= a:
        raise RankError(f"D limit undefined: calibration count {n} <= components {a}")
    scale = a * (n**2 - 1) / (n * (n - a))
    return float(scale * stats.f.ppf(alpha, a, n - a))


def control_limits(
    model: PcaModel,
    alpha: float,
    method: str = "theoretical",
    calib_q: np.ndarray | None = None,
    calib_d: np.ndarray | None = None,
) -> ControlLimits:
    """Upper control limits for Q and D at confidence level ``alpha``.

    ``theoretical`` uses the Jackson-Mudholkar approximation for Q and
    F-distribution scaling for D.  ``percentile`` is a distribution-free
    fallback taking the empirical alpha-quantile of the calibration
    statistics, which must then be supplied.
    """
    if not 0.0 < alpha < 1.0:
        raise InvalidData(f"alpha must be in (0, 1), got {alpha}")
    if method == "theoretical":
        ucl_q = _ucl_q_jackson(model.residual_eigenvalues, alpha)
        ucl_d = _ucl_d_fdist(model.num_components, model.calib_count, alpha)
    elif method == "percentile":
        if calib_q is None or calib_d is None:
            raise InvalidData("percentile limits need calibration statistics")
        ucl_q = max(float(np.quantile(np.asarray(calib_q, float), alpha)), UCL_Q_FLOOR)
        ucl_d = max(float(np.quantile(np.asarray(calib_d, float), alpha)), UCL_Q_FLOOR)
    else:
        raise InvalidData(f"unknown limit method {method!r}")
    return ControlLimits(ucl_q=float(ucl_q), ucl_d=float(ucl_d), alpha=alpha)


def ewma_seed(batch: np.ndarray, weight: float) -> EwmaState:
    """Initial accumulators equal to the plain statistics of one batch."""
    batch = np.asarray(batch, dtype=float)
    if batch.ndim != 2 or batch.shape[0] < 1:
        raise InvalidData("seed batch must be a nonempty 2-D array")
    if not 0.0 <= weight <= 1.0:
        raise InvalidData(f"forgetting factor must be in [0, 1], got {weight}")
    return EwmaState(
        mean_acc=batch.mean(axis=0),
        crossprod_acc=batch.T @ batch / batch.shape[0],
        weight=weight,
        obs_seen=batch.shape[0],
    )


def ewma_update(state: EwmaState, batch: np.ndarray) -> EwmaState:
    """Blend one batch of raw observation rows into the accumulators.

    mean_acc   <- lam * mean_acc   + (1 - lam) * mean(batch)
    crossprod  <- lam * crossprod  + (1 - lam) * batch^T batch / len(batch)

    weight 1 keeps the state untouched, weight 0 forgets everything older
    than the latest batch.
    """
    batch = np.asarray(batch, dtype=float)
    if batch.ndim != 2 or batch.shape[0] < 1:
        raise InvalidData("update batch must be a nonempty 2-D array")
    if batch.shape[1] != state.mean_acc.shape[0]:
        raise DimensionError(
            f"batch has {batch.shape[1]} columns, state has {state.mean_acc.shape[0]}"
        )
    lam = state.weight
    mean_b = batch.mean(axis=0)
    cross_b = batch.T @ batch / batch.shape[0]
    return EwmaState(
        mean_acc=lam * state.mean_acc + (1.0 - lam) * mean_b,
        crossprod_acc=lam * state.crossprod_acc + (1.0 - lam) * cross_b,
        weight=lam,
        obs_seen=state.obs_seen + batch.shape[0],
    )


def refit_from_ewma(
    state: EwmaState,
    num_components: int,
    variable_names: tuple[str, ...] = (),
) -> PcaModel:
    """Rebuild scaler, loadings and score statistics from the accumulators.

    The covariance implied by the accumulators is E[x x^T] - E[x] E[x]^T;
    its correlation form is eigendecomposed exactly as in the initial fit.
    Because scaled columns are centered, score means are zero and score
    variances equal the retained eigenvalues.
    """
    mean = state.mean_acc
    cov = state.crossprod_acc - np.outer(mean, mean)
    # Accumulated round-off can leave slightly negative diagonals.
    diag = np.clip(np.diag(cov).copy(), 0.0, None)
    stds = np.sqrt(diag)
    stds = np.where(stds < DEGENERATE_STD, 1.0, stds)
    corr = cov / np.outer(stds, stds)
    corr = (corr + corr.T) / 2.0

    evals, evecs = np.linalg.eigh(corr)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]

    rank = _usable_rank(evals)
    if not 1 <= num_components <= rank:
        raise RankError(
            f"requested {num_components} components but accumulators have rank {rank}"
        )

    loadings = _fix_signs(evecs[:, :num_components])
    score_stds = np.maximum(np.sqrt(evals[:num_components]), SCORE_STD_FLOOR)
    return PcaModel(
        scaler=Scaler(means=mean.copy(), stds=stds),
        loadings=loadings,
        num_components=num_components,
        score_means=np.zeros(num_components),
        score_stds=score_stds,
        residual_eigenvalues=evals[num_components:rank],
        calib_count=state.obs_seen,
        variable_names=variable_names,
    )


MODEL_FORMAT_TAG = "msnmon-model v1"


def _fmt_vector(v: np.ndarray) -> str:
    return " ".join(repr(float(x)) for x in v)


def dump_model(model: PcaModel) -> str:
    """Serialize a model to structured text.

    Line-oriented: a version tag, then one ``key value...`` line per field,
    loadings row-major one line per variable.  Floats are written with
    ``repr`` so the round trip is bit-exact.
    """
    m, a = model.loadings.shape
    lines = [
        MODEL_FORMAT_TAG,
        f"m {m}",
        f"a {a}",
        f"calib_count {model.calib_count}",
        "names " + " ".join(model.variable_names),
        "means " + _fmt_vector(model.scaler.means),
        "stds " + _fmt_vector(model.scaler.stds),
    ]
    for row in model.loadings:
        lines.append("loading " + _fmt_vector(row))
    lines.append("score_means " + _fmt_vector(model.score_means))
    lines.append("score_stds " + _fmt_vector(model.score_stds))
    lines.append("residual_eigenvalues " + _fmt_vector(model.residual_eigenvalues))
    return "\n".join(lines) + "\n"


def load_model(text: str) -> PcaModel:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != MODEL_FORMAT_TAG:
        raise InvalidData("not a model snapshot (missing version tag)")
    fields: dict[str, list[str]] = {}
    loadings_rows: list[list[float]] = []
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "loading":
            loadings_rows.append([float(x) for x in rest.split()])
        else:
            fields[key] = rest.split()
    try:
        m = int(fields["m"][0])
        a = int(fields["a"][0])
        calib_count = int(fields["calib_count"][0])
        names = tuple(fields.get("names", []))
        means = np.array([float(x) for x in fields["means"]])
        stds = np.array([float(x) for x in fields["stds"]])
        score_means = np.array([float(x) for x in fields["score_means"]])
        score_stds = np.array([float(x) for x in fields["score_stds"]])
        resid = np.array([float(x) for x in fields["residual_eigenvalues"]])
    except (KeyError, ValueError, IndexError) as exc:
        raise InvalidData(f"malformed model snapshot: {exc}") from exc
    loadings = np.array(loadings_rows)
    if loadings.shape != (m, a):
        raise InvalidData(
            f"snapshot declares {m}x{a} loadings but carries {loadings.shape}"
        )
    return PcaModel(
        scaler=Scaler(means=means, stds=stds),
        loadings=loadings,
        num_components=a,
        score_means=score_means,
        score_stds=score_stds,
        residual_eigenvalues=resid,
        calib_count=calib_count,
        variable_names=names,
    )
