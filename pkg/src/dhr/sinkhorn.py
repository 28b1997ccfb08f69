"""Entropic optimal transport between pixels and classes, solved by log-domain Sinkhorn scaling."""

from scipy.special import logsumexp

from .tensors import ScoreStack
from .utils import *

ColMarginalModes = ("mass_proportional", "uniform", "argmax_proportional")


@dataclass(frozen=True)
class OtConfig:
    lam: float = 0.1  # entropic regularization strength
    tol: float = 1e-6  # max marginal violation accepted as converged
    max_iter: int = 1000
    col_marginal_mode: str = "mass_proportional"
    # minimum column mass as a fraction of the total; None means 1e-3 / C
    col_floor: float | None = None
    # multiply the plan by N so that each row becomes a per-pixel class distribution
    scale_plan: bool = True

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError(f"OT lambda must be > 0, got {self.lam}.")
        if not self.tol > 0:
            raise ConfigError(f"OT tol must be > 0, got {self.tol}.")
        if self.max_iter < 1:
            raise ConfigError(f"OT max_iter must be >= 1, got {self.max_iter}.")
        if self.col_marginal_mode not in ColMarginalModes:
            raise ConfigError(
                f"Unknown col_marginal_mode {self.col_marginal_mode!r}, expected one of {ColMarginalModes}."
            )
        if self.col_floor is not None and not 0 <= self.col_floor < 1:
            raise ConfigError(f"col_floor must lie in [0, 1), got {self.col_floor}.")

    def __repr__(self):
        return repr_modified_args(self)


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """A nonnegative N×C coupling between pixels (rows) and classes (columns)."""

    plan: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    iterations: int
    violation: float
    converged: bool

    @property
    def n_rows(self) -> int:
        return self.plan.shape[0]

    @property
    def n_cols(self) -> int:
        return self.plan.shape[1]


def _as_matrix(S: ScoreStack | np.ndarray) -> np.ndarray:
    if isinstance(S, ScoreStack):
        return S.flat()
    return np.asarray(S, dtype=np.float64)


def estimate_col_marginal(
    S: ScoreStack | np.ndarray,
    mode: str = "mass_proportional",
    floor: float | None = None,
    required: Iterable[int] = (),
) -> np.ndarray:
    """Class-side marginal of the transport problem, summing to 1.

    `required` lists columns that must carry score mass; a zero-mass required column is
    reported as degenerate instead of being silently floored."""
    X = _as_matrix(S)
    N, C = X.shape
    total = float(X.sum())
    if not total > 0:
        raise DegenerateInputError("Scores have no positive entry; the class marginal is undefined.")
    masses = X.sum(axis=0)
    empty = [j for j in required if not masses[j] > 0]
    if empty:
        raise DegenerateInputError(f"Columns {empty} must carry score mass but are all zero.")
    if floor is None:
        floor = 1e-3 / C

    if mode == "uniform":
        c = np.full(C, 1.0 / C)
    elif mode == "mass_proportional":
        c = np.maximum(masses, floor * total)
    elif mode == "argmax_proportional":
        counts = np.bincount(X.argmax(axis=1), minlength=C).astype(np.float64)
        c = np.maximum(counts, floor * N)
    else:
        raise ConfigError(f"Unknown column marginal mode: {mode!r}.")
    return c / c.sum()


def solve_entropic_ot(
    S: np.ndarray, cfg: OtConfig, col_marginal: np.ndarray | None = None
) -> TransportPlan:
    """Minimize Σ T_ij (1 - S_ij) - λ H(T) with uniform row marginals and the configured
    column marginal. Non-convergence is reported through `TransportPlan.converged`."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] < 1 or S.shape[1] < 1:
        raise DomainError(f"Expected a nonempty N×C score matrix, got shape {S.shape}.")
    if np.isnan(S).any():
        raise DomainError("Score matrix contains NaN.")
    if not np.all(np.isfinite(S)) or S.min() < 0 or S.max() > 1:
        raise DomainError("Score matrix values must be finite and lie in [0, 1].")
    N, C = S.shape
    a = np.full(N, 1.0 / N)
    if col_marginal is None:
        col_marginal = estimate_col_marginal(S, cfg.col_marginal_mode, cfg.col_floor)
    b = np.asarray(col_marginal, dtype=np.float64)
    assert_eq(b.shape, (C,))

    log_k = -(1.0 - S) / cfg.lam
    with np.errstate(divide="ignore"):
        log_a, log_b = np.log(a), np.log(b)
    f = np.zeros(N)
    g = np.zeros(C)
    plan = np.exp(log_k + f[:, None] + g[None, :])
    violation = np.inf
    iterations = 0
    for iterations in range(1, cfg.max_iter + 1):
        f = log_a - logsumexp(log_k + g[None, :], axis=1)
        g = log_b - logsumexp(log_k + f[:, None], axis=0)
        plan = np.exp(log_k + f[:, None] + g[None, :])
        violation = max(
            float(np.abs(plan.sum(axis=1) - a).max()),
            float(np.abs(plan.sum(axis=0) - b).max()),
        )
        if violation <= cfg.tol:
            break
    return TransportPlan(
        plan=plan,
        row_marginal=a,
        col_marginal=b,
        iterations=iterations,
        violation=violation,
        converged=violation <= cfg.tol,
    )


def assignment_from_plan(T: TransportPlan) -> np.ndarray:
    """Scale the plan by N so each row sums to one: a per-pixel class distribution."""
    return T.n_rows * T.plan


def f_ot_mask_with_plan(
    S: ScoreStack,
    cfg: OtConfig,
    active: Iterable[int] | None = None,
    required: Iterable[int] = (),
) -> tuple[ScoreStack, TransportPlan]:
    """OT-gated scores `Q ⊙ S` together with the plan that produced them.

    Only the `active` columns (default: all) take part in the transport problem; the
    others come out as zero. `required` is given in the original column numbering."""
    X = S.flat()
    N, C = X.shape
    cols = list(range(C)) if active is None else sorted(set(active))
    if not cols:
        raise DomainError("f_ot_mask needs at least one active class.")
    position = {c: i for i, c in enumerate(cols)}
    required = list(required)
    if missing := sorted(set(required) - set(cols)):
        raise DegenerateInputError(f"required classes {missing} are not among the active classes {cols}.")
    sub = X[:, cols]
    col_marginal = estimate_col_marginal(
        sub, cfg.col_marginal_mode, cfg.col_floor, required=[position[c] for c in required]
    )
    plan = solve_entropic_ot(sub, cfg, col_marginal)
    Q = assignment_from_plan(plan) if cfg.scale_plan else plan.plan
    out = np.zeros_like(X)
    out[:, cols] = np.clip(Q * sub, 0.0, 1.0)
    h, w = S.shape
    return ScoreStack.from_flat(out, h, w, S.has_background), plan


def f_ot_mask(S: ScoreStack, cfg: OtConfig, active: Iterable[int] | None = None) -> ScoreStack:
    return f_ot_mask_with_plan(S, cfg, active)[0]
