"""Componentwise boosting engine driven by aggregated statistics.

Selection and coefficient updates never touch individual-level data: every
score statistic is assembled from pooled cross-products ``a_j = sum_i x_ij y_i``
and pooled covariance entries ``c_jk = sum_i x_ij x_ik`` held in an
:class:`AggregateCache`.  The candidate planner decides which covariance
entries have to be fetched before the next step can run; fetching itself is
delegated to a provider object (see ``coordinator``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FULL = "full"
HEURISTIC = "heuristic"
BLOCK = "block"

MODES = (FULL, HEURISTIC, BLOCK)


class BoostingError(Exception):
    pass


class MissingCovarianceError(BoostingError):
    """A score needed a covariance entry the planner never fetched."""

    def __init__(self, j, k):
        super().__init__(f"covariance ({j},{k}) not available in cache")
        self.pair = (j, k)


class EmptyCandidateSetError(BoostingError):
    pass


class NonFiniteScoreError(BoostingError):
    pass


class DegenerateDiagonalError(BoostingError):
    """A diagonal covariance entry is zero or non-finite."""


@dataclass
class BoostingConfig:
    """Run parameters for one boosting run.

    ``target_model_size`` stops the run once that many distinct covariates
    carry a nonzero coefficient; ``None`` runs all ``max_steps`` steps.
    ``buffer_w`` is only meaningful in block mode.  Ties in the selection
    criterion are always broken towards the lowest index.
    """

    p: int
    nu: float = 0.1
    max_steps: int = 100
    target_model_size: int | None = None
    mode: str = FULL
    buffer_w: int = 0

    def __post_init__(self):
        if not 0.0 < self.nu <= 1.0:
            raise ValueError(f"nu must be in (0, 1], got {self.nu}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.buffer_w <= self.p:
            raise ValueError("buffer_w must be in [0, p]")
        if self.target_model_size is not None and self.target_model_size < 0:
            raise ValueError("target_model_size must be >= 0")


@dataclass
class BoostingState:
    """Mutable state of a run: sparse coefficients plus score bookkeeping.

    ``scores`` holds the most recently computed score statistic per
    covariate; only the entries listed in ``candidate_set`` are current for
    the upcoming step.  ``inclusion_order`` records covariates in the order
    they first received a nonzero coefficient.
    """

    beta: dict[int, float]
    step: int
    scores: np.ndarray
    initial_scores: np.ndarray
    inclusion_order: list[int]
    candidate_set: np.ndarray

    @classmethod
    def initial(cls, initial_scores: np.ndarray) -> "BoostingState":
        initial_scores = np.asarray(initial_scores, dtype=float)
        p = initial_scores.shape[0]
        return cls(
            beta={},
            step=0,
            scores=initial_scores.copy(),
            initial_scores=initial_scores.copy(),
            inclusion_order=[],
            candidate_set=np.arange(p),
        )

    def included(self) -> np.ndarray:
        """Indices with a nonzero coefficient, ascending."""
        return np.array(sorted(self.beta), dtype=np.intp)

    def beta_vector(self, p: int) -> np.ndarray:
        out = np.zeros(p)
        for j, b in self.beta.items():
            out[j] = b
        return out


class AggregateCache:
    """Pooled cross-products and the (partially known) covariance matrix.

    The diagonal is complete from the start; off-diagonal entries appear as
    fetch plans are satisfied.  Availability flags never revert and every
    unordered pair is stored once (mirrored into both triangles).
    """

    def __init__(self, a: np.ndarray, c_diag: np.ndarray):
        a = np.asarray(a, dtype=float)
        c_diag = np.asarray(c_diag, dtype=float)
        if a.shape != c_diag.shape or a.ndim != 1:
            raise ValueError("a and c_diag must be 1-d arrays of equal length")
        if not np.isfinite(c_diag).all() or (c_diag <= 0).any():
            bad = int(np.flatnonzero(~np.isfinite(c_diag) | (c_diag <= 0))[0])
            raise DegenerateDiagonalError(f"c_diag[{bad}] = {c_diag[bad]}")
        self.p = a.shape[0]
        self.a = a
        self.c = np.zeros((self.p, self.p))
        self.avail = np.zeros((self.p, self.p), dtype=bool)
        np.fill_diagonal(self.c, c_diag)
        np.fill_diagonal(self.avail, True)

    @property
    def c_diag(self) -> np.ndarray:
        return np.diagonal(self.c)

    def has_pair(self, j: int, k: int) -> bool:
        return bool(self.avail[j, k])

    def insert(self, entries) -> None:
        """Insert pooled off-diagonal entries ``(j, k, value)``."""
        for j, k, value in entries:
            if j == k:
                raise ValueError(f"diagonal pair ({j},{j}) cannot be inserted")
            if self.avail[j, k]:
                raise ValueError(f"pair ({j},{k}) already cached")
            self.c[j, k] = value
            self.c[k, j] = value
            self.avail[j, k] = True
            self.avail[k, j] = True

    def pairs_available(self, rows: np.ndarray, cols: np.ndarray) -> bool:
        if len(rows) == 0 or len(cols) == 0:
            return True
        return bool(self.avail[np.ix_(rows, cols)].all())

    def offdiag_available_count(self) -> int:
        """Number of distinct off-diagonal pairs currently cached."""
        return int(np.triu(self.avail, k=1).sum())


@dataclass
class FetchPlan:
    """Unordered covariance pairs that must be fetched before scoring."""

    pairs: list[tuple[int, int]]
    reason: str = "new_inclusion"  # new_inclusion | heuristic_candidate | block_buffer

    def __bool__(self) -> bool:
        return bool(self.pairs)


def compute_scores(cache: AggregateCache, state: BoostingState, candidates) -> np.ndarray:
    """Score statistics ``s_j = a_j - sum_k beta_k c_jk`` over ``candidates``.

    Raises :class:`MissingCovarianceError` if a required pair was never
    fetched; this always indicates a planner bug, the cache is never filled
    on demand from here.
    """
    candidates = np.asarray(candidates, dtype=np.intp)
    scores = cache.a[candidates].copy()
    included = state.included()
    if included.size:
        avail = cache.avail[np.ix_(candidates, included)]
        if not avail.all():
            row, col = np.argwhere(~avail)[0]
            raise MissingCovarianceError(int(candidates[row]), int(included[col]))
        beta = np.array([state.beta[int(k)] for k in included])
        scores -= cache.c[np.ix_(candidates, included)] @ beta
    if not np.isfinite(scores).all():
        bad = int(candidates[np.flatnonzero(~np.isfinite(scores))[0]])
        raise NonFiniteScoreError(f"score for covariate {bad} is not finite")
    return scores


def select_update(state: BoostingState, scores: np.ndarray, cache: AggregateCache,
                  nu: float) -> tuple[int, float]:
    """Pick the covariate with the largest squared score and its shrunken update.

    The update is ``nu * s / c_jj``, which is the shrunken univariable
    least-squares step for the candidate model on the current residuals
    (``c_jj`` equals ``n - 1`` under global standardization and ``n - L``
    under per-site standardization).
    """
    cand = np.asarray(state.candidate_set, dtype=np.intp)
    if cand.size == 0:
        raise EmptyCandidateSetError("no candidates to select from")
    sub = scores[cand]
    j_star = int(cand[np.argmax(sub * sub)])  # first max -> lowest index on ties
    c_jj = cache.c[j_star, j_star]
    if not np.isfinite(c_jj) or c_jj <= 0:
        raise DegenerateDiagonalError(f"c_diag[{j_star}] = {c_jj}")
    gamma_bar = nu * float(scores[j_star]) / float(c_jj)
    return j_star, gamma_bar


def apply_update(state: BoostingState, j_star: int, gamma_bar: float) -> BoostingState:
    """Add ``gamma_bar`` to one coefficient; record first-time inclusions."""
    newly = j_star not in state.beta
    state.beta[j_star] = state.beta.get(j_star, 0.0) + gamma_bar
    if newly:
        state.inclusion_order.append(j_star)
    state.step += 1
    return state


def heuristic_candidates(state: BoostingState) -> np.ndarray:
    """Covariates whose scores are worth recomputing this step.

    All included covariates, plus every covariate whose initial squared
    score is at least the smallest current squared score among the included
    ones.  With no inclusions yet, every index is a candidate.
    """
    p = state.scores.shape[0]
    included = state.included()
    if included.size == 0:
        return np.arange(p)
    threshold = np.min(state.scores[included] ** 2)
    above = np.flatnonzero(state.initial_scores ** 2 >= threshold)
    return np.union1d(included, above)


def block_extension(state: BoostingState, candidates, w: int) -> np.ndarray:
    """Extend ``candidates`` by the ``w`` best-ranked covariates outside it.

    Ranking is by initial squared score, descending, ties to the lowest
    index.  ``w == 0`` returns the candidates unchanged; ``w == p`` returns
    the full index set.
    """
    candidates = np.asarray(candidates, dtype=np.intp)
    if w < 0:
        raise ValueError("buffer w must be >= 0")
    p = state.initial_scores.shape[0]
    outside = np.setdiff1d(np.arange(p), candidates, assume_unique=False)
    if w == 0 or outside.size == 0:
        return np.sort(candidates)
    init2 = state.initial_scores[outside] ** 2
    order = np.lexsort((outside, -init2))
    extra = outside[order[: min(w, outside.size)]]
    return np.union1d(candidates, extra)


def plan_fetch(state: BoostingState, cache: AggregateCache, candidates,
               mode: str = FULL) -> FetchPlan:
    """Covariance pairs that must be fetched so ``candidates`` can be scored.

    Full and heuristic modes need exactly the missing (candidate, included)
    pairs; block mode fills in the whole missing triangle of the candidate
    set so that later steps can be served from the cache.  An empty plan
    means no data call is necessary.
    """
    candidates = np.sort(np.asarray(candidates, dtype=np.intp))
    included = state.included()
    if mode == BLOCK:
        sub = cache.avail[np.ix_(candidates, candidates)]
        rows, cols = np.triu_indices(candidates.size, k=1)
        missing = ~sub[rows, cols]
        pairs = [(int(candidates[r]), int(candidates[c]))
                 for r, c in zip(rows[missing], cols[missing])]
        reason = "block_buffer"
    else:
        pairs = []
        if included.size:
            sub = cache.avail[np.ix_(candidates, included)]
            rows, cols = np.nonzero(~sub)
            seen = set()
            for r, c in zip(rows, cols):
                j, k = int(candidates[r]), int(included[c])
                pair = (j, k) if j < k else (k, j)
                if pair not in seen:
                    seen.add(pair)
                    pairs.append(pair)
            pairs.sort()
        reason = "new_inclusion" if mode == FULL else "heuristic_candidate"
    return FetchPlan(pairs=pairs, reason=reason)


def _prepare_next(state: BoostingState, cache: AggregateCache,
                  config: BoostingConfig) -> tuple[np.ndarray, FetchPlan]:
    """Candidate set and fetch plan for the step after an update."""
    included = state.included()
    # Scores of included covariates are always computable from the cache:
    # their mutual pairs were fetched when they first became candidates.
    state.scores[included] = compute_scores(cache, state, included)
    if config.mode == FULL:
        scored = np.arange(config.p)
    elif config.mode == HEURISTIC:
        scored = heuristic_candidates(state)
    else:
        heur = heuristic_candidates(state)
        prev = np.asarray(state.candidate_set, dtype=np.intp)
        covered = (np.isin(heur, prev).all()
                   and cache.pairs_available(prev, included))
        if covered:
            # The buffer from the last block call still spans every
            # candidate the heuristic asks for; no new data needed.
            scored = prev
        else:
            scored = block_extension(state, heur, config.buffer_w)
    plan = plan_fetch(state, cache, scored, config.mode)
    return scored, plan


def run_boosting(provider, config: BoostingConfig):
    """Run componentwise boosting against an aggregate provider.

    The provider must expose ``fetch_univariable() -> (a, c_diag)``,
    ``fetch_covariances(pairs) -> iterable of (j, k, value)`` and a
    ``ledger`` recording the traffic (see ``coordinator``).  One covariance
    data call is issued at most once per step, immediately after the update,
    so a freshly included covariate triggers the fetch of the entries the
    next step needs.

    Returns the final state and the provider's ledger.
    """
    a, c_diag = provider.fetch_univariable()
    if len(a) != config.p:
        raise ValueError(f"provider returned {len(a)} covariates, config says {config.p}")
    cache = AggregateCache(a, c_diag)
    if not np.isfinite(cache.a).all():
        raise NonFiniteScoreError("univariable cross-products contain non-finite values")
    state = BoostingState.initial(cache.a)
    ledger = provider.ledger
    if config.target_model_size == 0:
        return state, ledger
    for m in range(1, config.max_steps + 1):
        j_star, gamma_bar = select_update(state, state.scores, cache, config.nu)
        apply_update(state, j_star, gamma_bar)
        scored, plan = _prepare_next(state, cache, config)
        if plan:
            cache.insert(provider.fetch_covariances(plan.pairs))
        state.scores[scored] = compute_scores(cache, state, scored)
        state.candidate_set = scored
        ledger.snapshot(step=m, model_size=len(state.inclusion_order))
        if (config.target_model_size is not None
                and len(state.inclusion_order) >= config.target_model_size):
            break
    return state, ledger
