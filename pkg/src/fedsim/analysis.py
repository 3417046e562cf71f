"""Independent oracles for the drift-estimate identities, plus compute-cost accounting.

Nothing here trains a model. These functions re-derive quantities that
:mod:`fedsim.fedcore` and :mod:`fedsim.runner` produce, by a different route,
so the two can be compared.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .data import quadratic_optimum
from .fedcore import AlgorithmSpec, Kind
from .linalg import ParamVector, cos_angle, norm2
from .models import QuadraticProblem

# drift-estimate series ----------------------------------------------------


def power_series_h(g_bar_history: Sequence[ParamVector], beta: float) -> ParamVector:
    """AdaBest server estimate as a closed power series of past pseudo-gradients.

    ``h^t = sum_{tau=1..t} beta^(t - tau + 1) g_bar^tau``, summed term by term
    with Neumaier compensation rather than through the recurrence.
    """
    if len(g_bar_history) == 0:
        raise ValueError("history must be non-empty")
    t = len(g_bar_history)
    total = np.zeros_like(np.asarray(g_bar_history[0], dtype=np.float64))
    comp = np.zeros_like(total)
    for tau, g in enumerate(g_bar_history, start=1):
        term = (beta ** (t - tau + 1)) * np.asarray(g, dtype=np.float64)
        s = total + term
        big = np.abs(total) >= np.abs(term)
        comp += np.where(big, (total - s) + term, (term - s) + total)
        total = s
    return total + comp


def recurrence_h(g_bar_history: Sequence[ParamVector], beta: float) -> ParamVector:
    """Same quantity through ``h^t = beta (h^{t-1} + g_bar^t)``, ``h^0 = 0``."""
    if len(g_bar_history) == 0:
        raise ValueError("history must be non-empty")
    h = np.zeros_like(np.asarray(g_bar_history[0], dtype=np.float64))
    for g in g_bar_history:
        h = beta * (h + g)
    return h


def relative_error(a: ParamVector, b: ParamVector) -> float:
    scale = max(norm2(a), norm2(b))
    if scale == 0.0:
        return 0.0
    return norm2(np.asarray(a) - np.asarray(b)) / scale


# norm-decrease condition ---------------------------------------------------


def theorem1_margin(h_prev: ParamVector, g_bar: ParamVector, p_count: int, s_count: int) -> float:
    """``cos(h_prev, g_bar)`` minus the threshold ``-(|P| / 2|S|) ||g_bar|| / ||h_prev||``.

    For the FedDyn server step ``h = h_prev + (|P|/|S|) g_bar`` the norm does
    not grow exactly when this margin is <= 0.
    """
    nh, ng = norm2(h_prev), norm2(g_bar)
    if nh == 0.0 or ng == 0.0:
        raise ValueError("margin undefined for zero-norm inputs")
    if s_count < 1 or p_count < 0:
        raise ValueError("need |S| >= 1 and |P| >= 0")
    threshold = -(p_count / (2.0 * s_count)) * ng / nh
    return cos_angle(h_prev, g_bar) - threshold


def feddyn_norm_decreases(h_prev: ParamVector, g_bar: ParamVector, p_count: int, s_count: int) -> bool:
    h_new = np.asarray(h_prev) + (p_count / s_count) * np.asarray(g_bar)
    return float(np.dot(h_new, h_new)) <= float(np.dot(h_prev, h_prev))


class Check(NamedTuple):
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""


def theorem1_trace_check(
    h_history: Sequence[ParamVector],
    g_bar_history: Sequence[ParamVector],
    p_counts: Sequence[int],
    s_counts: Sequence[int],
    slack: float = 1e-9,
) -> Check:
    """Every round whose ``||h||^2`` did not grow must satisfy the cosine condition.

    ``h_history[k]`` is ``h`` after round ``k`` (index 0 is the initial
    estimate); ``g_bar_history[k]`` is the pseudo-gradient of round ``k + 1``.
    """
    worst = -math.inf
    decreasing = 0
    for k, g in enumerate(g_bar_history):
        h_prev, h_new = h_history[k], h_history[k + 1]
        if norm2(h_prev) == 0.0 or norm2(g) == 0.0:
            continue
        if float(np.dot(h_new, h_new)) <= float(np.dot(h_prev, h_prev)):
            decreasing += 1
            worst = max(worst, theorem1_margin(h_prev, g, p_counts[k], s_counts[k]))
    measured = worst if decreasing else 0.0
    return Check(
        "norm-decrease-trace",
        measured <= slack,
        measured,
        slack,
        f"{decreasing} norm-decreasing rounds, max margin {measured:.3e}",
    )


def theorem1_rows_check(rows, slack: float = 1e-9) -> Check:
    """Same implication as :func:`theorem1_trace_check`, from logged norms and cosines only."""
    worst = -math.inf
    decreasing = 0
    for r in rows:
        if r.round < 1 or math.isnan(r.cos_h_g):
            continue
        if r.h_norm <= r.h_prev_norm:
            decreasing += 1
            threshold = -(r.participants / (2.0 * r.registered)) * r.gbar_norm / r.h_prev_norm
            worst = max(worst, r.cos_h_g - threshold)
    measured = worst if decreasing else 0.0
    return Check("norm-decrease-rows", measured <= slack, measured, slack, f"{decreasing} norm-decreasing rounds")


def theorem2_trace_check(rows, tail: int | None = None, tol: float = 1e-9) -> Check:
    """A still aggregate with vanishing pseudo-gradients forces ``h`` to vanish.

    Since ``theta_bar^{t-1} - theta_bar^t = h^{t-1} + g_bar^t``, the triangle
    inequality gives ``||h^{t-1}|| <= ||theta_bar step|| + ||g_bar||`` every
    round. ``rows`` are :class:`fedsim.runner.RoundMetrics` with those norms.
    """
    rows = [r for r in rows if r.round >= 1]
    if tail is not None:
        rows = rows[-tail:]
    worst = 0.0
    for r in rows:
        excess = r.h_prev_norm - (r.theta_bar_step + r.gbar_norm)
        scale = 1.0 + r.theta_bar_step + r.gbar_norm
        worst = max(worst, excess / scale)
    return Check("still-aggregate-bound", worst <= tol, worst, tol, f"{len(rows)} rounds")


def theorem2_necessity(rows, tol: float, window: int) -> Check:
    """Wherever the aggregate has settled, ``h`` must be small too.

    A round counts as settled when it closes a run of ``window`` consecutive
    rounds whose aggregate step and mean pseudo-gradient both stay below
    ``tol``. At every settled round ``||h^{t-1}||`` must be below ``10 tol``.
    """
    rows = [r for r in rows if r.round >= 1]
    run, settled, worst = 0, 0, 0.0
    for r in rows:
        still = r.theta_bar_step < tol and r.gbar_norm < tol
        run = run + 1 if still else 0
        if run >= window:
            settled += 1
            worst = max(worst, r.h_prev_norm)
    limit = 10.0 * tol
    return Check("still-aggregate-necessity", worst < limit, worst, limit, f"{settled} settled rounds")


# quadratic oracles -----------------------------------------------------------


def stationarity_residual(problems: Sequence[QuadraticProblem], theta: ParamVector) -> float:
    """Norm of the mean full gradient ``(1/n) sum_i A_i (theta - c_i)``."""
    if not problems:
        raise ValueError("no problems")
    total = np.zeros_like(np.asarray(theta, dtype=np.float64))
    for p in problems:
        total += p.curvature @ (theta - p.center)
    return norm2(total) / len(problems)


def fedavg_fixed_point(problems: Sequence[QuadraticProblem], lr: float, steps: int) -> ParamVector:
    """Fixed point of FedAvg with ``steps`` full-batch local steps and a constant ``lr``.

    Each client maps ``theta`` to ``c_i + M_i (theta - c_i)`` with
    ``M_i = (I - lr A_i)^steps``; the fixed point of their average solves
    ``(I - mean M_i) theta = mean (I - M_i) c_i``.
    """
    dim = problems[0].center.shape[0]
    eye = np.eye(dim)
    m_sum = np.zeros((dim, dim))
    rhs = np.zeros(dim)
    for p in problems:
        m = np.linalg.matrix_power(eye - lr * p.curvature, steps)
        m_sum += m
        rhs += (eye - m) @ p.center
    n = len(problems)
    return np.linalg.solve(eye - m_sum / n, rhs / n)


def global_optimum(problems: Sequence[QuadraticProblem]) -> ParamVector:
    return quadratic_optimum(list(problems))


# compute cost ------------------------------------------------------------------

# A monomial is a sorted tuple of symbols: "g" gradient, "s" scalar add,
# "m" scalar multiply, "n" parameter count, "K" local steps, "P" participants.
Monomial = tuple[str, ...]


@dataclass(frozen=True)
class CostModel:
    """Integer coefficients over monomials in the cost symbols."""

    terms: tuple[tuple[Monomial, int], ...]

    def __post_init__(self):
        for mono, c in self.terms:
            if c < 0:
                raise ValueError(f"negative coefficient for {mono}")

    @classmethod
    def from_counter(cls, counter: Counter) -> "CostModel":
        return cls(tuple(sorted((m, c) for m, c in counter.items() if c != 0)))

    def as_dict(self) -> dict[Monomial, int]:
        return dict(self.terms)

    def __add__(self, other: "CostModel") -> "CostModel":
        c = Counter(self.as_dict())
        c.update(other.as_dict())
        return CostModel.from_counter(c)

    def minus(self, other: "CostModel") -> dict[Monomial, int]:
        """Coefficientwise difference (may be negative, so returned as a dict)."""
        keys = set(self.as_dict()) | set(other.as_dict())
        a, b = self.as_dict(), other.as_dict()
        return {k: a.get(k, 0) - b.get(k, 0) for k in sorted(keys) if a.get(k, 0) != b.get(k, 0)}

    def dominated_by(self, other: "CostModel") -> bool:
        """True when every coefficient here is <= the matching one in ``other``."""
        return all(v <= 0 for v in self.minus(other).values())

    def evaluate(self, **symbols: float) -> float:
        total = 0.0
        for mono, c in self.terms:
            total += c * math.prod(symbols[s] for s in mono)
        return total


def _mono(*symbols: str) -> Monomial:
    return tuple(sorted(symbols))


def _cost(*pairs: tuple[int, Monomial]) -> CostModel:
    c: Counter = Counter()
    for coef, mono in pairs:
        c[mono] += coef
    return CostModel.from_counter(c)


NS, NM, G = _mono("n", "s"), _mono("n", "m"), _mono("g")


def _per_step(cost: CostModel) -> CostModel:
    return CostModel.from_counter(Counter({_mono("K", *m): c for m, c in cost.terms}))


# Per-line costs of the annotated algorithm, keyed by the operation.
LOCAL_STEP = _cost((1, G), (1, NS), (1, NM))  # mini-batch gradient and the SGD update
CORRECTION = {
    Kind.FEDAVG: _cost(),
    Kind.SCAFFOLDM: _cost((2, NS)),
    Kind.FEDDYN: _cost((3, NS), (1, NM)),
    Kind.ADABEST: _cost((1, NS)),
}
CLIENT_ESTIMATE = {
    Kind.FEDAVG: _cost(),
    Kind.SCAFFOLDM: _cost((2, NS), (2, NM)),
    Kind.FEDDYN: _cost((1, NS), (1, NM)),
    Kind.ADABEST: _cost((1, NS), (1, NM)),
}
AGGREGATION = _cost((1, _mono("P", "n", "s")))
SERVER_ESTIMATE = {
    Kind.FEDAVG: _cost(),
    Kind.SCAFFOLDM: _cost((2, NS), (2, NM)),
    Kind.FEDDYN: _cost((2, NS), (1, NM)),
    Kind.ADABEST: _cost((1, NS), (1, NM)),
}
CLOUD_UPDATE = {
    Kind.FEDAVG: _cost(),
    Kind.SCAFFOLDM: _cost(),
    Kind.FEDDYN: _cost((1, NS)),
    Kind.ADABEST: _cost((1, NS)),
}


def _kind(spec) -> Kind:
    return spec.kind if isinstance(spec, AlgorithmSpec) else Kind(spec)


def client_cost(spec) -> CostModel:
    kind = _kind(spec)
    return _per_step(LOCAL_STEP + CORRECTION[kind]) + CLIENT_ESTIMATE[kind]


def server_cost(spec) -> CostModel:
    kind = _kind(spec)
    return AGGREGATION + SERVER_ESTIMATE[kind] + CLOUD_UPDATE[kind]


# Reference cost formulas, one per algorithm, in LaTeX as tabulated.
CLIENT_TABLE = {
    Kind.FEDAVG: r"K (g + n s + n m)",
    Kind.SCAFFOLDM: r"K (g + n s + n m) + 2 K n s + 2n (s+m)",
    Kind.FEDDYN: r"K (g + n s + n m) + 3 K n s + K n m + n (s+m)",
    Kind.ADABEST: r"K (g + n s + n m) + K n s + n (s+m)",
}
SERVER_TABLE = {
    Kind.FEDAVG: r"|{\mathcal{P}}^t| n s",
    Kind.SCAFFOLDM: r"|{\mathcal{P}}^t| n s + 2 n s + 2 n m",
    Kind.FEDDYN: r"|{\mathcal{P}}^t| n s + 3 n s + n m",
    Kind.ADABEST: r"|{\mathcal{P}}^t| n s + 2 n s + n m",
}

_TOKEN = re.compile(r"\|P\||\d+|[A-Za-z]|[()+]")


def tokenize(formula: str) -> list[str]:
    """Split a cost formula into tokens, reading ``|{\\mathcal{P}}^t|`` as ``|P|``."""
    text = re.sub(r"\|\{\\mathcal\{P\}\}\^t\|", "|P|", formula)
    text = text.replace("|P^t|", "|P|")
    tokens = _TOKEN.findall(text)
    if "".join(tokens) != re.sub(r"\s+", "", text):
        raise ValueError(f"unrecognised characters in {formula!r}")
    return tokens


def parse_formula(formula: str) -> CostModel:
    """Expand a sum of ``coef * factors * (optional parenthesised sum)`` terms."""
    tokens = tokenize(formula)
    pos = 0
    out: Counter = Counter()

    def factors() -> tuple[int, list[str]]:
        nonlocal pos
        coef, syms = 1, []
        while pos < len(tokens) and tokens[pos] not in "+)" and tokens[pos] != "(":
            tok = tokens[pos]
            if tok.isdigit():
                coef *= int(tok)
            else:
                syms.append("P" if tok == "|P|" else tok)
            pos += 1
        return coef, syms

    while pos < len(tokens):
        coef, syms = factors()
        if pos < len(tokens) and tokens[pos] == "(":
            pos += 1
            inner: list[tuple[int, list[str]]] = []
            while tokens[pos] != ")":
                inner.append(factors())
                if tokens[pos] == "+":
                    pos += 1
            pos += 1
            for c2, s2 in inner:
                out[_mono(*syms, *s2)] += coef * c2
        else:
            out[_mono(*syms)] += coef
        if pos < len(tokens):
            if tokens[pos] != "+":
                raise ValueError(f"expected '+' in {formula!r}")
            pos += 1
    return CostModel.from_counter(out)


def _coef(c: int) -> list[str]:
    return [] if c == 1 else [str(c)]


def render_client(cost: CostModel) -> list[str]:
    """Tokens in the client-table layout: shared step cost first, then extras."""
    rest = Counter(cost.as_dict())
    base = _per_step(LOCAL_STEP)
    for m, c in base.terms:
        if rest[m] < c:
            raise ValueError("client cost lacks the shared local-step term")
        rest[m] -= c
    tokens = ["K", "(", "g", "+", "n", "s", "+", "n", "m", ")"]
    for sym in ("s", "m"):
        mono = _mono("K", "n", sym)
        if rest[mono]:
            tokens += ["+", *_coef(rest.pop(mono)), "K", "n", sym]
    ns, nm = rest.pop(NS, 0), rest.pop(NM, 0)
    if ns and ns == nm:
        tokens += ["+", *_coef(ns), "n", "(", "s", "+", "m", ")"]
    else:
        for c, sym in ((ns, "s"), (nm, "m")):
            if c:
                tokens += ["+", *_coef(c), "n", sym]
    if any(rest.values()):
        raise ValueError(f"terms outside the client-table layout: {dict(+rest)}")
    return tokens


def render_server(cost: CostModel) -> list[str]:
    """Tokens in the server-table layout: aggregation first, then ``ns`` and ``nm``."""
    rest = Counter(cost.as_dict())
    agg = _mono("P", "n", "s")
    if rest[agg] != 1:
        raise ValueError("server cost lacks the aggregation term")
    rest.pop(agg)
    tokens = ["|P|", "n", "s"]
    for mono, sym in ((NS, "s"), (NM, "m")):
        c = rest.pop(mono, 0)
        if c:
            tokens += ["+", *_coef(c), "n", sym]
    if any(rest.values()):
        raise ValueError(f"terms outside the server-table layout: {dict(+rest)}")
    return tokens


def render_text(tokens: list[str]) -> str:
    return " ".join(tokens).replace("( ", "(").replace(" )", ")")


def cost_table_checks() -> list[Check]:
    """Rendered formulas equal the reference table strings, token for token."""
    checks = []
    for side, table, model, render in (
        ("client", CLIENT_TABLE, client_cost, render_client),
        ("server", SERVER_TABLE, server_cost, render_server),
    ):
        for kind, formula in table.items():
            ours, theirs = render(model(kind)), tokenize(formula)
            same = ours == theirs and parse_formula(formula) == model(kind)
            checks.append(
                Check(f"{side}-table-{kind.value}", same, 0.0 if same else 1.0, 0.0, render_text(ours))
            )
    return checks


def cost_dominance_check() -> list[Check]:
    """Coefficientwise dominance on both client and server side.

    AdaBest is checked against FedDyn and SCAFFOLD/m, and FedAvg against all
    three others. Comparing coefficients covers every positive value of the
    symbols at once, so nothing is sampled.
    """
    pairs = [
        ("adabest<=feddyn", Kind.ADABEST, [Kind.FEDDYN]),
        ("adabest<=scaffoldm", Kind.ADABEST, [Kind.SCAFFOLDM]),
        ("fedavg<=all", Kind.FEDAVG, [Kind.SCAFFOLDM, Kind.FEDDYN, Kind.ADABEST]),
    ]
    checks = []
    for name, low, highs in pairs:
        ok, worst, notes = True, math.inf, []
        for high in highs:
            for side, model in (("client", client_cost), ("server", server_cost)):
                diff = model(high).minus(model(low))
                ok = ok and model(low).dominated_by(model(high))
                worst = min(worst, min(diff.values(), default=0))
                if len(highs) == 1:
                    notes.append(f"{side} difference {format_cost(diff)}")
        checks.append(Check(name, ok, float(worst), 0.0, "; ".join(notes)))
    return checks


def format_cost(coeffs: dict[Monomial, int] | CostModel) -> str:
    """Compact expanded form, e.g. ``2Kns + Knm``."""
    items = coeffs.terms if isinstance(coeffs, CostModel) else tuple(coeffs.items())
    order = {"K": 0, "P": 1, "g": 2, "n": 3, "s": 4, "m": 5}
    parts = []
    for mono, c in sorted(items, key=lambda mc: (-len(mc[0]), [order[s] for s in mc[0]])):
        name = "".join(sorted(mono, key=order.get)).replace("P", "|P|")
        parts.append(f"{'' if c == 1 else c}{name}")
    return " + ".join(parts) if parts else "0"


# Storage and bandwidth are not computed. Storage is the same for all four
# algorithms; per-direction bandwidth relative to FedAvg is listed here.
BANDWIDTH_RATIO = {"fedavg": 1.0, "feddyn": 1.0, "adabest": 1.0, "scaffoldm": 1.5, "scaffold": 2.0}


# report emission -----------------------------------------------------------------


def format_checks(checks: Iterable[Check]) -> str:
    lines = []
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        lines.append(f"{status} {c.name}: measured={c.measured:.3e} tol={c.tolerance:.1e} {c.detail}".rstrip())
    return "\n".join(lines)


def checks_as_keyvalue(checks: Iterable[Check]) -> str:
    lines = []
    for c in checks:
        lines.append(f"{c.name}.passed={str(c.passed).lower()}")
        lines.append(f"{c.name}.measured={c.measured!r}")
        lines.append(f"{c.name}.tolerance={c.tolerance!r}")
    return "\n".join(lines)
