"""Exact information measures over small discrete distributions.

Every quantity is an exhaustive sum over the dense joint table, in nats.
Used to check the mutual-information identities and variational bounds
behind the training objective without any network in the loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MAX_ALPHABET = 8
_NORM_TOL = 1e-12


class DistributionError(ValueError):
    pass


@dataclass(frozen=True)
class DiscreteDistribution:
    names: tuple[str, ...]
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "probs", p)
        if p.ndim != len(self.names):
            raise DistributionError(f"{p.ndim}-d table for {len(self.names)} variables")
        if len(set(self.names)) != len(self.names):
            raise DistributionError(f"duplicate variable names {self.names}")
        if any(s > MAX_ALPHABET for s in p.shape):
            raise DistributionError(f"alphabet sizes {p.shape} exceed {MAX_ALPHABET}")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise DistributionError("negative or non-finite probability")
        if abs(p.sum() - 1.0) > _NORM_TOL:
            raise DistributionError(f"probabilities sum to {p.sum()!r}, not 1")

    @property
    def sizes(self) -> dict[str, int]:
        return dict(zip(self.names, self.probs.shape))

    def axes(self, names: Sequence[str]) -> tuple[int, ...]:
        missing = [n for n in names if n not in self.names]
        if missing:
            raise DistributionError(f"unknown variables {missing}")
        return tuple(self.names.index(n) for n in names)

    def marginal(self, names: Sequence[str]) -> "DiscreteDistribution":
        keep = self.axes(names)
        drop = tuple(i for i in range(len(self.names)) if i not in keep)
        p = self.probs.sum(axis=drop)
        # summing leaves kept axes in original order; permute to the requested one
        order = sorted(keep)
        p = np.transpose(p, [order.index(i) for i in keep])
        return DiscreteDistribution(tuple(names), p)

    @classmethod
    def uniform(cls, names: Sequence[str], sizes: Sequence[int]) -> "DiscreteDistribution":
        return cls(tuple(names), np.full(tuple(sizes), 1.0 / np.prod(sizes)))


def _xlogy_ratio(p: np.ndarray, num: np.ndarray, den: np.ndarray) -> float:
    # sum of p * log(num / den) over cells with p > 0 (0 log 0 = 0)
    num, den = np.broadcast_to(num, p.shape), np.broadcast_to(den, p.shape)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(num[mask]) - np.log(den[mask]))))


def entropy(dist: DiscreteDistribution) -> float:
    p = dist.probs[dist.probs > 0]
    return float(-np.sum(p * np.log(p)))


def _check_groups(joint: DiscreteDistribution, *groups: Sequence[str]) -> None:
    seen: set[str] = set()
    for g in groups:
        overlap = seen.intersection(g)
        if overlap or len(set(g)) != len(g):
            raise DistributionError(f"variable groups overlap on {sorted(overlap) or list(g)}")
        seen.update(g)
    joint.axes(list(seen))


def _keep(table: np.ndarray, order: Sequence[str], names: Sequence[str]) -> np.ndarray:
    """Marginal of ``table`` (axes named by ``order``) onto ``names``, keeping dims for broadcasting."""
    drop = tuple(i for i, n in enumerate(order) if n not in names)
    return table.sum(axis=drop, keepdims=True)


def conditional_mi(joint: DiscreteDistribution, vars_a: Sequence[str], vars_b: Sequence[str],
                   vars_c: Sequence[str] = ()) -> float:
    """I(A; B | C) = sum p(a,b,c) log[p(a,b,c) p(c) / (p(a,c) p(b,c))]."""
    vars_a, vars_b, vars_c = list(vars_a), list(vars_b), list(vars_c)
    if not vars_a or not vars_b:
        raise DistributionError("mutual information needs two non-empty variable groups")
    _check_groups(joint, vars_a, vars_b, vars_c)
    order = vars_a + vars_b + vars_c
    pabc = joint.marginal(order).probs
    pac = _keep(pabc, order, vars_a + vars_c)
    pbc = _keep(pabc, order, vars_b + vars_c)
    pc = _keep(pabc, order, vars_c)
    return _xlogy_ratio(pabc, pabc * pc, pac * pbc)


def mutual_information(joint: DiscreteDistribution, vars_a: Sequence[str], vars_b: Sequence[str]) -> float:
    return conditional_mi(joint, vars_a, vars_b, ())


def kl_divergence(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    if p.names != q.names or p.probs.shape != q.probs.shape:
        raise DistributionError("KL needs distributions over the same axes")
    bad = (p.probs > 0) & (q.probs <= 0)
    if np.any(bad):
        raise DistributionError("support mismatch: q is zero where p is positive")
    return _xlogy_ratio(p.probs, p.probs, q.probs)


# -- the five-variable network X -> (X1, X2) -> (Y1, K2) ---------------------

NET_VARS = ("X", "X1", "X2", "Y1", "K2")


def _check_conditional(name: str, table: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    table = np.asarray(table, dtype=np.float64)
    if np.any(table < 0):
        raise DistributionError(f"{name}: negative entries")
    rows = table.sum(axis=-1)
    if np.max(np.abs(rows - 1.0)) > tol:
        raise DistributionError(f"{name}: rows do not sum to 1 (max error {np.max(np.abs(rows - 1.0)):.3g})")
    return table


@dataclass(frozen=True)
class DiscreteBayesNet:
    """Patient X emits modalities X1, X2; target Y1 and representation K2 both read (X1, X2).

    Table layout (last axis is the child variable):
    ``p_x[x]``, ``p_x1[x, x1]``, ``p_x2[x, x2]``, ``p_y1[x1, x2, y1]``, ``p_k2[x1, x2, k2]``.
    """

    p_x: np.ndarray
    p_x1: np.ndarray
    p_x2: np.ndarray
    p_y1: np.ndarray
    p_k2: np.ndarray
    _joint: DiscreteDistribution | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("p_x", "p_x1", "p_x2", "p_y1", "p_k2"):
            object.__setattr__(self, name, _check_conditional(name, getattr(self, name)))
        nx, nx1, nx2 = self.p_x.shape[0], self.p_x1.shape[1], self.p_x2.shape[1]
        if (self.p_x1.shape[0], self.p_x2.shape[0]) != (nx, nx):
            raise DistributionError("p_x1 / p_x2 must be indexed by X")
        if self.p_y1.shape[:2] != (nx1, nx2) or self.p_k2.shape[:2] != (nx1, nx2):
            raise DistributionError("p_y1 / p_k2 must be indexed by (X1, X2)")
        object.__setattr__(self, "_joint", self._assemble())

    def _assemble(self) -> DiscreteDistribution:
        p = (self.p_x[:, None, None, None, None]
             * self.p_x1[:, :, None, None, None]
             * self.p_x2[:, None, :, None, None]
             * self.p_y1[None, :, :, :, None]
             * self.p_k2[None, :, :, None, :])
        return DiscreteDistribution(NET_VARS, p)

    @property
    def joint(self) -> DiscreteDistribution:
        return self._joint

    @classmethod
    def random(cls, rng: np.random.Generator, max_alphabet: int = 4, concentration: float = 1.0,
               sizes: Sequence[int] | None = None) -> "DiscreteBayesNet":
        """Dirichlet-sampled conditional rows; alphabet sizes drawn from [2, max_alphabet]."""
        if sizes is None:
            sizes = rng.integers(2, max_alphabet + 1, size=5)
        nx, nx1, nx2, ny, nk = (int(s) for s in sizes)

        def rows(*shape):
            return rng.dirichlet(np.full(shape[-1], concentration), size=shape[:-1] or None)

        return cls(rows(nx), rows(nx, nx1), rows(nx, nx2), rows(nx1, nx2, ny), rows(nx1, nx2, nk))

    def posterior_y1(self) -> np.ndarray:
        """True p(Y1 | K2, X1) as a table indexed [k2, x1, y1]."""
        p = self.joint.marginal(["K2", "X1", "Y1"]).probs
        return p / p.sum(axis=-1, keepdims=True)

    def marginal_k2(self) -> np.ndarray:
        return self.joint.marginal(["K2"]).probs


def decomposition_terms(net: DiscreteBayesNet) -> dict[str, float]:
    """I1 = I(X1,X2;K2), I2 = I(K2;Y1|X1), I3 = I(K2;X1), I4 = I(K2;X2|X1,Y1)."""
    j = net.joint
    return {
        "I1": mutual_information(j, ["X1", "X2"], ["K2"]),
        "I2": conditional_mi(j, ["K2"], ["Y1"], ["X1"]),
        "I3": mutual_information(j, ["K2"], ["X1"]),
        "I4": conditional_mi(j, ["K2"], ["X2"], ["X1", "Y1"]),
    }


def factorization_residual(net: DiscreteBayesNet) -> float:
    """Max cell difference between p(X1,X2,Y1,K2) and p(K2|X1,X2) p(X1,X2,Y1)."""
    lhs = net.joint.marginal(["X1", "X2", "Y1", "K2"]).probs
    rhs = net.p_k2[:, :, None, :] * net.joint.marginal(["X1", "X2", "Y1"]).probs[..., None]
    return float(np.max(np.abs(lhs - rhs)))


@dataclass(frozen=True)
class BoundReport:
    i1: float
    upper: float
    i2: float
    lower: float

    @property
    def upper_gap(self) -> float:
        """upper - I1; non-negative when the compression surrogate is a valid upper bound."""
        return self.upper - self.i1

    @property
    def lower_gap(self) -> float:
        """I2 - lower; non-negative when the prediction surrogate is a valid lower bound."""
        return self.i2 - self.lower

    def holds(self, tol: float = 1e-9) -> bool:
        return self.upper_gap >= -tol and self.lower_gap >= -tol


def verify_bound_directions(net: DiscreteBayesNet, r: np.ndarray, q: np.ndarray) -> BoundReport:
    """Evaluate both variational surrogates exactly.

    ``r[k2]`` replaces the marginal p(K2) in the compression term;
    ``q[k2, x1, y1]`` replaces the posterior p(Y1 | K2, X1) in the prediction term.
    """
    r = _check_conditional("r", r)
    q = _check_conditional("q", q)
    nx1, nx2, nk = net.p_k2.shape
    ny = net.p_y1.shape[-1]
    if r.shape != (nk,) or q.shape != (nk, nx1, ny):
        raise DistributionError(f"r must be ({nk},) and q must be ({nk}, {nx1}, {ny})")
    if np.any(r <= 0):
        raise DistributionError("r must be strictly positive")
    j = net.joint

    p_x1x2k = j.marginal(["X1", "X2", "K2"]).probs
    upper = _xlogy_ratio(p_x1x2k, net.p_k2, r[None, None, :])

    p_kx1y = j.marginal(["K2", "X1", "Y1"]).probs
    p_x1y = j.marginal(["X1", "Y1"]).probs
    p_y_given_x1 = p_x1y / p_x1y.sum(axis=-1, keepdims=True)
    bad = (p_kx1y > 0) & (q <= 0)
    if np.any(bad):
        raise DistributionError("q is zero where p(K2, X1, Y1) is positive")
    lower = _xlogy_ratio(p_kx1y, q, p_y_given_x1[None, :, :])

    terms = decomposition_terms(net)
    return BoundReport(terms["I1"], upper, terms["I2"], lower)


# -- batch verification used by the CLI and the acceptance suite -------------

def random_joint(rng: np.random.Generator, sizes: Sequence[int], names: Sequence[str] | None = None) -> DiscreteDistribution:
    names = names or [f"V{i}" for i in range(len(sizes))]
    p = rng.dirichlet(np.ones(int(np.prod(sizes)))).reshape(tuple(sizes))
    p = p / p.sum()
    return DiscreteDistribution(tuple(names), p)


@dataclass
class CheckResult:
    name: str
    worst: float
    tol: float
    passed: bool
    detail: str = ""


def run_verification(n_nets: int = 50, seed: int = 0, tol: float = 1e-9,
                     n_bound_nets: int = 20, n_joints: int = 100, max_alphabet: int = 4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    worst = 0.0
    worst_fact = 0.0
    for _ in range(n_nets):
        net = DiscreteBayesNet.random(rng, max_alphabet)
        t = decomposition_terms(net)
        worst = max(worst, abs(t["I1"] - (t["I2"] + t["I3"] + t["I4"])))
        worst_fact = max(worst_fact, factorization_residual(net))
    results.append(CheckResult("decomposition |I1-(I2+I3+I4)|", worst, tol, worst <= tol, f"{n_nets} nets"))
    results.append(CheckResult("joint factorization residual", worst_fact, 1e-12, worst_fact <= 1e-12,
                               f"{n_nets} nets"))

    worst_up = worst_low = 0.0  # most negative gap, reported as a positive violation
    worst_tight = 0.0
    for _ in range(n_bound_nets):
        net = DiscreteBayesNet.random(rng, max_alphabet)
        nx1, _, nk = net.p_k2.shape
        ny = net.p_y1.shape[-1]
        r = rng.dirichlet(np.ones(nk))
        q = rng.dirichlet(np.ones(ny), size=(nk, nx1))
        rep = verify_bound_directions(net, r, q)
        worst_up = max(worst_up, -rep.upper_gap)
        worst_low = max(worst_low, -rep.lower_gap)
        tight = verify_bound_directions(net, net.marginal_k2(), net.posterior_y1())
        worst_tight = max(worst_tight, abs(tight.upper_gap), abs(tight.lower_gap))
    results.append(CheckResult("upper bound violation max(I1-upper, 0)", worst_up, tol, worst_up <= tol,
                               f"{n_bound_nets} nets, random r"))
    results.append(CheckResult("lower bound violation max(lower-I2, 0)", worst_low, tol, worst_low <= tol,
                               f"{n_bound_nets} nets, random q"))
    results.append(CheckResult("bound gap at true r, q", worst_tight, tol, worst_tight <= tol,
                               f"{n_bound_nets} nets"))

    worst_sym = worst_neg = worst_chain = 0.0
    for _ in range(n_joints):
        sizes = rng.integers(2, max_alphabet + 1, size=3)
        j = random_joint(rng, sizes, ["A", "B", "C"])
        ab, ba = mutual_information(j, ["A"], ["B"]), mutual_information(j, ["B"], ["A"])
        worst_sym = max(worst_sym, abs(ab - ba))
        vals = [entropy(j), ab, conditional_mi(j, ["A"], ["B"], ["C"]),
                kl_divergence(j.marginal(["A"]), DiscreteDistribution.uniform(["A"], [sizes[0]]))]
        worst_neg = max(worst_neg, -min(vals))
        lhs = mutual_information(j, ["A", "B"], ["C"])
        rhs = mutual_information(j, ["A"], ["C"]) + conditional_mi(j, ["B"], ["C"], ["A"])
        worst_chain = max(worst_chain, abs(lhs - rhs))
    results.append(CheckResult("MI symmetry", worst_sym, tol, worst_sym <= tol, f"{n_joints} joints"))
    results.append(CheckResult("non-negativity violation", worst_neg, tol, worst_neg <= tol, f"{n_joints} joints"))
    results.append(CheckResult("chain rule residual", worst_chain, tol, worst_chain <= tol, f"{n_joints} joints"))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'worst':>10}  {'tol':>8}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.worst:10.3e}  {r.tol:8.1e}  {'PASS' if r.passed else 'FAIL'}"
                     + (f"  ({r.detail})" if r.detail else ""))
    return "\n".join(lines)
