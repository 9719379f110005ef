"""Symbolic regression over {+, -, *, /} and distillation of trained MLPs.

The search is a deterministic hybrid:

1. bottom-up enumeration of every expression up to complexity 9 built from
   the variables and the constant 1, with semantically equal expressions
   merged on a row subsample;
2. each enumerated expression is also scored with fitted scale and offset
   constants (``a f``, ``f + b``, ``a f + b``), which cover the constants the
   target formulas need;
3. the best candidates are refit on the full probe with Levenberg-Marquardt
   and paired with a second expression fitted to their residual;
4. every pair of small enumerated expressions is ranked as a two-term linear
   fit, which reaches sums such as ``T + dt S + c dt ebar / V`` past the
   enumeration limit;
5. a seeded genetic search evolves the pool, and the complexity-indexed front
   of best MSE is returned.
"""
from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .gnn import FeatureScheme, GraphBatch, MpsModel, input_names, mps_forward

__all__ = [
    "Expr",
    "Var",
    "Const",
    "Add",
    "Sub",
    "Mul",
    "Div",
    "ProbeDataset",
    "ProbeError",
    "FrontEntry",
    "SearchBudget",
    "TEMPLATES",
    "search",
    "pareto_front",
    "fit_constants",
    "check_template",
    "build_probe_dataset",
    "choose_expression",
    "distill_scheme",
    "write_front_csv",
]

DIV_EPS = 1e-9
_OPS = ("+", "-", "*", "/")
_COMMUTATIVE = {"+", "*"}


class ProbeError(ValueError):
    pass


# ---------------------------------------------------------------- expressions

class Expr:
    """Immutable expression tree; leaves are ``var`` (column index) or ``const``."""

    __slots__ = ("op", "left", "right", "value", "_key")

    def __init__(self, op, left=None, right=None, value=None):
        if op in _OPS:
            if not isinstance(left, Expr) or not isinstance(right, Expr):
                raise TypeError(f"operator {op!r} needs two Expr children")
        elif op == "var":
            if int(value) != value or value < 0:
                raise ValueError(f"variable index must be a non-negative int, got {value!r}")
            value = int(value)
        elif op == "const":
            value = float(value)
            if not math.isfinite(value):
                raise ValueError("constants must be finite")
        else:
            raise ValueError(f"unknown node {op!r}")
        self.op, self.left, self.right, self.value = op, left, right, value
        self._key = None

    # structure -------------------------------------------------------------
    @property
    def is_leaf(self):
        return self.op in ("var", "const")

    def key(self):
        if self._key is None:
            if self.is_leaf:
                self._key = (self.op, self.value)
            else:
                self._key = (self.op, self.left.key(), self.right.key())
        return self._key

    def __eq__(self, other):
        return isinstance(other, Expr) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def complexity(self) -> int:
        if self.is_leaf:
            return 1
        return 1 + self.left.complexity() + self.right.complexity()

    def variables(self) -> set[int]:
        if self.op == "var":
            return {self.value}
        if self.op == "const":
            return set()
        return self.left.variables() | self.right.variables()

    def constants(self) -> list[float]:
        if self.op == "const":
            return [self.value]
        if self.op == "var":
            return []
        return self.left.constants() + self.right.constants()

    def with_constants(self, values) -> "Expr":
        it = iter(list(values))

        def rebuild(e):
            if e.op == "const":
                return Const(next(it))
            if e.op == "var":
                return e
            return Expr(e.op, rebuild(e.left), rebuild(e.right))

        return rebuild(self)

    # evaluation ------------------------------------------------------------
    def evaluate(self, X) -> np.ndarray:
        """Values on the rows of ``X``; raises ``ZeroDivisionError`` on a protected division."""
        X = np.asarray(X, dtype=np.float64)
        if self.op == "var":
            return X[:, self.value]
        if self.op == "const":
            return np.full(X.shape[0], self.value)
        a = self.left.evaluate(X)
        b = self.right.evaluate(X)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return a * b
        if np.any(np.abs(b) < DIV_EPS):
            raise ZeroDivisionError("denominator within 1e-9 of zero")
        return a / b

    def safe_evaluate(self, X):
        """Like :meth:`evaluate` but returns ``None`` when the expression is invalid on ``X``."""
        try:
            with np.errstate(all="ignore"):
                y = self.evaluate(X)
        except ZeroDivisionError:
            return None
        return y if np.all(np.isfinite(y)) else None

    # printing --------------------------------------------------------------
    def to_string(self, names=None) -> str:
        """Infix with explicit parentheses; variables print as ``v<i>`` unless ``names`` given."""
        if self.op == "var":
            return names[self.value] if names is not None else f"v{self.value}"
        if self.op == "const":
            return repr(self.value)
        return f"({self.left.to_string(names)} {self.op} {self.right.to_string(names)})"

    def __repr__(self):
        return f"Expr({self.to_string()})"

    # simplification ----------------------------------------------------------
    def canonical(self) -> "Expr":
        """Fold constant subtrees and order the operands of ``+`` and ``*``."""
        if self.is_leaf:
            return self
        a, b = self.left.canonical(), self.right.canonical()
        if a.op == "const" and b.op == "const":
            if self.op == "/" and abs(b.value) < DIV_EPS:
                return Expr("/", a, b)
            v = {"+": a.value + b.value, "-": a.value - b.value,
                 "*": a.value * b.value, "/": a.value / b.value if b.value else 0.0}[self.op]
            if math.isfinite(v):
                return Const(v)
        if self.op in _COMMUTATIVE and _order_key(b) < _order_key(a):
            a, b = b, a
        return Expr(self.op, a, b)


def _order_key(e: Expr):
    return repr(e.key())


def Var(i):
    return Expr("var", value=i)


def Const(v):
    return Expr("const", value=v)


def Add(a, b):
    return Expr("+", a, b)


def Sub(a, b):
    return Expr("-", a, b)


def Mul(a, b):
    return Expr("*", a, b)


def Div(a, b):
    return Expr("/", a, b)


def parse_expression(text: str) -> Expr:
    """Parse the fully parenthesized infix produced by :meth:`Expr.to_string`."""
    tokens = text.replace("(", " ( ").replace(")", " ) ").split()
    pos = 0

    def atom():
        nonlocal pos
        tok = tokens[pos]
        pos += 1
        if tok == "(":
            left = atom()
            op = tokens[pos]
            pos += 1
            right = atom()
            if tokens[pos] != ")":
                raise ValueError(f"expected ')' at token {pos}")
            pos += 1
            return Expr(op, left, right)
        if tok.startswith("v") and tok[1:].isdigit():
            return Var(int(tok[1:]))
        return Const(float(tok))

    out = atom()
    if pos != len(tokens):
        raise ValueError(f"trailing tokens after position {pos}")
    return out


# ------------------------------------------------------------------ constants

def _mse(pred, y):
    return float(np.mean((pred - y) ** 2))


def _affine_wrap(expr: Expr, a: float, b: float) -> Expr:
    out = expr
    if a != 1.0:
        out = Mul(Const(a), out)
    if b != 0.0:
        out = Add(out, Const(b))
    return out


def fit_constants(expr: Expr, X, y, iters: int = 50):
    """Levenberg-Marquardt on the constants of ``expr``; returns ``(expr, mse)``.

    Invalid expressions (protected division, non-finite values) get ``inf``.
    """
    theta = np.array(expr.constants(), dtype=np.float64)
    f0 = expr.safe_evaluate(X)
    if f0 is None:
        return expr, math.inf
    if theta.size == 0:
        return expr, _mse(f0, y)

    def resid(th):
        v = expr.with_constants(th).safe_evaluate(X)
        return None if v is None else v - y

    r = f0 - y
    cost = float(r @ r)
    lam = 1e-3
    for _ in range(iters):
        J = np.empty((len(y), theta.size))
        ok = True
        for k in range(theta.size):
            h = 1e-7 * max(1.0, abs(theta[k]))
            th = theta.copy()
            th[k] += h
            rk = resid(th)
            if rk is None:
                ok = False
                break
            J[:, k] = (rk - r) / h
        if not ok:
            break
        g = J.T @ r
        H = J.T @ J
        improved = False
        for _ in range(10):
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                step = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = theta + step
            rc = resid(cand) if np.all(np.isfinite(cand)) else None
            if rc is not None:
                c = float(rc @ rc)
                if c < cost:
                    theta, r, cost = cand, rc, c
                    lam = max(lam / 3, 1e-12)
                    improved = True
                    break
            lam *= 10
        if not improved or cost == 0.0:
            break
    return expr.with_constants(theta), cost / len(y)


# -------------------------------------------------------------------- probes

@dataclass
class ProbeDataset:
    X: np.ndarray
    y: np.ndarray
    names: list[str]
    provenance: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise ValueError("probe X must be (rows, vars) and match len(y)")
        if self.X.shape[1] != len(self.names):
            raise ValueError("one name per input column required")

    @property
    def rows(self):
        return len(self.y)

    def bounds(self):
        return self.X.min(axis=0), self.X.max(axis=0)


def _mlp_for(model: MpsModel, which: str):
    if which == "agg1":
        return model.layers[0]["agg"], 0, "agg"
    if which == "up":
        return model.layers[0]["up"], 0, "up"
    if which == "agg2":
        if model.agg2 is None:
            raise ValueError("model has no 2-hop aggregator")
        return model.agg2, 0, "agg2"
    for prefix, kind in (("up-layer-", "up"), ("agg-layer-", "agg")):
        if which.startswith(prefix):
            k = int(which[len(prefix):]) - 1
            if not 0 <= k < model.L:
                raise ValueError(f"layer {k + 1} out of range 1..{model.L}")
            return model.layers[k][kind], k, kind
    raise ValueError(f"unknown MLP selector {which!r}")


def build_probe_dataset(model: MpsModel, which: str, dataset, rows: int = 2000,
                        seed: int = 0, checkpoint: str | None = None) -> ProbeDataset:
    """Input/output pairs of one MLP harvested from forward passes over ``dataset``.

    ``which`` is ``agg1``, ``agg2``, ``up``, ``agg-layer-k`` or ``up-layer-k``
    (1-based). Rows are a seeded subsample without replacement of every
    harvested row; outputs are exact evaluations of the MLP.
    """
    mlp, layer, kind = _mlp_for(model, which)
    key_in = {"agg": "agg_in", "up": "up_in", "agg2": "agg2_in"}[kind]
    chunks = []
    samples = dataset.samples
    for start in range(0, len(samples), 64):
        batch = GraphBatch.concat([s.batch for s in samples[start:start + 64]])
        trace: list = []
        mps_forward(model, batch, trace)
        chunks.append(trace[layer][key_in])
    X = np.concatenate(chunks)
    if len(X) < rows:
        raise ProbeError(f"only {len(X)} rows available for {which}, {rows} requested")
    rng = np.random.default_rng(seed)
    X = X[np.sort(rng.choice(len(X), size=rows, replace=False))]
    y = mlp.forward_numpy(X)[:, 0]
    names = input_names(model.scheme, layer)[kind]
    return ProbeDataset(X, y, list(names), {"mlp": which, "checkpoint": checkpoint,
                                            "units": "normalized model units", "seed": seed})


# ------------------------------------------------------------------- search

@dataclass
class SearchBudget:
    max_complexity: int = 9
    enum_rows: int = 64
    keep_per_complexity: int = 6
    pair_candidates: int = 24
    pair_top: int = 12
    generations: int = 40
    population: int = 60
    seed: int = 0


@dataclass
class FrontEntry:
    complexity: int
    mse: float
    expr: Expr

    def row(self):
        return self.complexity, self.mse, self.expr.to_string()


def _key_rows(F):
    with np.errstate(all="ignore"):
        return [row.tobytes() for row in F.astype(np.float32)]


class _Enumerator:
    """Bottom-up enumeration with semantic deduplication on a row subsample."""

    def __init__(self, Xs, ys, max_complexity, keep):
        self.Xs, self.ys = Xs, ys
        self.R = len(ys)
        self.keep = keep
        self.max_c = max_complexity
        n_var = Xs.shape[1]
        leaves = [Var(i) for i in range(n_var)] + [Const(1.0)]
        self.levels = {1: np.array([lf.evaluate(Xs) for lf in leaves])}
        self.recipes = {1: [("leaf", lf) for lf in leaves]}
        self.seen = set(_key_rows(self.levels[1]))
        # best (mse, tiebreak, complexity, mode, size, index) per final complexity
        self.best: dict[int, list] = {}
        self._counter = 0
        y = ys
        self.y_mean = y.mean()
        self.y_var = y.var()
        self.Syy = float(y @ y)
        self._score(1, self.levels[1], np.arange(len(leaves)))

    def expr_of(self, size, idx) -> Expr:
        rec = self.recipes[size][idx]
        if rec[0] == "leaf":
            return rec[1]
        op, s1, i1, s2, i2 = rec
        return Expr(op, self.expr_of(s1, i1), self.expr_of(s2, i2))

    def _push(self, cplx, mse, size, idx, mode):
        heap = self.best.setdefault(cplx, [])
        self._counter += 1
        item = (-mse, -self._counter, size, idx, mode)
        if len(heap) < self.keep:
            heapq.heappush(heap, item)
        elif -heap[0][0] > mse:
            heapq.heapreplace(heap, item)

    def _score(self, size, F, idx, recipe=None):
        """Score rows of ``F`` raw / scaled / offset / affine and keep the best per complexity.

        ``recipe(t)`` materializes row ``t`` of an unstored level and returns its key.
        """
        y = self.ys
        R = self.R
        with np.errstate(all="ignore"):
            Sfy = F @ y
            Sff = np.einsum("ij,ij->i", F, F)
            Sf = F.sum(axis=1)
            raw = (self.Syy - 2 * Sfy + Sff) / R
            scaled = np.where(Sff > 0, (self.Syy - Sfy ** 2 / Sff) / R, np.inf)
            mf = Sf / R
            offset = raw - (self.y_mean - mf) ** 2
            var_f = Sff / R - mf ** 2
            cov = Sfy / R - mf * self.y_mean
            affine = np.where(var_f > 1e-14 * np.maximum(1.0, Sff / R),
                              self.y_var - cov ** 2 / var_f, np.inf)
        for mode, vals, extra in (("raw", raw, 0), ("scale", scaled, 2),
                                  ("offset", offset, 2), ("affine", affine, 4)):
            vals = np.where(np.isfinite(vals), np.maximum(vals, 0.0), np.inf)
            k = min(self.keep, len(vals))
            top = np.argpartition(vals, k - 1)[:k] if len(vals) > k else np.arange(len(vals))
            heap = self.best.get(size + extra if isinstance(size, int) else size[1] + extra, [])
            for t in top[np.argsort(vals[top], kind="stable")]:
                v = float(vals[t])
                if not np.isfinite(v):
                    continue
                if len(heap) >= self.keep and -heap[0][0] <= v:
                    break
                key = int(idx[t]) if recipe is None else recipe(int(t))
                cplx = (size if isinstance(size, int) else size[1]) + extra
                self._push(cplx, v, size, key, mode)
                heap = self.best[cplx]

    def _combos(self, size):
        for s1 in range(1, size - 1, 2):
            s2 = size - 1 - s1
            if s1 not in self.levels or s2 not in self.levels:
                continue
            for op in _OPS:
                if op in _COMMUTATIVE and s1 > s2:
                    continue
                yield op, s1, s2

    def run(self, store_limit=7):
        for size in range(3, self.max_c + 1, 2):
            store = size <= store_limit
            new_rows, new_rec = [], []
            for op, s1, s2 in self._combos(size):
                A, B = self.levels[s1], self.levels[s2]
                nb = len(B)
                chunk = max(1, 100_000 // max(nb, 1))
                for a0 in range(0, len(A), chunk):
                    Ac = A[a0:a0 + chunk]
                    with np.errstate(all="ignore"):
                        if op == "+":
                            F = Ac[:, None, :] + B[None, :, :]
                        elif op == "-":
                            F = Ac[:, None, :] - B[None, :, :]
                        elif op == "*":
                            F = Ac[:, None, :] * B[None, :, :]
                        else:
                            bad = np.any(np.abs(B) < DIV_EPS, axis=1)
                            F = Ac[:, None, :] / np.where(np.abs(B) < DIV_EPS, 1.0, B)[None, :, :]
                            F[:, bad, :] = np.nan
                    ia, ib = np.meshgrid(np.arange(a0, a0 + len(Ac)), np.arange(nb), indexing="ij")
                    F = F.reshape(-1, self.R)
                    ia, ib = ia.ravel(), ib.ravel()
                    valid = np.all(np.isfinite(F), axis=1)
                    if op in _COMMUTATIVE and s1 == s2:
                        valid &= ib >= ia
                    # constant results are covered by the constant leaf with fitted values
                    valid &= np.ptp(F, axis=1) > 1e-12 * (1.0 + np.abs(F[:, 0]))
                    F, ia, ib = F[valid], ia[valid], ib[valid]
                    if not len(F):
                        continue
                    if store:
                        keep = []
                        for j, kb in enumerate(_key_rows(F)):
                            if kb not in self.seen:
                                self.seen.add(kb)
                                keep.append(j)
                        keep = np.array(keep, dtype=np.int64)
                        F, ia, ib = F[keep], ia[keep], ib[keep]
                        if not len(F):
                            continue
                        base = sum(len(r) for r in new_rows)
                        new_rows.append(F)
                        new_rec.extend((op, s1, int(i), s2, int(j)) for i, j in zip(ia, ib))
                        self._score_pending(size, F, base)
                    else:
                        self._score_unstored(size, F, op, s1, ia, s2, ib)
            if store:
                self.levels[size] = np.concatenate(new_rows) if new_rows else np.empty((0, self.R))
                self.recipes[size] = new_rec
        self._finalize_unstored()

    # stored candidates are scored with their final indices
    def _score_pending(self, size, F, base):
        self._score(size, F, base + np.arange(len(F)))

    # unstored (largest) candidates only record recipes for rows that enter a heap
    def _score_unstored(self, size, F, op, s1, ia, s2, ib):
        recs = self.recipes.setdefault(("u", size), [])

        def recipe(t):
            recs.append((op, s1, int(ia[t]), s2, int(ib[t])))
            return len(recs) - 1

        self._score(("u", size), F, None, recipe)

    def _finalize_unstored(self):
        pass

    def candidates(self):
        """Yield ``(expr, mode)`` for everything kept in the heaps."""
        for cplx in sorted(self.best):
            for _, _, size, idx, mode in sorted(self.best[cplx], reverse=True):
                if isinstance(size, tuple):
                    op, s1, i1, s2, i2 = self.recipes[size][idx]
                    expr = Expr(op, self.expr_of(s1, i1), self.expr_of(s2, i2))
                else:
                    expr = self.expr_of(size, idx)
                yield expr, mode


def _with_mode(expr: Expr, mode: str, X, y):
    """Attach fitted scale/offset constants by least squares, then refine with LM."""
    f = expr.safe_evaluate(X)
    if f is None:
        return None
    if expr.op == "const":
        return Const(float(np.mean(y)))
    if mode == "raw":
        cand = expr
    elif mode == "scale":
        ff = float(f @ f)
        if ff == 0:
            return None
        cand = Mul(Const(float(f @ y) / ff), expr)
    elif mode == "offset":
        cand = Add(expr, Const(float(np.mean(y - f))))
    else:
        A = np.stack([f, np.ones_like(f)], axis=1)
        (a, b), *_ = np.linalg.lstsq(A, y, rcond=None)
        cand = Add(Mul(Const(float(a)), expr), Const(float(b)))
    return cand


def _consider(pool: dict, expr: Expr, X, y, refine=True):
    if expr is None:
        return
    if refine and expr.constants():
        expr, mse = fit_constants(expr, X, y)
    else:
        f = expr.safe_evaluate(X)
        mse = math.inf if f is None else _mse(f, y)
    if not math.isfinite(mse):
        return
    c = expr.complexity()
    cur = pool.get(c)
    if cur is None or mse < cur[0] or (mse == cur[0] and expr.to_string() < cur[1].to_string()):
        pool[c] = (mse, expr)


def pareto_front(pool: dict) -> list[FrontEntry]:
    """Keep entries whose MSE is strictly below every lower-complexity entry."""
    front, best = [], math.inf
    for c in sorted(pool):
        mse, expr = pool[c]
        if mse < best:
            front.append(FrontEntry(c, mse, expr))
            best = mse
    return front


def _random_tree(rng, n_var, depth):
    if depth == 0 or rng.random() < 0.3:
        if rng.random() < 0.2:
            return Const(float(np.round(rng.normal(), 3)) or 1.0)
        return Var(int(rng.integers(n_var)))
    return Expr(_OPS[int(rng.integers(4))], _random_tree(rng, n_var, depth - 1),
                _random_tree(rng, n_var, depth - 1))


def _subtrees(e: Expr, path=()):
    yield path, e
    if not e.is_leaf:
        yield from _subtrees(e.left, path + (0,))
        yield from _subtrees(e.right, path + (1,))


def _replace(e: Expr, path, new: Expr) -> Expr:
    if not path:
        return new
    if path[0] == 0:
        return Expr(e.op, _replace(e.left, path[1:], new), e.right)
    return Expr(e.op, e.left, _replace(e.right, path[1:], new))


def _strip_affine(e: Expr) -> Expr:
    """Drop an outer ``a * f + b`` wrapper produced by linear scaling."""
    if e.op == "+" and e.right.op == "const":
        e = e.left
    if e.op == "*" and e.left.op == "const":
        e = e.right
    return e


def _genetic(pool, X, y, budget: SearchBudget, n_var, rng):
    entries = sorted(pool.values(), key=lambda t: (t[0], t[1].complexity()))
    popn = [_strip_affine(e) for _, e in entries[:budget.population]]
    if not popn:
        return
    for _ in range(budget.generations):
        children = []
        for _ in range(budget.population):
            r = rng.random()
            a = popn[int(rng.integers(len(popn)))]
            if r < 0.35:
                b = popn[int(rng.integers(len(popn)))]
                pa = list(_subtrees(a))
                pb = list(_subtrees(b))
                path, _ = pa[int(rng.integers(len(pa)))]
                _, sub = pb[int(rng.integers(len(pb)))]
                child = _replace(a, path, sub)
            elif r < 0.65:
                pa = list(_subtrees(a))
                path, _ = pa[int(rng.integers(len(pa)))]
                child = _replace(a, path, _random_tree(rng, n_var, 2))
            else:
                b = popn[int(rng.integers(len(popn)))]
                child = Expr("+" if rng.random() < 0.6 else "*", a, b)
            if child.complexity() > 31:
                continue
            children.append(child.canonical())
        scored = []
        for ch in children:
            for mode in ("raw", "affine"):
                cand = _with_mode(ch, mode, X, y)
                before = dict(pool)
                _consider(pool, cand, X, y, refine=False)
                if pool != before:
                    scored.append(ch)
        survivors = sorted(pool.values(), key=lambda t: (t[0], t[1].complexity()))
        popn = [_strip_affine(e) for _, e in survivors[:budget.population // 2]] + scored
        popn = popn[:budget.population] or popn


def search(probe: ProbeDataset, budget: SearchBudget | int | None = None) -> list[FrontEntry]:
    """Pareto front of expressions fitted to ``probe``; deterministic for a fixed seed."""
    if budget is None:
        budget = SearchBudget()
    elif isinstance(budget, int):
        if budget <= 0:
            raise ValueError("budget must be positive")
        budget = SearchBudget(generations=budget)
    X, y = probe.X, probe.y
    rng = np.random.default_rng(budget.seed)
    n_sub = min(budget.enum_rows, len(y))
    sub = np.sort(rng.choice(len(y), size=n_sub, replace=False))
    en = _Enumerator(X[sub], y[sub], budget.max_complexity, budget.keep_per_complexity)
    en.run(store_limit=min(7, budget.max_complexity - 2))

    pool: dict[int, tuple[float, Expr]] = {}
    _consider(pool, Const(float(np.mean(y))), X, y)
    bases = []
    for expr, mode in en.candidates():
        _consider(pool, _with_mode(expr, mode, X, y), X, y)
        if expr not in bases:
            bases.append(expr)
    _pair_residuals(pool, en, bases, X, y, budget)
    _pair_exhaustive(pool, en, X, y, budget)
    _genetic(pool, X, y, budget, X.shape[1], rng)
    return pareto_front(pool)


def _pair_residuals(pool, en: _Enumerator, bases, X, y, budget):
    """Fit ``y ~ a f + c g + b`` with ``g`` drawn from all stored enumerated expressions."""
    ranked = []
    for e in bases:
        f = e.safe_evaluate(X)
        if f is None or np.ptp(f) == 0:
            continue
        A = np.stack([f, np.ones_like(f)], axis=1)
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        ranked.append((_mse(A @ coef, y), e.complexity(), e.to_string(), e))
    ranked.sort(key=lambda t: t[:3])
    ys = en.ys
    stored = [(s, en.levels[s]) for s in sorted(k for k in en.levels if isinstance(k, int)) if s <= 5]
    if not stored:
        return
    G = np.concatenate([F for _, F in stored])
    owner = [(s, i) for s, F in stored for i in range(len(F))]
    Xs = en.Xs
    mg = G.mean(axis=1)
    Gc = G - mg[:, None]
    vg = np.einsum("ij,ij->i", Gc, Gc)
    for _, _, _, e in ranked[:budget.pair_candidates]:
        fs = e.safe_evaluate(Xs)
        if fs is None:
            continue
        A = np.stack([fs, np.ones_like(fs)], axis=1)
        coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
        r = ys - A @ coef
        # regress the residual on f and g jointly: project g off f first
        fc = fs - fs.mean()
        ff = float(fc @ fc)
        Gp = Gc - np.outer(Gc @ fc / ff, fc) if ff > 0 else Gc
        vp = np.einsum("ij,ij->i", Gp, Gp)
        with np.errstate(all="ignore"):
            gain = np.where(vp > 1e-12 * np.maximum(vg, 1e-300), (Gp @ r) ** 2 / vp, -np.inf)
        for t in np.argsort(-gain, kind="stable")[:3]:
            s, i = owner[int(t)]
            g = en.expr_of(s, i)
            for cand in (Add(e, g), Sub(e, g),
                         Add(Add(Mul(Const(1.0), e), Mul(Const(1.0), g)), Const(0.0)),
                         Add(e, Mul(Const(1.0), g)), Add(Mul(Const(1.0), e), g)):
                _consider(pool, cand, X, y)


def _pair_exhaustive(pool, en: _Enumerator, X, y, budget, max_size=5):
    """Score ``y ~ a f + c g + b`` for every pair of stored expressions up to ``max_size``.

    The two-term fit is closed form from the Gram matrix of the centered
    subsample rows, so all pairs are ranked at once; the best ``pair_top`` are
    refit on the full probe in their one- and two-constant shapes.
    """
    sizes = sorted(k for k in en.levels if isinstance(k, int) and k <= max_size)
    if not sizes:
        return
    G = np.concatenate([en.levels[k] for k in sizes])
    owner = [(k, i) for k in sizes for i in range(len(en.levels[k]))]
    ok = np.flatnonzero(np.all(np.isfinite(G), axis=1) & (np.ptp(G, axis=1) > 0))
    if len(ok) < 2:
        return
    Gc = G[ok] - G[ok].mean(axis=1, keepdims=True)
    yc = en.ys - en.ys.mean()
    M = Gc @ Gc.T
    b = Gc @ yc
    d = np.diag(M).copy()
    best: list[tuple[float, int, int]] = []
    block = 256
    for lo in range(0, len(ok), block):
        hi = min(lo + block, len(ok))
        gij = M[lo:hi]
        det = d[lo:hi, None] * d[None, :] - gij ** 2
        with np.errstate(all="ignore"):
            expl = (b[lo:hi, None] ** 2 * d[None, :] - 2 * b[lo:hi, None] * b[None, :] * gij
                    + b[None, :] ** 2 * d[lo:hi, None]) / det
        # drop the lower triangle and near-collinear pairs
        cols = np.arange(len(ok))
        bad = (cols[None, :] <= np.arange(lo, hi)[:, None]) | ~(det > 1e-9 * d[lo:hi, None] * d[None, :])
        expl[bad] = -np.inf
        flat = expl.ravel()
        k = min(budget.pair_top, flat.size)
        top = np.argpartition(-flat, k - 1)[:k]
        best.extend((-float(flat[t]), lo + int(t) // len(ok), int(t) % len(ok)) for t in top)
    best.sort()
    for neg, i, j in best[:budget.pair_top]:
        if not math.isfinite(neg):
            break
        f = en.expr_of(*owner[int(ok[i])])
        g = en.expr_of(*owner[int(ok[j])])
        for cand in (Add(f, Mul(Const(1.0), g)), Add(Mul(Const(1.0), f), g),
                     Add(Add(Mul(Const(1.0), f), Mul(Const(1.0), g)), Const(0.0))):
            _consider(pool, cand, X, y)


def choose_expression(front: list[FrontEntry], tolerance: float = math.inf) -> FrontEntry:
    """Front member with the sharpest MSE drop per added node.

    The score is ``-d log(mse) / d complexity`` against the previous member;
    ties go to the simpler expression. ``tolerance`` optionally restricts the
    choice to members within that factor of the best MSE (or below 1e-24).
    """
    best = min(e.mse for e in front)
    good = [i for i, e in enumerate(front) if e.mse <= tolerance * best or e.mse < 1e-24]
    if len(good) == 1 or good == [0]:
        return front[good[0]]

    def score(i):
        if i == 0:
            return 0.0
        prev = front[i - 1]
        lo = max(front[i].mse, 1e-300)
        return -(math.log(lo) - math.log(max(prev.mse, 1e-300))) / (front[i].complexity - prev.complexity)

    return front[max(good, key=lambda i: (score(i), -front[i].complexity))]


# ----------------------------------------------------------------- templates

@dataclass(frozen=True)
class Template:
    """A form linear in its constants: ``sum_k c_k basis_k(vars)``."""

    name: str
    variables: tuple[str, ...]
    basis: tuple
    expected: tuple[float, ...]

    def design(self, cols: dict[str, np.ndarray]) -> np.ndarray:
        return np.stack([b(cols) for b in self.basis], axis=1)


def _flux(c):
    return c["A"] / c["delta"] * (c["T_N"] - c["T_P"])


TEMPLATES = {
    "FLUX": Template("FLUX", ("T_N", "T_P", "A", "delta"), (_flux,), (1.0,)),
    "FLUX-SIMPLIFIED": Template("FLUX-SIMPLIFIED", ("beta",), (lambda c: c["beta"],), (1.0,)),
    "UPDATE": Template("UPDATE", ("T", "S", "dt", "V", "ebar"),
                       (lambda c: c["T"], lambda c: c["dt"] / c["V"] * c["ebar"], lambda c: c["dt"] * c["S"]),
                       (1.0, 1.0, 1.0)),
    "UPDATE-SIMPLIFIED": Template("UPDATE-SIMPLIFIED", ("T", "dtV_ebar", "dtS"),
                                  (lambda c: c["T"], lambda c: c["dtV_ebar"], lambda c: c["dtS"]),
                                  (1.0, 1.0, 1.0)),
    "HALF-FLUX": Template("HALF-FLUX", ("T_Q", "T_P"), (lambda c: 0.5 * (c["T_Q"] - c["T_P"]),), (1.0,)),
    "MIDPOINT": Template("MIDPOINT", ("T", "S", "dt", "V", "ebar"),
                         (lambda c: c["T"], lambda c: 0.5 * c["dt"] / c["V"] * c["ebar"],
                          lambda c: c["dt"] * c["S"]),
                         (1.0, 1.0, 1.0)),
}


def check_template(expr: Expr, template: str | Template, tolerance: float, probe: ProbeDataset,
                   n_points: int = 100_000, seed: int = 0) -> dict:
    """Compare ``expr`` with a registered template on random points of the probe box.

    Template constants are fitted by least squares on the points; the match
    holds when ``max |expr - template| / max |template| < tolerance``.
    """
    tpl = TEMPLATES[template] if isinstance(template, str) else template
    missing = [v for v in tpl.variables if v not in probe.names]
    if missing:
        return {"template": tpl.name, "match": False, "fittedConstants": [],
                "reason": f"probe lacks variables {missing}"}
    lo, hi = probe.bounds()
    rng = np.random.default_rng(seed)
    P = rng.uniform(lo, hi, size=(n_points, len(lo)))
    e = expr.safe_evaluate(P)
    if e is None:
        return {"template": tpl.name, "match": False, "fittedConstants": [],
                "reason": "expression invalid on the probe domain"}
    cols = {n: P[:, i] for i, n in enumerate(probe.names)}
    D = tpl.design(cols)
    coef, *_ = np.linalg.lstsq(D, e, rcond=None)
    t = D @ coef
    scale = float(np.max(np.abs(t)))
    dev = float(np.max(np.abs(e - t))) / scale if scale > 0 else math.inf
    return {"template": tpl.name, "match": bool(dev < tolerance), "maxRelativeDeviation": dev,
            "fittedConstants": [float(c) for c in coef], "expectedConstants": list(tpl.expected)}


# ----------------------------------------------------------------- distill

def _selectors(model: MpsModel):
    if model.L == 1:
        sel = [("agg1", "agg"), ("up", "up")]
        if model.agg2 is not None:
            sel.append(("agg2", "agg2"))
        return sel
    out = []
    for k in range(1, model.L + 1):
        out += [(f"agg-layer-{k}", "agg"), (f"up-layer-{k}", "up")]
    return out


def _templates_for(model: MpsModel, kind: str, layer: int):
    simple = model.scheme is FeatureScheme.SIMPLIFIED
    if kind == "agg":
        return ["FLUX-SIMPLIFIED"] if simple else ["FLUX"]
    if kind == "agg2":
        return ["HALF-FLUX"]
    if simple:
        return ["UPDATE-SIMPLIFIED"]
    return ["UPDATE", "MIDPOINT"] if layer == 0 else ["UPDATE"]


def distill_scheme(model: MpsModel, dataset, rows: int = 2000, budget: SearchBudget | None = None,
                   tolerance: float = 0.05, out_dir=None, checkpoint: str | None = None) -> dict:
    """Probe, search and template-check every MLP of a 1- or 2-layer model."""
    if model.L not in (1, 2):
        raise ValueError("distillation supports 1- or 2-layer models")
    budget = budget or SearchBudget()
    report = {"architecture": model.architecture(), "mlps": {}, "recovered": True}
    chosen_strings = {}
    for which, kind in _selectors(model):
        layer = 0 if which in ("agg1", "up", "agg2") else int(which.rsplit("-", 1)[1]) - 1
        probe = build_probe_dataset(model, which, dataset, rows, seed=budget.seed, checkpoint=checkpoint)
        front = search(probe, budget)
        pick = choose_expression(front)
        below = [e for e in front if e.mse < 1e-4]
        checks = [check_template(pick.expr, t, tolerance, probe, seed=budget.seed)
                  for t in _templates_for(model, kind, layer)]
        entry = {
            "names": probe.names,
            "front": [{"complexity": e.complexity, "mse": e.mse, "expression": e.expr.to_string(),
                       "readable": e.expr.to_string(probe.names)} for e in front],
            "chosen": {"complexity": pick.complexity, "mse": pick.mse,
                       "expression": pick.expr.to_string(), "readable": pick.expr.to_string(probe.names),
                       "constants": pick.expr.constants()},
            "templates": checks,
            "recovered": bool(below),
        }
        if not below:
            report["recovered"] = False
        report["mlps"][which] = entry
        chosen_strings[which] = pick.expr.to_string(probe.names)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            write_front_csv(front, out / f"front_{which}.csv", probe.names)
    report["rule"] = _compose_rule(model, chosen_strings)
    if out_dir is not None:
        Path(out_dir, "distill_report.json").write_text(json.dumps(report, indent=2))
    return report


def _compose_rule(model, chosen):
    lines = []
    for which, kind in _selectors(model):
        lhs = {"agg": "e'", "agg2": "e2'", "up": "h"}[kind]
        lines.append(f"{lhs}[{which}] = {chosen[which]}")
    lines.append("ebar = sum over incoming edges of e'; h of the last layer is T^{n+1}")
    return lines


def write_front_csv(front: list[FrontEntry], path, names=None):
    """CSV ``complexity, mse, expressionString`` plus a ``.vars.json`` sidecar for ``v0..vK``."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["complexity", "mse", "expressionString"])
        for e in front:
            w.writerow([e.complexity, "%.17g" % e.mse, e.expr.to_string()])
    if names is not None:
        path.with_suffix(".vars.json").write_text(
            json.dumps({f"v{i}": n for i, n in enumerate(names)}, indent=2))
