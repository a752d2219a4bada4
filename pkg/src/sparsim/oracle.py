"""Ground-truth sparse-matmul kernels and the symbolic planning pass.

Everything else in the package is validated against this module: a dense
brute-force multiply with fixed accumulation order, a row-wise (Gustavson)
sparse kernel, the symbolic first pass that counts multiply contributions
per output element, partial-product bloat accounting, scratchpad window
planning, and a single graph-convolution layer used as a workload
generator.

Structural zeros produced by numeric cancellation are retained throughout:
a structural nonzero is any output element receiving at least one partial
product, which keeps the contribution counters format-independent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ConfigError, SparsimError
from .matio import CsrMatrix, dense_to_csr

DEFAULT_CF = 4.0
DEFAULT_EF = 1.5


@dataclass(frozen=True)
class SymbolicPlan:
    """Output of the symbolic (first) pass over C = A * B.

    ``contrib_counter`` maps each output coordinate (i, j) to the number of
    k with A[i,k] != 0 and B[k,j] != 0, i.e. the number of partial products
    that will land on that element.
    """

    n_rows: int
    n_cols: int
    fma_per_row: np.ndarray  # int64
    out_nnz_per_row: np.ndarray  # int64
    contrib_counter: dict
    total_fma: int
    total_out_nnz: int


@dataclass(frozen=True)
class BloatReport:
    """Excess of intermediate partial products over final output nonzeros."""

    pp_interim: int
    nnz_output: int
    bloat_percent: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "pp_interim": self.pp_interim,
                "nnz_output": self.nnz_output,
                "bloat_percent": self.bloat_percent,
            },
            sort_keys=True,
        )


DENSE = "DENSE"
SPARSE = "SPARSE"


@dataclass(frozen=True)
class Window:
    """A group of output rows whose accumulation state fits one scratchpad."""

    rows: list
    classification: list  # DENSE | SPARSE per row
    hash_capacity: list  # prime capacity (or 1:1 size for dense rows)

    @property
    def capacity(self) -> int:
        return sum(self.hash_capacity)


@dataclass(frozen=True)
class WindowPlan:
    windows: list
    cf: float
    ef: float
    threshold: float
    spad_budget: int

    def window_of_row(self) -> dict:
        out = {}
        for w, win in enumerate(self.windows):
            for r in win.rows:
                out[r] = w
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "windows": [
                    {
                        "rows": w.rows,
                        "classification": w.classification,
                        "hash_capacity": w.hash_capacity,
                    }
                    for w in self.windows
                ],
                "cf": self.cf,
                "ef": self.ef,
                "threshold": self.threshold,
                "spad_budget": self.spad_budget,
            },
            sort_keys=True,
        )


# ---------------------------------------------------------------------------
# Reference kernels
# ---------------------------------------------------------------------------


def spgemm_dense_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Textbook row-wise triple loop with fixed k order, float64 accumulation.

    Zero A entries contribute exactly nothing for finite inputs, so they are
    skipped without changing the result.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[0]:
        raise ConfigError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for i in range(a.shape[0]):
        row = out[i]
        ai = a[i]
        for k in np.nonzero(ai)[0]:
            row += ai[k] * b[k]
    return out


def spgemm_gustavson(a: CsrMatrix, b: CsrMatrix) -> CsrMatrix:
    """Row-wise product C[i,:] = sum_k A[i,k] * B[k,:] on CSR operands.

    Output rows are sorted by column. Elements that cancel to zero stay in
    the structure.
    """
    if a.n_cols != b.n_rows:
        raise ConfigError(f"inner dimensions differ: {a.n_cols} vs {b.n_rows}")
    a_off = a.row_offsets
    a_cols = a.col_indices
    a_vals = a.values
    b_off = b.row_offsets
    b_cols = b.col_indices
    b_vals = b.values

    out_offsets = np.zeros(a.n_rows + 1, dtype=np.int64)
    out_cols = []
    out_vals = []
    for i in range(a.n_rows):
        acc = {}
        for t in range(int(a_off[i]), int(a_off[i + 1])):
            k = a_cols[t]
            av = a_vals[t]
            for u in range(int(b_off[k]), int(b_off[k + 1])):
                j = int(b_cols[u])
                acc[j] = acc.get(j, 0.0) + av * b_vals[u]
        cols = sorted(acc)
        out_cols.extend(cols)
        out_vals.extend(acc[j] for j in cols)
        out_offsets[i + 1] = len(out_cols)
    return CsrMatrix(
        a.n_rows,
        b.n_cols,
        out_offsets,
        np.asarray(out_cols, dtype=np.int32),
        np.asarray(out_vals, dtype=np.float64),
    )


def spmm_csr_dense(a: CsrMatrix, x: np.ndarray) -> np.ndarray:
    """Row-wise sparse * dense product; the aggregation-stage executor."""
    x = np.asarray(x, dtype=np.float64)
    if a.n_cols != x.shape[0]:
        raise ConfigError(f"inner dimensions differ: {a.n_cols} vs {x.shape[0]}")
    out = np.zeros((a.n_rows, x.shape[1]), dtype=np.float64)
    for i in range(a.n_rows):
        cj, cv = a.row(i)
        if len(cj):
            out[i] = cv @ x[cj]
    return out


# ---------------------------------------------------------------------------
# Symbolic pass and bloat
# ---------------------------------------------------------------------------


def symbolic_pass(a: CsrMatrix, b: CsrMatrix) -> SymbolicPlan:
    """Count FMA work and per-output-element contributions for C = A * B."""
    if a.n_cols != b.n_rows:
        raise ConfigError(f"inner dimensions differ: {a.n_cols} vs {b.n_rows}")
    b_row_nnz = np.diff(b.row_offsets)
    fma_per_row = np.zeros(a.n_rows, dtype=np.int64)
    out_nnz_per_row = np.zeros(a.n_rows, dtype=np.int64)
    contrib = {}
    b_off = b.row_offsets
    b_cols = b.col_indices
    for i in range(a.n_rows):
        ks, _ = a.row(i)
        if not len(ks):
            continue
        fma_per_row[i] = int(b_row_nnz[ks].sum())
        pieces = [b_cols[int(b_off[k]) : int(b_off[k + 1])] for k in ks.tolist()]
        cols = np.concatenate(pieces) if len(pieces) > 1 else pieces[0]
        uniq, counts = np.unique(cols, return_counts=True)
        out_nnz_per_row[i] = len(uniq)
        for j, c in zip(uniq.tolist(), counts.tolist()):
            contrib[(i, j)] = c
    return SymbolicPlan(
        n_rows=a.n_rows,
        n_cols=b.n_cols,
        fma_per_row=fma_per_row,
        out_nnz_per_row=out_nnz_per_row,
        contrib_counter=contrib,
        total_fma=int(fma_per_row.sum()),
        total_out_nnz=int(out_nnz_per_row.sum()),
    )


def bloat_report(plan: SymbolicPlan) -> BloatReport:
    """Bloat percent = (pp_interim - nnz_output) / nnz_output * 100."""
    if plan.total_out_nnz == 0:
        raise SparsimError("bloat undefined: product has no nonzeros")
    pp = plan.total_fma
    out = plan.total_out_nnz
    # Numerator scaled first so integer inputs stay exact.
    return BloatReport(pp, out, (pp - out) * 100.0 / out)


# ---------------------------------------------------------------------------
# Window planning
# ---------------------------------------------------------------------------

_WHEEL = (4, 2, 4, 2, 4, 6, 2, 6)


def is_prime(n: int) -> bool:
    if n < 2:
        return False
    for p in (2, 3, 5, 7):
        if n % p == 0:
            return n == p
    i = 11
    w = 0
    while i * i <= n:
        if n % i == 0:
            return False
        i += _WHEEL[w]
        w = (w + 1) % 8
    return True


def next_prime_at_least(x) -> int:
    """Smallest prime >= x."""
    n = max(2, int(np.ceil(x)))
    while not is_prime(n):
        n += 1
    return n


def prev_prime_at_most(x) -> int:
    n = int(x)
    if n < 2:
        raise ConfigError(f"no prime <= {x}")
    while not is_prime(n):
        n -= 1
    return n


def default_threshold(spad_budget: int) -> float:
    return spad_budget / 64.0


def plan_windows(
    plan: SymbolicPlan,
    cf: float = DEFAULT_CF,
    ef: float = DEFAULT_EF,
    threshold: float | None = None,
    spad_budget: int = 1 << 14,
) -> WindowPlan:
    """Classify rows and pack them into scratchpad-sized windows.

    A row is DENSE when fma / cf > threshold, otherwise SPARSE. Sparse rows
    get the smallest prime capacity >= fma * ef (capped at the budget, but
    never below the row's fma); dense rows map 1:1 by column and take
    n_cols lines. Rows are packed greedily first-fit, alternating dense and
    sparse rows to approximate an evenly spread mix.
    """
    if cf <= 0 or ef < 1:
        raise ConfigError("need cf > 0 and ef >= 1")
    if threshold is None:
        threshold = default_threshold(spad_budget)

    dense_rows = []
    sparse_rows = []
    caps = {}
    classes = {}
    for r in range(plan.n_rows):
        fma = int(plan.fma_per_row[r])
        if fma / cf > threshold:
            cls = DENSE
            cap = plan.n_cols
            if cap > spad_budget:
                raise CapacityError(f"dense row {r} needs {cap} hashlines, budget is {spad_budget}")
        else:
            cls = SPARSE
            cap = next_prime_at_least(fma * ef)
            if cap > spad_budget:
                cap = prev_prime_at_most(spad_budget)
            if fma > cap:
                raise CapacityError(f"row {r} needs {fma} hashlines, budget is {spad_budget}")
        caps[r] = cap
        classes[r] = cls
        (dense_rows if cls == DENSE else sparse_rows).append(r)

    # Alternate dense/sparse in placement order, then first-fit pack.
    mixed = []
    di = si = 0
    while di < len(dense_rows) or si < len(sparse_rows):
        if di < len(dense_rows):
            mixed.append(dense_rows[di])
            di += 1
        if si < len(sparse_rows):
            mixed.append(sparse_rows[si])
            si += 1

    windows = []
    cur_rows = []
    cur_used = 0
    for r in mixed:
        if cur_rows and cur_used + caps[r] > spad_budget:
            windows.append(cur_rows)
            cur_rows = []
            cur_used = 0
        cur_rows.append(r)
        cur_used += caps[r]
    if cur_rows:
        windows.append(cur_rows)

    return WindowPlan(
        windows=[
            Window(
                rows=list(ws),
                classification=[classes[r] for r in ws],
                hash_capacity=[caps[r] for r in ws],
            )
            for ws in windows
        ],
        cf=cf,
        ef=ef,
        threshold=threshold,
        spad_budget=spad_budget,
    )


# ---------------------------------------------------------------------------
# Graph-convolution layer workload
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GcnLayerJob:
    """One graph-convolution layer: aggregate A @ X, combine @ W, ReLU.

    ``adjacency`` and ``features`` form the sparse aggregation job;
    ``weights`` the dense combination job; ``reference`` is the fused dense
    result relu(A @ X @ W) the chained execution must reproduce.
    """

    adjacency: CsrMatrix
    features: np.ndarray
    weights: np.ndarray
    reference: np.ndarray

    def run_aggregation(self) -> np.ndarray:
        return spmm_csr_dense(self.adjacency, self.features)

    def run_combination(self, aggregated: np.ndarray) -> np.ndarray:
        return relu(aggregated @ self.weights)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def gcn_layer_workload(adj: CsrMatrix, x: np.ndarray, w: np.ndarray) -> GcnLayerJob:
    """Build the layer job plus its fused dense reference."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if adj.n_cols != x.shape[0]:
        raise ConfigError(f"adjacency is {adj.n_rows}x{adj.n_cols} but features have {x.shape[0]} rows")
    if x.shape[1] != w.shape[0]:
        raise ConfigError(f"features have {x.shape[1]} columns but weights have {w.shape[0]} rows")
    from .matio import csr_to_dense

    reference = relu(csr_to_dense(adj) @ x @ w)
    return GcnLayerJob(adjacency=adj, features=x, weights=w, reference=reference)


def features_as_csr(x: np.ndarray) -> CsrMatrix:
    """Dense feature matrix as CSR so it can feed the sparse pipelines."""
    return dense_to_csr(x)
