"""Oracle suites: every dual-route correctness check behind the `check` command.

Each suite compares an optimized path against an independent route (scalar
reference loop, LTI kernel convolution, straight-line block re-derivation,
brute-force bit strings) or verifies a structural property (contiguity,
canonicalization, locality, stability, causality, FLOP linearity). The
thresholds here are the committed contracts; the acceptance tests reuse
these functions at the acceptance sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ssm
from .block import (
    block_flop_count,
    block_forward,
    block_reversal_symmetry_check,
    init_block_params,
    reset_block_flops,
)
from .octree import (
    AXIS_ORDERS,
    build_octree,
    deinterleave_bits,
    interleave_bits,
    normalize_points,
    parent_groups,
    zorder_locality,
)
from .reference import block_forward_reference
from .tensor import Tensor, finite_diff_check, flop_count, reset_flops, tsum, mul


@dataclass
class CheckResult:
    suite: str
    name: str
    value: float
    threshold: float
    passed: bool
    note: str = ""

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        note = f"  ({self.note})" if self.note else ""
        return f"[{mark}] {self.suite}/{self.name}: {self.value:.3e} vs {self.threshold:.3e}{note}"


def _result(suite, name, value, threshold, larger_is_better=False, note="") -> CheckResult:
    passed = value >= threshold if larger_is_better else value <= threshold
    return CheckResult(suite, name, float(value), float(threshold), bool(passed), note)


# ---------------------------------------------------------------------------
# Random instance generators (block-like parameter regimes)


def _random_selective(rng, n, e, m):
    neg_a = np.exp(rng.uniform(0.0, np.log(max(m, 2)), size=(e, m)))
    dt = rng.uniform(1e-3, 0.5, size=(n, e))
    abar = np.exp(-dt[:, :, None] * neg_a[None])
    b = rng.normal(size=(n, m))
    bbar = dt[:, :, None] * b[:, None, :]
    c = rng.normal(size=(n, m))
    d = rng.normal(size=e)
    x = rng.normal(size=(n, e))
    return abar, bbar, c, d, x


# ---------------------------------------------------------------------------
# ssm suite


def check_lti_equivalence(trials: int = 100, seed: int = 0) -> CheckResult:
    """Recurrence vs kernel convolution on random LTI systems.

    The production route runs discretize + recurrent_scan; the oracle route
    re-derives the discretization from first principles and evaluates the
    system as a causal convolution with the kernel taps. A defect in either
    discretize or the scan breaks the agreement.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(trials):
        n = int(rng.integers(2, 129))
        e = int(rng.integers(1, 9))
        m = int(rng.integers(1, 17))
        mode = "exact_zoh" if i % 2 else "simplified"
        a = -np.exp(rng.uniform(0.0, np.log(max(m, 2)), size=(e, m)))
        dt = rng.uniform(1e-3, 0.5, size=e)
        b = rng.normal(size=m)
        c = rng.normal(size=m)
        d = rng.normal(size=e)
        x = rng.normal(size=(n, e))

        abar_t, bbar_t = ssm.discretize(a, np.tile(b, (n, 1)), np.tile(dt, (n, 1)), mode)
        y_scan = ssm.recurrent_scan(abar_t, bbar_t, np.tile(c, (n, 1)), d, x).data

        abar_o = np.exp(dt[:, None] * a)
        if mode == "simplified":
            bbar_o = dt[:, None] * b[None, :]
        else:
            bbar_o = np.expm1(dt[:, None] * a) / a * b[None, :]
        kernel = ssm.lti_kernel(abar_o, bbar_o, c, n)
        y_conv = ssm.conv_apply(kernel, x, d)
        worst = max(worst, float(np.max(np.abs(y_scan - y_conv))))
    return _result("ssm", "lti_equivalence", worst, 1e-10, note=f"{trials} systems")


def check_scan_oracle(trials: int = 100, seed: int = 1) -> CheckResult:
    """Optimized scans vs the committed scalar-loop reference.

    Covers both production paths (the generic recurrence and the fused
    discretize+scan) in both dispatch regimes (plain loop and chunked).
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(trials):
        n = int(rng.integers(2, 64)) if i % 2 == 0 else int(rng.integers(200, 420))
        e = int(rng.integers(1, 6))
        m = int(rng.integers(1, 17))
        neg_a = np.exp(rng.uniform(0.0, np.log(max(m, 2)), size=(e, m)))
        dt = rng.uniform(1e-3, 0.5, size=(n, e))
        b = rng.normal(size=(n, m))
        c = rng.normal(size=(n, m))
        d = rng.normal(size=e)
        x = rng.normal(size=(n, e))
        abar = np.exp(-dt[:, :, None] * neg_a[None])
        bbar = dt[:, :, None] * b[:, None, :]
        y_ref = ssm.recurrent_scan_reference(abar, bbar, c, d, x)
        y_generic = ssm.recurrent_scan(abar, bbar, c, d, x).data
        y_fused = ssm.selective_scan(dt, b, c, -neg_a, d, x).data
        worst = max(worst, float(np.max(np.abs(y_generic - y_ref))))
        worst = max(worst, float(np.max(np.abs(y_fused - y_ref))))
    return _result("ssm", "scan_oracle", worst, 1e-12, note=f"{trials} selective instances")


def check_stability(trials: int = 20, seed: int = 2) -> CheckResult:
    """Zero input, arbitrary initial state: the state norm must shrink every step."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(trials):
        n, e, m = int(rng.integers(8, 65)), int(rng.integers(1, 5)), int(rng.integers(1, 9))
        abar, _, _, _, _ = _random_selective(rng, n, e, m)
        h = rng.normal(size=(e, m))
        prev = float(np.linalg.norm(h))
        for k in range(n):
            h = abar[k] * h
            cur = float(np.linalg.norm(h))
            worst = max(worst, cur - prev)
            prev = cur
    return _result("ssm", "stability", worst, 0.0, note="max norm increase; must be < 0")


def check_causality(trials: int = 20, seed: int = 3) -> CheckResult:
    """Perturbing x_k must leave y_j untouched for all j < k."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n, e, m = int(rng.integers(8, 65)), int(rng.integers(1, 5)), int(rng.integers(1, 9))
        abar, bbar, c, d, x = _random_selective(rng, n, e, m)
        base = ssm.recurrent_scan(abar, bbar, c, d, x).data
        k = int(rng.integers(0, n))
        x2 = x.copy()
        x2[k] += rng.normal(size=e)
        pert = ssm.recurrent_scan(abar, bbar, c, d, x2).data
        if k > 0:
            worst = max(worst, float(np.max(np.abs(pert[:k] - base[:k]))))
    return _result("ssm", "causality", worst, 0.0, note="leakage into the past")


def check_scan_linearity(trials: int = 20, seed: int = 4) -> CheckResult:
    """With frozen selection parameters, y(alpha x) == alpha y(x)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n, e, m = int(rng.integers(8, 65)), int(rng.integers(1, 5)), int(rng.integers(1, 9))
        abar, bbar, c, d, x = _random_selective(rng, n, e, m)
        alpha = float(rng.uniform(0.5, 2.0))
        y1 = ssm.recurrent_scan(abar, bbar, c, d, alpha * x).data
        y2 = alpha * ssm.recurrent_scan(abar, bbar, c, d, x).data
        worst = max(worst, float(np.max(np.abs(y1 - y2))))
    return _result("ssm", "scan_linearity", worst, 1e-10)


def check_scan_flops(seed: int = 5) -> CheckResult:
    """Instrumented scan count must equal 5*N*E*M + 2*N*E exactly."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(10):
        n, e, m = int(rng.integers(4, 300)), int(rng.integers(1, 9)), int(rng.integers(1, 17))
        abar, bbar, c, d, x = _random_selective(rng, n, e, m)
        reset_flops()
        ssm.recurrent_scan(abar, bbar, c, d, x)
        worst = max(worst, abs(flop_count() - (5 * n * e * m + 2 * n * e)))
    return _result("ssm", "scan_flops_exact", worst, 0.0, note="deviation from c*NEM + d*NE")


# ---------------------------------------------------------------------------
# block suite


def check_block_oracle(trials: int = 10, seed: int = 10) -> CheckResult:
    """Taped block vs the independent straight-line re-implementation."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(trials):
        n, c = int(rng.integers(2, 24)), int(rng.integers(2, 17))
        mode = "exact_zoh" if i % 3 == 2 else "simplified"
        params = init_block_params(c, rng, state_size=int(rng.integers(1, 17)))
        p_in = Tensor(rng.normal(size=(n, c)))
        out = block_forward(p_in, params, mode).data
        ref = block_forward_reference(p_in.data, params, mode)
        worst = max(worst, float(np.max(np.abs(out - ref))))
    return _result("block", "algorithm_oracle", worst, 1e-12, note=f"{trials} random blocks")


def check_block_symmetry(trials: int = 20, seed: int = 11) -> CheckResult:
    """Reversal + direction swap must commute with the block."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n, c = int(rng.integers(2, 33)), int(rng.integers(2, 17))
        params = init_block_params(c, rng)
        p_in = Tensor(rng.normal(size=(n, c)))
        worst = max(worst, block_reversal_symmetry_check(p_in, params))
    return _result("block", "reversal_symmetry", worst, 1e-10, note=f"{trials} instances")


def check_block_gradient(
    n: int = 8, channels: int = 4, state_size: int = 4, seed: int = 12, h: float = 1e-5
) -> CheckResult:
    """Finite differences over every block parameter."""
    rng = np.random.default_rng(seed)
    params = init_block_params(channels, rng, state_size=state_size)
    p_in = Tensor(rng.normal(size=(n, channels)))
    weights = Tensor(rng.normal(size=(n, channels)))

    def loss():
        return tsum(mul(block_forward(p_in, params), weights))

    err = finite_diff_check(loss, params.tensors(), h=h)
    e = channels * 2
    return _result(
        "block",
        "gradient_check",
        err,
        1e-4,
        note=f"N={n}, C={channels}, E={e}, M={state_size}, h={h:g}",
    )


def check_block_flop_linearity(
    n: int = 64, channels: int = 16, seed: int = 13
) -> CheckResult:
    """FLOPs(2N)/FLOPs(N) must sit in [1.99, 2.01] for N >= 64."""
    rng = np.random.default_rng(seed)
    params = init_block_params(channels, rng)
    counts = {}
    for length in (n, 2 * n):
        p_in = Tensor(rng.normal(size=(length, channels)))
        reset_block_flops()
        block_forward(p_in, params)
        counts[length] = block_flop_count()
    ratio = counts[2 * n] / counts[n]
    value = abs(ratio - 2.0)
    res = _result("block", "flop_linearity", value, 0.01, note=f"ratio {ratio:.6f} at N={n}")
    return res


# ---------------------------------------------------------------------------
# octree suite


def check_key_roundtrip(trials: int = 10_000, seed: int = 20) -> CheckResult:
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(10):
        depth = int(rng.integers(1, 11))
        order = AXIS_ORDERS[int(rng.integers(0, len(AXIS_ORDERS)))]
        coords = rng.integers(0, 1 << depth, size=(trials // 10, 3))
        keys = interleave_bits(coords, depth, order)
        back = deinterleave_bits(keys, depth, order)
        failures += int(np.sum(np.any(back != coords, axis=1)))
    return _result("octree", "key_roundtrip", failures, 0.0, note=f"{trials} random keys")


def check_order_equivalence(trials: int = 200, seed: int = 21) -> CheckResult:
    """Key order must equal lexicographic order of the interleaved bit strings."""
    rng = np.random.default_rng(seed)
    mismatches = 0
    for order in AXIS_ORDERS:
        depth = int(rng.integers(2, 8))
        coords = rng.integers(0, 1 << depth, size=(trials, 3))
        keys = interleave_bits(coords, depth, order)
        bitstrings = np.array([format(int(k), f"0{3 * depth}b") for k in keys])
        by_key = np.argsort(keys, kind="stable")
        by_bits = np.argsort(bitstrings, kind="stable")
        mismatches += int(np.sum(by_key != by_bits))
    return _result("octree", "order_equivalence", mismatches, 0.0, note="all axis orders")


def _random_cloud(rng, n: int) -> np.ndarray:
    kind = int(rng.integers(0, 3))
    if kind == 0:
        return rng.uniform(size=(n, 3))
    if kind == 1:
        centers = rng.uniform(size=(int(rng.integers(2, 6)), 3))
        idx = rng.integers(0, len(centers), size=n)
        return centers[idx] + 0.07 * rng.normal(size=(n, 3))
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def check_sibling_contiguity(clouds: int = 100, seed: int = 22) -> CheckResult:
    """Per level: sorted keys, and each parent's children in one contiguous run."""
    rng = np.random.default_rng(seed)
    violations = 0
    for _ in range(clouds):
        pts, _ = normalize_points(_random_cloud(rng, int(rng.integers(64, 600))))
        depth = int(rng.integers(2, 7))
        tree = build_octree(pts, depth=depth)
        for lvl in range(depth + 1):
            keys = tree.level_keys[lvl]
            if np.any(np.diff(keys.astype(np.int64)) <= 0):
                violations += 1
            if lvl >= 1:
                starts = parent_groups(tree, lvl)
                parents = tree.level_keys[lvl - 1]
                child_parents = keys >> np.uint64(3)
                if starts[-1] != len(keys) or starts[0] != 0:
                    violations += 1
                for p in range(len(parents)):
                    seg = child_parents[starts[p] : starts[p + 1]]
                    if seg.size == 0 or np.any(seg != parents[p]):
                        violations += 1
    return _result("octree", "sibling_contiguity", violations, 0.0, note=f"{clouds} clouds")


def check_canonicalization(clouds: int = 50, seed: int = 23) -> CheckResult:
    """Permuting the input must not change keys or pooled features (bitwise)."""
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(clouds):
        n = int(rng.integers(32, 400))
        pts = rng.uniform(size=(n, 3))
        feats = rng.normal(size=(n, 3))
        tree = build_octree(pts, feats, depth=5)
        perm = rng.permutation(n)
        tree_p = build_octree(pts[perm], feats[perm], depth=5)
        same_keys = np.array_equal(tree.leaf_keys, tree_p.leaf_keys)
        same_feats = np.array_equal(tree.leaf_features, tree_p.leaf_features)
        same_assign = np.array_equal(tree.leaf_of_point, tree_p.leaf_of_point[np.argsort(perm)])
        if not (same_keys and same_feats and same_assign):
            failures += 1
    return _result("octree", "canonicalization", failures, 0.0, note=f"{clouds} permuted clouds")


def check_locality(clouds: int = 100, points: int = 512, seed: int = 24) -> CheckResult:
    """Z-order must beat a random order on >= 95% of clouds."""
    rng = np.random.default_rng(seed)
    wins = 0
    for _ in range(clouds):
        pts, _ = normalize_points(_random_cloud(rng, points))
        tree = build_octree(pts, depth=6)
        z_mean, rand_mean = zorder_locality(tree, rng)
        if z_mean < rand_mean:
            wins += 1
    return _result(
        "octree", "zorder_locality", wins, int(np.ceil(0.95 * clouds)),
        larger_is_better=True, note=f"wins out of {clouds}",
    )


# ---------------------------------------------------------------------------
# registry


SUITES = {
    "ssm": (
        check_lti_equivalence,
        check_scan_oracle,
        check_stability,
        check_causality,
        check_scan_linearity,
        check_scan_flops,
    ),
    "block": (
        check_block_oracle,
        check_block_symmetry,
        check_block_gradient,
        check_block_flop_linearity,
    ),
    "octree": (
        check_key_roundtrip,
        check_order_equivalence,
        check_sibling_contiguity,
        check_canonicalization,
        check_locality,
    ),
}


def run_suites(names=None) -> list[CheckResult]:
    if names is None:
        names = list(SUITES)
    results = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
        for fn in SUITES[name]:
            results.append(fn())
    return results
