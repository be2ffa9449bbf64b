"""Executable checks of the network's algebra at tiny, exactly computable sizes.

Every ``verify_*`` function is deterministic in its arguments and returns a
:class:`CheckReport` carrying the worst error seen and a pass flag.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .aim import AIM, structured_tensor
from .errors import CapacityError, NumericError
from .layers import LayerNorm2d, Linear, Module
from .model import DttnModel, ModelConfig, zero_biases
from .tensor import contract, khatri_rao, outer, vec

MAX_TN_ENTRIES = 100_000


@dataclass
class CheckReport:
    name: str
    size: str
    trials: int
    worst_error: float
    tolerance: float
    passed: bool
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<22} {self.size:<24} trials={self.trials:<4d} worst={self.worst_error:.3e} {status}"

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "size": self.size,
            "trials": self.trials,
            "worst_error": self.worst_error,
            "tolerance": self.tolerance,
            "passed": self.passed,
            **self.details,
        }


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.abs(b).max()
    diff = np.abs(a - b).max()
    return float(diff / scale) if scale > 0 else float(diff)


# --------------------------------------------------------------------------
# Hadamard / Khatri-Rao identity
# --------------------------------------------------------------------------


def kr_sides(a: np.ndarray, b: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(Az) * (Bz)`` and ``vec(z (x) z) (A^T kr B^T)`` for ``A, B`` of shape o x n."""
    return (a @ z) * (b @ z), vec(outer(z, z)) @ khatri_rao(a.T, b.T)


def _ln_rows(m: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    return LayerNorm2d(m.shape[1], eps=eps, dtype=m.dtype).forward(m)


def kr_ln_sides(a, b, z) -> tuple[np.ndarray, np.ndarray]:
    """Layer norm inserted on one branch versus on the fixed coefficient matrix."""
    ln = LayerNorm2d(a.shape[0], dtype=a.dtype)
    lhs = ln.forward((a @ z)[None])[0] * (b @ z)
    rhs = vec(outer(z, z)) @ _ln_rows(khatri_rao(a.T, b.T))
    return lhs, rhs


def verify_kr_identity(n: int | None = None, o: int | None = None, trials: int = 100, seed: int = 0,
                       tol: float = 1e-12, ln_gap: float = 1e-3) -> CheckReport:
    """Brute-force both sides of the Hadamard/Khatri-Rao identity.

    With ``n``/``o`` left as ``None`` each trial draws its own sizes
    (``n`` in 1..8, ``o`` in 2..8).  The layer-norm variant is evaluated on
    the same draws and must break the identity on at least 99% of trials.
    """
    rng = np.random.default_rng(seed)
    worst, gaps = 0.0, []
    for _ in range(trials):
        nn = n if n is not None else int(rng.integers(1, 9))
        oo = o if o is not None else int(rng.integers(2, 9))
        a = rng.standard_normal((oo, nn))
        b = rng.standard_normal((oo, nn))
        z = rng.standard_normal(nn)
        lhs, rhs = kr_sides(a, b, z)
        worst = max(worst, float(np.abs(lhs - rhs).max()))
        if oo >= 2:
            l2, r2 = kr_ln_sides(a, b, z)
            gaps.append(float(np.abs(l2 - r2).max()))
    broken = sum(g > ln_gap for g in gaps)
    ln_ok = not gaps or broken >= math.ceil(0.99 * len(gaps))
    size = f"n={n or '1..8'},o={o or '2..8'}"
    return CheckReport("kr_identity", size, trials, worst, tol, worst <= tol and ln_ok,
                       {"ln_trials": len(gaps), "ln_broken": broken, "ln_min_gap": min(gaps, default=float("nan"))})


# --------------------------------------------------------------------------
# single-block unfolding
# --------------------------------------------------------------------------


def tiny_block(C: int, R: int, seed: int = 0, shortcut: bool = True) -> AIM:
    """A norm-free, bias-free f64 block with random weights."""
    blk = AIM(C, R, norm="none", shortcut=shortcut, rng=np.random.default_rng(seed), dtype=np.float64)
    return zero_biases(blk)


def unfolded_output(cube_matrix: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Contract the block's coefficient tensor with ``x (x) x``."""
    D = x.size
    cube = cube_matrix.reshape(D, D, D)
    v = vec(x)
    return contract(cube, outer(v, v), (0, 1), (0, 1))


def verify_unfolding(C: int, R: int, H: int, W: int, trials: int = 100, seed: int = 0,
                     tol: float = 1e-10, block: AIM | None = None) -> CheckReport:
    blk = block if block is not None else tiny_block(C, R, seed)
    cube = structured_tensor(blk, (H, W))
    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal((1, C, H, W))
        direct = vec(blk.forward(x) - x) if blk.shortcut else vec(blk.forward(x))
        worst = max(worst, _rel(unfolded_output(cube, x), direct))
    return CheckReport("unfolding", f"C={C},R={R},H={H},W={W}", trials, worst, tol, worst <= tol)


# --------------------------------------------------------------------------
# whole-network polynomial degree
# --------------------------------------------------------------------------


def poly_model_config(n_blocks: int, seed: int = 0, *, shortcut: bool, hidden: int = 4) -> ModelConfig:
    """Desk-sized norm-free f64 config with ``n_blocks`` AIMs (one per stage)."""
    if not 1 <= n_blocks <= 4:
        raise CapacityError("polynomial checks support 1..4 blocks")
    blocks = tuple(1 if s < n_blocks else 0 for s in range(4))
    return ModelConfig(blocks, (hidden,) * 4, r_exp=2, use_ln=False, img_channels=1, img_size=(32, 32),
                       classes=3, seed=seed, dtype="f64", variant="poly", norms=False, shortcut=shortcut)


def randomize_biases(module: Module, rng: np.random.Generator, scale: float = 0.1) -> Module:
    for m in module.modules():
        if "bias" in m.params:
            b = m.params["bias"]
            b[...] = scale * rng.standard_normal(b.shape)
    return module


def verify_homogeneity(n_blocks: int, alphas=(0.5, 2.0), seed: int = 0, tol: float = 1e-8) -> CheckReport:
    """Bias-free, shortcut-free, norm-free model: ``f(a x) == a^(2^L) f(x)``."""
    model = zero_biases(DttnModel(poly_model_config(n_blocks, seed, shortcut=False)))
    x = np.random.default_rng(seed + 1).standard_normal((2, 1, 32, 32))
    fx = model.forward(x)
    worst = 0.0
    for a in alphas:
        worst = max(worst, _rel(model.forward(a * x), a ** (2 ** n_blocks) * fx))
    return CheckReport("homogeneity", f"L={n_blocks},alphas={list(alphas)}", len(alphas), worst, tol, worst <= tol)


def verify_ray_degree(n_blocks: int, seed: int = 0, held_out: int = 16, tol: float = 1e-8) -> CheckReport:
    """With shortcuts and biases, each logit along ``t * x0`` is a polynomial
    of degree at most ``2^L``: interpolate at ``2^L + 1`` Chebyshev nodes and
    predict held-out points."""
    rng = np.random.default_rng(seed)
    model = DttnModel(poly_model_config(n_blocks, seed, shortcut=True))
    randomize_biases(model, rng)
    x0 = rng.standard_normal((1, 1, 32, 32))
    deg = 2 ** n_blocks
    nodes = np.cos(np.pi * (np.arange(deg + 1) + 0.5) / (deg + 1))
    fit = model.forward(nodes[:, None, None, None] * x0)
    coef = np.polynomial.chebyshev.chebfit(nodes, fit, deg)
    t = rng.uniform(-1, 1, held_out)
    direct = model.forward(t[:, None, None, None] * x0)
    worst = _rel(np.polynomial.chebyshev.chebval(t, coef).T, direct)
    return CheckReport("ray_degree", f"L={n_blocks},degree<={deg}", held_out, worst, tol, worst <= tol)


# --------------------------------------------------------------------------
# coefficient extraction and tensor-network witness
# --------------------------------------------------------------------------


class AimStack(Module):
    """Norm-free blocks on a tiny ``C x H x W`` input, optional linear readout."""

    def __init__(self, input_shape, n_blocks: int, r_exp: int = 2, classes: int | None = None,
                 seed: int = 0, shortcut: bool = True):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.input_shape = tuple(input_shape)
        C = self.input_shape[0]
        self.blocks = [AIM(C, r_exp, norm="none", shortcut=shortcut, rng=rng, dtype=np.float64)
                       for _ in range(n_blocks)]
        D = int(np.prod(self.input_shape))
        self.head = Linear(D, classes, rng=rng, dtype=np.float64) if classes else None

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def forward(self, x):
        h = x.reshape((-1,) + self.input_shape)
        for blk in self.blocks:
            h = blk(h)
        h = h.reshape(h.shape[0], -1)
        return self.head(h) if self.head is not None else h


def monomials(n_vars: int, cap: int) -> list[tuple[int, ...]]:
    """Exponent tuples with total degree <= cap, by degree then lexicographically."""
    out = [k for k in itertools.product(range(cap + 1), repeat=n_vars) if sum(k) <= cap]
    return sorted(out, key=lambda k: (sum(k), k))


@dataclass
class PolyCoeffs:
    n_vars: int
    degree_cap: int
    exponents: list[tuple[int, ...]]
    coeffs: np.ndarray  # (n_monomials, n_outputs)
    residual: float = float("nan")

    def design(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        powers = x[:, :, None] ** np.arange(self.degree_cap + 1)
        cols = [np.prod(powers[:, np.arange(self.n_vars), list(k)], axis=1) for k in self.exponents]
        return np.stack(cols, axis=1)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return self.design(x) @ self.coeffs

    def as_dict(self, output: int = 0, atol: float = 1e-9) -> dict[tuple[int, ...], float]:
        return {k: float(c) for k, c in zip(self.exponents, self.coeffs[:, output]) if abs(c) > atol}


def _forward_flat(model, x2: np.ndarray) -> np.ndarray:
    shape = getattr(model, "input_shape", (x2.shape[1],))
    return np.asarray(model.forward(x2.reshape((-1,) + tuple(shape)))).reshape(x2.shape[0], -1)


def extract_coefficients(model, n_vars: int, n_blocks: int, seed: int = 0, held_out: int = 100,
                         max_cond: float = 1e10) -> PolyCoeffs:
    """Recover every polynomial coefficient of ``model`` from evaluations.

    Sample points form the tensor grid of ``2^L + 1`` distinct half-integer
    values per coordinate, which determines any polynomial of total degree
    ``<= 2^L``.  ``residual`` is the worst relative error on random held-out
    points.
    """
    if n_vars > 3 or n_blocks > 2:
        raise CapacityError("coefficient extraction is limited to n_vars <= 3 and L <= 2")
    cap = 2 ** n_blocks
    exps = monomials(n_vars, cap)
    pc = PolyCoeffs(n_vars, cap, exps, np.zeros((len(exps), 0)))
    grid_1d = 0.5 * (np.arange(cap + 1) - cap / 2)
    grid = np.array(list(itertools.product(grid_1d, repeat=n_vars)))
    V = pc.design(grid)
    cond = np.linalg.cond(V)
    if not np.isfinite(cond) or cond > max_cond:
        raise NumericError(f"sample design is ill-conditioned (cond={cond:.3g}); respace the grid in f64")
    pc.coeffs, *_ = np.linalg.lstsq(V, _forward_flat(model, grid), rcond=None)
    xs = np.random.default_rng(seed).uniform(-1, 1, (held_out, n_vars))
    pc.residual = _rel(pc.evaluate(xs), _forward_flat(model, xs))
    return pc


def local_map(x: float | np.ndarray, degree: int) -> np.ndarray:
    """``[x^0, x^1, ..., x^degree]``."""
    return np.asarray(x, dtype=np.float64)[..., None] ** np.arange(degree + 1)


def coefficient_tensor(pc: PolyCoeffs) -> np.ndarray:
    """Dense ``(d+1) x ... x (d+1) x m`` tensor over the local-map basis."""
    m = pc.coeffs.shape[1]
    entries = (pc.degree_cap + 1) ** pc.n_vars * m
    if entries > MAX_TN_ENTRIES:
        raise CapacityError(f"coefficient tensor would hold {entries} entries (guard {MAX_TN_ENTRIES})")
    W = np.zeros((pc.degree_cap + 1,) * pc.n_vars + (m,))
    for k, c in zip(pc.exponents, pc.coeffs):
        W[k] = c
    return W


def tn_evaluate(W: np.ndarray, x: np.ndarray, degree: int) -> np.ndarray:
    """``<W, phi(x_1) (x) ... (x) phi(x_N)>`` by sequential mode contraction."""
    t = W
    for xi in x:
        t = contract(local_map(xi, degree), t, (0,), (0,))
    return t


def verify_tn_equivalence(pc: PolyCoeffs, model, trials: int = 100, seed: int = 0,
                          tol: float = 1e-8) -> CheckReport:
    W = coefficient_tensor(pc)
    xs = np.random.default_rng(seed).uniform(-1, 1, (trials, pc.n_vars))
    tn = np.stack([tn_evaluate(W, x, pc.degree_cap) for x in xs])
    worst = _rel(tn, _forward_flat(model, xs))
    return CheckReport("tn_equivalence", f"n={pc.n_vars},L={int(math.log2(pc.degree_cap))}", trials,
                       worst, tol, worst <= tol)


def tn_witness(n_vars: int, n_blocks: int, seed: int = 0, trials: int = 100, classes: int = 2) -> CheckReport:
    """Random tiny stack -> coefficients -> dense TN contraction -> compare."""
    model = AimStack((1, 1, n_vars), n_blocks, classes=classes, seed=seed)
    randomize_biases(model, np.random.default_rng(seed + 7))
    pc = extract_coefficients(model, n_vars, n_blocks, seed=seed)
    report = verify_tn_equivalence(pc, model, trials, seed + 1)
    report.details["extraction_residual"] = pc.residual
    report.passed = report.passed and pc.residual <= report.tolerance
    return report


# --------------------------------------------------------------------------
# suite
# --------------------------------------------------------------------------

UNFOLD_CONFIGS = [(2, 2, 1, 1), (1, 1, 2, 2), (1, 2, 2, 2), (2, 3, 2, 2), (4, 2, 4, 4)]

SUITES = ("kr_identity", "unfolding", "homogeneity", "ray_degree", "tn_equivalence")


def run_suite(only: str | None = None, seed: int = 0) -> list[CheckReport]:
    reports = []
    if only in (None, "kr_identity"):
        reports.append(verify_kr_identity(trials=100, seed=seed))
    if only in (None, "unfolding"):
        for i, (C, R, H, W) in enumerate(UNFOLD_CONFIGS):
            reports.append(verify_unfolding(C, R, H, W, trials=100, seed=seed + i))
    if only in (None, "homogeneity"):
        reports += [verify_homogeneity(L, seed=seed) for L in (1, 2, 3)]
    if only in (None, "ray_degree"):
        reports += [verify_ray_degree(L, seed=seed) for L in (1, 2, 3)]
    if only in (None, "tn_equivalence"):
        reports += [tn_witness(n, L, seed=seed) for n in (1, 2, 3) for L in (1, 2)]
    if only is not None and only not in SUITES:
        raise ValueError(f"unknown check {only!r}; choose from {SUITES}")
    return reports
