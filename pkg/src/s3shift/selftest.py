"""Oracle suites run by ``s3shift selftest``."""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .audio import cmvn_apply, cmvn_fit
from .kernels import ConvSpec, FixedPointActivation, conv2d_mul, conv2d_shift, fc_mul, fc_shift
from .network import ModelConfig, ResNet, softmax_xent
from .quantizers import S3LatentWeights, ShiftWeightCode, s3_decode
from .tensor import Rng
from .trainer import cosine_lr


@dataclass
class SuiteResult:
    name: str
    passed: bool
    checks: int
    detail: str = ""
    seconds: float = 0.0


def heaviside_patterns():
    """All 16 sign patterns of (sign, sparse, s1, s2) as ±0.5 latents."""
    for bits in itertools.product((0, 1), repeat=4):
        yield bits, [0.5 if b else -0.5 for b in bits]


def suite_enumeration(decode: Callable[[S3LatentWeights], ShiftWeightCode] = s3_decode) -> SuiteResult:
    values, checks, bad = set(), 0, []
    for bits, lat in heaviside_patterns():
        arr = [np.array([v]) for v in lat]
        v = float(decode(S3LatentWeights(*arr)).decode()[0])
        values.add(v)
        checks += 1
        if (v == 0) != (bits[1] == 0):
            bad.append(f"pattern {bits} -> {v}")
    expected = {0.0, 1.0, -1.0, 2.0, -2.0, 4.0, -4.0}
    ok = values == expected and not bad
    detail = "" if ok else f"values {sorted(values)}; {bad[:3]}"
    return SuiteResult("decode-enumeration", ok, checks, detail)


def random_codes(rng: np.random.Generator, shape, max_exp: int = 2) -> ShiftWeightCode:
    return ShiftWeightCode(
        zero=rng.random(shape) < 0.25,
        sign=np.where(rng.random(shape) < 0.5, -1, 1).astype(np.int8),
        exponent=rng.integers(0, max_exp + 1, size=shape).astype(np.int8),
    )


def random_conv_case(rng: np.random.Generator):
    n, cin, cout = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5)
    h, w = rng.integers(3, 9), rng.integers(3, 9)
    k = int(rng.integers(1, 4))
    spec = ConvSpec(k, k, int(rng.integers(1, 3)), int(rng.integers(0, 2)))
    x = rng.integers(-127, 128, size=(n, cin, h, w)).astype(np.int32)
    return x, random_codes(rng, (cout, cin, k, k)), spec


def suite_kernels(trials: int = 1000, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(trials):
        x, codes, spec = random_conv_case(rng)
        acc, scale = conv2d_shift(FixedPointActivation(x, 1.0), codes, spec)
        ref = conv2d_mul(x.astype(np.float64), codes.decode(np.float64), spec)
        bad += not (np.array_equal(acc.astype(np.float64) * scale, ref))
        k, cout = int(rng.integers(1, 65)), int(rng.integers(1, 9))
        xf = rng.integers(-127, 128, size=(int(rng.integers(1, 3)), k)).astype(np.int32)
        cf = random_codes(rng, (cout, k))
        acc, scale = fc_shift(FixedPointActivation(xf, 1.0), cf)
        bad += not np.array_equal(acc.astype(np.float64) * scale, fc_mul(xf.astype(np.float64), cf.decode(np.float64)))
    return SuiteResult("kernel-equivalence", bad == 0, 2 * trials, f"{bad} mismatches" if bad else "")


def finite_difference_check(model: ResNet, oracle: ResNet, x: np.ndarray, y: np.ndarray,
                            n_params: int = 20, seed: int = 11) -> list[tuple[str, float, float, float]]:
    """Compare ``model``'s backward against central differences taken on ``oracle``.

    ``oracle`` holds the same parameters (possibly in higher precision).  The
    base step is h = 1e-3 * (1 + |theta|); one Richardson step combines h and
    h/2 to cancel the O(h^2) truncation term.
    """
    model.zero_grad()
    _, g = softmax_xent(model.forward(x.astype(model.dtype), training=True), y)
    model.backward(g)
    xo = x.astype(oracle.dtype)

    def loss():
        return softmax_xent(oracle.forward(xo, training=True), y)[0]

    params, oparams = model.parameters(), oracle.parameters()
    sizes = np.array([p.data.size for p in params])
    cum = np.cumsum(sizes)
    rng = Rng(seed)
    out = []
    for flat_idx in (rng.uniform(n_params) * cum[-1]).astype(np.int64):
        pi = int(np.searchsorted(cum, flat_idx, side="right"))
        j = int(flat_idx - (cum[pi] - sizes[pi]))
        flat = oparams[pi].data.reshape(-1)
        old = flat[j]
        h = 1e-3 * (1 + abs(float(old)))

        def central(step):
            flat[j] = old + step
            lp = loss()
            flat[j] = old - step
            lm = loss()
            flat[j] = old
            return (lp - lm) / (2 * step)

        numeric = (4 * central(h / 2) - central(h)) / 3
        analytic = float(params[pi].grad.reshape(-1)[j])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        out.append((params[pi].name, analytic, numeric, rel))
    return out


def gradcheck_models(dtype, seed: int = 3):
    cfg = ModelConfig(arch="toy", n_classes=4, mode="fp32")
    model = ResNet(cfg, seed=seed, dtype=dtype)
    oracle = ResNet(cfg, seed=seed, dtype=np.float64)
    oracle.load_state_dict(model.state_dict())
    x = np.random.default_rng(0).standard_normal((4, 1, 8, 16))
    return model, oracle, x, np.arange(4) % 4


def suite_gradients() -> SuiteResult:
    worst = {}
    for dtype, tol in ((np.float32, 1e-3), (np.float64, 1e-6)):
        model, oracle, x, y = gradcheck_models(dtype)
        errs = finite_difference_check(model, oracle, x, y)
        worst[np.dtype(dtype).name] = (max(e[3] for e in errs), tol)
    ok = all(w < tol for w, tol in worst.values())
    detail = ", ".join(f"{k}: max rel {w:.2e} (< {tol:g})" for k, (w, tol) in worst.items())
    return SuiteResult("fd-gradients", ok, 40, detail)


def suite_schedule() -> SuiteResult:
    lr0, eta, total = 0.1, 0.001, 200
    checks = [
        abs(cosine_lr(0, total, lr0, eta) - lr0) <= 1e-12,
        abs(cosine_lr(total, total, lr0, eta) - eta) <= 1e-12,
        abs(cosine_lr(total / 2, total, lr0, eta) - (lr0 + eta) / 2) <= 1e-12,
    ]
    lrs = [cosine_lr(t, total, lr0, eta) for t in range(total + 1)]
    checks.append(all(a >= b for a, b in zip(lrs, lrs[1:])))
    return SuiteResult("cosine-schedule", all(checks), len(checks))


def suite_cmvn(seed: int = 5) -> SuiteResult:
    rng = np.random.default_rng(seed)
    corpus = [rng.normal(3.0, 2.5, size=(int(rng.integers(20, 200)), 80)) * rng.uniform(0.5, 2, 80)
              for _ in range(12)]
    stats = cmvn_fit(corpus)
    z = np.concatenate([cmvn_apply(f, stats).astype(np.float64) for f in corpus])
    mean_err = float(np.max(np.abs(z.mean(axis=0))))
    std_err = float(np.max(np.abs(z.std(axis=0) - 1)))
    ok = mean_err < 1e-5 and std_err < 1e-3
    return SuiteResult("cmvn-postconditions", ok, 160, f"|mean| {mean_err:.1e}, |std-1| {std_err:.1e}")


def _corrupted_decode(latent: S3LatentWeights) -> ShiftWeightCode:
    codes = s3_decode(latent)
    # negative control: exponent off by one
    return ShiftWeightCode(codes.zero, codes.sign, (codes.exponent + 1).astype(np.int8))


def run_selftest(corrupt_decode: bool = False) -> list[SuiteResult]:
    suites = [
        lambda: suite_enumeration(_corrupted_decode if corrupt_decode else s3_decode),
        suite_kernels,
        suite_gradients,
        suite_schedule,
        suite_cmvn,
    ]
    results = []
    for suite in suites:
        t0 = time.perf_counter()
        r = suite()
        r.seconds = time.perf_counter() - t0
        results.append(r)
    return results


def format_results(results: list[SuiteResult]) -> str:
    lines = [f"{'suite':<22}{'status':<8}{'checks':>7}{'time_s':>9}  detail"]
    for r in results:
        lines.append(f"{r.name:<22}{'PASS' if r.passed else 'FAIL':<8}{r.checks:>7}{r.seconds:>9.2f}  {r.detail}")
    return "\n".join(lines)
