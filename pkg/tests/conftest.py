"""Shared test helpers: finite-difference oracle, acceptance reporting."""

from __future__ import annotations

import numpy as np
import pytest

from raad.tensor import Tape, Tensor, backward

_CRITERION_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion.

    The recorded lines are echoed in the terminal summary, so every
    criterion's verdict is visible even when its assertions pass.
    """

    def record(number: int, ok: bool, detail: str) -> bool:
        verdict = "PASS" if ok else "FAIL"
        _CRITERION_LINES.append(f"criterion {number} {verdict}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERION_LINES):
            terminalreporter.write_line(line)


def fdcheck(build, arrays: dict[str, np.ndarray], wrt: list[str],
            eps: float = 1e-5, tol: float = 1e-4, max_entries: int = 60,
            seed: int = 0) -> float:
    """Compare analytic gradients of ``build`` against central differences.

    ``build`` maps {name: Tensor} to a scalar Tensor.  Returns the worst
    relative error over the probed entries and asserts it is within tol.
    """

    def run(vals, grad_names=()):
        tensors = {k: Tensor(v, requires_grad=(k in grad_names)) for k, v in vals.items()}
        if grad_names:
            with Tape() as tape:
                loss = build(tensors)
            backward(loss, tape)
            return loss.item(), {k: tensors[k].grad for k in grad_names}
        return build(tensors).item(), {}

    _, grads = run(arrays, tuple(wrt))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in wrt:
        base = arrays[name]
        flat_indices = np.arange(base.size)
        if base.size > max_entries:
            flat_indices = rng.choice(base.size, size=max_entries, replace=False)
        for fi in flat_indices:
            idx = np.unravel_index(fi, base.shape) if base.shape else ()
            plus = {k: v.copy() for k, v in arrays.items()}
            minus = {k: v.copy() for k, v in arrays.items()}
            plus[name][idx] += eps
            minus[name][idx] -= eps
            fp, _ = run(plus)
            fm, _ = run(minus)
            numeric = (fp - fm) / (2.0 * eps)
            analytic = grads[name][idx] if base.shape else float(grads[name])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)
            worst = max(worst, rel)
            assert rel <= tol, (
                f"{name}{tuple(idx)}: analytic {analytic} vs numeric {numeric} (rel {rel:.3g})")
    return worst
