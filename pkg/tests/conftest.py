"""Acceptance bookkeeping: each criterion test reports one summary line."""
import contextlib

import pytest

CRITERIA = {
    1: "transfer conservation",
    2: "stress oracles",
    3: "return-map suite",
    4: "kinematics consistency",
    5: "rigid-scene render invariance",
    6: "end-to-end physics sanity",
    7: "internal fill correctness",
    8: "determinism",
}
_KEY = pytest.StashKey[dict]()


class _Criterion:
    def __init__(self):
        self.checks = []

    def check(self, label, ok, detail=""):
        self.checks.append((label, bool(ok), detail))
        return ok

    @property
    def ok(self):
        return bool(self.checks) and all(c[1] for c in self.checks)


@pytest.fixture
def criterion(request):
    results = request.config.stash.setdefault(_KEY, {})

    @contextlib.contextmanager
    def run(number):
        c = _Criterion()
        try:
            yield c
        except Exception as exc:
            c.check("error", False, f"{type(exc).__name__}: {exc}")
            results[number] = c
            raise
        results[number] = c
        failed = [f"{label} ({detail})" for label, ok, detail in c.checks if not ok]
        assert not failed, "; ".join(failed)

    return run


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_KEY, {})
    if not results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, name in CRITERIA.items():
        c = results.get(n)
        if c is None:
            tr.write_line(f"[----] {n}. {name}: not run")
            continue
        detail = "; ".join(f"{label}: {d}" if d else label for label, _, d in c.checks)
        tr.write_line(f"[{'PASS' if c.ok else 'FAIL'}] {n}. {name}: {detail}")
