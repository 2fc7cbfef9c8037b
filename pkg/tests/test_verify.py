"""The bundled finite-difference suite should pass on its own codebase."""

from dsq import tensor as T
from dsq.verify import gradient_suite, op_checks


class TestOpChecks:
    def test_every_operator_passes(self):
        reports = op_checks(tol=1e-4)
        assert len(reports) >= 12
        for name, rep in reports:
            assert rep.passed, f"{name}: {rep.summary()}"


class TestGradientSuite:
    def test_full_suite_passes_from_fast_mode(self):
        # the suite must switch itself into verify mode and switch back
        T.set_mode("fast")
        try:
            res = gradient_suite(max_elements=1)
            assert T.mode() == "fast"
        finally:
            T.set_mode("verify")
        assert res.passed
        assert res.max_rel_err < 1e-4
        assert res.seconds > 0.0
        lines = res.lines()
        assert len(lines) == len(res.reports) + 1
        assert all("PASS" in l for l in lines[:-1])
        assert lines[-1].startswith("suite PASS")
