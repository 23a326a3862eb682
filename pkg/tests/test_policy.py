import pytest
from hypothesis import assume, given, strategies as st

from fbmesh.core import CallResult, Request
from fbmesh.policy import (
    Decision,
    FailureWindow,
    RetryContext,
    RetryPolicy,
    estimate_p_fail,
    effective_timeout,
    max_attempts,
    retry_score,
    should_hedge,
    should_retry,
)

OK, TO = CallResult.OK, CallResult.TIMEOUT


@pytest.mark.parametrize(
    "sla,timeout,reserve,expected",
    [(300, 100, 0, 3), (300, 300, 0, 1), (300, 140, 0, 2), (300, 100, 50, 2), (300, 400, 0, 1)],
)
def test_max_attempts(sla, timeout, reserve, expected):
    assert max_attempts(RetryPolicy(sla, timeout, reserve)) == expected


def test_oversized_timeout_is_clamped():
    assert effective_timeout(RetryPolicy(300, 400, 20)) == 280


@given(st.integers(1, 2000), st.integers(1, 2000), st.integers(0, 1999))
def test_floor_sanity(sla, timeout, reserve):
    assume(reserve < sla)
    p = RetryPolicy(sla, timeout, reserve)
    assert max_attempts(p) * timeout <= sla - reserve + timeout - 1


def ctx(**kw):
    base = dict(attempts_used=1, elapsed_ms=100, p_fail_next=0.2, q_main=0.62, q_best_fallback=0.5636,
                amount=100_000, amount_cap=100_000)
    base.update(kw)
    return RetryContext(**base)


class TestShouldRetry:
    policy = RetryPolicy(300, 100, 0, retry_penalty=0.01)

    def test_certain_failure_goes_to_fallback(self):
        assert should_retry(self.policy, ctx(p_fail_next=1.0)) is Decision.GO_FALLBACK

    def test_no_quality_gain_goes_to_fallback(self):
        assert should_retry(self.policy, ctx(q_best_fallback=0.62)) is Decision.GO_FALLBACK

    def test_worked_example(self):
        assert retry_score(self.policy, ctx()) == pytest.approx(0.8 * 0.0564 - 0.01 / 3, abs=1e-12)
        assert retry_score(self.policy, ctx()) == pytest.approx(0.04179, abs=1e-5)
        assert should_retry(self.policy, ctx()) is Decision.RETRY_MAIN

    def test_attempts_exhausted(self):
        assert should_retry(self.policy, ctx(attempts_used=3, elapsed_ms=100)) is Decision.GO_FALLBACK

    def test_budget_cannot_fit_another_attempt(self):
        assert should_retry(self.policy, ctx(attempts_used=1, elapsed_ms=201)) is Decision.GO_FALLBACK
        assert should_retry(self.policy, ctx(attempts_used=1, elapsed_ms=200)) is Decision.RETRY_MAIN

    @given(
        used=st.integers(1, 6), elapsed=st.floats(0, 300), p=st.floats(0, 1),
        qm=st.floats(0, 1), qf=st.floats(0, 1), amount=st.integers(0, 300_000),
        sla=st.integers(50, 1000), timeout=st.integers(1, 500), lam=st.floats(0, 1),
    )
    def test_never_retries_without_budget(self, used, elapsed, p, qm, qf, amount, sla, timeout, lam):
        policy = RetryPolicy(sla, timeout, 0, retry_penalty=lam)
        c = ctx(attempts_used=used, elapsed_ms=elapsed, p_fail_next=p, q_main=qm, q_best_fallback=qf, amount=amount)
        if should_retry(policy, c) is Decision.RETRY_MAIN:
            assert sla - elapsed >= timeout
            assert used < max_attempts(policy)


@given(
    p=st.floats(0, 1), dp=st.floats(0, 1), qm=st.floats(0, 1), qf=st.floats(0, 1),
    amount=st.integers(0, 200_000), more=st.integers(0, 200_000), lam=st.floats(0, 1), dl=st.floats(0, 1),
)
def test_retry_score_monotonicity(p, dp, qm, qf, amount, more, lam, dl):
    pol = RetryPolicy(300, 100, retry_penalty=lam)
    base = ctx(p_fail_next=p, q_main=qm, q_best_fallback=qf, amount=amount)
    s = retry_score(pol, base)
    eps = 1e-12
    assert retry_score(pol, ctx(p_fail_next=p, q_main=qm, q_best_fallback=qf, amount=amount + more)) >= s - eps \
        or qm < qf
    if qm >= qf:
        assert retry_score(pol, ctx(p_fail_next=min(1.0, p + dp), q_main=qm, q_best_fallback=qf, amount=amount)) <= s + eps
    assert retry_score(RetryPolicy(300, 100, retry_penalty=lam + dl), base) <= s + eps
    assert retry_score(pol, ctx(p_fail_next=p, q_main=min(1.0, qm + dp), q_best_fallback=qf, amount=amount)) >= s - eps \
        or p == 1.0


class TestHedge:
    policy = RetryPolicy(hedge_value_threshold=10_000)

    def test_zero_amount(self):
        assert not should_hedge(self.policy, Request("r", 0, {}), True)

    def test_threshold_is_inclusive(self):
        assert should_hedge(self.policy, Request("r", 10_000, {}), True)

    def test_nothing_to_hedge_with(self):
        assert not should_hedge(self.policy, Request("r", 50_000, {}), False)


class TestPFail:
    def test_empty_prior(self):
        assert estimate_p_fail([], 5) == 0.0

    def test_half(self):
        assert estimate_p_fail([OK, TO, OK, TO], 4) == 0.5

    @pytest.mark.parametrize("window", [1, 3, 50])
    def test_all_timeouts(self, window):
        assert estimate_p_fail([TO] * 7, window) == 1.0

    def test_only_recent_counted(self):
        assert estimate_p_fail([TO, TO, OK, OK], 2) == 0.0

    def test_window_accumulator(self):
        w = FailureWindow(3, [OK, OK, OK])
        w.record(CallResult.FAILURE)
        assert w.estimate() == pytest.approx(1 / 3)


class TestPolicyConfig:
    def test_round_trip(self):
        p = RetryPolicy(250, 80, 20, 0.02, 5000, 10, 50_000)
        assert RetryPolicy.from_dict(p.to_dict()) == p

    def test_reserve_must_be_below_sla(self):
        with pytest.raises(ValueError):
            RetryPolicy(300, 100, 300)

    def test_unknown_field(self):
        with pytest.raises(ValueError, match="bogus"):
            RetryPolicy.from_dict({"bogus": 1})
