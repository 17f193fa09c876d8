from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowrun.throttle import RequestTooLarge, TokenBucket, throttle_acquire

MBPS40 = 40e6


def test_full_bucket_no_wait():
    tb = TokenBucket(MBPS40, 1e6, level=1e6)
    assert throttle_acquire(tb, 5e5, 0.0) == 0.0


def test_empty_bucket_one_second():
    tb = TokenBucket(MBPS40, 40e6)
    assert throttle_acquire(tb, 40e6, 0.0) == pytest.approx(1.0, abs=1e-12)


def test_back_to_back_reservations_add_up():
    tb = TokenBucket(MBPS40, 40e6)
    w1 = tb.acquire(20e6, 0.0)
    w2 = tb.acquire(20e6, 0.0)
    assert w1 == pytest.approx(0.5)
    assert w2 == pytest.approx(1.0)


def test_one_chunk_from_empty():
    tb = TokenBucket(MBPS40, 8 * 65536)
    assert tb.acquire(8 * 65536, 0.0) >= 64 * 1024 * 8 / 40e6 - 1e-15


def test_request_larger_than_burst():
    tb = TokenBucket(MBPS40, 1000)
    with pytest.raises(RequestTooLarge):
        tb.acquire(1001, 0.0)


@settings(max_examples=300, deadline=None)
@given(st.integers(1_000, 100_000_000), st.lists(st.integers(0, 524288), min_size=1, max_size=40))
def test_simultaneous_requests_release_at_prefix_sum_over_rate(rate, sizes):
    # empty bucket, everything asked for at t=0: request k leaves when the
    # first k+1 requests' bits have been refilled
    tb = TokenBucket(rate, 524288)
    total = Fraction(0)
    for bits in sizes:
        total += bits
        assert tb.acquire(bits, 0.0) == pytest.approx(float(total / rate), rel=1e-12, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.integers(1_000, 10_000_000), st.lists(st.integers(1, 100_000), min_size=1, max_size=20))
def test_well_spaced_requests_never_wait(rate, sizes):
    burst = 100_000
    tb = TokenBucket(rate, burst, level=burst)
    t = 0.0
    for bits in sizes:
        assert tb.acquire(bits, t) == 0.0
        t += burst / rate + 1.0  # long enough to refill completely


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 200), st.integers(1, 524288)), min_size=1, max_size=50))
def test_releases_stay_under_rate_from_empty(reqs):
    rate, burst = 40e6, 524288.0
    tb = TokenBucket(rate, burst, record=True)
    for t, bits in sorted(reqs):
        tb.acquire(bits, t / 100)
    released = 0.0
    for t, bits in sorted(tb.trace):
        released += bits
        assert released <= rate * t * (1 + 1e-12) + 1e-6
