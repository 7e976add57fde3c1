"""Tests for bounded thread fan-out"""

import threading
import time

import pytest

from errors import ConfigError
from workers import default_threads, run_bounded


@pytest.mark.parametrize("threads", [1, 2, 5])
def test_results_keep_call_order(threads):
    calls = [(lambda i=i: (time.sleep(0.01 * (5 - i)), i)[1]) for i in range(6)]
    assert run_bounded(calls, threads) == list(range(6))


def test_concurrency_is_bounded():
    active, peak = [0], [0]
    lock = threading.Lock()

    def work():
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        time.sleep(0.02)
        with lock:
            active[0] -= 1

    run_bounded([work] * 8, threads=3)
    assert 1 <= peak[0] <= 3


def test_thread_count_from_environment(monkeypatch):
    monkeypatch.setenv("GAMER_THREADS", "6")
    assert default_threads() == 6
    monkeypatch.delenv("GAMER_THREADS")
    assert default_threads() >= 1


@pytest.mark.parametrize("raw", ["zero", "0", "-2"])
def test_invalid_thread_settings(monkeypatch, raw):
    monkeypatch.setenv("GAMER_THREADS", raw)
    with pytest.raises(ConfigError):
        default_threads()
