"""Scheduler behavior: determinism, virtual time, timeouts, teardown."""

import pytest

from gridbus.simkernel import SimDeadlock, SimEvent, SimKernel, TaskFailed, WaitQueue


def run_main(fn, *args):
    kernel = SimKernel()
    main = kernel.spawn(fn, kernel, *args, name="main")
    kernel.run(main)
    return kernel


def test_sleep_advances_virtual_time():
    seen = {}

    def main(k):
        k.sleep_ns(1_500_000_000)
        seen["t"] = k.now_ns()

    kernel = run_main(main)
    assert seen["t"] == 1_500_000_000
    assert kernel.now_ns() == 1_500_000_000


def test_two_sleepers_interleave_by_wake_time():
    order = []

    def sleeper(k, label, delay):
        k.sleep_ns(delay)
        order.append((label, k.now_ns()))

    def main(k):
        k.spawn(sleeper, k, "b", 200, name="b")
        k.spawn(sleeper, k, "a", 100, name="a")
        k.sleep_ns(300)

    run_main(main)
    assert order == [("a", 100), ("b", 200)]


def test_notify_wakes_fifo_and_cancels_timeout():
    order = []
    q = {}

    def waiter(k, label):
        assert k.wait_on(q["wq"], timeout_ns=10_000) is True
        order.append(label)

    def main(k):
        q["wq"] = WaitQueue()
        k.spawn(waiter, k, "first", name="w1")
        k.spawn(waiter, k, "second", name="w2")
        k.sleep_ns(10)  # let both park
        k.notify(q["wq"])
        k.sleep_ns(10)

    kernel = run_main(main)
    assert order == ["first", "second"]
    assert kernel.now_ns() == 20  # the 10us timeouts never fired


def test_wait_timeout_fires_at_exact_deadline():
    seen = {}

    def main(k):
        wq = WaitQueue()
        assert k.wait_on(wq, timeout_ns=250) is False
        seen["t"] = k.now_ns()

    run_main(main)
    assert seen["t"] == 250


def test_event_set_before_wait_returns_immediately():
    def main(k):
        evt = SimEvent(k)
        evt.set()
        assert evt.wait(timeout_ns=0) is True

    run_main(main)


def test_task_exception_propagates_as_taskfailed():
    def boom(k):
        raise ValueError("bad wiring")

    def main(k):
        k.spawn(boom, k, name="boom")
        k.sleep_ns(100)

    with pytest.raises(TaskFailed) as ei:
        run_main(main)
    assert isinstance(ei.value.__cause__, ValueError)


def test_daemon_tasks_are_cancelled_at_teardown():
    progressed = []

    def server(k):
        evt = SimEvent(k)
        progressed.append("parked")
        evt.wait()  # never notified; cancelled at teardown
        progressed.append("unreachable")

    def main(k):
        k.spawn(server, k, name="srv", daemon=True)
        k.sleep_ns(50)

    kernel = run_main(main)
    assert progressed == ["parked"]
    assert all(t.done for t in kernel._tasks)


def test_deadlock_detected():
    def main(k):
        wq = WaitQueue()
        k.wait_on(wq)  # nobody will ever notify

    kernel = SimKernel()
    main_task = kernel.spawn(main, kernel, name="main")
    with pytest.raises(SimDeadlock):
        kernel.run(main_task)


def test_identical_runs_produce_identical_traces():
    def trace_run():
        trace = []

        def worker(k, label, delay):
            for i in range(3):
                k.sleep_ns(delay)
                trace.append((label, i, k.now_ns()))

        def main(k):
            k.spawn(worker, k, "x", 70, name="x")
            k.spawn(worker, k, "y", 110, name="y")
            k.sleep_ns(1000)

        kernel = SimKernel()
        main_task = kernel.spawn(main, kernel, name="main")
        kernel.run(main_task)
        return trace

    assert trace_run() == trace_run()
