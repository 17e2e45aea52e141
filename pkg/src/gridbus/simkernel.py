"""Deterministic cooperative scheduler driving virtual-time test runs.

Role logic is written in ordinary blocking style (recv, sleep, accept) and
runs on real threads, but the kernel enforces a strict one-runnable-at-a-time
discipline: a task executes only while every other task is parked, and every
blocking operation is an explicit handoff back to the scheduler. Scheduling
order is fully determined by (wake time, admission order), so two runs of the
same scenario execute the same interleaving and read the same virtual clock.

Time is integer nanoseconds and advances only when no task is runnable.
"""

from __future__ import annotations

import heapq
import itertools
import threading
from collections import deque
from typing import Any, Callable, Optional

_NEW = "new"
_RUNNABLE = "runnable"
_RUNNING = "running"
_WAITING = "waiting"
_DONE = "done"

_WOKE_NOTIFY = "notify"
_WOKE_TIMER = "timer"


class TaskCancelled(BaseException):
    """Raised inside a task at its next wait point during kernel teardown.

    Derives from BaseException so ordinary `except Exception` cleanup in role
    code cannot swallow a cancellation.
    """


class SimDeadlock(RuntimeError):
    """Main task still alive but every task is blocked with no pending timer."""


class TaskFailed(RuntimeError):
    """A task raised; carries the original exception as __cause__."""


class SimTask:
    __slots__ = (
        "name", "kernel", "thread", "state", "woke", "cancel_pending",
        "error", "timer_gen", "_resume", "fn", "args", "daemon",
    )

    def __init__(self, kernel: "SimKernel", fn: Callable[..., Any], args: tuple,
                 name: str, daemon: bool):
        self.kernel = kernel
        self.fn = fn
        self.args = args
        self.name = name
        # Daemon tasks (servers, relays) are expected to outlive the main task
        # and are cancelled at teardown without counting as failures.
        self.daemon = daemon
        self.state = _NEW
        self.woke: Optional[str] = None
        self.cancel_pending = False
        self.error: Optional[BaseException] = None
        self.timer_gen = 0
        self._resume = threading.Event()
        self.thread = threading.Thread(target=self._run, name=f"sim:{name}", daemon=True)

    def _run(self) -> None:
        self._wait_for_resume()
        try:
            if not self.cancel_pending:
                self.fn(*self.args)
        except TaskCancelled:
            pass
        except BaseException as exc:  # noqa: BLE001 - surfaced via kernel.run
            self.error = exc
        finally:
            self.state = _DONE
            self.kernel._sched_wake.set()

    def _wait_for_resume(self) -> None:
        self._resume.wait()
        self._resume.clear()

    @property
    def done(self) -> bool:
        return self.state == _DONE


class WaitQueue:
    """FIFO queue of tasks blocked on one resource. Kernel-internal ordering."""

    __slots__ = ("waiters",)

    def __init__(self) -> None:
        self.waiters: deque[SimTask] = deque()


class SimKernel:
    """Virtual-time scheduler. Not reentrant; one controlling thread drives run()."""

    def __init__(self) -> None:
        self._now_ns = 0
        self._tie = itertools.count()
        self._runnable: deque[SimTask] = deque()
        # heap entries: (wake_ns, tie, task, gen). Stale entries (task resumed
        # by notify since, or no longer waiting) are skipped on pop.
        self._timers: list[tuple[int, int, SimTask, int]] = []
        self._tasks: list[SimTask] = []
        self._current: Optional[SimTask] = None
        self._sched_wake = threading.Event()

    # -- controlling-thread API -------------------------------------------------

    def now_ns(self) -> int:
        return self._now_ns

    def spawn(self, fn: Callable[..., Any], *args: Any, name: str = "task",
              daemon: bool = False) -> SimTask:
        task = SimTask(self, fn, args, name=name, daemon=daemon)
        self._tasks.append(task)
        task.state = _RUNNABLE
        self._runnable.append(task)
        task.thread.start()
        return task

    def run(self, main: SimTask) -> None:
        """Dispatch until `main` finishes, then cancel survivors and join all."""
        try:
            while True:
                task = self._next_runnable()
                if task is not None:
                    self._dispatch(task)
                    if task.error is not None and not isinstance(task.error, TaskCancelled):
                        raise TaskFailed(f"task {task.name!r} failed") from task.error
                    continue
                if self._fire_next_timer():
                    continue
                if main.done:
                    break
                alive = [t.name for t in self._tasks if not t.done]
                raise SimDeadlock(
                    f"all tasks blocked with no pending timers; alive: {alive}")
        finally:
            self._teardown()
        if main.error is not None and not isinstance(main.error, TaskCancelled):
            raise TaskFailed(f"task {main.name!r} failed") from main.error

    # -- task-facing primitives (call only from inside a running task) ----------

    def current(self) -> SimTask:
        task = self._current
        assert task is not None, "kernel primitive called outside a sim task"
        return task

    def sleep_ns(self, duration_ns: int) -> None:
        task = self.current()
        self._arm_timer(task, max(0, duration_ns))
        task.state = _WAITING
        self._switch_out(task)

    def wait_on(self, queue: WaitQueue, timeout_ns: Optional[int] = None) -> bool:
        """Block on `queue`; True if notified, False if the timeout fired."""
        task = self.current()
        queue.waiters.append(task)
        if timeout_ns is not None:
            self._arm_timer(task, max(0, timeout_ns))
        task.state = _WAITING
        self._switch_out(task)
        if task.woke == _WOKE_TIMER:
            try:
                queue.waiters.remove(task)
            except ValueError:
                pass
            return False
        return True

    def notify(self, queue: WaitQueue, n: Optional[int] = None) -> int:
        """Wake up to n waiters (all when n is None). Returns count woken."""
        woken = 0
        while queue.waiters and (n is None or woken < n):
            task = queue.waiters.popleft()
            task.timer_gen += 1  # invalidate any pending timeout
            task.woke = _WOKE_NOTIFY
            task.state = _RUNNABLE
            self._runnable.append(task)
            woken += 1
        return woken

    def yield_now(self) -> None:
        """Let every already-runnable task run before continuing."""
        task = self.current()
        task.woke = _WOKE_NOTIFY
        task.state = _RUNNABLE
        self._runnable.append(task)
        self._switch_out(task)

    # -- internals ---------------------------------------------------------------

    def _arm_timer(self, task: SimTask, delay_ns: int) -> None:
        heapq.heappush(
            self._timers,
            (self._now_ns + delay_ns, next(self._tie), task, task.timer_gen))

    def _switch_out(self, task: SimTask) -> None:
        self._sched_wake.set()
        task._wait_for_resume()
        if task.cancel_pending:
            raise TaskCancelled()

    def _next_runnable(self) -> Optional[SimTask]:
        while self._runnable:
            task = self._runnable.popleft()
            if task.state == _RUNNABLE:
                return task
        return None

    def _fire_next_timer(self) -> bool:
        while self._timers:
            wake_ns, _, task, gen = heapq.heappop(self._timers)
            if task.timer_gen != gen or task.state != _WAITING:
                continue  # stale: resumed by notify or already done
            self._now_ns = max(self._now_ns, wake_ns)
            task.timer_gen += 1
            task.woke = _WOKE_TIMER
            task.state = _RUNNABLE
            self._runnable.append(task)
            return True
        return False

    def _dispatch(self, task: SimTask) -> None:
        task.state = _RUNNING
        self._current = task
        self._sched_wake.clear()
        task._resume.set()
        self._sched_wake.wait()
        self._current = None

    def _teardown(self) -> None:
        for task in self._tasks:
            if task.done:
                continue
            task.cancel_pending = True
            task.timer_gen += 1
            self._sched_wake.clear()
            task._resume.set()
            self._sched_wake.wait()
        for task in self._tasks:
            task.thread.join(timeout=5.0)


class SimEvent:
    """One-shot broadcast flag usable from sim tasks (shutdown signaling)."""

    def __init__(self, kernel: SimKernel) -> None:
        self._kernel = kernel
        self._queue = WaitQueue()
        self._set = False

    def is_set(self) -> bool:
        return self._set

    def set(self) -> None:
        self._set = True
        self._kernel.notify(self._queue)

    def wait(self, timeout_ns: Optional[int] = None) -> bool:
        if self._set:
            return True
        return self._kernel.wait_on(self._queue, timeout_ns)
