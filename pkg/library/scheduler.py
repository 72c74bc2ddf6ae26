import os
import queue
import threading
from functools import wraps
from typing import Callable, List, Sequence

import psutil

from library.log import logger


def async_job(threadname=None):
    """ wrapper to handle asynchronous threads """

    def decorator(func):
        """ Decorator to extend async_func """

        @wraps(func)
        def async_func(*args, **kwargs):
            """ create an asynchronous function to wrap around our thread """
            func_hl = threading.Thread(target=func, name=threadname, args=args, kwargs=kwargs, daemon=True)
            func_hl.start()
            return func_hl

        return async_func

    return decorator


def deterministic_mode() -> bool:
    return os.environ.get("MTL_DETERMINISTIC", "0").strip().lower() in ("1", "true", "yes")


def worker_count() -> int:
    """ MTL_DETERMINISTIC=1 forces one worker, otherwise MTL_NUM_THREADS or the physical core count """
    if deterministic_mode():
        return 1
    value = os.environ.get("MTL_NUM_THREADS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            logger.warning(f"Ignoring invalid MTL_NUM_THREADS={value!r}")
    return psutil.cpu_count(logical=False) or 1


def run_jobs(func: Callable, items: Sequence, num_workers: int = None) -> List:
    """
    Apply func to every item on a pool of worker threads. Results come back in
    item order whatever the completion order; the first failing item (by index)
    re-raises its exception in the caller.
    """
    num_workers = worker_count() if num_workers is None else num_workers
    if num_workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    jobs = queue.Queue()
    for index, item in enumerate(items):
        jobs.put((index, item))
    results = [None] * len(items)
    errors = []

    @async_job("Batch_Worker")
    def worker():
        while True:
            try:
                index, item = jobs.get_nowait()
            except queue.Empty:
                return
            try:
                results[index] = func(item)
            except Exception as e:
                errors.append((index, e))

    threads = [worker() for _ in range(min(num_workers, len(items)))]
    for thread in threads:
        thread.join()
    if errors:
        errors.sort(key=lambda error: error[0])
        raise errors[0][1]
    return results
