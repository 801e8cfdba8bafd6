# src/workers.py

import threading
import queue
from src.logger import logger

"""
Producer/consumer job pool for within-stage parallelism.
- JobQueue is a thin thread-safe queue of (index, item) jobs.
- Worker threads consume jobs until they receive the None sentinel.
- run_jobs returns results in input order, whatever the number of workers.
"""


class JobQueue:
    """
    Thread-safe queue for managing jobs.
    """

    def __init__(self):
        self.q = queue.Queue()

    def put_job(self, job):
        """Adds a job to the queue."""
        self.q.put(job)

    def get_job(self):
        """Gets a job from the queue."""
        return self.q.get()

    def task_done(self):
        """Marks a job as completed."""
        self.q.task_done()


class Worker(threading.Thread):
    """
    Processes jobs from the queue and stores results by job index.
    """

    def __init__(self, job_queue, fn, results, errors, lock):
        """
        Initializes the Worker.

        Args:
            job_queue (JobQueue): Queue of (index, item) jobs.
            fn (callable): Function applied to every item.
            results (dict): Shared index -> result mapping.
            errors (list): Shared list of (index, exception) failures.
            lock (threading.Lock): Lock guarding results and errors.
        """
        super().__init__(daemon=True)
        self.job_queue = job_queue
        self.fn = fn
        self.results = results
        self.errors = errors
        self.lock = lock

    def run(self):
        while True:
            job = self.job_queue.get_job()
            if job is None:
                self.job_queue.task_done()
                break
            index, item = job
            try:
                result = self.fn(item)
                with self.lock:
                    self.results[index] = result
            except Exception as e:
                logger.error(f"Job {index} failed: {e}")
                with self.lock:
                    self.errors.append((index, e))
            self.job_queue.task_done()


def run_jobs(fn, items, jobs=1):
    """
    Applies fn to every item, optionally with a pool of worker threads.

    Args:
        fn (callable): Function of one item.
        items (iterable): Work items.
        jobs (int): Number of worker threads; 1 runs in the calling thread.

    Returns:
        list: Results in the order of items.

    Raises:
        Exception: The failure of the lowest-indexed failing job.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    job_queue = JobQueue()
    results = {}
    errors = []
    lock = threading.Lock()
    workers = [Worker(job_queue, fn, results, errors, lock) for _ in range(min(jobs, len(items)))]
    for w in workers:
        w.start()
    for index, item in enumerate(items):
        job_queue.put_job((index, item))
    for _ in workers:
        job_queue.put_job(None)
    for w in workers:
        w.join()

    if errors:
        errors.sort(key=lambda e: e[0])
        raise errors[0][1]
    return [results[i] for i in range(len(items))]
