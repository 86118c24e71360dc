# sinebeta_app/pool.py
from __future__ import annotations

import logging
import queue
import threading
import time
from typing import Callable, Dict, List, Sequence, Tuple, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
BlockFn = Callable[[Sequence[int]], List[T]]


class ReplicatePool:
    """
    Worker threads pulling fixed replicate blocks off a queue.

    Blocks are cut from the id list by batch_size alone, and results are merged
    by block index, so the output is the same for any worker count.
    """

    def __init__(self, workers: int = 1):
        if workers < 1:
            raise ValueError("run.workers must be >= 1")
        self.workers = workers
        self._lock = threading.Lock()
        self._stop = threading.Event()

    def map_blocks(self, fn: BlockFn, ids: Sequence[int], batch_size: int) -> List[T]:
        if batch_size < 1:
            raise ValueError("run.batch_size must be >= 1")
        ids = list(ids)
        blocks: List[Tuple[int, List[int]]] = [
            (k, ids[start:start + batch_size]) for k, start in enumerate(range(0, len(ids), batch_size))
        ]
        t0 = time.time()
        if self.workers == 1 or len(blocks) <= 1:
            out: List[T] = []
            for k, block in blocks:
                out.extend(fn(block))
                logger.debug("[Pool] block %d/%d done", k + 1, len(blocks))
        else:
            out = self._run_threads(fn, blocks)
        logger.info(
            "[Pool] %d replicates in %d blocks on %d worker(s): %.1fs",
            len(ids), len(blocks), self.workers, time.time() - t0,
        )
        return out

    def _run_threads(self, fn: BlockFn, blocks: List[Tuple[int, List[int]]]) -> List[T]:
        todo: "queue.SimpleQueue[Tuple[int, List[int]]]" = queue.SimpleQueue()
        for item in blocks:
            todo.put(item)
        results: Dict[int, List[T]] = {}
        errors: List[BaseException] = []
        self._stop.clear()

        def worker() -> None:
            while not self._stop.is_set():
                try:
                    k, block = todo.get_nowait()
                except queue.Empty:
                    return
                try:
                    res = fn(block)
                except BaseException as e:  # first failure stops the pool
                    with self._lock:
                        errors.append(e)
                    self._stop.set()
                    return
                with self._lock:
                    results[k] = res
                logger.debug("[Pool] block %d done", k)

        threads = [threading.Thread(target=worker, daemon=True) for _ in range(min(self.workers, len(blocks)))]
        for th in threads:
            th.start()
        for th in threads:
            th.join()

        if errors:
            raise errors[0]
        out: List[T] = []
        for k in sorted(results):
            out.extend(results[k])
        return out

