"""
批次预取
生产者线程提前准备增强后的批次，通过有界队列交给训练线程
"""

import queue
import threading
from typing import Any, Callable, Iterator, Optional

_DONE = object()


class BatchPrefetcher:
    """
    有界队列预取器

    批次内容只取决于 make_batch(index) 的参数，与是否启用预取无关，
    因此训练结果在 workers=0 和 workers>0 时一致。
    """

    def __init__(
        self,
        make_batch: Callable[[int], Any],
        n_batches: int,
        workers: int = 1,
        depth: int = 2,
    ):
        """
        初始化预取器

        Args:
            make_batch: 按批次序号构造批次的纯函数
            n_batches: 批次总数
            workers: 0 表示在训练线程中同步构造；大于 0 时启用一个生产者线程
            depth: 队列容量
        """
        self.make_batch = make_batch
        self.n_batches = n_batches
        self.workers = workers
        self.depth = max(1, depth)
        self._error: Optional[BaseException] = None
        self._stop = threading.Event()

    def _produce(self, out: "queue.Queue[Any]") -> None:
        try:
            for index in range(self.n_batches):
                if self._stop.is_set():
                    return
                batch = self.make_batch(index)
                while not self._stop.is_set():
                    try:
                        out.put(batch, timeout=0.1)
                        break
                    except queue.Full:
                        continue
        except BaseException as e:  # 传回训练线程再抛出
            self._error = e
        finally:
            out.put(_DONE)

    def __iter__(self) -> Iterator[Any]:
        if self.workers <= 0:
            for index in range(self.n_batches):
                yield self.make_batch(index)
            return

        out: "queue.Queue[Any]" = queue.Queue(maxsize=self.depth)
        self._stop.clear()
        self._error = None
        thread = threading.Thread(target=self._produce, args=(out,), daemon=True)
        thread.start()
        try:
            while True:
                item = out.get()
                if item is _DONE:
                    break
                yield item
            if self._error is not None:
                raise self._error
        finally:
            self._stop.set()
            # 清空队列，让生产者能放入结束标记后退出
            while thread.is_alive():
                try:
                    out.get(timeout=0.1)
                except queue.Empty:
                    pass
            thread.join()
