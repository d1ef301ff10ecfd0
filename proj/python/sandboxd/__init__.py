"""User-space Unix kernel: guest processes, pipes, sockets and an overlay filesystem."""

from dataclasses import dataclass

from . import _core
from ._core import bench_getpid, decode_chunked, programs, trap_names

__all__ = ["Kernel", "RunResult", "bench_getpid", "decode_chunked", "programs", "trap_names"]


@dataclass
class RunResult:
    code: int
    out: bytes
    err: bytes

    @property
    def text(self) -> str:
        return self.out.decode("utf-8", "replace")


class Kernel:
    """A booted kernel. Use as a context manager or call close()."""

    def __init__(self, mode="async", mounts=(), underlay="", pipe_capacity=0):
        self._k = _core.Kernel(mode, [(str(h), g) for h, g in mounts], underlay, pipe_capacity)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        self._k.close()

    def run(self, cmdline, stdin=b""):
        if isinstance(stdin, str):
            stdin = stdin.encode()
        return RunResult(*self._k.run(cmdline, stdin))

    def stage_file(self, path, data, mode=0o644):
        if isinstance(data, str):
            data = data.encode()
        self._k.stage_file(path, data, mode)

    def read_file(self, path):
        return self._k.read_file(path)

    def tasks(self):
        return self._k.tasks()

    def audit(self):
        return self._k.audit()

    def start_server(self, cmdline, port, timeout_ms=5000):
        return self._k.start_server(cmdline, port, timeout_ms)

    def http_get(self, path, port=8080, headers=()):
        return self._k.http("GET", path, port, b"", list(headers))

    def http(self, method, path, port=8080, body=b"", headers=()):
        return self._k.http(method, path, port, body, list(headers))

    def kill(self, pid, sig):
        return self._k.kill(pid, sig)

    def wait_idle(self, timeout_ms=5000):
        """Stops servers started here and waits for every task to finish."""
        return self._k.wait_idle(timeout_ms)
