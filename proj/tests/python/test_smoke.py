import hashlib
import os

import pytest

import sandboxd


@pytest.fixture(params=["async", "sync"])
def kernel(request):
    with sandboxd.Kernel(mode=request.param) as k:
        yield k


def test_run_reports_output_and_status(kernel):
    r = kernel.run("echo hello; cat /nope; exit 3")
    assert r.code == 3
    assert r.out == b"hello\n"
    assert b"/nope" in r.err
    assert kernel.run("no-such-command").code == 127


def test_stdin_and_pipeline(kernel):
    r = kernel.run("sort | head -n 2", stdin="pear\napple\nfig\n")
    assert r.text == "apple\nfig\n"


def test_files_round_trip(kernel):
    data = os.urandom(100000)
    kernel.stage_file("/data/blob", data)
    assert kernel.read_file("/data/blob") == data
    r = kernel.run("sha1sum /data/blob")
    assert r.text.split()[0] == hashlib.sha1(data).hexdigest()
    kernel.run("cat /data/blob > /data/copy")
    assert kernel.read_file("/data/copy") == data
    assert kernel.read_file("/missing") is None


def test_mounts_copy_host_directories(tmp_path):
    (tmp_path / "a.txt").write_text("b\na\nc\n")
    with sandboxd.Kernel(mounts=[(tmp_path, "/mnt")]) as k:
        assert k.run("sort /mnt/a.txt").text == "a\nb\nc\n"


def test_fork_depends_on_convention():
    with sandboxd.Kernel(mode="async") as k:
        assert k.run("forktest").code == 0
    with sandboxd.Kernel(mode="sync") as k:
        assert k.run("forktest").code == 2


def test_http_bridge_serves_vfs_files():
    with sandboxd.Kernel() as k:
        body = os.urandom(50000)
        k.stage_file("/www/x.bin", body)
        k.start_server("httpd -p 8080 -r /www", 8080)
        status, headers, got = k.http_get("/x.bin")
        assert status == 200
        assert got == body
        assert k.http_get("/nope")[0] == 404
        assert k.http("POST", "/x.bin", body=b"z")[0] == 405
        assert k.wait_idle()
        audit = k.audit()
        assert audit["live_tasks"] == 0
        assert audit["refcounts_ok"]
        assert audit["correlation_ok"]


def test_tasks_and_kill():
    with sandboxd.Kernel() as k:
        pid = k.start_server("echosrv -p 7", 7)
        assert any(t["pid"] == pid for t in k.tasks())
        assert k.kill(pid, 9) == 0
        assert k.wait_idle()


def test_bench_orders_modes():
    rows = sandboxd.bench_getpid(["baseline", "async", "sync"], 2000)
    assert [r["mode"] for r in rows] == ["baseline", "async", "sync"]
    assert rows[0]["ratio"] == 1.0
    assert all(r["n"] == 2000 and r["median_ns"] > 0 for r in rows)
    with pytest.raises(ValueError):
        sandboxd.bench_getpid(["bogus"], 2000)


def test_tables():
    names = sandboxd.trap_names()
    assert len(names) == 34
    assert {"fork", "pipe2", "getdents", "attach_heap"} <= set(names)
    assert {"sh", "cat", "sha1sum", "httpd"} <= set(sandboxd.programs())
    assert sandboxd.decode_chunked(b"3\r\nabc\r\n0\r\n\r\n") == b"abc"
    assert sandboxd.decode_chunked(b"3\r\nab") is None


def test_bad_mode_and_closed_kernel():
    with pytest.raises(ValueError):
        sandboxd.Kernel(mode="other")
    k = sandboxd.Kernel()
    k.close()
    with pytest.raises(RuntimeError):
        k.run("true")
