import os
import stat
import sys
import textwrap

import numpy as np
import pytest


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def write_script(path, body):
    """Executable Python script using the current interpreter."""
    path = os.fspath(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#!{sys.executable}\n")
        fh.write(textwrap.dedent(body))
    os.chmod(path, os.stat(path).st_mode | stat.S_IXUSR)
    return path


@pytest.fixture
def stub_dir(tmp_path):
    """Reconstructor stubs speaking the ``<cmd> in.png out.pmap`` protocol."""
    d = tmp_path / "stubs"
    d.mkdir()
    header = """
        import struct, sys
        from PIL import Image
        im = Image.open(sys.argv[1])
        w, h = im.size
        head = struct.pack("<4sBII", b"PMAP", 1, h, w)
    """
    stubs = {
        "echo": header + """
        vals = [((i * 7) % 11 - 5) / 500.0 for i in range(h * w)]
        open(sys.argv[2], "wb").write(head + struct.pack("<%df" % (h * w), *vals))
        """,
        "zero": header + """
        open(sys.argv[2], "wb").write(head + bytes(4 * h * w))
        """,
        "truncated": header + """
        open(sys.argv[2], "wb").write(head + bytes(4 * h * w - 3))
        """,
        "badmagic": header + """
        open(sys.argv[2], "wb").write(b"XMAP" + head[4:] + bytes(4 * h * w))
        """,
        "wrongsize": """
        import struct, sys
        open(sys.argv[2], "wb").write(struct.pack("<4sBII", b"PMAP", 1, 3, 3) + bytes(36))
        """,
        "nan": header + """
        open(sys.argv[2], "wb").write(head + struct.pack("<f", float("nan")) * (h * w))
        """,
        "fail": """
        import sys
        print("model weights not found", file=sys.stderr)
        sys.exit(3)
        """,
        "silent": """
        import sys
        """,
        "sleep": """
        import time
        time.sleep(30)
        """,
    }
    return {name: write_script(d / f"{name}.py", body) for name, body in stubs.items()}


def ref_echo_plane(h, w):
    vals = np.array([((i * 7) % 11 - 5) / 500.0 for i in range(h * w)], dtype=np.float32)
    return vals.reshape(h, w)
