"""Makes `import evplug` work without installing a wheel.

If the module is not importable, the extension is built with cargo and the
shared library is copied into a temporary directory on ``sys.path``.
"""

import importlib.util
import shutil
import subprocess
import sys
import sysconfig
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def _build() -> Path:
    subprocess.run(
        ["cargo", "build", "--release", "-p", "evplug-python", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    target = ROOT / "target" / "release"
    for name in ("libevplug.so", "libevplug.dylib", "evplug.dll"):
        if (target / name).exists():
            return target / name
    raise FileNotFoundError(f"no evplug library in {target}")


if importlib.util.find_spec("evplug") is None:
    out = Path(tempfile.mkdtemp(prefix="evplug-py-"))
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    shutil.copy(_build(), out / f"evplug{suffix}")
    sys.path.insert(0, str(out))
