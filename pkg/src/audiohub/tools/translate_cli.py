"""Speech translation as a subprocess tool.

Contract: ``translate_cli <in0.wav> <out0.txt>``; ``--probe`` exits 0.
Runs the same decode-then-word-map logic as the in-process stub, but through
the file-based executor interface, so the subprocess path is exercised by
the default registry.
"""

from __future__ import annotations

import sys
from pathlib import Path


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if argv == ["--probe"]:
        return 0
    if len(argv) != 2:
        print("usage: translate_cli <in0.wav> <out0.txt> | --probe", file=sys.stderr)
        return 1
    from ..modality import read_wav
    from ..stubs import stub_translate

    try:
        result = stub_translate(read_wav(Path(argv[0]).read_bytes()))
    except Exception as exc:
        print(f"translation failed: {exc}", file=sys.stderr)
        return 2
    Path(argv[1]).write_text(result.text or "", encoding="utf-8")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
