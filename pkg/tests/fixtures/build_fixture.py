"""Regenerate the tiny evaluation fixture: dataset, checkpoint and recorded accuracy.

Run from the repository root:  python tests/fixtures/build_fixture.py
"""
import contextlib
import io
import json
from pathlib import Path

from shefu.cli import main

HERE = Path(__file__).parent / "tiny"
GEN = ["gen-data", "--seed", "3", "--n-scenes", "30", "--split-sizes", "40,12,12",
       "--feature-dim", "48", "--max-regions", "4", "--max-tokens", "12"]
TRAIN = ["train", "--seed", "1", "--steps", "40", "--eval-every", "20", "--batch-size", "4", "--lr", "1e-3",
         "--d-model", "8", "--layers", "2", "--heads", "2"]


def run(argv):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(argv)
    if code:
        raise SystemExit(f"{argv[0]} failed with exit code {code}")
    return buf.getvalue()


def build(root: Path = HERE) -> dict:
    run(GEN + ["--out", str(root / "data"), "--force"])
    run(TRAIN + ["--data", str(root / "data"), "--out", str(root / "run"), "--force"])
    out = run(["eval", "--checkpoint", str(root / "run" / "checkpoint.bin"), "--data", str(root / "data"),
               "--split", "val", "--split", "test"])
    rows = [line.split("\t") for line in out.strip().splitlines()]
    expected = {"eval_stdout": out, "accuracy": {r[0]: float(r[2]) for r in rows}}
    (root / "expected.json").write_text(json.dumps(expected, indent=2, sort_keys=True) + "\n")
    return expected


if __name__ == "__main__":
    print(json.dumps(build(), indent=2))
