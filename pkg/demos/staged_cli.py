"""Drive the command-line stages one by one and confirm a rerun is identical.

Run with ``python demos/staged_cli.py [outdir]``.
"""

import json
import shutil
import sys
import tempfile
from pathlib import Path

from pulsepair.cli import main, verify_manifest

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="pulsepair-"))
run = root / "sun"
VARIANTS = "baseline,phase_noise:1..4,tau_zero,modified_filter"
args = ["--scenario", "sun-transit", "--days", "0.35", "--seed", "5"]

main(["simulate", *args, "--out", str(run), "--workers", "2"])
main(["detect", "--in", str(run), "--workers", "2"])
main(["excise", "--in", str(run)])
main(["analyze", "--in", str(run), "--variant", VARIANTS])
main(["diagnose", "--in", str(run)])
main(["report", "--in", str(run)])
print((run / "report.txt").read_text())

again = root / "again"
shutil.rmtree(again, ignore_errors=True)
main(["run", *args, "--out", str(again)])
a = json.loads((run / "manifest.json").read_text())["files"]
b = json.loads((again / "manifest.json").read_text())["files"]
print("staged and one-shot runs identical:", a == b)
print("manifest intact:", verify_manifest(run) == [])
