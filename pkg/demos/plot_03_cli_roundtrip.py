"""
The command line end to end
===========================

Synthesize data, build a vocabulary, train a few steps, then ground a phrase.
Everything goes through ``ofa.cli.main`` so this is what a shell session does.
"""

import tempfile
from pathlib import Path

from ofa.cli import main

work = Path(tempfile.mkdtemp())

# data and vocabulary
main(["synth", "--n", "40", "--out", str(work / "data")])
main(["build-vocab", "--data", str(work / "data" / "data.jsonl"), "--out", str(work / "vocab")])

# a short nano run, overriding the step count from the flag
main([
    "train", "--data", str(work / "data" / "data.jsonl"), "--vocab", str(work / "vocab"),
    "--out", str(work / "run"), "--preset", "nano", "--tasks", "VG,ITM",
    "--steps", "40", "--batch-size", "8", "--log-every", "10", "--set", "warmup_ratio=0.1",
])

# look at the checkpoint, then ask for a box
main(["inspect-ckpt", str(work / "run" / "ckpt_final")])
image = sorted((work / "data" / "images").glob("*.ppm"))[0]
main([
    "generate", "ground", "--ckpt", str(work / "run" / "ckpt_final"), "--vocab", str(work / "vocab"),
    "--image", str(image), "--text", "red square",
])
