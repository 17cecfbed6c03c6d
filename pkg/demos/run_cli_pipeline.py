"""
The command-line pipeline
=========================

Drive ``synth -> pretrain -> finetune -> eval`` through the ``planktomae``
entry point with a tiny configuration, as a shell script would.
"""

import json
import subprocess
import sys
from pathlib import Path

work = Path("demo_output") / "cli"
work.mkdir(parents=True, exist_ok=True)
config = work / "tiny.json"
config.write_text(json.dumps({"num_labels": 4, "per_label": 40, "epochs": 5, "batch_size": 32,
                              "reference_lr": 6e-3, "finetune_epochs": 10, "finetune_warmup_epochs": 1,
                              "folds": "0,1"}))


def planktomae(*args):
    cmd = [sys.executable, "-m", "planktomae", *map(str, args), "--config", str(config)]
    print("$", " ".join(cmd[2:]))
    done = subprocess.run(cmd, capture_output=True, text=True)
    print(done.stdout or done.stderr)
    return done.returncode


planktomae("synth", "--out", work / "data")
planktomae("pretrain", "--manifest", work / "data/manifest.csv", "--out", work / "pre")
planktomae("finetune", "--manifest", work / "data/manifest.csv", "--checkpoint", work / "pre/checkpoint.bin",
           "--fraction", 0.1, "--out", work / "ft")
planktomae("eval", "--manifest", work / "ft/splits/fold0_test.csv", "--checkpoint", work / "ft/fold0/model.bin",
           "--out", work / "eval")
print((work / "ft/results.csv").read_text())

# errors come back as one JSON line and exit status 2
assert planktomae("pretrain", "--out", work / "bad", "--set", "mask_ratio=1.5") == 2
