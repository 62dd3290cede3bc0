"""Run synth -> train -> evaluate twice and compare output bytes; time 8 h inference."""

import argparse
import json
import tempfile
from pathlib import Path

from breathstage.cli import main as cli
from breathstage.experiments import digest_tree, time_inference
from breathstage.staging import StagingModelConfig


def pipeline(root: Path, spec: Path) -> dict:
    data, train, ev = root / "data", root / "train", root / "eval"
    assert cli(["synth", str(spec), str(data)]) == 0
    assert cli(["train", "--manifest", str(data / "manifest.csv"), "--out", str(train), "--epochs", "1"]) == 0
    assert cli(["evaluate", "--pred-dir", str(train / "predictions"), "--manifest", str(data / "manifest.csv"), "--out", str(ev)]) == 0
    return digest_tree(root)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--subjects", type=int, default=8)
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        spec = tmp / "spec.json"
        spec.write_text(json.dumps({"n_subjects": args.subjects, "night_hours": 1.0, "seed": 5}))
        a, b = pipeline(tmp / "a", spec), pipeline(tmp / "b", spec)
    print(f"{len(a)} files, identical: {a == b}")
    print(f"8 h inference, toy width: {time_inference():.2f} s")
    print(f"8 h inference, full width: {time_inference(StagingModelConfig()):.2f} s")


if __name__ == "__main__":
    main()
