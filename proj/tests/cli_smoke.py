#!/usr/bin/env python3
"""End-to-end checks of the fdl command line on a tiny configuration.

usage: cli_smoke.py <fdl binary> <report schema>
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

import jsonschema

TINY = {
    "seed": 3,
    "seeds": [1, 2],
    "data": {"scene": {"image_size": 64, "object_size": [10.0, 36.0]}, "train_count": 16, "test_count": 8},
    "optimizer": {"epochs": 1, "batch_size": 8},
    "probe": {"epochs": 1, "batch_size": 8},
    "theory": {"step": 0.5},
}

failures = []


def check(ok, what):
    print(("ok   " if ok else "FAIL ") + what)
    if not ok:
        failures.append(what)


def run(fdl, *args):
    return subprocess.run([fdl, *map(str, args)], capture_output=True, text=True)


def without_timestamp(path):
    report = json.loads(Path(path).read_text())
    report["provenance"].pop("generated_at")
    return report


def without_timestamp_copy(report):
    copy = json.loads(json.dumps(report))
    copy["provenance"].pop("generated_at")
    return copy


def main():
    fdl, schema_path = sys.argv[1], sys.argv[2]
    schema = json.loads(Path(schema_path).read_text())
    with tempfile.TemporaryDirectory(prefix="fdl_cli_") as tmp:
        tmp = Path(tmp)
        cfg = tmp / "tiny.json"
        cfg.write_text(json.dumps(TINY))

        r = run(fdl, "verify-theory", "--config", cfg, "--out", tmp / "theory")
        check(r.returncode == 0, "verify-theory exits 0 on the default grid")
        check((tmp / "theory" / "theory.csv").exists(), "verify-theory writes theory.csv")

        bad = dict(TINY, theory={"step": 0.5, "partner_min": -2.0})
        bad_cfg = tmp / "partner.json"
        bad_cfg.write_text(json.dumps(bad))
        r = run(fdl, "verify-theory", "--config", bad_cfg, "--out", tmp / "theory-neg")
        check(r.returncode == 1 and "counterexamples" in r.stderr,
              "verify-theory exits 1 and lists counterexamples with a negative partner axis")

        neg = dict(TINY, loss={"beta": -1})
        neg_cfg = tmp / "neg.json"
        neg_cfg.write_text(json.dumps(neg))
        r = run(fdl, "train", "--config", neg_cfg, "--data", tmp, "--out", tmp / "never")
        check(r.returncode == 2 and "/loss/beta" in r.stderr, "negative beta is a config error naming /loss/beta")

        r = run(fdl, "gen-data", "--config", cfg, "--out", tmp / "data")
        check(r.returncode == 0 and (tmp / "data" / "train" / "manifest.json").exists(), "gen-data writes splits")

        r = run(fdl, "train", "--config", cfg, "--data", tmp / "data", "--method", "rsc", "--out", tmp / "run")
        check(r.returncode == 0 and (tmp / "run" / "checkpoint.bin").exists(), "train writes a checkpoint")
        train_info = json.loads((tmp / "run" / "train.json").read_text())
        check(set(train_info["mean_probe_grad_norm"]) == {"m1", "m2"}, "train records both branch gradient norms")

        r = run(fdl, "train", "--config", cfg, "--data", tmp / "data", "--method", "rsc", "--out", tmp / "run")
        check(r.returncode != 0, "train refuses a non-empty output directory")
        r = run(fdl, "train", "--config", cfg, "--data", tmp / "data", "--method", "rsc", "--out", tmp / "run",
                "--force")
        again = json.loads((tmp / "run" / "train.json").read_text())
        check(r.returncode == 0 and again["checkpoint_sha256"] == train_info["checkpoint_sha256"],
              "train with --force replays the same checkpoint")

        r = run(fdl, "eval", "--config", cfg, "--checkpoint", tmp / "run", "--data", tmp / "data", "--out",
                tmp / "eval")
        ev = json.loads((tmp / "eval" / "eval.json").read_text()) if r.returncode == 0 else {}
        check(r.returncode == 0 and ev.get("checkpoint_sha256") == train_info["checkpoint_sha256"],
              "eval reads the checkpoint")

        r = run(fdl, "probe", "--config", cfg, "--checkpoint", tmp / "run", "--data", tmp / "data", "--branch", "m2",
                "--out", tmp / "probe")
        pr = json.loads((tmp / "probe" / "probe.json").read_text()) if r.returncode == 0 else {}
        check(r.returncode == 0 and 0.0 <= pr.get("ap50_95", -1) <= 1.0, "probe reports an AP in [0, 1]")

        r = run(fdl, "ablate", "--config", cfg, "--out", tmp / "abl1")
        check(r.returncode == 0, "ablate exits 0")
        report = json.loads((tmp / "abl1" / "report.json").read_text())
        try:
            jsonschema.validate(report, schema, cls=jsonschema.Draft202012Validator)
            check(True, "report.json matches the schema")
        except jsonschema.ValidationError as e:
            check(False, f"report.json matches the schema: {e.message}")
        for name in ["ablation.csv", "gradient_ratios.csv", "probes.csv", "gradient_trace_m1.svg",
                     "probes_ap50_95.svg"]:
            check((tmp / "abl1" / name).exists(), f"ablate writes {name}")

        r = run(fdl, "ablate", "--config", cfg, "--out", tmp / "abl2", "--workers", "2")
        check(r.returncode == 0 and without_timestamp(tmp / "abl1" / "report.json")["ablation"]
              == without_timestamp(tmp / "abl2" / "report.json")["ablation"],
              "ablate results do not depend on the worker count")
        r = run(fdl, "ablate", "--config", cfg, "--out", tmp / "abl1", "--force")
        check(r.returncode == 0 and without_timestamp(tmp / "abl1" / "report.json") == without_timestamp_copy(report),
              "ablate rerun is identical apart from generated_at")

        r = run(fdl, "ablate", "--config", cfg, "--out", tmp / "abl3", "--seed", "5")
        single = json.loads((tmp / "abl3" / "report.json").read_text()) if r.returncode == 0 else {}
        check(single.get("provenance", {}).get("seeds") == [5], "--seed narrows the ablation to one seed")

    print(f"{len(failures)} failure(s)")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
