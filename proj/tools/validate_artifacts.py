#!/usr/bin/env python3
"""Run every eblmm command on a small problem and validate each file it
reads or writes against schemas/eblmm.schema.json."""

import argparse
import csv
import json
import subprocess
import sys
import tempfile
from pathlib import Path

import jsonschema

STRING_COLUMNS = {"quantity", "term", "estimator", "variant"}


def parse_cell(key, text):
    if key in STRING_COLUMNS:
        return text
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def csv_rows(path):
    lines = [l for l in path.read_text(encoding="utf-8").splitlines() if not l.startswith("# ")]
    reader = csv.DictReader(lines)
    return [{k: parse_cell(k, v) for k, v in row.items()} for row in reader]


class Checker:
    def __init__(self, schema_path):
        self.schema = json.loads(Path(schema_path).read_text(encoding="utf-8"))
        jsonschema.Draft202012Validator.check_schema(self.schema)
        self.failures = 0
        self.checked = 0

    def validator(self, name):
        sub = {"$ref": f"#/$defs/{name}", "$defs": self.schema["$defs"]}
        return jsonschema.Draft202012Validator(sub)

    def report(self, path, name, errors):
        self.checked += 1
        if errors:
            self.failures += 1
            print(f"FAIL {path.name} ({name}): {errors[0].message}")
        else:
            print(f"ok   {path.name} ({name})")

    def json_file(self, path, name):
        doc = json.loads(path.read_text(encoding="utf-8"))
        self.report(path, name, list(self.validator(name).iter_errors(doc)))

    def csv_file(self, path, name):
        v = self.validator(name)
        rows = csv_rows(path)
        errors = [e for row in rows for e in v.iter_errors(row)]
        if not rows:
            errors = [jsonschema.ValidationError("no data rows")]
        self.report(path, name, errors)


def run(cli, command, config, expect=0):
    result = subprocess.run([cli, command, "--config", str(config)], capture_output=True, text=True)
    if result.returncode != expect:
        sys.exit(f"{command} exited {result.returncode}, expected {expect}: {result.stderr.strip()}")


def write_config(path, doc, checker, name):
    path.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    checker.json_file(path, name)
    return path


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--cli", required=True)
    parser.add_argument("--schema", required=True)
    parser.add_argument("--keep", help="write artifacts here instead of a temporary directory")
    args = parser.parse_args()
    check = Checker(args.schema)

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(args.keep or tmp)
        root.mkdir(parents=True, exist_ok=True)

        sim = root / "sim"
        cfg = write_config(root / "simulate.json",
                           {"scenario": "re_regularization", "individuals": 12, "replicates": 2,
                            "study": True, "output_dir": str(sim), "seed": 11},
                           check, "simulate_config")
        run(args.cli, "simulate", cfg)
        check.csv_file(sim / "dataset.csv", "dataset_row")
        check.json_file(sim / "truth.json", "truth")
        check.json_file(sim / "fit_config.json", "fit_config")
        check.csv_file(sim / "report.csv", "report_row")
        check.json_file(sim / "failures.json", "failures")

        eb = root / "fit_eb"
        fit_cfg = json.loads((sim / "fit_config.json").read_text(encoding="utf-8"))
        fit_cfg["data"] = str(sim / "dataset.csv")
        fit_cfg["output_dir"] = str(eb)
        cfg = write_config(root / "fit_eb.json", fit_cfg, check, "fit_config")
        run(args.cli, "fit", cfg)
        check.json_file(eb / "fit.json", "fit")
        check.csv_file(eb / "estimates.csv", "estimates_row")

        flat = root / "fit_flat"
        fit_cfg.update({"prior": {"mode": "flat"}, "output_dir": str(flat), "em": {"max_iterations": 200}})
        cfg = write_config(root / "fit_flat.json", fit_cfg, check, "fit_config")
        run(args.cli, "fit", cfg)
        check.json_file(flat / "fit.json", "fit")
        check.csv_file(flat / "estimates.csv", "estimates_row")

        fixed = root / "fit_fixed"
        fit_cfg.update({"prior": {"mode": "fixed", "lambda": 0.5,
                                  "effects": [{"strength": 0.5, "scale": 1.0}, {"strength": 0.7, "scale": 2.0}]},
                        "output_dir": str(fixed)})
        cfg = write_config(root / "fit_fixed.json", fit_cfg, check, "fit_config")
        run(args.cli, "fit", cfg)
        check.json_file(fixed / "fit.json", "fit")
        check.csv_file(fixed / "estimates.csv", "estimates_row")

        pred = root / "predict"
        cfg = write_config(root / "predict.json",
                           {"fit": str(eb / "fit.json"), "new_data": str(sim / "dataset.csv"),
                            "full_covariance": True, "output_dir": str(pred)},
                           check, "predict_config")
        run(args.cli, "predict", cfg)
        check.csv_file(pred / "predictions.csv", "predictions_row")
        check.csv_file(pred / "covariance.csv", "covariance_row")

        cv = root / "cv"
        effects = fit_cfg["random_effects"]
        cfg = write_config(root / "cv.json",
                           {"data": str(sim / "dataset.csv"), "response": "y",
                            "fixed_effects": fit_cfg["fixed_effects"], "unit": "individual", "splits": 2,
                            "em": {"max_iterations": 200},
                            "variants": [{"name": "individual", "random_effects": effects[:1]},
                                         {"name": "both", "random_effects": effects,
                                          "prior": {"mode": "fixed",
                                                    "effects": [{"strength": 0.5}, {"strength": 0.5}]}}],
                            "output_dir": str(cv), "seed": 3},
                           check, "cv_config")
        run(args.cli, "cv", cfg)
        check.csv_file(cv / "cv.csv", "cv_row")

        bad = root / "bad"
        cfg = root / "bad.json"
        cfg.write_text(json.dumps({"data": str(sim / "dataset.csv"), "response": "missing",
                                   "output_dir": str(bad)}), encoding="utf-8")
        run(args.cli, "fit", cfg, expect=2)
        check.json_file(bad / "error.json", "error")

    print(f"{check.checked} artifacts checked, {check.failures} invalid")
    return 1 if check.failures else 0


if __name__ == "__main__":
    sys.exit(main())
