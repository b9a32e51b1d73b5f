"""besovnet command line: build, verify, audit, classify, cover, calculus-fuzz.

Exit status is 0 when every certificate in the report passes, 1 when one
fails (the failing invariant is printed on stderr) and 2 for a bad config.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import os
import sys
import time
from importlib import resources

import jsonschema
import numpy as np

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2
COMMANDS = ("build", "verify", "audit", "classify", "cover", "calculus-fuzz")
MANIFOLDS = {"circle": "circle", "sphere": "sphere-2", "torus": "torus", "patch": "flat-patch"}
DEFAULT_D = {"circle": 3, "sphere": 4, "torus": 4, "patch": 3}


class ConfigError(ValueError):
    def __init__(self, message, schema_path=""):
        super().__init__(message)
        self.schema_path = schema_path


def load_config_schema():
    return json.loads(resources.files("besovnet").joinpath("schemas/config.schema.json").read_text())


def validate_config(cfg):
    validator = jsonschema.Draft202012Validator(load_config_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/" + "/".join(str(p) for p in e.absolute_path)
        raise ConfigError(f"config error at {where}: {e.message}", "/".join(str(p) for p in e.schema_path))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def _dump(obj):
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _write_csv(path, rows):
    rows = [_jsonable(r) for r in rows]
    keys = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (json.dumps(v) if isinstance(v, (dict, list)) else v) for k, v in r.items()})


class Outputs:
    """Writes report.json, rows.csv, budget_table.csv and optional documents into one directory."""

    def __init__(self, out_dir):
        self.dir = out_dir
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        return os.path.join(self.dir, name)

    def write_text(self, name, text):
        with open(self.path(name), "w") as fh:
            fh.write(text)

    def emit(self, cfg, command, checks, rows=(), summary=None, audit=None, timings=None, documents=None):
        passed = all(c["passed"] for c in checks) and (audit or {}).get("passed", True)
        # the output directory does not influence any result
        cfg = {k: v for k, v in cfg.items() if k != "out"}
        report = {"command": command, "config": cfg, "config_hash": config_hash(cfg), "seed": cfg.get("seed", 0),
                  "passed": passed, "checks": checks, "summary": summary or {}, "audit": audit or {}}
        self.write_text("report.json", _dump(report))
        _write_csv(self.path("rows.csv"), list(rows))
        _write_csv(self.path("budget_table.csv"),
                   [{"name": c["name"], "measured": c["measured"], "bound": c["bound"], "passed": c["passed"]}
                    for c in checks])
        self.write_text("timings.json", _dump(timings or {}))
        for name, text in (documents or {}).items():
            self.write_text(name, text)
        return report


def _check(name, measured, bound, passed=None):
    ok = bool(measured <= bound) if passed is None else bool(passed)
    return {"name": name, "measured": float(measured), "bound": float(bound), "passed": ok}


# ---------------------------------------------------------------- commands


def _manifold(cfg):
    from . import manifold_lab as ml

    params = dict(cfg.get("manifold") or {"kind": "circle"})
    kind = params.pop("kind")
    params.setdefault("D", DEFAULT_D[kind])
    params.setdefault("rotation_seed", 7)
    return ml.make_manifold(MANIFOLDS[kind], **params)


def _target(cfg, manifold):
    from . import manifold_lab as ml

    params = cfg.get("target") or {"family": "trig"}
    return ml.make_target(manifold, params["family"], params.get("params"), seed=cfg.get("seed", 0))


def cmd_build(cfg, out, log):
    from .approx_builder import build_theorem1_network
    from .network_ir import dumps

    manifold = _manifold(cfg)
    target = _target(cfg, manifold)
    consts = cfg.get("constants", {})
    b = cfg.get("build", {})
    kw = {"K": b.get("K", 2), "omega": b.get("omega"), "n_samples": b.get("n_samples", 10000),
          "collar_per_chart": b.get("collar_per_chart", 64), "max_refinements": b.get("max_refinements", 4),
          "C": consts.get("C", 1.0), "c": consts.get("c"), "c1": consts.get("c1"), "lam": consts.get("lambda")}
    net, rep = build_theorem1_network(target, manifold, cfg.get("eps", 0.1), seed=cfg.get("seed", 0),
                                      strict=False, log=log, **kw)
    checks = rep.checks + [_check("size_audit", 0.0, 0.0, rep.audit.get("passed", True))]
    return out.emit(cfg, "build", checks, rows=rep.rows, summary=rep.summary, audit=rep.audit,
                    timings=rep.timings, documents={"network.json": dumps(net) + "\n"})


def _suite_checks(rows):
    checks = []
    for name in dict.fromkeys(r["check"] for r in rows):
        sel = [r for r in rows if r["check"] == name]
        worst = max(r["max_dev"] for r in sel)
        checks.append(_check(name, worst, max(r["tolerance"] for r in sel), all(r["passed"] for r in sel)))
    return checks


def cmd_verify(cfg, out, log):
    from .suites import run_suite

    suite = cfg.get("suite", "all")
    fuzz = cfg.get("fuzz", {})
    kw = {k: fuzz[k] for k in ("instances", "inputs") if k in fuzz} if suite == "calculus" else {}
    rows, secs = run_suite(suite, seed=cfg.get("seed", 0), **kw)
    log(f"{len(rows)} rows in {secs:.1f}s")
    return out.emit(cfg, "verify", _suite_checks(rows), rows=rows, summary={"suite": suite, "rows": len(rows)},
                    timings={"suite": secs})


def cmd_fuzz(cfg, out, log):
    from .suites import calculus_suite

    fuzz = cfg.get("fuzz", {})
    t0 = time.perf_counter()
    rows = calculus_suite(seed=cfg.get("seed", 0), instances=fuzz.get("instances", 20),
                          inputs=fuzz.get("inputs", 100))
    secs = time.perf_counter() - t0
    return out.emit(cfg, "calculus-fuzz", _suite_checks(rows), rows=rows, summary={"rows": len(rows)},
                    timings={"suite": secs})


def _load_network(path):
    from .network_ir import DocumentError, loads

    try:
        with open(path) as fh:
            return loads(fh.read())
    except (OSError, DocumentError) as exc:
        raise ConfigError(f"cannot load network document {path}: {exc}", "properties/network") from exc


def cmd_audit(cfg, out, log):
    from .network_ir import audit

    if "network" not in cfg:
        raise ConfigError("audit needs a network document (positional argument or 'network' key)",
                          "properties/network")
    net = _load_network(cfg["network"])
    rep = audit(net)
    checks = [_check(f"envelope_{k}", rep.measured[k], rep.declared[k], rep.verdicts[k]) for k in rep.verdicts]
    return out.emit(cfg, "audit", checks, summary={"kind": type(net).__name__}, audit=rep.as_dict())


def cmd_cover(cfg, out, log):
    from .classifier_lab import CoveringInputs, covering_bound
    from .network_ir import ConvResNet

    inputs = dict(cfg.get("covering", {}))
    if "network" in cfg:
        net = _load_network(cfg["network"])
        if not isinstance(net, ConvResNet):
            raise ConfigError("covering bounds need a ConvResNet document", "properties/network")
        e = net.envelope
        inputs = {"M": e.M, "L": e.L, "J": e.J, "K": e.K, "kappa1": e.kappa1, "kappa2": e.kappa2, "D": net.D,
                  **inputs}
    inputs.setdefault("delta", cfg.get("eps", 0.01))
    try:
        x = CoveringInputs(**inputs)
    except TypeError as exc:
        raise ConfigError(f"covering inputs incomplete: {exc}", "properties/covering") from exc
    b = covering_bound(x)
    summary = {"inputs": x.__dict__, **b.as_dict()}
    checks = [_check("log_covering_finite", 0.0, 0.0, math.isfinite(b.log_N))]
    return out.emit(cfg, "cover", checks, rows=[summary], summary=summary)


def cmd_classify(cfg, out, log):
    from .classifier_lab import (
        SgdConfig,
        ResNetTemplate,
        build_classifier_network,
        erm_trend,
        excess_risk,
        make_label_model,
    )
    from .network_ir import dumps, eval_resnet
    from . import manifold_lab as ml

    cl = cfg.get("classifier", {})
    manifold = _manifold(cfg)
    model = make_label_model(manifold, cl.get("label_model", "sine"))
    F = cl.get("F", 2.0)
    eps = cl.get("eps", cfg.get("eps", 0.01))
    seed = cfg.get("seed", 0)
    consts = cfg.get("constants", {})
    net, rep = build_classifier_network(model, F, eps, seed=seed, strict=False, log=log,
                                        n_samples=cl.get("n_samples", 10000), C=consts.get("C", 1.0))
    checks = list(rep.checks)
    summary = dict(rep.summary)
    rows = []
    timings = dict(rep.timings)
    erm = cl.get("erm")
    if erm is not None:
        t0 = time.perf_counter()
        tmpl = ResNetTemplate(D=manifold.D, channels=erm.get("channels", 6), blocks=erm.get("blocks", 3), F=F)
        sgd = SgdConfig(lr=erm.get("lr", 1e-2), epochs=erm.get("epochs", 50), batch=erm.get("batch", 32))
        n_test = erm.get("n_test", 100000)
        rows = erm_trend(model, erm.get("ns", [500, 2000, 8000]), seeds=erm.get("seeds", 5), n_test=n_test,
                         template=tmpl, config=sgd, seed=seed, log=log)
        med = [r["excess_risk"] for r in rows if r["seed"] == "median"]
        decreasing = all(b < a for a, b in zip(med, med[1:]))
        checks.append(_check("erm_median_trend_decreasing", float(not decreasing), 0.0, decreasing))
        Xt = ml.sample(manifold, n_test, seed + 1000003)
        risk, se = excess_risk(eval_resnet(net, Xt), model(Xt))
        bound = 4 * math.exp(F) * eps + 8 * F * math.exp(-F)
        checks.append(_check("constructed_excess_risk", risk, bound + 3 * se))
        summary["constructed_excess_risk"] = {"value": risk, "standard_error": se, "bound": bound}
        timings["erm"] = time.perf_counter() - t0
    return out.emit(cfg, "classify", checks, rows=rows, summary=summary, audit=rep.audit, timings=timings,
                    documents={"network.json": dumps(net) + "\n"})


HANDLERS = {"build": cmd_build, "verify": cmd_verify, "audit": cmd_audit, "classify": cmd_classify,
            "cover": cmd_cover, "calculus-fuzz": cmd_fuzz}


# ---------------------------------------------------------------- entry point


def build_parser():
    p = argparse.ArgumentParser(prog="besovnet", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("network", nargs="?", help="network document (audit, cover)")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="64-bit seed")
    p.add_argument("--eps", type=float, help="target accuracy")
    p.add_argument("--manifold", choices=sorted(MANIFOLDS))
    p.add_argument("--out", help="output directory (default: besovnet-out)")
    p.add_argument("--suite", choices=["calculus", "gadgets", "all"])
    p.add_argument("--quiet", action="store_true")
    return p


def merge_config(args):
    cfg = {}
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object", "type")
        validate_config(cfg)
    cfg = copy.deepcopy(cfg)
    cfg["command"] = args.command
    if args.network:
        cfg["network"] = args.network
    for key in ("seed", "eps", "out", "suite"):
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    if args.manifold:
        m = dict(cfg.get("manifold", {}))
        if m.get("kind") not in (None, args.manifold):
            m = {}
        m["kind"] = args.manifold
        cfg["manifold"] = m
    validate_config(cfg)
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    log = (lambda *a: None) if args.quiet else (lambda *a: print(*a, file=sys.stderr))
    try:
        cfg = merge_config(args)
        out = Outputs(cfg.get("out", "besovnet-out"))
        report = HANDLERS[cfg["command"]](cfg, out, log)
    except ConfigError as exc:
        print(f"{exc}" + (f" (schema path: {exc.schema_path})" if exc.schema_path else ""), file=sys.stderr)
        return EXIT_CONFIG
    failed = [c["name"] for c in report["checks"] if not c["passed"]]
    if not report["audit"].get("passed", True):
        failed.append("size_audit")
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAILED
    log(f"ok: {len(report['checks'])} checks passed; report in {out.path('report.json')}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
