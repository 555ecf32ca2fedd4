"""Command-line runner: ``ditlab <subcommand> --config FILE``.

Configs are INI files. Every subcommand reads its own section plus the shared
``[run]`` (seed) and, where a data family is needed, ``[family]``. Each run
writes CSV artifacts and a ``manifest.json`` into ``--out-dir``.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import math
import os
import platform
import re
import sys
import time
from dataclasses import replace

import numpy as np

from . import evaluation as ev
from . import localpoly as lp
from . import targets as tg
from . import training as tr
from . import transformer as tf
from . import uat
from .schedule import SamplerError, TimeWindow, backward_sample
from .seeds import stream

SUBCOMMANDS = ("train", "risk", "approx-sweep", "uat-demo", "cover", "tv", "trend", "sample")


class ConfigFieldError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


class Config:
    """Typed access to an INI document with line-aware diagnostics."""

    def __init__(self, text, path="<config>"):
        self.path = path
        self.text = text
        self.cp = configparser.ConfigParser(interpolation=None)
        self.cp.optionxform = str  # keys are case-sensitive (D and d differ)
        try:
            self.cp.read_string(text, source=path)
        except configparser.Error as exc:
            raise ConfigFieldError(_first_line(str(exc))) from None

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(fh.read(), path)

    def _line(self, section, key):
        sec = None
        for i, line in enumerate(self.text.splitlines(), 1):
            s = line.strip()
            m = re.match(r"\[(.+)\]$", s)
            if m:
                sec = m.group(1).strip()
            elif sec == section and re.match(rf"{re.escape(key)}\s*[=:]", s):
                return i
        return None

    def fail(self, section, key, msg):
        ln = self._line(section, key)
        where = f"{self.path}:{ln}" if ln else self.path
        raise ConfigFieldError(f"{where}: [{section}] {key}: {msg}")

    def has(self, section, key):
        return self.cp.has_option(section, key)

    def get(self, section, key, conv=str, default=None):
        if not self.cp.has_option(section, key):
            if default is None:
                self.fail(section, key, "missing required field")
            return default
        raw = self.cp.get(section, key).strip()
        try:
            return conv(raw)
        except (ValueError, TypeError, json.JSONDecodeError) as exc:
            self.fail(section, key, f"cannot parse {raw!r} ({exc})")

    def floats(self, section, key, default=None):
        return self.get(section, key, _float_list, default)

    def ints(self, section, key, default=None):
        return self.get(section, key, lambda s: [int(v) for v in _split(s)], default)


def _first_line(s):
    return s.strip().splitlines()[0] if s.strip() else s


def _split(s):
    return [v for v in re.split(r"[,\s]+", s.strip()) if v]


def _float_list(s):
    return [float(v) for v in _split(s)]


def _bool(s):
    v = s.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def family_from_config(cfg: Config):
    sec = "family"
    kind = cfg.get(sec, "kind", str, "standard")
    try:
        if kind == "standard":
            return tg.standard_gaussian(cfg.get(sec, "d_x", int, 1), cfg.get(sec, "d_y", int, 1))
        if kind == "gaussian":
            return tg.single_gaussian(cfg.floats(sec, "mean"), cfg.get(sec, "variance", float, 1.0),
                                      cfg.get(sec, "d_y", int, 1))
        if kind == "mixture":
            return ev.default_base_family()
        if kind == "product":
            return tg.ProductFamily(ev.default_base_family(), cfg.get(sec, "d_x", int))
        if kind == "strong":
            return tg.StrongHolderFamily(cfg.get(sec, "C2", float), cfg.get(sec, "base", float, 1.0),
                                         cfg.get(sec, "amplitude", float),
                                         tuple(cfg.floats(sec, "omegas")), cfg.get(sec, "nu", float, 1.0),
                                         cfg.get(sec, "phase", float, 0.0))
        if kind == "json":
            return tg.family_from_dict(cfg.get(sec, "spec", json.loads))
    except ConfigFieldError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        cfg.fail(sec, "kind", f"invalid {kind} family: {exc}")
    cfg.fail(sec, "kind", f"unknown family kind {kind!r}")


def train_config(cfg: Config, seed):
    sec = "train"
    g = lambda k, conv, d: cfg.get(sec, k, conv, d)
    try:
        window = TimeWindow(g("t0", float, 0.05), g("T", float, 4.0))
        return tr.TrainConfig(n=g("n", int, 2000), batch=g("batch", int, 64), lr=g("lr", float, 1e-2),
                              epochs=g("epochs", int, 50), window=window,
                              mask_prob=g("mask_prob", float, 0.5), time_draws=g("time_draws", int, 1),
                              seed=seed, clip=g("clip", float, 10.0))
    except ValueError as exc:
        if isinstance(exc, ConfigFieldError):
            raise
        cfg.fail(sec, "t0", str(exc))


# ---------------------------------------------------------------------------
# artifacts


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        vals = [r.get(h, "") for h in header] if isinstance(r, dict) else list(r)
        w.writerow([_fmt(v) for v in vals])
    data = buf.getvalue().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def _versions():
    import mpmath
    import scipy
    from importlib.metadata import PackageNotFoundError, version
    try:
        own = version("artifact")
    except PackageNotFoundError:
        own = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "mpmath": mpmath.__version__, "ditlab": own}


def write_manifest(out_dir, sub, cfg: Config, seed, artifacts):
    man = {"subcommand": sub, "config_sha256": hashlib.sha256(cfg.text.encode()).hexdigest(),
           "config_path": cfg.path, "seed": seed, "versions": _versions(),
           "artifacts": artifacts, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# subcommands; each returns {artifact name: sha256}


def _model_from_config(cfg, fam, rng):
    spec = tf.patch_spec(fam.d_x, cfg.get("model", "patch", int, 2))
    return tf.init_model(spec, fam.d_y, cfg.get("model", "n_blocks", int, 1), cfg.get("model", "s", int, 4),
                         cfg.get("model", "r", int, 16), rng)


def cmd_train(cfg, seed, out, workers):
    fam = family_from_config(cfg)
    tcfg = train_config(cfg, int(stream(seed, "train").integers(2**62)))
    model = _model_from_config(cfg, fam, stream(seed, "init"))
    data = fam.sample(stream(seed, "data"), tcfg.n)
    try:
        _, trace = tr.train(model, fam, tcfg, data=data)
        status = "ok"
    except tr.TrainingDiverged as exc:
        trace, status = exc.trace, "diverged"
    arts = {"trace.csv": write_csv(os.path.join(out, "trace.csv"), ["epoch", "loss"],
                                   [(i, v) for i, v in enumerate(trace)])}
    rows = []
    if status == "ok":
        tf.save_checkpoint(model, os.path.join(out, "model.bin"))
        mc = cfg.get("risk", "mc", int, 4000)
        rm = tr.score_risk(tr.model_score(model), fam, tcfg.window, mc, stream(seed, "risk"))
        rz = tr.score_risk(tr.zero_score, fam, tcfg.window, mc, stream(seed, "risk"))
        rows = [("model", rm.risk, rm.stderr, mc, status), ("zero", rz.risk, rz.stderr, mc, status)]
    else:
        rows = [("model", math.nan, math.nan, 0, status)]
    arts["risk.csv"] = write_csv(os.path.join(out, "risk.csv"), ["predictor", "risk", "stderr", "mc", "status"], rows)
    return arts


def cmd_risk(cfg, seed, out, workers):
    fam = family_from_config(cfg)
    window = TimeWindow(cfg.get("risk", "t0", float, 0.05), cfg.get("risk", "T", float, 4.0))
    mc = cfg.get("risk", "mc", int, 4000)
    preds = {"zero": tr.zero_score, "oracle": lambda x, y, t: tg.oracle_score(fam, x, y, t)}
    if cfg.has("risk", "checkpoint"):
        preds["checkpoint"] = tr.model_score(tf.load_checkpoint(cfg.get("risk", "checkpoint")))
    R = cfg.get("risk", "truncate", float, math.inf)
    rows = []
    for name, fn in preds.items():
        rep = tr.truncated_risk(fn, fam, window, R, mc, stream(seed, "risk"))
        rows.append((name, rep.risk, rep.stderr, mc))
    return {"risk.csv": write_csv(os.path.join(out, "risk.csv"), ["predictor", "risk", "stderr", "mc"], rows)}


def cmd_approx_sweep(cfg, seed, out, workers):
    fam = family_from_config(cfg)
    sec = "approx"
    Ns = cfg.ints(sec, "N", [2, 4, 8, 16])
    t = cfg.get(sec, "t", float, 0.5)
    C_x = cfg.get(sec, "C_x", float, 2.0)
    beta = cfg.get(sec, "beta", float, 2.0)
    lo, hi = cfg.floats(sec, "x_range", [-7.0, 7.0])
    xs = np.linspace(lo, hi, cfg.get(sec, "points", int, 1401))
    ys = cfg.floats(sec, "y_values", [0.1, 0.5, 0.9])
    strong = isinstance(fam, tg.StrongHolderFamily)
    rows = []
    for N in Ns:
        row = {"N": N, "k2": "", "generic_mse": math.nan, "strong_mse": math.nan, "status": "ok"}
        try:
            g = lp.GridSpec(N, C_x)
            h = lp.HolderParams(beta, int(beta), lp.choose_k2(N, beta, C_x))
            row["k2"] = h.k2
            pg = lp.taylor_table(fam, g, h, "density")
            row["generic_mse"] = lp.weighted_score_mse(lambda x, y, tt: lp.generic_score(pg, x, y, tt),
                                                       fam, t, xs, ys)
            if strong:
                ps = lp.taylor_table(fam, g, h, "tilt")
                row["strong_mse"] = lp.weighted_score_mse(lambda x, y, tt: lp.strong_score(ps, x, y, tt),
                                                          fam, t, xs, ys)
        except (ValueError, FloatingPointError) as exc:
            row["status"] = f"error:{type(exc).__name__}"
        rows.append(row)
    hdr = ["N", "k2", "generic_mse", "strong_mse", "status"]
    return {"approx.csv": write_csv(os.path.join(out, "approx.csv"), hdr, rows)}


UAT_TARGETS = {
    "sum": lambda Z: Z.sum(),
    "mean": lambda Z: Z.mean(),
    "max": lambda Z: Z.max(),
    "self_minus_mean": lambda Z: Z.sum(axis=0) - Z.mean(),
}


def cmd_uat_demo(cfg, seed, out, workers):
    sec = "uat"
    name = cfg.get(sec, "target", str, "sum")
    if name not in UAT_TARGETS:
        cfg.fail(sec, "target", f"choose one of {sorted(UAT_TARGETS)}")
    D, d, L = cfg.get(sec, "D", int, 3), cfg.get(sec, "d", int, 1), cfg.get(sec, "L", int, 2)
    try:
        net = uat.assemble_uat(UAT_TARGETS[name], D, d, L)
    except uat.ConfigError as exc:
        cfg.fail(sec, "D", str(exc))
    rows = []
    gf = net.grid
    for cell in gf.cells():
        c = gf.center(cell)
        o = net(c)
        lab = gf.labels[cell]
        rows.append({"cell": ";".join(",".join(map(str, col)) for col in cell),
                     "duplicate": int(gf.duplicate(cell)),
                     "label": ";".join(_fmt(v) for v in lab), "output": ";".join(_fmt(v) for v in o),
                     "abs_error": float(np.max(np.abs(o - lab)))})
    rep = uat.uat_report(net)
    arts = {"uat_cells.csv": write_csv(os.path.join(out, "uat_cells.csv"),
                                       ["cell", "duplicate", "label", "output", "abs_error"], rows)}
    summ = [(k, _fmt(v)) for k, v in rep.__dict__.items()]
    arts["uat_summary.csv"] = write_csv(os.path.join(out, "uat_summary.csv"), ["quantity", "value"], summ)
    return arts


def cmd_cover(cfg, seed, out, workers):
    sec = "cover"
    keys = ["eps_c", "n", "L", "R_T", "C_F", "C_F_2inf", "C_OV", "C_OV_2inf", "C_KQ", "C_KQ_2inf", "C_E"]
    vals = {k: cfg.get(sec, k, float) for k in keys}
    vals["d"] = cfg.get(sec, "d", int, 1)
    try:
        inp = ev.CoverInputs(**vals)
    except ValueError as exc:
        field = str(exc).split()[0]
        cfg.fail(sec, field if field in vals else "eps_c", str(exc))
    row = dict(vals, log_cover=ev.covering_bound(inp))
    hdr = keys + ["d", "log_cover"]
    return {"cover.csv": write_csv(os.path.join(out, "cover.csv"), hdr, [row])}


def cmd_tv(cfg, seed, out, workers):
    sec = "tv"
    n = cfg.get(sec, "n", int, 100000)
    bins = cfg.get(sec, "bins", int, 200)
    ma, sa = cfg.get(sec, "mean_a", float, 0.0), cfg.get(sec, "std_a", float, 1.0)
    mb, sb = cfg.get(sec, "mean_b", float, 1.0), cfg.get(sec, "std_b", float, 1.0)
    rng_a, rng_b = stream(seed, "tv", 0), stream(seed, "tv", 1)
    a = ma + sa * rng_a.standard_normal(n)
    b = mb + sb * rng_b.standard_normal(n)
    rg = cfg.floats(sec, "range", [min(ma - 6 * sa, mb - 6 * sb), max(ma + 6 * sa, mb + 6 * sb)])
    rep = ev.tv_estimate(a, b, bins, range=tuple(rg))
    return {"tv.csv": write_csv(os.path.join(out, "tv.csv"), ["tv", "bins", "samples_per_side"],
                                [(rep.tv, rep.bins, rep.samples_per_side)])}


def cmd_trend(cfg, seed, out, workers):
    sec = "trend"
    kind = cfg.get(sec, "kind", str, "t0")
    if kind not in ("d_x", "t0"):
        cfg.fail(sec, "kind", "must be d_x or t0")
    values = cfg.ints(sec, "values") if kind == "d_x" else cfg.floats(sec, "values")
    seeds = cfg.ints(sec, "seeds", [0, 1, 2])
    tcfg = train_config(cfg, 0)
    tc = ev.TrendConfig(kind=kind, d_x=cfg.get(sec, "d_x", int, 16), t0=cfg.get(sec, "t0", float, 0.05),
                        T=cfg.get(sec, "T", float, 4.0), n_blocks=cfg.get("model", "n_blocks", int, 1),
                        s=cfg.get("model", "s", int, 8), r=cfg.get("model", "r", int, 32),
                        train=replace(tcfg, epochs=cfg.get("train", "epochs", int, 30)),
                        test_n=cfg.get(sec, "test_n", int, 1000), risk_mc=cfg.get(sec, "risk_mc", int, 4000),
                        root_seed=seed)
    rows, med = ev.trend_experiment(values, seeds, tc, workers=workers)
    hdr = ["setting", "seed", "test_loss", "risk", "stderr", "norm_WO_2inf", "norm_WV_2inf", "test_stderr",
           "status"]
    arts = {"trend_cells.csv": write_csv(os.path.join(out, "trend_cells.csv"), hdr, rows)}
    mh = ["setting", "test_loss", "risk", "stderr", "norm_WO_2inf", "norm_WV_2inf", "test_stderr", "n_ok"]
    arts["trend_medians.csv"] = write_csv(os.path.join(out, "trend_medians.csv"), mh, med)
    return arts


def cmd_sample(cfg, seed, out, workers):
    fam = family_from_config(cfg)
    sec = "sample"
    window = TimeWindow(cfg.get(sec, "t0", float, 0.05), cfg.get(sec, "T", float, 8.0),
                        cfg.get(sec, "steps", int, 400))
    n = cfg.get(sec, "n", int, 1000)
    eta = cfg.get(sec, "eta", float, 0.0)
    y = np.asarray(cfg.floats(sec, "y", [0.5] * fam.d_y))
    if cfg.has(sec, "checkpoint"):
        model = tf.load_checkpoint(cfg.get(sec, "checkpoint"))
        score = lambda x, yy, s: ev.guided_score(model, x, np.broadcast_to(yy, (len(x), len(yy))),
                                                 np.full(len(x), s), eta)
    else:
        if eta:
            cfg.fail(sec, "eta", "guidance needs a checkpoint (the oracle has no unconditional branch)")
        score = lambda x, yy, s: tg.oracle_score(fam, x, np.broadcast_to(yy, (len(x), len(yy))), s)
    try:
        xs = backward_sample(score, window, y, stream(seed, "sample"), fam.d_x, n)
        status = "ok"
    except SamplerError as exc:
        xs, status = np.full((n, fam.d_x), np.nan), f"error:{exc}"
    hdr = [f"x{i}" for i in range(fam.d_x)]
    arts = {"samples.csv": write_csv(os.path.join(out, "samples.csv"), hdr, [tuple(r) for r in xs])}
    summ = [(i, float(np.mean(xs[:, i])), float(np.std(xs[:, i])), status) for i in range(fam.d_x)]
    arts["sample_summary.csv"] = write_csv(os.path.join(out, "sample_summary.csv"),
                                           ["coord", "mean", "std", "status"], summ)
    return arts


COMMANDS = {"train": cmd_train, "risk": cmd_risk, "approx-sweep": cmd_approx_sweep, "uat-demo": cmd_uat_demo,
            "cover": cmd_cover, "tv": cmd_tv, "trend": cmd_trend, "sample": cmd_sample}


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(prog="ditlab", description="Conditional diffusion-transformer experiments.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("config_pos", nargs="?", help="config file (alternative to --config)")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, help="root seed (overrides [run] seed)")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out-dir", default="out")
    return p


def run(subcommand, config_path, seed=None, workers=1, out_dir="out"):
    """Run one subcommand; returns the exit status."""
    if subcommand not in COMMANDS:
        print(f"unknown subcommand {subcommand!r}", file=sys.stderr)
        return 2
    try:
        cfg = Config.load(config_path) if config_path else Config("", "<empty>")
        if seed is None:
            seed = cfg.get("run", "seed", int, 0)
        os.makedirs(out_dir, exist_ok=True)
        arts = COMMANDS[subcommand](cfg, seed, out_dir, max(1, workers))
    except ConfigFieldError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    write_manifest(out_dir, subcommand, cfg, seed, arts)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    return run(args.subcommand, args.config or args.config_pos, args.seed, args.workers, args.out_dir)


if __name__ == "__main__":
    sys.exit(main())
