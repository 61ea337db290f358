"""Experiment configuration, field files, the result cache and the pipeline
dispatcher behind the command line."""

import configparser
import csv
import hashlib
import io
import json
import logging
import math
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from ._validation import CapExceeded, InvariantViolation, ValidationError, check_int, check_real
from .model import ModelParams, SpaceTimeField

log = logging.getLogger("lacecp")

KINDS = ("simulate", "exact", "invert", "diagrams", "induct", "critical", "fit", "rw",
         "continuum", "scaled-range", "triangle")
BACKENDS = ("mc", "exact", "rw")
CACHE_ENV = "LACECP_CACHE"


# --- configuration ---------------------------------------------------------------

def _parse_value(text):
    text = text.strip()
    if "," in text:
        return [_parse_value(t) for t in text.split(",") if t.strip()]
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if "/" in text:
        num, _, den = text.partition("/")
        try:
            return float(num) / float(den)
        except ValueError:
            pass
    return text


@dataclass
class ExperimentConfig:
    """An experiment read from an INI-style file.

    Sections: [experiment] (kind, backend, samples, seed), [model] (d, L,
    eps, lambda or lambda_grid, n_max, R), [constants] (K1..K5, gamma,
    delta, rho, Delta), [options] (kind specific) and [output] (dir, input).
    Only [output] is left out of the hash.
    """

    kind: str
    backend: str = "exact"
    samples: int = 0
    seed: int = 0
    model: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    @classmethod
    def from_string(cls, text, overrides=()):
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ValidationError("config", str(exc)) from None
        for item in overrides:
            key, sep, value = item.partition("=")
            sec, dot, name = key.strip().partition(".")
            if not sep or not dot:
                raise ValidationError("override", f"expected section.key=value, got {item!r}")
            if not cp.has_section(sec):
                cp.add_section(sec)
            cp.set(sec, name, value.strip())
        sections = {s: {k: _parse_value(v) for k, v in cp.items(s)} for s in cp.sections()}
        unknown = set(sections) - {"experiment", "model", "constants", "options", "output"}
        if unknown:
            raise ValidationError(sorted(unknown)[0], "unknown config section")
        exp = sections.get("experiment", {})
        if "kind" not in exp:
            raise ValidationError("experiment.kind", "missing")
        cfg = cls(kind=str(exp["kind"]), backend=str(exp.get("backend", "exact")),
                  samples=exp.get("samples", 0), seed=exp.get("seed", 0),
                  model=sections.get("model", {}), constants=sections.get("constants", {}),
                  options=sections.get("options", {}), output=sections.get("output", {}))
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, overrides=()):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ValidationError("config", f"cannot read {path}: {exc.strerror}") from None
        return cls.from_string(text, overrides)

    def validate(self):
        if self.kind not in KINDS:
            raise ValidationError("experiment.kind", f"unknown kind {self.kind!r}")
        if self.backend not in BACKENDS:
            raise ValidationError("experiment.backend", f"unknown backend {self.backend!r}")
        check_int(self.samples, "experiment.samples", 0)
        check_int(self.seed, "experiment.seed", 0)
        if self.backend == "mc" and self.kind in ("simulate",) and self.samples < 1:
            raise ValidationError("experiment.samples", "Monte Carlo needs samples >= 1")
        if self.kind not in ("invert", "scaled-range"):
            for key in ("d", "L", "eps", "n_max"):
                if key not in self.model:
                    raise ValidationError(f"model.{key}", "missing")
            check_int(self.model["d"], "model.d", 1)
            check_int(self.model["L"], "model.L", 1)
            check_real(self.model["eps"], "model.eps", low=0.0, high=1.0, low_open=True)
            check_int(self.model["n_max"], "model.n_max", 0)
            if "lambda" not in self.model and "lambda_grid" not in self.model:
                raise ValidationError("model.lambda", "missing (or give lambda_grid)")
        for key, value in self.constants.items():
            check_real(value, f"constants.{key}", low=0.0, low_open=True)
        if self.kind == "invert" and "input" not in self.output:
            raise ValidationError("output.input", "invert needs an input field file")
        return self

    def canonical(self):
        return json.dumps({"kind": self.kind, "backend": self.backend, "samples": self.samples,
                           "seed": self.seed, "model": self.model, "constants": self.constants,
                           "options": self.options, "input": self.output.get("input")},
                          sort_keys=True, default=str)

    @property
    def hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def lambdas(self):
        grid = self.model.get("lambda_grid")
        if grid is not None:
            return [float(x) for x in (grid if isinstance(grid, list) else [grid])]
        return [float(self.model["lambda"])]

    def params(self, lam=None, n_max=None):
        from .kernel import make_uniform_kernel

        m = self.model
        lam = self.lambdas()[0] if lam is None else lam
        return ModelParams(make_uniform_kernel(int(m["d"]), int(m["L"])), float(m["eps"]),
                           float(lam), int(m["n_max"] if n_max is None else n_max),
                           int(m.get("R", -1)))

    def option(self, key, default=None):
        return self.options.get(key, default)


# --- field files ------------------------------------------------------------------

class FieldParseError(ValidationError):
    def __init__(self, path, line, message):
        super().__init__("field", f"{path}, line {line}: {message}")
        self.line = line


def sidecar_path(path):
    return Path(str(path) + ".json")


def field_to_text(fld, stderr=None):
    """CSV text: t_index, one column per coordinate, value[, stderr]."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["t_index"] + [f"x{i + 1}" for i in range(fld.d)] + ["value"]
    if stderr is not None:
        head.append("stderr")
    w.writerow(head)
    offs = fld.offsets()
    for n in range(fld.n_max + 1):
        vals = fld.values[n].reshape(-1)
        errs = None if stderr is None else stderr.values[n].reshape(-1)
        for i, x in enumerate(offs):
            row = [n] + [int(v) for v in x] + [repr(float(vals[i]))]
            if errs is not None:
                row.append(repr(float(errs[i])))
            w.writerow(row)
    return buf.getvalue()


def write_field(fld, path, meta=None, stderr=None):
    """Write the CSV and its JSON sidecar; returns the two paths."""
    fld.check_finite()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(field_to_text(fld, stderr))
    rec = {"d": fld.d, "eps": fld.eps, "n_max": fld.n_max, "R": fld.R,
           "kind": fld.meta.get("kind", "field")}
    rec.update(meta or {})
    side = sidecar_path(path)
    side.write_text(json.dumps(rec, sort_keys=True, indent=1, default=str) + "\n")
    return path, side


def read_field(path):
    """(field, stderr field or None, sidecar dict); bit-exact inverse of write_field."""
    path = Path(path)
    try:
        meta = json.loads(sidecar_path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError("field", f"{path}: unreadable sidecar ({exc})") from None
    for key in ("d", "eps", "n_max", "R"):
        if key not in meta:
            raise ValidationError("field", f"{path}: sidecar lacks {key!r}")
    d, n_max, R = int(meta["d"]), int(meta["n_max"]), int(meta["R"])
    fld = SpaceTimeField.zeros(d, float(meta["eps"]), n_max, R, kind=meta.get("kind", "field"))
    err = None
    side = 2 * R + 1
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ValidationError("field", f"cannot read {path}: {exc.strerror}") from None
    if not lines:
        raise FieldParseError(path, 1, "empty file")
    head = lines[0].split(",")
    want = ["t_index"] + [f"x{i + 1}" for i in range(d)] + ["value"]
    if head[: len(want)] != want or len(head) not in (len(want), len(want) + 1):
        raise FieldParseError(path, 1, f"header {head} does not match d={d}")
    has_err = len(head) == len(want) + 1
    if has_err:
        if head[-1] != "stderr":
            raise FieldParseError(path, 1, f"unexpected column {head[-1]!r}")
        err = SpaceTimeField.like(fld, kind="stderr")
    seen = np.zeros(fld.values.shape, dtype=bool)
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(head):
            raise FieldParseError(path, lineno, f"expected {len(head)} columns, got {len(parts)}")
        try:
            n = int(parts[0])
            x = tuple(int(v) for v in parts[1: d + 1])
            val = float(parts[d + 1])
            e = float(parts[d + 2]) if has_err else None
        except ValueError as exc:
            raise FieldParseError(path, lineno, str(exc)) from None
        if not 0 <= n <= n_max or any(abs(v) > R for v in x):
            raise FieldParseError(path, lineno, f"point {(n,) + x} outside the window")
        idx = (n,) + tuple(v + R for v in x)
        if seen[idx]:
            raise FieldParseError(path, lineno, f"duplicate point {(n,) + x}")
        seen[idx] = True
        fld.values[idx] = val
        if has_err:
            err.values[idx] = e
    if len(lines) - 1 != (n_max + 1) * side**d:
        raise FieldParseError(path, len(lines), f"expected {(n_max + 1) * side**d} rows, "
                                                f"got {len(lines) - 1}")
    fld.meta.update(meta)
    return fld, err, meta


# --- cache ------------------------------------------------------------------------

def cache_root(root=None):
    if root is not None:
        return Path(root)
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path.home() / ".cache" / "lacecp"


def cache_key(config_hash, stage):
    return hashlib.sha256(f"{config_hash}:{stage}".encode()).hexdigest()[:32]


class ResultCache:
    """Content-addressed store: one directory per key holding the artifact
    files and a manifest of their digests."""

    def __init__(self, root=None):
        self.root = cache_root(root)

    def _dir(self, key):
        return self.root / key[:2] / key

    def store(self, key, files):
        """files: {name: bytes}."""
        d = self._dir(key)
        tmp = d.with_name(d.name + ".tmp")
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        manifest = {}
        for name, data in sorted(files.items()):
            (tmp / name).write_bytes(data)
            manifest[name] = hashlib.sha256(data).hexdigest()
        (tmp / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))
        if d.exists():
            shutil.rmtree(d)
        tmp.rename(d)
        return d

    def _load(self, d):
        manifest = json.loads((d / "manifest.json").read_text())
        out = {}
        for name, digest in manifest.items():
            data = (d / name).read_bytes()
            if hashlib.sha256(data).hexdigest() != digest:
                raise ValueError(f"digest mismatch for {name}")
            out[name] = data
        return out

    def lookup(self, key):
        d = self._dir(key)
        if not d.exists():
            return None
        try:
            return self._load(d)
        except (OSError, ValueError) as exc:
            log.warning("cache entry %s is corrupt (%s); treating as a miss", key, exc)
            return None

    def gc(self, everything=False):
        """Remove corrupt or unfinished entries (all entries with ``everything``);
        returns the number removed."""
        removed = 0
        if not self.root.exists():
            return 0
        for bucket in self.root.iterdir():
            if not bucket.is_dir():
                continue
            for d in bucket.iterdir():
                drop = everything or d.name.endswith(".tmp")
                if not drop:
                    try:
                        self._load(d)
                    except (OSError, ValueError):
                        drop = True
                if drop:
                    shutil.rmtree(d, ignore_errors=True)
                    removed += 1
        return removed

    def field(self, key, compute):
        """Cached SpaceTimeField: lookup or compute-and-store."""
        hit = self.lookup(key)
        if hit is not None:
            meta = json.loads(hit["field.json"])
            values = np.frombuffer(hit["field.npy"], dtype="<f8").reshape(meta["shape"])
            return SpaceTimeField(meta["d"], meta["eps"], meta["n_max"], meta["R"],
                                  values.copy(), meta.get("meta", {}))
        fld = compute()
        meta = {"d": fld.d, "eps": fld.eps, "n_max": fld.n_max, "R": fld.R,
                "shape": list(fld.values.shape),
                "meta": {k: v for k, v in fld.meta.items() if isinstance(v, (str, int, float))}}
        self.store(key, {"field.json": json.dumps(meta, sort_keys=True).encode(),
                         "field.npy": np.ascontiguousarray(fld.values, dtype="<f8").tobytes()})
        return fld


def cached_pi_extractor(cfg, cache, n_max=None):
    """lambda -> pi field from the configured backend, cached per (lambda, horizon)."""
    from .exact import exact_pi_dp
    from .lace import random_walk_pi

    def extract(lam):
        p = cfg.params(lam=lam, n_max=n_max)
        key = cache_key(cfg.hash, f"pi:{cfg.backend}:{lam!r}:{p.n_max}")
        if cfg.backend == "rw":
            return random_walk_pi(p)
        if cfg.backend != "exact":
            raise ValidationError("experiment.backend", "pi extraction needs the exact backend")
        return cache.field(key, lambda: exact_pi_dp(p))

    return extract


# --- pipelines --------------------------------------------------------------------

def _stamp(cfg, **extra):
    rec = {"config_hash": cfg.hash, "code_version": __version__, "kind": cfg.kind,
           "backend": cfg.backend, "seed": cfg.seed, "samples": cfg.samples}
    rec.update(extra)
    return rec


def _field_meta(cfg, params, **extra):
    rec = _stamp(cfg, L=params.L, **{"lambda": params.lam})
    rec.update(extra)
    return rec


def _tau(cfg, params, cache):
    from .exact import exact_two_point_dp
    from .lace import forward_solve, random_walk_pi
    from .simulate import estimate_two_point

    if cfg.backend == "exact":
        key = cache_key(cfg.hash, f"tau:exact:{params.lam!r}:{params.n_max}")
        return cache.field(key, lambda: exact_two_point_dp(params)), None
    if cfg.backend == "rw":
        return forward_solve(random_walk_pi(params), params), None
    est = estimate_two_point(params, cfg.samples, cfg.seed)
    return est.mean, est.stderr


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    Path(path).write_text(buf.getvalue())


def _run_simulate(cfg, out, cache):
    from .simulate import estimate_pi0, estimate_two_point

    summary = {}
    for lam in cfg.lambdas():
        p = cfg.params(lam)
        est = estimate_two_point(p, cfg.samples, cfg.seed)
        write_field(est.mean, out / f"tau_lam{lam!r}.csv", _field_meta(cfg, p), est.stderr)
        rec = {"chi": list(est.extra("chi")[0]), "survival": list(est.extra("survival")[0])}
        if cfg.option("pi0", False):
            e0 = estimate_pi0(p, cfg.samples, cfg.seed)
            write_field(e0.mean, out / f"pi0_lam{lam!r}.csv", _field_meta(cfg, p, kind="pi0"),
                        e0.stderr)
        summary[repr(lam)] = rec
    return {"lambdas": summary}


def _run_exact(cfg, out, cache):
    from .exact import brute_force_piN, brute_force_two_point, exact_two_point_dp
    from .lace import invert_to_pi

    summary = {}
    for lam in cfg.lambdas():
        p = cfg.params(lam)
        tau = exact_two_point_dp(p)
        write_field(tau, out / f"tau_lam{lam!r}.csv", _field_meta(cfg, p, kind="tau"))
        pi = invert_to_pi(tau, p)
        write_field(pi, out / f"pi_lam{lam!r}.csv", _field_meta(cfg, p, kind="pi"))
        rec = {"tau_totals": [float(v) for v in tau.totals()]}
        if cfg.option("brute_force", False):
            bf = brute_force_two_point(p)
            rec["dp_vs_enumeration"] = float(np.max(np.abs(bf.values - tau.values)))
            for N in (0, 1):
                f = brute_force_piN(p, N)
                write_field(f, out / f"pi{N}_lam{lam!r}.csv", _field_meta(cfg, p, kind=f"pi{N}"))
        summary[repr(lam)] = rec
    return {"lambdas": summary}


def _run_invert(cfg, out, cache):
    from .kernel import make_uniform_kernel
    from .lace import invert_to_pi

    tau, _, meta = read_field(cfg.output["input"])
    lam = float(meta.get("lambda", cfg.model.get("lambda", 1.0)))
    L = int(meta.get("L", cfg.model.get("L", 1)))
    p = ModelParams(make_uniform_kernel(tau.d, L), tau.eps, lam, tau.n_max, tau.R)
    pi = invert_to_pi(tau, p)
    delta = SpaceTimeField.delta(tau.d, tau.eps, tau.n_max, tau.R)
    err0 = float(np.max(np.abs(pi.values[0] - delta.values[0])))
    err1 = float(np.max(np.abs(pi.values[1]))) if tau.n_max >= 1 else 0.0
    exact_input = meta.get("backend") in ("exact", "rw")
    if exact_input and (err0 > 1e-12 or err1 > 1e-12):
        raise InvariantViolation(f"pi slice 0 is not delta or slice 1 is not zero "
                                 f"({err0:.3g}, {err1:.3g})")
    write_field(pi, out / "pi.csv", dict(meta, kind="pi", config_hash=cfg.hash,
                                         code_version=__version__))
    return {"slice0_error": err0, "slice1_max": err1, "source_hash": meta.get("config_hash")}


def _run_diagrams(cfg, out, cache):
    from .diagrams import build_diagram_bounds

    p = cfg.params()
    tau, _ = _tau(cfg, p, cache)
    N_max = int(cfg.option("N_max", 2))
    b = build_diagram_bounds(tau, p, N_max, with_tilde=bool(cfg.option("tilde", False)))
    for N, P in enumerate(b.P):
        write_field(P, out / f"P{N}.csv", _field_meta(cfg, p, kind=f"P{N}"))
    for (N, n), P in b.P_tilde.items():
        write_field(P, out / f"Ptilde{N}_{n}.csv", _field_meta(cfg, p, kind=f"Ptilde{N}_{n}"))
    sums = [[float(v) for v in P.totals()] for P in b.P]
    return {"counts": b.counts, "slice_sums": sums}


def _run_induct(cfg, out, cache):
    from .induction import build_state, check_hypotheses, lambda_sequence

    p = cfg.params()
    extract = cached_pi_extractor(cfg, cache)
    lams = lambda_sequence(extract, p.n_max, p.eps)
    pi = extract(p.lam)
    c = cfg.constants
    K = {k: float(v) for k, v in c.items() if k in ("K1", "K2", "K3", "K4", "K5")}
    expo = None
    if all(k in c for k in ("gamma", "delta", "rho")):
        expo = (float(c["gamma"]), float(c["delta"]), float(c["rho"]))
    st = build_state(pi, p, M=cfg.option("M"), lambda_n=lams, K=K, exponents=expo,
                     Delta=float(c.get("Delta", 1.0)))
    rep = check_hypotheses(st)
    (out / "hypotheses.csv").write_text(rep.to_csv())
    _write_csv(out / "sequences.csv", ["n", "lambda_n", "v_n"],
               [(n, float(st.lambda_n[n]), float(st.v_n[n])) for n in range(st.n_max + 1)])
    worst = rep.worst
    return {"passed": rep.passed(), "worst": None if worst is None else
            {"m": worst[0], "hypothesis": worst[1], "k_index": worst[2], "margin": float(worst[5])},
            "measured_CK": st.measured_CK(), "excluded_points": len(rep.excluded),
            "reconstruction_error": max(st.reconstruction_error(m) for m in range(1, st.n_max + 1))
            if st.n_max else 0.0,
            "nested": rep.nesting_consistent(st), "gamma": st.gamma, "delta": st.delta,
            "rho": st.rho}


def _run_critical(cfg, out, cache):
    from .kernel import kernel_moments
    from .lace import bisect_critical, lace_constants

    p = cfg.params()
    extract = cached_pi_extractor(cfg, cache)
    lo = float(cfg.option("lo", 0.0))
    hi = cfg.option("hi")
    lam_c, hist = bisect_critical(extract, p, lo=lo, hi=None if hi is None else float(hi),
                                  tol=float(cfg.option("tol", 1e-4)))
    q = p.with_(lam=lam_c)
    consts = lace_constants(extract(lam_c), q, kernel_moments(p.kernel).sigma2)
    _write_csv(out / "bisection.csv", ["lambda", "residual"], hist)
    (out / "constants.json").write_text(consts.to_json() + "\n")
    return {"lambda_c": lam_c, "constants": json.loads(consts.to_json())}


def _run_fit(cfg, out, cache):
    from .analysis import gaussian_fit
    from .kernel import kernel_moments

    inputs = cfg.output.get("input")
    sigma2 = None
    if inputs:
        paths = inputs if isinstance(inputs, list) else [inputs]
        loaded = [read_field(pth) for pth in paths]
        hashes = {m.get("config_hash") for _, _, m in loaded}
        if len(hashes) > 1:
            raise ValidationError("output.input", "inputs come from different configurations")
        tau, _, meta = loaded[0]
        from .kernel import make_uniform_kernel
        sigma2 = kernel_moments(make_uniform_kernel(tau.d, int(meta.get("L", 1)))).sigma2
    else:
        p = cfg.params()
        tau, _ = _tau(cfg, p, cache)
        sigma2 = kernel_moments(p.kernel).sigma2
    times = cfg.option("times", tau.n_max * tau.eps)
    times = times if isinstance(times, list) else [times]
    fit = gaussian_fit(tau, sigma2, [float(t) for t in times], tau.d,
                       kappa2_max=float(cfg.option("kappa2_max", 0.5)),
                       n_kappa=int(cfg.option("n_kappa", 6)))
    (out / "fit.csv").write_text(fit.to_csv())
    (out / "fit.json").write_text(fit.to_json() + "\n")
    return json.loads(fit.to_json())


def _run_rw(cfg, out, cache):
    from .kernel import dual_axis
    from .lace import forward_solve, random_walk_pi, rw_closed_form

    rows, worst = [], 0.0
    for lam in cfg.lambdas():
        p = cfg.params(lam)
        tau = forward_solve(random_walk_pi(p), p)
        ax = dual_axis(int(cfg.option("M", 64)))
        kv = np.zeros((len(ax), p.d))
        kv[:, 0] = ax
        times = np.arange(p.n_max + 1) * p.eps
        disc, _ = rw_closed_form(p, kv, times)
        num = tau.hat(kv).real
        diff = np.abs(num - disc)
        worst = max(worst, float(diff.max()))
        for n in range(p.n_max + 1):
            for j in range(len(ax)):
                rows.append((lam, n, float(ax[j]), float(num[n, j]), float(disc[n, j]),
                             float(diff[n, j])))
    _write_csv(out / "rw_compare.csv", ["lambda", "t_index", "k", "forward", "closed_form",
                                        "abs_diff"], rows)
    if worst > 1e-10:
        raise InvariantViolation(f"forward solve departs from the closed form by {worst:.3g}")
    return {"max_abs_diff": worst}


def _run_continuum(cfg, out, cache):
    from .analysis import continuum_rw, continuum_study
    from .exact import exact_two_point_dp
    from .kernel import dual_axis

    p = cfg.params()
    t = float(cfg.option("t", 2.0))
    eps_list = cfg.option("eps_list", [1.0, 0.5, 0.25, 0.125])
    eps_list = [float(e) for e in (eps_list if isinstance(eps_list, list) else [eps_list])]
    if cfg.backend == "rw":
        kmax = float(cfg.option("k_max", math.pi))
        ax = dual_axis(int(cfg.option("M", 64)))
        kv = np.zeros((int(np.sum(np.abs(ax) <= kmax)), p.d))
        kv[:, 0] = ax[np.abs(ax) <= kmax]
        table = continuum_rw(p.kernel, p.lam, t, eps_list, kv)
    elif cfg.backend == "exact":
        box = cfg.option("box")

        def tau_at(e):
            q = ModelParams(p.kernel, e, p.lam, int(round(t / e)))
            return exact_two_point_dp(q, box=None if box is None else int(box))

        table = continuum_study(tau_at, eps_list, t)
    else:
        raise ValidationError("experiment.backend", "continuum runs on the exact or rw backend")
    (out / "continuum.json").write_text(table.to_json() + "\n")
    return json.loads(table.to_json())


def _run_scaled_range(cfg, out, cache):
    from .analysis import ScaledRangeConfig, scaled_range_experiment

    o = cfg.options
    for key in ("d", "b", "L1", "T"):
        if key not in o and key not in cfg.model:
            raise ValidationError(f"options.{key}", "missing")
    get = lambda k: o.get(k, cfg.model.get(k))
    sr = ScaledRangeConfig(int(get("d")), float(get("b")), float(get("L1")), float(get("T")))
    t_grid = o.get("t_grid")
    rep = scaled_range_experiment(
        sr, backend=cfg.backend, t_grid=None if t_grid is None else
        [float(x) for x in (t_grid if isinstance(t_grid, list) else [t_grid])],
        eps=float(cfg.model.get("eps", 1.0)), lam=float(cfg.model.get("lambda", 1.0)),
        samples=cfg.samples or 1000, seed=cfg.seed)
    (out / "scaled_range.json").write_text(rep.to_json() + "\n")
    (out / "fit.csv").write_text(rep.fit.to_csv())
    return {"alpha": sr.alpha, "L_T": sr.L_T, "A": rep.fit.A, "v": rep.fit.v,
            "drift": rep.fit.drift}


def _run_triangle(cfg, out, cache):
    from .analysis import triangle_estimate

    rows = []
    for lam in cfg.lambdas():
        p = cfg.params(lam)
        tau, _ = _tau(cfg, p, cache)
        a = triangle_estimate(tau, route="fourier")
        b = triangle_estimate(tau, route="x")
        rows.append((lam, a.value, b.value, abs(a.value - b.value), a.tail))
    _write_csv(out / "triangle.csv", ["lambda", "fourier", "x_space", "abs_diff", "tail"], rows)
    vals = [r[1] for r in rows]
    return {"values": vals, "monotone": bool(all(b >= a - 1e-14 for a, b in zip(vals, vals[1:]))),
            "max_route_diff": max(r[3] for r in rows)}


PIPELINES = {
    "simulate": _run_simulate, "exact": _run_exact, "invert": _run_invert,
    "diagrams": _run_diagrams, "induct": _run_induct, "critical": _run_critical,
    "fit": _run_fit, "rw": _run_rw, "continuum": _run_continuum,
    "scaled-range": _run_scaled_range, "triangle": _run_triangle,
}


def run_experiment(cfg, out_dir=None, cache=None):
    """Run the configured pipeline, write its artifacts and summary.json;
    returns the summary record."""
    cfg.validate()
    out = Path(out_dir or cfg.output.get("dir", f"runs/{cfg.kind}-{cfg.hash}"))
    out.mkdir(parents=True, exist_ok=True)
    cache = cache or ResultCache()
    result = PIPELINES[cfg.kind](cfg, out, cache)
    summary = _stamp(cfg, result=result)
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1,
                                                 default=_jsonable) + "\n")
    return summary


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


EXIT_CODES = ((ValidationError, 1), (InvariantViolation, 2), (CapExceeded, 3))


def exit_code(exc):
    from .kernel import DivergenceError

    if isinstance(exc, DivergenceError):
        return 1
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    raise exc
