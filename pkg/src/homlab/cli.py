"""Command-line front end: ``homlab simulate | sample | reconstruct | roundtrip | check-matrix``.

Exit codes: 0 success, 1 round-trip failure, 2 invalid configuration or
arguments, 3 physically inconsistent input.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import math
import os
import sys
import tempfile
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import core, optics, tomography
from .core import (
    DensityMatrix,
    Grid,
    HomlabError,
    ParticleStatistics,
    WaveFunction,
    global_phase_distance,
)
from .interferometer import (
    CountTable,
    OutcomeTable,
    joint_probabilities_mixed,
    joint_probabilities_polarized,
    joint_probabilities_pure,
    read_table_csv,
    sample_counts,
    table_csv_text,
    table_from_exclusive,
    total_probability,
)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_PHYSICS = 0, 1, 2, 3

ROUNDTRIP_TOL = {"pure": 1e-8, "polarization": 1e-10, "re-im-combined": 1e-10, "lossy-single": 1e-10}
LOSSY_ETA = math.sqrt(2) - 1


class ConfigError(Exception):
    """Invalid configuration; carries a line number when one can be located."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class PhysicsError(Exception):
    pass


# --- configuration ----------------------------------------------------------

@dataclass
class RunConfig:
    raw: dict
    text: str
    base_dir: Path
    grid: Grid
    statistics: ParticleStatistics
    setup: dict
    unknown: dict
    reference: dict
    output: dict

    @property
    def digest(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def _line_of(text: str, key: str) -> Optional[int]:
    needle = f'"{key}"'
    pos = text.find(needle)
    return None if pos < 0 else text.count("\n", 0, pos) + 1


def _single_key(obj, what: str, text: str, allowed) -> tuple[str, object]:
    if isinstance(obj, str):
        key, val = obj, {}
    elif isinstance(obj, dict) and len(obj) == 1:
        key, val = next(iter(obj.items()))
    else:
        raise ConfigError(f"{what} must name exactly one of {sorted(allowed)}", _line_of(text, what))
    if key not in allowed:
        raise ConfigError(f"unknown {what} {key!r}; expected one of {sorted(allowed)}",
                          _line_of(text, key) or _line_of(text, what))
    return key, val


def _number(d: dict, key: str, text: str, kind=float, default=None):
    if key not in d:
        if default is not None:
            return default
        raise ConfigError(f"missing {key!r}", None)
    val = d[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)) or \
            (kind is int and int(val) != val):
        raise ConfigError(f"{key!r} must be {'an integer' if kind is int else 'a number'}",
                          _line_of(text, key))
    return kind(val)


_PURE_SOURCES = {"file", "builtin", "gaussian", "ramp", "random"}


def _check_pure_spec(spec, text: str, base: Path, grid: Grid) -> dict:
    key, val = _single_key(spec, "pure", text, _PURE_SOURCES)
    if key == "builtin":
        key, val = _single_key(val, "builtin", text, {"gaussian", "ramp", "random"})
    if not isinstance(val, (dict, str)):
        raise ConfigError(f"{key} parameters must be an object", _line_of(text, key))
    if key == "file":
        _check_file(val, text, base)
        return {"file": val}
    if key == "gaussian":
        center = _number(val, "center", text)
        width = _number(val, "width", text)
        if not grid.x_min <= center <= grid.x_max or width <= 0:
            raise ConfigError("gaussian center must lie in the grid window and width be positive",
                              _line_of(text, "gaussian"))
        return {"gaussian": {"center": center, "width": width}}
    if key == "ramp":
        return {"ramp": {"k": _number(val, "k", text)}}
    return {"random": {"seed": _number(val, "seed", text, int)}}


def _check_file(name, text: str, base: Path) -> None:
    if not isinstance(name, str) or not (base / name).is_file():
        raise ConfigError(f"referenced file {name!r} does not exist", _line_of(text, "file")
                          or _line_of(text, "matrix"))


def load_config(path: str) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, p.resolve().parent)


def parse_config(text: str, base: Path) -> RunConfig:
    """Validate config text; relative file names resolve against ``base``."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc.msg} (column {exc.colno})", exc.lineno) from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", 1)
    for key in ("grid", "setup", "unknown"):
        if key not in raw:
            raise ConfigError(f"missing required section {key!r}")
    g = raw["grid"]
    if not isinstance(g, dict):
        raise ConfigError("grid must be an object", _line_of(text, "grid"))
    try:
        grid = Grid(_number(g, "n", text, int), _number(g, "x_min", text), _number(g, "x_max", text))
    except core.ValidationError as exc:
        raise ConfigError(str(exc), _line_of(text, "grid")) from None
    try:
        statistics = ParticleStatistics.parse(raw.get("statistics", "boson"))
    except core.ValidationError as exc:
        raise ConfigError(str(exc), _line_of(text, "statistics")) from None

    kind, val = _single_key(raw["setup"], "setup", text, {"balanced", "polarization", "lossy", "custom"})
    setup = {"kind": kind}
    if kind == "lossy":
        eta = _number(val if isinstance(val, dict) else {}, "eta", text)
        if not 0 <= eta <= 1:
            raise ConfigError("eta must lie in [0, 1]", _line_of(text, "eta"))
        setup["eta"] = eta
    elif kind == "custom":
        if not isinstance(val, dict) or "matrix" not in val:
            raise ConfigError("custom setup needs a 'matrix' file", _line_of(text, "custom"))
        _check_file(val["matrix"], text, base)
        setup["matrix"] = val["matrix"]

    ukind, uval = _single_key(raw["unknown"], "unknown", text, {"pure", "mixed"})
    if ukind == "pure":
        unknown = {"pure": _check_pure_spec(uval, text, base, grid)}
    else:
        mkind, mval = _single_key(uval, "mixed", text, {"file", "random"})
        if mkind == "file":
            _check_file(mval, text, base)
            unknown = {"mixed": {"file": mval}}
        else:
            if not isinstance(mval, dict):
                raise ConfigError("random needs rank and seed", _line_of(text, "random"))
            rank = _number(mval, "rank", text, int)
            if not 1 <= rank <= grid.n:
                raise ConfigError(f"rank must lie in [1, {grid.n}]", _line_of(text, "rank"))
            unknown = {"mixed": {"random": {"rank": rank, "seed": _number(mval, "seed", text, int)}}}

    ref = raw.get("reference", "flat")
    reference = {"flat": {}} if ref == "flat" else {"pure": _check_pure_spec(ref, text, base, grid)}
    output = raw.get("output", {})
    if not isinstance(output, dict):
        raise ConfigError("output must be an object", _line_of(text, "output"))
    for key, v in output.items():
        if not isinstance(v, str) or os.path.basename(v) != v or not v:
            raise ConfigError(f"output {key!r} must be a plain file name", _line_of(text, key))
    return RunConfig(raw, text, base, grid, statistics, setup, unknown, reference, output)


# --- building physical objects ----------------------------------------------

def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise PhysicsError(f"cannot read {path}: {exc}") from None


def build_pure(spec: dict, grid: Grid, base: Path) -> WaveFunction:
    key, val = next(iter(spec.items()))
    if key == "file":
        psi = core.state_from_json(_read_json(base / val))
        if not psi.grid.matches(grid):
            raise PhysicsError(f"state file {val} lives on a different grid")
        if not psi.is_normalized():
            raise PhysicsError(f"state file {val} is not normalised")
        return psi
    if key == "gaussian":
        return core.gaussian_state(grid, val["center"], val["width"])
    if key == "ramp":
        return core.ramp_state(grid, val["k"])
    return core.random_state(grid, val["seed"])


def build_unknown(cfg: RunConfig):
    kind, spec = next(iter(cfg.unknown.items()))
    if kind == "pure":
        return build_pure(spec, cfg.grid, cfg.base_dir)
    if "file" in spec:
        data = _read_json(cfg.base_dir / spec["file"])
        grid = core._grid_from_json(data)
        entries = core._complex_from_json(data, grid.n * grid.n).reshape(grid.n, grid.n)
        problems = core.physicality_problems(entries)
        if problems:
            raise PhysicsError("density file is not physical: " + "; ".join(problems))
        if not grid.matches(cfg.grid):
            raise PhysicsError("density file lives on a different grid")
        return DensityMatrix(cfg.grid, entries)
    r = spec["random"]
    return core.random_density(cfg.grid.n, r["rank"], r["seed"], grid=cfg.grid)


def build_reference(cfg: RunConfig) -> WaveFunction:
    if "flat" in cfg.reference:
        return core.flat_reference(cfg.grid)
    return build_pure(cfg.reference["pure"], cfg.grid, cfg.base_dir)


def build_setup(cfg: RunConfig) -> optics.TransferMatrix:
    kind = cfg.setup["kind"]
    if kind == "balanced":
        return optics.balanced_splitter()
    if kind == "polarization":
        return optics.polarization_network()
    if kind == "lossy":
        return optics.lossy_tomography_matrix(cfg.setup["eta"])
    return optics.TransferMatrix.from_json(_read_json(cfg.base_dir / cfg.setup["matrix"]))


def simulate(cfg: RunConfig):
    u = build_setup(cfg)
    state = build_unknown(cfg)
    ref = build_reference(cfg)
    if u.m == 4:
        if cfg.setup["kind"] != "polarization":
            raise PhysicsError("custom 4-mode matrices are not supported")
        rho = state.projector() if isinstance(state, WaveFunction) else state
        table = joint_probabilities_polarized(rho, cfg.statistics, ref)
    elif isinstance(state, WaveFunction):
        table = joint_probabilities_pure(u, state, ref, cfg.statistics)
    else:
        table = joint_probabilities_mixed(u, state, ref, cfg.statistics)
    return u, state, ref, table


def table_summary(t: OutcomeTable) -> dict:
    keys = t.outcome_keys()
    p = t.exclusive_probabilities()
    ports = np.array([lab.port for lab in t.labels])
    coincidence = ports[keys[:, 0]] != ports[keys[:, 2]]
    summary = {"total_probability": total_probability(t),
               "outcomes": int(p.size),
               "max_coincidence_probability": float(np.max(p[coincidence]))}
    summary["max_same_port_probability"] = float(np.max(p[~coincidence]))
    return summary


def manifest_for(cfg: RunConfig, u: optics.TransferMatrix, ref: WaveFunction,
                 table: OutcomeTable, files: dict) -> dict:
    flat = np.allclose(ref.amplitudes, core.flat_amplitude(cfg.grid), atol=1e-15, rtol=0)
    return {
        "config_hash": cfg.digest,
        "config": cfg.raw,
        "config_dir": str(cfg.base_dir),
        "grid": cfg.grid.to_dict(),
        "statistics": cfg.statistics.name.lower(),
        "setup": {**cfg.setup, "matrix_echo": u.to_json()},
        "reference": {"flat": True, "c": core.flat_amplitude(cfg.grid)} if flat
        else {"flat": False, "state": core.state_to_json(ref)},
        **table_summary(table),
        "files": files,
    }


# --- table JSON -------------------------------------------------------------

def table_json(t: OutcomeTable, counts: Optional[CountTable] = None) -> dict:
    rows = []
    p = t.exclusive_probabilities()
    for k, (a, i, b, j) in enumerate(t.outcome_keys().tolist()):
        row = [str(t.labels[a]), str(t.labels[b]), i, j, float(p[k])]
        if counts is not None:
            row.append(int(counts.counts[k]))
        rows.append(row)
    out = {"grid": t.grid.to_dict(), "statistics": t.statistics.name.lower(),
           "labels": [str(x) for x in t.labels], "setup_id": t.setup_id,
           "columns": ["alpha", "beta", "i", "j", "p"] + (["count"] if counts else []),
           "outcomes": rows}
    if counts is not None:
        out.update(shots=counts.shots, discarded=counts.discarded)
    return out


def read_table_json(data: dict, statistics: ParticleStatistics) -> OutcomeTable:
    grid = Grid(**data["grid"])
    labels = tuple(core.ModeLabel.parse(x) for x in data["labels"])
    m, n = len(labels), grid.n
    index = {lab: k for k, lab in enumerate(labels)}
    s1, s2 = np.triu_indices(m * n)
    lookup = {(a, b): k for k, (a, b) in enumerate(zip(s1.tolist(), s2.tolist()))}
    p = np.full(s1.size, np.nan)
    has_counts = "count" in data.get("columns", [])
    for row in data["outcomes"]:
        a, b = index[core.ModeLabel.parse(row[0])], index[core.ModeLabel.parse(row[1])]
        key = tuple(sorted((a * n + int(row[2]), b * n + int(row[3]))))
        p[lookup[key]] = row[5] / data["shots"] if has_counts else row[4]
    return table_from_exclusive(grid, statistics, labels, p, data.get("setup_id", ""))


def load_table(path: str, statistics: ParticleStatistics) -> OutcomeTable:
    p = Path(path)
    try:
        if p.suffix == ".json":
            return read_table_json(json.loads(p.read_text()), statistics)
        with p.open() as fh:
            table, _ = read_table_csv(fh, statistics)
        return table
    except OSError as exc:
        raise ConfigError(f"cannot read table {path}: {exc}") from None
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"malformed table {path}: {exc}") from None


# --- output -----------------------------------------------------------------

def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_outputs(out_dir: str, files: dict) -> None:
    """Write every file to a temp name first, then rename all of them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(dir=out, prefix=f".{name}.", suffix=".tmp")
            staged.append((tmp, out / name))
            with os.fdopen(fd, "w") as fh:
                fh.write(text)
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, final in staged:
        os.replace(tmp, final)


def _table_files(cfg: RunConfig, fmt: str, table: OutcomeTable,
                 counts: Optional[CountTable] = None) -> dict:
    ext = "json" if fmt == "json" else "csv"
    table_name = cfg.output.get("table", f"table.{ext}")
    files = {}
    if fmt == "json":
        files[table_name] = _dump(table_json(table))
    else:
        files[table_name] = table_csv_text(table)
    if counts is not None:
        counts_name = cfg.output.get("counts", f"counts.{ext}")
        files[counts_name] = (_dump(table_json(table, counts)) if fmt == "json"
                              else table_csv_text(table, counts))
    return files


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    try:
        u, _, ref, table = simulate(cfg)
    except HomlabError as exc:
        raise PhysicsError(str(exc)) from None
    files = _table_files(cfg, args.format, table)
    manifest = manifest_for(cfg, u, ref, table, {"table": next(iter(files))})
    files[cfg.output.get("manifest", "manifest.json")] = _dump(manifest)
    write_outputs(args.out, files)
    print(f"total_probability={manifest['total_probability']:.17g} "
          f"max_coincidence_probability={manifest['max_coincidence_probability']:.3g}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    if args.shots < 1:
        raise ConfigError("--shots must be positive")
    try:
        u, _, ref, table = simulate(cfg)
        counts = sample_counts(table, args.shots, args.seed)
    except HomlabError as exc:
        raise PhysicsError(str(exc)) from None
    files = _table_files(cfg, args.format, table, counts)
    names = list(files)
    manifest = manifest_for(cfg, u, ref, table, {"table": names[0], "counts": names[1]})
    manifest["sampling"] = {"shots": counts.shots, "seed": args.seed, "discarded": counts.discarded}
    files[cfg.output.get("manifest", "manifest.json")] = _dump(manifest)
    write_outputs(args.out, files)
    print(f"shots={counts.shots} discarded={counts.discarded}")
    return EXIT_OK


# --- reconstruct ------------------------------------------------------------

def _load_setup(path: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read setup {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed setup JSON: {exc.msg}", exc.lineno) from None
    for key in ("grid", "statistics", "setup", "reference"):
        if key not in data:
            raise ConfigError(f"setup descriptor lacks {key!r}")
    return data


def _setup_matrix(desc: dict) -> optics.TransferMatrix:
    return optics.TransferMatrix.from_json(desc["setup"]["matrix_echo"])


def _truth(desc: dict):
    """Regenerate the simulated unknown state from the embedded configuration, if possible."""
    if "config" not in desc:
        return None
    try:
        cfg = parse_config(json.dumps(desc["config"], indent=1), Path(desc.get("config_dir", ".")))
        return build_unknown(cfg)
    except (ConfigError, PhysicsError, HomlabError):
        return None


def _estimate_json(mode: str, est: tomography.RhoEstimate, project: bool, truth) -> dict:
    out = {"mode": mode, **est.grid.to_dict(),
           "re": None if est.re is None else est.re.ravel().tolist(),
           "im": None if est.im is None else est.im.ravel().tolist(),
           "physical": False, "missing": list(est.missing)}
    diagnostics = {k: v for k, v in est.diagnostics.items() if k != "diagonal"}
    diagnostics["masked_fraction"] = 0.0
    if est.complete:
        rho = est.assemble(project=project)
        out["physical"] = rho.physical
        out["density"] = core.density_to_json(rho)
        diagnostics.update(rho.diagnostics)
        if isinstance(truth, WaveFunction):
            truth = truth.projector()
        if isinstance(truth, DensityMatrix):
            diagnostics["truth_error"] = float(np.max(np.abs(rho.entries - truth.entries)))
    elif isinstance(truth, (WaveFunction, DensityMatrix)) and est.re is not None:
        t = truth.projector() if isinstance(truth, WaveFunction) else truth
        diagnostics["truth_error_re"] = float(np.max(np.abs(est.re - t.entries.real)))
    out["diagnostics"] = diagnostics
    return out


def _flat_c(desc: dict) -> float:
    ref = desc["reference"]
    if not ref.get("flat"):
        raise PhysicsError("reconstruction requires a flat reference")
    return float(ref["c"])


def cmd_reconstruct(args) -> int:
    tables = args.table or []
    setups = args.setup or []
    need = 2 if args.mode == "mixed-combined" else 1
    if len(tables) != need or len(setups) != need:
        raise ConfigError(f"mode {args.mode} needs {need} --table/--setup pair(s)")
    descs = [_load_setup(s) for s in setups]
    stats = [ParticleStatistics.parse(d["statistics"]) for d in descs]
    loaded = [load_table(t, s) for t, s in zip(tables, stats)]
    try:
        return _reconstruct(args, descs, loaded)
    except HomlabError as exc:
        raise PhysicsError(str(exc)) from None


def _reconstruct(args, descs, tables) -> int:
    desc, table = descs[0], tables[0]
    c = _flat_c(desc)
    u = _setup_matrix(desc)
    if table.m != u.m:
        raise PhysicsError(f"table has {table.m} output modes but setup matrix has {u.m}")
    truth = _truth(desc)
    mode = args.mode
    if mode == "pure":
        if u.m != 2 or np.max(np.abs(u.entries - optics.balanced_splitter().entries)) > 1e-12:
            raise PhysicsError("pure mode needs a balanced-splitter table")
        amp = tomography.reconstruct_amplitude(table, c)
        cosm = tomography.reconstruct_cos_phase(table, amp, c)
        cand = tomography.pure_candidates(amp, cosm)
        ref = core.flat_reference(table.grid)
        repro = max(joint_probabilities_pure(u, psi, ref, table.statistics).max_abs_difference(table)
                    for psi in cand)
        diag = core.density_diagnostics(cand.first.projector().entries)
        diag.update(masked_fraction=cosm.masked_fraction, reproduction_error=repro,
                    residual=cand.residual)
        if isinstance(truth, WaveFunction):
            diag["candidate_error"] = min(global_phase_distance(truth, psi) for psi in cand)
        out = {"mode": "pure", **table.grid.to_dict(),
               "candidates": [core.state_to_json(psi) for psi in cand],
               "anchor": cand.anchor, "self_conjugate": cand.self_conjugate,
               "undetermined": list(cand.undetermined), "diagnostics": diag}
    elif mode == "mixed-polarization":
        if u.m != 4:
            raise PhysicsError("mixed-polarization needs a polarisation-network table")
        first = "all" if args.first == ["all"] else args.first
        est = tomography.reconstruct_rho_polarized(table, c, args.variant, first=first)
        out = _estimate_json(mode, est, args.project, truth)
        out["variant"] = args.variant
    else:
        if u.m != 2:
            raise PhysicsError(f"{mode} needs a 2-mode table")
        cls = optics.classify_phase_condition(u)
        if mode == "mixed-real":
            if cls is not optics.PhaseCondition.REAL_ACCESS:
                raise PhysicsError(f"mixed-real needs a RealAccess setup, got {cls.value}")
            est = tomography.reconstruct_rho_general(table, u, c)
        elif mode == "mixed-lossy":
            if cls is optics.PhaseCondition.REAL_ACCESS:
                raise PhysicsError("mixed-lossy needs a setup exposing Im rho, got RealAccess")
            est = tomography.reconstruct_rho_general(table, u, c)
            if not est.complete:
                raise PhysicsError(f"setup leaves components undetermined: {est.missing}")
        else:  # mixed-combined
            u2 = _setup_matrix(descs[1])
            t2 = tables[1]
            e1 = tomography.reconstruct_rho_general(table, u, c)
            e2 = tomography.reconstruct_rho_general(t2, u2, _flat_c(descs[1]))
            if e1.re is None or e2.im is None:
                e1, e2 = e2, e1
            if e1.re is None or e2.im is None:
                raise PhysicsError("combined mode needs one table exposing Re and one exposing Im")
            est = tomography.combine_estimates(e1, e2)
        out = _estimate_json(mode, est, args.project, truth)
        out["phase_condition"] = cls.value
    write_outputs(args.out, {args.output_name: _dump(out)})
    print(json.dumps(out["diagnostics"], sort_keys=True))
    return EXIT_OK


# --- roundtrip --------------------------------------------------------------

def run_roundtrip(scheme: str, seed: int, n: Optional[int] = None,
                  statistics: ParticleStatistics = core.BOSON, out=None) -> tuple[bool, float]:
    out = out or sys.stdout
    tol = ROUNDTRIP_TOL[scheme]
    if scheme == "pure":
        grid = Grid(n or 16, -1.0, 1.0)
        psi = core.random_state(grid, seed)
        ref = core.flat_reference(grid)
        table = joint_probabilities_pure(optics.balanced_splitter(), psi, ref, statistics)
        cand = tomography.reconstruct_pure(table, core.flat_amplitude(grid))
        errors = [global_phase_distance(psi, c) for c in cand]
        err = min(errors)
        for k, c in enumerate(cand):
            print(f"candidate[{k}] phase={np.round(np.angle(c.amplitudes), 6).tolist()} "
                  f"error={errors[k]:.3e}", file=out)
    else:
        grid = Grid(n or 8, -1.0, 1.0)
        rank = 1 + seed % grid.n
        rho = core.random_density(grid.n, rank, seed, grid=grid)
        c = core.flat_amplitude(grid)
        ref = core.flat_reference(grid)
        if scheme == "polarization":
            table = joint_probabilities_polarized(rho, statistics)
            ests = [tomography.reconstruct_rho_polarized(table, c, v)
                    for v in ("four_detector", "three_detector")]
        elif scheme == "re-im-combined":
            t_re = joint_probabilities_mixed(optics.balanced_splitter(), rho, ref, statistics)
            lossy = optics.lossy_tomography_matrix(LOSSY_ETA)
            t_im = joint_probabilities_mixed(lossy, rho, ref, statistics)
            ests = [tomography.combine_estimates(
                tomography.reconstruct_rho_general(t_re, optics.balanced_splitter(), c),
                tomography.reconstruct_rho_general(t_im, lossy, c))]
        elif scheme == "lossy-single":
            lossy = optics.lossy_tomography_matrix(LOSSY_ETA)
            table = joint_probabilities_mixed(lossy, rho, ref, statistics)
            ests = [tomography.reconstruct_rho_general(table, lossy, c)]
            print(f"recovered components: re={ests[0].re is not None} im={ests[0].im is not None}",
                  file=out)
        else:
            raise ConfigError(f"unknown scheme {scheme!r}")
        err = max(float(np.max(np.abs(e.re + 1j * e.im - rho.entries))) if e.complete else math.inf
                  for e in ests)
    ok = err < tol
    print(f"scheme={scheme} seed={seed} statistics={statistics.name.lower()} "
          f"max_error={err:.3e} tol={tol:.0e} {'PASS' if ok else 'FAIL'}", file=out)
    return ok, err


def cmd_roundtrip(args) -> int:
    ok, _ = run_roundtrip(args.scheme, args.seed, args.n, ParticleStatistics.parse(args.statistics))
    return EXIT_OK if ok else EXIT_FAIL


# --- check-matrix -----------------------------------------------------------

def cmd_check_matrix(args) -> int:
    if args.matrix:
        try:
            data = json.loads(Path(args.matrix).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read matrix: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON: {exc.msg}", exc.lineno) from None
        try:
            u = optics.TransferMatrix.from_json(data)
        except HomlabError as exc:
            raise PhysicsError(str(exc)) from None
    elif args.config:
        cfg = load_config(args.config)
        try:
            u = build_setup(cfg)
        except HomlabError as exc:
            raise PhysicsError(str(exc)) from None
    else:
        raise ConfigError("check-matrix needs --matrix or --config")
    print(f"matrix: {u.name} (m={u.m})")
    print(f"unitary: {u.is_unitary()} (defect {u.unitarity_defect():.3e})")
    print("singular values: " + " ".join(f"{s:.12g}" for s in u.singular_values()))
    if u.m != 2:
        print("exchange products are defined for 2-mode matrices only")
        return EXIT_OK
    K = optics.exchange_products(u).K
    for a in range(2):
        for b in range(2):
            print(f"K[{a + 1}][{b + 1}] = {K[a, b].real:+.17g} {K[a, b].imag:+.17g}i")
    print(f"phase condition: {optics.classify_phase_condition(u, args.tol).value}")
    return EXIT_OK


# --- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="homlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="compute the exact outcome table")
    sim.add_argument("--config", required=True)
    sim.add_argument("--out", required=True)
    sim.add_argument("--format", choices=("csv", "json"), default="csv")
    sim.set_defaults(func=cmd_simulate)

    smp = sub.add_parser("sample", help="simulate and draw finite-shot counts")
    smp.add_argument("--config", required=True)
    smp.add_argument("--out", required=True)
    smp.add_argument("--shots", type=int, required=True)
    smp.add_argument("--seed", type=int, required=True)
    smp.add_argument("--format", choices=("csv", "json"), default="csv")
    smp.set_defaults(func=cmd_sample)

    rec = sub.add_parser("reconstruct", help="invert a table into a state estimate")
    rec.add_argument("--mode", required=True, choices=(
        "pure", "mixed-real", "mixed-lossy", "mixed-polarization", "mixed-combined"))
    rec.add_argument("--variant", choices=("four_detector", "three_detector"), default="four_detector")
    rec.add_argument("--first", nargs="+", default=["1h"],
                     help="first-detector modes averaged in mixed-polarization mode, or 'all'")
    rec.add_argument("--table", action="append", help="table CSV/JSON (repeat for mixed-combined)")
    rec.add_argument("--setup", action="append", help="manifest JSON describing the setup")
    rec.add_argument("--project", action="store_true", help="project onto physical states")
    rec.add_argument("--out", required=True)
    rec.add_argument("--output-name", default="estimate.json")
    rec.set_defaults(func=cmd_reconstruct)

    rt = sub.add_parser("roundtrip", help="simulate, reconstruct and compare")
    rt.add_argument("--scheme", required=True, choices=tuple(ROUNDTRIP_TOL))
    rt.add_argument("--seed", type=int, required=True)
    rt.add_argument("--n", type=int, default=None)
    rt.add_argument("--statistics", default="boson", choices=("boson", "fermion"))
    rt.set_defaults(func=cmd_roundtrip)

    chk = sub.add_parser("check-matrix", help="print exchange products and phase condition")
    chk.add_argument("--matrix")
    chk.add_argument("--config")
    chk.add_argument("--tol", type=float, default=optics.DEFAULT_PHASE_TOL)
    chk.set_defaults(func=cmd_check_matrix)
    return parser


def _thread_limit():
    value = os.environ.get("HOMLAB_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, int(value)))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PhysicsError, HomlabError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PHYSICS
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
