"""Command-line workflow: solve parameters, abstract, synthesize, simulate and validate.

Exit codes:
  0  success
  2  usage or configuration error
  10 system validation failed
  11 parameter solving failed (infeasible)
  12 abstraction failed
  13 synthesis failed (including no winning initial state)
  14 simulation failed
  15 validation failed
  16 manifest verification failed
"""
from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys as _sys
import time
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .abstraction import (build_grid, build_seq, eta_bar_exact, initial_abstract_states, load_model,
                          save_model)
from .certificates import certificate_record
from .config import ConfigError, ProjectConfig, load_config, validation_set
from .flow import path_to_csv, simulate_open_loop
from .model import SystemFormatError, load_system, validate_system
from .quantizer import (GridParams, InfeasibleError, SeqParams, certified_epsilon_grid,
                        certified_epsilon_sequence, compare_approaches, dwell_steps_for,
                        eta_bar_analytic, grid_inequalities, min_epsilon_grid, select_source_state,
                        sequence_inequality, solve_eta, solve_horizon_N)
from .synthesis import (GridRuntime, RuntimeFault, SequenceRuntime, load_controller, refine_controller,
                        save_controller, strategy_csv, synthesize)
from .validation import check_bisim_sample, estimate_eta_hat, monte_carlo_closed_loop

EXIT = {"config": 2, "validate-system": 10, "solve": 11, "abstract": 12, "synthesize": 13,
        "simulate": 14, "validate": 15, "manifest": 16}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: str):
        self.stage = stage
        super().__init__(f"{stage}: {cause}")


# ------------------------------------------------------------------ output

def _fmt(obj):
    if isinstance(obj, dict):
        return {str(k): _fmt(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_fmt(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_fmt(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _Float(float(obj))
    return obj


class _Float(float):
    pass


class _Dumper(yaml.SafeDumper):
    pass


def _repr_float(dumper, v):
    if v != v:
        text = ".nan"
    elif not np.isfinite(v):
        text = ".inf" if v > 0 else "-.inf"
    else:
        text = f"{v:.17g}"
        if not any(c in text for c in ".en"):
            text += ".0"
    return dumper.represent_scalar("tag:yaml.org,2002:float", text)


_Dumper.add_representer(_Float, _repr_float)


def dump(obj) -> str:
    return yaml.dump(_fmt(obj), Dumper=_Dumper, sort_keys=False, default_flow_style=None, width=120)


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


# ------------------------------------------------------------------ stages

class Session:
    """Holds the state passed between stages of one CLI invocation."""

    def __init__(self, cfg: ProjectConfig, threads: int = 1, log=print):
        self.cfg = cfg
        self.threads = threads
        self.log = log
        self.out = cfg.output_dir
        self.report = None
        self.model = None
        self.ctrl = None
        self.timings = {}
        self.artifacts = []

    @property
    def sys(self):
        return self.cfg.system

    @property
    def certs(self):
        return self.cfg.certificates

    def approach(self) -> str:
        a = self.cfg.approach
        if a != "auto":
            return a
        rep = self.solve()
        return rep["comparison"]["recommendation"]

    def dwell_time(self):
        return self.cfg.parameters.get("dwell_time", self.sys.dwell_time)

    def _artifact(self, path: Path):
        self.artifacts.append(Path(path))
        return path

    def solve(self) -> dict:
        if self.report is not None:
            return self.report
        t0 = time.perf_counter()
        p, sys, certs = self.cfg.parameters, self.sys, self.certs
        tau, eps = float(p["tau"]), float(p["epsilon"])
        dwell = None if certs.common else self.dwell_time()
        nh = dwell_steps_for(sys, tau) if dwell is not None else None
        X0 = sys.domain
        rep = {"system": sys.name, "certificates": certificate_record(certs),
               "tau": tau, "epsilon": eps, "dwell_time": dwell, "dwell_steps": nh}
        approach = self.cfg.approach
        try:
            rep["min_epsilon_grid"] = min_epsilon_grid(tau, certs, sys, X0, dwell)
        except InfeasibleError as e:
            raise StageError("solve", str(e))
        if approach in ("grid", "auto"):
            g = {}
            try:
                er = solve_eta(tau, eps, certs, sys, X0, dwell)
                g.update(solved_eta=er.eta, binding=er.binding, h=er.h,
                         inequalities_at_solved_eta=[i.as_dict() for i in er.inequalities])
            except InfeasibleError as e:
                g["solved_eta"] = None
                g["infeasible"] = str(e)
            eta = p.get("eta", g.get("solved_eta"))
            if eta is None:
                if approach == "grid":
                    raise StageError("solve", g["infeasible"])
            else:
                eta = float(eta)
                g["eta"] = eta
                g["eta_source"] = "config" if "eta" in p else "solved"
                g["inequalities"] = [i.as_dict() for i in grid_inequalities(tau, eta, eps, certs, sys, X0, dwell)]
                g["certified_epsilon"] = certified_epsilon_grid(tau, eta, certs, sys, X0, dwell)
            rep["grid"] = g
        if approach in ("sequence", "auto"):
            s = {}
            x_s = p.get("x_s")
            s["x_s_source"] = "config" if x_s is not None else "selected"
            x_s = np.asarray(x_s if x_s is not None else select_source_state(sys, certs, tau, cfg=self.cfg.flow), float)
            s["x_s"] = x_s
            try:
                hr = solve_horizon_N(tau, eps, x_s, certs, sys, dwell, int(p.get("n_max", 64)), self.cfg.flow)
                s.update(solved_N=hr.N, solved_inequality=hr.inequality.as_dict())
                if hr.previous is not None:
                    s["inequality_at_N_minus_1"] = hr.previous.as_dict()
            except InfeasibleError as e:
                s["solved_N"] = None
                s["infeasible"] = str(e)
            N = p.get("N", s.get("solved_N"))
            if N is None:
                if approach == "sequence":
                    raise StageError("solve", s["infeasible"])
            else:
                N = int(N)
                s["N"] = N
                s["N_source"] = "config" if "N" in p else "solved"
                s["eta_bar_analytic"] = eta_bar_analytic(N, tau, x_s, certs, sys, dwell, self.cfg.flow)
                s["inequality"] = sequence_inequality(N, tau, eps, x_s, certs, sys, dwell, self.cfg.flow).as_dict()
                s["certified_epsilon"] = certified_epsilon_sequence(N, tau, x_s, certs, sys, dwell, cfg=self.cfg.flow)
                s["num_states"] = sys.m ** N * (nh or 1)
            rep["sequence"] = s
        rep["comparison"] = compare_approaches(sys, certs, tau, eps, X0,
                                               rep.get("sequence", {}).get("x_s"), dwell,
                                               int(p.get("n_max", 64)), self.cfg.flow)
        self.report = rep
        self.timings["solve"] = time.perf_counter() - t0
        self._artifact(_write(self.out / "solve_report.yaml", dump(rep)))
        return rep

    def abstract(self):
        if self.model is not None:
            return self.model
        rep = self.solve()
        t0 = time.perf_counter()
        approach = self.approach()
        tau = rep["tau"]
        try:
            if approach == "grid":
                g = rep.get("grid", {})
                if g.get("eta") is None:
                    raise StageError("abstract", "no feasible eta for a grid abstraction")
                params = GridParams(tau, g["eta"], rep["epsilon"], rep["dwell_steps"])
                self.model = build_grid(self.sys, params, g["certified_epsilon"], self.cfg.flow)
            else:
                s = rep.get("sequence", {})
                if s.get("N") is None:
                    raise StageError("abstract", "no feasible N for a sequence abstraction")
                params = SeqParams(tau, s["N"], s["x_s"], rep["epsilon"], rep["dwell_steps"])
                self.model = build_seq(self.sys, params, s["certified_epsilon"], self.cfg.flow,
                                       threads=self.threads)
        except (MemoryError, ValueError) as e:
            raise StageError("abstract", str(e))
        self.timings["abstract"] = time.perf_counter() - t0
        save_model(self.model, self._artifact(self.out / "model.bin"))
        info = {"kind": self.model.kind, "num_states": self.model.num_states, "epsilon": self.model.epsilon}
        if self.model.kind == "sequence":
            info["eta_bar_exact"] = eta_bar_exact(self.model, self.sys, self.cfg.flow)
        self._artifact(_write(self.out / "model_info.yaml", dump(info)))
        return self.model

    def load_or_abstract(self):
        path = self.out / "model.bin"
        if self.model is None and path.exists():
            self.model = load_model(path)
        return self.abstract()

    def synthesize(self, export_strategy: bool = False):
        if self.ctrl is not None:
            return self.ctrl
        model = self.load_or_abstract()
        t0 = time.perf_counter()
        self.ctrl = synthesize(model, self.cfg.spec)
        self.timings["synthesize"] = time.perf_counter() - t0
        save_controller(self.ctrl, self._artifact(self.out / "controller.bin"))
        if export_strategy:
            strategy_csv(self.ctrl, model, self._artifact(self.out / "strategy.csv"))
        info = {"num_states": model.num_states, "num_winning": self.ctrl.num_winning,
                "spec": self.ctrl.spec}
        try:
            info["initial_abstract_state"] = self.initial_state()
        except StageError as e:
            info["initial_abstract_state"] = None
            info["error"] = str(e)
        self._artifact(_write(self.out / "synthesis_info.yaml", dump(info)))
        if info["initial_abstract_state"] is None:
            raise StageError("synthesize", info["error"])
        return self.ctrl

    def load_or_synthesize(self):
        path = self.out / "controller.bin"
        model = self.load_or_abstract()
        if self.ctrl is None and path.exists():
            from .abstraction import model_fingerprint
            c = load_controller(path)
            if c.model_ref == model_fingerprint(model):
                self.ctrl = c
        return self.synthesize()

    def initial_state(self):
        x0 = self.cfg.validation.get("x0")
        if x0 is None:
            raise StageError("synthesize", "validation.x0 is required to pick an initial state")
        model, ctrl = self.model, self.ctrl
        if model.kind == "grid":
            try:
                p, i = GridRuntime(ctrl, model).start(np.asarray(x0, float))
            except RuntimeFault as e:
                raise StageError("synthesize", str(e))
            pt = int(model.nearest_point(x0)[0])
            return int(model.encode(pt, p, i)) if i is not None else pt
        cand = initial_abstract_states(model, x0, self.cfg.parameters["epsilon"], self.certs)
        win = cand[ctrl.winning[cand]]
        if len(win) == 0:
            raise StageError("synthesize", f"none of the {len(cand)} initial abstract states is winning")
        if ctrl.distance is not None:
            win = win[np.lexsort((win, ctrl.distance[win]))]
        return int(win[0])

    def runtime(self):
        ctrl = self.load_or_synthesize()
        if self.model.kind == "sequence":
            return refine_controller(ctrl, self.model, self.initial_state())
        return refine_controller(ctrl, self.model)

    def simulate(self):
        rt = self.runtime()
        v = self.cfg.validation
        tau = self.model.params.tau
        k = int(round(float(v.get("horizon", 10 * tau)) / tau))
        runs = int(v.get("sample_paths", 5))
        x0 = np.asarray(v["x0"], float)
        t0 = time.perf_counter()
        files = []
        if isinstance(rt, SequenceRuntime):
            sched = SequenceRuntime(rt.ctrl, rt.model, rt.state).schedule(k)
            paths = simulate_open_loop(self.sys, x0, sched, tau, runs, self.cfg.seed, self.cfg.flow)
            modes = np.broadcast_to(sched, (runs, k))
        else:
            paths, modes = _grid_paths(self.sys, rt, x0, tau, k, runs, self.cfg.seed, self.cfg.flow)
        for r in range(runs):
            files.append(self._artifact(_write(self.out / f"path_{r}.csv", path_to_csv(paths[r], tau))))
            lines = ["t,mode"] + [f"{j * tau:.17g},{int(m) + 1}" for j, m in enumerate(modes[r])]
            files.append(self._artifact(_write(self.out / f"switching_{r}.csv", "\n".join(lines) + "\n")))
        self.timings["simulate"] = time.perf_counter() - t0
        return files

    def validate(self):
        rt = self.runtime()
        v = self.cfg.validation
        tau = self.model.params.tau
        T = float(v.get("horizon", 10 * tau))
        runs = int(v.get("runs", 1000))
        W = validation_set(self.cfg, self.sys.n)
        t0 = time.perf_counter()
        rep = monte_carlo_closed_loop(self.sys, rt, v["x0"], T, tau, runs, self.cfg.seed, W,
                                      self.cfg.flow, self.threads)
        self._artifact(_write(self.out / "validation.csv", rep.to_csv()))
        summary = rep.summary()
        if self.model.kind == "sequence" and v.get("eta_hat_samples"):
            est = estimate_eta_hat(self.model, self.sys, self.certs, int(v["eta_hat_samples"]),
                                   self.cfg.seed, top_k=int(v.get("eta_hat_pairs", 4)),
                                   confidence=float(v.get("eta_hat_confidence", 1 - 1e-5)), cfg=self.cfg.flow)
            summary["eta_hat"] = {"estimate": est.eta_hat, "half_width": est.half_width,
                                  "samples": est.samples, "analytic_bound": est.analytic_bound,
                                  "pairs": est.pairs}
        self.timings["validate"] = time.perf_counter() - t0
        self._artifact(_write(self.out / "validation_summary.yaml", dump(summary)))
        return summary


def _grid_paths(sys, rt: GridRuntime, x0, tau, k, runs, seed, cfg):
    from .flow import NOISE_BLOCK, NoiseBlock, em_period
    p0, i0 = rt.start(x0)
    nb = NoiseBlock(seed, 0, sys.q_hat)
    X = np.broadcast_to(x0, (NOISE_BLOCK, sys.n)).copy()
    paths = np.empty((NOISE_BLOCK, k + 1, sys.n))
    modes = np.empty((NOISE_BLOCK, k), dtype=np.int64)
    paths[:, 0] = X
    p = np.full(NOISE_BLOCK, p0, dtype=np.int64)
    i = None if i0 is None else np.full(NOISE_BLOCK, i0, dtype=np.int64)
    sub = cfg.sde_substeps_per_tau
    for j in range(k):
        apply, ni, _, nxt = rt.modes(X, p, i)
        modes[:, j] = apply
        X = em_period(sys, X, apply, tau, nb.period(sub, tau / sub))
        if i is not None:
            p, i = nxt, ni
        paths[:, j + 1] = X
    return paths[:runs], modes[:runs]


# ------------------------------------------------------------------ manifest

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for blk in iter(lambda: fh.read(1 << 20), b""):
            h.update(blk)
    return h.hexdigest()


def write_manifest(sess: Session, path: Path) -> Path:
    files = sorted({p.resolve() for p in sess.artifacts})
    man = {"tool": "symswitch", "version": __version__, "python": platform.python_version(),
           "numpy": np.__version__, "scipy": scipy.__version__, "config": str(sess.cfg.path),
           "seed": sess.cfg.seed, "threads": sess.threads, "timings_s": sess.timings,
           "artifacts": [{"file": str(p.relative_to(path.parent.resolve())), "sha256": _sha256(p),
                          "bytes": p.stat().st_size} for p in files]}
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


def verify_manifest(path) -> list[str]:
    """Return a list of problems (empty when every artifact matches its checksum)."""
    path = Path(path)
    man = json.loads(path.read_text())
    problems = []
    for a in man["artifacts"]:
        f = path.parent / a["file"]
        if not f.exists():
            problems.append(f"missing: {a['file']}")
        elif _sha256(f) != a["sha256"]:
            problems.append(f"checksum mismatch: {a['file']}")
    return problems


# ------------------------------------------------------------------ entry

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="symswitch", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=None, help="global random seed (overrides config)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for simulation and model building")
    ap.add_argument("--output-dir", default=None, help="artifact directory (overrides config)")
    sub = ap.add_subparsers(dest="command", required=True)
    vs = sub.add_parser("validate-system", help="check a system description file")
    vs.add_argument("target", help="system file, project config, or bundled config name")
    for name, hlp in [("solve", "solve quantization parameters and print the report"),
                      ("abstract", "build and save the symbolic model"),
                      ("synthesize", "synthesize a controller"),
                      ("simulate", "write closed-loop sample paths as CSV"),
                      ("validate", "Monte Carlo validation of the closed loop"),
                      ("pipeline", "solve, abstract, synthesize, simulate and validate"),
                      ("compare", "compare grid and sequence abstractions")]:
        sp = sub.add_parser(name, help=hlp)
        sp.add_argument("config", help="project config file or bundled name (room, room-relaxed, spiral)")
        if name in ("synthesize", "pipeline"):
            sp.add_argument("--export-strategy", action="store_true", help="also write strategy.csv")
    vm = sub.add_parser("verify-manifest", help="re-check artifact checksums of a pipeline run")
    vm.add_argument("manifest")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "verify-manifest":
            problems = verify_manifest(args.manifest)
            for p in problems:
                print(p)
            print("manifest ok" if not problems else "manifest FAILED")
            return 0 if not problems else EXIT["manifest"]
        if args.command == "validate-system":
            return _validate_system(args.target)
        cfg = load_config(args.config, args.output_dir, args.seed)
    except (ConfigError, SystemFormatError, FileNotFoundError, yaml.YAMLError) as e:
        print(f"error: {e}", file=_sys.stderr)
        return EXIT["config"]
    sess = Session(cfg, max(1, args.threads))
    try:
        if args.command == "solve":
            print(dump(sess.solve()), end="")
        elif args.command == "compare":
            print(dump(sess.solve()["comparison"]), end="")
        elif args.command == "abstract":
            m = sess.abstract()
            print(f"{m.kind} model with {m.num_states} states written to {cfg.output_dir / 'model.bin'}")
        elif args.command == "synthesize":
            c = sess.synthesize(args.export_strategy)
            print(f"winning states: {c.num_winning} of {len(c.winning)}")
        elif args.command == "simulate":
            files = sess.simulate()
            print(f"wrote {len(files)} CSV files to {cfg.output_dir}")
        elif args.command == "validate":
            print(dump(sess.validate()), end="")
        elif args.command == "pipeline":
            sess.solve()
            sess.abstract()
            sess.synthesize(args.export_strategy)
            sess.simulate()
            summary = sess.validate()
            man = write_manifest(sess, cfg.output_dir / "manifest.json")
            print(dump(summary), end="")
            print(f"manifest: {man}")
    except StageError as e:
        print(f"error in stage {e}", file=_sys.stderr)
        return EXIT.get(e.stage, 1)
    except (ConfigError, SystemFormatError) as e:
        print(f"error: {e}", file=_sys.stderr)
        return EXIT["config"]
    except RuntimeFault as e:
        print(f"error in stage simulate: {e}", file=_sys.stderr)
        return EXIT["simulate"]
    return 0


def _validate_system(target: str) -> int:
    p = Path(target)
    try:
        if p.exists():
            doc = yaml.safe_load(p.read_text())
            if isinstance(doc, dict) and "modes" in doc:
                sys = load_system(p)
            else:
                sys = load_config(target).system
        else:
            sys = load_config(target).system
    except (ConfigError, SystemFormatError, ValueError, KeyError) as e:
        print(f"error: {e}", file=_sys.stderr)
        return EXIT["validate-system"]
    diags = validate_system(sys)
    for d in diags:
        print(d)
    if not diags:
        print(f"ok: {sys.name or 'system'} with m={sys.m}, n={sys.n}, q_hat={sys.q_hat}")
    return 0 if not diags else EXIT["validate-system"]


if __name__ == "__main__":
    raise SystemExit(main())
